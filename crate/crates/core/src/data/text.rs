//! Class description registries, the tokenizer and the vocabulary.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const OOV: usize = 3;
const SPECIALS: [&str; 4] = ["<pad>", "<s>", "</s>", "<oov>"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Provenance {
    #[serde(rename = "name-only")]
    NameOnly,
    #[serde(rename = "manual-rich")]
    ManualRich,
    #[serde(rename = "extended-rich")]
    ExtendedRich,
    #[serde(rename = "external-LLM")]
    ExternalLlm,
}

impl Provenance {
    pub fn tag(self) -> &'static str {
        match self {
            Provenance::NameOnly => "name-only",
            Provenance::ManualRich => "manual-rich",
            Provenance::ExtendedRich => "extended-rich",
            Provenance::ExternalLlm => "external-LLM",
        }
    }
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Provenance {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "name-only" => Ok(Provenance::NameOnly),
            "manual-rich" => Ok(Provenance::ManualRich),
            "extended-rich" => Ok(Provenance::ExtendedRich),
            "external-LLM" => Ok(Provenance::ExternalLlm),
            other => Err(format!("unknown provenance tag {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TextEntry {
    pub class_name: String,
    pub provenance: Provenance,
    pub description: String,
}

/// Class name → description, in file order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TextRegistry {
    entries: Vec<TextEntry>,
}

impl TextRegistry {
    pub fn new() -> Self {
        TextRegistry::default()
    }

    /// Adds or replaces the entry for `class_name`.
    pub fn insert(&mut self, class_name: &str, provenance: Provenance, description: &str) -> Result<()> {
        if description.trim().is_empty() {
            return Err(Error::Data(format!("empty description for class {class_name:?}")));
        }
        let entry = TextEntry {
            class_name: class_name.to_string(),
            provenance,
            description: description.to_string(),
        };
        match self.entries.iter_mut().find(|e| e.class_name == class_name) {
            Some(e) => *e = entry,
            None => self.entries.push(entry),
        }
        Ok(())
    }

    pub fn get(&self, class_name: &str) -> Option<&TextEntry> {
        self.entries.iter().find(|e| e.class_name == class_name)
    }

    pub fn entries(&self) -> &[TextEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Description for a dataset class id, resolved through the class table.
    pub fn description(&self, dataset: &Dataset, class_id: u32) -> Result<&str> {
        let name = dataset
            .class_name(class_id)
            .ok_or_else(|| Error::Data(format!("unknown class id {class_id}")))?;
        self.get(name)
            .map(|e| e.description.as_str())
            .ok_or_else(|| Error::Data(format!("text registry has no entry for class {name:?} (id {class_id})")))
    }

    pub fn check_covers(&self, dataset: &Dataset) -> Result<()> {
        for id in dataset.classes.keys() {
            self.description(dataset, *id)?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut reg = TextRegistry::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let mut parts = line.splitn(3, '\t');
            let (Some(name), Some(tag), Some(desc)) = (parts.next(), parts.next(), parts.next()) else {
                return Err(Error::Data(format!("registry line {}: expected 3 tab-separated fields", n + 1)));
            };
            let prov = tag
                .parse::<Provenance>()
                .map_err(|e| Error::Data(format!("registry line {}: {e}", n + 1)))?;
            reg.insert(name, prov, desc)
                .map_err(|e| Error::Data(format!("registry line {}: {e}", n + 1)))?;
        }
        Ok(reg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&format!("{}\t{}\t{}\n", e.class_name, e.provenance, e.description));
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}

/// Token ids of one description, bracketed by `<s>` and `</s>`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TokenSeq {
    pub ids: Vec<usize>,
}

impl TokenSeq {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Default for Vocab {
    fn default() -> Self {
        Vocab::new()
    }
}

impl Vocab {
    /// A vocabulary holding only the four special tokens.
    pub fn new() -> Self {
        let mut v = Vocab {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        for s in SPECIALS {
            v.push(s);
        }
        v
    }

    fn push(&mut self, tok: &str) -> usize {
        if let Some(&id) = self.index.get(tok) {
            return id;
        }
        let id = self.tokens.len();
        self.tokens.push(tok.to_string());
        self.index.insert(tok.to_string(), id);
        id
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, tok: &str) -> usize {
        self.index.get(tok).copied().unwrap_or(OOV)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn extend_from_text(&mut self, text: &str) {
        for w in split_words(text) {
            self.push(&w);
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = self.tokens.join("\n");
        out.push('\n');
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let lines: Vec<&str> = text.lines().collect();
        if lines.len() < SPECIALS.len() || lines[..SPECIALS.len()] != SPECIALS {
            return Err(Error::Data(format!("{}: vocabulary must start with the special tokens", path.display())));
        }
        let mut v = Vocab::new();
        for l in &lines[SPECIALS.len()..] {
            if v.index.contains_key(*l) {
                return Err(Error::Data(format!("{}: duplicate token {l:?}", path.display())));
            }
            v.push(l);
        }
        Ok(v)
    }
}

/// Lowercases and splits on whitespace; every punctuation character becomes a
/// token of its own.
pub fn split_words(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for ch in text.chars().flat_map(char::to_lowercase) {
        if ch.is_whitespace() || ch.is_ascii_punctuation() {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
            if ch.is_ascii_punctuation() {
                out.push(ch.to_string());
            }
        } else {
            cur.push(ch);
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

pub fn tokenize(text: &str, vocab: &Vocab) -> Result<TokenSeq> {
    if text.trim().is_empty() {
        return Err(Error::Data("cannot tokenize empty text".into()));
    }
    let mut ids = vec![BOS];
    ids.extend(split_words(text).iter().map(|w| vocab.id(w)));
    ids.push(EOS);
    Ok(TokenSeq { ids })
}

/// Special tokens, then registry tokens in first-appearance order.
pub fn build_vocab(registry: &TextRegistry) -> Result<Vocab> {
    if registry.is_empty() {
        return Err(Error::Data("cannot build a vocabulary from an empty registry".into()));
    }
    let mut v = Vocab::new();
    for e in registry.entries() {
        v.extend_from_text(&e.description);
    }
    Ok(v)
}

#[cfg(test)]
mod tests {
    use super::*;

    const SEA_CUCUMBER_RICH: &str =
        "Sea cucumbers have sausage-shape, usually resemble caterpillars; their mouth is surrounded by tentacles";

    fn registry(lines: &[(&str, &str)]) -> TextRegistry {
        let mut r = TextRegistry::new();
        for (n, d) in lines {
            r.insert(n, Provenance::ManualRich, d).unwrap();
        }
        r
    }

    #[test]
    fn name_tokenizes_to_four() {
        let reg = registry(&[("sea cucumbers", "Sea cucumbers")]);
        let v = build_vocab(&reg).unwrap();
        let t = tokenize("Sea cucumbers", &v).unwrap();
        assert_eq!(t.ids, vec![BOS, v.id("sea"), v.id("cucumbers"), EOS]);
        assert_eq!(t.len(), 4);
    }

    #[test]
    fn empty_text_rejected() {
        assert!(tokenize("", &Vocab::new()).is_err());
        assert!(tokenize("   ", &Vocab::new()).is_err());
    }

    #[test]
    fn rich_sentence_length_matches_counting_oracle() {
        // Independent count: scan character classes without building tokens.
        let mut count = 0;
        let mut in_word = false;
        for ch in SEA_CUCUMBER_RICH.chars() {
            if ch.is_alphanumeric() {
                if !in_word {
                    count += 1;
                }
                in_word = true;
            } else {
                in_word = false;
                if !ch.is_whitespace() {
                    count += 1;
                }
            }
        }
        assert_eq!(count, 17);
        let reg = registry(&[("sea cucumbers", SEA_CUCUMBER_RICH)]);
        let v = build_vocab(&reg).unwrap();
        let t = tokenize(SEA_CUCUMBER_RICH, &v).unwrap();
        assert_eq!(t.len(), count + 2);
        assert!(t.ids.iter().all(|&i| i != OOV && i < v.len()));
    }

    #[test]
    fn vocab_counts() {
        let v = build_vocab(&registry(&[("a", "red box")])).unwrap();
        assert_eq!(v.len(), 6);
        assert_eq!(v.id("red"), 4);
        assert_eq!(v.id("box"), 5);
        let v = build_vocab(&registry(&[("a", "red box red"), ("b", "box Red")])).unwrap();
        assert_eq!(v.len(), 6);
        assert_eq!(v.id("unseen"), OOV);
    }

    #[test]
    fn vocab_round_trip() {
        let reg = registry(&[("sea cucumbers", SEA_CUCUMBER_RICH), ("urchins", "Round, spiny shells.")]);
        let v = build_vocab(&reg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("vocab.txt");
        v.save(&p).unwrap();
        let back = Vocab::load(&p).unwrap();
        assert_eq!(back, v);
        for e in reg.entries() {
            assert_eq!(tokenize(&e.description, &v).unwrap(), tokenize(&e.description, &back).unwrap());
        }
    }

    #[test]
    fn registry_file_round_trip() {
        let text = "sea cucumbers\tmanual-rich\tSea cucumbers have sausage-shape\nurchins\tname-only\tUrchins\n";
        let reg = TextRegistry::parse(text).unwrap();
        assert_eq!(reg.len(), 2);
        assert_eq!(reg.get("urchins").unwrap().provenance, Provenance::NameOnly);
        assert_eq!(reg.to_text(), text);
        assert!(TextRegistry::parse("x\tbogus\ty\n").is_err());
        assert!(TextRegistry::parse("x\tname-only\t \n").is_err());
        assert!(TextRegistry::parse("only-two\tfields\n").is_err());
    }
}
