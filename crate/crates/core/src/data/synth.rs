//! Synthetic base/novel detection domains with a controllable feature-space
//! shift and class descriptions whose word embeddings track the class
//! appearance.
//!
//! Each base class gets a Gaussian archetype. Novel class `i` is base class
//! `i` carried through a seeded rotation whose angle is chosen so that the
//! expected archetype displacement equals `shift`. Objects are axis-aligned
//! cell rectangles; interior cells hold the instance vector (archetype plus
//! per-instance noise) plus per-cell noise, exterior cells hold background
//! noise.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::text::{build_vocab, split_words, Provenance, TextRegistry, Vocab};
use super::{Annotation, BoxXyxy, Dataset, FeatureGrid, Split};
use crate::error::{Error, Result};
use crate::nn::param_rng;
use crate::tensor::Tensor;

pub const NOVEL_ID_OFFSET: u32 = 100;
const NOVEL_IMAGE_OFFSET: u64 = 100_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_base_classes: usize,
    pub n_novel_classes: usize,
    pub base_images: usize,
    pub novel_images: usize,
    /// Feature grid is `grid × grid` cells.
    pub grid: usize,
    pub cell_px: f64,
    pub d_in: usize,
    pub max_objects: usize,
    /// Object side lengths in cells, inclusive.
    pub min_size: usize,
    pub max_size: usize,
    /// Per-dimension standard deviation of the base archetypes.
    pub archetype_std: f64,
    /// Expected displacement of a novel archetype from its base counterpart.
    pub shift: f64,
    pub instance_noise: f64,
    pub cell_noise: f64,
    pub background_noise: f64,
    /// Length of the archetype-aligned part of an attribute word embedding.
    pub text_signal: f64,
    /// Same, for class-name tokens.
    pub name_signal: f64,
    pub text_noise: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_base_classes: 6,
            n_novel_classes: 3,
            base_images: 120,
            novel_images: 60,
            grid: 8,
            cell_px: 16.0,
            d_in: 16,
            max_objects: 2,
            min_size: 2,
            max_size: 4,
            archetype_std: 0.75,
            shift: 2.0,
            instance_noise: 1.0,
            cell_noise: 0.5,
            background_noise: 0.5,
            text_signal: 3.0,
            name_signal: 1.0,
            text_noise: 0.3,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("synthetic: {m}")));
        if self.n_base_classes == 0 || self.n_novel_classes == 0 {
            return bad("class counts must be positive");
        }
        if self.n_novel_classes > self.n_base_classes {
            return bad("every novel class needs a base counterpart");
        }
        if self.n_base_classes + self.n_novel_classes > ATTRIBUTES.len() * 4 {
            return bad("too many classes for the attribute word lists");
        }
        if self.base_images == 0 || self.novel_images == 0 {
            return bad("image counts must be positive");
        }
        if self.d_in == 0 || self.grid == 0 || self.max_objects == 0 {
            return bad("grid, d_in and max_objects must be positive");
        }
        if self.min_size == 0 || self.min_size > self.max_size || self.max_size > self.grid {
            return bad("object sizes must satisfy 1 <= min_size <= max_size <= grid");
        }
        let nonneg = [
            self.archetype_std,
            self.shift,
            self.instance_noise,
            self.cell_noise,
            self.background_noise,
            self.text_signal,
            self.name_signal,
            self.text_noise,
        ];
        if nonneg.iter().any(|v| !v.is_finite() || *v < 0.0) || self.cell_px <= 0.0 {
            return bad("noise, signal and shift values must be finite and non-negative");
        }
        Ok(())
    }

    pub fn image_px(&self) -> f64 {
        self.grid as f64 * self.cell_px
    }
}

/// Which description each class carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TextVariant {
    /// No text; the model runs vision-only.
    None,
    Name,
    Rich,
    Extended,
}

impl TextVariant {
    pub const ALL: [TextVariant; 4] = [TextVariant::None, TextVariant::Name, TextVariant::Rich, TextVariant::Extended];

    pub fn label(self) -> &'static str {
        match self {
            TextVariant::None => "none",
            TextVariant::Name => "name",
            TextVariant::Rich => "rich",
            TextVariant::Extended => "extended",
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticDomains {
    pub base: Dataset,
    pub novel: Dataset,
    /// One registry per text variant, each covering base and novel classes.
    /// `TextVariant::None` maps to the name-only registry.
    pub registries: BTreeMap<TextVariant, TextRegistry>,
    pub vocab: Vocab,
    /// Token embedding table, `vocab × d_in`.
    pub embeddings: Tensor,
    pub base_archetypes: Vec<Vec<f64>>,
    pub novel_archetypes: Vec<Vec<f64>>,
}

impl SyntheticDomains {
    pub fn registry(&self, variant: TextVariant) -> &TextRegistry {
        &self.registries[&variant]
    }
}

const ATTRIBUTES: [(&str, &str, &str); 12] = [
    ("round", "crimson", "smooth"),
    ("oval", "amber", "rough"),
    ("spindle", "teal", "leathery"),
    ("starry", "violet", "glossy"),
    ("tubular", "ochre", "bumpy"),
    ("flat", "azure", "velvety"),
    ("spiky", "olive", "scaly"),
    ("conical", "ivory", "porous"),
    ("boxy", "scarlet", "waxy"),
    ("coiled", "indigo", "furry"),
    ("fanned", "golden", "matte"),
    ("ribbed", "silver", "grainy"),
];

const SYLLABLES: [&str; 16] = [
    "zor", "bli", "quam", "ve", "tri", "nox", "pel", "dra", "ku", "mis", "ro", "fen", "sla", "gu", "thi", "war",
];

struct ClassText {
    name: String,
    words: [String; 3],
}

fn class_texts(rng: &mut ChaCha8Rng, n: usize) -> Vec<ClassText> {
    let mut attr_order: Vec<usize> = (0..ATTRIBUTES.len()).collect();
    attr_order.shuffle(rng);
    let mut names: Vec<String> = Vec::new();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let name = loop {
            let len = rng.random_range(2..=3);
            let mut s: String = (0..len).map(|_| SYLLABLES[rng.random_range(0..SYLLABLES.len())]).collect();
            s.push_str("ids");
            if !names.contains(&s) {
                break s;
            }
        };
        names.push(name.clone());
        let (shape, color, texture) = ATTRIBUTES[attr_order[i % ATTRIBUTES.len()]];
        // Past the list length, words get a numeric suffix to stay unique.
        let round = i / ATTRIBUTES.len();
        let w = |s: &str| if round == 0 { s.to_string() } else { format!("{s}{round}") };
        out.push(ClassText {
            name,
            words: [w(shape), w(color), w(texture)],
        });
    }
    out
}

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_uppercase().collect::<String>() + c.as_str(),
        None => String::new(),
    }
}

fn describe(t: &ClassText, variant: TextVariant, other: &ClassText) -> String {
    let [shape, color, texture] = &t.words;
    let rich = format!(
        "{} have {shape}, {color} bodies; their surface is {texture}",
        capitalize(&t.name)
    );
    match variant {
        TextVariant::None | TextVariant::Name => capitalize(&t.name),
        TextVariant::Rich => format!("{rich}."),
        TextVariant::Extended => format!("{rich}; usually seen together with {}.", other.name),
    }
}

fn normal_vec(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * std
        })
        .collect()
}

/// Random orthogonal basis from Gram-Schmidt on a Gaussian matrix; rows are
/// the basis vectors.
fn random_basis(rng: &mut ChaCha8Rng, d: usize) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(d);
    while basis.len() < d {
        let mut v = normal_vec(rng, d, 1.0);
        for b in &basis {
            let p: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-8 {
            basis.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    basis
}

/// Rotates `x` by `theta` in each consecutive pair of basis directions.
fn rotate(basis: &[Vec<f64>], theta: f64, x: &[f64]) -> Vec<f64> {
    let d = x.len();
    let coords: Vec<f64> = basis.iter().map(|b| b.iter().zip(x).map(|(p, q)| p * q).sum()).collect();
    let mut rc = coords.clone();
    let (s, c) = theta.sin_cos();
    for k in 0..d / 2 {
        let (a, b) = (coords[2 * k], coords[2 * k + 1]);
        rc[2 * k] = c * a - s * b;
        rc[2 * k + 1] = s * a + c * b;
    }
    let mut out = vec![0.0; d];
    for (bv, cv) in basis.iter().zip(&rc) {
        out.iter_mut().zip(bv).for_each(|(o, b)| *o += cv * b);
    }
    out
}

fn unit(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    v.iter().map(|x| x / n).collect()
}

fn generate_images(
    cfg: &SynthConfig,
    rng: &mut ChaCha8Rng,
    archetypes: &[Vec<f64>],
    class_ids: &[u32],
    count: usize,
    id_offset: u64,
) -> Result<(Vec<FeatureGrid>, Vec<Vec<Annotation>>)> {
    let (g, d) = (cfg.grid, cfg.d_in);
    let mut images = Vec::with_capacity(count);
    let mut annotations = Vec::with_capacity(count);
    for n in 0..count {
        let mut data = normal_vec(rng, g * g * d, cfg.background_noise);
        let mut occupied = vec![false; g * g];
        let mut anns = Vec::new();
        let n_obj = rng.random_range(1..=cfg.max_objects);
        for _ in 0..n_obj {
            let cls = rng.random_range(0..class_ids.len());
            let mut placed = None;
            for _ in 0..50 {
                let h = rng.random_range(cfg.min_size..=cfg.max_size);
                let w = rng.random_range(cfg.min_size..=cfg.max_size);
                let r0 = rng.random_range(0..=g - h);
                let c0 = rng.random_range(0..=g - w);
                let free = (r0..r0 + h).all(|r| (c0..c0 + w).all(|c| !occupied[r * g + c]));
                if free {
                    placed = Some((r0, c0, h, w));
                    break;
                }
            }
            let Some((r0, c0, h, w)) = placed else { continue };
            let inst: Vec<f64> = archetypes[cls]
                .iter()
                .zip(normal_vec(rng, d, cfg.instance_noise))
                .map(|(a, z)| a + z)
                .collect();
            for r in r0..r0 + h {
                for c in c0..c0 + w {
                    occupied[r * g + c] = true;
                    let noise = normal_vec(rng, d, cfg.cell_noise);
                    let cell = &mut data[(r * g + c) * d..(r * g + c + 1) * d];
                    for ((x, v), z) in cell.iter_mut().zip(&inst).zip(noise) {
                        *x = v + z;
                    }
                }
            }
            let px = cfg.cell_px;
            anns.push(Annotation {
                class_id: class_ids[cls],
                bbox: BoxXyxy::new(c0 as f64 * px, r0 as f64 * px, (c0 + w) as f64 * px, (r0 + h) as f64 * px),
            });
        }
        let grid = Tensor::new(vec![g, g, d], data)?;
        let id = id_offset + n as u64 + 1;
        images.push(FeatureGrid::new(id, grid, cfg.image_px(), cfg.image_px(), "synthetic")?);
        annotations.push(anns);
    }
    Ok((images, annotations))
}

pub fn generate_synthetic_domains(cfg: &SynthConfig, seed: u64) -> Result<SyntheticDomains> {
    cfg.validate()?;
    let d = cfg.d_in;
    let mut arch_rng = param_rng(seed, "synth.archetypes");
    let base_archetypes: Vec<Vec<f64>> = (0..cfg.n_base_classes)
        .map(|_| normal_vec(&mut arch_rng, d, cfg.archetype_std))
        .collect();
    let basis = random_basis(&mut arch_rng, d);
    // A rotation by theta in every plane moves a vector of length r by
    // 2·r·sin(theta/2); r is taken at its expected value.
    let radius = cfg.archetype_std * (d as f64).sqrt();
    let theta = if radius > 0.0 {
        2.0 * (cfg.shift / (2.0 * radius)).min(1.0).asin()
    } else {
        0.0
    };
    let novel_archetypes: Vec<Vec<f64>> = base_archetypes[..cfg.n_novel_classes]
        .iter()
        .map(|a| rotate(&basis, theta, a))
        .collect();

    let mut text_rng = param_rng(seed, "synth.text");
    let texts = class_texts(&mut text_rng, cfg.n_base_classes + cfg.n_novel_classes);
    let (base_texts, novel_texts) = texts.split_at(cfg.n_base_classes);

    let base_ids: Vec<u32> = (1..=cfg.n_base_classes as u32).collect();
    let novel_ids: Vec<u32> = (1..=cfg.n_novel_classes as u32).map(|i| i + NOVEL_ID_OFFSET).collect();

    let mut registries = BTreeMap::new();
    for variant in TextVariant::ALL {
        let prov = match variant {
            TextVariant::None | TextVariant::Name => Provenance::NameOnly,
            TextVariant::Rich => Provenance::ManualRich,
            TextVariant::Extended => Provenance::ExtendedRich,
        };
        let mut reg = TextRegistry::new();
        for group in [base_texts, novel_texts] {
            for (i, t) in group.iter().enumerate() {
                let other = &group[(i + 1) % group.len()];
                reg.insert(&t.name, prov, &describe(t, variant, other))?;
            }
        }
        registries.insert(variant, reg);
    }

    let mut all = TextRegistry::new();
    for v in [TextVariant::Name, TextVariant::Rich, TextVariant::Extended] {
        for e in registries[&v].entries() {
            all.insert(&format!("{}#{v:?}", e.class_name), e.provenance, &e.description)?;
        }
    }
    let vocab = build_vocab(&all)?;

    // Attribute words point along their class archetype in its own domain;
    // names carry a weaker copy of the same direction; everything else is
    // noise.
    let mut signal: BTreeMap<String, (f64, Vec<f64>)> = BTreeMap::new();
    let domains = base_texts
        .iter()
        .zip(&base_archetypes)
        .chain(novel_texts.iter().zip(&novel_archetypes));
    for (t, a) in domains {
        let u = unit(a);
        for w in &t.words {
            signal.insert(w.clone(), (cfg.text_signal, u.clone()));
        }
        for w in split_words(&t.name) {
            signal.insert(w, (cfg.name_signal, u.clone()));
        }
    }
    let mut emb_rng = param_rng(seed, "synth.embeddings");
    let mut table = Vec::with_capacity(vocab.len() * d);
    for id in 0..vocab.len() {
        let tok = vocab.token(id).expect("id in range");
        let mut row = normal_vec(&mut emb_rng, d, cfg.text_noise);
        if let Some((scale, u)) = signal.get(tok) {
            row.iter_mut().zip(u).for_each(|(x, v)| *x += scale * v);
        }
        table.extend(row);
    }
    let embeddings = Tensor::new(vec![vocab.len(), d], table)?;

    let mut img_rng = param_rng(seed, "synth.base_images");
    let (images, annotations) = generate_images(cfg, &mut img_rng, &base_archetypes, &base_ids, cfg.base_images, 0)?;
    let base = Dataset {
        images,
        annotations,
        classes: base_ids.iter().zip(base_texts).map(|(i, t)| (*i, t.name.clone())).collect(),
        split: Split::Base,
    };
    let mut img_rng = param_rng(seed, "synth.novel_images");
    let (images, annotations) = generate_images(
        cfg,
        &mut img_rng,
        &novel_archetypes,
        &novel_ids,
        cfg.novel_images,
        NOVEL_IMAGE_OFFSET,
    )?;
    let novel = Dataset {
        images,
        annotations,
        classes: novel_ids.iter().zip(novel_texts).map(|(i, t)| (*i, t.name.clone())).collect(),
        split: Split::Novel,
    };
    base.validate()?;
    novel.validate()?;
    base.check_disjoint(&novel)?;

    Ok(SyntheticDomains {
        base,
        novel,
        registries,
        vocab,
        embeddings,
        base_archetypes,
        novel_archetypes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::tokenize;

    /// Mean of the cells under a cell-aligned box.
    fn instance_feature(g: &FeatureGrid, b: &BoxXyxy, px: f64) -> Vec<f64> {
        let d = g.depth();
        let mut acc = vec![0.0; d];
        let mut n = 0.0;
        for r in (b.y1 / px) as usize..(b.y2 / px) as usize {
            for c in (b.x1 / px) as usize..(b.x2 / px) as usize {
                acc.iter_mut().zip(g.cell(r, c)).for_each(|(a, v)| *a += v);
                n += 1.0;
            }
        }
        acc.iter().map(|a| a / n).collect()
    }

    fn instances(ds: &Dataset, px: f64) -> Vec<(u32, Vec<f64>)> {
        let mut out = Vec::new();
        for (g, anns) in ds.images.iter().zip(&ds.annotations) {
            for a in anns {
                out.push((a.class_id, instance_feature(g, &a.bbox, px)));
            }
        }
        out
    }

    /// Nearest-centroid oracle: centroids from the first half of base
    /// instances; accuracy on the second half of base and on all novel
    /// instances, where novel class `i` counts as correct when mapped to
    /// base class `i`. Returns the accuracy drop in points.
    fn centroid_gap(doms: &SyntheticDomains, px: f64) -> f64 {
        let base = instances(&doms.base, px);
        let (train, test) = base.split_at(base.len() / 2);
        let ids = doms.base.class_ids();
        let centroids: Vec<Vec<f64>> = ids
            .iter()
            .map(|id| {
                let rows: Vec<&Vec<f64>> = train.iter().filter(|(c, _)| c == id).map(|(_, v)| v).collect();
                let mut m = vec![0.0; rows[0].len()];
                for r in &rows {
                    m.iter_mut().zip(*r).for_each(|(a, v)| *a += v / rows.len() as f64);
                }
                m
            })
            .collect();
        let predict = |v: &[f64]| {
            let dist = |c: &Vec<f64>| c.iter().zip(v).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
            (0..centroids.len())
                .min_by(|&a, &b| dist(&centroids[a]).total_cmp(&dist(&centroids[b])))
                .unwrap()
        };
        let base_acc =
            test.iter().filter(|(c, v)| ids[predict(v)] == *c).count() as f64 / test.len() as f64;
        let novel = instances(&doms.novel, px);
        let novel_acc = novel
            .iter()
            .filter(|(c, v)| ids[predict(v)] == *c - NOVEL_ID_OFFSET)
            .count() as f64
            / novel.len() as f64;
        100.0 * (base_acc - novel_acc)
    }

    fn cfg(shift: f64) -> SynthConfig {
        SynthConfig {
            shift,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn deterministic_under_seed() {
        let a = generate_synthetic_domains(&cfg(2.0), 11).unwrap();
        let b = generate_synthetic_domains(&cfg(2.0), 11).unwrap();
        assert_eq!(a.base, b.base);
        assert_eq!(a.novel, b.novel);
        assert_eq!(a.embeddings, b.embeddings);
        assert_eq!(a.vocab, b.vocab);
        let c = generate_synthetic_domains(&cfg(2.0), 12).unwrap();
        assert_ne!(a.base, c.base);
    }

    #[test]
    fn rejects_zero_classes() {
        let c = SynthConfig {
            n_base_classes: 0,
            ..SynthConfig::default()
        };
        assert!(matches!(generate_synthetic_domains(&c, 0), Err(Error::Config(_))));
    }

    #[test]
    fn zero_shift_keeps_archetypes() {
        let doms = generate_synthetic_domains(&cfg(0.0), 3).unwrap();
        for (b, n) in doms.base_archetypes.iter().zip(&doms.novel_archetypes) {
            for (x, y) in b.iter().zip(n) {
                assert!((x - y).abs() < 1e-9);
            }
        }
        // Two-sample mean test on pooled instance features, per dimension,
        // between base classes with counterparts and their novel twins.
        let px = SynthConfig::default().cell_px;
        let base: Vec<Vec<f64>> = instances(&doms.base, px)
            .into_iter()
            .filter(|(c, _)| (*c as usize) <= doms.novel_archetypes.len())
            .map(|(_, v)| v)
            .collect();
        let novel: Vec<Vec<f64>> = instances(&doms.novel, px).into_iter().map(|(_, v)| v).collect();
        let stats = |xs: &[Vec<f64>], j: usize| {
            let n = xs.len() as f64;
            let m = xs.iter().map(|v| v[j]).sum::<f64>() / n;
            let var = xs.iter().map(|v| (v[j] - m).powi(2)).sum::<f64>() / (n - 1.0);
            (m, var / n)
        };
        for j in 0..16 {
            let (mb, vb) = stats(&base, j);
            let (mn, vn) = stats(&novel, j);
            let z = (mb - mn) / (vb + vn).sqrt();
            assert!(z.abs() < 4.0, "dim {j}: z = {z}");
        }
    }

    #[test]
    fn large_shift_breaks_base_centroids() {
        // Observed gap with this seed and defaults: about 56 points.
        let doms = generate_synthetic_domains(&cfg(4.0), 0).unwrap();
        let gap = centroid_gap(&doms, 16.0);
        assert!(gap >= 30.0, "gap {gap}");
    }

    #[test]
    fn centroid_gap_grows_with_shift() {
        let mut ordered = 0;
        for seed in 0..5 {
            let gaps: Vec<f64> = [0.0, 1.0, 2.0, 4.0]
                .iter()
                .map(|&s| centroid_gap(&generate_synthetic_domains(&cfg(s), seed).unwrap(), 16.0))
                .collect();
            if gaps.windows(2).all(|w| w[0] <= w[1] + 2.0) {
                ordered += 1;
            }
        }
        assert!(ordered >= 3, "{ordered}/5 seeds monotone");
    }

    #[test]
    fn registries_cover_all_classes() {
        let doms = generate_synthetic_domains(&SynthConfig::default(), 5).unwrap();
        for v in TextVariant::ALL {
            let reg = doms.registry(v);
            reg.check_covers(&doms.base).unwrap();
            reg.check_covers(&doms.novel).unwrap();
            for e in reg.entries() {
                let t = tokenize(&e.description, &doms.vocab).unwrap();
                assert!(!t.ids.contains(&crate::data::text::OOV));
            }
        }
        let name = doms.registry(TextVariant::Name).entries()[0].description.clone();
        let rich = doms.registry(TextVariant::Rich).entries()[0].description.clone();
        let ext = doms.registry(TextVariant::Extended).entries()[0].description.clone();
        assert!(rich.starts_with(&name) && ext.len() > rich.len());
        assert_eq!(doms.embeddings.shape(), &[doms.vocab.len(), 16]);
    }

    #[test]
    fn attribute_words_align_with_archetypes() {
        let doms = generate_synthetic_domains(&SynthConfig::default(), 9).unwrap();
        let e = &doms.registry(TextVariant::Rich).entries()[0];
        let t = tokenize(&e.description, &doms.vocab).unwrap();
        let u = unit(&doms.base_archetypes[0]);
        // The best-aligned token in the description tracks the archetype.
        let best = t
            .ids
            .iter()
            .map(|&id| doms.embeddings.row(id).iter().zip(&u).map(|(a, b)| a * b).sum::<f64>())
            .fold(f64::MIN, f64::max);
        assert!(best > 2.0, "{best}");
    }
}
