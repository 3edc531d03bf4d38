//! Everything a run reads: base and novel datasets, class descriptions,
//! vocabulary and the embedding provider.

use log::info;

use crate::aggregation::EmbeddingProvider;
use crate::data::{
    build_vocab, generate_synthetic_domains, load_coco_annotations, tokenize, Dataset, Split, TextRegistry, Vocab,
};
use crate::error::{Error, Result};

use super::config::RunConfig;

#[derive(Debug, Clone)]
pub struct Workspace {
    pub base: Dataset,
    pub novel: Dataset,
    pub registry: TextRegistry,
    pub vocab: Vocab,
    pub provider: EmbeddingProvider,
}

impl Workspace {
    /// Loads the configured files, or generates the synthetic domains from
    /// `cfg.synthetic` and `cfg.seed` when no files are configured.
    pub fn load(cfg: &RunConfig) -> Result<Self> {
        let ws = match &cfg.data.base {
            None => Self::synthetic(cfg)?,
            Some(base) => {
                let d = &cfg.data;
                let novel = d.novel.as_ref().expect("validated with base");
                let reg_path = d.registry.as_ref().expect("validated with base");
                let base = load_coco_annotations(base, Split::Base)?;
                let novel = load_coco_annotations(novel, Split::Novel)?;
                for (name, l) in [("base", &base), ("novel", &novel)] {
                    if l.skipped_annotations > 0 {
                        info!("{name}: skipped {} degenerate annotations", l.skipped_annotations);
                    }
                }
                let registry = TextRegistry::load(reg_path)?;
                let vocab = match &d.vocab {
                    Some(p) => Vocab::load(p)?,
                    None => build_vocab(&registry)?,
                };
                let d_in = base
                    .dataset
                    .feature_depth()
                    .ok_or_else(|| Error::Data("base dataset has no images".into()))?;
                let provider = match &d.embeddings {
                    Some(p) => EmbeddingProvider::load_table(p)?,
                    None => EmbeddingProvider::Synthetic { d_in, seed: cfg.seed },
                };
                Workspace {
                    base: base.dataset,
                    novel: novel.dataset,
                    registry,
                    vocab,
                    provider,
                }
            }
        };
        ws.check()?;
        Ok(ws)
    }

    /// Synthetic domains for `cfg`. A configured registry file replaces the
    /// generated descriptions; words outside the generated vocabulary map to
    /// the unknown token.
    pub fn synthetic(cfg: &RunConfig) -> Result<Self> {
        let doms = generate_synthetic_domains(&cfg.synthetic, cfg.seed)?;
        let registry = match &cfg.data.registry {
            Some(p) => TextRegistry::load(p)?,
            None => doms.registry(cfg.data.text_variant).clone(),
        };
        Ok(Workspace {
            base: doms.base,
            novel: doms.novel,
            registry,
            vocab: doms.vocab,
            provider: EmbeddingProvider::Table(doms.embeddings),
        })
    }

    pub fn d_in(&self) -> usize {
        self.base.feature_depth().unwrap_or(0)
    }

    /// Consistency checks run before any training step.
    pub fn check(&self) -> Result<()> {
        self.base.validate()?;
        self.novel.validate()?;
        self.base.check_disjoint(&self.novel)?;
        let d_in = self.d_in();
        if self.novel.feature_depth().is_some_and(|d| d != d_in) {
            return Err(Error::Data("base and novel feature depths differ".into()));
        }
        if self.provider.d_in() != d_in {
            return Err(Error::Data(format!(
                "embedding width {} does not match feature depth {d_in}",
                self.provider.d_in()
            )));
        }
        self.registry.check_covers(&self.base)?;
        self.registry.check_covers(&self.novel)?;
        for e in self.registry.entries() {
            let t = tokenize(&e.description, &self.vocab)?;
            if let EmbeddingProvider::Table(tab) = &self.provider {
                if t.ids.iter().any(|&i| i >= tab.shape()[0]) {
                    return Err(Error::Data(format!(
                        "vocabulary of {} tokens exceeds the {}-row embedding table",
                        self.vocab.len(),
                        tab.shape()[0]
                    )));
                }
            }
        }
        Ok(())
    }
}
