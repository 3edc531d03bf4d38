//! Run configuration, read from TOML. Unknown keys are rejected at every
//! level so a typo cannot silently fall back to a default.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::aggregation::Modality;
use crate::data::{SynthConfig, TextVariant};
use crate::error::{Error, Result};
use crate::model::{LossConfig, ModelConfig};
use crate::optim::OptimConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Meta-training optimizer steps on base episodes.
    pub steps: usize,
    /// Episodes averaged per optimizer step.
    pub batch_size: usize,
    pub fine_tune_steps: usize,
    /// Alternate base episodes with novel ones while fine-tuning.
    pub interleave_base: bool,
    /// Emit a metrics record every this many steps; 0 logs only the last.
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 300,
            batch_size: 1,
            fine_tune_steps: 100,
            interleave_base: true,
            log_every: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EpisodeConfig {
    pub n_way: usize,
    pub k_shot: usize,
    pub n_query: usize,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        EpisodeConfig {
            n_way: 3,
            k_shot: 5,
            n_query: 2,
        }
    }
}

/// On-disk inputs. When `base` is unset the synthetic generator is used.
/// Relative paths resolve against the config file's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Description set drawn from the synthetic generator. The `none`
    /// variant needs a vision-only model.
    pub text_variant: TextVariant,
    pub base: Option<PathBuf>,
    pub novel: Option<PathBuf>,
    /// Tab-separated class descriptions.
    pub registry: Option<PathBuf>,
    /// One token per line; built from the registry when absent.
    pub vocab: Option<PathBuf>,
    /// Embedding table; seeded synthetic embeddings when absent.
    pub embeddings: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            text_variant: TextVariant::Rich,
            base: None,
            novel: None,
            registry: None,
            vocab: None,
            embeddings: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub iou_thresholds: Vec<f64>,
    /// Score cut-off for `infer`; mAP always ranks every query.
    pub score_threshold: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            iou_thresholds: vec![0.5],
            score_threshold: 0.3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    /// Paired seeds; every variant runs once per seed.
    pub seeds: Vec<u64>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            seeds: vec![0, 1, 2, 3, 4],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub optim: OptimConfig,
    pub train: TrainConfig,
    pub episode: EpisodeConfig,
    pub loss: LossConfig,
    pub data: DataConfig,
    pub synthetic: SynthConfig,
    pub eval: EvalConfig,
    pub ablation: AblationConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            model: ModelConfig::default(),
            optim: OptimConfig::default(),
            train: TrainConfig::default(),
            episode: EpisodeConfig::default(),
            loss: LossConfig::default(),
            data: DataConfig::default(),
            synthetic: SynthConfig::default(),
            eval: EvalConfig::default(),
            ablation: AblationConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads and validates a config file, resolving data paths against its
    /// directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })?;
        let dir = path.parent().unwrap_or(Path::new("."));
        let d = &mut cfg.data;
        for p in [&mut d.base, &mut d.novel, &mut d.registry, &mut d.vocab, &mut d.embeddings]
            .into_iter()
            .flatten()
        {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.optim.validate()?;
        self.loss.validate()?;
        self.synthetic.validate()?;
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        let e = &self.episode;
        if e.n_way == 0 || e.k_shot == 0 || e.n_query == 0 {
            return bad("episode: n_way, k_shot and n_query must be positive");
        }
        if e.n_way > self.model.n_classes {
            return bad("episode: n_way exceeds model.n_classes");
        }
        if self.train.batch_size == 0 {
            return bad("train: batch_size must be positive");
        }
        let t = &self.eval.iou_thresholds;
        if t.is_empty() || t.iter().any(|v| !(*v > 0.0 && *v <= 1.0)) {
            return bad("eval: iou_thresholds must be non-empty and inside (0, 1]");
        }
        if !(0.0..1.0).contains(&self.eval.score_threshold) {
            return bad("eval: score_threshold must lie in [0, 1)");
        }
        if self.ablation.seeds.is_empty() {
            return bad("ablation: at least one seed is required");
        }
        let d = &self.data;
        if d.base.is_some() != d.novel.is_some() || (d.base.is_some() && d.registry.is_none()) {
            return bad("data: base, novel and registry must be given together");
        }
        if self.data.text_variant == TextVariant::None
            && (self.model.modality != Modality::VisionOnly || self.model.rectify)
        {
            return bad("data: text_variant none needs a vision-only model without rectify");
        }
        Ok(())
    }
}
