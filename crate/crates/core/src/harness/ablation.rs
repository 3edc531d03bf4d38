//! Paired-seed ablations on the synthetic benchmark.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use log::info;
use serde::{Deserialize, Serialize};

use crate::aggregation::Modality;
use crate::data::TextVariant;
use crate::error::{Error, Result};
use crate::exec::ExecMode;

use super::config::RunConfig;
use super::metrics::Metrics;
use super::train::{evaluate_novel, fine_tune, meta_train, record_eval};
use super::workspace::Workspace;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AblationKind {
    Modules,
    TextVariants,
    SharedVsDecoupled,
    ModalityOnly,
}

impl AblationKind {
    pub const ALL: [AblationKind; 4] = [
        AblationKind::Modules,
        AblationKind::TextVariants,
        AblationKind::SharedVsDecoupled,
        AblationKind::ModalityOnly,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationKind::Modules => "modules",
            AblationKind::TextVariants => "text-variants",
            AblationKind::SharedVsDecoupled => "shared-vs-decoupled",
            AblationKind::ModalityOnly => "modality-only",
        }
    }

    /// Row label and configuration of every variant, in table order.
    pub fn variants(self, base: &RunConfig) -> Vec<(String, RunConfig)> {
        let with = |label: &str, f: &dyn Fn(&mut RunConfig)| {
            let mut c = base.clone();
            f(&mut c);
            (label.to_string(), c)
        };
        let vision = |c: &mut RunConfig| {
            c.model.modality = Modality::VisionOnly;
            c.model.rectify = false;
        };
        let both = |c: &mut RunConfig, rectify: bool| {
            c.model.modality = Modality::Both;
            c.model.rectify = rectify;
            c.model.decoupled = false;
        };
        match self {
            AblationKind::Modules => vec![
                with("baseline", &vision),
                with("+aggregation", &|c| both(c, false)),
                with("+aggregation+rectify", &|c| both(c, true)),
            ],
            AblationKind::TextVariants => TextVariant::ALL
                .iter()
                .map(|&v| {
                    with(v.label(), &|c| {
                        c.data.text_variant = v;
                        if v == TextVariant::None {
                            vision(c);
                        } else {
                            both(c, true);
                        }
                    })
                })
                .collect(),
            AblationKind::SharedVsDecoupled => vec![
                with("shared", &|c| both(c, true)),
                with("decoupled", &|c| {
                    both(c, true);
                    c.model.decoupled = true;
                }),
            ],
            AblationKind::ModalityOnly => vec![
                with("image-only", &vision),
                with("language-only", &|c| {
                    c.model.modality = Modality::LanguageOnly;
                    c.model.rectify = false;
                }),
            ],
        }
    }
}

impl fmt::Display for AblationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AblationKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        AblationKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation kind {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    /// Fine-tuned novel mAP per seed, same order as the table's seeds.
    pub map: Vec<f64>,
}

impl AblationRow {
    pub fn mean(&self) -> f64 {
        self.map.iter().sum::<f64>() / self.map.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub kind: AblationKind,
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, label: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    /// One line per variant: label, mean, then one column per seed.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("variant,mean");
        for s in &self.seeds {
            out.push_str(&format!(",seed_{s}"));
        }
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!("{},{:.6}", r.label, r.mean()));
            for m in &r.map {
                out.push_str(&format!(",{m:.6}"));
            }
            out.push('\n');
        }
        out
    }
}

/// Meta-train, fine-tune and evaluate one configuration; returns the
/// fine-tuned novel mAP averaged over the configured IoU thresholds.
pub fn benchmark_run(cfg: &RunConfig, mode: ExecMode, metrics: &mut Metrics) -> Result<f64> {
    let start = Instant::now();
    let ws = Workspace::load(cfg)?;
    let ckpt = meta_train(cfg, &ws, mode, metrics)?;
    let ckpt = fine_tune(ckpt, &ws, cfg, mode, metrics)?;
    let report = evaluate_novel(&ckpt.model, &ws, cfg, mode)?;
    record_eval(metrics, "fine-tuned", ckpt.step, &report, start.elapsed().as_secs_f64())?;
    Ok(report.map)
}

/// Runs every variant of `kind` once per seed in `cfg.ablation.seeds`.
pub fn run_ablation(kind: AblationKind, cfg: &RunConfig, mode: ExecMode, metrics: &mut Metrics) -> Result<AblationTable> {
    cfg.validate()?;
    let seeds = cfg.ablation.seeds.clone();
    let mut rows = Vec::new();
    for (label, variant) in kind.variants(cfg) {
        let mut map = Vec::with_capacity(seeds.len());
        for &seed in &seeds {
            let run = RunConfig {
                seed,
                ..variant.clone()
            };
            let m = benchmark_run(&run, mode, metrics)?;
            info!("{kind} {label} seed {seed}: mAP {m:.4}");
            map.push(m);
        }
        rows.push(AblationRow { label, map });
    }
    Ok(AblationTable { kind, seeds, rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kinds_parse_and_have_expected_rows() {
        let cfg = RunConfig::default();
        for k in AblationKind::ALL {
            assert_eq!(k.name().parse::<AblationKind>().unwrap(), k);
            for (_, c) in k.variants(&cfg) {
                c.validate().unwrap();
            }
        }
        assert!("tables".parse::<AblationKind>().is_err());
        let labels = |k: AblationKind| k.variants(&cfg).into_iter().map(|v| v.0).collect::<Vec<_>>();
        assert_eq!(labels(AblationKind::Modules), ["baseline", "+aggregation", "+aggregation+rectify"]);
        assert_eq!(labels(AblationKind::TextVariants), ["none", "name", "rich", "extended"]);
        assert_eq!(labels(AblationKind::SharedVsDecoupled).len(), 2);
    }

    #[test]
    fn csv_layout() {
        let t = AblationTable {
            kind: AblationKind::SharedVsDecoupled,
            seeds: vec![3, 4],
            rows: vec![
                AblationRow {
                    label: "shared".into(),
                    map: vec![0.5, 0.25],
                },
                AblationRow {
                    label: "decoupled".into(),
                    map: vec![0.0, 0.5],
                },
            ],
        };
        let csv = t.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "variant,mean,seed_3,seed_4");
        assert_eq!(lines[1], "shared,0.375000,0.500000,0.250000");
        assert_eq!(lines.len(), 3);
    }
}
