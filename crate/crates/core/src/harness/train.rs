//! Episodic meta-training on base classes, fine-tuning on k-shot novel
//! classes, and novel-class evaluation.

use std::collections::BTreeMap;
use std::time::Instant;

use log::{debug, info};

use crate::data::{evaluation_episode, few_shot_split, sample_episode, Dataset, Episode};
use crate::detr::{postprocess, Detection};
use crate::error::{Error, Result};
use crate::exec::ExecMode;
use crate::model::{LossParts, Model};
use crate::optim::Optimizer;
use crate::tensor::GradBuffer;

use super::config::RunConfig;
use super::evaluate::{evaluate_map, GroundTruthSet, MapReport};
use super::metrics::{Metrics, MetricsRecord};
use super::workspace::Workspace;

/// Complete training state. Episodes are drawn from a counter-based
/// stream, so `(config.seed, episodes)` is the whole RNG state.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub model: Model,
    pub optim: Optimizer,
    /// Optimizer steps taken across all stages.
    pub step: u64,
    /// Episodes drawn so far.
    pub episodes: u64,
    /// Classes seen during meta-training.
    pub base_classes: BTreeMap<u32, String>,
}

/// Seed of the `counter`-th episode of a run.
pub fn episode_seed(seed: u64, counter: u64) -> u64 {
    // splitmix64 finalizer over a Weyl sequence.
    let mut z = seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(counter.wrapping_add(1).wrapping_mul(0xBF58_476D_1CE4_E5B9));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl Checkpoint {
    /// Fresh state for `cfg` over the workspace's feature width and
    /// vocabulary.
    pub fn init(cfg: &RunConfig, ws: &Workspace) -> Result<Self> {
        cfg.validate()?;
        let model = Model::new(cfg.model.clone(), ws.d_in(), ws.vocab.len(), cfg.seed)?;
        Ok(Checkpoint {
            config: cfg.clone(),
            model,
            optim: Optimizer::new(cfg.optim.clone()),
            step: 0,
            episodes: 0,
            base_classes: ws.base.classes.clone(),
        })
    }

    fn next_seed(&mut self) -> u64 {
        let s = episode_seed(self.config.seed, self.episodes);
        self.episodes += 1;
        s
    }

    /// Runs `steps` optimizer steps; `sample(step, seed)` draws one episode.
    fn run<F>(&mut self, ws: &Workspace, stage: &str, steps: usize, mode: ExecMode, metrics: &mut Metrics, sample: F) -> Result<()>
    where
        F: Fn(u64, u64) -> Result<Episode>,
    {
        let start = Instant::now();
        let batch = self.config.train.batch_size;
        let log_every = self.config.train.log_every as u64;
        let loss_cfg = self.config.loss;
        for i in 0..steps {
            let first = self.episodes;
            let mut eps = Vec::with_capacity(batch);
            for _ in 0..batch {
                let seed = self.next_seed();
                eps.push(sample(self.step, seed)?);
            }
            let model = &self.model;
            let results = mode.map(&eps, |ep| model.episode_grads(ep, &ws.provider, &loss_cfg));
            let mut total: Option<GradBuffer> = None;
            let mut parts = LossParts::default();
            for r in results {
                let (g, p) = r?;
                parts.detection += p.detection / batch as f64;
                parts.rectify += p.rectify / batch as f64;
                parts.total += p.total / batch as f64;
                match &mut total {
                    None => total = Some(g),
                    Some(t) => t.add_assign(&g),
                }
            }
            let mut grads = total.expect("batch is non-empty");
            if batch > 1 {
                grads.scale(1.0 / batch as f64);
            }
            if !parts.total.is_finite() {
                return Err(Error::NonFinite { op: "training loss" });
            }
            let grad_norm = self.optim.apply(&mut self.model.store, &grads)?;
            self.step += 1;
            let last = i + 1 == steps;
            if last || (log_every > 0 && self.step % log_every == 0) {
                debug!("{stage} step {} loss {:.4} |g| {:.3}", self.step, parts.total, grad_norm);
                metrics.push(MetricsRecord::Step {
                    stage: stage.to_string(),
                    step: self.step,
                    episode: first,
                    losses: parts,
                    grad_norm,
                    wall_secs: start.elapsed().as_secs_f64(),
                })?;
            }
        }
        Ok(())
    }

    /// Continues meta-training on base-class episodes.
    pub fn train_base(&mut self, ws: &Workspace, steps: usize, mode: ExecMode, metrics: &mut Metrics) -> Result<()> {
        let e = self.config.episode.clone();
        let n_way = e.n_way.min(ws.base.classes.len());
        self.run(ws, "meta-train", steps, mode, metrics, |_, seed| {
            sample_episode(&ws.base, &ws.registry, &ws.vocab, n_way, e.k_shot, e.n_query, seed)
        })
    }

    /// Continues fine-tuning on the k-shot novel pool, interleaving base
    /// episodes on odd steps when configured.
    pub fn train_novel(
        &mut self,
        ws: &Workspace,
        pool: &Dataset,
        steps: usize,
        mode: ExecMode,
        metrics: &mut Metrics,
    ) -> Result<()> {
        let e = self.config.episode.clone();
        let interleave = self.config.train.interleave_base;
        let novel_way = e.n_way.min(pool.classes.len());
        let base_way = e.n_way.min(ws.base.classes.len());
        self.run(ws, "fine-tune", steps, mode, metrics, |step, seed| {
            if interleave && step % 2 == 1 {
                sample_episode(&ws.base, &ws.registry, &ws.vocab, base_way, e.k_shot, e.n_query, seed)
            } else {
                sample_episode(pool, &ws.registry, &ws.vocab, novel_way, e.k_shot, e.n_query, seed)
            }
        })
    }
}

/// Meta-trains a fresh model for `cfg.train.steps` steps.
pub fn meta_train(cfg: &RunConfig, ws: &Workspace, mode: ExecMode, metrics: &mut Metrics) -> Result<Checkpoint> {
    ws.check()?;
    let mut ckpt = Checkpoint::init(cfg, ws)?;
    ckpt.train_base(ws, cfg.train.steps, mode, metrics)?;
    info!("meta-train finished after {} steps", ckpt.step);
    Ok(ckpt)
}

/// k-shot pool and held-out test images of the novel split. Fine-tuning and
/// evaluation must agree on this split.
pub fn novel_split(cfg: &RunConfig, novel: &Dataset) -> Result<(Dataset, Dataset)> {
    few_shot_split(novel, cfg.episode.k_shot, cfg.seed)
}

/// Fine-tunes on novel classes. Training settings come from `cfg`; the
/// model architecture stays as checkpointed.
pub fn fine_tune(
    mut ckpt: Checkpoint,
    ws: &Workspace,
    cfg: &RunConfig,
    mode: ExecMode,
    metrics: &mut Metrics,
) -> Result<Checkpoint> {
    cfg.validate()?;
    if let Some((id, name)) = ws.novel.classes.iter().find(|(id, _)| ckpt.base_classes.contains_key(id)) {
        return Err(Error::Data(format!("novel class {id} ({name}) is also a base class")));
    }
    ws.registry.check_covers(&ws.novel)?;
    let model_cfg = ckpt.config.model.clone();
    ckpt.config = RunConfig {
        model: model_cfg,
        ..cfg.clone()
    };
    ckpt.optim.config = cfg.optim.clone();
    let (pool, _) = novel_split(cfg, &ws.novel)?;
    ckpt.train_novel(ws, &pool, cfg.train.fine_tune_steps, mode, metrics)?;
    Ok(ckpt)
}

fn detect_held_out(
    model: &Model,
    ws: &Workspace,
    cfg: &RunConfig,
    mode: ExecMode,
    threshold: f64,
    drop_background: bool,
) -> Result<(Vec<Detection>, Dataset)> {
    let (pool, test) = novel_split(cfg, &ws.novel)?;
    let ep = evaluation_episode(&pool, &ws.registry, &ws.vocab, cfg.episode.k_shot, &test, episode_seed(cfg.seed, u64::MAX))?;
    let per_image = mode.map(&ep.queries, |q| -> Result<Vec<Detection>> {
        let (logits, boxes) = model.predict(&ep, &ws.provider, &q.grid)?;
        Ok(postprocess(&logits, &boxes, &q.grid, &ep.class_ids, &ep.class_names, threshold, drop_background))
    });
    let mut dets = Vec::new();
    for d in per_image {
        dets.extend(d?);
    }
    Ok((dets, test))
}

/// Ranked detections for every held-out novel image. Each object query
/// keeps its best foreground class.
pub fn novel_detections(model: &Model, ws: &Workspace, cfg: &RunConfig, mode: ExecMode) -> Result<(Vec<Detection>, Dataset)> {
    detect_held_out(model, ws, cfg, mode, 0.0, false)
}

/// Detections on the held-out novel images above `cfg.eval.score_threshold`,
/// skipping queries whose top class is background.
pub fn infer_novel(model: &Model, ws: &Workspace, cfg: &RunConfig, mode: ExecMode) -> Result<Vec<Detection>> {
    Ok(detect_held_out(model, ws, cfg, mode, cfg.eval.score_threshold, true)?.0)
}

/// Novel-class mAP over the held-out images.
pub fn evaluate_novel(model: &Model, ws: &Workspace, cfg: &RunConfig, mode: ExecMode) -> Result<MapReport> {
    let (dets, test) = novel_detections(model, ws, cfg, mode)?;
    evaluate_map(&dets, &GroundTruthSet::from_dataset(&test), &cfg.eval.iou_thresholds)
}

/// Appends an eval record for `report`.
pub fn record_eval(metrics: &mut Metrics, stage: &str, step: u64, report: &MapReport, wall_secs: f64) -> Result<()> {
    let map = report
        .thresholds
        .iter()
        .zip(&report.per_threshold)
        .map(|(t, m)| (format!("{t:.2}"), *m))
        .collect();
    let per_class_ap = report.per_class.iter().map(|(c, v)| (*c, v[0])).collect();
    metrics.push(MetricsRecord::Eval {
        stage: stage.to_string(),
        step,
        map,
        per_class_ap,
        accuracy: report.accuracy,
        wall_secs,
    })
}
