//! The full detector: shared projection and refinement, multi-modal support
//! prototypes, query aggregation, the detection head and the optional
//! rectify head.

use serde::{Deserialize, Serialize};

use crate::aggregation::{
    aggregate, build_support_matrix, matching_coefficient, roi_prototype, EmbeddingProvider, LanguagePrototypes, Modality, SupportMatrix,
    VisionPrototypes,
};
use crate::attention::{shared_refine, sinusoidal_init, AttentionParams, TaskPrototypes};
use crate::data::{Episode, FeatureGrid, TokenSeq};
use crate::detr::{cell_anchors, 
    detection_loss, hungarian_match, matching_cost, postprocess, DetectionResult, DetrHead, LossWeights, Target,
};
use crate::error::{Error, Result};
use crate::nn::{gaussian, Linear};
use crate::rectify::{fuse_support_query, generate_bidirectional, rectify_loss, RectifyDecoder, Reduction};
use crate::tensor::{GradBuffer, ParamId, ParamStore, Precision, Tape, Tensor, Var};

pub const RECTIFY_PREFIX: &str = "rectify.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub heads: usize,
    /// Encoder layers after the aggregation layer.
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub n_queries: usize,
    /// Widest episode the class head and task prototypes support.
    pub n_classes: usize,
    pub modality: Modality,
    pub rectify: bool,
    pub rectify_layers: usize,
    /// Separate refinement weights for the language branch.
    pub decoupled: bool,
    pub precision: Precision,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 32,
            heads: 2,
            encoder_layers: 2,
            decoder_layers: 2,
            n_queries: 8,
            n_classes: 3,
            modality: Modality::Both,
            rectify: true,
            rectify_layers: 1,
            decoupled: false,
            precision: Precision::F64,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("model: {m}")));
        if self.d_model == 0 || self.d_model % 4 != 0 {
            return bad(format!("d_model {} must be a positive multiple of 4", self.d_model));
        }
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return bad(format!("d_model {} is not divisible by {} heads", self.d_model, self.heads));
        }
        if self.n_queries == 0 || self.n_classes == 0 {
            return bad("n_queries and n_classes must be positive".into());
        }
        if self.rectify && self.rectify_layers == 0 {
            return bad("rectify needs at least one decoder layer".into());
        }
        Ok(())
    }
}

/// Loss weights and switches for one training objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Box L1 weight.
    pub beta: f64,
    /// `1 − gIoU` weight.
    pub gamma: f64,
    pub lambda_rectify: f64,
    pub reduction: Reduction,
}

impl Default for LossConfig {
    fn default() -> Self {
        let w = LossWeights::default();
        LossConfig {
            beta: w.beta,
            gamma: w.gamma,
            lambda_rectify: 1.0,
            reduction: Reduction::Mean,
        }
    }
}

impl LossConfig {
    pub fn weights(&self) -> LossWeights {
        LossWeights {
            beta: self.beta,
            gamma: self.gamma,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = [self.beta, self.gamma, self.lambda_rectify].iter().all(|v| v.is_finite() && *v >= 0.0);
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("loss weights must be finite and non-negative: {self:?}")))
        }
    }
}

/// Scalar summaries of one episode's loss.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub detection: f64,
    pub rectify: f64,
    pub total: f64,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub d_in: usize,
    pub vocab: usize,
    pub store: ParamStore,
    pub proj: Linear,
    pub refine: AttentionParams,
    pub lang_refine: Option<AttentionParams>,
    pub bg_vision: ParamId,
    pub bg_language: ParamId,
    pub task: TaskPrototypes,
    pub head: DetrHead,
    pub rectify: Option<RectifyDecoder>,
}

/// Support-side tape values shared by every query of an episode.
struct SupportState {
    s: SupportMatrix,
    /// Refined support rows per slot, `k×d` (vision branch).
    rows: Vec<Var>,
}

/// 2D sinusoidal position code: the first half of each row encodes the cell
/// row, the second half the cell column.
pub fn position_grid(h: usize, w: usize, d: usize) -> Result<Tensor> {
    let rows = sinusoidal_init(h, d / 2)?;
    let cols = sinusoidal_init(w, d / 2)?;
    let mut data = Vec::with_capacity(h * w * d);
    for r in 0..h {
        for c in 0..w {
            data.extend_from_slice(rows.row(r));
            data.extend_from_slice(cols.row(c));
        }
    }
    Tensor::new(vec![h * w, d], data)
}

fn mean_rows(tape: &mut Tape, x: Var) -> Result<Var> {
    let n = tape.shape(x)[0];
    let avg = tape.constant(Tensor::full(&[1, n], 1.0 / n as f64));
    tape.matmul(avg, x)
}

impl Model {
    pub fn new(config: ModelConfig, d_in: usize, vocab: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        if d_in == 0 {
            return Err(Error::Config("model: feature width must be positive".into()));
        }
        let d = config.d_model;
        let mut store = ParamStore::new();
        let proj = Linear::new(&mut store, seed, "proj", d_in, d, true);
        let refine = AttentionParams::new(&mut store, seed, "refine", d, config.heads)?;
        let lang_refine = if config.decoupled {
            Some(AttentionParams::new(&mut store, seed, "refine_lang", d, config.heads)?)
        } else {
            None
        };
        let bg_std = 1.0 / (d as f64).sqrt();
        let bg_vision = store.insert("proto.bg_vision", gaussian(seed, "proto.bg_vision", &[1, d], bg_std));
        let bg_language = store.insert("proto.bg_language", gaussian(seed, "proto.bg_language", &[1, d], bg_std));
        let task = TaskPrototypes::new(&mut store, "task", config.n_classes, d)?;
        let head = DetrHead::new(
            &mut store,
            seed,
            d,
            config.heads,
            config.n_classes,
            config.n_queries,
            config.encoder_layers,
            config.decoder_layers,
        )?;
        let rectify = if config.rectify {
            Some(RectifyDecoder::new(
                &mut store,
                seed,
                RECTIFY_PREFIX.trim_end_matches('.'),
                vocab,
                d,
                config.heads,
                config.rectify_layers,
            )?)
        } else {
            None
        };
        Ok(Model {
            config,
            d_in,
            vocab,
            store,
            proj,
            refine,
            lang_refine,
            bg_vision,
            bg_language,
            task,
            head,
            rectify,
        })
    }

    /// Drops the rectify head and its parameters. Detection outputs do not
    /// depend on it.
    pub fn discard_rectify(&mut self) -> usize {
        self.rectify = None;
        self.store.remove_prefix(RECTIFY_PREFIX)
    }

    pub fn new_tape(&self) -> Tape {
        Tape::with_precision(self.config.precision)
    }

    fn project_refine(&self, tape: &mut Tape, x: Tensor, params: &AttentionParams) -> Result<Var> {
        if x.shape()[1] != self.d_in {
            return Err(Error::Shape {
                op: "project",
                lhs: x.shape().to_vec(),
                rhs: vec![self.d_in],
            });
        }
        let x = tape.constant(x);
        let p = self.proj.forward(tape, &self.store, x)?;
        shared_refine(tape, &self.store, p, params)
    }

    fn check_episode(&self, ep: &Episode) -> Result<()> {
        let c = ep.n_way();
        if c == 0 || c > self.config.n_classes {
            return Err(Error::invalid(
                "model",
                format!("{c}-way episode for a model built for {}", self.config.n_classes),
            ));
        }
        if ep.texts.len() != c || ep.support.len() != c {
            return Err(Error::invalid("model", "episode texts and support do not match its classes"));
        }
        Ok(())
    }

    fn support(&self, tape: &mut Tape, ep: &Episode, provider: &EmbeddingProvider) -> Result<SupportState> {
        self.check_episode(ep)?;
        let modality = self.config.modality;
        let mut rows = Vec::with_capacity(ep.n_way());
        let mut vision = None;
        if modality.uses_vision() || self.rectify.is_some() {
            let mut protos = Vec::with_capacity(ep.n_way() + 1);
            for inst in &ep.support {
                if inst.is_empty() {
                    return Err(Error::invalid("model", "class without support instances"));
                }
                let feats: Vec<Vec<f64>> =
                    inst.iter().map(|s| roi_prototype(&s.grid, &s.bbox)).collect::<Result<_>>()?;
                let r = self.project_refine(tape, Tensor::from_rows(&feats)?, &self.refine)?;
                protos.push(mean_rows(tape, r)?);
                rows.push(r);
            }
            protos.push(tape.param(&self.store, self.bg_vision));
            vision = Some(VisionPrototypes(tape.concat_rows(&protos)?));
        }
        let mut language = None;
        if modality.uses_language() {
            let params = self.lang_refine.as_ref().unwrap_or(&self.refine);
            let mut protos = Vec::with_capacity(ep.n_way() + 1);
            for t in &ep.texts {
                let e = provider.lookup(&t.ids)?;
                let r = self.project_refine(tape, e, params)?;
                protos.push(mean_rows(tape, r)?);
            }
            protos.push(tape.param(&self.store, self.bg_language));
            language = Some(LanguagePrototypes(tape.concat_rows(&protos)?));
        }
        let vision = if modality.uses_vision() { vision } else { None };
        let s = build_support_matrix(tape, vision, language, modality)?;
        Ok(SupportState { s, rows })
    }

    /// Refined query rows and the head prediction for one image.
    fn query_forward(
        &self,
        tape: &mut Tape,
        st: &SupportState,
        grid: &FeatureGrid,
        n_way: usize,
    ) -> Result<(Var, crate::detr::Prediction)> {
        let q = self.project_refine(tape, grid.flattened(), &self.refine)?;
        let agg = aggregate(tape, &self.store, q, st.s, &self.task)?;
        let pos = tape.constant(position_grid(grid.rows(), grid.cols(), self.config.d_model)?);
        let x = tape.add(agg, pos)?;
        let memory = self.head.encode(tape, &self.store, x)?;
        let anchors = cell_anchors(grid.rows(), grid.cols());
        let pred = self.head.decode_keyed(tape, &self.store, memory, Some(pos), Some(&anchors), n_way)?;
        Ok((q, pred))
    }

    /// Raw class logits `N_q×(C+1)` and boxes `N_q×4` for one image.
    pub fn predict(&self, ep: &Episode, provider: &EmbeddingProvider, grid: &FeatureGrid) -> Result<(Tensor, Tensor)> {
        let mut tape = self.new_tape();
        let st = self.support(&mut tape, ep, provider)?;
        let (_, pred) = self.query_forward(&mut tape, &st, grid, ep.n_way())?;
        Ok((tape.value(pred.logits).clone(), tape.value(pred.boxes).clone()))
    }

    /// Matching coefficients `HW×(C+1)` of one image against the episode's
    /// support rows, background last.
    pub fn coefficients(&self, ep: &Episode, provider: &EmbeddingProvider, grid: &FeatureGrid) -> Result<Tensor> {
        let mut tape = self.new_tape();
        let st = self.support(&mut tape, ep, provider)?;
        let q = self.project_refine(&mut tape, grid.flattened(), &self.refine)?;
        let a = matching_coefficient(&mut tape, q, st.s)?;
        Ok(tape.value(a).clone())
    }

    /// Thresholded detections for one image; background-argmax queries are
    /// dropped.
    pub fn infer(
        &self,
        ep: &Episode,
        provider: &EmbeddingProvider,
        grid: &FeatureGrid,
        threshold: f64,
    ) -> Result<DetectionResult> {
        let (logits, boxes) = self.predict(ep, provider, grid)?;
        Ok(postprocess(&logits, &boxes, grid, &ep.class_ids, &ep.class_names, threshold, true))
    }

    /// Builds the episode objective on `tape`: the mean over query images of
    /// `detection + λ·rectify`.
    pub fn episode_loss(
        &self,
        tape: &mut Tape,
        ep: &Episode,
        provider: &EmbeddingProvider,
        loss: &LossConfig,
    ) -> Result<(Var, LossParts)> {
        if ep.queries.is_empty() {
            return Err(Error::invalid("episode_loss", "episode has no query images"));
        }
        let st = self.support(tape, ep, provider)?;
        let use_rect = self.rectify.is_some() && loss.lambda_rectify != 0.0;
        let mut terms = Vec::with_capacity(ep.queries.len());
        let mut parts = LossParts::default();
        for query in &ep.queries {
            let (q, pred) = self.query_forward(tape, &st, &query.grid, ep.n_way())?;
            let targets: Vec<Target> = query
                .targets
                .iter()
                .map(|(slot, b)| Target {
                    class: *slot,
                    bbox: b.to_cxcywh_norm(query.grid.width, query.grid.height),
                })
                .collect();
            if targets.len() > self.config.n_queries {
                return Err(Error::invalid(
                    "episode_loss",
                    format!("{} objects exceed {} object queries", targets.len(), self.config.n_queries),
                ));
            }
            let cost = matching_cost(tape.value(pred.logits), tape.value(pred.boxes), &targets, loss.weights());
            let assignment = hungarian_match(&cost)?;
            let det = detection_loss(tape, &pred, &targets, &assignment, loss.weights())?;
            parts.detection += tape.scalar(det);
            let mut term = det;
            if use_rect {
                let dec = self.rectify.as_ref().expect("checked above");
                let mut pairs = Vec::with_capacity(ep.n_way());
                for (rows, text) in st.rows.iter().zip(&ep.texts) {
                    let p = fuse_support_query(tape, *rows, q)?;
                    pairs.push(generate_bidirectional(tape, &self.store, dec, p, text)?);
                }
                let targets: Vec<&TokenSeq> = ep.texts.iter().collect();
                let rect = rectify_loss(tape, &pairs, &targets, loss.reduction)?;
                parts.rectify += tape.scalar(rect);
                let weighted = tape.scale(rect, loss.lambda_rectify)?;
                term = tape.add(det, weighted)?;
            }
            terms.push(term);
        }
        let mut total = terms[0];
        for &t in &terms[1..] {
            total = tape.add(total, t)?;
        }
        let n = ep.queries.len() as f64;
        let total = tape.scale(total, 1.0 / n)?;
        parts.detection /= n;
        parts.rectify /= n;
        parts.total = tape.scalar(total);
        Ok((total, parts))
    }

    /// Gradients of the episode objective, detached from any tape.
    pub fn episode_grads(
        &self,
        ep: &Episode,
        provider: &EmbeddingProvider,
        loss: &LossConfig,
    ) -> Result<(GradBuffer, LossParts)> {
        let mut tape = self.new_tape();
        let (total, parts) = self.episode_loss(&mut tape, ep, provider, loss)?;
        tape.backward(total)?;
        Ok((self.store.collect_grads(&tape), parts))
    }
}
