//! Set-prediction detection head: encoder layers over the refined query
//! grid, a decoder over learned object queries, bipartite matching, the
//! detection loss and thresholded post-processing.

use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attention::{attend, multi_head_attention, AttentionParams};
use crate::data::{BoxXyxy, FeatureGrid};
use crate::error::{Error, Result};
use crate::nn::{gaussian, Linear};
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, Var};

#[derive(Debug, Clone)]
pub struct DetrHead {
    pub d_model: usize,
    /// Foreground class slots; the background logit sits at this index.
    pub n_classes: usize,
    pub encoder: Vec<AttentionParams>,
    pub queries: ParamId,
    pub decoder: Vec<(AttentionParams, AttentionParams)>,
    pub class_head: Linear,
    pub box_hidden: Linear,
    pub box_out: Linear,
}

impl DetrHead {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        seed: u64,
        d: usize,
        heads: usize,
        n_classes: usize,
        n_queries: usize,
        encoder_layers: usize,
        decoder_layers: usize,
    ) -> Result<Self> {
        if n_queries == 0 || n_classes == 0 {
            return Err(Error::invalid("detr", "need at least one query and one class"));
        }
        let encoder = (0..encoder_layers)
            .map(|l| AttentionParams::new(store, seed, &format!("encoder.{l}"), d, heads))
            .collect::<Result<_>>()?;
        let decoder = (0..decoder_layers)
            .map(|l| {
                Ok((
                    AttentionParams::new(store, seed, &format!("decoder.{l}.self"), d, heads)?,
                    AttentionParams::new(store, seed, &format!("decoder.{l}.cross"), d, heads)?,
                ))
            })
            .collect::<Result<_>>()?;
        let queries = store.insert("decoder.queries", gaussian(seed, "decoder.queries", &[n_queries, d], 1.0));
        Ok(DetrHead {
            d_model: d,
            n_classes,
            encoder,
            queries,
            decoder,
            class_head: Linear::new(store, seed, "head.class", d, n_classes + 1, true),
            box_hidden: Linear::new(store, seed, "head.box_hidden", d, d, true),
            box_out: Linear::new(store, seed, "head.box_out", d, 4, true),
        })
    }

    pub fn n_queries(&self, store: &ParamStore) -> usize {
        store.get(self.queries).shape()[0]
    }

    fn check_width(&self, tape: &Tape, x: Var, op: &'static str) -> Result<()> {
        let s = tape.shape(x);
        if s.len() != 2 || s[1] != self.d_model {
            return Err(Error::Shape {
                op,
                lhs: s.to_vec(),
                rhs: vec![self.d_model],
            });
        }
        Ok(())
    }

    /// The remaining self-attention encoder layers.
    pub fn encode(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        self.check_width(tape, x, "encode")?;
        let mut x = x;
        for layer in &self.encoder {
            x = multi_head_attention(tape, store, x, x, x, layer, None)?;
        }
        Ok(x)
    }

    /// Decoder over the object queries, then class and box heads. Class
    /// logits are `N_q×(C+1)` with background last; boxes are normalized
    /// `[cx, cy, w, h]` squashed into (0, 1). When `n_classes` is below the
    /// head width, the unused class columns are dropped.
    pub fn decode(&self, tape: &mut Tape, store: &ParamStore, memory: Var, n_classes: usize) -> Result<Prediction> {
        self.decode_keyed(tape, store, memory, None, None, n_classes)
    }

    /// [`decode`](Self::decode) with spatial information about the memory.
    ///
    /// `key_pos` is added to the memory keys of every cross-attention layer.
    /// `anchors` (`HW×2`, logits of the normalized cell centres) turns box
    /// centres into offsets from a per-query reference point: the last
    /// cross-attention layer's head-averaged weights applied to the anchors.
    /// Without it the head regresses absolute boxes.
    pub fn decode_keyed(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        memory: Var,
        key_pos: Option<Var>,
        anchors: Option<&Tensor>,
        n_classes: usize,
    ) -> Result<Prediction> {
        self.check_width(tape, memory, "decode")?;
        let keys = match key_pos {
            Some(p) => tape.add(memory, p)?,
            None => memory,
        };
        if n_classes == 0 || n_classes > self.n_classes {
            return Err(Error::invalid(
                "decode",
                format!("{n_classes} classes for a head with {}", self.n_classes),
            ));
        }
        if let Some(a) = anchors {
            if a.shape() != [tape.shape(memory)[0], 2] {
                return Err(Error::Shape {
                    op: "decode anchors",
                    lhs: a.shape().to_vec(),
                    rhs: vec![tape.shape(memory)[0], 2],
                });
            }
        }
        let mut x = tape.param(store, self.queries);
        let mut last_weights = Vec::new();
        for (sa, ca) in &self.decoder {
            x = multi_head_attention(tape, store, x, x, x, sa, None)?;
            let att = attend(tape, store, x, keys, memory, ca, None)?;
            x = att.out;
            last_weights = att.weights;
        }
        let mut logits = self.class_head.forward(tape, store, x)?;
        if n_classes < self.n_classes {
            let idx: Vec<usize> = (0..n_classes).chain(std::iter::once(self.n_classes)).collect();
            let t = tape.transpose(logits)?;
            let t = tape.gather_rows(t, &idx)?;
            logits = tape.transpose(t)?;
        }
        let h = self.box_hidden.forward(tape, store, x)?;
        let h = tape.relu(h)?;
        let b = self.box_out.forward(tape, store, h)?;
        let boxes = match anchors {
            Some(a) if !last_weights.is_empty() => {
                let mut w = last_weights[0];
                for &o in &last_weights[1..] {
                    w = tape.add(w, o)?;
                }
                let w = tape.scale(w, 1.0 / last_weights.len() as f64)?;
                let a = tape.constant(a.clone());
                let reference = tape.matmul(w, a)?;
                let xy = tape.slice_cols(b, 0, 2)?;
                let xy = tape.add(xy, reference)?;
                let wh = tape.slice_cols(b, 2, 4)?;
                let b = tape.concat_cols(&[xy, wh])?;
                tape.sigmoid(b)?
            }
            _ => tape.sigmoid(b)?,
        };
        Ok(Prediction { logits, boxes })
    }
}

/// Logit-space centres `[cx, cy]` of an `h×w` grid's cells in row-major
/// order, for [`DetrHead::decode_keyed`].
pub fn cell_anchors(h: usize, w: usize) -> Tensor {
    let logit = |p: f64| (p / (1.0 - p)).ln();
    let mut data = Vec::with_capacity(h * w * 2);
    for r in 0..h {
        for c in 0..w {
            data.push(logit((c as f64 + 0.5) / w as f64));
            data.push(logit((r as f64 + 0.5) / h as f64));
        }
    }
    Tensor::new(vec![h * w, 2], data).expect("consistent shape")
}

#[derive(Debug, Clone, Copy)]
pub struct Prediction {
    pub logits: Var,
    pub boxes: Var,
}

/// Ground-truth object in episode slot terms with a normalized
/// `[cx, cy, w, h]` box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Target {
    pub class: usize,
    pub bbox: [f64; 4],
}

#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    /// `(gt index, query index)`, ascending in gt index.
    pub pairs: Vec<(usize, usize)>,
    pub cost: f64,
}

/// Minimum-cost assignment of each row to a distinct column with potentials
/// (shortest augmenting path). Returns the column per row.
fn solve(cost: &[Vec<f64>], rows: &[usize], cols: &[usize]) -> Vec<usize> {
    let (n, m) = (rows.len(), cols.len());
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=m {
                if !used[j] {
                    let cur = cost[rows[i0 - 1]][cols[j - 1]] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out = vec![0; n];
    for j in 1..=m {
        if p[j] != 0 {
            out[p[j] - 1] = cols[j - 1];
        }
    }
    out
}

fn optimum(cost: &[Vec<f64>], rows: &[usize], cols: &[usize]) -> f64 {
    if rows.is_empty() {
        return 0.0;
    }
    let a = solve(cost, rows, cols);
    rows.iter().zip(&a).map(|(&r, &c)| cost[r][c]).sum()
}

/// Minimum-cost injective map from rows (ground truths) to columns (queries).
/// Among optimal solutions the one whose query sequence, read in gt order,
/// is lexicographically smallest wins.
pub fn hungarian_match(cost: &[Vec<f64>]) -> Result<Assignment> {
    let g = cost.len();
    if g == 0 {
        return Ok(Assignment {
            pairs: Vec::new(),
            cost: 0.0,
        });
    }
    let n = cost[0].len();
    if cost.iter().any(|r| r.len() != n) {
        return Err(Error::invalid("hungarian_match", "ragged cost matrix"));
    }
    if g > n {
        return Err(Error::invalid("hungarian_match", format!("{g} ground truths for {n} queries")));
    }
    if cost.iter().flatten().any(|c| !c.is_finite()) {
        return Err(Error::NonFinite { op: "hungarian_match" });
    }
    let rows: Vec<usize> = (0..g).collect();
    let cols: Vec<usize> = (0..n).collect();
    let best = optimum(cost, &rows, &cols);
    let scale = cost.iter().flatten().fold(1.0f64, |m, c| m.max(c.abs()));
    let tol = 1e-12 * scale * g as f64;

    // Fix gt 0, 1, … to the smallest query that still admits an optimum.
    let mut fixed: Vec<usize> = Vec::with_capacity(g);
    let mut fixed_cost = 0.0;
    for r in 0..g {
        let free: Vec<usize> = cols.iter().copied().filter(|c| !fixed.contains(c)).collect();
        let chosen = free
            .iter()
            .copied()
            .find(|&q| {
                let rest_cols: Vec<usize> = free.iter().copied().filter(|&c| c != q).collect();
                let rest = optimum(cost, &rows[r + 1..], &rest_cols);
                fixed_cost + cost[r][q] + rest <= best + tol
            })
            .unwrap_or_else(|| {
                // Rounding left no candidate inside the tolerance; keep the
                // solver's own choice for this row.
                solve(cost, &rows[r..], &free)[0]
            });
        fixed_cost += cost[r][chosen];
        fixed.push(chosen);
    }
    let pairs: Vec<(usize, usize)> = fixed.into_iter().enumerate().collect();
    let total = pairs.iter().map(|&(r, c)| cost[r][c]).sum();
    Ok(Assignment { pairs, cost: total })
}

pub fn cxcywh_to_xyxy(b: [f64; 4]) -> [f64; 4] {
    [b[0] - b[2] / 2.0, b[1] - b[3] / 2.0, b[0] + b[2] / 2.0, b[1] + b[3] / 2.0]
}

/// Generalized IoU of two normalized `[cx, cy, w, h]` boxes.
pub fn giou(a: [f64; 4], b: [f64; 4]) -> f64 {
    let (a, b) = (cxcywh_to_xyxy(a), cxcywh_to_xyxy(b));
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let area = |x: [f64; 4]| (x[2] - x[0]) * (x[3] - x[1]);
    let union = area(a) + area(b) - inter;
    let enclose = (a[2].max(b[2]) - a[0].min(b[0])) * (a[3].max(b[3]) - a[1].min(b[1]));
    inter / union - (enclose - union) / enclose
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    /// Box L1 weight.
    pub beta: f64,
    /// `1 − gIoU` weight.
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { beta: 5.0, gamma: 2.0 }
    }
}

fn softmax_row(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|x| (x - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|x| x / z).collect()
}

/// `G×N_q` matching cost: `−p(class) + β·L1 + γ·(1 − gIoU)`.
pub fn matching_cost(logits: &Tensor, boxes: &Tensor, targets: &[Target], w: LossWeights) -> Vec<Vec<f64>> {
    let nq = logits.shape()[0];
    let probs: Vec<Vec<f64>> = (0..nq).map(|q| softmax_row(logits.row(q))).collect();
    targets
        .iter()
        .map(|t| {
            (0..nq)
                .map(|q| {
                    let b: [f64; 4] = boxes.row(q).try_into().expect("4 box coordinates");
                    let l1: f64 = b.iter().zip(&t.bbox).map(|(x, y)| (x - y).abs()).sum();
                    -probs[q][t.class] + w.beta * l1 + w.gamma * (1.0 - giou(b, t.bbox))
                })
                .collect()
        })
        .collect()
}

/// Cross-entropy over all queries (unmatched ones target background) plus,
/// for matched pairs, `β·ΣL1/G + γ·Σ(1 − gIoU)/G`.
pub fn detection_loss(
    tape: &mut Tape,
    pred: &Prediction,
    targets: &[Target],
    assignment: &Assignment,
    w: LossWeights,
) -> Result<Var> {
    let (nq, c1) = (tape.shape(pred.logits)[0], tape.shape(pred.logits)[1]);
    let background = c1 - 1;
    let mut classes = vec![background; nq];
    let mut seen = vec![false; targets.len()];
    for &(g, q) in &assignment.pairs {
        if g >= targets.len() || q >= nq || classes[q] != background || seen[g] {
            return Err(Error::invalid("detection_loss", format!("invalid pair ({g}, {q})")));
        }
        if targets[g].class >= background {
            return Err(Error::invalid("detection_loss", format!("target class {}", targets[g].class)));
        }
        classes[q] = targets[g].class;
        seen[g] = true;
    }
    if seen.iter().any(|s| !s) {
        return Err(Error::invalid("detection_loss", "assignment leaves a ground truth unmatched"));
    }
    let ce = tape.cross_entropy_logits(pred.logits, &classes)?;
    if assignment.pairs.is_empty() {
        return Ok(ce);
    }
    let g = assignment.pairs.len() as f64;
    let qs: Vec<usize> = assignment.pairs.iter().map(|p| p.1).collect();
    let pb = tape.gather_rows(pred.boxes, &qs)?;
    let tb = Tensor::from_rows(&assignment.pairs.iter().map(|p| targets[p.0].bbox).collect::<Vec<_>>())?;
    let tb = tape.constant(tb);
    let diff = tape.sub(pb, tb)?;
    let ad = tape.abs(diff)?;
    let l1 = tape.sum(ad)?;
    let l1 = tape.scale(l1, w.beta / g)?;
    let mut total = tape.add(ce, l1)?;
    if w.gamma != 0.0 {
        let gi = giou_rows(tape, pb, tb)?;
        let s = tape.sum(gi)?;
        // γ·Σ(1 − gIoU)/G = γ − γ·ΣgIoU/G
        let s = tape.scale(s, -w.gamma / g)?;
        let s = tape.add_scalar(s, w.gamma)?;
        total = tape.add(total, s)?;
    }
    Ok(total)
}

/// Row-wise gIoU of two `G×4` cxcywh box sets, as a `G×1` column.
fn giou_rows(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let corners = |tape: &mut Tape, x: Var| -> Result<[Var; 4]> {
        let cx = tape.slice_cols(x, 0, 1)?;
        let cy = tape.slice_cols(x, 1, 2)?;
        let w = tape.slice_cols(x, 2, 3)?;
        let h = tape.slice_cols(x, 3, 4)?;
        let hw = tape.scale(w, 0.5)?;
        let hh = tape.scale(h, 0.5)?;
        Ok([tape.sub(cx, hw)?, tape.sub(cy, hh)?, tape.add(cx, hw)?, tape.add(cy, hh)?])
    };
    let [ax1, ay1, ax2, ay2] = corners(tape, a)?;
    let [bx1, by1, bx2, by2] = corners(tape, b)?;
    let span = |tape: &mut Tape, hi: Var, lo: Var| tape.sub(hi, lo);
    let ix2 = tape.minimum(ax2, bx2)?;
    let ix1 = tape.maximum(ax1, bx1)?;
    let iy2 = tape.minimum(ay2, by2)?;
    let iy1 = tape.maximum(ay1, by1)?;
    let iw = span(tape, ix2, ix1)?;
    let iw = tape.relu(iw)?;
    let ih = span(tape, iy2, iy1)?;
    let ih = tape.relu(ih)?;
    let inter = tape.hadamard(iw, ih)?;
    let aw = span(tape, ax2, ax1)?;
    let ah = span(tape, ay2, ay1)?;
    let area_a = tape.hadamard(aw, ah)?;
    let bw = span(tape, bx2, bx1)?;
    let bh = span(tape, by2, by1)?;
    let area_b = tape.hadamard(bw, bh)?;
    let sum = tape.add(area_a, area_b)?;
    let union = tape.sub(sum, inter)?;
    let iou = tape.div(inter, union)?;
    let ex2 = tape.maximum(ax2, bx2)?;
    let ex1 = tape.minimum(ax1, bx1)?;
    let ey2 = tape.maximum(ay2, by2)?;
    let ey1 = tape.minimum(ay1, by1)?;
    let ew = span(tape, ex2, ex1)?;
    let eh = span(tape, ey2, ey1)?;
    let enclose = tape.hadamard(ew, eh)?;
    let gap = tape.sub(enclose, union)?;
    let frac = tape.div(gap, enclose)?;
    tape.sub(iou, frac)
}

/// One detection in image coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub image_id: u64,
    pub class_id: u32,
    pub class_name: String,
    pub score: f64,
    pub bbox: [f64; 4],
}

impl Detection {
    pub fn xyxy(&self) -> BoxXyxy {
        BoxXyxy::new(self.bbox[0], self.bbox[1], self.bbox[2], self.bbox[3])
    }
}

pub type DetectionResult = Vec<Detection>;

/// Turns raw head outputs into detections. Each query keeps its best
/// foreground class. With `drop_background`, queries whose overall argmax is
/// background are discarded; queries scoring at or below `threshold` always
/// are.
pub fn postprocess(
    logits: &Tensor,
    boxes: &Tensor,
    image: &FeatureGrid,
    class_ids: &[u32],
    class_names: &[String],
    threshold: f64,
    drop_background: bool,
) -> DetectionResult {
    let nq = logits.shape()[0];
    let bg = logits.shape()[1] - 1;
    let mut out = Vec::new();
    for q in 0..nq {
        let p = softmax_row(logits.row(q));
        let (best, score) = p[..bg]
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |acc, (i, &s)| if s > acc.1 { (i, s) } else { acc });
        if drop_background && p[bg] > score {
            continue;
        }
        if score <= threshold {
            continue;
        }
        let b: [f64; 4] = boxes.row(q).try_into().expect("4 box coordinates");
        let xy = BoxXyxy::from_cxcywh_norm(b, image.width, image.height);
        let clip = |v: f64, hi: f64| v.clamp(0.0, hi);
        out.push(Detection {
            image_id: image.image_id,
            class_id: class_ids[best],
            class_name: class_names[best].clone(),
            score,
            bbox: [
                clip(xy.x1, image.width),
                clip(xy.y1, image.height),
                clip(xy.x2, image.width),
                clip(xy.y2, image.height),
            ],
        });
    }
    out
}

pub fn write_jsonl(path: impl AsRef<Path>, dets: &[Detection]) -> Result<()> {
    let path = path.as_ref();
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
    for d in dets {
        let line = serde_json::to_string(d).map_err(|e| Error::Data(e.to_string()))?;
        writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
    }
    f.flush().map_err(|e| Error::io(path, e))
}

pub fn read_jsonl(path: impl AsRef<Path>) -> Result<DetectionResult> {
    let path = path.as_ref();
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in std::io::BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Schema {
            path: path.to_path_buf(),
            msg: format!("line {}: {e}", n + 1),
        })?);
    }
    Ok(out)
}
