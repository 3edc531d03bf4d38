//! Support prototypes, their fusion into the support matrix `S`, and the
//! query refinement `Q₁ + Q₂` with `Q₁ = (A·σ(S)) ⊙ Q`, `Q₂ = A·T` and
//! `A = softmax(Q·Sᵀ/√d)`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attention::TaskPrototypes;
use crate::data::coco::{decode_f32_block, encode_f32_block};
use crate::data::{BoxXyxy, FeatureGrid};
use crate::error::{Error, Result};
use crate::nn::gaussian;
use crate::tensor::{ParamStore, Tape, Tensor, Var};

/// Which prototype rows feed `S`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Modality {
    Both,
    VisionOnly,
    LanguageOnly,
}

impl Modality {
    pub fn uses_vision(self) -> bool {
        self != Modality::LanguageOnly
    }

    pub fn uses_language(self) -> bool {
        self != Modality::VisionOnly
    }
}

/// `(C+1)×d` vision rows, background last.
#[derive(Debug, Clone, Copy)]
pub struct VisionPrototypes(pub Var);

/// `(C+1)×d` language rows, background last.
#[derive(Debug, Clone, Copy)]
pub struct LanguagePrototypes(pub Var);

/// `S`, `(C+1)×d`, rows in episode slot order with background last.
#[derive(Debug, Clone, Copy)]
pub struct SupportMatrix(pub Var);

/// Cell ranges `(rows, cols)` covered by `bbox` on `grid`. Edges map to grid
/// coordinates and round outward (floor the start, ceil the end), then clip
/// to the grid; a box thinner than a cell still covers one.
pub fn roi_cells(grid: &FeatureGrid, bbox: &BoxXyxy) -> Result<(std::ops::Range<usize>, std::ops::Range<usize>)> {
    let (h, w) = (grid.rows(), grid.cols());
    let sx = w as f64 / grid.width;
    let sy = h as f64 / grid.height;
    let span = |a: f64, b: f64, s: f64, n: usize| -> Option<std::ops::Range<usize>> {
        let (lo, hi) = ((a * s).floor(), (b * s).ceil());
        if !(lo.is_finite() && hi.is_finite()) || hi <= 0.0 || lo >= n as f64 || b < a {
            return None;
        }
        let lo = lo.max(0.0) as usize;
        let hi = (hi.min(n as f64) as usize).max(lo + 1);
        Some(lo..hi)
    };
    match (span(bbox.y1, bbox.y2, sy, h), span(bbox.x1, bbox.x2, sx, w)) {
        (Some(r), Some(c)) => Ok((r, c)),
        _ => Err(Error::invalid(
            "roi_prototype",
            format!("box {bbox:?} lies outside the {}×{} image", grid.width, grid.height),
        )),
    }
}

/// Mean of the grid cells under `bbox`.
pub fn roi_prototype(grid: &FeatureGrid, bbox: &BoxXyxy) -> Result<Vec<f64>> {
    let (rows, cols) = roi_cells(grid, bbox)?;
    let d = grid.depth();
    let mut acc = vec![0.0; d];
    let n = (rows.len() * cols.len()) as f64;
    for r in rows {
        for c in cols.clone() {
            acc.iter_mut().zip(grid.cell(r, c)).for_each(|(a, v)| *a += v);
        }
    }
    Ok(acc.into_iter().map(|a| a / n).collect())
}

pub fn build_support_matrix(
    tape: &mut Tape,
    vision: Option<VisionPrototypes>,
    language: Option<LanguagePrototypes>,
    modality: Modality,
) -> Result<SupportMatrix> {
    let missing = |what: &str| Error::invalid("build_support_matrix", format!("{modality:?} needs {what} prototypes"));
    match modality {
        Modality::VisionOnly => Ok(SupportMatrix(vision.ok_or_else(|| missing("vision"))?.0)),
        Modality::LanguageOnly => Ok(SupportMatrix(language.ok_or_else(|| missing("language"))?.0)),
        Modality::Both => {
            let v = vision.ok_or_else(|| missing("vision"))?.0;
            let l = language.ok_or_else(|| missing("language"))?.0;
            if tape.shape(v) != tape.shape(l) {
                return Err(Error::Shape {
                    op: "build_support_matrix",
                    lhs: tape.shape(v).to_vec(),
                    rhs: tape.shape(l).to_vec(),
                });
            }
            let sum = tape.add(v, l)?;
            Ok(SupportMatrix(tape.scale(sum, 0.5)?))
        }
    }
}

/// `A = softmax(Q·Sᵀ/√d)`, `HW×(C+1)`.
pub fn matching_coefficient(tape: &mut Tape, q: Var, s: SupportMatrix) -> Result<Var> {
    let d = tape.shape(q)[tape.shape(q).len() - 1];
    if tape.shape(s.0).len() != 2 || tape.shape(s.0)[1] != d {
        return Err(Error::Shape {
            op: "matching_coefficient",
            lhs: tape.shape(q).to_vec(),
            rhs: tape.shape(s.0).to_vec(),
        });
    }
    let st = tape.transpose(s.0)?;
    let logits = tape.matmul(q, st)?;
    let logits = tape.scale(logits, 1.0 / (d as f64).sqrt())?;
    tape.softmax_rows(logits)
}

/// `Q₁ + Q₂` for a given coefficient matrix `a` and bound task prototypes
/// `t` with the same row count as `S`.
pub fn aggregate_with(tape: &mut Tape, q: Var, s: SupportMatrix, t: Var, a: Var) -> Result<Var> {
    if tape.shape(t) != tape.shape(s.0) {
        return Err(Error::Shape {
            op: "aggregate",
            lhs: tape.shape(t).to_vec(),
            rhs: tape.shape(s.0).to_vec(),
        });
    }
    let gate = tape.sigmoid(s.0)?;
    let ag = tape.matmul(a, gate)?;
    let q1 = tape.hadamard(ag, q)?;
    let q2 = tape.matmul(a, t)?;
    tape.add(q1, q2)
}

/// Binds the task prototype rows matching `S`: the first `C` rows plus the
/// background row, so one prototype table serves episodes of any width up
/// to its own.
pub fn bind_task_prototypes(tape: &mut Tape, store: &ParamStore, t: &TaskPrototypes, n_classes: usize) -> Result<Var> {
    if n_classes > t.n_classes {
        return Err(Error::invalid(
            "aggregate",
            format!("{n_classes}-way support exceeds {} task prototypes", t.n_classes),
        ));
    }
    let all = tape.param(store, t.values);
    if n_classes == t.n_classes {
        return Ok(all);
    }
    let idx: Vec<usize> = (0..n_classes).chain(std::iter::once(t.n_classes)).collect();
    tape.gather_rows(all, &idx)
}

/// Full refinement with `A` computed once and shared by both branches.
pub fn aggregate(tape: &mut Tape, store: &ParamStore, q: Var, s: SupportMatrix, t: &TaskPrototypes) -> Result<Var> {
    let c = tape.shape(s.0)[0] - 1;
    let tv = bind_task_prototypes(tape, store, t, c)?;
    let a = matching_coefficient(tape, q, s)?;
    aggregate_with(tape, q, s, tv, a)
}

/// Source of primary token embeddings.
#[derive(Debug, Clone, PartialEq)]
pub enum EmbeddingProvider {
    /// Row `id` of a `vocab×d_in` table.
    Table(Tensor),
    /// Seeded Gaussian vector per token id, `N(0, 1/d_in)` per entry.
    Synthetic { d_in: usize, seed: u64 },
}

impl EmbeddingProvider {
    pub fn d_in(&self) -> usize {
        match self {
            EmbeddingProvider::Table(t) => t.shape()[1],
            EmbeddingProvider::Synthetic { d_in, .. } => *d_in,
        }
    }

    /// `M×d_in` embeddings for a token sequence.
    pub fn lookup(&self, ids: &[usize]) -> Result<Tensor> {
        let d = self.d_in();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            match self {
                EmbeddingProvider::Table(t) => {
                    if id >= t.shape()[0] {
                        return Err(Error::invalid(
                            "embedding_lookup",
                            format!("token id {id} outside table of {} rows", t.shape()[0]),
                        ));
                    }
                    data.extend_from_slice(t.row(id));
                }
                EmbeddingProvider::Synthetic { d_in, seed } => {
                    let v = gaussian(*seed, &format!("token.{id}"), &[*d_in], 1.0 / (*d_in as f64).sqrt());
                    data.extend(v.into_data());
                }
            }
        }
        Tensor::new(vec![ids.len(), d], data)
    }

    /// Reads a table in the feature-file layout with `H = vocab`, `W = 1`.
    pub fn load_table(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let ([v, w, d], data) = decode_f32_block(&bytes).map_err(|m| Error::Data(format!("{}: {m}", path.display())))?;
        if w != 1 {
            return Err(Error::Data(format!("{}: embedding table must have W = 1, got {w}", path.display())));
        }
        Ok(EmbeddingProvider::Table(Tensor::new(vec![v, d], data)?))
    }

    pub fn save_table(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let EmbeddingProvider::Table(t) = self else {
            return Err(Error::invalid("save_table", "only table providers can be saved"));
        };
        let (v, d) = (t.shape()[0], t.shape()[1]);
        std::fs::write(path, encode_f32_block([v, 1, d], t.data())).map_err(|e| Error::io(path, e))
    }
}
