//! Multi-head attention blocks and sinusoidal prototype initialization.
//!
//! Every block is post-norm: `LayerNorm(q + Attn(q, k, v)·W_o)`. Projections
//! carry no bias.

use crate::error::{Error, Result};
use crate::nn::uniform_fan_in;
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, Var};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handles to one attention block's weights inside a [`ParamStore`].
///
/// Two branches that hold the same `AttentionParams` bind the same tape
/// leaves, so their gradients accumulate into one set of weights.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub d_model: usize,
    pub n_heads: usize,
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub w_o: ParamId,
    pub ln_scale: ParamId,
    pub ln_shift: ParamId,
}

impl AttentionParams {
    pub fn new(store: &mut ParamStore, seed: u64, prefix: &str, d_model: usize, n_heads: usize) -> Result<Self> {
        if n_heads == 0 || d_model % n_heads != 0 {
            return Err(Error::invalid(
                "attention",
                format!("d_model {d_model} is not divisible by {n_heads} heads"),
            ));
        }
        let mut proj = |name: &str| {
            let full = format!("{prefix}.{name}");
            let t = uniform_fan_in(seed, &full, &[d_model, d_model], d_model);
            store.insert(full, t)
        };
        let (w_q, w_k, w_v, w_o) = (proj("w_q"), proj("w_k"), proj("w_v"), proj("w_o"));
        let ln_scale = store.insert(format!("{prefix}.ln_scale"), Tensor::full(&[d_model], 1.0));
        let ln_shift = store.insert(format!("{prefix}.ln_shift"), Tensor::zeros(&[d_model]));
        Ok(AttentionParams {
            d_model,
            n_heads,
            w_q,
            w_k,
            w_v,
            w_o,
            ln_scale,
            ln_shift,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Output of an attention block plus the per-head weight matrices.
#[derive(Debug, Clone)]
pub struct Attended {
    pub out: Var,
    pub weights: Vec<Var>,
}

/// Scaled dot-product attention per head, heads concatenated, output
/// projection, residual on `q`, then layer norm.
///
/// `mask`, when given, is added to every head's `a×b` score matrix before the
/// softmax (use large negative entries to block positions).
pub fn multi_head_attention(
    tape: &mut Tape,
    store: &ParamStore,
    q: Var,
    k: Var,
    v: Var,
    params: &AttentionParams,
    mask: Option<Var>,
) -> Result<Var> {
    Ok(attend(tape, store, q, k, v, params, mask)?.out)
}

pub fn attend(
    tape: &mut Tape,
    store: &ParamStore,
    q: Var,
    k: Var,
    v: Var,
    params: &AttentionParams,
    mask: Option<Var>,
) -> Result<Attended> {
    let d = params.d_model;
    for x in [q, k, v] {
        let s = tape.shape(x);
        if s.len() != 2 || s[1] != d {
            return Err(Error::Shape {
                op: "multi_head_attention",
                lhs: s.to_vec(),
                rhs: vec![d],
            });
        }
    }
    if tape.shape(k)[0] != tape.shape(v)[0] {
        return Err(Error::Shape {
            op: "multi_head_attention",
            lhs: tape.shape(k).to_vec(),
            rhs: tape.shape(v).to_vec(),
        });
    }
    let wq = tape.param(store, params.w_q);
    let wk = tape.param(store, params.w_k);
    let wv = tape.param(store, params.w_v);
    let wo = tape.param(store, params.w_o);
    let qp = tape.matmul(q, wq)?;
    let kp = tape.matmul(k, wk)?;
    let vp = tape.matmul(v, wv)?;

    let hd = params.head_dim();
    let scale = 1.0 / (hd as f64).sqrt();
    let mut heads = Vec::with_capacity(params.n_heads);
    let mut weights = Vec::with_capacity(params.n_heads);
    for h in 0..params.n_heads {
        let (lo, hi) = (h * hd, (h + 1) * hd);
        let (qh, kh, vh) = if params.n_heads == 1 {
            (qp, kp, vp)
        } else {
            (tape.slice_cols(qp, lo, hi)?, tape.slice_cols(kp, lo, hi)?, tape.slice_cols(vp, lo, hi)?)
        };
        let kt = tape.transpose(kh)?;
        let scores = tape.matmul(qh, kt)?;
        let mut scores = tape.scale(scores, scale)?;
        if let Some(m) = mask {
            scores = tape.add(scores, m)?;
        }
        let a = tape.softmax_rows(scores)?;
        heads.push(tape.matmul(a, vh)?);
        weights.push(a);
    }
    let cat = if heads.len() == 1 { heads[0] } else { tape.concat_cols(&heads)? };
    let o = tape.matmul(cat, wo)?;
    let res = tape.add(q, o)?;
    let g = tape.param(store, params.ln_scale);
    let b = tape.param(store, params.ln_shift);
    let out = tape.layer_norm_rows(res, g, b, LAYER_NORM_EPS)?;
    Ok(Attended { out, weights })
}

/// Self-attention refinement used to map support, query and text features
/// into one space.
pub fn shared_refine(tape: &mut Tape, store: &ParamStore, features: Var, params: &AttentionParams) -> Result<Var> {
    multi_head_attention(tape, store, features, features, features, params, None)
}

/// Additive mask that lets row `i` see columns `0..=i` only.
pub fn causal_mask(n: usize) -> Tensor {
    let mut t = Tensor::zeros(&[n, n]);
    let d = t.data_mut();
    for i in 0..n {
        for j in i + 1..n {
            d[i * n + j] = -1e9;
        }
    }
    t
}

/// Row `p`: `sin(p / 10000^(2i/d))` at column `2i`, `cos(…)` at `2i+1`.
pub fn sinusoidal_init(n_rows: usize, d: usize) -> Result<Tensor> {
    if d == 0 || d % 2 != 0 {
        return Err(Error::invalid("sinusoidal_init", format!("width {d} must be even and positive")));
    }
    if n_rows == 0 {
        return Err(Error::invalid("sinusoidal_init", "zero rows"));
    }
    let mut data = Vec::with_capacity(n_rows * d);
    for p in 0..n_rows {
        for i in 0..d / 2 {
            let freq = 10000f64.powf(2.0 * i as f64 / d as f64);
            let angle = p as f64 / freq;
            data.push(angle.sin());
            data.push(angle.cos());
        }
    }
    Tensor::new(vec![n_rows, d], data)
}

/// Positions between consecutive task prototype rows in the sinusoidal
/// table. Adjacent positions differ only in the few highest-frequency
/// columns; spacing them out makes the rows close to orthogonal.
pub const TASK_ROW_STRIDE: usize = 25;
/// Unit-amplitude rows were too small next to the aggregated support term
/// for classes to separate early in training.
pub const TASK_ROW_SCALE: f64 = 2.0;

/// Trainable class-agnostic task prototypes, `(C+1)×d`, background last.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskPrototypes {
    pub values: ParamId,
    pub n_classes: usize,
}

impl TaskPrototypes {
    pub fn new(store: &mut ParamStore, name: &str, n_classes: usize, d: usize) -> Result<Self> {
        let table = sinusoidal_init((n_classes + 1) * TASK_ROW_STRIDE, d)?;
        let rows: Vec<&[f64]> = (0..=n_classes).map(|r| table.row(r * TASK_ROW_STRIDE)).collect();
        let mut t = Tensor::from_rows(&rows)?;
        t.data_mut().iter_mut().for_each(|x| *x *= TASK_ROW_SCALE);
        let values = store.insert(name, t);
        Ok(TaskPrototypes { values, n_classes })
    }

    pub fn rows(&self) -> usize {
        self.n_classes + 1
    }
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::gradcheck;

    fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        Tensor::new(vec![r, c], (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    out[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        out
    }

    /// Literal scalar-loop multi-head attention, independent of the tape.
    fn oracle(store: &ParamStore, p: &AttentionParams, q: &Tensor, kv: &Tensor) -> Vec<f64> {
        let d = p.d_model;
        let (a, b) = (q.shape()[0], kv.shape()[0]);
        let qp = matmul(q.data(), store.get(p.w_q).data(), a, d, d);
        let kp = matmul(kv.data(), store.get(p.w_k).data(), b, d, d);
        let vp = matmul(kv.data(), store.get(p.w_v).data(), b, d, d);
        let hd = p.head_dim();
        let mut cat = vec![0.0; a * d];
        for h in 0..p.n_heads {
            for i in 0..a {
                let mut s = vec![0.0; b];
                for j in 0..b {
                    for t in 0..hd {
                        s[j] += qp[i * d + h * hd + t] * kp[j * d + h * hd + t];
                    }
                    s[j] /= (hd as f64).sqrt();
                }
                let z: f64 = s.iter().map(|x| x.exp()).sum();
                for j in 0..b {
                    let w = s[j].exp() / z;
                    for t in 0..hd {
                        cat[i * d + h * hd + t] += w * vp[j * d + h * hd + t];
                    }
                }
            }
        }
        let o = matmul(&cat, store.get(p.w_o).data(), a, d, d);
        let mut out = vec![0.0; a * d];
        for i in 0..a {
            let r: Vec<f64> = (0..d).map(|j| q.data()[i * d + j] + o[i * d + j]).collect();
            let mean = r.iter().sum::<f64>() / d as f64;
            let var = r.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / d as f64;
            for j in 0..d {
                out[i * d + j] = (r[j] - mean) / (var + LAYER_NORM_EPS).sqrt();
            }
        }
        out
    }

    #[test]
    fn rejects_indivisible_heads() {
        let mut store = ParamStore::new();
        assert!(AttentionParams::new(&mut store, 0, "a", 6, 4).is_err());
    }

    #[test]
    fn single_key_weights_are_one() {
        let mut store = ParamStore::new();
        let p = AttentionParams::new(&mut store, 1, "a", 8, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let q = rand_mat(&mut rng, 3, 8);
        let kv = rand_mat(&mut rng, 1, 8);
        let mut t = Tape::new();
        let (qv, kvv) = (t.constant(q.clone()), t.constant(kv.clone()));
        let att = attend(&mut t, &store, qv, kvv, kvv, &p, None).unwrap();
        for w in &att.weights {
            assert!(t.value(*w).data().iter().all(|x| *x == 1.0));
        }
        let want = oracle(&store, &p, &q, &kv);
        for (x, y) in t.value(att.out).data().iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_query_rows_give_identical_outputs() {
        let mut store = ParamStore::new();
        let p = AttentionParams::new(&mut store, 2, "a", 8, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let row = rand_mat(&mut rng, 1, 8);
        let q = Tensor::from_rows(&[row.data(), row.data(), row.data()]).unwrap();
        let kv = rand_mat(&mut rng, 4, 8);
        let mut t = Tape::new();
        let (qv, kvv) = (t.constant(q), t.constant(kv));
        let y = multi_head_attention(&mut t, &store, qv, kvv, kvv, &p, None).unwrap();
        let out = t.value(y);
        assert_eq!(out.row(0), out.row(1));
        assert_eq!(out.row(0), out.row(2));
    }

    #[test]
    fn two_head_case_matches_scalar_oracle() {
        let mut store = ParamStore::new();
        let p = AttentionParams::new(&mut store, 42, "a", 4, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let q = rand_mat(&mut rng, 3, 4);
        let kv = rand_mat(&mut rng, 2, 4);
        let mut t = Tape::new();
        let (qv, kvv) = (t.constant(q.clone()), t.constant(kv.clone()));
        let y = multi_head_attention(&mut t, &store, qv, kvv, kvv, &p, None).unwrap();
        let want = oracle(&store, &p, &q, &kv);
        for (x, y) in t.value(y).data().iter().zip(&want) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn attention_rows_normalized_and_permutation_equivariant() {
        let mut store = ParamStore::new();
        let p = AttentionParams::new(&mut store, 3, "a", 8, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let q = rand_mat(&mut rng, 3, 8);
        let kv = rand_mat(&mut rng, 5, 8);
        let perm = [3usize, 0, 4, 1, 2];
        let kv_perm = Tensor::from_rows(&perm.iter().map(|&i| kv.row(i).to_vec()).collect::<Vec<_>>()).unwrap();
        let mut t = Tape::new();
        let qv = t.constant(q);
        let (a, b) = (t.constant(kv), t.constant(kv_perm));
        let y1 = attend(&mut t, &store, qv, a, a, &p, None).unwrap();
        let y2 = multi_head_attention(&mut t, &store, qv, b, b, &p, None).unwrap();
        for w in &y1.weights {
            for i in 0..3 {
                assert!((t.value(*w).row(i).iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
        }
        for (x, y) in t.value(y1.out).data().iter().zip(t.value(y2).data()) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn shared_refine_same_object_gives_identical_branches() {
        let mut store = ParamStore::new();
        let shared = AttentionParams::new(&mut store, 9, "refine", 8, 2).unwrap();
        let decoupled = AttentionParams::new(&mut store, 9, "refine_lang", 8, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_mat(&mut rng, 4, 8);
        let mut t = Tape::new();
        let a = t.constant(x.clone());
        let b = t.constant(x);
        let ya = shared_refine(&mut t, &store, a, &shared).unwrap();
        let yb = shared_refine(&mut t, &store, b, &shared).unwrap();
        assert_eq!(t.value(ya).data(), t.value(yb).data());
        let yc = shared_refine(&mut t, &store, b, &decoupled).unwrap();
        assert_ne!(t.value(ya).data(), t.value(yc).data());

        let single = t.constant(rand_mat(&mut rng, 1, 8));
        let y = shared_refine(&mut t, &store, single, &shared).unwrap();
        assert_eq!(t.shape(y), &[1, 8]);
        assert!(t.value(y).is_finite());
    }

    #[test]
    fn width_mismatch_is_an_error() {
        let mut store = ParamStore::new();
        let p = AttentionParams::new(&mut store, 0, "a", 8, 2).unwrap();
        let mut t = Tape::new();
        let x = t.constant(Tensor::zeros(&[2, 6]));
        assert!(shared_refine(&mut t, &store, x, &p).is_err());
    }

    #[test]
    fn attention_gradients_match_finite_differences() {
        for seed in 0..10 {
            let mut store = ParamStore::new();
            let p = AttentionParams::new(&mut store, seed, "a", 4, 2).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let q = rand_mat(&mut rng, 3, 4);
            let kv = rand_mat(&mut rng, 2, 4);
            let w = rand_mat(&mut rng, 3, 4);
            let ids = [p.w_q, p.w_k, p.w_v, p.w_o, p.ln_scale, p.ln_shift];
            let report = gradcheck::check_params(&mut store, &ids, 1e-5, |t, s| {
                let (qv, kvv, wv) = (t.constant(q.clone()), t.constant(kv.clone()), t.constant(w.clone()));
                let y = multi_head_attention(t, s, qv, kvv, kvv, &p, None)?;
                let y = t.hadamard(y, wv)?;
                t.sum(y)
            })
            .unwrap();
            assert!(report.max_rel_error() < 1e-4, "seed {seed}: {:?}", report.rel_errors);

            let report = gradcheck::check(&[q.clone(), kv.clone()], 1e-5, |t, v| {
                let wv = t.constant(w.clone());
                let y = multi_head_attention(t, &store, v[0], v[1], v[1], &p, None)?;
                let y = t.hadamard(y, wv)?;
                t.sum(y)
            })
            .unwrap();
            assert!(report.max_rel_error() < 1e-4, "seed {seed}: {:?}", report.rel_errors);
        }
    }

    #[test]
    fn params_receive_gradients_through_block() {
        let mut store = ParamStore::new();
        let p = AttentionParams::new(&mut store, 5, "a", 8, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut t = Tape::new();
        let x = t.constant(rand_mat(&mut rng, 3, 8));
        let w = t.constant(rand_mat(&mut rng, 3, 8));
        let y = shared_refine(&mut t, &store, x, &p).unwrap();
        let y = t.hadamard(y, w).unwrap();
        let l = t.sum(y).unwrap();
        t.backward(l).unwrap();
        store.accumulate_from(&t, 1.0);
        for id in [p.w_q, p.w_k, p.w_v, p.w_o, p.ln_scale, p.ln_shift] {
            let g = store.get(id).grad().expect("gradient");
            assert!(g.iter().any(|v| *v != 0.0));
        }
    }

    #[test]
    fn sinusoidal_examples() {
        let t = sinusoidal_init(3, 6).unwrap();
        assert_eq!(t.row(0), &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        assert!(t.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        let t = sinusoidal_init(2, 4).unwrap();
        let want = [1f64.sin(), 1f64.cos(), 0.01f64.sin(), 0.01f64.cos()];
        for (x, y) in t.row(1).iter().zip(want) {
            assert!((x - y).abs() < 1e-12);
        }
        assert!(sinusoidal_init(2, 5).is_err());
    }

    #[test]
    fn causal_mask_blocks_future() {
        let mut store = ParamStore::new();
        let p = AttentionParams::new(&mut store, 3, "a", 4, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_mat(&mut rng, 4, 4);
        let mut t = Tape::new();
        let xv = t.constant(x.clone());
        let m = t.constant(causal_mask(4));
        let att = attend(&mut t, &store, xv, xv, xv, &p, Some(m)).unwrap();
        let w = t.value(att.weights[0]);
        for i in 0..4 {
            for j in i + 1..4 {
                assert_eq!(w.at(i, j), 0.0);
            }
        }
    }
}
