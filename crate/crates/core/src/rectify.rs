//! Training-only bidirectional text head: a composite visual feature `p`
//! conditions two teacher-forced decoders, one reading the description left
//! to right and one right to left, and the rectify loss scores both.

use serde::{Deserialize, Serialize};

use crate::attention::{causal_mask, multi_head_attention, sinusoidal_init, AttentionParams};
use crate::data::TokenSeq;
use crate::error::{Error, Result};
use crate::nn::{gaussian, Linear};
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, Var};

/// Row count both grids are pooled to before averaging.
pub const COMPOSITE_ROWS: usize = 16;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    /// Mean over positions, summed over classes.
    #[default]
    Mean,
    /// Sum over positions and classes.
    Sum,
}

/// `p`, `COMPOSITE_ROWS×d`.
#[derive(Debug, Clone, Copy)]
pub struct CompositeFeature(pub Var);

#[derive(Debug, Clone)]
pub struct DecoderStack {
    /// `(causal self-attention, cross-attention to p)` per layer.
    pub layers: Vec<(AttentionParams, AttentionParams)>,
    pub out: Linear,
}

impl DecoderStack {
    fn new(store: &mut ParamStore, seed: u64, prefix: &str, vocab: usize, d: usize, heads: usize, layers: usize) -> Result<Self> {
        let layers = (0..layers)
            .map(|l| {
                Ok((
                    AttentionParams::new(store, seed, &format!("{prefix}.{l}.self"), d, heads)?,
                    AttentionParams::new(store, seed, &format!("{prefix}.{l}.cross"), d, heads)?,
                ))
            })
            .collect::<Result<_>>()?;
        let out = Linear::new(store, seed, &format!("{prefix}.out"), d, vocab, true);
        Ok(DecoderStack { layers, out })
    }
}

#[derive(Debug, Clone)]
pub struct RectifyDecoder {
    pub d_model: usize,
    pub vocab: usize,
    pub embed: ParamId,
    pub forward: DecoderStack,
    pub backward: DecoderStack,
}

impl RectifyDecoder {
    /// Parameters are registered under `prefix`, so the whole head can later
    /// be dropped with [`ParamStore::remove_prefix`].
    pub fn new(
        store: &mut ParamStore,
        seed: u64,
        prefix: &str,
        vocab: usize,
        d: usize,
        heads: usize,
        layers: usize,
    ) -> Result<Self> {
        if vocab < 4 {
            return Err(Error::invalid("rectify", format!("vocabulary of {vocab} tokens is too small")));
        }
        let ename = format!("{prefix}.embed");
        let embed = store.insert(&ename, gaussian(seed, &ename, &[vocab, d], 1.0));
        Ok(RectifyDecoder {
            d_model: d,
            vocab,
            embed,
            forward: DecoderStack::new(store, seed, &format!("{prefix}.fwd"), vocab, d, heads, layers)?,
            backward: DecoderStack::new(store, seed, &format!("{prefix}.bwd"), vocab, d, heads, layers)?,
        })
    }
}

/// `out×n` averaging matrix: bin `i` covers rows
/// `floor(i·n/out) .. ceil((i+1)·n/out)`. With `n < out` rows repeat.
pub fn pooling_matrix(n: usize, out: usize) -> Tensor {
    let mut t = Tensor::zeros(&[out, n]);
    let data = t.data_mut();
    for i in 0..out {
        let lo = i * n / out;
        let hi = ((i + 1) * n).div_ceil(out).max(lo + 1);
        let w = 1.0 / (hi - lo) as f64;
        for j in lo..hi {
            data[i * n + j] = w;
        }
    }
    t
}

fn pool_rows(tape: &mut Tape, x: Var, out: usize) -> Result<Var> {
    let n = tape.shape(x)[0];
    if n == out {
        return Ok(x);
    }
    let p = tape.constant(pooling_matrix(n, out));
    tape.matmul(p, x)
}

/// Pools both inputs to [`COMPOSITE_ROWS`] rows and averages them.
pub fn fuse_support_query(tape: &mut Tape, support: Var, query: Var) -> Result<CompositeFeature> {
    let (s, q) = (tape.shape(support), tape.shape(query));
    if s.len() != 2 || q.len() != 2 || s[1] != q[1] {
        return Err(Error::Shape {
            op: "fuse_support_query",
            lhs: s.to_vec(),
            rhs: q.to_vec(),
        });
    }
    let sp = pool_rows(tape, support, COMPOSITE_ROWS)?;
    let qp = pool_rows(tape, query, COMPOSITE_ROWS)?;
    let sum = tape.add(sp, qp)?;
    Ok(CompositeFeature(tape.scale(sum, 0.5)?))
}

fn run_stack(
    tape: &mut Tape,
    store: &ParamStore,
    dec: &RectifyDecoder,
    stack: &DecoderStack,
    tokens: &[usize],
    p: Var,
) -> Result<Var> {
    let n = tokens.len();
    let table = tape.param(store, dec.embed);
    let emb = tape.gather_rows(table, tokens)?;
    let pos = tape.constant(sinusoidal_init(n, dec.d_model)?);
    let mut x = tape.add(emb, pos)?;
    let mask = tape.constant(causal_mask(n));
    for (self_attn, cross) in &stack.layers {
        x = multi_head_attention(tape, store, x, x, x, self_attn, Some(mask))?;
        x = multi_head_attention(tape, store, x, p, p, cross, None)?;
    }
    stack.out.forward(tape, store, x)
}

/// Teacher-forced logits, each `(M−1)×V`. Forward row `j` predicts token
/// `j+1` from tokens `0..=j`; backward row `j` predicts token `j` from
/// tokens `j+1..M`.
pub fn generate_bidirectional(
    tape: &mut Tape,
    store: &ParamStore,
    dec: &RectifyDecoder,
    p: CompositeFeature,
    target: &TokenSeq,
) -> Result<(Var, Var)> {
    let ids = &target.ids;
    let m = ids.len();
    if m < 2 {
        return Err(Error::invalid("generate_bidirectional", format!("sequence of length {m}")));
    }
    if let Some(&bad) = ids.iter().find(|&&t| t >= dec.vocab) {
        return Err(Error::invalid(
            "generate_bidirectional",
            format!("token id {bad} outside vocabulary of {}", dec.vocab),
        ));
    }
    let fwd = run_stack(tape, store, dec, &dec.forward, &ids[..m - 1], p.0)?;
    let rev: Vec<usize> = ids.iter().rev().copied().collect();
    let raw = run_stack(tape, store, dec, &dec.backward, &rev[..m - 1], p.0)?;
    // Reversed row i predicts token m-2-i; put it at row m-2-i.
    let order: Vec<usize> = (0..m - 1).rev().collect();
    let bwd = tape.gather_rows(raw, &order)?;
    Ok((fwd, bwd))
}

/// `½·Σ_c [CE_fwd(c) + CE_bwd(c)]` where each CE is the mean (or sum, per
/// `reduction`) over the `M_c − 1` positions of class `c`.
pub fn rectify_loss(tape: &mut Tape, logits: &[(Var, Var)], targets: &[&TokenSeq], reduction: Reduction) -> Result<Var> {
    if logits.is_empty() || logits.len() != targets.len() {
        return Err(Error::invalid(
            "rectify_loss",
            format!("{} logit pairs for {} targets", logits.len(), targets.len()),
        ));
    }
    let mut terms = Vec::with_capacity(2 * logits.len());
    for (&(f, b), t) in logits.iter().zip(targets) {
        let m = t.ids.len();
        for v in [f, b] {
            if m < 2 || tape.shape(v)[0] != m - 1 {
                return Err(Error::Shape {
                    op: "rectify_loss",
                    lhs: tape.shape(v).to_vec(),
                    rhs: vec![m.saturating_sub(1)],
                });
            }
        }
        let cf = tape.cross_entropy_logits(f, &t.ids[1..])?;
        let cb = tape.cross_entropy_logits(b, &t.ids[..m - 1])?;
        let pair = tape.add(cf, cb)?;
        terms.push(match reduction {
            Reduction::Mean => pair,
            Reduction::Sum => tape.scale(pair, (m - 1) as f64)?,
        });
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = tape.add(total, t)?;
    }
    tape.scale(total, 0.5)
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::attention::LAYER_NORM_EPS;
    use crate::optim::{OptimConfig, OptimKind, Optimizer};

    type M = Vec<Vec<f64>>;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn to_m(t: &Tensor) -> M {
        let (r, c) = t.dims2().unwrap();
        (0..r).map(|i| (0..c).map(|j| t.at(i, j)).collect()).collect()
    }

    fn mm(a: &M, b: &M) -> M {
        let (n, k, m) = (a.len(), b.len(), b[0].len());
        let mut out = vec![vec![0.0; m]; n];
        for i in 0..n {
            for j in 0..m {
                for l in 0..k {
                    out[i][j] += a[i][l] * b[l][j];
                }
            }
        }
        out
    }

    /// Single-head post-norm block, written out element by element.
    fn attn_oracle(store: &ParamStore, p: &AttentionParams, q: &M, kv: &M, causal: bool) -> M {
        let g = |id| to_m(store.get(id));
        let (qp, kp, vp) = (mm(q, &g(p.w_q)), mm(kv, &g(p.w_k)), mm(kv, &g(p.w_v)));
        let d = q[0].len();
        let mut ctx = vec![vec![0.0; d]; q.len()];
        for i in 0..q.len() {
            let mut s: Vec<f64> = (0..kv.len())
                .map(|j| {
                    let dot: f64 = (0..d).map(|t| qp[i][t] * kp[j][t]).sum();
                    dot / (d as f64).sqrt() + if causal && j > i { -1e9 } else { 0.0 }
                })
                .collect();
            let m = s.iter().cloned().fold(f64::MIN, f64::max);
            s.iter_mut().for_each(|x| *x = (*x - m).exp());
            let z: f64 = s.iter().sum();
            for j in 0..kv.len() {
                for t in 0..d {
                    ctx[i][t] += s[j] / z * vp[j][t];
                }
            }
        }
        let o = mm(&ctx, &g(p.w_o));
        let (scale, shift) = (store.get(p.ln_scale).data(), store.get(p.ln_shift).data());
        (0..q.len())
            .map(|i| {
                let r: Vec<f64> = (0..d).map(|t| q[i][t] + o[i][t]).collect();
                let mean = r.iter().sum::<f64>() / d as f64;
                let var = r.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / d as f64;
                (0..d)
                    .map(|t| (r[t] - mean) / (var + LAYER_NORM_EPS).sqrt() * scale[t] + shift[t])
                    .collect()
            })
            .collect()
    }

    fn stack_oracle(store: &ParamStore, dec: &RectifyDecoder, stack: &DecoderStack, tokens: &[usize], p: &M) -> M {
        let emb = to_m(store.get(dec.embed));
        let pos = to_m(&sinusoidal_init(tokens.len(), dec.d_model).unwrap());
        let mut x: M = tokens
            .iter()
            .enumerate()
            .map(|(i, &t)| emb[t].iter().zip(&pos[i]).map(|(a, b)| a + b).collect())
            .collect();
        for (sa, ca) in &stack.layers {
            x = attn_oracle(store, sa, &x, &x, true);
            x = attn_oracle(store, ca, &x, p, false);
        }
        let mut y = mm(&x, &to_m(store.get(stack.out.weight)));
        let b = store.get(stack.out.bias.unwrap()).data();
        y.iter_mut().for_each(|r| r.iter_mut().zip(b).for_each(|(v, bb)| *v += bb));
        y
    }

    fn seq(ids: &[usize]) -> TokenSeq {
        TokenSeq { ids: ids.to_vec() }
    }

    #[test]
    fn pooling_matrix_rows_sum_to_one() {
        for (n, out) in [(64, 16), (5, 16), (16, 16), (1, 16), (17, 16)] {
            let p = pooling_matrix(n, out);
            for i in 0..out {
                assert!((p.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12, "{n}->{out} row {i}");
            }
        }
        let p = pooling_matrix(64, 16);
        assert_eq!(&p.row(0)[..5], &[0.25, 0.25, 0.25, 0.25, 0.0]);
    }

    #[test]
    fn fuse_identical_and_opposite() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_tensor(&mut rng, &[16, 4]);
        let mut tape = Tape::new();
        let a = tape.constant(x.clone());
        let p = fuse_support_query(&mut tape, a, a).unwrap();
        assert_eq!(tape.value(p.0), &x);
        let neg = tape.scale(a, -1.0).unwrap();
        let p = fuse_support_query(&mut tape, a, neg).unwrap();
        assert!(tape.value(p.0).data().iter().all(|v| *v == 0.0));
        let bad = tape.constant(Tensor::zeros(&[3, 5]));
        assert!(fuse_support_query(&mut tape, a, bad).is_err());
    }

    #[test]
    fn fuse_matches_scalar_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = rand_tensor(&mut rng, &[5, 4]);
        let q = rand_tensor(&mut rng, &[64, 4]);
        let mut tape = Tape::new();
        let (sv, qv) = (tape.constant(s.clone()), tape.constant(q.clone()));
        let p = fuse_support_query(&mut tape, sv, qv).unwrap();
        for i in 0..COMPOSITE_ROWS {
            let (slo, shi) = (i * 5 / 16, ((i + 1) * 5).div_ceil(16).max(i * 5 / 16 + 1));
            for k in 0..4 {
                let sm = (slo..shi).map(|r| s.at(r, k)).sum::<f64>() / (shi - slo) as f64;
                let qm = (4 * i..4 * i + 4).map(|r| q.at(r, k)).sum::<f64>() / 4.0;
                assert!((tape.value(p.0).at(i, k) - (sm + qm) / 2.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn minimal_sequence_shapes() {
        let mut store = ParamStore::new();
        let dec = RectifyDecoder::new(&mut store, 0, "rectify", 6, 4, 1, 1).unwrap();
        let mut tape = Tape::new();
        let p = CompositeFeature(tape.constant(Tensor::full(&[16, 4], 0.1)));
        let (f, b) = generate_bidirectional(&mut tape, &store, &dec, p, &seq(&[1, 2])).unwrap();
        assert_eq!(tape.shape(f), &[1, 6]);
        assert_eq!(tape.shape(b), &[1, 6]);
        assert!(generate_bidirectional(&mut tape, &store, &dec, p, &seq(&[1])).is_err());
        assert!(generate_bidirectional(&mut tape, &store, &dec, p, &seq(&[1, 9, 2])).is_err());
    }

    #[test]
    fn forward_direction_ignores_future_tokens() {
        let mut store = ParamStore::new();
        let dec = RectifyDecoder::new(&mut store, 3, "rectify", 10, 8, 2, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pt = rand_tensor(&mut rng, &[16, 8]);
        let logits = |ids: &[usize]| {
            let mut tape = Tape::new();
            let p = CompositeFeature(tape.constant(pt.clone()));
            let (f, b) = generate_bidirectional(&mut tape, &store, &dec, p, &seq(ids)).unwrap();
            (tape.value(f).clone(), tape.value(b).clone())
        };
        let (fa, ba) = logits(&[1, 5, 6, 7, 2]);
        let (fb, bb) = logits(&[1, 5, 6, 7, 8]);
        // Changing the last token: forward rows before the last are untouched.
        assert_eq!(&fa.data()[..3 * 10], &fb.data()[..3 * 10]);
        // Changing the first token: backward rows after the first are untouched.
        let (_, bc) = logits(&[4, 5, 6, 7, 2]);
        assert_eq!(&ba.data()[10..], &bc.data()[10..]);
        assert_ne!(ba.data(), bb.data());
    }

    #[test]
    fn one_layer_decoder_matches_oracle() {
        let mut store = ParamStore::new();
        let dec = RectifyDecoder::new(&mut store, 11, "rectify", 5, 4, 1, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pt = rand_tensor(&mut rng, &[16, 4]);
        let ids = [1, 4, 2];
        let mut tape = Tape::new();
        let p = CompositeFeature(tape.constant(pt.clone()));
        let (f, b) = generate_bidirectional(&mut tape, &store, &dec, p, &seq(&ids)).unwrap();
        let pm = to_m(&pt);
        let wf = stack_oracle(&store, &dec, &dec.forward, &ids[..2], &pm);
        let wb_raw = stack_oracle(&store, &dec, &dec.backward, &[2, 4], &pm);
        for j in 0..2 {
            for v in 0..5 {
                assert!((tape.value(f).at(j, v) - wf[j][v]).abs() < 1e-9);
                assert!((tape.value(b).at(j, v) - wb_raw[1 - j][v]).abs() < 1e-9);
            }
        }
    }

    fn loss_of(f: &Tensor, b: &Tensor, t: &TokenSeq, red: Reduction) -> f64 {
        let mut tape = Tape::new();
        let (fv, bv) = (tape.constant(f.clone()), tape.constant(b.clone()));
        let l = rectify_loss(&mut tape, &[(fv, bv)], &[t], red).unwrap();
        tape.scalar(l)
    }

    #[test]
    fn loss_saturated_and_uniform_limits() {
        let t = seq(&[1, 3, 2]);
        let onehot = |targets: &[usize]| {
            let rows: Vec<Vec<f64>> = targets
                .iter()
                .map(|&k| (0..4).map(|v| if v == k { 40.0 } else { 0.0 }).collect())
                .collect();
            Tensor::from_rows(&rows).unwrap()
        };
        let l = loss_of(&onehot(&[3, 2]), &onehot(&[1, 3]), &t, Reduction::Mean);
        assert!(l < 1e-10 && l >= 0.0, "{l}");
        let z = Tensor::zeros(&[2, 4]);
        assert_eq!(loss_of(&z, &z, &t, Reduction::Mean), 4f64.ln());
        assert!((loss_of(&z, &z, &t, Reduction::Sum) - 2.0 * 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn loss_matches_direct_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let t = seq(&[1, 3, 2]);
        let f = rand_tensor(&mut rng, &[2, 4]);
        let b = rand_tensor(&mut rng, &[2, 4]);
        let nll = |x: &Tensor, row: usize, k: usize| {
            let lse = (0..4).map(|v| x.at(row, v).exp()).sum::<f64>().ln();
            lse - x.at(row, k)
        };
        let fwd = (nll(&f, 0, 3) + nll(&f, 1, 2)) / 2.0;
        let bwd = (nll(&b, 0, 1) + nll(&b, 1, 3)) / 2.0;
        let want = 0.5 * (fwd + bwd);
        assert!((loss_of(&f, &b, &t, Reduction::Mean) - want).abs() < 1e-12);
    }

    #[test]
    fn loss_length_mismatch_rejected() {
        let mut tape = Tape::new();
        let f = tape.constant(Tensor::zeros(&[3, 4]));
        assert!(rectify_loss(&mut tape, &[(f, f)], &[&seq(&[1, 3, 2])], Reduction::Mean).is_err());
    }

    /// Runs `steps` Adam updates on the rectify loss alone for a two-class
    /// toy episode and returns (initial, final) loss.
    pub(crate) fn train_toy(seed: u64, steps: usize) -> (f64, f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vocab = 24;
        let mut store = ParamStore::new();
        let dec = RectifyDecoder::new(&mut store, seed, "rectify", vocab, 8, 2, 1).unwrap();
        let feats = [rand_tensor(&mut rng, &[16, 8]), rand_tensor(&mut rng, &[16, 8])];
        let targets: Vec<TokenSeq> = (0..2)
            .map(|_| {
                let m = rng.random_range(4..=8);
                let mut ids = vec![1];
                ids.extend((0..m - 2).map(|_| rng.random_range(4..vocab)));
                ids.push(2);
                seq(&ids)
            })
            .collect();
        let mut opt = Optimizer::new(OptimConfig {
            kind: OptimKind::Adam,
            lr: 0.01,
            clip: 0.0,
            ..OptimConfig::default()
        });
        let mut first = None;
        let mut last = 0.0;
        for _ in 0..=steps {
            let mut tape = Tape::new();
            let mut pairs = Vec::new();
            for (f, t) in feats.iter().zip(&targets) {
                let p = CompositeFeature(tape.constant(f.clone()));
                pairs.push(generate_bidirectional(&mut tape, &store, &dec, p, t).unwrap());
            }
            let refs: Vec<&TokenSeq> = targets.iter().collect();
            let loss = rectify_loss(&mut tape, &pairs, &refs, Reduction::Mean).unwrap();
            last = tape.scalar(loss);
            first.get_or_insert(last);
            tape.backward(loss).unwrap();
            let g = store.collect_grads(&tape);
            opt.apply(&mut store, &g).unwrap();
        }
        (first.unwrap(), last)
    }

    #[test]
    fn rectify_loss_is_trainable() {
        let (first, last) = train_toy(0, 200);
        assert!(last <= 0.2 * first, "{first} -> {last}");
    }

    #[test]
    fn decoder_gradients_match_finite_differences() {
        use crate::gradcheck;
        let mut store = ParamStore::new();
        let dec = RectifyDecoder::new(&mut store, 2, "rectify", 6, 4, 2, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let pt = rand_tensor(&mut rng, &[16, 4]);
        let t = seq(&[1, 4, 5, 2]);
        let ids: Vec<ParamId> = store.iter().map(|(id, _, _)| id).collect();
        let report = gradcheck::check_params(&mut store, &ids, 1e-5, |tape, store| {
            let p = CompositeFeature(tape.constant(pt.clone()));
            let pair = generate_bidirectional(tape, store, &dec, p, &t)?;
            rectify_loss(tape, &[pair], &[&t], Reduction::Mean)
        })
        .unwrap();
        assert!(report.max_rel_error() < 1e-4, "{:?}", report.rel_errors);
    }
}
