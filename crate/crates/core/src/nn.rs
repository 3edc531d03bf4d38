//! Parameter initialization and small dense layers.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::Result;
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, Var};

/// RNG for one named parameter. Deriving it from the name means the same
/// parameter gets the same initial value in every architecture variant that
/// contains it, which keeps ablation runs paired.
pub fn param_rng(seed: u64, name: &str) -> ChaCha8Rng {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    ChaCha8Rng::seed_from_u64(seed ^ h)
}

/// Uniform in `[-1/√fan_in, 1/√fan_in]`.
pub fn uniform_fan_in(seed: u64, name: &str, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let mut rng = param_rng(seed, name);
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("non-empty shape")
}

pub fn gaussian(seed: u64, name: &str, shape: &[usize], std: f64) -> Tensor {
    let mut rng = param_rng(seed, name);
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z * std
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("non-empty shape")
}

/// `y = x·W (+ b)` with `W: in×out`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new(store: &mut ParamStore, seed: u64, name: &str, d_in: usize, d_out: usize, bias: bool) -> Self {
        let wname = format!("{name}.weight");
        let weight = store.insert(&wname, uniform_fan_in(seed, &wname, &[d_in, d_out], d_in));
        let bias = bias.then(|| store.insert(format!("{name}.bias"), Tensor::zeros(&[d_out])));
        Linear { weight, bias }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let y = tape.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = tape.param(store, b);
                tape.add(y, b)
            }
            None => Ok(y),
        }
    }
}

