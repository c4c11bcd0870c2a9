use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{LinearParams, Tensor};

/// Seedable generator with a platform-independent stream (ChaCha8).
#[derive(Debug, Clone)]
pub struct Rng {
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Independent generator for a sub-task, keyed by `stream`. Derived streams of the same
    /// parent never depend on how much of the parent has been consumed.
    pub fn derive(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self { inner }
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        if lo == hi {
            return lo;
        }
        self.inner.random_range(lo..hi)
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    pub fn index(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.inner.random_bool(p.clamp(0.0, 1.0))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.random()
    }

    pub fn shuffle<T>(&mut self, v: &mut [T]) {
        use rand::seq::SliceRandom;
        v.shuffle(&mut self.inner);
    }

    pub fn normal_tensor(&mut self, shape: &[usize], std: f64) -> Tensor {
        let n = shape.iter().product();
        Tensor::from_vec(shape.to_vec(), (0..n).map(|_| std * self.normal()).collect())
            .expect("shape matches length")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitScheme {
    /// Uniform in `±sqrt(6 / (fan_in + fan_out))`, zero bias.
    XavierUniform,
    Zeros,
}

pub fn init_params(rng: &mut Rng, fan_in: usize, fan_out: usize, scheme: InitScheme) -> LinearParams {
    assert!(fan_in > 0 && fan_out > 0, "linear layer dims must be positive");
    let weight = match scheme {
        InitScheme::XavierUniform => {
            let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let data = (0..fan_in * fan_out).map(|_| rng.uniform(-a, a)).collect();
            Tensor::from_vec(vec![fan_out, fan_in], data).expect("shape matches length")
        }
        InitScheme::Zeros => Tensor::zeros(&[fan_out, fan_in]),
    };
    LinearParams {
        weight,
        bias: Tensor::zeros(&[fan_out]),
    }
}
