//! Seeded random source and the parameter initializers used by every model.

use rand::seq::SliceRandom;
use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// Deterministic generator. ChaCha is counter based, so `split` hands out
/// independent streams from the same seed without consuming this one.
#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// A fresh generator on stream `stream` of this generator's seed.
    pub fn split(&self, stream: u64) -> Rng {
        let mut inner = ChaCha8Rng::seed_from_u64(self.seed);
        inner.set_stream(stream);
        Rng { seed: self.seed, inner }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Uniform on `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.gen::<f64>()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    /// Uniform integer in `[lo, hi)`.
    pub fn index(&mut self, lo: usize, hi: usize) -> usize {
        self.inner.gen_range(lo..hi)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        items.shuffle(&mut self.inner);
    }
}

pub fn glorot_bound(n_in: usize, n_out: usize) -> f64 {
    (6.0 / (n_in + n_out) as f64).sqrt()
}

/// `n_out × n_in` matrix with entries uniform in `±sqrt(6 / (n_in + n_out))`.
pub fn glorot_uniform(n_in: usize, n_out: usize, rng: &mut Rng) -> Result<Matrix> {
    if n_in == 0 {
        return Err(Error::ZeroDimension { what: "n_in" });
    }
    if n_out == 0 {
        return Err(Error::ZeroDimension { what: "n_out" });
    }
    let bound = glorot_bound(n_in, n_out);
    let data = (0..n_in * n_out).map(|_| rng.uniform_range(-bound, bound)).collect();
    Matrix::from_vec(n_out, n_in, data)
}

/// Random orthogonal matrix: Householder QR of a Gaussian matrix, with the
/// columns of Q flipped so that R has a non-negative diagonal.
pub fn orthogonal(n: usize, rng: &mut Rng) -> Result<Matrix> {
    if n == 0 {
        return Err(Error::ZeroDimension { what: "n" });
    }
    let mut a: Vec<f64> = (0..n * n).map(|_| rng.normal()).collect();
    let mut q = Matrix::identity(n);

    for k in 0..n {
        let norm = (k..n).map(|i| a[i * n + k].powi(2)).sum::<f64>().sqrt();
        if norm == 0.0 {
            continue;
        }
        let alpha = if a[k * n + k] > 0.0 { -norm } else { norm };
        let mut v: Vec<f64> = (k..n).map(|i| a[i * n + k]).collect();
        v[0] -= alpha;
        let vnorm2: f64 = v.iter().map(|x| x * x).sum();
        if vnorm2 == 0.0 {
            continue;
        }
        // A <- (I - 2vvᵀ/vᵀv) A on rows k.., and Q <- Q H on columns k..
        for j in 0..n {
            let s: f64 = (k..n).map(|i| v[i - k] * a[i * n + j]).sum::<f64>() * 2.0 / vnorm2;
            for i in k..n {
                a[i * n + j] -= s * v[i - k];
            }
        }
        for i in 0..n {
            let row = q.row_mut(i);
            let s: f64 = (k..n).map(|j| row[j] * v[j - k]).sum::<f64>() * 2.0 / vnorm2;
            for j in k..n {
                row[j] -= s * v[j - k];
            }
        }
    }

    for j in 0..n {
        if a[j * n + j] < 0.0 {
            for i in 0..n {
                let v = q.get(i, j);
                q.set(i, j, -v);
            }
        }
    }
    Ok(q)
}

/// Raw attention weights, uniform in `(0.1, 1.0)`.
pub fn attention_init(k: usize, rng: &mut Rng) -> Result<Vec<f64>> {
    if k == 0 {
        return Err(Error::ZeroDimension {
            what: "attention window K",
        });
    }
    Ok((0..k)
        .map(|_| loop {
            let v = rng.uniform_range(0.1, 1.0);
            if v > 0.1 {
                break v;
            }
        })
        .collect())
}
