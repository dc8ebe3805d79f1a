//! Global-norm gradient clipping, ADADELTA and RMSprop.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::ModelParams;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Optimizer {
    Adadelta { rho: f64, eps: f64 },
    RmsProp { decay: f64, eps: f64, lr: f64 },
}

impl Optimizer {
    pub fn adadelta() -> Self {
        Optimizer::Adadelta { rho: 0.95, eps: 1e-6 }
    }

    pub fn rmsprop() -> Self {
        Optimizer::RmsProp {
            decay: 0.9,
            eps: 1e-6,
            lr: 1e-4,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Optimizer::Adadelta { .. } => "adadelta",
            Optimizer::RmsProp { .. } => "rmsprop",
        }
    }

    /// Accumulator slots kept per parameter.
    fn slots(&self) -> usize {
        match self {
            Optimizer::Adadelta { .. } => 2,
            Optimizer::RmsProp { .. } => 1,
        }
    }
}

impl fmt::Display for Optimizer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Optimizer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "adadelta" => Ok(Optimizer::adadelta()),
            "rmsprop" => Ok(Optimizer::rmsprop()),
            other => Err(Error::Config(format!("unknown optimizer '{other}'"))),
        }
    }
}

/// Per-parameter accumulators, laid out block by block like the parameters.
///
/// ADADELTA keeps `E[g²]` in slot 0 and `E[Δx²]` in slot 1; RMSprop keeps
/// `E[g²]` only.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    pub optimizer: Optimizer,
    pub slots: Vec<Vec<Vec<f64>>>,
}

impl OptimState {
    /// Zero accumulators shaped like the given blocks.
    pub fn new(optimizer: Optimizer, block_sizes: &[usize]) -> Self {
        let slots = (0..optimizer.slots())
            .map(|_| block_sizes.iter().map(|&n| vec![0.0; n]).collect())
            .collect();
        OptimState { optimizer, slots }
    }

    pub fn for_params(optimizer: Optimizer, params: &ModelParams) -> Self {
        let sizes: Vec<usize> = params.blocks().iter().map(|(_, _, b)| b.len()).collect();
        Self::new(optimizer, &sizes)
    }

    fn check(&self, params: &[&mut [f64]], grads: &[&[f64]]) -> Result<()> {
        let slots = &self.slots[0];
        let ok = params.len() == slots.len()
            && grads.len() == slots.len()
            && params
                .iter()
                .zip(grads)
                .zip(slots)
                .all(|((p, g), s)| p.len() == s.len() && g.len() == s.len());
        if ok {
            Ok(())
        } else {
            Err(Error::DimensionMismatch {
                op: "optimizer step",
                left: (slots.len(), slots.iter().map(Vec::len).sum()),
                right: (params.len(), params.iter().map(|p| p.len()).sum()),
            })
        }
    }

    /// One update over all blocks.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) -> Result<()> {
        self.check(params, grads)?;
        match self.optimizer {
            Optimizer::Adadelta { rho, eps } => {
                let (eg, edx) = self.slots.split_at_mut(1);
                for (bi, (p, g)) in params.iter_mut().zip(grads).enumerate() {
                    adadelta_block(rho, eps, p, g, &mut eg[0][bi], &mut edx[0][bi]);
                }
            }
            Optimizer::RmsProp { decay, eps, lr } => {
                for (bi, (p, g)) in params.iter_mut().zip(grads).enumerate() {
                    rmsprop_block(decay, eps, lr, p, g, &mut self.slots[0][bi]);
                }
            }
        }
        Ok(())
    }

    /// Applies `grads` to `params`; both must share a structure.
    pub fn step_model(&mut self, params: &mut ModelParams, grads: &ModelParams) -> Result<()> {
        let g: Vec<&[f64]> = grads.blocks().into_iter().map(|(_, _, b)| b).collect();
        let mut p: Vec<&mut [f64]> = params.blocks_mut().into_iter().map(|(_, _, b)| b).collect();
        self.step(&mut p, &g)
    }
}

fn adadelta_block(rho: f64, eps: f64, p: &mut [f64], g: &[f64], eg: &mut [f64], edx: &mut [f64]) {
    for i in 0..p.len() {
        let gi = g[i];
        eg[i] = rho * eg[i] + (1.0 - rho) * gi * gi;
        let dx = -((edx[i] + eps).sqrt() / (eg[i] + eps).sqrt()) * gi;
        edx[i] = rho * edx[i] + (1.0 - rho) * dx * dx;
        p[i] += dx;
    }
}

fn rmsprop_block(decay: f64, eps: f64, lr: f64, p: &mut [f64], g: &[f64], eg: &mut [f64]) {
    for i in 0..p.len() {
        let gi = g[i];
        eg[i] = decay * eg[i] + (1.0 - decay) * gi * gi;
        p[i] -= lr * gi / (eg[i] + eps).sqrt();
    }
}

/// Single-block ADADELTA update, for callers without a model.
pub fn adadelta_step(state: &mut OptimState, params: &mut [f64], grads: &[f64]) -> Result<()> {
    state.step(&mut [params], &[grads])
}

pub fn rmsprop_step(state: &mut OptimState, params: &mut [f64], grads: &[f64]) -> Result<()> {
    state.step(&mut [params], &[grads])
}

pub fn global_norm<B: AsRef<[f64]>>(blocks: &[B]) -> f64 {
    blocks
        .iter()
        .flat_map(|b| b.as_ref().iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
}

/// Rescales every block by `threshold / ‖g‖₂` when the joint norm exceeds
/// `threshold`. Returns the norm before clipping.
///
/// Norms within a few ulps of the threshold count as already clipped, which
/// makes clipping idempotent.
pub fn clip_gradients(blocks: &mut [&mut [f64]], threshold: f64) -> f64 {
    let norm = global_norm(blocks);
    if norm > threshold * (1.0 + 4.0 * f64::EPSILON) {
        let scale = threshold / norm;
        for b in blocks.iter_mut() {
            for v in b.iter_mut() {
                *v *= scale;
            }
        }
    }
    norm
}

pub fn clip_model_gradients(grads: &mut ModelParams, threshold: f64) -> f64 {
    let mut blocks: Vec<&mut [f64]> = grads.blocks_mut().into_iter().map(|(_, _, b)| b).collect();
    clip_gradients(&mut blocks, threshold)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::initializers::Rng;
    use proptest::prelude::*;

    #[test]
    fn small_gradient_is_untouched() {
        let mut g = vec![0.3, -0.4];
        let before = g.clone();
        let n = clip_gradients(&mut [&mut g], 1.0);
        assert_eq!(n, 0.5);
        assert_eq!(g, before);
    }

    #[test]
    fn three_four_five() {
        let mut g = vec![3.0, 4.0];
        clip_gradients(&mut [&mut g], 1.0);
        assert!((g[0] - 0.6).abs() < 1e-15 && (g[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn clipping_spans_blocks() {
        let mut a = vec![3.0];
        let mut b = vec![4.0];
        clip_gradients(&mut [&mut a, &mut b], 1.0);
        assert!((a[0] - 0.6).abs() < 1e-15 && (b[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_leaves_params() {
        for opt in [Optimizer::adadelta(), Optimizer::rmsprop()] {
            let mut st = OptimState::new(opt, &[3]);
            let mut p = vec![1.0, -2.0, 0.5];
            st.step(&mut [&mut p], &[&[0.0, 0.0, 0.0]]).unwrap();
            assert_eq!(p, vec![1.0, -2.0, 0.5]);
        }
    }

    #[test]
    fn adadelta_first_step_closed_form() {
        let (rho, eps) = (0.95, 1e-6);
        let g = [0.5, -2.0, 1e-3];
        let mut p = vec![0.0; 3];
        let mut st = OptimState::new(Optimizer::Adadelta { rho, eps }, &[3]);
        adadelta_step(&mut st, &mut p, &g).unwrap();
        for i in 0..3 {
            let expect = -(eps.sqrt() / ((1.0 - rho) * g[i] * g[i] + eps).sqrt()) * g[i];
            assert!(
                (p[i] - expect).abs() <= 1e-15 * expect.abs().max(1e-300),
                "{} vs {}",
                p[i],
                expect
            );
        }
        assert!(st.slots.iter().flatten().flatten().all(|&v| v >= 0.0));
    }

    #[test]
    fn rmsprop_first_step_magnitude() {
        let (decay, eps, lr) = (0.9, 1e-6, 1e-4);
        let g = [3.0, -0.7];
        let mut p = vec![0.0; 2];
        let mut st = OptimState::new(Optimizer::RmsProp { decay, eps, lr }, &[2]);
        rmsprop_step(&mut st, &mut p, &g).unwrap();
        let expect = lr / (1.0f64 - decay).sqrt();
        for i in 0..2 {
            assert!((p[i].abs() - expect).abs() / expect < 1e-4);
            assert_eq!(p[i].signum(), -g[i].signum());
        }
    }

    #[test]
    fn adadelta_descends_quadratic() {
        let mut rng = Rng::new(4);
        let target: Vec<f64> = (0..10).map(|_| rng.uniform_range(-1.0, 1.0)).collect();
        let mut theta = vec![0.0; 10];
        let loss = |t: &[f64]| t.iter().zip(&target).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        let initial = loss(&theta);
        let mut st = OptimState::new(Optimizer::adadelta(), &[10]);
        let mut prev = initial;
        for it in 0..200 {
            let g: Vec<f64> = theta.iter().zip(&target).map(|(a, b)| 2.0 * (a - b)).collect();
            adadelta_step(&mut st, &mut theta, &g).unwrap();
            let l = loss(&theta);
            if it >= 10 {
                assert!(l < prev, "iteration {it}: {l} >= {prev}");
            }
            prev = l;
        }
        assert!(prev < initial / 10.0);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut st = OptimState::new(Optimizer::rmsprop(), &[2]);
        let mut p = vec![0.0; 3];
        assert!(st.step(&mut [&mut p], &[&[0.0; 3]]).is_err());
    }

    proptest! {
        #[test]
        fn clip_bounds_norm_and_preserves_direction(
            g in proptest::collection::vec(-1e3f64..1e3, 1..40)
        ) {
            let mut c = g.clone();
            let norm = clip_gradients(&mut [&mut c], 1.0);
            let after = global_norm(&[&c]);
            prop_assert!(after <= 1.0 + 1e-12);
            if norm > 1.0 {
                let cos = c.iter().zip(&g).map(|(a, b)| a * b).sum::<f64>() / (after * norm);
                prop_assert!((cos - 1.0).abs() < 1e-12);
            }
            let mut twice = c.clone();
            clip_gradients(&mut [&mut twice], 1.0);
            prop_assert_eq!(twice, c);
        }

        #[test]
        fn updates_stay_finite(
            g in proptest::collection::vec(-1e6f64..1e6, 1..20),
            seed in any::<u64>(),
        ) {
            let mut rng = Rng::new(seed);
            for opt in [Optimizer::adadelta(), Optimizer::rmsprop()] {
                let mut p: Vec<f64> = (0..g.len()).map(|_| rng.normal()).collect();
                let mut st = OptimState::new(opt, &[g.len()]);
                for _ in 0..5 {
                    st.step(&mut [&mut p], &[&g]).unwrap();
                }
                prop_assert!(p.iter().all(|v| v.is_finite()));
                prop_assert!(st.slots.iter().flatten().flatten().all(|&v| v >= 0.0));
            }
        }
    }
}
