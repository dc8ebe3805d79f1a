//! Central finite differences against the analytic BPTT gradients.

use std::fmt;

use crate::cells::CellKind;
use crate::error::{Error, Result};
use crate::initializers::Rng;
use crate::model::{
    backward_with, forward, loss_and_output_grad, BackwardOptions, Batch, InputKind, Inputs, Mode, ModelParams,
    ModelShape, Targets,
};

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;

/// `|a − n| / max(|a|, |n|, 1e-8)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Per-coordinate central difference of `loss` around `params`.
pub fn numeric_gradient<F>(mut loss: F, params: &[f64], step: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if !(step > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "finite-difference step {step} must be positive"
        )));
    }
    let mut theta = params.to_vec();
    let mut grad = Vec::with_capacity(theta.len());
    for i in 0..theta.len() {
        let orig = theta[i];
        theta[i] = orig + step;
        let up = loss(&theta)?;
        theta[i] = orig - step;
        let down = loss(&theta)?;
        theta[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFinite(format!("loss at coordinate {i}")));
        }
        grad.push((up - down) / (2.0 * step));
    }
    Ok(grad)
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockReport {
    pub name: String,
    pub max_rel_error: f64,
    pub mean_rel_error: f64,
    pub worst_index: usize,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    pub seed: u64,
    pub blocks: Vec<BlockReport>,
}

impl GradReport {
    pub fn max_rel_error(&self) -> f64 {
        self.blocks.iter().map(|b| b.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error() < tolerance
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("seed,block,max_rel_error,mean_rel_error,worst_index,analytic,numeric\n");
        for b in &self.blocks {
            s.push_str(&format!(
                "{},{},{:e},{:e},{},{:e},{:e}\n",
                self.seed,
                b.name,
                b.max_rel_error,
                b.mean_rel_error,
                b.worst_index,
                b.analytic_at_worst,
                b.numeric_at_worst
            ));
        }
        s
    }
}

impl fmt::Display for GradReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "gradient check (seed {})", self.seed)?;
        for b in &self.blocks {
            writeln!(
                f,
                "  {:<14} max {:.3e}  mean {:.3e}  worst #{} (analytic {:.6e}, numeric {:.6e})",
                b.name, b.max_rel_error, b.mean_rel_error, b.worst_index, b.analytic_at_worst, b.numeric_at_worst
            )?;
        }
        write!(f, "  overall max relative error {:.3e}", self.max_rel_error())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CheckConfig {
    pub cell: CellKind,
    pub input_size: usize,
    pub hidden: usize,
    pub steps: usize,
    pub window: usize,
    pub batch: usize,
    pub bidirectional: bool,
    /// Token vocabulary; switches the input to an embedding lookup.
    pub vocab: Option<usize>,
    /// 0 for a regression head, otherwise the class count.
    pub classes: usize,
    /// Dropout with a mask frozen across all evaluations.
    pub dropout: f64,
    pub step: f64,
}

impl Default for CheckConfig {
    fn default() -> Self {
        CheckConfig {
            cell: CellKind::Rra,
            input_size: 3,
            hidden: 4,
            steps: 12,
            window: 3,
            batch: 2,
            bidirectional: false,
            vocab: None,
            classes: 0,
            dropout: 0.0,
            step: DEFAULT_STEP,
        }
    }
}

impl CheckConfig {
    pub fn shape(&self) -> ModelShape {
        ModelShape {
            cell: self.cell,
            input: match self.vocab {
                Some(vocab) => InputKind::Tokens {
                    vocab,
                    dim: self.input_size,
                },
                None => InputKind::Dense(self.input_size),
            },
            hidden: self.hidden,
            window: self.window,
            bidirectional: self.bidirectional,
            outputs: self.classes.max(1),
        }
    }

    /// Random model and batch; gate biases are perturbed off zero so their
    /// gradients are exercised in a generic position.
    pub fn build(&self, seed: u64) -> Result<(ModelParams, Batch)> {
        let mut rng = Rng::new(seed);
        let mut params = ModelParams::init(&self.shape(), &mut rng)?;
        for (name, _, block) in params.blocks_mut() {
            if name.ends_with(".b") {
                for v in block.iter_mut() {
                    *v = rng.uniform_range(-0.5, 0.5);
                }
            }
        }
        let (b, t) = (self.batch, self.steps);
        let inputs = match self.vocab {
            Some(v) => Inputs::Tokens((0..b * t).map(|_| rng.index(0, v)).collect()),
            None => Inputs::Dense {
                dim: self.input_size,
                data: (0..b * t * self.input_size)
                    .map(|_| rng.uniform_range(-1.0, 1.0))
                    .collect(),
            },
        };
        let targets = if self.classes == 0 {
            Targets::Regression((0..b).map(|_| rng.uniform_range(0.0, 2.0)).collect())
        } else {
            Targets::Classes((0..b).map(|_| rng.index(0, self.classes)).collect())
        };
        // rows get different lengths when there is more than one
        let mut mask = Vec::with_capacity(b * t);
        for row in 0..b {
            let len = if row == 0 { t } else { rng.index(t.div_ceil(2), t + 1) };
            mask.extend((0..t).map(|s| s < len));
        }
        Ok((params, Batch::new(b, t, inputs, &mask, targets)?))
    }
}

pub(crate) fn check_with(config: &CheckConfig, seed: u64, opts: BackwardOptions) -> Result<GradReport> {
    let (params, batch) = config.build(seed)?;
    let mode = if config.dropout > 0.0 {
        Mode::Train {
            dropout: config.dropout,
        }
    } else {
        Mode::Eval
    };
    let mask_rng = Rng::new(seed).split(0xd50);

    let (outputs, trace) = forward(&params, &batch, mode, &mut mask_rng.clone())?;
    let (_, d_out) = loss_and_output_grad(&outputs, batch.targets())?;
    let analytic = backward_with(&params, &batch, &trace, &d_out, opts)?;

    let mut blocks = Vec::new();
    let names: Vec<&'static str> = params.blocks().iter().map(|(n, _, _)| *n).collect();
    for (bi, name) in names.iter().enumerate() {
        let base = params.blocks()[bi].2.to_vec();
        let numeric = numeric_gradient(
            |theta| {
                let mut p = params.clone();
                p.blocks_mut()[bi].2.copy_from_slice(theta);
                let (out, _) = forward(&p, &batch, mode, &mut mask_rng.clone())?;
                Ok(loss_and_output_grad(&out, batch.targets())?.0)
            },
            &base,
            config.step,
        )?;
        let ana = analytic.blocks()[bi].2;
        let errs: Vec<f64> = ana.iter().zip(&numeric).map(|(&a, &n)| relative_error(a, n)).collect();
        let (worst, max) = errs
            .iter()
            .copied()
            .enumerate()
            .fold((0, 0.0), |acc, (i, e)| if e > acc.1 { (i, e) } else { acc });
        blocks.push(BlockReport {
            name: name.to_string(),
            max_rel_error: max,
            mean_rel_error: errs.iter().sum::<f64>() / errs.len().max(1) as f64,
            worst_index: worst,
            analytic_at_worst: ana[worst],
            numeric_at_worst: numeric[worst],
        });
    }
    Ok(GradReport { seed, blocks })
}

/// Compares every analytic parameter gradient of a random model against
/// central differences of the same loss.
pub fn check_gradients(config: &CheckConfig, seed: u64) -> Result<GradReport> {
    check_with(config, seed, BackwardOptions::default())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cells::normalize_attention;
    use crate::model::loss_and_grad;

    #[test]
    fn quadratic_gradient_is_identity() {
        let theta = [0.3, -1.2, 4.0, 0.0];
        let g = numeric_gradient(|t| Ok(0.5 * t.iter().map(|v| v * v).sum::<f64>()), &theta, 1e-5).unwrap();
        for (a, b) in g.iter().zip(&theta) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn constant_has_zero_gradient() {
        let g = numeric_gradient(|_| Ok(3.0), &[1.0, 2.0], 1e-5).unwrap();
        assert_eq!(g, vec![0.0, 0.0]);
    }

    #[test]
    fn non_finite_loss_is_an_error() {
        assert!(numeric_gradient(|t| Ok(1.0 / (t[0] - 1e-5)), &[0.0], 1e-5).is_err());
        assert!(numeric_gradient(|_| Ok(0.0), &[0.0], 0.0).is_err());
    }

    #[test]
    fn tiny_rra_numeric_gradient_is_finite() {
        let cfg = CheckConfig {
            steps: 4,
            hidden: 2,
            ..CheckConfig::default()
        };
        let (params, batch) = cfg.build(1).unwrap();
        let base = params.cell.w_a.clone().unwrap();
        let g = numeric_gradient(
            |t| {
                let mut p = params.clone();
                p.cell.w_a = Some(t.to_vec());
                crate::model::batch_loss(&p, &batch, Mode::Eval, &mut Rng::new(0))
            },
            &base,
            1e-5,
        )
        .unwrap();
        assert!(g.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn lstm_and_rra_pass() {
        for cell in [CellKind::Lstm, CellKind::Rra] {
            let cfg = CheckConfig {
                cell,
                steps: 8,
                ..CheckConfig::default()
            };
            let r = check_gradients(&cfg, 3).unwrap();
            assert!(r.passes(DEFAULT_TOLERANCE), "{r}");
        }
    }

    #[test]
    fn embedding_bidirectional_classifier_with_dropout_passes() {
        let cfg = CheckConfig {
            vocab: Some(7),
            classes: 3,
            bidirectional: true,
            dropout: 0.5,
            steps: 6,
            batch: 3,
            ..CheckConfig::default()
        };
        let r = check_gradients(&cfg, 5).unwrap();
        assert!(r.blocks.iter().any(|b| b.name == "embedding"));
        assert!(r.blocks.iter().any(|b| b.name == "cell_rev.w_a"));
        assert!(r.passes(DEFAULT_TOLERANCE), "{r}");
    }

    #[test]
    fn dropping_attention_backward_path_is_caught() {
        let cfg = CheckConfig::default();
        let good = check_with(&cfg, 2, BackwardOptions::default()).unwrap();
        assert!(good.passes(DEFAULT_TOLERANCE), "{good}");
        let broken = check_with(
            &cfg,
            2,
            BackwardOptions {
                attention_history: false,
            },
        )
        .unwrap();
        assert!(!broken.passes(DEFAULT_TOLERANCE), "{broken}");
    }

    #[test]
    fn normalization_jacobian_rows_sum_to_zero() {
        let w = [0.4, 1.3, 0.2, 0.9];
        let eps = 1e-6;
        // ∂w̄_i/∂w_j = (δ_ij − w̄_i)/S. Since Σ_i w̄_i = 1, summing over the
        // normalized outputs i gives zero for every raw weight j.
        let s: f64 = w.iter().sum();
        let wbar = normalize_attention(&w).unwrap();
        for j in 0..4 {
            let mut up = w;
            let mut down = w;
            up[j] += eps;
            down[j] -= eps;
            let nu = normalize_attention(&up).unwrap();
            let nd = normalize_attention(&down).unwrap();
            let col: Vec<f64> = (0..4).map(|i| (nu[i] - nd[i]) / (2.0 * eps)).collect();
            assert!(col.iter().sum::<f64>().abs() < 1e-9);
            for i in 0..4 {
                let analytic = (if i == j { 1.0 } else { 0.0 } - wbar[i]) / s;
                assert!((col[i] - analytic).abs() < 1e-8);
            }
        }
        // direction along w itself leaves w̄ unchanged: J·w = 0
        for i in 0..4 {
            let jw: f64 = (0..4)
                .map(|j| ((if i == j { 1.0 } else { 0.0 }) - wbar[i]) / s * w[j])
                .sum();
            assert!(jw.abs() < 1e-15);
        }
    }

    #[test]
    fn k1_rra_matches_lstm_until_shortcut_engages() {
        let cfg = CheckConfig {
            window: 1,
            batch: 1,
            ..CheckConfig::default()
        };
        let (rra, _) = cfg.build(4).unwrap();
        let mut lstm = rra.clone();
        lstm.cell.w_a = None;
        for steps in [1usize, 2, 3, 6] {
            let mut rng = Rng::new(6);
            let data = (0..steps * 3).map(|_| rng.uniform_range(-1.0, 1.0)).collect();
            let batch = Batch::full(1, steps, Inputs::Dense { dim: 3, data }, Targets::Regression(vec![0.7])).unwrap();
            let (_, gr) = loss_and_grad(&rra, &batch, Mode::Eval, &mut Rng::new(0)).unwrap();
            let (_, gl) = loss_and_grad(&lstm, &batch, Mode::Eval, &mut Rng::new(0)).unwrap();
            let same = gr.cell.w_gates == gl.cell.w_gates;
            // h_{t-2} first exists at the third step
            assert_eq!(same, steps <= 2, "steps = {steps}");
        }
    }
}
