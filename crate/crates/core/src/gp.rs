//! Exact Gaussian-process regression with a unit-signal SE kernel.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::{cross, gram, rows, HyperParams};
use crate::numerics::{CholeskyFactor, SymMatrix};
use crate::optim::{Adam, AdamConfig};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GpPosterior {
    pub mean: f64,
    pub variance: f64,
}

fn check_targets(n: usize, y: &[f64]) -> Result<()> {
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    if y.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            found: y.len(),
        });
    }
    Ok(())
}

/// Predictive mean and variance from any Gram matrix and cross vector.
pub fn predict_from_gram(
    k: &SymMatrix,
    k_star: &[f64],
    y: &[f64],
    noise_var: f64,
) -> Result<GpPosterior> {
    check_targets(k.order(), y)?;
    check_targets(k.order(), k_star)?;
    let chol = CholeskyFactor::new(&k.add_diagonal(noise_var))?;
    Ok(posterior(&chol, &DVector::from_column_slice(y), k_star))
}

fn posterior(chol: &CholeskyFactor, y: &DVector<f64>, k_star: &[f64]) -> GpPosterior {
    let ks = DVector::from_column_slice(k_star);
    let v = chol.solve(&ks);
    GpPosterior {
        mean: v.dot(y),
        variance: (1.0 - ks.dot(&v)).max(0.0),
    }
}

/// `½ log|K + σ²I| + ½ yᵀ(K + σ²I)⁻¹y`.
pub fn nll_from_gram(k: &SymMatrix, y: &[f64], noise_var: f64) -> Result<f64> {
    check_targets(k.order(), y)?;
    let chol = CholeskyFactor::new(&k.add_diagonal(noise_var))?;
    let y = DVector::from_column_slice(y);
    Ok(0.5 * chol.log_det() + 0.5 * chol.quad_form(&y))
}

/// A GP conditioned on training data with fixed hyperparameters.
#[derive(Clone, Debug)]
pub struct ExactGp {
    x: DMatrix<f64>,
    y: DVector<f64>,
    hp: HyperParams,
    chol: CholeskyFactor,
}

impl ExactGp {
    pub fn fit(x: &DMatrix<f64>, y: &[f64], hp: &HyperParams) -> Result<Self> {
        check_targets(x.nrows(), y)?;
        let k = gram(x, hp)?;
        let chol = CholeskyFactor::new(&k.add_diagonal(hp.noise_var()))?;
        Ok(ExactGp {
            x: x.clone(),
            y: DVector::from_column_slice(y),
            hp: hp.clone(),
            chol,
        })
    }

    pub fn hyperparams(&self) -> &HyperParams {
        &self.hp
    }

    pub fn predict(&self, x_star: &[f64]) -> Result<GpPosterior> {
        let ks = cross(&self.x, x_star, &self.hp)?;
        Ok(posterior(&self.chol, &self.y, &ks))
    }

    pub fn predict_many(&self, x_star: &DMatrix<f64>) -> Result<Vec<GpPosterior>> {
        rows(x_star).iter().map(|r| self.predict(r)).collect()
    }

    pub fn nll(&self) -> f64 {
        0.5 * self.chol.log_det() + 0.5 * self.chol.quad_form(&self.y)
    }
}

pub fn gp_predict(
    x: &DMatrix<f64>,
    y: &[f64],
    x_star: &[f64],
    hp: &HyperParams,
) -> Result<GpPosterior> {
    ExactGp::fit(x, y, hp)?.predict(x_star)
}

pub fn gp_nll(x: &DMatrix<f64>, y: &[f64], hp: &HyperParams) -> Result<f64> {
    Ok(ExactGp::fit(x, y, hp)?.nll())
}

/// NLL and its gradient with respect to `hp.to_log_vec()`.
pub fn gp_nll_grad(x: &DMatrix<f64>, y: &[f64], hp: &HyperParams) -> Result<(f64, Vec<f64>)> {
    check_targets(x.nrows(), y)?;
    let k = gram(x, hp)?;
    let noise_var = hp.noise_var();
    let chol = CholeskyFactor::new(&k.add_diagonal(noise_var))?;
    let yv = DVector::from_column_slice(y);
    let alpha = chol.solve(&yv);
    let nll = 0.5 * chol.log_det() + 0.5 * yv.dot(&alpha);

    // W = Q⁻¹ - ααᵀ; dℓ/dψ = ½ tr(W dQ/dψ)
    let w = chol.inverse() - &alpha * alpha.transpose();
    let n = x.nrows();
    let d = hp.dim();
    let theta = hp.lengthscales();
    let mut grad = vec![0.0; d + 1];
    let km = k.as_matrix();
    for i in 0..n {
        for j in (i + 1)..n {
            let wk = w[(i, j)] * km[(i, j)];
            if wk == 0.0 {
                continue;
            }
            for l in 0..d {
                let diff = (x[(i, l)] - x[(j, l)]) / theta[l];
                // symmetric pair counted twice, times the ½
                grad[l] += wk * diff * diff;
            }
        }
    }
    grad[d] = noise_var * w.trace();
    if !nll.is_finite() {
        return Err(Error::NonFiniteLoss {
            step: 0,
            losses: vec![nll],
        });
    }
    Ok((nll, grad))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub iterations: usize,
    pub freeze_noise: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.01,
            iterations: 200,
            freeze_noise: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainStep {
    pub step: usize,
    pub nll: f64,
    pub hyperparams: HyperParams,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    pub iterations: Vec<TrainStep>,
    /// Best hyperparameters seen, so the final NLL never exceeds the initial one.
    pub final_hyperparams: HyperParams,
    pub final_nll: f64,
}

impl TrainTrace {
    pub fn initial_nll(&self) -> f64 {
        self.iterations[0].nll
    }

    /// Running minimum of the recorded NLL values.
    pub fn best_so_far(&self) -> Vec<f64> {
        let mut best = f64::INFINITY;
        self.iterations
            .iter()
            .map(|s| {
                best = best.min(s.nll);
                best
            })
            .collect()
    }
}

/// Adam in log space on any objective returning `(value, gradient)`.
///
/// Step `t` of the trace holds the objective at the parameters before the
/// `t`-th update; one extra evaluation follows the last update.
pub fn train_log_space<F>(init: &HyperParams, cfg: &TrainConfig, mut objective: F) -> Result<TrainTrace>
where
    F: FnMut(&HyperParams) -> Result<(f64, Vec<f64>)>,
{
    let mut params = init.to_log_vec();
    let dim = params.len();
    let mut mask = vec![true; dim];
    if cfg.freeze_noise {
        mask[dim - 1] = false;
    }
    let mut adam = Adam::new(AdamConfig::with_learning_rate(cfg.learning_rate), dim);
    let mut iterations = Vec::with_capacity(cfg.iterations + 1);
    let mut best: Option<(f64, HyperParams)> = None;
    for step in 0..=cfg.iterations {
        let hp = HyperParams::from_log_vec(&params)?;
        let evaluated = objective(&hp);
        let (value, grad) = match evaluated {
            Ok((v, g)) if v.is_finite() && g.iter().all(|x| x.is_finite()) => (v, g),
            _ => {
                let mut losses: Vec<f64> = iterations.iter().map(|s: &TrainStep| s.nll).collect();
                losses.push(f64::NAN);
                return Err(Error::NonFiniteLoss { step, losses });
            }
        };
        if best.as_ref().is_none_or(|(b, _)| value < *b) {
            best = Some((value, hp.clone()));
        }
        iterations.push(TrainStep {
            step,
            nll: value,
            hyperparams: hp,
        });
        if step < cfg.iterations {
            adam.step(&mut params, &grad, Some(&mask));
        }
    }
    let (final_nll, final_hyperparams) = best.expect("at least one evaluation");
    Ok(TrainTrace {
        iterations,
        final_hyperparams,
        final_nll,
    })
}

pub fn gp_train(
    x: &DMatrix<f64>,
    y: &[f64],
    init: &HyperParams,
    cfg: &TrainConfig,
) -> Result<TrainTrace> {
    init.check_dim(x.ncols())?;
    train_log_space(init, cfg, |hp| gp_nll_grad(x, y, hp))
}
