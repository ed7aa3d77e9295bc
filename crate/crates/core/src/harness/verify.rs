use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::data::gp_prior_draw;
use super::io::write_atomic;
use crate::bounds::{deterministic_report, trial_seed, verify_theorem2, BoundReport, Theorem2Report};
use crate::clustergen::{cluster_size, generate, lambda_for_a, required_samples};
use crate::error::{Error, Result};
use crate::rng::Stream;
use crate::ssgp::clustered_gram;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VerifyConfig {
    pub b: usize,
    pub dim: usize,
    /// Band offset used to generate the data.
    pub a: f64,
    /// Frobenius target; defaults to the λ that produces `a`.
    pub lambda: Option<f64>,
    pub delta: f64,
    /// Feature count per cluster; defaults to the required sample size.
    pub p: Option<usize>,
    pub trials: usize,
    /// Noise of the model whose bounds are checked. Large enough by default
    /// that the measured spectral distance stays below σ².
    pub noise_std: f64,
    /// Noise added to the GP draw used as targets.
    pub target_noise_std: f64,
    pub test_points: usize,
    pub seed: u64,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        VerifyConfig {
            b: 5,
            dim: 64,
            a: 1.0,
            lambda: None,
            delta: 0.2,
            p: None,
            trials: 100,
            noise_std: 3.0,
            target_noise_std: 0.3,
            test_points: 10,
            seed: 0,
        }
    }
}

impl VerifyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 {
            return Err(Error::invalid("trials must be at least 1"));
        }
        if self.p == Some(0) {
            return Err(Error::invalid("p must be at least 1"));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::InvalidDelta(self.delta));
        }
        if !(self.noise_std > 0.0 && self.target_noise_std >= 0.0) {
            return Err(Error::invalid("noise levels must be positive"));
        }
        if !(self.a > 0.0) {
            return Err(Error::invalid("a must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerifySummary {
    pub config: VerifyConfig,
    pub n: usize,
    pub a: f64,
    pub lambda: f64,
    pub p: usize,
    pub theorem2: Theorem2Report,
    pub deterministic_pass: bool,
    pub failed_checks: usize,
    pub trials_with_skips: usize,
    pub pass: bool,
}

/// Generates clustered data, runs the probabilistic Frobenius check and the
/// deterministic checks for every trial, and writes `bounds/trial_NNN.json`
/// plus `bounds/aggregate.json` under `out`.
pub fn verify_bounds_cmd(cfg: &VerifyConfig, out: Option<&Path>) -> Result<(VerifySummary, Vec<BoundReport>)> {
    cfg.validate()?;
    let n: usize = (1..=cfg.b).map(cluster_size).sum();
    let gen_lambda = lambda_for_a(n, cfg.a);
    let theta = vec![1.0; cfg.dim];
    let ds = generate(cfg.b, cfg.dim, gen_lambda, &theta, cfg.seed)?;
    let lambda = cfg.lambda.unwrap_or(gen_lambda);
    let p = match cfg.p {
        Some(p) => p,
        None => required_samples(cfg.b, &ds.band_sizes(), lambda, cfg.delta, ds.a)?,
    };
    let hp = ds.hyperparams(cfg.noise_std)?;
    let theorem2 = verify_theorem2(&ds, &hp, lambda, cfg.delta, p, cfg.trials, cfg.seed)?;

    let y = gp_prior_draw(&ds.x, &ds.hyperparams(cfg.target_noise_std.max(1e-12))?, cfg.seed)?;
    let mut s = Stream::new(cfg.seed, "verify-test", 0);
    let test = DMatrix::from_fn(cfg.test_points, cfg.dim, |_, _| 0.0);
    let test = {
        let mut t = test;
        for i in 0..cfg.test_points {
            let src = s.below(ds.n());
            for l in 0..cfg.dim {
                t[(i, l)] = ds.x[(src, l)] + 0.1 * theta[l] * s.normal();
            }
        }
        t
    };

    let mut reports = Vec::with_capacity(cfg.trials);
    for t in 0..cfg.trials {
        let approx = clustered_gram(&ds.x, &ds.labels, &hp, p, trial_seed(cfg.seed, t))?;
        let report = deterministic_report(&ds.x, &y, &hp, &approx, lambda, &test)?;
        if let Some(dir) = out {
            let path = dir.join("bounds").join(format!("trial_{t:03}.json"));
            write_atomic(&path, serde_json::to_string_pretty(&report)?.as_bytes())?;
        }
        reports.push(report);
    }
    let failed_checks = reports
        .iter()
        .map(|r| r.checks.iter().filter(|c| !c.pass).count())
        .sum();
    let deterministic_pass = failed_checks == 0;
    let summary = VerifySummary {
        config: cfg.clone(),
        n,
        a: ds.a,
        lambda,
        p,
        pass: deterministic_pass && theorem2.pass,
        theorem2,
        deterministic_pass,
        failed_checks,
        trials_with_skips: reports.iter().filter(|r| !r.skipped.is_empty()).count(),
    };
    if let Some(dir) = out {
        let path = dir.join("bounds").join("aggregate.json");
        write_atomic(&path, serde_json::to_string_pretty(&summary)?.as_bytes())?;
    }
    Ok((summary, reports))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_trials_rejected() {
        let cfg = VerifyConfig { trials: 0, ..Default::default() };
        assert!(matches!(verify_bounds_cmd(&cfg, None), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn tiny_lambda_fails_rate() {
        let cfg = VerifyConfig {
            lambda: Some(1e-6),
            p: Some(1),
            trials: 5,
            dim: 16,
            ..Default::default()
        };
        let (summary, _) = verify_bounds_cmd(&cfg, None).unwrap();
        assert!(!summary.theorem2.pass);
        assert!(!summary.pass);
    }
}
