//! Numerical verification of the spectral, predictive and likelihood bounds
//! relating an exact Gram matrix `K` to an approximation `K′`.
//!
//! Every two-sided statement is checked as interval membership with an
//! absolute slack of [`SLACK`] for floating point.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{Beta, ContinuousCDF};

use crate::clustergen::LabeledDataset;
use crate::error::{Error, Result};
use crate::gp::{gp_train, ExactGp, TrainConfig};
use crate::kernel::{cross, gram, rows, sample_spectral, HyperParams, SpectralKind};
use crate::numerics::{sym_eigen, CholeskyFactor, SymMatrix};
use crate::rng::derive_seed;
use crate::ssgp::{averaged_gram_with_draw, clustered_gram, fit_ssgp, ssgp_nll, ssgp_train, ApproxGram};

/// Absolute tolerance added to every interval check.
pub const SLACK: f64 = 1e-9;
/// Tolerance on the minimum eigenvalue in the Loewner checks.
pub const LOEWNER_TOL: f64 = 1e-10;

/// One named inequality: `lo <= value <= hi` (with [`SLACK`]).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub lo: f64,
    pub hi: f64,
    /// Distance to the nearest endpoint; negative when outside.
    pub slack: f64,
    pub pass: bool,
}

impl Check {
    pub fn interval(name: impl Into<String>, value: f64, lo: f64, hi: f64) -> Self {
        let slack = (value - lo).min(hi - value);
        Check {
            name: name.into(),
            value,
            lo,
            hi,
            slack,
            pass: slack >= -SLACK,
        }
    }

    pub fn at_most(name: impl Into<String>, value: f64, hi: f64) -> Self {
        Self::interval(name, value, f64::NEG_INFINITY, hi)
    }

    pub fn at_least(name: impl Into<String>, value: f64, lo: f64) -> Self {
        Self::interval(name, value, lo, f64::INFINITY)
    }

    /// `value ∈ center ± radius`.
    pub fn within(name: impl Into<String>, value: f64, center: f64, radius: f64) -> Self {
        Self::interval(name, value, center - radius, center + radius)
    }
}

fn same_order(k: &SymMatrix, kp: &SymMatrix) -> Result<()> {
    if k.order() != kp.order() {
        return Err(Error::OrderMismatch {
            left: k.order(),
            right: kp.order(),
        });
    }
    Ok(())
}

/// Largest absolute eigenvalue of `K - K′`.
pub fn spectral_distance(k: &SymMatrix, k_prime: &SymMatrix) -> Result<f64> {
    same_order(k, k_prime)?;
    Ok(sym_eigen(&k.sub(k_prime)?)?.spectral_norm())
}

/// Largest (signed) eigenvalue of `K - K′`.
pub fn largest_eigenvalue(k: &SymMatrix, k_prime: &SymMatrix) -> Result<f64> {
    same_order(k, k_prime)?;
    Ok(sym_eigen(&k.sub(k_prime)?)?.max())
}

pub fn frobenius_distance(k: &SymMatrix, k_prime: &SymMatrix) -> Result<f64> {
    same_order(k, k_prime)?;
    Ok(k.sub(k_prime)?.frobenius_norm())
}

/// One-sided 95% Clopper-Pearson lower bound on a binomial proportion.
pub fn clopper_pearson_lower(successes: usize, trials: usize, confidence: f64) -> Result<f64> {
    if trials == 0 || successes > trials {
        return Err(Error::invalid("need 0 <= successes <= trials, trials >= 1"));
    }
    if successes == 0 {
        return Ok(0.0);
    }
    let beta = Beta::new(successes as f64, (trials - successes + 1) as f64)
        .map_err(|e| Error::invalid(e.to_string()))?;
    Ok(beta.inverse_cdf(1.0 - confidence))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Theorem2Report {
    pub p: usize,
    pub lambda: f64,
    pub delta: f64,
    pub trials: usize,
    pub successes: usize,
    pub rate: f64,
    pub lower_confidence: f64,
    pub target: f64,
    pub pass: bool,
    pub frobenius: Vec<f64>,
    pub spectral: Vec<f64>,
}

/// Seed of trial `t` in a batch keyed by `seed`.
pub fn trial_seed(seed: u64, t: usize) -> u64 {
    derive_seed(seed, "trial", t as u64)
}

/// Fraction of independent clustered draws with `‖K - K′‖_F <= λ`, compared
/// through its 95% lower confidence bound against `1 - 2δ`.
pub fn verify_theorem2(
    ds: &LabeledDataset,
    hp: &HyperParams,
    lambda: f64,
    delta: f64,
    p: usize,
    trials: usize,
    seed: u64,
) -> Result<Theorem2Report> {
    if p == 0 {
        return Err(Error::invalid("p must be at least 1"));
    }
    if trials == 0 {
        return Err(Error::invalid("trials must be at least 1"));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::InvalidDelta(delta));
    }
    let k = gram(&ds.x, hp)?;
    let mut frobenius = Vec::with_capacity(trials);
    let mut spectral = Vec::with_capacity(trials);
    for t in 0..trials {
        let kp = clustered_gram(&ds.x, &ds.labels, hp, p, trial_seed(seed, t))?;
        frobenius.push(frobenius_distance(&k, &kp.matrix)?);
        spectral.push(spectral_distance(&k, &kp.matrix)?);
    }
    let successes = frobenius.iter().filter(|f| **f <= lambda).count();
    let lower_confidence = clopper_pearson_lower(successes, trials, 0.95)?;
    let target = 1.0 - 2.0 * delta;
    Ok(Theorem2Report {
        p,
        lambda,
        delta,
        trials,
        successes,
        rate: successes as f64 / trials as f64,
        lower_confidence,
        target,
        pass: lower_confidence >= target,
        frobenius,
        spectral,
    })
}

fn precondition(k: &SymMatrix, k_prime: &SymMatrix, lambda: f64) -> Result<f64> {
    let dist = spectral_distance(k, k_prime)?;
    if dist > lambda + SLACK {
        return Err(Error::PreconditionViolated(format!(
            "spectral distance {dist} exceeds lambda {lambda}"
        )));
    }
    Ok(dist)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lemma6Verdict {
    pub spectral_distance: f64,
    pub epsilon: f64,
    /// Minimum eigenvalue of `(1 + ε)Q⁻¹ - Q′⁻¹`.
    pub upper_min_eigenvalue: f64,
    /// Minimum eigenvalue of `Q′⁻¹ - (1 - ε)Q⁻¹`.
    pub lower_min_eigenvalue: f64,
    /// `ε >= 1` makes the lower factor non-positive.
    pub lower_vacuous: bool,
    pub pass: bool,
}

/// `(1 - λ/σ²)Q⁻¹ ⪯ Q′⁻¹ ⪯ (1 + λ/σ²)Q⁻¹`.
pub fn check_lemma6(k: &SymMatrix, k_prime: &SymMatrix, lambda: f64, noise_std: f64) -> Result<Lemma6Verdict> {
    let dist = precondition(k, k_prime, lambda)?;
    let s2 = noise_std * noise_std;
    let eps = lambda / s2;
    let q_inv = CholeskyFactor::new(&k.add_diagonal(s2))?.inverse();
    let qp_inv = CholeskyFactor::new(&k_prime.add_diagonal(s2))?.inverse();
    let upper = SymMatrix::from_matrix(&q_inv * (1.0 + eps) - &qp_inv)?;
    let lower = SymMatrix::from_matrix(&qp_inv - &q_inv * (1.0 - eps))?;
    let upper_min = sym_eigen(&upper)?.min();
    let lower_min = sym_eigen(&lower)?.min();
    Ok(Lemma6Verdict {
        spectral_distance: dist,
        epsilon: eps,
        upper_min_eigenvalue: upper_min,
        lower_min_eigenvalue: lower_min,
        lower_vacuous: eps >= 1.0,
        pass: upper_min >= -LOEWNER_TOL && lower_min >= -LOEWNER_TOL,
    })
}

fn check_lambda(lambda: f64, noise_var: f64) -> Result<()> {
    if !(lambda >= 0.0 && lambda < noise_var) {
        return Err(Error::InvalidLambda {
            lambda,
            reason: format!("must satisfy 0 <= lambda < sigma^2 = {noise_var}"),
        });
    }
    Ok(())
}

/// τ from the extreme eigenvalues of `K`.
pub fn tau_from_extremes(eig_min: f64, eig_max: f64, lambda: f64, noise_std: f64) -> Result<f64> {
    let s2 = noise_std * noise_std;
    check_lambda(lambda, s2)?;
    let eps = lambda / s2;
    let num = eps.ln_1p().abs().max((-eps).ln_1p().abs());
    let den = (eig_min + s2).ln().abs().min((eig_max + s2).ln().abs());
    if !(den > f64::EPSILON) {
        return Err(Error::DegenerateDenominator(format!(
            "an extreme eigenvalue of K + sigma^2 I equals 1 (log = {den})"
        )));
    }
    Ok(num / den)
}

/// `max(|log(1 + λ/σ²)|, |log(1 - λ/σ²)|) / min(|log(λ_min + σ²)|, |log(λ_max + σ²)|)`.
pub fn tau(k: &SymMatrix, lambda: f64, noise_std: f64) -> Result<f64> {
    let e = sym_eigen(k)?;
    tau_from_extremes(e.min(), e.max(), lambda, noise_std)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lemma910Verdict {
    pub spectral_distance: f64,
    pub tau: f64,
    pub log_det: f64,
    pub log_det_prime: f64,
    pub nll: f64,
    pub nll_prime: f64,
    /// `log|Q| = 0`, where the multiplicative interval collapses to a point.
    pub degenerate: bool,
    pub log_det_check: Check,
    pub nll_check: Check,
    pub pass: bool,
}

/// `log|Q′| = (1 ± τ) log|Q|` and `ℓ′ = (1 ± max(τ, λ/σ²)) ℓ`.
pub fn check_lemma9_10(
    k: &SymMatrix,
    k_prime: &SymMatrix,
    y: &[f64],
    lambda: f64,
    noise_std: f64,
) -> Result<Lemma910Verdict> {
    let dist = precondition(k, k_prime, lambda)?;
    if y.len() != k.order() {
        return Err(Error::DimensionMismatch {
            expected: k.order(),
            found: y.len(),
        });
    }
    let s2 = noise_std * noise_std;
    let t = tau(k, lambda, noise_std)?;
    let yv = DVector::from_column_slice(y);
    let q = CholeskyFactor::new(&k.add_diagonal(s2))?;
    let qp = CholeskyFactor::new(&k_prime.add_diagonal(s2))?;
    let (ld, ldp) = (q.log_det(), qp.log_det());
    let nll = 0.5 * ld + 0.5 * q.quad_form(&yv);
    let nll_prime = 0.5 * ldp + 0.5 * qp.quad_form(&yv);
    let c = t.max(lambda / s2);
    let log_det_check = Check::within("lemma9_log_det", ldp, ld, t * ld.abs());
    let nll_check = Check::within("lemma10_nll", nll_prime, nll, c * nll.abs());
    Ok(Lemma910Verdict {
        spectral_distance: dist,
        tau: t,
        log_det: ld,
        log_det_prime: ldp,
        nll,
        nll_prime,
        degenerate: ld.abs() <= SLACK,
        pass: log_det_check.pass && nll_check.pass,
        log_det_check,
        nll_check,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Theorem3Point {
    pub mean: f64,
    pub mean_prime: f64,
    pub variance: f64,
    pub variance_prime: f64,
    /// Mean under `K′` with the approximate cross vector; reported only.
    pub mean_prime_approx_cross: f64,
    /// `|m - m′| <= (ε/2)[(k+y)ᵀQ⁻¹(k+y) + kᵀQ⁻¹k + yᵀQ⁻¹y]`.
    pub mean_check: Check,
    /// `V ∈ (1 ± ε)V′ ± ε`.
    pub variance_check: Check,
    /// `V′ ∈ (1 ± ε)V ± ε`.
    pub variance_check_swapped: Check,
    /// `m ∈ (1 ± ε) m′`; reported, not asserted.
    pub mean_multiplicative: Check,
    /// `m′ ∈ (1 ± ε) m`; reported, not asserted.
    pub mean_multiplicative_swapped: Check,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Theorem3Report {
    pub lambda: f64,
    pub epsilon: f64,
    pub points: Vec<Theorem3Point>,
    /// Every asserted check holds at every point.
    pub pass: bool,
    /// Number of points violating each multiplicative mean form.
    pub multiplicative_violations: usize,
    pub multiplicative_violations_swapped: usize,
}

/// Predictive comparison between the exact GP and the GP with `K′` at the
/// same hyperparameters, using the exact cross vector on both sides.
pub fn check_theorem3(
    x: &DMatrix<f64>,
    y: &[f64],
    hp: &HyperParams,
    approx: &ApproxGram,
    test: &DMatrix<f64>,
) -> Result<Theorem3Report> {
    let k = gram(x, hp)?;
    same_order(&k, &approx.matrix)?;
    let lambda = spectral_distance(&k, &approx.matrix)?;
    let s2 = hp.noise_var();
    if lambda >= s2 {
        return Err(Error::PreconditionViolated(format!(
            "measured lambda {lambda} is not below sigma^2 = {s2}"
        )));
    }
    let eps = lambda / s2;
    let yv = DVector::from_column_slice(y);
    let q = CholeskyFactor::new(&k.add_diagonal(s2))?;
    let qp = CholeskyFactor::new(&approx.matrix.add_diagonal(s2))?;
    let alpha = q.solve(&yv);
    let alpha_p = qp.solve(&yv);
    let y_q_y = yv.dot(&alpha);
    let mut points = Vec::with_capacity(test.nrows());
    for xs in rows(test) {
        let ks = DVector::from_vec(cross(x, &xs, hp)?);
        let kp_star = DVector::from_vec(crate::ssgp::approx_cross(approx, x, &xs, hp, None)?);
        let mean = ks.dot(&alpha);
        let mean_prime = ks.dot(&alpha_p);
        let k_q_k = q.quad_form(&ks);
        let variance = 1.0 - k_q_k;
        let variance_prime = 1.0 - qp.quad_form(&ks);
        let sum = &ks + &yv;
        let radius = 0.5 * eps * (q.quad_form(&sum) + k_q_k + y_q_y);
        points.push(Theorem3Point {
            mean,
            mean_prime,
            variance,
            variance_prime,
            mean_prime_approx_cross: kp_star.dot(&alpha_p),
            mean_check: Check::within("lemma7_mean_polarized", mean, mean_prime, radius),
            variance_check: Check::interval(
                "lemma8_variance",
                variance,
                (variance_prime - eps * variance_prime.abs()) - eps,
                (variance_prime + eps * variance_prime.abs()) + eps,
            ),
            variance_check_swapped: Check::interval(
                "lemma8_variance_swapped",
                variance_prime,
                (variance - eps * variance.abs()) - eps,
                (variance + eps * variance.abs()) + eps,
            ),
            mean_multiplicative: Check::within(
                "theorem3_mean_multiplicative",
                mean,
                mean_prime,
                eps * mean_prime.abs(),
            ),
            mean_multiplicative_swapped: Check::within(
                "theorem3_mean_multiplicative_swapped",
                mean_prime,
                mean,
                eps * mean.abs(),
            ),
        });
    }
    let pass = points
        .iter()
        .all(|p| p.mean_check.pass && p.variance_check.pass && p.variance_check_swapped.pass);
    Ok(Theorem3Report {
        lambda,
        epsilon: eps,
        multiplicative_violations: points.iter().filter(|p| !p.mean_multiplicative.pass).count(),
        multiplicative_violations_swapped: points
            .iter()
            .filter(|p| !p.mean_multiplicative_swapped.pass)
            .count(),
        points,
        pass,
    })
}

/// Shift `Σ log((λ_i + σ²)/(λ′_i + σ²)) ± ρ |1 - Σ log(λ_i + σ²)|`,
/// with both spectra sorted ascending.
pub fn wp_interval(eig_k: &[f64], eig_k_prime: &[f64], noise_var: f64, rho: f64) -> Result<(f64, f64)> {
    if eig_k.len() != eig_k_prime.len() {
        return Err(Error::OrderMismatch {
            left: eig_k.len(),
            right: eig_k_prime.len(),
        });
    }
    let shift: f64 = eig_k
        .iter()
        .zip(eig_k_prime)
        .map(|(a, b)| ((a + noise_var) / (b + noise_var)).ln())
        .sum();
    let log_sum: f64 = eig_k.iter().map(|a| (a + noise_var).ln()).sum();
    let half = rho * (1.0 - log_sum).abs();
    Ok((shift - half, shift + half))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Theorem4Point {
    pub mean: f64,
    pub mean_prime: f64,
    pub check: Check,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Theorem4Report {
    pub theta_star: HyperParams,
    pub theta_prime_star: HyperParams,
    /// Spectral distance at `Θ*` and at `Θ′*`.
    pub lambda_at_star: f64,
    pub lambda_at_prime_star: f64,
    pub lambda: f64,
    pub epsilon: f64,
    pub tau_k: f64,
    pub tau_k_prime: f64,
    /// `τ(K)` at `Θ′*`, which the NLL sandwich also relies on.
    pub tau_k_at_prime_star: f64,
    pub rho: f64,
    pub nll: f64,
    pub nll_prime: f64,
    pub lemma11: Check,
    pub wp_interval: (f64, f64),
    pub points: Vec<Theorem4Point>,
    pub pass: bool,
}

/// Trains the exact GP and the `m`-frequency SSGP from the same start, then
/// checks the NLL sandwich at the two optimizers and the mean relation at
/// each test point.
pub fn check_theorem4(
    x: &DMatrix<f64>,
    y: &[f64],
    init: &HyperParams,
    m: usize,
    seed: u64,
    cfg: &TrainConfig,
    test: &DMatrix<f64>,
) -> Result<Theorem4Report> {
    let full = gp_train(x, y, init, cfg)?;
    let approx = ssgp_train(x, y, init, m, seed, cfg)?;
    let hp = full.final_hyperparams.clone();
    let hpp = approx.final_hyperparams.clone();
    let s2 = hp.noise_var();
    if (hpp.noise_var() - s2).abs() > SLACK * s2.max(1.0) {
        return Err(Error::PreconditionViolated(
            "both models must share the noise level; train with freeze_noise".into(),
        ));
    }
    let draw = sample_spectral(m, init, SpectralKind::StandardNormal, seed)?;
    let k_star = gram(x, &hp)?;
    let kp_star = averaged_gram_with_draw(x, &hp, &draw)?.matrix;
    let k_pstar = gram(x, &hpp)?;
    let kp_pstar = averaged_gram_with_draw(x, &hpp, &draw)?.matrix;
    let lambda_at_star = spectral_distance(&k_star, &kp_star)?;
    let lambda_at_prime_star = spectral_distance(&k_pstar, &kp_pstar)?;
    let lambda = lambda_at_star.max(lambda_at_prime_star);
    let noise_std = hp.noise_std();
    check_lambda(lambda, s2)?;
    let eps = lambda / s2;
    let eig_k = sym_eigen(&k_star)?;
    let eig_kp = sym_eigen(&kp_pstar)?;
    let tau_k = tau_from_extremes(eig_k.min(), eig_k.max(), lambda, noise_std)?;
    let tau_k_prime = tau_from_extremes(eig_kp.min(), eig_kp.max(), lambda, noise_std)?;
    let tau_k_at_prime_star = tau(&k_pstar, lambda, noise_std)?;
    let rho = tau_k.max(tau_k_prime).max(eps);

    let nll = ExactGp::fit(x, y, &hp)?.nll();
    let nll_prime = ssgp_nll(x, y, &hpp, &draw.vectors)?;
    let c11 = tau_k.max(tau_k_at_prime_star).max(eps);
    let lemma11 = Check::within("lemma11_nll_at_optima", nll_prime, nll, c11 * nll.abs());

    let wp = wp_interval(eig_k.eigenvalues.as_slice(), eig_kp.eigenvalues.as_slice(), s2, rho)?;
    let exact = ExactGp::fit(x, y, &hp)?;
    let model = fit_ssgp(x, y, &hpp, m, seed)?;
    let mut points = Vec::with_capacity(test.nrows());
    for xs in rows(test) {
        let mean = exact.predict(&xs)?.mean;
        let mean_prime = model.predict_mean(&xs)?;
        let check = Check::interval(
            "theorem4_mean",
            mean_prime,
            mean - rho * mean.abs() + wp.0,
            mean + rho * mean.abs() + wp.1,
        );
        points.push(Theorem4Point {
            mean,
            mean_prime,
            check,
        });
    }
    let pass = lemma11.pass && points.iter().all(|p| p.check.pass);
    Ok(Theorem4Report {
        theta_star: hp,
        theta_prime_star: hpp,
        lambda_at_star,
        lambda_at_prime_star,
        lambda,
        epsilon: eps,
        tau_k,
        tau_k_prime,
        tau_k_at_prime_star,
        rho,
        nll,
        nll_prime,
        lemma11,
        wp_interval: wp,
        points,
        pass,
    })
}

/// Serialized summary of one comparison between `K` and `K′`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub spectral_distance: f64,
    pub largest_eigenvalue: f64,
    pub frobenius_distance: f64,
    pub lambda_target: f64,
    pub tau: Option<f64>,
    pub rho: Option<f64>,
    pub wp_interval: Option<(f64, f64)>,
    pub checks: Vec<Check>,
    /// Checks that could not run, with the reason.
    pub skipped: Vec<String>,
}

impl BoundReport {
    pub fn pass(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }
}

/// Runs every deterministic check that applies to `(K, K′)` at the measured
/// spectral distance and collects them into one report.
pub fn deterministic_report(
    x: &DMatrix<f64>,
    y: &[f64],
    hp: &HyperParams,
    approx: &ApproxGram,
    lambda_target: f64,
    test: &DMatrix<f64>,
) -> Result<BoundReport> {
    let k = gram(x, hp)?;
    let kp = &approx.matrix;
    let dist = spectral_distance(&k, kp)?;
    let mut report = BoundReport {
        spectral_distance: dist,
        largest_eigenvalue: largest_eigenvalue(&k, kp)?,
        frobenius_distance: frobenius_distance(&k, kp)?,
        lambda_target,
        tau: None,
        rho: None,
        wp_interval: None,
        checks: vec![Check::at_most(
            "spectral_le_frobenius",
            dist,
            frobenius_distance(&k, kp)?,
        )],
        skipped: Vec::new(),
    };
    let l6 = check_lemma6(&k, kp, dist, hp.noise_std())?;
    report.checks.push(Check::at_least("lemma6_upper", l6.upper_min_eigenvalue, -LOEWNER_TOL));
    report.checks.push(Check::at_least("lemma6_lower", l6.lower_min_eigenvalue, -LOEWNER_TOL));
    if dist >= hp.noise_var() {
        report
            .skipped
            .push(format!("lemma9_10, theorem3: measured lambda {dist} >= sigma^2"));
        return Ok(report);
    }
    match check_lemma9_10(&k, kp, y, dist, hp.noise_std()) {
        Ok(v) => {
            report.tau = Some(v.tau);
            report.rho = Some(v.tau.max(dist / hp.noise_var()));
            report.checks.push(v.log_det_check);
            report.checks.push(v.nll_check);
        }
        Err(Error::DegenerateDenominator(msg)) => report.skipped.push(format!("lemma9_10: {msg}")),
        Err(e) => return Err(e),
    }
    let t3 = check_theorem3(x, y, hp, approx, test)?;
    for p in t3.points {
        report.checks.push(p.mean_check);
        report.checks.push(p.variance_check);
        report.checks.push(p.variance_check_swapped);
    }
    Ok(report)
}
