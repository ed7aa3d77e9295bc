//! Synthetic clustered datasets and the kernel-value band machinery.
//!
//! Cluster `i` (1-based) holds `round(2^{i/2})` points and is calibrated so
//! that its in-cluster kernel values fall in band `i`. Labels are stored
//! 0-based, so label `i - 1` marks cluster `i`.

use std::f64::consts::LN_2;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::{gram, HyperParams};
use crate::rng::Stream;

/// `1 - 2^{-t}`, accurate for small `t`.
fn one_minus_pow2(t: f64) -> f64 {
    -(-t * LN_2).exp_m1()
}

/// `-ln(1 - 2^{-t}) = ln(2^t / (2^t - 1))`.
fn log_ratio(t: f64) -> f64 {
    -one_minus_pow2(t).ln()
}

/// `a = log2(n⁴ / (n⁴ - λ⁴))`.
pub fn compute_a(n: usize, lambda: f64) -> Result<f64> {
    let n = n as f64;
    if !(lambda > 0.0 && lambda < n) {
        return Err(Error::InvalidLambda {
            lambda,
            reason: format!("must satisfy 0 < lambda < n = {n}"),
        });
    }
    Ok(-(-(lambda / n).powi(4)).ln_1p() / LN_2)
}

/// The λ giving a prescribed `a` for `n` points.
pub fn lambda_for_a(n: usize, a: f64) -> f64 {
    n as f64 * one_minus_pow2(a).powf(0.25)
}

fn check_band(i: usize, b: usize) -> Result<()> {
    if i == 0 || i > b {
        return Err(Error::BandOutOfRange { band: i, max: b });
    }
    Ok(())
}

/// Kernel-value thresholds of band `i`:
/// `((1 - 2^{-(a+i-1)})^{1/4}, (1 - 2^{-(a+i)})^{1/4})`.
pub fn band_bounds(i: usize, a: f64, b: usize) -> Result<(f64, f64)> {
    check_band(i, b)?;
    let t = a + i as f64;
    Ok((one_minus_pow2(t - 1.0).powf(0.25), one_minus_pow2(t).powf(0.25)))
}

/// Ceiling on off-cluster kernel values, `(1 - 2^{-a})^{1/4}`.
pub fn off_cluster_ceiling(a: f64) -> f64 {
    one_minus_pow2(a).powf(0.25)
}

/// Kernel values above this are expected only on the diagonal.
pub fn diagonal_threshold(a: f64, b: usize) -> f64 {
    one_minus_pow2(a + b as f64).powf(0.25)
}

/// `γ_i = sqrt((U(i) + L(i)) / (4d))`.
pub fn calibrate_gamma(i: usize, a: f64, d: usize, b: usize) -> Result<f64> {
    check_band(i, b)?;
    if d == 0 {
        return Err(Error::invalid("dimension must be positive"));
    }
    let t = a + i as f64;
    let g2 = (log_ratio(t - 1.0) + log_ratio(t)) / (4.0 * d as f64);
    if !g2.is_finite() {
        return Err(Error::InvalidLambda {
            lambda: f64::NAN,
            reason: format!("a = {a} leaves band {i} unbounded"),
        });
    }
    Ok(g2.sqrt())
}

/// Minimum squared whitened distance between centers,
/// `1.5 ln(2^a / (2^a - 1))`.
pub fn separation_threshold(a: f64) -> f64 {
    1.5 * log_ratio(a)
}

/// Factor by which placed centers exceed the separation threshold.
pub const CENTER_MARGIN: f64 = 1.1;

/// Vertices of a regular simplex in the whitened space, pairwise squared
/// distance `1.1 ×` the separation threshold, randomly signed and assigned to
/// axes, then mapped back through `Θ^{1/2}`.
pub fn place_centers(b: usize, d: usize, a: f64, theta: &[f64], seed: u64) -> Result<Vec<Vec<f64>>> {
    if b == 0 {
        return Err(Error::invalid("need at least one cluster"));
    }
    if theta.len() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            found: theta.len(),
        });
    }
    if b - 1 > d {
        return Err(Error::InfeasibleDimension { centers: b, dim: d });
    }
    let target = CENTER_MARGIN * separation_threshold(a);
    // Helmert basis of the sum-zero subspace: unit vertices e_k sit at squared
    // distance 2 from each other.
    let scale = (target / 2.0).sqrt();
    let mut stream = Stream::new(seed, "centers", 0);
    let axes = stream.permutation(d);
    let signs: Vec<f64> = (0..d)
        .map(|_| if stream.uniform() < 0.5 { -1.0 } else { 1.0 })
        .collect();
    let mut centers = vec![vec![0.0; d]; b];
    for j in 1..b {
        let norm = ((j * (j + 1)) as f64).sqrt();
        let axis = axes[j - 1];
        for (k, c) in centers.iter_mut().enumerate() {
            let h = if k < j {
                1.0
            } else if k == j {
                -(j as f64)
            } else {
                0.0
            };
            c[axis] = signs[axis] * scale * h / norm * theta[axis];
        }
    }
    Ok(centers)
}

/// `round(2^{i/2})`, at least 1.
pub fn cluster_size(i: usize) -> usize {
    (2f64.powf(i as f64 / 2.0).round() as usize).max(1)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterSpec {
    pub b: usize,
    pub dim: usize,
    pub centers: Vec<Vec<f64>>,
    pub gammas: Vec<f64>,
    pub weights: Vec<f64>,
    pub lengthscales: Vec<f64>,
}

/// `π_i ∝ 2^{i/2}` for `i = 1…k`.
pub fn mixture_weights(k: usize) -> Vec<f64> {
    let raw: Vec<f64> = (1..=k).map(|i| 2f64.powf(i as f64 / 2.0)).collect();
    let total: f64 = raw.iter().sum();
    raw.iter().map(|w| w / total).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    pub x: DMatrix<f64>,
    pub labels: Vec<usize>,
    pub spec: ClusterSpec,
    pub a: f64,
    pub lambda: f64,
    pub seed: u64,
}

/// Sidecar JSON written next to the dataset CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub b: usize,
    pub a: f64,
    pub lambda: f64,
    pub gammas: Vec<f64>,
    pub centers: Vec<Vec<f64>>,
    pub seed: u64,
}

/// Draws a dataset whose clusters realize the band calibration.
///
/// Each point of cluster `i` is `c_i + Θ^{1/2} (γ_i/√2) ξ` with `ξ ~ N(0, I)`,
/// so the whitened difference of two points in the cluster has per-coordinate
/// variance `γ_i²`.
pub fn generate(b: usize, d: usize, lambda: f64, theta: &[f64], seed: u64) -> Result<LabeledDataset> {
    generate_scaled(b, d, lambda, theta, 1, seed)
}

/// As [`generate`] with every cluster population multiplied by `scale`.
pub fn generate_scaled(
    b: usize,
    d: usize,
    lambda: f64,
    theta: &[f64],
    scale: usize,
    seed: u64,
) -> Result<LabeledDataset> {
    if b == 0 || scale == 0 {
        return Err(Error::invalid("b and the population scale must be positive"));
    }
    let sizes: Vec<usize> = (1..=b).map(|i| scale * cluster_size(i)).collect();
    let n: usize = sizes.iter().sum();
    let a = compute_a(n, lambda)?;
    let gammas = (1..=b)
        .map(|i| calibrate_gamma(i, a, d, b))
        .collect::<Result<Vec<_>>>()?;
    let centers = place_centers(b, d, a, theta, seed)?;
    let mut x = DMatrix::zeros(n, d);
    let mut labels = Vec::with_capacity(n);
    let mut row = 0;
    for (c, &size) in sizes.iter().enumerate() {
        let spread = gammas[c] / 2f64.sqrt();
        for _ in 0..size {
            let xi = Stream::new(seed, "cluster-point", row as u64).normals(d);
            for l in 0..d {
                x[(row, l)] = centers[c][l] + theta[l] * spread * xi[l];
            }
            labels.push(c);
            row += 1;
        }
    }
    Ok(LabeledDataset {
        x,
        labels,
        spec: ClusterSpec {
            b,
            dim: d,
            centers,
            gammas,
            weights: mixture_weights(b),
            lengthscales: theta.to_vec(),
        },
        a,
        lambda,
        seed,
    })
}

impl LabeledDataset {
    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![0; self.spec.b];
        for &l in &self.labels {
            s[l] += 1;
        }
        s
    }

    /// In-cluster entry counts `|κ_i| = size_i²`.
    pub fn band_sizes(&self) -> Vec<usize> {
        self.sizes().iter().map(|s| s * s).collect()
    }

    pub fn hyperparams(&self, noise_std: f64) -> Result<HyperParams> {
        HyperParams::new(&self.spec.lengthscales, noise_std)
    }

    pub fn sidecar(&self) -> Sidecar {
        Sidecar {
            b: self.spec.b,
            a: self.a,
            lambda: self.lambda,
            gammas: self.spec.gammas.clone(),
            centers: self.spec.centers.clone(),
            seed: self.seed,
        }
    }

    /// CSV with columns `x_1 … x_d, label`.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header: Vec<String> = (1..=self.spec.dim).map(|l| format!("x_{l}")).collect();
        header.push("label".into());
        w.write_record(&header)?;
        for (u, &label) in self.labels.iter().enumerate() {
            let mut rec: Vec<String> = self.x.row(u).iter().map(|v| v.to_string()).collect();
            rec.push(label.to_string());
            w.write_record(&rec)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::invalid(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::invalid(e.to_string()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeparationCheck {
    pub pair: (usize, usize),
    pub whitened_sq_distance: f64,
    pub threshold: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BandCheck {
    pub band: usize,
    pub lo: f64,
    pub hi: f64,
    pub pairs: usize,
    pub in_band: usize,
    /// Fraction of off-diagonal in-cluster entries inside the band; 1 when
    /// the cluster has a single point.
    pub fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PopulationCheck {
    pub cluster: usize,
    pub expected: usize,
    pub found: usize,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionReport {
    pub a: f64,
    pub separation: Vec<SeparationCheck>,
    pub separation_pass: bool,
    pub bands: Vec<BandCheck>,
    /// Membership fraction pooled over every off-diagonal in-cluster entry.
    pub band_fraction: f64,
    pub populations: Vec<PopulationCheck>,
    pub population_pass: bool,
    pub max_off_cluster: f64,
    pub off_cluster_ceiling: f64,
    pub off_cluster_pass: bool,
    /// Entries whose kernel value exceeds the diagonal threshold.
    pub above_diagonal_threshold: usize,
    pub diagonal_only: bool,
}

pub fn check_conditions(ds: &LabeledDataset, lambda: f64) -> Result<ConditionReport> {
    let n = ds.n();
    if ds.labels.len() != n {
        return Err(Error::LabelLengthMismatch {
            expected: n,
            found: ds.labels.len(),
        });
    }
    let b = ds.spec.b;
    let a = compute_a(n, lambda)?;
    let hp = ds.hyperparams(1.0)?;
    let threshold = separation_threshold(a);

    let mut separation = Vec::new();
    for i in 0..b {
        for j in (i + 1)..b {
            let wi = hp.whiten(&ds.spec.centers[i]);
            let wj = hp.whiten(&ds.spec.centers[j]);
            let dist: f64 = wi.iter().zip(&wj).map(|(p, q)| (p - q).powi(2)).sum();
            separation.push(SeparationCheck {
                pair: (i, j),
                whitened_sq_distance: dist,
                threshold,
                pass: dist > threshold,
            });
        }
    }

    let k = gram(&ds.x, &hp)?;
    let ceiling = off_cluster_ceiling(a);
    let diag = diagonal_threshold(a, b);
    let mut pairs = vec![0usize; b];
    let mut in_band = vec![0usize; b];
    let mut max_off = 0.0f64;
    let mut above = 0usize;
    let bounds = (1..=b)
        .map(|i| band_bounds(i, a, b))
        .collect::<Result<Vec<_>>>()?;
    for u in 0..n {
        for v in 0..n {
            let kv = k.get(u, v);
            if kv > diag {
                above += 1;
            }
            if v <= u {
                continue;
            }
            let (lu, lv) = (ds.labels[u], ds.labels[v]);
            if lu == lv {
                pairs[lu] += 1;
                let (lo, hi) = bounds[lu];
                if kv >= lo && kv < hi {
                    in_band[lu] += 1;
                }
            } else {
                max_off = max_off.max(kv);
            }
        }
    }
    let bands = (0..b)
        .map(|c| BandCheck {
            band: c + 1,
            lo: bounds[c].0,
            hi: bounds[c].1,
            pairs: pairs[c],
            in_band: in_band[c],
            fraction: if pairs[c] == 0 {
                1.0
            } else {
                in_band[c] as f64 / pairs[c] as f64
            },
        })
        .collect();
    let total_pairs: usize = pairs.iter().sum();
    let band_fraction = if total_pairs == 0 {
        1.0
    } else {
        in_band.iter().sum::<usize>() as f64 / total_pairs as f64
    };

    let found = ds.sizes();
    let base = found.first().copied().unwrap_or(1).max(1);
    let populations: Vec<PopulationCheck> = (0..b)
        .map(|c| {
            let expected = base * cluster_size(c + 1);
            PopulationCheck {
                cluster: c,
                expected,
                found: found[c],
                pass: found[c] == expected,
            }
        })
        .collect();

    Ok(ConditionReport {
        a,
        separation_pass: separation.iter().all(|s| s.pass),
        separation,
        bands,
        band_fraction,
        population_pass: populations.iter().all(|p| p.pass),
        populations,
        max_off_cluster: max_off,
        off_cluster_ceiling: ceiling,
        off_cluster_pass: max_off < ceiling,
        above_diagonal_threshold: above,
        diagonal_only: above == n,
    })
}

/// `max_i ceil(32 b |κ_i| / (λ² 2^{a+i}) · ln(2b|κ_i| / δ))`.
pub fn required_samples(b: usize, band_sizes: &[usize], lambda: f64, delta: f64, a: f64) -> Result<usize> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::InvalidDelta(delta));
    }
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(Error::InvalidLambda {
            lambda,
            reason: "must be positive".into(),
        });
    }
    if b == 0 || band_sizes.len() != b {
        return Err(Error::DimensionMismatch {
            expected: b,
            found: band_sizes.len(),
        });
    }
    let bf = b as f64;
    let mut p = 0.0f64;
    for (idx, &size) in band_sizes.iter().enumerate() {
        if size == 0 {
            continue;
        }
        let s = size as f64;
        let i = (idx + 1) as f64;
        let bound = 32.0 * bf * s / (lambda * lambda * 2f64.powf(a + i)) * (2.0 * bf * s / delta).ln();
        p = p.max(bound);
    }
    Ok((p.ceil() as usize).max(1))
}
