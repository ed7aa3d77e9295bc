//! Sparse-spectrum approximations: averaged cosine Grams, the clustered
//! (off-cluster zeroed) construction and feature-space regression.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gp::{predict_from_gram, train_log_space, GpPosterior, TrainConfig, TrainTrace};
use crate::kernel::{
    feature_matrix, feature_vector, rows, sample_spectral, FeatureMap, HyperParams, SpectralDraw,
    SpectralKind,
};
use crate::numerics::{CholeskyFactor, SymMatrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Construction {
    Averaged,
    ClusteredZeroed,
}

#[derive(Clone, Debug)]
pub struct ApproxGram {
    pub matrix: SymMatrix,
    /// Always held as standard-normal directions.
    pub draw: SpectralDraw,
    pub construction: Construction,
    pub labels: Option<Vec<usize>>,
}

impl AsRef<SymMatrix> for ApproxGram {
    fn as_ref(&self) -> &SymMatrix {
        &self.matrix
    }
}

impl AsRef<SymMatrix> for SymMatrix {
    fn as_ref(&self) -> &SymMatrix {
        self
    }
}

/// Projections `z_ui = Σ_ℓ ε_iℓ x_uℓ / θ_ℓ`, one row per input.
fn projections(points: &[Vec<f64>], eps: &[Vec<f64>], hp: &HyperParams) -> Vec<Vec<f64>> {
    points
        .iter()
        .map(|x| {
            let w = hp.whiten(x);
            eps.iter()
                .map(|e| e.iter().zip(&w).map(|(a, b)| a * b).sum())
                .collect()
        })
        .collect()
}

fn mean_cos_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(u, v)| (u - v).cos()).sum::<f64>() / a.len() as f64
}

fn check_draw(draw: &SpectralDraw, hp: &HyperParams) -> Result<()> {
    if draw.is_empty() {
        return Err(Error::invalid("spectral draw is empty"));
    }
    for v in &draw.vectors {
        hp.check_dim(v.len())?;
    }
    Ok(())
}

fn build_gram(
    x: &DMatrix<f64>,
    hp: &HyperParams,
    draw: &SpectralDraw,
    labels: Option<&[usize]>,
) -> Result<ApproxGram> {
    if x.nrows() == 0 {
        return Err(Error::EmptyDataset);
    }
    hp.check_dim(x.ncols())?;
    check_draw(draw, hp)?;
    if let Some(l) = labels {
        if l.len() != x.nrows() {
            return Err(Error::LabelLengthMismatch {
                expected: x.nrows(),
                found: l.len(),
            });
        }
    }
    let eps = draw.standard_normal(hp);
    let z = projections(&rows(x), &eps, hp);
    let matrix = SymMatrix::from_fn(x.nrows(), |u, v| match labels {
        Some(l) if l[u] != l[v] => 0.0,
        _ => mean_cos_diff(&z[u], &z[v]),
    })?;
    Ok(ApproxGram {
        matrix,
        draw: SpectralDraw {
            vectors: eps,
            kind: SpectralKind::StandardNormal,
            seed: draw.seed,
        },
        construction: if labels.is_some() {
            Construction::ClusteredZeroed
        } else {
            Construction::Averaged
        },
        labels: labels.map(<[usize]>::to_vec),
    })
}

/// `K′_uv = (1/p) Σ_i cos(ε_iᵀ Θ^{-1/2} (x_u - x_v))` with `ε_i ~ N(0, I)`.
pub fn averaged_gram(x: &DMatrix<f64>, hp: &HyperParams, p: usize, seed: u64) -> Result<ApproxGram> {
    let draw = sample_spectral(p, hp, SpectralKind::StandardNormal, seed)?;
    build_gram(x, hp, &draw, None)
}

pub fn averaged_gram_with_draw(
    x: &DMatrix<f64>,
    hp: &HyperParams,
    draw: &SpectralDraw,
) -> Result<ApproxGram> {
    build_gram(x, hp, draw, None)
}

/// As [`averaged_gram`] inside each cluster; off-cluster entries are zero.
pub fn clustered_gram(
    x: &DMatrix<f64>,
    labels: &[usize],
    hp: &HyperParams,
    p: usize,
    seed: u64,
) -> Result<ApproxGram> {
    let draw = sample_spectral(p, hp, SpectralKind::StandardNormal, seed)?;
    build_gram(x, hp, &draw, Some(labels))
}

pub fn clustered_gram_with_draw(
    x: &DMatrix<f64>,
    labels: &[usize],
    hp: &HyperParams,
    draw: &SpectralDraw,
) -> Result<ApproxGram> {
    build_gram(x, hp, draw, Some(labels))
}

/// Approximate cross vector between the training rows and `x_star` under the
/// same draw. For a clustered Gram, `cluster` selects the test point's cluster
/// and every other entry is zero.
pub fn approx_cross(
    gram: &ApproxGram,
    x: &DMatrix<f64>,
    x_star: &[f64],
    hp: &HyperParams,
    cluster: Option<usize>,
) -> Result<Vec<f64>> {
    hp.check_dim(x_star.len())?;
    let z = projections(&rows(x), &gram.draw.vectors, hp);
    let zs = &projections(&[x_star.to_vec()], &gram.draw.vectors, hp)[0];
    Ok(z.iter()
        .enumerate()
        .map(|(u, zu)| match (&gram.labels, cluster) {
            (Some(l), Some(c)) if l[u] != c => 0.0,
            _ => mean_cos_diff(zu, zs),
        })
        .collect())
}

/// Index of the center nearest to `x` in the whitened metric.
pub fn nearest_center(x: &[f64], centers: &[Vec<f64>], hp: &HyperParams) -> Option<usize> {
    let w = hp.whiten(x);
    centers
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let wc = hp.whiten(c);
            let d: f64 = w.iter().zip(&wc).map(|(a, b)| (a - b).powi(2)).sum();
            (i, d)
        })
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .map(|(i, _)| i)
}

/// Predictive mean and variance with the Gram and cross vector replaced by approximations.
pub fn predict_with_gram(
    k_prime: &impl AsRef<SymMatrix>,
    k_star: &[f64],
    y: &[f64],
    hp: &HyperParams,
) -> Result<GpPosterior> {
    predict_from_gram(k_prime.as_ref(), k_star, y, hp.noise_var())
}

/// Ridge regression on a fixed feature matrix, solved in weight space when
/// there are more rows than features and in function space otherwise.
#[derive(Clone, Debug)]
struct FeatureRegression {
    weights: DVector<f64>,
    noise_var: f64,
    route: Route,
}

#[derive(Clone, Debug)]
enum Route {
    Weight { precision: CholeskyFactor },
    Function { phi: DMatrix<f64>, q: CholeskyFactor },
}

impl FeatureRegression {
    fn fit(phi: &DMatrix<f64>, y: &DVector<f64>, noise_var: f64) -> Result<Self> {
        let (n, f) = phi.shape();
        if n > f {
            let a = SymMatrix::from_matrix(phi.transpose() * phi)?.add_diagonal(noise_var);
            let precision = CholeskyFactor::new(&a)?;
            let weights = precision.solve(&(phi.transpose() * y));
            Ok(FeatureRegression {
                weights,
                noise_var,
                route: Route::Weight { precision },
            })
        } else {
            let q = CholeskyFactor::new(
                &SymMatrix::from_matrix(phi * phi.transpose())?.add_diagonal(noise_var),
            )?;
            let weights = phi.transpose() * q.solve(y);
            Ok(FeatureRegression {
                weights,
                noise_var,
                route: Route::Function { phi: phi.clone(), q },
            })
        }
    }

    fn mean(&self, phi_star: &DVector<f64>) -> f64 {
        phi_star.dot(&self.weights)
    }

    /// `σ² φᵀ(ΦᵀΦ + σ²I)⁻¹φ`, equal to `φᵀφ - vᵀ(ΦΦᵀ + σ²I)⁻¹v` with `v = Φφ`.
    fn latent_variance(&self, phi_star: &DVector<f64>) -> f64 {
        let v = match &self.route {
            Route::Weight { precision } => self.noise_var * precision.quad_form(phi_star),
            Route::Function { phi, q } => {
                phi_star.dot(phi_star) - q.quad_form(&(phi * phi_star))
            }
        };
        v.max(0.0)
    }
}

/// Weight-space SSGP with `m` Bochner frequencies (`2m` features).
#[derive(Clone, Debug)]
pub struct SsgpModel {
    pub feature_map: FeatureMap,
    pub weights: Vec<f64>,
    pub hp: HyperParams,
    pub seed: u64,
    regression: Option<FeatureRegression>,
}

#[derive(Serialize, Deserialize)]
struct SsgpModelRepr {
    seed: u64,
    m: usize,
    lengthscales: Vec<f64>,
    noise_std: f64,
    weights: Vec<f64>,
}

impl Serialize for SsgpModel {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        SsgpModelRepr {
            seed: self.seed,
            m: self.feature_map.m(),
            lengthscales: self.hp.lengthscales(),
            noise_std: self.hp.noise_std(),
            weights: self.weights.clone(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for SsgpModel {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as _;
        let r = SsgpModelRepr::deserialize(d)?;
        let hp = HyperParams::new(&r.lengthscales, r.noise_std).map_err(D::Error::custom)?;
        let draw = sample_spectral(r.m, &hp, SpectralKind::Frequency, r.seed)
            .map_err(D::Error::custom)?;
        let feature_map = FeatureMap::from_draw(&draw, &hp).map_err(D::Error::custom)?;
        if r.weights.len() != feature_map.num_features() {
            return Err(D::Error::custom(format!(
                "expected {} weights, found {}",
                feature_map.num_features(),
                r.weights.len()
            )));
        }
        Ok(SsgpModel {
            feature_map,
            weights: r.weights,
            hp,
            seed: r.seed,
            regression: None,
        })
    }
}

pub fn fit_ssgp(
    x: &DMatrix<f64>,
    y: &[f64],
    hp: &HyperParams,
    m: usize,
    seed: u64,
) -> Result<SsgpModel> {
    if x.nrows() == 0 {
        return Err(Error::EmptyDataset);
    }
    hp.check_dim(x.ncols())?;
    if y.len() != x.nrows() {
        return Err(Error::DimensionMismatch {
            expected: x.nrows(),
            found: y.len(),
        });
    }
    let draw = sample_spectral(m, hp, SpectralKind::Frequency, seed)?;
    let feature_map = FeatureMap::from_draw(&draw, hp)?;
    let phi = feature_matrix(x, &feature_map)?;
    let regression = FeatureRegression::fit(&phi, &DVector::from_column_slice(y), hp.noise_var())?;
    Ok(SsgpModel {
        feature_map,
        weights: regression.weights.iter().copied().collect(),
        hp: hp.clone(),
        seed,
        regression: Some(regression),
    })
}

impl SsgpModel {
    pub fn m(&self) -> usize {
        self.feature_map.m()
    }

    pub fn predict_mean(&self, x_star: &[f64]) -> Result<f64> {
        let phi = feature_vector(x_star, &self.feature_map)?;
        Ok(phi.iter().zip(&self.weights).map(|(a, b)| a * b).sum())
    }

    /// Mean and latent variance. Variance needs the training-time factor, so
    /// a model restored from JSON only supports [`SsgpModel::predict_mean`].
    pub fn predict(&self, x_star: &[f64]) -> Result<GpPosterior> {
        let reg = self.regression.as_ref().ok_or_else(|| {
            Error::invalid("predictive variance is unavailable for a deserialized model")
        })?;
        let phi = DVector::from_vec(feature_vector(x_star, &self.feature_map)?);
        Ok(GpPosterior {
            mean: reg.mean(&phi),
            variance: reg.latent_variance(&phi),
        })
    }
}

/// Features `s cos z`, `s sin z` built from standard-normal directions, so the
/// map can be differentiated with respect to the lengthscales.
fn eps_features(points: &[Vec<f64>], eps: &[Vec<f64>], hp: &HyperParams) -> (DMatrix<f64>, Vec<Vec<f64>>) {
    let z = projections(points, eps, hp);
    let m = eps.len();
    let s = 1.0 / (m as f64).sqrt();
    let mut phi = DMatrix::zeros(points.len(), 2 * m);
    for (u, zu) in z.iter().enumerate() {
        for (i, zi) in zu.iter().enumerate() {
            let (sn, cs) = zi.sin_cos();
            phi[(u, 2 * i)] = s * cs;
            phi[(u, 2 * i + 1)] = s * sn;
        }
    }
    (phi, z)
}

/// Approximate NLL `½ log|ΦΦᵀ + σ²I| + ½ yᵀ(ΦΦᵀ + σ²I)⁻¹y` and its gradient
/// in log space, with the directions `eps` held fixed.
pub fn ssgp_nll_grad(
    x: &DMatrix<f64>,
    y: &[f64],
    hp: &HyperParams,
    eps: &[Vec<f64>],
) -> Result<(f64, Vec<f64>)> {
    let points = rows(x);
    nll_grad_rows(&points, y, hp, eps)
}

fn nll_grad_rows(
    points: &[Vec<f64>],
    y: &[f64],
    hp: &HyperParams,
    eps: &[Vec<f64>],
) -> Result<(f64, Vec<f64>)> {
    let n = points.len();
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    if y.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            found: y.len(),
        });
    }
    if eps.is_empty() {
        return Err(Error::invalid("spectral draw is empty"));
    }
    hp.check_dim(points[0].len())?;
    let d = hp.dim();
    let m = eps.len();
    let f = 2 * m;
    let noise_var = hp.noise_var();
    let (phi, z) = eps_features(points, eps, hp);
    let yv = DVector::from_column_slice(y);

    let (log_det, alpha, q_inv_phi, trace_q_inv) = if n > f {
        let gram_f = phi.transpose() * &phi;
        let a = CholeskyFactor::new(&SymMatrix::from_matrix(gram_f.clone())?.add_diagonal(noise_var))?;
        let w = a.solve(&(phi.transpose() * &yv));
        let alpha = (&yv - &phi * &w) / noise_var;
        let log_det = a.log_det() + (n - f) as f64 * noise_var.ln();
        let a_inv = a.inverse();
        let q_inv_phi = &phi * &a_inv;
        let trace_q_inv = (n as f64 - (&a_inv * &gram_f).trace()) / noise_var;
        (log_det, alpha, q_inv_phi, trace_q_inv)
    } else {
        let q = CholeskyFactor::new(
            &SymMatrix::from_matrix(&phi * phi.transpose())?.add_diagonal(noise_var),
        )?;
        let alpha = q.solve(&yv);
        (q.log_det(), alpha, q.solve_matrix(&phi), q.inverse().trace())
    };
    let nll = 0.5 * log_det + 0.5 * yv.dot(&alpha);
    let w = phi.transpose() * &alpha;
    let g = q_inv_phi - &alpha * w.transpose();

    // dΦ/dz: cos -> -s sin, sin -> s cos; dz_ui/dlog θ_ℓ = -ε_iℓ x_uℓ / θ_ℓ
    let s = 1.0 / (m as f64).sqrt();
    let mut h = DMatrix::zeros(n, m);
    for u in 0..n {
        for i in 0..m {
            let (sn, cs) = z[u][i].sin_cos();
            h[(u, i)] = s * (g[(u, 2 * i + 1)] * cs - g[(u, 2 * i)] * sn);
        }
    }
    let e = DMatrix::from_fn(m, d, |i, l| eps[i][l]);
    let he = &h * e;
    let mut grad = vec![0.0; d + 1];
    for (l, gl) in grad.iter_mut().enumerate().take(d) {
        let theta = hp.lengthscale(l);
        *gl = -(0..n).map(|u| points[u][l] * he[(u, l)]).sum::<f64>() / theta;
    }
    grad[d] = noise_var * (trace_q_inv - alpha.dot(&alpha));
    Ok((nll, grad))
}

pub fn ssgp_nll(x: &DMatrix<f64>, y: &[f64], hp: &HyperParams, eps: &[Vec<f64>]) -> Result<f64> {
    Ok(ssgp_nll_grad(x, y, hp, eps)?.0)
}

/// Trains the approximate NLL with `m` fixed standard-normal directions.
pub fn ssgp_train(
    x: &DMatrix<f64>,
    y: &[f64],
    init: &HyperParams,
    m: usize,
    seed: u64,
    cfg: &TrainConfig,
) -> Result<TrainTrace> {
    let eps = sample_spectral(m, init, SpectralKind::StandardNormal, seed)?.vectors;
    train_log_space(init, cfg, |hp| ssgp_nll_grad(x, y, hp, &eps))
}

fn split_by_label(points: &[Vec<f64>], y: &[f64], labels: &[usize]) -> Vec<(Vec<Vec<f64>>, Vec<f64>)> {
    let k = labels.iter().copied().max().map_or(0, |v| v + 1);
    let mut groups = vec![(Vec::new(), Vec::new()); k];
    for ((p, t), &l) in points.iter().zip(y).zip(labels) {
        groups[l].0.push(p.clone());
        groups[l].1.push(*t);
    }
    groups
}

/// Sum of the per-cluster approximate NLLs, which is the NLL of the
/// block-diagonal clustered Gram.
pub fn clustered_nll_grad(
    x: &DMatrix<f64>,
    y: &[f64],
    labels: &[usize],
    hp: &HyperParams,
    eps: &[Vec<f64>],
) -> Result<(f64, Vec<f64>)> {
    if labels.len() != x.nrows() {
        return Err(Error::LabelLengthMismatch {
            expected: x.nrows(),
            found: labels.len(),
        });
    }
    if y.len() != x.nrows() {
        return Err(Error::DimensionMismatch {
            expected: x.nrows(),
            found: y.len(),
        });
    }
    let mut total = 0.0;
    let mut grad = vec![0.0; hp.dim() + 1];
    for (pts, ys) in split_by_label(&rows(x), y, labels) {
        if pts.is_empty() {
            continue;
        }
        let (v, g) = nll_grad_rows(&pts, &ys, hp, eps)?;
        total += v;
        grad.iter_mut().zip(g).for_each(|(a, b)| *a += b);
    }
    Ok((total, grad))
}

#[derive(Clone, Debug)]
struct ClusterFit {
    centroid: Vec<f64>,
    regression: FeatureRegression,
}

/// One SSGP per cluster sharing a single spectral draw: the exact predictor
/// for the clustered (block-diagonal) Gram with a test point's cross vector
/// restricted to its nearest cluster.
#[derive(Clone, Debug)]
pub struct ClusteredSsgp {
    pub hp: HyperParams,
    pub eps: Vec<Vec<f64>>,
    clusters: Vec<Option<ClusterFit>>,
}

impl ClusteredSsgp {
    pub fn fit(
        x: &DMatrix<f64>,
        y: &[f64],
        labels: &[usize],
        hp: &HyperParams,
        eps: Vec<Vec<f64>>,
    ) -> Result<Self> {
        if labels.len() != x.nrows() {
            return Err(Error::LabelLengthMismatch {
                expected: x.nrows(),
                found: labels.len(),
            });
        }
        if y.len() != x.nrows() {
            return Err(Error::DimensionMismatch {
                expected: x.nrows(),
                found: y.len(),
            });
        }
        hp.check_dim(x.ncols())?;
        let mut clusters = Vec::new();
        for (pts, ys) in split_by_label(&rows(x), y, labels) {
            if pts.is_empty() {
                clusters.push(None);
                continue;
            }
            let d = pts[0].len();
            let centroid: Vec<f64> = (0..d)
                .map(|l| pts.iter().map(|p| p[l]).sum::<f64>() / pts.len() as f64)
                .collect();
            let (phi, _) = eps_features(&pts, &eps, hp);
            let regression =
                FeatureRegression::fit(&phi, &DVector::from_vec(ys), hp.noise_var())?;
            clusters.push(Some(ClusterFit {
                centroid,
                regression,
            }));
        }
        Ok(ClusteredSsgp { hp: hp.clone(), eps, clusters })
    }

    pub fn num_clusters(&self) -> usize {
        self.clusters.len()
    }

    pub fn assign(&self, x_star: &[f64]) -> Option<usize> {
        let live: Vec<(usize, Vec<f64>)> = self
            .clusters
            .iter()
            .enumerate()
            .filter_map(|(i, c)| c.as_ref().map(|c| (i, c.centroid.clone())))
            .collect();
        let centers: Vec<Vec<f64>> = live.iter().map(|(_, c)| c.clone()).collect();
        nearest_center(x_star, &centers, &self.hp).map(|j| live[j].0)
    }

    pub fn predict(&self, x_star: &[f64]) -> Result<GpPosterior> {
        self.hp.check_dim(x_star.len())?;
        let Some(fit) = self.assign(x_star).and_then(|c| self.clusters[c].as_ref()) else {
            return Ok(GpPosterior {
                mean: 0.0,
                variance: 1.0,
            });
        };
        let (phi, _) = eps_features(&[x_star.to_vec()], &self.eps, &self.hp);
        let phi = DVector::from_iterator(phi.ncols(), phi.row(0).iter().copied());
        Ok(GpPosterior {
            mean: fit.regression.mean(&phi),
            variance: fit.regression.latent_variance(&phi),
        })
    }
}

/// Trains hyperparameters on the clustered NLL and fits the clustered model.
pub fn fit_clustered_ssgp(
    x: &DMatrix<f64>,
    y: &[f64],
    labels: &[usize],
    init: &HyperParams,
    m: usize,
    seed: u64,
    cfg: &TrainConfig,
) -> Result<(ClusteredSsgp, TrainTrace)> {
    let eps = sample_spectral(m, init, SpectralKind::StandardNormal, seed)?.vectors;
    let trace = train_log_space(init, cfg, |hp| clustered_nll_grad(x, y, labels, hp, &eps))?;
    let model = ClusteredSsgp::fit(x, y, labels, &trace.final_hyperparams, eps)?;
    Ok((model, trace))
}
