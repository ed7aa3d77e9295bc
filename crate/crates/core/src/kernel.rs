//! Squared-exponential ARD kernel, spectral sampling and trigonometric features.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::SymMatrix;
use crate::rng::Stream;

/// ARD lengthscales and noise standard deviation, held in log space.
///
/// The flat parameter vector used by the optimizers is
/// `(log θ_1, …, log θ_d, log σ)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "HyperParamsRepr", into = "HyperParamsRepr")]
pub struct HyperParams {
    log_lengthscales: Vec<f64>,
    log_noise_std: f64,
    // Natural-scale copies, so values given by the caller round-trip exactly.
    lengthscales: Vec<f64>,
    noise_std: f64,
}

#[derive(Serialize, Deserialize)]
struct HyperParamsRepr {
    lengthscales: Vec<f64>,
    noise_std: f64,
}

impl TryFrom<HyperParamsRepr> for HyperParams {
    type Error = Error;
    fn try_from(r: HyperParamsRepr) -> Result<Self> {
        HyperParams::new(&r.lengthscales, r.noise_std)
    }
}

impl From<HyperParams> for HyperParamsRepr {
    fn from(h: HyperParams) -> Self {
        HyperParamsRepr {
            lengthscales: h.lengthscales(),
            noise_std: h.noise_std(),
        }
    }
}

fn positive_finite(v: f64) -> bool {
    v.is_finite() && v > 0.0
}

impl HyperParams {
    pub fn new(lengthscales: &[f64], noise_std: f64) -> Result<Self> {
        if lengthscales.is_empty() {
            return Err(Error::invalid("at least one lengthscale is required"));
        }
        if !lengthscales.iter().all(|&t| positive_finite(t)) || !positive_finite(noise_std) {
            return Err(Error::invalid(
                "lengthscales and noise std must be positive and finite",
            ));
        }
        Ok(HyperParams {
            log_lengthscales: lengthscales.iter().map(|t| t.ln()).collect(),
            log_noise_std: noise_std.ln(),
            lengthscales: lengthscales.to_vec(),
            noise_std,
        })
    }

    /// Same lengthscale in every one of `d` dimensions.
    pub fn isotropic(d: usize, lengthscale: f64, noise_std: f64) -> Result<Self> {
        Self::new(&vec![lengthscale; d], noise_std)
    }

    /// Inverse of [`HyperParams::to_log_vec`].
    pub fn from_log_vec(params: &[f64]) -> Result<Self> {
        if params.len() < 2 {
            return Err(Error::invalid("log parameter vector needs d + 1 >= 2 entries"));
        }
        if params.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("log parameters must be finite"));
        }
        let d = params.len() - 1;
        let hp = HyperParams {
            log_lengthscales: params[..d].to_vec(),
            log_noise_std: params[d],
            lengthscales: params[..d].iter().map(|v| v.exp()).collect(),
            noise_std: params[d].exp(),
        };
        if !hp.lengthscales().iter().all(|&t| positive_finite(t)) || !positive_finite(hp.noise_std())
        {
            return Err(Error::invalid("log parameters overflow"));
        }
        Ok(hp)
    }

    pub fn to_log_vec(&self) -> Vec<f64> {
        let mut v = self.log_lengthscales.clone();
        v.push(self.log_noise_std);
        v
    }

    pub fn dim(&self) -> usize {
        self.log_lengthscales.len()
    }

    pub fn lengthscales(&self) -> Vec<f64> {
        self.lengthscales.clone()
    }

    pub fn lengthscale(&self, l: usize) -> f64 {
        self.lengthscales[l]
    }

    pub fn noise_std(&self) -> f64 {
        self.noise_std
    }

    pub fn noise_var(&self) -> f64 {
        self.noise_std * self.noise_std
    }

    pub fn with_noise_std(&self, noise_std: f64) -> Result<Self> {
        Self::new(&self.lengthscales(), noise_std)
    }

    /// Maps `x` to `Θ^{-1/2} x`.
    pub fn whiten(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(&self.lengthscales).map(|(v, t)| v / t).collect()
    }

    pub(crate) fn check_dim(&self, found: usize) -> Result<()> {
        if found != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                found,
            });
        }
        Ok(())
    }
}

pub fn rows(x: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..x.nrows())
        .map(|i| x.row(i).iter().copied().collect())
        .collect()
}

fn sq_whitened_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(u, v)| (u - v) * (u - v)).sum()
}

/// `exp(-½ Σ ((x_ℓ - x′_ℓ) / θ_ℓ)²)`.
pub fn se_kernel(x: &[f64], x_prime: &[f64], hp: &HyperParams) -> Result<f64> {
    hp.check_dim(x.len())?;
    hp.check_dim(x_prime.len())?;
    Ok((-0.5 * sq_whitened_dist(&hp.whiten(x), &hp.whiten(x_prime))).exp())
}

pub fn gram(x: &DMatrix<f64>, hp: &HyperParams) -> Result<SymMatrix> {
    if x.nrows() == 0 {
        return Err(Error::EmptyDataset);
    }
    hp.check_dim(x.ncols())?;
    let w: Vec<Vec<f64>> = rows(x).iter().map(|r| hp.whiten(r)).collect();
    SymMatrix::from_fn(x.nrows(), |i, j| {
        if i == j {
            1.0
        } else {
            (-0.5 * sq_whitened_dist(&w[i], &w[j])).exp()
        }
    })
}

/// Kernel values between every row of `x` and the point `x_star`.
pub fn cross(x: &DMatrix<f64>, x_star: &[f64], hp: &HyperParams) -> Result<Vec<f64>> {
    hp.check_dim(x.ncols())?;
    hp.check_dim(x_star.len())?;
    let ws = hp.whiten(x_star);
    Ok(rows(x)
        .iter()
        .map(|r| (-0.5 * sq_whitened_dist(&hp.whiten(r), &ws)).exp())
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SpectralKind {
    /// `r ~ N(0, (4π²Θ)⁻¹)`, the Bochner frequency.
    Frequency,
    /// `ε ~ N(0, I)`, the cosine-kernel direction.
    StandardNormal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectralDraw {
    pub vectors: Vec<Vec<f64>>,
    pub kind: SpectralKind,
    pub seed: u64,
}

/// Stream tag for spectral vectors; vector `i` uses stream index `i`.
pub const SPECTRAL_TAG: &str = "spectral";

/// Draws `p` spectral vectors. Both kinds share the same underlying standard
/// normals, so a Frequency draw is the StandardNormal draw of the same seed
/// mapped through `r = ε / (2πθ)`.
pub fn sample_spectral(
    p: usize,
    hp: &HyperParams,
    kind: SpectralKind,
    seed: u64,
) -> Result<SpectralDraw> {
    if p == 0 {
        return Err(Error::invalid("spectral draw needs p >= 1"));
    }
    let theta = hp.lengthscales();
    let vectors = (0..p)
        .map(|i| {
            let eps = Stream::new(seed, SPECTRAL_TAG, i as u64).normals(hp.dim());
            match kind {
                SpectralKind::StandardNormal => eps,
                SpectralKind::Frequency => eps
                    .iter()
                    .zip(&theta)
                    .map(|(e, t)| e / (2.0 * PI * t))
                    .collect(),
            }
        })
        .collect();
    Ok(SpectralDraw { vectors, kind, seed })
}

impl SpectralDraw {
    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    /// The draw expressed as standard-normal directions `ε = 2πθ r`.
    pub fn standard_normal(&self, hp: &HyperParams) -> Vec<Vec<f64>> {
        match self.kind {
            SpectralKind::StandardNormal => self.vectors.clone(),
            SpectralKind::Frequency => {
                let theta = hp.lengthscales();
                self.vectors
                    .iter()
                    .map(|r| r.iter().zip(&theta).map(|(v, t)| 2.0 * PI * t * v).collect())
                    .collect()
            }
        }
    }

    /// The draw expressed as frequencies `r = ε / (2πθ)`.
    pub fn frequencies(&self, hp: &HyperParams) -> Vec<Vec<f64>> {
        match self.kind {
            SpectralKind::Frequency => self.vectors.clone(),
            SpectralKind::StandardNormal => {
                let theta = hp.lengthscales();
                self.vectors
                    .iter()
                    .map(|e| e.iter().zip(&theta).map(|(v, t)| v / (2.0 * PI * t)).collect())
                    .collect()
            }
        }
    }
}

/// `cos(Σ ε_ℓ (x_ℓ - x′_ℓ) / θ_ℓ)`.
pub fn cosine_kernel(x: &[f64], x_prime: &[f64], eps: &[f64], hp: &HyperParams) -> Result<f64> {
    hp.check_dim(x.len())?;
    hp.check_dim(x_prime.len())?;
    hp.check_dim(eps.len())?;
    let arg: f64 = (0..x.len())
        .map(|l| eps[l] * (x[l] - x_prime[l]) / hp.lengthscale(l))
        .sum();
    Ok(arg.cos())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureMap {
    pub frequencies: Vec<Vec<f64>>,
    pub scale: f64,
}

impl FeatureMap {
    pub fn new(frequencies: Vec<Vec<f64>>) -> Result<Self> {
        let m = frequencies.len();
        if m == 0 {
            return Err(Error::invalid("feature map needs at least one frequency"));
        }
        let d = frequencies[0].len();
        if let Some(bad) = frequencies.iter().find(|r| r.len() != d) {
            return Err(Error::DimensionMismatch {
                expected: d,
                found: bad.len(),
            });
        }
        Ok(FeatureMap {
            frequencies,
            scale: 1.0 / (m as f64).sqrt(),
        })
    }

    pub fn from_draw(draw: &SpectralDraw, hp: &HyperParams) -> Result<Self> {
        Self::new(draw.frequencies(hp))
    }

    pub fn m(&self) -> usize {
        self.frequencies.len()
    }

    pub fn dim(&self) -> usize {
        self.frequencies[0].len()
    }

    pub fn num_features(&self) -> usize {
        2 * self.m()
    }
}

/// `(s cos 2πr_iᵀx, s sin 2πr_iᵀx)` for `i = 1…m`, interleaved.
pub fn feature_vector(x: &[f64], fm: &FeatureMap) -> Result<Vec<f64>> {
    if x.len() != fm.dim() {
        return Err(Error::DimensionMismatch {
            expected: fm.dim(),
            found: x.len(),
        });
    }
    let mut out = Vec::with_capacity(fm.num_features());
    for r in &fm.frequencies {
        let z = 2.0 * PI * r.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
        let (s, c) = z.sin_cos();
        out.push(fm.scale * c);
        out.push(fm.scale * s);
    }
    Ok(out)
}

/// Row `u` of the result is `feature_vector(x_u)`.
pub fn feature_matrix(x: &DMatrix<f64>, fm: &FeatureMap) -> Result<DMatrix<f64>> {
    let mut phi = DMatrix::zeros(x.nrows(), fm.num_features());
    for (u, row) in rows(x).iter().enumerate() {
        for (j, v) in feature_vector(row, fm)?.into_iter().enumerate() {
            phi[(u, j)] = v;
        }
    }
    Ok(phi)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn hp(theta: &[f64]) -> HyperParams {
        HyperParams::new(theta, 0.1).unwrap()
    }

    #[test]
    fn se_zero_distance() {
        assert_eq!(se_kernel(&[0.3, -1.0], &[0.3, -1.0], &hp(&[0.7, 2.0])).unwrap(), 1.0);
    }

    #[test]
    fn se_unit_distance() {
        let k = se_kernel(&[0.0], &[1.0], &hp(&[1.0])).unwrap();
        assert_abs_diff_eq!(k, (-0.5f64).exp(), epsilon = 1e-15);
        assert_abs_diff_eq!(k, 0.60653, epsilon = 1e-5);
    }

    #[test]
    fn se_ard() {
        let k = se_kernel(&[1.0, 2.0], &[0.0, 0.0], &hp(&[1.0, 2.0])).unwrap();
        assert_abs_diff_eq!(k, (-1.0f64).exp(), epsilon = 1e-15);
    }

    #[test]
    fn se_dim_mismatch() {
        assert!(matches!(
            se_kernel(&[1.0], &[1.0], &hp(&[1.0, 1.0])),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn gram_examples() {
        let h = hp(&[1.0]);
        let same = gram(&DMatrix::from_row_slice(2, 1, &[0.5, 0.5]), &h).unwrap();
        assert_eq!(same.entries(), vec![1.0; 4]);
        let one = gram(&DMatrix::from_row_slice(1, 1, &[3.0]), &h).unwrap();
        assert_eq!(one.entries(), vec![1.0]);
        let two = gram(&DMatrix::from_row_slice(2, 1, &[0.0, 1.0]), &h).unwrap();
        let e = (-0.5f64).exp();
        assert_abs_diff_eq!(two.get(0, 1), e, epsilon = 1e-15);
        assert_eq!(two.get(0, 0), 1.0);
    }

    #[test]
    fn spectral_determinism() {
        let h = hp(&[0.5, 2.0]);
        let a = sample_spectral(10, &h, SpectralKind::Frequency, 42).unwrap();
        let b = sample_spectral(10, &h, SpectralKind::Frequency, 42).unwrap();
        assert_eq!(a, b);
        assert!(sample_spectral(0, &h, SpectralKind::Frequency, 42).is_err());
    }

    #[test]
    fn spectral_moments() {
        let theta = [0.5, 2.0];
        let h = hp(&theta);
        let p = 100_000;
        for kind in [SpectralKind::Frequency, SpectralKind::StandardNormal] {
            let draw = sample_spectral(p, &h, kind, 9).unwrap();
            for l in 0..2 {
                let xs: Vec<f64> = draw.vectors.iter().map(|v| v[l]).collect();
                let mean = xs.iter().sum::<f64>() / p as f64;
                let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / p as f64;
                let target = match kind {
                    SpectralKind::Frequency => 1.0 / (4.0 * PI * PI * theta[l] * theta[l]),
                    SpectralKind::StandardNormal => 1.0,
                };
                assert!(mean.abs() <= 4.0 * target.sqrt() / (p as f64).sqrt());
                assert!((var / target - 1.0).abs() < 0.05);
            }
        }
    }

    #[test]
    fn cosine_examples() {
        let h = hp(&[1.0]);
        assert_eq!(cosine_kernel(&[0.4], &[0.4], &[3.0], &h).unwrap(), 1.0);
        assert_eq!(cosine_kernel(&[0.4], &[-2.0], &[0.0], &h).unwrap(), 1.0);
        assert_abs_diff_eq!(
            cosine_kernel(&[1.0], &[0.0], &[PI], &h).unwrap(),
            -1.0,
            epsilon = 1e-15
        );
    }

    #[test]
    fn features_at_zero_frequency() {
        let fm = FeatureMap::new(vec![vec![0.0, 0.0], vec![0.0, 0.0]]).unwrap();
        let phi = feature_vector(&[0.3, 4.0], &fm).unwrap();
        let s = 1.0 / 2f64.sqrt();
        assert_eq!(phi, vec![s, 0.0, s, 0.0]);
    }

    #[test]
    fn features_unit_norm_and_inner_product() {
        let h = hp(&[0.8, 1.3, 0.4]);
        let draw = sample_spectral(17, &h, SpectralKind::Frequency, 5).unwrap();
        let fm = FeatureMap::from_draw(&draw, &h).unwrap();
        let x = [0.2, -1.1, 0.7];
        let y = [1.5, 0.3, -0.4];
        let px = feature_vector(&x, &fm).unwrap();
        let py = feature_vector(&y, &fm).unwrap();
        assert_abs_diff_eq!(px.iter().map(|v| v * v).sum::<f64>(), 1.0, epsilon = 1e-14);
        let inner: f64 = px.iter().zip(&py).map(|(a, b)| a * b).sum();
        let direct = fm
            .frequencies
            .iter()
            .map(|r| (2.0 * PI * (0..3).map(|l| r[l] * (x[l] - y[l])).sum::<f64>()).cos())
            .sum::<f64>()
            / fm.m() as f64;
        assert_abs_diff_eq!(inner, direct, epsilon = 1e-12);
    }

    #[test]
    fn log_vec_round_trip() {
        let h = HyperParams::new(&[0.3, 7.0], 0.05).unwrap();
        let back = HyperParams::from_log_vec(&h.to_log_vec()).unwrap();
        assert_eq!(h.to_log_vec(), back.to_log_vec());
        assert_abs_diff_eq!(back.lengthscale(1), 7.0, epsilon = 1e-14);
        let json = serde_json::to_string(&h).unwrap();
        let parsed: HyperParams = serde_json::from_str(&json).unwrap();
        assert_eq!(parsed, h);
        assert!(serde_json::from_str::<HyperParams>(r#"{"lengthscales":[-1],"noise_std":1}"#)
            .is_err());
    }
}
