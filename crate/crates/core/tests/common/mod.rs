#![allow(dead_code)]

use nalgebra::DMatrix;
use spectralgp::kernel::{gram, HyperParams};
use spectralgp::numerics::CholeskyFactor;
use spectralgp::rng::Stream;

/// Uniform inputs on [-2, 2]^d with centered targets drawn from a GP prior.
pub fn gp_data(n: usize, d: usize, theta: f64, noise: f64, seed: u64) -> (DMatrix<f64>, Vec<f64>) {
    let mut s = Stream::new(seed, "x", 0);
    let x = DMatrix::from_fn(n, d, |_, _| 4.0 * s.uniform() - 2.0);
    let hp = HyperParams::isotropic(d, theta, noise).unwrap();
    let l = CholeskyFactor::new(&gram(&x, &hp).unwrap().add_diagonal(1e-8))
        .unwrap()
        .lower();
    let xi = nalgebra::DVector::from_vec(Stream::new(seed, "f", 0).normals(n));
    let f = l * xi;
    let e = Stream::new(seed, "e", 0).normals(n);
    let y: Vec<f64> = (0..n).map(|i| f[i] + noise * e[i]).collect();
    let mean = y.iter().sum::<f64>() / n as f64;
    (x, y.iter().map(|v| v - mean).collect())
}

pub fn uniform_points(n: usize, d: usize, seed: u64, tag: &str) -> DMatrix<f64> {
    let mut s = Stream::new(seed, tag, 0);
    DMatrix::from_fn(n, d, |_, _| 4.0 * s.uniform() - 2.0)
}

pub fn median(v: &mut [f64]) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}
