//! How the random-feature Gram matrix approaches the exact one as the number
//! of frequencies grows.

use nalgebra::DMatrix;
use spectralgp::bounds::{frobenius_distance, spectral_distance};
use spectralgp::kernel::{feature_matrix, gram, sample_spectral, FeatureMap, HyperParams, SpectralKind};
use spectralgp::numerics::SymMatrix;
use spectralgp::rng::Stream;

fn main() -> spectralgp::Result<()> {
    let mut s = Stream::new(0, "points", 0);
    let x = DMatrix::from_fn(50, 3, |_, _| s.normal());
    let hp = HyperParams::isotropic(3, 1.2, 0.1)?;
    let k = gram(&x, &hp)?;

    println!("{:>6} {:>12} {:>12}", "m", "spectral", "frobenius");
    for m in [4, 16, 64, 256, 1024] {
        let draw = sample_spectral(m, &hp, SpectralKind::Frequency, 42)?;
        let phi = feature_matrix(&x, &FeatureMap::from_draw(&draw, &hp)?)?;
        let approx = SymMatrix::from_matrix(&phi * phi.transpose())?;
        println!(
            "{m:>6} {:>12.4} {:>12.4}",
            spectral_distance(&k, &approx)?,
            frobenius_distance(&k, &approx)?
        );
    }
    Ok(())
}
