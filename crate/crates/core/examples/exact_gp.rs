//! Fit an exact GP to noisy samples of a sine and print a few predictions.

use nalgebra::DMatrix;
use spectralgp::{gp_train, ExactGp, HyperParams, TrainConfig};

fn main() -> spectralgp::Result<()> {
    let n = 40;
    let x = DMatrix::from_fn(n, 1, |i, _| -3.0 + 6.0 * i as f64 / (n - 1) as f64);
    let y: Vec<f64> = (0..n)
        .map(|i| x[(i, 0)].sin() + 0.05 * ((i * 7919) % 13) as f64 / 13.0)
        .collect();

    let init = HyperParams::isotropic(1, 1.0, 0.3)?;
    let trace = gp_train(&x, &y, &init, &TrainConfig::default())?;
    let hp = &trace.final_hyperparams;
    println!(
        "nll {:.3} -> {:.3}, lengthscale {:.3}, noise {:.4}",
        trace.initial_nll(),
        trace.final_nll,
        hp.lengthscale(0),
        hp.noise_std()
    );

    let gp = ExactGp::fit(&x, &y, hp)?;
    for t in [-2.0, 0.0, 1.5, 4.0] {
        let p = gp.predict(&[t])?;
        println!("f({t:+.1}) = {:+.3} ± {:.3}   (sin = {:+.3})", p.mean, p.variance.sqrt(), f64::sin(t));
    }
    Ok(())
}
