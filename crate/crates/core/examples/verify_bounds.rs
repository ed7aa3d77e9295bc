//! Run the bound checks for one approximate Gram matrix and print each verdict.

use nalgebra::DMatrix;
use spectralgp::bounds::deterministic_report;
use spectralgp::harness::{verify_bounds_cmd, VerifyConfig};
use spectralgp::kernel::HyperParams;
use spectralgp::rng::Stream;
use spectralgp::ssgp::averaged_gram;

fn main() -> spectralgp::Result<()> {
    let mut s = Stream::new(1, "points", 0);
    let x = DMatrix::from_fn(30, 2, |_, _| 2.0 * s.normal());
    let y: Vec<f64> = (0..30).map(|i| (x[(i, 0)] - x[(i, 1)]).cos()).collect();
    let test = DMatrix::from_fn(5, 2, |_, _| s.normal());
    let hp = HyperParams::isotropic(2, 1.0, 1.2)?;

    let approx = averaged_gram(&x, &hp, 2000, 9)?;
    let report = deterministic_report(&x, &y, &hp, &approx, 0.5, &test)?;
    println!("spectral distance {:.4}, frobenius {:.4}", report.spectral_distance, report.frobenius_distance);
    for c in &report.checks {
        println!("  {:<32} {}  slack {:+.3e}", c.name, if c.pass { "ok" } else { "VIOLATED" }, c.slack);
    }
    for why in &report.skipped {
        println!("  skipped: {why}");
    }

    // the whole pipeline on generated clusters
    let cfg = VerifyConfig { trials: 20, ..Default::default() };
    let (summary, _) = verify_bounds_cmd(&cfg, None)?;
    println!(
        "generated clusters: {}/{} trials within λ, lower bound {:.3}, pass {}",
        summary.theorem2.successes, summary.theorem2.trials, summary.theorem2.lower_confidence, summary.pass
    );
    Ok(())
}
