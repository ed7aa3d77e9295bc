//! A reduced version of the full comparison: exact GP, vanilla SSGP and the
//! clustered SSGP on the embedding, two runs on synthetic data.

use spectralgp::harness::experiment::{series, DataSource};
use spectralgp::harness::{run_experiment, ExperimentConfig, Method};

fn main() -> spectralgp::Result<()> {
    let mut cfg = ExperimentConfig {
        runs: 2,
        p_values: vec![16, 64],
        ..Default::default()
    };
    if let DataSource::Synthetic(spec) = &mut cfg.data {
        spec.scale = 5;
    }
    let out = std::env::temp_dir().join("spectralgp-experiment");
    let records = run_experiment(&cfg, Some(&out))?;
    for method in Method::ALL {
        for (p, mean, sd) in series(&records, method) {
            println!("{method:<12} p={p:<3} rmse {mean:.4} ± {sd:.4}");
        }
    }
    println!("metrics written to {}", out.display());
    Ok(())
}
