//! Load a CSV with a categorical column, then fit an SSGP on the
//! standardized features.

use spectralgp::gp::TrainConfig;
use spectralgp::harness::experiment::rmse;
use spectralgp::harness::{load_csv, split};
use spectralgp::kernel::HyperParams;
use spectralgp::rng::Stream;
use spectralgp::ssgp::{fit_ssgp, ssgp_train};

fn main() -> spectralgp::Result<()> {
    let dir = tempfile::tempdir()?;
    let path = dir.path().join("shells.csv");
    let mut s = Stream::new(0, "shells", 0);
    let mut text = String::from("sex,length,diameter,weight,rings\n");
    for _ in 0..200 {
        let sex = ["F", "I", "M"][s.below(3)];
        let length = 0.2 + 0.5 * s.uniform();
        let diameter = 0.8 * length + 0.02 * s.normal();
        let weight = length.powi(3) * 4.0 + 0.05 * s.normal();
        let rings = 3.0 + 20.0 * length + if sex == "I" { -2.0 } else { 0.0 } + s.normal();
        text.push_str(&format!("{sex},{length:.4},{diameter:.4},{weight:.4},{rings:.1}\n"));
    }
    std::fs::write(&path, text)?;

    let data = load_csv(&path, Some("rings"))?;
    println!("features: {:?}", data.feature_names);
    let (train, test) = split(data.n(), 0.8, 0)?;
    let (x, y) = data.rows(&train);
    let (xt, yt) = data.rows(&test);

    let init = HyperParams::isotropic(data.dim(), 1.0, 0.5)?;
    let trace = ssgp_train(&x, &y, &init, 32, 1, &TrainConfig::default())?;
    let model = fit_ssgp(&x, &y, &trace.final_hyperparams, 32, 1)?;
    let pred = (0..xt.nrows())
        .map(|i| model.predict_mean(&xt.row(i).iter().copied().collect::<Vec<_>>()))
        .collect::<spectralgp::Result<Vec<_>>>()?;
    println!("test rmse {:.3} rings (target sd {:.3})", rmse(&pred, &yt), {
        let m = yt.iter().sum::<f64>() / yt.len() as f64;
        (yt.iter().map(|v| (v - m).powi(2)).sum::<f64>() / yt.len() as f64).sqrt()
    });
    Ok(())
}
