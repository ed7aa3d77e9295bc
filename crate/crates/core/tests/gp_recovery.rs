mod common;

use common::gp_data;
use spectralgp::gp::{gp_train, ExactGp, TrainConfig};
use spectralgp::kernel::HyperParams;
use spectralgp::ssgp::{fit_ssgp, ssgp_train};

#[test]
fn exact_gp_recovers_generating_hyperparameters() {
    let (x, y) = gp_data(300, 1, 0.7, 0.2, 3);
    let init = HyperParams::isotropic(1, 2.0, 0.6).unwrap();
    let cfg = TrainConfig {
        learning_rate: 0.05,
        iterations: 400,
        ..Default::default()
    };
    let trace = gp_train(&x, &y, &init, &cfg).unwrap();
    let hp = &trace.final_hyperparams;
    assert!(trace.final_nll < trace.initial_nll());
    assert!((hp.lengthscale(0) / 0.7 - 1.0).abs() < 0.25, "lengthscale {}", hp.lengthscale(0));
    assert!((hp.noise_std() / 0.2 - 1.0).abs() < 0.2, "noise {}", hp.noise_std());
}

#[test]
fn ssgp_approaches_exact_mean_with_more_features() {
    let (x, y) = gp_data(120, 2, 1.0, 0.1, 9);
    let hp = HyperParams::isotropic(2, 1.0, 0.1).unwrap();
    let gp = ExactGp::fit(&x, &y, &hp).unwrap();
    let test = common::uniform_points(30, 2, 9, "probe");
    let gap = |m: usize| {
        let model = fit_ssgp(&x, &y, &hp, m, 1).unwrap();
        (0..test.nrows())
            .map(|i| {
                let t: Vec<f64> = test.row(i).iter().copied().collect();
                (model.predict_mean(&t).unwrap() - gp.predict(&t).unwrap().mean).powi(2)
            })
            .sum::<f64>()
    };
    assert!(gap(1000) < gap(10));
}

#[test]
fn ssgp_training_lowers_nll() {
    let (x, y) = gp_data(80, 2, 0.8, 0.2, 4);
    let init = HyperParams::isotropic(2, 2.0, 0.8).unwrap();
    let trace = ssgp_train(&x, &y, &init, 32, 5, &TrainConfig::default()).unwrap();
    assert!(trace.final_nll < trace.initial_nll());
}
