//! Clustered SSGP on generated clusters with known labels, compared with a
//! single SSGP over all points.

use spectralgp::clustergen::{generate_scaled, lambda_for_a};
use spectralgp::gp::TrainConfig;
use spectralgp::harness::data::gp_prior_draw;
use spectralgp::harness::experiment::rmse;
use spectralgp::harness::split;
use spectralgp::kernel::HyperParams;
use spectralgp::ssgp::fit_clustered_ssgp;

fn main() -> spectralgp::Result<()> {
    let (b, d, scale) = (6, 8, 10);
    let n: usize = (1..=b).map(|i| scale * i).sum();
    let theta = vec![1.0; d];
    let ds = generate_scaled(b, d, lambda_for_a(n, 0.1), &theta, scale, 3)?;
    let y = gp_prior_draw(&ds.x, &HyperParams::new(&theta, 0.1)?, 3)?;

    let (train, test) = split(ds.n(), 0.8, 0)?;
    let pick = |idx: &[usize]| {
        let x = ds.x.select_rows(idx);
        let t: Vec<f64> = idx.iter().map(|&i| y[i]).collect();
        let l: Vec<usize> = idx.iter().map(|&i| ds.labels[i]).collect();
        (x, t, l)
    };
    let (x, yt, labels) = pick(&train);
    let (xs, ys, _) = pick(&test);
    let init = HyperParams::isotropic(d, 1.0, 0.5)?;
    let single = vec![0; labels.len()];

    for p in [16, 64] {
        let mut line = format!("p={p:<3}");
        for (name, l) in [("one cluster", &single), ("true clusters", &labels)] {
            let (fit, _) = fit_clustered_ssgp(&x, &yt, l, &init, p, 1, &TrainConfig::default())?;
            let pred = (0..xs.nrows())
                .map(|i| fit.predict(&xs.row(i).iter().copied().collect::<Vec<_>>()).map(|g| g.mean))
                .collect::<spectralgp::Result<Vec<_>>>()?;
            line.push_str(&format!("  {name}: rmse {:.3}", rmse(&pred, &ys)));
        }
        println!("{line}");
    }
    Ok(())
}
