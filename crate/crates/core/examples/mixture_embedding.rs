//! Train the mixture-prior embedding on two Gaussian blobs and show how far
//! apart the two blobs end up in latent space.

use nalgebra::DMatrix;
use spectralgp::embed::{train_embedding, EmbedConfig, EncodeMode};
use spectralgp::rng::Stream;

fn main() -> spectralgp::Result<()> {
    let mut s = Stream::new(0, "blobs", 0);
    let n = 400;
    let x = DMatrix::from_fn(n, 2, |i, j| if j == 0 { if i % 2 == 0 { -1.5 } else { 1.5 } } else { 0.0 } + 0.5 * s.normal());

    let cfg = EmbedConfig::default();
    let (model, losses) = train_embedding(&x, &cfg)?;
    println!("loss {:.2} -> {:.2} over {} steps, prior radius {:.3}", losses[0], losses[losses.len() - 1], losses.len(), model.radius());

    let z = model.encode(&x, EncodeMode::PosteriorMean, 0)?;
    let centroid = |parity: usize| -> Vec<f64> {
        (0..z.ncols())
            .map(|j| (0..n).filter(|i| i % 2 == parity).map(|i| z[(i, j)]).sum::<f64>() / (n / 2) as f64)
            .collect()
    };
    let (a, b) = (centroid(0), centroid(1));
    let dist = a.iter().zip(&b).map(|(u, v)| (u - v).powi(2)).sum::<f64>().sqrt();
    println!("latent centroid distance {dist:.3}");

    let labels = model.nearest_prior_center(&z);
    let mut counts = vec![[0usize; 2]; cfg.k];
    for (i, &l) in labels.iter().enumerate() {
        counts[l][i % 2] += 1;
    }
    for (c, [left, right]) in counts.iter().enumerate().filter(|(_, c)| c[0] + c[1] > 0) {
        println!("prior component {c}: {left} left-blob points, {right} right-blob points");
    }
    Ok(())
}
