//! Generate clustered data and report whether it satisfies the separation,
//! band and population conditions.

use spectralgp::clustergen::{check_conditions, generate, lambda_for_a, required_samples};

fn main() -> spectralgp::Result<()> {
    let (b, d) = (5, 64);
    let n = 16;
    let lambda = lambda_for_a(n, 1.0);
    let ds = generate(b, d, lambda, &vec![1.0; d], 7)?;
    let r = check_conditions(&ds, lambda)?;
    println!("n={} a={:.4} gammas {:?}", ds.n(), r.a, ds.spec.gammas.iter().map(|g| (g * 1e3).round() / 1e3).collect::<Vec<_>>());
    println!("separation ok: {}", r.separation_pass);
    println!("band membership: {:.1}%", 100.0 * r.band_fraction);
    println!("populations ok: {}", r.population_pass);
    println!("largest off-cluster entry {:.4} (ceiling {:.4})", r.max_off_cluster, r.off_cluster_ceiling);
    println!("entries above the diagonal threshold: {} (diagonal only: {})", r.above_diagonal_threshold, r.diagonal_only);
    println!("features per cluster for δ = 0.2: {}", required_samples(b, &ds.band_sizes(), lambda, 0.2, ds.a)?);
    Ok(())
}
