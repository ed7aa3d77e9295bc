use std::fmt;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::data::{load_csv, split, Dataset, SyntheticSpec};
use super::io::write_atomic;
use crate::embed::{train_embedding, EmbedConfig, EncodeMode};
use crate::error::{Error, Result};
use crate::gp::{gp_train, ExactGp, TrainConfig};
use crate::kernel::HyperParams;
use crate::rng::derive_seed;
use crate::ssgp::{fit_clustered_ssgp, fit_ssgp, ssgp_train};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Csv { path: PathBuf, target: Option<String> },
    Synthetic(SyntheticSpec),
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Synthetic(SyntheticSpec::default())
    }
}

impl DataSource {
    pub fn load(&self) -> Result<Dataset> {
        match self {
            DataSource::Csv { path, target } => load_csv(path, target.as_deref()),
            DataSource::Synthetic(spec) => spec.dataset(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub data: DataSource,
    /// Fraction of rows used for training.
    pub split: f64,
    pub p_values: Vec<usize>,
    pub runs: usize,
    /// Run `r` uses seed `seed + r`.
    pub seed: u64,
    pub embed: EmbedConfig,
    pub encode_mode: EncodeMode,
    pub gp: TrainConfig,
    pub ssgp: TrainConfig,
    pub init_lengthscale: f64,
    pub init_noise_std: f64,
    /// The exact GP is skipped when the training set is larger than this.
    pub full_gp_cap: usize,
    /// Record wall-clock times. Off by default so metrics files are
    /// reproducible byte for byte.
    pub timing: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            data: DataSource::default(),
            split: 0.8,
            p_values: vec![16, 32, 64],
            runs: 5,
            seed: 0,
            embed: EmbedConfig::default(),
            encode_mode: EncodeMode::DecoderReconfigured,
            gp: TrainConfig::default(),
            ssgp: TrainConfig::default(),
            init_lengthscale: 1.0,
            init_noise_std: 0.5,
            full_gp_cap: 2000,
            timing: false,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.split > 0.0 && self.split < 1.0) {
            return Err(Error::invalid(format!("split {} must lie in (0, 1)", self.split)));
        }
        if self.runs == 0 {
            return Err(Error::invalid("runs must be at least 1"));
        }
        if self.p_values.is_empty() || self.p_values.contains(&0) {
            return Err(Error::invalid("p values must be a non-empty list of positive integers"));
        }
        if !(self.init_lengthscale > 0.0 && self.init_noise_std > 0.0) {
            return Err(Error::invalid("initial hyperparameters must be positive"));
        }
        self.embed.validate()
    }

    pub fn seeds(&self) -> Vec<u64> {
        (0..self.runs as u64).map(|r| self.seed + r).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Method {
    FullGP,
    VanillaSSGP,
    RevisedSSGP,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::FullGP, Method::VanillaSSGP, Method::RevisedSSGP];
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Method::FullGP => "FullGP",
            Method::VanillaSSGP => "VanillaSSGP",
            Method::RevisedSSGP => "RevisedSSGP",
        };
        f.pad(s)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub method: Method,
    pub p: usize,
    pub seed: u64,
    pub rmse: f64,
    pub train_nll: f64,
    pub wall_time_ms: u64,
}

pub fn rmse(pred: &[f64], truth: &[f64]) -> f64 {
    let n = truth.len().max(1) as f64;
    (pred.iter().zip(truth).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / n).sqrt()
}

/// Mean and population standard deviation of the RMSE per `p` for one method.
pub fn series(records: &[MetricsRecord], method: Method) -> Vec<(usize, f64, f64)> {
    let mut ps: Vec<usize> = records.iter().filter(|r| r.method == method).map(|r| r.p).collect();
    ps.sort_unstable();
    ps.dedup();
    ps.into_iter()
        .map(|p| {
            let v: Vec<f64> = records
                .iter()
                .filter(|r| r.method == method && r.p == p)
                .map(|r| r.rmse)
                .collect();
            let mean = v.iter().sum::<f64>() / v.len() as f64;
            let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / v.len() as f64;
            (p, mean, var.sqrt())
        })
        .collect()
}

pub fn series_csv(rows: &[(usize, f64, f64)]) -> String {
    let mut s = String::from("p,mean_rmse,std_rmse\n");
    for (p, m, sd) in rows {
        s.push_str(&format!("{p},{m},{sd}\n"));
    }
    s
}

fn write_outputs(dir: &Path, records: &[MetricsRecord]) -> Result<()> {
    write_atomic(&dir.join("metrics.json"), serde_json::to_string_pretty(records)?.as_bytes())?;
    for method in Method::ALL {
        let rows = series(records, method);
        if !rows.is_empty() {
            write_atomic(&dir.join(format!("series_{method}.csv")), series_csv(&rows).as_bytes())?;
        }
    }
    Ok(())
}

struct Timer {
    start: Instant,
    on: bool,
}

impl Timer {
    fn new(on: bool) -> Self {
        Timer {
            start: Instant::now(),
            on,
        }
    }

    fn ms(&self) -> u64 {
        if self.on {
            self.start.elapsed().as_millis() as u64
        } else {
            0
        }
    }
}

/// Records for one seed: the exact GP (repeated once per `p`), then vanilla
/// and revised SSGP at each `p`.
pub fn run_seed(cfg: &ExperimentConfig, data: &Dataset, seed: u64) -> Result<Vec<MetricsRecord>> {
    let (train, test) = split(data.n(), cfg.split, seed)?;
    let (x, y) = data.rows(&train);
    let (xt, yt) = data.rows(&test);
    let init = HyperParams::isotropic(data.dim(), cfg.init_lengthscale, cfg.init_noise_std)?;
    let mut out = Vec::new();

    if x.nrows() <= cfg.full_gp_cap {
        let timer = Timer::new(cfg.timing);
        let trace = gp_train(&x, &y, &init, &cfg.gp)?;
        let gp = ExactGp::fit(&x, &y, &trace.final_hyperparams)?;
        let pred: Vec<f64> = gp.predict_many(&xt)?.iter().map(|p| p.mean).collect();
        let wall_time_ms = timer.ms();
        let score = rmse(&pred, &yt);
        for &p in &cfg.p_values {
            out.push(MetricsRecord {
                method: Method::FullGP,
                p,
                seed,
                rmse: score,
                train_nll: trace.final_nll,
                wall_time_ms,
            });
        }
    }

    for &p in &cfg.p_values {
        let timer = Timer::new(cfg.timing);
        let draw_seed = derive_seed(seed, "vanilla", p as u64);
        let trace = ssgp_train(&x, &y, &init, p, draw_seed, &cfg.ssgp)?;
        let model = fit_ssgp(&x, &y, &trace.final_hyperparams, p, draw_seed)?;
        let pred = (0..xt.nrows())
            .map(|i| model.predict_mean(&row(&xt, i)))
            .collect::<Result<Vec<_>>>()?;
        out.push(MetricsRecord {
            method: Method::VanillaSSGP,
            p,
            seed,
            rmse: rmse(&pred, &yt),
            train_nll: trace.final_nll,
            wall_time_ms: timer.ms(),
        });
    }

    let timer = Timer::new(cfg.timing);
    let embed_cfg = EmbedConfig {
        seed: derive_seed(seed, "embed", 0),
        ..cfg.embed.clone()
    };
    let (model, _) = train_embedding(&x, &embed_cfg)?;
    let latent = model.encode(&x, EncodeMode::PosteriorMean, 0)?;
    let labels = model.nearest_prior_center(&latent);
    let enc = model.encode(&x, cfg.encode_mode, seed)?;
    let enc_test = model.encode(&xt, cfg.encode_mode, seed)?;
    let embed_ms = timer.ms();
    let enc_init = HyperParams::isotropic(enc.ncols(), cfg.init_lengthscale, cfg.init_noise_std)?;
    for &p in &cfg.p_values {
        let timer = Timer::new(cfg.timing);
        let draw_seed = derive_seed(seed, "revised", p as u64);
        let (fit, trace) = fit_clustered_ssgp(&enc, &y, &labels, &enc_init, p, draw_seed, &cfg.ssgp)?;
        let pred = (0..enc_test.nrows())
            .map(|i| fit.predict(&row(&enc_test, i)).map(|g| g.mean))
            .collect::<Result<Vec<_>>>()?;
        out.push(MetricsRecord {
            method: Method::RevisedSSGP,
            p,
            seed,
            rmse: rmse(&pred, &yt),
            train_nll: trace.final_nll,
            wall_time_ms: if cfg.timing { embed_ms + timer.ms() } else { 0 },
        });
    }
    Ok(out)
}

fn row(m: &DMatrix<f64>, i: usize) -> Vec<f64> {
    m.row(i).iter().copied().collect()
}

/// Runs every seed, rewriting `metrics.json` and the series files in `out`
/// after each one so an abort leaves the finished seeds on disk.
pub fn run_experiment(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<Vec<MetricsRecord>> {
    cfg.validate()?;
    let data = cfg.data.load()?;
    let mut records = Vec::new();
    for seed in cfg.seeds() {
        records.extend(run_seed(cfg, &data, seed)?);
        if let Some(dir) = out {
            write_outputs(dir, &records)?;
        }
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn series_statistics() {
        let rec = |method, p, seed, rmse| MetricsRecord {
            method,
            p,
            seed,
            rmse,
            train_nll: 0.0,
            wall_time_ms: 0,
        };
        let records = vec![
            rec(Method::VanillaSSGP, 16, 0, 1.0),
            rec(Method::VanillaSSGP, 16, 1, 3.0),
            rec(Method::VanillaSSGP, 32, 0, 0.5),
            rec(Method::FullGP, 16, 0, 0.1),
        ];
        let s = series(&records, Method::VanillaSSGP);
        assert_eq!(s, vec![(16, 2.0, 1.0), (32, 0.5, 0.0)]);
        assert_eq!(series_csv(&s), "p,mean_rmse,std_rmse\n16,2,1\n32,0.5,0\n");
        assert!(series(&records, Method::RevisedSSGP).is_empty());
    }

    #[test]
    fn rejects_bad_config() {
        let bad = [
            ExperimentConfig { runs: 0, ..Default::default() },
            ExperimentConfig { split: 1.0, ..Default::default() },
            ExperimentConfig { p_values: vec![0], ..Default::default() },
        ];
        for cfg in bad {
            assert!(cfg.validate().is_err());
        }
    }
}
