use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use nalgebra::DMatrix;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::data::{Dataset, SyntheticSpec};
use super::experiment::{run_experiment, series, DataSource, ExperimentConfig, Method};
use super::io::write_atomic;
use super::verify::{verify_bounds_cmd, VerifyConfig};
use crate::embed::{train_embedding, EmbedConfig, EncodeMode};
use crate::error::{Error, Result};
use crate::gp::{gp_train, ExactGp, TrainConfig, TrainTrace};
use crate::kernel::HyperParams;
use crate::numerics::{sym_eigen, SymMatrix};
use crate::ssgp::{fit_ssgp, ssgp_train};

pub const SEED_ENV: &str = "SPECTRALGP_SEED";

#[derive(Debug, Parser)]
#[command(name = "spectralgp", version, about = "Exact and sparse-spectrum GP regression toolkit")]
pub struct Cli {
    /// Overrides the seed from the config file and SPECTRALGP_SEED.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// JSON config for the chosen subcommand.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate clustered synthetic data with GP-prior targets.
    GenData(GenArgs),
    /// Train and fit an exact GP.
    FitGp(FitArgs),
    /// Train and fit a sparse-spectrum GP.
    FitSsgp(FitArgs),
    /// Train the mixture-prior embedding.
    Embed(EmbedArgs),
    /// Check the approximation bounds on generated clustered data.
    VerifyBounds(VerifyArgs),
    /// Compare the exact GP, vanilla SSGP and clustered SSGP.
    Experiment(ExperimentArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long)]
    pub b: Option<usize>,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub a: Option<f64>,
    #[arg(long)]
    pub scale: Option<usize>,
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// CSV file; without it the synthetic default is used.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Target column; defaults to the last column.
    #[arg(long)]
    pub target: Option<String>,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Number of frequencies (SSGP only).
    #[arg(long)]
    pub p: Option<usize>,
    #[arg(long)]
    pub iterations: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EmbedArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub steps: Option<usize>,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[arg(long)]
    pub trials: Option<usize>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub p: Option<usize>,
    #[arg(long)]
    pub delta: Option<f64>,
}

#[derive(Debug, Args)]
pub struct ExperimentArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub runs: Option<usize>,
    /// Comma-separated feature counts.
    #[arg(long, value_delimiter = ',')]
    pub p: Option<Vec<usize>>,
}

/// Config shared by `fit-gp` and `fit-ssgp`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    pub data: DataSource,
    pub train: TrainConfig,
    pub init_lengthscale: f64,
    pub init_noise_std: f64,
    pub p: usize,
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            data: DataSource::default(),
            train: TrainConfig::default(),
            init_lengthscale: 1.0,
            init_noise_std: 0.5,
            p: 64,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmbedCmdConfig {
    pub data: DataSource,
    pub embed: EmbedConfig,
}

#[derive(Debug, PartialEq, Eq)]
pub enum Outcome {
    Success,
    CheckFailed,
}

/// 2 for anything the caller got wrong, 1 otherwise.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::InvalidArgument(_)
        | Error::InvalidDelta(_)
        | Error::InvalidLambda { .. }
        | Error::ModeInvalid(_)
        | Error::Parse { .. }
        | Error::EmptyDataset
        | Error::Json(_)
        | Error::Csv(_)
        | Error::BandOutOfRange { .. }
        | Error::InfeasibleDimension { .. }
        | Error::DimensionMismatch { .. } => 2,
        _ => 1,
    }
}

pub fn main() -> i32 {
    main_with_args(std::env::args_os())
}

pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match run(&cli) {
        Ok(Outcome::Success) => 0,
        Ok(Outcome::CheckFailed) => 1,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn load_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = fs::read_to_string(p)
                .map_err(|e| Error::invalid(format!("cannot read config {}: {e}", p.display())))?;
            Ok(serde_json::from_str(&text)?)
        }
    }
}

/// Flag, then environment, then config.
pub fn resolve_seed(flag: Option<u64>, config: u64) -> Result<u64> {
    if let Some(s) = flag {
        return Ok(s);
    }
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| Error::invalid(format!("{SEED_ENV}={v} is not an unsigned integer"))),
        Err(_) => Ok(config),
    }
}

fn data_source(args: &DataArgs, fallback: DataSource) -> DataSource {
    match &args.data {
        Some(path) => DataSource::Csv {
            path: path.clone(),
            target: args.target.clone(),
        },
        None => fallback,
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_atomic(path, serde_json::to_string_pretty(value)?.as_bytes())
}

pub fn run(cli: &Cli) -> Result<Outcome> {
    let cfg_path = cli.config.as_deref();
    let out = cli.out.as_path();
    match &cli.command {
        Command::GenData(args) => {
            let mut spec: SyntheticSpec = load_config(cfg_path)?;
            spec.b = args.b.unwrap_or(spec.b);
            spec.dim = args.dim.unwrap_or(spec.dim);
            spec.a = args.a.unwrap_or(spec.a);
            spec.scale = args.scale.unwrap_or(spec.scale);
            spec.seed = resolve_seed(cli.seed, spec.seed)?;
            gen_data(&spec, out)
        }
        Command::FitGp(args) | Command::FitSsgp(args) => {
            let mut cfg: FitConfig = load_config(cfg_path)?;
            cfg.data = data_source(&args.data, cfg.data);
            cfg.p = args.p.unwrap_or(cfg.p);
            cfg.train.iterations = args.iterations.unwrap_or(cfg.train.iterations);
            cfg.seed = resolve_seed(cli.seed, cfg.seed)?;
            if matches!(cli.command, Command::FitGp(_)) {
                fit_gp_cmd(&cfg, out)
            } else {
                fit_ssgp_cmd(&cfg, out)
            }
        }
        Command::Embed(args) => {
            let mut cfg: EmbedCmdConfig = load_config(cfg_path)?;
            cfg.data = data_source(&args.data, cfg.data);
            cfg.embed.steps = args.steps.unwrap_or(cfg.embed.steps);
            cfg.embed.seed = resolve_seed(cli.seed, cfg.embed.seed)?;
            embed_cmd(&cfg, out)
        }
        Command::VerifyBounds(args) => {
            let mut cfg: VerifyConfig = load_config(cfg_path)?;
            cfg.trials = args.trials.unwrap_or(cfg.trials);
            cfg.lambda = args.lambda.or(cfg.lambda);
            cfg.p = args.p.or(cfg.p);
            cfg.delta = args.delta.unwrap_or(cfg.delta);
            cfg.seed = resolve_seed(cli.seed, cfg.seed)?;
            let (summary, _) = verify_bounds_cmd(&cfg, Some(out))?;
            println!(
                "n={} a={:.4} lambda={:.4e} p={} success={}/{} lower={:.4} deterministic failures={} trials with skipped checks={}",
                summary.n,
                summary.a,
                summary.lambda,
                summary.p,
                summary.theorem2.successes,
                summary.theorem2.trials,
                summary.theorem2.lower_confidence,
                summary.failed_checks,
                summary.trials_with_skips
            );
            Ok(if summary.pass { Outcome::Success } else { Outcome::CheckFailed })
        }
        Command::Experiment(args) => {
            let mut cfg: ExperimentConfig = load_config(cfg_path)?;
            cfg.data = data_source(&args.data, cfg.data);
            cfg.runs = args.runs.unwrap_or(cfg.runs);
            if let Some(p) = &args.p {
                cfg.p_values = p.clone();
            }
            cfg.seed = resolve_seed(cli.seed, cfg.seed)?;
            let records = run_experiment(&cfg, Some(out))?;
            for method in Method::ALL {
                for (p, mean, sd) in series(&records, method) {
                    println!("{method:<12} p={p:<4} rmse {mean:.4} ± {sd:.4}");
                }
            }
            Ok(Outcome::Success)
        }
    }
}

pub fn gen_data(spec: &SyntheticSpec, out: &Path) -> Result<Outcome> {
    let (ds, y) = spec.generate()?;
    write_atomic(&out.join("data.csv"), ds.to_csv()?.as_bytes())?;
    write_json(&out.join("data.json"), &ds.sidecar())?;
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header: Vec<String> = (1..=ds.x.ncols()).map(|l| format!("x_{l}")).collect();
    header.push("y".into());
    w.write_record(&header)?;
    for (i, yi) in y.iter().enumerate() {
        let mut rec: Vec<String> = ds.x.row(i).iter().map(|v| v.to_string()).collect();
        rec.push(yi.to_string());
        w.write_record(&rec)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    write_atomic(&out.join("regression.csv"), &bytes)?;
    println!("wrote {} points in {} clusters to {}", ds.n(), spec.b, out.display());
    Ok(Outcome::Success)
}

#[derive(Serialize)]
struct FittedGp<'a> {
    hyperparams: &'a HyperParams,
    nll: f64,
    target_mean: f64,
    feature_names: &'a [String],
    trace: &'a TrainTrace,
}

fn predictions_csv(y: &[f64], means: &[f64], vars: &[f64]) -> String {
    let mut s = String::from("index,y,mean,variance\n");
    for i in 0..y.len() {
        s.push_str(&format!("{i},{},{},{}\n", y[i], means[i], vars[i]));
    }
    s
}

fn init_hp(cfg: &FitConfig, data: &Dataset) -> Result<HyperParams> {
    HyperParams::isotropic(data.dim(), cfg.init_lengthscale, cfg.init_noise_std)
}

pub fn fit_gp_cmd(cfg: &FitConfig, out: &Path) -> Result<Outcome> {
    let data = cfg.data.load()?;
    let trace = gp_train(&data.x, &data.y, &init_hp(cfg, &data)?, &cfg.train)?;
    let gp = ExactGp::fit(&data.x, &data.y, &trace.final_hyperparams)?;
    let post = gp.predict_many(&data.x)?;
    let means: Vec<f64> = post.iter().map(|p| p.mean).collect();
    let vars: Vec<f64> = post.iter().map(|p| p.variance).collect();
    write_json(
        &out.join("gp.json"),
        &FittedGp {
            hyperparams: gp.hyperparams(),
            nll: gp.nll(),
            target_mean: data.target_mean,
            feature_names: &data.feature_names,
            trace: &trace,
        },
    )?;
    write_atomic(&out.join("predictions.csv"), predictions_csv(&data.y, &means, &vars).as_bytes())?;
    println!("exact GP on n={}: nll {:.4}", data.n(), gp.nll());
    Ok(Outcome::Success)
}

pub fn fit_ssgp_cmd(cfg: &FitConfig, out: &Path) -> Result<Outcome> {
    if cfg.p == 0 {
        return Err(Error::invalid("p must be at least 1"));
    }
    let data = cfg.data.load()?;
    let trace = ssgp_train(&data.x, &data.y, &init_hp(cfg, &data)?, cfg.p, cfg.seed, &cfg.train)?;
    let model = fit_ssgp(&data.x, &data.y, &trace.final_hyperparams, cfg.p, cfg.seed)?;
    let mut means = Vec::with_capacity(data.n());
    let mut vars = Vec::with_capacity(data.n());
    for i in 0..data.n() {
        let xi: Vec<f64> = data.x.row(i).iter().copied().collect();
        let p = model.predict(&xi)?;
        means.push(p.mean);
        vars.push(p.variance);
    }
    write_json(&out.join("ssgp.json"), &model)?;
    write_json(&out.join("trace.json"), &trace)?;
    write_atomic(&out.join("predictions.csv"), predictions_csv(&data.y, &means, &vars).as_bytes())?;
    println!("SSGP with m={} on n={}: nll {:.4}", cfg.p, data.n(), trace.final_nll);
    Ok(Outcome::Success)
}

/// Projection of the rows of `z` onto their two leading principal axes. Axis
/// signs are fixed so the largest loading is positive.
pub fn pca_2d(z: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (n, q) = (z.nrows(), z.ncols());
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    let mean = z.row_mean();
    let mut c = z.clone();
    for mut row in c.row_iter_mut() {
        row -= &mean;
    }
    let cov = SymMatrix::from_matrix(c.transpose() * &c / n as f64)?;
    let eig = sym_eigen(&cov)?;
    let mut out = DMatrix::zeros(n, 2);
    for k in 0..2.min(q) {
        let mut axis = eig.eigenvectors.column(q - 1 - k).into_owned();
        let lead = axis.iter().copied().fold(0.0_f64, |m, v| if v.abs() > m.abs() { v } else { m });
        if lead < 0.0 {
            axis = -axis;
        }
        out.set_column(k, &(&c * axis));
    }
    Ok(out)
}

pub fn embed_cmd(cfg: &EmbedCmdConfig, out: &Path) -> Result<Outcome> {
    let data = cfg.data.load()?;
    let (model, losses) = train_embedding(&data.x, &cfg.embed)?;
    let z = model.encode(&data.x, EncodeMode::PosteriorMean, 0)?;
    let comp = model.nearest_prior_center(&z);
    let proj = pca_2d(&z)?;
    write_atomic(&out.join("checkpoint.json"), model.to_json()?.as_bytes())?;
    let mut s = String::from("pc1,pc2,component\n");
    for i in 0..proj.nrows() {
        s.push_str(&format!("{},{},{}\n", proj[(i, 0)], proj[(i, 1)], comp[i]));
    }
    write_atomic(&out.join("latent.csv"), s.as_bytes())?;
    let mut l = String::from("step,loss\n");
    for (i, v) in losses.iter().enumerate() {
        l.push_str(&format!("{i},{v}\n"));
    }
    write_atomic(&out.join("losses.csv"), l.as_bytes())?;
    println!(
        "trained {} steps, loss {:.4} -> {:.4}",
        losses.len(),
        losses.first().copied().unwrap_or(f64::NAN),
        losses.last().copied().unwrap_or(f64::NAN)
    );
    Ok(Outcome::Success)
}
