//! Mixture-of-Gaussians variational auto-encoder used to pull clusters in the
//! input apart before the clustered spectral approximation is fitted.
//!
//! Encoder and decoder are each a softmax-weighted mixture of `k` diagonal
//! Gaussians produced by small two-headed networks. The latent prior places
//! `k` components on a sphere of learnable radius. Training minimizes
//! `-elbo + alpha * aggregate_kl - beta * separation`.

pub mod tape;

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::{Adam, AdamConfig};
use crate::rng::Stream;
use tape::{Tape, Var};

const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;
const VAR_FLOOR: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmbedConfig {
    /// Mixture components in the prior, encoder and decoder.
    pub k: usize,
    pub latent_dim: usize,
    pub hidden: usize,
    pub alpha: f64,
    pub beta: f64,
    /// When true the separation term is subtracted from the loss, so
    /// training pushes prior components apart.
    pub reward_separation: bool,
    /// Spread of the widest prior component; later ones shrink by 2^(-1/4).
    pub prior_gamma: f64,
    pub init_radius: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for EmbedConfig {
    fn default() -> Self {
        EmbedConfig {
            k: 8,
            latent_dim: 4,
            hidden: 10,
            alpha: 8.0,
            beta: 1.2,
            reward_separation: true,
            prior_gamma: 0.5,
            init_radius: 2.0,
            batch_size: 64,
            steps: 300,
            learning_rate: 1e-3,
            seed: 0,
        }
    }
}

impl EmbedConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.latent_dim == 0 || self.hidden == 0 {
            return Err(Error::invalid("k, latent_dim and hidden must be positive"));
        }
        if !(self.alpha >= 0.0 && self.beta >= 0.0) {
            return Err(Error::invalid("alpha and beta must be non-negative"));
        }
        if !(self.prior_gamma > 0.0 && self.init_radius > 0.0) {
            return Err(Error::invalid("prior_gamma and init_radius must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be positive"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::invalid("learning_rate must be positive"));
        }
        Ok(())
    }
}

/// Unit directions, spreads and weights of the latent prior. The radius is a
/// trained parameter and lives in the model.
#[derive(Clone, Debug, PartialEq)]
pub struct MixturePrior {
    pub directions: DMatrix<f64>,
    pub gammas: Vec<f64>,
    pub weights: Vec<f64>,
}

impl MixturePrior {
    /// Up to `q + 1` components sit on a regular simplex; up to `2q` on the
    /// cross-polytope `±e_i`.
    pub fn new(k: usize, q: usize, gamma: f64) -> Result<Self> {
        let directions = if k == 1 {
            let mut d = DMatrix::zeros(1, q);
            d[(0, 0)] = 1.0;
            d
        } else if k <= q + 1 {
            simplex_directions(k, q)
        } else if k <= 2 * q {
            DMatrix::from_fn(k, q, |i, j| {
                if j == i / 2 {
                    if i % 2 == 0 {
                        1.0
                    } else {
                        -1.0
                    }
                } else {
                    0.0
                }
            })
        } else {
            return Err(Error::invalid(format!(
                "{k} prior components do not fit a {q}-dimensional latent space"
            )));
        };
        let gammas = (0..k).map(|i| gamma * 2f64.powf(-(i as f64) / 4.0)).collect();
        let raw: Vec<f64> = (1..=k).map(|i| 2f64.powf(i as f64 / 2.0)).collect();
        let total: f64 = raw.iter().sum();
        Ok(MixturePrior {
            directions,
            gammas,
            weights: raw.iter().map(|w| w / total).collect(),
        })
    }

    pub fn k(&self) -> usize {
        self.gammas.len()
    }

    pub fn latent_dim(&self) -> usize {
        self.directions.ncols()
    }

    pub fn centers(&self, radius: f64) -> DMatrix<f64> {
        &self.directions * radius
    }

    /// `log p(z)` for each row of `z`.
    pub fn log_density(&self, z: &DMatrix<f64>, radius: f64) -> Vec<f64> {
        let mut t = Tape::new();
        let zv = t.constant(z.clone());
        let r = t.constant(DMatrix::from_element(1, 1, radius));
        let lp = prior_log_density(&mut t, self, zv, r);
        t.value(lp).iter().copied().collect()
    }

    /// Sum of closed-form KL divergences over ordered pairs of components.
    pub fn separation_penalty(&self, radius: f64) -> f64 {
        separation_kl(&self.centers(radius), &self.gammas)
    }

    /// Constant and `radius²` coefficient of the separation penalty.
    fn separation_coefficients(&self) -> (f64, f64) {
        let q = self.latent_dim() as f64;
        let (mut constant, mut quad) = (0.0, 0.0);
        for i in 0..self.k() {
            for j in 0..self.k() {
                if i == j {
                    continue;
                }
                let (gi, gj) = (self.gammas[i].powi(2), self.gammas[j].powi(2));
                let dist = (self.directions.row(i) - self.directions.row(j)).norm_squared();
                constant += 0.5 * (q * gi / gj - q + q * (gj / gi).ln());
                quad += 0.5 * dist / gj;
            }
        }
        (constant, quad)
    }
}

fn simplex_directions(k: usize, q: usize) -> DMatrix<f64> {
    // centered standard basis of R^k, projected onto its first k-1 Helmert
    // coordinates and normalized
    let mut d = DMatrix::zeros(k, q);
    for i in 0..k {
        for j in 0..k - 1 {
            let jj = (j + 1) as f64;
            let scale = 1.0 / (jj * (jj + 1.0)).sqrt();
            d[(i, j)] = if i <= j {
                scale
            } else if i == j + 1 {
                -jj * scale
            } else {
                0.0
            };
        }
        let norm = d.row(i).norm();
        d.row_mut(i).scale_mut(1.0 / norm);
    }
    d
}

/// `Σ_{i≠j} KL(N(c_i, γ_i² I) ‖ N(c_j, γ_j² I))`.
pub fn separation_kl(centers: &DMatrix<f64>, gammas: &[f64]) -> f64 {
    let q = centers.ncols() as f64;
    let mut total = 0.0;
    for i in 0..gammas.len() {
        for j in 0..gammas.len() {
            if i == j {
                continue;
            }
            let (gi, gj) = (gammas[i].powi(2), gammas[j].powi(2));
            let dist = (centers.row(i) - centers.row(j)).norm_squared();
            total += 0.5 * (q * gi / gj + dist / gj - q + q * (gj / gi).ln());
        }
    }
    total
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct BnStats {
    mean: Vec<f64>,
    var: Vec<f64>,
}

/// Tensor slots of one two-headed Gaussian network.
#[derive(Clone, Copy, Debug)]
struct NetSlots {
    w1: usize,
    b1: usize,
    bn_scale: usize,
    bn_shift: usize,
    mean_w1: usize,
    mean_b1: usize,
    mean_w2: usize,
    mean_b2: usize,
    var_w1: usize,
    var_b1: usize,
    var_w2: usize,
    var_b2: usize,
}

#[derive(Clone, Copy, Debug)]
struct LinearSlots {
    w: usize,
    b: usize,
}

/// Encoder and decoder mixtures plus the prior radius and training state.
#[derive(Clone, Debug)]
pub struct EncoderDecoder {
    config: EmbedConfig,
    data_dim: usize,
    prior: MixturePrior,
    names: Vec<String>,
    tensors: Vec<DMatrix<f64>>,
    encoder: Vec<NetSlots>,
    encoder_mix: LinearSlots,
    decoder: Vec<NetSlots>,
    decoder_mix: LinearSlots,
    log_radius: usize,
    /// Encoder nets first, then decoder nets.
    batch_norm: Vec<BnStats>,
    optimizer: Adam,
}

struct Builder<'a> {
    names: Vec<String>,
    tensors: Vec<DMatrix<f64>>,
    stream: &'a mut Stream,
}

impl Builder<'_> {
    fn push(&mut self, name: String, m: DMatrix<f64>) -> usize {
        self.names.push(name);
        self.tensors.push(m);
        self.tensors.len() - 1
    }

    fn uniform(&mut self, rows: usize, cols: usize, bound: f64) -> DMatrix<f64> {
        let vals: Vec<f64> = (0..rows * cols)
            .map(|_| bound * (2.0 * self.stream.uniform() - 1.0))
            .collect();
        DMatrix::from_row_slice(rows, cols, &vals)
    }

    fn linear(&mut self, prefix: &str, fan_in: usize, fan_out: usize) -> LinearSlots {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let w = self.uniform(fan_in, fan_out, bound);
        let b = self.uniform(1, fan_out, bound);
        LinearSlots {
            w: self.push(format!("{prefix}.w"), w),
            b: self.push(format!("{prefix}.b"), b),
        }
    }

    fn net(&mut self, prefix: &str, input: usize, hidden: usize, output: usize) -> NetSlots {
        let first = self.linear(&format!("{prefix}.in"), input, hidden);
        let bn_scale = self.push(format!("{prefix}.bn.scale"), DMatrix::from_element(1, hidden, 1.0));
        let bn_shift = self.push(format!("{prefix}.bn.shift"), DMatrix::zeros(1, hidden));
        let m1 = self.linear(&format!("{prefix}.mean.hidden"), hidden, hidden);
        let m2 = self.linear(&format!("{prefix}.mean.out"), hidden, output);
        let v1 = self.linear(&format!("{prefix}.var.hidden"), hidden, hidden);
        let v2 = self.linear(&format!("{prefix}.var.out"), hidden, output);
        NetSlots {
            w1: first.w,
            b1: first.b,
            bn_scale,
            bn_shift,
            mean_w1: m1.w,
            mean_b1: m1.b,
            mean_w2: m2.w,
            mean_b2: m2.b,
            var_w1: v1.w,
            var_b1: v1.b,
            var_w2: v2.w,
            var_b2: v2.b,
        }
    }
}

/// One fixed stochastic draw for a batch: a standard normal per latent
/// coordinate and a uniform per row that picks the posterior component.
#[derive(Clone, Debug, PartialEq)]
pub struct Draws {
    pub normals: DMatrix<f64>,
    pub uniforms: Vec<f64>,
    /// Overrides the component picked from `uniforms`; used to hold the
    /// selection fixed while parameters move.
    pub components: Option<Vec<usize>>,
}

impl Draws {
    pub fn sample(rows: usize, latent_dim: usize, stream: &mut Stream) -> Self {
        let normals = stream.normals(rows * latent_dim);
        let uniforms = (0..rows).map(|_| stream.uniform()).collect();
        Draws {
            normals: DMatrix::from_row_slice(rows, latent_dim, &normals),
            uniforms,
            components: None,
        }
    }

    pub fn rows(&self) -> usize {
        self.uniforms.len()
    }
}

/// Scalar pieces of the augmented loss, each a batch mean.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LossParts {
    pub reconstruction: f64,
    pub kl: f64,
    pub elbo: f64,
    pub aggregate_kl: f64,
    pub separation: f64,
    pub loss: f64,
}

/// Per-row reconstruction log-likelihood and Monte Carlo KL sample.
#[derive(Clone, Debug, PartialEq)]
pub struct ElboTerms {
    pub reconstruction: Vec<f64>,
    pub kl: Vec<f64>,
}

/// Posterior mixture for a batch: weights `B×k` and per-component means and
/// variances `B×q`.
#[derive(Clone, Debug)]
pub struct Posterior {
    pub weights: DMatrix<f64>,
    pub means: Vec<DMatrix<f64>>,
    pub variances: Vec<DMatrix<f64>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum EncodeMode {
    PosteriorMean,
    PosteriorSample,
    DecoderReconfigured,
}

impl Default for EncodeMode {
    fn default() -> Self {
        EncodeMode::PosteriorMean
    }
}

impl FromStr for EncodeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "posterior-mean" | "mean" => Ok(EncodeMode::PosteriorMean),
            "posterior-sample" | "sample" => Ok(EncodeMode::PosteriorSample),
            "decoder-reconfigured" | "reconfigured" => Ok(EncodeMode::DecoderReconfigured),
            _ => Err(Error::ModeInvalid(s.to_string())),
        }
    }
}

struct Graph {
    t: Tape,
    p: Vec<Var>,
    train: bool,
    batch_stats: Vec<Option<(Vec<f64>, Vec<f64>)>>,
}

struct Forward {
    g: Graph,
    loss: Var,
    parts: LossParts,
}

fn prior_log_density(t: &mut Tape, prior: &MixturePrior, z: Var, radius: Var) -> Var {
    let rows = t.value(z).nrows();
    let q = prior.latent_dim() as f64;
    let mut comps = Vec::with_capacity(prior.k());
    for i in 0..prior.k() {
        let dir = t.constant(prior.directions.rows(i, 1).into_owned());
        let c = t.scale_by(dir, radius);
        let c = t.broadcast_rows(c, rows);
        let d = t.sub(z, c);
        let d2 = t.square(d);
        let s = t.sum_rows(d2);
        let g2 = prior.gammas[i].powi(2);
        let s = t.scale(s, -0.5 / g2);
        let offset = prior.weights[i].ln() - 0.5 * q * (2.0 * std::f64::consts::PI * g2).ln();
        comps.push(t.add_scalar(s, offset));
    }
    let all = t.concat_cols(&comps);
    t.log_sum_exp_rows(all)
}

impl EncoderDecoder {
    pub fn new(data_dim: usize, config: EmbedConfig) -> Result<Self> {
        config.validate()?;
        if data_dim == 0 {
            return Err(Error::EmptyDataset);
        }
        let prior = MixturePrior::new(config.k, config.latent_dim, config.prior_gamma)?;
        let (k, q, h) = (config.k, config.latent_dim, config.hidden);
        let mut stream = Stream::new(config.seed, "embed-init", 0);
        let mut b = Builder {
            names: Vec::new(),
            tensors: Vec::new(),
            stream: &mut stream,
        };
        let encoder = (0..k).map(|j| b.net(&format!("enc{j}"), data_dim, h, q)).collect();
        let encoder_mix = b.linear("enc_mix", data_dim, k);
        let decoder = (0..k).map(|j| b.net(&format!("dec{j}"), q, h, data_dim)).collect();
        let decoder_mix = b.linear("dec_mix", q, k);
        let log_radius = b.push(
            "prior.log_radius".into(),
            DMatrix::from_element(1, 1, config.init_radius.ln()),
        );
        let Builder { names, tensors, .. } = b;
        let count = tensors.iter().map(|m| m.len()).sum();
        let batch_norm = vec![
            BnStats {
                mean: vec![0.0; h],
                var: vec![1.0; h],
            };
            2 * k
        ];
        Ok(EncoderDecoder {
            optimizer: Adam::new(AdamConfig::with_learning_rate(config.learning_rate), count),
            config,
            data_dim,
            prior,
            names,
            tensors,
            encoder,
            encoder_mix,
            decoder,
            decoder_mix,
            log_radius,
            batch_norm,
        })
    }

    pub fn config(&self) -> &EmbedConfig {
        &self.config
    }

    pub fn data_dim(&self) -> usize {
        self.data_dim
    }

    pub fn latent_dim(&self) -> usize {
        self.config.latent_dim
    }

    pub fn prior(&self) -> &MixturePrior {
        &self.prior
    }

    pub fn radius(&self) -> f64 {
        self.tensors[self.log_radius][(0, 0)].exp()
    }

    pub fn prior_centers(&self) -> DMatrix<f64> {
        self.prior.centers(self.radius())
    }

    pub fn separation_penalty(&self) -> f64 {
        self.prior.separation_penalty(self.radius())
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors.iter().map(|m| m.len()).sum()
    }

    pub fn steps(&self) -> u64 {
        self.optimizer.steps
    }

    pub fn tensor(&self, name: &str) -> Option<&DMatrix<f64>> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut DMatrix<f64>> {
        self.names.iter().position(|n| n == name).map(|i| &mut self.tensors[i])
    }

    /// All parameters, tensor by tensor in column-major order.
    pub fn params_flat(&self) -> Vec<f64> {
        self.tensors.iter().flat_map(|m| m.iter().copied()).collect()
    }

    pub fn set_params_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.parameter_count() {
            return Err(Error::DimensionMismatch {
                expected: self.parameter_count(),
                found: flat.len(),
            });
        }
        let mut at = 0;
        for m in &mut self.tensors {
            let len = m.len();
            m.as_mut_slice().copy_from_slice(&flat[at..at + len]);
            at += len;
        }
        Ok(())
    }

    fn graph(&self, train: bool) -> Graph {
        let mut t = Tape::new();
        let p = self.tensors.iter().map(|m| t.leaf(m.clone())).collect();
        Graph {
            t,
            p,
            train,
            batch_stats: vec![None; self.batch_norm.len()],
        }
    }

    fn linear(&self, g: &mut Graph, x: Var, w: usize, b: usize) -> Var {
        let h = g.t.matmul(x, g.p[w]);
        g.t.add_row(h, g.p[b])
    }

    /// Mean and variance heads of net `slot`; `bn` indexes its batch-norm stats.
    fn net(&self, g: &mut Graph, s: &NetSlots, bn: usize, x: Var) -> (Var, Var) {
        let a = self.linear(g, x, s.w1, s.b1);
        let normed = if g.train {
            let rows = g.t.value(a).nrows();
            let mu = g.t.col_mean(a);
            let mb = g.t.broadcast_rows(mu, rows);
            let c = g.t.sub(a, mb);
            let c2 = g.t.square(c);
            let var = g.t.col_mean(c2);
            g.batch_stats[bn] = Some((
                g.t.value(mu).iter().copied().collect(),
                g.t.value(var).iter().copied().collect(),
            ));
            let v = g.t.add_scalar(var, BN_EPS);
            let sd = g.t.sqrt(v);
            let inv = g.t.recip(sd);
            g.t.mul_row(c, inv)
        } else {
            let st = &self.batch_norm[bn];
            let shift = g.t.constant(DMatrix::from_fn(1, st.mean.len(), |_, j| -st.mean[j]));
            let scale = g.t.constant(DMatrix::from_fn(1, st.var.len(), |_, j| {
                1.0 / (st.var[j] + BN_EPS).sqrt()
            }));
            let c = g.t.add_row(a, shift);
            g.t.mul_row(c, scale)
        };
        let scaled = g.t.mul_row(normed, g.p[s.bn_scale]);
        let shifted = g.t.add_row(scaled, g.p[s.bn_shift]);
        let h = g.t.relu(shifted);

        let m = self.linear(g, h, s.mean_w1, s.mean_b1);
        let m = g.t.relu(m);
        let mean = self.linear(g, m, s.mean_w2, s.mean_b2);
        let v = self.linear(g, h, s.var_w1, s.var_b1);
        let v = g.t.relu(v);
        let v = self.linear(g, v, s.var_w2, s.var_b2);
        let v = g.t.softplus(v);
        let var = g.t.add_scalar(v, VAR_FLOOR);
        (mean, var)
    }

    fn encoder_forward(&self, g: &mut Graph, x: Var) -> (Var, Vec<(Var, Var)>) {
        let logits = self.linear(g, x, self.encoder_mix.w, self.encoder_mix.b);
        let log_w = g.t.log_softmax_rows(logits);
        let comps = self
            .encoder
            .iter()
            .enumerate()
            .map(|(j, s)| self.net(g, s, j, x))
            .collect();
        (log_w, comps)
    }

    fn decoder_forward(&self, g: &mut Graph, z: Var) -> (Var, Vec<(Var, Var)>) {
        let k = self.config.k;
        let logits = self.linear(g, z, self.decoder_mix.w, self.decoder_mix.b);
        let log_v = g.t.log_softmax_rows(logits);
        let comps = self
            .decoder
            .iter()
            .enumerate()
            .map(|(j, s)| self.net(g, s, k + j, z))
            .collect();
        (log_v, comps)
    }

    /// Mixture log-density `log Σ_j exp(log_w_j + log N(x; m_j, s_j))` per row.
    fn mixture_log_density(g: &mut Graph, x: Var, log_w: Var, comps: &[(Var, Var)]) -> Var {
        let parts: Vec<Var> = comps
            .iter()
            .enumerate()
            .map(|(j, (m, s))| {
                let lw = g.t.select_col(log_w, j);
                let ld = g.t.gauss_rowwise(x, *m, *s);
                g.t.add(lw, ld)
            })
            .collect();
        let all = g.t.concat_cols(&parts);
        g.t.log_sum_exp_rows(all)
    }

    fn choose_components(&self, log_w: &DMatrix<f64>, draws: &Draws) -> Vec<usize> {
        if let Some(c) = &draws.components {
            return c.clone();
        }
        (0..log_w.nrows())
            .map(|i| {
                let mut acc = 0.0;
                for j in 0..log_w.ncols() {
                    acc += log_w[(i, j)].exp();
                    if draws.uniforms[i] < acc {
                        return j;
                    }
                }
                log_w.ncols() - 1
            })
            .collect()
    }

    /// Reparameterized draw from the chosen component of each row.
    fn sample_latent(&self, g: &mut Graph, log_w: Var, comps: &[(Var, Var)], draws: &Draws) -> Var {
        let rows = draws.rows();
        let q = self.config.latent_dim;
        let chosen = self.choose_components(g.t.value(log_w), draws);
        let eps = g.t.constant(draws.normals.clone());
        let mut z = None;
        for (j, (m, s)) in comps.iter().enumerate() {
            if !chosen.contains(&j) {
                continue;
            }
            let mask = g.t.constant(DMatrix::from_fn(rows, q, |i, _| {
                if chosen[i] == j {
                    1.0
                } else {
                    0.0
                }
            }));
            let sd = g.t.sqrt(*s);
            let noise = g.t.mul(sd, eps);
            let zj = g.t.add(*m, noise);
            let zj = g.t.mul(zj, mask);
            z = Some(match z {
                None => zj,
                Some(acc) => g.t.add(acc, zj),
            });
        }
        z.expect("at least one component is chosen")
    }

    fn check_batch(&self, batch: &DMatrix<f64>, draws: &Draws) -> Result<()> {
        if batch.nrows() == 0 {
            return Err(Error::EmptyDataset);
        }
        if batch.ncols() != self.data_dim {
            return Err(Error::DimensionMismatch {
                expected: self.data_dim,
                found: batch.ncols(),
            });
        }
        if draws.rows() != batch.nrows() || draws.normals.ncols() != self.config.latent_dim {
            return Err(Error::DimensionMismatch {
                expected: batch.nrows(),
                found: draws.rows(),
            });
        }
        if let Some(c) = &draws.components {
            if c.len() != batch.nrows() || c.iter().any(|&j| j >= self.config.k) {
                return Err(Error::invalid("component override does not match the batch"));
            }
        }
        Ok(())
    }

    /// Builds the full augmented loss on a fresh tape in training mode.
    fn forward(&self, batch: &DMatrix<f64>, draws: &Draws) -> Result<Forward> {
        self.check_batch(batch, draws)?;
        let rows = batch.nrows();
        let mut g = self.graph(true);
        let x = g.t.constant(batch.clone());
        let (log_w, comps) = self.encoder_forward(&mut g, x);
        let z = self.sample_latent(&mut g, log_w, &comps, draws);

        let log_q = Self::mixture_log_density(&mut g, z, log_w, &comps);
        let radius = g.t.exp(g.p[self.log_radius]);
        let log_p = prior_log_density(&mut g.t, &self.prior, z, radius);
        let (log_v, dec) = self.decoder_forward(&mut g, z);
        let rec = Self::mixture_log_density(&mut g, x, log_v, &dec);

        let kl_rows = g.t.sub(log_q, log_p);
        let elbo_rows = g.t.sub(rec, kl_rows);
        let elbo = g.t.mean_all(elbo_rows);

        // aggregate posterior: every z_i scored against every q(.|x_j)
        let pairs: Vec<Var> = comps
            .iter()
            .enumerate()
            .map(|(c, (m, s))| {
                let lp = g.t.gauss_pairwise(z, *m, *s);
                let lw = g.t.select_col(log_w, c);
                let lw = g.t.transpose(lw);
                let lw = g.t.broadcast_rows(lw, rows);
                g.t.add(lp, lw)
            })
            .collect();
        let all = g.t.concat_cols(&pairs);
        let log_agg = g.t.log_sum_exp_rows(all);
        let log_agg = g.t.add_scalar(log_agg, -(rows as f64).ln());
        let agg_rows = g.t.sub(log_agg, log_p);
        let agg = g.t.mean_all(agg_rows);

        let (constant, quad) = self.prior.separation_coefficients();
        let r2 = g.t.square(radius);
        let sep = g.t.scale(r2, quad);
        let sep = g.t.add_scalar(sep, constant);

        let neg_elbo = g.t.scale(elbo, -1.0);
        let agg_term = g.t.scale(agg, self.config.alpha);
        let sign = if self.config.reward_separation { -1.0 } else { 1.0 };
        let sep_term = g.t.scale(sep, sign * self.config.beta);
        let loss = g.t.add(neg_elbo, agg_term);
        let loss = g.t.add(loss, sep_term);

        let mean = |v: Var, t: &Tape| t.value(v).mean();
        let parts = LossParts {
            reconstruction: mean(rec, &g.t),
            kl: mean(kl_rows, &g.t),
            elbo: g.t.scalar(elbo),
            aggregate_kl: g.t.scalar(agg),
            separation: g.t.scalar(sep),
            loss: g.t.scalar(loss),
        };
        if !parts.loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                step: self.steps() as usize,
                losses: vec![parts.loss],
            });
        }
        Ok(Forward { g, loss, parts })
    }

    pub fn loss_parts(&self, batch: &DMatrix<f64>, draws: &Draws) -> Result<LossParts> {
        Ok(self.forward(batch, draws)?.parts)
    }

    /// Loss pieces and the gradient of the total loss in `params_flat` order.
    pub fn loss_and_gradient(&self, batch: &DMatrix<f64>, draws: &Draws) -> Result<(LossParts, Vec<f64>)> {
        let (parts, grad, _) = self.loss_gradient_stats(batch, draws)?;
        Ok((parts, grad))
    }

    #[allow(clippy::type_complexity)]
    fn loss_gradient_stats(
        &self,
        batch: &DMatrix<f64>,
        draws: &Draws,
    ) -> Result<(LossParts, Vec<f64>, Vec<Option<(Vec<f64>, Vec<f64>)>>)> {
        let f = self.forward(batch, draws)?;
        let grads = f.g.t.backward(f.loss);
        let mut flat = Vec::with_capacity(self.parameter_count());
        for (leaf, m) in f.g.p.iter().zip(&self.tensors) {
            match &grads[leaf.id()] {
                Some(g) => flat.extend(g.iter().copied()),
                None => flat.extend(std::iter::repeat_n(0.0, m.len())),
            }
        }
        Ok((f.parts, flat, f.g.batch_stats))
    }

    /// Per-row reconstruction and KL samples behind the ELBO.
    pub fn elbo_terms(&self, batch: &DMatrix<f64>, draws: &Draws) -> Result<ElboTerms> {
        self.check_batch(batch, draws)?;
        let mut g = self.graph(true);
        let x = g.t.constant(batch.clone());
        let (log_w, comps) = self.encoder_forward(&mut g, x);
        let z = self.sample_latent(&mut g, log_w, &comps, draws);
        let log_q = Self::mixture_log_density(&mut g, z, log_w, &comps);
        let radius = g.t.exp(g.p[self.log_radius]);
        let log_p = prior_log_density(&mut g.t, &self.prior, z, radius);
        let (log_v, dec) = self.decoder_forward(&mut g, z);
        let rec = Self::mixture_log_density(&mut g, x, log_v, &dec);
        let kl = g.t.sub(log_q, log_p);
        Ok(ElboTerms {
            reconstruction: g.t.value(rec).iter().copied().collect(),
            kl: g.t.value(kl).iter().copied().collect(),
        })
    }

    /// Posterior mixture parameters; `train` selects batch statistics over
    /// running statistics in the batch-norm layers.
    pub fn posterior(&self, x: &DMatrix<f64>, train: bool) -> Result<Posterior> {
        if x.ncols() != self.data_dim {
            return Err(Error::DimensionMismatch {
                expected: self.data_dim,
                found: x.ncols(),
            });
        }
        let mut g = self.graph(train);
        let xv = g.t.constant(x.clone());
        let (log_w, comps) = self.encoder_forward(&mut g, xv);
        Ok(Posterior {
            weights: g.t.value(log_w).map(f64::exp),
            means: comps.iter().map(|(m, _)| g.t.value(*m).clone()).collect(),
            variances: comps.iter().map(|(_, s)| g.t.value(*s).clone()).collect(),
        })
    }

    /// Training-mode output of the first batch-norm layer of encoder net `j`,
    /// before its learned scale and shift.
    pub fn encoder_batch_norm_output(&self, x: &DMatrix<f64>, j: usize) -> DMatrix<f64> {
        let mut g = self.graph(true);
        let xv = g.t.constant(x.clone());
        let s = self.encoder[j];
        let a = self.linear(&mut g, xv, s.w1, s.b1);
        let rows = x.nrows();
        let mu = g.t.col_mean(a);
        let mb = g.t.broadcast_rows(mu, rows);
        let c = g.t.sub(a, mb);
        let c2 = g.t.square(c);
        let var = g.t.col_mean(c2);
        let v = g.t.add_scalar(var, BN_EPS);
        let sd = g.t.sqrt(v);
        let inv = g.t.recip(sd);
        let out = g.t.mul_row(c, inv);
        g.t.value(out).clone()
    }

    /// Latent (or reconfigured data-space) coordinates with batch-norm in
    /// evaluation mode. `seed` only matters for `PosteriorSample`.
    pub fn encode(&self, x: &DMatrix<f64>, mode: EncodeMode, seed: u64) -> Result<DMatrix<f64>> {
        let post = self.posterior(x, false)?;
        let rows = x.nrows();
        let q = self.config.latent_dim;
        let mean = posterior_mean(&post);
        match mode {
            EncodeMode::PosteriorMean => Ok(mean),
            EncodeMode::PosteriorSample => {
                let mut stream = Stream::new(seed, "encode-sample", 0);
                let draws = Draws::sample(rows, q, &mut stream);
                let log_w = post.weights.map(f64::ln);
                let chosen = self.choose_components(&log_w, &draws);
                Ok(DMatrix::from_fn(rows, q, |i, l| {
                    let c = chosen[i];
                    post.means[c][(i, l)] + post.variances[c][(i, l)].sqrt() * draws.normals[(i, l)]
                }))
            }
            EncodeMode::DecoderReconfigured => {
                let mut g = self.graph(false);
                let z = g.t.constant(mean);
                let (log_v, comps) = self.decoder_forward(&mut g, z);
                let weights = g.t.value(log_v).map(f64::exp);
                let mut out = DMatrix::zeros(rows, self.data_dim);
                for (j, (m, _)) in comps.iter().enumerate() {
                    let mv = g.t.value(*m);
                    for i in 0..rows {
                        for l in 0..self.data_dim {
                            out[(i, l)] += weights[(i, j)] * mv[(i, l)];
                        }
                    }
                }
                Ok(out)
            }
        }
    }

    /// Index of the nearest prior center for each row of latent `z`.
    pub fn nearest_prior_center(&self, z: &DMatrix<f64>) -> Vec<usize> {
        let centers = self.prior_centers();
        (0..z.nrows())
            .map(|i| {
                (0..centers.nrows())
                    .map(|c| (c, (z.row(i) - centers.row(c)).norm_squared()))
                    .fold((0, f64::INFINITY), |best, cur| if cur.1 < best.1 { cur } else { best })
                    .0
            })
            .collect()
    }

    fn update_running(&mut self, stats: &[Option<(Vec<f64>, Vec<f64>)>], rows: usize) {
        let unbias = if rows > 1 {
            rows as f64 / (rows as f64 - 1.0)
        } else {
            1.0
        };
        for (bn, s) in self.batch_norm.iter_mut().zip(stats) {
            let Some((mean, var)) = s else { continue };
            for j in 0..mean.len() {
                bn.mean[j] = (1.0 - BN_MOMENTUM) * bn.mean[j] + BN_MOMENTUM * mean[j];
                bn.var[j] = (1.0 - BN_MOMENTUM) * bn.var[j] + BN_MOMENTUM * var[j] * unbias;
            }
        }
    }

    /// One Adam step on `batch`; returns the loss before the update.
    pub fn train_step(&mut self, batch: &DMatrix<f64>, draws: &Draws) -> Result<LossParts> {
        let (parts, grad, stats) = self.loss_gradient_stats(batch, draws)?;
        let mut flat = self.params_flat();
        self.optimizer.step(&mut flat, &grad, None);
        self.set_params_flat(&flat)?;
        self.update_running(&stats, batch.nrows());
        Ok(parts)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            data_dim: self.data_dim,
            tensors: self
                .names
                .iter()
                .zip(&self.tensors)
                .map(|(n, m)| {
                    let rows = (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect();
                    (n.clone(), rows)
                })
                .collect(),
            batch_norm: self.batch_norm.clone(),
            step: self.optimizer.steps,
            optimizer: self.optimizer.clone(),
        }
    }

    pub fn from_checkpoint(cp: Checkpoint) -> Result<Self> {
        let mut model = EncoderDecoder::new(cp.data_dim, cp.config)?;
        for (name, slot) in model.names.iter().zip(model.tensors.iter_mut()) {
            let rows = cp
                .tensors
                .get(name)
                .ok_or_else(|| Error::invalid(format!("checkpoint is missing tensor `{name}`")))?;
            if rows.len() != slot.nrows() || rows.iter().any(|r| r.len() != slot.ncols()) {
                return Err(Error::invalid(format!("tensor `{name}` has the wrong shape")));
            }
            *slot = DMatrix::from_fn(slot.nrows(), slot.ncols(), |i, j| rows[i][j]);
        }
        if cp.tensors.len() != model.names.len() {
            return Err(Error::invalid("checkpoint has unexpected tensors"));
        }
        if cp.batch_norm.len() != model.batch_norm.len() {
            return Err(Error::invalid("checkpoint batch-norm statistics do not match"));
        }
        if cp.optimizer.first_moment.len() != model.parameter_count()
            || cp.optimizer.steps != cp.step
        {
            return Err(Error::invalid("checkpoint optimizer state does not match"));
        }
        model.batch_norm = cp.batch_norm;
        model.optimizer = cp.optimizer;
        Ok(model)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&self.to_checkpoint())?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Self::from_checkpoint(serde_json::from_str(s)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// True when every tensor, statistic and optimizer moment is bitwise equal.
    pub fn same_state(&self, other: &EncoderDecoder) -> bool {
        self.to_checkpoint() == other.to_checkpoint()
    }
}

/// Mixture-weighted posterior mean `Σ_j w_j μ_j`.
pub fn posterior_mean(post: &Posterior) -> DMatrix<f64> {
    let (rows, q) = post.means[0].shape();
    DMatrix::from_fn(rows, q, |i, l| {
        post.means
            .iter()
            .enumerate()
            .map(|(j, m)| post.weights[(i, j)] * m[(i, l)])
            .sum()
    })
}

/// Serialized model: tensors as row-major nested arrays keyed by name.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config: EmbedConfig,
    pub data_dim: usize,
    pub tensors: BTreeMap<String, Vec<Vec<f64>>>,
    batch_norm: Vec<BnStats>,
    pub step: u64,
    optimizer: Adam,
}

pub fn elbo(model: &EncoderDecoder, batch: &DMatrix<f64>, draws: &Draws) -> Result<f64> {
    let t = model.elbo_terms(batch, draws)?;
    let n = t.reconstruction.len() as f64;
    let v = t.reconstruction.iter().zip(&t.kl).map(|(r, k)| r - k).sum::<f64>() / n;
    if !v.is_finite() {
        return Err(Error::NonFiniteLoss {
            step: model.steps() as usize,
            losses: vec![v],
        });
    }
    Ok(v)
}

pub fn aggregate_kl_penalty(model: &EncoderDecoder, batch: &DMatrix<f64>, draws: &Draws) -> Result<f64> {
    Ok(model.loss_parts(batch, draws)?.aggregate_kl)
}

pub fn separation_penalty(prior: &MixturePrior, radius: f64) -> f64 {
    prior.separation_penalty(radius)
}

pub fn augmented_loss(model: &EncoderDecoder, batch: &DMatrix<f64>, draws: &Draws) -> Result<f64> {
    Ok(model.loss_parts(batch, draws)?.loss)
}

/// Trains a fresh model on `data` (rows are observations, already
/// standardized). Returns the model and the per-step minibatch loss.
pub fn train_embedding(data: &DMatrix<f64>, cfg: &EmbedConfig) -> Result<(EncoderDecoder, Vec<f64>)> {
    let mut model = EncoderDecoder::new(data.ncols(), cfg.clone())?;
    let losses = continue_training(&mut model, data, cfg.steps)?;
    Ok((model, losses))
}

/// Runs `steps` more Adam steps. Minibatches walk seeded permutations of the
/// rows; each step's draw has its own stream.
pub fn continue_training(model: &mut EncoderDecoder, data: &DMatrix<f64>, steps: usize) -> Result<Vec<f64>> {
    let n = data.nrows();
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    let seed = model.config.seed;
    let batch = model.config.batch_size.min(n);
    let q = model.config.latent_dim;
    let mut losses = Vec::with_capacity(steps);
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut epoch = 0;
    for _ in 0..steps {
        if cursor + batch > order.len() {
            order = Stream::new(seed, "embed-epoch", epoch).permutation(n);
            epoch += 1;
            cursor = 0;
        }
        let idx = &order[cursor..cursor + batch];
        cursor += batch;
        let x = DMatrix::from_fn(batch, data.ncols(), |i, j| data[(idx[i], j)]);
        let step = model.steps();
        let draws = Draws::sample(batch, q, &mut Stream::new(seed, "embed-draw", step));
        match model.train_step(&x, &draws) {
            Ok(parts) => losses.push(parts.loss),
            Err(Error::NonFiniteLoss { step, losses: last }) => {
                losses.extend(last);
                return Err(Error::NonFiniteLoss { step, losses });
            }
            Err(e) => return Err(e),
        }
    }
    Ok(losses)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::fd_gradient;

    fn toy(n: usize, d: usize, seed: u64) -> DMatrix<f64> {
        let mut s = Stream::new(seed, "toy", 0);
        DMatrix::from_fn(n, d, |i, _| if i % 2 == 0 { 2.0 } else { -2.0 } + 0.5 * s.normal())
    }

    fn tiny() -> EmbedConfig {
        EmbedConfig {
            k: 1,
            latent_dim: 1,
            hidden: 1,
            ..Default::default()
        }
    }

    #[test]
    fn separation_closed_form() {
        let centers = DMatrix::from_row_slice(2, 4, &[0.0, 0.0, 0.0, 0.0, 2.0, 0.0, 0.0, 0.0]);
        assert!((separation_kl(&centers, &[1.0, 1.0]) - 4.0).abs() < 1e-12);
        assert_eq!(separation_kl(&centers.rows(0, 1).into_owned(), &[1.0]), 0.0);
        let same = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        assert_eq!(separation_kl(&same, &[0.7, 0.7]), 0.0);
        let p = MixturePrior::new(8, 4, 0.5).unwrap();
        let (c, q) = p.separation_coefficients();
        assert!((c + q * 9.0 - p.separation_penalty(3.0)).abs() < 1e-9);
    }

    #[test]
    fn prior_geometry() {
        for (k, q) in [(8, 4), (5, 4), (3, 4), (1, 2)] {
            let p = MixturePrior::new(k, q, 0.5).unwrap();
            let c = p.centers(2.5);
            for i in 0..k {
                assert!((c.row(i).norm() - 2.5).abs() < 1e-12);
            }
            assert!((p.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let simplex = MixturePrior::new(5, 4, 0.5).unwrap();
        let d01 = (simplex.directions.row(0) - simplex.directions.row(1)).norm();
        let d34 = (simplex.directions.row(3) - simplex.directions.row(4)).norm();
        assert!((d01 - d34).abs() < 1e-12);
        assert!(MixturePrior::new(9, 4, 0.5).is_err());
    }

    #[test]
    fn prior_density_integrates_per_component() {
        // 1-d single component: trapezoid rule over a wide grid
        let p = MixturePrior::new(1, 1, 0.5).unwrap();
        let grid: Vec<f64> = (0..4001).map(|i| -8.0 + 16.0 * i as f64 / 4000.0).collect();
        let z = DMatrix::from_column_slice(grid.len(), 1, &grid);
        let dens = p.log_density(&z, 1.5);
        let h = 16.0 / 4000.0;
        let integral: f64 = dens.iter().map(|l| l.exp() * h).sum();
        assert!((integral - 1.0).abs() < 1e-6);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for cfg in [
            tiny(),
            EmbedConfig {
                k: 2,
                latent_dim: 1,
                hidden: 2,
                ..Default::default()
            },
        ] {
            let x = toy(6, 1, 3);
            let model = EncoderDecoder::new(1, cfg).unwrap();
            let mut draws = Draws::sample(6, model.latent_dim(), &mut Stream::new(1, "t", 0));
            let post = model.posterior(&x, true).unwrap();
            draws.components = Some(model.choose_components(&post.weights.map(f64::ln), &draws));
            let (_, g) = model.loss_and_gradient(&x, &draws).unwrap();
            let p0 = model.params_flat();
            let f = |p: &[f64]| {
                let mut m = model.clone();
                m.set_params_flat(p).unwrap();
                m.loss_parts(&x, &draws).unwrap().loss
            };
            let fd = fd_gradient(f, &p0, None).unwrap();
            let num: f64 = g.iter().zip(&fd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let den: f64 = fd.iter().map(|b| b * b).sum::<f64>().sqrt();
            assert!(num / den < 1e-4, "relative gradient error {}", num / den);
        }
    }

    #[test]
    fn alpha_beta_zero_reduces_to_negative_elbo() {
        let x = toy(8, 2, 0);
        let cfg = EmbedConfig {
            alpha: 0.0,
            beta: 0.0,
            k: 3,
            ..Default::default()
        };
        let model = EncoderDecoder::new(2, cfg).unwrap();
        let draws = Draws::sample(8, 4, &mut Stream::new(2, "t", 0));
        let parts = model.loss_parts(&x, &draws).unwrap();
        assert_eq!(parts.loss, -parts.elbo);
        assert!((elbo(&model, &x, &draws).unwrap() - parts.elbo).abs() < 1e-12);
    }

    #[test]
    fn larger_beta_lowers_loss() {
        let x = toy(8, 2, 0);
        let draws = Draws::sample(8, 4, &mut Stream::new(2, "t", 0));
        let loss = |beta| {
            let cfg = EmbedConfig { beta, ..Default::default() };
            augmented_loss(&EncoderDecoder::new(2, cfg).unwrap(), &x, &draws).unwrap()
        };
        assert!(loss(2.0) < loss(1.2));
    }

    #[test]
    fn duplicated_batch_gives_same_aggregate() {
        let cfg = EmbedConfig::default();
        let model = EncoderDecoder::new(2, cfg).unwrap();
        let one = DMatrix::from_row_slice(1, 2, &[0.3, -0.7]);
        let two = DMatrix::from_row_slice(2, 2, &[0.3, -0.7, 0.3, -0.7]);
        let d1 = Draws::sample(1, 4, &mut Stream::new(5, "t", 0));
        let d2 = Draws {
            normals: DMatrix::from_fn(2, 4, |_, j| d1.normals[(0, j)]),
            uniforms: vec![d1.uniforms[0]; 2],
            components: None,
        };
        let a = aggregate_kl_penalty(&model, &one, &d1).unwrap();
        let b = aggregate_kl_penalty(&model, &two, &d2).unwrap();
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }

    /// Points the single encoder component at `mean` with variance `var`
    /// regardless of input.
    fn pin_posterior(model: &mut EncoderDecoder, mean: f64, var: f64) {
        for head in ["mean", "var"] {
            model.tensor_mut(&format!("enc0.{head}.out.w")).unwrap().fill(0.0);
        }
        model.tensor_mut("enc0.mean.out.b").unwrap().fill(mean);
        // inverse softplus of the target minus the floor
        let raw = ((var - VAR_FLOOR).exp() - 1.0).ln();
        model.tensor_mut("enc0.var.out.b").unwrap().fill(raw);
    }

    #[test]
    fn monte_carlo_kl_matches_closed_form() {
        let cfg = EmbedConfig {
            k: 1,
            latent_dim: 2,
            ..Default::default()
        };
        let mut model = EncoderDecoder::new(1, cfg).unwrap();
        pin_posterior(&mut model, 0.4, 0.2);
        let n = 10_000;
        let x = DMatrix::from_element(n, 1, 0.1);
        let draws = Draws::sample(n, 2, &mut Stream::new(9, "t", 0));
        let kl = model.elbo_terms(&x, &draws).unwrap().kl;
        let mean = kl.iter().sum::<f64>() / n as f64;
        let sd = (kl.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
        let se = sd / (n as f64).sqrt();

        let c = model.prior_centers();
        let g2 = model.prior().gammas[0].powi(2);
        let exact: f64 = (0..2)
            .map(|l| 0.5 * (0.2 / g2 + (c[(0, l)] - 0.4).powi(2) / g2 - 1.0 + (g2 / 0.2).ln()))
            .sum();
        assert!((mean - exact).abs() <= 3.0 * se, "{mean} vs {exact} (se {se})");
        assert!(mean >= -3.0 * se);
    }

    #[test]
    fn kl_vanishes_when_posterior_is_prior() {
        let cfg = EmbedConfig {
            k: 1,
            latent_dim: 2,
            ..Default::default()
        };
        let mut model = EncoderDecoder::new(1, cfg).unwrap();
        let g2 = model.prior().gammas[0].powi(2);
        let c = model.prior_centers();
        pin_posterior(&mut model, 0.0, g2);
        model.tensor_mut("enc0.mean.out.b").unwrap().copy_from(&c);
        let n = 64;
        let x = toy(n, 1, 4);
        let draws = Draws::sample(n, 2, &mut Stream::new(3, "t", 0));
        let terms = model.elbo_terms(&x, &draws).unwrap();
        assert!(terms.kl.iter().all(|v| v.abs() < 1e-9));
        let agg = aggregate_kl_penalty(&model, &x, &draws).unwrap();
        assert!(agg.abs() < 1e-9);

        // pushing every posterior far away makes the aggregate penalty large
        model.tensor_mut("enc0.mean.out.b").unwrap().fill(40.0);
        assert!(aggregate_kl_penalty(&model, &x, &draws).unwrap() > 100.0);
    }

    #[test]
    fn batch_norm_standardizes() {
        let x = toy(50, 3, 8);
        let model = EncoderDecoder::new(3, EmbedConfig::default()).unwrap();
        let out = model.encoder_batch_norm_output(&x, 2);
        for j in 0..out.ncols() {
            let c = out.column(j);
            let mean = c.mean();
            let var = c.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c.len() as f64;
            assert!(mean.abs() < 1e-6);
            assert!((var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn variances_positive() {
        let x = toy(20, 3, 1) * 50.0;
        let model = EncoderDecoder::new(3, EmbedConfig::default()).unwrap();
        let post = model.posterior(&x, false).unwrap();
        assert!(post.variances.iter().all(|v| v.iter().all(|&s| s > 0.0)));
    }

    #[test]
    fn zero_steps_keep_initialization() {
        let x = toy(30, 2, 0);
        let cfg = EmbedConfig { steps: 0, ..Default::default() };
        let (model, losses) = train_embedding(&x, &cfg).unwrap();
        assert!(losses.is_empty());
        assert!(model.same_state(&EncoderDecoder::new(2, cfg).unwrap()));
    }

    #[test]
    fn training_is_deterministic_and_round_trips() {
        let x = toy(40, 2, 0);
        let cfg = EmbedConfig {
            steps: 5,
            batch_size: 16,
            ..Default::default()
        };
        let (a, la) = train_embedding(&x, &cfg).unwrap();
        let (b, lb) = train_embedding(&x, &cfg).unwrap();
        assert_eq!(la, lb);
        assert_eq!(a.params_flat(), b.params_flat());
        assert_eq!(a.steps(), 5);
        let back = EncoderDecoder::from_json(&a.to_json().unwrap()).unwrap();
        assert!(back.same_state(&a));
        let r0 = a.radius();
        assert!(a.prior_centers().row_iter().all(|c| (c.norm() - r0).abs() < 1e-12));
    }

    #[test]
    fn encode_modes() {
        let x = toy(10, 3, 0);
        let model = EncoderDecoder::new(3, EmbedConfig::default()).unwrap();
        let a = model.encode(&x, EncodeMode::PosteriorMean, 0).unwrap();
        assert_eq!(a, model.encode(&x, EncodeMode::PosteriorMean, 0).unwrap());
        assert_eq!(a.shape(), (10, 4));
        let s1 = model.encode(&x, EncodeMode::PosteriorSample, 4).unwrap();
        assert_eq!(s1, model.encode(&x, EncodeMode::PosteriorSample, 4).unwrap());
        assert_ne!(s1, model.encode(&x, EncodeMode::PosteriorSample, 5).unwrap());
        let r = model.encode(&x, EncodeMode::DecoderReconfigured, 0).unwrap();
        assert_eq!(r.shape(), (10, 3));
        assert!(matches!("bogus".parse::<EncodeMode>(), Err(Error::ModeInvalid(_))));
        assert_eq!("decoder_reconfigured".parse::<EncodeMode>().unwrap(), EncodeMode::DecoderReconfigured);
    }
}
