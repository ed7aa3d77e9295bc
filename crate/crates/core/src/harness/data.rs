use std::collections::BTreeSet;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::clustergen::{generate_scaled, lambda_for_a, LabeledDataset};
use crate::error::{Error, Result};
use crate::kernel::{gram, HyperParams};
use crate::numerics::CholeskyFactor;
use crate::rng::Stream;

/// Regression inputs ready for fitting: standardized features and a
/// centered target.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub x: DMatrix<f64>,
    pub y: Vec<f64>,
    pub feature_names: Vec<String>,
    pub target_name: String,
    /// Mean removed from the raw target.
    pub target_mean: f64,
    /// Ground-truth cluster of each row, when known.
    pub labels: Option<Vec<usize>>,
}

impl Dataset {
    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn dim(&self) -> usize {
        self.x.ncols()
    }

    pub fn rows(&self, idx: &[usize]) -> (DMatrix<f64>, Vec<f64>) {
        let x = DMatrix::from_fn(idx.len(), self.dim(), |i, j| self.x[(idx[i], j)]);
        (x, idx.iter().map(|&i| self.y[i]).collect())
    }

    /// CSV with the feature columns followed by the centered target.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = self.feature_names.clone();
        header.push(self.target_name.clone());
        w.write_record(&header)?;
        for i in 0..self.n() {
            let mut rec: Vec<String> = self.x.row(i).iter().map(|v| v.to_string()).collect();
            rec.push(self.y[i].to_string());
            w.write_record(&rec)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::invalid(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::invalid(e.to_string()))
    }
}

/// Columns standardized in place to mean 0 and population standard
/// deviation 1. Constant columns are only centered.
pub fn standardize_columns(x: &mut DMatrix<f64>) {
    let n = x.nrows() as f64;
    for mut col in x.column_iter_mut() {
        let mean = col.sum() / n;
        let sd = (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        let scale = if sd > 0.0 { 1.0 / sd } else { 1.0 };
        col.apply(|v| *v = (*v - mean) * scale);
    }
}

fn parse_cell(s: &str) -> Option<f64> {
    s.trim().parse::<f64>().ok().filter(|v| v.is_finite())
}

/// Reads a headered CSV. `target` names the response column and defaults to
/// the last one. Columns with no numeric cell at all are treated as
/// categorical and one-hot encoded by sorted category, dropping the first
/// category. A non-numeric cell in any other column is a parse error; rows
/// and columns in the error are 1-based with the header as row 1.
pub fn load_csv(path: &Path, target: Option<&str>) -> Result<Dataset> {
    let text = std::fs::read_to_string(path)?;
    parse_csv(&text, target)
}

pub fn parse_csv(text: &str, target: Option<&str>) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
    let header: Vec<String> = reader.headers()?.iter().map(|h| h.trim().to_string()).collect();
    if header.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut cells: Vec<Vec<String>> = Vec::new();
    for (r, rec) in reader.records().enumerate() {
        let rec = rec?;
        if rec.len() != header.len() {
            return Err(Error::Parse {
                row: r + 2,
                column: rec.len().min(header.len()) + 1,
                message: format!("expected {} fields, found {}", header.len(), rec.len()),
            });
        }
        cells.push(rec.iter().map(|c| c.trim().to_string()).collect());
    }
    if cells.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let target_col = match target {
        None => header.len() - 1,
        Some(name) => header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::invalid(format!("no column named `{name}`")))?,
    };
    if header.len() < 2 {
        return Err(Error::invalid("need at least one feature column besides the target"));
    }

    let numeric_error = |col: usize| -> Option<Error> {
        cells.iter().enumerate().find_map(|(r, row)| {
            parse_cell(&row[col]).is_none().then(|| Error::Parse {
                row: r + 2,
                column: col + 1,
                message: format!("`{}` is not a number", row[col]),
            })
        })
    };

    let mut columns: Vec<Vec<f64>> = Vec::new();
    let mut names = Vec::new();
    for (c, name) in header.iter().enumerate() {
        if c == target_col {
            continue;
        }
        let categorical = cells.iter().all(|row| parse_cell(&row[c]).is_none());
        if categorical {
            let cats: BTreeSet<&str> = cells.iter().map(|row| row[c].as_str()).collect();
            for cat in cats.iter().skip(1) {
                columns.push(
                    cells
                        .iter()
                        .map(|row| if row[c] == *cat { 1.0 } else { 0.0 })
                        .collect(),
                );
                names.push(format!("{name}={cat}"));
            }
        } else {
            if let Some(e) = numeric_error(c) {
                return Err(e);
            }
            columns.push(cells.iter().map(|row| parse_cell(&row[c]).unwrap()).collect());
            names.push(name.clone());
        }
    }
    if let Some(e) = numeric_error(target_col) {
        return Err(e);
    }
    if columns.is_empty() {
        return Err(Error::invalid("no feature columns left after encoding"));
    }
    let raw_y: Vec<f64> = cells.iter().map(|row| parse_cell(&row[target_col]).unwrap()).collect();
    let n = raw_y.len();
    let mut x = DMatrix::from_fn(n, columns.len(), |i, j| columns[j][i]);
    standardize_columns(&mut x);
    let target_mean = raw_y.iter().sum::<f64>() / n as f64;
    Ok(Dataset {
        x,
        y: raw_y.iter().map(|v| v - target_mean).collect(),
        feature_names: names,
        target_name: header[target_col].clone(),
        target_mean,
        labels: None,
    })
}

/// Seeded train/test partition; the train share is rounded and kept within
/// `1..n`.
pub fn split(n: usize, train_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::invalid(format!("split {train_fraction} must lie in (0, 1)")));
    }
    if n < 2 {
        return Err(Error::invalid("need at least two rows to split"));
    }
    let perm = Stream::new(seed, "split", 0).permutation(n);
    let n_train = ((train_fraction * n as f64).round() as usize).clamp(1, n - 1);
    let mut train = perm[..n_train].to_vec();
    let mut test = perm[n_train..].to_vec();
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

/// Clustered inputs with targets drawn from the exact GP prior at the
/// generating lengthscales.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub b: usize,
    pub dim: usize,
    pub a: f64,
    /// Copies of each cluster's base population.
    pub scale: usize,
    pub lengthscale: f64,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            b: 6,
            dim: 8,
            // well below 1 so clusters sit several lengthscales apart; at a = 1
            // neighbouring clusters are still strongly correlated
            a: 0.1,
            scale: 10,
            lengthscale: 1.0,
            noise_std: 0.1,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn base_n(&self) -> usize {
        (1..=self.b).map(|i| self.scale * crate::clustergen::cluster_size(i)).sum()
    }

    pub fn lambda(&self) -> f64 {
        lambda_for_a(self.base_n(), self.a)
    }

    pub fn generate(&self) -> Result<(LabeledDataset, Vec<f64>)> {
        let theta = vec![self.lengthscale; self.dim];
        let ds = generate_scaled(self.b, self.dim, self.lambda(), &theta, self.scale, self.seed)?;
        let y = gp_prior_draw(&ds.x, &HyperParams::new(&theta, self.noise_std)?, self.seed)?;
        Ok((ds, y))
    }

    /// Standardized, centered dataset with the true labels attached.
    pub fn dataset(&self) -> Result<Dataset> {
        let (ds, y) = self.generate()?;
        let mut x = ds.x.clone();
        standardize_columns(&mut x);
        let mean = y.iter().sum::<f64>() / y.len() as f64;
        Ok(Dataset {
            x,
            y: y.iter().map(|v| v - mean).collect(),
            feature_names: (1..=self.dim).map(|l| format!("x_{l}")).collect(),
            target_name: "y".into(),
            target_mean: mean,
            labels: Some(ds.labels),
        })
    }
}

/// `f ~ N(0, K)` plus independent noise of standard deviation `hp.noise_std()`.
pub fn gp_prior_draw(x: &DMatrix<f64>, hp: &HyperParams, seed: u64) -> Result<Vec<f64>> {
    let k = gram(x, hp)?;
    // a little diagonal keeps near-duplicate points factorizable
    let chol = CholeskyFactor::new(&k.add_diagonal(1e-8))?;
    let n = x.nrows();
    let mut s = Stream::new(seed, "gp-draw", 0);
    let z = nalgebra::DVector::from_vec(s.normals(n));
    let f = chol.lower() * z;
    let noise = s.normals(n);
    Ok((0..n).map(|i| f[i] + hp.noise_std() * noise[i]).collect())
}
