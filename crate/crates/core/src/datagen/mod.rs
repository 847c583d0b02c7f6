//! Dataset generators, external-data loaders, splitting and persistence.

mod adult;
mod cmnist;
mod container;
mod regression;

pub use adult::{
    load_adult_csv, parse_adult_line, resample_adult_confounded, AdultEncoder, AdultLoad, AdultRecord, AdultSplit,
};
pub use cmnist::{load_mnist_idx, make_cmnist, make_cmnist_bits, parse_idx_images, parse_idx_labels, CmnistBits, MnistRaw};
pub use container::{read_dataset, write_csv, write_dataset};
pub use regression::RegressionSem;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Tensor;
use crate::loss::Targets;
use crate::rng::{self, stream};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },
    #[error("invalid parameter: {0}")]
    Config(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("rejection sampling for r = {r} accepted {accepted} of {candidates} candidates (rate below 1e-4)")]
    Resampling { r: f64, accepted: usize, candidates: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Ground-truth metadata kept alongside generated rows.
#[derive(Clone, Debug, PartialEq)]
pub enum Oracle {
    /// Coloured digits: noise-free shape label Ỹ and colour C per row.
    Color { shape: Vec<usize>, color: Vec<usize> },
    /// Sensitive attributes of census records.
    Subgroup { black: Vec<bool>, male: Vec<bool> },
    /// Regression SEM: unscrambled features, generating `r`, environment
    /// index and the noise-free signal `f(X_c)`.
    Sem {
        x_c: Tensor,
        x_v: Tensor,
        r: Vec<f64>,
        env: Vec<usize>,
        n_envs: usize,
        signal: Vec<f64>,
    },
}

impl Oracle {
    fn select(&self, rows: &[usize]) -> Oracle {
        let pick = |v: &[usize]| rows.iter().map(|&r| v[r]).collect::<Vec<_>>();
        match self {
            Oracle::Color { shape, color } => Oracle::Color {
                shape: pick(shape),
                color: pick(color),
            },
            Oracle::Subgroup { black, male } => Oracle::Subgroup {
                black: rows.iter().map(|&r| black[r]).collect(),
                male: rows.iter().map(|&r| male[r]).collect(),
            },
            Oracle::Sem {
                x_c,
                x_v,
                r,
                env,
                n_envs,
                signal,
            } => Oracle::Sem {
                x_c: x_c.select_rows(rows),
                x_v: x_v.select_rows(rows),
                r: rows.iter().map(|&i| r[i]).collect(),
                env: pick(env),
                n_envs: *n_envs,
                signal: rows.iter().map(|&i| signal[i]).collect(),
            },
        }
    }
}

/// Generator name, parameters and seed: enough to regenerate the rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub generator: String,
    pub params: serde_json::Value,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    /// `N × d`
    pub x: Tensor,
    pub targets: Targets,
    pub oracle: Option<Oracle>,
    pub provenance: Provenance,
}

impl LabeledDataset {
    pub fn new(x: Tensor, targets: Targets, oracle: Option<Oracle>, provenance: Provenance) -> Result<Self, DataError> {
        if !x.is_matrix() || x.rows() != targets.len() {
            return Err(DataError::Input(format!(
                "feature shape {:?} does not match {} targets",
                x.shape(),
                targets.len()
            )));
        }
        if let Targets::Classes { labels, n_classes } = &targets {
            if let Some(&bad) = labels.iter().find(|&&y| y >= *n_classes) {
                return Err(DataError::Input(format!("label {bad} outside {n_classes} classes")));
            }
        }
        Ok(Self {
            x,
            targets,
            oracle,
            provenance,
        })
    }

    pub fn n(&self) -> usize {
        self.x.rows()
    }

    pub fn d(&self) -> usize {
        self.x.cols()
    }

    pub fn select(&self, rows: &[usize]) -> LabeledDataset {
        LabeledDataset {
            x: self.x.select_rows(rows),
            targets: self.targets.select(rows),
            oracle: self.oracle.as_ref().map(|o| o.select(rows)),
            provenance: self.provenance.clone(),
        }
    }
}

/// Uniform random split into `(train, validation)` with `⌊N·fraction⌋`
/// validation rows; both keep the original row order.
pub fn split_validation(
    ds: &LabeledDataset,
    fraction: f64,
    seed: u64,
) -> Result<(LabeledDataset, LabeledDataset), DataError> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(DataError::Config(format!("validation fraction {fraction} outside (0, 1)")));
    }
    let n = ds.n();
    let n_val = (n as f64 * fraction).floor() as usize;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng::seeded(seed, stream::SPLIT));
    let mut val = idx[..n_val].to_vec();
    let mut train = idx[n_val..].to_vec();
    val.sort_unstable();
    train.sort_unstable();
    Ok((ds.select(&train), ds.select(&val)))
}

fn check_probability(name: &str, p: f64) -> Result<(), DataError> {
    if (0.0..=1.0).contains(&p) {
        Ok(())
    } else {
        Err(DataError::Config(format!("{name} = {p} is not a probability")))
    }
}

/// Splits `n` rows into `parts` contiguous blocks of (nearly) equal size.
fn block_of(i: usize, n: usize, parts: usize) -> usize {
    (i * parts) / n.max(1)
}
