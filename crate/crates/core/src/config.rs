//! Experiment configuration: a strict JSON document covering data, models,
//! optimisation and the seeds to run.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datagen::{
    load_adult_csv, load_mnist_idx, make_cmnist, make_cmnist_bits, resample_adult_confounded, split_validation,
    AdultEncoder, AdultSplit, CmnistBits, DataError, LabeledDataset, RegressionSem,
};
use crate::envinfer::EIConfig;
use crate::invlearn::ILConfig;
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Ednil,
    Erm,
    IrmOracle,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Ednil => "ednil",
            Method::Erm => "erm",
            Method::IrmOracle => "irm-oracle",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "ednil" => Ok(Method::Ednil),
            "erm" => Ok(Method::Erm),
            "irm-oracle" => Ok(Method::IrmOracle),
            other => Err(format!("unknown method {other:?} (expected ednil, erm or irm-oracle)")),
        }
    }
}

/// A named test environment built from `(r, count)` SEM components.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SemTestEnv {
    pub name: String,
    pub envs: Vec<(f64, usize)>,
}

fn default_cmnist_tests() -> Vec<f64> {
    vec![0.1, 0.5, 0.9]
}

fn default_train_noise() -> Vec<f64> {
    vec![0.1, 0.2]
}

fn default_label_noise() -> f64 {
    0.2
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "generator", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DatasetConfig {
    CmnistBits {
        #[serde(default = "CmnistBitsDefaults::n")]
        n: usize,
        #[serde(default = "default_label_noise")]
        label_noise: f64,
        #[serde(default = "default_train_noise")]
        train_color_noise: Vec<f64>,
        #[serde(default = "default_cmnist_tests")]
        test_color_noise: Vec<f64>,
        #[serde(default = "CmnistBitsDefaults::n_test")]
        n_test: usize,
        #[serde(default = "CmnistBitsDefaults::dim_c")]
        dim_c: usize,
        #[serde(default = "CmnistBitsDefaults::dim")]
        dim_v: usize,
        #[serde(default = "CmnistBitsDefaults::noise_sd")]
        noise_sd: f64,
        #[serde(default = "CmnistBitsDefaults::shape_mean")]
        shape_mean: f64,
        #[serde(default = "CmnistBitsDefaults::color_mean")]
        color_mean: f64,
    },
    Cmnist {
        mnist_dir: PathBuf,
        /// Rows taken from the start of the training file.
        #[serde(default = "CmnistDefaults::n_train")]
        n_train: usize,
        #[serde(default = "default_label_noise")]
        label_noise: f64,
        #[serde(default = "default_train_noise")]
        train_color_noise: Vec<f64>,
        #[serde(default = "default_cmnist_tests")]
        test_color_noise: Vec<f64>,
    },
    Adult {
        data_dir: PathBuf,
    },
    Regression {
        #[serde(default = "SemDefaults::d")]
        d_c: usize,
        #[serde(default = "SemDefaults::d")]
        d_v: usize,
        #[serde(default = "SemDefaults::noise_sd")]
        noise_sd: f64,
        #[serde(default = "SemDefaults::train")]
        train_envs: Vec<(f64, usize)>,
        #[serde(default = "SemDefaults::tests")]
        test_envs: Vec<SemTestEnv>,
    },
}

struct CmnistBitsDefaults;
impl CmnistBitsDefaults {
    fn n() -> usize {
        10_000
    }
    fn n_test() -> usize {
        5_000
    }
    fn dim_c() -> usize {
        CmnistBits::default().dim_c
    }
    fn dim() -> usize {
        CmnistBits::default().dim_v
    }
    fn noise_sd() -> f64 {
        CmnistBits::default().noise_sd
    }
    fn shape_mean() -> f64 {
        CmnistBits::default().shape_mean
    }
    fn color_mean() -> f64 {
        CmnistBits::default().color_mean
    }
}

struct CmnistDefaults;
impl CmnistDefaults {
    fn n_train() -> usize {
        50_000
    }
}

struct SemDefaults;
impl SemDefaults {
    fn d() -> usize {
        5
    }
    fn noise_sd() -> f64 {
        1.0
    }
    fn train() -> Vec<(f64, usize)> {
        vec![(2.3, 1000), (-1.1, 100)]
    }
    fn tests() -> Vec<SemTestEnv> {
        let mut out = vec![
            SemTestEnv {
                name: "iid".into(),
                envs: vec![(2.3, 1000), (-1.1, 100)],
            },
            SemTestEnv {
                name: "ood".into(),
                envs: vec![(-2.5, 1000)],
            },
        ];
        out.extend([-2.9, -2.7, -2.5, -2.3, -2.1, -1.9].iter().map(|&r| SemTestEnv {
            name: format!("stab{r}"),
            envs: vec![(r, 1000)],
        }));
        out
    }
}

impl DatasetConfig {
    pub fn cmnist_bits() -> Self {
        DatasetConfig::CmnistBits {
            n: CmnistBitsDefaults::n(),
            label_noise: default_label_noise(),
            train_color_noise: default_train_noise(),
            test_color_noise: default_cmnist_tests(),
            n_test: CmnistBitsDefaults::n_test(),
            dim_c: CmnistBitsDefaults::dim_c(),
            dim_v: CmnistBitsDefaults::dim(),
            noise_sd: CmnistBitsDefaults::noise_sd(),
            shape_mean: CmnistBitsDefaults::shape_mean(),
            color_mean: CmnistBitsDefaults::color_mean(),
        }
    }

    pub fn regression() -> Self {
        DatasetConfig::Regression {
            d_c: SemDefaults::d(),
            d_v: SemDefaults::d(),
            noise_sd: SemDefaults::noise_sd(),
            train_envs: SemDefaults::train(),
            test_envs: SemDefaults::tests(),
        }
    }

    pub fn generator(&self) -> &'static str {
        match self {
            DatasetConfig::CmnistBits { .. } => "cmnist-bits",
            DatasetConfig::Cmnist { .. } => "cmnist",
            DatasetConfig::Adult { .. } => "adult",
            DatasetConfig::Regression { .. } => "regression",
        }
    }
}

/// Training pool, in-distribution validation rows and named test sets.
#[derive(Clone, Debug)]
pub struct Splits {
    pub train: LabeledDataset,
    pub val: LabeledDataset,
    pub tests: Vec<(String, LabeledDataset)>,
}

fn require_file(dir: &Path, names: &[&str]) -> Result<PathBuf, DataError> {
    names
        .iter()
        .map(|n| dir.join(n))
        .find(|p| p.exists())
        .ok_or_else(|| {
            DataError::Config(format!(
                "external data required: none of {names:?} found in {}",
                dir.display()
            ))
        })
}

/// Generates (or loads) every split for one seed. Test sets draw from
/// seeds derived from the run seed so they never coincide with the training
/// rows.
pub fn build_splits(cfg: &DatasetConfig, seed: u64, validation_fraction: f64) -> Result<Splits, DataError> {
    let (pool, tests) = match cfg {
        DatasetConfig::CmnistBits {
            n,
            label_noise,
            train_color_noise,
            test_color_noise,
            n_test,
            dim_c,
            dim_v,
            noise_sd,
            shape_mean,
            color_mean,
        } => {
            let base = CmnistBits {
                n: *n,
                label_noise: *label_noise,
                color_noise: train_color_noise.clone(),
                dim_c: *dim_c,
                dim_v: *dim_v,
                noise_sd: *noise_sd,
                shape_mean: *shape_mean,
                color_mean: *color_mean,
            };
            let pool = make_cmnist_bits(&base, seed)?;
            let tests = test_color_noise
                .iter()
                .enumerate()
                .map(|(j, &e)| {
                    let p = CmnistBits {
                        n: *n_test,
                        color_noise: vec![e],
                        ..base.clone()
                    };
                    Ok((format!("e={e}"), make_cmnist_bits(&p, rng::derive(seed, j as u64 + 1))?))
                })
                .collect::<Result<Vec<_>, DataError>>()?;
            (pool, tests)
        }
        DatasetConfig::Cmnist {
            mnist_dir,
            n_train,
            label_noise,
            train_color_noise,
            test_color_noise,
        } => {
            let train_raw = load_mnist_idx(
                &require_file(mnist_dir, &["train-images-idx3-ubyte", "train-images.idx3-ubyte"])?,
                &require_file(mnist_dir, &["train-labels-idx1-ubyte", "train-labels.idx1-ubyte"])?,
            )?;
            let test_raw = load_mnist_idx(
                &require_file(mnist_dir, &["t10k-images-idx3-ubyte", "t10k-images.idx3-ubyte"])?,
                &require_file(mnist_dir, &["t10k-labels-idx1-ubyte", "t10k-labels.idx1-ubyte"])?,
            )?;
            let take = (*n_train).min(train_raw.len());
            let pool = make_cmnist(&train_raw.slice(0..take), *label_noise, train_color_noise, seed)?;
            let tests = test_color_noise
                .iter()
                .enumerate()
                .map(|(j, &e)| Ok((format!("e={e}"), make_cmnist(&test_raw, *label_noise, &[e], rng::derive(seed, j as u64 + 1))?)))
                .collect::<Result<Vec<_>, DataError>>()?;
            (pool, tests)
        }
        DatasetConfig::Adult { data_dir } => {
            let train_recs = load_adult_csv(&require_file(data_dir, &["adult.data"])?)?.records;
            let test_recs = load_adult_csv(&require_file(data_dir, &["adult.test"])?)?.records;
            let enc = AdultEncoder::fit(&train_recs)?;
            let pool = resample_adult_confounded(&train_recs, &enc, AdultSplit::TRAIN, seed)?;
            let tests = [("iid", AdultSplit::IID), ("ind", AdultSplit::IND), ("ood", AdultSplit::OOD)]
                .iter()
                .enumerate()
                .map(|(j, &(name, split))| {
                    Ok((name.to_string(), resample_adult_confounded(&test_recs, &enc, split, rng::derive(seed, j as u64 + 1))?))
                })
                .collect::<Result<Vec<_>, DataError>>()?;
            (pool, tests)
        }
        DatasetConfig::Regression {
            d_c,
            d_v,
            noise_sd,
            train_envs,
            test_envs,
        } => {
            let sem = RegressionSem::new(*d_c, *d_v, *noise_sd, seed)?;
            let pool = sem.sample(train_envs, seed)?;
            let tests = test_envs
                .iter()
                .enumerate()
                .map(|(j, t)| Ok((t.name.clone(), sem.sample(&t.envs, rng::derive(seed, j as u64 + 1))?)))
                .collect::<Result<Vec<_>, DataError>>()?;
            (pool, tests)
        }
    };
    let (train, val) = split_validation(&pool, validation_fraction, seed)?;
    Ok(Splits { train, val, tests })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Hidden widths of the shared encoder Ψ; the last one is its output.
    pub psi_hidden: Vec<usize>,
    pub head_hidden: Vec<usize>,
    pub head_init_scale: f64,
    pub phi_hidden: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            psi_hidden: vec![32],
            head_hidden: vec![],
            head_init_scale: 0.01,
            phi_hidden: vec![32],
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum BatchPolicy {
    #[default]
    FullBatch,
    MiniBatch {
        size: usize,
    },
}

/// Switches that remove parts of the environment-inference objective.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Ablation {
    pub no_label_independence: bool,
    pub no_invariance_preserving: bool,
    pub k: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlanConfig {
    pub rounds: usize,
    /// Environment-inference plus invariant-learning steps over all rounds,
    /// excluding pre-training.
    pub total_steps: usize,
    pub batch: BatchPolicy,
    pub validation_fraction: f64,
    pub ablation: Ablation,
}

impl Default for PlanConfig {
    fn default() -> Self {
        Self {
            rounds: 5,
            total_steps: 1000,
            batch: BatchPolicy::FullBatch,
            validation_fraction: 0.1,
            ablation: Ablation::default(),
        }
    }
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

fn default_output() -> PathBuf {
    PathBuf::from("runs")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub ei: EIConfig,
    #[serde(default)]
    pub il: ILConfig,
    #[serde(default)]
    pub plan: PlanConfig,
    #[serde(default = "default_method")]
    pub method: Method,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
}

fn default_method() -> Method {
    Method::Ednil
}

impl ExperimentConfig {
    pub fn new(dataset: DatasetConfig) -> Self {
        Self {
            dataset,
            model: ModelConfig::default(),
            ei: EIConfig::default(),
            il: ILConfig::default(),
            plan: PlanConfig::default(),
            method: Method::Ednil,
            output_dir: default_output(),
            seeds: default_seeds(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn load(path: &Path) -> Result<Self, DataError> {
        Ok(Self::from_json(&std::fs::read_to_string(path)?)?)
    }

    /// Compact JSON with keys sorted at every level.
    pub fn canonical_json(&self) -> String {
        let value = serde_json::to_value(self).expect("config serialises");
        serde_json::to_string(&value).expect("value serialises")
    }

    /// SHA-256 of the canonical JSON, hex encoded. The seed list and output
    /// directory are left out: every run records its own seed, and moving
    /// the output does not change results.
    pub fn hash(&self) -> String {
        let mut value = serde_json::to_value(self).expect("config serialises");
        if let serde_json::Value::Object(map) = &mut value {
            map.remove("seeds");
            map.remove("output_dir");
        }
        let text = serde_json::to_string(&value).expect("value serialises");
        hex::encode(Sha256::digest(text.as_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected() {
        let ok = r#"{"dataset": {"generator": "cmnist-bits", "n": 100}}"#;
        assert!(ExperimentConfig::from_json(ok).is_ok());
        let bad = r#"{"dataset": {"generator": "cmnist-bits"}, "lamda": 3}"#;
        assert!(ExperimentConfig::from_json(bad).is_err());
        let bad = r#"{"dataset": {"generator": "cmnist-bits", "colour": 1}}"#;
        assert!(ExperimentConfig::from_json(bad).is_err());
        let bad = r#"{"dataset": {"generator": "cmnist-bits"}, "ei": {"tau": 0.1, "betta": 1}}"#;
        assert!(ExperimentConfig::from_json(bad).is_err());
    }

    #[test]
    fn hash_ignores_key_order_seeds_and_output() {
        let a = ExperimentConfig::from_json(r#"{"dataset": {"generator": "cmnist-bits", "n": 100}, "seeds": [1]}"#).unwrap();
        let b = ExperimentConfig::from_json(r#"{"seeds": [1], "dataset": {"n": 100, "generator": "cmnist-bits"}}"#).unwrap();
        assert_eq!(a.hash(), b.hash());
        let c = ExperimentConfig::from_json(r#"{"seeds": [1], "dataset": {"n": 101, "generator": "cmnist-bits"}}"#).unwrap();
        assert_ne!(a.hash(), c.hash());
        let d = ExperimentConfig::from_json(r#"{"seeds": [2, 3], "output_dir": "x", "dataset": {"n": 100, "generator": "cmnist-bits"}}"#).unwrap();
        assert_eq!(a.hash(), d.hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn missing_external_data_is_explicit() {
        let cfg = DatasetConfig::Adult {
            data_dir: PathBuf::from("/nonexistent"),
        };
        let err = build_splits(&cfg, 0, 0.1).unwrap_err().to_string();
        assert!(err.contains("external data required"), "{err}");
    }

    #[test]
    fn bits_splits_have_expected_sizes() {
        let cfg = DatasetConfig::CmnistBits {
            n: 1000,
            label_noise: 0.2,
            train_color_noise: vec![0.1, 0.2],
            test_color_noise: vec![0.1, 0.9],
            n_test: 200,
            dim_c: 2,
            dim_v: 2,
            noise_sd: 1.0,
            shape_mean: 1.0,
            color_mean: 1.0,
        };
        let s = build_splits(&cfg, 3, 0.1).unwrap();
        assert_eq!((s.train.n(), s.val.n()), (900, 100));
        assert_eq!(s.tests.len(), 2);
        assert_eq!(s.tests[1].0, "e=0.9");
    }
}
