use serde::{Deserialize, Serialize};

use super::{DiagnosticResult, EngineError, EnvMetric, MetricKind, RoundLog, ValidationScore};
use crate::config::{ExperimentConfig, Method};
use crate::datagen::LabeledDataset;
use crate::invlearn::{build_oracle_envs, EnvWeights};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RunStatus {
    Completed,
    Diverged,
}

/// Environments the invariant learner was trained on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvSummary {
    /// `learned`, `pooled` or `oracle`.
    pub kind: String,
    pub sizes: Vec<usize>,
    pub confidences: Vec<f64>,
    pub weights: Vec<f64>,
}

impl EnvSummary {
    pub(crate) fn pooled_or_oracle(method: Method, train: &LabeledDataset) -> Result<Self, EngineError> {
        if method == Method::IrmOracle {
            let (env, k) = build_oracle_envs(train)?;
            let sizes = crate::envinfer::env_sizes(&env, k);
            let w = EnvWeights::uniform(&sizes)?;
            return Ok(Self {
                kind: "oracle".into(),
                sizes,
                confidences: w.confidences,
                weights: w.weights,
            });
        }
        Ok(Self {
            kind: "pooled".into(),
            sizes: vec![train.n()],
            confidences: vec![1.0],
            weights: vec![1.0],
        })
    }
}

/// Everything one run produced. Contains no timing, so the serialised form
/// depends only on configuration, seed and data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config_hash: String,
    pub seed: u64,
    pub method: Method,
    pub dataset: String,
    pub n_train: usize,
    pub status: RunStatus,
    pub error: Option<String>,
    pub metric: MetricKind,
    pub test: Vec<EnvMetric>,
    pub worst_case: f64,
    pub validation: Option<ValidationScore>,
    pub environments: Option<EnvSummary>,
    pub diagnostics: Option<DiagnosticResult>,
    pub rounds: Vec<RoundLog>,
    pub config: serde_json::Value,
}

impl RunReport {
    pub(crate) fn skeleton(cfg: &ExperimentConfig, method: Method, seed: u64, train: &LabeledDataset) -> Self {
        Self {
            config_hash: cfg.hash(),
            seed,
            method,
            dataset: cfg.dataset.generator().to_string(),
            n_train: train.n(),
            status: RunStatus::Completed,
            error: None,
            metric: MetricKind::for_targets(&train.targets),
            test: vec![],
            worst_case: f64::NAN,
            validation: None,
            environments: None,
            diagnostics: None,
            rounds: vec![],
            config: serde_json::from_str(&cfg.canonical_json()).expect("canonical config is valid JSON"),
        }
    }

    pub fn is_completed(&self) -> bool {
        self.status == RunStatus::Completed
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }

    pub fn metric_of(&self, env: &str) -> Option<f64> {
        self.test.iter().find(|m| m.name == env).map(|m| m.value)
    }
}

/// Column order of the per-run CSV. Frozen: append only.
pub fn csv_header() -> [&'static str; 12] {
    [
        "seed",
        "config_hash",
        "method",
        "dataset",
        "status",
        "metric",
        "worst_case",
        "validation_score",
        "env_metrics",
        "cmi_invariant",
        "cmi_variant",
        "agreement",
    ]
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

pub fn csv_row(r: &RunReport) -> [String; 12] {
    let envs = r
        .test
        .iter()
        .map(|m| format!("{}:{}", m.name, m.value))
        .collect::<Vec<_>>()
        .join(";");
    let diag = r.diagnostics.as_ref();
    [
        r.seed.to_string(),
        r.config_hash.clone(),
        r.method.name().to_string(),
        r.dataset.clone(),
        serde_json::to_value(r.status).unwrap().as_str().unwrap_or_default().to_string(),
        serde_json::to_value(r.metric).unwrap().as_str().unwrap_or_default().to_string(),
        if r.worst_case.is_finite() { r.worst_case.to_string() } else { String::new() },
        opt(r.validation.as_ref().map(|v| v.score)),
        envs,
        opt(diag.and_then(|d| d.cmi_invariant)),
        opt(diag.and_then(|d| d.cmi_variant)),
        opt(diag.and_then(|d| d.agreement)),
    ]
}
