use serde::{Deserialize, Serialize};

use super::EngineError;
use crate::datagen::LabeledDataset;
use crate::envinfer::posterior;
use crate::loss::{accuracy, mean_squared_error, LossKind, Targets};
use crate::nets::{EIModel, ILModel};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MetricKind {
    #[default]
    Accuracy,
    Mse,
}

impl MetricKind {
    pub fn for_targets(t: &Targets) -> Self {
        match t.kind() {
            LossKind::CrossEntropy => MetricKind::Accuracy,
            LossKind::Mse => MetricKind::Mse,
        }
    }

    /// The worse of two scores: lower accuracy, higher error.
    pub fn worse(self, a: f64, b: f64) -> f64 {
        match self {
            MetricKind::Accuracy => a.min(b),
            MetricKind::Mse => a.max(b),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvMetric {
    pub name: String,
    pub n: usize,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub kind: MetricKind,
    pub per_env: Vec<EnvMetric>,
    pub worst: f64,
}

fn metric(model: &ILModel, x: &crate::autodiff::Tensor, t: &Targets) -> Result<f64, EngineError> {
    let out = model.predict(x)?;
    Ok(match t {
        Targets::Classes { labels, .. } => accuracy(&out, labels),
        Targets::Real(v) => mean_squared_error(&out, v.data()),
    })
}

/// Per-environment accuracy (or mse) and the worst of them.
pub fn evaluate(model: &ILModel, envs: &[(&str, &LabeledDataset)]) -> Result<Evaluation, EngineError> {
    let Some((_, first)) = envs.first() else {
        return Err(EngineError::Config("no test environments listed".into()));
    };
    let kind = MetricKind::for_targets(&first.targets);
    let mut per_env = Vec::with_capacity(envs.len());
    for (name, ds) in envs {
        if ds.n() == 0 {
            log::warn!("test environment '{name}' is empty; skipped");
            continue;
        }
        if MetricKind::for_targets(&ds.targets) != kind {
            return Err(EngineError::Config(format!("test environment '{name}' mixes target kinds")));
        }
        per_env.push(EnvMetric {
            name: name.to_string(),
            n: ds.n(),
            value: metric(model, &ds.x, &ds.targets)?,
        });
    }
    let worst = per_env
        .iter()
        .map(|m| m.value)
        .reduce(|a, b| kind.worse(a, b))
        .ok_or_else(|| EngineError::Config("every test environment is empty".into()))?;
    Ok(Evaluation { kind, per_env, worst })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationScore {
    pub score: f64,
    pub per_env: Vec<Option<f64>>,
    pub sizes: Vec<usize>,
    /// Every validation row landed in one environment.
    pub single_env: bool,
}

/// Worst per-environment score of `il` over the partition `ei` induces on
/// the validation rows.
pub fn validation_score(ei: &EIModel, il: &ILModel, val: &LabeledDataset) -> Result<ValidationScore, EngineError> {
    if val.n() == 0 {
        return Err(EngineError::Config("validation data is empty".into()));
    }
    let kind = MetricKind::for_targets(&val.targets);
    let post = posterior(ei, &val.x, &val.targets)?;
    let mut per_env = Vec::with_capacity(post.k());
    for rows in post.partition() {
        if rows.is_empty() {
            per_env.push(None);
            continue;
        }
        let sub = val.select(&rows);
        per_env.push(Some(metric(il, &sub.x, &sub.targets)?));
    }
    let score = per_env.iter().flatten().copied().reduce(|a, b| kind.worse(a, b)).unwrap_or(f64::NAN);
    let single_env = post.sizes.iter().filter(|&&s| s > 0).count() == 1;
    if single_env {
        log::warn!("all validation rows share one inferred environment");
    }
    Ok(ValidationScore {
        score,
        per_env,
        sizes: post.sizes,
        single_env,
    })
}
