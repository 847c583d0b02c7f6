use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{run, EngineError, RunReport};
use crate::config::{DatasetConfig, ExperimentConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepAxis {
    /// Mean training colour noise; the two training environments sit at
    /// `v − 0.05` and `v + 0.05`.
    ColorNoise,
    K,
    PretrainSteps,
}

impl FromStr for SweepAxis {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "color-noise" => Ok(SweepAxis::ColorNoise),
            "k" | "K" => Ok(SweepAxis::K),
            "pretrain-steps" | "init-steps" => Ok(SweepAxis::PretrainSteps),
            other => Err(format!("unknown sweep axis {other:?} (expected color-noise, k or pretrain-steps)")),
        }
    }
}

impl fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SweepAxis::ColorNoise => "color-noise",
            SweepAxis::K => "k",
            SweepAxis::PretrainSteps => "pretrain-steps",
        })
    }
}

impl SweepAxis {
    /// `template` with this axis set to `value`.
    pub fn apply(self, template: &ExperimentConfig, value: f64) -> Result<ExperimentConfig, EngineError> {
        let mut cfg = template.clone();
        let whole = |v: f64| -> Result<usize, EngineError> {
            if v >= 0.0 && v.fract() == 0.0 {
                Ok(v as usize)
            } else {
                Err(EngineError::Config(format!("{self} needs whole numbers, got {v}")))
            }
        };
        match self {
            SweepAxis::ColorNoise => {
                let pair = vec![value - 0.05, value + 0.05];
                if pair.iter().any(|p| !(0.0..=1.0).contains(p)) {
                    return Err(EngineError::Config(format!("colour noise {value} ± 0.05 leaves [0, 1]")));
                }
                match &mut cfg.dataset {
                    DatasetConfig::CmnistBits { train_color_noise, .. } | DatasetConfig::Cmnist { train_color_noise, .. } => {
                        *train_color_noise = pair;
                    }
                    _ => return Err(EngineError::Config("colour-noise sweep needs a coloured-digit dataset".into())),
                }
            }
            SweepAxis::K => {
                cfg.plan.ablation.k = None;
                cfg.ei.k = whole(value)?;
            }
            SweepAxis::PretrainSteps => cfg.ei.pretrain_steps = whole(value)?,
        }
        Ok(cfg)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: f64,
    pub completed: usize,
    pub failed: usize,
    pub worst_mean: f64,
    pub worst_sd: f64,
    /// Test environment name → (mean, sd).
    pub env: BTreeMap<String, (f64, f64)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub axis: SweepAxis,
    pub config_hash: String,
    pub rows: Vec<SweepRow>,
    pub runs: Vec<RunReport>,
    pub failures: Vec<String>,
}

/// Mean and sample standard deviation (zero for fewer than two values).
pub fn mean_sd(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// One run per value and seed of `template`; failures are recorded and the
/// sweep carries on.
pub fn sweep(template: &ExperimentConfig, axis: SweepAxis, values: &[f64]) -> Result<SweepReport, EngineError> {
    if values.is_empty() {
        return Err(EngineError::Config("sweep needs at least one value".into()));
    }
    let mut rows = Vec::with_capacity(values.len());
    let mut runs = Vec::new();
    let mut failures = Vec::new();
    for &value in values {
        let cfg = axis.apply(template, value)?;
        let mut ok: Vec<RunReport> = Vec::new();
        let mut failed = 0;
        for &seed in &cfg.seeds {
            match run(&cfg, cfg.method, seed) {
                Ok((r, _)) if r.is_completed() => ok.push(r),
                Ok((r, _)) => {
                    failed += 1;
                    failures.push(format!("{axis}={value} seed {seed}: {}", r.error.as_deref().unwrap_or("diverged")));
                    runs.push(r);
                }
                Err(e) => {
                    failed += 1;
                    failures.push(format!("{axis}={value} seed {seed}: {e}"));
                }
            }
        }
        let (worst_mean, worst_sd) = mean_sd(&ok.iter().map(|r| r.worst_case).collect::<Vec<_>>());
        let mut per_env: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for r in &ok {
            for m in &r.test {
                per_env.entry(m.name.clone()).or_default().push(m.value);
            }
        }
        log::info!("{axis}={value}: worst-case {worst_mean:.4} ± {worst_sd:.4} over {} runs", ok.len());
        rows.push(SweepRow {
            value,
            completed: ok.len(),
            failed,
            worst_mean,
            worst_sd,
            env: per_env.into_iter().map(|(k, v)| (k, mean_sd(&v))).collect(),
        });
        runs.extend(ok);
    }
    Ok(SweepReport {
        axis,
        config_hash: template.hash(),
        rows,
        runs,
        failures,
    })
}

impl SweepReport {
    /// Largest minus smallest mean worst-case across values.
    pub fn worst_spread(&self) -> f64 {
        let m: Vec<f64> = self.rows.iter().map(|r| r.worst_mean).filter(|v| v.is_finite()).collect();
        m.iter().copied().fold(f64::NEG_INFINITY, f64::max) - m.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Header and rows of the per-value summary table.
    pub fn csv_table(&self) -> (Vec<String>, Vec<Vec<String>>) {
        let envs: Vec<String> = self.rows.iter().flat_map(|r| r.env.keys().cloned()).collect::<std::collections::BTreeSet<_>>().into_iter().collect();
        let mut header: Vec<String> = ["axis", "value", "completed", "failed", "worst_mean", "worst_sd"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        for e in &envs {
            header.push(format!("{e}_mean"));
            header.push(format!("{e}_sd"));
        }
        let rows = self
            .rows
            .iter()
            .map(|r| {
                let mut row = vec![
                    self.axis.to_string(),
                    r.value.to_string(),
                    r.completed.to_string(),
                    r.failed.to_string(),
                    r.worst_mean.to_string(),
                    r.worst_sd.to_string(),
                ];
                for e in &envs {
                    let (m, s) = r.env.get(e).copied().unwrap_or((f64::NAN, f64::NAN));
                    row.push(m.to_string());
                    row.push(s.to_string());
                }
                row
            })
            .collect();
        (header, rows)
    }
}
