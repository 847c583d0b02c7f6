use std::collections::BTreeMap;

use itertools::Itertools;
use serde::{Deserialize, Serialize};

use super::EngineError;
use crate::datagen::{LabeledDataset, Oracle};
use crate::envinfer::{discretize, quartile_bounds};
use crate::invlearn::build_oracle_envs;
use crate::loss::Targets;

/// Condition on invariant features holds when `Î(Y;E|X_c) ≤ EPS_INV` nats.
pub const EPS_INV: f64 = 0.02;
/// Condition on variant features holds when `Î(Y;E|X_v) ≥ EPS_VAR` nats.
pub const EPS_VAR: f64 = 0.05;

const MIN_CELL: usize = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticResult {
    pub cmi_invariant: Option<f64>,
    pub cmi_variant: Option<f64>,
    pub eps_inv: f64,
    pub eps_var: f64,
    pub invariance_pass: Option<bool>,
    pub variance_pass: Option<bool>,
    pub agreement: Option<f64>,
    /// `max_y P̂(y | e)` per environment; `None` for empty ones.
    pub label_alignment: Vec<Option<f64>>,
    pub warnings: Vec<String>,
}

/// Plug-in `Î(A;B)` in nats from paired discrete codes.
pub fn mutual_information(a: &[usize], b: &[usize]) -> f64 {
    let z = vec![0; a.len()];
    conditional_mutual_information(a, b, &z)
}

/// Plug-in `Î(A;B|Z) = Σ p(a,b,z) log[p(a,b,z) p(z) / (p(a,z) p(b,z))]`,
/// clipped at zero.
pub fn conditional_mutual_information(a: &[usize], b: &[usize], z: &[usize]) -> f64 {
    let n = a.len();
    assert!(b.len() == n && z.len() == n, "code vectors differ in length");
    if n == 0 {
        return 0.0;
    }
    let mut abz: BTreeMap<(usize, usize, usize), usize> = BTreeMap::new();
    let mut az: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    let mut bz: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    let mut zc: BTreeMap<usize, usize> = BTreeMap::new();
    for i in 0..n {
        *abz.entry((a[i], b[i], z[i])).or_default() += 1;
        *az.entry((a[i], z[i])).or_default() += 1;
        *bz.entry((b[i], z[i])).or_default() += 1;
        *zc.entry(z[i]).or_default() += 1;
    }
    let total: f64 = abz
        .iter()
        .map(|(&(ai, bi, zi), &c)| {
            let c = c as f64;
            let ratio = c * zc[&zi] as f64 / (az[&(ai, zi)] as f64 * bz[&(bi, zi)] as f64);
            c * ratio.ln()
        })
        .sum();
    (total / n as f64).max(0.0)
}

/// Codes for `values` split into `bins` quantile bins.
fn quantile_codes(values: &[f64], bins: usize) -> Vec<usize> {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let bounds: Vec<f64> = (1..bins)
        .map(|j| sorted[(j * sorted.len() / bins).min(sorted.len() - 1)])
        .dedup()
        .collect();
    discretize(values, &bounds)
}

fn smallest_cell(codes: &[usize]) -> usize {
    codes.iter().counts().into_values().min().unwrap_or(0)
}

/// Quantile codes with bins widened until every cell has `MIN_CELL` rows.
fn widened_codes(values: &[f64], bins: usize, what: &str, warnings: &mut Vec<String>) -> Vec<usize> {
    let mut b = bins.max(1);
    loop {
        let codes = quantile_codes(values, b);
        if b == 1 || smallest_cell(&codes) >= MIN_CELL {
            if b < bins {
                warnings.push(format!("{what}: widened from {bins} to {b} bins"));
            }
            return codes;
        }
        b -= 1;
    }
}

/// Merges discrete cells smaller than `MIN_CELL` into one shared cell.
fn merged_codes(codes: &[usize], what: &str, warnings: &mut Vec<String>) -> Vec<usize> {
    let counts = codes.iter().counts();
    let small: Vec<usize> = counts.iter().filter(|(_, &c)| c < MIN_CELL).map(|(&&k, _)| k).sorted().collect();
    if small.is_empty() {
        return codes.to_vec();
    }
    warnings.push(format!("{what}: merged {} cells with fewer than {MIN_CELL} rows", small.len()));
    let sink = usize::MAX;
    codes.iter().map(|c| if small.contains(c) { sink } else { *c }).collect()
}

fn label_codes(targets: &Targets) -> Vec<usize> {
    match targets {
        Targets::Classes { labels, .. } => labels.to_vec(),
        Targets::Real(v) => discretize(v.data(), &quartile_bounds(v.data())),
    }
}

fn row_means(t: &crate::autodiff::Tensor) -> Vec<f64> {
    (0..t.rows()).map(|i| t.row(i).iter().sum::<f64>() / t.cols() as f64).collect()
}

/// `max_y P̂(y | e)` for each environment.
pub fn label_alignment(env: &[usize], k: usize, labels: &[usize]) -> Vec<Option<f64>> {
    let mut counts: Vec<BTreeMap<usize, usize>> = vec![BTreeMap::new(); k];
    for (&e, &y) in env.iter().zip(labels) {
        *counts[e].entry(y).or_default() += 1;
    }
    counts
        .iter()
        .map(|c| {
            let n: usize = c.values().sum();
            (n > 0).then(|| *c.values().max().unwrap() as f64 / n as f64)
        })
        .collect()
}

/// Agreement between inferred and oracle environments under the best
/// relabelling of the inferred indices.
pub fn env_agreement(inferred: &[usize], oracle: &[usize], k: usize) -> Result<f64, EngineError> {
    if inferred.len() != oracle.len() {
        return Err(EngineError::Config(format!(
            "{} inferred labels but {} oracle labels",
            inferred.len(),
            oracle.len()
        )));
    }
    if inferred.is_empty() {
        return Err(EngineError::Config("agreement of empty label vectors".into()));
    }
    let max_label = inferred.iter().chain(oracle).copied().max().unwrap_or(0);
    let k = k.max(max_label + 1);
    if k > 8 {
        return Err(EngineError::Config(format!("agreement over {k} environments is not enumerable")));
    }
    let mut confusion = vec![vec![0usize; k]; k];
    for (&i, &o) in inferred.iter().zip(oracle) {
        confusion[i][o] += 1;
    }
    let best = (0..k)
        .permutations(k)
        .map(|perm| perm.iter().enumerate().map(|(i, &o)| confusion[i][o]).sum::<usize>())
        .max()
        .unwrap_or(0);
    Ok(best as f64 / inferred.len() as f64)
}

/// Conditional-entropy checks of an environment assignment against the
/// dataset's oracle factors, plus oracle agreement and label alignment.
pub fn entropy_diagnostics(
    env: &[usize],
    k: usize,
    ds: &LabeledDataset,
    bins: usize,
) -> Result<DiagnosticResult, EngineError> {
    if env.len() != ds.n() {
        return Err(EngineError::Config(format!("{} assignments for {} rows", env.len(), ds.n())));
    }
    let oracle = ds
        .oracle
        .as_ref()
        .ok_or_else(|| EngineError::Config("diagnostics need oracle metadata".into()))?;
    let mut warnings = Vec::new();
    let y = label_codes(&ds.targets);
    let (inv, var) = match oracle {
        Oracle::Color { shape, color } => (
            Some(merged_codes(shape, "X_c", &mut warnings)),
            Some(merged_codes(color, "X_v", &mut warnings)),
        ),
        Oracle::Subgroup { black, male } => {
            let cell: Vec<usize> = black.iter().zip(male).map(|(&b, &m)| 2 * usize::from(b) + usize::from(m)).collect();
            (None, Some(merged_codes(&cell, "X_v", &mut warnings)))
        }
        Oracle::Sem { x_v, signal, .. } => (
            Some(widened_codes(signal, bins, "X_c", &mut warnings)),
            Some(widened_codes(&row_means(x_v), bins, "X_v", &mut warnings)),
        ),
    };
    for w in &warnings {
        log::warn!("{w}");
    }
    let cmi_invariant = inv.map(|z| conditional_mutual_information(&y, env, &z));
    let cmi_variant = var.map(|z| conditional_mutual_information(&y, env, &z));
    let (oracle_env, oracle_k) = build_oracle_envs(ds)?;
    Ok(DiagnosticResult {
        cmi_invariant,
        cmi_variant,
        eps_inv: EPS_INV,
        eps_var: EPS_VAR,
        invariance_pass: cmi_invariant.map(|v| v <= EPS_INV),
        variance_pass: cmi_variant.map(|v| v >= EPS_VAR),
        agreement: Some(env_agreement(env, &oracle_env, k.max(oracle_k))?),
        label_alignment: label_alignment(env, k, &y),
        warnings,
    })
}
