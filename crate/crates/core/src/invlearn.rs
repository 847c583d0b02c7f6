//! Invariant learning: the IRMv1 penalty in closed form, confidence-weighted
//! environment risk, penalty annealing, and the ERM / oracle-IRM baselines.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, OptimizerState, Tape, Tensor, Var};
use crate::datagen::{LabeledDataset, Oracle};
use crate::envinfer::EnvPosterior;
use crate::loss::{per_sample_loss, Targets};
use crate::nets::{BoundIl, ILModel, NetError};

#[derive(Debug, Error)]
pub enum InvLearnError {
    #[error("invalid input: {0}")]
    Input(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{what} became non-finite at step {step}")]
    NonFinite { what: &'static str, step: usize },
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ILConfig {
    pub lambda: f64,
    pub anneal_fraction: f64,
    /// `None` derives the count from the plan's total step budget.
    pub il_steps_per_round: Option<usize>,
    pub lr: f64,
    /// Re-initialise Φ at the start of every joint round.
    pub reset_each_round: bool,
}

impl Default for ILConfig {
    fn default() -> Self {
        Self {
            lambda: 100.0,
            anneal_fraction: 0.8,
            il_steps_per_round: None,
            lr: 2e-3,
            reset_each_round: false,
        }
    }
}

impl ILConfig {
    pub fn validate(&self) -> Result<(), InvLearnError> {
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(InvLearnError::Config(format!("lambda = {} must be positive", self.lambda)));
        }
        if !(0.0..=1.0).contains(&self.anneal_fraction) {
            return Err(InvLearnError::Config(format!(
                "anneal_fraction = {} outside [0, 1]",
                self.anneal_fraction
            )));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(InvLearnError::Config(format!("lr = {} must be positive", self.lr)));
        }
        Ok(())
    }
}

/// Confidence scores `c_e` and the normalised weights `w_e = c_e / Σ c`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvWeights {
    pub confidences: Vec<f64>,
    pub weights: Vec<f64>,
}

impl EnvWeights {
    pub fn from_confidences(confidences: Vec<f64>) -> Result<Self, InvLearnError> {
        let total: f64 = confidences.iter().sum();
        if !(total > 0.0) || confidences.iter().any(|&c| c < 0.0) {
            return Err(InvLearnError::Input(format!("no positive confidence in {confidences:?}")));
        }
        let weights = confidences.iter().map(|c| c / total).collect();
        Ok(Self { confidences, weights })
    }

    /// Equal weight on every non-empty environment.
    pub fn uniform(sizes: &[usize]) -> Result<Self, InvLearnError> {
        Self::from_confidences(sizes.iter().map(|&s| if s > 0 { 1.0 } else { 0.0 }).collect())
    }
}

/// `c_e` = mean posterior of environment `e` over the rows hard-assigned to
/// it; empty environments get zero.
pub fn confidence_weights(p: &EnvPosterior) -> Result<EnvWeights, InvLearnError> {
    let k = p.k();
    let mut sums = vec![0.0; k];
    for (i, &a) in p.assignments.iter().enumerate() {
        sums[a] += p.probs.get(i, a);
    }
    let c = sums
        .iter()
        .zip(&p.sizes)
        .map(|(s, &n)| if n > 0 { s / n as f64 } else { 0.0 })
        .collect();
    EnvWeights::from_confidences(c)
}

/// `(∇_w R^e(w ∘ Φ) at w = 1)²`, written in terms of `z = Φ(x)` so it stays
/// differentiable in Φ.
///
/// Cross-entropy: `∇_w R = meanᵢ Σ_k (softmax(zᵢ)_k − 1{yᵢ=k}) z_ik`.
/// Squared error: `∇_w R = meanᵢ 2(ẑᵢ − yᵢ) ẑᵢ`.
pub fn irm_penalty(tape: &mut Tape, z: Var, targets: &Targets) -> Result<Var, AutodiffError> {
    let n = targets.len();
    if n == 0 {
        return Err(AutodiffError::InvalidInput("irm penalty of an empty environment".into()));
    }
    let grad_w = match targets {
        Targets::Classes { labels, n_classes } => {
            let mut onehot = vec![0.0; n * n_classes];
            for (i, &y) in labels.iter().enumerate() {
                onehot[i * n_classes + y] = 1.0;
            }
            let onehot = tape.constant(Tensor::matrix(n, *n_classes, onehot)?);
            let sm = tape.softmax_rows(z)?;
            let diff = tape.sub(sm, onehot)?;
            let prod = tape.mul(diff, z)?;
            let s = tape.sum(prod);
            tape.scale(s, 1.0 / n as f64)
        }
        Targets::Real(y) => {
            let shape = tape.value(z).shape().to_vec();
            let y = tape.constant(y.reshape(&shape)?);
            let diff = tape.sub(z, y)?;
            let prod = tape.mul(diff, z)?;
            let s = tape.sum(prod);
            tape.scale(s, 2.0 / n as f64)
        }
    };
    Ok(tape.square(grad_w))
}

/// Mean risk of `w·z` as a plain function of the scalar `w`.
pub fn risk_at_multiplier(z: &Tensor, targets: &Targets, w: f64) -> Result<f64, AutodiffError> {
    let scaled = z.map(|v| v * w);
    let l = crate::loss::per_sample_loss_values(&scaled, targets)?;
    Ok(l.iter().sum::<f64>() / l.len() as f64)
}

/// Per-environment terms of one L_IL evaluation.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct IlTerms {
    pub risks: Vec<f64>,
    pub penalties: Vec<f64>,
    pub total: f64,
}

/// `Σ_e w_e (R^e + λ_t · penalty_e)` over the hard partition `parts`;
/// environments that are empty or carry zero weight are skipped.
pub fn loss_il(
    tape: &mut Tape,
    model: &ILModel,
    bound: &BoundIl,
    x: Var,
    targets: &Targets,
    parts: &[Vec<usize>],
    weights: &EnvWeights,
    lambda_t: f64,
) -> Result<(Var, IlTerms), InvLearnError> {
    if parts.len() != weights.weights.len() {
        return Err(InvLearnError::Input(format!(
            "{} environments but {} weights",
            parts.len(),
            weights.weights.len()
        )));
    }
    let out = model.forward(tape, bound, x)?;
    let mut total: Option<Var> = None;
    let mut terms = IlTerms {
        risks: vec![0.0; parts.len()],
        penalties: vec![0.0; parts.len()],
        total: 0.0,
    };
    for (e, (rows, &w_e)) in parts.iter().zip(&weights.weights).enumerate() {
        if rows.is_empty() {
            log::debug!("environment {e} is empty; no risk term");
            continue;
        }
        if w_e == 0.0 {
            continue;
        }
        let t_e = targets.select(rows);
        let z_e = tape.select_rows(out, Arc::new(rows.clone()))?;
        let l_e = per_sample_loss(tape, z_e, &t_e)?;
        let r_e = tape.mean(l_e)?;
        let pen = irm_penalty(tape, z_e, &t_e)?;
        terms.risks[e] = tape.value(r_e).item();
        terms.penalties[e] = tape.value(pen).item();
        let scaled_pen = tape.scale(pen, lambda_t);
        let inner = tape.add(r_e, scaled_pen)?;
        let term = tape.scale(inner, w_e);
        total = Some(match total {
            Some(t) => tape.add(t, term)?,
            None => term,
        });
    }
    let total = total.ok_or_else(|| InvLearnError::Input("all environments empty".into()))?;
    terms.total = tape.value(total).item();
    Ok((total, terms))
}

/// `1.0` during the warm-up fraction of training, `λ` afterwards.
pub fn anneal_lambda(step: usize, total_steps: usize, anneal_fraction: f64, lambda: f64) -> f64 {
    if (step as f64) < anneal_fraction * total_steps as f64 {
        1.0
    } else {
        lambda
    }
}

/// One optimiser step on L_IL. When `λ_t > 1` the objective is divided by
/// `λ_t` before differentiation so gradient magnitudes stay comparable across
/// the end of the warm-up.
#[allow(clippy::too_many_arguments)]
pub fn il_step(
    model: &mut ILModel,
    opt: &mut OptimizerState,
    x: &Tensor,
    targets: &Targets,
    parts: &[Vec<usize>],
    weights: &EnvWeights,
    lambda_t: f64,
    step: usize,
) -> Result<IlTerms, InvLearnError> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let xv = tape.constant(x.clone());
    let (root, terms) = loss_il(&mut tape, model, &bound, xv, targets, parts, weights, lambda_t)?;
    if !terms.total.is_finite() {
        return Err(InvLearnError::NonFinite { what: "invariant learning loss", step });
    }
    let root = if lambda_t > 1.0 { tape.scale(root, 1.0 / lambda_t) } else { root };
    let grads = tape.backward(root)?;
    model.store_grads(&bound, &grads)?;
    opt.step(&mut model.phi.params_mut())?;
    Ok(terms)
}

/// Pooled empirical risk minimisation. Returns the loss before each step.
pub fn train_erm(
    model: &mut ILModel,
    x: &Tensor,
    targets: &Targets,
    steps: usize,
    lr: f64,
) -> Result<Vec<f64>, InvLearnError> {
    let mut opt = OptimizerState::adam(lr)?;
    let mut history = Vec::with_capacity(steps);
    for step in 0..steps {
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let xv = tape.constant(x.clone());
        let out = model.forward(&mut tape, &bound, xv)?;
        let l = per_sample_loss(&mut tape, out, targets)?;
        let root = tape.mean(l)?;
        let value = tape.value(root).item();
        if !value.is_finite() {
            return Err(InvLearnError::NonFinite { what: "erm loss", step });
        }
        history.push(value);
        let grads = tape.backward(root)?;
        model.store_grads(&bound, &grads)?;
        opt.step(&mut model.phi.params_mut())?;
    }
    Ok(history)
}

/// IRMv1 on fixed environment labels with equal weight per non-empty
/// environment.
pub fn train_irm(
    model: &mut ILModel,
    x: &Tensor,
    targets: &Targets,
    env: &[usize],
    n_envs: usize,
    cfg: &ILConfig,
    steps: usize,
) -> Result<Vec<IlTerms>, InvLearnError> {
    cfg.validate()?;
    if env.len() != targets.len() {
        return Err(InvLearnError::Input(format!("{} env labels for {} rows", env.len(), targets.len())));
    }
    let parts = crate::envinfer::partition(env, n_envs);
    let sizes: Vec<usize> = parts.iter().map(Vec::len).collect();
    let weights = EnvWeights::uniform(&sizes)?;
    let mut opt = OptimizerState::adam(cfg.lr)?;
    (0..steps)
        .map(|step| {
            let lambda_t = anneal_lambda(step, steps, cfg.anneal_fraction, cfg.lambda);
            il_step(model, &mut opt, x, targets, &parts, &weights, lambda_t, step)
        })
        .collect()
}

/// Oracle environment labels and their count.
///
/// Colour data: `Y = C` → 0, `Y ≠ C` → 1. Subgroup data: four environments
/// pairing each (race, sex) cell under `Y = 1` with its opposite under
/// `Y = 0`. Regression: the generating environment.
pub fn build_oracle_envs(ds: &LabeledDataset) -> Result<(Vec<usize>, usize), InvLearnError> {
    let oracle = ds
        .oracle
        .as_ref()
        .ok_or_else(|| InvLearnError::Config(format!("dataset '{}' has no oracle metadata", ds.provenance.generator)))?;
    let (env, k) = match oracle {
        Oracle::Color { color, .. } => {
            let labels = ds
                .targets
                .labels()
                .ok_or_else(|| InvLearnError::Config("colour oracle needs class targets".into()))?;
            let env = labels.iter().zip(color).map(|(&y, &c)| usize::from(y != c)).collect();
            (env, 2)
        }
        Oracle::Subgroup { black, male } => {
            let labels = ds
                .targets
                .labels()
                .ok_or_else(|| InvLearnError::Config("subgroup oracle needs class targets".into()))?;
            let env = labels
                .iter()
                .zip(black.iter().zip(male))
                .map(|(&y, (&b, &m))| {
                    let flip = y == 0;
                    2 * usize::from(b ^ flip) + usize::from(!m ^ flip)
                })
                .collect();
            (env, 4)
        }
        Oracle::Sem { env, n_envs, .. } => (env.clone(), *n_envs),
    };
    let sizes = crate::envinfer::env_sizes(&env, k);
    if let Some(e) = sizes.iter().position(|&s| s == 0) {
        log::warn!("oracle environment {e} is empty");
    }
    Ok((env, k))
}
