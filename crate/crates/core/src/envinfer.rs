//! Environment inference: posterior over learned environments, the three
//! learning-stage losses and ERM pre-training of the encoder.

use std::io::Write;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, OptimizerState, Param, Tape, Tensor, Var};
use crate::loss::{argmax, per_sample_loss, Targets};
use crate::nets::{BoundEi, EIModel, NetError};

#[derive(Debug, Error)]
pub enum EnvInferError {
    #[error("empty dataset")]
    Empty,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{what} became non-finite")]
    NonFinite { what: &'static str },
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("csv export failed: {0}")]
    Csv(#[from] csv::Error),
}

/// Whether the L_LI / L_IP statistics use the soft posterior or hard
/// assignments (the latter carries no gradient).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StatMode {
    #[default]
    Soft,
    Hard,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EIConfig {
    pub k: usize,
    pub tau: f64,
    pub beta: f64,
    pub gamma: f64,
    pub w_thres: f64,
    pub pretrain_steps: usize,
    /// `None` derives the count from the plan's total step budget.
    pub ei_steps_per_round: Option<usize>,
    pub lr: f64,
    pub stat_mode: StatMode,
}

impl Default for EIConfig {
    fn default() -> Self {
        Self {
            k: 2,
            tau: 0.3,
            beta: 1.0,
            gamma: 1.0,
            w_thres: 1.2,
            pretrain_steps: 100,
            ei_steps_per_round: None,
            lr: 1e-3,
            stat_mode: StatMode::Soft,
        }
    }
}

impl EIConfig {
    /// Rejects values outside the ranges the method is tuned over.
    pub fn validate(&self) -> Result<(), EnvInferError> {
        let check = |ok: bool, msg: String| if ok { Ok(()) } else { Err(EnvInferError::Config(msg)) };
        check((2..=8).contains(&self.k), format!("k = {} outside 2..=8", self.k))?;
        check(self.tau > 0.0 && self.tau.is_finite(), format!("tau = {} must be positive", self.tau))?;
        check(self.beta >= 0.0 && self.beta.is_finite(), format!("beta = {} must be >= 0", self.beta))?;
        check(self.gamma >= 0.0 && self.gamma.is_finite(), format!("gamma = {} must be >= 0", self.gamma))?;
        check(self.w_thres >= 1.0, format!("w_thres = {} must be >= 1", self.w_thres))?;
        check(self.lr > 0.0 && self.lr.is_finite(), format!("lr = {} must be positive", self.lr))
    }
}

/// Plain-value posterior `P(e | x, y)` with hard assignments.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvPosterior {
    /// `N × K`
    pub probs: Tensor,
    pub assignments: Vec<usize>,
    pub sizes: Vec<usize>,
}

impl EnvPosterior {
    pub fn from_probs(probs: Tensor) -> Self {
        let (n, k) = probs.dims2();
        let assignments: Vec<usize> = (0..n).map(|i| argmax(probs.row(i))).collect();
        let sizes = env_sizes(&assignments, k);
        Self {
            probs,
            assignments,
            sizes,
        }
    }

    pub fn n(&self) -> usize {
        self.probs.rows()
    }

    pub fn k(&self) -> usize {
        self.probs.cols()
    }

    /// Rows hard-assigned to each environment, in row order.
    pub fn partition(&self) -> Vec<Vec<usize>> {
        partition(&self.assignments, self.k())
    }

    /// Columns: row, env, p0 … p{K-1}.
    pub fn write_csv(&self, w: impl Write) -> Result<(), EnvInferError> {
        let mut out = csv::Writer::from_writer(w);
        let mut header = vec!["row".to_string(), "env".to_string()];
        header.extend((0..self.k()).map(|e| format!("p{e}")));
        out.write_record(&header)?;
        for (i, &a) in self.assignments.iter().enumerate() {
            let mut rec = vec![i.to_string(), a.to_string()];
            rec.extend(self.probs.row(i).iter().map(|p| p.to_string()));
            out.write_record(&rec)?;
        }
        out.flush().map_err(csv::Error::from)?;
        Ok(())
    }
}

pub fn env_sizes(assignments: &[usize], k: usize) -> Vec<usize> {
    let mut sizes = vec![0; k];
    for &a in assignments {
        sizes[a] += 1;
    }
    sizes
}

pub fn partition(assignments: &[usize], k: usize) -> Vec<Vec<usize>> {
    let mut parts = vec![Vec::new(); k];
    for (i, &a) in assignments.iter().enumerate() {
        parts[a].push(i);
    }
    parts
}

/// Posterior recorded on a tape so the losses can differentiate through it.
#[derive(Clone, Debug)]
pub struct TrackedPosterior {
    /// Per-head losses, `N × K`.
    pub losses: Var,
    pub log_probs: Var,
    pub probs: Var,
    pub assignments: Vec<usize>,
    pub sizes: Vec<usize>,
}

impl TrackedPosterior {
    pub fn values(&self, tape: &Tape) -> EnvPosterior {
        EnvPosterior {
            probs: tape.value(self.probs).clone(),
            assignments: self.assignments.clone(),
            sizes: self.sizes.clone(),
        }
    }
}

/// Softmax over heads of `−l(fᵉ(Ψ(x)), y)/τ`, built from per-head outputs.
pub fn posterior_from_outputs(
    tape: &mut Tape,
    head_outputs: &[Var],
    targets: &Targets,
    tau: f64,
) -> Result<TrackedPosterior, EnvInferError> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(EnvInferError::Config(format!("tau must be positive, got {tau}")));
    }
    if targets.is_empty() {
        return Err(EnvInferError::Empty);
    }
    let per_head = head_outputs
        .iter()
        .map(|&o| per_sample_loss(tape, o, targets))
        .collect::<Result<Vec<_>, _>>()?;
    let losses = tape.concat_cols(&per_head)?;
    let logits = tape.scale(losses, -1.0 / tau);
    let log_probs = tape.log_softmax_rows(logits)?;
    let probs = tape.exp(log_probs);
    let p = tape.value(probs);
    let (n, k) = p.dims2();
    let assignments: Vec<usize> = (0..n).map(|i| argmax(p.row(i))).collect();
    let sizes = env_sizes(&assignments, k);
    Ok(TrackedPosterior {
        losses,
        log_probs,
        probs,
        assignments,
        sizes,
    })
}

pub fn posterior_tracked(
    tape: &mut Tape,
    model: &EIModel,
    bound: &BoundEi,
    x: Var,
    targets: &Targets,
) -> Result<TrackedPosterior, EnvInferError> {
    let outs = model.forward(tape, bound, x)?;
    posterior_from_outputs(tape, &outs, targets, model.tau)
}

/// Inference-stage posterior without gradient tracking.
pub fn posterior(model: &EIModel, x: &Tensor, targets: &Targets) -> Result<EnvPosterior, EnvInferError> {
    if x.rows() != targets.len() {
        return Err(EnvInferError::Config(format!(
            "{} feature rows but {} targets",
            x.rows(),
            targets.len()
        )));
    }
    let mut tape = Tape::new();
    let bound = model.bind_frozen(&mut tape);
    let xv = tape.constant(x.clone());
    let p = posterior_tracked(&mut tape, model, &bound, xv, targets)?;
    Ok(p.values(&tape))
}

/// `wᵢ = min(w_thres, N / (K · n_{aᵢ}))` from hard-assignment counts.
pub fn ed_weights(assignments: &[usize], sizes: &[usize], w_thres: f64) -> Vec<f64> {
    let n = assignments.len() as f64;
    let k = sizes.len() as f64;
    assignments
        .iter()
        .map(|&a| w_thres.min(n / (k * sizes[a] as f64)))
        .collect()
}

/// `−(1/N) Σᵢ wᵢ · maxₑ log P(e | xᵢ, yᵢ)`, weights held constant.
pub fn loss_ed(tape: &mut Tape, p: &TrackedPosterior, w_thres: f64) -> Result<Var, EnvInferError> {
    let n = p.assignments.len();
    if n == 0 {
        return Err(EnvInferError::Empty);
    }
    let w = ed_weights(&p.assignments, &p.sizes, w_thres);
    let picked = tape.gather_cols(p.log_probs, Arc::new(p.assignments.clone()))?;
    let w = tape.constant(Tensor::vector(w));
    let weighted = tape.mul(picked, w)?;
    let s = tape.sum(weighted);
    Ok(tape.scale(s, -1.0 / n as f64))
}

fn one_hot(labels: &[usize], classes: usize) -> Tensor {
    let mut data = vec![0.0; labels.len() * classes];
    for (i, &y) in labels.iter().enumerate() {
        data[i * classes + y] = 1.0;
    }
    Tensor::new(vec![labels.len(), classes], data).expect("shape matches by construction")
}

fn stat_probs(tape: &mut Tape, p: &TrackedPosterior, mode: StatMode) -> Var {
    match mode {
        StatMode::Soft => p.probs,
        StatMode::Hard => {
            let k = p.sizes.len();
            tape.constant(one_hot(&p.assignments, k))
        }
    }
}

/// `Σₑ P̂(e) Σ_y P̂(y|e) log P̂(y|e)` from posterior-weighted counts.
///
/// With `S = onehot(y)ᵀ P` this is `(1/N)[Σ S_ye ln S_ye − Σₑ Sₑ ln Sₑ]`.
pub fn loss_li(
    tape: &mut Tape,
    p: &TrackedPosterior,
    labels: &[usize],
    n_classes: usize,
    mode: StatMode,
) -> Result<Var, EnvInferError> {
    let n = labels.len();
    if n == 0 {
        return Err(EnvInferError::Empty);
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= n_classes) {
        return Err(EnvInferError::Config(format!("label {bad} outside {n_classes} classes")));
    }
    if labels.iter().all(|&y| y == labels[0]) {
        log::warn!("label independence loss on single-class targets is identically zero");
    }
    let probs = stat_probs(tape, p, mode);
    let yt = tape.constant(one_hot(labels, n_classes).transpose());
    let joint = tape.matmul(yt, probs)?;
    let marg = tape.sum_rows(probs)?;
    let a = tape.xlogx(joint);
    let a = tape.sum(a);
    let b = tape.xlogx(marg);
    let b = tape.sum(b);
    let d = tape.sub(a, b)?;
    Ok(tape.scale(d, 1.0 / n as f64))
}

/// Floor added to soft environment masses before dividing.
const MASS_EPS: f64 = 1e-12;

/// Posterior-weighted variance across environments of the frozen
/// predictor's mean loss.
///
/// With `Sₑ = Σᵢ Pᵢₑ`, `Tₑ = Σᵢ Pᵢₑ lᵢ` and `μ̄ = mean(l)` this is
/// `Σₑ (Tₑ − μ̄ Sₑ)² / (N Sₑ)`.
pub fn loss_ip(
    tape: &mut Tape,
    p: &TrackedPosterior,
    frozen_losses: &[f64],
    mode: StatMode,
) -> Result<Var, EnvInferError> {
    let n = frozen_losses.len();
    if n == 0 {
        return Err(EnvInferError::Empty);
    }
    // Shifting by l₀ first leaves the value unchanged and keeps constant
    // losses exactly zero after centering.
    let shifted: Vec<f64> = frozen_losses.iter().map(|v| v - frozen_losses[0]).collect();
    let mean = shifted.iter().sum::<f64>() / n as f64;
    let probs = stat_probs(tape, p, mode);
    let centered = tape.constant(Tensor::matrix(1, n, shifted.iter().map(|v| v - mean).collect())?);
    // Σᵢ Pᵢₑ (lᵢ − μ̄) = Tₑ − μ̄ Sₑ
    let dev = tape.matmul(centered, probs)?;
    let mass = tape.sum_rows(probs)?;
    let denom = tape.add_scalar(mass, MASS_EPS);
    let sq = tape.square(dev);
    let ratio = tape.div(sq, denom)?;
    let s = tape.sum(ratio);
    Ok(tape.scale(s, 1.0 / n as f64))
}

/// Component values of one L_EI evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EiLossTerms {
    pub ed: f64,
    pub li: f64,
    pub ip: Option<f64>,
    pub total: f64,
}

/// `ed + β·li + γ·ip`.
pub fn loss_ei(tape: &mut Tape, ed: Var, li: Option<Var>, ip: Option<Var>, beta: f64, gamma: f64) -> Result<Var, AutodiffError> {
    let mut total = ed;
    if let Some(li) = li {
        let t = tape.scale(li, beta);
        total = tape.add(total, t)?;
    }
    if let Some(ip) = ip {
        let t = tape.scale(ip, gamma);
        total = tape.add(total, t)?;
    }
    Ok(total)
}

/// Discrete labels used by L_LI: class indices, or quartile bins of real
/// targets.
#[derive(Clone, Debug, PartialEq)]
pub struct LiLabels {
    pub labels: Vec<usize>,
    pub n_classes: usize,
}

impl LiLabels {
    pub fn for_targets(targets: &Targets, bounds: Option<&[f64]>) -> Self {
        match targets {
            Targets::Classes { labels, n_classes } => Self {
                labels: labels.to_vec(),
                n_classes: *n_classes,
            },
            Targets::Real(t) => {
                let own;
                let bounds = match bounds {
                    Some(b) => b,
                    None => {
                        own = quartile_bounds(t.data());
                        &own
                    }
                };
                Self {
                    labels: discretize(t.data(), bounds),
                    n_classes: bounds.len() + 1,
                }
            }
        }
    }
}

/// The 25th, 50th and 75th percentiles (linear interpolation between order
/// statistics).
pub fn quartile_bounds(values: &[f64]) -> Vec<f64> {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    [0.25, 0.5, 0.75]
        .iter()
        .map(|&q| {
            if v.is_empty() {
                return 0.0;
            }
            let pos = q * (v.len() - 1) as f64;
            let lo = pos.floor() as usize;
            let hi = pos.ceil() as usize;
            v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
        })
        .collect()
}

/// Bin index = number of bounds strictly below the value.
pub fn discretize(values: &[f64], bounds: &[f64]) -> Vec<usize> {
    values
        .iter()
        .map(|&y| bounds.iter().filter(|&&b| y > b).count())
        .collect()
}

/// Inputs of one environment-inference step.
pub struct EiBatch<'a> {
    pub x: &'a Tensor,
    pub targets: &'a Targets,
    pub li: &'a LiLabels,
    /// Frozen Φ losses; `Some` switches L_IP on.
    pub il_losses: Option<&'a [f64]>,
}

/// Builds L_EI on a fresh tape and returns `(tape, bound, root, terms)`.
pub fn build_ei_objective(
    model: &EIModel,
    cfg: &EIConfig,
    batch: &EiBatch<'_>,
) -> Result<(Tape, BoundEi, Var, EiLossTerms), EnvInferError> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let x = tape.constant(batch.x.clone());
    let p = posterior_tracked(&mut tape, model, &bound, x, batch.targets)?;
    let ed = loss_ed(&mut tape, &p, cfg.w_thres)?;
    let li = if cfg.beta > 0.0 {
        Some(loss_li(&mut tape, &p, &batch.li.labels, batch.li.n_classes, cfg.stat_mode)?)
    } else {
        None
    };
    let ip = match batch.il_losses {
        Some(l) if cfg.gamma > 0.0 => Some(loss_ip(&mut tape, &p, l, cfg.stat_mode)?),
        _ => None,
    };
    let total = loss_ei(&mut tape, ed, li, ip, cfg.beta, cfg.gamma)?;
    let terms = EiLossTerms {
        ed: tape.value(ed).item(),
        li: li.map_or(0.0, |v| tape.value(v).item()),
        ip: ip.map(|v| tape.value(v).item()),
        total: tape.value(total).item(),
    };
    Ok((tape, bound, total, terms))
}

/// One optimiser step on L_EI over all of M_EI's parameters.
pub fn ei_step(
    model: &mut EIModel,
    opt: &mut OptimizerState,
    cfg: &EIConfig,
    batch: &EiBatch<'_>,
) -> Result<EiLossTerms, EnvInferError> {
    let (tape, bound, root, terms) = build_ei_objective(model, cfg, batch)?;
    if !terms.total.is_finite() {
        return Err(EnvInferError::NonFinite { what: "environment inference loss" });
    }
    let grads = tape.backward(root)?;
    model.store_grads(&bound, &grads)?;
    opt.step(&mut model.params_mut())?;
    Ok(terms)
}

/// Trains Ψ and head 0 on the pooled mean loss; other heads are untouched.
/// Returns the loss before each step.
pub fn pretrain_erm(
    model: &mut EIModel,
    x: &Tensor,
    targets: &Targets,
    steps: usize,
    lr: f64,
) -> Result<Vec<f64>, EnvInferError> {
    let mut opt = OptimizerState::adam(lr)?;
    let mut history = Vec::with_capacity(steps);
    for _ in 0..steps {
        let mut tape = Tape::new();
        let psi = model.psi.bind(&mut tape);
        let head = model.heads[0].bind(&mut tape);
        let xv = tape.constant(x.clone());
        let rep = model.encode(&mut tape, &psi, xv)?;
        let out = model.heads[0].forward(&mut tape, &head, rep)?;
        let l = per_sample_loss(&mut tape, out, targets)?;
        let root = tape.mean(l)?;
        let value = tape.value(root).item();
        if !value.is_finite() {
            return Err(EnvInferError::NonFinite { what: "pretraining loss" });
        }
        history.push(value);
        let grads = tape.backward(root)?;
        model.psi.store_grads(&psi, &grads)?;
        model.heads[0].store_grads(&head, &grads)?;
        let (psi_m, heads) = (&mut model.psi, &mut model.heads);
        let mut params: Vec<&mut Param> = psi_m.params_mut();
        params.extend(heads[0].params_mut());
        opt.step(&mut params)?;
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tracked_from_losses(losses: &[Vec<f64>], tau: f64) -> (Tape, TrackedPosterior) {
        // Feed the losses in as "outputs" whose mse against zero is the loss.
        let mut tape = Tape::new();
        let n = losses.len();
        let k = losses[0].len();
        let outs: Vec<Var> = (0..k)
            .map(|e| tape.leaf(Tensor::matrix(n, 1, losses.iter().map(|r| r[e].sqrt()).collect()).unwrap()))
            .collect();
        let p = posterior_from_outputs(&mut tape, &outs, &Targets::real(vec![0.0; n]), tau).unwrap();
        (tape, p)
    }

    fn tracked_from_probs(rows: &[Vec<f64>]) -> (Tape, TrackedPosterior) {
        // τ = 1 and losses −ln p reproduce p exactly.
        let losses: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().map(|p| -p.ln()).collect()).collect();
        tracked_from_losses(&losses, 1.0)
    }

    #[test]
    fn equal_losses_give_uniform_rows() {
        let (tape, p) = tracked_from_losses(&[vec![0.3, 0.3, 0.3]], 0.2);
        for &v in tape.value(p.probs).data() {
            assert_close!(v, 1.0 / 3.0, 1e-12);
        }
    }

    #[test]
    fn hand_posterior_row() {
        let tau = 0.2;
        let (tape, p) = tracked_from_losses(&[vec![0.0, tau * 3f64.ln()]], tau);
        let row = tape.value(p.probs).row(0).to_vec();
        assert_close!(row[0], 0.75, 1e-12);
        assert_close!(row[1], 0.25, 1e-12);
    }

    #[test]
    fn small_tau_approaches_one_hot() {
        let (tape, p) = tracked_from_losses(&[vec![0.5, 0.4, 0.9]], 1e-4);
        let row = tape.value(p.probs).row(0).to_vec();
        assert_close!(row[1], 1.0, 1e-12);
        assert_eq!(p.assignments, vec![1]);
    }

    #[test]
    fn ties_assign_lowest_index() {
        let (_, p) = tracked_from_losses(&[vec![0.2, 0.2], vec![0.5, 0.1]], 0.3);
        assert_eq!(p.assignments, vec![0, 1]);
        assert_eq!(p.sizes, vec![1, 1]);
    }

    #[test]
    fn ed_weight_examples() {
        assert_eq!(ed_weights(&[0, 1, 0, 1], &[2, 2], 2.0), vec![1.0; 4]);
        let w = ed_weights(&[0, 0, 0, 1], &[3, 1], 5.0);
        assert_close!(w[0], 2.0 / 3.0, 1e-15);
        assert_close!(w[3], 2.0, 1e-15);
        let w = ed_weights(&[0, 0, 0, 1], &[3, 1], 1.5);
        assert_close!(w[3], 1.5, 1e-15);
    }

    #[test]
    fn ed_is_zero_for_one_hot_rows() {
        let (mut tape, p) = tracked_from_losses(&[vec![0.0, 1.0], vec![1.0, 0.0]], 1e-4);
        let ed = loss_ed(&mut tape, &p, 2.0).unwrap();
        assert_close!(tape.value(ed).item(), 0.0, 1e-12);
    }

    #[test]
    fn li_uniform_binary() {
        let (mut tape, p) = tracked_from_probs(&[vec![0.5, 0.5], vec![0.5, 0.5]]);
        let li = loss_li(&mut tape, &p, &[0, 1], 2, StatMode::Soft).unwrap();
        assert_close!(tape.value(li).item(), -(2f64.ln()), 1e-12);
    }

    #[test]
    fn li_label_aligned_is_zero() {
        let (mut tape, p) = tracked_from_losses(&[vec![0.0, 9.0], vec![9.0, 0.0], vec![0.0, 9.0]], 1e-3);
        let li = loss_li(&mut tape, &p, &[0, 1, 0], 2, StatMode::Soft).unwrap();
        assert_close!(tape.value(li).item(), 0.0, 1e-12);
    }

    #[test]
    fn li_single_environment_has_no_gradient() {
        let mut tape = Tape::new();
        let out = tape.leaf(Tensor::matrix(3, 1, vec![0.3, 0.8, -0.2]).unwrap());
        let p = posterior_from_outputs(&mut tape, &[out], &Targets::real(vec![0.0; 3]), 0.5).unwrap();
        let li = loss_li(&mut tape, &p, &[0, 1, 1], 2, StatMode::Soft).unwrap();
        let py: [f64; 2] = [1.0 / 3.0, 2.0 / 3.0];
        let expect: f64 = py.iter().map(|p| p * p.ln()).sum();
        assert_close!(tape.value(li).item(), expect, 1e-12);
        let g = tape.backward(li).unwrap();
        assert!(g.wrt(out).data().iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn ip_hand_variance() {
        // Two hard environments of two rows each, means 1 and 3.
        let (mut tape, p) = tracked_from_losses(&[vec![0.0, 50.0], vec![0.0, 50.0], vec![50.0, 0.0], vec![50.0, 0.0]], 1e-3);
        let ip = loss_ip(&mut tape, &p, &[0.5, 1.5, 2.0, 4.0], StatMode::Soft).unwrap();
        assert_close!(tape.value(ip).item(), 1.0, 1e-9);
    }

    #[test]
    fn ip_constant_losses_vanish_with_zero_gradient() {
        let mut tape = Tape::new();
        let out0 = tape.leaf(Tensor::matrix(3, 1, vec![0.1, 0.7, 0.4]).unwrap());
        let out1 = tape.leaf(Tensor::matrix(3, 1, vec![0.9, 0.2, 0.3]).unwrap());
        let p = posterior_from_outputs(&mut tape, &[out0, out1], &Targets::real(vec![0.0; 3]), 0.3).unwrap();
        let ip = loss_ip(&mut tape, &p, &[0.7; 3], StatMode::Soft).unwrap();
        assert_eq!(tape.value(ip).item(), 0.0);
        let g = tape.backward(ip).unwrap();
        assert!(g.wrt(out0).data().iter().chain(g.wrt(out1).data()).all(|&v| v == 0.0));
    }

    #[test]
    fn ei_combination() {
        let mut tape = Tape::new();
        let (a, b, c) = (
            tape.constant(Tensor::scalar(1.0)),
            tape.constant(Tensor::scalar(2.0)),
            tape.constant(Tensor::scalar(3.0)),
        );
        let t = loss_ei(&mut tape, a, Some(b), Some(c), 0.5, 2.0).unwrap();
        assert_close!(tape.value(t).item(), 8.0, 1e-15);
        let t = loss_ei(&mut tape, a, None, None, 0.0, 0.0).unwrap();
        assert_eq!(tape.value(t).item(), 1.0);
    }

    #[test]
    fn quartiles_and_bins() {
        let v: Vec<f64> = (0..9).map(|i| i as f64).collect();
        let q = quartile_bounds(&v);
        assert_eq!(q, vec![2.0, 4.0, 6.0]);
        assert_eq!(discretize(&[-1.0, 2.0, 2.5, 7.0], &q), vec![0, 0, 1, 3]);
    }

    #[test]
    fn posterior_csv_layout() {
        let post = EnvPosterior::from_probs(Tensor::matrix(2, 2, vec![0.25, 0.75, 0.5, 0.5]).unwrap());
        let mut buf = Vec::new();
        post.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text, "row,env,p0,p1\n0,1,0.25,0.75\n1,0,0.5,0.5\n");
    }
}
