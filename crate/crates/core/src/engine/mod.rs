//! Joint alternating optimisation of the two models, evaluation, reports,
//! diagnostics and sweeps.

mod diagnostics;
mod eval;
mod report;
mod sweep;

pub use diagnostics::{
    conditional_mutual_information, entropy_diagnostics, env_agreement, label_alignment, mutual_information,
    DiagnosticResult, EPS_INV, EPS_VAR,
};
pub use eval::{evaluate, validation_score, EnvMetric, Evaluation, MetricKind, ValidationScore};
pub use report::{csv_header, csv_row, EnvSummary, RunReport, RunStatus};
pub use sweep::{mean_sd, sweep, SweepAxis, SweepReport, SweepRow};

use rand::seq::index;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, OptimizerState};
use crate::config::{Ablation, BatchPolicy, ExperimentConfig, Method, ModelConfig, Splits};
use crate::datagen::{DataError, LabeledDataset};
use crate::envinfer::{
    self, ei_step, posterior, pretrain_erm, quartile_bounds, EIConfig, EiBatch, EiLossTerms, EnvInferError,
    EnvPosterior, LiLabels,
};
use crate::invlearn::{
    anneal_lambda, build_oracle_envs, confidence_weights, il_step, train_erm, train_irm, ILConfig, IlTerms,
    InvLearnError,
};
use crate::loss::per_sample_loss_values;
use crate::nets::{EIModel, EiArch, ILModel, MlpSpec, NetError};
use crate::rng::{self, stream};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("invalid plan: {0}")]
    Config(String),
    #[error("training diverged during {phase} (round {round}): {message}")]
    Diverged { phase: &'static str, round: usize, message: String },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    EnvInfer(#[from] EnvInferError),
    #[error(transparent)]
    InvLearn(#[from] InvLearnError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

/// Everything one training run needs besides the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainPlan {
    pub ei: EIConfig,
    pub il: ILConfig,
    pub model: ModelConfig,
    pub rounds: usize,
    pub total_steps: usize,
    pub batch: BatchPolicy,
    pub ablation: Ablation,
    pub seed: u64,
}

impl TrainPlan {
    pub fn from_config(cfg: &ExperimentConfig, seed: u64) -> Self {
        Self {
            ei: cfg.ei.clone(),
            il: cfg.il.clone(),
            model: cfg.model.clone(),
            rounds: cfg.plan.rounds,
            total_steps: cfg.plan.total_steps,
            batch: cfg.plan.batch,
            ablation: cfg.plan.ablation.clone(),
            seed,
        }
    }

    /// EI configuration after ablation switches are applied.
    pub fn effective_ei(&self) -> EIConfig {
        let mut ei = self.ei.clone();
        if self.ablation.no_label_independence {
            ei.beta = 0.0;
        }
        if self.ablation.no_invariance_preserving {
            ei.gamma = 0.0;
        }
        if let Some(k) = self.ablation.k {
            ei.k = k;
        }
        ei
    }

    pub fn ei_steps_per_round(&self) -> usize {
        self.ei
            .ei_steps_per_round
            .unwrap_or(self.total_steps / (2 * self.rounds.max(1)))
    }

    pub fn il_steps_per_round(&self) -> usize {
        self.il
            .il_steps_per_round
            .unwrap_or(self.total_steps / (2 * self.rounds.max(1)))
    }

    /// Φ updates for the single-model baselines: the same count M_IL gets.
    pub fn baseline_steps(&self) -> usize {
        self.rounds * self.il_steps_per_round()
    }

    pub fn validate(&self) -> Result<(), EngineError> {
        if self.rounds == 0 {
            return Err(EngineError::Config("rounds must be at least 1".into()));
        }
        if let BatchPolicy::MiniBatch { size: 0 } = self.batch {
            return Err(EngineError::Config("mini-batch size must be positive".into()));
        }
        if self.model.psi_hidden.is_empty() {
            return Err(EngineError::Config("psi_hidden must not be empty".into()));
        }
        self.effective_ei().validate()?;
        self.il.validate()?;
        Ok(())
    }

    fn phi_spec(&self, d: usize, out: usize) -> MlpSpec {
        MlpSpec::new(d, self.model.phi_hidden.clone(), out)
    }

    fn arch(&self) -> EiArch {
        EiArch {
            psi_hidden: self.model.psi_hidden.clone(),
            head_hidden: self.model.head_hidden.clone(),
            head_init_scale: self.model.head_init_scale,
        }
    }
}

/// What happened in one joint round.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundLog {
    pub round: usize,
    pub ei_first: EiLossTerms,
    pub ei_last: EiLossTerms,
    pub sizes: Vec<usize>,
    pub confidences: Vec<f64>,
    pub weights: Vec<f64>,
    pub il_last: IlTerms,
}

#[derive(Clone, Debug)]
pub struct JointOutcome {
    pub ei: EIModel,
    pub il: ILModel,
    pub posterior: EnvPosterior,
    pub rounds: Vec<RoundLog>,
    pub pretrain_losses: Vec<f64>,
}

/// Row subsets for each optimisation step under the batch policy.
struct Batcher {
    policy: BatchPolicy,
    n: usize,
    rng: rng::Rng,
}

impl Batcher {
    fn next(&mut self) -> Option<Vec<usize>> {
        match self.policy {
            BatchPolicy::FullBatch => None,
            BatchPolicy::MiniBatch { size } if size >= self.n => None,
            BatchPolicy::MiniBatch { size } => {
                let mut rows = index::sample(&mut self.rng, self.n, size).into_vec();
                rows.sort_unstable();
                Some(rows)
            }
        }
    }
}

fn diverged(phase: &'static str, round: usize, e: impl std::fmt::Display) -> EngineError {
    EngineError::Diverged {
        phase,
        round,
        message: e.to_string(),
    }
}

/// Pre-trains M_EI, then alternates L_EI minimisation, environment
/// assignment and L_IL minimisation for the configured number of rounds.
pub fn joint_train(plan: &TrainPlan, train: &LabeledDataset) -> Result<JointOutcome, EngineError> {
    joint_train_observed(plan, train, &mut |_, _| {})
}

/// [`joint_train`] that hands every round's log and the posterior used for
/// its invariant-learning phase to `observe`.
pub fn joint_train_observed(
    plan: &TrainPlan,
    train: &LabeledDataset,
    observe: &mut dyn FnMut(&RoundLog, &EnvPosterior),
) -> Result<JointOutcome, EngineError> {
    plan.validate()?;
    let ei_cfg = plan.effective_ei();
    let (x, targets) = (&train.x, &train.targets);
    let (d, out) = (train.d(), targets.output_dim());
    let mut ei = EIModel::new(d, out, &plan.arch(), ei_cfg.k, ei_cfg.tau, plan.seed)?;
    let mut il = ILModel::new(&plan.phi_spec(d, out), plan.seed)?;

    let bounds = targets.values().map(quartile_bounds);
    let li = LiLabels::for_targets(targets, bounds.as_deref());

    let pretrain_losses = pretrain_erm(&mut ei, x, targets, ei_cfg.pretrain_steps, ei_cfg.lr).map_err(|e| match e {
        EnvInferError::NonFinite { .. } => diverged("pre-training", 0, e),
        other => other.into(),
    })?;

    let mut ei_opt = OptimizerState::adam(ei_cfg.lr)?;
    let mut il_opt = OptimizerState::adam(plan.il.lr)?;
    let mut batcher = Batcher {
        policy: plan.batch,
        n: train.n(),
        rng: rng::seeded(plan.seed, stream::BATCHES),
    };
    let (ei_steps, il_steps) = (plan.ei_steps_per_round(), plan.il_steps_per_round());
    let total_il = plan.rounds * il_steps;
    let mut il_step_count = 0;
    let mut rounds = Vec::with_capacity(plan.rounds);

    for round in 0..plan.rounds {
        if plan.il.reset_each_round && round > 0 {
            il = ILModel::new(&plan.phi_spec(d, out), rng::derive(plan.seed, round as u64))?;
            il_opt = OptimizerState::adam(plan.il.lr)?;
        }
        // Φ has had no updates before the first round, so L_IP waits.
        let il_losses = if round > 0 && ei_cfg.gamma > 0.0 {
            Some(per_sample_loss_values(&il.predict(x)?, targets)?)
        } else {
            None
        };
        let mut first = None;
        let mut last = EiLossTerms::default();
        for _ in 0..ei_steps {
            let terms = match batcher.next() {
                None => {
                    let batch = EiBatch {
                        x,
                        targets,
                        li: &li,
                        il_losses: il_losses.as_deref(),
                    };
                    ei_step(&mut ei, &mut ei_opt, &ei_cfg, &batch)
                }
                Some(rows) => {
                    let (bx, bt) = (x.select_rows(&rows), targets.select(&rows));
                    let bli = LiLabels {
                        labels: rows.iter().map(|&r| li.labels[r]).collect(),
                        n_classes: li.n_classes,
                    };
                    let bl: Option<Vec<f64>> = il_losses.as_ref().map(|l| rows.iter().map(|&r| l[r]).collect());
                    let batch = EiBatch {
                        x: &bx,
                        targets: &bt,
                        li: &bli,
                        il_losses: bl.as_deref(),
                    };
                    ei_step(&mut ei, &mut ei_opt, &ei_cfg, &batch)
                }
            }
            .map_err(|e| match e {
                EnvInferError::NonFinite { .. } => diverged("environment inference", round, e),
                other => other.into(),
            })?;
            first.get_or_insert(terms);
            last = terms;
        }

        let post = posterior(&ei, x, targets)?;
        let weights = confidence_weights(&post)?;
        let parts = post.partition();
        let mut il_last = IlTerms::default();
        for _ in 0..il_steps {
            let lambda_t = anneal_lambda(il_step_count, total_il, plan.il.anneal_fraction, plan.il.lambda);
            il_last = match batcher.next() {
                None => il_step(&mut il, &mut il_opt, x, targets, &parts, &weights, lambda_t, il_step_count),
                Some(rows) => {
                    let (bx, bt) = (x.select_rows(&rows), targets.select(&rows));
                    let bparts = envinfer::partition(&rows.iter().map(|&r| post.assignments[r]).collect::<Vec<_>>(), post.k());
                    il_step(&mut il, &mut il_opt, &bx, &bt, &bparts, &weights, lambda_t, il_step_count)
                }
            }
            .map_err(|e| match e {
                InvLearnError::NonFinite { .. } => diverged("invariant learning", round, e),
                other => other.into(),
            })?;
            il_step_count += 1;
        }
        log::debug!(
            "round {round}: L_EI {:.4} -> {:.4}, sizes {:?}, L_IL {:.4}",
            first.unwrap_or_default().total,
            last.total,
            post.sizes,
            il_last.total
        );
        let log = RoundLog {
            round,
            ei_first: first.unwrap_or_default(),
            ei_last: last,
            sizes: post.sizes.clone(),
            confidences: weights.confidences,
            weights: weights.weights,
            il_last,
        };
        observe(&log, &post);
        rounds.push(log);
    }
    let posterior = posterior(&ei, x, targets)?;
    Ok(JointOutcome {
        ei,
        il,
        posterior,
        rounds,
        pretrain_losses,
    })
}

/// Trained models of one method on one seed.
#[derive(Clone, Debug)]
pub struct MethodOutcome {
    pub il: ILModel,
    pub ei: Option<EIModel>,
    pub posterior: Option<EnvPosterior>,
    pub rounds: Vec<RoundLog>,
}

pub fn train_method(method: Method, plan: &TrainPlan, train: &LabeledDataset) -> Result<MethodOutcome, EngineError> {
    plan.validate()?;
    let (d, out) = (train.d(), train.targets.output_dim());
    let steps = plan.baseline_steps();
    let wrap = |e: InvLearnError| match e {
        InvLearnError::NonFinite { .. } => diverged("baseline training", 0, e),
        other => other.into(),
    };
    match method {
        Method::Ednil => {
            let j = joint_train(plan, train)?;
            Ok(MethodOutcome {
                il: j.il,
                ei: Some(j.ei),
                posterior: Some(j.posterior),
                rounds: j.rounds,
            })
        }
        Method::Erm => {
            let mut il = ILModel::new(&plan.phi_spec(d, out), plan.seed)?;
            train_erm(&mut il, &train.x, &train.targets, steps, plan.il.lr).map_err(wrap)?;
            Ok(MethodOutcome {
                il,
                ei: None,
                posterior: None,
                rounds: vec![],
            })
        }
        Method::IrmOracle => {
            let (env, k) = build_oracle_envs(train)?;
            let mut il = ILModel::new(&plan.phi_spec(d, out), plan.seed)?;
            train_irm(&mut il, &train.x, &train.targets, &env, k, &plan.il, steps).map_err(wrap)?;
            Ok(MethodOutcome {
                il,
                ei: None,
                posterior: None,
                rounds: vec![],
            })
        }
    }
}

/// Builds the data for `seed`, trains `method`, evaluates and assembles the
/// report. Divergence produces a report with status `diverged`.
pub fn run(cfg: &ExperimentConfig, method: Method, seed: u64) -> Result<(RunReport, Option<MethodOutcome>), EngineError> {
    let splits = crate::config::build_splits(&cfg.dataset, seed, cfg.plan.validation_fraction)?;
    run_on_splits(cfg, method, seed, &splits)
}

pub fn run_on_splits(
    cfg: &ExperimentConfig,
    method: Method,
    seed: u64,
    splits: &Splits,
) -> Result<(RunReport, Option<MethodOutcome>), EngineError> {
    let plan = TrainPlan::from_config(cfg, seed);
    let mut report = RunReport::skeleton(cfg, method, seed, &splits.train);
    let outcome = match train_method(method, &plan, &splits.train) {
        Ok(o) => o,
        Err(e @ EngineError::Diverged { .. }) => {
            report.status = RunStatus::Diverged;
            report.error = Some(e.to_string());
            return Ok((report, None));
        }
        Err(e) => return Err(e),
    };
    let tests: Vec<(&str, &LabeledDataset)> = splits.tests.iter().map(|(n, d)| (n.as_str(), d)).collect();
    let evaluation = evaluate(&outcome.il, &tests)?;
    report.metric = evaluation.kind;
    report.test = evaluation.per_env;
    report.worst_case = evaluation.worst;
    if let Some(ei) = &outcome.ei {
        report.validation = Some(validation_score(ei, &outcome.il, &splits.val)?);
    }
    if let Some(post) = &outcome.posterior {
        let weights = confidence_weights(post)?;
        report.environments = Some(EnvSummary {
            kind: "learned".into(),
            sizes: post.sizes.clone(),
            confidences: weights.confidences,
            weights: weights.weights,
        });
        if splits.train.oracle.is_some() {
            report.diagnostics = Some(entropy_diagnostics(&post.assignments, post.k(), &splits.train, 4)?);
        }
    } else {
        report.environments = Some(EnvSummary::pooled_or_oracle(method, &splits.train)?);
    }
    report.rounds = outcome.rounds.clone();
    Ok((report, Some(outcome)))
}
