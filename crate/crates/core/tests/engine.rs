use ednil::autodiff::{OptimizerState, Tensor};
use ednil::config::{build_splits, ExperimentConfig, Method};
use ednil::datagen::{LabeledDataset, Provenance};
use ednil::engine::{evaluate, run, run_on_splits, RunStatus};
use ednil::envinfer::{ei_step, posterior, pretrain_erm, EIConfig, EiBatch, LiLabels};
use ednil::loss::Targets;
use ednil::nets::{EIModel, EiArch, ILModel, MlpSpec};
use ednil::rng;
use rand::Rng as _;

fn small_bits() -> ExperimentConfig {
    serde_json::from_str(
        r#"{
            "dataset": {"generator": "cmnist-bits", "n": 800, "n_test": 400},
            "plan": {"rounds": 2, "total_steps": 40},
            "ei": {"pretrain_steps": 10}
        }"#,
    )
    .unwrap()
}

#[test]
fn repeated_runs_are_bit_identical() {
    let cfg = small_bits();
    for method in [Method::Ednil, Method::Erm, Method::IrmOracle] {
        let (a, oa) = run(&cfg, method, 3).unwrap();
        let (b, ob) = run(&cfg, method, 3).unwrap();
        assert_eq!(a.status, RunStatus::Completed);
        assert_eq!(a.to_json(), b.to_json(), "{method:?}");
        let (oa, ob) = (oa.unwrap(), ob.unwrap());
        assert_eq!(oa.il, ob.il);
        assert_eq!(oa.ei, ob.ei);
    }
}

#[test]
fn seeds_change_the_outcome() {
    let cfg = small_bits();
    let (a, _) = run(&cfg, Method::Ednil, 1).unwrap();
    let (b, _) = run(&cfg, Method::Ednil, 2).unwrap();
    assert_ne!(a.to_json(), b.to_json());
    assert_eq!(a.config_hash, b.config_hash);
}

#[test]
fn worst_case_is_the_minimum_environment_accuracy() {
    let cfg = small_bits();
    let splits = build_splits(&cfg.dataset, 0, cfg.plan.validation_fraction).unwrap();
    let il = ILModel::new(&MlpSpec::new(splits.train.d(), vec![8], 2), 5).unwrap();
    let envs: Vec<(&str, &LabeledDataset)> = splits.tests.iter().map(|(n, d)| (n.as_str(), d)).collect();
    let ev = evaluate(&il, &envs).unwrap();
    let min = ev.per_env.iter().map(|m| m.value).fold(f64::INFINITY, f64::min);
    assert_eq!(ev.worst, min);

    let (report, _) = run_on_splits(&cfg, Method::Erm, 0, &splits).unwrap();
    let min = report.test.iter().map(|m| m.value).fold(f64::INFINITY, f64::min);
    assert_eq!(report.worst_case, min);
}

/// Two interleaved regression modes, `y = x` and `y = −x`.
fn two_mode_toy(n: usize, seed: u64) -> (LabeledDataset, Vec<usize>) {
    let mut r = rng::seeded(seed, 0);
    let mut x = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    let mut mode = Vec::with_capacity(n);
    for i in 0..n {
        let v: f64 = r.random_range(-2.0..2.0);
        let m = i % 2;
        x.push(v);
        y.push(if m == 0 { v } else { -v });
        mode.push(m);
    }
    let prov = Provenance {
        generator: "two-mode".into(),
        params: serde_json::Value::Null,
        seed,
    };
    let ds = LabeledDataset::new(Tensor::matrix(n, 1, x).unwrap(), Targets::real(y), None, prov).unwrap();
    (ds, mode)
}

#[test]
fn diversification_alone_sharpens_two_modes() {
    let (ds, _) = two_mode_toy(200, 4);
    let arch = EiArch {
        psi_hidden: vec![16],
        head_hidden: vec![],
        head_init_scale: 1.0,
    };
    let cfg = EIConfig {
        tau: 0.1,
        beta: 0.0,
        gamma: 0.0,
        lr: 1e-2,
        ..EIConfig::default()
    };
    let mut model = EIModel::new(1, 1, &arch, 2, cfg.tau, 0).unwrap();
    let li = LiLabels::for_targets(&ds.targets, None);
    let batch = EiBatch {
        x: &ds.x,
        targets: &ds.targets,
        li: &li,
        il_losses: None,
    };
    let mut opt = OptimizerState::adam(cfg.lr).unwrap();
    for _ in 0..300 {
        ei_step(&mut model, &mut opt, &cfg, &batch).unwrap();
    }
    let p = posterior(&model, &ds.x, &ds.targets).unwrap();
    let mean_max = (0..p.n()).map(|i| p.probs.row(i).iter().cloned().fold(0.0, f64::max)).sum::<f64>() / p.n() as f64;
    assert!(mean_max >= 0.95, "mean max posterior {mean_max}");
}

#[test]
fn pretraining_leaves_other_heads_untouched() {
    let (ds, _) = two_mode_toy(64, 1);
    let arch = EiArch {
        psi_hidden: vec![8],
        head_hidden: vec![],
        head_init_scale: 1.0,
    };
    let mut model = EIModel::new(1, 1, &arch, 3, 0.2, 2).unwrap();
    let before = model.clone();
    let losses = pretrain_erm(&mut model, &ds.x, &ds.targets, 30, 1e-2).unwrap();
    assert!(losses.last() < losses.first());
    assert_ne!(model.psi, before.psi);
    assert_ne!(model.heads[0], before.heads[0]);
    assert_eq!(model.heads[1..], before.heads[1..]);

    let mut same = before.clone();
    pretrain_erm(&mut same, &ds.x, &ds.targets, 0, 1e-2).unwrap();
    assert_eq!(same, before);
}
