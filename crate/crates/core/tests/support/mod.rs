//! Independent oracles for the numeric core, shared by the unit-level
//! integration tests and the acceptance run.
#![allow(dead_code)]

use std::sync::Arc;

use ednil::autodiff::{Tape, Tensor, Var};
use ednil::engine::mutual_information;
use ednil::envinfer::{loss_li, StatMode, TrackedPosterior};
use ednil::invlearn::{irm_penalty, risk_at_multiplier};
use ednil::loss::Targets;
use ednil::nets::{init_params, MlpSpec};
use ednil::rng;
use rand::Rng as _;

pub const H: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-4;

type Build = fn(&mut Tape, &[Var], &Case) -> Var;

/// Random fixtures shared by a builder and its replays.
struct Case {
    n: usize,
    k: usize,
    labels: Arc<Vec<usize>>,
    rows: Arc<Vec<usize>>,
    target: Arc<Tensor>,
}

fn uniform(rng: &mut rng::Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let len = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..len).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Values bounded away from the ReLU kink.
fn off_kink(rng: &mut rng::Rng, shape: &[usize]) -> Tensor {
    let len = shape.iter().product();
    let data = (0..len)
        .map(|_| {
            let v = rng.random_range(0.1..1.0);
            if rng.random_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// `Σ c ⊙ out` with fixed random `c`, so every output element matters.
fn project(tape: &mut Tape, out: Var, seed: u64) -> Var {
    let shape = tape.value(out).shape().to_vec();
    let mut r = rng::seeded(seed, 99);
    let c = tape.constant(uniform(&mut r, &shape, -1.0, 1.0));
    let prod = tape.mul(out, c).unwrap();
    tape.sum(prod)
}

fn ops() -> Vec<(&'static str, Build)> {
    vec![
        ("add", |t, v, _| t.add(v[0], v[1]).unwrap()),
        ("sub", |t, v, _| t.sub(v[0], v[1]).unwrap()),
        ("mul", |t, v, _| t.mul(v[0], v[1]).unwrap()),
        ("div", |t, v, _| {
            let d = t.square(v[1]);
            let d = t.add_scalar(d, 0.5);
            t.div(v[0], d).unwrap()
        }),
        ("add_scalar", |t, v, _| t.add_scalar(v[0], 0.7)),
        ("scale", |t, v, _| t.scale(v[0], -1.3)),
        ("neg", |t, v, _| t.neg(v[0])),
        ("scale_by", |t, v, _| {
            let s = t.sum(v[1]);
            t.scale_by(s, v[0]).unwrap()
        }),
        ("matmul", |t, v, _| {
            let b = t.reshape(v[1], &[t.value(v[1]).cols(), t.value(v[1]).rows()]).unwrap();
            t.matmul(v[0], b).unwrap()
        }),
        ("add_row_broadcast", |t, v, _| {
            let bias = t.select_rows(v[1], Arc::new(vec![0])).unwrap();
            let k = t.value(bias).len();
            let bias = t.reshape(bias, &[k]).unwrap();
            t.add_row_broadcast(v[0], bias).unwrap()
        }),
        ("relu", |t, v, _| t.relu(v[0])),
        ("exp", |t, v, _| t.exp(v[0])),
        ("log", |t, v, _| {
            let s = t.square(v[0]);
            let s = t.add_scalar(s, 0.2);
            t.log(s)
        }),
        ("square", |t, v, _| t.square(v[0])),
        ("xlogx", |t, v, _| {
            let s = t.square(v[0]);
            let s = t.add_scalar(s, 0.1);
            t.xlogx(s)
        }),
        ("sum", |t, v, _| t.sum(v[0])),
        ("mean", |t, v, _| t.mean(v[0]).unwrap()),
        ("sum_rows", |t, v, _| t.sum_rows(v[0]).unwrap()),
        ("softmax_rows", |t, v, _| t.softmax_rows(v[0]).unwrap()),
        ("log_softmax_rows", |t, v, _| t.log_softmax_rows(v[0]).unwrap()),
        ("cross_entropy", |t, v, c| t.cross_entropy(v[0], c.labels.clone()).unwrap()),
        ("mse", |t, v, c| t.mse(v[0], c.target.clone()).unwrap()),
        ("gather_cols", |t, v, c| t.gather_cols(v[0], c.labels.clone()).unwrap()),
        ("select_rows", |t, v, c| t.select_rows(v[0], c.rows.clone()).unwrap()),
        ("concat_cols", |t, v, c| {
            let a = t.gather_cols(v[0], c.labels.clone()).unwrap();
            let b = t.gather_cols(v[1], c.labels.clone()).unwrap();
            t.concat_cols(&[a, b, a]).unwrap()
        }),
        ("reshape", |t, v, c| t.reshape(v[0], &[c.k, c.n]).unwrap()),
        ("mlp", |t, v, _| {
            let b = t.reshape(v[1], &[t.value(v[1]).cols(), t.value(v[1]).rows()]).unwrap();
            let h = t.matmul(v[0], b).unwrap();
            let h = t.relu(h);
            let h = t.log_softmax_rows(h).unwrap();
            t.mean(h).unwrap()
        }),
    ]
}

fn evaluate(build: Build, inputs: &[Tensor], case: &Case, seed: u64) -> (Tape, Vec<Var>, Var) {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
    let out = build(&mut tape, &vars, case);
    let root = project(&mut tape, out, seed);
    (tape, vars, root)
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

/// Checks `instances` random op instances, cycling through the catalogue.
/// Returns the worst relative error seen.
pub fn fd_suite(instances: u64) -> Result<f64, String> {
    let ops = ops();
    let mut worst = 0.0f64;
    for inst in 0..instances {
        let (name, build) = ops[inst as usize % ops.len()];
        let seed = rng::derive(7, inst);
        let mut r = rng::seeded(seed, 0);
        let n = r.random_range(2..5);
        let k = r.random_range(2..4);
        let case = Case {
            n,
            k,
            labels: Arc::new((0..n).map(|_| r.random_range(0..k)).collect()),
            rows: Arc::new((0..n + 1).map(|_| r.random_range(0..n)).collect()),
            target: Arc::new(uniform(&mut r, &[n * k], -1.0, 1.0)),
        };
        let inputs = vec![off_kink(&mut r, &[n, k]), off_kink(&mut r, &[n, k])];

        let (tape, vars, root) = evaluate(build, &inputs, &case, seed);
        let grads = tape.backward(root).map_err(|e| e.to_string())?;
        for (which, x) in inputs.iter().enumerate() {
            let analytic = grads.wrt(vars[which]);
            for j in 0..x.len() {
                let mut probe = inputs.clone();
                probe[which].data_mut()[j] = x.data()[j] + H;
                let (tp, _, rp) = evaluate(build, &probe, &case, seed);
                let up = tp.value(rp).item();
                probe[which].data_mut()[j] = x.data()[j] - H;
                let (tm, _, rm) = evaluate(build, &probe, &case, seed);
                let down = tm.value(rm).item();
                let numeric = (up - down) / (2.0 * H);
                let err = rel_err(analytic.data()[j], numeric);
                worst = worst.max(err);
                if err > REL_TOL {
                    return Err(format!(
                        "{name} instance {inst} input {which}[{j}]: analytic {} vs numeric {numeric}",
                        analytic.data()[j]
                    ));
                }
            }
        }
    }
    Ok(worst)
}

/// Closed-form IRM penalty against `(dR/dw at w = 1)²` by central
/// differences, on random networks for both loss kinds.
pub fn irm_penalty_suite(instances: u64) -> Result<f64, String> {
    let mut worst = 0.0f64;
    for inst in 0..instances {
        let seed = rng::derive(11, inst);
        let mut r = rng::seeded(seed, 0);
        let n = r.random_range(3..20);
        let d = r.random_range(1..5);
        let classify = inst % 2 == 0;
        let n_classes = r.random_range(2..4);
        let targets = if classify {
            Targets::classes((0..n).map(|_| r.random_range(0..n_classes)).collect(), n_classes)
        } else {
            Targets::real((0..n).map(|_| r.random_range(-2.0..2.0)).collect())
        };
        let x = uniform(&mut r, &[n, d], -2.0, 2.0);
        let net = init_params(&MlpSpec::new(d, vec![6], targets.output_dim()), seed).map_err(|e| e.to_string())?;
        let z = net.predict(&x).map_err(|e| e.to_string())?;

        let mut tape = Tape::new();
        let zv = tape.constant(z.clone());
        let pen = irm_penalty(&mut tape, zv, &targets).map_err(|e| e.to_string())?;
        let closed = tape.value(pen).item();
        let risk = |w: f64| risk_at_multiplier(&z, &targets, w).unwrap();
        let g = (risk(1.0 + H) - risk(1.0 - H)) / (2.0 * H);
        let numeric = g * g;
        let err = (closed - numeric).abs() / closed.abs().max(numeric.abs()).max(1e-6);
        worst = worst.max(err);
        if err > REL_TOL {
            return Err(format!("instance {inst} (classify {classify}): closed {closed} vs numeric {numeric}"));
        }
    }
    Ok(worst)
}

/// Brute-force plug-in `Î(Y;E)` from a full joint count table.
fn brute_force_mi(y: &[usize], e: &[usize], ny: usize, ne: usize) -> f64 {
    let n = y.len() as f64;
    let mut joint = vec![vec![0.0; ne]; ny];
    for (&a, &b) in y.iter().zip(e) {
        joint[a][b] += 1.0;
    }
    let py: Vec<f64> = joint.iter().map(|row| row.iter().sum::<f64>() / n).collect();
    let pe: Vec<f64> = (0..ne).map(|b| joint.iter().map(|row| row[b]).sum::<f64>() / n).collect();
    let mut mi = 0.0;
    for a in 0..ny {
        for b in 0..ne {
            let p = joint[a][b] / n;
            if p > 0.0 {
                mi += p * (p / (py[a] * pe[b])).ln();
            }
        }
    }
    mi
}

fn entropy(y: &[usize], ny: usize) -> f64 {
    let n = y.len() as f64;
    let mut c = vec![0.0; ny];
    for &a in y {
        c[a] += 1.0;
    }
    -c.iter().filter(|&&v| v > 0.0).map(|&v| (v / n) * (v / n).ln()).sum::<f64>()
}

/// Hard posterior recorded on a tape as constants.
pub fn hard_posterior(tape: &mut Tape, env: &[usize], k: usize) -> TrackedPosterior {
    let n = env.len();
    let mut data = vec![0.0; n * k];
    for (i, &e) in env.iter().enumerate() {
        data[i * k + e] = 1.0;
    }
    let probs = tape.constant(Tensor::matrix(n, k, data).unwrap());
    let mut sizes = vec![0; k];
    for &e in env {
        sizes[e] += 1;
    }
    TrackedPosterior {
        losses: probs,
        log_probs: probs,
        probs,
        assignments: env.to_vec(),
        sizes,
    }
}

/// `Î(Y;E) = Ĥ(Y) + L_LI` on random discrete toys with hard posteriors.
/// Returns the worst absolute discrepancy.
pub fn li_identity_suite(toys: u64) -> Result<f64, String> {
    let mut worst = 0.0f64;
    for t in 0..toys {
        let mut r = rng::seeded(rng::derive(13, t), 0);
        let n = r.random_range(1..=200);
        let k = r.random_range(1..=4);
        let ny = r.random_range(1..=4);
        let y: Vec<usize> = (0..n).map(|_| r.random_range(0..ny)).collect();
        let e: Vec<usize> = (0..n).map(|_| r.random_range(0..k)).collect();

        let mut tape = Tape::new();
        let p = hard_posterior(&mut tape, &e, k);
        let li = loss_li(&mut tape, &p, &y, ny, StatMode::Soft).map_err(|e| e.to_string())?;
        let lhs = entropy(&y, ny) + tape.value(li).item();
        let oracle = brute_force_mi(&y, &e, ny, k);
        let err = (lhs - oracle).abs().max((mutual_information(&y, &e) - oracle).abs());
        worst = worst.max(err);
        if err > 1e-9 {
            return Err(format!("toy {t} (n {n}, k {k}, classes {ny}): {lhs} vs {oracle}"));
        }
    }
    Ok(worst)
}

/// Bit patterns of the root value and all gradients for one catalogue
/// instance, for replay comparisons.
pub fn fd_suite_values(inst: u64) -> Vec<u64> {
    let ops = ops();
    let (_, build) = ops[inst as usize % ops.len()];
    let seed = rng::derive(7, inst);
    let mut r = rng::seeded(seed, 0);
    let (n, k) = (3, 2);
    let case = Case {
        n,
        k,
        labels: Arc::new((0..n).map(|_| r.random_range(0..k)).collect()),
        rows: Arc::new(vec![2, 0, 0, 1]),
        target: Arc::new(uniform(&mut r, &[n * k], -1.0, 1.0)),
    };
    let inputs = vec![off_kink(&mut r, &[n, k]), off_kink(&mut r, &[n, k])];
    let (tape, vars, root) = evaluate(build, &inputs, &case, seed);
    let grads = tape.backward(root).unwrap();
    let mut bits = vec![tape.value(root).item().to_bits()];
    for v in vars {
        bits.extend(grads.wrt(v).data().iter().map(|g| g.to_bits()));
    }
    bits
}
