//! Regression SEM with selection-induced spurious correlation.
//!
//! `Y = θ₁ᵀX_c + θ₂ᵀ(X_c ⊙ X_c) + ε`; rows are kept with probability
//! proportional to `|r|^(−5·|y − sign(r)·X_v*|)`, which ties the first variant
//! coordinate to `Y` with strength and sign set by `r`. Observed features are
//! `H·[X_c, X_v]` for a random orthogonal `H`.

use nalgebra::DMatrix;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{DataError, LabeledDataset, Oracle, Provenance};
use crate::autodiff::Tensor;
use crate::loss::Targets;
use crate::rng::{self, stream};

/// Candidate pool size per requested row.
const POOL_FACTOR: usize = 50;
const MIN_ACCEPTANCE: f64 = 1e-4;

/// Fixed structure (θ, H) shared by every environment drawn from it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegressionSem {
    pub d_c: usize,
    pub d_v: usize,
    pub noise_sd: f64,
    pub structure_seed: u64,
    pub theta1: Vec<f64>,
    pub theta2: Vec<f64>,
    /// Row-major `d × d`, `d = d_c + d_v`.
    pub h: Vec<f64>,
}

impl RegressionSem {
    pub fn new(d_c: usize, d_v: usize, noise_sd: f64, structure_seed: u64) -> Result<Self, DataError> {
        if d_c == 0 || d_v == 0 {
            return Err(DataError::Config("d_c and d_v must be at least 1".into()));
        }
        if !(noise_sd >= 0.0 && noise_sd.is_finite()) {
            return Err(DataError::Config(format!("noise_sd = {noise_sd} must be >= 0")));
        }
        let mut rng = rng::seeded(structure_seed, stream::STRUCTURE);
        let mut gauss = |scale: f64| -> f64 {
            let z: f64 = StandardNormal.sample(&mut rng);
            z * scale
        };
        let theta1 = (0..d_c).map(|_| gauss(1.0 / (d_c as f64).sqrt())).collect();
        let theta2 = (0..d_c).map(|_| gauss(0.5 / (d_c as f64).sqrt())).collect();
        let d = d_c + d_v;
        let g = DMatrix::from_fn(d, d, |_, _| gauss(1.0));
        let q = g.qr().q();
        let h = (0..d).flat_map(|i| (0..d).map(move |j| (i, j))).map(|(i, j)| q[(i, j)]).collect();
        Ok(Self {
            d_c,
            d_v,
            noise_sd,
            structure_seed,
            theta1,
            theta2,
            h,
        })
    }

    pub fn d(&self) -> usize {
        self.d_c + self.d_v
    }

    /// Noise-free signal `f(x_c)`.
    pub fn f(&self, x_c: &[f64]) -> f64 {
        x_c.iter()
            .zip(self.theta1.iter().zip(&self.theta2))
            .map(|(&x, (&a, &b))| a * x + b * x * x)
            .sum()
    }

    pub fn h_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.d(), self.d(), &self.h)
    }

    /// Draws `count` rows for each `(r, count)` environment, in order.
    pub fn sample(&self, envs: &[(f64, usize)], seed: u64) -> Result<LabeledDataset, DataError> {
        if envs.is_empty() {
            return Err(DataError::Config("no environments requested".into()));
        }
        for &(r, _) in envs {
            if !(r.abs() > 1.0 && r.is_finite()) {
                return Err(DataError::Config(format!("|r| must exceed 1, got {r}")));
            }
        }
        let mut rng = rng::seeded(seed, stream::DATA);
        let (d_c, d_v, d) = (self.d_c, self.d_v, self.d());
        let mut x_c = Vec::new();
        let mut x_v = Vec::new();
        let mut ys = Vec::new();
        let mut signal = Vec::new();
        let mut r_col = Vec::new();
        let mut env_col = Vec::new();
        for (e, &(r, count)) in envs.iter().enumerate() {
            if count == 0 {
                continue;
            }
            let pool = POOL_FACTOR * count;
            let draw = |rng: &mut rng::Rng| {
                let c: Vec<f64> = (0..d_c).map(|_| StandardNormal.sample(rng)).collect();
                let v: Vec<f64> = (0..d_v).map(|_| StandardNormal.sample(rng)).collect();
                let eps: f64 = StandardNormal.sample(rng);
                let s = self.f(&c);
                (c, v, s, s + self.noise_sd * eps)
            };
            let density = |y: f64, v0: f64| r.abs().powf(-5.0 * (y - r.signum() * v0).abs());
            let candidates: Vec<_> = (0..pool).map(|_| draw(&mut rng)).collect();
            let max = candidates
                .iter()
                .map(|(_, v, _, y)| density(*y, v[0]))
                .fold(0.0, f64::max);
            let mut accepted = 0;
            let mut seen = 0;
            let mut batch = candidates;
            'fill: loop {
                for (c, v, s, y) in batch {
                    seen += 1;
                    let u: f64 = rng.random();
                    if u * max < density(y, v[0]) {
                        x_c.extend_from_slice(&c);
                        x_v.extend_from_slice(&v);
                        ys.push(y);
                        signal.push(s);
                        r_col.push(r);
                        env_col.push(e);
                        accepted += 1;
                        if accepted == count {
                            break 'fill;
                        }
                    }
                }
                if (accepted as f64) < MIN_ACCEPTANCE * seen as f64 {
                    return Err(DataError::Resampling {
                        r,
                        accepted,
                        candidates: seen,
                    });
                }
                batch = (0..pool).map(|_| draw(&mut rng)).collect();
            }
            log::debug!("r = {r}: accepted {accepted} of {seen} candidates");
        }
        let n = ys.len();
        let h = self.h_matrix();
        let mut x = Vec::with_capacity(n * d);
        for i in 0..n {
            let z = nalgebra::DVector::from_iterator(
                d,
                x_c[i * d_c..(i + 1) * d_c].iter().chain(&x_v[i * d_v..(i + 1) * d_v]).copied(),
            );
            x.extend((&h * z).iter());
        }
        let to_tensor = |rows: usize, cols: usize, v: Vec<f64>| {
            Tensor::matrix(rows, cols, v).map_err(|e| DataError::Input(e.to_string()))
        };
        let provenance = Provenance {
            generator: "regression-sem".into(),
            params: serde_json::json!({
                "d_c": d_c, "d_v": d_v, "noise_sd": self.noise_sd,
                "structure_seed": self.structure_seed, "envs": envs,
            }),
            seed,
        };
        LabeledDataset::new(
            to_tensor(n, d, x)?,
            Targets::real(ys),
            Some(Oracle::Sem {
                x_c: to_tensor(n, d_c, x_c)?,
                x_v: to_tensor(n, d_v, x_v)?,
                r: r_col,
                env: env_col,
                n_envs: envs.len(),
                signal,
            }),
            provenance,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn corr(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len() as f64;
        let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
        let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
        let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
        cov / (va * vb).sqrt()
    }

    fn v_star(ds: &LabeledDataset) -> Vec<f64> {
        let Some(Oracle::Sem { x_v, .. }) = &ds.oracle else { panic!() };
        (0..ds.n()).map(|i| x_v.get(i, 0)).collect()
    }

    #[test]
    fn h_is_orthogonal() {
        let sem = RegressionSem::new(5, 5, 0.5, 1).unwrap();
        let h = sem.h_matrix();
        let err = (h.transpose() * &h - DMatrix::identity(10, 10)).abs().max();
        assert!(err < 1e-10, "{err}");
    }

    #[test]
    fn selection_controls_correlation() {
        let sem = RegressionSem::new(5, 5, 0.5, 2).unwrap();
        let strong = sem.sample(&[(2.3, 2000)], 3).unwrap();
        let weak = sem.sample(&[(-1.1, 2000)], 3).unwrap();
        let cs = corr(strong.targets.values().unwrap(), &v_star(&strong));
        let cw = corr(weak.targets.values().unwrap(), &v_star(&weak));
        assert!(cs > 0.5, "{cs}");
        assert!(cw < 0.0 && cw.abs() < cs, "{cw}");
    }

    #[test]
    fn sample_is_deterministic_and_ordered() {
        let sem = RegressionSem::new(3, 2, 0.5, 7).unwrap();
        let a = sem.sample(&[(2.3, 50), (-1.1, 5)], 4).unwrap();
        assert_eq!(a, sem.sample(&[(2.3, 50), (-1.1, 5)], 4).unwrap());
        let Some(Oracle::Sem { env, .. }) = &a.oracle else { panic!() };
        assert_eq!(env.iter().filter(|&&e| e == 1).count(), 5);
        assert_eq!(a.n(), 55);
    }

    #[test]
    fn rejects_weak_r() {
        let sem = RegressionSem::new(2, 2, 0.5, 0).unwrap();
        assert!(sem.sample(&[(0.9, 10)], 0).is_err());
    }
}
