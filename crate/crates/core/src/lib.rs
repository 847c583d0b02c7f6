//! Environment inference and invariant learning without environment labels.
//!
//! A multi-head network ([`nets::EIModel`]) partitions pooled training data
//! into learned environments by how well each head explains every example;
//! an invariant predictor ([`nets::ILModel`]) is then trained on those
//! environments with a confidence-weighted IRMv1 objective. The two models
//! are optimised alternately by [`engine::joint_train`].

#[cfg(test)]
macro_rules! assert_close {
    ($a:expr, $b:expr, $tol:expr) => {{
        let (a, b): (f64, f64) = ($a, $b);
        let tol: f64 = $tol;
        assert!((a - b).abs() <= tol, "{a} vs {b} (tol {tol})");
    }};
}

pub mod autodiff;
pub mod nets;
pub mod rng;
pub mod datagen;
pub mod envinfer;
pub mod invlearn;
pub mod loss;
pub mod config;
pub mod engine;
