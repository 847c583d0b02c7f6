//! Oracle checks for the differentiation core and the closed-form losses.

mod support;

use std::time::Instant;

#[test]
fn every_op_matches_finite_differences() {
    let start = Instant::now();
    let worst = support::fd_suite(100).unwrap();
    assert!(worst <= support::REL_TOL);
    assert!(start.elapsed().as_secs_f64() < 10.0, "took {:?}", start.elapsed());
}

#[test]
fn irm_penalty_matches_derivative_in_multiplier() {
    support::irm_penalty_suite(60).unwrap();
}

#[test]
fn label_independence_loss_is_negative_conditional_entropy() {
    support::li_identity_suite(50).unwrap();
}
