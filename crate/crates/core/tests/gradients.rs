mod common;

use common::grad::{adversarial_error, kl_error, noise_prediction_error, recon_error, TOL};

#[test]
fn reconstruction_gradient_matches_finite_differences() {
    let err = recon_error();
    assert!(err < TOL, "relative error {err}");
}

#[test]
fn kl_gradient_matches_finite_differences() {
    let err = kl_error();
    assert!(err < TOL, "relative error {err}");
}

#[test]
fn generator_adversarial_gradient_matches_finite_differences() {
    let err = adversarial_error();
    assert!(err < TOL, "relative error {err}");
}

#[test]
fn noise_prediction_gradient_matches_finite_differences() {
    let err = noise_prediction_error();
    assert!(err < TOL, "relative error {err}");
}
