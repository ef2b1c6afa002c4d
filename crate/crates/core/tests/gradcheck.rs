//! Analytic gradients (computed in f32) against central finite differences
//! evaluated in f64.

mod common;

use common::gradcheck::{
    full_loss_errors, primitive_errors, stop_gradient_mismatch, straight_through_is_exact, TOL,
};

#[test]
fn every_primitive_matches_finite_differences() {
    let errors = primitive_errors();
    assert!(errors.len() >= 30);
    for (name, err) in errors {
        assert!(err < TOL, "{name}: relative error {err:.2e}");
    }
}

#[test]
fn full_loss_matches_finite_differences() {
    let errors = full_loss_errors();
    assert!(errors.iter().any(|(n, _)| n.contains("enc.patch.w")));
    assert!(errors.iter().any(|(n, _)| n.contains("factor.query")));
    for (name, err) in errors {
        assert!(err < TOL, "{name}: relative error {err:.2e}");
    }
}

#[test]
fn stop_gradient_closed_forms() {
    assert_eq!(stop_gradient_mismatch(), None);
}

#[test]
fn straight_through_passes_gradient_exactly() {
    assert!(straight_through_is_exact());
}
