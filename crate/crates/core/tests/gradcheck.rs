mod common;

use common::gradcheck::{composed, composed_forward, primitives, TOL};

#[test]
fn every_primitive_matches_finite_differences() {
    let bad: Vec<_> = primitives().into_iter().filter(|(_, e)| !(*e < TOL)).collect();
    assert!(bad.is_empty(), "relative error above {TOL}: {bad:?}");
}

#[test]
fn composed_forward_matches_double_precision_reference() {
    let (f32_loss, f64_loss) = composed_forward();
    assert!((f32_loss - f64_loss).abs() < 1e-5 * f64_loss.abs().max(1.0), "{f32_loss} vs {f64_loss}");
}

#[test]
fn composed_prompt_loss_matches_finite_differences() {
    let e = composed();
    assert!(e < TOL, "composed loss relative error {e}");
}
