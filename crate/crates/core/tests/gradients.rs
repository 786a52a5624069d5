//! Tape gradients against central finite differences at 64-bit precision.

mod common;

use common::{grad_suite, GRAD_TOL};

fn check(name: &str, err: f64) {
    assert!(err <= GRAD_TOL, "{name}: relative error {err:.3e}");
}

#[test]
fn deformable_conv_gradients() {
    check("deformable conv", grad_suite::deformable_conv());
}

#[test]
fn convlstm_step_gradients() {
    check("ConvLSTM step", grad_suite::convlstm_step());
}

#[test]
fn spatial_module_gradients() {
    check("spatial module", grad_suite::spatial_module());
}

#[test]
fn temporal_module_gradients() {
    check("temporal module", grad_suite::temporal_module());
}

#[test]
fn encoder_decoder_gradients() {
    check("encoder-decoder", grad_suite::encoder_decoder());
}

#[test]
fn joint_objective_gradients() {
    check("joint objective", grad_suite::joint_objective());
}
