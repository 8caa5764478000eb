//! Central finite differences against the tape gradients.

mod common;

use common::grad_suite;

#[test]
fn unary_primitives() {
    grad_suite::unary_primitives();
}

#[test]
fn reductions() {
    grad_suite::reductions();
}

#[test]
fn binary_primitives() {
    grad_suite::binary_primitives();
}

#[test]
fn conformer_block_gradients() {
    grad_suite::conformer_block_gradients();
}

#[test]
fn full_pipeline_gradients() {
    grad_suite::full_pipeline_gradients();
}

#[test]
fn ctc_loss_gradients() {
    grad_suite::ctc_loss_gradients();
}

#[test]
fn kl_loss_gradients() {
    grad_suite::kl_loss_gradients();
}

#[test]
fn factorized_head_gradients() {
    grad_suite::factorized_head_gradients();
}
