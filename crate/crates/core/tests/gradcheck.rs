//! Central finite-difference checks of every differentiable op, in double
//! precision, on seeded random cases.

mod common;

use common::{op_worst_error, GRAD_TOLERANCE};

fn check(op: &str) {
    let err = op_worst_error(op);
    assert!(err < GRAD_TOLERANCE, "{op}: relative gradient error {err:e}");
}

#[test]
fn conv2d() {
    check("conv2d");
}

#[test]
fn maxpool2() {
    check("maxpool2");
}

#[test]
fn upsample() {
    check("upsample");
}

#[test]
fn add() {
    check("add");
}

#[test]
fn sub() {
    check("sub");
}

#[test]
fn mul() {
    check("mul");
}

#[test]
fn relu() {
    check("relu");
}

#[test]
fn sigmoid() {
    check("sigmoid");
}

#[test]
fn tanh() {
    check("tanh");
}

#[test]
fn scalar_affine() {
    check("scalar_affine");
}

#[test]
fn concat_channels() {
    check("concat_channels");
}

#[test]
fn slice_channels() {
    check("slice_channels");
}

#[test]
fn sum() {
    check("sum");
}

#[test]
fn dice_loss() {
    check("dice_loss");
}

#[test]
fn rotation_loss() {
    check("rotation_loss");
}

#[test]
fn iou_loss() {
    check("iou_loss");
}

#[test]
fn box_upsample() {
    check("box_upsample");
}

#[test]
fn nested_sum() {
    check("nested_sum");
}

#[test]
fn uf_block() {
    check("uf_block");
}

#[test]
fn cwf_block() {
    check("cwf_block");
}

#[test]
fn output_head() {
    check("output_head");
}
