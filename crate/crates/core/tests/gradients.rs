mod common;

use common::{audit, LossKind, ALL_LOSSES, AUDIT_TOLERANCE};

fn check(kind: LossKind) {
    for seed in [3, 17] {
        let a = audit(kind, seed);
        assert!(a.coordinates > 100, "{kind:?}: only {} coordinates", a.coordinates);
        assert!(
            a.worst <= AUDIT_TOLERANCE,
            "{kind:?} seed {seed}: worst relative error {:e} at {}",
            a.worst,
            a.worst_name
        );
    }
}

#[test]
fn dino_gradients() {
    check(LossKind::Dino);
}

#[test]
fn class_surrogate_gradients() {
    check(LossKind::Class);
}

#[test]
fn patch_surrogate_gradients() {
    check(LossKind::Patch);
}

#[test]
fn stage1_gradients() {
    check(LossKind::Stage1);
}

#[test]
fn stage2_gradients() {
    check(LossKind::Stage2);
    check(LossKind::Stage2Pooled);
}

#[test]
fn every_loss_is_listed() {
    assert_eq!(ALL_LOSSES.len(), 6);
}
