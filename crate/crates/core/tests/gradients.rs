use coffee_core::ssm::ModelKind;
use coffee_core::train::{
    detach_gate_check, grad_check, grad_check_ih, grad_check_mnist, grad_check_smnist,
    GradCheckDims,
};

const KINDS: [ModelKind; 3] = [ModelKind::Coffee, ModelKind::S6, ModelKind::Linearized];

#[test]
fn default_tiny_instances_match_finite_differences() {
    for kind in KINDS {
        let r = grad_check(kind, &GradCheckDims::default(), 1).unwrap();
        assert!(r.passed(), "{r}");
    }
}

#[test]
fn output_filter_and_frozen_row() {
    let dims = GradCheckDims { n: 2, d: 3, len: 6, vocab: 4, l_tar: 1, batch: 2 };
    let r = grad_check_ih(ModelKind::Coffee, &dims, true, Some(0), 7).unwrap();
    assert!(r.passed(), "{r}");
}

#[test]
fn single_step_single_feature() {
    let dims = GradCheckDims { n: 1, d: 1, len: 1, vocab: 2, l_tar: 1, batch: 1 };
    for kind in KINDS {
        let r = grad_check(kind, &dims, 3).unwrap();
        assert!(r.passed(), "{r}");
    }
}

#[test]
fn detached_gate_matches_frozen_trajectory_oracle() {
    let c = detach_gate_check(&GradCheckDims::default(), 11).unwrap();
    assert!(c.report.passed(), "{}", c.report);
    assert!(c.w_d_change > 1e-6, "gate path should carry gradient, change {}", c.w_d_change);
}

#[test]
fn image_heads() {
    let r = grad_check_mnist(ModelKind::Coffee, 1, true, 5).unwrap();
    assert!(r.passed(), "{r}");
    let r = grad_check_mnist(ModelKind::S6, 1, false, 6).unwrap();
    assert!(r.passed(), "{r}");
    let r = grad_check_smnist(Some(ModelKind::Coffee), 2, 8).unwrap();
    assert!(r.passed(), "{r}");
    let r = grad_check_smnist(None, 1, 9).unwrap();
    assert!(r.passed(), "{r}");
}
