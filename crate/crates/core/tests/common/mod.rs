//! Shared test oracles.
//!
//! The gradient oracle is central finite differences, kept deliberately
//! independent of the tape's backward pass: it only ever calls `build` to get
//! fresh forward values. `build` must construct the graph from scratch from
//! the supplied parameter tensor so a perturbation reaches everything that
//! depends on it.

// each integration-test target uses its own subset of these helpers
#![allow(dead_code)]

use pki_core::{Graph, NodeId, Tensor};

pub const FD_STEP: f64 = 1e-5;

/// Compare analytic gradients of a scalar loss against central differences.
///
/// Tolerance is applied as `|a - n| <= tol * (1 + max(|a|, |n|))`, i.e. a
/// relative error of `tol` for O(1)-and-larger gradients with an absolute
/// floor of `tol` where both sides vanish.
pub fn check_param_grads(
    name: &str,
    param: &Tensor,
    tol: f64,
    build: &dyn Fn(&Tensor) -> (Graph, NodeId, NodeId),
) {
    let (mut g, pid, loss) = build(param);
    assert!(
        g.value(loss).is_scalar(),
        "{name}: gradient check needs a scalar loss"
    );
    g.backward(loss).expect("backward");
    let analytic = g
        .grad(pid)
        .unwrap_or_else(|| panic!("{name}: no gradient reached the parameter"))
        .data()
        .to_vec();

    for i in 0..param.numel() {
        let mut plus = param.clone();
        plus.data_mut()[i] += FD_STEP;
        let mut minus = param.clone();
        minus.data_mut()[i] -= FD_STEP;
        let (gp, _, lp) = build(&plus);
        let (gm, _, lm) = build(&minus);
        let numeric = (gp.value(lp).data()[0] - gm.value(lm).data()[0]) / (2.0 * FD_STEP);
        let a = analytic[i];
        let err = (a - numeric).abs();
        let bound = tol * (1.0 + a.abs().max(numeric.abs()));
        assert!(
            err <= bound,
            "{name}[{i}]: analytic {a} vs finite-difference {numeric} (err {err:.3e} > {bound:.3e})"
        );
    }
}

/// Largest relative mismatch over all entries, same tolerance convention as
/// [`check_param_grads`] but reported instead of asserted (the acceptance
/// suite prints it).
pub fn max_grad_mismatch(
    param: &Tensor,
    build: &dyn Fn(&Tensor) -> (Graph, NodeId, NodeId),
) -> f64 {
    let (mut g, pid, loss) = build(param);
    g.backward(loss).expect("backward");
    let analytic = g.grad(pid).expect("gradient present").data().to_vec();
    let mut worst = 0.0f64;
    for i in 0..param.numel() {
        let mut plus = param.clone();
        plus.data_mut()[i] += FD_STEP;
        let mut minus = param.clone();
        minus.data_mut()[i] -= FD_STEP;
        let (gp, _, lp) = build(&plus);
        let (gm, _, lm) = build(&minus);
        let numeric = (gp.value(lp).data()[0] - gm.value(lm).data()[0]) / (2.0 * FD_STEP);
        let a = analytic[i];
        let rel = (a - numeric).abs() / (1.0 + a.abs().max(numeric.abs()));
        worst = worst.max(rel);
    }
    worst
}
