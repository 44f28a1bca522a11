//! Finite-difference gradient checks for every differentiable op and block.
//!
//! Each case routes a random parameter through the op into a scalar
//! read-out (a weighted sum, so every output entry influences the loss with
//! a distinct coefficient) and compares backward against central
//! differences.

mod common;

use common::check_param_grads;
use pki_core::graph::{gelu, gelu_grad};
use pki_core::nn::{
    encoder_layer, ffn, multi_head_attention, AttnParams, EncoderLayerParams, FfnParams, LnParams,
};
use pki_core::{Graph, NodeId, Tensor};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Weighted sum of all entries — a scalar read-out whose weights make every
/// output coordinate matter independently.
fn readout(g: &mut Graph, x: NodeId, seed: u64) -> NodeId {
    let shape = g.value(x).shape().to_vec();
    let w = g.constant(Tensor::randn(&shape, 1.0, seed));
    let p = g.mul(x, w).unwrap();
    g.sum_all(p).unwrap()
}

#[test]
fn matmul_gradients_both_sides_hundred_trials() {
    for trial in 0..100 {
        let a = Tensor::randn(&[3, 4], 1.0, 1000 + trial);
        let b = Tensor::randn(&[4, 2], 1.0, 2000 + trial);
        let b_fixed = b.clone();
        check_param_grads("matmul.lhs", &a, 1e-6, &move |p| {
            let mut g = Graph::new();
            let pa = g.leaf(p.clone(), true);
            let pb = g.constant(b_fixed.clone());
            let c = g.matmul(pa, pb).unwrap();
            let loss = readout(&mut g, c, 3000 + trial);
            (g, pa, loss)
        });
        let a_fixed = a.clone();
        check_param_grads("matmul.rhs", &b, 1e-6, &move |p| {
            let mut g = Graph::new();
            let pa = g.constant(a_fixed.clone());
            let pb = g.leaf(p.clone(), true);
            let c = g.matmul(pa, pb).unwrap();
            let loss = readout(&mut g, c, 3000 + trial);
            (g, pb, loss)
        });
    }
}

#[test]
fn matmul_nt_gradients_both_sides() {
    for trial in 0..20 {
        let a = Tensor::randn(&[3, 5], 1.0, 4000 + trial);
        let b = Tensor::randn(&[4, 5], 1.0, 5000 + trial);
        let bf = b.clone();
        check_param_grads("matmul_nt.lhs", &a, 1e-6, &move |p| {
            let mut g = Graph::new();
            let pa = g.leaf(p.clone(), true);
            let pb = g.constant(bf.clone());
            let c = g.matmul_nt(pa, pb).unwrap();
            let loss = readout(&mut g, c, 6000 + trial);
            (g, pa, loss)
        });
        let af = a.clone();
        check_param_grads("matmul_nt.rhs", &b, 1e-6, &move |p| {
            let mut g = Graph::new();
            let pa = g.constant(af.clone());
            let pb = g.leaf(p.clone(), true);
            let c = g.matmul_nt(pa, pb).unwrap();
            let loss = readout(&mut g, c, 6000 + trial);
            (g, pb, loss)
        });
    }
}

#[test]
fn elementwise_op_gradients() {
    let x = Tensor::randn(&[3, 4], 1.0, 42);
    let other = Tensor::randn(&[3, 4], 1.0, 43);

    for (name, build) in [
        ("add", 0usize),
        ("sub", 1),
        ("mul", 2),
        ("scale", 3),
        ("gelu", 4),
    ] {
        let o = other.clone();
        check_param_grads(name, &x, 1e-6, &move |p| {
            let mut g = Graph::new();
            let px = g.leaf(p.clone(), true);
            let po = g.constant(o.clone());
            let y = match build {
                0 => g.add(px, po).unwrap(),
                1 => g.sub(px, po).unwrap(),
                2 => g.mul(px, po).unwrap(),
                3 => g.scale(px, -1.75).unwrap(),
                _ => g.gelu(px).unwrap(),
            };
            let loss = readout(&mut g, y, 44);
            (g, px, loss)
        });
    }
}

#[test]
fn abs_gradient_away_from_kink() {
    // keep every coordinate at least 0.1 from zero so the finite-difference
    // stencil never straddles the non-differentiable point
    let mut x = Tensor::randn(&[2, 6], 1.0, 45);
    for v in x.data_mut() {
        if v.abs() < 0.1 {
            *v = 0.1 * v.signum().max(0.5);
        }
    }
    check_param_grads("abs", &x, 1e-6, &|p| {
        let mut g = Graph::new();
        let px = g.leaf(p.clone(), true);
        let y = g.abs(px).unwrap();
        let loss = readout(&mut g, y, 46);
        (g, px, loss)
    });
}

#[test]
fn gelu_derivative_matches_finite_difference_pointwise() {
    for i in 0..200 {
        let x = -4.0 + (i as f64) * 0.04;
        let h = 1e-6;
        let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
        assert!(
            (gelu_grad(x) - fd).abs() < 1e-8,
            "gelu'({x}) = {} vs fd {fd}",
            gelu_grad(x)
        );
    }
}

#[test]
fn add_row_gradients_for_matrix_and_bias() {
    let x = Tensor::randn(&[4, 3], 1.0, 47);
    let b = Tensor::randn(&[3], 1.0, 48);
    let bf = b.clone();
    check_param_grads("add_row.matrix", &x, 1e-6, &move |p| {
        let mut g = Graph::new();
        let px = g.leaf(p.clone(), true);
        let pb = g.constant(bf.clone());
        let y = g.add_row(px, pb).unwrap();
        let loss = readout(&mut g, y, 49);
        (g, px, loss)
    });
    let xf = x.clone();
    check_param_grads("add_row.bias", &b, 1e-6, &move |p| {
        let mut g = Graph::new();
        let px = g.constant(xf.clone());
        let pb = g.leaf(p.clone(), true);
        let y = g.add_row(px, pb).unwrap();
        let loss = readout(&mut g, y, 49);
        (g, pb, loss)
    });
}

#[test]
fn softmax_jacobian_matches_finite_difference() {
    for trial in 0..20 {
        let x = Tensor::randn(&[2, 5], 2.0, 7000 + trial);
        check_param_grads("softmax", &x, 1e-6, &move |p| {
            let mut g = Graph::new();
            let px = g.leaf(p.clone(), true);
            let y = g.softmax_rows(px).unwrap();
            let loss = readout(&mut g, y, 7100 + trial);
            (g, px, loss)
        });
    }
}

#[test]
fn layer_norm_gradients_for_input_gain_and_bias() {
    let x = Tensor::randn(&[3, 6], 1.0, 50);
    let gain = Tensor::randn(&[6], 0.5, 51);
    let bias = Tensor::randn(&[6], 0.5, 52);
    let (gn, bs) = (gain.clone(), bias.clone());
    check_param_grads("layer_norm.x", &x, 1e-5, &move |p| {
        let mut g = Graph::new();
        let px = g.leaf(p.clone(), true);
        let pg = g.constant(gn.clone());
        let pb = g.constant(bs.clone());
        let y = g.layer_norm(px, pg, pb, 1e-5).unwrap();
        let loss = readout(&mut g, y, 53);
        (g, px, loss)
    });
    let (xf, bs2) = (x.clone(), bias.clone());
    check_param_grads("layer_norm.gain", &gain, 1e-5, &move |p| {
        let mut g = Graph::new();
        let px = g.constant(xf.clone());
        let pg = g.leaf(p.clone(), true);
        let pb = g.constant(bs2.clone());
        let y = g.layer_norm(px, pg, pb, 1e-5).unwrap();
        let loss = readout(&mut g, y, 53);
        (g, pg, loss)
    });
    let (xf2, gn2) = (x.clone(), gain.clone());
    check_param_grads("layer_norm.bias", &bias, 1e-5, &move |p| {
        let mut g = Graph::new();
        let px = g.constant(xf2.clone());
        let pg = g.constant(gn2.clone());
        let pb = g.leaf(p.clone(), true);
        let y = g.layer_norm(px, pg, pb, 1e-5).unwrap();
        let loss = readout(&mut g, y, 53);
        (g, pb, loss)
    });
}

#[test]
fn normalize_rows_gradient() {
    let x = Tensor::randn(&[3, 4], 1.0, 54);
    check_param_grads("normalize_rows", &x, 1e-6, &|p| {
        let mut g = Graph::new();
        let px = g.leaf(p.clone(), true);
        let y = g.normalize_rows(px).unwrap();
        let loss = readout(&mut g, y, 55);
        (g, px, loss)
    });
}

#[test]
fn embed_gradient_via_finite_difference() {
    let table = Tensor::randn(&[5, 3], 1.0, 56);
    check_param_grads("embed", &table, 1e-6, &|p| {
        let mut g = Graph::new();
        let pt = g.leaf(p.clone(), true);
        let e = g.embed(pt, &[4, 0, 4, 2]).unwrap();
        let loss = readout(&mut g, e, 57);
        (g, pt, loss)
    });
}

#[test]
fn structural_op_gradients() {
    // concat → slice → concat_cols → slice_cols chain
    let x = Tensor::randn(&[4, 6], 1.0, 58);
    check_param_grads("structural_chain", &x, 1e-6, &|p| {
        let mut g = Graph::new();
        let px = g.leaf(p.clone(), true);
        let top = g.slice_rows(px, 0, 2).unwrap();
        let bottom = g.slice_rows(px, 2, 2).unwrap();
        let swapped = g.concat_rows(&[bottom, top]).unwrap();
        let left = g.slice_cols(swapped, 0, 3).unwrap();
        let right = g.slice_cols(swapped, 3, 3).unwrap();
        let re = g.concat_cols(&[right, left]).unwrap();
        let loss = readout(&mut g, re, 59);
        (g, px, loss)
    });
}

#[test]
fn nll_from_probs_gradient_through_softmax() {
    let logits = Tensor::randn(&[3, 4], 1.5, 60);
    check_param_grads("nll_from_probs", &logits, 1e-6, &|p| {
        let mut g = Graph::new();
        let px = g.leaf(p.clone(), true);
        let probs = g.softmax_rows(px).unwrap();
        let loss = g.nll_from_probs(probs, &[2, 0, 3]).unwrap();
        (g, px, loss)
    });
}

// ── composite blocks ─────────────────────────────────────────────────────

fn toy_attn() -> AttnParams {
    let mut rng = ChaCha8Rng::seed_from_u64(70);
    AttnParams::init(6, 2, 0.4, &mut rng).unwrap()
}

#[test]
fn mha_gradients_for_all_parameters_on_two_head_config() {
    let base = toy_attn();
    let q_in = Tensor::randn(&[3, 6], 1.0, 71);
    let kv_in = Tensor::randn(&[4, 6], 1.0, 72);

    // check one representative weight matrix and bias of each projection
    for slot in 0..8 {
        let param = match slot {
            0 => base.wq.clone(),
            1 => base.bq.clone(),
            2 => base.wk.clone(),
            3 => base.bk.clone(),
            4 => base.wv.clone(),
            5 => base.bv.clone(),
            6 => base.wo.clone(),
            _ => base.bo.clone(),
        };
        let (b, q, kv) = (base.clone(), q_in.clone(), kv_in.clone());
        check_param_grads(&format!("mha.param{slot}"), &param, 1e-4, &move |p| {
            let mut over = b.clone();
            match slot {
                0 => over.wq = p.clone(),
                1 => over.bq = p.clone(),
                2 => over.wk = p.clone(),
                3 => over.bk = p.clone(),
                4 => over.wv = p.clone(),
                5 => over.bv = p.clone(),
                6 => over.wo = p.clone(),
                _ => over.bo = p.clone(),
            }
            let mut g = Graph::new();
            let qn = g.constant(q.clone());
            let kn = g.constant(kv.clone());
            let bound = over.bind(&mut g, true);
            let out =
                multi_head_attention(&mut g, qn, kn, kn, &bound, Some(&[false, false, true, false]))
                    .unwrap();
            let loss = readout(&mut g, out, 73);
            let pid = match slot {
                0 => bound.wq,
                1 => bound.bq,
                2 => bound.wk,
                3 => bound.bk,
                4 => bound.wv,
                5 => bound.bv,
                6 => bound.wo,
                _ => bound.bo,
            };
            (g, pid, loss)
        });
    }
}

#[test]
fn mha_gradient_for_query_and_key_inputs() {
    let base = toy_attn();
    let q_in = Tensor::randn(&[2, 6], 1.0, 74);
    let kv_in = Tensor::randn(&[3, 6], 1.0, 75);
    let (b, kv) = (base.clone(), kv_in.clone());
    check_param_grads("mha.query_input", &q_in, 1e-4, &move |p| {
        let mut g = Graph::new();
        let qn = g.leaf(p.clone(), true);
        let kn = g.constant(kv.clone());
        let bound = b.bind(&mut g, false);
        let out = multi_head_attention(&mut g, qn, kn, kn, &bound, None).unwrap();
        let loss = readout(&mut g, out, 76);
        (g, qn, loss)
    });
    let (b2, q) = (base, q_in);
    check_param_grads("mha.kv_input", &kv_in, 1e-4, &move |p| {
        let mut g = Graph::new();
        let qn = g.constant(q.clone());
        let kn = g.leaf(p.clone(), true);
        let bound = b2.bind(&mut g, false);
        let out = multi_head_attention(&mut g, qn, kn, kn, &bound, None).unwrap();
        let loss = readout(&mut g, out, 76);
        (g, kn, loss)
    });
}

#[test]
fn ffn_gradients_for_all_parameters() {
    let mut rng = ChaCha8Rng::seed_from_u64(80);
    let base = FfnParams::init(5, 11, 0.5, 0.5, &mut rng);
    let x = Tensor::randn(&[3, 5], 1.0, 81);
    for slot in 0..4 {
        let param = match slot {
            0 => base.w1.clone(),
            1 => base.b1.clone(),
            2 => base.w2.clone(),
            _ => base.b2.clone(),
        };
        let (b, xf) = (base.clone(), x.clone());
        check_param_grads(&format!("ffn.param{slot}"), &param, 1e-5, &move |p| {
            let mut over = b.clone();
            match slot {
                0 => over.w1 = p.clone(),
                1 => over.b1 = p.clone(),
                2 => over.w2 = p.clone(),
                _ => over.b2 = p.clone(),
            }
            let mut g = Graph::new();
            let xn = g.constant(xf.clone());
            let bound = over.bind(&mut g, true);
            let out = ffn(&mut g, xn, &bound).unwrap();
            let loss = readout(&mut g, out, 82);
            let pid = match slot {
                0 => bound.w1,
                1 => bound.b1,
                2 => bound.w2,
                _ => bound.b2,
            };
            (g, pid, loss)
        });
    }
}

#[test]
fn encoder_layer_gradient_through_input() {
    let mut rng = ChaCha8Rng::seed_from_u64(90);
    let layer = EncoderLayerParams::init(6, 2, 12, 1e-5, 0.3, &mut rng).unwrap();
    let x = Tensor::randn(&[4, 6], 1.0, 91);
    let lf = layer.clone();
    check_param_grads("encoder_layer.input", &x, 1e-4, &move |p| {
        let mut g = Graph::new();
        let xn = g.leaf(p.clone(), true);
        let bound = lf.bind(&mut g, false);
        let out = encoder_layer(&mut g, xn, &bound, Some(&[false, false, false, true])).unwrap();
        let loss = readout(&mut g, out, 92);
        (g, xn, loss)
    });
}

#[test]
fn layer_norm_params_compose_with_blocks() {
    // LN gain/bias inside a residual block still receive correct gradient
    let mut rng = ChaCha8Rng::seed_from_u64(95);
    let layer = EncoderLayerParams::init(4, 2, 8, 1e-5, 0.3, &mut rng).unwrap();
    let x = Tensor::randn(&[3, 4], 1.0, 96);
    let gain = layer.ln1.gain.clone();
    check_param_grads("encoder_layer.ln1.gain", &gain, 1e-5, &move |p| {
        let mut over = layer.clone();
        over.ln1 = LnParams {
            gain: p.clone(),
            bias: over.ln1.bias.clone(),
            eps: over.ln1.eps,
        };
        let mut g = Graph::new();
        let xn = g.constant(x.clone());
        let bound = over.bind(&mut g, true);
        let out = encoder_layer(&mut g, xn, &bound, None).unwrap();
        let loss = readout(&mut g, out, 97);
        (g, bound.ln1.gain, loss)
    });
}
