//! The training objective: temperature-scaled cosine-similarity class
//! probabilities, cross-entropy over them, and an L1 consistency term that
//! anchors the prompted text features to their frozen template-path
//! counterparts so prompts cannot drift arbitrarily far from what the
//! backbone already knows.

use crate::error::Result;
use crate::graph::{Graph, NodeId};

/// Class probabilities `[B × C]` from image features `[B × d]` and class
/// features `[C × d]`: cosine similarity divided by the temperature, then a
/// softmax per image. Rescaling any feature row leaves the result unchanged;
/// rows always sum to one.
pub fn class_probs(
    g: &mut Graph,
    image_feats: NodeId,
    class_feats: NodeId,
    temperature: f64,
) -> Result<NodeId> {
    let img = g.normalize_rows(image_feats)?;
    let cls = g.normalize_rows(class_feats)?;
    let sims = g.matmul_nt(img, cls)?;
    let logits = g.scale(sims, 1.0 / temperature)?;
    g.softmax_rows(logits)
}

/// Mean negative log-likelihood of the labelled classes.
pub fn loss_ce(g: &mut Graph, probs: NodeId, labels: &[usize]) -> Result<NodeId> {
    g.nll_from_probs(probs, labels)
}

/// `(1/C) · Σ_c Σ_k |prompted[c,k] − frozen[c,k]|` over `C` class rows.
pub fn loss_text(g: &mut Graph, prompted: NodeId, frozen: NodeId) -> Result<NodeId> {
    let c = g.value(prompted).rows();
    let diff = g.sub(prompted, frozen)?;
    let l1 = g.abs(diff)?;
    let total = g.sum_all(l1)?;
    g.scale(total, 1.0 / c as f64)
}

/// `L = L_ce + λ · L_text`. The composition is plain IEEE arithmetic, so
/// `λ = 0` leaves the total bit-identical to the cross-entropy term.
pub fn loss_total(g: &mut Graph, ce: NodeId, text: NodeId, lambda: f64) -> Result<NodeId> {
    let weighted = g.scale(text, lambda)?;
    g.add(ce, weighted)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn probs_for(img: &[f64], cls: &[f64], b: usize, c: usize, d: usize, tau: f64) -> Tensor {
        let mut g = Graph::new();
        let i = g.leaf(Tensor::from_vec(&[b, d], img.to_vec()).unwrap(), false);
        let k = g.leaf(Tensor::from_vec(&[c, d], cls.to_vec()).unwrap(), false);
        let p = class_probs(&mut g, i, k, tau).unwrap();
        g.value(p).clone()
    }

    #[test]
    fn hand_computed_two_class_probabilities() {
        // image [1,0]; classes [1,0] and [0,1]; cosine sims 1 and 0.
        // At tau = 0.5 the logits are 2 and 0.
        let p = probs_for(&[1.0, 0.0], &[1.0, 0.0, 0.0, 1.0], 1, 2, 2, 0.5);
        let e2 = std::f64::consts::E.powi(2);
        assert!((p.at(0, 0) - e2 / (e2 + 1.0)).abs() < 1e-15);
        assert!((p.at(0, 1) - 1.0 / (e2 + 1.0)).abs() < 1e-15);
    }

    #[test]
    fn rows_sum_to_one_within_1e12() {
        let img = Tensor::randn(&[7, 12], 1.0, 11);
        let cls = Tensor::randn(&[5, 12], 1.0, 12);
        let p = probs_for(img.data(), cls.data(), 7, 5, 12, 0.01);
        for r in 0..7 {
            let s: f64 = p.row(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-12, "row {r} sums to {s}");
        }
    }

    #[test]
    fn power_of_two_rescaling_is_bit_exact() {
        let img = Tensor::randn(&[3, 8], 1.0, 21);
        let cls = Tensor::randn(&[4, 8], 1.0, 22);
        let p1 = probs_for(img.data(), cls.data(), 3, 4, 8, 0.01);
        let img4: Vec<f64> = img.data().iter().map(|v| 4.0 * v).collect();
        let cls_half: Vec<f64> = cls.data().iter().map(|v| 0.5 * v).collect();
        let p2 = probs_for(&img4, &cls_half, 3, 4, 8, 0.01);
        assert_eq!(p1.data(), p2.data());
    }

    #[test]
    fn arbitrary_rescaling_stays_within_1e12() {
        let img = Tensor::randn(&[3, 8], 1.0, 31);
        let cls = Tensor::randn(&[4, 8], 1.0, 32);
        let p1 = probs_for(img.data(), cls.data(), 3, 4, 8, 0.01);
        let img3: Vec<f64> = img.data().iter().map(|v| 3.0 * v).collect();
        let p2 = probs_for(&img3, cls.data(), 3, 4, 8, 0.01);
        for (a, b) in p1.data().iter().zip(p2.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn temperature_never_changes_the_argmax() {
        for seed in 0..20 {
            let img = Tensor::randn(&[4, 6], 1.0, 100 + seed);
            let cls = Tensor::randn(&[5, 6], 1.0, 200 + seed);
            let hot = probs_for(img.data(), cls.data(), 4, 5, 6, 0.01);
            let cool = probs_for(img.data(), cls.data(), 4, 5, 6, 1.0);
            for r in 0..4 {
                let am = |t: &Tensor| {
                    (0..5)
                        .max_by(|&a, &b| t.at(r, a).partial_cmp(&t.at(r, b)).unwrap())
                        .unwrap()
                };
                assert_eq!(am(&hot), am(&cool), "seed {seed} row {r}");
            }
        }
    }

    #[test]
    fn cross_entropy_matches_direct_evaluation() {
        let mut g = Graph::new();
        let p = g.leaf(
            Tensor::from_vec(&[2, 3], vec![0.7, 0.2, 0.1, 0.25, 0.5, 0.25]).unwrap(),
            false,
        );
        let l = loss_ce(&mut g, p, &[0, 1]).unwrap();
        let expect = -(0.7f64.ln() + 0.5f64.ln()) / 2.0;
        assert!((g.value(l).data()[0] - expect).abs() < 1e-15);
    }

    #[test]
    fn text_loss_identities() {
        let a = Tensor::randn(&[4, 6], 1.0, 3);
        let mut g = Graph::new();
        let x = g.leaf(a.clone(), false);
        let same = loss_text(&mut g, x, x).unwrap();
        assert_eq!(g.value(same).data()[0], 0.0, "identical features give exactly zero");

        // one coordinate moved by delta: loss is |delta| / C exactly
        let mut shifted = a.clone();
        shifted.data_mut()[9] += 0.75;
        let y = g.leaf(shifted, false);
        let one = loss_text(&mut g, x, y).unwrap();
        assert_eq!(g.value(one).data()[0], 0.75 / 4.0);

        // symmetric in its arguments
        let ab = loss_text(&mut g, x, y).unwrap();
        let ba = loss_text(&mut g, y, x).unwrap();
        assert_eq!(g.value(ab).data(), g.value(ba).data());
    }

    #[test]
    fn zero_lambda_total_is_bit_identical_to_cross_entropy() {
        let mut g = Graph::new();
        let p = g.leaf(
            Tensor::from_vec(&[1, 2], vec![0.6, 0.4]).unwrap(),
            false,
        );
        let ce = loss_ce(&mut g, p, &[0]).unwrap();
        let a = g.leaf(Tensor::randn(&[3, 4], 1.0, 5), false);
        let b = g.leaf(Tensor::randn(&[3, 4], 1.0, 6), false);
        let lt = loss_text(&mut g, a, b).unwrap();
        assert!(g.value(lt).data()[0] > 0.0, "text term genuinely nonzero");
        let total = loss_total(&mut g, ce, lt, 0.0).unwrap();
        assert_eq!(g.value(total).data()[0].to_bits(), g.value(ce).data()[0].to_bits());
    }

    #[test]
    fn lambda_weights_the_text_term_linearly() {
        let mut g = Graph::new();
        let p = g.leaf(Tensor::from_vec(&[1, 2], vec![0.6, 0.4]).unwrap(), false);
        let ce = loss_ce(&mut g, p, &[0]).unwrap();
        let a = g.leaf(Tensor::randn(&[3, 4], 1.0, 5), false);
        let b = g.leaf(Tensor::randn(&[3, 4], 1.0, 6), false);
        let lt = loss_text(&mut g, a, b).unwrap();
        let total = loss_total(&mut g, ce, lt, 25.0).unwrap();
        let direct = g.value(ce).data()[0] + 25.0 * g.value(lt).data()[0];
        assert_eq!(g.value(total).data()[0], direct);
    }

    #[test]
    fn composed_objective_gradient_matches_finite_differences() {
        // Differentiate the full pipeline wrt the image features. All |.|
        // inputs are far from zero so the loss is smooth here.
        let d = 5;
        let (b, c) = (2, 3);
        let img0 = Tensor::randn(&[b, d], 1.0, 41);
        let cls0 = Tensor::randn(&[c, d], 1.0, 42);
        let frozen = Tensor::randn(&[c, d], 1.0, 43);
        let labels = [2usize, 0];

        let eval = |img: &Tensor| -> (Graph, NodeId, NodeId) {
            let mut g = Graph::new();
            let i = g.leaf(img.clone(), true);
            let k = g.leaf(cls0.clone(), true);
            let f = g.leaf(frozen.clone(), false);
            let p = class_probs(&mut g, i, k, 0.1).unwrap();
            let ce = loss_ce(&mut g, p, &labels).unwrap();
            let lt = loss_text(&mut g, k, f).unwrap();
            let total = loss_total(&mut g, ce, lt, 2.0).unwrap();
            (g, i, total)
        };

        let (mut g, i, total) = eval(&img0);
        g.backward(total).unwrap();
        let analytic = g.grad(i).unwrap().clone();

        let h = 1e-5;
        for k in 0..b * d {
            let mut plus = img0.clone();
            plus.data_mut()[k] += h;
            let mut minus = img0.clone();
            minus.data_mut()[k] -= h;
            let (gp, _, tp) = eval(&plus);
            let (gm, _, tm) = eval(&minus);
            let fd = (gp.value(tp).data()[0] - gm.value(tm).data()[0]) / (2.0 * h);
            let a = analytic.data()[k];
            assert!(
                (a - fd).abs() <= 1e-6 * (1.0 + a.abs().max(fd.abs())),
                "coord {k}: analytic {a} vs fd {fd}"
            );
        }
    }
}
