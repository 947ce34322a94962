//! Finite-difference verification of tape gradients.

use super::mlp::ModelParams;
use super::tape::{NodeId, Tape};
use crate::{Error, Result};

/// Relative disagreement between two gradient estimates. Tiny values on both
/// sides compare against an absolute floor instead of blowing up.
fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Compares the tape gradient of `build` against central finite differences
/// over every parameter and returns the worst relative error.
///
/// `build` must construct a fresh tape evaluating the loss at the given
/// parameters and return it with the scalar root node.
pub fn grad_check<F>(build: F, params: &ModelParams, eps: f64) -> Result<f64>
where
    F: Fn(&ModelParams) -> Result<(Tape, NodeId, Vec<(NodeId, NodeId)>)>,
{
    if eps <= 0.0 {
        return Err(Error::input("grad_check: eps must be positive"));
    }
    let (tape, root, param_nodes) = build(params)?;
    let grads = tape.backward(root)?;
    let ad: Vec<(Vec<f64>, Vec<f64>)> = param_nodes
        .iter()
        .zip(&params.layers)
        .map(|(&(w, b), l)| (grads.get(w, l.weights.len()), grads.get(b, l.bias.len())))
        .collect();

    let eval = |p: &ModelParams| -> Result<f64> {
        let (t, r, _) = build(p)?;
        Ok(t.scalar(r))
    };

    let mut worst: f64 = 0.0;
    let mut probe = params.clone();
    for k in 0..params.layers.len() {
        for i in 0..params.layers[k].weights.len() {
            let orig = probe.layers[k].weights[i];
            probe.layers[k].weights[i] = orig + eps;
            let up = eval(&probe)?;
            probe.layers[k].weights[i] = orig - eps;
            let down = eval(&probe)?;
            probe.layers[k].weights[i] = orig;
            worst = worst.max(rel_err(ad[k].0[i], (up - down) / (2.0 * eps)));
        }
        for i in 0..params.layers[k].bias.len() {
            let orig = probe.layers[k].bias[i];
            probe.layers[k].bias[i] = orig + eps;
            let up = eval(&probe)?;
            probe.layers[k].bias[i] = orig - eps;
            let down = eval(&probe)?;
            probe.layers[k].bias[i] = orig;
            worst = worst.max(rel_err(ad[k].1[i], (up - down) / (2.0 * eps)));
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::mlp::{mlp_forward_taped, softmax_ce_taped, TapeParams};

    #[test]
    fn quadratic_toy_loss_is_machine_exact() {
        // loss = sum(theta^2): gradient 2*theta, FD error ~ eps^2.
        let params = ModelParams::new_mlp(&[2, 3], 11).unwrap();
        let err = grad_check(
            |p| {
                let mut t = Tape::new();
                let tp = TapeParams::register(&mut t, p);
                let mut terms = Vec::new();
                for &(w, b) in &tp.layers {
                    let w2 = t.mul(w, w)?;
                    let b2 = t.mul(b, b)?;
                    // Reduce each squared tensor to a scalar via matvec with ones.
                    let n = t.value(w2).len();
                    let ones = t.constant(vec![1.0; n]);
                    let s = t.matvec(ones, w2, 1, n)?;
                    let m = t.value(b2).len();
                    let onesb = t.constant(vec![1.0; m]);
                    let sb = t.matvec(onesb, b2, 1, m)?;
                    terms.push((1.0, s));
                    terms.push((1.0, sb));
                }
                let root = t.weighted_sum(terms, 0.0)?;
                Ok((t, root, tp.layers))
            },
            &params,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8, "err = {err}");
    }

    #[test]
    fn mlp_cross_entropy_gradient_matches_finite_differences() {
        let params = ModelParams::new_mlp(&[3, 8, 4], 5).unwrap();
        let xs = [[0.2, -0.7, 1.1], [1.5, 0.1, -0.3]];
        let targets = [[0.0, 1.0, 0.0, 0.0], [0.0, 0.0, 0.0, 1.0]];
        let err = grad_check(
            |p| {
                let mut t = Tape::new();
                let tp = TapeParams::register(&mut t, p);
                let mut terms = Vec::new();
                for (x, y) in xs.iter().zip(&targets) {
                    let logits = mlp_forward_taped(&mut t, &tp, p, x)?;
                    let ce = softmax_ce_taped(&mut t, logits, y)?;
                    terms.push((0.5, ce));
                }
                let root = t.weighted_sum(terms, 0.0)?;
                Ok((t, root, tp.layers))
            },
            &params,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "err = {err}");
    }

    #[test]
    fn rejects_nonpositive_eps() {
        let params = ModelParams::new_mlp(&[1, 1], 0).unwrap();
        assert!(grad_check(
            |_| {
                let mut t = Tape::new();
                let root = t.constant(vec![0.0]);
                Ok((t, root, vec![]))
            },
            &params,
            0.0
        )
        .is_err());
    }
}
