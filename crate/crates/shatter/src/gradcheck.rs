//! Central finite-difference verification of analytic gradients.
//!
//! The numeric side evaluates the loss closure from scratch at perturbed
//! parameter values, so it shares nothing with the backward pass it checks.

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::tensor::Tensor;

/// A loss builder: given a graph and the parameter leaves (bound in the same
/// order as `params`), produce a scalar loss node.
pub type LossFn<'a> = &'a dyn Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId>;

/// Worst relative error between analytic gradients and central differences,
/// over every coordinate of every parameter. 64-bit only.
pub fn finite_diff_check(params: &[Tensor<f64>], f: LossFn, step: f64) -> Result<f64> {
    if step <= 0.0 {
        return Err(Error::Numeric("finite_diff_check needs step > 0".into()));
    }
    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = values.iter().map(|t| g.param(t.clone())).collect();
        let loss = f(&mut g, &ids)?;
        if !g.value(loss).is_scalar() {
            return Err(Error::Shape("loss must be scalar".into()));
        }
        Ok(g.value(loss).scalar_value())
    };

    // Analytic pass.
    let mut g = Graph::new();
    let ids: Vec<NodeId> = params.iter().map(|t| g.param(t.clone())).collect();
    let loss = f(&mut g, &ids)?;
    let grads = g.backward(loss)?;

    let mut worst = 0.0f64;
    let mut work: Vec<Tensor<f64>> = params.to_vec();
    for (pi, param) in params.iter().enumerate() {
        let analytic = grads.for_param(ids[pi], param.shape());
        for ci in 0..param.numel() {
            let orig = param.data()[ci];
            work[pi].data_mut()[ci] = orig + step;
            let up = eval(&work)?;
            work[pi].data_mut()[ci] = orig - step;
            let down = eval(&work)?;
            work[pi].data_mut()[ci] = orig;
            let numeric = (up - down) / (2.0 * step);
            let a = analytic.data()[ci];
            let denom = a.abs().max(numeric.abs()).max(1e-6);
            let rel = (a - numeric).abs() / denom;
            if rel > worst {
                worst = rel;
            }
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn quadratic_form_is_exact_up_to_roundoff() {
        let mut rng = Rng::new(41);
        let w = Tensor::from_fn(&[3, 3], |_| rng.normal());
        // loss = 0.5 * sum(W ∘ W): gradient W, exact for central differences.
        let err = finite_diff_check(
            &[w],
            &|g, ids| {
                let sq = g.mul(ids[0], ids[0])?;
                let s = g.sum_all(sq);
                Ok(g.scale(s, 0.5))
            },
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8, "relative error {err}");
    }

    #[test]
    fn softmax_cross_entropy_toy() {
        let mut rng = Rng::new(42);
        let w = Tensor::from_fn(&[4, 5], |_| rng.normal() * 0.5);
        let x = Tensor::from_fn(&[3, 4], |_| rng.normal());
        let labels = vec![1usize, 4, 0];
        let err = finite_diff_check(
            &[w],
            &|g, ids| {
                let xi = g.input(x.clone());
                let logits = g.matmul(xi, ids[0])?;
                g.cross_entropy(logits, &labels)
            },
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "relative error {err}");
    }

    #[test]
    fn composed_ops_pass_under_1e4() {
        // Exercises matmul, sigmoid, l2_normalize, layer_norm, gelu together.
        let mut rng = Rng::new(43);
        let w1 = Tensor::from_fn(&[4, 4], |_| rng.normal() * 0.3);
        let gain = Tensor::from_fn(&[4], |_| 1.0 + 0.1 * rng.normal());
        let bias = Tensor::from_fn(&[4], |_| 0.1 * rng.normal());
        let x = Tensor::from_fn(&[5, 4], |_| rng.normal());
        let err = finite_diff_check(
            &[w1, gain, bias],
            &|g, ids| {
                let xi = g.input(x.clone());
                let h = g.matmul(xi, ids[0])?;
                let s = g.sigmoid(h);
                let n = g.l2_normalize(s, 1, 1e-6)?;
                let ln = g.layer_norm(n, ids[1], ids[2])?;
                let ge = g.gelu(ln);
                Ok(g.sum_all(ge))
            },
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn rejects_bad_step() {
        let w = Tensor::<f64>::zeros(&[1]);
        assert!(finite_diff_check(&[w], &|g, ids| Ok(g.sum_all(ids[0])), 0.0).is_err());
    }
}
