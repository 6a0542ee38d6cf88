//! Finite-difference gradient checking.
//!
//! The oracle is the plain two-sided difference quotient evaluated with
//! f64 arithmetic end to end, so the comparison against the analytic
//! gradient measures the backward pass rather than f32 rounding noise.

use crate::error::{Error, Result};
use crate::graph::ModelGraph;
use crate::tensor::Tensor;

/// Central difference gradient of an arbitrary scalar function.
pub fn central_difference<F>(mut f: F, x: &[f64], h: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut grad = vec![0.0; x.len()];
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let up = f(&probe);
        probe[i] = x[i] - h;
        let down = f(&probe);
        probe[i] = x[i];
        grad[i] = (up - down) / (2.0 * h);
    }
    grad
}

/// Compares the analytic input gradient of a graph against central finite
/// differences of the loss, returning the max relative error
/// `|analytic - fd| / (|analytic| + 1e-8)` over the checked coordinates.
///
/// When the input has more than `max_coords` elements, the coordinates with
/// the largest analytic magnitude are checked; these carry the gradient
/// signal an attack would follow.
pub fn finite_diff_check(
    graph: &ModelGraph,
    batch: &Tensor,
    labels: &[usize],
    h: f64,
    max_coords: usize,
) -> Result<f64> {
    if h <= 0.0 {
        return Err(Error::invalid("finite_diff_check", format!("step h must be > 0, got {h}")));
    }
    let analytic = graph.input_grad_f64(batch, labels)?;
    let x: Vec<f64> = batch.data().iter().map(|&v| v as f64).collect();
    let n = batch.batch_size();

    let coords: Vec<usize> = if analytic.len() <= max_coords {
        (0..analytic.len()).collect()
    } else {
        let mut idx: Vec<usize> = (0..analytic.len()).collect();
        idx.sort_by(|&a, &b| {
            analytic[b].abs().partial_cmp(&analytic[a].abs()).unwrap().then(a.cmp(&b))
        });
        idx.truncate(max_coords);
        idx
    };

    let mut probe = x.clone();
    let mut max_rel = 0.0_f64;
    for &i in &coords {
        probe[i] = x[i] + h;
        let up = graph.loss_in::<f64>(&probe, labels, n);
        probe[i] = x[i] - h;
        let down = graph.loss_in::<f64>(&probe, labels, n);
        probe[i] = x[i];
        let fd = (up - down) / (2.0 * h);
        let rel = (analytic[i] - fd).abs() / (analytic[i].abs() + 1e-8);
        if rel > max_rel {
            max_rel = rel;
        }
    }
    Ok(max_rel)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{GraphBuilder, OutputMode};

    #[test]
    fn central_difference_exact_on_quadratics() {
        // f(x) = (3x - 2)^2; the difference quotient is exact for any h.
        let f = |x: &[f64]| (3.0 * x[0] - 2.0).powi(2);
        let g = central_difference(f, &[1.0], 1e-3);
        let exact = 2.0 * 3.0 * (3.0 - 2.0);
        assert!((g[0] - exact).abs() / exact.abs() < 1e-6);
    }

    #[test]
    fn zero_step_is_a_precondition_error() {
        let mut b = GraphBuilder::new(vec![2]);
        let w = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let d = b.dense(b.input(), w, Tensor::zeros(vec![2])).unwrap();
        let g = b.finish(d, OutputMode::Logits);
        let x = Tensor::new(vec![1, 2], vec![0.2, 0.8]).unwrap();
        assert!(finite_diff_check(&g, &x, &[0], 0.0, 16).is_err());
    }

    #[test]
    fn relu_graph_matches_away_from_kinks() {
        let mut b = GraphBuilder::new(vec![3]);
        let w = Tensor::new(vec![3, 3], vec![0.9, -0.4, 0.2, 0.5, 0.7, -0.8, -0.3, 0.6, 0.4])
            .unwrap();
        let d = b.dense(b.input(), w, Tensor::new(vec![3], vec![0.3, -0.2, 0.1]).unwrap()).unwrap();
        let r = b.relu(d);
        let w2 = Tensor::new(vec![2, 3], vec![0.6, -0.5, 0.9, -0.7, 0.8, 0.2]).unwrap();
        let out = b.dense(r, w2, Tensor::zeros(vec![2])).unwrap();
        let g = b.finish(out, OutputMode::Logits);
        let x = Tensor::new(vec![1, 3], vec![0.9, 0.4, 0.7]).unwrap();
        // All pre-activations sit well away from zero at this point.
        assert!(g.kink_margin(&x).unwrap() > 1e-2);
        let err = finite_diff_check(&g, &x, &[1], 1e-3, 16).unwrap();
        assert!(err < 1e-4, "relative error {err}");
    }
}
