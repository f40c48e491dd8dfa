use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, NodeId, Result, TensorError};

/// Settings for [`finite_difference_check`].
#[derive(Clone, Copy, Debug)]
pub struct FdOptions {
    pub epsilon: f64,
    /// Check at most this many elements of the leaf (chosen with `seed`).
    pub max_elements: Option<usize>,
    pub seed: u64,
}

impl Default for FdOptions {
    fn default() -> Self {
        Self { epsilon: 1e-5, max_elements: None, seed: 0 }
    }
}

impl FdOptions {
    pub fn with_epsilon(epsilon: f64) -> Self {
        Self { epsilon, ..Self::default() }
    }
}

/// Compares the backpropagated gradient of `loss` w.r.t. leaf `name` against
/// central differences and returns the largest relative error, using
/// `max(|analytic|, 1e-8)` as the denominator.
///
/// The graph is restored to its recorded leaf value before returning.
pub fn finite_difference_check(graph: &mut Graph, loss: NodeId, name: &str, opts: FdOptions) -> Result<f64> {
    if !(opts.epsilon > 0.0 && opts.epsilon <= 1e-2) {
        return Err(TensorError::Invalid {
            op: "finite_difference_check",
            detail: format!("epsilon {} outside (0, 1e-2]", opts.epsilon),
        });
    }
    let id = graph.leaf_id(name).ok_or_else(|| TensorError::UnknownLeaf(name.to_string()))?;
    let analytic = graph.leaf_gradients(loss)?.remove(name).expect("leaf present");
    let original = graph.value(id).clone();
    let n = original.numel();
    let elements: Vec<usize> = match opts.max_elements {
        Some(m) if m < n => {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
            let mut picked = sample(&mut rng, n, m).into_vec();
            picked.sort_unstable();
            picked
        }
        _ => (0..n).collect(),
    };

    let mut probe = original.clone();
    let mut inputs = BTreeMap::new();
    let mut loss_at = |probe: &super::Tensor, graph: &mut Graph| -> Result<f64> {
        inputs.insert(name.to_string(), probe.clone());
        graph.evaluate(&inputs)?;
        Ok(graph.value(loss).item())
    };

    let mut worst = 0.0f64;
    let mut outcome = Ok(());
    for &e in &elements {
        let x0 = original.data()[e];
        probe.data_mut()[e] = x0 + opts.epsilon;
        let plus = loss_at(&probe, graph);
        probe.data_mut()[e] = x0 - opts.epsilon;
        let minus = loss_at(&probe, graph);
        probe.data_mut()[e] = x0;
        let (plus, minus) = match (plus, minus) {
            (Ok(p), Ok(m)) => (p, m),
            (Err(err), _) | (_, Err(err)) => {
                outcome = Err(err);
                break;
            }
        };
        let numeric = (plus - minus) / (2.0 * opts.epsilon);
        let g = analytic.data()[e];
        worst = worst.max((numeric - g).abs() / g.abs().max(1e-8));
    }
    loss_at(&original, graph)?;
    outcome.map(|_| worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn quadratic_loss_matches_analytic_gradient() {
        let mut g = Graph::new();
        let x = g.param("x", Tensor::new(vec![3], vec![0.5, -1.5, 2.0]).unwrap()).unwrap();
        let sq = g.square(x).unwrap();
        let loss = g.sum(sq).unwrap();
        let err = finite_difference_check(&mut g, loss, "x", FdOptions::with_epsilon(1e-5)).unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn constant_loss_has_zero_error() {
        let mut g = Graph::new();
        let x = g.param("x", Tensor::new(vec![2], vec![1.0, 2.0]).unwrap()).unwrap();
        let zero = g.scale(x, 0.0).unwrap();
        let loss = g.sum(zero).unwrap();
        let err = finite_difference_check(&mut g, loss, "x", FdOptions::default()).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn epsilon_out_of_range_is_rejected() {
        let mut g = Graph::new();
        let x = g.param("x", Tensor::scalar(1.0)).unwrap();
        assert!(finite_difference_check(&mut g, x, "x", FdOptions::with_epsilon(0.1)).is_err());
        assert!(finite_difference_check(&mut g, x, "x", FdOptions::with_epsilon(0.0)).is_err());
    }
}
