//! Central finite-difference verification of [`Graph::gradient`].

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};

/// Compares the analytic gradient of `loss` with respect to the trainable
/// leaf `name` against central differences `(L(θ+ε) − L(θ−ε)) / 2ε`, one
/// coordinate at a time. Returns the largest relative error, with
/// denominator `max(|analytic|, |numeric|, 1e-8)`.
///
/// The leaf is restored and the graph recomputed before returning.
pub fn finite_diff_check(graph: &mut Graph, loss: NodeId, name: &str, epsilon: f32) -> Result<f32> {
    if !(epsilon > 0.0) {
        return Err(Error::contract(format!("epsilon must be positive, got {epsilon}")));
    }
    let analytic = graph.gradient(loss, &[name])?.remove(name).expect("requested gradient");
    let eps = epsilon as f64;
    let original = graph.leaf_buffer_mut(name)?.clone();
    let mut worst = 0.0f64;
    let mut outcome = Ok(());
    for (i, &a) in analytic.data().iter().enumerate() {
        let probe = |g: &mut Graph, delta: f64| -> Result<f64> {
            g.leaf_buffer_mut(name)?[i] = original[i] + delta;
            g.recompute()?;
            Ok(g.scalar(loss))
        };
        let (plus, minus) = match (probe(graph, eps), probe(graph, -eps)) {
            (Ok(p), Ok(m)) => (p, m),
            (Err(e), _) | (_, Err(e)) => {
                outcome = Err(e);
                break;
            }
        };
        graph.leaf_buffer_mut(name)?[i] = original[i];
        let numeric = (plus - minus) / (2.0 * eps);
        let a = a as f64;
        let denom = a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max((a - numeric).abs() / denom);
    }
    *graph.leaf_buffer_mut(name)? = original;
    graph.recompute()?;
    outcome?;
    Ok(worst as f32)
}
