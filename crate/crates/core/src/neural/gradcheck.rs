//! Central finite-difference verification of the tape's gradients.

use crate::neural::graph::{Graph, NodeId};
use crate::neural::store::{ParamId, ParameterStore};

/// Compare analytic gradients against central differences for every
/// parameter coordinate and return the worst relative error,
/// |analytic − numeric| / max(|analytic|, |numeric|, floor).
///
/// The floor of 1e-5 keeps near-zero coordinates from being judged on
/// finite-difference roundoff: the probe quotient carries absolute noise
/// around ε·|loss|/step, which swamps any true relative error once the
/// gradient itself is that small.
///
/// `build` must construct the same loss each call (it runs once per probe,
/// so keep the model at toy size — a few thousand parameters).
pub fn gradient_check<F>(store: &mut ParameterStore, step: f64, build: F) -> f64
where
    F: Fn(&mut Graph) -> NodeId,
{
    let grads = {
        let mut g = Graph::new(store);
        let loss = build(&mut g);
        g.backward(loss)
    };
    let eval = |store: &ParameterStore| {
        let mut g = Graph::new(store);
        let loss = build(&mut g);
        g.scalar(loss)
    };

    let mut max_rel = 0.0f64;
    for i in 0..store.len() {
        let id = ParamId(i);
        for k in 0..store.get(id).len() {
            store.nudge(id, k, step);
            let up = eval(store);
            store.nudge(id, k, -2.0 * step);
            let down = eval(store);
            store.nudge(id, k, step);

            let numeric = (up - down) / (2.0 * step);
            let analytic = grads.get(id).map_or(0.0, |g| g.as_slice()[k]);
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-5);
            if rel > max_rel {
                max_rel = rel;
                log::debug!(
                    "worst gradient coordinate so far: {}[{k}] analytic {analytic} numeric {numeric} rel {rel}",
                    store.name(id)
                );
            }
        }
    }
    max_rel
}
