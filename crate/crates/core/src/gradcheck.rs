//! Central finite-difference gradient checks.

use crate::error::Result;
use crate::graph::{Graph, NodeId};
use crate::params::ParamStore;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    /// Largest `|analytic - numeric| / max(|analytic|, |numeric|, floor)`.
    pub max_rel_error: f64,
    /// Parameter and flat index where it occurred.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
}

/// Compare backpropagated gradients of the scalar `loss` with central
/// differences of step `h`. Checks at most `max_per_param` evenly spaced
/// entries of each parameter.
pub fn check<F>(params: &ParamStore<f64>, h: f64, max_per_param: usize, loss: F) -> Result<GradCheck>
where
    F: Fn(&mut Graph<'_, f64>) -> Result<NodeId>,
{
    const FLOOR: f64 = 1e-6;
    let analytic = {
        let mut g = Graph::new(params);
        let l = loss(&mut g)?;
        g.backward(l)?
    };
    let eval = |store: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::inference(store);
        let l = loss(&mut g)?;
        Ok(g.scalar(l))
    };
    let mut perturbed = params.clone();
    let mut report = GradCheck {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
    };
    for (id, p) in params.iter() {
        let n = p.value.len();
        let stride = n.div_ceil(max_per_param.max(1)).max(1);
        for i in (0..n).step_by(stride) {
            let orig = p.value.data()[i];
            perturbed.value_mut(id).data_mut()[i] = orig + h;
            let up = eval(&perturbed)?;
            perturbed.value_mut(id).data_mut()[i] = orig - h;
            let down = eval(&perturbed)?;
            perturbed.value_mut(id).data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic.get(id).data()[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(FLOOR);
            report.checked += 1;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((p.name.clone(), i));
            }
        }
    }
    Ok(report)
}
