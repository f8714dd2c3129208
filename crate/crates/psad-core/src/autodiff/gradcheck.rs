//! Gradient verification against central finite differences.
//!
//! Stop-gradient branches are pinned to their base-point values during the
//! finite-difference re-evaluations (via the graph's SG bank), so the checked
//! function matches what the analytic gradient differentiates.

use std::collections::BTreeMap;
use std::rc::Rc;

use crate::autodiff::graph::{Graph, SgBank, Tensor};
use crate::autodiff::store::ParamStore;
use crate::error::{Error, Result};

/// Result of a single forward build: the scalar loss plus the name→leaf map
/// for every parameter the pass bound.
pub struct ForwardOutput {
    pub loss: Tensor,
    pub bindings: BTreeMap<String, Tensor>,
}

/// Compare analytic gradients with central finite differences
/// `(f(θ+h) − f(θ−h)) / 2h` for every scalar entry of every bound parameter.
/// Returns the worst relative error; absolute error is used when both the
/// analytic and numeric values are below 1e-8.
pub fn grad_check<F>(store: &mut ParamStore, h: f64, forward: F) -> Result<f64>
where
    F: Fn(&ParamStore, &mut Graph) -> Result<ForwardOutput>,
{
    assert!(h > 0.0, "grad_check: h must be positive");

    let mut g = Graph::new();
    g.record_stop_gradients();
    let out = forward(store, &mut g)?;
    let base_loss = g.scalar_value(out.loss);
    let bank: Rc<SgBank> = Rc::new(g.take_sg_bank());

    // determinism probe: an unseeded RNG inside the forward shows up here
    let repeat = {
        let mut g2 = Graph::new();
        let out2 = forward(store, &mut g2)?;
        g2.scalar_value(out2.loss)
    };
    if repeat.to_bits() != base_loss.to_bits() {
        return Err(Error::NonDeterministicForward);
    }

    let analytic = g.backward(out.loss)?;

    let eval_at = |store: &ParamStore| -> Result<f64> {
        let mut g = Graph::inference();
        g.playback_stop_gradients(Rc::clone(&bank));
        let out = forward(store, &mut g)?;
        Ok(g.scalar_value(out.loss))
    };

    let names: Vec<String> = out.bindings.keys().cloned().collect();
    let mut worst = 0.0f64;
    for name in &names {
        let leaf = out.bindings[name];
        let grad = analytic
            .get(leaf)
            .ok_or_else(|| Error::DetachedParam { name: name.clone() })?
            .to_vec();
        let n = store.get(name)?.values.len();
        for i in 0..n {
            let orig = store.get(name)?.values[i];
            store.get_mut(name)?.values[i] = orig + h;
            let f_plus = eval_at(store)?;
            store.get_mut(name)?.values[i] = orig - h;
            let f_minus = eval_at(store)?;
            store.get_mut(name)?.values[i] = orig;

            let fd = (f_plus - f_minus) / (2.0 * h);
            let a = grad[i];
            let err = if a.abs() < 1e-8 && fd.abs() < 1e-8 {
                (a - fd).abs()
            } else {
                (a - fd).abs() / a.abs().max(fd.abs())
            };
            if err > worst {
                worst = err;
            }
        }
    }
    Ok(worst)
}
