//! Finite-difference verification of reverse-mode gradients.

use crate::autodiff::{Graph, NodeId, ParamStore};
use crate::{Error, Result};

pub struct GradCheckReport {
    pub loss: f64,
    /// Scalar entries compared across all trainable parameters.
    pub checked: usize,
    pub max_rel_err: f64,
    /// Parameter holding the worst entry, when anything was checked.
    pub worst: Option<String>,
}

/// Compares analytic gradients against central differences with step `eps`.
///
/// `build` must construct the loss from scratch on the given graph; it is
/// called once recording and 2·P times in evaluation mode. The relative
/// error per entry is |a − n| / max(1, |a|, |n|). Frozen parameters are
/// skipped. The build is evaluated twice up front and must reproduce the
/// loss bit for bit, otherwise the finite differences would be meaningless.
pub fn grad_check(
    store: &mut ParamStore,
    eps: f64,
    build: &dyn Fn(&mut Graph, &ParamStore) -> Result<NodeId>,
) -> Result<GradCheckReport> {
    if !(1e-7..=1e-4).contains(&eps) {
        return Err(Error::Config(format!(
            "gradcheck step must lie in [1e-7, 1e-4], got {eps}"
        )));
    }

    let eval = |store: &ParamStore| -> Result<f64> {
        let mut g = Graph::eval();
        let loss = build(&mut g, store)?;
        Ok(g.value(loss).item())
    };

    let l0 = eval(store)?;
    let l1 = eval(store)?;
    if l0.to_bits() != l1.to_bits() {
        return Err(Error::Usage(format!(
            "loss is not deterministic under re-evaluation: {l0} vs {l1}"
        )));
    }

    store.zero_grads();
    let mut g = Graph::new();
    let loss = build(&mut g, store)?;
    let loss_val = g.value(loss).item();
    g.backward(loss, store)?;

    let mut checked = 0usize;
    let mut max_rel = 0.0f64;
    let mut worst = None;
    for pid in store.ids() {
        if !store.get(pid).trainable {
            continue;
        }
        for k in 0..store.get(pid).value.len() {
            let orig = store.get(pid).value.at(k);
            store.get_mut(pid).value.as_mut_slice()[k] = orig + eps;
            let fp = eval(store)?;
            store.get_mut(pid).value.as_mut_slice()[k] = orig - eps;
            let fm = eval(store)?;
            store.get_mut(pid).value.as_mut_slice()[k] = orig;
            let num = (fp - fm) / (2.0 * eps);
            let ana = store.get(pid).grad.at(k);
            let rel = (ana - num).abs() / f64::max(1.0, f64::max(ana.abs(), num.abs()));
            if rel > max_rel || worst.is_none() {
                max_rel = rel.max(max_rel);
                worst = Some(store.name(pid).to_string());
            }
            checked += 1;
        }
    }

    Ok(GradCheckReport {
        loss: loss_val,
        checked,
        max_rel_err: max_rel,
        worst,
    })
}
