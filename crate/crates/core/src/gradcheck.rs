//! Central-difference verification of tape gradients.

use crate::error::{Error, Result};
use crate::params::ParamStore;

/// Result of a gradient check: the worst relative error and where it occurred.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
}

/// Compare analytic gradients against central differences.
///
/// `f` returns the scalar loss and, when asked, fills the store's gradient
/// slots. The relative error per coordinate is
/// `|analytic - numeric| / max(1, |numeric|)`.
pub fn grad_check<F>(mut f: F, params: &mut ParamStore, h: f64) -> Result<GradCheck>
where
    F: FnMut(&mut ParamStore, bool) -> Result<f64>,
{
    if !(h > 0.0) {
        return Err(Error::Config(format!("grad_check step must be positive, got {h}")));
    }
    params.zero_grads();
    let base = f(params, true)?;
    if !base.is_finite() {
        return Err(Error::NonFinite("loss at the unperturbed point".into()));
    }
    let analytic: Vec<Option<Vec<f64>>> = params
        .iter()
        .map(|p| p.grad.as_ref().map(|g| g.data().to_vec()))
        .collect();

    let mut report = GradCheck {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
    };
    for (pi, grads) in analytic.iter().enumerate() {
        let Some(grads) = grads else { continue };
        let name = params.param(pi).name.clone();
        for (k, &ga) in grads.iter().enumerate() {
            let original = params.get(pi).data()[k];
            let mut probe = |delta: f64, params: &mut ParamStore| -> Result<f64> {
                let mut v = params.get(pi).clone();
                v.data_mut()[k] = original + delta;
                params.set(pi, v)?;
                let out = f(params, false)?;
                if !out.is_finite() {
                    return Err(Error::NonFinite(format!(
                        "loss after perturbing {name}[{k}] by {delta:+e}"
                    )));
                }
                Ok(out)
            };
            let plus = probe(h, params);
            let minus = probe(-h, params);
            let mut v = params.get(pi).clone();
            v.data_mut()[k] = original;
            params.set(pi, v)?;
            let numeric = (plus? - minus?) / (2.0 * h);
            let rel = (ga - numeric).abs() / numeric.abs().max(1.0);
            if rel > report.max_rel_error {
                report = GradCheck {
                    max_rel_error: rel,
                    worst_param: name.clone(),
                    worst_index: k,
                };
            }
        }
    }
    Ok(report)
}
