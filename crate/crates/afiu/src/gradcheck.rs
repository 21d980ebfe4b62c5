//! Central finite-difference utilities for verifying analytic gradients.
//!
//! These evaluate the checked function as a black box; they never look at
//! tape internals, so they stay independent of the backward implementation.

use ndarray::ArrayD;

/// Central difference of `eval` with respect to one flat entry of `x`.
pub fn central_diff_entry<F>(x: &ArrayD<f64>, flat: usize, h: f64, mut eval: F) -> f64
where
    F: FnMut(&ArrayD<f64>) -> f64,
{
    let mut xp = x.clone();
    xp.as_slice_mut().unwrap()[flat] += h;
    let fp = eval(&xp);
    let mut xm = x.clone();
    xm.as_slice_mut().unwrap()[flat] -= h;
    let fm = eval(&xm);
    (fp - fm) / (2.0 * h)
}

/// True when `analytic` and `numeric` agree within a relative tolerance,
/// with an absolute floor for near-zero gradients.
pub fn grads_close(analytic: f64, numeric: f64, rel_tol: f64, abs_floor: f64) -> bool {
    let diff = (analytic - numeric).abs();
    diff <= abs_floor || diff <= rel_tol * analytic.abs().max(numeric.abs())
}

/// Central difference with respect to one entry of a named parameter,
/// restoring the store afterwards.
pub fn central_diff_param<F>(
    store: &mut crate::params::ParamStore<f64>,
    name: &str,
    flat: usize,
    h: f64,
    mut eval: F,
) -> f64
where
    F: FnMut(&mut crate::params::ParamStore<f64>) -> f64,
{
    let orig = store.value(name).clone();
    let mut plus = orig.clone();
    plus.as_slice_mut().unwrap()[flat] += h;
    store.set(name, plus);
    let fp = eval(store);
    let mut minus = orig.clone();
    minus.as_slice_mut().unwrap()[flat] -= h;
    store.set(name, minus);
    let fm = eval(store);
    store.set(name, orig);
    (fp - fm) / (2.0 * h)
}
