use super::graph::{Graph, Var};
use super::params::ParamStore;
use super::real::{Dd, Real};
use crate::error::{Error, Result};

/// Outcome of comparing reverse-mode gradients with central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter group and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    /// Reverse-mode and finite-difference values at the worst coordinate.
    pub worst_values: (f64, f64),
    pub coords_checked: usize,
}

/// `|a - b| / max(1e-8, |a| + |b|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// A scalar function of the parameters that can be built in any precision.
///
/// `eval` must record the same computation for every `T` and be
/// deterministic.
pub trait Objective {
    fn eval<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore) -> Result<Var>;
}

fn forward<O: Objective>(f: &O, store: &ParamStore) -> Result<Dd> {
    let mut g = Graph::<Dd>::default();
    let out = f.eval(&mut g, store)?;
    let v = g.value(out);
    if v.shape() != (1, 1) {
        return Err(Error::Contract("grad_check needs a scalar-valued function".into()));
    }
    let v = v.data()[0];
    if !v.is_finite() {
        return Err(Error::NonFinite(format!("grad_check forward value {}", v.to_f64())));
    }
    Ok(v)
}

/// Checks every coordinate of every parameter group in `store`.
///
/// Gradients come from the `f64` reverse pass. The central differences are
/// evaluated in double-double precision over the `f64` step actually taken,
/// so their error is the truncation term alone, not loss rounding.
pub fn grad_check<O: Objective>(store: &ParamStore, eps: f64, f: &O) -> Result<GradCheckReport> {
    if eps.is_nan() || eps <= 0.0 {
        return Err(Error::Config(format!("finite-difference step must be positive, got {eps}")));
    }
    let mut g = Graph::new();
    let out = f.eval(&mut g, store)?;
    if g.value(out).shape() != (1, 1) {
        return Err(Error::Contract("grad_check needs a scalar-valued function".into()));
    }
    if !g.value(out).all_finite() {
        return Err(Error::NonFinite("grad_check forward value".into()));
    }
    let grads = g.backward(out)?;

    let mut probe = store.clone();
    let mut report = GradCheckReport { max_rel_error: 0.0, worst: None, worst_values: (0.0, 0.0), coords_checked: 0 };
    for id in store.ids() {
        let analytic = grads.param(id);
        for k in 0..store.value(id).len() {
            let original = store.value(id).data()[k];
            let (up, down) = (original + eps, original - eps);
            probe.value_mut(id).data_mut()[k] = up;
            let plus = forward(f, &probe)?;
            probe.value_mut(id).data_mut()[k] = down;
            let minus = forward(f, &probe)?;
            probe.value_mut(id).data_mut()[k] = original;

            let numeric = ((plus - minus) / (Dd::from(up) - Dd::from(down))).to_f64();
            let a = analytic.map_or(0.0, |t| t.data()[k]);
            let err = relative_error(a, numeric);
            report.coords_checked += 1;
            if report.worst.is_none() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((store.name(id).to_string(), k));
                report.worst_values = (a, numeric);
            }
        }
    }
    Ok(report)
}
