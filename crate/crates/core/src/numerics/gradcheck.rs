use super::graph::{Graph, Var};
use super::params::{ParamStore, Trainable};
use crate::error::{Error, Result};

/// Outcome of comparing reverse-mode gradients against central differences.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// `(parameter name, max relative error over its checked entries)`.
    pub per_param: Vec<(String, f64)>,
    pub max_rel_error: f64,
    pub step: f64,
    pub tolerance: f64,
    pub pass: bool,
    pub checked_entries: usize,
}

/// Relative error with denominator `max(|analytic|, |numeric|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Checks every trainable entry of `store` against `(f(w+h) - f(w-h)) / 2h`.
///
/// `f` records a scalar-valued function of the stored parameters on the
/// supplied graph. Masked parameters are checked only at their trainable
/// entries.
pub fn grad_check<F>(store: &mut ParamStore<f64>, f: F, h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: for<'s> Fn(&mut Graph<'s, f64>) -> Result<Var>,
{
    if !(h > 0.0) {
        return Err(Error::domain("grad_check step must be positive"));
    }
    let analytic = {
        let mut g = Graph::new(store);
        let out = f(&mut g)?;
        let v = g.scalar(out);
        if !v.is_finite() {
            return Err(Error::numeric(format!("function value {v} is not finite")));
        }
        g.backward(out)?
    };

    let eval = |store: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::no_grad(store);
        let out = f(&mut g)?;
        let v = g.scalar(out);
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::numeric(format!("function value {v} is not finite")))
        }
    };

    let ids: Vec<_> = store.iter().filter(|(_, p)| p.trainable.is_trainable()).map(|(id, _)| id).collect();
    let mut per_param = Vec::with_capacity(ids.len());
    let mut max_rel_error: f64 = 0.0;
    let mut checked_entries = 0;
    for id in ids {
        let n = store.value(id).numel();
        let mask = match &store.get(id).trainable {
            Trainable::Masked(m) => Some(m.clone()),
            _ => None,
        };
        let grad = analytic.get(id).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; n]);
        let mut worst: f64 = 0.0;
        for i in 0..n {
            if mask.as_ref().is_some_and(|m| !m[i]) {
                continue;
            }
            let orig = store.value(id).data()[i];
            store.get_mut(id).value.data_mut()[i] = orig + h;
            let plus = eval(store);
            store.get_mut(id).value.data_mut()[i] = orig - h;
            let minus = eval(store);
            store.get_mut(id).value.data_mut()[i] = orig;
            let numeric = (plus? - minus?) / (2.0 * h);
            worst = worst.max(relative_error(grad[i], numeric));
            checked_entries += 1;
        }
        max_rel_error = max_rel_error.max(worst);
        per_param.push((store.get(id).name.clone(), worst));
    }
    Ok(GradCheckReport {
        per_param,
        max_rel_error,
        step: h,
        tolerance: tol,
        pass: max_rel_error <= tol,
        checked_entries,
    })
}
