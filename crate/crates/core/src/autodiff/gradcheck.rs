use alloc::format;
use alloc::vec::Vec;

use super::{Graph, ParamStore, Real, Tensor, Var};
use crate::error::{Error, Result};

/// `|a - c| / max(|a|, |c|, 1e-6)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

fn eval<T: Real, F>(store: &ParamStore<T>, inputs: &[Tensor<T>], build: &F) -> Result<f64>
where
    F: Fn(&mut Graph<'_, T>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new(store);
    let vars = inputs
        .iter()
        .map(|t| g.input(t.shape(), t.data().to_vec(), false))
        .collect::<Result<Vec<_>>>()?;
    let loss = build(&mut g, &vars)?;
    let v = g.value(loss)[0].as_f64();
    if !v.is_finite() {
        return Err(Error::NonFinite(format!("loss {v}")));
    }
    Ok(v)
}

/// Compare analytic gradients of the scalar built by `build` against central
/// differences with step `eps`, over every coordinate of every input and
/// every trainable parameter in `store`. Returns the maximum
/// [`relative_error`].
pub fn finite_difference_check<T: Real, F>(
    store: &ParamStore<T>,
    inputs: &[Tensor<T>],
    build: F,
    eps: f64,
) -> Result<f64>
where
    F: Fn(&mut Graph<'_, T>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new(store);
    let vars = inputs
        .iter()
        .map(|t| g.input(t.shape(), t.data().to_vec(), true))
        .collect::<Result<Vec<_>>>()?;
    let loss = build(&mut g, &vars)?;
    let grads = g.backward(loss)?;
    let analytic_at = |v: Var, i: usize| grads.input(v).map_or(0.0, |s| s[i].as_f64());

    let mut worst = 0.0f64;
    let mut probe = inputs.to_vec();
    for (k, &var) in vars.iter().enumerate() {
        for i in 0..inputs[k].numel() {
            let orig = inputs[k].data()[i];
            probe[k].data_mut()[i] = orig + T::c(eps);
            let up = eval(store, &probe, &build)?;
            probe[k].data_mut()[i] = orig - T::c(eps);
            let down = eval(store, &probe, &build)?;
            probe[k].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic_at(var, i);
            if !a.is_finite() {
                return Err(Error::NonFinite(format!("analytic gradient {a}")));
            }
            worst = worst.max(relative_error(a, numeric));
        }
    }

    let trainable = store.trainable_ids();
    let mut perturbed = store.clone();
    for id in trainable {
        for i in 0..store.get(id).numel() {
            let orig = store.get(id).data()[i];
            perturbed.get_mut(id).data_mut()[i] = orig + T::c(eps);
            let up = eval(&perturbed, inputs, &build)?;
            perturbed.get_mut(id).data_mut()[i] = orig - T::c(eps);
            let down = eval(&perturbed, inputs, &build)?;
            perturbed.get_mut(id).data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = grads.param(id).map_or(0.0, |s| s[i].as_f64());
            if !a.is_finite() {
                return Err(Error::NonFinite(format!("analytic gradient {a}")));
            }
            worst = worst.max(relative_error(a, numeric));
        }
    }
    Ok(worst)
}
