use super::params::ParamStore;
use super::tape::{Tape, Var};
use crate::error::{Error, Result};

pub const GRAD_FLOOR: f64 = 1e-6;

/// Compares backward-pass gradients of `f` against central differences for
/// every entry of every trainable parameter.
///
/// Returns the maximum of `|analytic - numeric| / max(|analytic|, |numeric|, GRAD_FLOOR)`.
/// Gradients that are exactly zero (attention key biases, for one) show
/// central-difference rounding noise near 1e-11, so entries below the
/// floor are in effect compared absolutely.
/// `f` is evaluated on evaluation tapes, so dropout never fires.
pub fn check_gradients<F>(store: &mut ParamStore, eps: f64, f: F) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape<'t>) -> Result<Var<'t>>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::invalid(format!(
            "finite-difference step {eps} outside [1e-7, 1e-3]"
        )));
    }
    let analytic = {
        let tape = Tape::new(store);
        let loss = f(&tape)?;
        ensure_finite(loss.value().item())?;
        tape.backward(loss)?.into_params()
    };
    let eval = |store: &ParamStore| -> Result<f64> {
        let tape = Tape::new(store);
        let v = f(&tape)?.value().item();
        ensure_finite(v)?;
        Ok(v)
    };

    let ids: Vec<_> = store
        .iter()
        .filter(|(_, p)| p.trainable())
        .map(|(id, _)| id)
        .collect();
    let mut worst: f64 = 0.0;
    for id in ids {
        let n = store.value(id).numel();
        let grad = analytic.get(id).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; n]);
        for i in 0..n {
            let orig = store.value(id).data()[i];
            store.value_mut(id).data_mut()[i] = orig + eps;
            let plus = eval(store);
            store.value_mut(id).data_mut()[i] = orig - eps;
            let minus = eval(store);
            store.value_mut(id).data_mut()[i] = orig;
            let numeric = (plus? - minus?) / (2.0 * eps);
            let a = grad[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(GRAD_FLOOR);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

fn ensure_finite(v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("objective evaluated to {v}")))
    }
}
