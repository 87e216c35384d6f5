//! Central finite-difference verification of tape gradients.

use crate::error::{Error, Result};
use crate::params::ParameterStore;
use crate::tape::{Tape, Var};

/// Gradients smaller than this (times `max(1, |f|)`) are compared absolutely
/// rather than relatively: central differences carry roundoff of order
/// `ε_mach · |f| / ε`, which swamps gradients far below the loss scale.
pub const RELATIVE_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// Parameter name and flat entry index of the worst entry.
    pub worst: Option<(String, usize)>,
    pub analytic: f64,
    pub numeric: f64,
    pub entries_checked: usize,
}

/// `|a - n| / max(|a|, |n|, floor)`
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares the tape gradient of `loss_fn` with `(f(θ+ε) - f(θ-ε)) / 2ε` for every
/// entry of every parameter in `store`.
///
/// `loss_fn` must be a pure function of the store values: anything random inside
/// it has to be re-seeded identically on every call. Gradient slots are left zeroed.
pub fn grad_check<F>(mut loss_fn: F, store: &mut ParameterStore, eps: f64) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape, &ParameterStore) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::Contract(format!("finite-difference step {eps} outside [1e-7, 1e-3]")));
    }
    store.zero_grads();
    let mut tape = Tape::new();
    let loss = loss_fn(&mut tape, store)?;
    let floor = RELATIVE_FLOOR * tape.value(loss).item().abs().max(1.0);
    tape.backward(loss, store)?;
    let analytic: Vec<Vec<f64>> = store.iter().map(|(_, p)| p.grad.data().to_vec()).collect();
    store.zero_grads();
    drop(tape);

    let mut eval = |store: &ParameterStore| -> Result<f64> {
        let mut tape = Tape::new();
        let v = loss_fn(&mut tape, store)?;
        Ok(tape.value(v).item())
    };

    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst: None,
        analytic: 0.0,
        numeric: 0.0,
        entries_checked: 0,
    };
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for k in 0..store.value(id).len() {
            let original = store.value(id).data()[k];
            store.value_mut(id).data_mut()[k] = original + eps;
            let plus = eval(store)?;
            store.value_mut(id).data_mut()[k] = original - eps;
            let minus = eval(store)?;
            store.value_mut(id).data_mut()[k] = original;

            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[id.index()][k];
            let err = relative_error(a, numeric, floor);
            report.entries_checked += 1;
            if err > report.max_relative_error || report.worst.is_none() {
                report.max_relative_error = err;
                report.worst = Some((store.get(id).name.clone(), k));
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn quadratic_matches() {
        let mut store = ParameterStore::new(1);
        let id = store.insert_uniform("theta", 1, 5, 1).unwrap();
        let report = grad_check(
            |tape, s| {
                let t = tape.param(s, id);
                let sq = tape.mul(t, t)?;
                Ok(tape.sum(sq))
            },
            &mut store,
            1e-5,
        )
        .unwrap();
        assert!(report.max_relative_error < 1e-8, "{report:?}");
        assert_eq!(report.entries_checked, 5);
    }

    #[test]
    fn sigmoid_times_tanh() {
        let mut store = ParameterStore::new(0);
        let id = store.insert("theta", Tensor::row(&[0.3, -0.7])).unwrap();
        let report = grad_check(
            |tape, s| {
                let t = tape.param(s, id);
                let a = tape.pick(t, 0)?;
                let b = tape.pick(t, 1)?;
                let sa = tape.sigmoid(a);
                let tb = tape.tanh(b);
                tape.mul(sa, tb)
            },
            &mut store,
            1e-5,
        )
        .unwrap();
        assert!(report.max_relative_error < 1e-6, "{report:?}");
    }

    #[test]
    fn rejects_bad_step() {
        let mut store = ParameterStore::new(0);
        store.insert("x", Tensor::scalar(1.0)).unwrap();
        let r = grad_check(|tape, _| Ok(tape.constant(Tensor::scalar(0.0))), &mut store, 0.1);
        assert!(r.is_err());
    }
}
