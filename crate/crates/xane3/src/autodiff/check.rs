use crate::error::{Result, XaneError};

use super::params::ParamStore;
use super::tape::{Tape, Var};

/// Compare analytic gradients against central finite differences for a
/// scalar-valued function of the parameter store. Returns the max relative
/// error over every parameter entry.
///
/// `f` receives a tape pre-loaded with the parameters (vars aligned with
/// parameter ids) and must return the scalar loss var.
pub fn finite_diff_check<F>(f: F, params: &ParamStore, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    assert!(step > 0.0);
    let eval = |store: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new();
        let vars = store.inject(&mut tape)?;
        let loss = f(&mut tape, &vars)?;
        Ok(tape.value(loss).item())
    };

    // analytic gradients
    let mut tape = Tape::new();
    let vars = params.inject(&mut tape)?;
    let loss = f(&mut tape, &vars)?;
    let v1 = tape.value(loss).item();
    let grads = tape.backward(loss)?;

    let v2 = eval(params)?;
    if v1 != v2 {
        return Err(XaneError::NonDeterministic(v1, v2));
    }

    let mut max_rel = 0.0f64;
    let mut work = params.clone();
    for id in 0..params.len() {
        let n = params.value(id).len();
        for i in 0..n {
            let orig = params.value(id).data()[i];
            work.value_mut(id).data_mut()[i] = orig + step;
            let fp = eval(&work)?;
            work.value_mut(id).data_mut()[i] = orig - step;
            let fm = eval(&work)?;
            work.value_mut(id).data_mut()[i] = orig;
            let numeric = (fp - fm) / (2.0 * step);
            let analytic = grads
                .get(vars[id])
                .map(|g| g.data()[i])
                .unwrap_or(0.0);
            let denom = analytic.abs().max(numeric.abs()).max(1e-12);
            max_rel = max_rel.max((analytic - numeric).abs() / denom);
        }
    }
    Ok(max_rel)
}
