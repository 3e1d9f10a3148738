//! Central finite-difference gradient verification.
//!
//! Used by the test suites and by the `verify` CLI command. The checker is
//! independent of the tape's backward pass: it re-evaluates the recorded
//! forward function at perturbed parameter values.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::Result;
use crate::tensor::{ParamId, ParamStore, Real, Tape, Var};

/// Builds a scalar loss from the current parameter values.
pub type LossFn<'a, T> = dyn FnMut(&mut Tape<T>, &ParamStore<T>) -> Result<Var> + 'a;

/// Compare analytic gradients against central finite differences for every
/// element of the listed parameters. Returns the maximum relative error,
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-5)`.
pub fn max_rel_error<T: Real>(
    store: &mut ParamStore<T>,
    ids: &[ParamId],
    f: &mut LossFn<'_, T>,
    step: f64,
) -> Result<f64> {
    max_rel_error_sampled(
        store,
        ids,
        f,
        step,
        usize::MAX,
        &mut rand::rngs::mock::StepRng::new(0, 1),
    )
}

/// Like [`max_rel_error`] but checks at most `max_elems` randomly chosen
/// elements per parameter, for large tensors.
pub fn max_rel_error_sampled<T: Real>(
    store: &mut ParamStore<T>,
    ids: &[ParamId],
    f: &mut LossFn<'_, T>,
    step: f64,
    max_elems: usize,
    rng: &mut impl Rng,
) -> Result<f64> {
    store.zero_grads();
    let mut tape = Tape::new();
    let loss = f(&mut tape, store)?;
    tape.backward(loss, store)?;
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .map(|&id| store.get(id).grad.to_f64_vec())
        .collect();

    let h = step;
    let mut worst = 0.0f64;
    for (pi, &id) in ids.iter().enumerate() {
        let n = store.get(id).value.numel();
        let mut indices: Vec<usize> = (0..n).collect();
        if n > max_elems {
            indices.shuffle(rng);
            indices.truncate(max_elems);
        }
        for &ei in &indices {
            let orig = store.get(id).value.data()[ei];
            store.get_mut(id).value.data_mut()[ei] = orig + T::from_f64(h);
            let up = eval_loss(store, f)?;
            store.get_mut(id).value.data_mut()[ei] = orig - T::from_f64(h);
            let down = eval_loss(store, f)?;
            store.get_mut(id).value.data_mut()[ei] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[pi][ei];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-5);
            if rel > worst {
                worst = rel;
            }
        }
    }
    Ok(worst)
}

fn eval_loss<T: Real>(store: &ParamStore<T>, f: &mut LossFn<'_, T>) -> Result<f64> {
    let mut tape = Tape::new();
    let loss = f(&mut tape, store)?;
    Ok(tape.scalar_value(loss).as_f64())
}
