//! Central finite-difference gradient checking at f64.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{ParamStore, Tape, Tensor, Var};
use crate::error::Result;

/// Default central-difference step.
pub const DEFAULT_EPS: f64 = 1e-5;

/// Below this magnitude an entry's error is measured absolutely.
pub const REL_FLOOR: f64 = 1e-6;

/// One-sided slopes that disagree by more than this fraction mean the
/// stencil straddles a kink (a ReLU or a max/argmin switching), where the
/// central difference does not estimate the derivative.
pub const KINK_TOL: f64 = 1e-3;

/// Worst disagreement found by [`check_gradients`].
#[derive(Clone, Debug, PartialEq)]
pub struct CheckOutcome {
    pub max_rel_err: f64,
    /// Location of the worst entry, e.g. `input0[3]` or `param mae.omega1.w[5]`.
    pub worst: String,
    /// Entries compared.
    pub entries: usize,
    /// Entries skipped because the stencil straddled a kink.
    pub kinks: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares the tape's gradients of `Σ out ⊙ P` (with a fixed random probe
/// `P`) against central differences, for every input and every parameter in
/// `store`. Entries whose left and right one-sided slopes disagree by more
/// than [`KINK_TOL`] are counted in `kinks` and not compared.
///
/// `build` receives one leaf per input tensor and returns the output.
pub fn check_gradients<F>(
    inputs: &[Tensor<f64>],
    store: &ParamStore<f64>,
    eps: f64,
    probe_seed: u64,
    build: F,
) -> Result<CheckOutcome>
where
    F: Fn(&mut Tape<f64>, &ParamStore<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let leaves: Vec<Var> = inputs.iter().map(|t| tape.input(t.clone(), true)).collect();
    let out = build(&mut tape, store, &leaves)?;
    let mut rng = ChaCha8Rng::seed_from_u64(probe_seed);
    let probe = Tensor::<f64>::uniform(tape.shape(out).to_vec(), -1.0, 1.0, &mut rng);
    let loss = tape.weighted_sum(out, probe.clone())?;
    let grads = tape.gradients(loss, None)?;

    let eval = |inputs: &[Tensor<f64>], store: &ParamStore<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let leaves: Vec<Var> = inputs.iter().map(|t| tape.input(t.clone(), false)).collect();
        let out = build(&mut tape, store, &leaves)?;
        let loss = tape.weighted_sum(out, probe.clone())?;
        Ok(tape.value(loss).item())
    };

    let base = eval(inputs, store)?;
    let mut worst = CheckOutcome {
        max_rel_err: 0.0,
        worst: String::from("-"),
        entries: 0,
        kinks: 0,
    };
    let mut note = |analytic: f64, plus: f64, minus: f64, place: String| {
        let right = (plus - base) / eps;
        let left = (base - minus) / eps;
        if (right - left).abs() > KINK_TOL * right.abs().max(left.abs()).max(REL_FLOOR) {
            worst.kinks += 1;
            return;
        }
        worst.entries += 1;
        let err = relative_error(analytic, (plus - minus) / (2.0 * eps));
        if err > worst.max_rel_err || err.is_nan() {
            worst.max_rel_err = err;
            worst.worst = place;
        }
    };

    let mut probe_inputs = inputs.to_vec();
    for (i, leaf) in leaves.iter().enumerate() {
        let zero = Tensor::zeros(inputs[i].shape().to_vec());
        let analytic = grads.wrt(*leaf).unwrap_or(&zero).clone();
        for j in 0..inputs[i].len() {
            let orig = inputs[i].data()[j];
            probe_inputs[i].data_mut()[j] = orig + eps;
            let plus = eval(&probe_inputs, store)?;
            probe_inputs[i].data_mut()[j] = orig - eps;
            let minus = eval(&probe_inputs, store)?;
            probe_inputs[i].data_mut()[j] = orig;
            note(analytic.data()[j], plus, minus, format!("input{i}[{j}]"));
        }
    }

    let mut probe_store = store.clone();
    for id in store.ids() {
        let value = store.value(id);
        let zero = Tensor::zeros(value.shape().to_vec());
        let analytic = grads.param(id).unwrap_or(&zero).clone();
        for j in 0..value.len() {
            let orig = value.data()[j];
            probe_store.get_mut(id).value.data_mut()[j] = orig + eps;
            let plus = eval(inputs, &probe_store)?;
            probe_store.get_mut(id).value.data_mut()[j] = orig - eps;
            let minus = eval(inputs, &probe_store)?;
            probe_store.get_mut(id).value.data_mut()[j] = orig;
            note(
                analytic.data()[j],
                plus,
                minus,
                format!("param {}[{j}]", store.name(id)),
            );
        }
    }
    Ok(worst)
}
