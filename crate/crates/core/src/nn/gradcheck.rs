//! Central finite-difference gradient checks.
//!
//! These recompute the loss by perturbing one scalar at a time and never touch
//! the tape's backward closures, so they are an independent check on them.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::params::{Bound, ParamStore};
use super::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheck {
    pub checked: usize,
    pub max_rel_err: f64,
    /// `(label, analytic, numeric)` per checked scalar.
    pub samples: Vec<(String, f64, f64)>,
}

/// `|a − n| / max(|a| + |n|, 1e-12)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-12)
}

fn eval(inputs: &[Tensor], f: &dyn Fn(&mut Tape, &[Var]) -> Var) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars);
    tape.value(out).item()
}

/// Checks every scalar of every input tensor.
pub fn check_inputs(inputs: &[Tensor], step: f64, f: &dyn Fn(&mut Tape, &[Var]) -> Var) -> GradCheck {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars);
    let grads = tape.backward(out);

    let mut samples = Vec::new();
    let mut max_rel_err: f64 = 0.0;
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[i]).cloned().unwrap_or_else(|| Tensor::zeros(input.shape()));
        for j in 0..input.len() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += step;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= step;
            let numeric = (eval(&plus, f) - eval(&minus, f)) / (2.0 * step);
            let a = analytic.data()[j];
            max_rel_err = max_rel_err.max(relative_error(a, numeric));
            samples.push((format!("input{i}[{j}]"), a, numeric));
        }
    }
    GradCheck {
        checked: samples.len(),
        max_rel_err,
        samples,
    }
}

/// Checks `count` randomly sampled scalars of a parameter store.
///
/// Scalars whose analytic and numeric gradients are both below `1e-9` carry no
/// signal at this step size; they are skipped and others are drawn instead.
pub fn check_params(
    store: &ParamStore,
    count: usize,
    seed: u64,
    step: f64,
    loss: &dyn Fn(&mut Tape, &Bound) -> Var,
) -> GradCheck {
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape, true);
    let out = loss(&mut tape, &bound);
    let grads = bound.collect_grads(store, &tape.backward(out));

    let eval_store = |s: &ParamStore| {
        let mut tape = Tape::new();
        let bound = s.bind(&mut tape, false);
        let out = loss(&mut tape, &bound);
        tape.value(out).item()
    };

    let names: Vec<&String> = store.names().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::new();
    let mut max_rel_err: f64 = 0.0;
    let mut attempts = 0;
    while samples.len() < count && attempts < count * 50 {
        attempts += 1;
        let name = names[rng.random_range(0..names.len())];
        let len = store.get(name).unwrap().len();
        let j = rng.random_range(0..len);
        let a = grads.get(name).unwrap().data()[j];

        let mut plus = store.clone();
        plus.get_mut(name).unwrap().data_mut()[j] += step;
        let mut minus = store.clone();
        minus.get_mut(name).unwrap().data_mut()[j] -= step;
        let numeric = (eval_store(&plus) - eval_store(&minus)) / (2.0 * step);
        if a.abs() < 1e-9 && numeric.abs() < 1e-9 {
            continue;
        }
        max_rel_err = max_rel_err.max(relative_error(a, numeric));
        samples.push((format!("{name}[{j}]"), a, numeric));
    }
    GradCheck {
        checked: samples.len(),
        max_rel_err,
        samples,
    }
}
