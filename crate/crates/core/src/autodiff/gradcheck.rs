//! Finite-difference gradient checking. The numeric side only ever runs
//! forward passes, so it is independent of the backward implementation.

use rand::seq::index::sample;
use rand::Rng;

use super::params::ParamStore;
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use super::TensorError;

/// Central-difference step.
pub const EPSILON: f64 = 1e-5;
/// Denominator floor of [`relative_error`], so that near-zero gradients are
/// compared in absolute terms.
pub const REL_FLOOR: f64 = 1e-3;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub max_rel_err: f64,
    /// Location of the worst entry, e.g. `input 1 [3]` or `enc.w [17]`.
    pub worst: String,
    pub checked: usize,
}

impl GradCheck {
    fn new() -> Self {
        GradCheck { max_rel_err: 0.0, worst: String::new(), checked: 0 }
    }

    fn record(&mut self, analytic: f64, numeric: f64, at: impl FnOnce() -> String) {
        let e = relative_error(analytic, numeric);
        self.checked += 1;
        if e > self.max_rel_err || self.worst.is_empty() {
            self.max_rel_err = self.max_rel_err.max(e);
            self.worst = at();
        }
    }
}

fn scalar_of(tape: &Tape, v: Var) -> Result<f64, TensorError> {
    let t = tape.value(v);
    if t.len() != 1 {
        return Err(TensorError::Shape { op: "gradcheck", detail: format!("loss shape {:?}", t.shape()) });
    }
    Ok(t.item())
}

/// Checks gradients of a scalar function with respect to every entry of
/// every input tensor.
pub fn check_inputs<F>(inputs: &[Tensor], f: F) -> Result<GradCheck, TensorError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, TensorError>,
{
    let eval = |xs: &[Tensor]| -> Result<f64, TensorError> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.constant(x.clone())).collect();
        let out = f(&mut tape, &vars)?;
        scalar_of(&tape, out)
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.constant(x.clone())).collect();
    let out = f(&mut tape, &vars)?;
    scalar_of(&tape, out)?;
    let grads = tape.backward(out)?;

    let mut report = GradCheck::new();
    let mut xs = inputs.to_vec();
    for (k, v) in vars.iter().enumerate() {
        let zeros = vec![0.0; inputs[k].len()];
        let analytic = grads.of(*v).unwrap_or(&zeros).to_vec();
        for i in 0..inputs[k].len() {
            let orig = xs[k].data()[i];
            xs[k].data_mut()[i] = orig + EPSILON;
            let up = eval(&xs)?;
            xs[k].data_mut()[i] = orig - EPSILON;
            let down = eval(&xs)?;
            xs[k].data_mut()[i] = orig;
            report.record(analytic[i], (up - down) / (2.0 * EPSILON), || format!("input {k} [{i}]"));
        }
    }
    Ok(report)
}

/// Checks parameter gradients of a model loss. `f` builds the loss on a
/// fresh tape from the given store. At most `per_param` randomly chosen
/// entries of each parameter are perturbed.
pub fn check_params<F, R, E>(store: &ParamStore, per_param: usize, rng: &mut R, f: F) -> Result<GradCheck, E>
where
    F: Fn(&ParamStore) -> Result<(Tape, Var), E>,
    R: Rng,
    E: From<TensorError>,
{
    let mut work = store.clone();
    work.zero_grad();
    let (tape, loss) = f(&work)?;
    scalar_of(&tape, loss)?;
    tape.backward(loss)?.accumulate(&mut work);
    let analytic: Vec<Vec<f64>> = work.ids().map(|id| work.get(id).grad.clone()).collect();
    let eval = |s: &ParamStore| -> Result<f64, E> {
        let (t, l) = f(s)?;
        Ok(scalar_of(&t, l)?)
    };

    let mut report = GradCheck::new();
    let ids: Vec<_> = work.ids().collect();
    for id in ids {
        if !work.get(id).requires_grad {
            continue;
        }
        let n = work.value(id).len();
        let picks = sample(rng, n, per_param.min(n)).into_vec();
        for i in picks {
            let orig = work.value(id).data()[i];
            work.value_mut(id).data_mut()[i] = orig + EPSILON;
            let up = eval(&work)?;
            work.value_mut(id).data_mut()[i] = orig - EPSILON;
            let down = eval(&work)?;
            work.value_mut(id).data_mut()[i] = orig;
            let name = work.name(id).to_string();
            report.record(analytic[id.0][i], (up - down) / (2.0 * EPSILON), || format!("{name} [{i}]"));
        }
    }
    Ok(report)
}
