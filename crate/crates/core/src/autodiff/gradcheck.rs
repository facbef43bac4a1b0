//! Central-difference verification of tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::params::{ParamId, ParamStore};
use super::tape::{Tape, Var};
use super::tensor::{Tensor, TensorResult};

/// Step used for central differences.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Entries whose gradients are both below this magnitude are compared
/// absolutely rather than relatively.
pub const REL_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub checked: usize,
    pub tol: f64,
    pub passed: bool,
}

impl GradCheckReport {
    fn new(tol: f64) -> Self {
        Self {
            max_rel_error: 0.0,
            max_abs_error: 0.0,
            checked: 0,
            tol,
            passed: true,
        }
    }

    fn record(&mut self, analytic: f64, numeric: f64) {
        let abs = (analytic - numeric).abs();
        let rel = abs / analytic.abs().max(numeric.abs()).max(REL_FLOOR);
        self.max_abs_error = self.max_abs_error.max(abs);
        self.max_rel_error = self.max_rel_error.max(rel);
        self.checked += 1;
        self.passed = self.max_rel_error < self.tol;
    }

    /// Folds another report into this one.
    pub fn merge(&mut self, other: &GradCheckReport) {
        self.max_abs_error = self.max_abs_error.max(other.max_abs_error);
        self.max_rel_error = self.max_rel_error.max(other.max_rel_error);
        self.checked += other.checked;
        self.passed = self.max_rel_error < self.tol;
    }
}

fn eval_scalar<F>(f: &F, point: &Tensor) -> TensorResult<f64>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> TensorResult<Var<'t>>,
{
    let tape = Tape::new();
    let x = tape.constant(point.clone());
    Ok(f(&tape, x)?.value().item())
}

/// Compares the tape gradient of scalar `f` at `point` against central
/// differences over every coordinate.
pub fn finite_diff_check<F>(f: F, point: &Tensor, tol: f64) -> TensorResult<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> TensorResult<Var<'t>>,
{
    let tape = Tape::new();
    let x = tape.leaf(point.clone());
    let y = f(&tape, x)?;
    let grads = tape.backward(y)?;
    let analytic = grads
        .get(x)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(point.shape()));

    let mut report = GradCheckReport::new(tol);
    let mut probe = point.clone();
    for i in 0..point.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + DEFAULT_STEP;
        let up = eval_scalar(&f, &probe)?;
        probe.data_mut()[i] = orig - DEFAULT_STEP;
        let down = eval_scalar(&f, &probe)?;
        probe.data_mut()[i] = orig;
        report.record(analytic.data()[i], (up - down) / (2.0 * DEFAULT_STEP));
    }
    Ok(report)
}

/// Checks gradients of a scalar function of parameters in `store`.
///
/// At most `max_coords` randomly chosen coordinates of each parameter are
/// perturbed (all of them when the parameter is smaller).
pub fn param_grad_check<F>(
    store: &mut ParamStore,
    ids: &[ParamId],
    f: F,
    tol: f64,
    max_coords: usize,
    seed: u64,
) -> TensorResult<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &ParamStore) -> TensorResult<Var<'t>>,
{
    let grads = {
        let tape = Tape::new();
        let loss = f(&tape, store)?;
        let g = tape.backward(loss)?;
        g.params().to_vec()
    };
    let eval = |store: &ParamStore| -> TensorResult<f64> {
        let tape = Tape::new();
        Ok(f(&tape, store)?.value().item())
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheckReport::new(tol);
    for &id in ids {
        let n = store.value(id).numel();
        let analytic = grads
            .iter()
            .find(|(p, _)| *p == id)
            .map(|(_, g)| g.clone())
            .unwrap_or_else(|| Tensor::zeros(store.value(id).shape()));
        let coords: Vec<usize> = if n <= max_coords {
            (0..n).collect()
        } else {
            sample(&mut rng, n, max_coords).into_vec()
        };
        for i in coords {
            let orig = store.value(id).data()[i];
            store.get_mut(id).value.data_mut()[i] = orig + DEFAULT_STEP;
            let up = eval(store)?;
            store.get_mut(id).value.data_mut()[i] = orig - DEFAULT_STEP;
            let down = eval(store)?;
            store.get_mut(id).value.data_mut()[i] = orig;
            report.record(analytic.data()[i], (up - down) / (2.0 * DEFAULT_STEP));
        }
    }
    Ok(report)
}
