//! Central finite-difference verification of tape gradients.

use rand::seq::index::sample;
use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Tape, Tensor, Var};

/// Finite-difference step used by every built-in check.
pub const DEFAULT_EPS: f64 = 1e-5;

/// Maximum tolerated relative error.
pub const TOLERANCE: f64 = 1e-4;

fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(1.0)
}

fn eval_scalar<F>(f: &F, x: &Tensor<f64>) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let mut tape = Tape::inference();
    let leaf = tape.leaf(x.clone());
    let out = f(&mut tape, leaf)?;
    tape.value(out).item()
}

/// Maximum over coordinates of `|analytic − central difference| / max(1, |analytic|)`
/// for the scalar function `f` at `x`.
pub fn finite_diff_check<F>(f: F, x: &Tensor<f64>, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let leaf = tape.leaf(x.clone());
    let out = f(&mut tape, leaf)?;
    if tape.value(out).len() != 1 {
        return Err(Error::NonScalar(tape.shape(out).to_vec()));
    }
    let grads = tape.backward(out)?;
    let analytic = grads
        .get(leaf)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.shape().to_vec()));
    let mut worst = 0.0f64;
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = eval_scalar(&f, &probe)?;
        probe.data_mut()[i] = orig - eps;
        let minus = eval_scalar(&f, &probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * eps);
        worst = worst.max(relative_error(analytic.data()[i], numeric));
    }
    Ok(worst)
}

/// Outcome of checking every parameter of a store.
#[derive(Clone, Debug)]
pub struct ParamCheck {
    /// `(parameter name, worst relative error over probed coordinates)`.
    pub per_param: Vec<(String, f64)>,
    pub coordinates: usize,
}

impl ParamCheck {
    pub fn max_error(&self) -> f64 {
        self.per_param.iter().map(|p| p.1).fold(0.0, f64::max)
    }
}

/// Checks the gradient of a scalar loss with respect to every parameter.
///
/// `f` receives the tape and the bound parameter handles (indexed by id).
/// When `max_coords` is set, at most that many randomly chosen coordinates
/// of each parameter are probed.
pub fn check_params<F>(
    store: &ParamStore<f64>,
    f: F,
    eps: f64,
    max_coords: Option<usize>,
    rng: &mut impl Rng,
) -> Result<ParamCheck>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |s: &ParamStore<f64>| -> Result<f64> {
        let mut tape = Tape::inference();
        let vars = s.bind(&mut tape);
        let out = f(&mut tape, &vars)?;
        tape.value(out).item()
    };
    let mut tape = Tape::new();
    let vars = store.bind(&mut tape);
    let out = f(&mut tape, &vars)?;
    if tape.value(out).len() != 1 {
        return Err(Error::NonScalar(tape.shape(out).to_vec()));
    }
    let grads = tape.backward(out)?;
    let param_grads = grads.param_grads(&tape, store.len());

    let mut probe = store.clone();
    let mut per_param = Vec::with_capacity(store.len());
    let mut coordinates = 0;
    for id in 0..store.len() {
        let n = store.get(id).value.len();
        let coords: Vec<usize> = match max_coords {
            Some(k) if k < n => sample(rng, n, k).into_vec(),
            _ => (0..n).collect(),
        };
        let mut worst = 0.0f64;
        for &i in &coords {
            let analytic = param_grads[id].as_ref().map_or(0.0, |g| g.data()[i]);
            let orig = probe.get(id).value.data()[i];
            probe.get_mut(id).value.data_mut()[i] = orig + eps;
            let plus = eval(&probe)?;
            probe.get_mut(id).value.data_mut()[i] = orig - eps;
            let minus = eval(&probe)?;
            probe.get_mut(id).value.data_mut()[i] = orig;
            worst = worst.max(relative_error(analytic, (plus - minus) / (2.0 * eps)));
        }
        coordinates += coords.len();
        per_param.push((store.name(id).to_string(), worst));
    }
    Ok(ParamCheck {
        per_param,
        coordinates,
    })
}
