//! Central finite-difference checking of tape gradients, in `f64`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Largest relative error over every element of every input.
    pub max_rel_error: f64,
    /// Largest relative error per input tensor.
    pub per_input: Vec<f64>,
    pub analytic: Vec<Vec<f64>>,
    pub numeric: Vec<Vec<f64>>,
}

/// Compare tape gradients of `f` at `inputs` against central differences with step `h`.
///
/// Non-scalar outputs are reduced with a fixed pseudo-random projection so every
/// output element contributes to the checked gradient.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let analytic = analytic_gradient(&f, inputs)?;
    let numeric = numeric_gradient(|xs| evaluate(&f, xs), inputs, h)?;
    let per_input: Vec<f64> = analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| max_relative_error(a, n))
        .collect();
    let max_rel_error = per_input.iter().copied().fold(0.0, f64::max);
    Ok(GradCheckReport {
        max_rel_error,
        per_input,
        analytic,
        numeric,
    })
}

pub(crate) fn project<F>(f: &F, tape: &mut Tape<f64>, vars: &[Var]) -> Result<Var>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let out = f(tape, vars)?;
    let n = tape.value(out).len();
    if n == 1 {
        return Ok(out);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed ^ n as u64);
    let weights = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    tape.dot(out, weights)
}

pub fn analytic_gradient<F>(f: &F, inputs: &[Tensor<f64>]) -> Result<Vec<Vec<f64>>>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let loss = project(f, &mut tape, &vars)?;
    tape.backward(loss)?;
    Ok(vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| tape.grad(v).map_or_else(|| vec![0.0; t.len()], <[f64]>::to_vec))
        .collect())
}

fn evaluate<F>(f: &F, inputs: &[Tensor<f64>]) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), false)).collect();
    let out = project(f, &mut tape, &vars)?;
    Ok(tape.value(out).data()[0])
}

/// Central differences `(f(x+h) - f(x-h)) / 2h` for every element of every input.
pub fn numeric_gradient<G>(f: G, inputs: &[Tensor<f64>], h: f64) -> Result<Vec<Vec<f64>>>
where
    G: Fn(&[Tensor<f64>]) -> Result<f64>,
{
    if !(h > 0.0) {
        return Err(Error::Config(format!("finite-difference step must be positive, got {h}")));
    }
    let mut work = inputs.to_vec();
    let mut out = Vec::with_capacity(inputs.len());
    for ti in 0..inputs.len() {
        let mut g = Vec::with_capacity(inputs[ti].len());
        for ei in 0..inputs[ti].len() {
            let x0 = inputs[ti].data()[ei];
            work[ti].data_mut()[ei] = x0 + h;
            let fp = f(&work)?;
            work[ti].data_mut()[ei] = x0 - h;
            let fm = f(&work)?;
            work[ti].data_mut()[ei] = x0;
            g.push((fp - fm) / (2.0 * h));
        }
        out.push(g);
    }
    Ok(out)
}

/// `max_i |a_i - n_i| / max(|n_i|, floor)` where the floor is `1e-6` of the
/// largest numeric magnitude (at least `1e-8`), so exact zeros do not divide by zero.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let scale = numeric.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    max_relative_error_at_scale(analytic, numeric, scale)
}

/// [`max_relative_error`] with the floor taken from an explicit gradient
/// `scale`, e.g. the largest gradient over a whole model.
pub fn max_relative_error_at_scale(analytic: &[f64], numeric: &[f64], scale: f64) -> f64 {
    let floor = (1e-6 * scale).max(1e-8);
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / n.abs().max(floor))
        .fold(0.0, f64::max)
}
