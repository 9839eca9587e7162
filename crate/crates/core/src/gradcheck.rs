//! Finite-difference gradient checking against the tape's backward pass.

use mnagt_oracle::{numerical_gradient, relative_error, relative_error_norm};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamStore};
use crate::tensor::Tensor;

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;
/// Magnitudes below this are compared absolutely.
pub const ABS_FLOOR: f64 = 1e-9;

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckResult {
    pub name: String,
    pub len: usize,
    /// Largest elementwise `|a - n| / max(|a|, |n|)` (absolute below the floor).
    pub max_rel_error: f64,
    /// `||a - n|| / max(||a||, ||n||)` over the whole tensor.
    pub norm_rel_error: f64,
    pub max_abs_error: f64,
}

/// Reduce any output to a scalar with a fixed random projection, so every
/// output entry contributes a distinct weight to the checked gradient.
pub fn project(tape: &mut Tape<f64>, out: Var, seed: u64) -> Result<Var> {
    let shape = tape.value(out).shape().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let weights = tape.constant(Tensor::randn(&shape, &mut rng));
    let weighted = tape.mul(out, weights)?;
    Ok(tape.sum(weighted))
}

/// Compare analytic and central-difference gradients of the scalar produced
/// by `build` with respect to each named input.
pub fn check_inputs<F>(inputs: &[(String, Tensor<f64>)], build: F) -> Result<Vec<GradCheckResult>>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|(_, t)| tape.param(t.clone())).collect();
    let loss = build(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<f64> = vars
        .iter()
        .flat_map(|&v| grads.get(v).expect("leaf gradient").data().to_vec())
        .collect();

    let flat: Vec<f64> = inputs.iter().flat_map(|(_, t)| t.data().to_vec()).collect();
    let mut failure = None;
    let numeric = numerical_gradient(
        |x| {
            let mut tape = Tape::new();
            let mut offset = 0;
            let mut vars = Vec::with_capacity(inputs.len());
            for (_, t) in inputs {
                let data = x[offset..offset + t.len()].to_vec();
                offset += t.len();
                vars.push(tape.param(Tensor::new(t.shape(), data).expect("same shape")));
            }
            match build(&mut tape, &vars) {
                Ok(l) => tape.value(l).item(),
                Err(e) => {
                    failure = Some(e);
                    f64::NAN
                }
            }
        },
        &flat,
        FD_STEP,
    );
    if let Some(e) = failure {
        return Err(e);
    }
    let numeric = numeric.map_err(|e| Error::Numeric(e.to_string()))?;

    let mut offset = 0;
    let mut results = Vec::with_capacity(inputs.len());
    for (name, t) in inputs {
        let a = &analytic[offset..offset + t.len()];
        let n = &numeric[offset..offset + t.len()];
        offset += t.len();
        results.push(compare(name, a, n));
    }
    Ok(results)
}

/// [`check_inputs`] over every tensor of a parameter store.
pub fn check_params<F>(store: &ParamStore<f64>, build: F) -> Result<Vec<GradCheckResult>>
where
    F: Fn(&mut Tape<f64>, &Bound) -> Result<Var>,
{
    let inputs: Vec<(String, Tensor<f64>)> = store.iter().map(|(n, t)| (n.to_string(), t.clone())).collect();
    check_inputs(&inputs, |tape, vars| build(tape, &Bound::from_vars(vars.to_vec())))
}

pub fn compare(name: &str, analytic: &[f64], numeric: &[f64]) -> GradCheckResult {
    let max_rel_error = analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| relative_error(a, n, ABS_FLOOR))
        .fold(0.0, f64::max);
    let max_abs_error = analytic.iter().zip(numeric).map(|(a, n)| (a - n).abs()).fold(0.0, f64::max);
    GradCheckResult {
        name: name.to_string(),
        len: analytic.len(),
        max_rel_error,
        norm_rel_error: relative_error_norm(analytic, numeric, ABS_FLOOR),
        max_abs_error,
    }
}
