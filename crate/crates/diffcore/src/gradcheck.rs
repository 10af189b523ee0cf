//! Finite-difference gradient checking.

use crate::error::Result;
use crate::params::ParamStore;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Absolute difference below which two derivatives are treated as equal.
pub const ABS_FLOOR: f64 = 1e-8;

/// Relative error between an analytic and a numeric derivative.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    if diff <= ABS_FLOOR {
        return 0.0;
    }
    diff / analytic.abs().max(numeric.abs())
}

/// Compares the analytic gradient of the scalar function `f` with central
/// differences at `inputs`, returning the largest elementwise relative error.
pub fn grad_check<Fun>(f: Fun, inputs: &[Tensor<f64>]) -> Result<f64>
where
    Fun: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.input(t.clone())).collect();
    let loss = f(&tape, &vars)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| {
            grads
                .wrt(*v)
                .map(|g| g.into_data())
                .unwrap_or_else(|| vec![0.0; t.numel()])
        })
        .collect();

    let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let tape = Tape::no_grad();
        let vars: Vec<_> = xs.iter().map(|t| tape.constant(t.clone())).collect();
        Ok(f(&tape, &vars)?.item())
    };

    let mut worst = 0.0f64;
    let mut probe = inputs.to_vec();
    for (k, input) in inputs.iter().enumerate() {
        for i in 0..input.numel() {
            let x0 = input.data()[i];
            probe[k].data_mut()[i] = x0 + FD_STEP;
            let up = eval(&probe)?;
            probe[k].data_mut()[i] = x0 - FD_STEP;
            let down = eval(&probe)?;
            probe[k].data_mut()[i] = x0;
            let numeric = (up - down) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic[k][i], numeric));
        }
    }
    Ok(worst)
}

/// Gradient check of a loss over the parameters of `store`. At most
/// `per_param` entries of each tensor are probed, spread evenly.
pub fn grad_check_params<Fun>(f: Fun, store: &ParamStore<f64>, per_param: usize) -> Result<f64>
where
    Fun: for<'t> Fn(&'t Tape<f64>, &ParamStore<f64>) -> Result<Var<'t, f64>>,
{
    let tape = Tape::new();
    let loss = f(&tape, store)?;
    let grads = tape.backward(loss)?;
    let params = grads.params();

    let mut probe = store.clone();
    let mut worst = 0.0f64;
    for id in store.ids() {
        let n = store.value(id).numel();
        let analytic = params.get(id);
        let stride = (n / per_param.max(1)).max(1);
        for i in (0..n).step_by(stride).take(per_param) {
            let x0 = store.value(id).data()[i];
            probe.value_mut(id).data_mut()[i] = x0 + FD_STEP;
            let up = f(&Tape::no_grad(), &probe)?.item();
            probe.value_mut(id).data_mut()[i] = x0 - FD_STEP;
            let down = f(&Tape::no_grad(), &probe)?.item();
            probe.value_mut(id).data_mut()[i] = x0;
            let numeric = (up - down) / (2.0 * FD_STEP);
            let a = analytic.map_or(0.0, |g| g[i]);
            worst = worst.max(rel_err(a, numeric));
        }
    }
    Ok(worst)
}
