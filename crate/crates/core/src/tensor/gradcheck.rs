//! Central finite-difference oracle for the analytic gradients of the tape.

use super::{Graph, RngStream, Tensor, Var};
use crate::error::Result;

/// Derivative magnitude below which the error is measured absolutely; central
/// differences at `eps = 1e-5` carry roundoff near 1e-11.
pub const REL_FLOOR: f64 = 1e-6;

/// Outcome of a gradient check.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// max over coordinates of |analytic - numeric| / max(|analytic|, |numeric|, REL_FLOOR)
    pub max_rel_err: f64,
    /// `(input, coordinate)` where the maximum was attained.
    pub worst: (usize, usize),
    /// Analytic and numeric derivative at `worst`.
    pub worst_values: (f64, f64),
    pub coordinates: usize,
}

fn scalarize<'g>(out: Var<'g, f64>, weights_seed: u64) -> Result<Var<'g, f64>> {
    let shape = out.shape();
    if shape.iter().product::<usize>() == 1 {
        return out.reshape(&[]);
    }
    // fixed random projection so every output coordinate contributes
    let mut rng = RngStream::new(weights_seed, 0xC0FFEE);
    let w = Tensor::from_fn(&shape, |_| rng.range(-1.0, 1.0));
    Ok(out.mul(out.graph().constant(w))?.sum())
}

fn eval<Op>(op: &Op, inputs: &[Tensor<f64>], weights_seed: u64) -> Result<f64>
where
    Op: for<'g> Fn(&'g Graph<f64>, &[Var<'g, f64>]) -> Result<Var<'g, f64>>,
{
    let g = Graph::<f64>::new();
    let vars: Vec<Var<'_, f64>> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = scalarize(op(&g, &vars)?, weights_seed)?;
    let v = out.value().item();
    Ok(v)
}

/// Compares the tape's gradient of `op` against central differences with
/// step `eps`, over every coordinate of every input.
///
/// Non-scalar outputs are reduced with a fixed random projection.
pub fn finite_diff_check<Op>(op: Op, inputs: &[Tensor<f64>], eps: f64) -> Result<GradCheckReport>
where
    Op: for<'g> Fn(&'g Graph<f64>, &[Var<'g, f64>]) -> Result<Var<'g, f64>>,
{
    let weights_seed = 0x5EED;
    let g = Graph::<f64>::new();
    let vars: Vec<Var<'_, f64>> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = scalarize(op(&g, &vars)?, weights_seed)?;
    let grads = g.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = vars.iter().map(|&v| grads.wrt(v)).collect();

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: (0, 0),
        worst_values: (0.0, 0.0),
        coordinates: 0,
    };
    let mut probe: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.numel() {
            let orig = input.data()[j];
            probe[i].data_mut()[j] = orig + eps;
            let up = eval(&op, &probe, weights_seed)?;
            probe[i].data_mut()[j] = orig - eps;
            let down = eval(&op, &probe, weights_seed)?;
            probe[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic[i].data()[j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
            report.coordinates += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = (i, j);
                report.worst_values = (a, numeric);
            }
        }
    }
    Ok(report)
}

/// Random test input with entries uniform in `[lo, hi)`.
pub fn random_input(shape: &[usize], lo: f64, hi: f64, rng: &mut RngStream) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.range(lo, hi))
}
