//! Central finite-difference gradient checking in `f64`.

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// max over all checked entries of `|analytic - numeric| / max(1, |analytic|)`
    pub max_rel_error: f64,
    /// (input index, flat element index) of the worst entry
    pub worst: (usize, usize),
    pub checked: usize,
}

/// Builds a scalar loss from leaf variables bound to `point`.
pub trait ScalarFn: Fn(&mut Graph<f64>, &[Var]) -> Result<Var> {}
impl<F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>> ScalarFn for F {}

/// Evaluates `f` once, returning the loss value and analytic gradients.
pub fn value_and_grad(f: &impl ScalarFn, point: &[Tensor<f64>]) -> Result<(f64, Vec<Tensor<f64>>)> {
    let mut g = Graph::new();
    let vars: Vec<Var> = point.iter().map(|t| g.param(t.clone())).collect();
    let loss = f(&mut g, &vars)?;
    let value = g.value(loss);
    if !value.is_scalar() {
        return Err(Error::shape("grad_check", value.shape(), &[]));
    }
    let value = value.data()[0];
    let grads = g.backward(loss)?;
    Ok((value, vars.iter().map(|&v| grads.wrt(v)).collect()))
}

fn eval(f: &impl ScalarFn, point: &[Tensor<f64>]) -> Result<f64> {
    let mut g = Graph::new();
    let vars: Vec<Var> = point.iter().map(|t| g.constant(t.clone())).collect();
    let loss = f(&mut g, &vars)?;
    Ok(g.value(loss).data()[0])
}

/// Compares the graph's analytic gradient of `f` at `point` against central
/// differences with step `eps`.
pub fn grad_check(f: impl ScalarFn, point: &[Tensor<f64>], eps: f64) -> Result<GradCheckReport> {
    let (_, analytic) = value_and_grad(&f, point)?;
    compare_with_finite_differences(&f, &analytic, point, eps, None)
}

/// Like [`grad_check`] but only probes entries selected by `stride`
/// (every `stride`-th element of each input), for large parameter sets.
pub fn grad_check_strided(f: impl ScalarFn, point: &[Tensor<f64>], eps: f64, stride: usize) -> Result<GradCheckReport> {
    let (_, analytic) = value_and_grad(&f, point)?;
    compare_with_finite_differences(&f, &analytic, point, eps, Some(stride.max(1)))
}

/// Checks a supplied analytic gradient against central differences of `f`.
pub fn compare_with_finite_differences(
    f: &impl ScalarFn,
    analytic: &[Tensor<f64>],
    point: &[Tensor<f64>],
    eps: f64,
    stride: Option<usize>,
) -> Result<GradCheckReport> {
    if !(eps > 0.0) {
        return Err(Error::invalid("grad_check eps must be positive"));
    }
    if analytic.len() != point.len() {
        return Err(Error::invalid("one analytic gradient per input required"));
    }
    let mut work: Vec<Tensor<f64>> = point.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        checked: 0,
    };
    for (ti, grad) in analytic.iter().enumerate() {
        if grad.shape() != point[ti].shape() {
            return Err(Error::shape("grad_check", grad.shape(), point[ti].shape()));
        }
        let step = stride.unwrap_or(1);
        for ei in (0..point[ti].numel()).step_by(step) {
            let x0 = point[ti].data()[ei];
            work[ti].data_mut()[ei] = x0 + eps;
            let plus = eval(f, &work)?;
            work[ti].data_mut()[ei] = x0 - eps;
            let minus = eval(f, &work)?;
            work[ti].data_mut()[ei] = x0;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = grad.data()[ei];
            let err = (a - numeric).abs() / a.abs().max(1.0);
            report.checked += 1;
            if err > report.max_rel_error || err.is_nan() {
                report.max_rel_error = err;
                report.worst = (ti, ei);
            }
        }
    }
    Ok(report)
}
