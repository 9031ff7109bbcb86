//! Central-difference verification of reverse-mode gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Outcome of comparing analytic and numerical gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// `max |analytic - numeric| / max(1, |analytic|)` over checked coordinates.
    pub max_rel_error: f64,
    /// `(input index, flat coordinate)` where the maximum occurred.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
}

/// Relative error measure used throughout gradient verification.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(1.0)
}

/// Compares a supplied gradient of `value` at `x` with central differences.
///
/// The analytic side is whatever the caller passes in, which makes this the
/// building block for both graph-derived and hand-derived gradients.
pub fn compare_gradient(
    value: impl Fn(&Tensor<f64>) -> Result<f64>,
    analytic: &Tensor<f64>,
    x: &Tensor<f64>,
    h: f64,
) -> Result<GradCheckReport> {
    if h <= 0.0 {
        return Err(Error::Config(format!("finite-difference step must be positive, got {h}")));
    }
    if analytic.shape() != x.shape() {
        return Err(Error::Dimension(format!(
            "gradient shape {:?} differs from input {:?}",
            analytic.shape(),
            x.shape()
        )));
    }
    let mut report = GradCheckReport { max_rel_error: 0.0, worst: None, checked: 0 };
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let numeric = central_difference(&value, &mut probe, i, h)?;
        let err = relative_error(analytic.data()[i], numeric);
        report.checked += 1;
        if err > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = report.max_rel_error.max(err);
            report.worst = Some((0, i));
        }
    }
    Ok(report)
}

fn central_difference(
    value: &impl Fn(&Tensor<f64>) -> Result<f64>,
    probe: &mut Tensor<f64>,
    i: usize,
    h: f64,
) -> Result<f64> {
    let orig = probe.data()[i];
    probe.data_mut()[i] = orig + h;
    let plus = value(probe)?;
    probe.data_mut()[i] = orig - h;
    let minus = value(probe)?;
    probe.data_mut()[i] = orig;
    Ok((plus - minus) / (2.0 * h))
}

/// Gradient check of a scalar-valued graph function of one tensor.
///
/// Returns the maximum relative error over every coordinate of `x`.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    let report = grad_check_inputs(|g, vars| f(g, vars[0]), std::slice::from_ref(x), h, None)?;
    Ok(report.max_rel_error)
}

/// Which coordinates a multi-input check visits.
#[derive(Clone, Copy, Debug)]
pub struct CoordinateSample {
    /// Coordinates checked per input tensor (all of them if the tensor is smaller).
    pub per_input: usize,
    pub seed: u64,
}

/// Gradient check of a scalar graph function of several tensors.
///
/// With `sample` set, only a seeded random subset of coordinates of each
/// input is perturbed; the analytic gradient is still computed in full.
pub fn grad_check_inputs<F>(
    f: F,
    inputs: &[Tensor<f64>],
    h: f64,
    sample_spec: Option<CoordinateSample>,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    if h <= 0.0 {
        return Err(Error::Config(format!("finite-difference step must be positive, got {h}")));
    }
    let eval = |values: &[Tensor<f64>], track: bool| -> Result<(f64, Vec<Tensor<f64>>)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.leaf(t.clone(), track)).collect();
        let root = f(&mut g, &vars)?;
        let out = g.value(root).item()?;
        let grads = if track {
            g.backward(root)?;
            vars.iter().map(|v| g.grad(*v).cloned().expect("leaf grad")).collect()
        } else {
            Vec::new()
        };
        Ok((out, grads))
    };

    let (_, analytic) = eval(inputs, true)?;
    let mut rng = sample_spec.map(|s| ChaCha8Rng::seed_from_u64(s.seed));
    let mut probe: Vec<Tensor<f64>> = inputs.to_vec();
    let mut report = GradCheckReport { max_rel_error: 0.0, worst: None, checked: 0 };
    for (ti, t) in inputs.iter().enumerate() {
        let coords: Vec<usize> = match (&mut rng, sample_spec) {
            (Some(rng), Some(s)) if s.per_input < t.numel() => sample(rng, t.numel(), s.per_input).into_vec(),
            _ => (0..t.numel()).collect(),
        };
        for i in coords {
            let orig = probe[ti].data()[i];
            probe[ti].data_mut()[i] = orig + h;
            let plus = eval(&probe, false)?.0;
            probe[ti].data_mut()[i] = orig - h;
            let minus = eval(&probe, false)?.0;
            probe[ti].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let err = relative_error(analytic[ti].data()[i], numeric);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = Some((ti, i));
            }
        }
    }
    Ok(report)
}
