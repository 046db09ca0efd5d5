//! Finite-difference validation of tape gradients.

use std::collections::BTreeMap;

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use crate::error::{AutodiffError, Result};
use crate::float::Float;
use crate::params::{Bound, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// A deterministic scalar function of a parameter store, runnable at any precision.
pub trait Differentiable {
    fn loss<T: Float>(&self, tape: &mut Tape<T>, params: &Bound) -> Result<Var>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub step: f64,
    /// Entries sampled per parameter tensor (all entries if the tensor is smaller).
    pub samples_per_param: usize,
    pub seed: u64,
    /// Relative errors are taken against `max(|analytic|, |numeric|, floor)`.
    pub floor: f64,
}

impl GradCheckOptions {
    pub fn for_precision(precision: Precision) -> Self {
        Self {
            step: 1e-5,
            samples_per_param: 8,
            seed: 0,
            floor: match precision {
                Precision::F64 => 1e-4,
                Precision::F32 => 1e-2,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub checked: usize,
}

/// Tape gradients of `net` at `params`, computed in the requested precision.
pub fn analytic_gradients<N: Differentiable>(
    net: &N,
    params: &ParamStore<f64>,
    precision: Precision,
) -> Result<BTreeMap<String, Tensor<f64>>> {
    fn run<T: Float, N: Differentiable>(
        net: &N,
        params: &ParamStore<T>,
    ) -> Result<BTreeMap<String, Tensor<f64>>> {
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let loss = net.loss(&mut tape, &bound)?;
        let value = tape.value(loss).item().to_f64();
        if !value.is_finite() {
            return Err(AutodiffError::NonFinite(value));
        }
        let mut grads = tape.backward(loss)?;
        Ok(params
            .collect_grads(&bound, &mut grads)
            .into_iter()
            .map(|(k, g)| (k, g.cast()))
            .collect())
    }
    match precision {
        Precision::F64 => run(net, params),
        Precision::F32 => run(net, &params.cast::<f32>()),
    }
}

fn eval_loss<N: Differentiable>(net: &N, params: &ParamStore<f64>) -> Result<f64> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let loss = net.loss(&mut tape, &bound)?;
    let v = tape.value(loss).item();
    if !v.is_finite() {
        return Err(AutodiffError::NonFinite(v));
    }
    Ok(v)
}

/// Compares `analytic` against 64-bit central differences on sampled entries.
pub fn compare_with_finite_differences<N: Differentiable>(
    net: &N,
    params: &ParamStore<f64>,
    analytic: &BTreeMap<String, Tensor<f64>>,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let mut rng = StdRng::seed_from_u64(opts.seed);
    let mut work = params.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        checked: 0,
    };
    eval_loss(net, params)?;
    let names: Vec<String> = params.names().map(str::to_string).collect();
    for name in names {
        let len = params.get(&name).map(Tensor::len).unwrap_or(0);
        let indices: Vec<usize> = if len <= opts.samples_per_param {
            (0..len).collect()
        } else {
            (0..opts.samples_per_param).map(|_| rng.gen_range(0..len)).collect()
        };
        for idx in indices {
            let original = params.get(&name).unwrap().data()[idx];
            work.get_mut(&name).unwrap().data_mut()[idx] = original + opts.step;
            let plus = eval_loss(net, &work)?;
            work.get_mut(&name).unwrap().data_mut()[idx] = original - opts.step;
            let minus = eval_loss(net, &work)?;
            work.get_mut(&name).unwrap().data_mut()[idx] = original;

            let numeric = (plus - minus) / (2.0 * opts.step);
            let a = analytic.get(&name).map(|g| g.data()[idx]).unwrap_or(0.0);
            let denom = a.abs().max(numeric.abs()).max(opts.floor);
            let rel = (a - numeric).abs() / denom;
            report.checked += 1;
            if rel > report.max_rel_error || report.worst_param.is_empty() {
                report.max_rel_error = rel.max(report.max_rel_error);
                report.worst_param = name.clone();
                report.worst_index = idx;
            }
        }
    }
    Ok(report)
}

/// Tape gradients vs central differences (h = 1e-5 by default); returns the max relative error.
pub fn gradient_check<N: Differentiable>(
    net: &N,
    params: &ParamStore<f64>,
    precision: Precision,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let analytic = analytic_gradients(net, params, precision)?;
    compare_with_finite_differences(net, params, &analytic, opts)
}
