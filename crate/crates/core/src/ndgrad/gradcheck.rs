//! Finite-difference verification of reverse-mode gradients.

use super::graph::{Fault, Graph, Var};
use super::store::ParameterStore;
use crate::error::Result;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub step: f64,
    /// Maximum accepted relative error.
    pub tolerance: f64,
    /// Lower bound of the relative-error denominator, so a tensor whose whole
    /// gradient vanishes is judged on absolute error.
    pub denom_floor: f64,
    /// Corrupts one backward rule in the analytic pass (negative control).
    pub fault: Option<Fault>,
    /// When the `+-step` stencil of a coordinate changes a non-smooth choice of the
    /// graph (a ReLU sign, a pooling winner, a selected index), halve the step until
    /// both evaluations share the branch signature of the unperturbed point, down to
    /// `min_step`. Without this, a difference quotient across a kink is not an
    /// estimate of the derivative.
    pub kink_aware: bool,
    pub min_step: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-3,
            tolerance: 1e-4,
            denom_floor: 1e-6,
            fault: None,
            kink_aware: true,
            min_step: 1e-9,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub numel: usize,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub passed: bool,
    /// Coordinates whose step had to shrink below `step` to avoid a kink.
    pub reduced_steps: usize,
    /// Coordinates still straddling a kink at `min_step`.
    pub unresolved: usize,
    pub smallest_step: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.passed)
    }

    /// Parameter with the largest relative error.
    pub fn worst(&self) -> Option<&ParamCheck> {
        self.params.iter().max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }
}

/// Compares `backward()` against central differences for every scalar of every
/// parameter in `store`. `build` must be deterministic and return a scalar.
///
/// The error of a parameter tensor is `max_i |a_i - n_i| / max(max_i |a_i|, max_i |n_i|, floor)`:
/// the worst entry measured against the gradient scale of that tensor.
pub fn grad_check<F>(store: &ParameterStore, opts: &GradCheckOptions, mut build: F) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph, &ParameterStore) -> Result<Var>,
{
    let mut g = match opts.fault {
        Some(f) => Graph::with_fault(f),
        None => Graph::new(),
    };
    let loss = build(&mut g, store)?;
    let grads = g.backward(loss)?;
    let base_sig = g.branch_signature();
    let analytic: Vec<(String, Vec<f64>)> = store
        .names()
        .map(|name| {
            let grad = g
                .params()
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, v)| grads.tensor(*v).into_data())
                .unwrap_or_else(|| vec![0.0; store.value(name).unwrap().numel()]);
            (name.to_string(), grad)
        })
        .collect();

    let mut eval = |s: &ParameterStore| -> Result<(f64, u64)> {
        let mut g = Graph::new();
        let v = build(&mut g, s)?;
        Ok((g.value(v).data()[0], g.branch_signature()))
    };

    let mut work = store.clone();
    let mut params = Vec::new();
    for (name, an) in analytic {
        let mut numeric = Vec::with_capacity(an.len());
        let (mut reduced_steps, mut unresolved, mut smallest_step) = (0, 0, opts.step);
        for i in 0..an.len() {
            let orig = work.value(&name)?.data()[i];
            let mut h = opts.step;
            let estimate = loop {
                work.value_mut(&name)?.data_mut()[i] = orig + h;
                let (up, sig_up) = eval(&work)?;
                work.value_mut(&name)?.data_mut()[i] = orig - h;
                let (down, sig_down) = eval(&work)?;
                work.value_mut(&name)?.data_mut()[i] = orig;
                let smooth = sig_up == base_sig && sig_down == base_sig;
                if !opts.kink_aware || smooth || h / 2.0 < opts.min_step {
                    if h < opts.step {
                        reduced_steps += 1;
                    }
                    if opts.kink_aware && !smooth {
                        unresolved += 1;
                    }
                    smallest_step = smallest_step.min(h);
                    break (up - down) / (2.0 * h);
                }
                h /= 2.0;
            };
            numeric.push(estimate);
        }
        let scale = an
            .iter()
            .chain(&numeric)
            .map(|v| v.abs())
            .fold(opts.denom_floor, f64::max);
        let (worst_index, max_abs) = an
            .iter()
            .zip(&numeric)
            .map(|(a, n)| (a - n).abs())
            .map(|d| if d.is_nan() { f64::INFINITY } else { d })
            .enumerate()
            .fold((0, -1.0), |best, (i, d)| if d > best.1 { (i, d) } else { best });
        let max_rel_error = max_abs / scale;
        params.push(ParamCheck {
            name,
            numel: an.len(),
            max_rel_error,
            worst_index,
            analytic: an[worst_index],
            numeric: numeric[worst_index],
            passed: max_rel_error < opts.tolerance,
            reduced_steps,
            unresolved,
            smallest_step,
        });
    }
    Ok(GradCheckReport { tolerance: opts.tolerance, params })
}
