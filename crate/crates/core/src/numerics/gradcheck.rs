//! Central finite-difference check of recorded backward rules.

use serde::Serialize;

use super::graph::{Graph, Var};
use super::nn::Module;
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub eps: f64,
    pub tol: f64,
    /// Check at most this many evenly strided entries per input.
    pub max_entries: Option<usize>,
    /// Denominator floor for the relative error.
    pub floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            tol: 1e-4,
            max_entries: None,
            floor: 1e-6,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ParamCheck {
    pub index: usize,
    pub entries_checked: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub name: String,
    pub tol: f64,
    pub max_rel_error: f64,
    pub passed: bool,
    pub params: Vec<ParamCheck>,
}

/// Compares analytic gradients of the scalar built by `f` against central
/// differences, input by input.
///
/// `f` receives fresh differentiable leaves holding `params` and must be
/// deterministic. Relative error is `|a − n| / max(|a|, |n|, floor)`.
pub fn grad_check<F>(
    name: &str,
    f: F,
    params: &[Tensor],
    opts: GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut g = Graph::inference();
        let leaves: Vec<Var> = values.iter().map(|t| g.leaf(t.clone(), false)).collect();
        let out = f(&mut g, &leaves)?;
        Ok(g.value(out).item())
    };

    let mut g = Graph::inference();
    let leaves: Vec<Var> = params.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let out = f(&mut g, &leaves)?;
    if g.value(out).len() != 1 {
        return Err(Error::Contract("grad_check needs a scalar function".into()));
    }
    let grads = g.backward(out)?;

    let mut values = params.to_vec();
    let mut checks = Vec::with_capacity(params.len());
    for (pi, leaf) in leaves.iter().enumerate() {
        let analytic = grads
            .get(*leaf)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(params[pi].shape()));
        let n = params[pi].len();
        let stride = match opts.max_entries {
            Some(k) if k > 0 && n > k => n.div_ceil(k),
            _ => 1,
        };
        let mut check = ParamCheck {
            index: pi,
            entries_checked: 0,
            max_rel_error: 0.0,
            max_abs_error: 0.0,
        };
        for e in (0..n).step_by(stride) {
            let orig = values[pi].data()[e];
            values[pi].data_mut()[e] = orig + opts.eps;
            let plus = eval(&values)?;
            values[pi].data_mut()[e] = orig - opts.eps;
            let minus = eval(&values)?;
            values[pi].data_mut()[e] = orig;

            let numeric = (plus - minus) / (2.0 * opts.eps);
            let a = analytic.data()[e];
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(opts.floor);
            check.max_abs_error = check.max_abs_error.max(abs);
            check.max_rel_error = check.max_rel_error.max(rel);
            check.entries_checked += 1;
        }
        checks.push(check);
    }
    let max_rel_error = checks.iter().map(|c| c.max_rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        name: name.to_string(),
        tol: opts.tol,
        max_rel_error,
        passed: max_rel_error <= opts.tol,
        params: checks,
    })
}

/// [`grad_check`] over `inputs` followed by every parameter of `module`.
///
/// `f` receives leaves for `inputs` only; the module's parameters are bound
/// by name, so its usual forward (via [`Graph::param`]) sees the perturbed
/// values.
pub fn grad_check_module<M, F>(
    name: &str,
    module: &M,
    inputs: &[Tensor],
    f: F,
    opts: GradCheckOptions,
) -> Result<GradCheckReport>
where
    M: Module,
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut names = Vec::new();
    let mut values = inputs.to_vec();
    module.visit(&mut |p| {
        names.push(p.name().to_string());
        values.push(p.value().clone());
    });
    let k = inputs.len();
    grad_check(
        name,
        |g, leaves| {
            for (n, &v) in names.iter().zip(&leaves[k..]) {
                g.bind_param(n, v);
            }
            f(g, &leaves[..k])
        },
        &values,
        opts,
    )
}
