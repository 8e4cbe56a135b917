use serde::Serialize;

use super::params::ParamSet;
use crate::error::{Error, Result};

/// Denominator floor for the relative error.
pub const REL_ERROR_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(block, offset)` of the worst entry; block is 0 for an unstructured vector.
    pub worst_param_index: (usize, usize),
    pub worst_block: Option<String>,
    pub checked: usize,
    pub passed: bool,
}

/// Central-difference check of `analytic` against `f` at `p`.
///
/// Each entry's error is `|fd − analytic| / max(|analytic|, 1e-8)`.
pub fn finite_diff_grad_check<F>(f: F, p: &[f64], analytic: &[f64], eps: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&[f64]) -> Result<f64>,
{
    check_with_layout(f, p, analytic, eps, tol, None)
}

/// Same as [`finite_diff_grad_check`] over every parameter block of a [`ParamSet`].
/// `f` receives the flattened parameters in [`ParamSet::flatten`] order.
pub fn grad_check_params<P, F>(params: &P, grads: &P, f: F, eps: f64, tol: f64) -> Result<GradCheckReport>
where
    P: ParamSet,
    F: Fn(&[f64]) -> Result<f64>,
{
    let layout = params.layout();
    check_with_layout(f, &params.flatten(), &grads.flatten(), eps, tol, Some(&layout))
}

fn check_with_layout<F>(
    f: F,
    p: &[f64],
    analytic: &[f64],
    eps: f64,
    tol: f64,
    layout: Option<&[(String, usize)]>,
) -> Result<GradCheckReport>
where
    F: Fn(&[f64]) -> Result<f64>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::invalid(format!("grad check eps {eps} outside [1e-7, 1e-3]")));
    }
    if p.len() != analytic.len() {
        return Err(Error::shape(
            "finite_diff_grad_check",
            format!("params({})", p.len()),
            format!("grad({})", analytic.len()),
        ));
    }
    let mut probe = p.to_vec();
    let mut worst = (0.0_f64, 0_usize);
    for i in 0..p.len() {
        let orig = probe[i];
        probe[i] = orig + eps;
        let plus = f(&probe)?;
        probe[i] = orig - eps;
        let minus = f(&probe)?;
        probe[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite(format!("objective at probe of parameter {i}")));
        }
        let fd = (plus - minus) / (2.0 * eps);
        let rel = (fd - analytic[i]).abs() / analytic[i].abs().max(REL_ERROR_FLOOR);
        if rel > worst.0 || i == 0 {
            worst = (rel, i);
        }
    }
    let (worst_param_index, worst_block) = match layout {
        Some(layout) => locate(layout, worst.1),
        None => ((0, worst.1), None),
    };
    Ok(GradCheckReport {
        max_rel_error: worst.0,
        worst_param_index,
        worst_block,
        checked: p.len(),
        passed: worst.0 < tol,
    })
}

fn locate(layout: &[(String, usize)], mut flat: usize) -> ((usize, usize), Option<String>) {
    for (b, (name, len)) in layout.iter().enumerate() {
        if flat < *len {
            return ((b, flat), Some(name.clone()));
        }
        flat -= len;
    }
    ((layout.len(), flat), None)
}
