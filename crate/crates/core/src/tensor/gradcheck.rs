//! Central finite-difference checks of analytic gradients.
//!
//! Piecewise operations (rectifier, argmin) report which branch they took via
//! [`record_branch`]. A coordinate whose ±step evaluations take a different
//! branch than the unperturbed point straddles a kink; it is counted in
//! [`GradCheckReport::skipped`] instead of being compared.

use std::cell::RefCell;
use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use super::Tensor;
use crate::error::Result;

thread_local! {
    static BRANCH_TRACE: RefCell<Option<DefaultHasher>> = const { RefCell::new(None) };
}

/// Feeds branch decisions into the active trace, if any.
pub fn record_branch(bits: impl Iterator<Item = bool>) {
    BRANCH_TRACE.with(|cell| {
        if let Some(h) = cell.borrow_mut().as_mut() {
            for b in bits {
                b.hash(h);
            }
        }
    });
}

fn traced<R>(f: impl FnOnce() -> R) -> (R, u64) {
    let previous = BRANCH_TRACE.with(|c| c.replace(Some(DefaultHasher::new())));
    let out = f();
    let trace = BRANCH_TRACE.with(|c| c.replace(previous)).map(|h| h.finish()).unwrap_or(0);
    (out, trace)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    /// max over compared coordinates of |a − n| / max(floor, |a| + |n|); see
    /// [`resolution_floor`]
    pub max_rel_error: f64,
    pub checked: usize,
    pub skipped: usize,
}

impl GradCheckReport {
    fn merge(self, other: GradCheckReport) -> GradCheckReport {
        GradCheckReport {
            max_rel_error: self.max_rel_error.max(other.max_rel_error),
            checked: self.checked + other.checked,
            skipped: self.skipped + other.skipped,
        }
    }
}

/// Smallest gradient magnitude a central difference of `f` can resolve.
///
/// Evaluating `f` carries rounding error of a few thousand ulps at most, which
/// the difference quotient divides by the step. Below this scale the numeric
/// gradient is noise (a structurally zero gradient shows up as ±1 ulp / 2h),
/// so it serves as the denominator floor of the relative error.
pub fn resolution_floor(f: f64, step: f64) -> f64 {
    1e4 * f64::EPSILON * f.abs().max(1.0) / step
}

/// Compares the gradient of the scalar `f` at `x` against central differences.
pub fn finite_diff_check<F>(f: F, x: &Tensor, step: f64) -> Result<GradCheckReport>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    finite_diff_check_many(|xs| f(&xs[0]), std::slice::from_ref(x), step)
}

/// As [`finite_diff_check`] with several independent inputs.
pub fn finite_diff_check_many<F>(f: F, xs: &[Tensor], step: f64) -> Result<GradCheckReport>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    let tracked: Vec<Tensor> = xs.iter().map(|x| x.detach().requires_grad()).collect();
    let (loss, base_trace) = traced(|| f(&tracked));
    let loss = loss?;
    let floor = resolution_floor(loss.item(), step);
    loss.backward()?;

    let mut report = GradCheckReport { max_rel_error: 0.0, checked: 0, skipped: 0 };
    for (which, x) in tracked.iter().enumerate() {
        let analytic = x.grad().unwrap_or_else(|| vec![0.0; x.numel()]);
        let mut inputs: Vec<Tensor> = xs.iter().map(Tensor::detach).collect();
        let mut eval = |i: usize, delta: f64| -> Result<(f64, u64)> {
            let mut v = x.data().to_vec();
            v[i] += delta;
            inputs[which] = Tensor::new(x.shape(), v)?;
            let (out, trace) = traced(|| f(&inputs));
            Ok((out?.item(), trace))
        };
        let mut part = GradCheckReport { max_rel_error: 0.0, checked: 0, skipped: 0 };
        for (i, &a) in analytic.iter().enumerate() {
            let (plus, tp) = eval(i, step)?;
            let (minus, tm) = eval(i, -step)?;
            if tp != base_trace || tm != base_trace {
                part.skipped += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * step);
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(floor);
            part.max_rel_error = part.max_rel_error.max(rel);
            part.checked += 1;
        }
        report = report.merge(part);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_is_exact() {
        let x = Tensor::from_fn(&[3, 4], |i| (i as f64).sin());
        let r = finite_diff_check(|x| Ok(x.sum()), &x, 1e-4).unwrap();
        assert!(r.max_rel_error < 1e-10, "{r:?}");
        assert_eq!(r.checked, 12);
    }

    #[test]
    fn kinks_are_skipped_not_compared() {
        // 1e-5 sits within one step of the rectifier kink
        let x = Tensor::new(&[3], vec![1e-5, 0.5, -0.5]).unwrap();
        let r = finite_diff_check(|x| Ok(x.relu().sum()), &x, 1e-4).unwrap();
        assert_eq!(r.skipped, 1);
        assert_eq!(r.checked, 2);
        assert!(r.max_rel_error < 1e-10);
    }

    #[test]
    fn zero_gradient_with_rounding_noise_passes() {
        // x·0 contributes nothing; the constant term makes f ≈ 1 so ±step
        // evaluations can differ by an ulp
        let x = Tensor::new(&[1], vec![0.3]).unwrap();
        let r = finite_diff_check(|x| Ok(x.scale(1e-30).add_scalar(0.9960096138534395).sum()), &x, 1e-4).unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // scale by 2 in forward, but the check sees mul by a detached copy
        let x = Tensor::from_fn(&[4], |i| i as f64 + 1.0);
        let r = finite_diff_check(|x| Ok(x.mul(&x.detach())?.sum()), &x, 1e-4).unwrap();
        assert!(r.max_rel_error > 0.3, "{r:?}");
    }
}
