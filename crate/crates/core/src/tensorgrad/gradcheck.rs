//! Central finite-difference gradient probing (used by the test suites).

use super::tape::{ParamId, Params};
use crate::scalar::Scalar;

/// Default probe step for f64 checks.
pub const DEFAULT_EPS: f64 = 1e-5;

/// Relative error with an absolute floor: `|a - b| / max(1, |a|, |b|)`.
///
/// The floor keeps near-zero gradients from inflating the ratio; for O(1)
/// gradients this is the plain relative error.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / 1.0f64.max(a.abs()).max(b.abs())
}

/// Central finite difference of `loss` w.r.t. one parameter element.
pub fn finite_diff<S, F>(
    params: &mut Params<S>,
    id: ParamId,
    elem: usize,
    eps: f64,
    mut loss: F,
) -> f64
where
    S: Scalar,
    F: FnMut(&Params<S>) -> f64,
{
    let orig = params.value(id).data()[elem];
    let step = S::cast_from(eps);
    params.value_mut(id).data_mut()[elem] = orig + step;
    let plus = loss(params);
    params.value_mut(id).data_mut()[elem] = orig - step;
    let minus = loss(params);
    params.value_mut(id).data_mut()[elem] = orig;
    (plus - minus) / (2.0 * eps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensorgrad::Tensor;

    #[test]
    fn finite_diff_matches_quadratic_slope() {
        let mut params = Params::new();
        let id = params.add("w", Tensor::scalar(1.5f64));
        let d = finite_diff(&mut params, id, 0, 1e-6, |p| {
            let w = p.value(id).item();
            w * w
        });
        assert!(rel_err(d, 3.0) < 1e-8);
        // The probe restores the original value.
        assert_eq!(params.value(id).item(), 1.5);
    }
}
