use super::{NumericsError, Result};

/// Denominator floor of the relative error. Coordinates whose analytic and
/// numeric gradients are both below it are compared on an absolute scale,
/// where central differences carry round-off noise of order `1e-10`.
pub const REL_ERR_FLOOR: f64 = 1e-4;

/// Compares an analytic gradient against central differences.
///
/// `f` returns the function value and its analytic gradient at a point.
/// Returns `max_i |g_i - c_i| / max(|g_i| + |c_i|, REL_ERR_FLOOR)` where
/// `c_i` is the central difference along coordinate `i`.
pub fn finite_diff_check<F>(f: F, params: &[f64], h: f64) -> Result<f64>
where
    F: Fn(&[f64]) -> (f64, Vec<f64>),
{
    let all: Vec<usize> = (0..params.len()).collect();
    finite_diff_check_at(f, params, h, &all)
}

/// `finite_diff_check` restricted to the listed coordinates.
pub fn finite_diff_check_at<F>(f: F, params: &[f64], h: f64, coords: &[usize]) -> Result<f64>
where
    F: Fn(&[f64]) -> (f64, Vec<f64>),
{
    if !(1e-7..=1e-4).contains(&h) {
        return Err(NumericsError::BadStep(h));
    }
    let (v0, analytic) = f(params);
    if !v0.is_finite() {
        return Err(NumericsError::NonFinite {
            index: usize::MAX,
            value: v0,
        });
    }
    if analytic.len() != params.len() {
        return Err(NumericsError::DimMismatch {
            op: "finite_diff_check",
            expected: params.len(),
            found: analytic.len(),
        });
    }
    let mut probe = params.to_vec();
    let mut worst = 0.0f64;
    for &i in coords {
        probe[i] = params[i] + h;
        let fp = f(&probe).0;
        probe[i] = params[i] - h;
        let fm = f(&probe).0;
        probe[i] = params[i];
        for v in [fp, fm] {
            if !v.is_finite() {
                return Err(NumericsError::NonFinite { index: i, value: v });
            }
        }
        let cdiff = (fp - fm) / (2.0 * h);
        let err = (analytic[i] - cdiff).abs() / (analytic[i].abs() + cdiff.abs()).max(REL_ERR_FLOOR);
        worst = worst.max(err);
    }
    Ok(worst)
}
