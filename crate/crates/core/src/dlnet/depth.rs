use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::{lit, Scalar};
use crate::tensor::Tensor;

pub const MIN_DEPTH: f64 = 0.1;
pub const MAX_DEPTH: f64 = 100.0;

fn check_bounds(min_depth: f64, max_depth: f64) -> Result<()> {
    if !(min_depth > 0.0 && min_depth < max_depth && max_depth.is_finite()) {
        return Err(Error::Config(format!(
            "depth bounds must satisfy 0 < min < max (got {min_depth}, {max_depth})"
        )));
    }
    Ok(())
}

/// `1 / (1/max + (1/min - 1/max) disp)`: maps `(0, 1)` onto `(min, max)`,
/// decreasing in `disp`.
pub fn disparity_to_depth<T: Scalar>(g: &mut Graph<T>, disp: Var, min_depth: f64, max_depth: f64) -> Result<Var> {
    check_bounds(min_depth, max_depth)?;
    let (lo, span) = (1.0 / max_depth, 1.0 / min_depth - 1.0 / max_depth);
    let inv = g.affine(disp, lit(span), lit(lo));
    let one = g.constant(Tensor::scalar(T::one()));
    g.div(one, inv)
}

/// Scalar form of [`disparity_to_depth`].
pub fn disparity_to_depth_value(disp: f64, min_depth: f64, max_depth: f64) -> Result<f64> {
    check_bounds(min_depth, max_depth)?;
    Ok(1.0 / (1.0 / max_depth + (1.0 / min_depth - 1.0 / max_depth) * disp))
}

/// Inverse of [`disparity_to_depth_value`].
pub fn depth_to_disparity_value(depth: f64, min_depth: f64, max_depth: f64) -> Result<f64> {
    check_bounds(min_depth, max_depth)?;
    Ok((1.0 / depth - 1.0 / max_depth) / (1.0 / min_depth - 1.0 / max_depth))
}
