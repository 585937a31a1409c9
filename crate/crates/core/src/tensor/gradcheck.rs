use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// `|analytic − numeric| / (|analytic| + |numeric| + 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs() + 1e-8)
}

/// Compares the reverse-mode gradient of a scalar function against central
/// differences at `point` and returns the worst coordinate's relative error.
///
/// `f` receives a fresh graph and the input variable and must return a
/// one-element result.
pub fn finite_difference_check<F>(f: F, point: &Tensor, epsilon: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    if !(epsilon > 0.0) {
        return Err(Error::param(format!("epsilon must be positive, got {epsilon}")));
    }
    let mut g = Graph::new();
    let x = g.param(point.clone());
    let y = f(&mut g, x)?;
    let grads = g.backward(y)?;
    let analytic = grads.get_or_zeros(x, point);

    let eval = |p: Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let x = g.constant(p);
        let y = f(&mut g, x)?;
        let v = g.value(y).item();
        if !v.is_finite() {
            return Err(Error::Numeric("function value is not finite".into()));
        }
        Ok(v)
    };

    let mut worst = 0.0f64;
    for k in 0..point.len() {
        let mut plus = point.clone();
        plus.data_mut()[k] += epsilon;
        let mut minus = point.clone();
        minus.data_mut()[k] -= epsilon;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * epsilon);
        worst = worst.max(relative_error(analytic.data()[k], numeric));
    }
    Ok(worst)
}
