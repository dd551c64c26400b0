use crate::error::{Error, Result};

/// Targets with `|y| < MAPE_EPS` are left out of MAPE.
pub const MAPE_EPS: f64 = 1e-6;

fn check(y: &[f64], y_hat: &[f64]) -> Result<()> {
    if y.len() != y_hat.len() {
        return Err(Error::Metric(format!("length mismatch: {} targets, {} predictions", y.len(), y_hat.len())));
    }
    if y.is_empty() {
        return Err(Error::Metric("no points to score".into()));
    }
    if !y.iter().chain(y_hat).all(|x| x.is_finite()) {
        return Err(Error::Metric("non-finite value".into()));
    }
    Ok(())
}

/// Mean absolute error.
pub fn mae(y: &[f64], y_hat: &[f64]) -> Result<f64> {
    check(y, y_hat)?;
    Ok(y.iter().zip(y_hat).map(|(a, b)| (a - b).abs()).sum::<f64>() / y.len() as f64)
}

/// Mean squared error.
pub fn mse(y: &[f64], y_hat: &[f64]) -> Result<f64> {
    check(y, y_hat)?;
    Ok(y.iter().zip(y_hat).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / y.len() as f64)
}

/// Mean absolute percentage error in percent over targets with `|y| ≥ eps`,
/// plus the number of excluded points.
pub fn mape(y: &[f64], y_hat: &[f64], eps: f64) -> Result<(f64, usize)> {
    check(y, y_hat)?;
    if !(eps > 0.0) {
        return Err(Error::Metric("mape eps must be positive".into()));
    }
    let mut sum = 0.0;
    let mut kept = 0usize;
    for (a, b) in y.iter().zip(y_hat) {
        if a.abs() >= eps {
            sum += ((a - b) / a).abs();
            kept += 1;
        }
    }
    if kept == 0 {
        return Err(Error::Metric(format!("every target is below {eps} in magnitude; MAPE undefined")));
    }
    Ok((100.0 * sum / kept as f64, y.len() - kept))
}
