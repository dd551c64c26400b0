use super::{Result, Tape, Tensor, TensorError, Var};

/// Compares the tape gradient of a scalar function against central
/// differences and returns the worst coordinate error
/// `|analytic - numeric| / max(1, |analytic|)`.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if !(eps > 0.0 && eps <= 1e-2) {
        return Err(TensorError::Invalid(format!("eps must lie in (0, 1e-2], got {eps}")));
    }
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone(), true)?;
    let out = f(&mut tape, xv)?;
    tape.backward(out)?;
    let analytic = tape
        .grad(xv)?
        .map(Tensor::into_data)
        .unwrap_or_else(|| vec![0.0; x.len()]);

    let eval = |probe: Tensor| -> Result<f64> {
        let mut t = Tape::new();
        let v = t.leaf(probe, false)?;
        let y = f(&mut t, v)?;
        let value = t.value(y)?;
        value
            .item()
            .ok_or_else(|| TensorError::NonScalarLoss(value.shape().to_vec()))
    };

    let mut worst = 0.0f64;
    for (k, &a) in analytic.iter().enumerate() {
        let mut plus = x.clone();
        plus.data_mut()[k] += eps;
        let mut minus = x.clone();
        minus.data_mut()[k] -= eps;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
    }
    Ok(worst)
}
