use super::tape::Tape;
use super::tensor::Tensor;
use super::Result;

/// Compare the analytic gradient of a scalar-valued computation against
/// central finite differences, perturbing the entries of `x` in place.
///
/// `f` must be a deterministic function of `x` (and of anything else it
/// captures, held fixed). Returns the max over entries of
/// `|analytic - numeric| / (|analytic| + |numeric| + 1e-12)`.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&Tape) -> Result<Tensor>,
{
    let was_requiring = x.requires_grad();
    x.set_requires_grad(true);
    x.clear_grad();
    let tape = Tape::new();
    let loss = f(&tape)?;
    tape.backward(&loss)?;
    let analytic = x.grad().unwrap_or_else(|| vec![0.0; x.numel()]);
    x.clear_grad();
    x.set_requires_grad(false);

    let mut max_err: f64 = 0.0;
    for i in 0..x.numel() {
        let orig = x.value_at(i);
        x.set_value_at(i, orig + eps);
        let plus = f(&Tape::new())?.item();
        x.set_value_at(i, orig - eps);
        let minus = f(&Tape::new())?.item();
        x.set_value_at(i, orig);
        let numeric = (plus - minus) / (2.0 * eps);
        let err = (analytic[i] - numeric).abs() / (analytic[i].abs() + numeric.abs() + 1e-12);
        max_err = max_err.max(err);
    }
    x.set_requires_grad(was_requiring);
    Ok(max_err)
}
