use super::params::ParamSet;
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use super::MathError;

/// Compares reverse-mode gradients of a scalar function against central
/// differences, all in 64-bit. `f` receives a fresh tape and the handle of
/// `x` and returns the scalar output.
///
/// Returns `max_i |autodiff_i - fd_i| / max(1, |fd_i|)`.
pub fn grad_check<Fn_>(f: Fn_, x: &Tensor<f64>, eps: f64) -> Result<f64, MathError>
where
    Fn_: Fn(&mut Tape<f64>, Var) -> Result<Var, MathError>,
{
    if !(1e-6..=1e-3).contains(&eps) {
        return Err(MathError::InvalidArgument(format!("eps {eps} outside [1e-6, 1e-3]")));
    }
    let eval = |point: &Tensor<f64>| -> Result<(f64, Option<Vec<f64>>), MathError> {
        let mut params = ParamSet::<f64>::new();
        let id = params.add("x", point.clone())?;
        let mut tape = Tape::<f64>::eval();
        let xv = tape.param(&params, id)?;
        let out = f(&mut tape, xv)?;
        let value = tape.value(out).item();
        if !value.is_finite() {
            return Err(MathError::NonFinite { op: "grad_check" });
        }
        Ok((value, Some(tape.backward(out, &params)?.get(id).to_vec())))
    };
    let (_, grad) = eval(x)?;
    let grad = grad.expect("gradient");
    let base = x.to_vec();
    let mut worst = 0.0f64;
    for i in 0..base.len() {
        let mut plus = base.clone();
        plus[i] += eps;
        let mut minus = base.clone();
        minus[i] -= eps;
        let (fp, _) = eval(&Tensor::new(x.shape(), plus)?)?;
        let (fm, _) = eval(&Tensor::new(x.shape(), minus)?)?;
        let fd = (fp - fm) / (2.0 * eps);
        let err = (grad[i] - fd).abs() / fd.abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}

/// Checks every parameter of `params` at once: `f` builds the scalar loss on
/// a tape from the given parameter set.
pub fn grad_check_params<Fn_>(f: Fn_, params: &ParamSet<f64>, eps: f64) -> Result<f64, MathError>
where
    Fn_: Fn(&mut Tape<f64>, &ParamSet<f64>) -> Result<Var, MathError>,
{
    if !(1e-6..=1e-3).contains(&eps) {
        return Err(MathError::InvalidArgument(format!("eps {eps} outside [1e-6, 1e-3]")));
    }
    let value = |p: &ParamSet<f64>| -> Result<f64, MathError> {
        let mut tape = Tape::<f64>::eval();
        let out = f(&mut tape, p)?;
        let v = tape.value(out).item();
        if !v.is_finite() {
            return Err(MathError::NonFinite { op: "grad_check" });
        }
        Ok(v)
    };
    let mut tape = Tape::<f64>::eval();
    let out = f(&mut tape, params)?;
    let grads = tape.backward(out, params)?;
    let mut worst = 0.0f64;
    for (id, _, t) in params.iter() {
        for i in 0..t.numel() {
            let mut shifted = params.clone();
            let mut data = t.to_vec();
            data[i] += eps;
            shifted.set(id, Tensor::new(t.shape(), data.clone())?)?;
            let fp = value(&shifted)?;
            data[i] -= 2.0 * eps;
            shifted.set(id, Tensor::new(t.shape(), data)?)?;
            let fm = value(&shifted)?;
            let fd = (fp - fm) / (2.0 * eps);
            worst = worst.max((grads.get(id)[i] - fd).abs() / fd.abs().max(1.0));
        }
    }
    Ok(worst)
}
