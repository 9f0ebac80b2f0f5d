use super::{AutodiffError, ParameterStore, Tape, Tensor, Var};

/// `|analytic - numeric| / (|numeric| + 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (numeric.abs() + 1e-8)
}

fn scalar_output(tape: &Tape, out: Var) -> Result<f64, AutodiffError> {
    let v = tape.value(out);
    if !v.is_scalar() {
        return Err(AutodiffError::Usage(format!(
            "gradient check needs a scalar function, got shape {:?}",
            v.shape()
        )));
    }
    Ok(v.item())
}

/// Largest relative error between the reverse-mode gradient of `f` at `x`
/// and central differences with step `h`.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64, AutodiffError>
where
    F: Fn(&mut Tape, Var) -> Result<Var, AutodiffError>,
{
    grad_check_with(f, x, h, None)
}

pub(crate) fn grad_check_with<F>(
    f: F,
    x: &Tensor,
    h: f64,
    fault: Option<super::Primitive>,
) -> Result<f64, AutodiffError>
where
    F: Fn(&mut Tape, Var) -> Result<Var, AutodiffError>,
{
    if h <= 0.0 {
        return Err(AutodiffError::Usage(format!("step size must be positive, got {h}")));
    }
    let mut tape = Tape::new();
    if let Some(p) = fault {
        tape.inject_fault(p);
    }
    let xv = tape.leaf(x.clone());
    let out = f(&mut tape, xv)?;
    scalar_output(&tape, out)?;
    let grads = tape.gradients(out)?;
    let analytic = grads.get(xv).cloned().unwrap_or_else(|| Tensor::zeros(x.shape()));

    let eval = |point: Tensor| -> Result<f64, AutodiffError> {
        let mut tape = Tape::new();
        let v = tape.leaf(point);
        let out = f(&mut tape, v)?;
        scalar_output(&tape, out)
    };
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * h);
        worst = worst.max(relative_error(analytic.data()[i], numeric));
    }
    Ok(worst)
}

/// Like [`grad_check`], over every scalar of every parameter in `store`.
/// `store` is left unchanged.
pub fn grad_check_params<F>(f: F, store: &ParameterStore, h: f64) -> Result<f64, AutodiffError>
where
    F: Fn(&mut Tape, &ParameterStore) -> Result<Var, AutodiffError>,
{
    grad_check_params_with(f, store, h, None)
}

pub(crate) fn grad_check_params_with<F>(
    f: F,
    store: &ParameterStore,
    h: f64,
    fault: Option<super::Primitive>,
) -> Result<f64, AutodiffError>
where
    F: Fn(&mut Tape, &ParameterStore) -> Result<Var, AutodiffError>,
{
    if h <= 0.0 {
        return Err(AutodiffError::Usage(format!("step size must be positive, got {h}")));
    }
    let mut work = store.clone();
    work.zero_grads();
    let mut tape = Tape::new();
    if let Some(p) = fault {
        tape.inject_fault(p);
    }
    let out = f(&mut tape, &work)?;
    scalar_output(&tape, out)?;
    tape.backward(out, &mut work)?;
    let analytic: Vec<Tensor> = work.iter().map(|p| p.grad.clone()).collect();

    let mut worst = 0.0f64;
    let ids: Vec<_> = work.ids().collect();
    for (pi, id) in ids.into_iter().enumerate() {
        for i in 0..work.get(id).value.len() {
            let orig = work.get(id).value.data()[i];
            let mut eval = |v: f64| -> Result<f64, AutodiffError> {
                work.get_mut(id).value.data_mut()[i] = v;
                let mut tape = Tape::new();
                let out = f(&mut tape, &work)?;
                scalar_output(&tape, out)
            };
            let numeric = (eval(orig + h)? - eval(orig - h)?) / (2.0 * h);
            work.get_mut(id).value.data_mut()[i] = orig;
            worst = worst.max(relative_error(analytic[pi].data()[i], numeric));
        }
    }
    Ok(worst)
}
