use super::{Tape, Tensor, TensorError, Var};

/// Central difference `(f(x + eps e_j) - f(x - eps e_j)) / 2 eps` for
/// coordinate `coord` of input `which`.
pub fn central_difference<E>(
    f: &impl Fn(&Tape, &[Var<'_>]) -> Result<f64, E>,
    inputs: &[Tensor],
    which: usize,
    coord: usize,
    eps: f64,
) -> Result<f64, E>
where
    E: From<TensorError>,
{
    let eval = |delta: f64| -> Result<f64, E> {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = inputs
            .iter()
            .enumerate()
            .map(|(i, t)| {
                let mut t = t.clone();
                if i == which {
                    t.data_mut()[coord] += delta;
                }
                tape.constant(t)
            })
            .collect();
        f(&tape, &vars)
    };
    let (plus, minus) = (eval(eps)?, eval(-eps)?);
    if !plus.is_finite() || !minus.is_finite() {
        return Err(TensorError::NonFinite { op: "central_difference" }.into());
    }
    Ok((plus - minus) / (2.0 * eps))
}

fn analytic<E>(f: &impl for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>, E>, inputs: &[Tensor]) -> Result<Vec<Tensor>, E>
where
    E: From<TensorError>,
{
    let tape = Tape::new();
    let vars = inputs.iter().map(|t| tape.leaf(t.clone())).collect::<Result<Vec<_>, _>>()?;
    let loss = f(&tape, &vars)?;
    let grads = tape.backward(&loss)?;
    Ok(vars.iter().map(|v| grads.wrt(v)).collect())
}

fn rel_err(a: f64, cd: f64) -> f64 {
    (a - cd).abs() / a.abs().max(cd.abs()).max(1e-8)
}

/// Maximum over every input coordinate of
/// `|analytic - central difference| / max(|analytic|, |cd|, 1e-8)`.
///
/// `f` must map its inputs to a scalar; it is evaluated once on a recording
/// tape and twice per coordinate on non-recording tapes.
pub fn grad_check<E>(
    f: impl for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>, E>,
    inputs: &[Tensor],
    eps: f64,
) -> Result<f64, E>
where
    E: From<TensorError>,
{
    let coords: Vec<(usize, usize)> = inputs.iter().enumerate().flat_map(|(i, t)| (0..t.numel()).map(move |j| (i, j))).collect();
    grad_check_at(f, inputs, eps, &coords)
}

/// [`grad_check`] restricted to the listed `(input, coordinate)` pairs.
pub fn grad_check_at<E>(
    f: impl for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>, E>,
    inputs: &[Tensor],
    eps: f64,
    coords: &[(usize, usize)],
) -> Result<f64, E>
where
    E: From<TensorError>,
{
    let grads = analytic(&f, inputs)?;
    let scalar = |tape: &Tape, vars: &[Var<'_>]| -> Result<f64, E> { Ok(f(tape, vars)?.value().item()) };
    let mut worst = 0.0f64;
    for &(i, j) in coords {
        let cd = central_difference(&scalar, inputs, i, j, eps)?;
        worst = worst.max(rel_err(grads[i].data()[j], cd));
    }
    Ok(worst)
}
