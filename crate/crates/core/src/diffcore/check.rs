use super::matrix::Matrix;
use super::tape::{Tape, Var};
use crate::error::{Error, Result};

/// Evaluates `loss` with every array in `inputs` registered as a
/// differentiable leaf and returns the scalar value with its gradients.
pub fn value_and_gradients<'a, F>(inputs: &[Matrix], loss: F) -> Result<(f64, Vec<Matrix>)>
where
    F: Fn(&mut Tape<'a>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|m| tape.param(m.clone())).collect();
    let out = loss(&mut tape, &vars)?;
    let value = tape.value(out).item()?;
    let grads = tape.backward(out)?;
    Ok((value, vars.iter().map(|&v| grads.wrt(v)).collect()))
}

/// Forward value of `loss` only.
pub fn evaluate<'a, F>(inputs: &[Matrix], loss: &F) -> Result<f64>
where
    F: Fn(&mut Tape<'a>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|m| tape.constant(m.clone())).collect();
    let out = loss(&mut tape, &vars)?;
    tape.value(out).item()
}

/// Largest relative disagreement between reverse-mode gradients and central
/// differences `(f(p+h) − f(p−h))/2h`, with denominator
/// `max(|analytic|, |numeric|, 1e-8)`.
pub fn finite_difference_check<'a, F>(loss: F, params: &[Matrix], step: f64) -> Result<f64>
where
    F: Fn(&mut Tape<'a>, &[Var]) -> Result<Var>,
{
    if !(step > 0.0) {
        return Err(Error::Contract(format!("step must be positive, got {step}")));
    }
    let (_, analytic) = value_and_gradients(params, &loss)?;
    let mut probe = params.to_vec();
    let mut worst = 0.0f64;
    for (p, grad) in analytic.iter().enumerate() {
        for idx in 0..params[p].len() {
            let original = params[p].as_slice()[idx];
            probe[p].as_mut_slice()[idx] = original + step;
            let up = evaluate(&probe, &loss)?;
            probe[p].as_mut_slice()[idx] = original - step;
            let down = evaluate(&probe, &loss)?;
            probe[p].as_mut_slice()[idx] = original;
            let numeric = (up - down) / (2.0 * step);
            let a = grad.as_slice()[idx];
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    Ok(worst)
}
