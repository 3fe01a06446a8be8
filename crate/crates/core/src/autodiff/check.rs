//! Central-difference gradient checking for tape-built functions.

use super::{Shape, Tape, Var};
use crate::error::Result;

#[derive(Clone, Debug)]
pub struct GradCheck {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    /// `max |analytic - numeric| / max |numeric|` over all inputs.
    pub max_rel_err: f64,
}

/// Builds `f` on fresh tapes and compares its reverse-mode gradient with
/// central differences of step `h` over every input entry.
pub fn check_gradient<F>(inputs: &[(Vec<f64>, Shape)], h: f64, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Vec<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars = values
            .iter()
            .zip(inputs)
            .map(|(v, (_, s))| tape.var(v.clone(), *s))
            .collect::<Result<Vec<_>>>()?;
        let out = f(&mut tape, &vars)?;
        Ok(tape.scalar(out))
    };

    let mut tape = Tape::new();
    let vars = inputs
        .iter()
        .map(|(v, s)| tape.var(v.clone(), *s))
        .collect::<Result<Vec<_>>>()?;
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;
    let analytic: Vec<f64> = vars.iter().flat_map(|&v| grads.get(v)).collect();

    let mut values: Vec<Vec<f64>> = inputs.iter().map(|(v, _)| v.clone()).collect();
    let mut numeric = Vec::with_capacity(analytic.len());
    for k in 0..values.len() {
        for i in 0..values[k].len() {
            let orig = values[k][i];
            values[k][i] = orig + h;
            let plus = eval(&values)?;
            values[k][i] = orig - h;
            let minus = eval(&values)?;
            values[k][i] = orig;
            numeric.push((plus - minus) / (2.0 * h));
        }
    }
    let max_rel_err = relative_error(&analytic, &numeric);
    Ok(GradCheck {
        analytic,
        numeric,
        max_rel_err,
    })
}

/// `max |a - b| / max |b|`, with the denominator floored at 1e-12.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let scale = b.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs())) / scale
}
