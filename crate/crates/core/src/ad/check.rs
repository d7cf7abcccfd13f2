//! Central finite-difference verification of reverse-mode gradients.

use crate::ad::{AdError, Tape, Tensor, Var};

/// Worst disagreement found by [`gradient_check`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheck {
    /// Largest `|analytic − numeric| / max(|analytic|, |numeric|, floor)`.
    pub max_rel_error: f64,
    /// `(input, element)` where it occurred.
    pub worst: (usize, usize),
    pub checked: usize,
}

/// Compares reverse-mode gradients of the scalar built by `f` with central
/// differences of step `h` over every element of every input.
///
/// `floor` bounds the denominator so that gradients that are zero up to
/// roundoff compare in absolute terms.
pub fn gradient_check<F>(inputs: &[Tensor<f64>], h: f64, floor: f64, f: F) -> Result<GradCheck, AdError>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var, AdError>,
{
    let eval = |vals: &[Tensor<f64>]| -> Result<f64, AdError> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let analytic = tape.grad(out, &vars)?;
    let mut report = GradCheck {
        max_rel_error: 0.0,
        worst: (0, 0),
        checked: 0,
    };
    let mut vals = inputs.to_vec();
    for (k, input) in inputs.iter().enumerate() {
        for e in 0..input.len() {
            let x = input.data()[e];
            vals[k].data_mut()[e] = x + h;
            let fp = eval(&vals)?;
            vals[k].data_mut()[e] = x - h;
            let fm = eval(&vals)?;
            vals[k].data_mut()[e] = x;
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic[k].data()[e];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = (k, e);
            }
            report.checked += 1;
        }
    }
    Ok(report)
}
