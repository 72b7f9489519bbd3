//! Central-difference verification of reverse-mode gradients.
//!
//! Non-smooth points (relu kinks, max-pool ties) make finite differences
//! meaningless; callers nudge inputs away from them first, e.g. by checking
//! [`Tape::kink_margin`](super::Tape::kink_margin).

use super::{ParamSet, Tape, Tensor};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Flat coordinate (in [`ParamSet::flatten`] order) of the worst entry.
    pub worst_coordinate: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn evaluate<F>(f: &F, params: &ParamSet) -> Result<(Tape, Vec<Tensor>, Tensor)>
where
    F: Fn(&mut Tape, &[Tensor]) -> Result<Tensor>,
{
    let mut tape = Tape::new();
    let leaves = params
        .arrays()
        .map(|a| tape.param(a))
        .collect::<Result<Vec<_>>>()?;
    let loss = f(&mut tape, &leaves)?;
    if tape.value(loss).len() != 1 {
        return Err(Error::Shape("gradient check needs a scalar loss".into()));
    }
    Ok((tape, leaves, loss))
}

/// Compares the reverse-mode gradient of `f` at `params` with central
/// differences `(f(p + h) - f(p - h)) / 2h`, coordinate by coordinate.
pub fn finite_difference_check<F>(f: F, params: &ParamSet, h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Tensor]) -> Result<Tensor>,
{
    let (tape, leaves, loss) = evaluate(&f, params)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<f64> = leaves
        .iter()
        .zip(params.arrays())
        .flat_map(|(&t, a)| {
            grads
                .get(t)
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![0.0; a.len()])
        })
        .collect();

    let base = params.flatten();
    let mut probe = params.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_coordinate: 0,
        analytic: 0.0,
        numeric: 0.0,
        checked: base.len(),
    };
    let mut shifted = base.clone();
    for i in 0..base.len() {
        shifted[i] = base[i] + h;
        probe.assign_flat(&shifted)?;
        let (t, _, l) = evaluate(&f, &probe)?;
        let plus = t.value(l)[0];
        shifted[i] = base[i] - h;
        probe.assign_flat(&shifted)?;
        let (t, _, l) = evaluate(&f, &probe)?;
        let minus = t.value(l)[0];
        shifted[i] = base[i];

        let numeric = (plus - minus) / (2.0 * h);
        let err = relative_error(analytic[i], numeric);
        if err > report.max_rel_error || i == 0 {
            report.max_rel_error = err;
            report.worst_coordinate = i;
            report.analytic = analytic[i];
            report.numeric = numeric;
        }
    }
    Ok(report)
}
