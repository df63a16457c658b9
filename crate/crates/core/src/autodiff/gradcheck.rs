use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::Result;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Flat index of the worst entry.
    pub worst_index: usize,
    pub analytic: Tensor,
    pub numeric: Tensor,
    pub passed: bool,
}

/// Compares the tape gradient of `f` at `point` with central differences.
///
/// `f` builds a scalar from the input variable on a fresh tape. The relative
/// error of each entry is `|analytic - numeric| / max(1, |analytic|)`.
pub fn finite_diff_check<F>(f: F, point: &Tensor, h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let eval = |p: &Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let x = tape.leaf(p.clone(), false);
        let y = f(&mut tape, x)?;
        Ok(tape.value(y).item())
    };

    let mut tape = Tape::new();
    let x = tape.leaf(point.clone(), true);
    let y = f(&mut tape, x)?;
    let analytic = tape.backward(y)?.wrt(x).expect("input is a requires_grad leaf");

    let mut numeric = Tensor::zeros(point.shape());
    let mut probe = point.clone();
    for i in 0..point.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = eval(&probe)?;
        probe.data_mut()[i] = orig - h;
        let down = eval(&probe)?;
        probe.data_mut()[i] = orig;
        numeric.data_mut()[i] = (up - down) / (2.0 * h);
    }

    let (worst_index, max_rel_error) = analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, n)| (a - n).abs() / a.abs().max(1.0))
        .enumerate()
        .fold((0, 0.0), |best, (i, e)| if e > best.1 { (i, e) } else { best });

    Ok(GradCheckReport {
        max_rel_error,
        worst_index,
        passed: max_rel_error < tol && max_rel_error.is_finite(),
        analytic,
        numeric,
    })
}
