//! Central-difference verification of recorded gradients.

use super::{Tape, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// max over coordinates of |analytic - fd| / max(1, |analytic|)
    pub max_rel_err: f64,
    /// (parameter index, coordinate) pairs where the probe was non-finite
    pub non_finite: Vec<(usize, usize)>,
}

impl GradCheckReport {
    pub fn assert_below(&self, tol: f64) {
        assert!(
            self.non_finite.is_empty(),
            "non-finite probes at {:?}",
            self.non_finite
        );
        assert!(
            self.max_rel_err < tol,
            "max relative error {} >= {}",
            self.max_rel_err,
            tol
        );
    }
}

/// Checks the gradient of a scalar function of several parameter tensors.
///
/// `f` must build the loss from the supplied leaves alone; it is re-evaluated
/// at perturbed points on fresh tapes, so it must be a pure function of them.
pub fn grad_check_params<F>(
    f: F,
    points: &[(Vec<f64>, Vec<usize>)],
    step: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&Tape, &[Tensor]) -> Result<Tensor>,
{
    if step <= 0.0 {
        return Err(Error::invalid("grad-check", "step must be positive"));
    }
    let eval = |pts: &[(Vec<f64>, Vec<usize>)]| -> Result<f64> {
        let tape = Tape::new();
        let leaves: Vec<Tensor> = pts
            .iter()
            .map(|(d, s)| tape.constant(d.clone(), s))
            .collect::<Result<_>>()?;
        Ok(f(&tape, &leaves)?.item())
    };

    // Analytic pass.
    let tape = Tape::new();
    let leaves: Vec<Tensor> = points
        .iter()
        .map(|(d, s)| tape.leaf(d.clone(), s))
        .collect::<Result<_>>()?;
    let loss = f(&tape, &leaves)?;
    if loss.numel() != 1 {
        return Err(Error::NonScalarLoss { shape: loss.shape() });
    }
    tape.backward(&loss)?;
    let analytic: Vec<Vec<f64>> = leaves
        .iter()
        .map(|l| l.grad().unwrap_or_else(|| vec![0.0; l.numel()]))
        .collect();

    let mut max_rel_err: f64 = 0.0;
    let mut non_finite = Vec::new();
    let mut work = points.to_vec();
    for (pi, (data, _)) in points.iter().enumerate() {
        for ci in 0..data.len() {
            let orig = work[pi].0[ci];
            work[pi].0[ci] = orig + step;
            let fp = eval(&work)?;
            work[pi].0[ci] = orig - step;
            let fm = eval(&work)?;
            work[pi].0[ci] = orig;
            if !fp.is_finite() || !fm.is_finite() {
                non_finite.push((pi, ci));
                continue;
            }
            let fd = (fp - fm) / (2.0 * step);
            let a = analytic[pi][ci];
            let rel = (a - fd).abs() / a.abs().max(1.0);
            if rel > max_rel_err {
                max_rel_err = rel;
            }
        }
    }
    Ok(GradCheckReport { max_rel_err, non_finite })
}

/// Single-parameter convenience wrapper; the leaf has shape `[point.len()]`.
pub fn grad_check<F>(f: F, point: &[f64], step: f64) -> Result<GradCheckReport>
where
    F: Fn(&Tape, &Tensor) -> Result<Tensor>,
{
    grad_check_params(
        |tape, leaves| f(tape, &leaves[0]),
        &[(point.to_vec(), vec![point.len()])],
        step,
    )
}
