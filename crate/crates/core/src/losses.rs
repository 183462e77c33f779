//! Loss terms: utility cross-entropy, contrastive budget loss, hinge
//! penalty with limiter, L1 reconstruction, and their composition into the
//! anonymizer objective.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Scalar snapshots of the anonymizer objective and its three terms, plus
/// the differentiable composed tensor.
pub struct LossTerms {
    pub l_t: f64,
    pub l_b: f64,
    pub l_penalty: f64,
    pub l_a: f64,
    pub composed: Tensor,
}

/// Mean over the batch of `-log softmax(logits)[label]`, in nats.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    logits.softmax_cross_entropy(labels)
}

/// `sqrt(mean((x - y)^2))` over all elements.
pub fn rms_diff(x: &Tensor, y: &Tensor) -> Result<Tensor> {
    x.sub(y)?.square().mean_all()?.sqrt()
}

/// Hinge on a precomputed RMS value: `max(0, rms - b)`.
pub fn hinge(rms: &Tensor, b: f64) -> Result<Tensor> {
    if b < 0.0 {
        return Err(Error::invalid("penalty", format!("negative limiter {b}")));
    }
    Ok(rms.scalar_add(-b).max_scalar(0.0))
}

/// `max(0, rms(x - fx) - b)`. Zero value and zero gradient while the
/// distortion stays within the limiter.
pub fn penalty_loss(x: &Tensor, fx: &Tensor, b: f64) -> Result<Tensor> {
    hinge(&rms_diff(x, fx)?, b)
}

/// NT-Xent over paired projections `z[i] <-> zp[i]`, both `[n, d]`.
///
/// Projections are L2-normalized internally; the similarity kernel is
/// `exp(cos(u, v) / tau)`. Both view directions are used and the result is
/// the mean over all `2n` anchors.
pub fn nt_xent(z: &Tensor, zp: &Tensor, tau: f64) -> Result<Tensor> {
    if tau <= 0.0 {
        return Err(Error::invalid("nt-xent", format!("temperature {tau} must be positive")));
    }
    let (zs, ps) = (z.shape(), zp.shape());
    if zs.len() != 2 || zs != ps {
        return Err(Error::ShapeMismatch { op: "nt-xent", lhs: zs, rhs: ps });
    }
    let n = zs[0];
    let zn = z.l2_normalize_rows()?;
    let pn = zp.l2_normalize_rows()?;

    let inv_tau = 1.0 / tau;
    let s11 = zn.matmul(&zn.transpose2d()?)?.scalar_mul(inv_tau);
    let s12 = zn.matmul(&pn.transpose2d()?)?.scalar_mul(inv_tau);
    let s22 = pn.matmul(&pn.transpose2d()?)?.scalar_mul(inv_tau);
    let s21 = s12.transpose2d()?;

    let tape = z.tape();
    let mut off_diag = vec![1.0; n * n];
    let mut diag = vec![0.0; n * n];
    for i in 0..n {
        off_diag[i * n + i] = 0.0;
        diag[i * n + i] = 1.0;
    }
    let off_diag = tape.constant(off_diag, &[n, n])?;
    let diag = tape.constant(diag, &[n, n])?;
    let ones = tape.constant(vec![1.0; n], &[n, 1])?;

    // Row sums of exp-similarities; the j == i self term is masked out of
    // the same-view matrix only, matching the formula's indicator.
    let den1 = s11.exp().mul(&off_diag)?.add(&s12.exp())?.matmul(&ones)?;
    let den2 = s22.exp().mul(&off_diag)?.add(&s21.exp())?.matmul(&ones)?;
    // Diagonal of s12: the positive-pair logits, shared by both directions.
    let pos = s12.mul(&diag)?.matmul(&ones)?;

    den1.log()?
        .add(&den2.log()?)?
        .sub(&pos.scalar_mul(2.0))?
        .sum_all()?
        .scalar_mul(1.0 / (2 * n) as f64)
        .sum_all()
}

/// Anonymizer objective: `l_t - min(l_b, mu) + lambda * l_penalty`.
///
/// The subtracted budget term is what reverses the contrastive gradient for
/// the anonymizer; `mu` caps its contribution so the objective stays bounded
/// below.
pub fn anonymizer_loss(
    l_t: &Tensor,
    l_b: &Tensor,
    l_penalty: &Tensor,
    lambda: f64,
    mu: f64,
) -> Result<Tensor> {
    if lambda < 0.0 {
        return Err(Error::invalid("anonymizer-loss", format!("negative lambda {lambda}")));
    }
    if mu <= 0.0 {
        return Err(Error::invalid("anonymizer-loss", format!("margin {mu} must be positive")));
    }
    l_t.sub(&l_b.min_scalar(mu))?.add(&l_penalty.scalar_mul(lambda))
}

/// L1 reconstruction: sum of |x - xhat| over channel/height/width, mean over
/// the leading batch axis.
pub fn l1_recon_loss(x: &Tensor, xhat: &Tensor) -> Result<Tensor> {
    let (xs, hs) = (x.shape(), xhat.shape());
    if xs != hs {
        return Err(Error::ShapeMismatch { op: "l1-recon", lhs: xs, rhs: hs });
    }
    if xs.len() != 4 {
        return Err(Error::invalid("l1-recon", format!("need [batch, c, h, w], got {xs:?}")));
    }
    let batch = xs[0] as f64;
    x.sub(xhat)?.abs()?.sum_all()?.scalar_mul(1.0 / batch).sum_all()
}

/// Multi-label binary cross-entropy on logits, mean over all entries.
/// Stable form: `max(z,0) - z*y + log(1 + exp(-|z|))`.
pub fn bce_with_logits(logits: &Tensor, targets: &Tensor) -> Result<Tensor> {
    let (ls, ts) = (logits.shape(), targets.shape());
    if ls != ts {
        return Err(Error::ShapeMismatch { op: "bce", lhs: ls, rhs: ts });
    }
    let zy = logits.mul(targets)?;
    let softplus = logits.abs()?.scalar_mul(-1.0).exp().scalar_add(1.0).log()?;
    logits.max_scalar(0.0).sub(&zy)?.add(&softplus)?.mean_all()
}
