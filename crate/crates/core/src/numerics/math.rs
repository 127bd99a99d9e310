//! Scalar and vector math used by the losses.

use crate::error::{Error, Result};

pub const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;

/// `ln N(x | mu, sigma)`.
pub fn gaussian_log_pdf(x: f64, mu: f64, sigma: f64) -> Result<f64> {
    if !(sigma > 0.0) {
        return Err(Error::Domain(format!("sigma must be positive, got {sigma}")));
    }
    let u = (x - mu) / sigma;
    Ok(-sigma.ln() - HALF_LN_2PI - 0.5 * u * u)
}

/// Partial derivatives of [`gaussian_log_pdf`] with respect to
/// `(x, mu, sigma)`.
pub fn gaussian_log_pdf_grad(x: f64, mu: f64, sigma: f64) -> Result<(f64, f64, f64)> {
    if !(sigma > 0.0) {
        return Err(Error::Domain(format!("sigma must be positive, got {sigma}")));
    }
    let d = x - mu;
    let s2 = sigma * sigma;
    Ok((-d / s2, d / s2, -1.0 / sigma + d * d / (s2 * sigma)))
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

pub fn log_softmax(v: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(v);
    v.iter().map(|x| x - lse).collect()
}

/// Max-shifted softmax.
pub fn softmax(v: &[f64]) -> Vec<f64> {
    let mut out = v.to_vec();
    softmax_in_place(&mut out);
    out
}

pub fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    v.iter_mut().for_each(|x| *x /= sum);
}

/// Binary cross-entropy of `sigmoid(logit)` against `target` in `{0, 1}`,
/// evaluated from the logit.
pub fn bce_with_logit(logit: f64, target: f64) -> f64 {
    softplus(logit) - target * logit
}

pub fn entropy(probs: &[f64]) -> f64 {
    -probs.iter().filter(|&&p| p > 0.0).map(|p| p * p.ln()).sum::<f64>()
}

/// Clips a real reward to `{-1, 0, 1}` by sign.
pub fn sign_clip(r: f64) -> f64 {
    if r > 0.0 {
        1.0
    } else if r < 0.0 {
        -1.0
    } else {
        0.0
    }
}
