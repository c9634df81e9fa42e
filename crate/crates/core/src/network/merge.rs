//! Output layers combining the main representation `z` with the auxiliary
//! representation `z_aux`.
//!
//! MoE reshapes length-`N` vectors to `(M, K)` with `n = K * m + k`.

use crate::error::{Error, Result};

#[inline]
pub fn sigmoid(a: f64) -> f64 {
    if a >= 0.0 {
        1.0 / (1.0 + (-a).exp())
    } else {
        let e = a.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Max-shifted softmax.
pub fn softmax(a: &[f64]) -> Vec<f64> {
    let max = a.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = a.iter().map(|&v| (v - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

pub fn merge_static(z: &[f64], w: &[f64], b: f64) -> f64 {
    sigmoid(b + dot(w, z))
}

pub fn merge_aw(z: &[f64], z_aux: &[f64], b: f64) -> f64 {
    sigmoid(b + dot(z_aux, z))
}

pub fn merge_at(z: &[f64], z_aux: &[f64], w: &[f64], w_aux: &[f64]) -> f64 {
    sigmoid(dot(w_aux, z_aux) + dot(w, z))
}

/// Threshold on the static detection function `σ(w·z)` that is equivalent
/// to thresholding the AT output at `tau`.
pub fn equivalent_threshold(tau: f64, z_aux: &[f64], w_aux: &[f64]) -> Result<f64> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::InvalidArgument(format!("threshold {tau} outside (0,1)")));
    }
    Ok(sigmoid(logit(tau) - dot(w_aux, z_aux)))
}

/// Intermediate quantities of the mixture-of-experts output.
#[derive(Debug, Clone)]
pub struct MoeTerms {
    pub gates: Vec<f64>,
    pub experts: Vec<f64>,
    pub logit: f64,
}

/// `gate_w` is `M × K` row-major, `gate_b` has length `K`.
pub fn moe_terms(
    z: &[f64],
    z_aux: &[f64],
    w: &[f64],
    b: f64,
    gate_w: &[f64],
    gate_b: &[f64],
) -> Result<MoeTerms> {
    let n = z.len();
    let k = gate_b.len();
    if k == 0 || n % k != 0 {
        return Err(Error::InvalidArgument(format!("{n} nodes not divisible by {k} experts")));
    }
    let m = n / k;
    if z_aux.len() != n || w.len() != n || gate_w.len() != m * k {
        return Err(Error::mismatch(
            (n, n, n, m * k),
            (z.len(), z_aux.len(), w.len(), gate_w.len()),
        ));
    }
    let mut alpha = gate_b.to_vec();
    let mut experts = vec![0.0; k];
    for mi in 0..m {
        for ki in 0..k {
            let idx = k * mi + ki;
            alpha[ki] += gate_w[mi * k + ki] * z_aux[idx];
            experts[ki] += w[idx] * z[idx];
        }
    }
    let gates = softmax(&alpha);
    let logit = b + dot(&gates, &experts);
    Ok(MoeTerms { gates, experts, logit })
}

pub fn merge_moe(
    z: &[f64],
    z_aux: &[f64],
    w: &[f64],
    b: f64,
    gate_w: &[f64],
    gate_b: &[f64],
) -> Result<f64> {
    Ok(sigmoid(moe_terms(z, z_aux, w, b, gate_w, gate_b)?.logit))
}
