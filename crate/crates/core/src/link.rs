//! Effective SNR of a multi-antenna OFDM channel under QPSK.
//!
//! The per-subcarrier bit error rate after maximum-ratio combining is
//! `Q(sqrt(sum_r |H_rk|^2))`; the effective SNR is the flat-channel SNR that
//! gives the same mean BER. CSI is assumed normalized to unit noise variance.

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};
use statrs::function::erf::{erfc, erfc_inv};
use std::f64::consts::{PI, SQRT_2};

use crate::channel::CsiMatrix;
use crate::error::{Error, Result};

/// Upper tail of the standard normal distribution.
pub fn q_function(x: f64) -> f64 {
    0.5 * erfc(x / SQRT_2)
}

fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

/// Inverse of [`q_function`] on `(0, 1)`.
///
/// Probabilities above one half are mapped through `1 - p` (exact there) so
/// the search always runs in the upper tail, where `Q` keeps full relative
/// precision. An `erfc_inv` guess is refined by safeguarded Newton steps on
/// `ln Q(x) - ln p` inside a shrinking bracket.
pub fn q_inverse(p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::invalid(format!("Q inverse needs p in (0, 1), got {p}")));
    }
    if p > 0.5 {
        return Ok(-upper_tail_inverse(1.0 - p));
    }
    Ok(upper_tail_inverse(p))
}

/// Solves `Q(x) = p` for `p <= 0.5`, so `x >= 0`.
fn upper_tail_inverse(p: f64) -> f64 {
    if p == 0.5 {
        return 0.0;
    }
    let target = p.ln();
    let (mut lo, mut hi) = (0.0f64, 40.0f64);
    let mut x = (SQRT_2 * erfc_inv(2.0 * p)).clamp(lo, hi);
    for _ in 0..200 {
        let q = q_function(x);
        let g = q.ln() - target;
        if g > 0.0 {
            lo = x;
        } else {
            hi = x;
        }
        if g == 0.0 {
            break;
        }
        let slope = -normal_pdf(x) / q;
        let mut next = x - g / slope;
        if !(next > lo && next < hi) || !next.is_finite() {
            next = 0.5 * (lo + hi);
        }
        if (next - x).abs() <= 1e-16 * x.abs().max(1.0) {
            x = next;
            break;
        }
        x = next;
        if hi - lo <= 1e-16 * hi.max(1.0) {
            break;
        }
    }
    x
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectiveSnr {
    pub per_subcarrier_ber: Vec<f64>,
    pub mean_ber: f64,
    /// Linear SNR; `+inf` when the mean BER underflows to zero.
    pub gamma_eff: f64,
    /// Set when `gamma_eff` is the `+inf` sentinel.
    pub saturated: bool,
}

impl EffectiveSnr {
    pub fn gamma_eff_db(&self) -> f64 {
        10.0 * self.gamma_eff.log10()
    }
}

/// Effective SNR over every antenna of `csi`.
pub fn effective_snr(csi: &CsiMatrix) -> Result<EffectiveSnr> {
    effective_snr_rows(csi.values.view())
}

/// Effective SNR over the rows (antennas) of `values`, e.g. one sub-array.
pub fn effective_snr_rows(values: ArrayView2<num_complex::Complex64>) -> Result<EffectiveSnr> {
    if values.is_empty() {
        return Err(Error::invalid("empty CSI"));
    }
    let per_subcarrier_ber: Vec<f64> = values
        .columns()
        .into_iter()
        .map(|col| q_function(col.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()))
        .collect();
    if per_subcarrier_ber.iter().all(|&b| b == 0.5) && values.iter().all(|z| z.norm_sqr() == 0.0) {
        return Err(Error::invalid("all-zero CSI has no SNR"));
    }
    let mean_ber = per_subcarrier_ber.iter().sum::<f64>() / per_subcarrier_ber.len() as f64;
    let (gamma_eff, saturated) = if mean_ber <= 0.0 {
        (f64::INFINITY, true)
    } else if mean_ber >= 0.5 {
        (0.0, false)
    } else {
        (q_inverse(mean_ber)?.powi(2), false)
    };
    Ok(EffectiveSnr {
        per_subcarrier_ber,
        mean_ber,
        gamma_eff,
        saturated,
    })
}
