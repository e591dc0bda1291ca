//! Zadoff-Chu primary synchronization signal and its correlator.
//!
//! A length-63 root-25 sequence with the middle element punctured is placed
//! on the 62 bins around DC. The receiver slides the unit-energy
//! time-domain template over the received buffer and reports the lag with
//! the largest normalized correlation
//! `|Σ r[τ+i]·t*[i]| / (‖t‖·‖r[τ..τ+L]‖)`, which lies in `[0, 1]`.

use std::f64::consts::PI;

use num_complex::Complex64;
use rustfft::FftPlanner;

use crate::config::SystemConfig;
use crate::error::{Error, Result};
use crate::numerics::{DftDirection, UnitaryDft};

pub const ZC_LENGTH: usize = 63;
pub const ZC_ROOT: usize = 25;
/// Normalized-metric level above which a correlation peak counts as a
/// detection.
pub const DETECTION_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub struct PssSequence {
    /// The 62 transmitted frequency-domain values, lowest bin first.
    pub freq: Vec<Complex64>,
    /// Spectrum on all `N_FFT` bins (DC and unused bins zero).
    pub bins: Vec<Complex64>,
    /// Time-domain symbol body with unit energy.
    pub template: Vec<Complex64>,
}

fn zadoff_chu(root: usize, len: usize) -> Vec<Complex64> {
    (0..len)
        .map(|n| {
            let n = n as f64;
            Complex64::from_polar(1.0, -PI * root as f64 * n * (n + 1.0) / len as f64)
        })
        .collect()
}

pub fn generate_pss(cfg: &SystemConfig) -> Result<PssSequence> {
    let zc = zadoff_chu(ZC_ROOT, ZC_LENGTH);
    let centre = ZC_LENGTH / 2;
    let freq: Vec<Complex64> = zc
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != centre)
        .map(|(_, v)| *v)
        .collect();
    let half = freq.len() / 2;
    if half + 1 > cfg.fft_size / 2 {
        return Err(Error::InvalidConfig("FFT too small for the PSS".into()));
    }
    let n = cfg.fft_size;
    let mut bins = vec![Complex64::new(0.0, 0.0); n];
    for (i, v) in freq.iter().enumerate() {
        let bin = if i < half { i as i64 - half as i64 } else { i as i64 - half as i64 + 1 };
        bins[bin.rem_euclid(n as i64) as usize] = *v;
    }
    let mut template = bins.clone();
    UnitaryDft::new(n)?.process(&mut template, DftDirection::Inverse);
    let energy = template.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt();
    template.iter_mut().for_each(|v| *v /= energy);
    Ok(PssSequence { freq, bins, template })
}

/// Normalized cross-correlation at every lag in `0..window` (clipped to the
/// lags where the template fits inside `rx`).
pub fn correlate(rx: &[Complex64], template: &[Complex64], window: usize) -> Result<Vec<f64>> {
    let l = template.len();
    if l == 0 || rx.len() < l {
        return Err(Error::LengthMismatch {
            expected: l,
            actual: rx.len(),
        });
    }
    let lags = window.min(rx.len() - l + 1);
    let used = lags + l - 1;
    let size = (used + l).next_power_of_two();
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(size);
    let inv = planner.plan_fft_inverse(size);

    let mut a = vec![Complex64::new(0.0, 0.0); size];
    a[..used].copy_from_slice(&rx[..used]);
    let mut b = vec![Complex64::new(0.0, 0.0); size];
    b[..l].copy_from_slice(template);
    fwd.process(&mut a);
    fwd.process(&mut b);
    for (x, y) in a.iter_mut().zip(&b) {
        *x *= y.conj();
    }
    inv.process(&mut a);

    let t_norm = template.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt();
    let mut prefix = Vec::with_capacity(used + 1);
    prefix.push(0.0);
    let mut acc = 0.0;
    for v in &rx[..used] {
        acc += v.norm_sqr();
        prefix.push(acc);
    }
    let scale = 1.0 / size as f64;
    Ok((0..lags)
        .map(|tau| {
            let energy = (prefix[tau + l] - prefix[tau]).max(0.0);
            if energy <= 0.0 {
                0.0
            } else {
                ((a[tau] * scale).norm() / (t_norm * energy.sqrt())).min(1.0)
            }
        })
        .collect())
}

/// Returns `(peak_index, peak_metric)` over the first `search_window` lags.
pub fn detect_pss(rx: &[Complex64], template: &[Complex64], search_window: usize) -> Result<(usize, f64)> {
    let metric = correlate(rx, template, search_window)?;
    let (idx, &peak) = metric
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .ok_or(Error::LengthMismatch {
            expected: template.len(),
            actual: rx.len(),
        })?;
    Ok((idx, peak))
}
