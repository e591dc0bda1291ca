//! CP-OFDM modulation and demodulation with a unitary transform.

use num_complex::Complex64;

use crate::config::{map_to_fft_bins, unmap_fft_bins, SystemConfig};
use crate::error::{Error, Result};
use crate::numerics::{DftDirection, UnitaryDft};

/// Cyclic-prefix length of each symbol in a slot.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CpLayout {
    pub cp_lengths: Vec<usize>,
}

impl CpLayout {
    pub fn normal(cfg: &SystemConfig) -> Self {
        Self {
            cp_lengths: cfg.cp_lengths(),
        }
    }

    pub fn cp(&self, symbol: usize) -> usize {
        self.cp_lengths[symbol % self.cp_lengths.len()]
    }

    /// Samples occupied by `symbol` including its prefix.
    pub fn symbol_len(&self, symbol: usize, fft_size: usize) -> usize {
        self.cp(symbol) + fft_size
    }

    /// Sample offset of `symbol` within a slot.
    pub fn symbol_start(&self, symbol: usize, fft_size: usize) -> usize {
        (0..symbol).map(|s| self.symbol_len(s, fft_size)).sum()
    }

    pub fn slot_len(&self, fft_size: usize) -> usize {
        self.symbol_start(self.cp_lengths.len(), fft_size)
    }
}

/// Turns one grid column into `cp + N_FFT` time samples.
pub fn ofdm_modulate(
    column: &[Complex64],
    layout: &CpLayout,
    symbol: usize,
    cfg: &SystemConfig,
) -> Result<Vec<Complex64>> {
    let mut body = map_to_fft_bins(column, cfg)?;
    UnitaryDft::new(cfg.fft_size)?.process(&mut body, DftDirection::Inverse);
    let cp = layout.cp(symbol);
    let mut out = Vec::with_capacity(cp + body.len());
    out.extend_from_slice(&body[body.len() - cp..]);
    out.extend_from_slice(&body);
    Ok(out)
}

/// Strips the prefix from `samples` (starting at the symbol's first
/// sample), transforms, and returns the used subcarriers.
pub fn ofdm_demodulate(
    samples: &[Complex64],
    layout: &CpLayout,
    symbol: usize,
    cfg: &SystemConfig,
) -> Result<Vec<Complex64>> {
    let cp = layout.cp(symbol);
    let need = cp + cfg.fft_size;
    if samples.len() < need {
        return Err(Error::LengthMismatch {
            expected: need,
            actual: samples.len(),
        });
    }
    let mut body = samples[cp..need].to_vec();
    UnitaryDft::new(cfg.fft_size)?.process(&mut body, DftDirection::Forward);
    unmap_fft_bins(&body, cfg)
}

/// Modulates consecutive symbols of a slot into one sample stream.
pub fn modulate_symbols<'a>(
    columns: impl IntoIterator<Item = (usize, &'a [Complex64])>,
    layout: &CpLayout,
    cfg: &SystemConfig,
) -> Result<Vec<Complex64>> {
    let mut out = Vec::with_capacity(layout.slot_len(cfg.fft_size));
    for (symbol, col) in columns {
        out.extend(ofdm_modulate(col, layout, symbol, cfg)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::random_cvec;

    #[test]
    fn zero_in_zero_out() {
        let cfg = SystemConfig::default();
        let layout = CpLayout::normal(&cfg);
        let out = ofdm_modulate(&vec![Complex64::new(0.0, 0.0); 1200], &layout, 0, &cfg).unwrap();
        assert_eq!(out.len(), 2048 + 160);
        assert!(out.iter().all(|v| v.norm() == 0.0));
    }

    #[test]
    fn cyclic_prefix_copies_tail() {
        let cfg = SystemConfig::default();
        let layout = CpLayout::normal(&cfg);
        let x = random_cvec(&mut crate::seed::rng(1), 1200);
        for symbol in [0, 3] {
            let out = ofdm_modulate(&x, &layout, symbol, &cfg).unwrap();
            let cp = layout.cp(symbol);
            assert_eq!(out.len(), 2048 + cp);
            assert_eq!(&out[..cp], &out[2048..2048 + cp]);
        }
    }

    #[test]
    fn round_trip() {
        let cfg = SystemConfig::default();
        let layout = CpLayout::normal(&cfg);
        let x = random_cvec(&mut crate::seed::rng(2), 1200);
        let y = ofdm_demodulate(&ofdm_modulate(&x, &layout, 1, &cfg).unwrap(), &layout, 1, &cfg).unwrap();
        for (a, b) in x.iter().zip(&y) {
            assert!((a - b).norm() <= 1e-12);
        }
        assert!(ofdm_demodulate(&x, &layout, 1, &cfg).is_err());
    }

    #[test]
    fn delayed_symbol_shows_phase_ramp() {
        let cfg = SystemConfig::default();
        let layout = CpLayout::normal(&cfg);
        let x = vec![Complex64::new(1.0, 0.0); 1200];
        let tx = ofdm_modulate(&x, &layout, 2, &cfg).unwrap();
        let d = 9;
        let mut rx = vec![Complex64::new(0.0, 0.0); d];
        rx.extend_from_slice(&tx[..tx.len() - d]);
        let y = ofdm_demodulate(&rx, &layout, 2, &cfg).unwrap();
        for (n, v) in y.iter().enumerate() {
            let bin = crate::config::subcarrier_bin(n, &cfg) as f64;
            let expect = Complex64::from_polar(1.0, -2.0 * std::f64::consts::PI * bin * d as f64 / 2048.0);
            assert!((v - expect).norm() < 1e-12);
        }
    }

    #[test]
    fn slot_geometry() {
        let cfg = SystemConfig::default();
        let layout = CpLayout::normal(&cfg);
        assert_eq!(layout.symbol_start(1, 2048), 2208);
        assert_eq!(layout.slot_len(2048), 15360);
        // 15360 samples per 0.5 ms slot at 30.72 MS/s.
        assert_eq!(layout.slot_len(2048) as f64, cfg.sample_rate_hz * 0.5e-3);
    }
}
