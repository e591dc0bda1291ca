//! Gray-coded square constellations with unit average energy.
//!
//! Bits are `u8` values 0/1. For square QAM the first half of each symbol's
//! bits select the in-phase level and the second half the quadrature level;
//! within a dimension a zero bit pattern maps to the most positive level,
//! so QPSK `00` is `(1 + j)/√2`.

use num_complex::Complex64;

use crate::config::Modulation;
use crate::error::{Error, Result};

fn gray_to_binary(mut g: usize) -> usize {
    let mut b = g;
    while g > 0 {
        g >>= 1;
        b ^= g;
    }
    b
}

fn binary_to_gray(b: usize) -> usize {
    b ^ (b >> 1)
}

/// Normalization so that the mean symbol energy is one.
fn scale(m: Modulation) -> f64 {
    match m {
        Modulation::Bpsk => 1.0,
        Modulation::Qpsk => std::f64::consts::FRAC_1_SQRT_2,
        _ => 1.0 / (2.0 * (m.order() as f64 - 1.0) / 3.0).sqrt(),
    }
}

fn bits_to_index(bits: &[u8]) -> usize {
    bits.iter().fold(0usize, |acc, &b| (acc << 1) | usize::from(b & 1))
}

fn pam_level(bits: &[u8]) -> f64 {
    let levels = 1usize << bits.len();
    let idx = gray_to_binary(bits_to_index(bits));
    (levels - 1) as f64 - 2.0 * idx as f64
}

fn pam_decide(x: f64, nbits: usize, out: &mut Vec<u8>) {
    let levels = (1usize << nbits) as f64;
    let idx = (((levels - 1.0) - x) / 2.0).round().clamp(0.0, levels - 1.0) as usize;
    let g = binary_to_gray(idx);
    for i in (0..nbits).rev() {
        out.push(((g >> i) & 1) as u8);
    }
}

/// Maps one symbol's worth of bits.
pub fn map_symbol(bits: &[u8], m: Modulation) -> Complex64 {
    let s = scale(m);
    match m {
        Modulation::Bpsk => Complex64::new(if bits[0] & 1 == 0 { 1.0 } else { -1.0 }, 0.0),
        _ => {
            let half = m.bits_per_symbol() / 2;
            Complex64::new(pam_level(&bits[..half]) * s, pam_level(&bits[half..]) * s)
        }
    }
}

/// Hard nearest-point decision for one symbol, appending its bits to `out`.
pub fn demap_symbol(sym: Complex64, m: Modulation, out: &mut Vec<u8>) {
    match m {
        Modulation::Bpsk => out.push(u8::from(sym.re < 0.0)),
        _ => {
            let half = m.bits_per_symbol() / 2;
            let s = scale(m);
            pam_decide(sym.re / s, half, out);
            pam_decide(sym.im / s, half, out);
        }
    }
}

pub fn qam_map(bits: &[u8], m: Modulation) -> Result<Vec<Complex64>> {
    let per = m.bits_per_symbol();
    if bits.len() % per != 0 {
        return Err(Error::BitCount {
            bits: bits.len(),
            per_symbol: per,
        });
    }
    Ok(bits.chunks_exact(per).map(|c| map_symbol(c, m)).collect())
}

pub fn qam_demap(symbols: &[Complex64], m: Modulation) -> Vec<u8> {
    let mut out = Vec::with_capacity(symbols.len() * m.bits_per_symbol());
    for &s in symbols {
        demap_symbol(s, m, &mut out);
    }
    out
}

/// Every constellation point, indexed by its bit label (MSB first).
pub fn constellation(m: Modulation) -> Vec<Complex64> {
    let per = m.bits_per_symbol();
    (0..m.order())
        .map(|label| {
            let bits: Vec<u8> = (0..per).rev().map(|i| ((label >> i) & 1) as u8).collect();
            map_symbol(&bits, m)
        })
        .collect()
}
