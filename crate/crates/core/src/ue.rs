//! Terminal baseband: effective-channel estimation from precoded downlink
//! pilots, maximal-ratio combining and bit-error accounting.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::config::{pilot_value, Modulation, SystemConfig};
use crate::error::{Error, Result};
use crate::numerics::CMatrix;
use crate::phy::qam::demap_symbol;

/// Estimates below this magnitude cannot be combined and are erased.
pub const ERASURE_THRESHOLD: f64 = 1e-12;

/// Scalar effective channel `h̃[k][n]` per user and subcarrier.
#[derive(Debug, Clone, PartialEq)]
pub struct EffectiveChannelEstimate {
    values: Vec<Vec<Complex64>>,
}

impl EffectiveChannelEstimate {
    pub fn from_values(values: Vec<Vec<Complex64>>) -> Self {
        Self { values }
    }

    pub fn at(&self, user: usize, n: usize) -> Complex64 {
        self.values[user][n]
    }

    pub fn user(&self, user: usize) -> &[Complex64] {
        &self.values[user]
    }
}

/// `h̃ = rx/p` on each user's own pilot subcarriers, held across the
/// sub-band. `rx_pilot[k]` is everything user `k` received in the downlink
/// pilot symbol.
pub fn dl_effective_channel_estimate(
    rx_pilot: &[Vec<Complex64>],
    cfg: &SystemConfig,
) -> Result<EffectiveChannelEstimate> {
    let k = cfg.num_users;
    if rx_pilot.len() != k {
        return Err(Error::LengthMismatch {
            expected: k,
            actual: rx_pilot.len(),
        });
    }
    let values = rx_pilot
        .iter()
        .enumerate()
        .map(|(user, rx)| {
            if rx.len() != cfg.used_subcarriers {
                return Err(Error::LengthMismatch {
                    expected: cfg.used_subcarriers,
                    actual: rx.len(),
                });
            }
            Ok((0..cfg.used_subcarriers)
                .map(|n| {
                    let p = n / k * k + user;
                    rx[p] / pilot_value(p)
                })
                .collect())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EffectiveChannelEstimate { values })
}

/// Combiner output for one user over a run of subcarriers.
#[derive(Debug, Clone, PartialEq)]
pub struct MrcOutput {
    /// `x̂ = h̃* · rx`.
    pub combined: Vec<Complex64>,
    /// `x̂ / |h̃|²`, the value handed to the slicer.
    pub normalized: Vec<Complex64>,
    pub erased: Vec<bool>,
}

pub fn mrc_combine(rx: &[Complex64], h: &[Complex64]) -> Result<MrcOutput> {
    if rx.len() != h.len() {
        return Err(Error::LengthMismatch {
            expected: h.len(),
            actual: rx.len(),
        });
    }
    let mut out = MrcOutput {
        combined: Vec::with_capacity(rx.len()),
        normalized: Vec::with_capacity(rx.len()),
        erased: Vec::with_capacity(rx.len()),
    };
    for (&y, &g) in rx.iter().zip(h) {
        let x = g.conj() * y;
        let erased = g.norm() < ERASURE_THRESHOLD;
        out.combined.push(x);
        out.normalized.push(if erased { Complex64::new(0.0, 0.0) } else { x / g.norm_sqr() });
        out.erased.push(erased);
    }
    Ok(out)
}

/// Hard bits with a per-bit erasure mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Decisions {
    pub bits: Vec<u8>,
    pub erased: Vec<bool>,
}

/// MRC followed by hard decisions.
pub fn mrc_detect(rx: &[Complex64], h: &[Complex64], m: Modulation) -> Result<Decisions> {
    let out = mrc_combine(rx, h)?;
    let per = m.bits_per_symbol();
    let mut bits = Vec::with_capacity(rx.len() * per);
    let mut erased = Vec::with_capacity(rx.len() * per);
    for (x, e) in out.normalized.iter().zip(&out.erased) {
        demap_symbol(*x, m, &mut bits);
        erased.extend(std::iter::repeat(*e).take(per));
    }
    Ok(Decisions { bits, erased })
}

/// Terms of the combiner output for user `k` on one subcarrier.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MrcTerms {
    pub desired: Complex64,
    pub leakage: Complex64,
    pub noise: Complex64,
}

impl MrcTerms {
    pub fn total(&self) -> Complex64 {
        self.desired + self.leakage + self.noise
    }
}

/// Splits `h̃* · rx` into the wanted stream, the other users' streams and
/// noise, given the user's downlink channel row `g` (length `M`, including
/// any transmit-side calibration), the precoder and the transmitted vector.
pub fn mrc_decompose(
    h_tilde: Complex64,
    g: &[Complex64],
    f: &CMatrix,
    x: &[Complex64],
    user: usize,
    noise: Complex64,
) -> MrcTerms {
    let gain = |j: usize| -> Complex64 { g.iter().enumerate().map(|(m, gm)| gm * f[(m, j)]).sum() };
    let c = h_tilde.conj();
    let desired = c * gain(user) * x[user];
    let leakage = (0..f.ncols())
        .filter(|&j| j != user)
        .map(|j| c * gain(j) * x[j])
        .sum();
    MrcTerms {
        desired,
        leakage,
        noise: c * noise,
    }
}

/// Bit-error tally. Erased bits count as half an error.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BerCount {
    pub errors: u64,
    pub erased: u64,
    pub total: u64,
}

impl BerCount {
    pub fn ber(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            (self.errors as f64 + 0.5 * self.erased as f64) / self.total as f64
        }
    }

    pub fn merge(&mut self, other: &BerCount) {
        self.errors += other.errors;
        self.erased += other.erased;
        self.total += other.total;
    }
}

pub fn ber_count(tx: &[u8], rx: &[u8]) -> Result<BerCount> {
    if tx.len() != rx.len() {
        return Err(Error::LengthMismatch {
            expected: tx.len(),
            actual: rx.len(),
        });
    }
    let errors = tx.iter().zip(rx).filter(|(a, b)| (*a & 1) != (*b & 1)).count() as u64;
    Ok(BerCount {
        errors,
        erased: 0,
        total: tx.len() as u64,
    })
}

pub fn ber_count_decisions(tx: &[u8], d: &Decisions) -> Result<BerCount> {
    if tx.len() != d.bits.len() || d.erased.len() != d.bits.len() {
        return Err(Error::LengthMismatch {
            expected: tx.len(),
            actual: d.bits.len(),
        });
    }
    let mut c = BerCount {
        total: tx.len() as u64,
        ..Default::default()
    };
    for ((a, b), e) in tx.iter().zip(&d.bits).zip(&d.erased) {
        if *e {
            c.erased += 1;
        } else if (a & 1) != (b & 1) {
            c.errors += 1;
        }
    }
    Ok(c)
}
