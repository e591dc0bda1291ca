//! Base-station baseband: uplink estimation and detection, downlink
//! precoding, and relative reciprocity calibration.
//!
//! Channel estimates are stored once per block of subcarriers. Zero-hold LS
//! estimates use one block per pilot sub-band (`K` subcarriers); anything
//! that varies per subcarrier uses blocks of one. Everything derived from an
//! estimate (weights, precoders) inherits its block structure.
//!
//! Calibration coefficients follow `d[m] ∝ bs_rx[m] / bs_tx[m]`, normalized
//! so that `d[ref] = 1`. The downlink channel is then predicted from the
//! uplink estimate as `Ĥ_cal = Ĥ · diag(d)*`, up to per-user factors that
//! the terminals absorb.

use std::fmt::Write as _;
use std::path::Path;

use num_complex::Complex64;

use crate::channel::{sound_bs_pair, CalChannel, MismatchProfile, NoiseSpec};
use crate::config::{pilot_value, SystemConfig};
use crate::error::{Error, Result};
use crate::numerics::{lmmse_weights, CMatrix, LmmseMode};
use crate::seed::SimRng;

const ZERO: Complex64 = Complex64::new(0.0, 0.0);
const ONE: Complex64 = Complex64::new(1.0, 0.0);
const PILOT_MODULUS_TOL: f64 = 1e-9;

/// `M×K` channel estimates over the used band, one matrix per block.
#[derive(Debug, Clone, PartialEq)]
pub struct UplinkChannelEstimate {
    blocks: Vec<CMatrix>,
    stride: usize,
}

impl UplinkChannelEstimate {
    /// Zero-hold estimate: `blocks[i]` covers subcarriers `i·K .. i·K+K`.
    pub fn from_subbands(blocks: Vec<CMatrix>) -> Self {
        let stride = blocks.first().map_or(1, |b| b.ncols().max(1));
        Self { blocks, stride }
    }

    /// One matrix per subcarrier.
    pub fn from_subcarriers(blocks: Vec<CMatrix>) -> Self {
        Self { blocks, stride: 1 }
    }

    pub fn at(&self, n: usize) -> &CMatrix {
        &self.blocks[n / self.stride]
    }

    pub fn blocks(&self) -> &[CMatrix] {
        &self.blocks
    }

    /// Subcarriers sharing each stored matrix.
    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn is_zero_hold(&self) -> bool {
        self.stride > 1
    }

    pub fn num_subcarriers(&self) -> usize {
        self.blocks.len() * self.stride
    }

    pub fn num_bs_antennas(&self) -> usize {
        self.blocks.first().map_or(0, CMatrix::nrows)
    }

    pub fn num_users(&self) -> usize {
        self.blocks.first().map_or(0, CMatrix::ncols)
    }

    fn map_blocks(&self, f: impl Fn(usize, &CMatrix) -> Result<CMatrix>) -> Result<Vec<CMatrix>> {
        self.blocks.iter().enumerate().map(|(i, b)| f(i, b)).collect()
    }
}

/// LS estimate for one sub-band: `Ĥ = R · P*` where column `k` of `r` was
/// received on user `k`'s pilot subcarrier carrying `pilots[k]`.
pub fn ls_uplink_estimate(r: &CMatrix, pilots: &[Complex64]) -> Result<CMatrix> {
    if pilots.len() != r.ncols() {
        return Err(Error::LengthMismatch {
            expected: r.ncols(),
            actual: pilots.len(),
        });
    }
    for (index, p) in pilots.iter().enumerate() {
        let modulus = p.norm();
        if (modulus - 1.0).abs() > PILOT_MODULUS_TOL {
            return Err(Error::NonUnitPilot { index, modulus });
        }
    }
    let mut h = r.clone();
    for (k, p) in pilots.iter().enumerate() {
        h.column_mut(k).iter_mut().for_each(|v| *v *= p.conj());
    }
    Ok(h)
}

/// Zero-hold LS estimate over the whole band from the received uplink pilot
/// symbol (`M × N_sc`, antenna rows).
pub fn estimate_uplink(rx_pilot: &CMatrix, cfg: &SystemConfig) -> Result<UplinkChannelEstimate> {
    let (m, k) = (cfg.num_bs_antennas, cfg.num_users);
    if rx_pilot.shape() != (m, cfg.used_subcarriers) {
        return Err(Error::LengthMismatch {
            expected: m * cfg.used_subcarriers,
            actual: rx_pilot.len(),
        });
    }
    let blocks = (0..cfg.num_subbands())
        .map(|i| {
            let r = rx_pilot.columns(i * k, k).into_owned();
            let pilots: Vec<Complex64> = (0..k).map(|u| pilot_value(i * k + u)).collect();
            ls_uplink_estimate(&r, &pilots)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(UplinkChannelEstimate::from_subbands(blocks))
}

/// LMMSE weights for every block, with the per-user gains `diag(W Ĥ)`.
#[derive(Debug, Clone)]
pub struct LmmseDetector {
    weights: Vec<CMatrix>,
    gains: Vec<Vec<Complex64>>,
    stride: usize,
}

impl LmmseDetector {
    pub fn new(est: &UplinkChannelEstimate, sigma: f64) -> Result<Self> {
        let weights = est.map_blocks(|_, h| lmmse_weights(h, sigma, LmmseMode::Qr))?;
        let gains = weights
            .iter()
            .zip(est.blocks())
            .map(|(w, h)| (w * h).diagonal().iter().copied().collect())
            .collect();
        Ok(Self {
            weights,
            gains,
            stride: est.stride(),
        })
    }

    pub fn weights(&self, n: usize) -> &CMatrix {
        &self.weights[n / self.stride]
    }

    /// `ŝ = W y` for an `M`-vector received on subcarrier `n`.
    pub fn detect(&self, y: &[Complex64], n: usize) -> Vec<Complex64> {
        let w = self.weights(n);
        (0..w.nrows())
            .map(|k| (0..w.ncols()).map(|m| w[(k, m)] * y[m]).sum())
            .collect()
    }

    /// [`detect`](Self::detect) followed by division by the per-user gain,
    /// which removes the LMMSE shrinkage before amplitude decisions.
    pub fn detect_unbiased(&self, y: &[Complex64], n: usize) -> Vec<Complex64> {
        let g = &self.gains[n / self.stride];
        self.detect(y, n)
            .into_iter()
            .zip(g)
            .map(|(s, g)| if g.norm() > 0.0 { s / g } else { s })
            .collect()
    }
}

/// One-shot LMMSE detection on subcarrier `n`.
pub fn lmmse_detect(y: &[Complex64], est: &UplinkChannelEstimate, n: usize, sigma: f64) -> Result<Vec<Complex64>> {
    let h = est.at(n);
    if y.len() != h.nrows() {
        return Err(Error::LengthMismatch {
            expected: h.nrows(),
            actual: y.len(),
        });
    }
    let w = lmmse_weights(h, sigma, LmmseMode::Qr)?;
    let y = CMatrix::from_column_slice(y.len(), 1, y);
    Ok((w * y).iter().copied().collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PrecoderScheme {
    Mrt,
    Lmmse,
}

impl std::fmt::Display for PrecoderScheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PrecoderScheme::Mrt => "MRT",
            PrecoderScheme::Lmmse => "LMMSE",
        })
    }
}

/// `M×K` downlink precoders, power-scaled so that `E‖F x‖² = ρ` for unit
/// power independent symbols.
#[derive(Debug, Clone)]
pub struct Precoder {
    pub scheme: PrecoderScheme,
    pub rho: f64,
    blocks: Vec<CMatrix>,
    stride: usize,
}

impl Precoder {
    pub fn at(&self, n: usize) -> &CMatrix {
        &self.blocks[n / self.stride]
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    /// Per-antenna transmit values `F_n x` on subcarrier `n`.
    pub fn apply(&self, x: &[Complex64], n: usize) -> Vec<Complex64> {
        let f = self.at(n);
        (0..f.nrows())
            .map(|m| (0..f.ncols()).map(|k| f[(m, k)] * x[k]).sum())
            .collect()
    }
}

fn normalized_precoder(
    scheme: PrecoderScheme,
    rho: f64,
    raw: Vec<CMatrix>,
    stride: usize,
) -> Result<Precoder> {
    let mut blocks = raw;
    for (b, f) in blocks.iter_mut().enumerate() {
        let scale = (rho / f.ncols() as f64).sqrt();
        for (k, mut col) in f.column_iter_mut().enumerate() {
            let norm = col.norm();
            if norm <= f64::MIN_POSITIVE || !norm.is_finite() {
                return Err(Error::DegenerateColumn {
                    user: k,
                    subcarrier: b * stride,
                });
            }
            col /= Complex64::new(norm / scale, 0.0);
        }
    }
    Ok(Precoder {
        scheme,
        rho,
        blocks,
        stride,
    })
}

/// `F = conj(Ĥ)` with unit-norm columns, scaled to total power `ρ`.
///
/// The downlink channel is the transpose of the uplink one, so the matched
/// filter for user `k` is the conjugate of column `k` (not its Hermitian).
pub fn mrt_precoder(est: &UplinkChannelEstimate, rho: f64) -> Result<Precoder> {
    let raw = est.map_blocks(|_, h| Ok(h.map(|v| v.conj())))?;
    normalized_precoder(PrecoderScheme::Mrt, rho, raw, est.stride())
}

/// `F = Wᵀ` with unit-norm columns, scaled to total power `ρ`, so that
/// `Ĥᵀ F ∝ (W Ĥ)ᵀ`, which tends to the identity as σ → 0.
pub fn lmmse_precoder(est: &UplinkChannelEstimate, sigma: f64, rho: f64) -> Result<Precoder> {
    let raw = est.map_blocks(|_, h| Ok(lmmse_weights(h, sigma, LmmseMode::Qr)?.transpose()))?;
    normalized_precoder(PrecoderScheme::Lmmse, rho, raw, est.stride())
}

pub fn build_precoder(
    scheme: PrecoderScheme,
    est: &UplinkChannelEstimate,
    sigma: f64,
    rho: f64,
) -> Result<Precoder> {
    match scheme {
        PrecoderScheme::Mrt => mrt_precoder(est, rho),
        PrecoderScheme::Lmmse => lmmse_precoder(est, sigma, rho),
    }
}

/// Per-antenna reciprocity coefficients produced by self-sounding.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationTable {
    /// `coefficients[m][n]`.
    coefficients: Vec<Vec<Complex64>>,
    pub ref_antenna: usize,
    /// Phase coherence of each antenna's measurements, in `[0, 1]`.
    pub quality: Vec<f64>,
    pub valid: bool,
    /// Why the table was rejected, if it was.
    pub reason: Option<String>,
}

impl CalibrationTable {
    /// All-ones table (no correction).
    pub fn identity(num_antennas: usize, num_subcarriers: usize) -> Self {
        Self {
            coefficients: vec![vec![ONE; num_subcarriers]; num_antennas],
            ref_antenna: 0,
            quality: vec![1.0; num_antennas],
            valid: true,
            reason: None,
        }
    }

    /// Builds a table from explicit per-antenna, per-subcarrier values.
    pub fn from_coefficients(coefficients: Vec<Vec<Complex64>>, ref_antenna: usize) -> Self {
        let m = coefficients.len();
        Self {
            coefficients,
            ref_antenna,
            quality: vec![1.0; m],
            valid: true,
            reason: None,
        }
    }

    pub fn num_antennas(&self) -> usize {
        self.coefficients.len()
    }

    pub fn num_subcarriers(&self) -> usize {
        self.coefficients.first().map_or(0, Vec::len)
    }

    pub fn at(&self, m: usize, n: usize) -> Complex64 {
        self.coefficients[m][n]
    }

    /// True when every antenna uses one coefficient across the band.
    pub fn is_flat(&self) -> bool {
        self.coefficients
            .iter()
            .all(|row| row.iter().all(|v| *v == row[0]))
    }

    pub fn mark_invalid(&mut self, reason: impl Into<String>) {
        self.valid = false;
        self.reason = Some(reason.into());
    }

    fn require_valid(&self) -> Result<()> {
        if self.valid {
            Ok(())
        } else {
            Err(Error::InvalidCalibration(
                self.reason.clone().unwrap_or_else(|| "flagged invalid".into()),
            ))
        }
    }

    /// Multiplies the per-antenna transmit values on subcarrier `n` by `d`.
    pub fn apply_postcal(&self, signal: &mut [Complex64], n: usize) -> Result<()> {
        self.require_valid()?;
        if signal.len() != self.num_antennas() {
            return Err(Error::LengthMismatch {
                expected: self.num_antennas(),
                actual: signal.len(),
            });
        }
        for (m, v) in signal.iter_mut().enumerate() {
            *v *= self.coefficients[m][n];
        }
        Ok(())
    }

    /// Text export, one `antenna subcarrier real imag quality` line per entry.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# antenna subcarrier real imag quality");
        let _ = writeln!(s, "# ref_antenna {} valid {}", self.ref_antenna, self.valid);
        if let Some(r) = &self.reason {
            let _ = writeln!(s, "# reason {r}");
        }
        for (m, row) in self.coefficients.iter().enumerate() {
            for (n, d) in row.iter().enumerate() {
                let _ = writeln!(s, "{m} {n} {:.12e} {:.12e} {:.6}", d.re, d.im, self.quality[m]);
            }
        }
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    /// Largest deviation of `d[m]·bs_tx[m]/bs_rx[m]` from its value at the
    /// reference antenna, over all antennas and subcarriers.
    pub fn invariant_error(&self, mm: &MismatchProfile, cfg: &SystemConfig) -> f64 {
        let mut worst: f64 = 0.0;
        for n in 0..self.num_subcarriers() {
            let r = self.ref_antenna;
            let c = self.at(r, n) * mm.bs_tx_at(r, n, cfg) / mm.bs_rx_at(r, n, cfg);
            for m in 0..self.num_antennas() {
                let v = self.at(m, n) * mm.bs_tx_at(m, n, cfg) / mm.bs_rx_at(m, n, cfg);
                worst = worst.max((v - c).norm());
            }
        }
        worst
    }
}

/// What the array sees while it sounds itself.
#[derive(Debug, Clone)]
pub struct CalEnvironment<'a> {
    pub channel: &'a CalChannel,
    pub mismatch: &'a MismatchProfile,
    pub noise: NoiseSpec,
    /// Power of signals from terminals that failed to stay silent, per
    /// subcarrier at each antenna. Zero when the terminals are quiet.
    pub interference_power: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CalibrationOptions {
    /// Reference antenna; `None` picks the one nearest the array center.
    pub ref_antenna: Option<usize>,
    /// Tables with any antenna below this coherence are rejected.
    pub min_quality: f64,
    /// Interference is declared when the mean energy in the listen window
    /// exceeds this multiple of the noise variance.
    pub listen_threshold: f64,
}

impl Default for CalibrationOptions {
    fn default() -> Self {
        Self {
            ref_antenna: None,
            min_quality: 0.1,
            listen_threshold: 2.0,
        }
    }
}

fn interference_samples(power: f64, len: usize, rng: &mut SimRng) -> Option<Vec<Complex64>> {
    (power > 0.0).then(|| {
        let spec = NoiseSpec { sigma2: power };
        (0..len).map(|_| spec.sample(rng)).collect()
    })
}

/// Relative reciprocity calibration by self-sounding.
///
/// The reference antenna transmits once while every other antenna records,
/// then each other antenna transmits once while the reference records. Only
/// these reference pairs enter the estimate, so the remaining receptions of
/// a full sounding round are not simulated. For antenna `i`,
/// `d[i] = normalize(Σ_n b_{ref→i,n} · b*_{i→ref,n})`, a power-weighted
/// average of the forward/backward ratio in which the reciprocal coupling
/// cancels on every subcarrier.
///
/// Before sounding all antennas listen for one symbol; energy above the
/// threshold marks the table invalid, as does low measurement coherence.
pub fn run_reciprocity_calibration(
    env: &CalEnvironment<'_>,
    opts: &CalibrationOptions,
    cfg: &SystemConfig,
    rng: &mut SimRng,
) -> Result<CalibrationTable> {
    let m = cfg.num_bs_antennas;
    let n_sc = cfg.used_subcarriers;
    if m < 2 {
        return Err(Error::InvalidConfig("calibration needs at least two antennas".into()));
    }
    let r = opts.ref_antenna.unwrap_or_else(|| env.channel.central_antenna());
    if r >= m {
        return Err(Error::OutOfRange {
            what: "reference antenna",
            index: r,
            limit: m,
        });
    }

    let mut listened = 0.0;
    for _ in 0..m {
        let intf = interference_samples(env.interference_power, n_sc, rng);
        for n in 0..n_sc {
            let v = env.noise.sample(rng) + intf.as_ref().map_or(ZERO, |i| i[n]);
            listened += v.norm_sqr();
        }
    }
    let listened = listened / (m * n_sc) as f64;
    let interfered = listened > opts.listen_threshold * env.noise.sigma2;

    let reference: Vec<Complex64> = (0..n_sc).map(pilot_value).collect();
    let sound = |from: usize, to: usize, rng: &mut SimRng| {
        let intf = interference_samples(env.interference_power, n_sc, rng);
        sound_bs_pair(
            from,
            to,
            &reference,
            env.channel,
            env.mismatch,
            &env.noise,
            intf.as_deref(),
            cfg,
            rng,
        )
    };
    let mut forward = vec![Vec::new(); m];
    for (i, slot) in forward.iter_mut().enumerate() {
        if i != r {
            *slot = sound(r, i, rng)?;
        }
    }
    let mut backward = vec![Vec::new(); m];
    for (i, slot) in backward.iter_mut().enumerate() {
        if i != r {
            *slot = sound(i, r, rng)?;
        }
    }

    let mut coefficients = Vec::with_capacity(m);
    let mut quality = Vec::with_capacity(m);
    for i in 0..m {
        if i == r {
            coefficients.push(vec![ONE; n_sc]);
            quality.push(1.0);
            continue;
        }
        let mut acc = ZERO;
        let mut mag = 0.0;
        for (f, b) in forward[i].iter().zip(&backward[i]) {
            let p = f * b.conj();
            acc += p;
            mag += p.norm();
        }
        let q = if mag > 0.0 { acc.norm() / mag } else { 0.0 };
        let d = if acc.norm() > 0.0 { acc / acc.norm() } else { ONE };
        coefficients.push(vec![d; n_sc]);
        quality.push(q);
    }

    let mut table = CalibrationTable {
        coefficients,
        ref_antenna: r,
        quality,
        valid: true,
        reason: None,
    };
    if interfered {
        table.mark_invalid(format!(
            "interference during sounding: listen energy {listened:.3e} exceeds {} x noise",
            opts.listen_threshold
        ));
    } else if let Some((worst, q)) = table
        .quality
        .iter()
        .copied()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .filter(|(_, q)| *q < opts.min_quality)
    {
        table.mark_invalid(format!(
            "antenna {worst} coherence {q:.3} below {}",
            opts.min_quality
        ));
    }
    Ok(table)
}

/// CSI for precoder computation: entry `(m, k)` on subcarrier `n` is
/// multiplied by `conj(d[m][n])`.
///
/// Since `d ∝ bs_rx/bs_tx` with unit modulus, the conjugate turns the
/// uplink chain responses into downlink ones. Detection keeps using the
/// uncorrected estimate.
pub fn apply_precal(est: &UplinkChannelEstimate, table: &CalibrationTable) -> Result<UplinkChannelEstimate> {
    table.require_valid()?;
    let m = est.num_bs_antennas();
    if table.num_antennas() != m || table.num_subcarriers() != est.num_subcarriers() {
        return Err(Error::LengthMismatch {
            expected: m * est.num_subcarriers(),
            actual: table.num_antennas() * table.num_subcarriers(),
        });
    }
    let scale = |h: &CMatrix, n: usize| {
        let mut out = h.clone();
        for (a, mut row) in out.row_iter_mut().enumerate() {
            let c = table.at(a, n).conj();
            row.iter_mut().for_each(|v| *v *= c);
        }
        out
    };
    if table.is_flat() {
        let blocks = est.map_blocks(|i, h| Ok(scale(h, i * est.stride())))?;
        Ok(UplinkChannelEstimate {
            blocks,
            stride: est.stride(),
        })
    } else {
        let blocks = (0..est.num_subcarriers()).map(|n| scale(est.at(n), n)).collect();
        Ok(UplinkChannelEstimate::from_subcarriers(blocks))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{draw_cal_channel, draw_mismatch, CalChannelParams};
    use crate::seed;
    use crate::testutil::{cgauss, random_cmatrix};

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    #[test]
    fn ls_with_identity_pilots_returns_received() {
        let r = random_cmatrix(&mut seed::rng(1), 8, 3);
        assert_eq!(ls_uplink_estimate(&r, &[ONE; 3]).unwrap(), r);
    }

    #[test]
    fn ls_recovers_channel_and_rejects_bad_pilots() {
        let mut rng = seed::rng(2);
        let h = random_cmatrix(&mut rng, 6, 4);
        let pilots: Vec<Complex64> = (0..4).map(pilot_value).collect();
        let mut r = h.clone();
        for k in 0..4 {
            r.column_mut(k).iter_mut().for_each(|v| *v *= pilots[k]);
        }
        let est = ls_uplink_estimate(&r, &pilots).unwrap();
        assert!((est - &h).norm() < 1e-12);
        let bad = [ONE, c(2.0, 0.0), ONE, ONE];
        assert!(matches!(
            ls_uplink_estimate(&r, &bad),
            Err(Error::NonUnitPilot { index: 1, .. })
        ));
    }

    #[test]
    fn zero_hold_shares_one_matrix_per_subband() {
        let cfg = SystemConfig::small(4, 3);
        let mut rng = seed::rng(3);
        let rx = random_cmatrix(&mut rng, 4, cfg.used_subcarriers);
        let est = estimate_uplink(&rx, &cfg).unwrap();
        assert_eq!(est.stride(), 3);
        assert_eq!(est.blocks().len(), cfg.num_subbands());
        for n in 0..cfg.used_subcarriers {
            assert_eq!(est.at(n), est.at(n / 3 * 3));
        }
        // Column k of sub-band i comes from subcarrier 3i + k.
        let v = rx[(2, 7)] * pilot_value(7).conj();
        assert_eq!(est.at(6)[(2, 1)], v);
    }

    #[test]
    fn lmmse_inverse_limit() {
        // A unitary 4×4 Ĥ from the QR factor of a random matrix.
        let mut rng = seed::rng(4);
        let a = random_cmatrix(&mut rng, 4, 4);
        let (q, _) = crate::numerics::modified_gram_schmidt(&a).unwrap();
        let est = UplinkChannelEstimate::from_subcarriers(vec![q.clone()]);
        let s = [c(1.0, 0.0), c(0.0, -1.0), c(-0.5, 0.5), c(0.3, 0.1)];
        let y: Vec<Complex64> = (0..4).map(|m| (0..4).map(|k| q[(m, k)] * s[k]).sum()).collect();
        let shat = lmmse_detect(&y, &est, 0, 1e-6).unwrap();
        for (a, b) in shat.iter().zip(&s) {
            assert!((a - b).norm() < 1e-4);
        }
    }

    #[test]
    fn detector_matches_direct_inversion() {
        let mut rng = seed::rng(5);
        let h = random_cmatrix(&mut rng, 16, 4);
        let est = UplinkChannelEstimate::from_subcarriers(vec![h.clone()]);
        let y: Vec<Complex64> = (0..16).map(|_| cgauss(&mut rng)).collect();
        let fast = LmmseDetector::new(&est, 0.3).unwrap().detect(&y, 0);
        let w = lmmse_weights(&h, 0.3, LmmseMode::Direct).unwrap();
        for k in 0..4 {
            let direct: Complex64 = (0..16).map(|m| w[(k, m)] * y[m]).sum();
            assert!((fast[k] - direct).norm() < 1e-9);
        }
    }

    #[test]
    fn large_array_noiseless_detection_is_exact_after_decisions() {
        let mut rng = seed::rng(6);
        let h = random_cmatrix(&mut rng, 128, 12);
        let est = UplinkChannelEstimate::from_subcarriers(vec![h.clone()]);
        let det = LmmseDetector::new(&est, 10f64.powf(-0.5)).unwrap();
        let bits: Vec<u8> = (0..24).map(|i| ((i * 7 + 3) % 5 % 2) as u8).collect();
        let s = crate::phy::qam_map(&bits, crate::Modulation::Qpsk).unwrap();
        let y: Vec<Complex64> = (0..128).map(|m| (0..12).map(|k| h[(m, k)] * s[k]).sum()).collect();
        let out = crate::phy::qam_demap(&det.detect(&y, 0), crate::Modulation::Qpsk);
        assert_eq!(out, bits);
        // Unbiased output is close to the symbols themselves.
        for (a, b) in det.detect_unbiased(&y, 0).iter().zip(&s) {
            assert!((a - b).norm() < 0.05);
        }
    }

    #[test]
    fn mrt_single_user_is_matched_filter() {
        let h = CMatrix::from_column_slice(3, 1, &[c(1.0, 1.0), c(0.0, 2.0), c(-1.0, 0.0)]);
        let p = mrt_precoder(&UplinkChannelEstimate::from_subcarriers(vec![h.clone()]), 1.0).unwrap();
        let norm = h.norm();
        for m in 0..3 {
            assert!((p.at(0)[(m, 0)] - h[(m, 0)].conj() / norm).norm() < 1e-15);
        }
    }

    #[test]
    fn precoder_columns_have_equal_norm() {
        let mut rng = seed::rng(7);
        let est = UplinkChannelEstimate::from_subcarriers(vec![random_cmatrix(&mut rng, 16, 4)]);
        for p in [mrt_precoder(&est, 4.0).unwrap(), lmmse_precoder(&est, 0.1, 4.0).unwrap()] {
            for col in p.at(0).column_iter() {
                assert!((col.norm() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mrt_on_orthogonal_columns_is_diagonal() {
        let mut rng = seed::rng(8);
        let (q, _) = crate::numerics::modified_gram_schmidt(&random_cmatrix(&mut rng, 8, 3)).unwrap();
        let h = q * CMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![c(2.0, 0.0), c(0.5, 1.0), c(-1.0, 0.0)]));
        let f = mrt_precoder(&UplinkChannelEstimate::from_subcarriers(vec![h.clone()]), 3.0).unwrap();
        let g = h.transpose() * f.at(0);
        for i in 0..3 {
            for j in 0..3 {
                if i != j {
                    assert!(g[(i, j)].norm() < 1e-12);
                }
            }
        }
    }

    fn offdiag_norm(g: &CMatrix) -> f64 {
        let mut s = 0.0;
        for i in 0..g.nrows() {
            for j in 0..g.ncols() {
                if i != j {
                    s += g[(i, j)].norm_sqr();
                }
            }
        }
        s.sqrt()
    }

    #[test]
    fn lmmse_leaks_far_less_than_mrt() {
        let mut rng = seed::rng(9);
        let h = random_cmatrix(&mut rng, 32, 4);
        let est = UplinkChannelEstimate::from_subcarriers(vec![h.clone()]);
        let mrt = mrt_precoder(&est, 4.0).unwrap();
        let lmmse = lmmse_precoder(&est, 0.1, 4.0).unwrap();
        let lm = offdiag_norm(&(h.transpose() * lmmse.at(0)));
        let mr = offdiag_norm(&(h.transpose() * mrt.at(0)));
        assert!(lm * 10.0 <= mr, "lmmse {lm} mrt {mr}");
    }

    #[test]
    fn lmmse_zero_forcing_limit() {
        let mut rng = seed::rng(10);
        let (q, _) = crate::numerics::modified_gram_schmidt(&random_cmatrix(&mut rng, 4, 4)).unwrap();
        let f = lmmse_precoder(&UplinkChannelEstimate::from_subcarriers(vec![q.clone()]), 1e-7, 4.0).unwrap();
        assert!(offdiag_norm(&(q.transpose() * f.at(0))) < 1e-9);
    }

    #[test]
    fn precoder_power_matches_budget() {
        let mut rng = seed::rng(11);
        let est = UplinkChannelEstimate::from_subcarriers(vec![random_cmatrix(&mut rng, 16, 4)]);
        let p = lmmse_precoder(&est, 0.2, 4.0).unwrap();
        let trials = 10_000;
        let mut acc = 0.0;
        for _ in 0..trials {
            let x: Vec<Complex64> = (0..4).map(|_| cgauss(&mut rng)).collect();
            acc += p.apply(&x, 0).iter().map(|v| v.norm_sqr()).sum::<f64>();
        }
        let mean = acc / trials as f64;
        assert!((mean - 4.0).abs() < 0.04, "{mean}");
    }

    #[test]
    fn zero_column_is_reported() {
        let mut h = random_cmatrix(&mut seed::rng(12), 6, 3);
        h.column_mut(2).fill(ZERO);
        let est = UplinkChannelEstimate::from_subbands(vec![random_cmatrix(&mut seed::rng(1), 6, 3), h]);
        assert!(matches!(
            mrt_precoder(&est, 1.0),
            Err(Error::DegenerateColumn { user: 2, subcarrier: 3 })
        ));
    }

    fn cal_setup(cfg: &SystemConfig) -> (CalChannel, MismatchProfile) {
        let cal = draw_cal_channel(21, cfg, &CalChannelParams::default());
        (cal, draw_mismatch(22, cfg))
    }

    #[test]
    fn ideal_hardware_gives_unit_table() {
        let cfg = SystemConfig::small(8, 2);
        let (cal, _) = cal_setup(&cfg);
        let mm = MismatchProfile::ideal(8, 2);
        let env = CalEnvironment {
            channel: &cal,
            mismatch: &mm,
            noise: NoiseSpec::none(),
            interference_power: 0.0,
        };
        let t = run_reciprocity_calibration(&env, &CalibrationOptions::default(), &cfg, &mut seed::rng(1)).unwrap();
        assert!(t.valid);
        for m in 0..8 {
            for n in 0..cfg.used_subcarriers {
                assert!((t.at(m, n) - ONE).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn noiseless_table_matches_closed_form() {
        let cfg = SystemConfig::small(8, 2);
        let (cal, mm) = cal_setup(&cfg);
        let env = CalEnvironment {
            channel: &cal,
            mismatch: &mm,
            noise: NoiseSpec::none(),
            interference_power: 0.0,
        };
        let opts = CalibrationOptions {
            ref_antenna: Some(3),
            ..Default::default()
        };
        let t = run_reciprocity_calibration(&env, &opts, &cfg, &mut seed::rng(1)).unwrap();
        assert_eq!(t.ref_antenna, 3);
        for i in 0..8 {
            let theta = |m: usize| mm.bs_tx[m].arg();
            let phi = |m: usize| mm.bs_rx[m].arg();
            let expect = Complex64::from_polar(1.0, (theta(3) - theta(i)) + (phi(i) - phi(3)));
            assert!((t.at(i, 5) - expect).norm() < 1e-12);
            assert!((t.at(i, 0).norm() - 1.0).abs() < 1e-12);
        }
        assert!(t.invariant_error(&mm, &cfg) <= 1e-9);
    }

    #[test]
    fn interference_invalidates_table() {
        let cfg = SystemConfig::small(8, 2);
        let (cal, mm) = cal_setup(&cfg);
        let env = CalEnvironment {
            channel: &cal,
            mismatch: &mm,
            noise: cal.noise(),
            interference_power: 10.0,
        };
        let t = run_reciprocity_calibration(&env, &CalibrationOptions::default(), &cfg, &mut seed::rng(2)).unwrap();
        assert!(!t.valid);
        assert!(t.reason.as_deref().unwrap().contains("interference"));
        let est = UplinkChannelEstimate::from_subbands(vec![CMatrix::zeros(8, 2); cfg.num_subbands()]);
        assert!(matches!(apply_precal(&est, &t), Err(Error::InvalidCalibration(_))));
    }

    #[test]
    fn quiet_noisy_sounding_stays_valid() {
        let cfg = SystemConfig::small(8, 2);
        let (cal, mm) = cal_setup(&cfg);
        let env = CalEnvironment {
            channel: &cal,
            mismatch: &mm,
            noise: cal.noise(),
            interference_power: 0.0,
        };
        let t = run_reciprocity_calibration(&env, &CalibrationOptions::default(), &cfg, &mut seed::rng(3)).unwrap();
        assert!(t.valid, "{:?}", t.reason);
        assert!(t.invariant_error(&mm, &cfg) < 0.2);
    }

    #[test]
    fn identity_table_leaves_estimate_unchanged() {
        let mut rng = seed::rng(13);
        let est = UplinkChannelEstimate::from_subbands(vec![random_cmatrix(&mut rng, 4, 2); 3]);
        let t = CalibrationTable::identity(4, 6);
        assert_eq!(apply_precal(&est, &t).unwrap(), est);
    }

    #[test]
    fn pre_and_post_calibration_agree() {
        let mut rng = seed::rng(14);
        let h = random_cmatrix(&mut rng, 8, 3);
        let est = UplinkChannelEstimate::from_subcarriers(vec![h]);
        let d: Vec<Vec<Complex64>> = (0..8)
            .map(|_| vec![Complex64::from_polar(1.0, rand::Rng::gen_range(&mut rng, 0.0..6.0)); 1])
            .collect();
        let t = CalibrationTable::from_coefficients(d, 0);
        let x = [c(1.0, 0.0), c(0.0, 1.0), c(-1.0, -1.0)];
        for scheme in [PrecoderScheme::Mrt, PrecoderScheme::Lmmse] {
            let pre = build_precoder(scheme, &apply_precal(&est, &t).unwrap(), 0.1, 3.0).unwrap();
            let post = build_precoder(scheme, &est, 0.1, 3.0).unwrap();
            let a = pre.apply(&x, 0);
            let mut b = post.apply(&x, 0);
            t.apply_postcal(&mut b, 0).unwrap();
            for (u, v) in a.iter().zip(&b) {
                assert!((u - v).norm() < 1e-12, "{scheme}");
            }
        }
    }

    #[test]
    fn table_text_export() {
        let mut t = CalibrationTable::identity(2, 2);
        t.mark_invalid("test");
        let text = t.to_text();
        assert!(text.contains("# reason test"));
        assert_eq!(text.lines().filter(|l| !l.starts_with('#')).count(), 4);
        assert!(text.lines().any(|l| l.starts_with("1 1 1.000000000000e0 0.000000000000e0 1.000000")));
    }
}
