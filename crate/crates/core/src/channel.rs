//! Multipath channels, transceiver mismatch, and signal propagation.
//!
//! The over-the-air medium is a 6-tap Rayleigh tapped delay line per
//! (antenna, user) link with an exponential power-delay profile. All
//! antennas see the same tap delays for a given user. The physical medium
//! is reciprocal: the downlink uses the transpose of the uplink response.
//! Reciprocity of the end-to-end channel is broken only by the unit-modulus
//! TX/RX chain coefficients in [`MismatchProfile`].

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::config::{subcarrier_bin, SystemConfig};
use crate::error::{Error, Result};
use crate::numerics::CMatrix;
use crate::seed::{self, SimRng};

pub const NUM_TAPS: usize = 6;

const ZERO: Complex64 = Complex64::new(0.0, 0.0);
const ONE: Complex64 = Complex64::new(1.0, 0.0);

/// Circularly-symmetric complex Gaussian sample with variance `var`.
pub fn complex_gaussian<R: Rng + ?Sized>(rng: &mut R, var: f64) -> Complex64 {
    let s = (var / 2.0).sqrt();
    let re: f64 = rng.sample(StandardNormal);
    let im: f64 = rng.sample(StandardNormal);
    Complex64::new(re * s, im * s)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tap {
    pub delay: usize,
    pub gain: Complex64,
}

/// Tap gains for every (antenna, user) link plus per-user tap delays.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelRealization {
    pub seed: u64,
    num_bs_antennas: usize,
    num_users: usize,
    delays: Vec<[usize; NUM_TAPS]>,
    gains: Vec<Complex64>,
}

impl ChannelRealization {
    /// Builds a realization from explicit per-user delays and gains laid
    /// out as `gains[(m * K + k) * NUM_TAPS + l]`.
    pub fn from_parts(
        seed: u64,
        num_bs_antennas: usize,
        num_users: usize,
        delays: Vec<[usize; NUM_TAPS]>,
        gains: Vec<Complex64>,
    ) -> Result<Self> {
        if delays.len() != num_users {
            return Err(Error::LengthMismatch {
                expected: num_users,
                actual: delays.len(),
            });
        }
        let expected = num_bs_antennas * num_users * NUM_TAPS;
        if gains.len() != expected {
            return Err(Error::LengthMismatch {
                expected,
                actual: gains.len(),
            });
        }
        Ok(Self {
            seed,
            num_bs_antennas,
            num_users,
            delays,
            gains,
        })
    }

    /// A channel where every link is a single unit tap at `delay`.
    pub fn single_tap(num_bs_antennas: usize, num_users: usize, delay: usize) -> Self {
        let mut gains = vec![ZERO; num_bs_antennas * num_users * NUM_TAPS];
        for link in 0..num_bs_antennas * num_users {
            gains[link * NUM_TAPS] = ONE;
        }
        Self {
            seed: 0,
            num_bs_antennas,
            num_users,
            delays: vec![[delay; NUM_TAPS]; num_users],
            gains,
        }
    }

    pub fn num_bs_antennas(&self) -> usize {
        self.num_bs_antennas
    }

    pub fn num_users(&self) -> usize {
        self.num_users
    }

    pub fn delays(&self, user: usize) -> &[usize; NUM_TAPS] {
        &self.delays[user]
    }

    pub fn gains(&self, antenna: usize, user: usize) -> &[Complex64] {
        let o = (antenna * self.num_users + user) * NUM_TAPS;
        &self.gains[o..o + NUM_TAPS]
    }

    pub fn taps(&self, antenna: usize, user: usize) -> [Tap; NUM_TAPS] {
        let g = self.gains(antenna, user);
        let d = &self.delays[user];
        std::array::from_fn(|l| Tap {
            delay: d[l],
            gain: g[l],
        })
    }

    pub fn max_delay(&self) -> usize {
        self.delays.iter().flatten().copied().max().unwrap_or(0)
    }

    pub fn link_energy(&self, antenna: usize, user: usize) -> f64 {
        self.gains(antenna, user).iter().map(|g| g.norm_sqr()).sum()
    }
}

/// Draws a tapped-delay-line realization. Deterministic in `seed`.
pub fn draw_channel(seed: u64, cfg: &SystemConfig) -> ChannelRealization {
    let mut rng = seed::rng(seed);
    let (m, k) = (cfg.num_bs_antennas, cfg.num_users);
    let profile = &cfg.channel;
    let mut delays = Vec::with_capacity(k);
    let mut powers = Vec::with_capacity(k);
    for _ in 0..k {
        let mut d: [usize; NUM_TAPS] =
            std::array::from_fn(|_| rng.gen_range(0..=profile.max_delay_samples));
        d.sort_unstable();
        // The strongest path arrives first.
        let shift = d[0];
        d.iter_mut().for_each(|x| *x -= shift);
        let p: Vec<f64> = d
            .iter()
            .map(|&x| (-(x as f64) / profile.decay_samples).exp())
            .collect();
        let total: f64 = p.iter().sum();
        powers.push(p.into_iter().map(|x| x / total).collect::<Vec<_>>());
        delays.push(d);
    }
    let mut gains = Vec::with_capacity(m * k * NUM_TAPS);
    for _ in 0..m {
        for p in &powers {
            for &pl in p {
                gains.push(complex_gaussian(&mut rng, pl));
            }
        }
    }
    ChannelRealization {
        seed,
        num_bs_antennas: m,
        num_users: k,
        delays,
        gains,
    }
}

/// Per-subcarrier `M×K` uplink channel matrices.
#[derive(Debug, Clone)]
pub struct FreqResponse {
    matrices: Vec<CMatrix>,
}

impl FreqResponse {
    pub fn at(&self, subcarrier: usize) -> &CMatrix {
        &self.matrices[subcarrier]
    }

    pub fn len(&self) -> usize {
        self.matrices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.matrices.is_empty()
    }

    /// Uplink matrix seen at baseband: `diag(bs_rx) H diag(ue_tx)`.
    pub fn uplink_effective(&self, n: usize, mm: &MismatchProfile, cfg: &SystemConfig) -> CMatrix {
        let h = &self.matrices[n];
        CMatrix::from_fn(h.nrows(), h.ncols(), |m, k| {
            mm.bs_rx_at(m, n, cfg) * h[(m, k)] * mm.ue_tx[k]
        })
    }

    /// Downlink `K×M` matrix: `diag(ue_rx) Hᵀ diag(bs_tx)`.
    pub fn downlink_effective(&self, n: usize, mm: &MismatchProfile, cfg: &SystemConfig) -> CMatrix {
        let h = &self.matrices[n];
        CMatrix::from_fn(h.ncols(), h.nrows(), |k, m| {
            mm.ue_rx[k] * h[(m, k)] * mm.bs_tx_at(m, n, cfg)
        })
    }
}

/// Evaluates `Σ_l g_l exp(−j2π·bin(n)·d_l/N_FFT)` on every used subcarrier.
pub fn freq_response(ch: &ChannelRealization, cfg: &SystemConfig) -> FreqResponse {
    let (m, k) = (ch.num_bs_antennas, ch.num_users);
    let n_fft = cfg.fft_size as f64;
    // Phasors depend only on (user, tap, subcarrier).
    let phasors: Vec<Vec<[Complex64; NUM_TAPS]>> = (0..k)
        .map(|user| {
            (0..cfg.used_subcarriers)
                .map(|n| {
                    let bin = subcarrier_bin(n, cfg) as f64;
                    std::array::from_fn(|l| {
                        Complex64::from_polar(1.0, -2.0 * PI * bin * ch.delays[user][l] as f64 / n_fft)
                    })
                })
                .collect()
        })
        .collect();
    let matrices = (0..cfg.used_subcarriers)
        .map(|n| {
            CMatrix::from_fn(m, k, |a, u| {
                let g = ch.gains(a, u);
                let ph = &phasors[u][n];
                (0..NUM_TAPS).map(|l| g[l] * ph[l]).sum()
            })
        })
        .collect();
    FreqResponse { matrices }
}

/// Unit-modulus TX/RX chain coefficients.
///
/// Each BS chain may carry an extra group delay (in samples) which turns its
/// coefficient into a linear phase ramp across subcarriers; this mode is
/// honoured on the frequency-domain path only.
#[derive(Debug, Clone, PartialEq)]
pub struct MismatchProfile {
    pub bs_tx: Vec<Complex64>,
    pub bs_rx: Vec<Complex64>,
    pub ue_tx: Vec<Complex64>,
    pub ue_rx: Vec<Complex64>,
    pub bs_tx_delay: Option<Vec<f64>>,
    pub bs_rx_delay: Option<Vec<f64>>,
}

impl MismatchProfile {
    pub fn ideal(num_bs_antennas: usize, num_users: usize) -> Self {
        Self {
            bs_tx: vec![ONE; num_bs_antennas],
            bs_rx: vec![ONE; num_bs_antennas],
            ue_tx: vec![ONE; num_users],
            ue_rx: vec![ONE; num_users],
            bs_tx_delay: None,
            bs_rx_delay: None,
        }
    }

    pub fn is_frequency_selective(&self) -> bool {
        self.bs_tx_delay.is_some() || self.bs_rx_delay.is_some()
    }

    fn ramp(delay: Option<&Vec<f64>>, m: usize, n: usize, cfg: &SystemConfig) -> Complex64 {
        match delay {
            None => ONE,
            Some(d) => {
                let bin = subcarrier_bin(n, cfg) as f64;
                Complex64::from_polar(1.0, -2.0 * PI * bin * d[m] / cfg.fft_size as f64)
            }
        }
    }

    pub fn bs_tx_at(&self, m: usize, n: usize, cfg: &SystemConfig) -> Complex64 {
        self.bs_tx[m] * Self::ramp(self.bs_tx_delay.as_ref(), m, n, cfg)
    }

    pub fn bs_rx_at(&self, m: usize, n: usize, cfg: &SystemConfig) -> Complex64 {
        self.bs_rx[m] * Self::ramp(self.bs_rx_delay.as_ref(), m, n, cfg)
    }

    fn all_coefficients(&self) -> impl Iterator<Item = &Complex64> {
        self.bs_tx
            .iter()
            .chain(&self.bs_rx)
            .chain(&self.ue_tx)
            .chain(&self.ue_rx)
    }

    /// Largest deviation of any coefficient modulus from one.
    pub fn max_modulus_error(&self) -> f64 {
        self.all_coefficients()
            .map(|c| (c.norm() - 1.0).abs())
            .fold(0.0, f64::max)
    }
}

fn unit_phasor<R: Rng>(rng: &mut R) -> Complex64 {
    let theta: f64 = rng.gen_range(0.0..2.0 * PI);
    // cis(θ) with the modulus pinned to exactly 1.
    let c = Complex64::new(theta.cos(), theta.sin());
    c / c.norm()
}

/// Draws flat mismatch coefficients with phases uniform on `[0, 2π)`.
pub fn draw_mismatch(seed: u64, cfg: &SystemConfig) -> MismatchProfile {
    let (m, k) = (cfg.num_bs_antennas, cfg.num_users);
    if !cfg.mismatch_enabled {
        return MismatchProfile::ideal(m, k);
    }
    let mut rng = seed::rng(seed);
    let mut draw = |n: usize| (0..n).map(|_| unit_phasor(&mut rng)).collect::<Vec<_>>();
    let bs_tx = draw(m);
    let bs_rx = draw(m);
    let ue_tx = draw(k);
    let ue_rx = draw(k);
    MismatchProfile {
        bs_tx,
        bs_rx,
        ue_tx,
        ue_rx,
        bs_tx_delay: None,
        bs_rx_delay: None,
    }
}

/// Like [`draw_mismatch`] but adds per-chain group delays uniform in
/// `[−max_delay, max_delay]` samples to every BS TX and RX chain.
pub fn draw_mismatch_frequency_selective(seed: u64, cfg: &SystemConfig, max_delay: f64) -> MismatchProfile {
    let mut mm = draw_mismatch(seed, cfg);
    if !cfg.mismatch_enabled {
        return mm;
    }
    let mut rng = seed::rng(seed ^ 0xD1B5_4A32_D192_ED03);
    let m = cfg.num_bs_antennas;
    mm.bs_tx_delay = Some((0..m).map(|_| rng.gen_range(-max_delay..=max_delay)).collect());
    mm.bs_rx_delay = Some((0..m).map(|_| rng.gen_range(-max_delay..=max_delay)).collect());
    mm
}

/// Additive white noise level per complex sample (or per subcarrier; the
/// unitary DFT keeps the two equal).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub sigma2: f64,
}

impl NoiseSpec {
    pub fn none() -> Self {
        Self { sigma2: 0.0 }
    }

    pub fn new(sigma2: f64) -> Result<Self> {
        if !(sigma2 >= 0.0) {
            return Err(Error::InvalidConfig(format!("noise variance {sigma2} is negative")));
        }
        Ok(Self { sigma2 })
    }

    /// SNR per subcarrier at one BS antenna for a unit-power user: `1/σ²`.
    pub fn from_snr_db(snr_db: f64) -> Self {
        Self {
            sigma2: 10f64.powf(-snr_db / 10.0),
        }
    }

    pub fn sigma(&self) -> f64 {
        self.sigma2.sqrt()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Complex64 {
        if self.sigma2 == 0.0 {
            ZERO
        } else {
            complex_gaussian(rng, self.sigma2)
        }
    }
}

fn check_streams(streams: &[Vec<Complex64>], expected_count: usize) -> Result<usize> {
    if streams.len() != expected_count {
        return Err(Error::LengthMismatch {
            expected: expected_count,
            actual: streams.len(),
        });
    }
    let len = streams.first().map_or(0, Vec::len);
    for s in streams {
        if s.len() != len {
            return Err(Error::LengthMismatch {
                expected: len,
                actual: s.len(),
            });
        }
    }
    Ok(len)
}

fn require_flat(mm: &MismatchProfile) -> Result<()> {
    if mm.is_frequency_selective() {
        return Err(Error::InvalidConfig(
            "frequency-selective mismatch is only supported on the frequency-domain path".into(),
        ));
    }
    Ok(())
}

fn accumulate_taps(acc: &mut [Complex64], input: &[Complex64], taps: &[Tap; NUM_TAPS]) {
    for tap in taps {
        if tap.gain == ZERO || tap.delay >= acc.len() {
            continue;
        }
        for (a, x) in acc[tap.delay..].iter_mut().zip(input) {
            *a += tap.gain * x;
        }
    }
}

/// Time-domain uplink: every BS antenna receives the sum of all users'
/// streams, each convolved with its link's taps.
pub fn propagate_uplink(
    tx: &[Vec<Complex64>],
    ch: &ChannelRealization,
    mm: &MismatchProfile,
    noise: &NoiseSpec,
    rng: &mut SimRng,
) -> Result<Vec<Vec<Complex64>>> {
    let len = check_streams(tx, ch.num_users)?;
    require_flat(mm)?;
    let shaped: Vec<Vec<Complex64>> = tx
        .iter()
        .zip(&mm.ue_tx)
        .map(|(s, c)| s.iter().map(|v| v * c).collect())
        .collect();
    let mut out = Vec::with_capacity(ch.num_bs_antennas);
    for m in 0..ch.num_bs_antennas {
        let mut acc = vec![ZERO; len];
        for (k, s) in shaped.iter().enumerate() {
            accumulate_taps(&mut acc, s, &ch.taps(m, k));
        }
        let g = mm.bs_rx[m];
        for v in acc.iter_mut() {
            *v = *v * g + noise.sample(rng);
        }
        out.push(acc);
    }
    Ok(out)
}

/// Time-domain downlink through the transposed physical channel.
pub fn propagate_downlink(
    tx: &[Vec<Complex64>],
    ch: &ChannelRealization,
    mm: &MismatchProfile,
    noise: &NoiseSpec,
    rng: &mut SimRng,
) -> Result<Vec<Vec<Complex64>>> {
    let len = check_streams(tx, ch.num_bs_antennas)?;
    require_flat(mm)?;
    let shaped: Vec<Vec<Complex64>> = tx
        .iter()
        .zip(&mm.bs_tx)
        .map(|(s, c)| s.iter().map(|v| v * c).collect())
        .collect();
    let mut out = Vec::with_capacity(ch.num_users);
    for k in 0..ch.num_users {
        let mut acc = vec![ZERO; len];
        for (m, s) in shaped.iter().enumerate() {
            accumulate_taps(&mut acc, s, &ch.taps(m, k));
        }
        let g = mm.ue_rx[k];
        for v in acc.iter_mut() {
            *v = *v * g + noise.sample(rng);
        }
        out.push(acc);
    }
    Ok(out)
}

/// Over-the-air coupling between BS antennas, used for self-calibration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalChannelParams {
    /// Per-subcarrier SNR between adjacent elements (half-wavelength apart).
    pub adjacent_snr_db: f64,
    /// Additional loss per element of separation.
    pub loss_db_per_element: f64,
    /// Largest integer delay of a coupling path, in samples.
    pub max_delay_samples: usize,
}

impl Default for CalChannelParams {
    fn default() -> Self {
        Self {
            adjacent_snr_db: 20.0,
            loss_db_per_element: 3.0,
            max_delay_samples: 2,
        }
    }
}

/// Reciprocal single-tap BS-to-BS links (`h_ij = h_ji`) on a planar grid of
/// `num_subsystems` rows by `M / num_subsystems` columns. Noise variance on
/// a sounding measurement is 1, so `|h_ij|²` is the link SNR.
#[derive(Debug, Clone, PartialEq)]
pub struct CalChannel {
    num_antennas: usize,
    columns: usize,
    links: Vec<(Complex64, usize)>,
}

impl CalChannel {
    pub fn noise(&self) -> NoiseSpec {
        NoiseSpec { sigma2: 1.0 }
    }

    pub fn num_antennas(&self) -> usize {
        self.num_antennas
    }

    fn index(&self, i: usize, j: usize) -> usize {
        let (a, b) = if i < j { (i, j) } else { (j, i) };
        a * self.num_antennas + b
    }

    /// Element-grid position `(row, column)` of antenna `m`.
    pub fn position(&self, m: usize) -> (usize, usize) {
        (m / self.columns, m % self.columns)
    }

    /// Distance between two antennas in element spacings.
    pub fn distance(&self, i: usize, j: usize) -> f64 {
        let (ri, ci) = self.position(i);
        let (rj, cj) = self.position(j);
        let dr = ri as f64 - rj as f64;
        let dc = ci as f64 - cj as f64;
        (dr * dr + dc * dc).sqrt()
    }

    pub fn response(&self, i: usize, j: usize, n: usize, cfg: &SystemConfig) -> Complex64 {
        let (g, d) = self.links[self.index(i, j)];
        let bin = subcarrier_bin(n, cfg) as f64;
        g * Complex64::from_polar(1.0, -2.0 * PI * bin * d as f64 / cfg.fft_size as f64)
    }

    /// Antenna closest to the array center.
    pub fn central_antenna(&self) -> usize {
        let rows = self.num_antennas / self.columns;
        let center = ((rows as f64 - 1.0) / 2.0, (self.columns as f64 - 1.0) / 2.0);
        (0..self.num_antennas)
            .min_by(|&a, &b| {
                let da = dist2(self.position(a), center);
                let db = dist2(self.position(b), center);
                da.total_cmp(&db)
            })
            .unwrap_or(0)
    }

    /// All-ones coupling, mainly for tests.
    pub fn uniform(cfg: &SystemConfig, gain: Complex64) -> Self {
        let m = cfg.num_bs_antennas;
        Self {
            num_antennas: m,
            columns: cfg.antennas_per_subsystem().max(1),
            links: vec![(gain, 0); m * m],
        }
    }
}

fn dist2(p: (usize, usize), c: (f64, f64)) -> f64 {
    let dr = p.0 as f64 - c.0;
    let dc = p.1 as f64 - c.1;
    dr * dr + dc * dc
}

pub fn draw_cal_channel(seed: u64, cfg: &SystemConfig, params: &CalChannelParams) -> CalChannel {
    let m = cfg.num_bs_antennas;
    let mut ch = CalChannel {
        num_antennas: m,
        columns: cfg.antennas_per_subsystem().max(1),
        links: vec![(ZERO, 0); m * m],
    };
    let mut rng = seed::rng(seed);
    for i in 0..m {
        for j in i + 1..m {
            let snr_db = params.adjacent_snr_db - params.loss_db_per_element * (ch.distance(i, j) - 1.0);
            let amp = 10f64.powf(snr_db / 20.0);
            let g = unit_phasor(&mut rng) * amp;
            let d = rng.gen_range(0..=params.max_delay_samples);
            ch.links[i * m + j] = (g, d);
        }
    }
    ch
}

/// One round of self-sounding: antenna `i` transmits `ref_signal` (one
/// value per used subcarrier) and antenna `j` de-rotates what it receives.
///
/// Returns `b_{i,j,n} = bs_rx[j]·h_ij,n·bs_tx[i] + noise/ref_n`.
/// `interference`, when given, is added to the received samples.
#[allow(clippy::too_many_arguments)]
pub fn sound_bs_pair(
    i: usize,
    j: usize,
    ref_signal: &[Complex64],
    cal: &CalChannel,
    mm: &MismatchProfile,
    noise: &NoiseSpec,
    interference: Option<&[Complex64]>,
    cfg: &SystemConfig,
    rng: &mut SimRng,
) -> Result<Vec<Complex64>> {
    if i == j {
        return Err(Error::SelfSounding(i));
    }
    if ref_signal.len() != cfg.used_subcarriers {
        return Err(Error::LengthMismatch {
            expected: cfg.used_subcarriers,
            actual: ref_signal.len(),
        });
    }
    Ok(ref_signal
        .iter()
        .enumerate()
        .map(|(n, &r)| {
            let mut y = mm.bs_rx_at(j, n, cfg) * cal.response(i, j, n, cfg) * mm.bs_tx_at(i, n, cfg) * r
                + noise.sample(rng);
            if let Some(intf) = interference {
                y += intf[n];
            }
            y / r
        })
        .collect())
}

const DUMP_MAGIC: &str = "# mmsim channel realization v1";

/// Writes a realization as text: a header of `key value` lines followed by
/// one `delays` line per user and one `tap m k l re im` line per tap.
pub fn dump_channel(ch: &ChannelRealization, cfg: &SystemConfig) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{DUMP_MAGIC}");
    let _ = writeln!(s, "seed {}", ch.seed);
    let _ = writeln!(s, "num_bs_antennas {}", ch.num_bs_antennas);
    let _ = writeln!(s, "num_users {}", ch.num_users);
    let _ = writeln!(s, "taps_per_link {NUM_TAPS}");
    let _ = writeln!(s, "fft_size {}", cfg.fft_size);
    let _ = writeln!(s, "sample_rate_hz {}", cfg.sample_rate_hz);
    for (k, d) in ch.delays.iter().enumerate() {
        let list: Vec<String> = d.iter().map(usize::to_string).collect();
        let _ = writeln!(s, "delays {k} {}", list.join(" "));
    }
    for m in 0..ch.num_bs_antennas {
        for k in 0..ch.num_users {
            for (l, g) in ch.gains(m, k).iter().enumerate() {
                let _ = writeln!(s, "tap {m} {k} {l} {:e} {:e}", g.re, g.im);
            }
        }
    }
    s
}

fn parse_num<T: std::str::FromStr>(tok: Option<&str>, line: usize) -> Result<T> {
    tok.and_then(|t| t.parse().ok())
        .ok_or_else(|| Error::Parse(format!("channel dump line {line}: malformed field")))
}

pub fn parse_channel_dump(text: &str) -> Result<ChannelRealization> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, l)) if l.trim() == DUMP_MAGIC => {}
        _ => return Err(Error::Parse("channel dump: missing header".into())),
    }
    let (mut seed, mut m, mut k) = (None, None, None);
    let mut delays: Vec<Option<[usize; NUM_TAPS]>> = Vec::new();
    let mut gains: Vec<Complex64> = Vec::new();
    for (no, line) in lines {
        let line_no = no + 1;
        let mut it = line.split_whitespace();
        match it.next() {
            None => continue,
            Some("seed") => seed = Some(parse_num::<u64>(it.next(), line_no)?),
            Some("num_bs_antennas") => m = Some(parse_num::<usize>(it.next(), line_no)?),
            Some("num_users") => {
                let kk = parse_num::<usize>(it.next(), line_no)?;
                k = Some(kk);
                delays = vec![None; kk];
            }
            Some("taps_per_link") => {
                if parse_num::<usize>(it.next(), line_no)? != NUM_TAPS {
                    return Err(Error::Parse("channel dump: unsupported tap count".into()));
                }
            }
            Some("fft_size") | Some("sample_rate_hz") => {}
            Some("delays") => {
                let user = parse_num::<usize>(it.next(), line_no)?;
                let mut d = [0usize; NUM_TAPS];
                for slot in d.iter_mut() {
                    *slot = parse_num(it.next(), line_no)?;
                }
                *delays.get_mut(user).ok_or_else(|| Error::Parse(format!("line {line_no}: user out of range")))? = Some(d);
            }
            Some("tap") => {
                let (mm, kk) = match (m, k) {
                    (Some(a), Some(b)) => (a, b),
                    _ => return Err(Error::Parse(format!("line {line_no}: tap before header"))),
                };
                if gains.is_empty() {
                    gains = vec![ZERO; mm * kk * NUM_TAPS];
                }
                let a: usize = parse_num(it.next(), line_no)?;
                let u: usize = parse_num(it.next(), line_no)?;
                let l: usize = parse_num(it.next(), line_no)?;
                let re: f64 = parse_num(it.next(), line_no)?;
                let im: f64 = parse_num(it.next(), line_no)?;
                if a >= mm || u >= kk || l >= NUM_TAPS {
                    return Err(Error::Parse(format!("line {line_no}: tap index out of range")));
                }
                gains[(a * kk + u) * NUM_TAPS + l] = Complex64::new(re, im);
            }
            Some(other) => return Err(Error::Parse(format!("line {line_no}: unknown key '{other}'"))),
        }
    }
    let (seed, m, k) = match (seed, m, k) {
        (Some(s), Some(m), Some(k)) => (s, m, k),
        _ => return Err(Error::Parse("channel dump: incomplete header".into())),
    };
    let delays = delays
        .into_iter()
        .collect::<Option<Vec<_>>>()
        .ok_or_else(|| Error::Parse("channel dump: missing delays".into()))?;
    if gains.is_empty() {
        gains = vec![ZERO; m * k * NUM_TAPS];
    }
    ChannelRealization::from_parts(seed, m, k, delays, gains)
}

pub fn save_channel(ch: &ChannelRealization, cfg: &SystemConfig, path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(dump_channel(ch, cfg).as_bytes())
        .map_err(|e| Error::io(path, e))
}

pub fn load_channel(path: &Path) -> Result<ChannelRealization> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_channel_dump(&text)
}
