//! System numerology, frame scheduling and pilot/sub-band resource mapping.
//!
//! Defaults reproduce the 128-antenna, 12-user, 20 MHz LTE-like numerology.
//! Everything here is immutable once validated and can be shared freely
//! between worker threads.

use std::fmt;
use std::path::Path;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of subframes in one 10 ms radio frame.
pub const SUBFRAMES_PER_FRAME: usize = 10;
/// Slots per 1 ms subframe.
pub const SLOTS_PER_SUBFRAME: usize = 2;
/// Subframes per second (1 ms subframes).
pub const SUBFRAMES_PER_SECOND: u64 = 1000;

/// Constellations supported on a per-user basis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Modulation {
    #[serde(rename = "BPSK", alias = "bpsk")]
    Bpsk,
    #[serde(rename = "QPSK", alias = "qpsk", alias = "4QAM")]
    Qpsk,
    #[serde(rename = "16QAM", alias = "16qam")]
    Qam16,
    #[serde(rename = "64QAM", alias = "64qam")]
    Qam64,
    #[serde(rename = "256QAM", alias = "256qam")]
    Qam256,
}

impl Modulation {
    pub const ALL: [Modulation; 5] = [
        Modulation::Bpsk,
        Modulation::Qpsk,
        Modulation::Qam16,
        Modulation::Qam64,
        Modulation::Qam256,
    ];

    pub fn bits_per_symbol(self) -> usize {
        match self {
            Modulation::Bpsk => 1,
            Modulation::Qpsk => 2,
            Modulation::Qam16 => 4,
            Modulation::Qam64 => 6,
            Modulation::Qam256 => 8,
        }
    }

    pub fn order(self) -> usize {
        1 << self.bits_per_symbol()
    }

    pub fn from_order(order: usize) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.order() == order)
            .ok_or(Error::UnsupportedOrder(order))
    }
}

impl fmt::Display for Modulation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Modulation::Bpsk => "BPSK",
            Modulation::Qpsk => "QPSK",
            Modulation::Qam16 => "16QAM",
            Modulation::Qam64 => "64QAM",
            Modulation::Qam256 => "256QAM",
        })
    }
}

impl std::str::FromStr for Modulation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().replace('-', "").as_str() {
            "BPSK" => Ok(Modulation::Bpsk),
            "QPSK" | "4QAM" => Ok(Modulation::Qpsk),
            "16QAM" => Ok(Modulation::Qam16),
            "64QAM" => Ok(Modulation::Qam64),
            "256QAM" => Ok(Modulation::Qam256),
            _ => Err(Error::Parse(format!("unknown modulation '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CpScheme {
    #[default]
    Normal,
}

/// Where reciprocity calibration coefficients enter the downlink.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CalibrationMode {
    /// No calibration; precoders are built from the raw uplink estimate.
    Off,
    /// Coefficients correct the CSI before the precoder is computed.
    #[default]
    Precal,
    /// Coefficients scale the precoded per-antenna signals.
    Postcal,
}

impl CalibrationMode {
    pub fn enabled(self) -> bool {
        self != CalibrationMode::Off
    }
}

/// Role of one OFDM symbol within a slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SymbolRole {
    Sync,
    UlPilot,
    UlData,
    Guard,
    DlPilot,
    DlData,
}

pub const DEFAULT_SLOT_PATTERN: [SymbolRole; 7] = [
    SymbolRole::UlPilot,
    SymbolRole::UlData,
    SymbolRole::UlData,
    SymbolRole::Guard,
    SymbolRole::DlPilot,
    SymbolRole::DlData,
    SymbolRole::Guard,
];

/// Tapped-delay-line channel profile. The defaults give an RMS delay
/// spread of about one sample (33 ns at 30.72 MS/s), small enough for one
/// estimate to cover a 12-subcarrier sub-band.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChannelProfile {
    /// Largest tap delay in samples (inclusive).
    pub max_delay_samples: usize,
    /// Decay constant of the exponential power-delay profile, in samples.
    pub decay_samples: f64,
}

impl Default for ChannelProfile {
    fn default() -> Self {
        Self {
            max_delay_samples: 3,
            decay_samples: 1.0,
        }
    }
}

/// Whole-system configuration. Field names double as scenario-file keys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SystemConfig {
    pub num_bs_antennas: usize,
    pub num_users: usize,
    pub fft_size: usize,
    pub used_subcarriers: usize,
    pub bandwidth_hz: f64,
    pub sample_rate_hz: f64,
    pub symbols_per_slot: usize,
    pub cp_scheme: CpScheme,
    /// One entry per user, or a single entry applied to every user.
    pub per_user_modulation: Vec<Modulation>,
    pub num_subband_processors: usize,
    pub num_subsystems: usize,
    pub rng_seed: u64,
    pub mismatch_enabled: bool,
    pub calibration_mode: CalibrationMode,
    pub slot_pattern: Vec<SymbolRole>,
    pub channel: ChannelProfile,
}

impl Default for SystemConfig {
    fn default() -> Self {
        Self {
            num_bs_antennas: 128,
            num_users: 12,
            fft_size: 2048,
            used_subcarriers: 1200,
            bandwidth_hz: 20e6,
            sample_rate_hz: 30.72e6,
            symbols_per_slot: 7,
            cp_scheme: CpScheme::Normal,
            per_user_modulation: vec![Modulation::Qpsk],
            num_subband_processors: 4,
            num_subsystems: 8,
            rng_seed: 1,
            mismatch_enabled: true,
            calibration_mode: CalibrationMode::Precal,
            slot_pattern: DEFAULT_SLOT_PATTERN.to_vec(),
            channel: ChannelProfile::default(),
        }
    }
}

impl SystemConfig {
    /// A small legal system, handy for unit tests.
    pub fn small(num_bs_antennas: usize, num_users: usize) -> Self {
        Self {
            num_bs_antennas,
            num_users,
            fft_size: 64,
            used_subcarriers: 12 * num_users.max(1),
            num_subband_processors: 1,
            num_subsystems: 1,
            channel: ChannelProfile {
                max_delay_samples: 2,
                decay_samples: 1.0,
            },
            ..Self::default()
        }
    }

    pub fn modulation(&self, user: usize) -> Modulation {
        if self.per_user_modulation.len() == 1 {
            self.per_user_modulation[0]
        } else {
            self.per_user_modulation[user]
        }
    }

    pub fn num_subbands(&self) -> usize {
        self.used_subcarriers / self.num_users
    }

    pub fn antennas_per_subsystem(&self) -> usize {
        self.num_bs_antennas / self.num_subsystems
    }

    /// OFDM symbols per second on every subcarrier (14 000 with defaults).
    pub fn symbol_rate(&self) -> u64 {
        (SLOTS_PER_SUBFRAME * self.symbols_per_slot) as u64 * SUBFRAMES_PER_SECOND
    }

    /// Cyclic prefix lengths for each symbol of a slot (normal CP, scaled
    /// from the 160/144 samples used at a 2048-point transform).
    pub fn cp_lengths(&self) -> Vec<usize> {
        let first = 160 * self.fft_size / 2048;
        let rest = 144 * self.fft_size / 2048;
        (0..self.symbols_per_slot)
            .map(|i| if i == 0 { first } else { rest })
            .collect()
    }

    /// Checks every configuration invariant, returning the config on success.
    pub fn validate(self) -> Result<Self> {
        fn fail<T>(msg: impl Into<String>) -> Result<T> {
            Err(Error::InvalidConfig(msg.into()))
        }
        let m = self.num_bs_antennas;
        let k = self.num_users;
        let nsc = self.used_subcarriers;
        if k == 0 {
            return fail("K must be at least 1");
        }
        if m < k {
            return fail("M must be at least K");
        }
        if nsc % k != 0 {
            return fail("K does not divide N_sc");
        }
        if nsc >= self.fft_size {
            return fail("N_sc must be smaller than N_FFT");
        }
        if nsc % 2 != 0 {
            return fail("N_sc must be even for the symmetric subcarrier mapping");
        }
        if !self.fft_size.is_power_of_two() {
            return fail("N_FFT must be a power of two");
        }
        if !(self.bandwidth_hz > 0.0) || !(self.sample_rate_hz > 0.0) {
            return fail("bandwidth and sample rate must be positive");
        }
        if self.num_subband_processors == 0 || nsc % self.num_subband_processors != 0 {
            return fail("num_subband_processors does not divide N_sc");
        }
        if self.num_subsystems == 0 || m % self.num_subsystems != 0 {
            return fail("num_subsystems does not divide M");
        }
        if self.num_subsystems > 1 && (m / self.num_subsystems) % 2 != 0 {
            return fail("antennas per subsystem must be even");
        }
        if self.per_user_modulation.len() != 1 && self.per_user_modulation.len() != k {
            return fail(format!(
                "per_user_modulation has {} entries, expected 1 or K = {k}",
                self.per_user_modulation.len()
            ));
        }
        if self.slot_pattern.len() != self.symbols_per_slot {
            return fail("slot_pattern length differs from symbols_per_slot");
        }
        validate_slot_pattern(&self.slot_pattern)?;
        let min_cp = self.cp_lengths().into_iter().min().unwrap_or(0);
        if self.channel.max_delay_samples >= min_cp {
            return fail(format!(
                "max channel delay {} must be shorter than the CP ({min_cp} samples)",
                self.channel.max_delay_samples
            ));
        }
        if !(self.channel.decay_samples > 0.0) {
            return fail("channel decay must be positive");
        }
        Ok(self)
    }

    /// Reads a TOML scenario file; absent keys take default values.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }
}

pub fn validate_config(cfg: SystemConfig) -> Result<SystemConfig> {
    cfg.validate()
}

fn validate_slot_pattern(pattern: &[SymbolRole]) -> Result<()> {
    let mut seen_ul_pilot = false;
    let mut seen_dl_pilot = false;
    for (i, role) in pattern.iter().enumerate() {
        match role {
            SymbolRole::UlPilot => seen_ul_pilot = true,
            SymbolRole::DlPilot => seen_dl_pilot = true,
            SymbolRole::UlData if !seen_ul_pilot => {
                return Err(Error::InvalidConfig(format!(
                    "slot symbol {i} is UlData without an earlier UlPilot"
                )))
            }
            SymbolRole::DlData if !seen_dl_pilot => {
                return Err(Error::InvalidConfig(format!(
                    "slot symbol {i} is DlData without an earlier DlPilot"
                )))
            }
            SymbolRole::Sync => {
                return Err(Error::InvalidConfig(
                    "Sync is reserved for subframe 0".into(),
                ))
            }
            _ => {}
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Subframe {
    pub sync: bool,
    pub slots: [Vec<SymbolRole>; SLOTS_PER_SUBFRAME],
}

/// Symbol roles for one 10 ms radio frame.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FrameSchedule {
    pub subframes: Vec<Subframe>,
}

impl FrameSchedule {
    pub fn role(&self, subframe: usize, slot: usize, symbol: usize) -> SymbolRole {
        self.subframes[subframe].slots[slot][symbol]
    }

    pub fn total_symbols(&self) -> usize {
        self.subframes
            .iter()
            .flat_map(|sf| sf.slots.iter())
            .map(Vec::len)
            .sum()
    }

    pub fn count(&self, role: SymbolRole) -> usize {
        self.subframes
            .iter()
            .flat_map(|sf| sf.slots.iter())
            .flatten()
            .filter(|r| **r == role)
            .count()
    }

    /// Symbols that carry payload in either direction.
    pub fn data_symbols(&self) -> usize {
        self.count(SymbolRole::UlData) + self.count(SymbolRole::DlData)
    }

    /// Iterates the `(subframe, slot)` pairs that carry traffic.
    pub fn data_slots(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.subframes
            .iter()
            .enumerate()
            .filter(|(_, sf)| !sf.sync)
            .flat_map(|(i, _)| (0..SLOTS_PER_SUBFRAME).map(move |s| (i, s)))
    }
}

pub fn build_frame_schedule(cfg: &SystemConfig) -> FrameSchedule {
    let sync_slot = vec![SymbolRole::Sync; cfg.symbols_per_slot];
    let subframes = (0..SUBFRAMES_PER_FRAME)
        .map(|i| {
            if i == 0 {
                Subframe {
                    sync: true,
                    slots: [sync_slot.clone(), sync_slot.clone()],
                }
            } else {
                Subframe {
                    sync: false,
                    slots: [cfg.slot_pattern.clone(), cfg.slot_pattern.clone()],
                }
            }
        })
        .collect();
    FrameSchedule { subframes }
}

/// Subcarriers carrying user `k`'s pilot: every K-th subcarrier from `k`.
pub fn pilot_subcarriers(k: usize, cfg: &SystemConfig) -> Result<Vec<usize>> {
    if k >= cfg.num_users {
        return Err(Error::OutOfRange {
            what: "user",
            index: k,
            limit: cfg.num_users,
        });
    }
    Ok((k..cfg.used_subcarriers).step_by(cfg.num_users).collect())
}

/// Pilot sub-band containing subcarrier `n`.
pub fn subband_of(n: usize, cfg: &SystemConfig) -> Result<usize> {
    if n >= cfg.used_subcarriers {
        return Err(Error::OutOfRange {
            what: "subcarrier",
            index: n,
            limit: cfg.used_subcarriers,
        });
    }
    Ok(n / cfg.num_users)
}

/// User owning the pilot on subcarrier `n`.
pub fn pilot_owner(n: usize, cfg: &SystemConfig) -> usize {
    n % cfg.num_users
}

/// Unit-modulus QPSK pilot transmitted on subcarrier `n`.
///
/// The phase index comes from a fixed integer hash so that uplink and
/// downlink share one known sequence without any random state.
pub fn pilot_value(n: usize) -> Complex64 {
    let h = (n as u64)
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .rotate_left(17)
        .wrapping_mul(0xBF58_476D_1CE4_E5B9);
    let s = std::f64::consts::FRAC_1_SQRT_2;
    match h >> 62 {
        0 => Complex64::new(s, s),
        1 => Complex64::new(s, -s),
        2 => Complex64::new(-s, s),
        _ => Complex64::new(-s, -s),
    }
}

/// Signed FFT bin carrying used subcarrier `n` (DC excluded).
pub fn subcarrier_bin(n: usize, cfg: &SystemConfig) -> i64 {
    let half = (cfg.used_subcarriers / 2) as i64;
    let n = n as i64;
    if n < half {
        n - half
    } else {
        n - half + 1
    }
}

/// Array index (0..N_FFT) of used subcarrier `n`.
pub fn subcarrier_fft_index(n: usize, cfg: &SystemConfig) -> usize {
    subcarrier_bin(n, cfg).rem_euclid(cfg.fft_size as i64) as usize
}

/// Places `N_sc` used subcarriers around DC in an `N_FFT` spectrum.
pub fn map_to_fft_bins(column: &[Complex64], cfg: &SystemConfig) -> Result<Vec<Complex64>> {
    if column.len() != cfg.used_subcarriers {
        return Err(Error::LengthMismatch {
            expected: cfg.used_subcarriers,
            actual: column.len(),
        });
    }
    let mut bins = vec![Complex64::new(0.0, 0.0); cfg.fft_size];
    for (n, &v) in column.iter().enumerate() {
        bins[subcarrier_fft_index(n, cfg)] = v;
    }
    Ok(bins)
}

/// Inverse of [`map_to_fft_bins`].
pub fn unmap_fft_bins(bins: &[Complex64], cfg: &SystemConfig) -> Result<Vec<Complex64>> {
    if bins.len() != cfg.fft_size {
        return Err(Error::LengthMismatch {
            expected: cfg.fft_size,
            actual: bins.len(),
        });
    }
    Ok((0..cfg.used_subcarriers)
        .map(|n| bins[subcarrier_fft_index(n, cfg)])
        .collect())
}

/// Complex values indexed by (subcarrier, symbol, stream).
///
/// A stream is a user on the terminal side and an antenna on the base
/// station side. Storage keeps each (stream, symbol) column contiguous.
#[derive(Debug, Clone, PartialEq)]
pub struct ResourceGrid {
    subcarriers: usize,
    symbols: usize,
    streams: usize,
    data: Vec<Complex64>,
}

impl ResourceGrid {
    pub fn new(subcarriers: usize, symbols: usize, streams: usize) -> Self {
        Self {
            subcarriers,
            symbols,
            streams,
            data: vec![Complex64::new(0.0, 0.0); subcarriers * symbols * streams],
        }
    }

    pub fn subcarriers(&self) -> usize {
        self.subcarriers
    }

    pub fn symbols(&self) -> usize {
        self.symbols
    }

    pub fn streams(&self) -> usize {
        self.streams
    }

    fn offset(&self, symbol: usize, stream: usize) -> usize {
        (stream * self.symbols + symbol) * self.subcarriers
    }

    pub fn get(&self, subcarrier: usize, symbol: usize, stream: usize) -> Complex64 {
        self.data[self.offset(symbol, stream) + subcarrier]
    }

    pub fn set(&mut self, subcarrier: usize, symbol: usize, stream: usize, v: Complex64) {
        let o = self.offset(symbol, stream);
        self.data[o + subcarrier] = v;
    }

    pub fn column(&self, symbol: usize, stream: usize) -> &[Complex64] {
        let o = self.offset(symbol, stream);
        &self.data[o..o + self.subcarriers]
    }

    pub fn column_mut(&mut self, symbol: usize, stream: usize) -> &mut [Complex64] {
        let o = self.offset(symbol, stream);
        &mut self.data[o..o + self.subcarriers]
    }
}

/// Builds the terminal-side uplink pilot grid: each user puts its pilot on
/// its own subcarriers and leaves the rest of the band empty.
pub fn uplink_pilot_grid(cfg: &SystemConfig) -> ResourceGrid {
    let mut grid = ResourceGrid::new(cfg.used_subcarriers, 1, cfg.num_users);
    for n in 0..cfg.used_subcarriers {
        grid.set(n, 0, pilot_owner(n, cfg), pilot_value(n));
    }
    grid
}
