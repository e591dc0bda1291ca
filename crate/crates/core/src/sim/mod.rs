//! Slot- and frame-level simulation of the TDD link.
//!
//! A slot runs uplink pilot, LS estimation, uplink data with LMMSE
//! detection, precoder computation, downlink pilot, and downlink data with
//! MRC at the terminals, in the order of the configured slot pattern. The
//! channel is static within a slot.
//!
//! Two propagation paths are available. The frequency path multiplies each
//! subcarrier by its effective channel matrix; the time path builds CP-OFDM
//! sample streams and convolves them with the tap delay lines. With the
//! cyclic prefix longer than the channel the two agree exactly when
//! noiseless.

pub mod analysis;
pub mod report;
pub mod scenario;
pub mod selftest;
pub mod study;

use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::bs::{
    apply_precal, build_precoder, estimate_uplink, run_reciprocity_calibration, CalEnvironment,
    CalibrationOptions, CalibrationTable, LmmseDetector, PrecoderScheme, UplinkChannelEstimate,
};
use crate::channel::{
    draw_cal_channel, draw_channel, draw_mismatch, freq_response, propagate_downlink, propagate_uplink,
    CalChannelParams, ChannelRealization, MismatchProfile, NoiseSpec,
};
use crate::config::{
    build_frame_schedule, pilot_owner, pilot_value, CalibrationMode, SymbolRole, SystemConfig,
};
use crate::error::{Error, Result};
use crate::numerics::CMatrix;
use crate::phy::{generate_pss, ofdm_demodulate, ofdm_modulate, pss::detect_pss, qam_demap, qam_map, CpLayout};
use crate::seed::{self, Domain, SimRng};
use crate::ue::{ber_count, ber_count_decisions, dl_effective_channel_estimate, mrc_decompose, mrc_detect, BerCount, Decisions};

const ZERO: Complex64 = Complex64::new(0.0, 0.0);

/// Smallest σ handed to the LMMSE kernels, so that noiseless runs still
/// have a well-posed regularized problem.
pub const MIN_REGULARIZER: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PropagationPath {
    #[default]
    Frequency,
    Time,
}

/// Symbol positions of one slot, taken from the slot pattern.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SlotLayout {
    pub ul_pilot: usize,
    pub ul_data: Vec<usize>,
    pub dl_pilot: usize,
    pub dl_data: Vec<usize>,
}

impl SlotLayout {
    pub fn from_config(cfg: &SystemConfig) -> Result<Self> {
        let find = |role: SymbolRole| -> Vec<usize> {
            cfg.slot_pattern
                .iter()
                .enumerate()
                .filter(|(_, r)| **r == role)
                .map(|(i, _)| i)
                .collect()
        };
        let one = |role: SymbolRole| -> Result<usize> {
            match find(role).as_slice() {
                [i] => Ok(*i),
                _ => Err(Error::InvalidConfig(format!("slot pattern needs exactly one {role:?}"))),
            }
        };
        let layout = Self {
            ul_pilot: one(SymbolRole::UlPilot)?,
            ul_data: find(SymbolRole::UlData),
            dl_pilot: one(SymbolRole::DlPilot)?,
            dl_data: find(SymbolRole::DlData),
        };
        if layout.ul_data.iter().any(|&s| s < layout.ul_pilot)
            || layout.dl_data.iter().any(|&s| s < layout.dl_pilot)
        {
            return Err(Error::InvalidConfig("data symbols must follow their pilot".into()));
        }
        Ok(layout)
    }
}

/// Transmitted payload of one slot, per user.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SlotBits {
    pub ul: Vec<Vec<u8>>,
    pub dl: Vec<Vec<u8>>,
}

impl SlotBits {
    pub fn random(cfg: &SystemConfig, layout: &SlotLayout, rng: &mut SimRng) -> Self {
        let mut draw = |symbols: usize| -> Vec<Vec<u8>> {
            (0..cfg.num_users)
                .map(|k| {
                    let len = symbols * cfg.used_subcarriers * cfg.modulation(k).bits_per_symbol();
                    (0..len).map(|_| rng.gen::<bool>() as u8).collect()
                })
                .collect()
        };
        let ul = draw(layout.ul_data.len());
        let dl = draw(layout.dl_data.len());
        Self { ul, dl }
    }
}

/// Per-user QAM symbols laid out as `[symbol][user][subcarrier]`.
fn map_user_bits(bits: &[Vec<u8>], symbols: usize, cfg: &SystemConfig) -> Result<Vec<Vec<Vec<Complex64>>>> {
    let n_sc = cfg.used_subcarriers;
    let per_user: Vec<Vec<Complex64>> = bits
        .iter()
        .enumerate()
        .map(|(k, b)| qam_map(b, cfg.modulation(k)))
        .collect::<Result<_>>()?;
    for s in &per_user {
        if s.len() != symbols * n_sc {
            return Err(Error::LengthMismatch {
                expected: symbols * n_sc,
                actual: s.len(),
            });
        }
    }
    Ok((0..symbols)
        .map(|j| per_user.iter().map(|s| s[j * n_sc..(j + 1) * n_sc].to_vec()).collect())
        .collect())
}

/// Propagation between the array and the terminals for one channel draw.
#[derive(Debug, Clone)]
pub struct Link<'a> {
    cfg: &'a SystemConfig,
    channel: &'a ChannelRealization,
    mismatch: &'a MismatchProfile,
    path: PropagationPath,
    layout: CpLayout,
    ul: Vec<CMatrix>,
    dl: Vec<CMatrix>,
}

impl<'a> Link<'a> {
    pub fn new(
        cfg: &'a SystemConfig,
        channel: &'a ChannelRealization,
        mismatch: &'a MismatchProfile,
        path: PropagationPath,
    ) -> Result<Self> {
        if path == PropagationPath::Time && mismatch.is_frequency_selective() {
            return Err(Error::InvalidConfig(
                "frequency-selective mismatch needs the frequency path".into(),
            ));
        }
        let fr = freq_response(channel, cfg);
        let ul = (0..cfg.used_subcarriers)
            .map(|n| fr.uplink_effective(n, mismatch, cfg))
            .collect();
        let dl = (0..cfg.used_subcarriers)
            .map(|n| fr.downlink_effective(n, mismatch, cfg))
            .collect();
        Ok(Self {
            cfg,
            channel,
            mismatch,
            path,
            layout: CpLayout::normal(cfg),
            ul,
            dl,
        })
    }

    /// `M×K` uplink matrix on subcarrier `n`, chain responses included.
    pub fn uplink_matrix(&self, n: usize) -> &CMatrix {
        &self.ul[n]
    }

    /// `K×M` downlink matrix on subcarrier `n`, chain responses included.
    pub fn downlink_matrix(&self, n: usize) -> &CMatrix {
        &self.dl[n]
    }

    pub fn mismatch(&self) -> &MismatchProfile {
        self.mismatch
    }

    /// Sends `x[j][k][n]` on slot symbols `symbols[j]` and returns what the
    /// array receives, one `M × N_sc` matrix per symbol.
    pub fn uplink(
        &self,
        symbols: &[usize],
        x: &[Vec<Vec<Complex64>>],
        noise: &NoiseSpec,
        rng: &mut SimRng,
    ) -> Result<Vec<CMatrix>> {
        let (m, n_sc) = (self.cfg.num_bs_antennas, self.cfg.used_subcarriers);
        match self.path {
            PropagationPath::Frequency => Ok(x
                .iter()
                .map(|cols| {
                    let mut y = CMatrix::zeros(m, n_sc);
                    for n in 0..n_sc {
                        let h = &self.ul[n];
                        for a in 0..m {
                            let mut acc = ZERO;
                            for (k, col) in cols.iter().enumerate() {
                                acc += h[(a, k)] * col[n];
                            }
                            y[(a, n)] = acc + noise.sample(rng);
                        }
                    }
                    y
                })
                .collect()),
            PropagationPath::Time => {
                let streams = self.modulate(symbols, x)?;
                let rx = propagate_uplink(&streams, self.channel, self.mismatch, noise, rng)?;
                let per_stream = self.demodulate(symbols, &rx)?;
                Ok((0..symbols.len())
                    .map(|j| CMatrix::from_fn(m, n_sc, |a, n| per_stream[a][j][n]))
                    .collect())
            }
        }
    }

    /// Sends per-antenna values `t[j][m][n]` and returns what each terminal
    /// receives, `[symbol][user][subcarrier]`.
    pub fn downlink(
        &self,
        symbols: &[usize],
        t: &[Vec<Vec<Complex64>>],
        noise: &NoiseSpec,
        rng: &mut SimRng,
    ) -> Result<Vec<Vec<Vec<Complex64>>>> {
        let (k, n_sc) = (self.cfg.num_users, self.cfg.used_subcarriers);
        match self.path {
            PropagationPath::Frequency => Ok(t
                .iter()
                .map(|cols| {
                    let mut y = vec![vec![ZERO; n_sc]; k];
                    for n in 0..n_sc {
                        let g = &self.dl[n];
                        for (u, yu) in y.iter_mut().enumerate() {
                            let mut acc = ZERO;
                            for (a, col) in cols.iter().enumerate() {
                                acc += g[(u, a)] * col[n];
                            }
                            yu[n] = acc + noise.sample(rng);
                        }
                    }
                    y
                })
                .collect()),
            PropagationPath::Time => {
                let streams = self.modulate(symbols, t)?;
                let rx = propagate_downlink(&streams, self.channel, self.mismatch, noise, rng)?;
                let per_stream = self.demodulate(symbols, &rx)?;
                Ok((0..symbols.len())
                    .map(|j| (0..k).map(|u| per_stream[u][j].clone()).collect())
                    .collect())
            }
        }
    }

    /// One sample stream per transmitter covering the given symbols back to
    /// back.
    fn modulate(&self, symbols: &[usize], cols: &[Vec<Vec<Complex64>>]) -> Result<Vec<Vec<Complex64>>> {
        let tx_count = cols.first().map_or(0, Vec::len);
        (0..tx_count)
            .map(|s| {
                let mut out = Vec::new();
                for (j, &sym) in symbols.iter().enumerate() {
                    out.extend(ofdm_modulate(&cols[j][s], &self.layout, sym, self.cfg)?);
                }
                Ok(out)
            })
            .collect()
    }

    /// `[receiver][symbol][subcarrier]`.
    fn demodulate(&self, symbols: &[usize], rx: &[Vec<Complex64>]) -> Result<Vec<Vec<Vec<Complex64>>>> {
        let n = self.cfg.fft_size;
        rx.iter()
            .map(|stream| {
                let mut offset = 0;
                symbols
                    .iter()
                    .map(|&sym| {
                        let len = self.layout.symbol_len(sym, n);
                        let v = ofdm_demodulate(&stream[offset..offset + len], &self.layout, sym, self.cfg);
                        offset += len;
                        v
                    })
                    .collect()
            })
            .collect()
    }
}

/// Uplink half of a slot.
#[derive(Debug, Clone)]
pub struct UplinkOutcome {
    pub estimate: UplinkChannelEstimate,
    pub bits: Vec<Vec<u8>>,
    pub ber: Vec<BerCount>,
}

pub fn run_uplink(
    link: &Link<'_>,
    layout: &SlotLayout,
    bits: &SlotBits,
    noise: &NoiseSpec,
    rng: &mut SimRng,
) -> Result<UplinkOutcome> {
    let cfg = link.cfg;
    let (k, n_sc) = (cfg.num_users, cfg.used_subcarriers);
    let mut pilot = vec![vec![ZERO; n_sc]; k];
    for n in 0..n_sc {
        pilot[pilot_owner(n, cfg)][n] = pilot_value(n);
    }
    let mut symbols = vec![layout.ul_pilot];
    symbols.extend(&layout.ul_data);
    let mut grids = vec![pilot];
    grids.extend(map_user_bits(&bits.ul, layout.ul_data.len(), cfg)?);
    let rx = link.uplink(&symbols, &grids, noise, rng)?;

    let estimate = estimate_uplink(&rx[0], cfg)?;
    let detector = LmmseDetector::new(&estimate, noise.sigma().max(MIN_REGULARIZER))?;
    let mut soft = vec![Vec::with_capacity(layout.ul_data.len() * n_sc); k];
    for y in &rx[1..] {
        for n in 0..n_sc {
            let s = detector.detect_unbiased(y.column(n).as_slice(), n);
            for (u, v) in s.into_iter().enumerate() {
                soft[u].push(v);
            }
        }
    }
    let decoded: Vec<Vec<u8>> = soft
        .iter()
        .enumerate()
        .map(|(u, s)| qam_demap(s, cfg.modulation(u)))
        .collect();
    let ber = decoded
        .iter()
        .zip(&bits.ul)
        .map(|(rx, tx)| ber_count(tx, rx))
        .collect::<Result<_>>()?;
    Ok(UplinkOutcome {
        estimate,
        bits: decoded,
        ber,
    })
}

/// Downlink precoding scheme together with where calibration enters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DlVariant {
    pub precoder: PrecoderScheme,
    pub calibration: CalibrationMode,
}

impl DlVariant {
    pub fn new(precoder: PrecoderScheme, calibration: CalibrationMode) -> Self {
        Self { precoder, calibration }
    }

    /// `scheme:mode`, for example `lmmse:precal`.
    pub fn label(&self) -> String {
        let scheme = match self.precoder {
            PrecoderScheme::Mrt => "mrt",
            PrecoderScheme::Lmmse => "lmmse",
        };
        let cal = match self.calibration {
            CalibrationMode::Off => "off",
            CalibrationMode::Precal => "precal",
            CalibrationMode::Postcal => "postcal",
        };
        format!("{scheme}:{cal}")
    }
}

/// Per-user powers of the combiner output terms, averaged over the slot's
/// downlink data subcarriers.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DlInstrumentation {
    pub desired_power: Vec<f64>,
    pub leakage_power: Vec<f64>,
    pub noise_power: Vec<f64>,
    /// Normalized combiner outputs handed to the slicer, per user.
    pub constellation: Vec<Vec<Complex64>>,
    /// Largest gap between each terminal's estimate and the product of its
    /// channel row and precoder column, on its pilot subcarriers.
    pub estimate_error: f64,
}

/// Downlink half of a slot.
#[derive(Debug, Clone)]
pub struct DownlinkOutcome {
    pub decisions: Vec<Decisions>,
    pub ber: Vec<BerCount>,
    pub instrumentation: Option<DlInstrumentation>,
}

/// Runs downlink pilot and data for one precoder variant. `table` must be
/// valid whenever the variant calibrates.
#[allow(clippy::too_many_arguments)]
pub fn run_downlink(
    link: &Link<'_>,
    layout: &SlotLayout,
    estimate: &UplinkChannelEstimate,
    variant: DlVariant,
    table: Option<&CalibrationTable>,
    bits: &SlotBits,
    noise: &NoiseSpec,
    instrument: bool,
    rng: &mut SimRng,
) -> Result<DownlinkOutcome> {
    let cfg = link.cfg;
    let (k, m, n_sc) = (cfg.num_users, cfg.num_bs_antennas, cfg.used_subcarriers);
    let need_table = || table.ok_or_else(|| Error::InvalidCalibration("no calibration table".into()));
    let (csi, postcal) = match variant.calibration {
        CalibrationMode::Off => (None, None),
        CalibrationMode::Precal => (Some(apply_precal(estimate, need_table()?)?), None),
        CalibrationMode::Postcal => {
            let t = need_table()?;
            if !t.valid {
                return Err(Error::InvalidCalibration(t.reason.clone().unwrap_or_default()));
            }
            (None, Some(t))
        }
    };
    let csi = csi.as_ref().unwrap_or(estimate);
    let rho = k as f64;
    let precoder = build_precoder(variant.precoder, csi, noise.sigma().max(MIN_REGULARIZER), rho)?;
    let transmit = |x: &[Complex64], n: usize| -> Result<Vec<Complex64>> {
        let mut t = precoder.apply(x, n);
        if let Some(table) = postcal {
            table.apply_postcal(&mut t, n)?;
        }
        Ok(t)
    };

    let data = map_user_bits(&bits.dl, layout.dl_data.len(), cfg)?;
    let mut symbols = vec![layout.dl_pilot];
    symbols.extend(&layout.dl_data);
    let mut tx: Vec<Vec<Vec<Complex64>>> = vec![vec![vec![ZERO; n_sc]; m]; symbols.len()];
    for n in 0..n_sc {
        let mut x = vec![ZERO; k];
        x[pilot_owner(n, cfg)] = pilot_value(n);
        for (a, v) in transmit(&x, n)?.into_iter().enumerate() {
            tx[0][a][n] = v;
        }
        for (j, grid) in data.iter().enumerate() {
            let x: Vec<Complex64> = grid.iter().map(|col| col[n]).collect();
            for (a, v) in transmit(&x, n)?.into_iter().enumerate() {
                tx[j + 1][a][n] = v;
            }
        }
    }
    let rx = link.downlink(&symbols, &tx, noise, rng)?;

    let h_tilde = dl_effective_channel_estimate(&rx[0], cfg)?;
    let mut decisions = Vec::with_capacity(k);
    let mut ber = Vec::with_capacity(k);
    for u in 0..k {
        let rx_u: Vec<Complex64> = rx[1..].iter().flat_map(|sym| sym[u].iter().copied()).collect();
        let h_u: Vec<Complex64> = (0..layout.dl_data.len())
            .flat_map(|_| h_tilde.user(u).iter().copied())
            .collect();
        let d = mrc_detect(&rx_u, &h_u, cfg.modulation(u))?;
        ber.push(ber_count_decisions(&bits.dl[u], &d)?);
        decisions.push(d);
    }

    let instrumentation = if instrument {
        let mut inst = DlInstrumentation {
            desired_power: vec![0.0; k],
            leakage_power: vec![0.0; k],
            noise_power: vec![0.0; k],
            constellation: vec![Vec::new(); k],
            estimate_error: 0.0,
        };
        let f_eff = |n: usize| -> CMatrix {
            let mut f = precoder.at(n).clone();
            if let Some(t) = postcal {
                for (a, mut row) in f.row_iter_mut().enumerate() {
                    let d = t.at(a, n);
                    row.iter_mut().for_each(|v| *v *= d);
                }
            }
            f
        };
        let count = (layout.dl_data.len() * n_sc) as f64;
        for n in 0..n_sc {
            let f = f_eff(n);
            let g = link.downlink_matrix(n);
            let owner = pilot_owner(n, cfg);
            let row: Vec<Complex64> = g.row(owner).iter().copied().collect();
            let oracle: Complex64 = (0..m).map(|a| row[a] * f[(a, owner)]).sum();
            inst.estimate_error = inst.estimate_error.max((h_tilde.at(owner, n) - oracle).norm());
            for (j, grid) in data.iter().enumerate() {
                let x: Vec<Complex64> = grid.iter().map(|col| col[n]).collect();
                for u in 0..k {
                    let row: Vec<Complex64> = g.row(u).iter().copied().collect();
                    let clean: Complex64 = (0..k)
                        .map(|v| (0..m).map(|a| row[a] * f[(a, v)]).sum::<Complex64>() * x[v])
                        .sum();
                    let y = rx[j + 1][u][n];
                    let ht = h_tilde.at(u, n);
                    let terms = mrc_decompose(ht, &row, &f, &x, u, y - clean);
                    inst.desired_power[u] += terms.desired.norm_sqr() / count;
                    inst.leakage_power[u] += terms.leakage.norm_sqr() / count;
                    inst.noise_power[u] += terms.noise.norm_sqr() / count;
                    if ht.norm() > 0.0 {
                        inst.constellation[u].push(y / ht);
                    }
                }
            }
        }
        Some(inst)
    } else {
        None
    };

    Ok(DownlinkOutcome {
        decisions,
        ber,
        instrumentation,
    })
}

/// Inputs of a single slot.
#[derive(Debug, Clone, Copy)]
pub struct SlotContext<'a> {
    pub cfg: &'a SystemConfig,
    pub channel: &'a ChannelRealization,
    pub mismatch: &'a MismatchProfile,
    /// Used according to `cfg.calibration_mode`.
    pub calibration: Option<&'a CalibrationTable>,
    pub precoder: PrecoderScheme,
    pub noise: NoiseSpec,
    pub path: PropagationPath,
    pub instrument: bool,
}

#[derive(Debug, Clone)]
pub struct SlotResult {
    pub uplink: UplinkOutcome,
    pub downlink: DownlinkOutcome,
}

/// One full TDD slot with the configured calibration mode.
pub fn run_slot(ctx: &SlotContext<'_>, bits: &SlotBits, rng: &mut SimRng) -> Result<SlotResult> {
    let layout = SlotLayout::from_config(ctx.cfg)?;
    let link = Link::new(ctx.cfg, ctx.channel, ctx.mismatch, ctx.path)?;
    let uplink = run_uplink(&link, &layout, bits, &ctx.noise, rng)?;
    let variant = DlVariant::new(ctx.precoder, ctx.cfg.calibration_mode);
    let downlink = run_downlink(
        &link,
        &layout,
        &uplink.estimate,
        variant,
        ctx.calibration,
        bits,
        &ctx.noise,
        ctx.instrument,
        rng,
    )?;
    Ok(SlotResult { uplink, downlink })
}

/// How often a new channel is drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelPolicy {
    #[default]
    PerSlot,
    PerFrame,
}

/// What to do with a calibration table that failed its checks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InvalidTablePolicy {
    /// Leave the downlink uncalibrated.
    #[default]
    Fallback,
    /// Use the measured coefficients anyway.
    Force,
}

/// Self-calibration set-up, run once per frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrationSettings {
    pub coupling: CalChannelParams,
    pub ref_antenna: Option<usize>,
    pub min_quality: f64,
    pub listen_threshold: f64,
    /// Power of terminal signals leaking into the sounding, relative to the
    /// sounding noise floor. Zero means the terminals stay silent.
    pub interference_power: f64,
    /// Sounding without receiver noise.
    pub noiseless: bool,
    pub on_invalid: InvalidTablePolicy,
}

impl Default for CalibrationSettings {
    fn default() -> Self {
        let opts = CalibrationOptions::default();
        Self {
            coupling: CalChannelParams::default(),
            ref_antenna: opts.ref_antenna,
            min_quality: opts.min_quality,
            listen_threshold: opts.listen_threshold,
            interference_power: 0.0,
            noiseless: false,
            on_invalid: InvalidTablePolicy::Fallback,
        }
    }
}

impl CalibrationSettings {
    pub fn options(&self) -> CalibrationOptions {
        CalibrationOptions {
            ref_antenna: self.ref_antenna,
            min_quality: self.min_quality,
            listen_threshold: self.listen_threshold,
        }
    }
}

/// Runs self-calibration for one frame.
pub fn calibrate_frame(
    cfg: &SystemConfig,
    mismatch: &MismatchProfile,
    settings: &CalibrationSettings,
    master: u64,
    frame: u64,
) -> Result<CalibrationTable> {
    let cal = draw_cal_channel(seed::derive(master, Domain::Calibration, &[frame, 0]), cfg, &settings.coupling);
    let env = CalEnvironment {
        channel: &cal,
        mismatch,
        noise: if settings.noiseless { NoiseSpec::none() } else { cal.noise() },
        interference_power: settings.interference_power,
    };
    let mut rng = seed::rng_for(master, Domain::Calibration, &[frame, 1]);
    run_reciprocity_calibration(&env, &settings.options(), cfg, &mut rng)
}

/// Timing recovered from the synchronization symbol.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyncResult {
    pub true_index: usize,
    pub detected_index: usize,
    pub metric: f64,
    /// Detected within the channel's delay spread of the true start.
    pub locked: bool,
}

/// Sends the synchronization symbol from antenna 0 at a random offset
/// within one frame and lets terminal `user` search the whole frame.
pub fn sync_frame(
    cfg: &SystemConfig,
    channel: &ChannelRealization,
    mismatch: &MismatchProfile,
    noise: &NoiseSpec,
    user: usize,
    rng: &mut SimRng,
) -> Result<SyncResult> {
    let pss = generate_pss(cfg)?;
    let layout = CpLayout::normal(cfg);
    let frame_len = layout.slot_len(cfg.fft_size) * 2 * crate::config::SUBFRAMES_PER_FRAME;
    let cp = layout.cp(0);
    let offset = rng.gen_range(0..frame_len);
    let mut symbol = pss.template[pss.template.len() - cp..].to_vec();
    symbol.extend_from_slice(&pss.template);
    let total = frame_len + symbol.len() + cfg.fft_size;
    let mut rx = vec![ZERO; total];
    let g = mismatch.bs_tx[0] * mismatch.ue_rx[user];
    for tap in channel.taps(0, user) {
        for (i, s) in symbol.iter().enumerate() {
            let at = offset + tap.delay + i;
            if at < total {
                rx[at] += g * tap.gain * s;
            }
        }
    }
    for v in rx.iter_mut() {
        *v += noise.sample(rng);
    }
    let true_index = offset + cp;
    let (detected_index, metric) = detect_pss(&rx, &pss.template, frame_len + cp + 1)?;
    let locked = detected_index.abs_diff(true_index) <= channel.max_delay();
    Ok(SyncResult {
        true_index,
        detected_index,
        metric,
        locked,
    })
}

/// Everything needed to run one frame.
#[derive(Debug, Clone)]
pub struct FrameSetup<'a> {
    pub cfg: &'a SystemConfig,
    pub master_seed: u64,
    pub frame: u64,
    /// Index of the SNR point, used only for seed derivation.
    pub snr_index: u64,
    pub noise: NoiseSpec,
    pub variants: &'a [DlVariant],
    pub calibration: &'a CalibrationSettings,
    pub channel_policy: ChannelPolicy,
    pub path: PropagationPath,
    pub downlink: bool,
    pub sync: bool,
    pub instrument: bool,
}

/// Summary of the frame's calibration table.
#[derive(Debug, Clone, PartialEq)]
pub struct TableSummary {
    pub valid: bool,
    pub reason: Option<String>,
    pub min_quality: f64,
    /// Whether the downlink used it (valid, or forced).
    pub applied: bool,
}

#[derive(Debug, Clone)]
pub struct FrameOutcome {
    pub ul: Vec<BerCount>,
    /// Indexed like `FrameSetup::variants`.
    pub dl: Vec<Vec<BerCount>>,
    pub table: Option<TableSummary>,
    pub sync: Option<SyncResult>,
    /// Instrumentation of the last data slot, per variant.
    pub instrumentation: Vec<Option<DlInstrumentation>>,
}

/// Runs every data slot of a frame. Mismatch and calibration are drawn once
/// per frame; the channel per slot or per frame.
pub fn run_frame(setup: &FrameSetup<'_>) -> Result<FrameOutcome> {
    let cfg = setup.cfg;
    let master = setup.master_seed;
    let f = setup.frame;
    let layout = SlotLayout::from_config(cfg)?;
    let schedule = build_frame_schedule(cfg);
    let mismatch = draw_mismatch(seed::derive(master, Domain::Mismatch, &[f]), cfg);

    let needs_table = setup.downlink && setup.variants.iter().any(|v| v.calibration.enabled());
    let mut table = None;
    let mut summary = None;
    if needs_table {
        let mut t = calibrate_frame(cfg, &mismatch, setup.calibration, master, f)?;
        let min_quality = t.quality.iter().copied().fold(f64::INFINITY, f64::min);
        let valid = t.valid;
        let reason = t.reason.clone();
        let applied = valid || setup.calibration.on_invalid == InvalidTablePolicy::Force;
        if applied && !valid {
            t.valid = true;
        }
        summary = Some(TableSummary {
            valid,
            reason,
            min_quality,
            applied,
        });
        if applied {
            table = Some(t);
        }
    }

    let draw = |path: &[u64]| draw_channel(seed::derive(master, Domain::Channel, path), cfg);
    let frame_channel = (setup.channel_policy == ChannelPolicy::PerFrame).then(|| draw(&[f]));

    let k = cfg.num_users;
    let mut ul = vec![BerCount::default(); k];
    let mut dl = vec![vec![BerCount::default(); k]; setup.variants.len()];
    let mut instrumentation = vec![None; setup.variants.len()];
    let mut sync = None;

    for (slot_no, (subframe, slot)) in schedule.data_slots().enumerate() {
        let slot_id = (subframe * crate::config::SLOTS_PER_SUBFRAME + slot) as u64;
        let owned;
        let channel = match &frame_channel {
            Some(c) => c,
            None => {
                owned = draw(&[f, slot_id]);
                &owned
            }
        };
        if setup.sync && slot_no == 0 {
            let mut rng = seed::rng_for(master, Domain::Sync, &[setup.snr_index, f]);
            sync = Some(sync_frame(cfg, channel, &mismatch, &setup.noise, 0, &mut rng)?);
        }
        let link = Link::new(cfg, channel, &mismatch, setup.path)?;
        let bits = SlotBits::random(cfg, &layout, &mut seed::rng_for(master, Domain::Bits, &[f, slot_id]));
        let mut rng = seed::rng_for(master, Domain::Noise, &[setup.snr_index, f, slot_id, 0]);
        let up = run_uplink(&link, &layout, &bits, &setup.noise, &mut rng)?;
        for (acc, c) in ul.iter_mut().zip(&up.ber) {
            acc.merge(c);
        }
        if !setup.downlink {
            continue;
        }
        for (vi, &variant) in setup.variants.iter().enumerate() {
            let effective = if variant.calibration.enabled() && table.is_none() {
                DlVariant {
                    calibration: CalibrationMode::Off,
                    ..variant
                }
            } else {
                variant
            };
            let mut rng = seed::rng_for(master, Domain::Noise, &[setup.snr_index, f, slot_id, 1 + vi as u64]);
            let out = run_downlink(
                &link,
                &layout,
                &up.estimate,
                effective,
                table.as_ref(),
                &bits,
                &setup.noise,
                setup.instrument,
                &mut rng,
            )?;
            for (acc, c) in dl[vi].iter_mut().zip(&out.ber) {
                acc.merge(c);
            }
            if out.instrumentation.is_some() {
                instrumentation[vi] = out.instrumentation;
            }
        }
    }
    Ok(FrameOutcome {
        ul,
        dl,
        table: summary,
        sync,
        instrumentation,
    })
}
