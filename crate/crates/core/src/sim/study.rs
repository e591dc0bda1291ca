//! Successful versus failed self-calibration, side by side.

use std::fmt::Write as _;

use num_complex::Complex64;
use rayon::prelude::*;

use super::scenario::total;
use super::{calibrate_frame, run_frame, CalibrationSettings, ChannelPolicy, DlVariant, FrameSetup, InvalidTablePolicy, PropagationPath};
use crate::bs::PrecoderScheme;
use crate::channel::{draw_mismatch, CalChannelParams, NoiseSpec};
use crate::config::{CalibrationMode, SystemConfig};
use crate::error::{Error, Result};
use crate::seed::{self, Domain};
use crate::ue::BerCount;

#[derive(Debug, Clone, PartialEq)]
pub struct StudyScenario {
    pub name: String,
    pub description: String,
    pub settings: CalibrationSettings,
}

/// A: clean sounding from the central element. B-interference: twelve
/// terminals at 10 dB keep transmitting during sounding. B-edge: corner
/// reference with weak coupling, so the far elements are sounded far below
/// the noise.
pub fn default_scenarios() -> Vec<StudyScenario> {
    let base = CalibrationSettings::default();
    let weak = CalChannelParams {
        adjacent_snr_db: 10.0,
        ..base.coupling
    };
    vec![
        StudyScenario {
            name: "A".into(),
            description: "clean sounding, central reference".into(),
            settings: base,
        },
        StudyScenario {
            name: "B-interference".into(),
            description: "terminals active during sounding".into(),
            settings: CalibrationSettings {
                interference_power: 12.0 * 10.0,
                ..base
            },
        },
        StudyScenario {
            name: "B-edge".into(),
            description: "corner reference, low coupling SNR".into(),
            settings: CalibrationSettings {
                ref_antenna: Some(0),
                coupling: weak,
                ..base
            },
        },
    ]
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudyResult {
    pub name: String,
    pub description: String,
    pub ref_antenna: usize,
    pub valid: bool,
    pub reason: Option<String>,
    pub min_quality: f64,
    /// Largest relative spread of `|d[m][n]|` across subcarriers.
    pub magnitude_spread: f64,
    /// Invariant error of the measured table (frame 0).
    pub invariant_error: f64,
    /// Invariant error when the same sounding is repeated without noise or
    /// interference.
    pub noiseless_invariant_error: f64,
    /// Downlink with the table rejected, i.e. uncalibrated if invalid.
    pub dl_fallback: BerCount,
    /// Downlink using the table regardless of its checks.
    pub dl_forced: BerCount,
    /// Slicer inputs of user 0 from the forced run.
    pub constellation: Vec<Complex64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationStudy {
    pub snr_db: f64,
    pub frames: u64,
    pub precoder: PrecoderScheme,
    pub results: Vec<StudyResult>,
}

impl CalibrationStudy {
    pub fn result(&self, name: &str) -> Option<&StudyResult> {
        self.results.iter().find(|r| r.name == name)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "calibration study at {} dB, {} frames, {} precoding",
            self.snr_db, self.frames, self.precoder
        );
        for r in &self.results {
            let _ = writeln!(s, "{} ({})", r.name, r.description);
            let _ = writeln!(s, "  reference antenna {}", r.ref_antenna);
            let _ = writeln!(
                s,
                "  table {}{}",
                if r.valid { "valid" } else { "INVALID" },
                r.reason.as_deref().map(|x| format!(": {x}")).unwrap_or_default()
            );
            let _ = writeln!(s, "  min quality {:.4}", r.min_quality);
            let _ = writeln!(s, "  magnitude spread {:.3e}", r.magnitude_spread);
            let _ = writeln!(s, "  invariant error {:.3e} (noiseless {:.3e})", r.invariant_error, r.noiseless_invariant_error);
            let _ = writeln!(s, "  DL ber with fallback {:.4e}", r.dl_fallback.ber());
            let _ = writeln!(s, "  DL ber forced {:.4e}", r.dl_forced.ber());
        }
        s
    }
}

fn magnitude_spread(table: &crate::bs::CalibrationTable) -> f64 {
    (0..table.num_antennas())
        .map(|m| {
            let mags: Vec<f64> = (0..table.num_subcarriers()).map(|n| table.at(m, n).norm()).collect();
            let mean = mags.iter().sum::<f64>() / mags.len() as f64;
            let (lo, hi) = mags.iter().fold((f64::INFINITY, 0.0f64), |(a, b), &v| (a.min(v), b.max(v)));
            (hi - lo) / mean
        })
        .fold(0.0, f64::max)
}

/// Runs each scenario's calibration and a calibrated downlink over
/// `frames` frames at `snr_db`.
pub fn calibration_study(
    cfg: &SystemConfig,
    scenarios: &[StudyScenario],
    precoder: PrecoderScheme,
    snr_db: f64,
    frames: u64,
    master_seed: u64,
) -> Result<CalibrationStudy> {
    if !cfg.mismatch_enabled {
        return Err(Error::InvalidConfig("the calibration study needs mismatch enabled".into()));
    }
    if frames == 0 {
        return Err(Error::InvalidConfig("frames must be positive".into()));
    }
    let variants = [DlVariant::new(precoder, CalibrationMode::Precal)];
    let results = scenarios
        .iter()
        .map(|sc| {
            let mismatch = draw_mismatch(seed::derive(master_seed, Domain::Mismatch, &[0]), cfg);
            let table = calibrate_frame(cfg, &mismatch, &sc.settings, master_seed, 0)?;
            let clean = CalibrationSettings {
                noiseless: true,
                interference_power: 0.0,
                ..sc.settings
            };
            let clean_table = calibrate_frame(cfg, &mismatch, &clean, master_seed, 0)?;

            let downlink = |policy: InvalidTablePolicy| -> Result<(BerCount, Vec<Complex64>)> {
                let settings = CalibrationSettings {
                    on_invalid: policy,
                    ..sc.settings
                };
                let outcomes = (0..frames)
                    .into_par_iter()
                    .map(|f| {
                        run_frame(&FrameSetup {
                            cfg,
                            master_seed,
                            frame: f,
                            snr_index: 0,
                            noise: NoiseSpec::from_snr_db(snr_db),
                            variants: &variants,
                            calibration: &settings,
                            channel_policy: ChannelPolicy::PerSlot,
                            path: PropagationPath::Frequency,
                            downlink: true,
                            sync: false,
                            instrument: f == 0,
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                let mut ber = BerCount::default();
                for o in &outcomes {
                    ber.merge(&total(&o.dl[0]));
                }
                let constellation = outcomes[0].instrumentation[0]
                    .as_ref()
                    .map(|i| i.constellation[0].clone())
                    .unwrap_or_default();
                Ok((ber, constellation))
            };
            let (dl_fallback, _) = downlink(InvalidTablePolicy::Fallback)?;
            let (dl_forced, constellation) = downlink(InvalidTablePolicy::Force)?;

            Ok(StudyResult {
                name: sc.name.clone(),
                description: sc.description.clone(),
                ref_antenna: table.ref_antenna,
                valid: table.valid,
                reason: table.reason.clone(),
                min_quality: table.quality.iter().copied().fold(f64::INFINITY, f64::min),
                magnitude_spread: magnitude_spread(&table),
                invariant_error: table.invariant_error(&mismatch, cfg),
                noiseless_invariant_error: clean_table.invariant_error(&mismatch, cfg),
                dl_fallback,
                dl_forced,
                constellation,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CalibrationStudy {
        snr_db,
        frames,
        precoder,
        results,
    })
}
