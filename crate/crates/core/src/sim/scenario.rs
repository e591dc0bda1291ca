//! Scenario files and parallel SNR sweeps.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    run_frame, CalibrationSettings, ChannelPolicy, DlInstrumentation, DlVariant, FrameOutcome, FrameSetup,
    PropagationPath,
};
use crate::bs::PrecoderScheme;
use crate::channel::NoiseSpec;
use crate::config::{CalibrationMode, SystemConfig};
use crate::error::{Error, Result};
use crate::ue::BerCount;

/// A simulation run as read from a TOML scenario file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioSpec {
    pub system: SystemConfig,
    /// SNR points in dB, per subcarrier per receive antenna; `inf` runs
    /// without noise.
    pub snr_db: Vec<f64>,
    pub frames_per_point: u64,
    pub precoders: Vec<PrecoderScheme>,
    /// Downlink calibration modes to compare. Empty means the system's mode.
    pub calibration_modes: Vec<CalibrationMode>,
    pub downlink: bool,
    pub channel_policy: ChannelPolicy,
    pub path: PropagationPath,
    /// Master seed; falls back to `system.rng_seed`.
    pub seed: Option<u64>,
    pub calibration: CalibrationSettings,
    /// Run the synchronization search once per frame.
    pub sync: bool,
    /// Record combiner term powers and constellations.
    pub instrument: bool,
}

impl Default for ScenarioSpec {
    fn default() -> Self {
        Self {
            system: SystemConfig::default(),
            snr_db: vec![10.0],
            frames_per_point: 1,
            precoders: vec![PrecoderScheme::Lmmse],
            calibration_modes: Vec::new(),
            downlink: true,
            channel_policy: ChannelPolicy::PerSlot,
            path: PropagationPath::Frequency,
            seed: None,
            calibration: CalibrationSettings::default(),
            sync: false,
            instrument: false,
        }
    }
}

impl ScenarioSpec {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let spec: Self = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        spec.validate()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn validate(mut self) -> Result<Self> {
        self.system = self.system.validate()?;
        if self.snr_db.is_empty() || self.snr_db.iter().any(|s| s.is_nan() || *s == f64::NEG_INFINITY) {
            return Err(Error::InvalidConfig("snr_db needs at least one value, none NaN or -inf".into()));
        }
        if self.frames_per_point == 0 {
            return Err(Error::InvalidConfig("frames_per_point must be positive".into()));
        }
        if self.downlink && self.precoders.is_empty() {
            return Err(Error::InvalidConfig("downlink needs at least one precoder".into()));
        }
        if self.system.num_users > self.system.num_bs_antennas {
            return Err(Error::InvalidConfig("more users than antennas".into()));
        }
        Ok(self)
    }

    pub fn master_seed(&self) -> u64 {
        self.seed.unwrap_or(self.system.rng_seed)
    }

    /// Every precoder paired with every calibration mode.
    pub fn variants(&self) -> Vec<DlVariant> {
        if !self.downlink {
            return Vec::new();
        }
        let modes = if self.calibration_modes.is_empty() {
            vec![self.system.calibration_mode]
        } else {
            self.calibration_modes.clone()
        };
        self.precoders
            .iter()
            .flat_map(|&p| modes.iter().map(move |&c| DlVariant::new(p, c)))
            .collect()
    }
}

/// Aggregate over all frames at one SNR.
#[derive(Debug, Clone, PartialEq)]
pub struct PointResult {
    pub snr_db: f64,
    pub ul: Vec<BerCount>,
    /// `dl[variant][user]`.
    pub dl: Vec<Vec<BerCount>>,
    pub tables_total: u64,
    pub tables_valid: u64,
    /// Tables used despite failing their checks.
    pub tables_forced: u64,
    pub min_table_quality: Option<f64>,
    pub sync_trials: u64,
    pub sync_locked: u64,
    /// Instrumentation of the last frame, per variant.
    pub instrumentation: Vec<Option<DlInstrumentation>>,
}

impl PointResult {
    pub fn ul_total(&self) -> BerCount {
        total(&self.ul)
    }

    pub fn dl_total(&self, variant: usize) -> BerCount {
        total(&self.dl[variant])
    }
}

pub fn total(counts: &[BerCount]) -> BerCount {
    let mut t = BerCount::default();
    counts.iter().for_each(|c| t.merge(c));
    t
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimReport {
    pub seed: u64,
    pub system: SystemConfig,
    pub frames_per_point: u64,
    pub variants: Vec<DlVariant>,
    pub points: Vec<PointResult>,
}

fn reduce(snr_db: f64, k: usize, variants: usize, frames: Vec<FrameOutcome>) -> PointResult {
    let mut p = PointResult {
        snr_db,
        ul: vec![BerCount::default(); k],
        dl: vec![vec![BerCount::default(); k]; variants],
        tables_total: 0,
        tables_valid: 0,
        tables_forced: 0,
        min_table_quality: None,
        sync_trials: 0,
        sync_locked: 0,
        instrumentation: vec![None; variants],
    };
    for f in frames {
        p.ul.iter_mut().zip(&f.ul).for_each(|(a, c)| a.merge(c));
        for (acc, v) in p.dl.iter_mut().zip(&f.dl) {
            acc.iter_mut().zip(v).for_each(|(a, c)| a.merge(c));
        }
        if let Some(t) = &f.table {
            p.tables_total += 1;
            p.tables_valid += t.valid as u64;
            p.tables_forced += (t.applied && !t.valid) as u64;
            p.min_table_quality = Some(p.min_table_quality.map_or(t.min_quality, |q| q.min(t.min_quality)));
        }
        if let Some(s) = f.sync {
            p.sync_trials += 1;
            p.sync_locked += s.locked as u64;
        }
        for (slot, inst) in p.instrumentation.iter_mut().zip(f.instrumentation) {
            if inst.is_some() {
                *slot = inst;
            }
        }
    }
    p
}

/// Runs every SNR point. Frames are spread over `workers` threads (all
/// cores when `None`); results are reduced in frame order, so the report
/// does not depend on the worker count.
pub fn sweep_snr(spec: &ScenarioSpec, workers: Option<usize>) -> Result<SimReport> {
    let spec = spec.clone().validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.unwrap_or(0))
        .build()
        .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?;
    let variants = spec.variants();
    let seed = spec.master_seed();
    let mut points = Vec::with_capacity(spec.snr_db.len());
    for (i, &snr) in spec.snr_db.iter().enumerate() {
        let setup = |frame: u64| FrameSetup {
            cfg: &spec.system,
            master_seed: seed,
            frame,
            snr_index: i as u64,
            noise: NoiseSpec::from_snr_db(snr),
            variants: &variants,
            calibration: &spec.calibration,
            channel_policy: spec.channel_policy,
            path: spec.path,
            downlink: spec.downlink,
            sync: spec.sync,
            instrument: spec.instrument,
        };
        let frames: Vec<FrameOutcome> = pool.install(|| {
            (0..spec.frames_per_point)
                .into_par_iter()
                .map(|f| run_frame(&setup(f)))
                .collect::<Result<_>>()
        })?;
        points.push(reduce(snr, spec.system.num_users, variants.len(), frames));
    }
    Ok(SimReport {
        seed,
        system: spec.system.clone(),
        frames_per_point: spec.frames_per_point,
        variants,
        points,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ScenarioSpec {
        ScenarioSpec {
            system: SystemConfig::small(8, 2),
            snr_db: vec![0.0, 20.0],
            frames_per_point: 3,
            precoders: vec![PrecoderScheme::Mrt, PrecoderScheme::Lmmse],
            calibration_modes: vec![CalibrationMode::Off, CalibrationMode::Precal],
            ..Default::default()
        }
    }

    #[test]
    fn toml_round_trip() {
        let spec = tiny();
        let text = spec.to_toml_string().unwrap();
        assert_eq!(ScenarioSpec::from_toml_str(&text).unwrap(), spec);
    }

    #[test]
    fn partial_file_uses_defaults() {
        let spec = ScenarioSpec::from_toml_str("snr_db = [1.0, 2.0]\n[system]\nnum_users = 4\n").unwrap();
        assert_eq!(spec.system.num_users, 4);
        assert_eq!(spec.frames_per_point, 1);
        assert_eq!(spec.variants(), vec![DlVariant::new(PrecoderScheme::Lmmse, CalibrationMode::Precal)]);
        assert!(ScenarioSpec::from_toml_str("snr_db = []").is_err());
        assert!(ScenarioSpec::from_toml_str("snr_db = [nan]").is_err());
        assert!(ScenarioSpec::from_toml_str("snr_db = [inf]").is_ok());
        assert!(ScenarioSpec::from_toml_str("bogus = 1").is_err());
    }

    #[test]
    fn sweep_is_independent_of_worker_count() {
        let spec = tiny();
        let a = sweep_snr(&spec, Some(1)).unwrap();
        let b = sweep_snr(&spec, Some(3)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.points.len(), 2);
        assert_eq!(a.variants.len(), 4);
        assert_eq!(a.points[0].tables_total, 3);
        assert!(a.points[0].ul_total().ber() > a.points[1].ul_total().ber());
    }

    #[test]
    fn seed_changes_results() {
        let mut spec = tiny();
        spec.snr_db = vec![0.0];
        let a = sweep_snr(&spec, Some(1)).unwrap();
        spec.seed = Some(77);
        let b = sweep_snr(&spec, Some(1)).unwrap();
        assert_ne!(a.points[0].ul, b.points[0].ul);
    }
}
