//! Inputs shared by the benchmarks in `benches/`.

use mmsim_core::bs::PrecoderScheme;
use mmsim_core::channel::{complex_gaussian, draw_channel, ChannelRealization, MismatchProfile, NoiseSpec};
use mmsim_core::numerics::CMatrix;
use mmsim_core::sim::{PropagationPath, SlotBits, SlotContext, SlotLayout};
use mmsim_core::{seed, CalibrationMode, SystemConfig};

/// `m×k` i.i.d. unit-variance complex Gaussian matrix.
pub fn gaussian_matrix(m: usize, k: usize, seed: u64) -> CMatrix {
    let mut rng = seed::rng(seed);
    CMatrix::from_fn(m, k, |_, _| complex_gaussian(&mut rng, 1.0))
}

/// Everything one uncalibrated slot needs, owned.
pub struct SlotFixture {
    pub cfg: SystemConfig,
    pub channel: ChannelRealization,
    pub mismatch: MismatchProfile,
    pub bits: SlotBits,
}

impl SlotFixture {
    pub fn new(m: usize, k: usize) -> Self {
        let cfg = SystemConfig {
            num_bs_antennas: m,
            num_users: k,
            mismatch_enabled: false,
            calibration_mode: CalibrationMode::Off,
            ..SystemConfig::default()
        };
        let channel = draw_channel(1, &cfg);
        let mismatch = MismatchProfile::ideal(m, k);
        let layout = SlotLayout::from_config(&cfg).expect("default slot pattern");
        let bits = SlotBits::random(&cfg, &layout, &mut seed::rng(3));
        Self {
            cfg,
            channel,
            mismatch,
            bits,
        }
    }

    pub fn context(&self, snr_db: f64) -> SlotContext<'_> {
        SlotContext {
            cfg: &self.cfg,
            channel: &self.channel,
            mismatch: &self.mismatch,
            calibration: None,
            precoder: PrecoderScheme::Lmmse,
            noise: NoiseSpec::from_snr_db(snr_db),
            path: PropagationPath::Frequency,
            instrument: false,
        }
    }
}
