//! End-to-end checks through the public API only.

use mmsim_core::bs::PrecoderScheme;
use mmsim_core::channel::{draw_channel, draw_mismatch, NoiseSpec};
use mmsim_core::config::ChannelProfile;
use mmsim_core::sim::report::ber_csv;
use mmsim_core::sim::scenario::{sweep_snr, ScenarioSpec};
use mmsim_core::sim::{calibrate_frame, run_slot, CalibrationSettings, PropagationPath, SlotBits, SlotContext, SlotLayout};
use mmsim_core::{seed, CalibrationMode, Modulation, SystemConfig};

// Single-tap channel: with the 64-point FFT of `small`, multipath would
// add zero-hold error even without noise.
fn small(m: usize, k: usize) -> SystemConfig {
    SystemConfig {
        channel: ChannelProfile {
            max_delay_samples: 0,
            decay_samples: 1.0,
        },
        ..SystemConfig::small(m, k)
    }
}

#[test]
fn noiseless_slot_is_error_free_on_both_paths_with_calibration() {
    let cfg = SystemConfig {
        per_user_modulation: vec![Modulation::Qam16],
        calibration_mode: CalibrationMode::Precal,
        ..small(16, 4)
    };
    let channel = draw_channel(1, &cfg);
    let mismatch = draw_mismatch(2, &cfg);
    let settings = CalibrationSettings {
        noiseless: true,
        ..Default::default()
    };
    let table = calibrate_frame(&cfg, &mismatch, &settings, 3, 0).unwrap();
    assert!(table.valid);
    assert!(table.invariant_error(&mismatch, &cfg) < 1e-9);

    let layout = SlotLayout::from_config(&cfg).unwrap();
    let bits = SlotBits::random(&cfg, &layout, &mut seed::rng(4));
    for path in [PropagationPath::Frequency, PropagationPath::Time] {
        let ctx = SlotContext {
            cfg: &cfg,
            channel: &channel,
            mismatch: &mismatch,
            calibration: Some(&table),
            precoder: PrecoderScheme::Lmmse,
            noise: NoiseSpec::none(),
            path,
            instrument: false,
        };
        let r = run_slot(&ctx, &bits, &mut seed::rng(5)).unwrap();
        assert!(r.uplink.ber.iter().all(|b| b.errors == 0 && b.total > 0));
        assert!(r.downlink.ber.iter().all(|b| b.errors == 0 && b.total > 0));
    }
}

#[test]
fn sweep_is_independent_of_worker_count() {
    let spec = ScenarioSpec {
        system: small(8, 2),
        snr_db: vec![0.0, 6.0],
        frames_per_point: 2,
        precoders: vec![PrecoderScheme::Mrt, PrecoderScheme::Lmmse],
        calibration_modes: vec![CalibrationMode::Off, CalibrationMode::Precal],
        ..Default::default()
    };
    let one = ber_csv(&sweep_snr(&spec, Some(1)).unwrap());
    let four = ber_csv(&sweep_snr(&spec, Some(4)).unwrap());
    assert_eq!(one, four);
    // Header, then 2 SNR × 2 users × (UL + 4 DL variants).
    assert_eq!(one.lines().count(), 1 + 2 * 2 * 5);
    assert!(one.contains(",DL:lmmse:precal,"));
}

#[test]
fn higher_snr_lowers_uplink_ber() {
    let spec = ScenarioSpec {
        system: small(8, 2),
        snr_db: vec![-5.0, 5.0, 15.0],
        frames_per_point: 2,
        downlink: false,
        ..Default::default()
    };
    let report = sweep_snr(&spec, None).unwrap();
    let ber: Vec<f64> = report.points.iter().map(|p| p.ul_total().ber()).collect();
    assert!(ber[0] > ber[1] && ber[1] > ber[2], "{ber:?}");
}

#[test]
fn scenario_text_round_trips_and_rejects_typos() {
    let text = "snr_db = [1.0, inf]\nprecoders = [\"mrt\"]\n[system]\nnum_users = 4\n";
    let spec = ScenarioSpec::from_toml_str(text).unwrap();
    assert!(spec.snr_db[1].is_infinite());
    assert_eq!(ScenarioSpec::from_toml_str(&spec.to_toml_string().unwrap()).unwrap(), spec);
    assert!(ScenarioSpec::from_toml_str("[system]\nnum_user = 4\n").is_err());
    assert!(ScenarioSpec::from_toml_str("frames_per_point = 0\n").is_err());
}
