//! Quick invariant suite, meant to run in seconds from the command line.

use num_complex::Complex64;
use rand::Rng;

use super::analysis::rate_report;
use super::{calibrate_frame, CalibrationSettings, Link, PropagationPath};
use crate::channel::{complex_gaussian, draw_channel, draw_mismatch, NoiseSpec};
use crate::config::{Modulation, SystemConfig};
use crate::dataflow::{conservation_check, run_data_plane, throughput_report, SubsystemTopology};
use crate::error::Result;
use crate::numerics::{gram_schmidt_qr, lmmse_weights, relative_frobenius, CMatrix, ExtendedChannelMatrix, LmmseMode};
use crate::phy::{detect_pss, generate_pss, ofdm_demodulate, ofdm_modulate, qam_demap, qam_map, CpLayout};
use crate::seed;

#[derive(Debug, Clone, PartialEq)]
pub struct InvariantResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &'static str, f: impl FnOnce() -> Result<(bool, String)>) -> InvariantResult {
    match f() {
        Ok((passed, detail)) => InvariantResult { name, passed, detail },
        Err(e) => InvariantResult {
            name,
            passed: false,
            detail: e.to_string(),
        },
    }
}

pub fn run_invariant_suite() -> Vec<InvariantResult> {
    let cfg = SystemConfig::default();
    let small = SystemConfig {
        num_bs_antennas: 16,
        num_users: 4,
        num_subsystems: 2,
        ..SystemConfig::default()
    };
    vec![
        check("rate arithmetic", || {
            let r = rate_report(&[Modulation::Qpsk; 8], &cfg);
            Ok((r.peak_rate == 268_800_000, format!("{} bit/s", r.peak_rate)))
        }),
        check("throughput accounting", || {
            let t = throughput_report(&SubsystemTopology::from_config(&cfg)?);
            let ok = (t.per_chain, t.per_subsystem, t.total) == (50_400_000, 806_400_000, 6_451_200_000);
            Ok((ok, format!("{} / {} / {} B/s", t.per_chain, t.per_subsystem, t.total)))
        }),
        check("QR-LMMSE matches direct inverse", || {
            let mut rng = seed::rng(1);
            let mut worst = 0.0f64;
            for _ in 0..100 {
                let k = rng.gen_range(1..=12);
                let m = rng.gen_range(k..=64);
                let sigma = rng.gen_range(0.01..=1.0);
                let h = CMatrix::from_fn(m, k, |_, _| complex_gaussian(&mut rng, 1.0));
                let qr = lmmse_weights(&h, sigma, LmmseMode::Qr)?;
                worst = worst.max(relative_frobenius(&qr, &lmmse_weights(&h, sigma, LmmseMode::Direct)?));
                let f = gram_schmidt_qr(&ExtendedChannelMatrix::new(&h, sigma))?;
                let eye = CMatrix::identity(k, k);
                worst = worst.max((f.q2() * &f.r - &eye * Complex64::from(sigma)).norm());
            }
            Ok((worst <= 1e-9, format!("worst residual {worst:.1e}")))
        }),
        check("QAM round trip", || {
            let mut ok = true;
            for m in Modulation::ALL {
                let bits: Vec<u8> = (0..m.bits_per_symbol() * m.order()).map(|i| (i % 3 % 2) as u8).collect();
                ok &= qam_demap(&qam_map(&bits, m)?, m) == bits;
            }
            Ok((ok, "all orders".into()))
        }),
        check("OFDM round trip", || {
            let mut rng = seed::rng(2);
            let layout = CpLayout::normal(&cfg);
            let x: Vec<Complex64> = (0..cfg.used_subcarriers).map(|_| complex_gaussian(&mut rng, 1.0)).collect();
            let y = ofdm_demodulate(&ofdm_modulate(&x, &layout, 0, &cfg)?, &layout, 0, &cfg)?;
            let err = x.iter().zip(&y).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max);
            Ok((err <= 1e-12, format!("max error {err:.1e}")))
        }),
        check("time and frequency paths agree", || {
            let ch = draw_channel(3, &small);
            let mm = draw_mismatch(4, &small);
            let f = Link::new(&small, &ch, &mm, PropagationPath::Frequency)?;
            let t = Link::new(&small, &ch, &mm, PropagationPath::Time)?;
            let mut rng = seed::rng(5);
            let x = vec![(0..small.num_users)
                .map(|_| (0..small.used_subcarriers).map(|_| complex_gaussian(&mut rng, 1.0)).collect())
                .collect::<Vec<Vec<Complex64>>>()];
            let a = f.uplink(&[1], &x, &NoiseSpec::none(), &mut rng)?;
            let b = t.uplink(&[1], &x, &NoiseSpec::none(), &mut rng)?;
            let err = (&a[0] - &b[0]).norm() / a[0].norm();
            Ok((err <= 1e-9, format!("relative gap {err:.1e}")))
        }),
        check("calibration invariant", || {
            let mm = draw_mismatch(6, &small);
            let settings = CalibrationSettings {
                noiseless: true,
                ..Default::default()
            };
            let t = calibrate_frame(&small, &mm, &settings, 6, 0)?;
            let err = t.invariant_error(&mm, &small);
            Ok((t.valid && err <= 1e-9, format!("invariant error {err:.1e}")))
        }),
        check("PSS noiseless detection", || {
            let t = generate_pss(&cfg)?.template;
            let mut rng = seed::rng(7);
            let mut hits = 0;
            for _ in 0..10 {
                let offset = rng.gen_range(0..4 * t.len());
                let mut rx = vec![Complex64::new(0.0, 0.0); 5 * t.len()];
                rx[offset..offset + t.len()].copy_from_slice(&t);
                hits += (detect_pss(&rx, &t, 4 * t.len())?.0 == offset) as u32;
            }
            Ok((hits == 10, format!("{hits}/10 exact")))
        }),
        check("dataflow split/combine identity", || {
            let topo = SubsystemTopology::from_config(&cfg)?;
            let mut rng = seed::rng(8);
            let grids: Vec<Vec<Vec<Complex64>>> = vec![(0..topo.num_antennas())
                .map(|_| (0..topo.used_subcarriers).map(|_| complex_gaussian(&mut rng, 1.0)).collect())
                .collect()];
            let out = run_data_plane(&grids, &topo, |c| c.payload.clone())?;
            conservation_check(&out.audit, &topo)?;
            Ok((out.grids == grids, format!("{} audit entries", out.audit.len())))
        }),
    ]
}
