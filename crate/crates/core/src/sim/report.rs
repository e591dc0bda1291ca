//! CSV and text output of a sweep.

use std::fmt::Write as _;
use std::path::Path;

use super::scenario::SimReport;
use crate::error::{Error, Result};
use crate::ue::BerCount;

/// Two-sided 95 % normal quantile.
pub const Z_95: f64 = 1.959_963_984_540_054;

/// Normal-approximation interval `p ± z·sqrt(p(1−p)/n)`, clipped to
/// `[0, 1]`. Zero width when no errors were seen.
pub fn confidence_interval(c: &BerCount, z: f64) -> (f64, f64) {
    let p = c.ber();
    if c.total == 0 {
        return (0.0, 1.0);
    }
    let half = z * (p * (1.0 - p) / c.total as f64).sqrt();
    ((p - half).max(0.0), (p + half).min(1.0))
}

/// Direction column: `UL`, `DL` when there is a single downlink variant,
/// otherwise `DL:<precoder>:<calibration>`.
fn directions(report: &SimReport) -> Vec<String> {
    match report.variants.len() {
        1 => vec!["DL".to_string()],
        _ => report.variants.iter().map(|v| format!("DL:{}", v.label())).collect(),
    }
}

/// `snr_db,direction,user,ber,ci_low,ci_high`, one row per user and
/// direction.
pub fn ber_csv(report: &SimReport) -> String {
    let mut out = String::from("snr_db,direction,user,ber,ci_low,ci_high\n");
    let dirs = directions(report);
    let mut row = |snr: f64, dir: &str, user: usize, c: &BerCount| {
        let (lo, hi) = confidence_interval(c, Z_95);
        let _ = writeln!(out, "{snr},{dir},{user},{:.6e},{lo:.6e},{hi:.6e}", c.ber());
    };
    for p in &report.points {
        let mut block = |dir: &str, counts: &[BerCount]| {
            for (k, c) in counts.iter().enumerate() {
                row(p.snr_db, dir, k, c);
            }
        };
        block("UL", &p.ul);
        for (d, counts) in dirs.iter().zip(&p.dl) {
            block(d, counts);
        }
    }
    out
}

pub fn summary_text(report: &SimReport) -> String {
    let cfg = &report.system;
    let mut s = String::new();
    let _ = writeln!(s, "seed {}", report.seed);
    let _ = writeln!(
        s,
        "antennas {} users {} subcarriers {} fft {} frames/point {}",
        cfg.num_bs_antennas, cfg.num_users, cfg.used_subcarriers, cfg.fft_size, report.frames_per_point
    );
    let mods: Vec<String> = (0..cfg.num_users).map(|k| cfg.modulation(k).to_string()).collect();
    let _ = writeln!(s, "modulation {}", mods.join(" "));
    let _ = writeln!(s, "mismatch {}", if cfg.mismatch_enabled { "on" } else { "off" });
    let dirs = directions(report);
    for p in &report.points {
        let ul = p.ul_total();
        let _ = writeln!(s, "snr {} dB", p.snr_db);
        let _ = writeln!(s, "  UL ber {:.4e} ({} errors / {} bits)", ul.ber(), ul.errors, ul.total);
        for (v, d) in dirs.iter().enumerate() {
            let c = p.dl_total(v);
            let _ = writeln!(
                s,
                "  {d} ber {:.4e} ({} errors, {} erased / {} bits)",
                c.ber(),
                c.errors,
                c.erased,
                c.total
            );
        }
        if p.tables_total > 0 {
            let _ = writeln!(
                s,
                "  calibration tables valid {}/{} forced {} min quality {:.4}",
                p.tables_valid,
                p.tables_total,
                p.tables_forced,
                p.min_table_quality.unwrap_or(f64::NAN)
            );
        }
        if p.sync_trials > 0 {
            let _ = writeln!(s, "  sync locked {}/{}", p.sync_locked, p.sync_trials);
        }
    }
    s
}

/// Writes `ber.csv` and `summary.txt` into `dir`, creating it if needed.
pub fn emit_report(report: &SimReport, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (name, text) in [("ber.csv", ber_csv(report)), ("summary.txt", summary_text(report))] {
        let path = dir.join(name);
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bs::PrecoderScheme;
    use crate::config::{CalibrationMode, SystemConfig};
    use crate::sim::scenario::{sweep_snr, ScenarioSpec};

    #[test]
    fn interval_examples() {
        let c = BerCount {
            errors: 0,
            erased: 0,
            total: 1000,
        };
        assert_eq!(confidence_interval(&c, Z_95), (0.0, 0.0));
        let c = BerCount {
            errors: 100,
            erased: 0,
            total: 1000,
        };
        let (lo, hi) = confidence_interval(&c, Z_95);
        let half = Z_95 * (0.1f64 * 0.9 / 1000.0).sqrt();
        assert!((lo - (0.1 - half)).abs() < 1e-15 && (hi - (0.1 + half)).abs() < 1e-15);
    }

    #[test]
    fn row_count_and_empty_sweep() {
        let spec = ScenarioSpec {
            system: SystemConfig {
                fft_size: 256,
                ..SystemConfig::small(16, 12)
            },
            snr_db: vec![0.0, 5.0, 10.0],
            precoders: vec![PrecoderScheme::Lmmse],
            ..Default::default()
        };
        let mut r = sweep_snr(&spec, None).unwrap();
        assert_eq!(ber_csv(&r).lines().count(), 1 + 72);
        r.points.clear();
        assert_eq!(ber_csv(&r), "snr_db,direction,user,ber,ci_low,ci_high\n");
    }

    #[test]
    fn files_are_deterministic() {
        let spec = ScenarioSpec {
            system: SystemConfig::small(8, 2),
            snr_db: vec![5.0],
            frames_per_point: 2,
            precoders: vec![PrecoderScheme::Mrt, PrecoderScheme::Lmmse],
            calibration_modes: vec![CalibrationMode::Precal],
            ..Default::default()
        };
        let r = sweep_snr(&spec, Some(2)).unwrap();
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        emit_report(&r, a.path()).unwrap();
        emit_report(&sweep_snr(&spec, Some(1)).unwrap(), b.path()).unwrap();
        for f in ["ber.csv", "summary.txt"] {
            let x = std::fs::read(a.path().join(f)).unwrap();
            assert_eq!(x, std::fs::read(b.path().join(f)).unwrap());
        }
        let csv = std::fs::read_to_string(a.path().join("ber.csv")).unwrap();
        assert!(csv.starts_with("snr_db,direction,user,ber,ci_low,ci_high\n"));
        assert!(csv.contains("\n5,DL:mrt:precal,1,"));
        // UL and two DL variants, two users each.
        assert_eq!(csv.lines().count(), 1 + 3 * 2);
    }
}
