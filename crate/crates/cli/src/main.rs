//! `mmsim`: run scenarios, the calibration study, rate arithmetic, channel
//! statistics and the invariant suite.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use mmsim_core::bs::PrecoderScheme;
use mmsim_core::channel::NoiseSpec;
use mmsim_core::numerics::CMatrix;
use mmsim_core::sim::analysis::{channel_stats, max_off_diagonal, rate_report};
use mmsim_core::sim::report::{emit_report, summary_text};
use mmsim_core::sim::scenario::{sweep_snr, ScenarioSpec};
use mmsim_core::sim::selftest::run_invariant_suite;
use mmsim_core::sim::study::{calibration_study, default_scenarios};
use mmsim_core::{Modulation, SystemConfig};

#[derive(Parser)]
#[command(name = "mmsim", version, about = "TDD massive-MIMO OFDM link-level simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Precoder {
    Mrt,
    Lmmse,
}

impl From<Precoder> for PrecoderScheme {
    fn from(p: Precoder) -> Self {
        match p {
            Precoder::Mrt => PrecoderScheme::Mrt,
            Precoder::Lmmse => PrecoderScheme::Lmmse,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Sweep the SNR points of a scenario file and write ber.csv and summary.txt.
    Run {
        scenario: PathBuf,
        /// Overrides the scenario's master seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Replaces the scenario's SNR points, comma separated, in dB.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        snr: Vec<f64>,
        /// Replaces the scenario's frames per SNR point.
        #[arg(long)]
        frames: Option<u64>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Worker threads; all cores by default.
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Contrast a clean self-calibration with interfered and edge-referenced ones.
    CalibrateStudy {
        /// Scenario file whose system section is used; defaults otherwise.
        #[arg(long)]
        scenario: Option<PathBuf>,
        #[arg(long, default_value_t = 10.0)]
        snr: f64,
        #[arg(long, default_value_t = 2)]
        frames: u64,
        #[arg(long, value_enum, default_value = "lmmse")]
        precoder: Precoder,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Peak rate, spectral efficiency and schedule-aware rate.
    Rate {
        /// One modulation per user, comma separated (bpsk, qpsk, 16qam, 64qam, 256qam).
        #[arg(long, value_delimiter = ',', conflicts_with = "users")]
        modulations: Vec<Modulation>,
        /// Number of users sharing `--modulation`.
        #[arg(long)]
        users: Option<usize>,
        #[arg(long, default_value = "qpsk")]
        modulation: Modulation,
    },
    /// Channel correlation matrices and power delay profile.
    Stats {
        #[arg(long)]
        scenario: Option<PathBuf>,
        #[arg(long, default_value_t = 10)]
        slots: u64,
        /// Pilot SNR in dB; noiseless when omitted.
        #[arg(long)]
        snr: Option<f64>,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 16)]
        lags: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the quick invariant suite; exits nonzero on any failure.
    SelfTest,
}

fn system_from(scenario: Option<&Path>) -> Result<SystemConfig> {
    match scenario {
        Some(p) => Ok(ScenarioSpec::load(p)?.system),
        None => Ok(SystemConfig::default()),
    }
}

fn write(dir: &Path, name: &str, text: &str) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let path = dir.join(name);
    fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
}

fn matrix_csv(r: &CMatrix) -> String {
    let mut s = String::new();
    for i in 0..r.nrows() {
        let row: Vec<String> = (0..r.ncols()).map(|j| format!("{:.6}", r[(i, j)].norm())).collect();
        let _ = writeln!(s, "{}", row.join(","));
    }
    s
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Run {
            scenario,
            seed,
            snr,
            frames,
            out,
            workers,
        } => {
            let mut spec = ScenarioSpec::load(&scenario)?;
            if seed.is_some() {
                spec.seed = seed;
            }
            if !snr.is_empty() {
                spec.snr_db = snr;
            }
            if let Some(f) = frames {
                spec.frames_per_point = f;
            }
            let spec = spec.validate()?;
            let report = sweep_snr(&spec, workers)?;
            emit_report(&report, &out)?;
            print!("{}", summary_text(&report));
            println!("wrote {}", out.display());
        }
        Command::CalibrateStudy {
            scenario,
            snr,
            frames,
            precoder,
            seed,
            out,
        } => {
            let cfg = system_from(scenario.as_deref())?;
            let study = calibration_study(&cfg, &default_scenarios(), precoder.into(), snr, frames, seed)?;
            let text = study.to_text();
            print!("{text}");
            if let Some(dir) = out {
                write(&dir, "study.txt", &text)?;
                for r in &study.results {
                    let mut csv = String::from("re,im\n");
                    for v in &r.constellation {
                        let _ = writeln!(csv, "{:.6},{:.6}", v.re, v.im);
                    }
                    write(&dir, &format!("constellation_{}.csv", r.name), &csv)?;
                }
            }
        }
        Command::Rate {
            modulations,
            users,
            modulation,
        } => {
            let mods = if modulations.is_empty() {
                vec![modulation; users.unwrap_or(8)]
            } else {
                modulations
            };
            if mods.is_empty() {
                bail!("no users given");
            }
            let r = rate_report(&mods, &SystemConfig::default());
            println!("users {}", mods.len());
            println!("peak rate {} bit/s ({} Mbit/s)", r.peak_rate, r.peak_rate as f64 / 1e6);
            println!("spectral efficiency {} bit/s/Hz", r.spectral_efficiency);
            println!("scheduled rate {} bit/s", r.scheduled_rate);
        }
        Command::Stats {
            scenario,
            slots,
            snr,
            seed,
            lags,
            out,
        } => {
            let cfg = system_from(scenario.as_deref())?;
            let noise = snr.map_or(NoiseSpec::none(), NoiseSpec::from_snr_db);
            let s = channel_stats(&cfg, slots, seed, &noise, lags)?;
            println!("estimates averaged {}", s.correlation.samples);
            println!("max off-diagonal |ue correlation| {:.4}", max_off_diagonal(&s.correlation.ue));
            println!("max off-diagonal |bs correlation| {:.4}", max_off_diagonal(&s.correlation.bs));
            let ns = s.rms_delay_samples / cfg.sample_rate_hz * 1e9;
            println!("rms delay spread {:.3} samples ({ns:.1} ns)", s.rms_delay_samples);
            let pdp: Vec<String> = s.power_delay_profile.iter().map(|p| format!("{p:.4}")).collect();
            println!("power delay profile {}", pdp.join(" "));
            if let Some(dir) = out {
                write(&dir, "ue_correlation.csv", &matrix_csv(&s.correlation.ue))?;
                write(&dir, "bs_correlation.csv", &matrix_csv(&s.correlation.bs))?;
                let mut csv = String::from("lag,power\n");
                for (i, p) in s.power_delay_profile.iter().enumerate() {
                    let _ = writeln!(csv, "{i},{p:.6e}");
                }
                write(&dir, "impulse_response.csv", &csv)?;
            }
        }
        Command::SelfTest => {
            let results = run_invariant_suite();
            let mut failed = 0;
            for r in &results {
                println!("{} {}: {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail);
                failed += usize::from(!r.passed);
            }
            if failed > 0 {
                println!("{failed} of {} invariants failed", results.len());
                return Ok(ExitCode::FAILURE);
            }
            println!("all {} invariants hold", results.len());
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
