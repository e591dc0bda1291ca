//! Figures of merit that need no Monte-Carlo: rates and channel statistics.

use num_complex::Complex64;

use super::{Link, PropagationPath};
use crate::bs::{estimate_uplink, UplinkChannelEstimate};
use crate::channel::{draw_channel, freq_response, FreqResponse, MismatchProfile, NoiseSpec};
use crate::config::{build_frame_schedule, map_to_fft_bins, pilot_owner, pilot_value, Modulation, SystemConfig};
use crate::error::{Error, Result};
use crate::numerics::{CMatrix, DftDirection, UnitaryDft};
use crate::seed::{self, Domain};

#[derive(Debug, Clone, PartialEq)]
pub struct RateReport {
    /// Every symbol of every slot carrying data, bits/s.
    pub peak_rate: u64,
    /// `peak_rate / W`, bit/s/Hz.
    pub spectral_efficiency: f64,
    /// Peak rate scaled by the share of data symbols in the frame, bits/s.
    pub scheduled_rate: u64,
}

/// `peak = Σ_k bits_k · N_sc · symbols/s`.
pub fn rate_report(modulations: &[Modulation], cfg: &SystemConfig) -> RateReport {
    let bits: u64 = modulations.iter().map(|m| m.bits_per_symbol() as u64).sum();
    let peak_rate = bits * cfg.used_subcarriers as u64 * cfg.symbol_rate();
    let schedule = build_frame_schedule(cfg);
    let scheduled_rate = peak_rate * schedule.data_symbols() as u64 / schedule.total_symbols() as u64;
    RateReport {
        peak_rate,
        spectral_efficiency: peak_rate as f64 / cfg.bandwidth_hz,
        scheduled_rate,
    }
}

/// Normalized spatial correlations of a set of channel estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelCorrelation {
    /// `M×M`, unit diagonal.
    pub bs: CMatrix,
    /// `K×K`, unit diagonal.
    pub ue: CMatrix,
    /// Number of `M×K` matrices averaged.
    pub samples: usize,
}

fn unit_diagonal(mut r: CMatrix) -> CMatrix {
    let d: Vec<f64> = (0..r.nrows()).map(|i| r[(i, i)].re.max(f64::MIN_POSITIVE).sqrt()).collect();
    for i in 0..r.nrows() {
        for j in 0..r.ncols() {
            r[(i, j)] /= d[i] * d[j];
        }
    }
    r
}

/// Averages `Ĥ·Ĥᴴ` and `Ĥᴴ·Ĥ` over every distinct estimate block.
pub fn channel_correlation(estimates: &[UplinkChannelEstimate]) -> Result<ChannelCorrelation> {
    let first = estimates
        .first()
        .ok_or_else(|| Error::InvalidConfig("no channel estimates".into()))?;
    let (m, k) = (first.num_bs_antennas(), first.num_users());
    let mut bs = CMatrix::zeros(m, m);
    let mut ue = CMatrix::zeros(k, k);
    let mut samples = 0;
    for est in estimates {
        if est.num_bs_antennas() != m || est.num_users() != k {
            return Err(Error::LengthMismatch {
                expected: m * k,
                actual: est.num_bs_antennas() * est.num_users(),
            });
        }
        for h in est.blocks() {
            bs += h * h.adjoint();
            ue += h.adjoint() * h;
            samples += 1;
        }
    }
    Ok(ChannelCorrelation {
        bs: unit_diagonal(bs),
        ue: unit_diagonal(ue),
        samples,
    })
}

/// Power delay profile of one link: inverse transform of its response on
/// the used subcarriers, first `lags` samples.
pub fn impulse_response(freq: &[Complex64], lags: usize, cfg: &SystemConfig) -> Result<Vec<f64>> {
    let mut bins = map_to_fft_bins(freq, cfg)?;
    UnitaryDft::new(cfg.fft_size)?.process(&mut bins, DftDirection::Inverse);
    // A tap of gain g shows up with amplitude g·N_sc/sqrt(N) after the
    // unitary inverse transform; rescale so an on-grid tap reads |g|².
    let scale = cfg.fft_size as f64 / (cfg.used_subcarriers as f64).powi(2);
    Ok(bins.iter().take(lags).map(|v| v.norm_sqr() * scale).collect())
}

/// `[user][antenna][lag]` power delay profiles of every link.
pub fn impulse_responses(fr: &FreqResponse, lags: usize, cfg: &SystemConfig) -> Result<Vec<Vec<Vec<f64>>>> {
    (0..cfg.num_users)
        .map(|k| {
            (0..cfg.num_bs_antennas)
                .map(|m| {
                    let h: Vec<Complex64> = (0..fr.len()).map(|n| fr.at(n)[(m, k)]).collect();
                    impulse_response(&h, lags, cfg)
                })
                .collect()
        })
        .collect()
}

/// Correlations and mean power delay profile measured over `slots`
/// independent channel draws.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelStats {
    pub correlation: ChannelCorrelation,
    /// Mean over all links, first `lags` samples.
    pub power_delay_profile: Vec<f64>,
    /// RMS delay spread of the mean profile, in samples.
    pub rms_delay_samples: f64,
}

/// Sends uplink pilots through `slots` channel draws, estimates each, and
/// collects the statistics. Mismatch is left out so the correlations
/// describe the propagation channel alone.
pub fn channel_stats(cfg: &SystemConfig, slots: u64, master: u64, noise: &NoiseSpec, lags: usize) -> Result<ChannelStats> {
    if slots == 0 {
        return Err(Error::InvalidConfig("slots must be positive".into()));
    }
    let mm = MismatchProfile::ideal(cfg.num_bs_antennas, cfg.num_users);
    let mut pilot = vec![vec![Complex64::new(0.0, 0.0); cfg.used_subcarriers]; cfg.num_users];
    for n in 0..cfg.used_subcarriers {
        pilot[pilot_owner(n, cfg)][n] = pilot_value(n);
    }
    let mut estimates = Vec::with_capacity(slots as usize);
    let mut pdp = vec![0.0; lags];
    let mut links = 0usize;
    for s in 0..slots {
        let ch = draw_channel(seed::derive(master, Domain::Channel, &[s]), cfg);
        let link = Link::new(cfg, &ch, &mm, PropagationPath::Frequency)?;
        let mut rng = seed::rng_for(master, Domain::Noise, &[s]);
        let rx = link.uplink(&[0], std::slice::from_ref(&pilot), noise, &mut rng)?;
        estimates.push(estimate_uplink(&rx[0], cfg)?);
        for user in impulse_responses(&freq_response(&ch, cfg), lags, cfg)? {
            for profile in user {
                pdp.iter_mut().zip(&profile).for_each(|(a, b)| *a += b);
                links += 1;
            }
        }
    }
    pdp.iter_mut().for_each(|v| *v /= links as f64);
    let energy: f64 = pdp.iter().sum();
    let mean: f64 = pdp.iter().enumerate().map(|(i, p)| i as f64 * p).sum::<f64>() / energy;
    let second: f64 = pdp.iter().enumerate().map(|(i, p)| (i as f64).powi(2) * p).sum::<f64>() / energy;
    Ok(ChannelStats {
        correlation: channel_correlation(&estimates)?,
        power_delay_profile: pdp,
        rms_delay_samples: (second - mean * mean).max(0.0).sqrt(),
    })
}

/// Smallest number of leading lags holding `fraction` of the energy.
pub fn energy_window(profile: &[f64], fraction: f64) -> usize {
    let total: f64 = profile.iter().sum();
    let mut acc = 0.0;
    for (i, p) in profile.iter().enumerate() {
        acc += p;
        if acc >= fraction * total {
            return i + 1;
        }
    }
    profile.len()
}

/// Largest off-diagonal magnitude.
pub fn max_off_diagonal(r: &CMatrix) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..r.nrows() {
        for j in 0..r.ncols() {
            if i != j {
                worst = worst.max(r[(i, j)].norm());
            }
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::ChannelRealization;
    use crate::config::ChannelProfile;

    #[test]
    fn published_rates() {
        let cfg = SystemConfig::default();
        let r = rate_report(&[Modulation::Qpsk; 8], &cfg);
        assert_eq!(r.peak_rate, 268_800_000);
        assert_eq!(r.scheduled_rate, 268_800_000 * 54 / 140);
        let mut mixed = vec![Modulation::Qpsk; 6];
        mixed.extend([Modulation::Qam16; 2]);
        assert_eq!(rate_report(&mixed, &cfg).spectral_efficiency, 16.8);
        assert_eq!(rate_report(&[Modulation::Qam256; 12], &cfg).spectral_efficiency, 80.64);
    }

    #[test]
    fn single_tap_peak_at_its_delay() {
        let cfg = SystemConfig::small(2, 1);
        for d in 0..4 {
            let ch = ChannelRealization::single_tap(2, 1, d);
            let fr = freq_response(&ch, &cfg);
            let p = &impulse_responses(&fr, 16, &cfg).unwrap()[0][1];
            let peak = p.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
            assert_eq!(peak, d);
            assert!((p[d] - 1.0).abs() < 1e-9, "{}", p[d]);
        }
    }

    #[test]
    fn default_profile_is_compact() {
        let cfg = SystemConfig {
            num_bs_antennas: 8,
            ..SystemConfig::default()
        };
        let ch = draw_channel(4, &cfg);
        let fr = freq_response(&ch, &cfg);
        let mut pdp = vec![0.0; 32];
        for user in impulse_responses(&fr, 32, &cfg).unwrap() {
            for link in user {
                pdp.iter_mut().zip(&link).for_each(|(a, b)| *a += b);
            }
        }
        // Band-limiting smears each tap over neighbouring lags; the energy
        // still sits within the first few samples.
        assert!(energy_window(&pdp, 0.9) <= 3, "{pdp:?}");
        assert_eq!(ChannelProfile::default().max_delay_samples, 3);
    }

    #[test]
    fn iid_user_correlation_vanishes() {
        let cfg = SystemConfig {
            num_bs_antennas: 64,
            channel: ChannelProfile {
                max_delay_samples: 0,
                decay_samples: 1.0,
            },
            ..SystemConfig::small(64, 4)
        };
        let mm = MismatchProfile::ideal(64, 4);
        let ests: Vec<_> = (0..200)
            .map(|s| {
                let ch = draw_channel(s, &cfg);
                let fr = freq_response(&ch, &cfg);
                let rx = CMatrix::from_fn(64, cfg.used_subcarriers, |m, n| {
                    fr.uplink_effective(n, &mm, &cfg)[(m, crate::config::pilot_owner(n, &cfg))]
                        * crate::config::pilot_value(n)
                });
                estimate_uplink(&rx, &cfg).unwrap()
            })
            .collect();
        let c = channel_correlation(&ests).unwrap();
        assert!(c.samples * 64 >= 10_000);
        assert!(max_off_diagonal(&c.ue) <= 0.1, "{}", max_off_diagonal(&c.ue));
        for i in 0..4 {
            assert!((c.ue[(i, i)].re - 1.0).abs() < 1e-12);
        }
        assert!(channel_correlation(&[]).is_err());
    }

    #[test]
    fn measured_stats_have_unit_diagonals_and_short_spread() {
        let cfg = SystemConfig {
            num_bs_antennas: 16,
            num_users: 4,
            num_subsystems: 2,
            ..SystemConfig::default()
        };
        let s = channel_stats(&cfg, 3, 1, &NoiseSpec::none(), 16).unwrap();
        assert_eq!(s.correlation.bs.nrows(), 16);
        assert_eq!(s.correlation.samples, 3 * 1200 / 4);
        assert!(s.rms_delay_samples > 0.3 && s.rms_delay_samples < 2.0, "{}", s.rms_delay_samples);
        assert!(channel_stats(&cfg, 0, 1, &NoiseSpec::none(), 16).is_err());
    }
}
