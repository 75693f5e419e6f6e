//! Uplink channel, achievable rate, and the computation / transmission time
//! and energy models. All quantities are SI (W, s, Hz, bits, J).

use rand::Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WirelessError {
    #[error("link down: achievable rate is zero")]
    LinkDown,
    #[error("invalid channel parameter: {0}")]
    InvalidParameter(String),
}

pub type Result<T> = std::result::Result<T, WirelessError>;

pub fn db_to_linear(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

pub fn dbm_to_watts(dbm: f64) -> f64 {
    db_to_linear(dbm - 30.0)
}

/// Static per-device hardware, radio and data parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MtdProfile {
    /// local sample count `d_k`
    pub samples: usize,
    /// seconds per sample per local iteration
    pub sec_per_sample: f64,
    pub cp_power_w: f64,
    pub circuit_power_w: f64,
    /// power amplifier drain efficiency in (0, 1]
    pub drain_efficiency: f64,
    pub bandwidth_hz: f64,
    pub distance_m: f64,
    pub max_power_w: f64,
    pub j_min: usize,
    pub j_max_cap: usize,
}

impl MtdProfile {
    /// Time per local iteration, `d_k * tau_k`.
    pub fn iteration_time(&self) -> f64 {
        self.samples as f64 * self.sec_per_sample
    }

    /// Energy per local iteration.
    pub fn iteration_energy(&self) -> f64 {
        self.iteration_time() * self.cp_power_w
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        let positive = [
            ("sec_per_sample", self.sec_per_sample),
            ("cp_power_w", self.cp_power_w),
            ("circuit_power_w", self.circuit_power_w),
            ("bandwidth_hz", self.bandwidth_hz),
            ("distance_m", self.distance_m),
            ("max_power_w", self.max_power_w),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(format!("{name} = {v} must be positive"));
            }
        }
        if !(self.drain_efficiency > 0.0 && self.drain_efficiency <= 1.0) {
            return Err(format!("drain_efficiency = {} outside (0, 1]", self.drain_efficiency));
        }
        if self.samples == 0 {
            return Err("samples must be >= 1".into());
        }
        if self.j_min == 0 || self.j_min > self.j_max_cap {
            return Err(format!("need 1 <= j_min ({}) <= j_max_cap ({})", self.j_min, self.j_max_cap));
        }
        Ok(())
    }
}

/// Cell-wide propagation constants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelConstants {
    pub path_loss_exponent: f64,
    pub carrier_hz: f64,
    /// mean of the exponentially distributed power gain
    pub fading_scale: f64,
    /// modulation/coding gap, linear
    pub gap: f64,
    /// noise power spectral density, W/Hz
    pub noise_psd: f64,
}

/// One device's link for one round.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelState {
    /// small-scale power gain `|h|²`
    pub gain: f64,
    pub kappa: f64,
    pub path_loss_exponent: f64,
    /// receiver noise power, W
    pub noise_w: f64,
    pub gap: f64,
}

impl ChannelState {
    /// SNR per watt of transmit power at distance `r`, divided by the gap.
    pub fn snr_per_watt_over_gap(&self, distance_m: f64) -> f64 {
        snr(1.0, self, distance_m) / self.gap
    }
}

pub fn path_loss_factor(carrier_hz: f64) -> f64 {
    (SPEED_OF_LIGHT / (4.0 * std::f64::consts::PI * carrier_hz)).powi(2)
}

/// Draws a Rayleigh-faded channel: the power gain is exponential with mean
/// `fading_scale`. Noise power is `N0 * B`.
pub fn draw_channel<R: Rng + ?Sized>(rng: &mut R, consts: &ChannelConstants, bandwidth_hz: f64) -> Result<ChannelState> {
    if !(consts.fading_scale > 0.0 && consts.carrier_hz > 0.0 && consts.noise_psd > 0.0 && bandwidth_hz > 0.0) {
        return Err(WirelessError::InvalidParameter(format!("{consts:?}, B = {bandwidth_hz}")));
    }
    if !(consts.gap >= 1.0) {
        return Err(WirelessError::InvalidParameter(format!("gap {} < 1", consts.gap)));
    }
    let exp = Exp::new(1.0 / consts.fading_scale).map_err(|e| WirelessError::InvalidParameter(e.to_string()))?;
    // an exact zero gain has probability zero but would break the SNR inverse
    let gain = exp.sample(rng).max(f64::MIN_POSITIVE);
    Ok(ChannelState {
        gain,
        kappa: path_loss_factor(consts.carrier_hz),
        path_loss_exponent: consts.path_loss_exponent,
        noise_w: consts.noise_psd * bandwidth_hz,
        gap: consts.gap,
    })
}

/// Received SNR `kappa P |h|² / (N r^alpha)`.
pub fn snr(power_w: f64, ch: &ChannelState, distance_m: f64) -> f64 {
    ch.kappa * power_w * ch.gain / (ch.noise_w * distance_m.powf(ch.path_loss_exponent))
}

/// Achievable rate `B log2(1 + snr / gap)` in bits/s.
pub fn rate(bandwidth_hz: f64, snr: f64, gap: f64) -> f64 {
    bandwidth_hz * (snr / gap).ln_1p() / std::f64::consts::LN_2
}

pub fn tx_time(bits: f64, rate_bps: f64) -> Result<f64> {
    if !(rate_bps > 0.0) {
        return Err(WirelessError::LinkDown);
    }
    Ok(bits / rate_bps)
}

/// Total radio power draw: radiated power through the amplifier plus
/// circuitry.
pub fn tx_power_total(power_w: f64, drain_efficiency: f64, circuit_power_w: f64) -> f64 {
    power_w / drain_efficiency + circuit_power_w
}

pub fn cp_time(iterations: usize, samples: usize, sec_per_sample: f64) -> f64 {
    iterations as f64 * samples as f64 * sec_per_sample
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoundEnergy {
    pub computation: f64,
    pub transmission: f64,
    pub total: f64,
}

pub fn round_energy(iterations: usize, power_w: f64, profile: &MtdProfile, ch: &ChannelState, bits: f64) -> Result<RoundEnergy> {
    let computation = cp_time(iterations, profile.samples, profile.sec_per_sample) * profile.cp_power_w;
    let r = rate(profile.bandwidth_hz, snr(power_w, ch, profile.distance_m), ch.gap);
    let transmission = tx_time(bits, r)? * tx_power_total(power_w, profile.drain_efficiency, profile.circuit_power_w);
    Ok(RoundEnergy { computation, transmission, total: computation + transmission })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn consts() -> ChannelConstants {
        ChannelConstants {
            path_loss_exponent: 4.0,
            carrier_hz: 32e6,
            fading_scale: 1.0,
            gap: db_to_linear(9.8),
            noise_psd: dbm_to_watts(-174.0),
        }
    }

    fn fixed_channel() -> ChannelState {
        ChannelState { gain: 1.0, kappa: 0.556, path_loss_exponent: 4.0, noise_w: 1e-12, gap: 1.0 }
    }

    fn profile() -> MtdProfile {
        MtdProfile {
            samples: 100,
            sec_per_sample: 1e-4,
            cp_power_w: 0.096,
            circuit_power_w: 0.0825,
            drain_efficiency: 0.45,
            bandwidth_hz: 250e3,
            distance_m: 100.0,
            max_power_w: 1.0,
            j_min: 10,
            j_max_cap: 1000,
        }
    }

    #[test]
    fn unit_conversions() {
        assert!((dbm_to_watts(-174.0) - 3.981e-21).abs() < 1e-23);
        assert!((db_to_linear(9.8) - 9.5499).abs() < 1e-3);
        assert_eq!(db_to_linear(0.0), 1.0);
    }

    #[test]
    fn channel_replay_and_path_loss() {
        let a = draw_channel(&mut ChaCha8Rng::seed_from_u64(3), &consts(), 250e3).unwrap();
        let b = draw_channel(&mut ChaCha8Rng::seed_from_u64(3), &consts(), 250e3).unwrap();
        assert_eq!(a, b);
        assert!((a.kappa - 0.556).abs() < 1e-3);
        assert!((a.noise_w - dbm_to_watts(-174.0) * 250e3).abs() < 1e-25);
    }

    #[test]
    fn fading_mean_matches_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let n = 100_000;
        let mean: f64 = (0..n).map(|_| draw_channel(&mut rng, &consts(), 250e3).unwrap().gain).sum::<f64>() / n as f64;
        assert!((mean - 1.0).abs() < 0.02, "mean gain {mean}");
    }

    #[test]
    fn snr_cases() {
        let ch = fixed_channel();
        assert_eq!(snr(0.0, &ch, 100.0), 0.0);
        assert!((snr(0.2, &ch, 100.0) - 2.0 * snr(0.1, &ch, 100.0)).abs() < 1e-9);
        // 0.556 * 0.1 / (1e-12 * 1e8)
        assert!((snr(0.1, &ch, 100.0) - 556.0).abs() < 1e-9);
    }

    #[test]
    fn rate_cases() {
        assert_eq!(rate(250e3, 0.0, 2.0), 0.0);
        assert!((rate(250e3, 3.0, 1.0) - 500e3).abs() < 1e-6);
        assert!((rate(250e3, 6.0, 2.0) - 500e3).abs() < 1e-6);
        assert!((rate(250e3, 9.55, 9.55) - 250e3).abs() < 1e-6);
    }

    #[test]
    fn transmission_time() {
        assert!((tx_time(875e3, 875e3).unwrap() - 1.0).abs() < 1e-15);
        assert!((tx_time(875e3, 1750e3).unwrap() - 0.5).abs() < 1e-15);
        assert_eq!(tx_time(875e3, 0.0).unwrap_err(), WirelessError::LinkDown);
    }

    #[test]
    fn power_and_compute_time() {
        assert_eq!(tx_power_total(0.3, 1.0, 0.0), 0.3);
        assert!((tx_power_total(0.09, 0.45, 0.0825) - 0.2825).abs() < 1e-15);
        assert!(tx_power_total(0.2, 0.45, 0.0825) > tx_power_total(0.1, 0.45, 0.0825));
        assert_eq!(cp_time(0, 100, 1e-4), 0.0);
        assert!((cp_time(80, 100, 1e-4) - 0.8).abs() < 1e-12);
        assert!((cp_time(160, 100, 1e-4) - 2.0 * cp_time(80, 100, 1e-4)).abs() < 1e-12);
    }

    #[test]
    fn energy_spot_values() {
        let p = profile();
        // pick a channel so that the rate at 90 mW makes tx_time exactly 0.2 s
        let bits = 875e3;
        let target_rate = bits / 0.2;
        let snr_needed = (2f64.powf(target_rate / p.bandwidth_hz) - 1.0) * 1.0;
        let mut ch = fixed_channel();
        ch.gain = snr_needed * ch.noise_w * p.distance_m.powi(4) / (ch.kappa * 0.09);
        let e = round_energy(80, 0.09, &p, &ch, bits).unwrap();
        assert!((e.computation - 0.0768).abs() < 1e-12);
        assert!((e.transmission - 0.0565).abs() < 1e-9);
        assert!((e.total - 0.1333).abs() < 1e-9);
    }

    #[test]
    fn computation_energy_is_linear_in_iterations() {
        let p = profile();
        let ch = fixed_channel();
        let e1 = round_energy(13, 0.5, &p, &ch, 1e5).unwrap().computation;
        let e2 = round_energy(26, 0.5, &p, &ch, 1e5).unwrap().computation;
        assert!((e2 - 2.0 * e1).abs() < 1e-15);
        assert!((e1 - 13.0 * p.iteration_energy()).abs() < 1e-15);
    }

    #[test]
    fn zero_power_is_link_down() {
        let p = profile();
        assert_eq!(round_energy(5, 0.0, &p, &fixed_channel(), 1e5).unwrap_err(), WirelessError::LinkDown);
    }
}
