//! Simulated drifting interferometer and photon detection.
//!
//! Temperature, humidity and laser power follow Ornstein–Uhlenbeck
//! processes. The zero-phase voltage integrates their deviations from the
//! set points,
//!
//! ```text
//! dV0 = (k_T·ΔT_int + k_H·ΔH + k_P·ΔP)·dt + σ_V·dW
//! ```
//!
//! where `T_int` is the interferometer temperature, a first-order lag of the
//! ambient reading (equal to it when the lag is zero). The ambient reading
//! may carry a periodic thermostat cycle on top of its OU component. Detection follows a
//! phenomenological fringe with Poissonian sources and a gated detector.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution, Normal, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::rng::{stream_rng, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DriftRegime {
    Calm,
    Volatile,
}

/// One Ornstein–Uhlenbeck driver: mean-reversion rate `theta` (1/s) and
/// diffusion `sigma` (units/√s). Stationary std is `sigma / √(2·theta)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OuDriver {
    pub mean: f64,
    pub theta: f64,
    pub sigma: f64,
}

impl OuDriver {
    /// Builds a driver from its relaxation time and stationary spread.
    pub fn from_stationary(mean: f64, tau_s: f64, std: f64) -> Self {
        let theta = 1.0 / tau_s;
        Self {
            mean,
            theta,
            sigma: std * (2.0 * theta).sqrt(),
        }
    }

    pub fn stationary_std(&self) -> f64 {
        if self.theta > 0.0 {
            self.sigma / (2.0 * self.theta).sqrt()
        } else {
            0.0
        }
    }

    /// Exact transition over `dt`.
    pub fn step<R: Rng + ?Sized>(&self, x: f64, dt: f64, rng: &mut R) -> f64 {
        let (decay, spread) = if self.theta > 0.0 {
            let d = (-self.theta * dt).exp();
            (d, self.sigma * ((1.0 - d * d) / (2.0 * self.theta)).sqrt())
        } else {
            (1.0, self.sigma * dt.sqrt())
        };
        let noise: f64 = if spread > 0.0 { rng.sample(StandardNormal) } else { 0.0 };
        self.mean + (x - self.mean) * decay + spread * noise
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DriftConfig {
    pub regime: DriftRegime,
    pub temperature: OuDriver,
    pub humidity: OuDriver,
    pub power: OuDriver,
    /// V/(°C·s)
    pub k_t: f64,
    /// V/(%RH·s)
    pub k_h: f64,
    /// V/(mW·s)
    pub k_p: f64,
    /// Random-walk volatility of V0, V/√s.
    pub v0_sigma: f64,
    /// Interferometer thermal time constant, s. Zero couples the ambient
    /// reading directly.
    pub thermal_lag_s: f64,
    /// Mean number of sudden V0 jumps per day; zero disables them.
    pub disturbance_rate_per_day: f64,
    /// Standard deviation of a disturbance jump, V.
    pub disturbance_jump_v: f64,
    /// Amplitude of a sinusoidal thermostat cycle in the ambient
    /// temperature, °C; zero disables it.
    pub cycle_amplitude_c: f64,
    pub cycle_period_s: f64,
    /// Expected std of the 10 s first difference of V0 under this config.
    pub v0_step_std_target: f64,
}

impl DriftConfig {
    pub fn calm() -> Self {
        Self {
            regime: DriftRegime::Calm,
            temperature: OuDriver::from_stationary(25.0, 7200.0, 0.3),
            humidity: OuDriver::from_stationary(45.0, 10800.0, 2.0),
            power: OuDriver::from_stationary(1.0, 1800.0, 0.005),
            k_t: 3.3e-4,
            k_h: 2.5e-5,
            k_p: 1.0e-2,
            v0_sigma: 6.3e-4,
            thermal_lag_s: 1200.0,
            disturbance_rate_per_day: 0.0,
            disturbance_jump_v: 0.0,
            cycle_amplitude_c: 0.0,
            cycle_period_s: 1800.0,
            v0_step_std_target: 2.3e-3,
        }
    }

    /// Large swings from an hourly thermostat cycle seen through a slow
    /// thermal lag, with weak noise so the wander stays near a volt.
    pub fn volatile() -> Self {
        Self {
            regime: DriftRegime::Volatile,
            temperature: OuDriver::from_stationary(25.0, 120.0, 0.015),
            humidity: OuDriver::from_stationary(45.0, 1800.0, 3.0),
            power: OuDriver::from_stationary(1.0, 300.0, 0.003),
            k_t: 2.5e-3,
            k_h: 5.0e-6,
            k_p: 1.0e-2,
            v0_sigma: 5.0e-4,
            thermal_lag_s: 600.0,
            disturbance_rate_per_day: 0.0,
            disturbance_jump_v: 0.0,
            cycle_amplitude_c: 1.0,
            cycle_period_s: 3600.0,
            v0_step_std_target: 1.2e-2,
        }
    }

    pub fn for_regime(regime: DriftRegime) -> Self {
        match regime {
            DriftRegime::Calm => Self::calm(),
            DriftRegime::Volatile => Self::volatile(),
        }
    }

    /// No noise anywhere: drivers sit at their set points and V0 is frozen.
    pub fn frozen() -> Self {
        let still = |mean| OuDriver {
            mean,
            theta: 0.0,
            sigma: 0.0,
        };
        Self {
            temperature: still(25.0),
            humidity: still(45.0),
            power: still(1.0),
            v0_sigma: 0.0,
            cycle_amplitude_c: 0.0,
            v0_step_std_target: 0.0,
            ..Self::calm()
        }
    }
}

impl Default for DriftConfig {
    fn default() -> Self {
        Self::calm()
    }
}

/// Hidden truth of the simulated environment.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DriftState {
    /// Zero-phase voltage wrapped into `[0, 2·v_pi)`.
    pub true_zero_voltage: f64,
    /// The same voltage without wrapping; diagnostics only.
    pub unwrapped_zero_voltage: f64,
    /// Ambient reading: OU component plus the thermostat cycle.
    pub temperature: f64,
    /// OU component of the ambient temperature.
    pub temperature_base: f64,
    /// Phase of the thermostat cycle at time zero, rad.
    pub cycle_phase: f64,
    /// Lagged temperature seen by the interferometer arms.
    pub interferometer_temperature: f64,
    pub humidity: f64,
    pub laser_power: f64,
    pub time: f64,
}

impl DriftState {
    /// Drivers at their set points, V0 at `v0`.
    pub fn at_rest(config: &DriftConfig, v0: f64) -> Self {
        Self {
            true_zero_voltage: v0,
            unwrapped_zero_voltage: v0,
            temperature: config.temperature.mean,
            temperature_base: config.temperature.mean,
            cycle_phase: 0.0,
            interferometer_temperature: config.temperature.mean,
            humidity: config.humidity.mean,
            laser_power: config.power.mean,
            time: 0.0,
        }
    }

    /// Drivers drawn from their stationary laws, V0 uniform over one period.
    pub fn random<R: Rng + ?Sized>(config: &DriftConfig, v_pi: f64, rng: &mut R) -> Self {
        let mut draw = |d: &OuDriver| d.mean + d.stationary_std() * rng.sample::<f64, _>(StandardNormal);
        let temperature_base = draw(&config.temperature);
        let humidity = draw(&config.humidity).clamp(0.0, 100.0);
        let laser_power = draw(&config.power).max(1e-6);
        let v0 = rng.random_range(0.0..2.0 * v_pi);
        let cycle_phase = if config.cycle_amplitude_c > 0.0 {
            rng.random_range(0.0..2.0 * PI)
        } else {
            0.0
        };
        let temperature = temperature_base + cycle_offset(config, 0.0, cycle_phase);
        Self {
            true_zero_voltage: v0,
            unwrapped_zero_voltage: v0,
            temperature,
            temperature_base,
            cycle_phase,
            interferometer_temperature: temperature,
            humidity,
            laser_power,
            time: 0.0,
        }
    }
}

fn cycle_offset(config: &DriftConfig, time: f64, phase: f64) -> f64 {
    if config.cycle_amplitude_c > 0.0 && config.cycle_period_s > 0.0 {
        config.cycle_amplitude_c * (2.0 * PI * time / config.cycle_period_s + phase).sin()
    } else {
        0.0
    }
}

pub fn wrap_voltage(v: f64, v_pi: f64) -> f64 {
    let w = v.rem_euclid(2.0 * v_pi);
    // rem_euclid can round up to the period itself for tiny negative inputs
    if w >= 2.0 * v_pi {
        0.0
    } else {
        w
    }
}

/// Representative of `v` modulo `2·v_pi` closest to `reference`.
pub fn unwrap_near(v: f64, reference: f64, v_pi: f64) -> f64 {
    let period = 2.0 * v_pi;
    v + period * ((reference - v) / period).round()
}

/// Advances the environment by `dt` seconds. V0 integrates the driver
/// deviations present at the start of the step.
pub fn step_environment<R: Rng + ?Sized>(
    state: &DriftState,
    config: &DriftConfig,
    v_pi: f64,
    dt: f64,
    rng: &mut R,
) -> DriftState {
    let drift_rate = config.k_t * (state.interferometer_temperature - config.temperature.mean)
        + config.k_h * (state.humidity - config.humidity.mean)
        + config.k_p * (state.laser_power - config.power.mean);
    let mut dv = drift_rate * dt;
    if config.v0_sigma > 0.0 {
        dv += config.v0_sigma * dt.sqrt() * rng.sample::<f64, _>(StandardNormal);
    }
    if config.disturbance_rate_per_day > 0.0 && config.disturbance_jump_v > 0.0 {
        let lambda = config.disturbance_rate_per_day * dt / 86_400.0;
        let jumps = Poisson::new(lambda).expect("positive rate").sample(rng) as u64;
        let jump = Normal::new(0.0, config.disturbance_jump_v).expect("positive std");
        for _ in 0..jumps {
            dv += jump.sample(rng);
        }
    }

    let lag = if config.thermal_lag_s > 0.0 {
        1.0 - (-dt / config.thermal_lag_s).exp()
    } else {
        1.0
    };
    let interferometer_temperature =
        state.interferometer_temperature + (state.temperature - state.interferometer_temperature) * lag;
    let temperature_base = config.temperature.step(state.temperature_base, dt, rng);
    let temperature = temperature_base + cycle_offset(config, state.time + dt, state.cycle_phase);
    let interferometer_temperature = if config.thermal_lag_s > 0.0 {
        interferometer_temperature
    } else {
        temperature
    };
    let humidity = config.humidity.step(state.humidity, dt, rng).clamp(0.0, 100.0);
    let laser_power = config.power.step(state.laser_power, dt, rng).max(1e-6);

    DriftState {
        true_zero_voltage: wrap_voltage(state.true_zero_voltage + dv, v_pi),
        unwrapped_zero_voltage: state.unwrapped_zero_voltage + dv,
        temperature,
        temperature_base,
        cycle_phase: state.cycle_phase,
        interferometer_temperature,
        humidity,
        laser_power,
        time: state.time + dt,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OpticalConfig {
    /// Half-wave voltage; one fringe period spans `2·v_pi`.
    pub v_pi: f64,
    /// Fringe visibility at the monitored (destructive) port.
    pub visibility: f64,
    pub pulse_rate: f64,
    pub mu: f64,
    pub nu: f64,
    pub vacuum: f64,
    /// Relative weights of choosing μ, ν and vacuum for a pulse.
    pub intensity_weights: [f64; 3],
    pub detector_efficiency: f64,
    pub dark_count_per_gate: f64,
    pub misalignment: f64,
    pub fiber_loss_db_per_km: f64,
    pub distance_km: f64,
    /// Fraction of the nominal pulse count actually sampled in transmit
    /// slots; 1 simulates every pulse.
    pub thinning: f64,
}

impl Default for OpticalConfig {
    fn default() -> Self {
        let misalignment = 0.0123;
        Self {
            v_pi: 2.5,
            visibility: 1.0 - 2.0 * misalignment,
            pulse_rate: 1e6,
            mu: 0.5,
            nu: 0.1,
            vacuum: 0.0,
            intensity_weights: [6.0, 1.0, 1.0],
            detector_efficiency: 0.10,
            dark_count_per_gate: 8e-7,
            misalignment,
            fiber_loss_db_per_km: 0.2,
            distance_km: 50.0,
            thinning: 1.0,
        }
    }
}

impl OpticalConfig {
    pub fn at_distance(distance_km: f64) -> Self {
        Self {
            distance_km,
            ..Self::default()
        }
    }

    /// Channel transmittance times detector efficiency.
    pub fn eta_total(&self) -> f64 {
        self.detector_efficiency * 10f64.powf(-self.fiber_loss_db_per_km * self.distance_km / 10.0)
    }

    pub fn intensities(&self) -> [f64; 3] {
        [self.mu, self.nu, self.vacuum]
    }

    pub fn intensity_probabilities(&self) -> [f64; 3] {
        let total: f64 = self.intensity_weights.iter().sum();
        self.intensity_weights.map(|w| w / total)
    }

    /// Phase offset of the modulator relative to the zero-phase point.
    pub fn phase_error(&self, applied_voltage: f64, zero_voltage: f64) -> f64 {
        PI * (applied_voltage - zero_voltage) / self.v_pi
    }

    /// Probability that a signal photon lands in the wrong decoding port:
    /// the misalignment floor at zero phase, rising as `(1 − cos φ)/2`.
    pub fn optical_error(&self, phase: f64) -> f64 {
        self.misalignment + (1.0 - 2.0 * self.misalignment) * (1.0 - phase.cos()) / 2.0
    }
}

/// Click probability per gate at the destructive port used for scanning.
/// Minimal when `applied_voltage` equals the zero-phase voltage.
pub fn detection_probability(applied_voltage: f64, state: &DriftState, config: &OpticalConfig, intensity: f64) -> f64 {
    let phase = config.phase_error(applied_voltage, state.true_zero_voltage);
    let port = (1.0 - config.visibility * phase.cos()) / 2.0;
    let p = 1.0 - (-intensity * config.eta_total() * port).exp() + config.dark_count_per_gate;
    p.min(1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct IntensityCounts {
    pub pulses: u64,
    /// Raw clicks, before basis sifting.
    pub detections: u64,
    pub sifted: u64,
    /// Erroneous bits among the sifted detections.
    pub errors: u64,
}

impl IntensityCounts {
    pub fn add(&mut self, other: &IntensityCounts) {
        self.pulses += other.pulses;
        self.detections += other.detections;
        self.sifted += other.sifted;
        self.errors += other.errors;
    }
}

/// Index into per-intensity arrays.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Intensity {
    Signal = 0,
    Decoy = 1,
    Vacuum = 2,
}

/// Transmit-slot counters for μ, ν and vacuum pulses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct SlotOutcome {
    pub counts: [IntensityCounts; 3],
}

impl SlotOutcome {
    pub fn get(&self, which: Intensity) -> &IntensityCounts {
        &self.counts[which as usize]
    }

    pub fn signal_qber(&self) -> Option<f64> {
        let c = self.get(Intensity::Signal);
        (c.sifted > 0).then(|| c.errors as f64 / c.sifted as f64)
    }

    pub fn total_sifted(&self) -> u64 {
        self.counts.iter().map(|c| c.sifted).sum()
    }
}

fn binomial<R: Rng + ?Sized>(n: u64, p: f64, rng: &mut R) -> u64 {
    if n == 0 || p <= 0.0 {
        return 0;
    }
    if p >= 1.0 {
        return n;
    }
    Binomial::new(n, p).expect("valid binomial").sample(rng)
}

/// Simulates one transmit slot of decoy-state BB84 at `applied_voltage`.
pub fn simulate_slot<R: Rng + ?Sized>(
    applied_voltage: f64,
    state: &DriftState,
    config: &OpticalConfig,
    slot_seconds: f64,
    rng: &mut R,
) -> SlotOutcome {
    let total = (config.pulse_rate * slot_seconds * config.thinning).round() as u64;
    let probs = config.intensity_probabilities();
    let eta = config.eta_total();
    let y0 = config.dark_count_per_gate;
    let e_opt = config.optical_error(config.phase_error(applied_voltage, state.true_zero_voltage));

    // multinomial intensity choice via sequential conditional binomials
    let mut remaining = total;
    let mut left = 1.0;
    let mut outcome = SlotOutcome::default();
    for (k, intensity) in config.intensities().into_iter().enumerate() {
        let n = if k == 2 {
            remaining
        } else {
            let n = binomial(remaining, (probs[k] / left).min(1.0), rng);
            left -= probs[k];
            n
        };
        remaining -= n;

        let p_signal = 1.0 - (-intensity * eta).exp();
        let p_click = (p_signal + y0).min(1.0);
        let e_click = if p_click > 0.0 {
            (e_opt * p_signal + 0.5 * y0) / (p_signal + y0)
        } else {
            0.0
        };
        let detections = binomial(n, p_click, rng);
        let sifted = binomial(detections, 0.5, rng);
        let errors = binomial(sifted, e_click, rng);
        outcome.counts[k] = IntensityCounts {
            pulses: n,
            detections,
            sifted,
            errors,
        };
    }
    outcome
}

/// A running simulated channel: environment, optics and the random streams
/// that drive them. The environment stream is separate from the detection
/// stream, so two channels built from the same seed follow the same drift
/// regardless of what is measured on them.
#[derive(Debug, Clone)]
pub struct Channel {
    pub drift: DriftConfig,
    pub optical: OpticalConfig,
    pub slot_seconds: f64,
    state: DriftState,
    slot: u64,
    env_rng: ChaCha8Rng,
    det_rng: ChaCha8Rng,
}

impl Channel {
    pub fn new(drift: DriftConfig, optical: OpticalConfig, slot_seconds: f64, seed: u64) -> Self {
        let mut env_rng = stream_rng(seed, Stream::Environment);
        let state = DriftState::random(&drift, optical.v_pi, &mut env_rng);
        Self::with_state(drift, optical, slot_seconds, seed, state, env_rng)
    }

    /// Starts from an explicit environment state.
    pub fn from_state(drift: DriftConfig, optical: OpticalConfig, slot_seconds: f64, seed: u64, state: DriftState) -> Self {
        let env_rng = stream_rng(seed, Stream::Environment);
        Self::with_state(drift, optical, slot_seconds, seed, state, env_rng)
    }

    fn with_state(
        drift: DriftConfig,
        optical: OpticalConfig,
        slot_seconds: f64,
        seed: u64,
        state: DriftState,
        env_rng: ChaCha8Rng,
    ) -> Self {
        Self {
            drift,
            optical,
            slot_seconds,
            state,
            slot: 0,
            env_rng,
            det_rng: stream_rng(seed, Stream::Detection),
        }
    }

    pub fn state(&self) -> &DriftState {
        &self.state
    }

    pub fn slot(&self) -> u64 {
        self.slot
    }

    pub fn time(&self) -> f64 {
        self.state.time
    }

    /// Moves to the next slot.
    pub fn advance(&mut self) {
        self.state = step_environment(
            &self.state,
            &self.drift,
            self.optical.v_pi,
            self.slot_seconds,
            &mut self.env_rng,
        );
        self.slot += 1;
    }

    pub fn transmit(&mut self, applied_voltage: f64) -> SlotOutcome {
        simulate_slot(
            applied_voltage,
            &self.state,
            &self.optical,
            self.slot_seconds,
            &mut self.det_rng,
        )
    }

    /// Photon counts at the monitored port for `pulses` gates at intensity μ.
    pub fn count(&mut self, applied_voltage: f64, pulses: u64) -> u64 {
        let p = detection_probability(applied_voltage, &self.state, &self.optical, self.optical.mu);
        binomial(pulses, p, &mut self.det_rng)
    }

    pub fn detection_rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.det_rng
    }
}

/// Builds an independent generator for ad-hoc use in tests and tools.
pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frozen_drift_keeps_v0() {
        let cfg = DriftConfig::frozen();
        let mut rng = seeded(1);
        let mut s = DriftState::at_rest(&cfg, 1.234);
        for _ in 0..1000 {
            s = step_environment(&s, &cfg, 2.5, 10.0, &mut rng);
        }
        assert_eq!(s.true_zero_voltage, 1.234);
        assert_eq!(s.temperature, 25.0);
    }

    #[test]
    fn forced_temperature_offset_integrates() {
        let cfg = DriftConfig {
            k_t: 1.0,
            k_h: 0.0,
            k_p: 0.0,
            thermal_lag_s: 0.0,
            ..DriftConfig::frozen()
        };
        let mut s = DriftState::at_rest(&cfg, 1.0);
        s.temperature += 0.1;
        s.interferometer_temperature += 0.1;
        let next = step_environment(&s, &cfg, 2.5, 10.0, &mut seeded(0));
        assert!((next.true_zero_voltage - 2.0).abs() < 1e-12);
    }

    #[test]
    fn wrapping_and_unwrapping() {
        assert_eq!(wrap_voltage(5.5, 2.5), 0.5);
        assert!((wrap_voltage(-0.5, 2.5) - 4.5).abs() < 1e-15);
        assert!((unwrap_near(0.2, 4.9, 2.5) - 5.2).abs() < 1e-15);
        assert!((unwrap_near(4.8, 0.1, 2.5) + 0.2).abs() < 1e-12);
        assert_eq!(unwrap_near(1.0, 1.2, 2.5), 1.0);
    }

    #[test]
    fn vacuum_is_dark_only() {
        let cfg = OpticalConfig::default();
        let s = DriftState::at_rest(&DriftConfig::frozen(), 1.0);
        assert_eq!(detection_probability(3.0, &s, &cfg, 0.0), 8e-7);
    }

    #[test]
    fn perfect_visibility_null_is_dark() {
        let cfg = OpticalConfig {
            visibility: 1.0,
            ..OpticalConfig::default()
        };
        let s = DriftState::at_rest(&DriftConfig::frozen(), 1.7);
        assert!((detection_probability(1.7, &s, &cfg, cfg.mu) - 8e-7).abs() < 1e-18);
    }

    #[test]
    fn bright_fringe_at_50_km() {
        let cfg = OpticalConfig {
            visibility: 1.0,
            ..OpticalConfig::default()
        };
        let s = DriftState::at_rest(&DriftConfig::frozen(), 1.0);
        let p = detection_probability(1.0 + cfg.v_pi, &s, &cfg, 0.5);
        // plug-in value 1 − exp(−0.5 · 0.01) + 8e−7
        assert!((p - 4.988_320_807_317_68e-3).abs() < 1e-12, "{p}");
    }

    #[test]
    fn zero_pulses_gives_empty_outcome() {
        let cfg = OpticalConfig {
            pulse_rate: 0.0,
            ..OpticalConfig::default()
        };
        let s = DriftState::at_rest(&DriftConfig::frozen(), 1.0);
        assert_eq!(simulate_slot(1.0, &s, &cfg, 10.0, &mut seeded(3)), SlotOutcome::default());
    }

    #[test]
    fn optical_error_floor_and_ceiling() {
        let cfg = OpticalConfig::default();
        assert!((cfg.optical_error(0.0) - 0.0123).abs() < 1e-15);
        assert!((cfg.optical_error(PI) - 0.9877).abs() < 1e-15);
        assert!((cfg.optical_error(PI / 2.0) - 0.5).abs() < 1e-15);
    }
}
