//! Flat experiment configuration loaded from TOML.
//!
//! Every key is optional; missing keys take the reference defaults. Unknown
//! keys are rejected. Drift keys override the preset chosen by
//! `drift_regime` (and `compare_regime` for the comparison series).

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::baselines::CompareConfig;
use crate::calibration::{ScanConfig, MIN_SCAN_STEPS};
use crate::controller::{ControllerConfig, ScheduleConfig};
use crate::lstm::{InitScheme, NetworkShape};
use crate::physics::{DriftConfig, DriftRegime, OpticalConfig, OuDriver};
use crate::training::{AdamConfig, FineTuneConfig, TrainConfig};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{0}")]
    Parse(String),
    #[error("invalid value for `{key}`: {reason}")]
    Invalid { key: &'static str, reason: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    // schedule
    pub slot_seconds: f64,
    pub predict_slots: usize,
    pub scan_slots: usize,
    pub baseline_scan_slots: usize,
    pub baseline_transmit_slots: usize,
    pub divergence_guard: bool,
    pub qber_window_slots: usize,
    pub scan_steps: usize,

    // optics and detection
    pub v_pi: f64,
    pub visibility: f64,
    pub pulse_rate_hz: f64,
    pub mu: f64,
    pub nu: f64,
    pub vacuum: f64,
    pub weight_signal: f64,
    pub weight_decoy: f64,
    pub weight_vacuum: f64,
    pub detector_efficiency: f64,
    pub dark_count_per_gate: f64,
    pub misalignment: f64,
    pub fiber_loss_db_per_km: f64,
    pub distance_km: f64,
    /// Fraction of the nominal pulses simulated per slot.
    pub thinning: f64,
    pub f_ec: f64,

    // drift
    pub drift_regime: DriftRegime,
    pub temp_mean_c: Option<f64>,
    pub temp_tau_s: Option<f64>,
    pub temp_std_c: Option<f64>,
    pub humidity_mean_pct: Option<f64>,
    pub humidity_tau_s: Option<f64>,
    pub humidity_std_pct: Option<f64>,
    pub power_mean_mw: Option<f64>,
    pub power_tau_s: Option<f64>,
    pub power_std_mw: Option<f64>,
    pub k_t: Option<f64>,
    pub k_h: Option<f64>,
    pub k_p: Option<f64>,
    pub v0_sigma: Option<f64>,
    pub thermal_lag_s: Option<f64>,
    pub cycle_amplitude_c: Option<f64>,
    pub cycle_period_s: Option<f64>,
    pub disturbance_rate_per_day: Option<f64>,
    pub disturbance_jump_v: Option<f64>,
    pub v0_step_std_target: Option<f64>,

    // training
    pub hidden1: usize,
    pub hidden2: usize,
    pub forget_bias: f64,
    pub epochs: usize,
    pub initial_lr: f64,
    pub lr_decay_factor: f64,
    pub lr_decay_every: usize,
    /// Global-norm clipping threshold; 0 disables clipping.
    pub grad_clip_norm: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,

    // online updates
    pub finetune_lr: f64,
    pub warmup_steps: usize,
    pub warmup_samples: usize,
    pub block_steps: usize,
    pub finetune_window: usize,

    // data and model comparison
    pub sets: usize,
    pub points: usize,
    /// Drift preset for the model comparison series; overrides apply too.
    pub compare_regime: DriftRegime,
    pub compare_points: usize,
    pub compare_sample_seconds: f64,
    pub train_fraction: f64,
    pub mlp_hidden: usize,
    pub rnn_hidden: usize,
    pub max_poly_order: usize,
    pub compare_chunks: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let optical = OpticalConfig::default();
        let schedule = ScheduleConfig::default();
        let train = TrainConfig::default();
        let ft = FineTuneConfig::default();
        let cmp = CompareConfig::default();
        let InitScheme::UniformFanIn { forget_bias } = train.init;
        Self {
            slot_seconds: schedule.slot_seconds,
            predict_slots: schedule.predict_slots,
            scan_slots: schedule.scan_slots,
            baseline_scan_slots: schedule.baseline_scan_slots,
            baseline_transmit_slots: schedule.baseline_transmit_slots,
            divergence_guard: true,
            qber_window_slots: 30,
            scan_steps: 64,
            v_pi: optical.v_pi,
            visibility: optical.visibility,
            pulse_rate_hz: optical.pulse_rate,
            mu: optical.mu,
            nu: optical.nu,
            vacuum: optical.vacuum,
            weight_signal: optical.intensity_weights[0],
            weight_decoy: optical.intensity_weights[1],
            weight_vacuum: optical.intensity_weights[2],
            detector_efficiency: optical.detector_efficiency,
            dark_count_per_gate: optical.dark_count_per_gate,
            misalignment: optical.misalignment,
            fiber_loss_db_per_km: optical.fiber_loss_db_per_km,
            distance_km: optical.distance_km,
            thinning: optical.thinning,
            f_ec: 1.16,
            drift_regime: DriftRegime::Calm,
            temp_mean_c: None,
            temp_tau_s: None,
            temp_std_c: None,
            humidity_mean_pct: None,
            humidity_tau_s: None,
            humidity_std_pct: None,
            power_mean_mw: None,
            power_tau_s: None,
            power_std_mw: None,
            k_t: None,
            k_h: None,
            k_p: None,
            v0_sigma: None,
            thermal_lag_s: None,
            cycle_amplitude_c: None,
            cycle_period_s: None,
            disturbance_rate_per_day: None,
            disturbance_jump_v: None,
            v0_step_std_target: None,
            hidden1: train.shape.hidden1,
            hidden2: train.shape.hidden2,
            forget_bias,
            epochs: train.epochs,
            initial_lr: train.initial_lr,
            lr_decay_factor: train.lr_decay_factor,
            lr_decay_every: train.lr_decay_every,
            grad_clip_norm: train.clip_norm.unwrap_or(0.0),
            adam_beta1: train.adam.beta1,
            adam_beta2: train.adam.beta2,
            adam_epsilon: train.adam.epsilon,
            finetune_lr: ft.lr,
            warmup_steps: ft.warmup_steps,
            warmup_samples: ft.warmup_samples,
            block_steps: ft.block_steps,
            finetune_window: ft.window,
            sets: 10,
            points: 3600,
            compare_regime: DriftRegime::Volatile,
            compare_points: 3300,
            compare_sample_seconds: 60.0,
            train_fraction: cmp.train_fraction,
            mlp_hidden: cmp.mlp_hidden,
            rnn_hidden: cmp.rnn_hidden,
            max_poly_order: cmp.max_poly_order,
            compare_chunks: cmp.chunks,
        }
    }
}

fn ou_std(d: &OuDriver) -> f64 {
    d.stationary_std()
}

fn ou_tau(d: &OuDriver) -> f64 {
    if d.theta > 0.0 {
        1.0 / d.theta
    } else {
        f64::INFINITY
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text).map_err(|e| ConfigError::Parse(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml(&text)
    }

    /// The configuration with every drift override filled in, as TOML.
    pub fn resolved_toml(&self) -> String {
        let d = self.drift();
        let resolved = Self {
            temp_mean_c: Some(d.temperature.mean),
            temp_tau_s: Some(ou_tau(&d.temperature)),
            temp_std_c: Some(ou_std(&d.temperature)),
            humidity_mean_pct: Some(d.humidity.mean),
            humidity_tau_s: Some(ou_tau(&d.humidity)),
            humidity_std_pct: Some(ou_std(&d.humidity)),
            power_mean_mw: Some(d.power.mean),
            power_tau_s: Some(ou_tau(&d.power)),
            power_std_mw: Some(ou_std(&d.power)),
            k_t: Some(d.k_t),
            k_h: Some(d.k_h),
            k_p: Some(d.k_p),
            v0_sigma: Some(d.v0_sigma),
            thermal_lag_s: Some(d.thermal_lag_s),
            cycle_amplitude_c: Some(d.cycle_amplitude_c),
            cycle_period_s: Some(d.cycle_period_s),
            disturbance_rate_per_day: Some(d.disturbance_rate_per_day),
            disturbance_jump_v: Some(d.disturbance_jump_v),
            v0_step_std_target: Some(d.v0_step_std_target),
            ..self.clone()
        };
        toml::to_string(&resolved).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        fn bad(key: &'static str, reason: impl Into<String>) -> Result<(), ConfigError> {
            Err(ConfigError::Invalid {
                key,
                reason: reason.into(),
            })
        }
        let positive: [(&'static str, f64); 12] = [
            ("slot_seconds", self.slot_seconds),
            ("v_pi", self.v_pi),
            ("pulse_rate_hz", self.pulse_rate_hz),
            ("detector_efficiency", self.detector_efficiency),
            ("initial_lr", self.initial_lr),
            ("lr_decay_factor", self.lr_decay_factor),
            ("finetune_lr", self.finetune_lr),
            ("adam_epsilon", self.adam_epsilon),
            ("f_ec", self.f_ec),
            ("thinning", self.thinning),
            ("compare_sample_seconds", self.compare_sample_seconds),
            ("visibility", self.visibility),
        ];
        for (key, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return bad(key, format!("{v} is not a positive number"));
            }
        }
        let counts: [(&'static str, usize); 16] = [
            ("predict_slots", self.predict_slots),
            ("scan_slots", self.scan_slots),
            ("baseline_scan_slots", self.baseline_scan_slots),
            ("baseline_transmit_slots", self.baseline_transmit_slots),
            ("qber_window_slots", self.qber_window_slots),
            ("hidden1", self.hidden1),
            ("hidden2", self.hidden2),
            ("epochs", self.epochs),
            ("lr_decay_every", self.lr_decay_every),
            ("finetune_window", self.finetune_window),
            ("sets", self.sets),
            ("compare_points", self.compare_points),
            ("mlp_hidden", self.mlp_hidden),
            ("rnn_hidden", self.rnn_hidden),
            ("compare_chunks", self.compare_chunks),
            ("points", self.points),
        ];
        for (key, v) in counts {
            if v == 0 {
                return bad(key, "must be a positive integer");
            }
        }
        let unit: [(&'static str, f64); 6] = [
            ("visibility", self.visibility),
            ("detector_efficiency", self.detector_efficiency),
            ("thinning", self.thinning),
            ("lr_decay_factor", self.lr_decay_factor),
            ("adam_beta1", self.adam_beta1),
            ("adam_beta2", self.adam_beta2),
        ];
        for (key, v) in unit {
            if !(0.0..=1.0).contains(&v) {
                return bad(key, format!("{v} is outside [0, 1]"));
            }
        }
        if !(self.mu > self.nu && self.nu > 0.0) {
            return bad("nu", format!("need mu > nu > 0, got mu = {}, nu = {}", self.mu, self.nu));
        }
        if !(self.vacuum >= 0.0 && self.vacuum < self.nu) {
            return bad("vacuum", "must lie in [0, nu)");
        }
        if !(0.0..0.5).contains(&self.misalignment) {
            return bad("misalignment", "must lie in [0, 0.5)");
        }
        for (key, v) in [
            ("dark_count_per_gate", self.dark_count_per_gate),
            ("fiber_loss_db_per_km", self.fiber_loss_db_per_km),
            ("distance_km", self.distance_km),
            ("grad_clip_norm", self.grad_clip_norm),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(key, format!("{v} is negative or not finite"));
            }
        }
        let weights = [self.weight_signal, self.weight_decoy, self.weight_vacuum];
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) || weights.iter().sum::<f64>() <= 0.0 {
            return bad("weight_signal", "intensity weights must be nonnegative with a positive sum");
        }
        if self.scan_steps < MIN_SCAN_STEPS {
            return bad("scan_steps", format!("need at least {MIN_SCAN_STEPS}"));
        }
        if self.warmup_samples <= crate::dataset::VOLTAGE_WINDOW {
            return bad("warmup_samples", "must exceed the five-voltage window");
        }
        if self.points <= crate::dataset::VOLTAGE_WINDOW {
            return bad("points", "must exceed the five-voltage window");
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return bad("train_fraction", "must lie strictly between 0 and 1");
        }
        if self.max_poly_order > 3 {
            return bad("max_poly_order", "polynomial order must be at most 3");
        }
        let d = self.drift();
        for (key, v) in [
            ("temp_std_c", ou_std(&d.temperature)),
            ("humidity_std_pct", ou_std(&d.humidity)),
            ("power_std_mw", ou_std(&d.power)),
            ("v0_sigma", d.v0_sigma),
            ("thermal_lag_s", d.thermal_lag_s),
            ("cycle_amplitude_c", d.cycle_amplitude_c),
            ("disturbance_rate_per_day", d.disturbance_rate_per_day),
            ("disturbance_jump_v", d.disturbance_jump_v),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(key, format!("{v} is negative or not finite"));
            }
        }
        for (key, v) in [
            ("temp_tau_s", self.temp_tau_s),
            ("humidity_tau_s", self.humidity_tau_s),
            ("power_tau_s", self.power_tau_s),
            ("cycle_period_s", self.cycle_period_s),
        ] {
            if let Some(v) = v {
                if !(v.is_finite() && v > 0.0) {
                    return bad(key, format!("{v} is not a positive number"));
                }
            }
        }
        if d.power.mean.is_nan() || d.power.mean <= 0.0 {
            return bad("power_mean_mw", "laser power must be positive");
        }
        if !(0.0..=100.0).contains(&d.humidity.mean) {
            return bad("humidity_mean_pct", "must lie in [0, 100]");
        }
        Ok(())
    }

    /// Drift of the experiment channel and its training data.
    pub fn drift(&self) -> DriftConfig {
        self.drift_for(self.drift_regime)
    }

    /// The `regime` preset with this file's drift overrides applied.
    pub fn drift_for(&self, regime: DriftRegime) -> DriftConfig {
        let mut d = DriftConfig::for_regime(regime);
        let ou = |base: &OuDriver, mean: Option<f64>, tau: Option<f64>, std: Option<f64>| {
            if mean.is_none() && tau.is_none() && std.is_none() {
                return *base;
            }
            OuDriver::from_stationary(
                mean.unwrap_or(base.mean),
                tau.unwrap_or(ou_tau(base)),
                std.unwrap_or(ou_std(base)),
            )
        };
        d.temperature = ou(&d.temperature, self.temp_mean_c, self.temp_tau_s, self.temp_std_c);
        d.humidity = ou(&d.humidity, self.humidity_mean_pct, self.humidity_tau_s, self.humidity_std_pct);
        d.power = ou(&d.power, self.power_mean_mw, self.power_tau_s, self.power_std_mw);
        let set = |field: &mut f64, v: Option<f64>| {
            if let Some(v) = v {
                *field = v;
            }
        };
        set(&mut d.k_t, self.k_t);
        set(&mut d.k_h, self.k_h);
        set(&mut d.k_p, self.k_p);
        set(&mut d.v0_sigma, self.v0_sigma);
        set(&mut d.thermal_lag_s, self.thermal_lag_s);
        set(&mut d.cycle_amplitude_c, self.cycle_amplitude_c);
        set(&mut d.cycle_period_s, self.cycle_period_s);
        set(&mut d.disturbance_rate_per_day, self.disturbance_rate_per_day);
        set(&mut d.disturbance_jump_v, self.disturbance_jump_v);
        set(&mut d.v0_step_std_target, self.v0_step_std_target);
        d
    }

    pub fn optical(&self) -> OpticalConfig {
        OpticalConfig {
            v_pi: self.v_pi,
            visibility: self.visibility,
            pulse_rate: self.pulse_rate_hz,
            mu: self.mu,
            nu: self.nu,
            vacuum: self.vacuum,
            intensity_weights: [self.weight_signal, self.weight_decoy, self.weight_vacuum],
            detector_efficiency: self.detector_efficiency,
            dark_count_per_gate: self.dark_count_per_gate,
            misalignment: self.misalignment,
            fiber_loss_db_per_km: self.fiber_loss_db_per_km,
            distance_km: self.distance_km,
            thinning: self.thinning,
        }
    }

    pub fn schedule(&self) -> ScheduleConfig {
        ScheduleConfig {
            predict_slots: self.predict_slots,
            scan_slots: self.scan_slots,
            slot_seconds: self.slot_seconds,
            baseline_scan_slots: self.baseline_scan_slots,
            baseline_transmit_slots: self.baseline_transmit_slots,
        }
    }

    /// Scan grid with one slot's (thinned) pulses spread over the steps.
    pub fn scan(&self) -> ScanConfig {
        ScanConfig::for_slot(&self.optical(), self.slot_seconds * self.thinning, self.scan_steps)
    }

    pub fn fine_tune(&self) -> FineTuneConfig {
        FineTuneConfig {
            lr: self.finetune_lr,
            warmup_steps: self.warmup_steps,
            warmup_samples: self.warmup_samples,
            block_steps: self.block_steps,
            window: self.finetune_window,
            clip_norm: self.clip(),
        }
    }

    fn clip(&self) -> Option<f64> {
        (self.grad_clip_norm > 0.0).then_some(self.grad_clip_norm)
    }

    pub fn controller(&self) -> ControllerConfig {
        ControllerConfig {
            schedule: self.schedule(),
            scan: self.scan(),
            fine_tune: self.fine_tune(),
            divergence_guard: self.divergence_guard,
            qber_window: self.qber_window_slots,
            f_ec: self.f_ec,
        }
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            initial_lr: self.initial_lr,
            lr_decay_factor: self.lr_decay_factor,
            lr_decay_every: self.lr_decay_every,
            clip_norm: self.clip(),
            adam: AdamConfig {
                beta1: self.adam_beta1,
                beta2: self.adam_beta2,
                epsilon: self.adam_epsilon,
            },
            shape: NetworkShape {
                input: crate::dataset::FEATURE_DIM,
                hidden1: self.hidden1,
                hidden2: self.hidden2,
            },
            init: InitScheme::UniformFanIn {
                forget_bias: self.forget_bias,
            },
        }
    }

    pub fn compare(&self) -> CompareConfig {
        CompareConfig {
            train_fraction: self.train_fraction,
            train: self.train(),
            mlp_hidden: self.mlp_hidden,
            rnn_hidden: self.rnn_hidden,
            max_poly_order: self.max_poly_order,
            chunks: self.compare_chunks,
        }
    }
}
