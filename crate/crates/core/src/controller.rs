//! Operating modes over simulated time: the alternating scan/transmit
//! baseline and the forecast-driven mode with periodic scan blocks that
//! correct the forecaster online.

use std::collections::VecDeque;
use std::fmt::Write as _;

use thiserror::Error;

use crate::calibration::{scan_slot, CalibrationError, ScanConfig, ScanResult};
use crate::dataset::{Normalizer, RawRecord, FEATURE_DIM, VOLTAGE_WINDOW};
use crate::lstm::{predict_sequence, LstmNetworkParams, LstmState};
use crate::metrics::{aggregate_stats, qber_series, secure_rate, IntensityStats, MetricsError, QberPoint};
use crate::physics::{unwrap_near, wrap_voltage, Channel, DriftConfig, DriftState, OpticalConfig, SlotOutcome};
use crate::training::{fine_tune_with, AdamConfig, AdamState, FineTuneBatch, FineTuneConfig, TrainError, TrainedModel};

#[derive(Debug, Error)]
pub enum ControllerError {
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("forecaster needs {VOLTAGE_WINDOW} observed voltages, has {have}")]
    NotReady { have: usize },
    #[error("no usable scan during warm-up")]
    NoCalibration,
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduleConfig {
    pub predict_slots: usize,
    pub scan_slots: usize,
    pub slot_seconds: f64,
    pub baseline_scan_slots: usize,
    pub baseline_transmit_slots: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            predict_slots: 25,
            scan_slots: 5,
            slot_seconds: 10.0,
            baseline_scan_slots: 1,
            baseline_transmit_slots: 1,
        }
    }
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<(), ControllerError> {
        let bad = |m: &str| Err(ControllerError::InvalidSchedule(m.to_string()));
        if self.predict_slots == 0 || self.scan_slots == 0 {
            return bad("predict_slots and scan_slots must be positive");
        }
        if self.baseline_scan_slots == 0 || self.baseline_transmit_slots == 0 {
            return bad("baseline slot counts must be positive");
        }
        if !(self.slot_seconds.is_finite() && self.slot_seconds > 0.0) {
            return bad("slot_seconds must be positive");
        }
        Ok(())
    }

    pub fn slots_for_days(&self, days: f64) -> u64 {
        (days * 86_400.0 / self.slot_seconds).round() as u64
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ControllerConfig {
    pub schedule: ScheduleConfig,
    pub scan: ScanConfig,
    pub fine_tune: FineTuneConfig,
    /// Forces a scan block when a forecast strays more than `v_pi/2` from
    /// the last fitted voltage.
    pub divergence_guard: bool,
    pub qber_window: usize,
    pub f_ec: f64,
}

impl ControllerConfig {
    pub fn for_channel(optical: &OpticalConfig, schedule: ScheduleConfig) -> Self {
        Self {
            schedule,
            scan: ScanConfig::for_slot(optical, schedule.slot_seconds * optical.thinning, 64),
            fine_tune: FineTuneConfig::default(),
            divergence_guard: true,
            qber_window: 30,
            f_ec: 1.16,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunMode {
    Baseline,
    Predictive,
}

impl RunMode {
    pub fn name(self) -> &'static str {
        match self {
            RunMode::Baseline => "baseline",
            RunMode::Predictive => "predictive",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SlotMode {
    Scan,
    Transmit,
}

impl SlotMode {
    pub fn name(self) -> &'static str {
        match self {
            SlotMode::Scan => "scan",
            SlotMode::Transmit => "transmit",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VoltageSource {
    Predicted,
    Fitted,
}

#[derive(Debug, Clone, PartialEq)]
pub enum SlotRecord {
    Transmit(SlotOutcome),
    Scan(ScanResult),
    ScanFailed(CalibrationError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnvSnapshot {
    pub temperature: f64,
    pub humidity: f64,
    pub laser_power: f64,
}

impl EnvSnapshot {
    pub fn of(state: &DriftState) -> Self {
        Self {
            temperature: state.temperature,
            humidity: state.humidity,
            laser_power: state.laser_power,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SlotLog {
    pub slot: u64,
    pub time_s: f64,
    pub mode: SlotMode,
    /// Voltage on the modulator for transmit slots; the fitted (or carried)
    /// zero voltage for scan slots.
    pub applied_voltage: f64,
    pub source: VoltageSource,
    pub record: SlotRecord,
    pub env: EnvSnapshot,
    pub true_zero_voltage: f64,
}

/// Transmit slots over all slots; zero for an empty log.
pub fn duty_ratio(logs: &[SlotLog]) -> f64 {
    if logs.is_empty() {
        return 0.0;
    }
    let transmit = logs.iter().filter(|l| l.mode == SlotMode::Transmit).count();
    transmit as f64 / logs.len() as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub mode: RunMode,
    pub slot_seconds: f64,
    pub logs: Vec<SlotLog>,
    pub qber_series: Vec<QberPoint>,
    pub duty_ratio: f64,
    pub stats: IntensityStats,
    pub key_rate_per_pulse: f64,
    /// Signal-state errors over sifted bits, pooled over the run.
    pub mean_signal_qber: f64,
    /// Sifted bits of all intensities per second of wall-clock time.
    pub sifted_per_second: f64,
    pub divergence_events: usize,
    pub scan_failures: usize,
}

impl RunReport {
    fn from_logs(
        mode: RunMode,
        logs: Vec<SlotLog>,
        config: &ControllerConfig,
        optical: &OpticalConfig,
        divergence_events: usize,
    ) -> Result<Self, ControllerError> {
        let stats = aggregate_stats(&logs)?;
        let sifted: u64 = logs
            .iter()
            .map(|l| match &l.record {
                SlotRecord::Transmit(o) => o.total_sifted(),
                _ => 0,
            })
            .sum();
        let wall = logs.len() as f64 * config.schedule.slot_seconds;
        let scan_failures = logs
            .iter()
            .filter(|l| matches!(l.record, SlotRecord::ScanFailed(_)))
            .count();
        Ok(Self {
            mode,
            slot_seconds: config.schedule.slot_seconds,
            qber_series: qber_series(&logs, config.qber_window),
            duty_ratio: duty_ratio(&logs),
            key_rate_per_pulse: secure_rate(&stats, optical.mu, optical.nu, config.f_ec),
            mean_signal_qber: stats.signal().qber,
            sifted_per_second: sifted as f64 / wall,
            stats,
            logs,
            divergence_events,
            scan_failures,
        })
    }

    /// Per-slot series as `slot,time_s,mode,qber_window,duty_cum`.
    pub fn series_csv(&self) -> String {
        let mut out = String::from("slot,time_s,mode,qber_window,duty_cum\n");
        let mut transmit = 0usize;
        for (k, (log, q)) in self.logs.iter().zip(&self.qber_series).enumerate() {
            if log.mode == SlotMode::Transmit {
                transmit += 1;
            }
            let qber = q.qber_window.map(|v| v.to_string()).unwrap_or_default();
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                log.slot,
                log.time_s,
                log.mode.name(),
                qber,
                transmit as f64 / (k + 1) as f64
            );
        }
        out
    }

    /// Per-day mean signal QBER, pooled over each day's transmit slots.
    pub fn daily_qber(&self) -> Vec<f64> {
        let per_day = (86_400.0 / self.slot_seconds).round().max(1.0) as usize;
        self.logs
            .chunks(per_day)
            .filter_map(|day| {
                let (e, s) = day.iter().fold((0u64, 0u64), |(e, s), l| match &l.record {
                    SlotRecord::Transmit(o) => {
                        let c = o.get(crate::physics::Intensity::Signal);
                        (e + c.errors, s + c.sifted)
                    }
                    _ => (e, s),
                });
                (s > 0).then(|| e as f64 / s as f64)
            })
            .collect()
    }

    pub fn summary(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "[{}]", self.mode.name());
        let _ = writeln!(out, "slots = {}", self.logs.len());
        let _ = writeln!(out, "duty_ratio = {:.4}", self.duty_ratio);
        let _ = writeln!(out, "mean_qber_signal = {:.6}", self.mean_signal_qber);
        let _ = writeln!(out, "mean_qber_decoy = {:.6}", self.stats.decoy().qber);
        let _ = writeln!(out, "gain_signal = {:.6e}", self.stats.signal().gain);
        let _ = writeln!(out, "key_rate_per_pulse = {:.6e}", self.key_rate_per_pulse);
        let _ = writeln!(out, "sifted_per_second = {:.3}", self.sifted_per_second);
        let _ = writeln!(out, "divergence_events = {}", self.divergence_events);
        let _ = writeln!(out, "scan_failures = {}", self.scan_failures);
        out
    }
}

#[derive(Clone)]
struct HistoryEntry {
    input: Vec<f64>,
    label: f64,
    weight: f64,
}

/// Online forecaster: the network, its recurrent state, the trailing
/// voltage window and a short labelled history for fine-tuning.
///
/// Voltages are kept unwrapped so that consecutive values are continuous.
#[derive(Clone)]
pub struct Predictor {
    params: LstmNetworkParams,
    normalizer: Normalizer,
    adam: AdamState,
    config: FineTuneConfig,
    v_pi: f64,
    state: LstmState,
    voltages: VecDeque<f64>,
    env: Option<EnvSnapshot>,
    last_input: Option<Vec<f64>>,
    history: VecDeque<HistoryEntry>,
    last_fitted: Option<f64>,
}

impl Predictor {
    pub fn new(model: &TrainedModel, config: FineTuneConfig, v_pi: f64) -> Self {
        Self::from_parts(model.params.clone(), model.normalizer.clone(), config, v_pi)
    }

    pub fn from_parts(params: LstmNetworkParams, normalizer: Normalizer, config: FineTuneConfig, v_pi: f64) -> Self {
        let adam = AdamState::new(&params, AdamConfig::default());
        let state = LstmState::zeros(params.shape());
        Self {
            params,
            normalizer,
            adam,
            config,
            v_pi,
            state,
            voltages: VecDeque::with_capacity(VOLTAGE_WINDOW + 1),
            env: None,
            last_input: None,
            history: VecDeque::with_capacity(config.window + 1),
            last_fitted: None,
        }
    }

    pub fn params(&self) -> &LstmNetworkParams {
        &self.params
    }

    /// The trailing voltages, oldest first.
    pub fn window(&self) -> Vec<f64> {
        self.voltages.iter().copied().collect()
    }

    pub fn last_fitted(&self) -> Option<f64> {
        self.last_fitted
    }

    fn features(&self) -> Result<[f64; FEATURE_DIM], ControllerError> {
        let env = match self.env {
            Some(env) if self.voltages.len() == VOLTAGE_WINDOW => env,
            _ => {
                return Err(ControllerError::NotReady {
                    have: self.voltages.len(),
                })
            }
        };
        let mut f = [0.0; FEATURE_DIM];
        f[0] = env.temperature;
        f[1] = env.humidity;
        f[2] = env.laser_power;
        for (slot, v) in f[3..].iter_mut().zip(&self.voltages) {
            *slot = *v;
        }
        Ok(f)
    }

    /// Forecast of the coming slot's zero voltage (unwrapped). Advances
    /// the recurrent state by one step; call once per slot.
    pub fn forecast(&mut self) -> Result<f64, ControllerError> {
        let input = self.normalizer.normalize_features(&self.features()?);
        let z = self.params.step(&input, &mut self.state);
        self.last_input = Some(input);
        Ok(self.normalizer.denormalize_label(z))
    }

    /// Records the slot just finished. `voltage` is unwrapped for
    /// predicted values and wrapped for fitted ones.
    pub fn observe(&mut self, env: EnvSnapshot, voltage: f64, fitted: bool) {
        let voltage = match (fitted, self.voltages.back()) {
            (true, Some(&prev)) => unwrap_near(voltage, prev, self.v_pi),
            _ => voltage,
        };
        if let Some(input) = self.last_input.take() {
            self.history.push_back(HistoryEntry {
                input,
                label: self.normalizer.normalize_label(voltage),
                weight: if fitted { 1.0 } else { 0.0 },
            });
            while self.history.len() > self.config.window {
                self.history.pop_front();
            }
        }
        if fitted {
            self.last_fitted = Some(voltage);
        }
        self.voltages.push_back(voltage);
        while self.voltages.len() > VOLTAGE_WINDOW {
            self.voltages.pop_front();
        }
        self.env = Some(env);
    }

    /// Records a slot whose scan failed: the previous voltage is carried
    /// and its label is ignored in fine-tuning.
    pub fn observe_missing(&mut self, env: EnvSnapshot) {
        let carried = self.voltages.back().copied().unwrap_or(0.0);
        self.observe(env, carried, false);
    }

    /// Adam steps on the labelled history, then replays it from a zero
    /// state so the recurrent state matches the updated weights.
    pub fn update(&mut self, steps: usize) -> Result<(), ControllerError> {
        self.reanchor();
        if self.history.is_empty() {
            return Ok(());
        }
        let batch = FineTuneBatch {
            inputs: self.history.iter().map(|h| h.input.clone()).collect(),
            labels: self.history.iter().map(|h| h.label).collect(),
            weights: self.history.iter().map(|h| h.weight).collect(),
        };
        self.params = fine_tune_with(&self.params, &batch, steps, &self.config, &mut self.adam)?;
        let mut state = LstmState::zeros(self.params.shape());
        predict_sequence(&self.params, &batch.inputs, &mut state);
        self.state = state;
        Ok(())
    }

    /// Shifts the stored history by whole fringe periods so the latest
    /// voltage sits within `v_pi` of the training label mean.
    fn reanchor(&mut self) {
        let Some(&last) = self.voltages.back() else {
            return;
        };
        let period = 2.0 * self.v_pi;
        let k = ((last - self.normalizer.label_mean) / period).round();
        if k == 0.0 {
            return;
        }
        let shift = -k * period;
        for v in self.voltages.iter_mut() {
            *v += shift;
        }
        if let Some(f) = self.last_fitted.as_mut() {
            *f += shift;
        }
        let label_shift = shift / self.normalizer.label_std;
        for h in self.history.iter_mut() {
            h.label += label_shift;
            for (d, x) in h.input.iter_mut().enumerate().skip(3) {
                *x += shift / self.normalizer.stds[d];
            }
        }
    }
}

fn scan_record(channel: &mut Channel, scan: &ScanConfig) -> (SlotRecord, Option<f64>) {
    match scan_slot(channel, scan.steps, scan.pulses_per_step) {
        Ok(r) => {
            let v = r.fitted_zero_voltage;
            (SlotRecord::Scan(r), Some(v))
        }
        Err(e) => (SlotRecord::ScanFailed(e), None),
    }
}

fn log_for(channel: &Channel, mode: SlotMode, applied: f64, source: VoltageSource, record: SlotRecord) -> SlotLog {
    let state = channel.state();
    SlotLog {
        slot: channel.slot(),
        time_s: state.time,
        mode,
        applied_voltage: applied,
        source,
        record,
        env: EnvSnapshot::of(state),
        true_zero_voltage: state.true_zero_voltage,
    }
}

/// Scan-only slots (`warmup_samples` of them, not counted in any duty
/// ratio) that seed the forecaster window and run the warm-up fine-tune.
/// Returns the warm-up logs.
pub fn warm_up(
    channel: &mut Channel,
    predictor: &mut Predictor,
    config: &ControllerConfig,
) -> Result<Vec<SlotLog>, ControllerError> {
    let slots = config.fine_tune.warmup_samples;
    if slots <= VOLTAGE_WINDOW {
        return Err(ControllerError::InvalidSchedule(format!(
            "warm-up needs more than {VOLTAGE_WINDOW} slots, got {slots}"
        )));
    }
    let mut logs = Vec::with_capacity(slots);
    for _ in 0..slots {
        if predictor.voltages.len() == VOLTAGE_WINDOW {
            predictor.forecast()?;
        }
        let env = EnvSnapshot::of(channel.state());
        let (record, fitted) = scan_record(channel, &config.scan);
        let applied = match fitted {
            Some(v) => {
                predictor.observe(env, v, true);
                v
            }
            None if predictor.voltages.is_empty() => f64::NAN,
            None => {
                predictor.observe_missing(env);
                wrap_voltage(*predictor.voltages.back().unwrap_or(&0.0), channel.optical.v_pi)
            }
        };
        logs.push(log_for(channel, SlotMode::Scan, applied, VoltageSource::Fitted, record));
        channel.advance();
    }
    if predictor.last_fitted.is_none() || predictor.voltages.len() < VOLTAGE_WINDOW {
        return Err(ControllerError::NoCalibration);
    }
    predictor.update(config.fine_tune.warmup_steps)?;
    Ok(logs)
}

/// Alternating scan and transmit slots; transmit slots apply the most
/// recent fitted zero voltage.
pub fn run_baseline(
    channel: &mut Channel,
    slots: u64,
    initial_voltage: f64,
    config: &ControllerConfig,
) -> Result<RunReport, ControllerError> {
    config.schedule.validate()?;
    let period = config.schedule.baseline_scan_slots + config.schedule.baseline_transmit_slots;
    let mut voltage = initial_voltage;
    let mut logs = Vec::with_capacity(slots as usize);
    for k in 0..slots as usize {
        let log = if k % period < config.schedule.baseline_scan_slots {
            let (record, fitted) = scan_record(channel, &config.scan);
            if let Some(v) = fitted {
                voltage = v;
            }
            log_for(channel, SlotMode::Scan, voltage, VoltageSource::Fitted, record)
        } else {
            let outcome = channel.transmit(voltage);
            log_for(channel, SlotMode::Transmit, voltage, VoltageSource::Fitted, SlotRecord::Transmit(outcome))
        };
        logs.push(log);
        channel.advance();
    }
    RunReport::from_logs(RunMode::Baseline, logs, config, &channel.optical, 0)
}

enum Phase {
    Predict(usize),
    Scan(usize),
}

/// Blocks of forecast-driven transmit slots followed by scan blocks whose
/// fits replace the voltage window and fine-tune the forecaster. The
/// predictor must already be warmed up.
pub fn run_predictive(
    channel: &mut Channel,
    predictor: &mut Predictor,
    slots: u64,
    config: &ControllerConfig,
) -> Result<RunReport, ControllerError> {
    let schedule = &config.schedule;
    schedule.validate()?;
    let v_pi = channel.optical.v_pi;
    let mut phase = Phase::Predict(schedule.predict_slots);
    let mut divergence_events = 0;
    let mut logs = Vec::with_capacity(slots as usize);
    for _ in 0..slots {
        let forecast = predictor.forecast()?;
        if let (Phase::Predict(_), true, Some(fitted)) = (&phase, config.divergence_guard, predictor.last_fitted) {
            if (forecast - fitted).abs() > v_pi / 2.0 {
                divergence_events += 1;
                phase = Phase::Scan(schedule.scan_slots);
            }
        }
        let env = EnvSnapshot::of(channel.state());
        match phase {
            Phase::Predict(left) => {
                let outcome = channel.transmit(forecast);
                logs.push(log_for(
                    channel,
                    SlotMode::Transmit,
                    forecast,
                    VoltageSource::Predicted,
                    SlotRecord::Transmit(outcome),
                ));
                predictor.observe(env, forecast, false);
                phase = if left > 1 {
                    Phase::Predict(left - 1)
                } else {
                    Phase::Scan(schedule.scan_slots)
                };
            }
            Phase::Scan(left) => {
                let (record, fitted) = scan_record(channel, &config.scan);
                let applied = match fitted {
                    Some(v) => {
                        predictor.observe(env, v, true);
                        v
                    }
                    None => {
                        predictor.observe_missing(env);
                        wrap_voltage(*predictor.voltages.back().unwrap_or(&0.0), v_pi)
                    }
                };
                logs.push(log_for(channel, SlotMode::Scan, applied, VoltageSource::Fitted, record));
                phase = if left > 1 {
                    Phase::Scan(left - 1)
                } else {
                    predictor.update(config.fine_tune.block_steps)?;
                    Phase::Predict(schedule.predict_slots)
                };
            }
        }
        channel.advance();
    }
    RunReport::from_logs(RunMode::Predictive, logs, config, &channel.optical, divergence_events)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExperimentMode {
    Baseline,
    Predictive,
    Both,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scenario {
    pub drift: DriftConfig,
    pub optical: OpticalConfig,
    pub controller: ControllerConfig,
    pub days: f64,
    pub seed: u64,
    pub mode: ExperimentMode,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentReport {
    pub warmup: Vec<SlotLog>,
    pub baseline: Option<RunReport>,
    pub predictive: Option<RunReport>,
}

impl ExperimentReport {
    /// Side-by-side averages of the modes that ran.
    pub fn summary(&self) -> String {
        let mut out = String::new();
        for r in [&self.baseline, &self.predictive].into_iter().flatten() {
            out.push_str(&r.summary());
        }
        if let (Some(b), Some(p)) = (&self.baseline, &self.predictive) {
            let _ = writeln!(out, "[comparison]");
            let _ = writeln!(out, "qber_gap = {:.6}", p.mean_signal_qber - b.mean_signal_qber);
            let _ = writeln!(out, "throughput_ratio = {:.4}", p.sifted_per_second / b.sifted_per_second);
        }
        let _ = writeln!(out, "# qber_window: signal QBER pooled over a trailing window of transmit slots");
        out
    }
}

/// Warm-up, then the requested modes on copies of one channel so both see
/// the same drift realization.
pub fn run_experiment(scenario: &Scenario, model: &TrainedModel) -> Result<ExperimentReport, ControllerError> {
    let cfg = &scenario.controller;
    cfg.schedule.validate()?;
    let mut channel = Channel::new(scenario.drift, scenario.optical, cfg.schedule.slot_seconds, scenario.seed);
    let mut predictor = Predictor::new(model, cfg.fine_tune, scenario.optical.v_pi);
    let warmup = warm_up(&mut channel, &mut predictor, cfg)?;
    let slots = cfg.schedule.slots_for_days(scenario.days);
    let initial = predictor
        .last_fitted
        .map(|v| wrap_voltage(v, scenario.optical.v_pi))
        .ok_or(ControllerError::NoCalibration)?;

    let run_base = matches!(scenario.mode, ExperimentMode::Baseline | ExperimentMode::Both);
    let run_pred = matches!(scenario.mode, ExperimentMode::Predictive | ExperimentMode::Both);
    let baseline = if run_base {
        let mut ch = channel.clone();
        Some(run_baseline(&mut ch, slots, initial, cfg)?)
    } else {
        None
    };
    let predictive = if run_pred {
        Some(run_predictive(&mut channel, &mut predictor, slots, cfg)?)
    } else {
        None
    };
    Ok(ExperimentReport {
        warmup,
        baseline,
        predictive,
    })
}

/// A calibration log from scanning every slot: environment readings and
/// the fitted zero voltage, unwrapped into a continuous series. A failed
/// scan carries the previous value.
pub fn generate_series(
    drift: &DriftConfig,
    optical: &OpticalConfig,
    scan: &ScanConfig,
    slot_seconds: f64,
    points: usize,
    seed: u64,
) -> Vec<RawRecord> {
    let mut channel = Channel::new(*drift, *optical, slot_seconds, seed);
    let mut out: Vec<RawRecord> = Vec::with_capacity(points);
    while out.len() < points {
        let state = *channel.state();
        let fitted = scan_slot(&mut channel, scan.steps, scan.pulses_per_step).ok();
        let voltage = match (fitted, out.last()) {
            (Some(r), Some(prev)) => Some(unwrap_near(r.fitted_zero_voltage, prev.zero_voltage, optical.v_pi)),
            (Some(r), None) => Some(r.fitted_zero_voltage),
            (None, Some(prev)) => Some(prev.zero_voltage),
            (None, None) => None,
        };
        if let Some(zero_voltage) = voltage {
            out.push(RawRecord {
                timestamp: state.time,
                temperature: state.temperature,
                humidity: state.humidity,
                laser_power: state.laser_power,
                zero_voltage,
            });
        }
        channel.advance();
    }
    out
}

/// `sets` consecutive segments of one continuous calibration log, so the
/// sets share a device history and a single unwrapping branch.
pub fn generate_sets(
    drift: &DriftConfig,
    optical: &OpticalConfig,
    scan: &ScanConfig,
    slot_seconds: f64,
    sets: usize,
    points: usize,
    seed: u64,
) -> Vec<Vec<RawRecord>> {
    let long = generate_series(drift, optical, scan, slot_seconds, sets * points, seed);
    long.chunks(points.max(1)).map(<[RawRecord]>::to_vec).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lstm::{init_params, InitScheme, NetworkShape};

    fn quick_config(optical: &OpticalConfig) -> ControllerConfig {
        let mut c = ControllerConfig::for_channel(optical, ScheduleConfig::default());
        c.scan = ScanConfig {
            steps: 16,
            pulses_per_step: 100_000,
        };
        c
    }

    fn identity_normalizer() -> Normalizer {
        Normalizer {
            means: vec![0.0; FEATURE_DIM],
            stds: vec![1.0; FEATURE_DIM],
            label_mean: 2.5,
            label_std: 1.0,
        }
    }

    fn predictor() -> Predictor {
        let params = init_params(NetworkShape::default(), 3, InitScheme::default());
        Predictor::from_parts(params, identity_normalizer(), FineTuneConfig::default(), 2.5)
    }

    #[test]
    fn baseline_ten_slots() {
        let optical = OpticalConfig::default();
        let cfg = quick_config(&optical);
        let mut ch = Channel::new(DriftConfig::frozen(), optical, 10.0, 1);
        let r = run_baseline(&mut ch, 10, 0.0, &cfg).unwrap();
        let scans = r.logs.iter().filter(|l| l.mode == SlotMode::Scan).count();
        assert_eq!(scans, 5);
        assert_eq!(r.duty_ratio, 0.5);
    }

    #[test]
    fn duty_ratio_degenerate() {
        assert_eq!(duty_ratio(&[]), 0.0);
    }

    #[test]
    fn scan_block_fills_window_with_fits() {
        let optical = OpticalConfig::default();
        let cfg = quick_config(&optical);
        let mut ch = Channel::new(DriftConfig::calm(), optical, 10.0, 5);
        let mut p = predictor();
        warm_up(&mut ch, &mut p, &cfg).unwrap();
        let fits: Vec<f64> = cfg_scan_fits(&mut ch, &mut p, &cfg);
        let window = p.window();
        assert_eq!(window.len(), fits.len());
        for (w, f) in window.iter().zip(&fits) {
            let d = (w - f).rem_euclid(5.0);
            assert!(!(1e-9..=5.0 - 1e-9).contains(&d), "{w} vs {f}");
        }
    }

    fn cfg_scan_fits(ch: &mut Channel, p: &mut Predictor, cfg: &ControllerConfig) -> Vec<f64> {
        (0..VOLTAGE_WINDOW)
            .map(|_| {
                p.forecast().unwrap();
                let env = EnvSnapshot::of(ch.state());
                let r = scan_slot(ch, cfg.scan.steps, cfg.scan.pulses_per_step).unwrap();
                p.observe(env, r.fitted_zero_voltage, true);
                ch.advance();
                r.fitted_zero_voltage
            })
            .collect()
    }

    #[test]
    fn forecast_requires_full_window() {
        let mut p = predictor();
        assert!(matches!(p.forecast(), Err(ControllerError::NotReady { have: 0 })));
    }

    #[test]
    fn generated_series_is_continuous() {
        let optical = OpticalConfig::default();
        let scan = ScanConfig {
            steps: 16,
            pulses_per_step: 50_000,
        };
        let s = generate_series(&DriftConfig::calm(), &optical, &scan, 10.0, 200, 9);
        assert_eq!(s.len(), 200);
        for w in s.windows(2) {
            assert!((w[1].zero_voltage - w[0].zero_voltage).abs() < optical.v_pi);
            assert!(w[1].timestamp > w[0].timestamp);
        }
    }
}
