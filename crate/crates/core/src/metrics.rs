//! Gains, error rates, three-intensity decoy-state bounds and the
//! asymptotic key rate.

use std::fmt::Write as _;

use statrs::distribution::{ContinuousCDF, StudentsT};
use thiserror::Error;

use crate::controller::{SlotLog, SlotMode, SlotRecord};
use crate::physics::{Intensity, IntensityCounts, OpticalConfig, SlotOutcome};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("run has no transmit slots")]
    EmptyRun,
    #[error("intensity {0:?} has no detections")]
    MissingIntensity(Intensity),
    #[error("decoy bound out of range (Y1 = {y1_raw:.3e}, e1 = {e1_raw:.3e}); statistics insufficient")]
    NegativeBound { y1_raw: f64, e1_raw: f64 },
    #[error("decoy analysis needs mu > nu > 0 (mu = {mu}, nu = {nu})")]
    InvalidIntensities { mu: f64, nu: f64 },
}

/// Gain `Q` (detections per pulse) and error rate `E` (errors per sifted
/// bit) for one intensity.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct IntensityStat {
    pub gain: f64,
    pub qber: f64,
    pub counts: IntensityCounts,
}

impl IntensityStat {
    pub fn from_counts(counts: IntensityCounts) -> Self {
        let ratio = |a: u64, b: u64| if b > 0 { a as f64 / b as f64 } else { 0.0 };
        Self {
            gain: ratio(counts.detections, counts.pulses),
            qber: ratio(counts.errors, counts.sifted),
            counts,
        }
    }
}

/// Per-intensity statistics, indexed by [`Intensity`].
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct IntensityStats {
    pub per_intensity: [IntensityStat; 3],
}

impl IntensityStats {
    pub fn get(&self, which: Intensity) -> &IntensityStat {
        &self.per_intensity[which as usize]
    }

    pub fn signal(&self) -> &IntensityStat {
        self.get(Intensity::Signal)
    }

    pub fn decoy(&self) -> &IntensityStat {
        self.get(Intensity::Decoy)
    }

    pub fn vacuum(&self) -> &IntensityStat {
        self.get(Intensity::Vacuum)
    }
}

/// Pools raw counters over outcomes; ratios are taken once at the end.
pub fn aggregate_outcomes<'a>(outcomes: impl IntoIterator<Item = &'a SlotOutcome>) -> Result<IntensityStats, MetricsError> {
    let mut pooled = [IntensityCounts::default(); 3];
    let mut any = false;
    for o in outcomes {
        any = true;
        for (p, c) in pooled.iter_mut().zip(&o.counts) {
            p.add(c);
        }
    }
    if !any {
        return Err(MetricsError::EmptyRun);
    }
    Ok(IntensityStats {
        per_intensity: pooled.map(IntensityStat::from_counts),
    })
}

/// Statistics pooled over the transmit slots of a run.
pub fn aggregate_stats(logs: &[SlotLog]) -> Result<IntensityStats, MetricsError> {
    aggregate_outcomes(logs.iter().filter_map(|l| match &l.record {
        SlotRecord::Transmit(o) => Some(o),
        _ => None,
    }))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecoyBounds {
    pub y1_lower: f64,
    pub e1_upper: f64,
}

/// Vacuum + weak-decoy lower bound on the single-photon yield and upper
/// bound on its error rate. `Y0` comes from the vacuum slots.
pub fn decoy_bounds(stats: &IntensityStats, mu: f64, nu: f64) -> Result<DecoyBounds, MetricsError> {
    if !(mu > nu && nu > 0.0) {
        return Err(MetricsError::InvalidIntensities { mu, nu });
    }
    let q_mu = stats.signal().gain;
    let q_nu = stats.decoy().gain;
    let e_nu = stats.decoy().qber;
    let y0 = stats.vacuum().gain;

    let y1 = mu / (mu * nu - nu * nu)
        * (q_nu * nu.exp() - q_mu * mu.exp() * nu * nu / (mu * mu) - (mu * mu - nu * nu) / (mu * mu) * y0);
    let e1 = if y1 > 0.0 {
        (e_nu * q_nu * nu.exp() - 0.5 * y0) / (y1 * nu)
    } else {
        f64::INFINITY
    };
    let in_range = |v: f64| (0.0..=1.0).contains(&v);
    if !in_range(y1) || !in_range(e1) {
        return Err(MetricsError::NegativeBound { y1_raw: y1, e1_raw: e1 });
    }
    Ok(DecoyBounds {
        y1_lower: y1,
        e1_upper: e1,
    })
}

/// Binary Shannon entropy, with `H2(0) = H2(1) = 0`.
pub fn h2(e: f64) -> f64 {
    if e <= 0.0 || e >= 1.0 {
        return 0.0;
    }
    -e * e.log2() - (1.0 - e) * (1.0 - e).log2()
}

/// Sifting factor for BB84 with symmetric basis choice.
pub const SIFTING: f64 = 0.5;

/// Asymptotic decoy-state rate per pulse,
/// `q·{−Q_μ·f·H2(E_μ) + Q_1·[1 − H2(e_1)]}` with `Q_1 = Y_1·μ·e^{−μ}`,
/// clamped at zero.
pub fn key_rate(stats: &IntensityStats, bounds: &DecoyBounds, f_ec: f64, mu: f64) -> f64 {
    let q_mu = stats.signal().gain;
    let e_mu = stats.signal().qber;
    let q1 = bounds.y1_lower * mu * (-mu).exp();
    // an error bound at or beyond 1/2 leaves no single-photon secrecy
    let privacy = if bounds.e1_upper < 0.5 { 1.0 - h2(bounds.e1_upper) } else { 0.0 };
    let r = SIFTING * (-q_mu * f_ec * h2(e_mu) + q1 * privacy);
    r.max(0.0)
}

/// Bounds then rate; a failed bound means no key.
pub fn secure_rate(stats: &IntensityStats, mu: f64, nu: f64, f_ec: f64) -> f64 {
    match decoy_bounds(stats, mu, nu) {
        Ok(b) => key_rate(stats, &b, f_ec, mu),
        Err(_) => 0.0,
    }
}

/// Infinite-statistics gains and error rates at a given phase error.
pub fn expected_stats(optical: &OpticalConfig, phase_error: f64) -> IntensityStats {
    let eta = optical.eta_total();
    let y0 = optical.dark_count_per_gate;
    let e_opt = optical.optical_error(phase_error);
    let per_intensity = optical.intensities().map(|intensity| {
        let p_signal = 1.0 - (-intensity * eta).exp();
        let gain = p_signal + y0;
        IntensityStat {
            gain,
            qber: (e_opt * p_signal + 0.5 * y0) / gain,
            counts: IntensityCounts::default(),
        }
    });
    IntensityStats { per_intensity }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RatePoint {
    pub distance_km: f64,
    pub rate_per_pulse: f64,
    pub qber_mu: f64,
}

/// Closed-form key rate against distance at zero phase error.
pub fn rate_curve(optical: &OpticalConfig, distances_km: &[f64], f_ec: f64) -> Vec<RatePoint> {
    distances_km
        .iter()
        .map(|&d| {
            let cfg = OpticalConfig {
                distance_km: d,
                ..*optical
            };
            let stats = expected_stats(&cfg, 0.0);
            RatePoint {
                distance_km: d,
                rate_per_pulse: secure_rate(&stats, cfg.mu, cfg.nu, f_ec),
                qber_mu: stats.signal().qber,
            }
        })
        .collect()
}

pub fn rate_curve_csv(points: &[RatePoint]) -> String {
    let mut out = String::from("distance_km,rate_per_pulse,qber_mu\n");
    for p in points {
        let _ = writeln!(out, "{},{:e},{}", p.distance_km, p.rate_per_pulse, p.qber_mu);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QberPoint {
    pub slot: u64,
    pub time_s: f64,
    pub mode: SlotMode,
    /// Signal QBER pooled over the transmit slots of the trailing window.
    pub qber_window: Option<f64>,
    /// True when the value was carried forward across non-transmit slots.
    pub carried: bool,
}

/// Trailing-window signal QBER for every slot.
pub fn qber_series(logs: &[SlotLog], window_slots: usize) -> Vec<QberPoint> {
    let window = window_slots.max(1);
    let mut out = Vec::with_capacity(logs.len());
    let mut errors = 0u64;
    let mut sifted = 0u64;
    let mut last: Option<f64> = None;
    let counts = |l: &SlotLog| match &l.record {
        SlotRecord::Transmit(o) => {
            let c = o.get(Intensity::Signal);
            (c.errors, c.sifted)
        }
        _ => (0, 0),
    };
    for (k, log) in logs.iter().enumerate() {
        let (e, s) = counts(log);
        errors += e;
        sifted += s;
        if k >= window {
            let (e, s) = counts(&logs[k - window]);
            errors -= e;
            sifted -= s;
        }
        let transmit = log.mode == SlotMode::Transmit;
        if transmit && sifted > 0 {
            last = Some(errors as f64 / sifted as f64);
        }
        out.push(QberPoint {
            slot: log.slot,
            time_s: log.time_s,
            mode: log.mode,
            qber_window: last,
            carried: !transmit,
        });
    }
    out
}

/// Ordinary least-squares trend of `ys` against their index.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Trend {
    pub slope: f64,
    pub stderr: f64,
    /// Upper end of the one-sided 95 % confidence interval of the slope.
    pub upper_95: f64,
}

impl Trend {
    /// True when the data support a positive slope at 95 % confidence.
    pub fn significantly_positive(&self) -> bool {
        self.slope - (self.upper_95 - self.slope) > 0.0
    }
}

pub fn linear_trend(ys: &[f64]) -> Option<Trend> {
    let n = ys.len();
    if n < 3 {
        return None;
    }
    let nf = n as f64;
    let xm = (nf - 1.0) / 2.0;
    let ym = ys.iter().sum::<f64>() / nf;
    let sxx: f64 = (0..n).map(|i| (i as f64 - xm).powi(2)).sum();
    let sxy: f64 = ys.iter().enumerate().map(|(i, y)| (i as f64 - xm) * (y - ym)).sum();
    let slope = sxy / sxx;
    let intercept = ym - slope * xm;
    let sse: f64 = ys
        .iter()
        .enumerate()
        .map(|(i, y)| (y - intercept - slope * i as f64).powi(2))
        .sum();
    let stderr = (sse / (nf - 2.0) / sxx).sqrt();
    let t = StudentsT::new(0.0, 1.0, nf - 2.0).ok()?.inverse_cdf(0.95);
    Some(Trend {
        slope,
        stderr,
        upper_95: slope + t * stderr,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stats_from(gains: [f64; 3], qbers: [f64; 3]) -> IntensityStats {
        let mut s = IntensityStats::default();
        for k in 0..3 {
            s.per_intensity[k].gain = gains[k];
            s.per_intensity[k].qber = qbers[k];
        }
        s
    }

    #[test]
    fn h2_landmarks() {
        assert_eq!(h2(0.0), 0.0);
        assert_eq!(h2(1.0), 0.0);
        assert!((h2(0.5) - 1.0).abs() < 1e-15);
        for e in [0.01, 0.1, 0.3] {
            assert!((h2(e) - h2(1.0 - e)).abs() < 1e-14);
        }
    }

    #[test]
    fn ratio_arithmetic() {
        let mut o = SlotOutcome::default();
        o.counts[0] = IntensityCounts {
            pulses: 10,
            detections: 2,
            sifted: 2,
            errors: 1,
        };
        let s = aggregate_outcomes([&o]).unwrap();
        assert_eq!(s.signal().gain, 0.2);
        assert_eq!(s.signal().qber, 0.5);
        assert_eq!(aggregate_outcomes(std::iter::empty()).unwrap_err(), MetricsError::EmptyRun);
    }

    #[test]
    fn ideal_single_photon_channel_bound() {
        let (mu, nu) = (0.5f64, 0.1f64);
        let s = stats_from([1.0 - (-mu).exp(), 1.0 - (-nu).exp(), 0.0], [0.0; 3]);
        let b = decoy_bounds(&s, mu, nu).unwrap();
        assert!(b.y1_lower <= 1.0 && b.y1_lower >= 0.99, "{}", b.y1_lower);
    }

    #[test]
    fn constructed_negative_bound_is_reported() {
        let (mu, nu) = (0.5f64, 0.1f64);
        let q_nu = 0.01;
        let y0 = q_nu * nu.exp() * mu * mu / (mu * mu - nu * nu);
        let s = stats_from([0.05, q_nu, y0], [0.01, 0.01, 0.5]);
        match decoy_bounds(&s, mu, nu) {
            Err(MetricsError::NegativeBound { y1_raw, .. }) => assert!(y1_raw < 0.0),
            other => panic!("expected NegativeBound, got {other:?}"),
        }
    }

    #[test]
    fn saturated_error_gives_zero_rate() {
        let s = stats_from([0.01, 0.002, 1e-6], [0.5, 0.02, 0.5]);
        let b = DecoyBounds {
            y1_lower: 0.02,
            e1_upper: 0.02,
        };
        assert_eq!(key_rate(&s, &b, 1.16, 0.5), 0.0);
    }

    #[test]
    fn lossless_errorless_rate() {
        let mu = 0.5f64;
        let s = stats_from([1.0 - (-mu).exp(), 0.0, 0.0], [0.0; 3]);
        let b = DecoyBounds {
            y1_lower: 1.0,
            e1_upper: 0.0,
        };
        assert!((key_rate(&s, &b, 1.16, mu) - 0.5 * mu * (-mu).exp()).abs() < 1e-15);
    }

    #[test]
    fn trend_of_a_line() {
        let t = linear_trend(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert!((t.slope - 1.0).abs() < 1e-12);
        assert!(t.stderr < 1e-12);
        assert!(t.significantly_positive());
        let flat = linear_trend(&[0.017, 0.018, 0.017, 0.018, 0.017, 0.018]).unwrap();
        assert!(!flat.significantly_positive());
    }
}
