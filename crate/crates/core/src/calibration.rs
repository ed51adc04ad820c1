//! Fringe scanning: sweep the modulator voltage over one period, count
//! photons at the destructive port, and fit the zero-phase voltage.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::physics::{detection_probability, wrap_voltage, Channel, DriftState, OpticalConfig};

/// A fit needs at least this many grid points.
pub const MIN_SCAN_STEPS: usize = 8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CalibrationError {
    #[error("scan has {steps} steps, need at least {MIN_SCAN_STEPS}")]
    TooFewSteps { steps: usize },
    #[error("voltages and counts differ in length ({voltages} vs {counts})")]
    LengthMismatch { voltages: usize, counts: usize },
    #[error("no significant fringe in scan (amplitude {amplitude:.3e}, standard error {stderr:.3e})")]
    FitDegenerate { amplitude: f64, stderr: f64 },
}

/// Raw sweep: applied voltages and the photon counts recorded at each.
#[derive(Debug, Clone, PartialEq)]
pub struct Sweep {
    pub applied_voltages: Vec<f64>,
    pub counts: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScanResult {
    pub applied_voltages: Vec<f64>,
    pub counts: Vec<f64>,
    /// Fringe minimum, wrapped into `[0, 2·v_pi)`.
    pub fitted_zero_voltage: f64,
    /// RMS fit residual divided by the fitted fringe amplitude.
    pub fit_residual: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FringeFit {
    pub zero_voltage: f64,
    pub residual: f64,
    pub offset: f64,
    pub amplitude: f64,
}

/// `n` voltages evenly spaced over `[0, 2·v_pi)`.
pub fn scan_grid(n: usize, v_pi: f64) -> Vec<f64> {
    (0..n).map(|k| 2.0 * v_pi * k as f64 / n as f64).collect()
}

/// Sweeps the grid on the channel's current state. Counts are binomial
/// draws at intensity μ.
pub fn scan_sweep(channel: &mut Channel, n_steps: usize, pulses_per_step: u64) -> Sweep {
    let applied_voltages = scan_grid(n_steps, channel.optical.v_pi);
    let counts = applied_voltages
        .iter()
        .map(|&v| channel.count(v, pulses_per_step) as f64)
        .collect();
    Sweep {
        applied_voltages,
        counts,
    }
}

/// Noise-free sweep: expected counts at each grid point.
pub fn expected_sweep(state: &DriftState, optical: &OpticalConfig, n_steps: usize, pulses_per_step: u64) -> Sweep {
    let applied_voltages = scan_grid(n_steps, optical.v_pi);
    let counts = applied_voltages
        .iter()
        .map(|&v| pulses_per_step as f64 * detection_probability(v, state, optical, optical.mu))
        .collect();
    Sweep {
        applied_voltages,
        counts,
    }
}

/// Least-squares fit of `counts ≈ a − b·cos(π(V − v0)/v_pi)` with `b > 0`.
///
/// The model is linear in `(a, p, q)` after expanding the cosine,
/// `counts ≈ a + p·cos(πV/v_pi) + q·sin(πV/v_pi)`, so the fit is a single
/// linear solve followed by phase extraction.
pub fn fit_zero_voltage(sweep: &Sweep, v_pi: f64) -> Result<FringeFit, CalibrationError> {
    let n = sweep.applied_voltages.len();
    if n != sweep.counts.len() {
        return Err(CalibrationError::LengthMismatch {
            voltages: n,
            counts: sweep.counts.len(),
        });
    }
    if n < MIN_SCAN_STEPS {
        return Err(CalibrationError::TooFewSteps { steps: n });
    }
    let k = PI / v_pi;
    let design = DMatrix::from_fn(n, 3, |r, c| {
        let v = sweep.applied_voltages[r];
        match c {
            0 => 1.0,
            1 => (k * v).cos(),
            _ => (k * v).sin(),
        }
    });
    let y = DVector::from_column_slice(&sweep.counts);
    let coef = design
        .clone()
        .svd(true, true)
        .solve(&y, 1e-12)
        .expect("SVD with both factors computed");
    let (a, p, q) = (coef[0], coef[1], coef[2]);
    let amplitude = p.hypot(q);

    let resid = &y - &design * &coef;
    let rms = (resid.norm_squared() / n as f64).sqrt();
    // standard error of each quadrature coefficient on an even grid
    let stderr = rms * (2.0 / n as f64).sqrt();
    if amplitude <= 3.0 * stderr || amplitude <= 1e-12 * (a.abs() + 1.0) {
        return Err(CalibrationError::FitDegenerate { amplitude, stderr });
    }
    // −b·cos(kV − θ) = p·cos(kV) + q·sin(kV)  ⇒  θ = atan2(−q, −p)
    let theta = (-q).atan2(-p);
    Ok(FringeFit {
        zero_voltage: wrap_voltage(theta / k, v_pi),
        residual: rms / amplitude,
        offset: a,
        amplitude,
    })
}

/// Sweep plus fit on the channel's current slot.
pub fn scan_slot(channel: &mut Channel, n_steps: usize, pulses_per_step: u64) -> Result<ScanResult, CalibrationError> {
    let sweep = scan_sweep(channel, n_steps, pulses_per_step);
    let fit = fit_zero_voltage(&sweep, channel.optical.v_pi)?;
    Ok(ScanResult {
        applied_voltages: sweep.applied_voltages,
        counts: sweep.counts,
        fitted_zero_voltage: fit.zero_voltage,
        fit_residual: fit.residual,
    })
}

/// Scan settings: grid size and the per-step share of a slot's pulses.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScanConfig {
    pub steps: usize,
    pub pulses_per_step: u64,
}

impl ScanConfig {
    /// Spreads one slot's worth of pulses evenly over the grid.
    pub fn for_slot(optical: &OpticalConfig, slot_seconds: f64, steps: usize) -> Self {
        Self {
            steps,
            pulses_per_step: (optical.pulse_rate * slot_seconds / steps as f64).round() as u64,
        }
    }
}

/// `n_scans` consecutive one-slot scans; the channel advances after each.
pub fn run_scan_block(
    channel: &mut Channel,
    n_scans: usize,
    scan: &ScanConfig,
) -> Vec<Result<ScanResult, CalibrationError>> {
    (0..n_scans)
        .map(|_| {
            let r = scan_slot(channel, scan.steps, scan.pulses_per_step);
            channel.advance();
            r
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::physics::DriftConfig;

    fn state_at(v0: f64) -> DriftState {
        DriftState::at_rest(&DriftConfig::frozen(), v0)
    }

    #[test]
    fn noiseless_fringe_is_recovered_exactly() {
        let optical = OpticalConfig::default();
        let sweep = expected_sweep(&state_at(1.7), &optical, 64, 100_000);
        let fit = fit_zero_voltage(&sweep, optical.v_pi).unwrap();
        assert!((fit.zero_voltage - 1.7).abs() < 1e-9, "{}", fit.zero_voltage);
    }

    #[test]
    fn noiseless_minimum_on_nearest_grid_point() {
        let optical = OpticalConfig::default();
        let sweep = expected_sweep(&state_at(3.2), &optical, 8, 1_000_000);
        let imin = (0..8)
            .min_by(|&a, &b| sweep.counts[a].total_cmp(&sweep.counts[b]))
            .unwrap();
        // grid step 0.625 V: 3.125 is nearest to 3.2
        assert_eq!(sweep.applied_voltages[imin], 3.125);
    }

    #[test]
    fn flat_and_empty_scans_are_degenerate() {
        let flat = Sweep {
            applied_voltages: scan_grid(16, 2.5),
            counts: vec![40.0; 16],
        };
        assert!(matches!(
            fit_zero_voltage(&flat, 2.5),
            Err(CalibrationError::FitDegenerate { .. })
        ));
        let zero = Sweep {
            applied_voltages: scan_grid(16, 2.5),
            counts: vec![0.0; 16],
        };
        assert!(matches!(
            fit_zero_voltage(&zero, 2.5),
            Err(CalibrationError::FitDegenerate { .. })
        ));
    }

    #[test]
    fn zero_pulse_scan_fails_to_fit() {
        let mut ch = Channel::new(DriftConfig::frozen(), OpticalConfig::default(), 10.0, 4);
        assert!(matches!(
            scan_slot(&mut ch, 16, 0),
            Err(CalibrationError::FitDegenerate { .. })
        ));
    }

    #[test]
    fn short_scans_rejected() {
        let s = Sweep {
            applied_voltages: scan_grid(7, 2.5),
            counts: vec![1.0; 7],
        };
        assert_eq!(
            fit_zero_voltage(&s, 2.5).unwrap_err(),
            CalibrationError::TooFewSteps { steps: 7 }
        );
    }

    #[test]
    fn wraps_near_period_edges() {
        let optical = OpticalConfig::default();
        for v0 in [0.0, 1e-6, 4.999_999, 4.9] {
            let sweep = expected_sweep(&state_at(v0), &optical, 32, 100_000);
            let fit = fit_zero_voltage(&sweep, optical.v_pi).unwrap();
            assert!((0.0..5.0).contains(&fit.zero_voltage));
            let d = (fit.zero_voltage - v0 + 2.5).rem_euclid(5.0) - 2.5;
            assert!(d.abs() < 1e-9, "v0 {v0} fit {}", fit.zero_voltage);
        }
    }

    #[test]
    fn scan_block_advances_the_channel() {
        let mut ch = Channel::new(DriftConfig::calm(), OpticalConfig::default(), 10.0, 9);
        let cfg = ScanConfig::for_slot(&ch.optical, 10.0, 64);
        assert_eq!(cfg.pulses_per_step, 156_250);
        let block = run_scan_block(&mut ch, 5, &cfg);
        assert_eq!(block.len(), 5);
        assert!(block.iter().all(|r| r.is_ok()));
        assert_eq!(ch.slot(), 5);
    }
}
