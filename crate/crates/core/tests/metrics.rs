//! Estimators against simulator ground truth at large pulse counts.

use phasecast::metrics::{aggregate_outcomes, decoy_bounds, expected_stats, h2, key_rate, IntensityStats};
use phasecast::physics::{seeded, simulate_slot, DriftConfig, DriftState, OpticalConfig};

/// One 10⁸-pulse run at the zero-phase point.
fn pooled(cfg: &OpticalConfig, seed: u64) -> IntensityStats {
    pooled_over(cfg, seed, 100.0)
}

fn pooled_over(cfg: &OpticalConfig, seed: u64, seconds: f64) -> IntensityStats {
    let s = DriftState::at_rest(&DriftConfig::frozen(), 1.0);
    let out = simulate_slot(1.0, &s, cfg, seconds, &mut seeded(seed));
    aggregate_outcomes([&out]).unwrap()
}

#[test]
fn signal_gain_within_three_sigma() {
    let cfg = OpticalConfig::default();
    let expect = expected_stats(&cfg, 0.0).signal().gain;
    let mut inside = 0;
    for seed in 0..20 {
        let st = pooled(&cfg, seed);
        let n = st.signal().counts.pulses as f64;
        let sigma = (expect * (1.0 - expect) / n).sqrt();
        if (st.signal().gain - expect).abs() < 3.0 * sigma {
            inside += 1;
        }
    }
    // P(|z| > 3) is 0.27 %; allow one stray trial
    assert!(inside >= 19, "{inside}/20 within 3 sigma");
}

#[test]
fn decoy_bounds_bracket_the_truth() {
    let cfg = OpticalConfig::default();
    let eta = cfg.eta_total();
    let y0 = cfg.dark_count_per_gate;
    let y1_true = eta + y0;
    let e1_true = (cfg.optical_error(0.0) * eta + 0.5 * y0) / y1_true;
    let asym = decoy_bounds(&expected_stats(&cfg, 0.0), cfg.mu, cfg.nu).unwrap();
    assert!(asym.y1_lower <= y1_true && asym.e1_upper >= e1_true);
    // The e1 bound sits about 0.0017 above the truth; 1e10 pulses put it
    // roughly ten sampling deviations clear.
    let trials = 200;
    let mut ok = 0;
    let mut close = 0;
    for seed in 0..trials {
        let st = pooled_over(&cfg, 1000 + seed, 10_000.0);
        let Ok(b) = decoy_bounds(&st, cfg.mu, cfg.nu) else {
            continue;
        };
        if b.y1_lower <= y1_true && b.e1_upper >= e1_true {
            ok += 1;
        }
        if (b.y1_lower - eta).abs() <= 0.1 * eta {
            close += 1;
        }
    }
    assert!(ok * 100 >= trials * 99, "bounds held in {ok}/{trials}");
    assert_eq!(close, trials, "Y1 within 10 % of eta in {close}/{trials}");
}

#[test]
fn rate_never_rises_with_signal_error() {
    let cfg = OpticalConfig::default();
    let base = expected_stats(&cfg, 0.0);
    let bounds = decoy_bounds(&base, cfg.mu, cfg.nu).unwrap();
    let mut prev = f64::INFINITY;
    for k in 0..=50 {
        let mut st = base;
        st.per_intensity[0].qber = 0.01 * k as f64;
        let r = key_rate(&st, &bounds, 1.16, cfg.mu);
        assert!(r <= prev && r >= 0.0);
        prev = r;
    }
    assert_eq!(prev, 0.0);
}

#[test]
fn entropy_symmetry() {
    for k in 0..=100 {
        let e = k as f64 / 100.0;
        assert!((h2(e) - h2(1.0 - e)).abs() < 1e-15);
        assert!((0.0..=1.0).contains(&h2(e)));
    }
}
