//! Acceptance suite. Prints one `PASS` or `FAIL` line per criterion and
//! exits nonzero if any criterion fails.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use phasecast::calibration::{fit_zero_voltage, scan_sweep};
use phasecast::config::ExperimentConfig;
use phasecast::container::{encode_checkpoint, Checkpoint};
use phasecast::controller::{run_experiment, ExperimentMode, ExperimentReport, SlotMode};
use phasecast::lstm::{
    cell_forward, init_params, network_forward, InitScheme, LstmLayerParams, LstmNetworkParams, LstmState,
    NetworkShape,
};
use phasecast::metrics::{linear_trend, rate_curve};
use phasecast::physics::{Channel, DriftConfig, OpticalConfig};
use phasecast::pipeline;
use phasecast::training::{
    adam_step, bptt_gradients, finite_diff_gradients, lr_at, AdamConfig, AdamState, ParamSet, TrainConfig,
    TrainedModel,
};

const TRAIN_SEED: u64 = 7;
const EXPERIMENT_SEED: u64 = 11;
const COMPARE_SEEDS: u64 = 21;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn within(elapsed: Duration, limit_s: f64) -> bool {
    elapsed.as_secs_f64() < limit_s
}

// ---------------------------------------------------------------- oracles

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Scalar cell update written unit by unit from the gate definitions.
#[allow(clippy::needless_range_loop)]
fn oracle_cell(layer: &LstmLayerParams, x: &[f64], h: &[f64], c: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let n = h.len();
    let mut h_out = vec![0.0; n];
    let mut c_out = vec![0.0; n];
    for k in 0..n {
        let mut pre = [layer.b_f[k], layer.b_i[k], layer.b_c[k], layer.b_o[k]];
        for (g, w) in [&layer.w_f, &layer.w_i, &layer.w_c, &layer.w_o].into_iter().enumerate() {
            for j in 0..n {
                pre[g] += w.get(k, j) * h[j];
            }
            for j in 0..x.len() {
                pre[g] += w.get(k, n + j) * x[j];
            }
        }
        let f = sigmoid(pre[0]);
        let i = sigmoid(pre[1]);
        let candidate = pre[2].tanh();
        let o = sigmoid(pre[3]);
        c_out[k] = f * c[k] + i * candidate;
        h_out[k] = o * c_out[k].tanh();
    }
    (h_out, c_out)
}

fn oracle_network(p: &LstmNetworkParams, xs: &[Vec<f64>]) -> Vec<f64> {
    let s = p.shape();
    let (mut h1, mut c1) = (vec![0.0; s.hidden1], vec![0.0; s.hidden1]);
    let (mut h2, mut c2) = (vec![0.0; s.hidden2], vec![0.0; s.hidden2]);
    xs.iter()
        .map(|x| {
            (h1, c1) = oracle_cell(&p.layer1, x, &h1, &c1);
            (h2, c2) = oracle_cell(&p.layer2, &h1, &h2, &c2);
            p.readout_b + p.readout_w.iter().zip(&h2).map(|(w, h)| w * h).sum::<f64>()
        })
        .collect()
}

fn rel(a: f64, b: f64) -> f64 {
    if a == b {
        0.0
    } else {
        (a - b).abs() / a.abs().max(b.abs())
    }
}

fn randomize(p: &mut LstmNetworkParams, rng: &mut ChaCha8Rng, scale: f64) {
    let flat: Vec<f64> = (0..p.num_params()).map(|_| rng.random_range(-scale..scale)).collect();
    p.set_flat(&flat);
}

fn random_shape(rng: &mut ChaCha8Rng) -> NetworkShape {
    NetworkShape {
        input: rng.random_range(1..=4),
        hidden1: rng.random_range(1..=4),
        hidden2: rng.random_range(1..=4),
    }
}

// ---------------------------------------------------------------- criteria

fn c1_forward() -> Verdict {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let shape = random_shape(&mut rng);
        let mut p = LstmNetworkParams::zeros(shape);
        randomize(&mut p, &mut rng, 1.5);
        let len = rng.random_range(1..=6);
        let xs: Vec<Vec<f64>> = (0..len)
            .map(|_| (0..shape.input).map(|_| rng.random_range(-2.0..2.0)).collect())
            .collect();
        let got = network_forward(&p, &xs, &LstmState::zeros(shape)).unwrap().predictions;
        for (a, b) in got.iter().zip(oracle_network(&p, &xs)) {
            worst = worst.max(rel(*a, b));
        }
        let (h0, c0): (Vec<f64>, Vec<f64>) = (0..shape.hidden1)
            .map(|_| (rng.random_range(-1.0..1.0), rng.random_range(-2.0..2.0)))
            .unzip();
        let (h, c, _) = cell_forward(&p.layer1, &xs[0], &h0, &c0).unwrap();
        let (ho, co) = oracle_cell(&p.layer1, &xs[0], &h0, &c0);
        for (a, b) in h.iter().chain(&c).zip(ho.iter().chain(&co)) {
            worst = worst.max(rel(*a, *b));
        }
    }

    // zero parameters: every gate is 1/2 and the candidate is 0
    let zero = LstmLayerParams::zeros(2, 3);
    let c_prev = [0.8, -1.2, 0.0];
    let (h, c, _) = cell_forward(&zero, &[0.3, -0.7], &[0.1, 0.2, 0.3], &c_prev).unwrap();
    let zero_exact = (0..3).all(|k| c[k] == 0.5 * c_prev[k] && h[k] == 0.5 * (0.5 * c_prev[k]).tanh());

    // saturated gates: f = i = o = 1 and candidate = 1 in double precision
    let mut sat = LstmLayerParams::zeros(2, 3);
    for b in [&mut sat.b_f, &mut sat.b_i, &mut sat.b_c, &mut sat.b_o] {
        b.iter_mut().for_each(|v| *v = 1e3);
    }
    let (h, c, _) = cell_forward(&sat, &[0.3, -0.7], &[0.1, 0.2, 0.3], &c_prev).unwrap();
    let sat_exact = (0..3).all(|k| c[k] == c_prev[k] + 1.0 && h[k] == (c_prev[k] + 1.0).tanh());

    let elapsed = t.elapsed();
    verdict(
        worst < 1e-12 && zero_exact && sat_exact && within(elapsed, 1.0),
        format!("max rel err {worst:.2e}, zero-param exact {zero_exact}, saturated exact {sat_exact}, {elapsed:.2?}"),
    )
}

fn c2_gradients() -> Verdict {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let shape = random_shape(&mut rng);
        let mut p = init_params(shape, rng.random(), InitScheme::default());
        randomize(&mut p, &mut rng, 1.0);
        let len = rng.random_range(1..=10);
        let xs: Vec<Vec<f64>> = (0..len)
            .map(|_| (0..shape.input).map(|_| rng.random_range(-2.0..2.0)).collect())
            .collect();
        let ys: Vec<f64> = (0..len).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (_, g) = bptt_gradients(&p, &xs, &ys).unwrap();
        let fd = finite_diff_gradients(&p, &xs, &ys, 1e-5);
        for (a, b) in g.to_flat().iter().zip(fd.to_flat()) {
            // relative where resolvable, absolute under the difference noise floor
            worst = worst.max((a - b).abs() / a.abs().max(b.abs()).max(1e-4));
        }
    }
    let elapsed = t.elapsed();
    verdict(
        worst < 1e-6 && within(elapsed, 30.0),
        format!("max rel err {worst:.2e} over 100 nets, {elapsed:.2?}"),
    )
}

fn c3_adam_schedule() -> Verdict {
    // three steps on a two-parameter readout-only net, recursion by hand
    let shape = NetworkShape {
        input: 1,
        hidden1: 1,
        hidden2: 2,
    };
    let mut p = LstmNetworkParams::zeros(shape);
    let n = p.num_params();
    let grads_seq = [[0.5, -1.5], [0.25, 2.0], [-0.75, 0.125]];
    let cfg = AdamConfig::default();
    let mut state = AdamState::new(&p, cfg);
    let (lr, b1, b2, eps) = (0.02, 0.9, 0.999, 1e-8);
    let (mut m, mut v, mut theta) = ([0.0f64; 2], [0.0f64; 2], [0.0f64; 2]);
    let mut worst = 0.0f64;
    for (t, g) in grads_seq.iter().enumerate() {
        let mut grads = LstmNetworkParams::zeros(shape);
        grads.readout_w = g.to_vec();
        adam_step(&mut p, &grads, &mut state, lr);
        for k in 0..2 {
            m[k] = b1 * m[k] + (1.0 - b1) * g[k];
            v[k] = b2 * v[k] + (1.0 - b2) * g[k] * g[k];
            let m_hat = m[k] / (1.0 - b1.powi(t as i32 + 1));
            let v_hat = v[k] / (1.0 - b2.powi(t as i32 + 1));
            theta[k] -= lr * m_hat / (v_hat.sqrt() + eps);
            worst = worst.max((p.readout_w[k] - theta[k]).abs());
        }
    }
    let untouched = p.to_flat()[..n - 3].iter().all(|&x| x == 0.0) && p.readout_b == 0.0;
    let tc = TrainConfig::default();
    let lrs = [lr_at(0, &tc), lr_at(100, &tc), lr_at(200, &tc)];
    let exact = lrs == [0.02, 0.004, 0.0008] && lr_at(99, &tc) == 0.02 && lr_at(269, &tc) == 0.0008;
    verdict(
        worst < 1e-12 && untouched && exact,
        format!("adam max abs err {worst:.2e}, lr_at(0/100/200) = {lrs:?}"),
    )
}

fn c4_training(model: &TrainedModel, elapsed: Duration) -> Verdict {
    let losses: Vec<f64> = model.history.iter().map(|r| r.mean_loss).collect();
    let finite = losses.iter().all(|l| l.is_finite());
    let (first, last) = (losses[0], *losses.last().unwrap());
    let trend = linear_trend(&losses).unwrap();
    verdict(
        finite && last <= first && trend.slope <= 0.0 && within(elapsed, 1800.0) && losses.len() == 270,
        format!(
            "{} epochs in {elapsed:.1?}, loss {first:.4} -> {last:.5}, slope {:.2e}",
            losses.len(),
            trend.slope
        ),
    )
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

fn c5_ordering(cfg: &ExperimentConfig) -> Verdict {
    let t = Instant::now();
    let reports: Vec<_> = (0..COMPARE_SEEDS)
        .map(|seed| {
            let series = pipeline::comparison_series(cfg, seed);
            pipeline::compare(cfg, &series, seed).unwrap()
        })
        .collect();
    let med = |name: &str| median(reports.iter().map(|r| r.rmse_of(name).unwrap()).collect());
    let (lstm, rnn, mlp) = (med("lstm"), med("rnn"), med("mlp"));
    let poly = ["poly1", "poly2", "poly3"].map(med);
    let best_poly = poly.iter().copied().fold(f64::INFINITY, f64::min);
    let elapsed = t.elapsed();
    verdict(
        lstm < rnn && rnn < mlp.min(best_poly) && within(elapsed, 1200.0),
        format!(
            "median RMSE over {COMPARE_SEEDS} seeds: lstm {lstm:.3} rnn {rnn:.3} mlp {mlp:.3} poly1-3 {:.3}/{:.3}/{:.3} V, {elapsed:.1?}",
            poly[0], poly[1], poly[2]
        ),
    )
}

/// Share of fits within 0.005·v_pi of the truth, and the worst error.
fn fringe_fit_rate(optical: OpticalConfig, trials: u64) -> (u64, f64) {
    let v_pi = optical.v_pi;
    let mut good = 0;
    let mut worst = 0.0f64;
    for seed in 0..trials {
        let mut channel = Channel::new(DriftConfig::frozen(), optical, 10.0, 50_000 + seed);
        let truth = channel.state().true_zero_voltage;
        let Ok(fit) = fit_zero_voltage(&scan_sweep(&mut channel, 64, 100_000), v_pi) else {
            worst = f64::INFINITY;
            continue;
        };
        let d = (fit.zero_voltage - truth).rem_euclid(2.0 * v_pi);
        let err = d.min(2.0 * v_pi - d);
        worst = worst.max(err);
        if err < 0.005 * v_pi {
            good += 1;
        }
    }
    (good, worst)
}

fn c6_fringe_fit() -> Verdict {
    let t = Instant::now();
    let trials = 1000;
    // back-to-back interferometers; the 50 km figure is reported alongside
    let (good, worst) = fringe_fit_rate(OpticalConfig::at_distance(0.0), trials);
    let elapsed = t.elapsed();
    let (good_50, _) = fringe_fit_rate(OpticalConfig::at_distance(50.0), trials);
    verdict(
        good * 100 >= trials * 99 && within(elapsed, 60.0),
        format!(
            "{good}/{trials} within 0.005 v_pi at 0 km, worst {worst:.2e} V, {elapsed:.2?} ({good_50}/{trials} at 50 km)"
        ),
    )
}

struct Runs {
    two_day_50: ExperimentReport,
    two_day_150: ExperimentReport,
    ten_day: ExperimentReport,
}

fn run_all(model: &TrainedModel) -> Runs {
    let at = |km: f64| ExperimentConfig {
        distance_km: km,
        ..ExperimentConfig::default()
    };
    let run = |cfg: &ExperimentConfig, days, mode| {
        run_experiment(&pipeline::scenario(cfg, days, EXPERIMENT_SEED, mode), model).unwrap()
    };
    Runs {
        two_day_50: run(&at(50.0), 2.0, ExperimentMode::Both),
        two_day_150: run(&at(150.0), 2.0, ExperimentMode::Both),
        ten_day: run(&at(50.0), 10.0, ExperimentMode::Predictive),
    }
}

fn fingerprint(runs: &Runs) -> Vec<u8> {
    let mut out = Vec::new();
    for r in [&runs.two_day_50, &runs.two_day_150, &runs.ten_day] {
        out.extend_from_slice(r.summary().as_bytes());
        for rep in [&r.baseline, &r.predictive].into_iter().flatten() {
            out.extend_from_slice(rep.series_csv().as_bytes());
        }
    }
    out
}

fn c7_duty(runs: &Runs) -> Verdict {
    let r = &runs.two_day_50;
    let (b, p) = (r.baseline.as_ref().unwrap(), r.predictive.as_ref().unwrap());
    let count = |logs: &[phasecast::controller::SlotLog]| {
        let tx = logs.iter().filter(|l| l.mode == SlotMode::Transmit).count();
        (tx, logs.len())
    };
    let (bt, bn) = count(&b.logs);
    let (pt, pn) = count(&p.logs);
    verdict(
        bt * 2 == bn && pt * 30 == pn * 25 && b.duty_ratio == 0.5 && p.duty_ratio == 25.0 / 30.0,
        format!(
            "baseline {bt}/{bn} = {}, predictive {pt}/{pn} = {:.6}",
            b.duty_ratio, p.duty_ratio
        ),
    )
}

fn paired(r: &ExperimentReport) -> (f64, f64, f64) {
    let (b, p) = (r.baseline.as_ref().unwrap(), r.predictive.as_ref().unwrap());
    (
        b.mean_signal_qber,
        p.mean_signal_qber,
        p.sifted_per_second / b.sifted_per_second,
    )
}

fn c8_fifty_km(runs: &Runs) -> Verdict {
    let (b, p, ratio) = paired(&runs.two_day_50);
    let gap = p - b;
    verdict(
        (0.012..=0.022).contains(&b) && gap <= 0.002 && ratio >= 1.5,
        format!("baseline QBER {b:.5}, predictive {p:.5}, gap {gap:+.5}, throughput x{ratio:.3}"),
    )
}

fn c9_150_km(runs: &Runs) -> Verdict {
    let (b, p, _) = paired(&runs.two_day_150);
    let gap = p - b;
    verdict(
        (0.04..=0.065).contains(&b) && gap <= 0.003,
        format!("baseline QBER {b:.5} (bracket 0.04-0.065), predictive {p:.5}, gap {gap:+.5}"),
    )
}

fn c10_long_run(runs: &Runs) -> Verdict {
    let p = runs.ten_day.predictive.as_ref().unwrap();
    let daily = p.daily_qber();
    let trend = linear_trend(&daily).unwrap();
    let shown: Vec<String> = daily.iter().map(|q| format!("{q:.4}")).collect();
    verdict(
        daily.len() == 10 && !trend.significantly_positive(),
        format!(
            "daily QBER [{}], slope {:.2e}/day, 95% upper {:.2e}",
            shown.join(" "),
            trend.slope,
            trend.upper_95
        ),
    )
}

fn c11_rate_curve() -> Verdict {
    let text = include_str!("fixtures/rate_curve_oracle.csv");
    let rows: Vec<[f64; 3]> = text
        .lines()
        .skip(1)
        .map(|l| {
            let v: Vec<f64> = l.split(',').map(|s| s.parse().unwrap()).collect();
            [v[0], v[1], v[2]]
        })
        .collect();
    let distances: Vec<f64> = rows.iter().map(|r| r[0]).collect();
    let curve = rate_curve(&OpticalConfig::default(), &distances, 1.16);
    let mut worst = 0.0f64;
    for (pt, row) in curve.iter().zip(&rows) {
        worst = worst.max(rel(pt.rate_per_pulse, row[1])).max(rel(pt.qber_mu, row[2]));
    }

    let mut grid: Vec<&_> = curve.iter().collect();
    grid.sort_by(|a, b| a.distance_km.total_cmp(&b.distance_km));
    let positive: Vec<_> = grid.iter().filter(|p| p.rate_per_pulse > 0.0).collect();
    let decreasing = positive.windows(2).all(|w| w[1].rate_per_pulse < w[0].rate_per_pulse);
    let cutoff = positive.last().map_or(0.0, |p| p.distance_km);
    let tail_zero = grid
        .iter()
        .filter(|p| p.distance_km > cutoff)
        .all(|p| p.rate_per_pulse == 0.0);
    let at_50 = curve.iter().find(|p| p.distance_km == 50.0).unwrap().rate_per_pulse;
    verdict(
        worst < 1e-9 && decreasing && tail_zero && at_50 > 0.0 && cutoff < 200.0,
        format!(
            "max rel err vs oracle {worst:.1e} at {} distances, R(50 km) = {at_50:.3e}, last positive at {cutoff} km",
            curve.len()
        ),
    )
}

fn main() {
    let t0 = Instant::now();
    let mut results: Vec<(u32, &str, Verdict)> = Vec::new();
    let mut report = |n: u32, name: &'static str, v: Verdict| {
        println!("criterion {n:>2} {} {name}: {}", if v.pass { "PASS" } else { "FAIL" }, v.detail);
        results.push((n, name, v));
    };

    report(1, "lstm forward", c1_forward());
    report(2, "gradient check", c2_gradients());
    report(3, "adam and schedule", c3_adam_schedule());

    let cfg = ExperimentConfig::default();
    let t = Instant::now();
    let sets = pipeline::training_sets(&cfg, TRAIN_SEED);
    let model = pipeline::train_on_sets(&cfg, &sets, TRAIN_SEED, |_| {}).unwrap();
    report(4, "training feasibility", c4_training(&model, t.elapsed()));

    report(5, "model ordering", c5_ordering(&cfg));
    report(6, "fringe fit", c6_fringe_fit());

    let runs = run_all(&model);
    report(7, "duty ratios", c7_duty(&runs));
    report(8, "50 km two-day run", c8_fifty_km(&runs));
    report(9, "150 km two-day run", c9_150_km(&runs));
    report(10, "ten-day stability", c10_long_run(&runs));
    report(11, "key-rate curve", c11_rate_curve());

    // repeat data generation, training and runs 7-10 from scratch
    let again_sets = pipeline::training_sets(&cfg, TRAIN_SEED);
    let again_model = pipeline::train_on_sets(&cfg, &again_sets, TRAIN_SEED, |_| {}).unwrap();
    let same_model =
        encode_checkpoint(&Checkpoint::from(&model)) == encode_checkpoint(&Checkpoint::from(&again_model));
    let first = fingerprint(&runs);
    let second = fingerprint(&run_all(&again_model));
    report(
        12,
        "determinism",
        verdict(
            same_model && first == second,
            format!("checkpoint identical {same_model}, {} output bytes identical {}", first.len(), first == second),
        ),
    );

    let failed: Vec<String> = results
        .iter()
        .filter(|(_, _, v)| !v.pass)
        .map(|(n, name, _)| format!("{n} ({name})"))
        .collect();
    println!(
        "acceptance: {}/{} passed in {:.1?}",
        results.len() - failed.len(),
        results.len(),
        t0.elapsed()
    );
    if !failed.is_empty() {
        println!("failed: {}", failed.join(", "));
        std::process::exit(1);
    }
}
