//! Comparison forecasters on four features `[T, H, P, U]`: low-order
//! polynomial extrapolation in time, a one-hidden-layer perceptron, a
//! vanilla tanh RNN and a four-feature LSTM, scored by closed-loop RMSE on
//! the held-out tail of a series.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::dataset::{DatasetError, Normalizer, RawRecord};
use crate::linalg::{dot, Matrix};
use crate::lstm::{LstmNetworkParams, LstmState};
use crate::rng::derive_seed;
use crate::training::{fit_epochs, mse_loss, train_lstm_normalized, ParamSet, TrainConfig, TrainError};

/// Width of the comparison feature vector.
pub const COMPARE_DIM: usize = 4;

#[derive(Debug, Error)]
pub enum BaselineError {
    #[error("polynomial order {0} exceeds 3")]
    OrderTooHigh(usize),
    #[error("need at least {min} training points, have {have}")]
    TooFewPoints { have: usize, min: usize },
    #[error("train fraction {0} must lie strictly between 0 and 1")]
    BadSplit(f64),
    #[error("least-squares solve failed")]
    Solve,
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BaselineKind {
    Polynomial(usize),
    Mlp(usize),
    VanillaRnn(usize),
    Lstm,
}

impl BaselineKind {
    pub fn name(&self) -> String {
        match self {
            BaselineKind::Polynomial(k) => format!("poly{k}"),
            BaselineKind::Mlp(_) => "mlp".to_string(),
            BaselineKind::VanillaRnn(_) => "rnn".to_string(),
            BaselineKind::Lstm => "lstm".to_string(),
        }
    }
}

/// Least-squares polynomial in (standardized) time over `train`, evaluated
/// at the `horizon` indices that follow it.
pub fn fit_predict_polynomial(train: &[f64], horizon: usize, order: usize) -> Result<Vec<f64>, BaselineError> {
    if order > 3 {
        return Err(BaselineError::OrderTooHigh(order));
    }
    let n = train.len();
    if n <= order {
        return Err(BaselineError::TooFewPoints { have: n, min: order + 1 });
    }
    let mid = (n as f64 - 1.0) / 2.0;
    let scale = (n as f64 / 2.0).max(1.0);
    let tau = |i: usize| (i as f64 - mid) / scale;
    let a = DMatrix::from_fn(n, order + 1, |r, c| tau(r).powi(c as i32));
    let b = DVector::from_column_slice(train);
    let coef = a.svd(true, true).solve(&b, 1e-12).map_err(|_| BaselineError::Solve)?;
    Ok((n..n + horizon)
        .map(|i| (0..=order).map(|c| coef[c] * tau(i).powi(c as i32)).sum())
        .collect())
}

/// One-hidden-layer tanh perceptron with a linear output.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub w1: Matrix,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: f64,
}

impl ParamSet for MlpParams {
    fn tensors(&self) -> Vec<&[f64]> {
        vec![self.w1.as_slice(), &self.b1, &self.w2, std::slice::from_ref(&self.b2)]
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        vec![
            self.w1.as_mut_slice(),
            &mut self.b1,
            &mut self.w2,
            std::slice::from_mut(&mut self.b2),
        ]
    }
}

impl MlpParams {
    pub fn init(input: usize, hidden: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w1 = Matrix::uniform(hidden, input, 1.0 / (input as f64).sqrt(), &mut rng);
        let w2 = Matrix::uniform(1, hidden, 1.0 / (hidden as f64).sqrt(), &mut rng);
        Self {
            w1,
            b1: vec![0.0; hidden],
            w2: w2.as_slice().to_vec(),
            b2: 0.0,
        }
    }

    fn hidden(&self, x: &[f64]) -> Vec<f64> {
        let mut h = vec![0.0; self.b1.len()];
        self.w1.affine_into(x, &self.b1, &mut h);
        h.iter_mut().for_each(|v| *v = v.tanh());
        h
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        dot(&self.w2, &self.hidden(x)) + self.b2
    }

    /// Mean squared error over the batch and its exact gradient.
    pub fn loss_and_grad(&self, inputs: &[Vec<f64>], labels: &[f64]) -> (f64, MlpParams) {
        let mut g = self.zeros_like();
        let n = inputs.len() as f64;
        let mut loss = 0.0;
        for (x, &y) in inputs.iter().zip(labels) {
            let h = self.hidden(x);
            let err = dot(&self.w2, &h) + self.b2 - y;
            loss += err * err;
            let dy = 2.0 * err / n;
            g.b2 += dy;
            let dz: Vec<f64> = h
                .iter()
                .zip(&self.w2)
                .map(|(hv, w)| dy * w * (1.0 - hv * hv))
                .collect();
            for (gw, hv) in g.w2.iter_mut().zip(&h) {
                *gw += dy * hv;
            }
            g.w1.rank1_acc(&dz, x);
            for (gb, d) in g.b1.iter_mut().zip(&dz) {
                *gb += d;
            }
        }
        (loss / n, g)
    }
}

/// Trains on `batches` of `(inputs, labels)`, one Adam step per batch per
/// epoch.
pub fn train_mlp(
    batches: &[(Vec<Vec<f64>>, Vec<f64>)],
    hidden: usize,
    config: &TrainConfig,
    seed: u64,
) -> Result<MlpParams, BaselineError> {
    let input = batches.first().and_then(|b| b.0.first()).map_or(0, Vec::len);
    let mut params = MlpParams::init(input, hidden, seed);
    fit_epochs(
        &mut params,
        batches.len(),
        config,
        |p, b| Ok(p.loss_and_grad(&batches[b].0, &batches[b].1)),
        |_| {},
    )?;
    Ok(params)
}

/// Single tanh recurrence `h_t = tanh(W·[h_{t-1}, x_t] + b)` with a linear
/// readout.
#[derive(Debug, Clone, PartialEq)]
pub struct RnnParams {
    pub w: Matrix,
    pub b: Vec<f64>,
    pub readout_w: Vec<f64>,
    pub readout_b: f64,
}

impl ParamSet for RnnParams {
    fn tensors(&self) -> Vec<&[f64]> {
        vec![
            self.w.as_slice(),
            &self.b,
            &self.readout_w,
            std::slice::from_ref(&self.readout_b),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        vec![
            self.w.as_mut_slice(),
            &mut self.b,
            &mut self.readout_w,
            std::slice::from_mut(&mut self.readout_b),
        ]
    }
}

impl RnnParams {
    pub fn init(input: usize, hidden: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = Matrix::uniform(hidden, hidden + input, 1.0 / ((hidden + input) as f64).sqrt(), &mut rng);
        let r = Matrix::uniform(1, hidden, 1.0 / (hidden as f64).sqrt(), &mut rng);
        Self {
            w,
            b: vec![0.0; hidden],
            readout_w: r.as_slice().to_vec(),
            readout_b: 0.0,
        }
    }

    pub fn hidden_size(&self) -> usize {
        self.b.len()
    }

    /// Advances `h` by one input and returns the readout.
    pub fn step(&self, x: &[f64], h: &mut Vec<f64>) -> f64 {
        let mut concat = h.clone();
        concat.extend_from_slice(x);
        let mut next = vec![0.0; self.b.len()];
        self.w.affine_into(&concat, &self.b, &mut next);
        next.iter_mut().for_each(|v| *v = v.tanh());
        *h = next;
        dot(&self.readout_w, h) + self.readout_b
    }

    /// Mean squared error over one sequence from a zero state, and its
    /// gradient by backpropagation through time.
    pub fn loss_and_grad(&self, inputs: &[Vec<f64>], labels: &[f64]) -> (f64, RnnParams) {
        let hsz = self.hidden_size();
        let n = inputs.len();
        let mut concats = Vec::with_capacity(n);
        let mut hs = Vec::with_capacity(n);
        let mut preds = Vec::with_capacity(n);
        let mut h = vec![0.0; hsz];
        for x in inputs {
            let mut concat = h.clone();
            concat.extend_from_slice(x);
            preds.push(self.step(x, &mut h));
            concats.push(concat);
            hs.push(h.clone());
        }
        let loss = mse_loss(&preds, labels);
        let mut g = self.zeros_like();
        let mut dh_next = vec![0.0; hsz];
        for t in (0..n).rev() {
            let dy = 2.0 * (preds[t] - labels[t]) / n as f64;
            g.readout_b += dy;
            for (gw, hv) in g.readout_w.iter_mut().zip(&hs[t]) {
                *gw += dy * hv;
            }
            let dz: Vec<f64> = (0..hsz)
                .map(|k| (dy * self.readout_w[k] + dh_next[k]) * (1.0 - hs[t][k] * hs[t][k]))
                .collect();
            g.w.rank1_acc(&dz, &concats[t]);
            for (gb, d) in g.b.iter_mut().zip(&dz) {
                *gb += d;
            }
            let mut dconcat = vec![0.0; hsz + inputs[t].len()];
            self.w.transpose_mul_acc(&dz, &mut dconcat);
            dh_next.copy_from_slice(&dconcat[..hsz]);
        }
        (loss, g)
    }
}

/// Trains on `sequences`, each unrolled from a zero state, one Adam step
/// per sequence per epoch.
pub fn train_rnn(
    sequences: &[(Vec<Vec<f64>>, Vec<f64>)],
    hidden: usize,
    config: &TrainConfig,
    seed: u64,
) -> Result<RnnParams, BaselineError> {
    let input = sequences.first().and_then(|b| b.0.first()).map_or(0, Vec::len);
    let mut params = RnnParams::init(input, hidden, seed);
    fit_epochs(
        &mut params,
        sequences.len(),
        config,
        |p, b| Ok(p.loss_and_grad(&sequences[b].0, &sequences[b].1)),
        |_| {},
    )?;
    Ok(params)
}

/// Four-feature samples `[T_t, H_t, P_t, U_t] → U_{t+1}` for `t` in
/// `range` (label index `t + 1` must exist).
pub fn compare_samples(series: &[RawRecord], range: std::ops::Range<usize>) -> (Vec<Vec<f64>>, Vec<f64>) {
    range
        .map(|t| {
            let r = &series[t];
            (
                vec![r.temperature, r.humidity, r.laser_power, r.zero_voltage],
                series[t + 1].zero_voltage,
            )
        })
        .unzip()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelResult {
    pub name: String,
    pub rmse: f64,
    pub predictions: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonReport {
    /// Index of the first held-out point.
    pub split: usize,
    pub times: Vec<f64>,
    pub truth: Vec<f64>,
    pub models: Vec<ModelResult>,
}

impl ComparisonReport {
    pub fn rmse_of(&self, name: &str) -> Option<f64> {
        self.models.iter().find(|m| m.name == name).map(|m| m.rmse)
    }

    pub fn rmse_csv(&self) -> String {
        let mut out = String::from("model,rmse\n");
        for m in &self.models {
            let _ = writeln!(out, "{},{}", m.name, m.rmse);
        }
        out
    }

    pub fn predictions_csv(&self, model: &ModelResult) -> String {
        let mut out = String::from("t,true_v,pred_v\n");
        for ((t, y), p) in self.times.iter().zip(&self.truth).zip(&model.predictions) {
            let _ = writeln!(out, "{t},{y},{p}");
        }
        out
    }
}

pub fn rmse(pred: &[f64], truth: &[f64]) -> f64 {
    mse_loss(pred, truth).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CompareConfig {
    pub train_fraction: f64,
    pub train: TrainConfig,
    pub mlp_hidden: usize,
    pub rnn_hidden: usize,
    pub max_poly_order: usize,
    /// Contiguous pieces the training segment is cut into; each is one
    /// optimizer step per epoch.
    pub chunks: usize,
}

impl Default for CompareConfig {
    fn default() -> Self {
        Self {
            train_fraction: 0.7,
            train: TrainConfig::default(),
            mlp_hidden: 20,
            rnn_hidden: 20,
            max_poly_order: 3,
            chunks: 10,
        }
    }
}

/// Runs a one-step model closed-loop over the held-out segment: env
/// readings are true, the voltage input is the model's previous output.
fn closed_loop(series: &[RawRecord], split: usize, norm: &Normalizer, mut step: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut u = series[split - 1].zero_voltage;
    (split..series.len())
        .map(|t| {
            let r = &series[t - 1];
            let x = norm.normalize_features(&[r.temperature, r.humidity, r.laser_power, u]);
            u = norm.denormalize_label(step(&x));
            u
        })
        .collect()
}

/// Trains every model on the first `train_fraction` of `series` and scores
/// closed-loop predictions on the rest. Recurrent models are first run
/// over the training inputs to build their state.
pub fn compare_models(series: &[RawRecord], config: &CompareConfig, seed: u64) -> Result<ComparisonReport, BaselineError> {
    if !(config.train_fraction > 0.0 && config.train_fraction < 1.0) {
        return Err(BaselineError::BadSplit(config.train_fraction));
    }
    let split = (series.len() as f64 * config.train_fraction).round() as usize;
    if split < 8 || split >= series.len() {
        return Err(BaselineError::TooFewPoints { have: split, min: 8 });
    }
    // training labels stop at index split - 1, so nothing held out leaks in
    let (raw_x, raw_y) = compare_samples(series, 0..split - 1);
    let norm = Normalizer::fit(raw_x.iter().map(Vec::as_slice).zip(raw_y.iter().copied()))?;
    let xs: Vec<Vec<f64>> = raw_x.iter().map(|x| norm.normalize_features(x)).collect();
    let ys: Vec<f64> = raw_y.iter().map(|&y| norm.normalize_label(y)).collect();

    let truth: Vec<f64> = series[split..].iter().map(|r| r.zero_voltage).collect();
    let times: Vec<f64> = series[split..].iter().map(|r| r.timestamp).collect();
    let mut models = Vec::new();
    let mut push = |kind: BaselineKind, predictions: Vec<f64>| {
        models.push(ModelResult {
            name: kind.name(),
            rmse: rmse(&predictions, &truth),
            predictions,
        });
    };

    let piece = xs.len().div_ceil(config.chunks.max(1));
    let chunks: Vec<(Vec<Vec<f64>>, Vec<f64>)> = xs
        .chunks(piece)
        .zip(ys.chunks(piece))
        .map(|(x, y)| (x.to_vec(), y.to_vec()))
        .collect();
    let (lstm, _, _) = train_lstm_normalized(&chunks, COMPARE_DIM, &config.train, derive_seed(seed, 0), |_| {})?;
    push(BaselineKind::Lstm, closed_loop_lstm(&lstm, &xs, series, split, &norm));

    let rnn = train_rnn(&chunks, config.rnn_hidden, &config.train, derive_seed(seed, 1))?;
    let mut h = vec![0.0; rnn.hidden_size()];
    for x in &xs {
        rnn.step(x, &mut h);
    }
    push(
        BaselineKind::VanillaRnn(config.rnn_hidden),
        closed_loop(series, split, &norm, |x| rnn.step(x, &mut h)),
    );

    let mlp = train_mlp(&chunks, config.mlp_hidden, &config.train, derive_seed(seed, 2))?;
    push(
        BaselineKind::Mlp(config.mlp_hidden),
        closed_loop(series, split, &norm, |x| mlp.predict(x)),
    );

    let train_u: Vec<f64> = series[..split].iter().map(|r| r.zero_voltage).collect();
    for order in 1..=config.max_poly_order.min(3) {
        push(
            BaselineKind::Polynomial(order),
            fit_predict_polynomial(&train_u, truth.len(), order)?,
        );
    }
    Ok(ComparisonReport {
        split,
        times,
        truth,
        models,
    })
}

fn closed_loop_lstm(
    params: &LstmNetworkParams,
    train_inputs: &[Vec<f64>],
    series: &[RawRecord],
    split: usize,
    norm: &Normalizer,
) -> Vec<f64> {
    let mut state = LstmState::zeros(params.shape());
    for x in train_inputs {
        params.step(x, &mut state);
    }
    closed_loop(series, split, norm, |x| params.step(x, &mut state))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_extrapolates_exactly() {
        let train: Vec<f64> = (0..50).map(|i| 1.5 + 0.02 * i as f64).collect();
        let pred = fit_predict_polynomial(&train, 10, 1).unwrap();
        for (k, p) in pred.iter().enumerate() {
            assert!((p - (1.5 + 0.02 * (50 + k) as f64)).abs() < 1e-9);
        }
    }

    #[test]
    fn constant_series_any_order() {
        for order in 0..=3 {
            let pred = fit_predict_polynomial(&[2.0; 40], 5, order).unwrap();
            assert!(pred.iter().all(|p| (p - 2.0).abs() < 1e-9), "order {order}: {pred:?}");
        }
        assert!(matches!(
            fit_predict_polynomial(&[2.0; 40], 5, 4),
            Err(BaselineError::OrderTooHigh(4))
        ));
    }

    fn numeric_grad<P: ParamSet>(p: &P, f: impl Fn(&P) -> f64) -> Vec<f64> {
        let flat = p.to_flat();
        (0..flat.len())
            .map(|i| {
                let mut a = p.clone();
                let mut b = p.clone();
                let mut fa = flat.clone();
                let mut fb = flat.clone();
                fa[i] += 1e-6;
                fb[i] -= 1e-6;
                a.set_flat(&fa);
                b.set_flat(&fb);
                (f(&a) - f(&b)) / 2e-6
            })
            .collect()
    }

    fn toy() -> (Vec<Vec<f64>>, Vec<f64>) {
        let xs: Vec<Vec<f64>> = (0..7)
            .map(|t| vec![(t as f64 * 0.7).sin(), (t as f64 * 0.3).cos(), 0.1 * t as f64])
            .collect();
        let ys: Vec<f64> = (0..7).map(|t| (t as f64 * 0.5).cos()).collect();
        (xs, ys)
    }

    #[test]
    fn mlp_gradient_matches_differences() {
        let (xs, ys) = toy();
        let p = MlpParams::init(3, 4, 2);
        let (_, g) = p.loss_and_grad(&xs, &ys);
        let num = numeric_grad(&p, |q| q.loss_and_grad(&xs, &ys).0);
        for (a, b) in g.to_flat().iter().zip(&num) {
            assert!((a - b).abs() < 1e-7 * (1.0 + b.abs()), "{a} vs {b}");
        }
    }

    #[test]
    fn rnn_gradient_matches_differences() {
        let (xs, ys) = toy();
        let p = RnnParams::init(3, 4, 5);
        let (_, g) = p.loss_and_grad(&xs, &ys);
        let num = numeric_grad(&p, |q| q.loss_and_grad(&xs, &ys).0);
        for (a, b) in g.to_flat().iter().zip(&num) {
            assert!((a - b).abs() < 1e-7 * (1.0 + b.abs()), "{a} vs {b}");
        }
    }

    #[test]
    fn rmse_by_summation() {
        let p = [1.0, 2.0, 4.0];
        let t = [1.0, 3.0, 2.0];
        assert!((rmse(&p, &t) - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
    }
}
