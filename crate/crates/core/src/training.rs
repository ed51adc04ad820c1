//! Loss, backpropagation through time, the finite-difference gradient
//! oracle, Adam, the step-decay schedule, full training and online
//! fine-tuning.

use std::fmt::Write as _;

use thiserror::Error;

use crate::dataset::{fit_normalizer, normalized_sequence, DatasetError, Normalizer, SampleSequence};
use crate::lstm::{
    init_params, network_forward, predict_sequence, GateCache, InitScheme, LstmError, LstmLayerParams,
    LstmNetworkParams, LstmState, NetworkShape,
};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Lstm(#[from] LstmError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("empty training sequence")]
    EmptySequence,
    #[error("{inputs} inputs but {labels} labels")]
    LengthMismatch { inputs: usize, labels: usize },
    #[error("non-finite gradient ({context})")]
    NonFiniteGradient { context: String },
}

/// Flat view over every trainable tensor of a model, in a fixed order.
///
/// The optimizer and gradient utilities only need this view, so the same
/// Adam implementation drives the LSTM and the comparison baselines.
pub trait ParamSet: Clone {
    fn tensors(&self) -> Vec<&[f64]>;
    fn tensors_mut(&mut self) -> Vec<&mut [f64]>;

    fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.fill(0.0);
        }
        z
    }

    fn to_flat(&self) -> Vec<f64> {
        self.tensors().concat()
    }

    /// Overwrites every parameter from `flat`, which must hold exactly
    /// [`num_params`](ParamSet::num_params) values.
    fn set_flat(&mut self, flat: &[f64]) {
        let mut off = 0;
        for t in self.tensors_mut() {
            t.copy_from_slice(&flat[off..off + t.len()]);
            off += t.len();
        }
        assert_eq!(off, flat.len(), "flat parameter vector has wrong length");
    }

    fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    fn global_norm(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|t| t.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }
}

impl ParamSet for LstmNetworkParams {
    fn tensors(&self) -> Vec<&[f64]> {
        let mut v: Vec<&[f64]> = Vec::with_capacity(18);
        v.extend(self.layer1.tensors());
        v.extend(self.layer2.tensors());
        v.push(&self.readout_w);
        v.push(std::slice::from_ref(&self.readout_b));
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v: Vec<&mut [f64]> = Vec::with_capacity(18);
        v.extend(self.layer1.tensors_mut());
        v.extend(self.layer2.tensors_mut());
        v.push(&mut self.readout_w);
        v.push(std::slice::from_mut(&mut self.readout_b));
        v
    }
}

/// Gradients share the parameter container's layout tensor for tensor.
pub type GradientSet = LstmNetworkParams;

/// Rescales `grads` so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm<P: ParamSet>(grads: &mut P, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for t in grads.tensors_mut() {
            t.iter_mut().for_each(|v| *v *= scale);
        }
    }
    norm
}

pub fn mse_loss(predictions: &[f64], labels: &[f64]) -> f64 {
    assert_eq!(predictions.len(), labels.len());
    let n = predictions.len() as f64;
    predictions.iter().zip(labels).map(|(p, l)| (p - l) * (p - l)).sum::<f64>() / n
}

/// `Σ w (p − l)² / Σ w`; steps with zero weight do not contribute.
pub fn weighted_mse_loss(predictions: &[f64], labels: &[f64], weights: &[f64]) -> f64 {
    let wsum: f64 = weights.iter().sum();
    predictions
        .iter()
        .zip(labels)
        .zip(weights)
        .map(|((p, l), w)| w * (p - l) * (p - l))
        .sum::<f64>()
        / wsum
}

fn check_lengths(inputs: usize, labels: usize, weights: Option<usize>) -> Result<(), TrainError> {
    if inputs == 0 {
        return Err(TrainError::EmptySequence);
    }
    if inputs != labels || weights.is_some_and(|w| w != inputs) {
        return Err(TrainError::LengthMismatch { inputs, labels });
    }
    Ok(())
}

/// Backward pass through one cell. Accumulates parameter gradients into
/// `grads` and returns `(dz, dC_{t-1})` where `dz` is the gradient with
/// respect to `[h_{t-1}, x_t]`.
fn cell_backward(
    layer: &LstmLayerParams,
    cache: &GateCache,
    dh: &[f64],
    dc_next: &[f64],
    grads: &mut LstmLayerParams,
) -> (Vec<f64>, Vec<f64>) {
    let n = dh.len();
    let mut da_f = vec![0.0; n];
    let mut da_i = vec![0.0; n];
    let mut da_c = vec![0.0; n];
    let mut da_o = vec![0.0; n];
    let mut dc_prev = vec![0.0; n];
    for k in 0..n {
        let (f, i, ct, o, tc) = (cache.f[k], cache.i[k], cache.c_tilde[k], cache.o[k], cache.tanh_c[k]);
        let d_o = dh[k] * tc;
        let dc = dc_next[k] + dh[k] * o * (1.0 - tc * tc);
        da_f[k] = dc * cache.c_prev[k] * f * (1.0 - f);
        da_i[k] = dc * ct * i * (1.0 - i);
        da_c[k] = dc * i * (1.0 - ct * ct);
        da_o[k] = d_o * o * (1.0 - o);
        dc_prev[k] = dc * f;
    }
    let z = &cache.concat;
    grads.w_f.rank1_acc(&da_f, z);
    grads.w_i.rank1_acc(&da_i, z);
    grads.w_c.rank1_acc(&da_c, z);
    grads.w_o.rank1_acc(&da_o, z);
    for k in 0..n {
        grads.b_f[k] += da_f[k];
        grads.b_i[k] += da_i[k];
        grads.b_c[k] += da_c[k];
        grads.b_o[k] += da_o[k];
    }
    let mut dz = vec![0.0; z.len()];
    layer.w_f.transpose_mul_acc(&da_f, &mut dz);
    layer.w_i.transpose_mul_acc(&da_i, &mut dz);
    layer.w_c.transpose_mul_acc(&da_c, &mut dz);
    layer.w_o.transpose_mul_acc(&da_o, &mut dz);
    (dz, dc_prev)
}

/// Exact gradient of the sequence MSE with respect to every parameter,
/// unrolled over the whole sequence from a zero state.
pub fn bptt_gradients<X: AsRef<[f64]>>(
    params: &LstmNetworkParams,
    inputs: &[X],
    labels: &[f64],
) -> Result<(f64, GradientSet), TrainError> {
    bptt_gradients_from(params, inputs, labels, None, &LstmState::zeros(params.shape()))
}

/// BPTT with optional per-step loss weights and an explicit initial state.
/// The initial state is treated as a constant.
pub fn bptt_gradients_from<X: AsRef<[f64]>>(
    params: &LstmNetworkParams,
    inputs: &[X],
    labels: &[f64],
    weights: Option<&[f64]>,
    state0: &LstmState,
) -> Result<(f64, GradientSet), TrainError> {
    check_lengths(inputs.len(), labels.len(), weights.map(|w| w.len()))?;
    let pass = network_forward(params, inputs, state0)?;
    let wsum = weights.map_or(inputs.len() as f64, |w| w.iter().sum());
    let weight = |t: usize| weights.map_or(1.0, |w| w[t]);
    let loss = pass
        .predictions
        .iter()
        .zip(labels)
        .enumerate()
        .map(|(t, (p, l))| weight(t) * (p - l) * (p - l))
        .sum::<f64>()
        / wsum;

    let shape = params.shape();
    let mut grads = params.zeros_like();
    let mut dh1_next = vec![0.0; shape.hidden1];
    let mut dc1_next = vec![0.0; shape.hidden1];
    let mut dh2_next = vec![0.0; shape.hidden2];
    let mut dc2_next = vec![0.0; shape.hidden2];

    for t in (0..inputs.len()).rev() {
        let cache = &pass.caches[t];
        let dy = 2.0 * weight(t) * (pass.predictions[t] - labels[t]) / wsum;
        for (g, h) in grads.readout_w.iter_mut().zip(&cache.h2) {
            *g += dy * h;
        }
        grads.readout_b += dy;

        let dh2: Vec<f64> = params
            .readout_w
            .iter()
            .zip(&dh2_next)
            .map(|(w, d)| dy * w + d)
            .collect();
        let (dz2, dc2_prev) = cell_backward(&params.layer2, &cache.layer2, &dh2, &dc2_next, &mut grads.layer2);
        dh2_next.copy_from_slice(&dz2[..shape.hidden2]);
        dc2_next = dc2_prev;

        let dh1: Vec<f64> = dz2[shape.hidden2..].iter().zip(&dh1_next).map(|(a, b)| a + b).collect();
        let (dz1, dc1_prev) = cell_backward(&params.layer1, &cache.layer1, &dh1, &dc1_next, &mut grads.layer1);
        dh1_next.copy_from_slice(&dz1[..shape.hidden1]);
        dc1_next = dc1_prev;
    }

    if !grads.all_finite() || !loss.is_finite() {
        return Err(TrainError::NonFiniteGradient {
            context: "bptt".into(),
        });
    }
    Ok((loss, grads))
}

/// Sequence loss from a zero state, optionally weighted.
pub fn sequence_loss<X: AsRef<[f64]>>(
    params: &LstmNetworkParams,
    inputs: &[X],
    labels: &[f64],
    weights: Option<&[f64]>,
) -> f64 {
    let mut state = LstmState::zeros(params.shape());
    let preds = predict_sequence(params, inputs, &mut state);
    match weights {
        Some(w) => weighted_mse_loss(&preds, labels, w),
        None => mse_loss(&preds, labels),
    }
}

/// Central-difference estimate of every partial derivative of the
/// sequence loss, `(L(θ+h) − L(θ−h)) / 2h`.
pub fn finite_diff_gradients<X: AsRef<[f64]>>(
    params: &LstmNetworkParams,
    inputs: &[X],
    labels: &[f64],
    h: f64,
) -> GradientSet {
    let base = params.to_flat();
    let mut probe = params.clone();
    let mut flat = base.clone();
    let mut out = Vec::with_capacity(base.len());
    for k in 0..base.len() {
        flat[k] = base[k] + h;
        probe.set_flat(&flat);
        let up = sequence_loss(&probe, inputs, labels, None);
        flat[k] = base[k] - h;
        probe.set_flat(&flat);
        let down = sequence_loss(&probe, inputs, labels, None);
        flat[k] = base[k];
        out.push((up - down) / (2.0 * h));
    }
    let mut grads = params.zeros_like();
    grads.set_flat(&out);
    grads
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new<P: ParamSet>(params: &P, config: AdamConfig) -> Self {
        let n = params.num_params();
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
            beta1: config.beta1,
            beta2: config.beta2,
            epsilon: config.epsilon,
        }
    }
}

/// One bias-corrected Adam update, in place.
pub fn adam_step<P: ParamSet>(params: &mut P, grads: &P, state: &mut AdamState, lr: f64) {
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    let (b1, b2, eps) = (state.beta1, state.beta2, state.epsilon);
    let mut off = 0;
    for (p, g) in params.tensors_mut().into_iter().zip(grads.tensors()) {
        let m = &mut state.m[off..off + p.len()];
        let v = &mut state.v[off..off + p.len()];
        for k in 0..p.len() {
            m[k] = b1 * m[k] + (1.0 - b1) * g[k];
            v[k] = b2 * v[k] + (1.0 - b2) * g[k] * g[k];
            let m_hat = m[k] / c1;
            let v_hat = v[k] / c2;
            p[k] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        off += p.len();
    }
    debug_assert_eq!(off, state.m.len());
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub initial_lr: f64,
    /// Multiplier applied at every decay boundary; "drop 80 %" is 0.2.
    pub lr_decay_factor: f64,
    pub lr_decay_every: usize,
    /// Global-norm gradient clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub adam: AdamConfig,
    pub shape: NetworkShape,
    pub init: InitScheme,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 270,
            initial_lr: 0.02,
            lr_decay_factor: 0.2,
            lr_decay_every: 100,
            clip_norm: Some(5.0),
            adam: AdamConfig::default(),
            shape: NetworkShape::default(),
            init: InitScheme::default(),
        }
    }
}

/// Piecewise-constant step decay: `initial_lr · factor^⌊epoch / every⌋`.
pub fn lr_at(epoch: usize, config: &TrainConfig) -> f64 {
    let drops = epoch / config.lr_decay_every.max(1);
    // repeated multiplication hits the decimal literals (0.004, 0.0008) exactly
    (0..drops).fold(config.initial_lr, |lr, _| lr * config.lr_decay_factor)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub mean_loss: f64,
}

pub fn loss_history_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,lr,mean_loss\n");
    for r in history {
        let _ = writeln!(out, "{},{},{}", r.epoch, r.lr, r.mean_loss);
    }
    out
}

/// Network parameters together with the statistics that map raw features
/// into its input space.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub params: LstmNetworkParams,
    pub normalizer: Normalizer,
    pub history: Vec<EpochRecord>,
    pub adam: AdamState,
}

fn apply_update<P: ParamSet>(params: &mut P, mut grads: P, adam: &mut AdamState, lr: f64, clip: Option<f64>) {
    if let Some(max) = clip {
        clip_global_norm(&mut grads, max);
    }
    adam_step(params, &grads, adam, lr);
}

/// Epoch loop shared by every trainable model: per epoch, one clipped Adam
/// step for each of `n_batches` batches at the scheduled rate. `loss_grad`
/// returns the pre-update loss and gradient of batch `b`.
pub fn fit_epochs<P: ParamSet>(
    params: &mut P,
    n_batches: usize,
    config: &TrainConfig,
    mut loss_grad: impl FnMut(&P, usize) -> Result<(f64, P), TrainError>,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<(Vec<EpochRecord>, AdamState), TrainError> {
    if n_batches == 0 {
        return Err(TrainError::EmptySequence);
    }
    let mut adam = AdamState::new(params, config.adam);
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let lr = lr_at(epoch, config);
        let mut total = 0.0;
        for b in 0..n_batches {
            let (loss, grads) = loss_grad(params, b).map_err(|e| match e {
                TrainError::NonFiniteGradient { .. } => TrainError::NonFiniteGradient {
                    context: format!("epoch {epoch}, batch {b}"),
                },
                other => other,
            })?;
            total += loss;
            apply_update(params, grads, &mut adam, lr, config.clip_norm);
        }
        let record = EpochRecord {
            epoch,
            lr,
            mean_loss: total / n_batches as f64,
        };
        on_epoch(&record);
        history.push(record);
    }
    Ok((history, adam))
}

/// Full training: per epoch, each sequence (ordered by set id) is one Adam
/// step over its complete unroll, starting from a zero state.
pub fn train(dataset: &[SampleSequence], config: &TrainConfig, seed: u64) -> Result<TrainedModel, TrainError> {
    train_with_progress(dataset, config, seed, |_| {})
}

pub fn train_with_progress(
    dataset: &[SampleSequence],
    config: &TrainConfig,
    seed: u64,
    on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainedModel, TrainError> {
    if dataset.iter().all(|s| s.is_empty()) {
        return Err(TrainError::EmptySequence);
    }
    let normalizer = fit_normalizer(dataset)?;
    let mut ordered: Vec<&SampleSequence> = dataset.iter().filter(|s| !s.is_empty()).collect();
    ordered.sort_by_key(|s| s.origin_set_id);
    let batches: Vec<(Vec<Vec<f64>>, Vec<f64>)> =
        ordered.iter().map(|s| normalized_sequence(s, &normalizer)).collect();
    let (params, history, adam) = train_lstm_normalized(&batches, normalizer.dim(), config, seed, on_epoch)?;
    Ok(TrainedModel {
        params,
        normalizer,
        history,
        adam,
    })
}

/// Trains a fresh LSTM on already-normalized sequences, one Adam step per
/// sequence per epoch, each unrolled from a zero state.
pub fn train_lstm_normalized(
    sequences: &[(Vec<Vec<f64>>, Vec<f64>)],
    input_dim: usize,
    config: &TrainConfig,
    seed: u64,
    on_epoch: impl FnMut(&EpochRecord),
) -> Result<(LstmNetworkParams, Vec<EpochRecord>, AdamState), TrainError> {
    let shape = NetworkShape {
        input: input_dim,
        ..config.shape
    };
    let mut params = init_params(shape, seed, config.init);
    let (history, adam) = fit_epochs(
        &mut params,
        sequences.len(),
        config,
        |p, b| bptt_gradients(p, &sequences[b].0, &sequences[b].1),
        on_epoch,
    )?;
    Ok((params, history, adam))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FineTuneConfig {
    pub lr: f64,
    /// Adam steps for the pre-transmission warm-up.
    pub warmup_steps: usize,
    /// Calibrated slots collected during warm-up.
    pub warmup_samples: usize,
    /// Adam steps after each scan block.
    pub block_steps: usize,
    /// History length (slots) the block update trains on.
    pub window: usize,
    pub clip_norm: Option<f64>,
}

impl Default for FineTuneConfig {
    fn default() -> Self {
        Self {
            lr: 0.002,
            warmup_steps: 40,
            warmup_samples: 60,
            block_steps: 5,
            window: 60,
            clip_norm: Some(5.0),
        }
    }
}

/// A short normalized sequence for online updates. Steps with weight 0 have
/// no trustworthy label and only advance the recurrent state.
#[derive(Debug, Clone, PartialEq)]
pub struct FineTuneBatch {
    pub inputs: Vec<Vec<f64>>,
    pub labels: Vec<f64>,
    pub weights: Vec<f64>,
}

/// Runs `steps` Adam updates on `batch` at the fixed fine-tune rate,
/// starting from `params` and continuing the supplied optimizer state.
pub fn fine_tune_with(
    params: &LstmNetworkParams,
    batch: &FineTuneBatch,
    steps: usize,
    config: &FineTuneConfig,
    adam: &mut AdamState,
) -> Result<LstmNetworkParams, TrainError> {
    let mut tuned = params.clone();
    if steps == 0 || batch.weights.iter().all(|&w| w == 0.0) {
        return Ok(tuned);
    }
    let state0 = LstmState::zeros(params.shape());
    for _ in 0..steps {
        let (_, grads) = bptt_gradients_from(&tuned, &batch.inputs, &batch.labels, Some(&batch.weights), &state0)?;
        apply_update(&mut tuned, grads, adam, config.lr, config.clip_norm);
    }
    Ok(tuned)
}

/// [`fine_tune_with`] using a fresh optimizer state.
pub fn fine_tune(
    params: &LstmNetworkParams,
    batch: &FineTuneBatch,
    steps: usize,
    config: &FineTuneConfig,
) -> Result<LstmNetworkParams, TrainError> {
    let mut adam = AdamState::new(params, AdamConfig::default());
    fine_tune_with(params, batch, steps, config, &mut adam)
}
