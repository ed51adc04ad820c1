//! Two-layer LSTM forecaster with a linear scalar readout.
//!
//! Each layer applies the standard gate equations to the concatenation
//! `z = [h_{t-1}, x_t]`:
//!
//! ```text
//! f = σ(W_f z + b_f)      i = σ(W_i z + b_i)      c̃ = tanh(W_c z + b_c)
//! C = f ⊙ C_{t-1} + i ⊙ c̃  o = σ(W_o z + b_o)      h = o ⊙ tanh(C)
//! ```
//!
//! Layer one's hidden output is layer two's input, and the prediction is
//! `readout_w · h2 + readout_b` in normalized label units.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::linalg::{dot, sigmoid, Matrix};

#[derive(Debug, Error, PartialEq)]
pub enum LstmError {
    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
}

fn check(what: &'static str, expected: usize, got: usize) -> Result<(), LstmError> {
    if expected == got {
        Ok(())
    } else {
        Err(LstmError::DimensionMismatch { what, expected, got })
    }
}

/// Layer sizes of the network. Defaults are the 8 → 20 → 10 → 1 forecaster.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NetworkShape {
    pub input: usize,
    pub hidden1: usize,
    pub hidden2: usize,
}

impl Default for NetworkShape {
    fn default() -> Self {
        Self {
            input: crate::dataset::FEATURE_DIM,
            hidden1: 20,
            hidden2: 10,
        }
    }
}

/// Gate weights act on `[h_{t-1}, x_t]`: the first `hidden` columns read the
/// recurrent state, the remaining `input` columns read the input.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmLayerParams {
    pub w_f: Matrix,
    pub w_i: Matrix,
    pub w_c: Matrix,
    pub w_o: Matrix,
    pub b_f: Vec<f64>,
    pub b_i: Vec<f64>,
    pub b_c: Vec<f64>,
    pub b_o: Vec<f64>,
}

impl LstmLayerParams {
    pub fn zeros(input: usize, hidden: usize) -> Self {
        let w = Matrix::zeros(hidden, hidden + input);
        Self {
            w_f: w.clone(),
            w_i: w.clone(),
            w_c: w.clone(),
            w_o: w,
            b_f: vec![0.0; hidden],
            b_i: vec![0.0; hidden],
            b_c: vec![0.0; hidden],
            b_o: vec![0.0; hidden],
        }
    }

    pub fn hidden_size(&self) -> usize {
        self.w_f.rows()
    }

    pub fn input_size(&self) -> usize {
        self.w_f.cols() - self.w_f.rows()
    }

    fn validate(&self) -> Result<(), LstmError> {
        let shape = self.w_f.shape();
        for w in [&self.w_i, &self.w_c, &self.w_o] {
            check("gate weight rows", shape.0, w.rows())?;
            check("gate weight cols", shape.1, w.cols())?;
        }
        for b in [&self.b_f, &self.b_i, &self.b_c, &self.b_o] {
            check("gate bias", shape.0, b.len())?;
        }
        Ok(())
    }

    pub(crate) fn tensors(&self) -> [&[f64]; 8] {
        [
            self.w_f.as_slice(),
            self.w_i.as_slice(),
            self.w_c.as_slice(),
            self.w_o.as_slice(),
            &self.b_f,
            &self.b_i,
            &self.b_c,
            &self.b_o,
        ]
    }

    pub(crate) fn tensors_mut(&mut self) -> [&mut [f64]; 8] {
        [
            self.w_f.as_mut_slice(),
            self.w_i.as_mut_slice(),
            self.w_c.as_mut_slice(),
            self.w_o.as_mut_slice(),
            &mut self.b_f,
            &mut self.b_i,
            &mut self.b_c,
            &mut self.b_o,
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LstmNetworkParams {
    pub layer1: LstmLayerParams,
    pub layer2: LstmLayerParams,
    pub readout_w: Vec<f64>,
    pub readout_b: f64,
}

impl LstmNetworkParams {
    pub fn zeros(shape: NetworkShape) -> Self {
        Self {
            layer1: LstmLayerParams::zeros(shape.input, shape.hidden1),
            layer2: LstmLayerParams::zeros(shape.hidden1, shape.hidden2),
            readout_w: vec![0.0; shape.hidden2],
            readout_b: 0.0,
        }
    }

    pub fn shape(&self) -> NetworkShape {
        NetworkShape {
            input: self.layer1.input_size(),
            hidden1: self.layer1.hidden_size(),
            hidden2: self.layer2.hidden_size(),
        }
    }

    pub fn validate(&self) -> Result<(), LstmError> {
        self.layer1.validate()?;
        self.layer2.validate()?;
        check("layer 2 input", self.layer1.hidden_size(), self.layer2.input_size())?;
        check("readout weights", self.layer2.hidden_size(), self.readout_w.len())
    }

    /// Runs one time step without retaining caches; used for online prediction.
    pub fn step(&self, x: &[f64], state: &mut LstmState) -> f64 {
        let (h1, c1) = cell_step(&self.layer1, x, &state.h1, &state.c1);
        let (h2, c2) = cell_step(&self.layer2, &h1, &state.h2, &state.c2);
        let y = dot(&self.readout_w, &h2) + self.readout_b;
        *state = LstmState { h1, c1, h2, c2 };
        y
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LstmState {
    pub h1: Vec<f64>,
    pub c1: Vec<f64>,
    pub h2: Vec<f64>,
    pub c2: Vec<f64>,
}

impl LstmState {
    pub fn zeros(shape: NetworkShape) -> Self {
        Self {
            h1: vec![0.0; shape.hidden1],
            c1: vec![0.0; shape.hidden1],
            h2: vec![0.0; shape.hidden2],
            c2: vec![0.0; shape.hidden2],
        }
    }
}

/// Everything the backward pass needs from one cell evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct GateCache {
    /// `[h_{t-1}, x_t]`
    pub concat: Vec<f64>,
    pub pre_f: Vec<f64>,
    pub pre_i: Vec<f64>,
    pub pre_c: Vec<f64>,
    pub pre_o: Vec<f64>,
    pub f: Vec<f64>,
    pub i: Vec<f64>,
    pub c_tilde: Vec<f64>,
    pub o: Vec<f64>,
    pub c_prev: Vec<f64>,
    pub tanh_c: Vec<f64>,
}

fn concat(h_prev: &[f64], x: &[f64]) -> Vec<f64> {
    let mut z = Vec::with_capacity(h_prev.len() + x.len());
    z.extend_from_slice(h_prev);
    z.extend_from_slice(x);
    z
}

fn cell_step(layer: &LstmLayerParams, x: &[f64], h_prev: &[f64], c_prev: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let n = layer.hidden_size();
    let z = concat(h_prev, x);
    let mut pf = vec![0.0; n];
    let mut pi = vec![0.0; n];
    let mut pc = vec![0.0; n];
    let mut po = vec![0.0; n];
    layer.w_f.affine_into(&z, &layer.b_f, &mut pf);
    layer.w_i.affine_into(&z, &layer.b_i, &mut pi);
    layer.w_c.affine_into(&z, &layer.b_c, &mut pc);
    layer.w_o.affine_into(&z, &layer.b_o, &mut po);
    let mut h = vec![0.0; n];
    let mut c = vec![0.0; n];
    for k in 0..n {
        c[k] = sigmoid(pf[k]) * c_prev[k] + sigmoid(pi[k]) * pc[k].tanh();
        h[k] = sigmoid(po[k]) * c[k].tanh();
    }
    (h, c)
}

/// One LSTM cell update. Returns `(h_t, C_t, cache)`.
pub fn cell_forward(
    layer: &LstmLayerParams,
    x: &[f64],
    h_prev: &[f64],
    c_prev: &[f64],
) -> Result<(Vec<f64>, Vec<f64>, GateCache), LstmError> {
    layer.validate()?;
    check("cell input", layer.input_size(), x.len())?;
    check("previous hidden state", layer.hidden_size(), h_prev.len())?;
    check("previous cell state", layer.hidden_size(), c_prev.len())?;
    Ok(cell_forward_unchecked(layer, x, h_prev, c_prev))
}

pub(crate) fn cell_forward_unchecked(
    layer: &LstmLayerParams,
    x: &[f64],
    h_prev: &[f64],
    c_prev: &[f64],
) -> (Vec<f64>, Vec<f64>, GateCache) {
    let n = layer.hidden_size();
    let z = concat(h_prev, x);
    let mut pre_f = vec![0.0; n];
    let mut pre_i = vec![0.0; n];
    let mut pre_c = vec![0.0; n];
    let mut pre_o = vec![0.0; n];
    layer.w_f.affine_into(&z, &layer.b_f, &mut pre_f);
    layer.w_i.affine_into(&z, &layer.b_i, &mut pre_i);
    layer.w_c.affine_into(&z, &layer.b_c, &mut pre_c);
    layer.w_o.affine_into(&z, &layer.b_o, &mut pre_o);

    let f: Vec<f64> = pre_f.iter().map(|&a| sigmoid(a)).collect();
    let i: Vec<f64> = pre_i.iter().map(|&a| sigmoid(a)).collect();
    let c_tilde: Vec<f64> = pre_c.iter().map(|a| a.tanh()).collect();
    let o: Vec<f64> = pre_o.iter().map(|&a| sigmoid(a)).collect();
    let c: Vec<f64> = (0..n).map(|k| f[k] * c_prev[k] + i[k] * c_tilde[k]).collect();
    let tanh_c: Vec<f64> = c.iter().map(|v| v.tanh()).collect();
    let h: Vec<f64> = (0..n).map(|k| o[k] * tanh_c[k]).collect();

    let cache = GateCache {
        concat: z,
        pre_f,
        pre_i,
        pre_c,
        pre_o,
        f,
        i,
        c_tilde,
        o,
        c_prev: c_prev.to_vec(),
        tanh_c,
    };
    (h, c, cache)
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepCache {
    pub layer1: GateCache,
    pub layer2: GateCache,
    pub h2: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardPass {
    pub predictions: Vec<f64>,
    pub final_state: LstmState,
    pub caches: Vec<StepCache>,
}

/// Unrolls the network over `inputs`, one scalar prediction per step.
pub fn network_forward<X: AsRef<[f64]>>(
    params: &LstmNetworkParams,
    inputs: &[X],
    state0: &LstmState,
) -> Result<ForwardPass, LstmError> {
    params.validate()?;
    let shape = params.shape();
    check("state h1", shape.hidden1, state0.h1.len())?;
    check("state c1", shape.hidden1, state0.c1.len())?;
    check("state h2", shape.hidden2, state0.h2.len())?;
    check("state c2", shape.hidden2, state0.c2.len())?;
    for x in inputs {
        check("network input", shape.input, x.as_ref().len())?;
    }

    let mut state = state0.clone();
    let mut predictions = Vec::with_capacity(inputs.len());
    let mut caches = Vec::with_capacity(inputs.len());
    for x in inputs {
        let (h1, c1, g1) = cell_forward_unchecked(&params.layer1, x.as_ref(), &state.h1, &state.c1);
        let (h2, c2, g2) = cell_forward_unchecked(&params.layer2, &h1, &state.h2, &state.c2);
        predictions.push(dot(&params.readout_w, &h2) + params.readout_b);
        caches.push(StepCache {
            layer1: g1,
            layer2: g2,
            h2: h2.clone(),
        });
        state = LstmState { h1, c1, h2, c2 };
    }
    Ok(ForwardPass {
        predictions,
        final_state: state,
        caches,
    })
}

/// Predictions only, no caches. Cheaper than [`network_forward`] for
/// evaluation.
pub fn predict_sequence<X: AsRef<[f64]>>(params: &LstmNetworkParams, inputs: &[X], state: &mut LstmState) -> Vec<f64> {
    inputs.iter().map(|x| params.step(x.as_ref(), state)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum InitScheme {
    /// Weights uniform in `±1/√fan_in` with `fan_in = input + hidden`; biases
    /// zero except the forget gate, which starts at `forget_bias`.
    UniformFanIn { forget_bias: f64 },
}

impl Default for InitScheme {
    fn default() -> Self {
        InitScheme::UniformFanIn { forget_bias: 1.0 }
    }
}

fn init_layer(input: usize, hidden: usize, scheme: InitScheme, rng: &mut ChaCha8Rng) -> LstmLayerParams {
    let InitScheme::UniformFanIn { forget_bias } = scheme;
    let bound = 1.0 / ((input + hidden) as f64).sqrt();
    let cols = input + hidden;
    LstmLayerParams {
        w_f: Matrix::uniform(hidden, cols, bound, rng),
        w_i: Matrix::uniform(hidden, cols, bound, rng),
        w_c: Matrix::uniform(hidden, cols, bound, rng),
        w_o: Matrix::uniform(hidden, cols, bound, rng),
        b_f: vec![forget_bias; hidden],
        b_i: vec![0.0; hidden],
        b_c: vec![0.0; hidden],
        b_o: vec![0.0; hidden],
    }
}

pub fn init_params(shape: NetworkShape, seed: u64, scheme: InitScheme) -> LstmNetworkParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layer1 = init_layer(shape.input, shape.hidden1, scheme, &mut rng);
    let layer2 = init_layer(shape.hidden1, shape.hidden2, scheme, &mut rng);
    let bound = 1.0 / (shape.hidden2 as f64).sqrt();
    let readout = Matrix::uniform(1, shape.hidden2, bound, &mut rng);
    LstmNetworkParams {
        layer1,
        layer2,
        readout_w: readout.as_slice().to_vec(),
        readout_b: 0.0,
    }
}
