//! Feed-forward softmax classifier over sentence embeddings and the
//! maximum-softmax-probability (MSP) confidence.
//!
//! Layers are affine maps `z = W·a + b` with `W` stored as an
//! `out × in` matrix. Hidden layers apply a rectifier; the last layer
//! produces the logits.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::distr::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Dense {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Dense {
            weights: Array2::zeros((outputs, inputs)),
            bias: Array1::zeros(outputs),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weights.ncols()
    }

    pub fn outputs(&self) -> usize {
        self.weights.nrows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierParams {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub k: usize,
    pub layers: Vec<Dense>,
}

impl ClassifierParams {
    /// All-zero parameters with the given shape.
    pub fn zeros(input_dim: usize, hidden_dims: &[usize], k: usize) -> Result<Self> {
        validate_shape(input_dim, hidden_dims, k)?;
        let layers = layer_sizes(input_dim, hidden_dims, k)
            .windows(2)
            .map(|w| Dense::zeros(w[0], w[1]))
            .collect();
        Ok(ClassifierParams {
            input_dim,
            hidden_dims: hidden_dims.to_vec(),
            k,
            layers,
        })
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    /// Mutable views over every parameter array, weights then bias per layer.
    pub fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| {
                [
                    l.weights.as_slice_mut().expect("standard layout"),
                    l.bias.as_slice_mut().expect("standard layout"),
                ]
            })
            .collect()
    }

    pub fn slices(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|l| {
                [
                    l.weights.as_slice().expect("standard layout"),
                    l.bias.as_slice().expect("standard layout"),
                ]
            })
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.slices().iter().all(|s| s.iter().all(|v| v.is_finite()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(file);
        serde_json::to_writer(&mut out, &Checkpoint::from(self))?;
        out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        out.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let ckpt: Checkpoint = serde_json::from_reader(BufReader::new(file))?;
        ckpt.into_params()
    }
}

fn validate_shape(input_dim: usize, hidden_dims: &[usize], k: usize) -> Result<()> {
    if k < 2 {
        return Err(Error::InvalidInput(format!("need at least 2 classes, got {k}")));
    }
    if input_dim == 0 || hidden_dims.contains(&0) {
        return Err(Error::InvalidInput("layer dimensions must be positive".into()));
    }
    Ok(())
}

fn layer_sizes(input_dim: usize, hidden_dims: &[usize], k: usize) -> Vec<usize> {
    std::iter::once(input_dim)
        .chain(hidden_dims.iter().copied())
        .chain(std::iter::once(k))
        .collect()
}

/// Weights uniform in `±1/sqrt(fan_in)`, biases zero.
pub fn init_params(input_dim: usize, hidden_dims: &[usize], k: usize, seed: u64) -> Result<ClassifierParams> {
    let mut params = ClassifierParams::zeros(input_dim, hidden_dims, k)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for layer in &mut params.layers {
        let scale = 1.0 / (layer.inputs() as f64).sqrt();
        let dist = Uniform::new_inclusive(-scale, scale).expect("finite positive scale");
        layer.weights.iter_mut().for_each(|w| *w = dist.sample(&mut rng));
    }
    Ok(params)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub probs: Vec<f64>,
    pub logits: Vec<f64>,
}

impl Prediction {
    pub fn from_logits(logits: Vec<f64>) -> Self {
        Prediction {
            probs: softmax(&logits),
            logits,
        }
    }

    pub fn argmax(&self) -> usize {
        argmax(&self.probs)
    }

    pub fn k(&self) -> usize {
        self.logits.len()
    }
}

/// Index of the first maximum.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

pub fn log_sum_exp(logits: &[f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln()
}

/// Softmax with the maximum logit subtracted first.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

pub fn forward(params: &ClassifierParams, embedding: &[f64]) -> Result<Prediction> {
    if embedding.len() != params.input_dim {
        return Err(Error::DimensionMismatch {
            expected: params.input_dim,
            actual: embedding.len(),
        });
    }
    let mut act = Array1::from(embedding.to_vec());
    let last = params.layers.len() - 1;
    for (i, layer) in params.layers.iter().enumerate() {
        act = layer.weights.dot(&act) + &layer.bias;
        if i < last {
            act.mapv_inplace(relu);
        }
    }
    Ok(Prediction::from_logits(act.to_vec()))
}

/// Logits for every row of `inputs` (`n × input_dim`) in inference mode.
pub fn forward_batch(params: &ClassifierParams, inputs: ArrayView2<f64>) -> Result<Array2<f64>> {
    if inputs.ncols() != params.input_dim {
        return Err(Error::DimensionMismatch {
            expected: params.input_dim,
            actual: inputs.ncols(),
        });
    }
    let mut act = inputs.to_owned();
    let last = params.layers.len() - 1;
    for (i, layer) in params.layers.iter().enumerate() {
        act = act.dot(&layer.weights.t()) + layer.bias.view().insert_axis(Axis(0));
        if i < last {
            act.mapv_inplace(relu);
        }
    }
    Ok(act)
}

pub fn predict_batch(params: &ClassifierParams, inputs: ArrayView2<f64>) -> Result<Vec<Prediction>> {
    let logits = forward_batch(params, inputs)?;
    Ok(logits
        .rows()
        .into_iter()
        .map(|row: ArrayView1<f64>| Prediction::from_logits(row.to_vec()))
        .collect())
}

pub(crate) fn relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

/// Maximum softmax probability, in `[1/k, 1]`.
pub fn msp(prediction: &Prediction) -> f64 {
    prediction.probs.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

/// OOD-ness score: higher means more likely out of distribution.
pub fn ood_score(prediction: &Prediction) -> f64 {
    1.0 - msp(prediction)
}

pub const CHECKPOINT_FORMAT: &str = "oodkit-classifier";
pub const CHECKPOINT_VERSION: u32 = 1;

/// On-disk checkpoint. Weights are row-major `outputs × inputs`.
#[derive(Debug, Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    version: u32,
    input_dim: usize,
    hidden_dims: Vec<usize>,
    k: usize,
    activation: String,
    layers: Vec<CheckpointLayer>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointLayer {
    rows: usize,
    cols: usize,
    weights: Vec<f64>,
    bias: Vec<f64>,
}

impl From<&ClassifierParams> for Checkpoint {
    fn from(p: &ClassifierParams) -> Self {
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            input_dim: p.input_dim,
            hidden_dims: p.hidden_dims.clone(),
            k: p.k,
            activation: "relu".into(),
            layers: p
                .layers
                .iter()
                .map(|l| CheckpointLayer {
                    rows: l.outputs(),
                    cols: l.inputs(),
                    weights: l.weights.iter().copied().collect(),
                    bias: l.bias.to_vec(),
                })
                .collect(),
        }
    }
}

impl Checkpoint {
    fn into_params(self) -> Result<ClassifierParams> {
        if self.format != CHECKPOINT_FORMAT || self.version != CHECKPOINT_VERSION {
            return Err(Error::InvalidInput(format!(
                "unsupported checkpoint {} v{}",
                self.format, self.version
            )));
        }
        let mut params = ClassifierParams::zeros(self.input_dim, &self.hidden_dims, self.k)?;
        if params.layers.len() != self.layers.len() {
            return Err(Error::InvalidInput("checkpoint layer count does not match dims".into()));
        }
        for (dst, src) in params.layers.iter_mut().zip(self.layers) {
            if src.rows != dst.outputs() || src.cols != dst.inputs() || src.bias.len() != src.rows {
                return Err(Error::InvalidInput("checkpoint layer shape mismatch".into()));
            }
            dst.weights = Array2::from_shape_vec((src.rows, src.cols), src.weights)
                .map_err(|e| Error::InvalidInput(e.to_string()))?;
            dst.bias = Array1::from(src.bias);
        }
        if !params.is_finite() {
            return Err(Error::InvalidInput("checkpoint contains non-finite values".into()));
        }
        Ok(params)
    }
}
