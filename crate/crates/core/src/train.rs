//! Training objective and loop.
//!
//! The loss over one step is
//!
//! ```text
//! total = mean_IND CE(y, f(x)) + alpha * mean_OOD KL(U || f(x_ood))
//! ```
//!
//! where `U` is the uniform distribution over the `k` classes. In logit
//! space `KL(U || p) = logsumexp(z) - mean(z) - ln k`, whose gradient with
//! respect to `z` is `p - 1/k`; the cross-entropy gradient is `p - onehot`.

use std::io::Write;
use std::path::Path;

use ndarray::{s, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{self, init_params, log_sum_exp, ClassifierParams, Prediction};
use crate::optim::Adam;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub alpha: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub dropout_rate: f64,
    pub epochs: usize,
    pub seed: u64,
    /// Fraction of each step's examples drawn from the OOD pool.
    pub ood_ratio: f64,
    pub hidden_dims: Vec<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            alpha: 1.0,
            learning_rate: 0.001,
            batch_size: 32,
            dropout_rate: 0.3,
            epochs: 20,
            seed: 0,
            ood_ratio: 0.5,
            hidden_dims: vec![128, 128],
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidInput(m.to_owned()));
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return bad("alpha must be a nonnegative number");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad("dropout_rate must lie in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.ood_ratio) {
            return bad("ood_ratio must lie in [0, 1)");
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        Ok(())
    }

    /// OOD examples drawn per step alongside `batch_size` IND examples.
    pub fn ood_batch_size(&self) -> usize {
        if self.ood_ratio <= 0.0 {
            return 0;
        }
        let n = (self.batch_size as f64 * self.ood_ratio / (1.0 - self.ood_ratio)).round() as usize;
        n.max(1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ce_term: f64,
    pub entropy_term: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(ce_term: f64, entropy_term: f64, alpha: f64) -> Self {
        LossBreakdown {
            ce_term,
            entropy_term,
            total: ce_term + alpha * entropy_term,
        }
    }
}

/// `-ln p[label]`, evaluated from the logits.
pub fn cross_entropy(prediction: &Prediction, class_label: usize) -> Result<f64> {
    let k = prediction.k();
    if class_label >= k {
        return Err(Error::ClassOutOfRange { label: class_label, k });
    }
    Ok(log_sum_exp(&prediction.logits) - prediction.logits[class_label])
}

/// `KL(U || p)`; zero exactly when `p` is uniform.
pub fn entropy_reg(prediction: &Prediction) -> f64 {
    uniform_kl(&prediction.logits)
}

fn uniform_kl(logits: &[f64]) -> f64 {
    let k = logits.len() as f64;
    let mean = logits.iter().sum::<f64>() / k;
    (log_sum_exp(logits) - mean - k.ln()).max(0.0)
}

/// A training step's inputs: labeled IND rows and unlabeled OOD rows.
#[derive(Debug, Clone, Copy)]
pub struct Batch<'a> {
    pub ind: ArrayView2<'a, f64>,
    pub labels: &'a [usize],
    pub ood: ArrayView2<'a, f64>,
}

impl<'a> Batch<'a> {
    fn check(&self, params: &ClassifierParams) -> Result<()> {
        if self.ind.nrows() == 0 {
            return Err(Error::InvalidInput("IND batch is empty".into()));
        }
        if self.labels.len() != self.ind.nrows() {
            return Err(Error::DimensionMismatch {
                expected: self.ind.nrows(),
                actual: self.labels.len(),
            });
        }
        for m in [&self.ind, &self.ood] {
            if m.ncols() != params.input_dim && m.nrows() > 0 {
                return Err(Error::DimensionMismatch {
                    expected: params.input_dim,
                    actual: m.ncols(),
                });
            }
        }
        if let Some(&label) = self.labels.iter().find(|&&l| l >= params.k) {
            return Err(Error::ClassOutOfRange { label, k: params.k });
        }
        Ok(())
    }
}

/// Objective on a batch in inference mode (no dropout).
pub fn batch_loss(params: &ClassifierParams, batch: &Batch<'_>, alpha: f64) -> Result<LossBreakdown> {
    batch.check(params)?;
    let ind_logits = model::forward_batch(params, batch.ind)?;
    let ce = mean_ce(&ind_logits, batch.labels);
    let ent = if batch.ood.nrows() == 0 {
        0.0
    } else {
        mean_uniform_kl(&model::forward_batch(params, batch.ood)?)
    };
    Ok(LossBreakdown::new(ce, ent, alpha))
}

fn mean_ce(logits: &Array2<f64>, labels: &[usize]) -> f64 {
    let total: f64 = logits
        .rows()
        .into_iter()
        .zip(labels)
        .map(|(row, &y)| {
            let row = row.as_slice().expect("standard layout");
            log_sum_exp(row) - row[y]
        })
        .sum();
    total / labels.len() as f64
}

fn mean_uniform_kl(logits: &Array2<f64>) -> f64 {
    let total: f64 = logits
        .rows()
        .into_iter()
        .map(|row| uniform_kl(row.as_slice().expect("standard layout")))
        .sum();
    total / logits.nrows() as f64
}

/// Inverted-dropout multipliers for each hidden layer: entries are `0` or
/// `1/(1-rate)`. Rows cover the IND rows of a batch followed by its OOD rows.
#[derive(Debug, Clone, PartialEq)]
pub struct DropoutMask {
    pub layers: Vec<Array2<f64>>,
}

impl DropoutMask {
    pub fn ones(rows: usize, hidden_dims: &[usize]) -> Self {
        DropoutMask {
            layers: hidden_dims.iter().map(|&h| Array2::ones((rows, h))).collect(),
        }
    }

    pub fn sample<R: Rng>(rng: &mut R, rows: usize, hidden_dims: &[usize], rate: f64) -> Self {
        let keep = 1.0 / (1.0 - rate);
        DropoutMask {
            layers: hidden_dims
                .iter()
                .map(|&h| Array2::from_shape_simple_fn((rows, h), || if rng.random::<f64>() < rate { 0.0 } else { keep }))
                .collect(),
        }
    }

    fn rows(&self, start: usize, end: usize) -> Vec<Array2<f64>> {
        self.layers.iter().map(|m| m.slice(s![start..end, ..]).to_owned()).collect()
    }

    /// Stack two masks row-wise (`self` rows first).
    pub fn concat(&self, other: &DropoutMask) -> DropoutMask {
        DropoutMask {
            layers: self
                .layers
                .iter()
                .zip(&other.layers)
                .map(|(a, b)| ndarray::concatenate(Axis(0), &[a.view(), b.view()]).expect("matching widths"))
                .collect(),
        }
    }
}

struct Cache {
    /// Input to each layer.
    inputs: Vec<Array2<f64>>,
    /// Pre-activation of each hidden layer.
    pre: Vec<Array2<f64>>,
    masks: Vec<Array2<f64>>,
    logits: Array2<f64>,
}

fn forward_cached(params: &ClassifierParams, x: ArrayView2<f64>, masks: Option<Vec<Array2<f64>>>) -> Cache {
    let last = params.layers.len() - 1;
    let mut inputs = Vec::with_capacity(params.layers.len());
    let mut pre = Vec::with_capacity(last);
    let masks = masks.unwrap_or_else(|| DropoutMask::ones(x.nrows(), &params.hidden_dims).layers);
    let mut act = x.to_owned();
    for (i, layer) in params.layers.iter().enumerate() {
        let z = act.dot(&layer.weights.t()) + layer.bias.view().insert_axis(Axis(0));
        inputs.push(act);
        if i == last {
            return Cache {
                inputs,
                pre,
                masks,
                logits: z,
            };
        }
        act = z.mapv(model::relu) * &masks[i];
        pre.push(z);
    }
    unreachable!("a classifier always has an output layer")
}

fn backward(params: &ClassifierParams, cache: &Cache, mut delta: Array2<f64>) -> ClassifierParams {
    let mut grads = params.clone();
    for i in (0..params.layers.len()).rev() {
        let g = &mut grads.layers[i];
        g.weights = delta.t().dot(&cache.inputs[i]);
        g.bias = delta.sum_axis(Axis(0));
        if i > 0 {
            let upstream = delta.dot(&params.layers[i].weights);
            let gate = cache.pre[i - 1].mapv(|z| if z > 0.0 { 1.0 } else { 0.0 });
            delta = upstream * &gate * &cache.masks[i - 1];
        }
    }
    grads
}

fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut probs = logits.clone();
    for mut row in probs.rows_mut() {
        let p = model::softmax(row.as_slice().expect("standard layout"));
        row.iter_mut().zip(p).for_each(|(r, v)| *r = v);
    }
    probs
}

fn add_scaled(acc: &mut ClassifierParams, other: &ClassifierParams, scale: f64) {
    for (a, b) in acc.layers.iter_mut().zip(&other.layers) {
        a.weights.scaled_add(scale, &b.weights);
        a.bias.scaled_add(scale, &b.bias);
    }
}

/// Exact gradient of the objective under a fixed dropout mask.
///
/// IND and OOD rows are propagated separately and combined as
/// `g_ind + alpha * g_ood`, so with `alpha == 0` the OOD rows contribute
/// nothing at all to the result.
pub fn gradients(
    params: &ClassifierParams,
    batch: &Batch<'_>,
    alpha: f64,
    dropout_mask: Option<&DropoutMask>,
) -> Result<(LossBreakdown, ClassifierParams)> {
    batch.check(params)?;
    let ni = batch.ind.nrows();
    let no = batch.ood.nrows();
    if let Some(mask) = dropout_mask {
        if mask.layers.len() != params.hidden_dims.len()
            || mask
                .layers
                .iter()
                .zip(&params.hidden_dims)
                .any(|(m, &h)| m.nrows() != ni + no || m.ncols() != h)
        {
            return Err(Error::InvalidInput("dropout mask shape does not match batch".into()));
        }
    }

    let ind_cache = forward_cached(params, batch.ind, dropout_mask.map(|m| m.rows(0, ni)));
    let ce = mean_ce(&ind_cache.logits, batch.labels);
    let mut delta = softmax_rows(&ind_cache.logits);
    for (mut row, &y) in delta.rows_mut().into_iter().zip(batch.labels) {
        row[y] -= 1.0;
    }
    delta /= ni as f64;
    let mut grads = backward(params, &ind_cache, delta);

    let mut entropy = 0.0;
    if no > 0 {
        let ood_cache = forward_cached(params, batch.ood, dropout_mask.map(|m| m.rows(ni, ni + no)));
        entropy = mean_uniform_kl(&ood_cache.logits);
        if alpha != 0.0 {
            let uniform = 1.0 / params.k as f64;
            let delta = (softmax_rows(&ood_cache.logits) - uniform) / no as f64;
            let ood_grads = backward(params, &ood_cache, delta);
            add_scaled(&mut grads, &ood_grads, alpha);
        }
    }
    Ok((LossBreakdown::new(ce, entropy, alpha), grads))
}

pub fn accuracy(params: &ClassifierParams, x: ArrayView2<f64>, labels: &[usize]) -> Result<f64> {
    if labels.is_empty() {
        return Ok(0.0);
    }
    let logits = model::forward_batch(params, x)?;
    let correct = logits
        .rows()
        .into_iter()
        .zip(labels)
        .filter(|(row, &y)| model::argmax(row.as_slice().expect("standard layout")) == y)
        .count();
    Ok(correct as f64 / labels.len() as f64)
}

/// Matrices for one training run. `ood` may have zero rows.
#[derive(Debug, Clone, Copy)]
pub struct TrainData<'a> {
    pub train_x: ArrayView2<'a, f64>,
    pub train_y: &'a [usize],
    pub val_x: ArrayView2<'a, f64>,
    pub val_y: &'a [usize],
    pub ood: ArrayView2<'a, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub ce: f64,
    pub entropy: f64,
    pub total: f64,
    pub val_acc: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ClassifierParams,
    pub log: Vec<EpochLog>,
    /// 1-based epoch whose parameters were kept.
    pub best_epoch: usize,
}

// Independent random streams so that, e.g., the OOD pool never perturbs
// IND shuffling or IND dropout.
const STREAM_INIT: u64 = 0;
const STREAM_SHUFFLE: u64 = 1;
const STREAM_IND_DROPOUT: u64 = 2;
const STREAM_OOD_SAMPLE: u64 = 3;
const STREAM_OOD_DROPOUT: u64 = 4;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Minimize the objective with Adam; keep the epoch with the best
/// validation accuracy (earliest on ties).
pub fn train(data: &TrainData<'_>, k: usize, config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let n = data.train_x.nrows();
    if n == 0 {
        return Err(Error::InvalidInput("IND train split is empty".into()));
    }
    if data.train_y.len() != n || data.val_y.len() != data.val_x.nrows() {
        return Err(Error::InvalidInput("feature/label row counts differ".into()));
    }
    let dim = data.train_x.ncols();

    let init_seed = stream(config.seed, STREAM_INIT).random::<u64>();
    let mut params = init_params(dim, &config.hidden_dims, k, init_seed)?;
    let mut adam = Adam::new(config.learning_rate);

    let mut shuffle_rng = stream(config.seed, STREAM_SHUFFLE);
    let mut ind_drop_rng = stream(config.seed, STREAM_IND_DROPOUT);
    let mut ood_rng = stream(config.seed, STREAM_OOD_SAMPLE);
    let mut ood_drop_rng = stream(config.seed, STREAM_OOD_DROPOUT);

    let n_ood = data.ood.nrows();
    let ood_bs = if n_ood == 0 { 0 } else { config.ood_batch_size().min(n_ood) };
    let mut ood_order: Vec<usize> = (0..n_ood).collect();
    let mut ood_cursor = n_ood;

    let mut order: Vec<usize> = (0..n).collect();
    let mut log = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, usize, ClassifierParams)> = None;

    for epoch in 1..=config.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut sums = LossBreakdown::default();
        let mut steps = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let ind_x = data.train_x.select(Axis(0), chunk);
            let labels: Vec<usize> = chunk.iter().map(|&i| data.train_y[i]).collect();

            let mut ood_idx = Vec::with_capacity(ood_bs);
            while ood_idx.len() < ood_bs {
                if ood_cursor == n_ood {
                    ood_order.shuffle(&mut ood_rng);
                    ood_cursor = 0;
                }
                ood_idx.push(ood_order[ood_cursor]);
                ood_cursor += 1;
            }
            let ood_x = if ood_idx.is_empty() {
                Array2::zeros((0, dim))
            } else {
                data.ood.select(Axis(0), &ood_idx)
            };

            let ind_mask = DropoutMask::sample(&mut ind_drop_rng, chunk.len(), &config.hidden_dims, config.dropout_rate);
            let ood_mask = DropoutMask::sample(&mut ood_drop_rng, ood_idx.len(), &config.hidden_dims, config.dropout_rate);
            let mask = ind_mask.concat(&ood_mask);

            let batch = Batch {
                ind: ind_x.view(),
                labels: &labels,
                ood: ood_x.view(),
            };
            let (loss, grads) = gradients(&params, &batch, config.alpha, Some(&mask))?;
            if !loss.total.is_finite() {
                return Err(Error::Diverged { epoch });
            }
            sums.ce_term += loss.ce_term;
            sums.entropy_term += loss.entropy_term;
            sums.total += loss.total;
            steps += 1;

            let grad_slices = grads.slices();
            adam.step(&mut params.slices_mut(), &grad_slices);
        }
        if !params.is_finite() {
            return Err(Error::Diverged { epoch });
        }
        let steps = steps as f64;
        let val_acc = accuracy(&params, data.val_x, data.val_y)?;
        log.push(EpochLog {
            epoch,
            ce: sums.ce_term / steps,
            entropy: sums.entropy_term / steps,
            total: sums.total / steps,
            val_acc,
        });
        log::debug!("epoch {epoch}: {:?}", log.last());
        let improved = best.as_ref().is_none_or(|(acc, _, _)| val_acc > *acc);
        if improved {
            best = Some((val_acc, epoch, params.clone()));
        }
    }

    let (params, best_epoch) = match best {
        Some((_, epoch, p)) if !data.val_y.is_empty() => (p, epoch),
        _ => (params, config.epochs),
    };
    Ok(TrainOutcome {
        params,
        log,
        best_epoch,
    })
}

/// Write the epoch log as JSON lines.
pub fn write_log(path: &Path, log: &[EpochLog]) -> Result<()> {
    let mut text = Vec::new();
    for entry in log {
        serde_json::to_writer(&mut text, entry)?;
        text.push(b'\n');
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&text).map_err(|e| Error::io(path, e))
}

/// Column of zeros used to signal "no OOD data".
pub fn empty_rows(dim: usize) -> Array2<f64> {
    Array2::zeros((0, dim))
}
