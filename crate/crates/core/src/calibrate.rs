//! Post-hoc Dirichlet calibration: `q = softmax(W · ln p + b)`, fitted by
//! minimizing validation negative log-likelihood plus an off-diagonal
//! penalty on `W` (ODIR).

use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{log_sum_exp, softmax};
use crate::optim::Adam;

pub const PROB_FLOOR: f64 = 1e-12;
pub const LAMBDA_GRID: [f64; 4] = [0.0, 1e-3, 1e-2, 1e-1];

#[derive(Debug, Clone, PartialEq)]
pub struct DirichletMap {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

impl DirichletMap {
    pub fn identity(k: usize) -> Self {
        DirichletMap {
            weights: Array2::eye(k),
            bias: Array1::zeros(k),
        }
    }

    pub fn k(&self) -> usize {
        self.bias.len()
    }
}

fn log_probs(probs: &[f64]) -> Vec<f64> {
    probs.iter().map(|p| p.max(PROB_FLOOR).ln()).collect()
}

pub fn apply(map: &DirichletMap, probs: &[f64]) -> Result<Vec<f64>> {
    if probs.len() != map.k() {
        return Err(Error::DimensionMismatch {
            expected: map.k(),
            actual: probs.len(),
        });
    }
    let x = Array1::from(log_probs(probs));
    let z = map.weights.dot(&x) + &map.bias;
    Ok(softmax(z.as_slice().expect("contiguous")))
}

/// Mean squared off-diagonal weight: `Σ_{i≠j} w_ij² / (k(k−1))`.
pub fn odir(weights: &Array2<f64>) -> Result<f64> {
    let k = weights.nrows();
    if k < 2 || weights.ncols() != k {
        return Err(Error::InvalidInput(format!(
            "ODIR needs a square matrix with k >= 2, got {}x{}",
            weights.nrows(),
            weights.ncols()
        )));
    }
    let sum: f64 = weights
        .indexed_iter()
        .filter(|((i, j), _)| i != j)
        .map(|(_, w)| w * w)
        .sum();
    Ok(sum / (k * (k - 1)) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrationConfig {
    pub lambda: f64,
    pub auto_lambda: bool,
    pub learning_rate: f64,
    pub iterations: usize,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        CalibrationConfig {
            lambda: 0.01,
            auto_lambda: false,
            learning_rate: 0.01,
            iterations: 500,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationFit {
    pub map: DirichletMap,
    pub lambda: f64,
    /// Validation NLL of the returned map (without the penalty).
    pub val_nll: f64,
    /// Validation NLL of the identity map, for comparison.
    pub identity_nll: f64,
}

fn design(probs: &[Vec<f64>], labels: &[usize]) -> Result<(Array2<f64>, usize)> {
    let k = probs
        .first()
        .map(Vec::len)
        .ok_or_else(|| Error::InvalidInput("calibration set is empty".into()))?;
    if k < 2 {
        return Err(Error::InvalidInput("calibration needs k >= 2".into()));
    }
    if labels.len() != probs.len() {
        return Err(Error::DimensionMismatch {
            expected: probs.len(),
            actual: labels.len(),
        });
    }
    let mut x = Array2::zeros((probs.len(), k));
    for (mut row, (p, &y)) in x.rows_mut().into_iter().zip(probs.iter().zip(labels)) {
        if p.len() != k {
            return Err(Error::DimensionMismatch {
                expected: k,
                actual: p.len(),
            });
        }
        if y >= k {
            return Err(Error::ClassOutOfRange { label: y, k });
        }
        row.iter_mut().zip(log_probs(p)).for_each(|(r, v)| *r = v);
    }
    Ok((x, k))
}

fn logits(map: &DirichletMap, x: &Array2<f64>) -> Array2<f64> {
    x.dot(&map.weights.t()) + map.bias.view().insert_axis(Axis(0))
}

fn mean_nll(z: &Array2<f64>, labels: &[usize]) -> f64 {
    let total: f64 = z
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

/// Mean negative log-likelihood of the calibrated probabilities.
pub fn nll(map: &DirichletMap, probs: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    let (x, k) = design(probs, labels)?;
    if k != map.k() {
        return Err(Error::DimensionMismatch {
            expected: map.k(),
            actual: k,
        });
    }
    Ok(mean_nll(&logits(map, &x), labels))
}

/// Full-batch Adam from the identity map. Returns the iterate with the
/// lowest validation NLL, which is never worse than the identity.
pub fn fit(probs: &[Vec<f64>], labels: &[usize], lambda: f64, config: &CalibrationConfig) -> Result<CalibrationFit> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::InvalidInput(format!("lambda must be nonnegative, got {lambda}")));
    }
    let (x, k) = design(probs, labels)?;
    let n = labels.len() as f64;
    let penalty_scale = 2.0 * lambda / (k * (k - 1)) as f64;

    let mut map = DirichletMap::identity(k);
    let mut adam = Adam::new(config.learning_rate);
    let mut best: Option<(f64, DirichletMap)> = None;
    let mut identity_nll = f64::NAN;

    for iteration in 0..=config.iterations {
        let z = logits(&map, &x);
        let loss = mean_nll(&z, labels);
        let objective = loss + lambda * odir(&map.weights)?;
        if !objective.is_finite() {
            return Err(Error::CalibrationDiverged { iteration });
        }
        if iteration == 0 {
            identity_nll = loss;
        }
        if best.as_ref().is_none_or(|(b, _)| loss < *b) {
            best = Some((loss, map.clone()));
        }
        if iteration == config.iterations {
            break;
        }

        let mut delta = z;
        for (mut row, &y) in delta.rows_mut().into_iter().zip(labels) {
            let q = softmax(row.as_slice().expect("standard layout"));
            row.iter_mut().zip(q).for_each(|(r, v)| *r = v);
            row[y] -= 1.0;
        }
        delta /= n;
        let mut grad_w = delta.t().dot(&x);
        for ((i, j), g) in grad_w.indexed_iter_mut() {
            if i != j {
                *g += penalty_scale * map.weights[[i, j]];
            }
        }
        let grad_b = delta.sum_axis(Axis(0));
        adam.step(
            &mut [
                map.weights.as_slice_mut().expect("standard layout"),
                map.bias.as_slice_mut().expect("standard layout"),
            ],
            &[
                grad_w.as_slice().expect("standard layout"),
                grad_b.as_slice().expect("standard layout"),
            ],
        );
    }

    let (val_nll, map) = best.expect("at least one iterate evaluated");
    Ok(CalibrationFit {
        map,
        lambda,
        val_nll,
        identity_nll,
    })
}

/// Pick lambda from [`LAMBDA_GRID`] by held-out NLL, then refit on all data.
///
/// The validation set is split by parity of the row index: even rows fit,
/// odd rows score.
pub fn fit_auto(probs: &[Vec<f64>], labels: &[usize], config: &CalibrationConfig) -> Result<CalibrationFit> {
    if probs.len() < 4 {
        return Err(Error::InvalidInput("auto-lambda needs at least 4 validation rows".into()));
    }
    let pick = |parity: usize| -> (Vec<Vec<f64>>, Vec<usize>) {
        probs
            .iter()
            .zip(labels)
            .enumerate()
            .filter(|(i, _)| i % 2 == parity)
            .map(|(_, (p, &y))| (p.clone(), y))
            .unzip()
    };
    let (fit_p, fit_y) = pick(0);
    let (hold_p, hold_y) = pick(1);
    let mut best: Option<(f64, f64)> = None;
    for &lambda in &LAMBDA_GRID {
        let trial = fit(&fit_p, &fit_y, lambda, config)?;
        let score = nll(&trial.map, &hold_p, &hold_y)?;
        log::debug!("auto-lambda {lambda}: held-out nll {score}");
        if best.is_none_or(|(_, s)| score < s) {
            best = Some((lambda, score));
        }
    }
    let (lambda, _) = best.expect("grid is non-empty");
    fit(probs, labels, lambda, config)
}

pub fn fit_with(probs: &[Vec<f64>], labels: &[usize], config: &CalibrationConfig) -> Result<CalibrationFit> {
    if config.auto_lambda {
        fit_auto(probs, labels, config)
    } else {
        fit(probs, labels, config.lambda, config)
    }
}

/// Contents of `calibration.json`; `W` is row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationFile {
    pub k: usize,
    #[serde(rename = "W")]
    pub w: Vec<f64>,
    pub b: Vec<f64>,
    pub lambda: f64,
    pub val_nll: f64,
}

impl From<&CalibrationFit> for CalibrationFile {
    fn from(fit: &CalibrationFit) -> Self {
        CalibrationFile {
            k: fit.map.k(),
            w: fit.map.weights.iter().copied().collect(),
            b: fit.map.bias.to_vec(),
            lambda: fit.lambda,
            val_nll: fit.val_nll,
        }
    }
}

impl CalibrationFile {
    pub fn to_map(&self) -> Result<DirichletMap> {
        if self.b.len() != self.k {
            return Err(Error::DimensionMismatch {
                expected: self.k,
                actual: self.b.len(),
            });
        }
        let weights = Array2::from_shape_vec((self.k, self.k), self.w.clone())
            .map_err(|e| Error::InvalidInput(format!("calibration W: {e}")))?;
        Ok(DirichletMap {
            weights,
            bias: Array1::from(self.b.clone()),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}
