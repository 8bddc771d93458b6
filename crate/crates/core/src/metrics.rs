//! Detection and calibration metrics. OOD samples are the positive class
//! and scores follow "higher = more likely OOD".

use std::cmp::Ordering;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredSample {
    pub score: f64,
    pub is_ood: bool,
}

impl ScoredSample {
    pub fn new(score: f64, is_ood: bool) -> Self {
        ScoredSample { score, is_ood }
    }
}

fn counts(samples: &[ScoredSample]) -> Result<(usize, usize)> {
    if let Some(s) = samples.iter().find(|s| !s.score.is_finite()) {
        return Err(Error::InvalidInput(format!("non-finite score {}", s.score)));
    }
    let pos = samples.iter().filter(|s| s.is_ood).count();
    Ok((pos, samples.len() - pos))
}

fn require_both_classes(samples: &[ScoredSample]) -> Result<(usize, usize)> {
    let (pos, neg) = counts(samples)?;
    if pos == 0 || neg == 0 {
        return Err(Error::InvalidInput(
            "metric needs at least one OOD and one IND sample".into(),
        ));
    }
    Ok((pos, neg))
}

/// Samples sorted by descending score, grouped into blocks of equal score.
/// Each block is `(positives, negatives)`.
fn tie_blocks(samples: &[ScoredSample]) -> Vec<(usize, usize)> {
    let mut sorted: Vec<&ScoredSample> = samples.iter().collect();
    sorted.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap_or(Ordering::Equal));
    let mut blocks: Vec<(usize, usize)> = Vec::new();
    let mut last: Option<f64> = None;
    for s in sorted {
        if last != Some(s.score) {
            blocks.push((0, 0));
            last = Some(s.score);
        }
        let b = blocks.last_mut().expect("block pushed above");
        if s.is_ood {
            b.0 += 1;
        } else {
            b.1 += 1;
        }
    }
    blocks
}

/// Mann–Whitney estimate of the area under the ROC curve; ties count half.
pub fn auroc(samples: &[ScoredSample]) -> Result<f64> {
    let (pos, neg) = require_both_classes(samples)?;
    // Walking blocks from the top: every positive beats the negatives in
    // lower blocks and ties with the negatives in its own block.
    let mut neg_below = neg as f64;
    let mut wins = 0.0;
    for (p, n) in tie_blocks(samples) {
        neg_below -= n as f64;
        wins += p as f64 * (neg_below + 0.5 * n as f64);
    }
    Ok(wins / (pos as f64 * neg as f64))
}

/// Average precision, with each tie block entered as a whole.
pub fn aupr(samples: &[ScoredSample]) -> Result<f64> {
    let (pos, _) = counts(samples)?;
    if pos == 0 {
        return Err(Error::InvalidInput("AUPR needs at least one OOD sample".into()));
    }
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut ap = 0.0;
    for (p, n) in tie_blocks(samples) {
        tp += p;
        fp += n;
        if p > 0 {
            ap += p as f64 * (tp as f64 / (tp + fp) as f64);
        }
    }
    Ok(ap / pos as f64)
}

/// False-positive rate at the largest threshold `t` whose true-positive
/// rate reaches `target_tpr`, flagging a sample as OOD iff `score >= t`.
pub fn fpr_at_tpr(samples: &[ScoredSample], target_tpr: f64) -> Result<f64> {
    let (pos, neg) = require_both_classes(samples)?;
    if !(0.0..=1.0).contains(&target_tpr) {
        return Err(Error::InvalidInput(format!("target TPR {target_tpr} outside [0, 1]")));
    }
    let (mut tp, mut fp) = (0usize, 0usize);
    for (p, n) in tie_blocks(samples) {
        tp += p;
        fp += n;
        if tp as f64 / pos as f64 >= target_tpr {
            return Ok(fp as f64 / neg as f64);
        }
    }
    unreachable!("the lowest threshold flags every positive")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EceInput {
    /// Probability assigned to the predicted class.
    pub confidence: f64,
    /// Whether the predicted class is the true class.
    pub correct: bool,
}

pub const DEFAULT_ECE_BINS: usize = 15;

/// Bin index for equal-width, right-closed bins `((m-1)/M, m/M]`.
pub fn ece_bin(confidence: f64, bins: usize) -> usize {
    let idx = (confidence * bins as f64).ceil() as isize - 1;
    idx.clamp(0, bins as isize - 1) as usize
}

/// Expected calibration error: `Σ_b (n_b/N)·|acc(b) − conf(b)|`.
pub fn ece(inputs: &[EceInput], bins: usize) -> Result<f64> {
    if inputs.is_empty() {
        return Err(Error::InvalidInput("ECE needs at least one prediction".into()));
    }
    if bins == 0 {
        return Err(Error::InvalidInput("ECE needs at least one bin".into()));
    }
    let mut count = vec![0usize; bins];
    let mut correct = vec![0usize; bins];
    let mut conf = vec![0.0f64; bins];
    for x in inputs {
        if !(x.confidence > 0.0 && x.confidence <= 1.0) {
            return Err(Error::InvalidInput(format!("confidence {} outside (0, 1]", x.confidence)));
        }
        let b = ece_bin(x.confidence, bins);
        count[b] += 1;
        correct[b] += usize::from(x.correct);
        conf[b] += x.confidence;
    }
    let n = inputs.len() as f64;
    let total = (0..bins)
        .filter(|&b| count[b] > 0)
        .map(|b| {
            let nb = count[b] as f64;
            (nb / n) * (correct[b] as f64 / nb - conf[b] / nb).abs()
        })
        .sum();
    Ok(total)
}

/// Metrics block written to `metrics.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub auroc: f64,
    pub aupr: f64,
    pub fpr_at_90: f64,
    pub ece: Option<f64>,
    pub n_ind: usize,
    pub n_ood: usize,
    pub score_definition: String,
    pub bins: usize,
}

pub const SCORE_DEFINITION: &str = "1 - max softmax probability (OOD is the positive class)";

pub fn detection_report(samples: &[ScoredSample], ece_inputs: Option<&[EceInput]>, bins: usize) -> Result<MetricsReport> {
    let (n_ood, n_ind) = counts(samples)?;
    Ok(MetricsReport {
        auroc: auroc(samples)?,
        aupr: aupr(samples)?,
        fpr_at_90: fpr_at_tpr(samples, 0.9)?,
        ece: ece_inputs.map(|x| ece(x, bins)).transpose()?,
        n_ind,
        n_ood,
        score_definition: SCORE_DEFINITION.into(),
        bins,
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct ScoreRow {
    score: f64,
    is_ood: u8,
}

/// Dump scores as CSV with columns `score,is_ood`.
pub fn write_scores(path: &Path, samples: &[ScoredSample]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for s in samples {
        w.serialize(ScoreRow {
            score: s.score,
            is_ood: u8::from(s.is_ood),
        })?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_scores(path: &Path) -> Result<Vec<ScoredSample>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for (i, row) in r.deserialize::<ScoreRow>().enumerate() {
        let row = row.map_err(|e| Error::parse(path, i + 2, e.to_string()))?;
        out.push(ScoredSample::new(row.score, row.is_ood != 0));
    }
    Ok(out)
}
