//! Boundary-shell filter for generated outlier candidates.
//!
//! The IND cluster is summarized by its centroid `C` and the 95th
//! percentile `d` of IND distances to `C`. A candidate is kept iff its
//! Euclidean distance to `C` lies strictly inside `(d, d + T)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_SHELL_WIDTH: f64 = 10.0;
pub const BOUNDARY_PERCENTILE: f64 = 0.95;

/// How the shell width `T` is obtained.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum ShellWidth {
    /// `T` in embedding units.
    Absolute { width: f64 },
    /// `T = rho * d`.
    Relative { rho: f64 },
}

impl Default for ShellWidth {
    fn default() -> Self {
        ShellWidth::Absolute {
            width: DEFAULT_SHELL_WIDTH,
        }
    }
}

impl ShellWidth {
    pub fn resolve(self, radius: f64) -> Result<f64> {
        let width = match self {
            ShellWidth::Absolute { width } => width,
            ShellWidth::Relative { rho } => rho * radius,
        };
        if !(width > 0.0 && width.is_finite()) {
            return Err(Error::InvalidInput(format!("shell width must be positive, got {width}")));
        }
        Ok(width)
    }

    pub fn mode_name(self) -> &'static str {
        match self {
            ShellWidth::Absolute { .. } => "absolute",
            ShellWidth::Relative { .. } => "relative",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterSummary {
    pub center: Vec<f64>,
    pub boundary_radius: f64,
    pub shell_width: f64,
}

pub fn cluster_center(embeddings: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = embeddings
        .first()
        .ok_or_else(|| Error::InvalidInput("cluster center of an empty set".into()))?;
    let dim = first.len();
    let mut center = vec![0.0; dim];
    for e in embeddings {
        if e.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                actual: e.len(),
            });
        }
        center.iter_mut().zip(e).for_each(|(c, x)| *c += x);
    }
    let n = embeddings.len() as f64;
    center.iter_mut().for_each(|c| *c /= n);
    Ok(center)
}

/// Linear interpolation between closest ranks at `h = q·(n−1)`.
pub fn percentile(values: &[f64], q: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::InvalidInput("percentile of an empty list".into()));
    }
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::InvalidInput(format!("percentile q={q} outside [0, 1]")));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let h = q * (v.len() - 1) as f64;
    let lo = h.floor() as usize;
    if lo + 1 >= v.len() {
        return Ok(v[v.len() - 1]);
    }
    Ok(v[lo] + (h - lo as f64) * (v[lo + 1] - v[lo]))
}

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Centroid and 95th-percentile radius of the IND embeddings.
pub fn summarize(ind_embeddings: &[Vec<f64>], width: ShellWidth) -> Result<ClusterSummary> {
    let center = cluster_center(ind_embeddings)?;
    let distances: Vec<f64> = ind_embeddings.iter().map(|e| euclidean(e, &center)).collect();
    let boundary_radius = percentile(&distances, BOUNDARY_PERCENTILE)?;
    let shell_width = width.resolve(boundary_radius)?;
    Ok(ClusterSummary {
        center,
        boundary_radius,
        shell_width,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterOutcome {
    /// Indices into the candidate list, in input order.
    pub kept: Vec<usize>,
    pub distances: Vec<f64>,
    pub summary: ClusterSummary,
}

pub fn filter_candidates(
    candidate_embeddings: &[Vec<f64>],
    ind_embeddings: &[Vec<f64>],
    width: ShellWidth,
) -> Result<FilterOutcome> {
    if candidate_embeddings.is_empty() {
        return Err(Error::InvalidInput("no candidates to filter".into()));
    }
    let summary = summarize(ind_embeddings, width)?;
    let dim = summary.center.len();
    let mut kept = Vec::new();
    let mut distances = Vec::with_capacity(candidate_embeddings.len());
    let (lo, hi) = (summary.boundary_radius, summary.boundary_radius + summary.shell_width);
    for (i, e) in candidate_embeddings.iter().enumerate() {
        if e.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                actual: e.len(),
            });
        }
        let dist = euclidean(e, &summary.center);
        if lo < dist && dist < hi {
            kept.push(i);
        }
        distances.push(dist);
    }
    Ok(FilterOutcome {
        kept,
        distances,
        summary,
    })
}

/// Contents of `filter.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterReport {
    pub n_ind: usize,
    pub n_candidates: usize,
    pub center_norm: f64,
    pub d: f64,
    #[serde(rename = "T")]
    pub t: f64,
    pub mode: String,
    pub bypassed: bool,
    pub kept_indices: Vec<usize>,
}

impl FilterReport {
    pub fn new(outcome: &FilterOutcome, n_ind: usize, width: ShellWidth) -> Self {
        FilterReport {
            n_ind,
            n_candidates: outcome.distances.len(),
            center_norm: outcome.summary.center.iter().map(|c| c * c).sum::<f64>().sqrt(),
            d: outcome.summary.boundary_radius,
            t: outcome.summary.shell_width,
            mode: width.mode_name().into(),
            bypassed: false,
            kept_indices: outcome.kept.clone(),
        }
    }
}
