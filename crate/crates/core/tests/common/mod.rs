//! Independent oracles and the acceptance checks built on them.
//!
//! Everything here recomputes results the slow, obvious way (pairwise
//! loops, explicit threshold sweeps, nested-loop forward passes) so that it
//! shares no code with the library under test.
#![allow(dead_code)]

use std::collections::BTreeSet;
use std::path::Path;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use oodkit::calibrate::{self, CalibrationConfig, DirichletMap};
use oodkit::filter::{self, ShellWidth};
use oodkit::generate::{self, GenerationConfig};
use oodkit::metrics::{self, EceInput, ScoredSample};
use oodkit::model::{self, ClassifierParams};
use oodkit::pipeline::{self, ExperimentReport, Method, RunConfig};
use oodkit::synth::{self, SynthConfig};
use oodkit::train::{self, Batch, DropoutMask};

/// `Ok(detail)` on pass, `Err(detail)` on failure.
pub type Outcome = Result<String, String>;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn ensure(cond: bool, detail: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(detail())
    }
}

// ---------------------------------------------------------------- metrics

/// Random score set with both classes; `tied` draws scores from 8 levels.
pub fn random_scores(rng: &mut ChaCha8Rng, n: usize, tied: bool) -> Vec<ScoredSample> {
    (0..n)
        .map(|i| {
            let score = if tied {
                rng.random_range(0..8) as f64 / 7.0
            } else {
                rng.random::<f64>()
            };
            let is_ood = match i {
                0 => true,
                1 => false,
                _ => rng.random::<bool>(),
            };
            ScoredSample::new(score, is_ood)
        })
        .collect()
}

pub fn auroc_pairwise(s: &[ScoredSample]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for p in s.iter().filter(|x| x.is_ood) {
        for n in s.iter().filter(|x| !x.is_ood) {
            pairs += 1.0;
            if p.score > n.score {
                wins += 1.0;
            } else if p.score == n.score {
                wins += 0.5;
            }
        }
    }
    wins / pairs
}

fn thresholds_desc(s: &[ScoredSample]) -> Vec<f64> {
    let mut t: Vec<f64> = s.iter().map(|x| x.score).collect();
    t.sort_by(|a, b| b.total_cmp(a));
    t.dedup();
    t
}

/// `(tp, fp)` when flagging `score >= t`.
fn flagged(s: &[ScoredSample], t: f64) -> (usize, usize) {
    let tp = s.iter().filter(|x| x.is_ood && x.score >= t).count();
    let fp = s.iter().filter(|x| !x.is_ood && x.score >= t).count();
    (tp, fp)
}

fn class_counts(s: &[ScoredSample]) -> (f64, f64) {
    let p = s.iter().filter(|x| x.is_ood).count() as f64;
    (p, s.len() as f64 - p)
}

pub fn auroc_trapezoid(s: &[ScoredSample]) -> f64 {
    let (p, n) = class_counts(s);
    let (mut prev_tpr, mut prev_fpr, mut area) = (0.0, 0.0, 0.0);
    for t in thresholds_desc(s) {
        let (tp, fp) = flagged(s, t);
        let (tpr, fpr) = (tp as f64 / p, fp as f64 / n);
        area += (fpr - prev_fpr) * (tpr + prev_tpr) / 2.0;
        prev_tpr = tpr;
        prev_fpr = fpr;
    }
    area
}

pub fn aupr_sweep(s: &[ScoredSample]) -> f64 {
    let (p, _) = class_counts(s);
    let (mut prev_recall, mut ap) = (0.0, 0.0);
    for t in thresholds_desc(s) {
        let (tp, fp) = flagged(s, t);
        let recall = tp as f64 / p;
        let precision = tp as f64 / (tp + fp) as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    ap
}

pub fn fpr_scan(s: &[ScoredSample], target: f64) -> f64 {
    let (p, n) = class_counts(s);
    let best = thresholds_desc(s)
        .into_iter()
        .find(|&t| flagged(s, t).0 as f64 / p >= target)
        .expect("lowest threshold flags everything");
    flagged(s, best).1 as f64 / n
}

pub fn criterion_metric_oracles() -> Outcome {
    let start = Instant::now();
    let mut r = rng(20_240_601);
    let mut worst = 0.0f64;
    for case in 0..200 {
        let n = r.random_range(5..=50);
        let s = random_scores(&mut r, n, case % 4 != 3);
        let a = metrics::auroc(&s).map_err(|e| e.to_string())?;
        let (pw, tz) = (auroc_pairwise(&s), auroc_trapezoid(&s));
        let ap = metrics::aupr(&s).map_err(|e| e.to_string())?;
        let ap_oracle = aupr_sweep(&s);
        worst = worst.max((a - pw).abs()).max((a - tz).abs()).max((ap - ap_oracle).abs());
        ensure((a - pw).abs() <= 1e-9 && (a - tz).abs() <= 1e-9, || {
            format!("case {case}: auroc {a} vs pairwise {pw} / trapezoid {tz}")
        })?;
        ensure((ap - ap_oracle).abs() <= 1e-9, || format!("case {case}: aupr {ap} vs sweep {ap_oracle}"))?;
        for target in [0.9, 0.5, 0.95, 1.0] {
            let f = metrics::fpr_at_tpr(&s, target).map_err(|e| e.to_string())?;
            let o = fpr_scan(&s, target);
            ensure(f == o, || format!("case {case}: fpr@{target} {f} vs scan {o}"))?;
        }
    }
    let elapsed = start.elapsed();
    ensure(elapsed < Duration::from_secs(10), || format!("took {elapsed:?}"))?;
    Ok(format!("200 score sets, max deviation {worst:.1e}, {elapsed:.2?}"))
}

// ------------------------------------------------------- worked examples

pub fn criterion_worked_examples() -> Outcome {
    let s = |ood: &[f64], ind: &[f64]| -> Vec<ScoredSample> {
        ood.iter()
            .map(|&x| ScoredSample::new(x, true))
            .chain(ind.iter().map(|&x| ScoredSample::new(x, false)))
            .collect()
    };
    let e = |r: oodkit::Result<f64>| r.map_err(|e| e.to_string());
    let auroc = e(metrics::auroc(&s(&[0.9, 0.4], &[0.6, 0.2])))?;
    ensure(auroc == 0.75, || format!("AUROC {auroc}"))?;
    let ap = e(metrics::aupr(&s(&[0.9, 0.4], &[0.6, 0.2])))?;
    ensure((ap - 5.0 / 6.0).abs() < 1e-15, || format!("AP {ap}"))?;
    let fpr = e(metrics::fpr_at_tpr(&s(&[0.9, 0.8, 0.3], &[0.7, 0.2, 0.1]), 0.9))?;
    ensure(fpr == 1.0 / 3.0, || format!("FPR@90 {fpr}"))?;
    let two = [EceInput { confidence: 0.6, correct: true }; 2];
    let ece = e(metrics::ece(&two, 10))?;
    ensure((ece - 0.4).abs() < 1e-15, || format!("ECE {ece}"))?;
    let d = e(filter::percentile(&[2.0, 8.0, 2.0, 2.0, 2.0], 0.95))?;
    ensure((d - 6.8).abs() < 1e-12, || format!("percentile {d}"))?;
    let steered = generate::steer(&[0.5, 0.5], &[false, true], 3.0);
    ensure(steered == [0.25, 0.75], || format!("steer {steered:?}"))?;
    let w = ndarray::arr2(&[[1.0, 2.0], [-1.0, 1.0]]);
    let odir = e(calibrate::odir(&w))?;
    ensure(odir == 2.5, || format!("ODIR {odir}"))?;
    Ok(format!(
        "AUROC {auroc}, AP {ap:.4}, FPR@90 {fpr:.4}, ECE {ece}, percentile {d}, steer {steered:?}, ODIR {odir}"
    ))
}

// -------------------------------------------------------------- gradients

/// Nested-loop forward pass; `masks[l][row]` scales hidden layer `l`.
pub fn naive_logits(params: &ClassifierParams, x: &[f64], masks: Option<Vec<&[f64]>>) -> Vec<f64> {
    let mut h = x.to_vec();
    let last = params.layers.len() - 1;
    for (l, layer) in params.layers.iter().enumerate() {
        let mut out = vec![0.0; layer.weights.nrows()];
        for (i, o) in out.iter_mut().enumerate() {
            let mut acc = layer.bias[i];
            for (j, hj) in h.iter().enumerate() {
                acc += layer.weights[[i, j]] * hj;
            }
            *o = acc;
        }
        if l < last {
            for (i, o) in out.iter_mut().enumerate() {
                *o = o.max(0.0);
                if let Some(m) = &masks {
                    *o *= m[l][i];
                }
            }
        }
        h = out;
    }
    h
}

fn naive_log_softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = z.iter().map(|v| (v - m).exp()).sum();
    z.iter().map(|v| v - m - s.ln()).collect()
}

/// Mean cross-entropy on IND rows plus `alpha` times the mean
/// `KL(uniform || p)` on OOD rows.
pub fn naive_objective(
    params: &ClassifierParams,
    ind: &[Vec<f64>],
    labels: &[usize],
    ood: &[Vec<f64>],
    alpha: f64,
    mask: Option<&DropoutMask>,
) -> f64 {
    let row_masks = |r: usize| -> Option<Vec<&[f64]>> {
        mask.map(|m| m.layers.iter().map(|a| a.row(r).to_slice().expect("contiguous")).collect())
    };
    let mut ce = 0.0;
    for (r, (x, &y)) in ind.iter().zip(labels).enumerate() {
        ce -= naive_log_softmax(&naive_logits(params, x, row_masks(r)))[y];
    }
    ce /= ind.len() as f64;
    let mut kl = 0.0;
    for (r, x) in ood.iter().enumerate() {
        let lp = naive_log_softmax(&naive_logits(params, x, row_masks(ind.len() + r)));
        let k = lp.len() as f64;
        kl += lp.iter().map(|l| (1.0 / k) * ((1.0 / k).ln() - l)).sum::<f64>();
    }
    if !ood.is_empty() {
        kl /= ood.len() as f64;
    }
    ce + alpha * kl
}

fn to_array(rows: &[Vec<f64>], dim: usize) -> ndarray::Array2<f64> {
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    ndarray::Array2::from_shape_vec((rows.len(), dim), flat).expect("rectangular")
}

/// Central-difference check on one random network; returns the max
/// relative error.
pub fn gradient_check_once(seed: u64) -> Result<f64, String> {
    let mut r = rng(seed);
    let input_dim = r.random_range(2..=6);
    let depth = r.random_range(0..=2);
    let hidden: Vec<usize> = (0..depth).map(|_| r.random_range(2..=6)).collect();
    let k = r.random_range(2..=5);
    let mut params = model::init_params(input_dim, &hidden, k, seed).map_err(|e| e.to_string())?;
    for s in params.slices_mut() {
        s.iter_mut().for_each(|v| *v += r.random_range(-0.3..0.3));
    }
    let ni = r.random_range(1..=5);
    let no = if seed.is_multiple_of(5) { 0 } else { r.random_range(1..=4) };
    let mut draw = |n: usize| -> Vec<Vec<f64>> {
        (0..n).map(|_| (0..input_dim).map(|_| r.random_range(-2.0..2.0)).collect()).collect()
    };
    let ind = draw(ni);
    let ood = draw(no);
    let labels: Vec<usize> = (0..ni).map(|_| r.random_range(0..k)).collect();
    let alpha = r.random_range(0.1..2.0);
    let mask = (seed % 2 == 1).then(|| DropoutMask::sample(&mut r, ni + no, &hidden, 0.3));

    let ind_a = to_array(&ind, input_dim);
    let ood_a = to_array(&ood, input_dim);
    let batch = Batch {
        ind: ind_a.view(),
        labels: &labels,
        ood: ood_a.view(),
    };
    let (_, grads) = train::gradients(&params, &batch, alpha, mask.as_ref()).map_err(|e| e.to_string())?;
    let analytic: Vec<f64> = grads.slices().into_iter().flatten().copied().collect();

    let h = 1e-5;
    let mut numeric = Vec::with_capacity(analytic.len());
    let n_slices = params.slices().len();
    for si in 0..n_slices {
        for j in 0..params.slices()[si].len() {
            let mut plus = params.clone();
            plus.slices_mut()[si][j] += h;
            let mut minus = params.clone();
            minus.slices_mut()[si][j] -= h;
            let f = |p: &ClassifierParams| naive_objective(p, &ind, &labels, &ood, alpha, mask.as_ref());
            numeric.push((f(&plus) - f(&minus)) / (2.0 * h));
        }
    }
    let worst = analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-6))
        .fold(0.0, f64::max);
    Ok(worst)
}

pub fn criterion_gradients() -> Outcome {
    let start = Instant::now();
    let mut worst = 0.0f64;
    let nets = 30;
    for seed in 0..nets {
        let e = gradient_check_once(1000 + seed)?;
        ensure(e < 1e-4, || format!("network {seed}: relative error {e:.2e}"))?;
        worst = worst.max(e);
    }
    let elapsed = start.elapsed();
    ensure(elapsed < Duration::from_secs(30), || format!("took {elapsed:?}"))?;
    Ok(format!("{nets} networks, max relative error {worst:.2e}, {elapsed:.2?}"))
}

// ----------------------------------------------------------------- filter

pub fn gaussian_cloud(r: &mut ChaCha8Rng, n: usize, dim: usize, center: &[f64], spread: f64) -> Vec<Vec<f64>> {
    use rand_distr::{Distribution, Normal};
    let normal = Normal::new(0.0, spread).expect("positive spread");
    (0..n)
        .map(|_| (0..dim).map(|j| center[j] + normal.sample(r)).collect())
        .collect()
}

pub struct ShellOracle {
    pub center: Vec<f64>,
    pub radius: f64,
    pub distances: Vec<f64>,
}

pub fn shell_oracle(ind: &[Vec<f64>], cands: &[Vec<f64>]) -> ShellOracle {
    let dim = ind[0].len();
    let center: Vec<f64> = (0..dim)
        .map(|j| ind.iter().map(|p| p[j]).sum::<f64>() / ind.len() as f64)
        .collect();
    let dist = |p: &Vec<f64>| -> f64 {
        let mut acc = 0.0;
        for j in 0..dim {
            acc += (p[j] - center[j]).powi(2);
        }
        acc.sqrt()
    };
    let mut ind_d: Vec<f64> = ind.iter().map(dist).collect();
    ind_d.sort_by(f64::total_cmp);
    let rank = 0.95 * (ind_d.len() - 1) as f64;
    let (lo, hi) = (rank.floor() as usize, rank.ceil() as usize);
    let frac = rank - lo as f64;
    let radius = ind_d[lo] * (1.0 - frac) + ind_d[hi] * frac;
    ShellOracle {
        distances: cands.iter().map(dist).collect(),
        center,
        radius,
    }
}

/// Kept-set comparison that tolerates candidates within `tol` of a shell
/// boundary, where rounding may legitimately decide either way.
pub fn same_kept(a: &[usize], b: &[usize], distances: &[f64], lo: f64, hi: f64, tol: f64) -> bool {
    let a: BTreeSet<usize> = a.iter().copied().collect();
    let b: BTreeSet<usize> = b.iter().copied().collect();
    a.symmetric_difference(&b)
        .all(|&i| (distances[i] - lo).abs() <= tol || (distances[i] - hi).abs() <= tol)
}

pub fn filter_case(seed: u64) -> Result<(), String> {
    let mut r = rng(seed);
    let dim = r.random_range(2..=16);
    let n_ind = r.random_range(20..=120);
    let origin: Vec<f64> = (0..dim).map(|_| r.random_range(-5.0..5.0)).collect();
    let ind = gaussian_cloud(&mut r, n_ind, dim, &origin, 1.0);
    let cands = gaussian_cloud(&mut r, 80, dim, &origin, 2.0);
    let oracle = shell_oracle(&ind, &cands);
    let widths: Vec<f64> = {
        let mut w: Vec<f64> = (0..4).map(|_| r.random_range(0.05..6.0)).collect();
        w.sort_by(f64::total_cmp);
        w
    };
    let mut previous: Option<BTreeSet<usize>> = None;
    for &t in &widths {
        let out = filter::filter_candidates(&cands, &ind, ShellWidth::Absolute { width: t }).map_err(|e| e.to_string())?;
        ensure((out.summary.boundary_radius - oracle.radius).abs() <= 1e-9, || {
            format!("seed {seed}: radius {} vs oracle {}", out.summary.boundary_radius, oracle.radius)
        })?;
        let expected: Vec<usize> = (0..cands.len())
            .filter(|&i| oracle.radius < oracle.distances[i] && oracle.distances[i] < oracle.radius + t)
            .collect();
        ensure(
            same_kept(&out.kept, &expected, &oracle.distances, oracle.radius, oracle.radius + t, 1e-9),
            || format!("seed {seed}, T {t}: kept {:?} vs brute force {expected:?}", out.kept),
        )?;
        let kept: BTreeSet<usize> = out.kept.iter().copied().collect();
        if let Some(prev) = &previous {
            ensure(prev.is_subset(&kept), || format!("seed {seed}: kept set shrank when T grew to {t}"))?;
        }
        previous = Some(kept);

        let shift: Vec<f64> = (0..dim).map(|_| r.random_range(-20.0..20.0)).collect();
        let moved = |pts: &[Vec<f64>]| -> Vec<Vec<f64>> {
            pts.iter().map(|p| p.iter().zip(&shift).map(|(a, b)| a + b).collect()).collect()
        };
        let shifted = filter::filter_candidates(&moved(&cands), &moved(&ind), ShellWidth::Absolute { width: t })
            .map_err(|e| e.to_string())?;
        ensure(
            same_kept(&out.kept, &shifted.kept, &out.distances, out.summary.boundary_radius, out.summary.boundary_radius + t, 1e-7),
            || format!("seed {seed}, T {t}: translation changed the kept set"),
        )?;
    }
    Ok(())
}

pub fn criterion_filter() -> Outcome {
    for seed in 0..100 {
        filter_case(5000 + seed)?;
    }
    Ok("100 Gaussian clouds (dims 2-16), brute force, monotone in T, translation-equivariant".into())
}

// ------------------------------------------------------------ calibration

/// Calibrated probabilities with labels drawn from them, and the
/// overconfident squared-and-renormalized version.
pub fn overconfident_set(r: &mut ChaCha8Rng, n: usize, k: usize) -> (Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<usize>) {
    let mut calibrated = Vec::with_capacity(n);
    let mut sharpened = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let z: Vec<f64> = (0..k).map(|_| r.random_range(-2.0..2.0)).collect();
        let p = model::softmax(&z);
        let u: f64 = r.random();
        let mut acc = 0.0;
        let y = p
            .iter()
            .position(|&pi| {
                acc += pi;
                u < acc
            })
            .unwrap_or(k - 1);
        let sq: Vec<f64> = p.iter().map(|v| v * v).collect();
        let s: f64 = sq.iter().sum();
        sharpened.push(sq.into_iter().map(|v| v / s).collect());
        calibrated.push(p);
        labels.push(y);
    }
    (calibrated, sharpened, labels)
}

pub fn ece_of(probs: &[Vec<f64>], labels: &[usize]) -> f64 {
    let inputs: Vec<EceInput> = probs
        .iter()
        .zip(labels)
        .map(|(p, &y)| {
            let pred = model::argmax(p);
            EceInput {
                confidence: p[pred],
                correct: pred == y,
            }
        })
        .collect();
    metrics::ece(&inputs, metrics::DEFAULT_ECE_BINS).expect("valid inputs")
}

pub fn criterion_calibration() -> Outcome {
    let start = Instant::now();
    let mut r = rng(77);
    let mut worst_identity = 0.0f64;
    for _ in 0..1000 {
        let k = r.random_range(2..=6);
        let z: Vec<f64> = (0..k).map(|_| r.random_range(-6.0..6.0)).collect();
        let p = model::softmax(&z);
        let q = calibrate::apply(&DirichletMap::identity(k), &p).map_err(|e| e.to_string())?;
        worst_identity = p.iter().zip(&q).map(|(a, b)| (a - b).abs()).fold(worst_identity, f64::max);
    }
    ensure(worst_identity <= 1e-12, || format!("identity map deviates by {worst_identity:.2e}"))?;

    let (n, k) = (2000, 4);
    let (_, val_q, val_y) = overconfident_set(&mut r, n, k);
    let (_, test_q, test_y) = overconfident_set(&mut r, n, k);
    let mut fits = Vec::new();
    for lambda in calibrate::LAMBDA_GRID {
        fits.push(calibrate::fit(&val_q, &val_y, lambda, &CalibrationConfig::default()).map_err(|e| e.to_string())?);
    }
    let auto = CalibrationConfig {
        auto_lambda: true,
        ..CalibrationConfig::default()
    };
    fits.push(calibrate::fit_with(&val_q, &val_y, &auto).map_err(|e| e.to_string())?);
    for f in &fits {
        ensure(f.val_nll <= f.identity_nll, || {
            format!("lambda {}: validation NLL rose from {} to {}", f.lambda, f.identity_nll, f.val_nll)
        })?;
    }
    let fit = calibrate::fit(&val_q, &val_y, CalibrationConfig::default().lambda, &CalibrationConfig::default())
        .map_err(|e| e.to_string())?;
    let before = ece_of(&test_q, &test_y);
    let calibrated: Vec<Vec<f64>> = test_q
        .iter()
        .map(|p| calibrate::apply(&fit.map, p).expect("k matches"))
        .collect();
    let after = ece_of(&calibrated, &test_y);
    let reduction = (before - after) / before;
    ensure(reduction >= 0.3, || format!("ECE {before:.4} -> {after:.4} ({:.0}% reduction)", reduction * 100.0))?;
    let elapsed = start.elapsed();
    ensure(elapsed < Duration::from_secs(60), || format!("took {elapsed:?}"))?;
    Ok(format!(
        "identity dev {worst_identity:.1e}; ECE {before:.4} -> {after:.4} ({:.0}% lower); NLL never rose over {} fits; {elapsed:.2?}",
        reduction * 100.0,
        fits.len()
    ))
}

// -------------------------------------------------- synthetic experiment

pub struct SyntheticRuns {
    /// `reports[seed][method]` in `Method::ALL` order.
    pub reports: Vec<Vec<ExperimentReport>>,
    pub elapsed: Duration,
}

pub fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

impl SyntheticRuns {
    pub fn median_of(&self, method: usize, f: impl Fn(&ExperimentReport) -> f64) -> f64 {
        median(self.reports.iter().map(|per_seed| f(&per_seed[method])).collect())
    }
}

pub fn synthetic_config(dir: &Path, synth_cfg: &SynthConfig, overrides: &[String]) -> RunConfig {
    synth::write_bundle(&synth::generate(synth_cfg).expect("synthetic corpus"), dir).expect("bundle written");
    RunConfig::from_toml(synth::SYNTH_RUN_CONFIG, dir, overrides).expect("bundled config parses")
}

pub fn synthetic_runs(seeds: u64) -> Result<SyntheticRuns, String> {
    let start = Instant::now();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    synthetic_config(dir.path(), &SynthConfig::default(), &[]);
    let mut reports = Vec::new();
    for seed in 0..seeds {
        let config = RunConfig::from_toml(synth::SYNTH_RUN_CONFIG, dir.path(), &[format!("seed={seed}")])
            .map_err(|e| e.to_string())?;
        let out = dir.path().join(format!("seed{seed}"));
        reports.push(pipeline::run_all(&config, &Method::ALL, &out).map_err(|e| e.to_string())?);
    }
    Ok(SyntheticRuns {
        reports,
        elapsed: start.elapsed(),
    })
}

pub fn criterion_directional(runs: &SyntheticRuns) -> Outcome {
    let auroc = |m| runs.median_of(m, |r| r.metrics.auroc);
    let fpr = |m| runs.median_of(m, |r| r.metrics.fpr_at_90);
    let (a_msp, a_er, a_gen) = (auroc(0), auroc(1), auroc(2));
    let (f_msp, f_gen) = (fpr(0), fpr(2));
    let detail = format!(
        "median AUROC MSP {a_msp:.4} / MSP+ER {a_er:.4} / MSP+ER+PPLM {a_gen:.4}; median FPR@90 {f_msp:.4} -> {f_gen:.4}; {:.1?}",
        runs.elapsed
    );
    ensure(a_msp < a_er && a_er <= a_gen, || format!("ordering violated: {detail}"))?;
    ensure(a_gen - a_msp >= 0.05, || format!("AUROC gain below 0.05: {detail}"))?;
    ensure(f_gen < f_msp, || format!("FPR@90 did not decrease: {detail}"))?;
    ensure(runs.elapsed < Duration::from_secs(300), || format!("took {:?}", runs.elapsed))?;
    Ok(detail)
}

pub fn criterion_accuracy(runs: &SyntheticRuns) -> Outcome {
    let acc = |m| runs.median_of(m, |r| r.ind_accuracy);
    let (base, er, gen) = (acc(0), acc(1), acc(2));
    let detail = format!("median IND accuracy MSP {base:.4} / MSP+ER {er:.4} / MSP+ER+PPLM {gen:.4}");
    ensure((er - base).abs() <= 0.02 && (gen - base).abs() <= 0.02, || detail.clone())?;
    Ok(detail)
}

// ------------------------------------------------------------- steering

pub const TOY_CORPUS: &[&str] = &[
    "the match starts at noon",
    "the team won the match",
    "the server crashed at noon",
    "the kernel panicked again",
    "a fan cheered for the team",
    "the disk was full again",
    "the goal came late",
    "a patch fixed the kernel",
];

pub fn criterion_steering() -> Outcome {
    let tokens: Vec<Vec<String>> = TOY_CORPUS.iter().map(|s| oodkit::corpus::tokenize(s)).collect();
    let refs: Vec<&[String]> = tokens.iter().map(Vec::as_slice).collect();
    let lm = generate::fit_ngram(&refs, 2).map_err(|e| e.to_string())?;
    let bow = generate::BagOfWords::new(
        ["team", "match", "goal", "fan"].iter().map(|w| (w.to_string(), 1.0)).collect(),
    )
    .map_err(|e| e.to_string())?;
    let mask = lm.bow_mask(&bow);
    let unsteered = vec![false; lm.outcomes()];
    let seed_tokens = ["the", "server"];

    let rate = |beta: f64| -> Result<f64, String> {
        let cfg = GenerationConfig {
            beta,
            max_length: 12,
            ..GenerationConfig::default()
        };
        let (mut hits, mut total) = (0usize, 0usize);
        for i in 0..1000u64 {
            let mut r = rng(42);
            r.set_stream(i);
            let out = generate::generate_sentence(&lm, &seed_tokens, &mask, &cfg, &mut r).map_err(|e| e.to_string())?;
            let tail = &out[seed_tokens.len()..];
            hits += tail.iter().filter(|t| bow.contains(t)).count();
            total += tail.len();
            if beta == 1.0 {
                let mut r2 = rng(42);
                r2.set_stream(i);
                let plain = generate::generate_sentence(&lm, &seed_tokens, &unsteered, &cfg, &mut r2)
                    .map_err(|e| e.to_string())?;
                ensure(out == plain, || format!("sample {i}: beta=1 output differs from the unsteered model"))?;
            }
        }
        Ok(hits as f64 / total.max(1) as f64)
    };
    // beta = 1 leaves every conditional distribution bit-for-bit unchanged
    for ctx in lm.vocab().tokens().iter().map(|t| vec![t.as_str()]).chain([vec![]]) {
        let d = generate::next_token_dist(&lm, &ctx);
        ensure(generate::steer(&d, &mask, 1.0) == d, || format!("beta=1 changed the distribution after {ctx:?}"))?;
    }
    let (r1, r5) = (rate(1.0)?, rate(5.0)?);
    ensure(r5 > r1, || format!("BoW rate at beta=5 {r5:.4} not above beta=1 {r1:.4}"))?;
    Ok(format!("BoW-word rate {r1:.4} (beta=1) -> {r5:.4} (beta=5) over 1000 samples; beta=1 identical to unsteered"))
}

// ---------------------------------------------------------- determinism

pub fn strip_timings(json: &str) -> String {
    let mut v: serde_json::Value = serde_json::from_str(json).expect("valid json");
    if let Some(obj) = v.as_object_mut() {
        obj.remove("timings");
    }
    v.to_string()
}

/// Compare two directory trees file by file, ignoring `timings` in
/// `experiment.json`. Returns the number of files compared.
pub fn compare_trees(a: &Path, b: &Path) -> Result<usize, String> {
    let mut count = 0;
    let mut names: Vec<_> = std::fs::read_dir(a)
        .map_err(|e| e.to_string())?
        .map(|e| e.expect("dir entry").file_name())
        .collect();
    names.sort();
    let other: usize = std::fs::read_dir(b).map_err(|e| e.to_string())?.count();
    ensure(names.len() == other, || format!("{} and {} hold different files", a.display(), b.display()))?;
    for name in names {
        let (pa, pb) = (a.join(&name), b.join(&name));
        if pa.is_dir() {
            count += compare_trees(&pa, &pb)?;
            continue;
        }
        let (ta, tb) = (std::fs::read(&pa).map_err(|e| e.to_string())?, std::fs::read(&pb).map_err(|e| e.to_string())?);
        let same = if name == "experiment.json" {
            strip_timings(&String::from_utf8_lossy(&ta)) == strip_timings(&String::from_utf8_lossy(&tb))
        } else {
            ta == tb
        };
        ensure(same, || format!("{} differs between runs", pa.display()))?;
        count += 1;
    }
    Ok(count)
}

pub fn small_synth() -> SynthConfig {
    SynthConfig {
        ind_sentences: 600,
        ood_sentences: 300,
        aux_sentences: 300,
        ..SynthConfig::default()
    }
}

pub fn criterion_determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let config = synthetic_config(
        &dir.path().join("data"),
        &small_synth(),
        &["seed=3".into(), "train.epochs=4".into(), "generation.num_seeds=300".into()],
    );
    pipeline::run_all(&config, &Method::ALL, &dir.path().join("a")).map_err(|e| e.to_string())?;
    pipeline::run_all(&config, &Method::ALL, &dir.path().join("b")).map_err(|e| e.to_string())?;
    let files = compare_trees(&dir.path().join("a"), &dir.path().join("b"))?;

    let mut r = rng(9);
    let (_, q, y) = overconfident_set(&mut r, 300, 3);
    let cfg = CalibrationConfig {
        auto_lambda: true,
        ..CalibrationConfig::default()
    };
    let f1 = calibrate::fit_with(&q, &y, &cfg).map_err(|e| e.to_string())?;
    let f2 = calibrate::fit_with(&q, &y, &cfg).map_err(|e| e.to_string())?;
    let j1 = serde_json::to_string(&calibrate::CalibrationFile::from(&f1)).map_err(|e| e.to_string())?;
    let j2 = serde_json::to_string(&calibrate::CalibrationFile::from(&f2)).map_err(|e| e.to_string())?;
    ensure(j1 == j2, || "calibration fit is not reproducible".into())?;
    Ok(format!("{files} artifacts byte-identical across two runs of all three methods; calibration reproducible"))
}
