//! Run configuration and the three method runners.
//!
//! All runners go through [`run_method`], which differs per method only in
//! the OOD pool handed to training:
//! * `MSP`: none, and the entropy weight is forced to zero;
//! * `MSP+ER`: a supplied real out-domain dataset;
//! * `MSP+ER+PPLM`: generated candidates that survive the boundary filter.
//!
//! Evaluation is the shared [`crate::evaluate::evaluate`].

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::calibrate::CalibrationFile;
use crate::corpus::{self, Dataset, Format, Role};
use crate::embed::{self, SentenceEmbedding, WordVectors};
use crate::error::{Error, Result};
use crate::evaluate::{self, EvalData, EvalSettings, Evaluation, MethodMetrics};
use crate::filter::{self, FilterReport, ShellWidth, DEFAULT_SHELL_WIDTH};
use crate::generate::{self, BagOfWords, GenerationConfig, Provenance};
use crate::metrics::{self, ScoredSample};
use crate::model::{self, ClassifierParams};
use crate::train::{self, TrainConfig, TrainData, TrainOutcome};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "MSP")]
    Msp,
    #[serde(rename = "MSP+ER")]
    MspEr,
    #[serde(rename = "MSP+ER+PPLM")]
    MspErGenerated,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Msp, Method::MspEr, Method::MspErGenerated];

    pub fn tag(self) -> &'static str {
        match self {
            Method::Msp => "MSP",
            Method::MspEr => "MSP+ER",
            Method::MspErGenerated => "MSP+ER+PPLM",
        }
    }

    /// Subdirectory name used by [`run_all`].
    pub fn dir_name(self) -> &'static str {
        match self {
            Method::Msp => "msp",
            Method::MspEr => "msp-er",
            Method::MspErGenerated => "msp-er-pplm",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| s.eq_ignore_ascii_case(m.tag()) || s.eq_ignore_ascii_case(m.dir_name()))
            .ok_or_else(|| Error::InvalidInput(format!("unknown method {s:?} (expected msp, msp-er or msp-er-pplm)")))
    }
}

fn default_split() -> [f64; 3] {
    [0.8, 0.1, 0.1]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Number of IND classes.
    pub k: usize,
    pub ind_train: PathBuf,
    /// Given together with `ind_test`; when both are absent `ind_train`
    /// is split by `split`.
    #[serde(default)]
    pub ind_val: Option<PathBuf>,
    #[serde(default)]
    pub ind_test: Option<PathBuf>,
    #[serde(default = "default_split")]
    pub split: [f64; 3],
    pub ood_eval: PathBuf,
    /// Real out-domain data for `MSP+ER`.
    #[serde(default)]
    pub ood_train: Option<PathBuf>,
    /// Source of the extracted bag of words when no `bow` file is given.
    #[serde(default)]
    pub attribute_corpus: Option<PathBuf>,
    /// Extra text for the generator's n-gram model.
    #[serde(default)]
    pub neutral_corpus: Option<PathBuf>,
    /// Bag-of-words files; each one yields its own batch of candidates.
    #[serde(default)]
    pub bow: Vec<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbeddingConfig {
    pub word_vectors: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WidthMode {
    Absolute,
    Relative,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterConfig {
    pub mode: WidthMode,
    /// Shell width in absolute mode.
    pub width: f64,
    /// Width as a multiple of the boundary radius in relative mode.
    pub rho: f64,
    /// Keep every candidate; the report marks the filter as bypassed.
    pub skip: bool,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig {
            mode: WidthMode::Absolute,
            width: DEFAULT_SHELL_WIDTH,
            rho: 1.0,
            skip: false,
        }
    }
}

impl FilterConfig {
    pub fn shell_width(&self) -> ShellWidth {
        match self.mode {
            WidthMode::Absolute => ShellWidth::Absolute { width: self.width },
            WidthMode::Relative => ShellWidth::Relative { rho: self.rho },
        }
    }
}

/// Everything a run needs. The global `seed` drives the IND split,
/// training and generation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    pub data: DataConfig,
    pub embedding: EmbeddingConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub generation: GenerationConfig,
    #[serde(default)]
    pub filter: FilterConfig,
    #[serde(default)]
    pub eval: EvalSettings,
}

fn parse_override_value(raw: &str) -> toml::Value {
    match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("key just parsed"),
        Err(_) => toml::Value::String(raw.to_owned()),
    }
}

/// Apply `section.key=value` to a parsed config document. Values are read
/// as TOML literals, falling back to a bare string.
pub fn apply_override(doc: &mut toml::Table, assignment: &str) -> Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::InvalidInput(format!("override {assignment:?} is not key=value")))?;
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(Error::InvalidInput(format!("bad override key {path:?}")));
    }
    let (last, parents) = keys.split_last().expect("split yields at least one key");
    let mut table = doc;
    for key in parents {
        let entry = table
            .entry((*key).to_owned())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| Error::InvalidInput(format!("override {path:?}: {key:?} is not a section")))?;
    }
    table.insert((*last).to_owned(), parse_override_value(raw.trim()));
    Ok(())
}

impl RunConfig {
    /// Parse TOML, apply overrides, and resolve relative paths against `base_dir`.
    pub fn from_toml(text: &str, base_dir: &Path, overrides: &[String]) -> Result<Self> {
        let mut doc: toml::Table =
            toml::from_str(text).map_err(|e| Error::InvalidInput(format!("config: {e}")))?;
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        let mut config: RunConfig = doc
            .try_into()
            .map_err(|e: toml::de::Error| Error::InvalidInput(format!("config: {e}")))?;
        config.resolve_paths(base_dir);
        config.sync_seeds();
        Ok(config)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        if !path.is_file() {
            return Err(Error::InvalidInput(format!("config file not found: {}", path.display())));
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        Self::from_toml(&text, base, overrides)
    }

    /// Re-read a `config.resolved.json` written by a previous run.
    pub fn load_resolved(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut config: RunConfig = serde_json::from_str(&text)?;
        config.sync_seeds();
        Ok(config)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        let d = &mut self.data;
        fix(&mut d.ind_train);
        fix(&mut d.ood_eval);
        for p in [&mut d.ind_val, &mut d.ind_test, &mut d.ood_train, &mut d.attribute_corpus, &mut d.neutral_corpus]
            .into_iter()
            .flatten()
        {
            fix(p);
        }
        d.bow.iter_mut().for_each(fix);
        fix(&mut self.embedding.word_vectors);
    }

    fn sync_seeds(&mut self) {
        self.train.seed = self.seed;
        self.generation.rng_seed = self.seed;
    }

    /// Check value ranges and that every referenced file exists.
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.generation.validate()?;
        if self.data.k < 2 {
            return Err(Error::InvalidInput("data.k must be at least 2".into()));
        }
        if self.data.ind_val.is_some() != self.data.ind_test.is_some() {
            return Err(Error::InvalidInput("set both data.ind_val and data.ind_test, or neither".into()));
        }
        let d = &self.data;
        let files = [Some(&d.ind_train), Some(&d.ood_eval), d.ind_val.as_ref(), d.ind_test.as_ref(), d.ood_train.as_ref(), d.attribute_corpus.as_ref(), d.neutral_corpus.as_ref(), Some(&self.embedding.word_vectors)];
        for p in files.into_iter().flatten().chain(&d.bow) {
            if !p.is_file() {
                return Err(Error::InvalidInput(format!("file not found: {}", p.display())));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    /// SHA-256 of the resolved config JSON.
    pub fn digest(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_json()?.as_bytes())))
    }
}

/// Loaded datasets and vectors for one config.
#[derive(Debug, Clone)]
pub struct Inputs {
    pub ind_train: Dataset,
    pub ind_val: Dataset,
    pub ind_test: Dataset,
    pub ood_eval: Dataset,
    pub ood_train: Option<Dataset>,
    pub attribute: Option<Dataset>,
    pub neutral: Option<Dataset>,
    pub bows: Vec<BagOfWords>,
    pub vectors: WordVectors,
}

fn load(path: &Path, role: Role, k: usize) -> Result<Dataset> {
    corpus::load_dataset(path, Format::from_path(path), role, k)
}

impl Inputs {
    pub fn load(config: &RunConfig) -> Result<Self> {
        config.validate()?;
        let d = &config.data;
        let k = d.k;
        let (ind_train, ind_val, ind_test) = match (&d.ind_val, &d.ind_test) {
            (Some(val), Some(test)) => (load(&d.ind_train, Role::Ind, k)?, load(val, Role::Ind, k)?, load(test, Role::Ind, k)?),
            _ => {
                let all = load(&d.ind_train, Role::Ind, k)?;
                corpus::split(&all, (d.split[0], d.split[1], d.split[2]), config.seed)?
            }
        };
        let optional = |p: &Option<PathBuf>, role| p.as_deref().map(|p| load(p, role, k)).transpose();
        Ok(Inputs {
            ind_train,
            ind_val,
            ind_test,
            ood_eval: load(&d.ood_eval, Role::OodEval, k)?,
            ood_train: optional(&d.ood_train, Role::OodCandidate)?,
            attribute: optional(&d.attribute_corpus, Role::OodCandidate)?,
            neutral: optional(&d.neutral_corpus, Role::OodCandidate)?,
            bows: d.bow.iter().map(|p| BagOfWords::load(p)).collect::<Result<_>>()?,
            vectors: embed::load_word_vectors(&config.embedding.word_vectors)?,
        })
    }

    /// SHA-256 over the evaluation-relevant datasets (IND splits and OOD eval).
    pub fn fingerprint(&self) -> Result<String> {
        let mut h = Sha256::new();
        for ds in [&self.ind_train, &self.ind_val, &self.ind_test, &self.ood_eval] {
            for ex in &ds.examples {
                h.update(serde_json::to_vec(&(&ex.raw_text, ex.label, &ex.domain))?);
                h.update(b"\n");
            }
            h.update(b"--\n");
        }
        Ok(hex::encode(h.finalize()))
    }
}

pub const LEAKAGE_WARNING: &str = "data leakage: train OOD overlaps eval OOD domain";

/// Warn when a training-side OOD source shares a domain tag with the OOD
/// evaluation set.
pub fn leakage_warning(train_side: &Dataset, eval: &Dataset, source: &str) -> Option<String> {
    let eval_domains = eval.domains();
    let shared: Vec<String> = train_side
        .domains()
        .into_iter()
        .filter(|d| !d.is_empty() && eval_domains.contains(d))
        .collect();
    (!shared.is_empty()).then(|| format!("{LEAKAGE_WARNING} ({source}: {})", shared.join(", ")))
}

/// Published numbers for the matching method on the computer→sports
/// pair, carried along for orientation only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PublishedReference {
    pub ind_domain: String,
    pub ood_domain: String,
    pub fpr_at_90: f64,
    pub auroc: f64,
    pub aupr: f64,
    pub ece: f64,
    pub ece_after_calibration: f64,
}

pub fn published_reference(method: Method) -> PublishedReference {
    let (fpr_at_90, auroc, aupr, ece, ece_after_calibration) = match method {
        Method::Msp => (0.72, 0.62, 0.23, 0.56, 0.41),
        Method::MspEr => (0.26, 0.90, 0.64, 0.33, 0.28),
        Method::MspErGenerated => (0.18, 0.92, 0.65, 0.32, 0.26),
    };
    PublishedReference {
        ind_domain: "computer".into(),
        ood_domain: "sports".into(),
        fpr_at_90,
        auroc,
        aupr,
        ece,
        ece_after_calibration,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterSummary {
    pub bypassed: bool,
    pub n_candidates: usize,
    pub n_kept: usize,
    pub d: f64,
    #[serde(rename = "T")]
    pub t: f64,
}

/// Contents of `experiment.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub method: Method,
    pub ind_domain: String,
    pub ood_domain: String,
    pub metrics: MethodMetrics,
    pub ind_accuracy: f64,
    pub n_ind_test: usize,
    pub n_ood_eval: usize,
    pub n_ood_train: usize,
    pub best_epoch: usize,
    pub seed: u64,
    pub config: RunConfig,
    /// Training settings actually used (the baseline forces `alpha = 0`).
    pub effective_train: TrainConfig,
    pub config_digest: String,
    pub eval_path_checksum: String,
    pub dataset_fingerprint: String,
    pub filter: Option<FilterSummary>,
    pub warnings: Vec<String>,
    pub published_reference: PublishedReference,
    /// Wall-clock seconds per stage; the only non-reproducible field.
    pub timings: BTreeMap<String, f64>,
}

impl ExperimentReport {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

pub mod artifacts {
    pub const CONFIG: &str = "config.resolved.json";
    pub const CANDIDATES: &str = "candidates.jsonl";
    pub const BOW: &str = "bow.txt";
    pub const FILTER: &str = "filter.json";
    pub const SCORES: &str = "scores.csv";
    pub const METRICS: &str = "metrics.json";
    pub const CALIBRATION: &str = "calibration.json";
    pub const REPORT_CSV: &str = "report.csv";
    pub const REPORT_JSON: &str = "report.json";
    pub const REPORT_TEXT: &str = "report.txt";
    pub const CHECKPOINT: &str = "model.json";
    pub const TRAIN_LOG: &str = "train_log.jsonl";
    pub const EXPERIMENT: &str = "experiment.json";
}

/// Artifact payload with the run seed alongside.
#[derive(Serialize)]
struct Seeded<'a, T: Serialize> {
    seed: u64,
    #[serde(flatten)]
    inner: &'a T,
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Embedded IND splits and OOD eval set.
#[derive(Debug, Clone)]
pub struct Embedded {
    pub train: Vec<SentenceEmbedding>,
    pub train_x: Array2<f64>,
    pub train_y: Vec<usize>,
    pub val_x: Array2<f64>,
    pub val_y: Vec<usize>,
    pub test_x: Array2<f64>,
    pub test_y: Vec<usize>,
    pub ood_x: Array2<f64>,
}

impl Embedded {
    pub fn new(inputs: &Inputs, warnings: &mut Vec<String>) -> Result<Self> {
        let wv = &inputs.vectors;
        let dim = wv.dim();
        let train = embed_checked(&inputs.ind_train, wv, "IND train", warnings);
        let val = embed_checked(&inputs.ind_val, wv, "IND val", warnings);
        let test = embed_checked(&inputs.ind_test, wv, "IND test", warnings);
        let ood = embed_checked(&inputs.ood_eval, wv, "OOD eval", warnings);
        Ok(Embedded {
            train_x: matrix(&train, dim)?,
            train,
            train_y: inputs.ind_train.labels(),
            val_x: matrix(&val, dim)?,
            val_y: inputs.ind_val.labels(),
            test_x: matrix(&test, dim)?,
            test_y: inputs.ind_test.labels(),
            ood_x: matrix(&ood, dim)?,
        })
    }

    /// OOD scores for IND test rows then OOD eval rows.
    pub fn detection_scores(&self, params: &ClassifierParams) -> Result<Vec<ScoredSample>> {
        let score = |x: &Array2<f64>, is_ood: bool| -> Result<Vec<ScoredSample>> {
            Ok(model::predict_batch(params, x.view())?
                .iter()
                .map(|p| ScoredSample::new(model::ood_score(p), is_ood))
                .collect())
        };
        let mut out = score(&self.test_x, false)?;
        out.extend(score(&self.ood_x, true)?);
        Ok(out)
    }

    pub fn eval_data(&self) -> EvalData<'_> {
        EvalData {
            val_x: self.val_x.view(),
            val_y: &self.val_y,
            test_x: self.test_x.view(),
            test_y: &self.test_y,
            ood_x: self.ood_x.view(),
        }
    }
}

pub fn matrix(embs: &[SentenceEmbedding], dim: usize) -> Result<Array2<f64>> {
    if embs.is_empty() {
        return Ok(train::empty_rows(dim));
    }
    embed::to_matrix(embs, dim)
}

fn warn(warnings: &mut Vec<String>, message: String) {
    log::warn!("{message}");
    warnings.push(message);
}

pub fn embed_checked(ds: &Dataset, wv: &WordVectors, what: &str, warnings: &mut Vec<String>) -> Vec<SentenceEmbedding> {
    let embs = embed::embed_dataset(ds, wv);
    let empty = embs.iter().filter(|e| e.known_token_count == 0).count();
    if empty > 0 {
        warn(warnings, format!("{what}: {empty} of {} sentences have no known token and embed to zero", embs.len()));
    }
    embs
}

struct Stopwatch {
    start: Instant,
    timings: BTreeMap<String, f64>,
}

impl Stopwatch {
    fn new() -> Self {
        Stopwatch {
            start: Instant::now(),
            timings: BTreeMap::new(),
        }
    }

    fn lap(&mut self, stage: &str) {
        let now = Instant::now();
        self.timings.insert(stage.to_owned(), (now - self.start).as_secs_f64());
        self.start = now;
    }
}

/// Generate candidates for every bag of words and write `candidates.jsonl`
/// (and `bow.txt` when the bag of words was extracted).
pub fn generate_stage(
    config: &RunConfig,
    inputs: &Inputs,
    out_dir: &Path,
    warnings: &mut Vec<String>,
) -> Result<(Dataset, Vec<Provenance>)> {
    for (source, ds) in [("attribute_corpus", &inputs.attribute), ("neutral_corpus", &inputs.neutral)] {
        if let Some(w) = ds.as_ref().and_then(|ds| leakage_warning(ds, &inputs.ood_eval, source)) {
            warn(warnings, w);
        }
    }
    let gen = &config.generation;
    let mut lm_corpus = inputs.ind_train.token_lists();
    if let Some(neutral) = &inputs.neutral {
        lm_corpus.extend(neutral.token_lists());
    }
    let model = generate::fit_ngram(&lm_corpus, gen.order)?.with_delta(gen.delta)?;
    let bows = if !inputs.bows.is_empty() {
        inputs.bows.clone()
    } else if let Some(attr) = &inputs.attribute {
        let bow = generate::extract_bow(&attr.token_lists(), &inputs.ind_train.token_lists(), gen.bow_top_k)?;
        bow.save(&out_dir.join(artifacts::BOW))?;
        vec![bow]
    } else {
        return Err(Error::InvalidInput(
            "generation needs data.bow files or data.attribute_corpus".into(),
        ));
    };
    let mut examples = Vec::new();
    let mut provenance = Vec::new();
    for (b, bow) in bows.iter().enumerate() {
        if !model.bow_mask(bow).contains(&true) {
            warn(warnings, format!("bag of words {b}: no word occurs in the generator corpus, steering has no effect"));
        }
        let cfg = GenerationConfig {
            rng_seed: gen.rng_seed.wrapping_add(b as u64),
            ..gen.clone()
        };
        let (batch, prov) = generate::make_ood_candidates(&inputs.ind_train, &model, bow, &cfg)?;
        for mut ex in batch.examples {
            ex.id = examples.len();
            examples.push(ex);
        }
        provenance.extend(prov);
    }
    let candidates = Dataset {
        examples,
        k: inputs.ind_train.k,
        role: Role::OodCandidate,
        split: None,
    };
    generate::write_candidates(&out_dir.join(artifacts::CANDIDATES), &candidates, &provenance)?;
    Ok((candidates, provenance))
}

/// Apply the boundary filter (or bypass it) and write `filter.json`.
/// Returns the report and the embeddings of the kept candidates.
pub fn filter_stage(
    config: &RunConfig,
    ind_train: &[SentenceEmbedding],
    candidates: &[SentenceEmbedding],
    out_dir: &Path,
    warnings: &mut Vec<String>,
) -> Result<(FilterReport, Vec<SentenceEmbedding>)> {
    let cand_v: Vec<Vec<f64>> = candidates.iter().map(|e| e.vector.clone()).collect();
    let ind_v: Vec<Vec<f64>> = ind_train.iter().map(|e| e.vector.clone()).collect();
    let width = config.filter.shell_width();
    let outcome = filter::filter_candidates(&cand_v, &ind_v, width)?;
    let mut report = FilterReport::new(&outcome, ind_v.len(), width);
    if config.filter.skip {
        report.bypassed = true;
        report.kept_indices = (0..cand_v.len()).collect();
        warn(warnings, "boundary filter bypassed: training on all candidates".into());
    } else if outcome.kept.is_empty() {
        return Err(Error::NothingKept {
            radius: outcome.summary.boundary_radius,
            width: outcome.summary.shell_width,
        });
    }
    write_json(&out_dir.join(artifacts::FILTER), &Seeded { seed: config.seed, inner: &report })?;
    let kept = report.kept_indices.iter().map(|&i| candidates[i].clone()).collect();
    Ok((report, kept))
}

/// Train on the IND split plus an OOD pool (possibly empty) and write the
/// checkpoint and per-epoch log.
pub fn train_stage(
    config: &TrainConfig,
    k: usize,
    embedded: &Embedded,
    pool: &[SentenceEmbedding],
    out_dir: &Path,
) -> Result<TrainOutcome> {
    let pool_x = matrix(pool, embedded.train_x.ncols())?;
    let data = TrainData {
        train_x: embedded.train_x.view(),
        train_y: &embedded.train_y,
        val_x: embedded.val_x.view(),
        val_y: &embedded.val_y,
        ood: pool_x.view(),
    };
    let outcome = train::train(&data, k, config)?;
    outcome.params.save(&out_dir.join(artifacts::CHECKPOINT))?;
    train::write_log(&out_dir.join(artifacts::TRAIN_LOG), &outcome.log)?;
    Ok(outcome)
}

/// Shared evaluation; writes `scores.csv`, `metrics.json` and, when
/// calibration is on, `calibration.json`.
pub fn evaluate_stage(
    config: &RunConfig,
    method: Option<Method>,
    params: &ClassifierParams,
    embedded: &Embedded,
    out_dir: &Path,
) -> Result<Evaluation> {
    let evaluation = evaluate::evaluate(params, &embedded.eval_data(), &config.eval)?;
    metrics::write_scores(&out_dir.join(artifacts::SCORES), &evaluation.scores)?;
    let metrics_file = MetricsFile {
        method,
        metrics: &evaluation.metrics,
        ind_accuracy: evaluation.ind_accuracy,
        n_ind: evaluation.n_ind,
        n_ood: evaluation.n_ood,
        score_definition: metrics::SCORE_DEFINITION,
        bins: config.eval.bins,
    };
    write_json(&out_dir.join(artifacts::METRICS), &Seeded { seed: config.seed, inner: &metrics_file })?;
    if let Some(fit) = &evaluation.calibration {
        write_json(
            &out_dir.join(artifacts::CALIBRATION),
            &Seeded { seed: config.seed, inner: &CalibrationFile::from(fit) },
        )?;
    }
    Ok(evaluation)
}

#[derive(Serialize)]
struct MetricsFile<'a> {
    #[serde(skip_serializing_if = "Option::is_none")]
    method: Option<Method>,
    #[serde(flatten)]
    metrics: &'a MethodMetrics,
    ind_accuracy: f64,
    n_ind: usize,
    n_ood: usize,
    score_definition: &'a str,
    bins: usize,
}

/// Train, evaluate and persist one method run into `out_dir`.
pub fn run_method(method: Method, config: &RunConfig, inputs: &Inputs, out_dir: &Path) -> Result<ExperimentReport> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut clock = Stopwatch::new();
    let mut warnings = Vec::new();
    write_json(&out_dir.join(artifacts::CONFIG), config)?;
    let embedded = Embedded::new(inputs, &mut warnings)?;
    clock.lap("embed");

    let mut effective_train = config.train.clone();
    let mut filter_summary = None;
    let pool: Vec<SentenceEmbedding> = match method {
        Method::Msp => {
            effective_train.alpha = 0.0;
            Vec::new()
        }
        Method::MspEr => {
            let ood_train = inputs
                .ood_train
                .as_ref()
                .ok_or_else(|| Error::InvalidInput("MSP+ER needs data.ood_train".into()))?;
            if let Some(w) = leakage_warning(ood_train, &inputs.ood_eval, "ood_train") {
                warn(&mut warnings, w);
            }
            embed_checked(ood_train, &inputs.vectors, "OOD train", &mut warnings)
        }
        Method::MspErGenerated => {
            let (candidates, _) = generate_stage(config, inputs, out_dir, &mut warnings)?;
            clock.lap("generate");
            let cand_e = embed_checked(&candidates, &inputs.vectors, "candidates", &mut warnings);
            let (report, kept) = filter_stage(config, &embedded.train, &cand_e, out_dir, &mut warnings)?;
            filter_summary = Some(FilterSummary {
                bypassed: report.bypassed,
                n_candidates: report.n_candidates,
                n_kept: report.kept_indices.len(),
                d: report.d,
                t: report.t,
            });
            clock.lap("filter");
            kept
        }
    };

    let outcome = train_stage(&effective_train, config.data.k, &embedded, &pool, out_dir)?;
    clock.lap("train");
    let evaluation = evaluate_stage(config, Some(method), &outcome.params, &embedded, out_dir)?;
    clock.lap("evaluate");

    let report = ExperimentReport {
        method,
        ind_domain: inputs.ind_test.domain_label(),
        ood_domain: inputs.ood_eval.domain_label(),
        metrics: evaluation.metrics,
        ind_accuracy: evaluation.ind_accuracy,
        n_ind_test: evaluation.n_ind,
        n_ood_eval: evaluation.n_ood,
        n_ood_train: pool.len(),
        best_epoch: outcome.best_epoch,
        seed: config.seed,
        config: config.clone(),
        effective_train,
        config_digest: config.digest()?,
        eval_path_checksum: evaluate::eval_path_checksum(),
        dataset_fingerprint: inputs.fingerprint()?,
        filter: filter_summary,
        warnings,
        published_reference: published_reference(method),
        timings: clock.timings,
    };
    let rows = crate::report::rows(std::slice::from_ref(&report))?;
    crate::report::write_csv(&out_dir.join(artifacts::REPORT_CSV), &rows)?;
    write_json(&out_dir.join(artifacts::EXPERIMENT), &report)?;
    Ok(report)
}

pub fn run_baseline_msp(config: &RunConfig, out_dir: &Path) -> Result<ExperimentReport> {
    run_method(Method::Msp, config, &Inputs::load(config)?, out_dir)
}

pub fn run_msp_er(config: &RunConfig, out_dir: &Path) -> Result<ExperimentReport> {
    run_method(Method::MspEr, config, &Inputs::load(config)?, out_dir)
}

pub fn run_augmented_er(config: &RunConfig, out_dir: &Path) -> Result<ExperimentReport> {
    run_method(Method::MspErGenerated, config, &Inputs::load(config)?, out_dir)
}

/// Run each method into `out_dir/<method>` and write the comparison
/// table (`report.txt`, `report.csv`, `report.json`) into `out_dir`.
pub fn run_all(config: &RunConfig, methods: &[Method], out_dir: &Path) -> Result<Vec<ExperimentReport>> {
    let inputs = Inputs::load(config)?;
    let reports = methods
        .iter()
        .map(|&m| run_method(m, config, &inputs, &out_dir.join(m.dir_name())))
        .collect::<Result<Vec<_>>>()?;
    crate::report::write_all(out_dir, &reports)?;
    Ok(reports)
}
