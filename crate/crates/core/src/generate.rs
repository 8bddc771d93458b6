//! Attribute-steered pseudo-outlier generation.
//!
//! An additively smoothed n-gram model is sampled autoregressively from
//! the first tokens of a random IND sentence. At each step the
//! probability of every bag-of-words token is multiplied by `beta` and the
//! distribution renormalized, pulling the continuation toward the
//! out-domain topic.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Dataset, LabeledExample, Role, Vocabulary};
use crate::error::{Error, Result};

pub const DEFAULT_ORDER: usize = 3;
pub const DEFAULT_DELTA: f64 = 0.1;
/// Sentence-start padding symbol; never produced by the tokenizer.
pub const BOS: &str = "<s>";
/// Sentence-end symbol; never produced by the tokenizer.
pub const EOS: &str = "</s>";

const BOS_ID: usize = usize::MAX;

#[derive(Debug, Clone, Default)]
struct NextCounts {
    total: u64,
    next: HashMap<usize, u64>,
}

#[derive(Debug, Clone)]
pub struct NGramModel {
    order: usize,
    delta: f64,
    vocab: Vocabulary,
    contexts: HashMap<Vec<usize>, NextCounts>,
    unigram: Vec<u64>,
    unigram_total: u64,
}

/// Count `(n−1)`-token context → next-token events. Each sentence is padded
/// with `n−1` begin markers and one end marker.
pub fn fit_ngram<S: AsRef<str>>(corpus: &[&[S]], n: usize) -> Result<NGramModel> {
    if n < 2 {
        return Err(Error::InvalidInput(format!("n-gram order must be at least 2, got {n}")));
    }
    if corpus.is_empty() || corpus.iter().all(|s| s.is_empty()) {
        return Err(Error::InvalidInput("n-gram corpus is empty".into()));
    }
    let vocab = Vocabulary::from_token_lists(corpus.iter().copied(), 1)?;
    let eos = vocab.len();
    let mut contexts: HashMap<Vec<usize>, NextCounts> = HashMap::new();
    let mut unigram = vec![0u64; eos + 1];
    for sentence in corpus {
        let mut ids = vec![BOS_ID; n - 1];
        ids.extend(sentence.iter().map(|t| vocab.id(t.as_ref())));
        ids.push(eos);
        for window in ids.windows(n) {
            let (ctx, next) = window.split_at(n - 1);
            let entry = contexts.entry(ctx.to_vec()).or_default();
            entry.total += 1;
            *entry.next.entry(next[0]).or_default() += 1;
            unigram[next[0]] += 1;
        }
    }
    let unigram_total = unigram.iter().sum();
    Ok(NGramModel {
        order: n,
        delta: DEFAULT_DELTA,
        vocab,
        contexts,
        unigram,
        unigram_total,
    })
}

impl NGramModel {
    /// Set the additive smoothing constant; `0` disables smoothing.
    pub fn with_delta(mut self, delta: f64) -> Result<Self> {
        if !(delta >= 0.0 && delta.is_finite()) {
            return Err(Error::InvalidInput(format!("smoothing constant must be >= 0, got {delta}")));
        }
        self.delta = delta;
        Ok(self)
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    /// Size of the outcome space: vocabulary plus end marker.
    pub fn outcomes(&self) -> usize {
        self.vocab.len() + 1
    }

    pub fn eos_id(&self) -> usize {
        self.vocab.len()
    }

    /// Token for an outcome index (`EOS` for the end marker).
    pub fn outcome_token(&self, id: usize) -> &str {
        if id == self.eos_id() {
            EOS
        } else {
            self.vocab.token(id).expect("outcome id in range")
        }
    }

    fn symbol_id(&self, token: &str) -> Option<usize> {
        match token {
            BOS => Some(BOS_ID),
            EOS => Some(self.eos_id()),
            t => self.vocab.get(t),
        }
    }

    /// Raw count of `next` following `context`. Accepts `BOS` and `EOS`.
    pub fn count(&self, context: &[&str], next: &str) -> u64 {
        let ids: Option<Vec<usize>> = context.iter().map(|t| self.symbol_id(t)).collect();
        let (Some(ids), Some(next)) = (ids, self.symbol_id(next)) else {
            return 0;
        };
        self.contexts
            .get(&ids)
            .and_then(|c| c.next.get(&next))
            .copied()
            .unwrap_or(0)
    }

    /// Number of distinct stored contexts.
    pub fn num_contexts(&self) -> usize {
        self.contexts.len()
    }

    /// Total number of counted events.
    pub fn num_events(&self) -> u64 {
        self.unigram_total
    }

    fn context_key<S: AsRef<str>>(&self, context: &[S]) -> Option<Vec<usize>> {
        let need = self.order - 1;
        let tail = &context[context.len().saturating_sub(need)..];
        let mut key = vec![BOS_ID; need - tail.len()];
        for t in tail {
            key.push(self.symbol_id(t.as_ref())?);
        }
        Some(key)
    }

    /// Boolean mask over outcomes marking bag-of-words tokens.
    pub fn bow_mask(&self, bow: &BagOfWords) -> Vec<bool> {
        let mut mask = vec![false; self.outcomes()];
        for word in bow.words.keys() {
            if let Some(id) = self.vocab.get(word) {
                mask[id] = true;
            }
        }
        mask
    }
}

/// `p(w|c) = (count(c,w) + δ) / (total(c) + δ·V)` over the `V` outcomes
/// (vocabulary plus end marker). The last `n−1` tokens of `context` are
/// used, left-padded with begin markers; an unseen context falls back to
/// the unigram distribution with the same smoothing.
pub fn next_token_dist<S: AsRef<str>>(model: &NGramModel, context: &[S]) -> Vec<f64> {
    let v = model.outcomes();
    let delta = model.delta;
    let seen = model.context_key(context).and_then(|k| model.contexts.get(&k));
    let mut dist = vec![0.0; v];
    match seen {
        Some(counts) => {
            let denom = counts.total as f64 + delta * v as f64;
            dist.iter_mut().for_each(|p| *p = delta / denom);
            for (&id, &c) in &counts.next {
                dist[id] = (c as f64 + delta) / denom;
            }
        }
        None => {
            let denom = model.unigram_total as f64 + delta * v as f64;
            for (p, &c) in dist.iter_mut().zip(&model.unigram) {
                *p = (c as f64 + delta) / denom;
            }
        }
    }
    dist
}

/// Steering keywords with positive weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BagOfWords {
    pub words: BTreeMap<String, f64>,
}

impl BagOfWords {
    pub fn new(words: BTreeMap<String, f64>) -> Result<Self> {
        if words.is_empty() {
            return Err(Error::InvalidInput("bag of words is empty".into()));
        }
        if let Some((w, x)) = words.iter().find(|(_, &x)| !(x > 0.0 && x.is_finite())) {
            return Err(Error::InvalidInput(format!("weight of {w:?} must be positive, got {x}")));
        }
        Ok(BagOfWords { words })
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn contains(&self, token: &str) -> bool {
        self.words.contains_key(token)
    }

    /// Read `word weight` lines; a bare word gets weight 1.
    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut words = BTreeMap::new();
        for (idx, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            let mut parts = line.split_whitespace();
            let Some(word) = parts.next() else { continue };
            let weight = match parts.next() {
                None => 1.0,
                Some(w) => w
                    .parse::<f64>()
                    .map_err(|_| Error::parse(path, idx + 1, format!("bad weight {w:?}")))?,
            };
            if parts.next().is_some() {
                return Err(Error::parse(path, idx + 1, "expected \"word weight\""));
            }
            let tokens = crate::corpus::tokenize(word);
            let [token] = tokens.as_slice() else {
                return Err(Error::parse(path, idx + 1, format!("{word:?} is not a single token")));
            };
            words.insert(token.clone(), weight);
        }
        BagOfWords::new(words).map_err(|e| match e {
            Error::InvalidInput(m) => Error::InvalidInput(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Write `word weight` lines in descending weight order.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut ranked: Vec<(&String, &f64)> = self.words.iter().collect();
        ranked.sort_by(|a, b| b.1.total_cmp(a.1).then_with(|| a.0.cmp(b.0)));
        let mut text = String::new();
        for (w, x) in ranked {
            text.push_str(&format!("{w} {x}\n"));
        }
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

pub const BOW_EPSILON: f64 = 1e-6;
pub const BOW_MIN_COUNT: u64 = 3;

fn relative_freqs<S: AsRef<str>>(corpus: &[&[S]]) -> (HashMap<String, u64>, u64) {
    let mut counts: HashMap<String, u64> = HashMap::new();
    let mut total = 0u64;
    for sentence in corpus {
        for t in sentence.iter() {
            *counts.entry(t.as_ref().to_owned()).or_default() += 1;
            total += 1;
        }
    }
    (counts, total)
}

/// Keywords over-represented in the attribute corpus relative to the IND
/// corpus, scored by `(f_attr + ε) / (f_ind + ε)` on relative frequencies.
/// Only tokens seen at least 3 times in the attribute corpus qualify.
pub fn extract_bow<S: AsRef<str>, T: AsRef<str>>(
    attribute_corpus: &[&[S]],
    ind_corpus: &[&[T]],
    top_k: usize,
) -> Result<BagOfWords> {
    if top_k == 0 {
        return Err(Error::InvalidInput("top_k must be at least 1".into()));
    }
    let (attr, attr_total) = relative_freqs(attribute_corpus);
    let (ind, ind_total) = relative_freqs(ind_corpus);
    if attr_total == 0 || ind_total == 0 {
        return Err(Error::InvalidInput("bag-of-words extraction needs two non-empty corpora".into()));
    }
    let mut scored: Vec<(String, f64)> = attr
        .into_iter()
        .filter(|&(_, c)| c >= BOW_MIN_COUNT)
        .map(|(t, c)| {
            let fa = c as f64 / attr_total as f64;
            let fi = ind.get(&t).copied().unwrap_or(0) as f64 / ind_total as f64;
            let score = (fa + BOW_EPSILON) / (fi + BOW_EPSILON);
            (t, score)
        })
        .collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    if scored.len() < top_k {
        log::warn!(
            "only {} tokens qualify for the bag of words (requested {top_k})",
            scored.len()
        );
    }
    scored.truncate(top_k);
    BagOfWords::new(scored.into_iter().collect())
}

/// Multiply the probability of every boosted outcome by `beta` and
/// renormalize. `beta == 1`, or no boosted mass, returns the input as is.
pub fn steer(dist: &[f64], boosted: &[bool], beta: f64) -> Vec<f64> {
    assert_eq!(dist.len(), boosted.len(), "mask must cover the distribution");
    let boosted_mass: f64 = dist.iter().zip(boosted).filter(|(_, &b)| b).map(|(p, _)| p).sum();
    if beta == 1.0 || boosted_mass == 0.0 {
        return dist.to_vec();
    }
    let scaled: Vec<f64> = dist
        .iter()
        .zip(boosted)
        .map(|(&p, &b)| if b { p * beta } else { p })
        .collect();
    let total: f64 = scaled.iter().sum();
    scaled.into_iter().map(|p| p / total).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerationConfig {
    /// Leading tokens copied from an IND sentence.
    pub seed_token_count: usize,
    pub max_length: usize,
    pub beta: f64,
    /// IND sentences drawn as seeds.
    pub num_seeds: usize,
    pub samples_per_seed: usize,
    pub rng_seed: u64,
    pub order: usize,
    pub delta: f64,
    /// Keywords kept when extracting a bag of words from an attribute corpus.
    pub bow_top_k: usize,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        GenerationConfig {
            seed_token_count: 2,
            max_length: 30,
            beta: 5.0,
            num_seeds: 1000,
            samples_per_seed: 1,
            rng_seed: 0,
            order: DEFAULT_ORDER,
            delta: DEFAULT_DELTA,
            bow_top_k: 50,
        }
    }
}

impl GenerationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.seed_token_count == 0 {
            return Err(Error::InvalidInput("seed_token_count must be at least 1".into()));
        }
        if self.max_length <= self.seed_token_count {
            return Err(Error::InvalidInput("max_length must exceed seed_token_count".into()));
        }
        if !(self.beta >= 1.0 && self.beta.is_finite()) {
            return Err(Error::InvalidInput(format!("beta must be >= 1, got {}", self.beta)));
        }
        if self.order < 2 {
            return Err(Error::InvalidInput("n-gram order must be at least 2".into()));
        }
        Ok(())
    }
}

fn sample_index<R: Rng>(dist: &[f64], rng: &mut R) -> usize {
    let total: f64 = dist.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, p) in dist.iter().enumerate() {
        if u < *p {
            return i;
        }
        u -= p;
    }
    // rounding left a sliver past the end; take the last positive outcome
    dist.iter().rposition(|&p| p > 0.0).unwrap_or(dist.len() - 1)
}

/// Sample a continuation of `seed_tokens` until the end marker or
/// `max_length` tokens. The output starts with the seed.
pub fn generate_sentence<S: AsRef<str>, R: Rng>(
    model: &NGramModel,
    seed_tokens: &[S],
    boosted: &[bool],
    config: &GenerationConfig,
    rng: &mut R,
) -> Result<Vec<String>> {
    if seed_tokens.len() != config.seed_token_count {
        return Err(Error::InvalidInput(format!(
            "expected {} seed tokens, got {}",
            config.seed_token_count,
            seed_tokens.len()
        )));
    }
    let mut tokens: Vec<String> = seed_tokens.iter().map(|t| t.as_ref().to_owned()).collect();
    while tokens.len() < config.max_length {
        let dist = steer(&next_token_dist(model, &tokens), boosted, config.beta);
        let id = sample_index(&dist, rng);
        if id == model.eos_id() {
            break;
        }
        tokens.push(model.outcome_token(id).to_owned());
    }
    Ok(tokens)
}

/// Where a generated candidate came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub seed_source_id: usize,
    pub rng_stream: u64,
}

pub const GENERATED_DOMAIN: &str = "generated";

/// Random stream used to pick seed sentences; sample `i` uses stream `i`.
const SEED_PICK_STREAM: u64 = u64::MAX;

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Draw `num_seeds` random IND sentences and generate `samples_per_seed`
/// continuations of each one's leading tokens. Sentences too short to
/// seed are skipped with a warning.
pub fn make_ood_candidates(
    ind_dataset: &Dataset,
    model: &NGramModel,
    bow: &BagOfWords,
    config: &GenerationConfig,
) -> Result<(Dataset, Vec<Provenance>)> {
    config.validate()?;
    if ind_dataset.is_empty() {
        return Err(Error::InvalidInput("IND dataset is empty".into()));
    }
    let boosted = model.bow_mask(bow);
    let mut picker = stream_rng(config.rng_seed, SEED_PICK_STREAM);
    let mut examples = Vec::new();
    let mut provenance = Vec::new();
    let mut skipped = 0usize;
    for seed_idx in 0..config.num_seeds {
        let source = &ind_dataset.examples[picker.random_range(0..ind_dataset.len())];
        if source.tokens.len() < config.seed_token_count {
            skipped += 1;
            continue;
        }
        let seed_tokens = &source.tokens[..config.seed_token_count];
        for s in 0..config.samples_per_seed {
            let stream = (seed_idx * config.samples_per_seed + s) as u64;
            let mut rng = stream_rng(config.rng_seed, stream);
            let tokens = generate_sentence(model, seed_tokens, &boosted, config, &mut rng)?;
            let text = tokens.join(" ");
            examples.push(LabeledExample {
                id: examples.len(),
                raw_text: text,
                tokens,
                label: None,
                domain: GENERATED_DOMAIN.into(),
            });
            provenance.push(Provenance {
                seed_source_id: source.id,
                rng_stream: stream,
            });
        }
    }
    if skipped > 0 {
        log::warn!("skipped {skipped} seed sentences shorter than {} tokens", config.seed_token_count);
    }
    let dataset = Dataset {
        examples,
        k: ind_dataset.k,
        role: Role::OodCandidate,
        split: None,
    };
    Ok((dataset, provenance))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateRecord {
    pub text: String,
    pub seed_source_id: usize,
    pub rng_stream: u64,
}

/// Write candidates as JSONL `{"text", "seed_source_id", "rng_stream"}`.
pub fn write_candidates(path: &Path, candidates: &Dataset, provenance: &[Provenance]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for (ex, prov) in candidates.examples.iter().zip(provenance) {
        let rec = CandidateRecord {
            text: ex.raw_text.clone(),
            seed_source_id: prov.seed_source_id,
            rng_stream: prov.rng_stream,
        };
        serde_json::to_writer(&mut out, &rec)?;
        out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn read_candidates(path: &Path, k: usize) -> Result<(Dataset, Vec<Provenance>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut examples = Vec::new();
    let mut provenance = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: CandidateRecord =
            serde_json::from_str(&line).map_err(|e| Error::parse(path, idx + 1, e.to_string()))?;
        examples.push(LabeledExample::new(examples.len(), rec.text, None, GENERATED_DOMAIN));
        provenance.push(Provenance {
            seed_source_id: rec.seed_source_id,
            rng_stream: rec.rng_stream,
        });
    }
    let dataset = Dataset {
        examples,
        k,
        role: Role::OodCandidate,
        split: None,
    };
    Ok((dataset, provenance))
}
