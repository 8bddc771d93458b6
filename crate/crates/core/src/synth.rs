//! Deterministic synthetic corpus with matching word vectors.
//!
//! Three domains share one embedding space:
//! * `cooking`, the IND domain, with classes `baking`, `grilling`, `soups`;
//! * `sailing`, the OOD evaluation domain, whose vocabulary overlaps the
//!   IND vocabulary on a fixed fraction of word types;
//! * `astronomy`, an auxiliary out-domain used as real outlier-exposure
//!   data and as the steering source for generation. It never overlaps
//!   the evaluation domain, so no run trains on its test distribution.
//!
//! Word vectors are a domain offset plus, for IND class words, a class
//! direction, plus isotropic noise. Sentence embeddings are therefore
//! noisy averages that land near their domain offset.

use std::path::{Path, PathBuf};

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::corpus::{Dataset, LabeledExample, Role};
use crate::embed::WordVectors;
use crate::error::{Error, Result};

pub const IND_DOMAIN: &str = "cooking";
pub const OOD_DOMAIN: &str = "sailing";
pub const AUX_DOMAIN: &str = "astronomy";
pub const CLASS_PREFIXES: [&str; 3] = ["bake", "grill", "soup"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub seed: u64,
    pub dim: usize,
    pub ind_sentences: usize,
    pub ood_sentences: usize,
    pub aux_sentences: usize,
    pub class_words: usize,
    pub generic_words: usize,
    pub ood_words: usize,
    pub aux_words: usize,
    /// Fraction of OOD vocabulary types shared with the IND vocabulary.
    pub lexical_overlap: f64,
    pub min_len: usize,
    pub max_len: usize,
    /// Probability that an IND token is a class word rather than generic.
    pub class_token_rate: f64,
    pub class_strength: f64,
    pub word_noise: f64,
    pub ood_offset: f64,
    /// Pull of OOD subtopic words along the IND class directions; this is
    /// what makes a plain classifier overconfident on OOD text.
    pub ood_class_leak: f64,
    /// Angle in degrees between the OOD and auxiliary offset directions.
    pub ood_angle: f64,
    pub aux_offset: f64,
    pub zipf_exponent: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 7,
            dim: 32,
            ind_sentences: 2400,
            ood_sentences: 2000,
            aux_sentences: 2000,
            class_words: 60,
            generic_words: 120,
            ood_words: 300,
            aux_words: 300,
            lexical_overlap: 0.2,
            min_len: 8,
            max_len: 16,
            class_token_rate: 0.5,
            class_strength: 4.0,
            word_noise: 1.0,
            ood_offset: 3.0,
            ood_class_leak: 3.0,
            ood_angle: 60.0,
            aux_offset: 6.0,
            zipf_exponent: 0.8,
        }
    }
}

impl SynthConfig {
    fn validate(&self) -> Result<()> {
        if self.dim < 5 {
            return Err(Error::InvalidInput("synthetic corpus needs dim >= 5".into()));
        }
        if !(0.0..1.0).contains(&self.lexical_overlap) {
            return Err(Error::InvalidInput("lexical_overlap must lie in [0, 1)".into()));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::InvalidInput("need 1 <= min_len <= max_len".into()));
        }
        if self.shared_words() > self.generic_words {
            return Err(Error::InvalidInput("overlap needs more generic IND words".into()));
        }
        Ok(())
    }

    /// Number of OOD vocabulary types borrowed from the IND generic words.
    pub fn shared_words(&self) -> usize {
        (self.ood_words as f64 * self.lexical_overlap).round() as usize
    }
}

#[derive(Debug, Clone)]
pub struct SynthCorpus {
    pub ind: Dataset,
    pub ood_eval: Dataset,
    pub aux: Dataset,
    pub vectors: WordVectors,
}

struct Lexicon {
    words: Vec<String>,
    sampler: WeightedIndex<f64>,
}

impl Lexicon {
    fn new(words: Vec<String>, zipf: f64) -> Self {
        let weights: Vec<f64> = (0..words.len()).map(|r| 1.0 / ((r + 1) as f64).powf(zipf)).collect();
        let sampler = WeightedIndex::new(weights).expect("non-empty lexicon");
        Lexicon { words, sampler }
    }

    fn draw<R: Rng>(&self, rng: &mut R) -> &str {
        &self.words[self.sampler.sample(rng)]
    }
}

fn names(prefix: &str, n: usize) -> Vec<String> {
    (0..n).map(|i| format!("{prefix}{i}")).collect()
}

fn noisy<R: Rng>(rng: &mut R, mean: &[f64], noise: f64) -> Vec<f64> {
    mean.iter()
        .map(|m| m + noise * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

fn sentence<R: Rng>(rng: &mut R, len_range: (usize, usize), mut pick: impl FnMut(&mut R) -> String) -> String {
    let len = rng.random_range(len_range.0..=len_range.1);
    (0..len).map(|_| pick(rng)).collect::<Vec<_>>().join(" ")
}

pub fn generate(config: &SynthConfig) -> Result<SynthCorpus> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let dim = config.dim;
    let axis = |i: usize, scale: f64| -> Vec<f64> {
        let mut v = vec![0.0; dim];
        v[i] = scale;
        v
    };
    let angle = config.ood_angle.to_radians();
    let mut ood_mean = vec![0.0; dim];
    ood_mean[3] = config.ood_offset * angle.cos();
    ood_mean[4] = config.ood_offset * angle.sin();

    let mut vectors = WordVectors::new(dim);
    let class_lex: Vec<Lexicon> = CLASS_PREFIXES
        .iter()
        .enumerate()
        .map(|(c, prefix)| {
            let words = names(prefix, config.class_words);
            let mean = axis(c, config.class_strength);
            for w in &words {
                vectors.insert(w.clone(), &noisy(&mut rng, &mean, config.word_noise))?;
            }
            Ok(Lexicon::new(words, config.zipf_exponent))
        })
        .collect::<Result<_>>()?;

    let generic = names("kitchen", config.generic_words);
    for w in &generic {
        vectors.insert(w.clone(), &noisy(&mut rng, &vec![0.0; dim], config.word_noise))?;
    }
    let generic_lex = Lexicon::new(generic.clone(), config.zipf_exponent);

    // OOD vocabulary: subtopic words leaning toward one IND class each,
    // plus generic words of which the borrowed IND words are a part.
    let shared = config.shared_words();
    let own = config.ood_words - shared;
    let per_topic = own / 4;
    let ood_topic_lex: Vec<Lexicon> = (0..CLASS_PREFIXES.len())
        .map(|c| {
            let words = names(&format!("sail{c}x"), per_topic);
            let mut mean = ood_mean.clone();
            mean[c] += config.ood_class_leak;
            for w in &words {
                vectors.insert(w.clone(), &noisy(&mut rng, &mean, config.word_noise))?;
            }
            Ok(Lexicon::new(words, config.zipf_exponent))
        })
        .collect::<Result<_>>()?;
    let mut ood_generic = names("sail", own - CLASS_PREFIXES.len() * per_topic);
    for w in &ood_generic {
        vectors.insert(w.clone(), &noisy(&mut rng, &ood_mean, config.word_noise))?;
    }
    // Interleave borrowed IND words through the frequency ranks.
    let generic_total = ood_generic.len() + shared;
    for (i, w) in generic.iter().take(shared).enumerate() {
        let at = (i * generic_total / shared.max(1)).min(ood_generic.len());
        ood_generic.insert(at, w.clone());
    }
    let ood_generic_lex = Lexicon::new(ood_generic, config.zipf_exponent);

    let aux = names("star", config.aux_words);
    for w in &aux {
        vectors.insert(w.clone(), &noisy(&mut rng, &axis(3, config.aux_offset), config.word_noise))?;
    }
    let aux_lex = Lexicon::new(aux, config.zipf_exponent);

    let lens = (config.min_len, config.max_len);
    let ind = (0..config.ind_sentences)
        .map(|i| {
            let c = i % CLASS_PREFIXES.len();
            let text = sentence(&mut rng, lens, |r| {
                if r.random::<f64>() < config.class_token_rate {
                    class_lex[c].draw(r).to_owned()
                } else {
                    generic_lex.draw(r).to_owned()
                }
            });
            LabeledExample::new(i, text, Some(c), IND_DOMAIN)
        })
        .collect();
    let ood_eval = (0..config.ood_sentences)
        .map(|i| {
            let topic = &ood_topic_lex[i % ood_topic_lex.len()];
            let text = sentence(&mut rng, lens, |r| {
                if r.random::<f64>() < config.class_token_rate {
                    topic.draw(r).to_owned()
                } else {
                    ood_generic_lex.draw(r).to_owned()
                }
            });
            LabeledExample::new(i, text, None, OOD_DOMAIN)
        })
        .collect();
    let aux_data = (0..config.aux_sentences)
        .map(|i| LabeledExample::new(i, sentence(&mut rng, lens, |r| aux_lex.draw(r).to_owned()), None, AUX_DOMAIN))
        .collect();

    let k = CLASS_PREFIXES.len();
    Ok(SynthCorpus {
        ind: Dataset::new(ind, k, Role::Ind)?,
        ood_eval: Dataset::new(ood_eval, k, Role::OodEval)?,
        aux: Dataset::new(aux_data, k, Role::OodCandidate)?,
        vectors,
    })
}

/// Files written by [`write_bundle`].
#[derive(Debug, Clone)]
pub struct SynthBundle {
    pub ind: PathBuf,
    pub ood_eval: PathBuf,
    pub aux: PathBuf,
    pub vectors: PathBuf,
    pub config: PathBuf,
}

/// Write the corpus, vectors and a ready-to-run pipeline config to `dir`.
pub fn write_bundle(corpus: &SynthCorpus, dir: &Path) -> Result<SynthBundle> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let bundle = SynthBundle {
        ind: dir.join("ind.jsonl"),
        ood_eval: dir.join("ood_eval.jsonl"),
        aux: dir.join("aux.jsonl"),
        vectors: dir.join("vectors.txt"),
        config: dir.join("config.toml"),
    };
    corpus.ind.write_jsonl(&bundle.ind)?;
    corpus.ood_eval.write_jsonl(&bundle.ood_eval)?;
    corpus.aux.write_jsonl(&bundle.aux)?;
    corpus.vectors.save(&bundle.vectors)?;
    std::fs::write(&bundle.config, SYNTH_RUN_CONFIG).map_err(|e| Error::io(&bundle.config, e))?;
    Ok(bundle)
}

/// Pipeline config for the bundled corpus; paths are relative to its directory.
pub const SYNTH_RUN_CONFIG: &str = r#"seed = 0

[data]
k = 3
ind_train = "ind.jsonl"
ood_eval = "ood_eval.jsonl"
ood_train = "aux.jsonl"
attribute_corpus = "aux.jsonl"
neutral_corpus = "aux.jsonl"

[embedding]
word_vectors = "vectors.txt"

[train]
hidden_dims = [64, 64]
epochs = 15
batch_size = 32
learning_rate = 0.001
dropout_rate = 0.3
alpha = 1.0
ood_ratio = 0.5

[generation]
num_seeds = 2000
beta = 5.0
bow_top_k = 50

[filter]
mode = "relative"
rho = 1.0
"#;
