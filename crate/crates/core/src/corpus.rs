//! Text datasets: tokenization, loading, vocabulary and splitting.
//!
//! Records come from JSONL (`{"text", "label", "domain"}`) or CSV with a
//! `text,label,domain` header. In-domain (IND) datasets carry a class id in
//! `[0, k)`; out-of-domain datasets never carry a usable label, so their
//! examples hold `label: None` and are never fed to the cross-entropy term.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lowercase, split on whitespace and strip punctuation from token edges.
/// Tokens that are pure punctuation disappear.
pub fn tokenize(raw_text: &str) -> Vec<String> {
    raw_text
        .to_lowercase()
        .split_whitespace()
        .map(|t| t.trim_matches(is_edge_punctuation))
        .filter(|t| !t.is_empty())
        .map(str::to_owned)
        .collect()
}

fn is_edge_punctuation(c: char) -> bool {
    c.is_ascii_punctuation()
        || matches!(
            c,
            '\u{2018}' | '\u{2019}' | '\u{201c}' | '\u{201d}' | '\u{2026}' | '\u{00ab}' | '\u{00bb}'
        )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Role {
    Ind,
    OodCandidate,
    OodEval,
}

impl Role {
    pub fn is_ood(self) -> bool {
        !matches!(self, Role::Ind)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Jsonl,
    Csv,
}

impl Format {
    /// Guess the format from a file extension; anything but `.csv` is JSONL.
    pub fn from_path(path: &Path) -> Format {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("csv") => Format::Csv,
            _ => Format::Jsonl,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledExample {
    /// Position of the record in its source file.
    pub id: usize,
    pub raw_text: String,
    pub tokens: Vec<String>,
    /// `None` for out-of-domain examples.
    pub label: Option<usize>,
    pub domain: String,
}

impl LabeledExample {
    pub fn new(id: usize, raw_text: impl Into<String>, label: Option<usize>, domain: impl Into<String>) -> Self {
        let raw_text = raw_text.into();
        let tokens = tokenize(&raw_text);
        LabeledExample {
            id,
            raw_text,
            tokens,
            label,
            domain: domain.into(),
        }
    }

    /// An example whose text produced no tokens.
    pub fn is_degenerate(&self) -> bool {
        self.tokens.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub examples: Vec<LabeledExample>,
    pub k: usize,
    pub role: Role,
    pub split: Option<Split>,
}

impl Dataset {
    /// Build a dataset, validating labels against `k`. OOD roles drop labels.
    pub fn new(mut examples: Vec<LabeledExample>, k: usize, role: Role) -> Result<Self> {
        for ex in &mut examples {
            if role.is_ood() {
                ex.label = None;
                continue;
            }
            match ex.label {
                Some(label) if label >= k => return Err(Error::ClassOutOfRange { label, k }),
                Some(_) => {}
                None => {
                    return Err(Error::InvalidInput(format!(
                        "IND example {} has no class label",
                        ex.id
                    )))
                }
            }
        }
        Ok(Dataset {
            examples,
            k,
            role,
            split: None,
        })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// Class ids in example order. Panics on OOD datasets.
    pub fn labels(&self) -> Vec<usize> {
        self.examples
            .iter()
            .map(|e| e.label.expect("labels() called on an unlabeled dataset"))
            .collect()
    }

    pub fn token_lists(&self) -> Vec<&[String]> {
        self.examples.iter().map(|e| e.tokens.as_slice()).collect()
    }

    /// Distinct domain tags in first-seen order.
    pub fn domains(&self) -> Vec<String> {
        let mut seen = Vec::<String>::new();
        for ex in &self.examples {
            if !seen.iter().any(|d| d == &ex.domain) {
                seen.push(ex.domain.clone());
            }
        }
        seen
    }

    /// Domain tags joined with `+`, used as a table label.
    pub fn domain_label(&self) -> String {
        self.domains().join("+")
    }

    /// Write the dataset back out as JSONL.
    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(file);
        for ex in &self.examples {
            let record = Record {
                text: ex.raw_text.clone(),
                label: ex.label.map(|l| l as i64),
                domain: Some(ex.domain.clone()),
            };
            serde_json::to_writer(&mut out, &record)?;
            out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        }
        out.flush().map_err(|e| Error::io(path, e))
    }
}

impl fmt::Display for Dataset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} examples, k={}, role={:?}, domains={}",
            self.len(),
            self.k,
            self.role,
            self.domain_label()
        )
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Record {
    text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    label: Option<i64>,
    #[serde(default)]
    domain: Option<String>,
}

/// Load a dataset file. Line order is preserved; errors name the 1-based line.
pub fn load_dataset(path: &Path, format: Format, role: Role, k: usize) -> Result<Dataset> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut examples = Vec::new();
    match format {
        Format::Jsonl => {
            for (idx, line) in BufReader::new(file).lines().enumerate() {
                let line = line.map_err(|e| Error::io(path, e))?;
                if line.trim().is_empty() {
                    continue;
                }
                let record: Record = serde_json::from_str(&line)
                    .map_err(|e| Error::parse(path, idx + 1, e.to_string()))?;
                let id = examples.len();
                examples.push(record_to_example(path, idx + 1, id, record, role, k)?);
            }
        }
        Format::Csv => {
            let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(file);
            for (idx, row) in reader.records().enumerate() {
                // header is line 1
                let line = idx + 2;
                let row = row.map_err(|e| Error::parse(path, line, e.to_string()))?;
                let text = row
                    .get(0)
                    .ok_or_else(|| Error::parse(path, line, "missing text column"))?
                    .to_owned();
                let label = match row.get(1).map(str::trim) {
                    None | Some("") => None,
                    Some(s) => Some(
                        s.parse::<i64>()
                            .map_err(|e| Error::parse(path, line, format!("bad label {s:?}: {e}")))?,
                    ),
                };
                let domain = row.get(2).map(str::to_owned);
                let id = examples.len();
                examples.push(record_to_example(
                    path,
                    line,
                    id,
                    Record { text, label, domain },
                    role,
                    k,
                )?);
            }
        }
    }
    Ok(Dataset {
        examples,
        k,
        role,
        split: None,
    })
}

fn record_to_example(
    path: &Path,
    line: usize,
    id: usize,
    record: Record,
    role: Role,
    k: usize,
) -> Result<LabeledExample> {
    let label = if role.is_ood() {
        None
    } else {
        match record.label {
            None => return Err(Error::parse(path, line, "IND record has no label")),
            Some(l) if l < 0 || l as usize >= k => {
                return Err(Error::parse(
                    path,
                    line,
                    format!("class id out of range: {l} not in [0, {k})"),
                ))
            }
            Some(l) => Some(l as usize),
        }
    };
    Ok(LabeledExample::new(
        id,
        record.text,
        label,
        record.domain.unwrap_or_default(),
    ))
}

/// Token ↔ id bijection. Ids are assigned by descending frequency with
/// lexicographic tie-breaking; `unk_id` comes right after the last token.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vocabulary {
    token_to_id: HashMap<String, usize>,
    id_to_token: Vec<String>,
    pub min_count: usize,
    pub unk_id: usize,
}

impl Vocabulary {
    pub fn from_token_lists<'a, I, S>(sentences: I, min_count: usize) -> Result<Self>
    where
        I: IntoIterator<Item = &'a [S]>,
        S: AsRef<str> + 'a,
    {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        let mut any = false;
        for sentence in sentences {
            any = true;
            for tok in sentence {
                *counts.entry(tok.as_ref()).or_default() += 1;
            }
        }
        if !any {
            return Err(Error::InvalidInput("cannot build a vocabulary from an empty dataset".into()));
        }
        let mut ranked: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|&(_, c)| c >= min_count)
            .collect();
        if ranked.is_empty() {
            return Err(Error::EmptyVocabulary);
        }
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        let id_to_token: Vec<String> = ranked.into_iter().map(|(t, _)| t.to_owned()).collect();
        let token_to_id = id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        let unk_id = id_to_token.len();
        Ok(Vocabulary {
            token_to_id,
            id_to_token,
            min_count,
            unk_id,
        })
    }

    /// Number of real tokens, excluding unk.
    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.token_to_id.get(token).copied().unwrap_or(self.unk_id)
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.token_to_id.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.id_to_token.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.id_to_token
    }
}

pub fn build_vocab(dataset: &Dataset, min_count: usize) -> Result<Vocabulary> {
    if dataset.is_empty() {
        return Err(Error::InvalidInput("cannot build a vocabulary from an empty dataset".into()));
    }
    Vocabulary::from_token_lists(dataset.examples.iter().map(|e| e.tokens.as_slice()), min_count)
}

/// Deterministic train/val/test partition. IND datasets are stratified by class.
pub fn split(dataset: &Dataset, ratios: (f64, f64, f64), seed: u64) -> Result<(Dataset, Dataset, Dataset)> {
    let (rt, rv, rs) = ratios;
    if !(rt > 0.0 && rv > 0.0 && rs > 0.0) || ((rt + rv + rs) - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidInput(format!(
            "split ratios must be positive and sum to 1, got ({rt}, {rv}, {rs})"
        )));
    }

    // Group indices; OOD data is one unstratified group.
    let mut groups: BTreeMap<Option<usize>, Vec<usize>> = BTreeMap::new();
    for (i, ex) in dataset.examples.iter().enumerate() {
        let key = if dataset.role.is_ood() { None } else { ex.label };
        groups.entry(key).or_default().push(i);
    }
    if groups.is_empty() {
        return Err(Error::InvalidInput("cannot split an empty dataset".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut parts: [Vec<usize>; 3] = Default::default();
    for indices in groups.values_mut() {
        indices.shuffle(&mut rng);
        let n = indices.len();
        let n_train = ((rt * n as f64).round() as usize).min(n);
        let n_val = ((rv * n as f64).round() as usize).min(n - n_train);
        let n_test = n - n_train - n_val;
        if n_train == 0 || n_val == 0 || n_test == 0 {
            return Err(if dataset.role.is_ood() {
                Error::InvalidInput("split empty".into())
            } else {
                Error::EmptySplit
            });
        }
        parts[0].extend_from_slice(&indices[..n_train]);
        parts[1].extend_from_slice(&indices[n_train..n_train + n_val]);
        parts[2].extend_from_slice(&indices[n_train + n_val..]);
    }

    let make = |mut idx: Vec<usize>, which: Split| {
        idx.sort_unstable();
        Dataset {
            examples: idx.into_iter().map(|i| dataset.examples[i].clone()).collect(),
            k: dataset.k,
            role: dataset.role,
            split: Some(which),
        }
    };
    let [train, val, test] = parts;
    Ok((
        make(train, Split::Train),
        make(val, Split::Val),
        make(test, Split::Test),
    ))
}
