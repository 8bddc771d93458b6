//! Sentence embeddings by mean pooling word vectors, or read from a
//! precomputed matrix file.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::Array2;

use crate::corpus::Dataset;
use crate::error::{Error, Result};

/// Token → vector table. All vectors share `dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct WordVectors {
    dim: usize,
    index: HashMap<String, usize>,
    data: Vec<f64>,
}

impl WordVectors {
    pub fn new(dim: usize) -> Self {
        WordVectors {
            dim,
            index: HashMap::new(),
            data: Vec::new(),
        }
    }

    /// Insert or overwrite a vector.
    pub fn insert(&mut self, token: impl Into<String>, vector: &[f64]) -> Result<()> {
        if vector.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                actual: vector.len(),
            });
        }
        let token = token.into();
        match self.index.get(&token) {
            Some(&row) => self.data[row * self.dim..(row + 1) * self.dim].copy_from_slice(vector),
            None => {
                self.index.insert(token, self.index.len());
                self.data.extend_from_slice(vector);
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    pub fn get(&self, token: &str) -> Option<&[f64]> {
        self.index
            .get(token)
            .map(|&row| &self.data[row * self.dim..(row + 1) * self.dim])
    }

    /// Write in the same text format `load_word_vectors` reads, in insertion order.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut rows: Vec<(&String, usize)> = self.index.iter().map(|(t, &r)| (t, r)).collect();
        rows.sort_by_key(|&(_, r)| r);
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(file);
        for (token, row) in rows {
            let mut line = token.clone();
            for v in &self.data[row * self.dim..(row + 1) * self.dim] {
                line.push(' ');
                line.push_str(&v.to_string());
            }
            line.push('\n');
            out.write_all(line.as_bytes()).map_err(|e| Error::io(path, e))?;
        }
        out.flush().map_err(|e| Error::io(path, e))
    }
}

/// Read `token v1 v2 ... vdim` lines. The dimension comes from the first line.
pub fn load_word_vectors(path: &Path) -> Result<WordVectors> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut wv: Option<WordVectors> = None;
    let mut values = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let mut fields = line.split_whitespace();
        let Some(token) = fields.next() else { continue };
        values.clear();
        for f in fields {
            let v: f64 = f
                .parse()
                .map_err(|_| Error::parse(path, idx + 1, format!("unparsable number {f:?}")))?;
            values.push(v);
        }
        let table = wv.get_or_insert_with(|| WordVectors::new(values.len()));
        if values.is_empty() || values.len() != table.dim {
            return Err(Error::parse(
                path,
                idx + 1,
                format!("expected {} values, found {}", table.dim, values.len()),
            ));
        }
        table.insert(token, &values)?;
    }
    match wv {
        Some(wv) if !wv.is_empty() => Ok(wv),
        _ => Err(Error::InvalidInput(format!("{}: no vectors", path.display()))),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SentenceEmbedding {
    pub vector: Vec<f64>,
    pub known_token_count: usize,
}

/// Mean of the vectors of known tokens; unknown tokens are skipped.
/// With no known token the result is the zero vector.
pub fn embed_sentence<S: AsRef<str>>(tokens: &[S], wv: &WordVectors) -> SentenceEmbedding {
    let mut vector = vec![0.0; wv.dim];
    let mut known = 0usize;
    for tok in tokens {
        if let Some(v) = wv.get(tok.as_ref()) {
            known += 1;
            for (acc, x) in vector.iter_mut().zip(v) {
                *acc += x;
            }
        }
    }
    if known > 0 {
        let n = known as f64;
        vector.iter_mut().for_each(|x| *x /= n);
    }
    SentenceEmbedding {
        vector,
        known_token_count: known,
    }
}

pub fn embed_dataset(dataset: &Dataset, wv: &WordVectors) -> Vec<SentenceEmbedding> {
    dataset
        .examples
        .iter()
        .map(|ex| embed_sentence(&ex.tokens, wv))
        .collect()
}

/// Read an `N dim` header followed by N rows of `dim` numbers.
pub fn load_precomputed(path: &Path) -> Result<Vec<SentenceEmbedding>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(file).lines().enumerate();
    let (n, dim) = loop {
        let Some((idx, line)) = lines.next() else {
            return Err(Error::InvalidInput(format!("{}: missing header", path.display())));
        };
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split_whitespace().collect();
        let parsed: Option<(usize, usize)> = match parts.as_slice() {
            [n, d] => n.parse().ok().zip(d.parse().ok()),
            _ => None,
        };
        match parsed {
            Some((n, d)) if d > 0 => break (n, d),
            _ => return Err(Error::parse(path, idx + 1, "header must be \"N dim\"")),
        }
    };

    let mut rows = Vec::with_capacity(n);
    for (idx, line) in lines {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let vector = line
            .split_whitespace()
            .map(|f| {
                f.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| Error::parse(path, idx + 1, format!("unparsable number {f:?}")))
            })
            .collect::<Result<Vec<f64>>>()?;
        if vector.len() != dim {
            return Err(Error::parse(
                path,
                idx + 1,
                format!("expected {dim} values, found {}", vector.len()),
            ));
        }
        rows.push(SentenceEmbedding {
            vector,
            known_token_count: 0,
        });
    }
    if rows.len() != n {
        return Err(Error::InvalidInput(format!(
            "{}: header declares {n} rows, found {}",
            path.display(),
            rows.len()
        )));
    }
    Ok(rows)
}

pub fn save_precomputed(path: &Path, embeddings: &[SentenceEmbedding]) -> Result<()> {
    let dim = embeddings.first().map_or(0, |e| e.vector.len());
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let mut text = format!("{} {}\n", embeddings.len(), dim);
    for e in embeddings {
        let row: Vec<String> = e.vector.iter().map(|v| v.to_string()).collect();
        text.push_str(&row.join(" "));
        text.push('\n');
    }
    out.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))?;
    out.flush().map_err(|e| Error::io(path, e))
}

/// Stack embeddings into an `n × dim` matrix.
pub fn to_matrix(embeddings: &[SentenceEmbedding], dim: usize) -> Result<Array2<f64>> {
    let mut m = Array2::zeros((embeddings.len(), dim));
    for (mut row, e) in m.rows_mut().into_iter().zip(embeddings) {
        if e.vector.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                actual: e.vector.len(),
            });
        }
        row.iter_mut().zip(&e.vector).for_each(|(r, v)| *r = *v);
    }
    Ok(m)
}
