use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

pub const DEFAULT_EMBEDDING_DIM: usize = 100;
/// Standard deviation for rows not found in the embedding file.
pub const OOV_STD: f64 = 0.1;

/// Dense token ↔ index map, indices assigned in first-occurrence order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Vocab {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn from_tokens<'a>(tokens: impl IntoIterator<Item = &'a str>) -> Self {
        let mut v = Vocab::default();
        for t in tokens {
            v.insert(t);
        }
        v
    }

    pub fn insert(&mut self, token: &str) -> usize {
        if let Some(&i) = self.index.get(token) {
            return i;
        }
        let i = self.tokens.len();
        self.tokens.push(token.to_string());
        self.index.insert(token.to_string(), i);
        i
    }

    pub fn index(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, index: usize) -> Option<&str> {
        self.tokens.get(index).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Rebuilds the lookup map after deserialization.
    pub fn reindex(&mut self) {
        self.index = self
            .tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
    }

    /// SHA-256 over the newline-joined token list, hex encoded.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.tokens {
            h.update(t.as_bytes());
            h.update(b"\n");
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingTable {
    pub dim: usize,
    pub matrix: Matrix,
}

impl EmbeddingTable {
    pub fn row(&self, index: usize) -> &[f64] {
        self.matrix.row(index)
    }

    pub fn random(vocab_len: usize, dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            dim,
            matrix: Matrix::gaussian(vocab_len, dim, OOV_STD, &mut rng),
        }
    }
}

/// Loads `token v1 … v_dim` rows for vocabulary tokens; everything else is
/// seeded Gaussian(0, 0.1). A leading word2vec-style `count dim` header is
/// skipped.
pub fn load_embeddings(
    path: Option<&Path>,
    vocab: &Vocab,
    dim: usize,
    seed: u64,
) -> Result<EmbeddingTable> {
    if dim == 0 {
        return Err(Error::InvalidArgument("embedding dim must be >= 1".into()));
    }
    // Drawn up front so a row's values do not depend on file contents.
    let mut table = EmbeddingTable::random(vocab.len(), dim, seed);
    let Some(path) = path else {
        return Ok(table);
    };
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        let mut fields = line.split_whitespace();
        let Some(token) = fields.next() else {
            continue;
        };
        let values: Vec<&str> = fields.collect();
        if line_no == 1
            && values.len() == 1
            && token.parse::<usize>().is_ok()
            && values[0].parse::<usize>().is_ok()
        {
            continue;
        }
        if values.len() != dim {
            return Err(Error::DimensionMismatch {
                line: line_no,
                expected: dim,
                got: values.len(),
            });
        }
        let Some(row) = vocab.index(token) else {
            continue;
        };
        let dst = table.matrix.row_mut(row);
        for (d, v) in dst.iter_mut().zip(&values) {
            *d = v.parse::<f64>().map_err(|e| Error::Parse {
                line: line_no,
                message: format!("bad embedding value `{v}`: {e}"),
            })?;
            if !d.is_finite() {
                return Err(Error::Parse {
                    line: line_no,
                    message: "non-finite embedding value".into(),
                });
            }
        }
    }
    Ok(table)
}
