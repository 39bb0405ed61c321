//! Whitespace-separated word-vector text files (GloVe layout).

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::DataError;

/// Pretrained word vectors. Unknown tokens map to the all-zero OOV vector.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    dim: usize,
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    values: Vec<f64>,
    oov: Vec<f64>,
}

impl EmbeddingTable {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            tokens: Vec::new(),
            index: HashMap::new(),
            values: Vec::new(),
            oov: vec![0.0; dim],
        }
    }

    /// Adds a vector unless the token is already present; returns whether it was added.
    pub fn insert(&mut self, token: String, vector: &[f64]) -> bool {
        assert_eq!(vector.len(), self.dim, "vector length must equal table dim");
        if self.index.contains_key(&token) {
            return false;
        }
        self.index.insert(token.clone(), self.tokens.len());
        self.tokens.push(token);
        self.values.extend_from_slice(vector);
        true
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Tokens in insertion order.
    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    /// Vector for `token`, or the OOV vector.
    pub fn lookup(&self, token: &str) -> &[f64] {
        match self.index.get(token) {
            Some(&i) => &self.values[i * self.dim..(i + 1) * self.dim],
            None => &self.oov,
        }
    }

    pub fn oov_vector(&self) -> &[f64] {
        &self.oov
    }

    /// Vector of the `i`-th token in insertion order.
    pub fn vector(&self, i: usize) -> &[f64] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }
}

pub fn load_embeddings(path: impl AsRef<Path>, dim: usize) -> Result<EmbeddingTable, DataError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_embeddings(&text, dim, path)
}

pub fn parse_embeddings(text: &str, dim: usize, origin: impl AsRef<Path>) -> Result<EmbeddingTable, DataError> {
    if dim == 0 {
        return Err(DataError::Config {
            field: "dim",
            reason: "must be positive".into(),
        });
    }
    let mut table = EmbeddingTable::new(dim);
    let mut vector = Vec::with_capacity(dim);
    for (lineno, line) in text.lines().enumerate() {
        let mut fields = line.split_whitespace();
        let Some(token) = fields.next() else { continue };
        vector.clear();
        for field in fields {
            let v: f64 = field.parse().map_err(|_| DataError::EmbeddingParse {
                path: origin.as_ref().to_path_buf(),
                line: lineno + 1,
                reason: format!("`{field}` is not a number"),
            })?;
            vector.push(v);
        }
        if vector.len() != dim {
            return Err(DataError::EmbeddingParse {
                path: origin.as_ref().to_path_buf(),
                line: lineno + 1,
                reason: format!("expected {dim} values after the token, found {}", vector.len()),
            });
        }
        table.insert(token.to_string(), &vector);
    }
    Ok(table)
}

/// Writes one `token v1 .. vd` line per entry using shortest round-trip decimals.
pub fn write_embeddings(table: &EmbeddingTable, path: impl AsRef<Path>) -> Result<(), DataError> {
    let mut out = String::new();
    for (i, token) in table.tokens().iter().enumerate() {
        out.push_str(token);
        for v in table.vector(i) {
            let _ = write!(out, " {v}");
        }
        out.push('\n');
    }
    let path = path.as_ref();
    fs::write(path, out).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })
}
