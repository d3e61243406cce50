//! Embedding sets and their on-disk formats.
//!
//! Text format: a header line `d n`, then `n * d` whitespace-separated values
//! in row-major order (conventionally one row per line). Lines starting with
//! `#` are ignored.
//!
//! Binary format: `d` and `n` as little-endian `u64`, then `n * d`
//! little-endian `f64` values, row-major. Files ending in `.bin` are binary.

use std::path::Path;

use nalgebra::DMatrix;

use super::MetricError;

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    rows: usize,
    dim: usize,
    data: Vec<f64>,
}

impl EmbeddingSet {
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, MetricError> {
        let dim = rows.first().map_or(0, Vec::len);
        if let Some((i, r)) = rows.iter().enumerate().find(|(_, r)| r.len() != dim) {
            return Err(MetricError::Validation(format!(
                "row {i} has {} values, expected {dim}",
                r.len()
            )));
        }
        Self::from_flat(rows.len(), dim, rows.concat())
    }

    pub fn from_flat(rows: usize, dim: usize, data: Vec<f64>) -> Result<Self, MetricError> {
        if dim == 0 {
            return Err(MetricError::Validation(
                "embedding dimension is zero".into(),
            ));
        }
        if data.len() != rows * dim {
            return Err(MetricError::Validation(format!(
                "expected {} values for {rows} rows of dimension {dim}, got {}",
                rows * dim,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(MetricError::Validation("non-finite embedding value".into()));
        }
        Ok(EmbeddingSet { rows, dim, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.dim)
    }

    pub fn select(&self, indices: &[usize]) -> EmbeddingSet {
        let data = indices
            .iter()
            .flat_map(|&i| self.row(i).iter().copied())
            .collect();
        EmbeddingSet {
            rows: indices.len(),
            dim: self.dim,
            data,
        }
    }

    pub(crate) fn to_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.rows, self.dim, &self.data)
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("{} {}\n", self.dim, self.rows);
        for r in self.iter_rows() {
            let line: Vec<String> = r.iter().map(|v| format!("{v:?}")).collect();
            out.push_str(&line.join(" "));
            out.push('\n');
        }
        out
    }

    pub fn parse_text(text: &str) -> Result<Self, MetricError> {
        let mut tokens = text
            .lines()
            .filter(|l| !l.trim_start().starts_with('#'))
            .flat_map(str::split_whitespace);
        let mut header = |name: &str| -> Result<usize, MetricError> {
            tokens
                .next()
                .ok_or_else(|| MetricError::Validation(format!("missing {name} in header")))?
                .parse()
                .map_err(|_| MetricError::Validation(format!("invalid {name} in header")))
        };
        let dim = header("dimension")?;
        let rows = header("row count")?;
        let data = tokens
            .map(|t| {
                t.parse::<f64>()
                    .map_err(|_| MetricError::Validation(format!("invalid value {t:?}")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        Self::from_flat(rows, dim, data)
    }

    pub fn to_binary(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 8 * self.data.len());
        out.extend_from_slice(&(self.dim as u64).to_le_bytes());
        out.extend_from_slice(&(self.rows as u64).to_le_bytes());
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn parse_binary(bytes: &[u8]) -> Result<Self, MetricError> {
        if bytes.len() < 16 {
            return Err(MetricError::Validation("binary header truncated".into()));
        }
        let word = |i: usize| u64::from_le_bytes(bytes[i..i + 8].try_into().expect("8 bytes"));
        let (dim, rows) = (word(0) as usize, word(8) as usize);
        let body = &bytes[16..];
        if !body.len().is_multiple_of(8) {
            return Err(MetricError::Validation(
                "binary body is not a whole number of f64".into(),
            ));
        }
        let data = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Self::from_flat(rows, dim, data)
    }

    pub fn read(path: &Path) -> Result<Self, MetricError> {
        let err = |message: String| MetricError::Input {
            path: path.display().to_string(),
            message,
        };
        let is_binary = path.extension().is_some_and(|e| e == "bin");
        if is_binary {
            let bytes = std::fs::read(path).map_err(|e| err(e.to_string()))?;
            Self::parse_binary(&bytes).map_err(|e| err(e.to_string()))
        } else {
            let text = std::fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
            Self::parse_text(&text).map_err(|e| err(e.to_string()))
        }
    }

    pub fn write(&self, path: &Path) -> std::io::Result<()> {
        if path.extension().is_some_and(|e| e == "bin") {
            std::fs::write(path, self.to_binary())
        } else {
            std::fs::write(path, self.to_text())
        }
    }
}
