//! Reading a learned embedding: nearest labels and heatmaps.
//!
//! The similarity of label `i` to label `j` is `σ(E_i)_j`, entry `j` of the
//! softmax of embedding row `i`. Compressed embeddings are reconstructed
//! first.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::embedding::LabelEmbedding;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Ranked neighbours of every label, most similar first.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityTable {
    pub rows: Vec<Vec<(usize, f64)>>,
}

impl SimilarityTable {
    /// `k` is clamped to `m − 1`; the query label is never its own neighbour.
    /// Equal scores are ordered by label index.
    pub fn from_embedding<T: Scalar>(emb: &LabelEmbedding<T>, k: usize) -> Self {
        let sim = emb.similarity();
        let m = emb.labels();
        let k = k.min(m.saturating_sub(1));
        let rows = (0..m)
            .map(|i| {
                let mut others: Vec<(usize, f64)> =
                    (0..m).filter(|&j| j != i).map(|j| (j, sim.row(i)[j].as_f64())).collect();
                others.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
                others.truncate(k);
                others
            })
            .collect();
        SimilarityTable { rows }
    }

    /// One line per label: `label: j1 (s1), j2 (s2), ...`.
    pub fn render(&self) -> String {
        let mut s = String::new();
        for (i, row) in self.rows.iter().enumerate() {
            let items: Vec<String> = row.iter().map(|(j, v)| format!("{j} ({v:.4})")).collect();
            let _ = writeln!(s, "{i}: {}", items.join(", "));
        }
        s
    }
}

/// The m×m matrix `σ(E_i)_j` as CSV, one row per label, no header.
pub fn similarity_csv<T: Scalar>(sim: &Tensor<T>) -> String {
    let mut s = String::new();
    for i in 0..sim.rows() {
        let row: Vec<String> = sim.row(i).iter().map(|v| format!("{:e}", v.as_f64())).collect();
        let _ = writeln!(s, "{}", row.join(","));
    }
    s
}

pub fn parse_matrix_csv(text: &str) -> Result<Vec<Vec<f64>>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, line)| {
            line.split(',')
                .map(|v| v.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::Format(format!("CSV row {}: {e}", i + 1)))
        })
        .collect()
}

/// Binary greyscale PGM; pixel `(i, j)` is `round(255 · σ(E_i)_j / max_j σ(E_i)_j)`.
pub fn heatmap_pgm<T: Scalar>(sim: &Tensor<T>) -> Vec<u8> {
    let (h, w) = (sim.rows(), sim.cols());
    let mut out = format!("P5 {w} {h} 255\n").into_bytes();
    for i in 0..h {
        let row = sim.row(i);
        let max = row.iter().map(|v| v.as_f64()).fold(0.0, f64::max);
        for v in row {
            let px = if max > 0.0 { (255.0 * v.as_f64() / max).round() } else { 0.0 };
            out.push(px.clamp(0.0, 255.0) as u8);
        }
    }
    out
}

/// Writes the similarity CSV and PGM heatmap of `emb`.
pub fn write_heatmap<T: Scalar>(emb: &LabelEmbedding<T>, csv_path: &Path, pgm_path: &Path) -> Result<()> {
    let sim = emb.similarity();
    fs::write(csv_path, similarity_csv(&sim)).map_err(|e| Error::io(csv_path, e))?;
    fs::write(pgm_path, heatmap_pgm(&sim)).map_err(|e| Error::io(pgm_path, e))
}
