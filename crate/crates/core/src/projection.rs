//! Token-space projection: map each embedding row to its nearest
//! embedding-table row (the inverse-lookup approximation).

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelGateway;
use crate::prompt::{HardPrompt, SoftPrompt};

/// Distance used for the nearest-row search.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProjectionMetric {
    Euclidean,
    Cosine,
}

/// Result of projecting a soft prompt back into token space.
#[derive(Debug, Clone)]
pub struct Projection {
    pub tokens: HardPrompt,
    /// Rows where cosine was undefined (zero norm) and euclidean was used.
    pub fallback_rows: Vec<usize>,
}

/// Projects each row of a soft prompt onto the nearest embedding-table row.
/// Ties resolve to the lowest token id. Under the cosine metric a zero-norm
/// row falls back to euclidean and is flagged.
pub fn project_tokens(
    soft: &SoftPrompt,
    model: &dyn ModelGateway,
    metric: ProjectionMetric,
) -> Result<Projection> {
    project_rows(&soft.to_f64().view(), model, metric)
}

/// Row-level variant of [`project_tokens`] for f64 working matrices.
pub fn project_rows(
    rows: &ArrayView2<'_, f64>,
    model: &dyn ModelGateway,
    metric: ProjectionMetric,
) -> Result<Projection> {
    let d = model.embed_dim();
    if rows.ncols() != d {
        return Err(Error::NumericError(format!(
            "projection dim mismatch: rows have {}, model has {d}",
            rows.ncols()
        )));
    }
    let table = model.embedding_table();
    let mut tokens = Vec::with_capacity(rows.nrows());
    let mut fallback_rows = Vec::new();
    for (i, row) in rows.rows().into_iter().enumerate() {
        let row_vec: Vec<f64> = row.to_vec();
        let use_euclidean = match metric {
            ProjectionMetric::Euclidean => true,
            ProjectionMetric::Cosine => {
                let norm: f64 = row_vec.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm == 0.0 {
                    fallback_rows.push(i);
                    true
                } else {
                    false
                }
            }
        };
        let mut best_id = 0u32;
        let mut best_score = f64::INFINITY;
        for (id, trow) in table.rows().into_iter().enumerate() {
            let score = if use_euclidean {
                row_vec
                    .iter()
                    .zip(trow.iter())
                    .map(|(&a, &b)| {
                        let diff = a - f64::from(b);
                        diff * diff
                    })
                    .sum::<f64>()
            } else {
                // Cosine distance: 1 - cos(angle). A zero-norm table row is
                // treated as maximally distant.
                let mut dot = 0.0;
                let mut nt = 0.0;
                for (&a, &b) in row_vec.iter().zip(trow.iter()) {
                    let b = f64::from(b);
                    dot += a * b;
                    nt += b * b;
                }
                if nt == 0.0 {
                    f64::INFINITY
                } else {
                    let nr: f64 = row_vec.iter().map(|v| v * v).sum::<f64>().sqrt();
                    1.0 - dot / (nr * nt.sqrt())
                }
            };
            if score < best_score {
                best_score = score;
                best_id = id as u32;
            }
        }
        tokens.push(best_id);
    }
    Ok(Projection {
        tokens: HardPrompt::new(tokens),
        fallback_rows,
    })
}

/// Euclidean nearest-token ids for a working matrix; convenience used by the
/// fluency terms.
pub fn nearest_tokens_euclidean(
    model: &dyn ModelGateway,
    rows: &ArrayView2<'_, f64>,
) -> Result<Vec<u32>> {
    Ok(project_rows(rows, model, ProjectionMetric::Euclidean)?
        .tokens
        .token_ids)
}
