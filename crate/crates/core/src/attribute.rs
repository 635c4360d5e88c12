//! Instance-level occlusion: how much masking each element of an excerpt
//! moves each NMF concept coefficient, and concept presence thresholds.

use serde::{Deserialize, Serialize};

use crate::decompose::{nnls_project, ConceptDecomposition, Method};
use crate::embed::{EmbedRequest, EmbeddingProvider};
use crate::error::{Error, Result};
use crate::textprep::{extract_excerpts, ExcerptMode, ExcerptSpec};
use crate::{linalg, Matrix};

/// Influence of one element (a token span) on every concept.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElementAttribution {
    pub start: usize,
    pub end: usize,
    pub text: String,
    /// `U_i^k − Ũ_{i−j}^k` per concept.
    pub influence: Vec<f64>,
    /// Concept with the largest influence, lowest index on ties.
    pub winner: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExcerptAttribution {
    pub excerpt_id: String,
    pub tokens: Vec<String>,
    /// Unmasked coefficients `U_i^k`.
    pub coefficients: Vec<f64>,
    pub elements: Vec<ElementAttribution>,
}

impl ExcerptAttribution {
    fn max_abs(&self) -> f64 {
        self.elements.iter().flat_map(|e| e.influence.iter()).fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Raw influences plus two normalizations: by the largest |φ| within each
/// excerpt, and by the largest |φ| of each concept across all excerpts.
/// Normalized values lie in [−1, 1]; an all-zero scope stays zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionMap {
    pub mode: ExcerptMode,
    pub excerpts: Vec<ExcerptAttribution>,
    /// `[excerpt][element][concept]`
    pub per_excerpt: Vec<Vec<Vec<f64>>>,
    /// `[excerpt][element][concept]`
    pub per_concept: Vec<Vec<Vec<f64>>>,
    pub concept_scale: Vec<f64>,
}

impl AttributionMap {
    pub fn new(mode: ExcerptMode, excerpts: Vec<ExcerptAttribution>) -> Self {
        let rank = excerpts.first().map_or(0, |e| e.coefficients.len());
        let mut concept_scale = vec![0.0f64; rank];
        for e in &excerpts {
            for el in &e.elements {
                for (s, v) in concept_scale.iter_mut().zip(&el.influence) {
                    *s = s.max(v.abs());
                }
            }
        }
        let scale = |v: f64, by: f64| if by > 0.0 { v / by } else { 0.0 };
        let per_excerpt = excerpts
            .iter()
            .map(|e| {
                let m = e.max_abs();
                e.elements.iter().map(|el| el.influence.iter().map(|v| scale(*v, m)).collect()).collect()
            })
            .collect();
        let per_concept = excerpts
            .iter()
            .map(|e| {
                e.elements
                    .iter()
                    .map(|el| el.influence.iter().zip(&concept_scale).map(|(v, s)| scale(*v, *s)).collect())
                    .collect()
            })
            .collect();
        Self { mode, excerpts, per_excerpt, per_concept, concept_scale }
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        crate::dataio::write_json(path, self)
    }
}

fn basis_rows(dec: &ConceptDecomposition) -> Result<Vec<Vec<f64>>> {
    if dec.method != Method::Nmf {
        return Err(Error::invalid(format!(
            "occlusion requires an NMF decomposition (non-negative coefficients), got {}",
            dec.method
        )));
    }
    Ok(dec.w.row_iter().map(|r| r.iter().cloned().collect()).collect())
}

fn project_all(row: &[f64], basis: &[Vec<f64>]) -> Result<Vec<f64>> {
    basis.iter().map(|w| nnls_project(row, w)).collect()
}

/// Occludes each element of `tokens` (split by `elements`) and records the
/// drop in every concept coefficient. One provider call covers the
/// unmasked text and all masked variants; a multi-token element is masked
/// as a whole.
pub fn occlusion_attribution(
    excerpt_id: impl Into<String>,
    tokens: &[String],
    dec: &ConceptDecomposition,
    provider: &dyn EmbeddingProvider,
    elements: &ExcerptSpec,
) -> Result<ExcerptAttribution> {
    if tokens.is_empty() {
        return Err(Error::invalid("cannot attribute an empty excerpt"));
    }
    let basis = basis_rows(dec)?;
    let spans = extract_excerpts(tokens, elements);
    let mut texts = vec![tokens.to_vec()];
    let mut masked = Vec::new();
    for (j, span) in spans.iter().enumerate() {
        texts.push(tokens.to_vec());
        masked.extend((span.start..span.end).map(|t| (j + 1, t)));
    }
    let embedded = provider.embed(&EmbedRequest::new(texts).with_masked(masked))?;
    if embedded.ncols() != dec.dim() {
        return Err(Error::Shape(format!("provider returned width {}, basis has {}", embedded.ncols(), dec.dim())));
    }
    let rows: &Matrix = embedded.data();
    let row = |i: usize| -> Vec<f64> { rows.row(i).iter().cloned().collect() };
    let coefficients = project_all(&row(0), &basis)?;
    let elements = spans
        .iter()
        .enumerate()
        .map(|(j, span)| {
            let occluded = project_all(&row(j + 1), &basis)?;
            let influence: Vec<f64> = coefficients.iter().zip(&occluded).map(|(u, v)| u - v).collect();
            Ok(ElementAttribution {
                start: span.start,
                end: span.end,
                text: span.text(),
                winner: linalg::argmax(&influence),
                influence,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ExcerptAttribution { excerpt_id: excerpt_id.into(), tokens: tokens.to_vec(), coefficients, elements })
}

/// Attributes several excerpts and builds the normalized map.
pub fn attribute_all(
    excerpts: &[(String, Vec<String>)],
    dec: &ConceptDecomposition,
    provider: &dyn EmbeddingProvider,
    elements: &ExcerptSpec,
) -> Result<AttributionMap> {
    let done = excerpts
        .iter()
        .map(|(id, tokens)| occlusion_attribution(id.clone(), tokens, dec, provider, elements))
        .collect::<Result<Vec<_>>>()?;
    Ok(AttributionMap::new(elements.mode, done))
}

/// Nearest-rank quantile: the `(⌊q·n⌋ + 1)`-th smallest value, so exactly
/// `⌈(1−q)·n⌉` distinct values reach it.
pub fn nearest_rank_quantile(values: &[f64], q: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::invalid("quantile of an empty column"));
    }
    if !(q > 0.0 && q < 1.0) {
        return Err(Error::invalid(format!("quantile must lie in (0, 1), got {q}")));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let rank = ((q * sorted.len() as f64 + 1e-9).floor() as usize).min(sorted.len() - 1);
    Ok(sorted[rank])
}

/// Flags rows whose coefficient for concept `k` reaches the q-quantile.
pub fn concept_presence(u: &Matrix, q: f64, k: usize) -> Result<Vec<bool>> {
    if k >= u.ncols() {
        return Err(Error::invalid(format!("concept {k} outside 0..{}", u.ncols())));
    }
    let column: Vec<f64> = u.column(k).iter().cloned().collect();
    let threshold = nearest_rank_quantile(&column, q)?;
    Ok(column.iter().map(|v| *v >= threshold).collect())
}
