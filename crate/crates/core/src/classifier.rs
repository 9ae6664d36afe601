//! Prototype classifier: similarity kernels, prototype tables, the cosine
//! cross-entropy loss and the joint objective.

use serde::{Deserialize, Serialize};

use ndarray::Array2;

use crate::datamodel::SimilarityKind;
use crate::error::{Error, Result};
use crate::expansion::ExpandedPrototypeSet;
use crate::nn::{Graph, Node};

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn dot(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| a * b).sum()
}

fn same_len(x: &[f64], y: &[f64]) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::input(format!(
            "vectors of length {} and {}",
            x.len(),
            y.len()
        )));
    }
    Ok(())
}

/// `xᵀy / (‖x‖‖y‖)`.
pub fn cosine_sim(x: &[f64], y: &[f64]) -> Result<f64> {
    same_len(x, y)?;
    let (nx, ny) = (norm(x), norm(y));
    if nx == 0.0 || ny == 0.0 {
        return Err(Error::input("cosine similarity of a zero vector"));
    }
    Ok((dot(x, y) / (nx * ny)).clamp(-1.0, 1.0))
}

/// Shrinkage-regularised diagonal covariance of an embedding population.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagonalStats {
    pub variance: Vec<f64>,
}

/// Default shrinkage toward the mean variance.
pub const MAH_SHRINKAGE: f64 = 0.1;
const MIN_VARIANCE: f64 = 1e-8;

impl DiagonalStats {
    pub fn identity(dim: usize) -> Self {
        Self {
            variance: vec![1.0; dim],
        }
    }

    /// `σ²_d ← (1−λ)σ²_d + λ·mean(σ²)`, floored at a small positive value.
    pub fn fit<'a, I>(embeddings: I, shrinkage: f64) -> Result<Self>
    where
        I: IntoIterator<Item = &'a [f64]>,
    {
        let rows: Vec<&[f64]> = embeddings.into_iter().collect();
        let Some(first) = rows.first() else {
            return Err(Error::input("cannot fit covariance of an empty population"));
        };
        let d = first.len();
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::input("embeddings differ in dimension"));
        }
        let n = rows.len() as f64;
        let mut mean = vec![0.0; d];
        for r in &rows {
            for (m, v) in mean.iter_mut().zip(*r) {
                *m += v / n;
            }
        }
        let mut var = vec![0.0; d];
        for r in &rows {
            for ((s, v), m) in var.iter_mut().zip(*r).zip(&mean) {
                *s += (v - m) * (v - m) / n;
            }
        }
        let avg = var.iter().sum::<f64>() / d.max(1) as f64;
        Ok(Self {
            variance: var
                .iter()
                .map(|v| ((1.0 - shrinkage) * v + shrinkage * avg).max(MIN_VARIANCE))
                .collect(),
        })
    }

    pub fn inverse(&self) -> Vec<f64> {
        self.variance.iter().map(|v| 1.0 / v).collect()
    }
}

/// Similarity where larger means closer: DOT → xᵀy, EUC → −‖x−y‖,
/// MAH → −√((x−y)ᵀΣ⁻¹(x−y)), COS → cosine.
pub fn similarity(
    x: &[f64],
    y: &[f64],
    kind: SimilarityKind,
    stats: Option<&DiagonalStats>,
) -> Result<f64> {
    same_len(x, y)?;
    match kind {
        SimilarityKind::Cos => cosine_sim(x, y),
        SimilarityKind::Dot => Ok(dot(x, y)),
        SimilarityKind::Euc => Ok(-x
            .iter()
            .zip(y)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()),
        SimilarityKind::Mah => {
            let stats = stats.ok_or_else(|| {
                Error::State("mahalanobis similarity needs fitted covariance statistics".into())
            })?;
            if stats.variance.len() != x.len() {
                return Err(Error::input("covariance statistics dimension mismatch"));
            }
            Ok(-x
                .iter()
                .zip(y)
                .zip(&stats.variance)
                .map(|((a, b), v)| (a - b) * (a - b) / v)
                .sum::<f64>()
                .sqrt())
        }
    }
}

/// The DOT / EUC / MAH ablation kernels (cosine accepted for uniformity).
pub fn baseline_similarity(
    x: &[f64],
    y: &[f64],
    kind: SimilarityKind,
    stats: Option<&DiagonalStats>,
) -> Result<f64> {
    similarity(x, y, kind, stats)
}

/// `ce + α·scl`.
pub fn joint_loss(ce: f64, scl: f64, alpha: f64) -> f64 {
    ce + alpha * scl
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PrototypeSource {
    AllSamples,
    Exemplars,
}

/// One prototype (mean embedding) per seen class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrototypeTable {
    pub classes: Vec<usize>,
    pub prototypes: Vec<Vec<f64>>,
    pub source: PrototypeSource,
    pub eta: f64,
}

impl PrototypeTable {
    pub fn new(
        classes: Vec<usize>,
        prototypes: Vec<Vec<f64>>,
        source: PrototypeSource,
        eta: f64,
    ) -> Result<Self> {
        if classes.len() != prototypes.len() {
            return Err(Error::input("one prototype per class required"));
        }
        if !(eta > 0.0) {
            return Err(Error::input(format!("sharpness must be positive, got {eta}")));
        }
        Ok(Self {
            classes,
            prototypes,
            source,
            eta,
        })
    }

    /// Mean embedding of each class's vectors.
    pub fn from_embeddings(
        by_class: &std::collections::BTreeMap<usize, Vec<Vec<f64>>>,
        source: PrototypeSource,
        eta: f64,
    ) -> Result<Self> {
        let mut classes = Vec::new();
        let mut protos = Vec::new();
        for (&c, vecs) in by_class {
            if vecs.is_empty() {
                return Err(Error::input(format!("class {c} has no embeddings")));
            }
            let d = vecs[0].len();
            let mut mean = vec![0.0; d];
            for v in vecs {
                for (m, x) in mean.iter_mut().zip(v) {
                    *m += x;
                }
            }
            mean.iter_mut().for_each(|m| *m /= vecs.len() as f64);
            classes.push(c);
            protos.push(mean);
        }
        Self::new(classes, protos, source, eta)
    }

    /// View `m` of an expanded set.
    pub fn from_expanded(
        set: &ExpandedPrototypeSet,
        m: usize,
        source: PrototypeSource,
        eta: f64,
    ) -> Result<Self> {
        let classes = set.classes();
        let prototypes = classes
            .iter()
            .map(|&c| {
                set.mean(c, m)
                    .map(<[f64]>::to_vec)
                    .ok_or_else(|| Error::internal(format!("missing prototype ({c}, {m})")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(classes, prototypes, source, eta)
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn index_of(&self, class: usize) -> Option<usize> {
        self.classes.iter().position(|&c| c == class)
    }

    /// `classes × d` matrix of prototypes, L2-normalised if `unit`.
    pub fn matrix(&self, unit: bool) -> Array2<f64> {
        let d = self.prototypes.first().map_or(0, Vec::len);
        Array2::from_shape_fn((self.len(), d), |(c, k)| {
            let p = &self.prototypes[c];
            if unit {
                p[k] / norm(p).max(1e-12)
            } else {
                p[k]
            }
        })
    }

    /// Similarity of `x` to every prototype.
    pub fn scores(
        &self,
        x: &[f64],
        kind: SimilarityKind,
        stats: Option<&DiagonalStats>,
    ) -> Result<Vec<f64>> {
        self.prototypes
            .iter()
            .map(|p| similarity(x, p, kind, stats))
            .collect()
    }

    /// Class with the highest similarity; ties to the lower class.
    pub fn predict(
        &self,
        x: &[f64],
        kind: SimilarityKind,
        stats: Option<&DiagonalStats>,
    ) -> Result<usize> {
        if self.is_empty() {
            return Err(Error::input("empty prototype table"));
        }
        let s = self.scores(x, kind, stats)?;
        Ok(self.classes[crate::expansion::argmax(&s)])
    }
}

pub(crate) fn softmax(v: &[f64]) -> Vec<f64> {
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

/// `softmax_j(η · cos(x, p_j))` over the table's classes.
pub fn prototype_probabilities(x: &[f64], table: &PrototypeTable) -> Result<Vec<f64>> {
    if table.is_empty() {
        return Err(Error::input("empty prototype table"));
    }
    let logits = table
        .prototypes
        .iter()
        .map(|p| cosine_sim(x, p).map(|s| table.eta * s))
        .collect::<Result<Vec<_>>>()?;
    Ok(softmax(&logits))
}

/// Mean of `−log softmax(η · cos)` at each sample's label.
pub fn cosine_ce_loss(embeddings: &[Vec<f64>], labels: &[usize], table: &PrototypeTable) -> Result<f64> {
    if embeddings.len() != labels.len() || embeddings.is_empty() {
        return Err(Error::input("embeddings and labels differ in count or are empty"));
    }
    let mut total = 0.0;
    for (x, &y) in embeddings.iter().zip(labels) {
        let idx = table
            .index_of(y)
            .ok_or_else(|| Error::input(format!("label {y} is not a seen class")))?;
        let p = prototype_probabilities(x, table)?;
        total -= p[idx].max(f64::MIN_POSITIVE).ln();
    }
    Ok(total / labels.len() as f64)
}

/// Differentiable class logits of a batch of embeddings against `table`.
///
/// Cosine logits are scaled by η; the other kernels are used as raw scores.
pub fn similarity_logits(
    g: &mut Graph,
    embeddings: Node,
    table: &PrototypeTable,
    kind: SimilarityKind,
    stats: Option<&DiagonalStats>,
) -> Result<Node> {
    if table.is_empty() {
        return Err(Error::input("empty prototype table"));
    }
    match kind {
        SimilarityKind::Cos => {
            let z = g.normalize_rows(embeddings);
            let pt = g.constant(table.matrix(true).reversed_axes());
            let s = g.matmul(z, pt)?;
            Ok(g.scale(s, table.eta))
        }
        SimilarityKind::Dot => {
            let pt = g.constant(table.matrix(false).reversed_axes());
            g.matmul(embeddings, pt)
        }
        SimilarityKind::Euc => g.neg_distance(embeddings, table.matrix(false), None),
        SimilarityKind::Mah => {
            let stats = stats.ok_or_else(|| {
                Error::State("mahalanobis similarity needs fitted covariance statistics".into())
            })?;
            g.neg_distance(embeddings, table.matrix(false), Some(stats.inverse()))
        }
    }
}
