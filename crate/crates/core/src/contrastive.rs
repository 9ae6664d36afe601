//! Supervised contrastive learning with a momentum key network and a
//! label-synchronised feature queue.

use std::collections::VecDeque;

use ndarray::{Array2, Axis};

use crate::error::{Error, Result};
use crate::nn::{Graph, Node, ParamStore};

/// Tolerance on the unit norm of queued and contrasted embeddings.
pub const UNIT_TOL: f64 = 1e-6;
const MASKED: f64 = -1e9;

/// `θ_k ← μθ_k + (1−μ)θ_q` for every tensor pair.
pub fn momentum_update(key: &mut [Array2<f64>], query: &[Array2<f64>], mu: f64) -> Result<()> {
    if key.len() != query.len() {
        return Err(Error::internal(format!(
            "key network has {} tensors, query network {}",
            key.len(),
            query.len()
        )));
    }
    for (k, q) in key.iter_mut().zip(query) {
        if k.dim() != q.dim() {
            return Err(Error::internal(format!(
                "key tensor {:?} does not match query tensor {:?}",
                k.dim(),
                q.dim()
            )));
        }
        ndarray::Zip::from(k)
            .and(q)
            .for_each(|kv, &qv| *kv = mu * *kv + (1.0 - mu) * qv);
    }
    Ok(())
}

/// Key copies of a subset of query parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentumPair {
    pub mu: f64,
    /// Query parameter slots mirrored by the key network.
    pub slots: Vec<usize>,
    pub key: Vec<Array2<f64>>,
}

impl MomentumPair {
    /// Key network initialised as an exact copy of the query slots.
    pub fn new(query: &ParamStore, slots: Vec<usize>, mu: f64) -> Self {
        let key = slots.iter().map(|&s| query.get(s).clone()).collect();
        Self { mu, slots, key }
    }

    pub fn reset(&mut self, query: &ParamStore) {
        self.key = self.slots.iter().map(|&s| query.get(s).clone()).collect();
    }

    pub fn update(&mut self, query: &ParamStore) -> Result<()> {
        let q: Vec<Array2<f64>> = self.slots.iter().map(|&s| query.get(s).clone()).collect();
        momentum_update(&mut self.key, &q, self.mu)
    }

    /// A full parameter list with the key tensors substituted into their slots.
    pub fn key_params(&self, query: &ParamStore) -> Vec<Array2<f64>> {
        let mut all: Vec<Array2<f64>> = query.tensors().to_vec();
        for (&s, k) in self.slots.iter().zip(&self.key) {
            all[s] = k.clone();
        }
        all
    }
}

/// FIFO ring of unit-norm key embeddings and their labels.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureQueue {
    pub capacity: usize,
    features: VecDeque<Vec<f64>>,
    labels: VecDeque<usize>,
}

fn check_unit(v: &[f64]) -> Result<()> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if (n - 1.0).abs() > UNIT_TOL {
        return Err(Error::input(format!("embedding norm {n} is not 1")));
    }
    Ok(())
}

impl FeatureQueue {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            features: VecDeque::with_capacity(capacity),
            labels: VecDeque::with_capacity(capacity),
        }
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn clear(&mut self) {
        self.features.clear();
        self.labels.clear();
    }

    pub fn features(&self) -> impl Iterator<Item = &Vec<f64>> {
        self.features.iter()
    }

    pub fn labels(&self) -> impl Iterator<Item = &usize> {
        self.labels.iter()
    }

    /// Appends rows of `features` in order, evicting the oldest beyond capacity.
    pub fn enqueue(&mut self, features: &Array2<f64>, labels: &[usize]) -> Result<()> {
        if features.nrows() != labels.len() {
            return Err(Error::input(format!(
                "{} features but {} labels",
                features.nrows(),
                labels.len()
            )));
        }
        if let Some(d) = self.features.front().map(Vec::len) {
            if features.ncols() != d {
                return Err(Error::input(format!(
                    "queue holds {d}-dimensional features, got {}",
                    features.ncols()
                )));
            }
        }
        for row in features.rows() {
            check_unit(row.as_slice().unwrap_or(&row.to_vec()))?;
        }
        for (row, &l) in features.rows().into_iter().zip(labels) {
            self.features.push_back(row.to_vec());
            self.labels.push_back(l);
            if self.features.len() > self.capacity {
                self.features.pop_front();
                self.labels.pop_front();
            }
        }
        Ok(())
    }

    fn matrix(&self, dim: usize) -> Array2<f64> {
        let mut out = Array2::zeros((self.len(), dim));
        for (mut row, f) in out.axis_iter_mut(Axis(0)).zip(&self.features) {
            row.assign(&ndarray::ArrayView1::from(f.as_slice()));
        }
        out
    }
}

/// Queries and momentum keys of one step.
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveBatch {
    /// Unit-norm query embeddings, one per row.
    pub queries: Array2<f64>,
    pub query_labels: Vec<usize>,
    /// Unit-norm key embeddings, one per row.
    pub keys: Array2<f64>,
    pub key_labels: Vec<usize>,
    /// `own_key[i]` is the key computed from query `i`'s own input; it is
    /// removed from both the positives and the denominator of query `i`.
    pub own_key: Option<Vec<usize>>,
}

impl ContrastiveBatch {
    fn validate(&self, queue: &FeatureQueue, tau: f64) -> Result<()> {
        if !(tau > 0.0) {
            return Err(Error::input(format!("temperature must be positive, got {tau}")));
        }
        if self.queries.nrows() != self.query_labels.len() || self.keys.nrows() != self.key_labels.len()
        {
            return Err(Error::input("embedding and label counts differ"));
        }
        if self.keys.nrows() > 0 && self.keys.ncols() != self.queries.ncols() {
            return Err(Error::input("query and key dimensions differ"));
        }
        if let Some(own) = &self.own_key {
            if own.len() != self.queries.nrows() || own.iter().any(|&k| k >= self.keys.nrows()) {
                return Err(Error::input("own-key indices do not match the batch"));
            }
        }
        if !queue.is_empty() && queue.features[0].len() != self.queries.ncols() {
            return Err(Error::input("queue and query dimensions differ"));
        }
        for m in [&self.queries, &self.keys] {
            for row in m.rows() {
                check_unit(&row.to_vec())?;
            }
        }
        Ok(())
    }

    fn candidates(&self, queue: &FeatureQueue) -> (Array2<f64>, Vec<usize>) {
        let d = self.queries.ncols();
        let q = queue.matrix(d);
        let all = if self.keys.nrows() == 0 {
            q
        } else {
            ndarray::concatenate(Axis(0), &[self.keys.view(), q.view()]).expect("same width")
        };
        let labels = self
            .key_labels
            .iter()
            .chain(queue.labels.iter())
            .copied()
            .collect();
        (all, labels)
    }

    /// Positive candidate indices per query, and a mask of removed candidates.
    fn structure(&self, cand_labels: &[usize]) -> (Vec<Vec<usize>>, Array2<f64>) {
        let nq = self.queries.nrows();
        let mut mask = Array2::zeros((nq, cand_labels.len()));
        let positives = (0..nq)
            .map(|i| {
                let own = self.own_key.as_ref().map(|o| o[i]);
                if let Some(k) = own {
                    mask[[i, k]] = MASKED;
                }
                cand_labels
                    .iter()
                    .enumerate()
                    .filter(|&(j, &l)| l == self.query_labels[i] && Some(j) != own)
                    .map(|(j, _)| j)
                    .collect()
            })
            .collect();
        (positives, mask)
    }

    fn has_candidates(&self, n_cand: usize) -> bool {
        n_cand > usize::from(self.own_key.is_some())
    }
}

/// Records the contrastive loss on `g` with `queries` as the differentiable
/// input; keys and queue are constants.
pub fn scl_graph(
    g: &mut Graph,
    queries: Node,
    batch: &ContrastiveBatch,
    queue: &FeatureQueue,
    tau: f64,
) -> Result<Node> {
    batch.validate(queue, tau)?;
    let (cand, cand_labels) = batch.candidates(queue);
    if !batch.has_candidates(cand.nrows()) {
        return Err(Error::input("contrastive candidate set is empty"));
    }
    let (positives, mask) = batch.structure(&cand_labels);
    let ct = g.constant(cand.reversed_axes());
    let sims = g.matmul(queries, ct)?;
    let logits = g.scale(sims, 1.0 / tau);
    let logits = if batch.own_key.is_some() {
        let m = g.constant(mask);
        g.add(logits, m)?
    } else {
        logits
    };
    g.supcon(logits, positives)
}

/// Supervised contrastive loss averaged over queries with at least one positive.
pub fn scl_loss(batch: &ContrastiveBatch, queue: &FeatureQueue, tau: f64) -> Result<f64> {
    let mut g = Graph::new();
    let q = g.constant(batch.queries.clone());
    let loss = scl_graph(&mut g, q, batch, queue, tau)?;
    Ok(g.scalar(loss))
}

/// Virtual label of view `m` of class `c` among `num_transforms` views.
pub fn virtual_label(class: usize, m: usize, num_transforms: usize) -> usize {
    class * num_transforms + m
}

/// Contrastive loss where positives share both class and transformation.
///
/// `query_views` / `key_views` give `(class, transformation)` per row; queue
/// labels must already be virtual labels.
pub fn scl_loss_expanded(
    queries: &Array2<f64>,
    query_views: &[(usize, usize)],
    keys: &Array2<f64>,
    key_views: &[(usize, usize)],
    own_key: Option<Vec<usize>>,
    num_transforms: usize,
    queue: &FeatureQueue,
    tau: f64,
) -> Result<f64> {
    let to_virtual = |views: &[(usize, usize)]| -> Result<Vec<usize>> {
        views
            .iter()
            .map(|&(c, m)| {
                if m >= num_transforms {
                    Err(Error::input(format!("transform index {m} outside 0..{num_transforms}")))
                } else {
                    Ok(virtual_label(c, m, num_transforms))
                }
            })
            .collect()
    };
    let batch = ContrastiveBatch {
        queries: queries.clone(),
        query_labels: to_virtual(query_views)?,
        keys: keys.clone(),
        key_labels: to_virtual(key_views)?,
        own_key,
    };
    scl_loss(&batch, queue, tau)
}
