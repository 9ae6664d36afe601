//! Fixed-budget exemplar memory and the selection strategies that fill it.
//!
//! Every selector returns a [`Selection`]: per class, the chosen ids in rank
//! order together with a score where higher means "keep longer". When a later
//! session shrinks the per-class quota, [`MemoryBank::update`] keeps the
//! highest-scoring ids of each old class.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use log::warn;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datamodel::{SampleId, SelectorKind};
use crate::error::{Error, Result};
use crate::trajectory::entropy_unchecked;

/// Per-class exemplar counts for `num_seen_classes` classes sharing `budget`.
///
/// Each class gets `budget / n`; the remainder goes one each to the lowest
/// class indices.
pub fn quota(budget: usize, num_seen_classes: usize) -> Result<Vec<usize>> {
    if num_seen_classes == 0 {
        return Err(Error::input("quota needs at least one seen class"));
    }
    let base = budget / num_seen_classes;
    let extra = budget % num_seen_classes;
    Ok((0..num_seen_classes)
        .map(|c| base + usize::from(c < extra))
        .collect())
}

/// Ranked exemplars chosen by one selector, per class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub selector: SelectorKind,
    pub per_class: BTreeMap<usize, Vec<(SampleId, f64)>>,
}

impl Selection {
    pub fn ids(&self, class: usize) -> Vec<SampleId> {
        self.per_class
            .get(&class)
            .map(|v| v.iter().map(|(id, _)| *id).collect())
            .unwrap_or_default()
    }

    pub fn len(&self) -> usize {
        self.per_class.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn group_by_class<'a, I>(ids: I, class_of: &BTreeMap<SampleId, usize>) -> Result<BTreeMap<usize, Vec<SampleId>>>
where
    I: IntoIterator<Item = &'a SampleId>,
{
    let mut groups: BTreeMap<usize, Vec<SampleId>> = BTreeMap::new();
    for id in ids {
        let c = class_of
            .get(id)
            .ok_or_else(|| Error::input(format!("sample {id} has no class")))?;
        groups.entry(*c).or_default().push(*id);
    }
    for v in groups.values_mut() {
        v.sort_unstable();
        v.dedup();
    }
    Ok(groups)
}

fn clamp_quota(class: usize, want: usize, available: usize) -> usize {
    if want > available {
        warn!("class {class}: quota {want} exceeds the {available} available samples; taking all");
    }
    want.min(available)
}

/// Highest score first, ties to the lower id.
fn rank_desc(scored: &mut [(SampleId, f64)]) {
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
}

fn select_by_score(
    selector: SelectorKind,
    score_of: impl Fn(SampleId) -> f64,
    groups: BTreeMap<usize, Vec<SampleId>>,
    quotas: &BTreeMap<usize, usize>,
) -> Selection {
    let mut per_class = BTreeMap::new();
    for (&class, &want) in quotas {
        let members = groups.get(&class).map(Vec::as_slice).unwrap_or(&[]);
        let n = clamp_quota(class, want, members.len());
        let mut scored: Vec<(SampleId, f64)> = members.iter().map(|&id| (id, score_of(id))).collect();
        rank_desc(&mut scored);
        scored.truncate(n);
        per_class.insert(class, scored);
    }
    Selection {
        selector,
        per_class,
    }
}

/// Highest average cumulative entropy per class.
pub fn select_uta(
    scores: &BTreeMap<SampleId, f64>,
    class_of: &BTreeMap<SampleId, usize>,
    quotas: &BTreeMap<usize, usize>,
) -> Result<Selection> {
    let groups = group_by_class(scores.keys(), class_of)?;
    Ok(select_by_score(SelectorKind::Uta, |id| scores[&id], groups, quotas))
}

/// Uniform sampling without replacement; the score is the negated draw order.
pub fn select_random(
    ids: &[SampleId],
    class_of: &BTreeMap<SampleId, usize>,
    quotas: &BTreeMap<usize, usize>,
    seed: u64,
) -> Result<Selection> {
    let groups = group_by_class(ids, class_of)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut per_class = BTreeMap::new();
    for (&class, &want) in quotas {
        let mut members = groups.get(&class).cloned().unwrap_or_default();
        let n = clamp_quota(class, want, members.len());
        members.shuffle(&mut rng);
        per_class.insert(
            class,
            members
                .into_iter()
                .take(n)
                .enumerate()
                .map(|(r, id)| (id, -(r as f64)))
                .collect(),
        );
    }
    Ok(Selection {
        selector: SelectorKind::Random,
        per_class,
    })
}

fn cosine_distance(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 1.0;
    }
    1.0 - dot / (na * nb)
}

const HERDING_TIE: f64 = 1e-12;

/// Herding: greedily add the sample that keeps the running exemplar mean
/// closest, in cosine distance, to the class mean.
pub fn select_nme(
    embeddings: &BTreeMap<SampleId, Vec<f64>>,
    class_of: &BTreeMap<SampleId, usize>,
    quotas: &BTreeMap<usize, usize>,
) -> Result<Selection> {
    let dim = embeddings.values().next().map_or(0, Vec::len);
    if embeddings.values().any(|v| v.len() != dim) {
        return Err(Error::input("embeddings do not share one dimension"));
    }
    let groups = group_by_class(embeddings.keys(), class_of)?;
    let mut per_class = BTreeMap::new();
    for (&class, &want) in quotas {
        let members = groups.get(&class).cloned().unwrap_or_default();
        if members.is_empty() {
            warn!("class {class}: no samples to select from");
            per_class.insert(class, Vec::new());
            continue;
        }
        let n = clamp_quota(class, want, members.len());
        let mut mean = vec![0.0; dim];
        for id in &members {
            for (m, v) in mean.iter_mut().zip(&embeddings[id]) {
                *m += v / members.len() as f64;
            }
        }
        let mut running = vec![0.0; dim];
        let mut taken = BTreeSet::new();
        let mut chosen = Vec::with_capacity(n);
        for k in 0..n {
            let mut best: Option<(SampleId, f64)> = None;
            for id in &members {
                if taken.contains(id) {
                    continue;
                }
                let cand: Vec<f64> = running
                    .iter()
                    .zip(&embeddings[id])
                    .map(|(r, v)| (r + v) / (k + 1) as f64)
                    .collect();
                let d = cosine_distance(&cand, &mean);
                if best.is_none_or(|(_, bd)| d < bd - HERDING_TIE) {
                    best = Some((*id, d));
                }
            }
            let (id, _) = best.expect("candidates remain while k < n");
            taken.insert(id);
            for (r, v) in running.iter_mut().zip(&embeddings[&id]) {
                *r += v;
            }
            chosen.push((id, -(k as f64)));
        }
        per_class.insert(class, chosen);
    }
    Ok(Selection {
        selector: SelectorKind::Nme,
        per_class,
    })
}

/// Top-1 minus top-2 probability.
pub fn margin(p: &[f64]) -> Result<f64> {
    if p.len() < 2 {
        return Err(Error::input("margin needs at least two classes"));
    }
    let (mut a, mut b) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for &v in p {
        if v > a {
            b = a;
            a = v;
        } else if v > b {
            b = v;
        }
    }
    Ok(a - b)
}

/// Smallest margin first.
pub fn select_pool(
    probs: &BTreeMap<SampleId, Vec<f64>>,
    class_of: &BTreeMap<SampleId, usize>,
    quotas: &BTreeMap<usize, usize>,
) -> Result<Selection> {
    let margins: BTreeMap<SampleId, f64> = probs
        .iter()
        .map(|(id, p)| Ok((*id, margin(p)?)))
        .collect::<Result<_>>()?;
    let groups = group_by_class(margins.keys(), class_of)?;
    Ok(select_by_score(
        SelectorKind::Pool,
        |id| -margins[&id],
        groups,
        quotas,
    ))
}

fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = i;
        }
    }
    best
}

/// Entropy of the members' argmax votes.
pub fn vote_entropy(votes: &[usize]) -> f64 {
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for &v in votes {
        *counts.entry(v).or_default() += 1;
    }
    let n = votes.len() as f64;
    let freqs: Vec<f64> = counts.values().map(|&c| c as f64 / n).collect();
    entropy_unchecked(&freqs).max(0.0)
}

/// Highest vote entropy over committee members' argmax predictions.
pub fn select_committee(
    member_probs: &[BTreeMap<SampleId, Vec<f64>>],
    class_of: &BTreeMap<SampleId, usize>,
    quotas: &BTreeMap<usize, usize>,
) -> Result<Selection> {
    if member_probs.len() < 2 {
        return Err(Error::input("a committee needs at least two members"));
    }
    let first = &member_probs[0];
    if member_probs[1..]
        .iter()
        .any(|m| m.len() != first.len() || !m.keys().eq(first.keys()))
    {
        return Err(Error::input("committee members cover different samples"));
    }
    let scores: BTreeMap<SampleId, f64> = first
        .keys()
        .map(|id| {
            let votes: Vec<usize> = member_probs.iter().map(|m| argmax(&m[id])).collect();
            (*id, vote_entropy(&votes))
        })
        .collect();
    let groups = group_by_class(scores.keys(), class_of)?;
    Ok(select_by_score(
        SelectorKind::Committee,
        |id| scores[&id],
        groups,
        quotas,
    ))
}

/// Where a stored exemplar came from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub selector: SelectorKind,
    pub score: f64,
}

/// Budgeted exemplar store keyed by class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryBank {
    pub budget: usize,
    entries: BTreeMap<usize, Vec<SampleId>>,
    provenance: BTreeMap<SampleId, Provenance>,
}

impl MemoryBank {
    pub fn new(budget: usize) -> Self {
        Self {
            budget,
            entries: BTreeMap::new(),
            provenance: BTreeMap::new(),
        }
    }

    pub fn quota(&self, num_seen_classes: usize) -> Result<Vec<usize>> {
        quota(self.budget, num_seen_classes)
    }

    /// Quotas of the classes in `classes` when `num_seen_classes` share the budget.
    pub fn quotas_for(
        &self,
        classes: impl IntoIterator<Item = usize>,
        num_seen_classes: usize,
    ) -> Result<BTreeMap<usize, usize>> {
        let q = self.quota(num_seen_classes)?;
        classes
            .into_iter()
            .map(|c| {
                q.get(c).map(|&n| (c, n)).ok_or_else(|| {
                    Error::input(format!("class {c} outside the {num_seen_classes} seen classes"))
                })
            })
            .collect()
    }

    pub fn entries(&self) -> &BTreeMap<usize, Vec<SampleId>> {
        &self.entries
    }

    pub fn provenance(&self, id: SampleId) -> Option<Provenance> {
        self.provenance.get(&id).copied()
    }

    pub fn len(&self) -> usize {
        self.entries.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Every stored id with its class, in class then rank order.
    pub fn all(&self) -> Vec<(usize, SampleId)> {
        self.entries
            .iter()
            .flat_map(|(c, ids)| ids.iter().map(move |id| (*c, *id)))
            .collect()
    }

    /// Installs `selection` and shrinks old classes to the quota of
    /// `num_seen_classes`.
    pub fn update(&mut self, selection: &Selection, num_seen_classes: usize) -> Result<()> {
        let q = self.quota(num_seen_classes)?;
        if let Some(&c) = self
            .entries
            .keys()
            .chain(selection.per_class.keys())
            .find(|&&c| c >= num_seen_classes)
        {
            return Err(Error::input(format!(
                "class {c} has not been introduced (only {num_seen_classes} seen)"
            )));
        }
        let mut entries = BTreeMap::new();
        let mut provenance = BTreeMap::new();
        for (&class, ids) in &self.entries {
            if selection.per_class.contains_key(&class) {
                continue;
            }
            let mut scored: Vec<(SampleId, f64)> = ids
                .iter()
                .map(|id| (*id, self.provenance[id].score))
                .collect();
            rank_desc(&mut scored);
            scored.truncate(q[class]);
            for (id, _) in &scored {
                provenance.insert(*id, self.provenance[id]);
            }
            entries.insert(class, scored.into_iter().map(|(id, _)| id).collect());
        }
        for (&class, chosen) in &selection.per_class {
            let kept: Vec<SampleId> = chosen.iter().take(q[class]).map(|(id, _)| *id).collect();
            for (id, score) in chosen.iter().take(q[class]) {
                let prev = provenance.insert(
                    *id,
                    Provenance {
                        selector: selection.selector,
                        score: *score,
                    },
                );
                if prev.is_some() {
                    return Err(Error::input(format!("sample {id} selected twice")));
                }
            }
            entries.insert(class, kept);
        }
        let total: usize = entries.values().map(Vec::len).sum();
        if total > self.budget {
            return Err(Error::internal(format!(
                "memory bank holds {total} exemplars over a budget of {}",
                self.budget
            )));
        }
        self.entries = entries;
        self.provenance = provenance;
        Ok(())
    }

    /// Tab-separated `class sample_id selector score`, one exemplar per line.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("class\tsample_id\tselector\tscore\n");
        for (class, id) in self.all() {
            let p = self.provenance[&id];
            let _ = writeln!(out, "{class}\t{id}\t{}\t{:?}", p.selector, p.score);
        }
        out
    }

    pub fn write_tsv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_tsv()).map_err(|e| Error::io(path, e))
    }

    pub fn read_tsv(path: &Path, budget: usize) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut bank = Self::new(budget);
        for (n, line) in text.lines().enumerate().skip(1) {
            let bad = || Error::format(path, format!("line {}: expected 4 columns", n + 1));
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 4 {
                return Err(bad());
            }
            let class: usize = cols[0].parse().map_err(|_| bad())?;
            let id = SampleId(cols[1].parse().map_err(|_| bad())?);
            let selector: SelectorKind = cols[2].parse()?;
            let score: f64 = cols[3].parse().map_err(|_| bad())?;
            bank.entries.entry(class).or_default().push(id);
            bank.provenance.insert(id, Provenance { selector, score });
        }
        Ok(bank)
    }
}
