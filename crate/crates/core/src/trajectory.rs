//! Per-sample entropy trajectories recorded once per training epoch.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::datamodel::{CumulativeRule, SampleId};
use crate::error::{Error, Result};

/// Tolerance on the total mass of a probability vector passed to [`static_entropy`].
pub const ENTROPY_SUM_TOL: f64 = 1e-4;
/// Tolerance used when recording trajectories.
pub const RECORD_SUM_TOL: f64 = 1e-6;

pub(crate) fn check_distribution(p: &[f64], tol: f64) -> Result<()> {
    if p.is_empty() {
        return Err(Error::input("empty probability vector"));
    }
    if let Some(v) = p.iter().find(|v| !(**v >= 0.0)) {
        return Err(Error::input(format!("probability entry {v} is negative or NaN")));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > tol {
        return Err(Error::input(format!("probabilities sum to {s}, not 1")));
    }
    Ok(())
}

pub(crate) fn entropy_unchecked(p: &[f64]) -> f64 {
    -p.iter()
        .filter(|&&v| v > 0.0)
        .map(|&v| v * v.ln())
        .sum::<f64>()
}

/// Shannon entropy in nats, with `0·ln 0 = 0`.
pub fn static_entropy(p: &[f64]) -> Result<f64> {
    check_distribution(p, ENTROPY_SUM_TOL)?;
    Ok(entropy_unchecked(p).max(0.0))
}

/// Σ_t H(t).
pub fn cumulative_sum(entropies: &[f64]) -> Result<f64> {
    if entropies.is_empty() {
        return Err(Error::input("cumulative entropy of an empty trajectory"));
    }
    Ok(entropies.iter().sum())
}

/// Trapezoid area under an entropy curve sampled every `dt`.
pub fn trapezoid(entropies: &[f64], dt: f64) -> Result<f64> {
    if entropies.len() < 2 {
        return Err(Error::input("trapezoid rule needs at least two epochs"));
    }
    if !(dt > 0.0) {
        return Err(Error::input(format!("time step must be positive, got {dt}")));
    }
    Ok(entropies
        .windows(2)
        .map(|w| 0.5 * (w[0] + w[1]) * dt)
        .sum())
}

/// Class-probability vectors of one sample, one per epoch, with their entropies.
#[derive(Debug, Clone, PartialEq)]
pub struct EntropyTrajectory {
    pub sample_id: SampleId,
    probs_per_epoch: Vec<Vec<f64>>,
    entropies: Vec<f64>,
}

impl EntropyTrajectory {
    pub fn new(sample_id: SampleId) -> Self {
        Self {
            sample_id,
            probs_per_epoch: Vec::new(),
            entropies: Vec::new(),
        }
    }

    pub fn from_probs(sample_id: SampleId, probs: &[Vec<f64>]) -> Result<Self> {
        let mut t = Self::new(sample_id);
        for p in probs {
            t.push(p.clone())?;
        }
        Ok(t)
    }

    /// Appends one epoch.
    pub fn push(&mut self, probs: Vec<f64>) -> Result<()> {
        self.check(&probs)?;
        self.entropies.push(entropy_unchecked(&probs).max(0.0));
        self.probs_per_epoch.push(probs);
        Ok(())
    }

    fn check(&self, probs: &[f64]) -> Result<()> {
        check_distribution(probs, RECORD_SUM_TOL)?;
        if let Some(first) = self.probs_per_epoch.first() {
            if first.len() != probs.len() {
                return Err(Error::input(format!(
                    "sample {}: probability vector of length {} after epochs of length {}",
                    self.sample_id,
                    probs.len(),
                    first.len()
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entropies.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entropies.is_empty()
    }

    pub fn probs_per_epoch(&self) -> &[Vec<f64>] {
        &self.probs_per_epoch
    }

    pub fn entropies(&self) -> &[f64] {
        &self.entropies
    }

    pub fn num_classes(&self) -> Option<usize> {
        self.probs_per_epoch.first().map(Vec::len)
    }
}

pub fn cumulative_entropy_sum(traj: &EntropyTrajectory) -> Result<f64> {
    cumulative_sum(traj.entropies())
}

pub fn cumulative_entropy_trapezoid(traj: &EntropyTrajectory, dt: f64) -> Result<f64> {
    trapezoid(traj.entropies(), dt)
}

pub fn average_cumulative_entropy(traj: &EntropyTrajectory) -> Result<f64> {
    Ok(cumulative_entropy_sum(traj)? / traj.len() as f64)
}

/// Selection score of a trajectory under `rule`, normalised by the epoch count.
///
/// A single-epoch trajectory under the trapezoid rule falls back to its one
/// entropy value.
pub fn score(traj: &EntropyTrajectory, rule: CumulativeRule) -> Result<f64> {
    match rule {
        CumulativeRule::Sum => average_cumulative_entropy(traj),
        CumulativeRule::Trapezoid if traj.len() == 1 => Ok(traj.entropies()[0]),
        CumulativeRule::Trapezoid => {
            Ok(cumulative_entropy_trapezoid(traj, 1.0)? / (traj.len() - 1) as f64)
        }
    }
}

/// Trajectories of every training sample in one session.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrajectoryStore {
    trajectories: BTreeMap<SampleId, EntropyTrajectory>,
}

impl TrajectoryStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends one epoch for every id in `epoch_probs`.
    ///
    /// All vectors are checked before anything is appended, so a failed call
    /// leaves the store untouched.
    pub fn record_epoch(&mut self, epoch_probs: &BTreeMap<SampleId, Vec<f64>>) -> Result<()> {
        for (id, p) in epoch_probs {
            match self.trajectories.get(id) {
                Some(t) => t.check(p)?,
                None => check_distribution(p, RECORD_SUM_TOL)?,
            }
        }
        for (id, p) in epoch_probs {
            self.trajectories
                .entry(*id)
                .or_insert_with(|| EntropyTrajectory::new(*id))
                .push(p.clone())?;
        }
        Ok(())
    }

    pub fn get(&self, id: SampleId) -> Option<&EntropyTrajectory> {
        self.trajectories.get(&id)
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&SampleId, &EntropyTrajectory)> {
        self.trajectories.iter()
    }

    /// Epochs recorded for the longest trajectory.
    pub fn epochs(&self) -> usize {
        self.trajectories.values().map(|t| t.len()).max().unwrap_or(0)
    }

    /// Probability vectors of every sample at `epoch` (1-based).
    pub fn snapshot(&self, epoch: usize) -> BTreeMap<SampleId, Vec<f64>> {
        self.trajectories
            .iter()
            .filter_map(|(id, t)| {
                epoch
                    .checked_sub(1)
                    .and_then(|e| t.probs_per_epoch().get(e))
                    .map(|p| (*id, p.clone()))
            })
            .collect()
    }

    /// Selection score of each sample.
    pub fn scores(&self, rule: CumulativeRule) -> Result<BTreeMap<SampleId, f64>> {
        self.trajectories
            .iter()
            .map(|(id, t)| Ok((*id, score(t, rule)?)))
            .collect()
    }

    /// Columnar text: `sample_id epoch p_1 .. p_C`, tab separated.
    pub fn to_tsv(&self) -> String {
        let classes = self
            .trajectories
            .values()
            .find_map(|t| t.num_classes())
            .unwrap_or(0);
        let mut out = String::from("sample_id\tepoch");
        for c in 1..=classes {
            let _ = write!(out, "\tp_{c}");
        }
        out.push('\n');
        for (id, t) in &self.trajectories {
            for (e, p) in t.probs_per_epoch().iter().enumerate() {
                let _ = write!(out, "{id}\t{}", e + 1);
                for v in p {
                    let _ = write!(out, "\t{v:.6e}");
                }
                out.push('\n');
            }
        }
        out
    }

    pub fn write_tsv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_tsv()).map_err(|e| Error::io(path, e))
    }

    /// Parses the output of [`TrajectoryStore::to_tsv`].
    pub fn read_tsv(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut rows: BTreeMap<SampleId, Vec<(usize, Vec<f64>)>> = BTreeMap::new();
        for (n, line) in text.lines().enumerate().skip(1) {
            let bad = |what: &str| Error::format(path, format!("line {}: {what}", n + 1));
            let mut cols = line.split('\t');
            let id: u64 = cols
                .next()
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| bad("bad sample id"))?;
            let epoch: usize = cols
                .next()
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| bad("bad epoch"))?;
            let probs = cols
                .map(|v| v.parse::<f64>().map_err(|_| bad("bad probability")))
                .collect::<Result<Vec<_>>>()?;
            rows.entry(SampleId(id)).or_default().push((epoch, probs));
        }
        let mut store = Self::new();
        for (id, mut epochs) in rows {
            epochs.sort_by_key(|(e, _)| *e);
            let probs: Vec<Vec<f64>> = epochs
                .into_iter()
                .map(|(_, p)| {
                    let s: f64 = p.iter().sum();
                    p.into_iter().map(|v| v / s).collect()
                })
                .collect();
            store
                .trajectories
                .insert(id, EntropyTrajectory::from_probs(id, &probs)?);
        }
        Ok(store)
    }
}
