//! The class-incremental protocol: base session, incremental sessions,
//! exemplar selection, prototype rebuild and evaluation.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cepredictor::{predict_distribution, reevaluate_top};
use crate::classifier::{similarity_logits, softmax, DiagonalStats, PrototypeSource, PrototypeTable, MAH_SHRINKAGE};
use crate::contrastive::{scl_graph, virtual_label, ContrastiveBatch, FeatureQueue, MomentumPair};
use crate::dataio::{materialize_sessions, DatasetStore, Materialized};
use crate::datamodel::{RunConfig, SampleId, SelectorKind, SimilarityKind};
use crate::error::{Error, Result};
use crate::expansion::{
    build_virtual_prototypes, expand, expanded_predict, expanded_scores, multitask_loss,
    ExpandedPrototypeSet, TransformationBank,
};
use crate::memorybank::{self, MemoryBank, Selection};
use crate::metrics::{self, ConfusionMatrix, SessionReport};
use crate::model::{image_to_row, Network, NetworkSpec};
use crate::nn::{Graph, Sgd};
use crate::trajectory::{self, TrajectoryStore};

/// Rows evaluated per gradient-free forward pass.
const EVAL_CHUNK: usize = 256;

/// Instrumented points of the training loop, logged in execution order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    Forward,
    Losses,
    OptimizerStep,
    MomentumUpdate,
    Enqueue,
    RecordEpoch,
}

/// Per-sample selection record of one session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntropyAudit {
    pub sample_id: SampleId,
    pub class: usize,
    pub predicted_ace: f64,
    /// Present only for re-evaluated candidates.
    pub true_ace: Option<f64>,
    pub selected: bool,
}

/// Everything carried from one session to the next.
#[derive(Debug, Clone)]
pub struct SessionState {
    /// Index of the last completed session.
    pub session: usize,
    pub network: Network,
    pub key: MomentumPair,
    pub prototypes: ExpandedPrototypeSet,
    pub stats: Option<DiagonalStats>,
    pub bank: MemoryBank,
    /// True per-epoch distributions of the last session's new samples.
    pub trajectories: TrajectoryStore,
    /// Predictor outputs for the same samples and epochs.
    pub predicted: TrajectoryStore,
    pub queue: FeatureQueue,
    pub reports: Vec<SessionReport>,
    pub audit: Vec<EntropyAudit>,
    /// Stage log of the last session.
    pub hooks: Vec<Stage>,
    /// Sample ids given to the optimizer, per session.
    pub fed: Vec<BTreeSet<SampleId>>,
    rng: ChaCha8Rng,
}

impl SessionState {
    pub fn seen_classes(&self) -> usize {
        self.prototypes.classes().len()
    }

    pub fn last_report(&self) -> Option<&SessionReport> {
        self.reports.last()
    }
}

/// A configured experiment over a materialised dataset.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub config: RunConfig,
    pub store: DatasetStore,
    pub data: Materialized,
    pub transforms: TransformationBank,
    pub probe: TransformationBank,
}

struct EpochRecord {
    prototypes: ExpandedPrototypeSet,
    stats: Option<DiagonalStats>,
    uncertainty: f64,
    misclassified: Option<f64>,
    /// View-0 features of the session's new samples.
    new_features: BTreeMap<SampleId, Vec<f64>>,
}

impl Experiment {
    /// Loads or generates the configured dataset and lays the schedule over it.
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let store = DatasetStore::for_config(&config)?;
        Self::with_store(config, store)
    }

    pub fn with_store(config: RunConfig, store: DatasetStore) -> Result<Self> {
        config.validate()?;
        let res = store.resolution();
        if res != (config.schedule.resolution, config.schedule.resolution) {
            return Err(Error::data(format!(
                "dataset images are {}x{}, schedule expects {}",
                res.0, res.1, config.schedule.resolution
            )));
        }
        if store.channels() != config.schedule.channels {
            return Err(Error::data(format!(
                "dataset images have {} channels, schedule expects {}",
                store.channels(),
                config.schedule.channels
            )));
        }
        let data = materialize_sessions(
            &store,
            &config.schedule,
            config.class_order.as_deref(),
            config.seed,
        )?;
        let transforms = TransformationBank::new(config.expansion_variant);
        transforms.check_channels(store.channels())?;
        let probe = TransformationBank::new(config.intra_probe);
        probe.check_channels(store.channels())?;
        Ok(Self {
            config,
            store,
            data,
            transforms,
            probe,
        })
    }

    pub fn num_sessions(&self) -> usize {
        self.data.sessions.len()
    }

    fn m(&self) -> usize {
        self.transforms.m()
    }

    fn seen_through(&self, t: usize) -> usize {
        self.data.sessions[..=t].iter().map(|s| s.classes.len()).sum()
    }

    fn class_of(&self, id: SampleId) -> Result<usize> {
        self.data.class(id)
    }

    /// Expanded inputs of `ids`: row `i·M + m` is view `m` of `ids[i]`.
    pub fn views(&self, ids: &[SampleId]) -> Result<Array2<f64>> {
        self.views_with(ids, None)
    }

    /// As [`Experiment::views`], with `pre` applied to each image before expansion.
    fn views_with(
        &self,
        ids: &[SampleId],
        pre: Option<&crate::expansion::Transform>,
    ) -> Result<Array2<f64>> {
        let m = self.m();
        let (h, w) = self.store.resolution();
        let d = h * w * self.store.channels();
        let mut flat = Vec::with_capacity(ids.len() * m * d);
        for &id in ids {
            let mut image = self.store.image(id)?;
            if let Some(t) = pre {
                image = t.apply(&image)?;
            }
            for v in expand(&image, &self.transforms)? {
                flat.extend(image_to_row(&v));
            }
        }
        Array2::from_shape_vec((ids.len() * m, d), flat).map_err(|e| Error::internal(e.to_string()))
    }

    fn network_spec(&self) -> NetworkSpec {
        let c = &self.config;
        NetworkSpec {
            backbone: c.backbone,
            channels: c.schedule.channels,
            resolution: c.schedule.resolution,
            hidden_dims: c.hidden_dims.clone(),
            projection_dim: c.projection_dim,
            reduce_dim: c.reduce_dim,
            num_classes: c.schedule.total_classes(),
            num_transforms: self.m(),
        }
    }

    /// Session 0: trains on every base sample and fills the bank.
    pub fn run_base_session(&self) -> Result<SessionState> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        let network = Network::new(self.network_spec(), &mut rng)?;
        let key = MomentumPair::new(&network.params, network.key_slots.clone(), self.config.momentum);
        let session = &self.data.sessions[0];
        if session.train.is_empty() {
            return Err(Error::data("base session has no training samples"));
        }
        let mut state = SessionState {
            session: 0,
            network,
            key,
            prototypes: build_virtual_prototypes(&BTreeMap::new(), self.m(), 0)?,
            stats: None,
            bank: MemoryBank::new(self.config.schedule.memory_size),
            trajectories: TrajectoryStore::new(),
            predicted: TrajectoryStore::new(),
            queue: FeatureQueue::new(self.config.queue_length),
            reports: Vec::new(),
            audit: Vec::new(),
            hooks: Vec::new(),
            fed: Vec::new(),
            rng,
        };
        self.run_session(&mut state, 0)?;
        Ok(state)
    }

    /// Session `state.session + 1`: new classes plus bank exemplars.
    pub fn run_incremental_session(&self, mut state: SessionState) -> Result<SessionState> {
        let t = state.session + 1;
        if t >= self.num_sessions() {
            return Err(Error::State(format!(
                "all {} sessions already completed",
                self.num_sessions()
            )));
        }
        let seen: BTreeSet<usize> = state.bank.entries().keys().copied().collect();
        if let Some(c) = self.data.sessions[t].classes.iter().find(|c| seen.contains(c)) {
            return Err(Error::data(format!(
                "session {t} reintroduces already seen class {c}"
            )));
        }
        self.run_session(&mut state, t)?;
        Ok(state)
    }

    /// Every session in order.
    pub fn run_all(&self) -> Result<SessionState> {
        self.run_all_with(|_, _| Ok(()))
    }

    /// Every session in order; `after` sees each completed session.
    pub fn run_all_with(
        &self,
        mut after: impl FnMut(&Experiment, &SessionState) -> Result<()>,
    ) -> Result<SessionState> {
        let mut state = self.run_base_session()?;
        after(self, &state)?;
        for _ in 1..self.num_sessions() {
            state = self.run_incremental_session(state)?;
            after(self, &state)?;
        }
        Ok(state)
    }

    fn run_session(&self, state: &mut SessionState, t: usize) -> Result<()> {
        let cfg = &self.config;
        let session = &self.data.sessions[t];
        let new_ids = session.train.clone();
        let exemplars: Vec<SampleId> = state.bank.all().into_iter().map(|(_, id)| id).collect();
        let mut train_ids: Vec<SampleId> = new_ids.iter().chain(&exemplars).copied().collect();
        train_ids.sort_unstable();
        let allowed: BTreeSet<SampleId> = train_ids.iter().copied().collect();
        let seen = self.seen_through(t);
        let epochs = cfg.epochs_for(t);
        let lr = cfg.lr_for(t);
        log::info!(
            "session {t}: {} new samples, {} exemplars, {seen} classes, {epochs} epochs",
            new_ids.len(),
            exemplars.len()
        );

        state.session = t;
        state.queue.clear();
        state.key.reset(&state.network.params);
        state.hooks.clear();
        state.trajectories = TrajectoryStore::new();
        state.predicted = TrajectoryStore::new();
        let mut fed = BTreeSet::new();
        let mut opt = Sgd::new(&state.network.params, cfg.sgd_momentum, cfg.weight_decay);

        // prototypes of the untrained session start
        let (protos, stats) = self.prototypes_of(&state.network, &train_ids, t)?;
        state.prototypes = protos;
        state.stats = stats;

        let mut uncertainty = Vec::with_capacity(epochs);
        let mut misclassified = Vec::new();
        let mut last = None;
        for epoch in 0..epochs {
            let mut order = train_ids.clone();
            order.shuffle(&mut state.rng);
            for batch in order.chunks(cfg.batch_size) {
                fed.extend(batch.iter().copied());
                self.train_step(state, &mut opt, batch, seen, lr)?;
            }
            let rec = self.record_epoch(state, &new_ids, &train_ids, t, seen)?;
            state.hooks.push(Stage::RecordEpoch);
            log::debug!("session {t} epoch {}: U = {:.4}", epoch + 1, rec.uncertainty);
            uncertainty.push(rec.uncertainty);
            if let Some(m) = rec.misclassified {
                misclassified.push(m);
            }
            state.prototypes = rec.prototypes.clone();
            state.stats = rec.stats.clone();
            last = Some(rec);
        }
        if let Some(id) = fed.iter().find(|id| !allowed.contains(id)) {
            return Err(Error::internal(format!(
                "sample {id} reached the optimizer outside session {t}'s data and the bank"
            )));
        }
        state.fed.push(fed);

        let new_features = match last {
            Some(rec) => rec.new_features,
            None => {
                let (protos, stats) = self.prototypes_of(&state.network, &train_ids, t)?;
                state.prototypes = protos;
                state.stats = stats;
                self.view0_features(&state.network, &new_ids)?
            }
        };
        self.update_bank(state, session.classes.clone(), &new_ids, &new_features, seen)?;
        let report = self.evaluate(state, t, uncertainty, misclassified)?;
        log::info!("session {t}: accuracy {:.2}%", report.accuracy());
        state.reports.push(report);
        Ok(())
    }

    fn train_step(
        &self,
        state: &mut SessionState,
        opt: &mut Sgd,
        batch: &[SampleId],
        seen: usize,
        lr: f64,
    ) -> Result<()> {
        let cfg = &self.config;
        let m = self.m();
        let net = &state.network;
        let x = self.views(batch)?;
        let classes: Vec<usize> = batch.iter().map(|&id| self.class_of(id)).collect::<Result<_>>()?;
        let row_class: Vec<usize> = classes.iter().flat_map(|&c| std::iter::repeat_n(c, m)).collect();
        let row_view: Vec<usize> = (0..batch.len()).flat_map(|_| 0..m).collect();
        let row_virtual: Vec<usize> = row_class
            .iter()
            .zip(&row_view)
            .map(|(&c, &v)| virtual_label(c, v, m))
            .collect();

        let mut g = Graph::new();
        let p = net.params.bind(&mut g);
        let xn = g.constant(x.clone());
        let out = net.forward(&mut g, xn, &p)?;
        let keys = net
            .embed_with(&state.key.key_params(&net.params), &x, EVAL_CHUNK)?
            .projections;
        let proj = g.value(out.projection);
        for rows in [&keys, proj] {
            if rows.rows().into_iter().any(|r| (r.dot(&r) - 1.0).abs() > 1e-6) {
                return Err(Error::Training("embedding collapsed to zero".into()));
            }
        }
        state.hooks.push(Stage::Forward);

        // cosine (or ablation-kernel) cross-entropy, one prototype table per view
        let mut ce_terms = Vec::with_capacity(m);
        for v in 0..m {
            let rows: Vec<usize> = (0..batch.len()).map(|i| i * m + v).collect();
            let f = g.gather_rows(out.features, &rows)?;
            let table = PrototypeTable::from_expanded(
                &state.prototypes,
                v,
                PrototypeSource::AllSamples,
                cfg.eta,
            )?;
            let targets = classes
                .iter()
                .map(|&c| {
                    table
                        .index_of(c)
                        .ok_or_else(|| Error::internal(format!("class {c} has no prototype")))
                })
                .collect::<Result<Vec<_>>>()?;
            let logits = similarity_logits(&mut g, f, &table, cfg.similarity, state.stats.as_ref())?;
            ce_terms.push((g.softmax_cross_entropy(logits, &targets)?, 1.0 / m as f64));
        }
        let ce = g.weighted_sum(&ce_terms)?;

        let contrast = ContrastiveBatch {
            queries: g.value(out.projection).clone(),
            query_labels: row_virtual.clone(),
            keys: keys.clone(),
            key_labels: row_virtual.clone(),
            own_key: Some((0..row_virtual.len()).collect()),
        };
        let scl = scl_graph(&mut g, out.projection, &contrast, &state.queue, cfg.tau)?;
        let mt = multitask_loss(&mut g, out.features, &row_class, &row_view, &net.heads, &p, seen)?;

        let rows0: Vec<usize> = (0..batch.len()).map(|i| i * m).collect();
        let taps0 = out
            .taps
            .iter()
            .map(|&t| g.gather_rows(t, &rows0))
            .collect::<Result<Vec<_>>>()?;
        let pred_logits = net.predictor.forward(&mut g, &taps0, &p, seen)?;
        let feats = g.value(out.features).clone();
        let target = self.probability_rows(&feats, batch.len(), &state.prototypes, state.stats.as_ref(), seen)?;
        let js = g.js_to_target(pred_logits, target)?;

        let total = g.weighted_sum(&[(ce, 1.0), (scl, cfg.alpha), (mt, 1.0), (js, cfg.beta)])?;
        state.hooks.push(Stage::Losses);
        let loss = g.scalar(total);
        if !loss.is_finite() {
            return Err(Error::Training(format!("loss became {loss}")));
        }
        let grads = g.backward(total)?;
        opt.step(&mut state.network.params, &grads, lr)?;
        if state.network.params.tensors().iter().any(|t| t.iter().any(|x| !x.is_finite())) {
            return Err(Error::Training("parameters diverged after optimizer step".into()));
        }
        state.hooks.push(Stage::OptimizerStep);
        state.key.update(&state.network.params)?;
        state.hooks.push(Stage::MomentumUpdate);
        state.queue.enqueue(&keys, &row_virtual)?;
        state.hooks.push(Stage::Enqueue);
        Ok(())
    }

    /// Class distribution of each sample from its `M` view features.
    fn probability_rows(
        &self,
        features: &Array2<f64>,
        n: usize,
        protos: &ExpandedPrototypeSet,
        stats: Option<&DiagonalStats>,
        seen: usize,
    ) -> Result<Array2<f64>> {
        let m = self.m();
        let mut out = Array2::zeros((n, seen));
        for i in 0..n {
            let views: Vec<Vec<f64>> = (0..m).map(|v| features.row(i * m + v).to_vec()).collect();
            let p = class_probabilities(&views, protos, self.config.similarity, stats, self.config.eta, seen)?;
            out.row_mut(i).assign(&ndarray::ArrayView1::from(p.as_slice()));
        }
        Ok(out)
    }

    fn view0_features(&self, net: &Network, ids: &[SampleId]) -> Result<BTreeMap<SampleId, Vec<f64>>> {
        let e = net.embed(&self.views(ids)?, EVAL_CHUNK)?;
        let m = self.m();
        Ok(ids
            .iter()
            .enumerate()
            .map(|(i, &id)| (id, e.features.row(i * m).to_vec()))
            .collect())
    }

    fn prototypes_from(
        &self,
        features: &Array2<f64>,
        ids: &[SampleId],
        t: usize,
    ) -> Result<(ExpandedPrototypeSet, Option<DiagonalStats>)> {
        let m = self.m();
        let mut cells: BTreeMap<(usize, usize), Vec<Vec<f64>>> = BTreeMap::new();
        for (i, &id) in ids.iter().enumerate() {
            let c = self.class_of(id)?;
            for v in 0..m {
                cells.entry((c, v)).or_default().push(features.row(i * m + v).to_vec());
            }
        }
        let protos = build_virtual_prototypes(&cells, m, t)?;
        let stats = if self.config.similarity == SimilarityKind::Mah {
            let rows: Vec<Vec<f64>> = features.rows().into_iter().map(|r| r.to_vec()).collect();
            Some(DiagonalStats::fit(rows.iter().map(Vec::as_slice), MAH_SHRINKAGE)?)
        } else {
            None
        };
        Ok((protos, stats))
    }

    fn prototypes_of(
        &self,
        net: &Network,
        ids: &[SampleId],
        t: usize,
    ) -> Result<(ExpandedPrototypeSet, Option<DiagonalStats>)> {
        let e = net.embed(&self.views(ids)?, EVAL_CHUNK)?;
        self.prototypes_from(&e.features, ids, t)
    }

    /// End-of-epoch pass: rebuilds prototypes and records true and predicted
    /// distributions of the session's new samples.
    fn record_epoch(
        &self,
        state: &mut SessionState,
        new_ids: &[SampleId],
        train_ids: &[SampleId],
        t: usize,
        seen: usize,
    ) -> Result<EpochRecord> {
        let m = self.m();
        let net = &state.network;
        let e = net.embed(&self.views(train_ids)?, EVAL_CHUNK)?;
        let (prototypes, stats) = self.prototypes_from(&e.features, train_ids, t)?;
        let index: BTreeMap<SampleId, usize> = train_ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();

        let mut truth = BTreeMap::new();
        let mut new_features = BTreeMap::new();
        let mut tap_rows = Vec::with_capacity(new_ids.len());
        for &id in new_ids {
            let i = index[&id];
            let views: Vec<Vec<f64>> = (0..m).map(|v| e.features.row(i * m + v).to_vec()).collect();
            let p = class_probabilities(&views, &prototypes, self.config.similarity, stats.as_ref(), self.config.eta, seen)?;
            truth.insert(id, p);
            new_features.insert(id, views[0].clone());
            tap_rows.push(i * m);
        }
        let taps: Vec<Array2<f64>> = e.taps.iter().map(|t| t.select(ndarray::Axis(0), &tap_rows)).collect();
        let predicted_rows = predict_distribution(&net.predictor, &net.params, &taps, seen)?;
        let predicted: BTreeMap<SampleId, Vec<f64>> = new_ids
            .iter()
            .zip(predicted_rows.rows())
            .map(|(&id, r)| (id, r.to_vec()))
            .collect();
        let all: Vec<Vec<f64>> = truth.values().cloned().collect();
        let uncertainty = metrics::model_uncertainty(&all)?;
        state.trajectories.record_epoch(&truth)?;
        state.predicted.record_epoch(&predicted)?;

        let misclassified = if t > 0 {
            let tests = &self.data.test_by_session[t];
            let base: Vec<usize> = self.data.sessions[0].classes.clone();
            let preds = self.predict_ids(net, tests, &prototypes, stats.as_ref())?;
            let labels: Vec<usize> = tests.iter().map(|&id| self.class_of(id)).collect::<Result<_>>()?;
            Some(metrics::misclassified_as_base(&preds, &labels, &base)?)
        } else {
            None
        };
        Ok(EpochRecord {
            prototypes,
            stats,
            uncertainty,
            misclassified,
            new_features,
        })
    }

    fn predict_ids(
        &self,
        net: &Network,
        ids: &[SampleId],
        protos: &ExpandedPrototypeSet,
        stats: Option<&DiagonalStats>,
    ) -> Result<Vec<usize>> {
        let m = self.m();
        let e = net.embed(&self.views(ids)?, EVAL_CHUNK)?;
        (0..ids.len())
            .map(|i| {
                let views: Vec<Vec<f64>> = (0..m).map(|v| e.features.row(i * m + v).to_vec()).collect();
                expanded_predict(&views, protos, self.config.similarity, stats)
            })
            .collect()
    }

    fn update_bank(
        &self,
        state: &mut SessionState,
        classes: Vec<usize>,
        new_ids: &[SampleId],
        new_features: &BTreeMap<SampleId, Vec<f64>>,
        seen: usize,
    ) -> Result<()> {
        let cfg = &self.config;
        let quotas = state.bank.quotas_for(classes.iter().copied(), seen)?;
        let class_of = &self.data.class_of;
        let predicted_scores = state.predicted.scores(cfg.cumulative_rule)?;
        let mut true_scores = BTreeMap::new();
        let selection: Selection = match cfg.selector {
            SelectorKind::Uta => {
                for &c in &classes {
                    let k = (cfg.reevaluate_factor * quotas[&c]).max(1);
                    let candidates: BTreeMap<SampleId, f64> = predicted_scores
                        .iter()
                        .filter(|(id, _)| class_of.get(id) == Some(&c))
                        .map(|(id, s)| (*id, *s))
                        .collect();
                    if candidates.is_empty() {
                        continue;
                    }
                    true_scores.extend(reevaluate_top(&candidates, k, &state.trajectories, cfg.cumulative_rule)?);
                }
                memorybank::select_uta(&true_scores, class_of, &quotas)?
            }
            SelectorKind::Random => memorybank::select_random(
                new_ids,
                class_of,
                &quotas,
                cfg.seed ^ (state.session as u64).wrapping_mul(0x9E37_79B9),
            )?,
            SelectorKind::Nme => memorybank::select_nme(new_features, class_of, &quotas)?,
            SelectorKind::Pool => {
                let last = state.trajectories.snapshot(state.trajectories.epochs());
                memorybank::select_pool(&last, class_of, &quotas)?
            }
            SelectorKind::Committee => {
                let members: Vec<_> = committee_epochs(state.trajectories.epochs())
                    .into_iter()
                    .map(|e| state.trajectories.snapshot(e))
                    .collect();
                memorybank::select_committee(&members, class_of, &quotas)?
            }
        };
        let chosen: BTreeSet<SampleId> = selection.per_class.values().flatten().map(|(id, _)| *id).collect();
        state.audit = new_ids
            .iter()
            .map(|&id| {
                Ok(EntropyAudit {
                    sample_id: id,
                    class: self.class_of(id)?,
                    predicted_ace: predicted_scores.get(&id).copied().unwrap_or(f64::NAN),
                    true_ace: true_scores.get(&id).copied(),
                    selected: chosen.contains(&id),
                })
            })
            .collect::<Result<_>>()?;
        state.bank.update(&selection, seen)
    }

    fn evaluate(
        &self,
        state: &SessionState,
        t: usize,
        uncertainty_per_epoch: Vec<f64>,
        misclassified_as_base: Vec<f64>,
    ) -> Result<SessionReport> {
        let cfg = &self.config;
        let net = &state.network;
        let m = self.m();
        let seen = self.seen_through(t);
        let tests = self.data.test_through(t);
        let labels: Vec<usize> = tests.iter().map(|&id| self.class_of(id)).collect::<Result<_>>()?;
        let e = net.embed(&self.views(&tests)?, EVAL_CHUNK)?;
        let protos = &state.prototypes;
        let stats = state.stats.as_ref();
        let mut preds = Vec::with_capacity(tests.len());
        let mut probs = Vec::with_capacity(tests.len());
        for i in 0..tests.len() {
            let views: Vec<Vec<f64>> = (0..m).map(|v| e.features.row(i * m + v).to_vec()).collect();
            preds.push(expanded_predict(&views, protos, cfg.similarity, stats)?);
            probs.push(class_probabilities(&views, protos, cfg.similarity, stats, cfg.eta, seen)?);
        }
        let acc = metrics::accuracy(&preds, &labels)?;
        let confusion = ConfusionMatrix::new(&preds, &labels, seen)?;
        let original = class_means(&probs, &labels, seen);
        let mut inter_class = vec![vec![0.0; seen]; seen];
        for i in 0..seen {
            for j in 0..seen {
                if let (Some(a), Some(b)) = (&original[i], &original[j]) {
                    inter_class[i][j] = metrics::inter_class_distance(a, b)?;
                }
            }
        }
        let mut intra_class = Vec::new();
        if let Some(probe) = self.probe.transforms.last().filter(|_| self.probe.m() > 1) {
            let ea = net.embed(&self.views_with(&tests, Some(probe))?, EVAL_CHUNK)?;
            let mut aug = Vec::with_capacity(tests.len());
            for i in 0..tests.len() {
                let views: Vec<Vec<f64>> = (0..m).map(|v| ea.features.row(i * m + v).to_vec()).collect();
                aug.push(class_probabilities(&views, protos, cfg.similarity, stats, cfg.eta, seen)?);
            }
            let augmented = class_means(&aug, &labels, seen);
            for (a, b) in original.iter().zip(&augmented) {
                if let (Some(a), Some(b)) = (a, b) {
                    intra_class.push(metrics::intra_class_distance(a, b)?);
                }
            }
        }
        let mut accuracies: Vec<f64> = state.reports.iter().map(SessionReport::accuracy).collect();
        accuracies.push(acc);
        Ok(SessionReport {
            session: t,
            accuracies,
            confusion,
            uncertainty_per_epoch,
            inter_class,
            intra_class,
            misclassified_as_base,
            bank_size: state.bank.len(),
            num_prototypes: protos.len(),
            new_classes: self.data.sessions[t].classes.clone(),
        })
    }
}

/// Epochs whose recorded distributions form the committee.
pub fn committee_epochs(epochs: usize) -> Vec<usize> {
    let e = epochs.max(1);
    [e.div_ceil(4), e.div_ceil(2), e]
        .into_iter()
        .map(|x| x.max(1))
        .collect()
}

/// Softmax over seen classes of the view-averaged similarity to each class's
/// prototypes; cosine scores are sharpened by `eta`.
pub fn class_probabilities(
    views: &[Vec<f64>],
    protos: &ExpandedPrototypeSet,
    kind: SimilarityKind,
    stats: Option<&DiagonalStats>,
    eta: f64,
    seen: usize,
) -> Result<Vec<f64>> {
    let m = views.len() as f64;
    let scale = if kind == SimilarityKind::Cos { eta / m } else { 1.0 / m };
    let scores: Vec<f64> = expanded_scores(views, protos, kind, stats)?
        .into_iter()
        .map(|s| s * scale)
        .collect();
    let p = softmax(&scores);
    let mut out = vec![0.0; seen];
    for (c, v) in protos.classes().into_iter().zip(p) {
        if c >= seen {
            return Err(Error::internal(format!("prototype for unseen class {c}")));
        }
        out[c] = v;
    }
    Ok(out)
}

fn class_means(probs: &[Vec<f64>], labels: &[usize], seen: usize) -> Vec<Option<Vec<f64>>> {
    let mut sums = vec![vec![0.0; seen]; seen];
    let mut counts = vec![0usize; seen];
    for (p, &l) in probs.iter().zip(labels) {
        counts[l] += 1;
        for (s, v) in sums[l].iter_mut().zip(p) {
            *s += v;
        }
    }
    sums.into_iter()
        .zip(counts)
        .map(|(s, n)| (n > 0).then(|| s.into_iter().map(|v| v / n as f64).collect()))
        .collect()
}

/// Average cumulative entropy of each recorded trajectory.
pub fn average_entropies(store: &TrajectoryStore) -> Result<BTreeMap<SampleId, f64>> {
    store
        .iter()
        .map(|(id, t)| Ok((*id, trajectory::average_cumulative_entropy(t)?)))
        .collect()
}

/// Tab-separated selection audit.
pub fn audit_tsv(rows: &[EntropyAudit]) -> String {
    let mut out = String::from("sample_id\tclass\tpredicted_ace\ttrue_ace\tselected\n");
    for r in rows {
        let truth = r.true_ace.map_or(String::new(), |v| format!("{v:.6}"));
        let _ = writeln!(
            out,
            "{}\t{}\t{:.6}\t{truth}\t{}",
            r.sample_id.0,
            r.class,
            r.predicted_ace,
            u8::from(r.selected)
        );
    }
    out
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes `session_<t>/` with the report, bank, trajectories and selection audit.
pub fn write_session_artifacts(dir: &Path, state: &SessionState) -> Result<()> {
    let report = state
        .last_report()
        .ok_or_else(|| Error::State("no completed session to write".into()))?;
    let sdir = dir.join(format!("session_{}", report.session));
    fs::create_dir_all(&sdir).map_err(|e| Error::io(&sdir, e))?;
    let json = serde_json::to_string_pretty(report)
        .map_err(|e| Error::internal(format!("report serialisation failed: {e}")))?;
    write(&sdir.join("report.json"), &json)?;
    state.bank.write_tsv(&sdir.join("bank.tsv"))?;
    state.trajectories.write_tsv(&sdir.join("trajectories.tsv"))?;
    state.predicted.write_tsv(&sdir.join("predicted.tsv"))?;
    write(&sdir.join("entropy_audit.tsv"), &audit_tsv(&state.audit))
}

/// Reads back a `report.json`.
pub fn read_report(path: &Path) -> Result<SessionReport> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}

/// Runs `config` and, if `out` is given, writes the config snapshot, every
/// session's artifacts and the summary tables there.
pub fn run_experiment(config: RunConfig, out: Option<&Path>) -> Result<Vec<SessionReport>> {
    let exp = Experiment::new(config)?;
    run_prepared(&exp, out, |_| {})
}

/// [`run_experiment`] on an already prepared experiment; `progress` sees each report.
pub fn run_prepared(
    exp: &Experiment,
    out: Option<&Path>,
    mut progress: impl FnMut(&SessionReport),
) -> Result<Vec<SessionReport>> {
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write(&dir.join("config.cfg"), &exp.config.to_text())?;
    }
    let state = exp.run_all_with(|_, state| {
        if let Some(dir) = out {
            write_session_artifacts(dir, state)?;
        }
        if let Some(r) = state.last_report() {
            progress(r);
        }
        Ok(())
    })?;
    if let Some(dir) = out {
        let row = metrics::TableRow {
            label: exp.config.selector.to_string(),
            accuracies: state.last_report().map(|r| r.accuracies.clone()).unwrap_or_default(),
        };
        let (human, tsv) = metrics::render_table(&[row], 0)?;
        write(&dir.join("summary.txt"), &human)?;
        write(&dir.join("summary.tsv"), &tsv)?;
    }
    Ok(state.reports)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::memorybank::Selection;

    fn config(overrides: &[&str]) -> RunConfig {
        let o: Vec<String> = overrides.iter().map(|s| s.to_string()).collect();
        RunConfig::from_text_with_overrides("", &o).unwrap()
    }

    #[test]
    fn base_session_learns_separable_classes() {
        let exp = Experiment::new(config(&["epochs_base=50"])).unwrap();
        let state = exp.run_base_session().unwrap();
        let report = state.last_report().unwrap();
        assert!(report.accuracy() >= 95.0, "{}", report.accuracy());
        assert!(state.bank.len() <= exp.config.schedule.memory_size);
        assert_eq!(state.prototypes.len(), 2 * exp.transforms.m());
        assert_eq!(state.trajectories.len(), 400);
        assert_eq!(state.trajectories.epochs(), 50);
        assert_eq!(report.uncertainty_per_epoch.len(), 50);
        assert!(report.misclassified_as_base.is_empty());
    }

    #[test]
    fn incremental_session_bookkeeping() {
        let exp = Experiment::new(config(&[])).unwrap();
        let base = exp.run_base_session().unwrap();
        assert_eq!(base.bank.entries().values().map(Vec::len).collect::<Vec<_>>(), vec![15, 15]);
        let state = exp.run_incremental_session(base).unwrap();
        let report = state.last_report().unwrap();
        assert_eq!(state.seen_classes(), 3);
        assert_eq!(report.confusion.counts.len(), 3);
        assert_eq!(report.accuracies.len(), 2);
        assert_eq!(state.bank.len(), 30);
        assert_eq!(state.bank.entries().values().map(Vec::len).collect::<Vec<_>>(), vec![10, 10, 10]);
        let test_counts = report.confusion.row_sums();
        assert_eq!(test_counts, vec![40, 40, 40]);
        assert_eq!(report.misclassified_as_base.len(), exp.config.epochs_incremental);
        assert!(report
            .misclassified_as_base
            .iter()
            .all(|f| (0.0..=1.0).contains(f)));
    }

    #[test]
    fn hook_order_per_step() {
        let exp = Experiment::new(config(&["epochs_base=2", "epochs_incremental=2"])).unwrap();
        let state = exp.run_base_session().unwrap();
        let steps = 400usize.div_ceil(exp.config.batch_size);
        let step = [
            Stage::Forward,
            Stage::Losses,
            Stage::OptimizerStep,
            Stage::MomentumUpdate,
            Stage::Enqueue,
        ];
        let mut want = Vec::new();
        for _ in 0..2 {
            for _ in 0..steps {
                want.extend(step);
            }
            want.push(Stage::RecordEpoch);
        }
        assert_eq!(state.hooks, want);
    }

    #[test]
    fn optimizer_sees_only_session_data_and_bank() {
        let exp = Experiment::new(config(&["epochs_base=2", "epochs_incremental=2"])).unwrap();
        let base = exp.run_base_session().unwrap();
        let bank_before: BTreeSet<SampleId> = base.bank.all().into_iter().map(|(_, id)| id).collect();
        let state = exp.run_incremental_session(base).unwrap();
        let new: BTreeSet<SampleId> = exp.data.sessions[1].train.iter().copied().collect();
        for id in &state.fed[1] {
            assert!(new.contains(id) || bank_before.contains(id), "{id}");
            assert!(exp.data.session_of[id] == 1 || bank_before.contains(id));
        }
        let base_ids: BTreeSet<SampleId> = exp.data.sessions[0].train.iter().copied().collect();
        let leaked = state.fed[1].intersection(&base_ids).filter(|id| !bank_before.contains(id)).count();
        assert_eq!(leaked, 0);
        assert_eq!(state.fed[1].len(), new.len() + bank_before.len());
    }

    #[test]
    fn same_seed_same_reports() {
        let cfg = config(&["epochs_base=3", "epochs_incremental=2"]);
        let a = run_experiment(cfg.clone(), None).unwrap();
        let b = run_experiment(cfg, None).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 3);
    }

    #[test]
    fn reintroduced_class_is_a_data_error() {
        let exp = Experiment::new(config(&["epochs_base=1", "epochs_incremental=1"])).unwrap();
        let mut state = exp.run_base_session().unwrap();
        let id = exp.data.sessions[1].train[0];
        let sel = Selection {
            selector: SelectorKind::Random,
            per_class: BTreeMap::from([(2, vec![(id, 0.0)])]),
        };
        state.bank.update(&sel, 3).unwrap();
        assert!(matches!(exp.run_incremental_session(state), Err(Error::Data(_))));
    }

    #[test]
    fn no_session_after_the_last() {
        let exp = Experiment::new(config(&["epochs_base=1", "epochs_incremental=1"])).unwrap();
        let state = exp.run_all().unwrap();
        assert!(matches!(exp.run_incremental_session(state), Err(Error::State(_))));
    }

    #[test]
    fn every_selector_runs() {
        for sel in &SelectorKind::ALL {
            let exp = Experiment::new(config(&[
                "epochs_base=2",
                "epochs_incremental=2",
                &format!("selector={sel}"),
            ]))
            .unwrap();
            let state = exp.run_all().unwrap();
            assert_eq!(state.bank.len(), 30, "{sel}");
            for (id, p) in state.bank.all().iter().map(|(_, id)| (id, state.bank.provenance(*id).unwrap())) {
                assert_eq!(p.selector, *sel, "{id}");
            }
        }
    }

    #[test]
    fn committee_epochs_examples() {
        assert_eq!(committee_epochs(12), vec![3, 6, 12]);
        assert_eq!(committee_epochs(10), vec![3, 5, 10]);
        assert_eq!(committee_epochs(1), vec![1, 1, 1]);
    }

    #[test]
    fn artifacts_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = config(&["epochs_base=2", "epochs_incremental=1"]);
        let reports = run_experiment(cfg, Some(dir.path())).unwrap();
        for t in 0..3 {
            let s = dir.path().join(format!("session_{t}"));
            assert_eq!(read_report(&s.join("report.json")).unwrap(), reports[t]);
            for f in ["bank.tsv", "trajectories.tsv", "predicted.tsv", "entropy_audit.tsv"] {
                assert!(s.join(f).exists(), "{f}");
            }
        }
        let tsv = fs::read_to_string(dir.path().join("summary.tsv")).unwrap();
        assert!(tsv.starts_with("method\ts0\ts1\ts2"));
        assert!(dir.path().join("config.cfg").exists());
    }
}
