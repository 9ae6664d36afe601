//! Auxiliary head that predicts a sample's class-probability trajectory, and
//! hence its average cumulative entropy, from intermediate backbone features.

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::Rng;

use crate::datamodel::{CumulativeRule, SampleId};
use crate::error::{Error, Result};
use crate::nn::{Graph, Linear, Node, ParamStore};
use crate::trajectory::{self, check_distribution, EntropyTrajectory, TrajectoryStore};

const DIST_TOL: f64 = 1e-6;

fn kl_to_mixture(p: &[f64], m: &[f64]) -> f64 {
    p.iter()
        .zip(m)
        .filter(|(&pv, _)| pv > 0.0)
        .map(|(&pv, &mv)| pv * (pv / mv).ln())
        .sum()
}

/// Jensen–Shannon divergence without input validation.
pub(crate) fn js_divergence_unchecked(a: &[f64], b: &[f64]) -> f64 {
    let m: Vec<f64> = a.iter().zip(b).map(|(x, y)| 0.5 * (x + y)).collect();
    (0.5 * (kl_to_mixture(a, &m) + kl_to_mixture(b, &m))).max(0.0)
}

/// `½[KL(a‖M) + KL(b‖M)]` with `M = ½(a + b)`, in nats.
pub fn js_divergence(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::input(format!(
            "js divergence of vectors of length {} and {}",
            a.len(),
            b.len()
        )));
    }
    check_distribution(a, DIST_TOL)?;
    check_distribution(b, DIST_TOL)?;
    Ok(js_divergence_unchecked(a, b))
}

/// Predicted per-epoch distributions of one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictedTrajectory {
    pub sample_id: SampleId,
    pub predicted_probs_per_epoch: Vec<Vec<f64>>,
    pub predicted_average_ce: f64,
}

impl PredictedTrajectory {
    pub fn new(sample_id: SampleId, rows: Vec<Vec<f64>>) -> Result<Self> {
        let traj = EntropyTrajectory::from_probs(sample_id, &rows)?;
        let predicted_average_ce = trajectory::average_cumulative_entropy(&traj)?;
        Ok(Self {
            sample_id,
            predicted_probs_per_epoch: rows,
            predicted_average_ce,
        })
    }

    /// Every predicted trajectory held in a store of recorded predictor outputs.
    pub fn all_from_store(store: &TrajectoryStore) -> Result<Vec<Self>> {
        store
            .iter()
            .map(|(id, t)| Self::new(*id, t.probs_per_epoch().to_vec()))
            .collect()
    }
}

/// `L_CE + β · mean_t JS(true_t, predicted_t)`.
pub fn prediction_loss(
    true_traj: &EntropyTrajectory,
    pred_traj: &PredictedTrajectory,
    ce_loss: f64,
    beta: f64,
) -> Result<f64> {
    let truth = true_traj.probs_per_epoch();
    let pred = &pred_traj.predicted_probs_per_epoch;
    if truth.len() != pred.len() || truth.is_empty() {
        return Err(Error::input(format!(
            "true trajectory has {} epochs, predicted has {}",
            truth.len(),
            pred.len()
        )));
    }
    let mut js = 0.0;
    for (a, b) in truth.iter().zip(pred) {
        js += js_divergence(a, b)?;
    }
    Ok(ce_loss + beta * js / truth.len() as f64)
}

/// Top-`k` candidates by predicted score (ties to the lower id), re-scored
/// with their recorded true trajectory.
///
/// `k` larger than the candidate count re-evaluates every candidate.
pub fn reevaluate_top(
    predicted: &BTreeMap<SampleId, f64>,
    k: usize,
    target: &TrajectoryStore,
    rule: CumulativeRule,
) -> Result<BTreeMap<SampleId, f64>> {
    if k == 0 {
        return Err(Error::input("re-evaluation count must be positive"));
    }
    let mut ranked: Vec<(SampleId, f64)> = predicted.iter().map(|(i, s)| (*i, *s)).collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    ranked
        .into_iter()
        .take(k)
        .map(|(id, _)| {
            let traj = target.get(id).ok_or_else(|| {
                Error::State(format!("no recorded trajectory for sample {id}"))
            })?;
            Ok((id, trajectory::score(traj, rule)?))
        })
        .collect()
}

/// One reduction branch of the head: global average pool then an affine map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Tap {
    pub channels: usize,
    pub reduce: Linear,
}

/// Multi-scale predictor: per-tap reduction, concatenation, fusion to class logits.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PredictorHead {
    pub taps: Vec<Tap>,
    pub fusion: Linear,
    pub num_classes: usize,
}

impl PredictorHead {
    /// `tap_channels[i]` is the channel count of tap `i`; its feature map is a
    /// channel-major flattened row whose spatial size is inferred.
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        tap_channels: &[usize],
        reduce_dim: usize,
        num_classes: usize,
    ) -> Self {
        let taps = tap_channels
            .iter()
            .enumerate()
            .map(|(i, &channels)| Tap {
                channels,
                reduce: Linear::new(store, rng, &format!("predictor.tap{i}"), channels, reduce_dim),
            })
            .collect::<Vec<_>>();
        let fusion = Linear::with_std(
            store,
            rng,
            "predictor.fusion",
            reduce_dim * tap_channels.len(),
            num_classes,
            0.01,
        );
        Self {
            taps,
            fusion,
            num_classes,
        }
    }

    /// Logits over the first `seen` classes. Tap inputs are detached.
    pub fn forward(&self, g: &mut Graph, features: &[Node], p: &[Node], seen: usize) -> Result<Node> {
        if features.len() != self.taps.len() {
            return Err(Error::input(format!(
                "predictor expects {} feature maps, got {}",
                self.taps.len(),
                features.len()
            )));
        }
        if seen == 0 || seen > self.num_classes {
            return Err(Error::input(format!(
                "predictor asked for {seen} of {} classes",
                self.num_classes
            )));
        }
        let mut reduced = Vec::with_capacity(features.len());
        for (tap, &f) in self.taps.iter().zip(features) {
            let f = g.detach(f);
            let pooled = g.global_avg_pool(f, tap.channels)?;
            let r = tap.reduce.forward(g, pooled, p)?;
            reduced.push(g.relu(r));
        }
        let joined = g.concat_cols(&reduced)?;
        let logits = self.fusion.forward(g, joined, p)?;
        g.slice_cols(logits, 0, seen)
    }
}

fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    out
}

/// Predicted distributions (one row per sample) over the first `seen` classes.
pub fn predict_distribution(
    head: &PredictorHead,
    params: &ParamStore,
    multiscale_features: &[Array2<f64>],
    seen: usize,
) -> Result<Array2<f64>> {
    if multiscale_features.len() != head.taps.len() {
        return Err(Error::input(format!(
            "predictor expects {} feature maps, got {}",
            head.taps.len(),
            multiscale_features.len()
        )));
    }
    let mut g = Graph::new();
    let p = params.bind_frozen(&mut g);
    let feats: Vec<Node> = multiscale_features
        .iter()
        .map(|f| g.constant(f.clone()))
        .collect();
    let logits = head.forward(&mut g, &feats, &p, seen)?;
    Ok(softmax_rows(g.value(logits)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn js_oracle(a: &[f64], b: &[f64]) -> f64 {
        let mut total = 0.0;
        for i in 0..a.len() {
            let m = (a[i] + b[i]) / 2.0;
            if a[i] > 0.0 {
                total += 0.5 * a[i] * (a[i] / m).ln();
            }
            if b[i] > 0.0 {
                total += 0.5 * b[i] * (b[i] / m).ln();
            }
        }
        total
    }

    #[test]
    fn js_examples() {
        assert_eq!(js_divergence(&[0.3, 0.7], &[0.3, 0.7]).unwrap(), 0.0);
        let sat = js_divergence(&[1.0, 0.0], &[0.0, 1.0]).unwrap();
        assert!((sat - 2f64.ln()).abs() < 1e-12);
        let v = js_divergence(&[0.5, 0.5], &[1.0, 0.0]).unwrap();
        assert!((v - 0.215762).abs() < 1e-6, "{v}");
        assert!(js_divergence(&[1.0], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn prediction_loss_examples() {
        let rows = vec![vec![0.8, 0.2], vec![0.6, 0.4]];
        let truth = EntropyTrajectory::from_probs(SampleId(0), &rows).unwrap();
        let same = PredictedTrajectory::new(SampleId(0), rows.clone()).unwrap();
        assert!((prediction_loss(&truth, &same, 1.3, 2.0).unwrap() - 1.3).abs() < 1e-15);
        let other =
            PredictedTrajectory::new(SampleId(0), vec![vec![0.5, 0.5], vec![0.1, 0.9]]).unwrap();
        assert_eq!(prediction_loss(&truth, &other, 0.7, 0.0).unwrap(), 0.7);
        let expected = 0.7
            + 0.5 * 0.5
                * (js_oracle(&[0.8, 0.2], &[0.5, 0.5]) + js_oracle(&[0.6, 0.4], &[0.1, 0.9]));
        assert!((prediction_loss(&truth, &other, 0.7, 0.5).unwrap() - expected).abs() < 1e-12);
        let short = PredictedTrajectory::new(SampleId(0), vec![vec![0.5, 0.5]]).unwrap();
        assert!(prediction_loss(&truth, &short, 0.7, 0.5).is_err());
    }

    fn store_with(entries: &[(u64, f64)]) -> TrajectoryStore {
        let mut store = TrajectoryStore::new();
        let epoch: BTreeMap<_, _> = entries
            .iter()
            .map(|&(id, p)| (SampleId(id), vec![p, 1.0 - p]))
            .collect();
        store.record_epoch(&epoch).unwrap();
        store
    }

    #[test]
    fn reevaluate_top_examples() {
        let target = store_with(&[(1, 0.9), (2, 0.5), (3, 0.7)]);
        let predicted: BTreeMap<_, _> = [(SampleId(1), 0.3), (SampleId(2), 0.1), (SampleId(3), 0.2)]
            .into_iter()
            .collect();
        let all = reevaluate_top(&predicted, 3, &target, CumulativeRule::Sum).unwrap();
        assert_eq!(all.len(), 3);
        let one = reevaluate_top(&predicted, 1, &target, CumulativeRule::Sum).unwrap();
        assert_eq!(one.keys().copied().collect::<Vec<_>>(), vec![SampleId(1)]);
        let two = reevaluate_top(&predicted, 2, &target, CumulativeRule::Sum).unwrap();
        let mut oracle: Vec<_> = predicted.iter().collect();
        oracle.sort_by(|a, b| b.1.partial_cmp(a.1).unwrap());
        let want: Vec<_> = oracle[..2].iter().map(|(id, _)| **id).collect();
        let mut got: Vec<_> = two.keys().copied().collect();
        got.sort_by_key(|id| want.iter().position(|w| w == id));
        assert_eq!(got, want);
        let h = -(0.7f64 * 0.7f64.ln() + 0.3 * 0.3f64.ln());
        assert!((two[&SampleId(3)] - h).abs() < 1e-12);
        assert!(reevaluate_top(&predicted, 0, &target, CumulativeRule::Sum).is_err());
    }

    fn head_fixture(classes: usize) -> (ParamStore, PredictorHead) {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let head = PredictorHead::new(&mut store, &mut rng, &[4, 6], 8, classes);
        (store, head)
    }

    fn features(seed: u64, batch: usize) -> Vec<Array2<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        vec![
            Array2::from_shape_simple_fn((batch, 4 * 9), || rng.random::<f64>()),
            Array2::from_shape_simple_fn((batch, 6), || rng.random::<f64>()),
        ]
    }

    #[test]
    fn fresh_head_is_near_uniform_and_deterministic() {
        for classes in [2usize, 5, 9] {
            let (store, head) = head_fixture(classes);
            let probs = predict_distribution(&head, &store, &features(1, 6), classes).unwrap();
            for row in probs.rows() {
                let h = trajectory::static_entropy(row.as_slice().unwrap()).unwrap();
                assert!(h >= 0.9 * (classes as f64).ln(), "entropy {h}");
            }
            let again = predict_distribution(&head, &store, &features(1, 6), classes).unwrap();
            assert_eq!(probs, again);
        }
        let (store, head) = head_fixture(3);
        let mut one = features(1, 2);
        one.pop();
        assert!(predict_distribution(&head, &store, &one, 3).is_err());
    }

    #[test]
    fn prediction_loss_gradient_matches_finite_differences() {
        let (mut store, head) = head_fixture(3);
        let feats = features(5, 4);
        let target = ndarray::array![
            [0.7, 0.2, 0.1],
            [0.1, 0.8, 0.1],
            [0.3, 0.3, 0.4],
            [0.05, 0.05, 0.9]
        ];
        // Perturb away from the near-uniform init so gradients are not tiny.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let fusion_w = head.fusion.weight;
        store
            .get_mut(fusion_w)
            .mapv_inplace(|v| v + 0.3 * (rng.random::<f64>() - 0.5));
        let ce = 0.37;
        let beta = 1.5;
        let loss_of = |store: &ParamStore| -> (f64, Option<crate::nn::Gradients>) {
            let mut g = Graph::new();
            let p = store.bind(&mut g);
            let f: Vec<Node> = feats.iter().map(|a| g.constant(a.clone())).collect();
            let logits = head.forward(&mut g, &f, &p, 3).unwrap();
            let js = g.js_to_target(logits, target.clone()).unwrap();
            let ce_node = g.constant(Array2::from_elem((1, 1), ce));
            let total = g.weighted_sum(&[(ce_node, 1.0), (js, beta)]).unwrap();
            let grads = g.backward(total).unwrap();
            (g.scalar(total), Some(grads))
        };
        let (base, grads) = loss_of(&store);
        let grads = grads.unwrap();
        let h = 1e-6;
        for id in 0..store.len() {
            let analytic = grads.param(id).unwrap().clone();
            for idx in 0..analytic.len().min(6) {
                let (r, c) = (idx / analytic.ncols(), idx % analytic.ncols());
                let mut plus = store.clone();
                plus.get_mut(id)[[r, c]] += h;
                let mut minus = store.clone();
                minus.get_mut(id)[[r, c]] -= h;
                let numeric = (loss_of(&plus).0 - loss_of(&minus).0) / (2.0 * h);
                let a = analytic[[r, c]];
                let denom = a.abs().max(numeric.abs()).max(1e-8);
                assert!(
                    (a - numeric).abs() / denom < 1e-3 || (a - numeric).abs() < 1e-9,
                    "param {} [{r},{c}]: analytic {a} numeric {numeric}",
                    store.name(id)
                );
            }
        }
        // The graph's JS value agrees with the per-row vector formula.
        let probs = predict_distribution(&head, &store, &feats, 3).unwrap();
        let mut js = 0.0;
        for (t, q) in target.rows().into_iter().zip(probs.rows()) {
            js += js_oracle(t.as_slice().unwrap(), q.as_slice().unwrap());
        }
        assert!((base - (ce + beta * js / 4.0)).abs() < 1e-10);
    }

    fn dist() -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(0.0f64..1.0, 5).prop_filter_map("zero mass", |raw| {
            let s: f64 = raw.iter().sum();
            (s > 1e-9).then(|| raw.iter().map(|v| v / s).collect())
        })
    }

    proptest! {
        #[test]
        fn js_symmetric_and_bounded(a in dist(), b in dist()) {
            let ab = js_divergence(&a, &b).unwrap();
            let ba = js_divergence(&b, &a).unwrap();
            prop_assert!((ab - ba).abs() < 1e-12);
            prop_assert!(ab >= 0.0 && ab <= 2f64.ln() + 1e-12);
            prop_assert!((ab - js_oracle(&a, &b)).abs() < 1e-9);
        }

        #[test]
        fn prediction_loss_monotone_in_beta(a in dist(), b in dist(), b1 in 0.0f64..3.0, b2 in 0.0f64..3.0) {
            let truth = EntropyTrajectory::from_probs(SampleId(0), &[a]).unwrap();
            let pred = PredictedTrajectory::new(SampleId(0), vec![b]).unwrap();
            let (lo, hi) = if b1 <= b2 { (b1, b2) } else { (b2, b1) };
            prop_assert!(
                prediction_loss(&truth, &pred, 0.5, lo).unwrap()
                    <= prediction_loss(&truth, &pred, 0.5, hi).unwrap()
            );
        }
    }
}
