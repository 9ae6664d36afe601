//! Formula oracles, selection and classifier invariants, gradient checks and
//! end-to-end properties of the session pipeline.

use std::collections::{BTreeMap, BTreeSet};

use essential::cepredictor::{js_divergence, prediction_loss, PredictedTrajectory};
use essential::classifier::{similarity_logits, PrototypeSource, PrototypeTable};
use essential::contrastive::{scl_graph, ContrastiveBatch, FeatureQueue};
use essential::datamodel::{BackboneKind, ExpansionVariant, RunConfig, SampleId, SelectorKind, SimilarityKind};
use essential::expansion::{build_virtual_prototypes, expanded_predict, expanded_scores, multitask_loss};
use essential::memorybank::{quota, select_uta, MemoryBank, Selection};
use essential::metrics::{deltas, symmetric_kl};
use essential::model::{Network, NetworkSpec};
use essential::nn::{Graph, ParamStore};
use essential::sessions::{Experiment, Stage};
use essential::trajectory::{self, EntropyTrajectory};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_dist(rng: &mut ChaCha8Rng, k: usize) -> Vec<f64> {
    // occasional exact zeros exercise the 0 ln 0 convention
    let raw: Vec<f64> = (0..k)
        .map(|_| if rng.random_bool(0.1) { 0.0 } else { rng.random::<f64>() + 1e-3 })
        .collect();
    let s: f64 = raw.iter().sum();
    if s == 0.0 {
        let mut v = vec![0.0; k];
        v[0] = 1.0;
        return v;
    }
    raw.iter().map(|v| v / s).collect()
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * (1.0 + a.abs().max(b.abs()))
}

// entropy in bits, converted back to nats
fn oracle_entropy(p: &[f64]) -> f64 {
    let bits: f64 = p.iter().filter(|&&v| v > 0.0).map(|&v| -v * v.log2()).sum();
    bits * std::f64::consts::LN_2
}

// JS as the entropy of the mixture minus the mean entropy
fn oracle_js(a: &[f64], b: &[f64]) -> f64 {
    let m: Vec<f64> = a.iter().zip(b).map(|(x, y)| (x + y) / 2.0).collect();
    oracle_entropy(&m) - (oracle_entropy(a) + oracle_entropy(b)) / 2.0
}

// symmetric KL as ½ Σ (p - q)(ln p - ln q) after the same ε-smoothing
fn oracle_sym_kl(p: &[f64], q: &[f64]) -> f64 {
    let eps = 1e-8;
    let norm = |v: &[f64]| {
        let s: f64 = v.iter().sum::<f64>() + eps * v.len() as f64;
        v.iter().map(|x| (x + eps) / s).collect::<Vec<_>>()
    };
    let (p, q) = (norm(p), norm(q));
    0.5 * p.iter().zip(&q).map(|(a, b)| (a - b) * (a.ln() - b.ln())).sum::<f64>()
}

// trapezoid area written as the full sum minus half the end points
fn oracle_trapezoid(h: &[f64]) -> f64 {
    h.iter().sum::<f64>() - 0.5 * (h[0] + h[h.len() - 1])
}

// hand out the budget one slot at a time
fn oracle_quota(budget: usize, n: usize) -> Vec<usize> {
    let mut q = vec![0; n];
    for slot in 0..budget {
        q[slot % n] += 1;
    }
    q
}

#[test]
fn formula_oracles_agree_on_random_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut cases = 0usize;
    for _ in 0..300 {
        let k = rng.random_range(2..12);
        let p = random_dist(&mut rng, k);
        let q = random_dist(&mut rng, k);

        assert!(close(trajectory::static_entropy(&p).unwrap(), oracle_entropy(&p), 1e-12));
        assert!(close(js_divergence(&p, &q).unwrap(), oracle_js(&p, &q), 1e-9));
        assert!(close(symmetric_kl(&p, &q).unwrap(), oracle_sym_kl(&p, &q), 1e-9));
        cases += 3;

        let epochs = rng.random_range(2..9);
        let rows: Vec<Vec<f64>> = (0..epochs).map(|_| random_dist(&mut rng, k)).collect();
        let traj = EntropyTrajectory::from_probs(SampleId(0), &rows).unwrap();
        let h: Vec<f64> = rows.iter().map(|r| oracle_entropy(r)).collect();
        let sum: f64 = h.iter().sum();
        assert!(close(trajectory::cumulative_entropy_sum(&traj).unwrap(), sum, 1e-12));
        assert!(close(trajectory::average_cumulative_entropy(&traj).unwrap(), sum / epochs as f64, 1e-12));
        assert!(close(trajectory::cumulative_entropy_trapezoid(&traj, 1.0).unwrap(), oracle_trapezoid(&h), 1e-12));
        cases += 3;

        let guess: Vec<Vec<f64>> = (0..epochs).map(|_| random_dist(&mut rng, k)).collect();
        let pred = PredictedTrajectory::new(SampleId(0), guess.clone()).unwrap();
        let ce = rng.random::<f64>();
        let beta = rng.random::<f64>() * 2.0;
        let js_mean: f64 = rows.iter().zip(&guess).map(|(a, b)| oracle_js(a, b)).sum::<f64>() / epochs as f64;
        assert!(close(prediction_loss(&traj, &pred, ce, beta).unwrap(), ce + beta * js_mean, 1e-9));
        cases += 1;

        let budget = rng.random_range(1..400);
        let n = rng.random_range(1..30);
        let qv = quota(budget, n).unwrap();
        let mut sorted = qv.clone();
        sorted.sort_unstable_by(|a, b| b.cmp(a));
        let mut want = oracle_quota(budget, n);
        want.sort_unstable_by(|a, b| b.cmp(a));
        assert_eq!(sorted, want);
        assert_eq!(qv.iter().sum::<usize>(), budget);
        cases += 1;

        let ours: Vec<f64> = (0..7).map(|_| rng.random_range(0.0..100.0)).collect();
        let base: Vec<f64> = (0..7).map(|_| rng.random_range(0.0..100.0)).collect();
        let (df, da) = deltas(&ours, &base).unwrap();
        let oracle_avg = base.iter().zip(&ours).map(|(b, o)| b - o).sum::<f64>() / 7.0;
        assert!(close(df, base[6] - ours[6], 1e-12));
        assert!(close(da, oracle_avg, 1e-10));
        cases += 1;
    }
    println!("formula oracle cases: {cases}");
    assert!(cases >= 1000);
}

fn oracle_uta(scores: &BTreeMap<SampleId, f64>, class_of: &BTreeMap<SampleId, usize>, quotas: &BTreeMap<usize, usize>) -> BTreeMap<usize, Vec<SampleId>> {
    let mut out = BTreeMap::new();
    for (&c, &q) in quotas {
        let mut members: Vec<(SampleId, f64)> = scores
            .iter()
            .filter(|(id, _)| class_of[*id] == c)
            .map(|(id, s)| (*id, *s))
            .collect();
        // stable sort on score keeps ascending-id order among ties
        members.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
        out.insert(c, members.into_iter().take(q).map(|(id, _)| id).collect());
    }
    out
}

#[test]
fn uta_matches_sort_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..200 {
        let classes = rng.random_range(1..6);
        let n = rng.random_range(1..60);
        let mut scores = BTreeMap::new();
        let mut class_of = BTreeMap::new();
        for i in 0..n {
            let id = SampleId(rng.random_range(0..10_000));
            // coarse scores force ties
            scores.insert(id, (rng.random_range(0..8) as f64) / 4.0);
            class_of.insert(id, i % classes);
        }
        let quotas: BTreeMap<usize, usize> = (0..classes).map(|c| (c, rng.random_range(0..15))).collect();
        let got = select_uta(&scores, &class_of, &quotas).unwrap();
        let want = oracle_uta(&scores, &class_of, &quotas);
        for (c, ids) in want {
            assert_eq!(got.ids(c), ids, "class {c}");
        }
    }
}

#[test]
fn memory_bank_never_exceeds_budget() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for sim in 0..100 {
        let budget = rng.random_range(1..120);
        let sessions = rng.random_range(2..8);
        let base = rng.random_range(1..4);
        let mut bank = MemoryBank::new(budget);
        let mut next_id = 0u64;
        let mut seen = 0;
        for t in 0..sessions {
            let new_classes: Vec<usize> = (seen..seen + if t == 0 { base } else { 1 }).collect();
            seen += new_classes.len();
            let quotas = bank.quotas_for(new_classes.iter().copied(), seen).unwrap();
            let mut per_class = BTreeMap::new();
            for &c in &new_classes {
                let available = rng.random_range(1..80);
                let mut scored: Vec<(SampleId, f64)> = (0..available)
                    .map(|_| {
                        next_id += 1;
                        (SampleId(next_id), rng.random::<f64>())
                    })
                    .collect();
                scored.sort_by(|a, b| b.1.total_cmp(&a.1));
                scored.truncate(quotas[&c]);
                per_class.insert(c, scored);
            }
            bank.update(&Selection { selector: SelectorKind::Uta, per_class }, seen).unwrap();
            let q = bank.quota(seen).unwrap();
            assert!(bank.len() <= budget, "simulation {sim}, session {t}");
            for (c, ids) in bank.entries() {
                assert!(ids.len() <= q[*c]);
                let unique: BTreeSet<_> = ids.iter().collect();
                assert_eq!(unique.len(), ids.len());
            }
        }
    }
}

#[test]
fn cosine_is_scale_invariant_and_dot_is_not() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..200 {
        let d = rng.random_range(2..10);
        let k = rng.random_range(2..6);
        let protos: Vec<Vec<f64>> = (0..k).map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let table = PrototypeTable::new((0..k).collect(), protos, PrototypeSource::AllSamples, 16.0).unwrap();
        let x: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let s = rng.random_range(1e-3..1e3);
        let xs: Vec<f64> = x.iter().map(|v| v * s).collect();
        assert_eq!(
            table.predict(&x, SimilarityKind::Cos, None).unwrap(),
            table.predict(&xs, SimilarityKind::Cos, None).unwrap()
        );
        // rescaling one prototype does not move cosine decisions either
        let mut scaled = table.clone();
        for v in scaled.prototypes[0].iter_mut() {
            *v *= 50.0;
        }
        assert_eq!(
            table.predict(&x, SimilarityKind::Cos, None).unwrap(),
            scaled.predict(&x, SimilarityKind::Cos, None).unwrap()
        );
    }
    // a large-norm prototype captures a query that points at the other class
    let table = PrototypeTable::new(vec![0, 1], vec![vec![5.0, 0.5], vec![0.1, 1.0]], PrototypeSource::AllSamples, 16.0).unwrap();
    let x = [0.2, 1.0];
    assert_eq!(table.predict(&x, SimilarityKind::Cos, None).unwrap(), 1);
    assert_eq!(table.predict(&x, SimilarityKind::Dot, None).unwrap(), 0);
}

#[test]
fn single_view_expansion_reduces_to_plain_prototypes() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..100 {
        let d = rng.random_range(2..8);
        let k = rng.random_range(2..6);
        let mut by_class: BTreeMap<usize, Vec<Vec<f64>>> = BTreeMap::new();
        let mut by_view: BTreeMap<(usize, usize), Vec<Vec<f64>>> = BTreeMap::new();
        for c in 0..k {
            for _ in 0..rng.random_range(1..6) {
                let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
                by_class.entry(c).or_default().push(v.clone());
                by_view.entry((c, 0)).or_default().push(v);
            }
        }
        let expanded = build_virtual_prototypes(&by_view, 1, 0).unwrap();
        let plain = PrototypeTable::from_embeddings(&by_class, PrototypeSource::AllSamples, 16.0).unwrap();
        let x: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        for kind in [SimilarityKind::Cos, SimilarityKind::Dot, SimilarityKind::Euc] {
            let a = expanded_scores(std::slice::from_ref(&x), &expanded, kind, None).unwrap();
            let b = plain.scores(&x, kind, None).unwrap();
            assert_eq!(a, b, "{kind}");
            assert_eq!(
                expanded_predict(std::slice::from_ref(&x), &expanded, kind, None).unwrap(),
                plain.predict(&x, kind, None).unwrap()
            );
        }
    }
}

struct JointFixture {
    net: Network,
    x: Array2<f64>,
    row_class: Vec<usize>,
    row_view: Vec<usize>,
    table: PrototypeTable,
    keys: Array2<f64>,
    queue: FeatureQueue,
    target: Array2<f64>,
}

fn unit_rows(mut a: Array2<f64>) -> Array2<f64> {
    for mut r in a.rows_mut() {
        let n = r.dot(&r).sqrt();
        r.mapv_inplace(|v| v / n);
    }
    a
}

fn projections_are_unit(net: &Network, x: &Array2<f64>) -> bool {
    let e = net.embed(x, 64).unwrap();
    e.projections.rows().into_iter().all(|r| (r.dot(&r) - 1.0).abs() < 1e-9)
}

fn fixture() -> JointFixture {
    (0..50)
        .map(fixture_with_seed)
        .find(|f| projections_are_unit(&f.net, &f.x))
        .expect("some seed gives live projections")
}

fn fixture_with_seed(seed: u64) -> JointFixture {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = NetworkSpec {
        backbone: BackboneKind::Mlp,
        channels: 1,
        resolution: 3,
        hidden_dims: vec![7, 5],
        projection_dim: 4,
        reduce_dim: 3,
        num_classes: 3,
        num_transforms: 2,
    };
    let net = Network::new(spec, &mut rng).unwrap();
    let n = 6;
    let x = Array2::from_shape_fn((n, 9), |_| rng.random_range(-1.0..1.0));
    let row_class = vec![0, 0, 1, 1, 2, 2];
    let row_view = vec![0, 1, 0, 1, 0, 1];
    let protos: Vec<Vec<f64>> = (0..3).map(|_| (0..5).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let table = PrototypeTable::new(vec![0, 1, 2], protos, PrototypeSource::AllSamples, 4.0).unwrap();
    let keys = unit_rows(Array2::from_shape_fn((n, 4), |_| rng.random_range(-1.0..1.0)));
    let mut queue = FeatureQueue::new(8);
    let qf = unit_rows(Array2::from_shape_fn((4, 4), |_| rng.random_range(-1.0..1.0)));
    queue.enqueue(&qf, &[0, 2, 4, 5]).unwrap();
    let target = Array2::from_shape_fn((n, 3), |(i, j)| if i % 3 == j { 0.6 } else { 0.2 });
    JointFixture { net, x, row_class, row_view, table, keys, queue, target }
}

fn joint_loss(f: &JointFixture, params: &ParamStore) -> (f64, Vec<Array2<f64>>) {
    let mut g = Graph::new();
    let p = params.bind(&mut g);
    let xn = g.constant(f.x.clone());
    let out = f.net.forward(&mut g, xn, &p).unwrap();
    let logits = similarity_logits(&mut g, out.features, &f.table, SimilarityKind::Cos, None).unwrap();
    let ce = g.softmax_cross_entropy(logits, &f.row_class).unwrap();
    let virtual_labels: Vec<usize> = f.row_class.iter().zip(&f.row_view).map(|(c, v)| c * 2 + v).collect();
    let batch = ContrastiveBatch {
        queries: g.value(out.projection).clone(),
        query_labels: virtual_labels.clone(),
        keys: f.keys.clone(),
        key_labels: virtual_labels,
        own_key: Some((0..6).collect()),
    };
    let scl = scl_graph(&mut g, out.projection, &batch, &f.queue, 0.5).unwrap();
    let mt = multitask_loss(&mut g, out.features, &f.row_class, &f.row_view, &f.net.heads, &p, 3).unwrap();
    // the predictor sees detached taps, so finite differences hold them at
    // their unperturbed values
    let frozen: Vec<_> = f
        .net
        .embed(&f.x, 64)
        .unwrap()
        .taps
        .into_iter()
        .map(|t| g.constant(t))
        .collect();
    let pred = f.net.predictor.forward(&mut g, &frozen, &p, 3).unwrap();
    let js = g.js_to_target(pred, f.target.clone()).unwrap();
    let total = g.weighted_sum(&[(ce, 1.0), (scl, 0.5), (mt, 1.0), (js, 1.0)]).unwrap();
    let loss = g.scalar(total);
    let grads = g.backward(total).unwrap();
    let per_param = (0..params.len())
        .map(|i| grads.param(i).cloned().unwrap_or_else(|| Array2::zeros(params.get(i).dim())))
        .collect();
    (loss, per_param)
}

#[test]
fn joint_loss_gradients_match_finite_differences() {
    let f = fixture();
    let (_, analytic) = joint_loss(&f, &f.net.params);
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let h = 1e-6;
    let mut checked = 0;
    for slot in 0..f.net.params.len() {
        let dim = f.net.params.get(slot).dim();
        for _ in 0..3 {
            let idx = (rng.random_range(0..dim.0), rng.random_range(0..dim.1));
            let mut plus = f.net.params.clone();
            plus.get_mut(slot)[idx] += h;
            let mut minus = f.net.params.clone();
            minus.get_mut(slot)[idx] -= h;
            let numeric = (joint_loss(&f, &plus).0 - joint_loss(&f, &minus).0) / (2.0 * h);
            let a = analytic[slot][idx];
            assert!(
                (a - numeric).abs() <= 1e-5 * (1.0 + a.abs().max(numeric.abs())),
                "{} {:?}: analytic {a}, numeric {numeric}",
                f.net.params.name(slot),
                idx
            );
            checked += 1;
        }
    }
    assert!(checked >= 3 * f.net.params.len());
}

#[test]
fn predictor_gradients_stop_at_the_backbone() {
    let f = fixture();
    let mut g = Graph::new();
    let p = f.net.params.bind(&mut g);
    let xn = g.constant(f.x.clone());
    let out = f.net.forward(&mut g, xn, &p).unwrap();
    let pred = f.net.predictor.forward(&mut g, &out.taps, &p, 3).unwrap();
    let js = g.js_to_target(pred, f.target.clone()).unwrap();
    let grads = g.backward(js).unwrap();
    for slot in 0..f.net.params.len() {
        let name = f.net.params.name(slot);
        let norm = grads.param(slot).map_or(0.0, |a| a.iter().map(|v| v.abs()).sum());
        if name.starts_with("backbone") {
            assert_eq!(norm, 0.0, "{name}");
        }
    }
}

fn small(overrides: &[&str]) -> RunConfig {
    let mut o: Vec<String> = vec!["schedule.num_sessions=3".into(), "epochs_base=4".into(), "epochs_incremental=3".into()];
    o.extend(overrides.iter().map(|s| s.to_string()));
    RunConfig::from_text_with_overrides("dataset = synthetic\n", &o).unwrap()
}

#[test]
fn pipeline_is_deterministic_per_seed() {
    let a = Experiment::new(small(&["seed=4"])).unwrap().run_all().unwrap();
    let b = Experiment::new(small(&["seed=4"])).unwrap().run_all().unwrap();
    assert_eq!(a.reports, b.reports);
    assert_eq!(a.bank, b.bank);
}

#[test]
fn pipeline_respects_budget_isolation_and_stage_order() {
    let exp = Experiment::new(small(&["schedule.memory_size=7"])).unwrap();
    let mut banks = Vec::new();
    let state = exp
        .run_all_with(|exp, s| {
            assert!(s.bank.len() <= 7);
            let bank: BTreeSet<SampleId> = s.bank.all().into_iter().map(|(_, id)| id).collect();
            if s.session > 0 {
                let prev: &BTreeSet<SampleId> = &banks[s.session - 1];
                let new: BTreeSet<SampleId> = exp.data.sessions[s.session].train.iter().copied().collect();
                let allowed: BTreeSet<SampleId> = new.union(prev).copied().collect();
                assert!(s.fed[s.session].is_subset(&allowed));
            }
            banks.push(bank);
            Ok(())
        })
        .unwrap();
    assert_eq!(state.reports.len(), 3);
    let step = [Stage::Forward, Stage::Losses, Stage::OptimizerStep, Stage::MomentumUpdate, Stage::Enqueue];
    let mut i = 0;
    while i < state.hooks.len() {
        if state.hooks[i] == Stage::RecordEpoch {
            i += 1;
            continue;
        }
        assert_eq!(&state.hooks[i..i + 5], &step);
        i += 5;
    }
    assert_eq!(state.hooks.last(), Some(&Stage::RecordEpoch));
}

#[test]
fn every_selector_and_similarity_runs() {
    for sel in ["uta", "random", "nme", "pool", "committee"] {
        let s = Experiment::new(small(&[&format!("selector={sel}")])).unwrap().run_all().unwrap();
        assert_eq!(s.reports.len(), 3, "{sel}");
    }
    for sim in ["cos", "dot", "euc", "mah"] {
        let s = Experiment::new(small(&[&format!("similarity={sim}")])).unwrap().run_all().unwrap();
        assert!(s.last_report().unwrap().accuracy() > 0.0, "{sim}");
    }
    for v in ExpansionVariant::ALL {
        let s = Experiment::new(small(&[&format!("expansion_variant={v}")])).unwrap().run_all().unwrap();
        assert_eq!(s.prototypes.num_transforms, essential::expansion::TransformationBank::new(v).m());
    }
}

#[test]
fn conv_backbone_trains_end_to_end() {
    let s = Experiment::new(small(&["backbone=conv", "hidden_dims=4,8", "schedule.resolution=8"]))
        .unwrap()
        .run_all()
        .unwrap();
    assert_eq!(s.reports.len(), 3);
}

#[test]
fn artifacts_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let reports = essential::sessions::run_experiment(small(&[]), Some(dir.path())).unwrap();
    for r in &reports {
        let path = dir.path().join(format!("session_{}", r.session)).join("report.json");
        assert_eq!(&essential::sessions::read_report(&path).unwrap(), r);
        let bank = MemoryBank::read_tsv(&dir.path().join(format!("session_{}/bank.tsv", r.session)), 30).unwrap();
        assert_eq!(bank.len(), r.bank_size);
    }
    assert!(dir.path().join("summary.tsv").exists());
}

