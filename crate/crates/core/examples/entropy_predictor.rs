//! Predicted trajectories: divergence from the true distributions and the
//! re-evaluation of the most uncertain candidates.
//!
//! cargo run --example entropy_predictor

use std::collections::BTreeMap;

use essential::cepredictor::{js_divergence, prediction_loss, reevaluate_top, PredictedTrajectory};
use essential::datamodel::{CumulativeRule, SampleId};
use essential::trajectory::TrajectoryStore;

fn main() -> essential::Result<()> {
    let truth = [[0.6, 0.4], [0.8, 0.2], [0.95, 0.05]];
    let guess = [[0.55, 0.45], [0.7, 0.3], [0.9, 0.1]];

    let mut store = TrajectoryStore::new();
    for (e, row) in truth.iter().enumerate() {
        let mut epoch = BTreeMap::new();
        epoch.insert(SampleId(0), row.to_vec());
        epoch.insert(SampleId(1), vec![0.5 + 0.1 * e as f64, 0.5 - 0.1 * e as f64]);
        epoch.insert(SampleId(2), vec![0.99, 0.01]);
        store.record_epoch(&epoch)?;
    }

    for (t, p) in truth.iter().zip(&guess) {
        println!("JS(true, predicted) = {:.5}", js_divergence(t, p)?);
    }
    let predicted = PredictedTrajectory::new(SampleId(0), guess.iter().map(|r| r.to_vec()).collect())?;
    let true_traj = store.get(SampleId(0)).expect("recorded");
    println!("predicted average entropy {:.4}", predicted.predicted_average_ce);
    println!("loss with CE 0.3 and beta 1: {:.4}", prediction_loss(true_traj, &predicted, 0.3, 1.0)?);

    // the predictor ranks all three; the top two get their true scores back
    let predicted_scores: BTreeMap<SampleId, f64> =
        [(SampleId(0), 0.5), (SampleId(1), 0.6), (SampleId(2), 0.1)].into();
    let rescored = reevaluate_top(&predicted_scores, 2, &store, CumulativeRule::Sum)?;
    println!("re-evaluated: {rescored:?}");
    Ok(())
}
