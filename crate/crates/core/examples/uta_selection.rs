//! Builds entropy trajectories by hand and compares the uncertainty-based
//! exemplar pick with a random one.
//!
//! cargo run --example uta_selection

use std::collections::BTreeMap;

use essential::datamodel::{CumulativeRule, SampleId};
use essential::memorybank::{select_random, select_uta, MemoryBank};
use essential::trajectory::TrajectoryStore;

fn main() -> essential::Result<()> {
    // six samples of class 0 over four epochs; higher index = slower to settle
    let mut store = TrajectoryStore::new();
    for epoch in 0..4 {
        let probs: BTreeMap<SampleId, Vec<f64>> = (0..6)
            .map(|i| {
                let confidence = 0.5 + 0.5 * (epoch as f64 + 1.0) / (4.0 + i as f64 * 2.0);
                (SampleId(i), vec![confidence, 1.0 - confidence])
            })
            .collect();
        store.record_epoch(&probs)?;
    }
    let scores = store.scores(CumulativeRule::Sum)?;
    for (id, s) in &scores {
        println!("sample {id}: average cumulative entropy {s:.4}");
    }

    let class_of: BTreeMap<SampleId, usize> = scores.keys().map(|&id| (id, 0)).collect();
    let bank = MemoryBank::new(4);
    let quotas = bank.quotas_for([0, 1], 2)?;
    let uta = select_uta(&scores, &class_of, &quotas)?;
    let ids: Vec<SampleId> = scores.keys().copied().collect();
    let random = select_random(&ids, &class_of, &quotas, 1)?;
    println!("quota for class 0: {}", quotas[&0]);
    println!("uta picks    {:?}", uta.ids(0));
    println!("random picks {:?}", random.ids(0));
    Ok(())
}
