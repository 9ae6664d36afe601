//! Trains on the synthetic stream and prints accuracy after each session.
//!
//! cargo run --release --example quickstart

use essential::datamodel::RunConfig;
use essential::metrics::{render_table, TableRow};
use essential::sessions::Experiment;

fn main() -> essential::Result<()> {
    let config = RunConfig::from_text("dataset = synthetic\nschedule.num_sessions = 4\nseed = 7\n")?;
    let exp = Experiment::new(config)?;
    let state = exp.run_all_with(|_, state| {
        let r = state.last_report().expect("report after each session");
        println!(
            "session {}: {} classes seen, accuracy {:.2}%, bank {}",
            r.session,
            r.confusion.counts.len(),
            r.accuracy(),
            r.bank_size
        );
        Ok(())
    })?;
    let last = state.last_report().expect("at least one session");
    let row = TableRow {
        label: "uta".into(),
        accuracies: last.accuracies.clone(),
    };
    print!("{}", render_table(&[row], 0)?.0);
    Ok(())
}
