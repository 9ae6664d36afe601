//! Runs the similarity ablation on synthetic data and prints the table with
//! deltas against cosine.
//!
//! cargo run --release --example ablation_grid

use essential::cli::{grid, run_in_dir};
use essential::datamodel::RunConfig;
use essential::metrics::{render_table, TableRow};

fn main() -> essential::Result<()> {
    let dir = std::env::temp_dir().join("essential-ablation-example");
    let mut rows = Vec::new();
    for cell in grid(&["similarity".to_string()])? {
        let mut overrides = vec!["schedule.num_sessions=4".to_string()];
        overrides.extend(cell.overrides.iter().cloned());
        let config = RunConfig::from_text_with_overrides("dataset = synthetic\n", &overrides)?;
        let reports = run_in_dir(config, &dir.join(&cell.label))?;
        rows.push(TableRow {
            label: cell.label.clone(),
            accuracies: reports.last().map(|r| r.accuracies.clone()).unwrap_or_default(),
        });
    }
    print!("{}", render_table(&rows, 0)?.0);
    println!("runs under {}", dir.display());
    Ok(())
}
