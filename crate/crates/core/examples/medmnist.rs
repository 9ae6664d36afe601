//! Runs a config against MedMNIST archives and writes the run directory.
//!
//! ESSENTIAL_DATA_DIR=/data/medmnist cargo run --release --example medmnist -- \
//!     crates/core/configs/path_imb.cfg runs/path_imb epochs_base=5

use std::path::PathBuf;

use essential::datamodel::RunConfig;
use essential::sessions::run_experiment;

fn main() {
    let mut args = std::env::args().skip(1);
    let (Some(config), Some(out)) = (args.next(), args.next()) else {
        eprintln!("usage: medmnist <config> <out-dir> [key=value ...]");
        std::process::exit(1);
    };
    let overrides: Vec<String> = args.collect();
    let result = RunConfig::load(&PathBuf::from(config), &overrides)
        .and_then(|cfg| run_experiment(cfg, Some(&PathBuf::from(&out))));
    match result {
        Ok(reports) => {
            for r in &reports {
                println!("session {}: {:.2}%", r.session, r.accuracy());
            }
            println!("artifacts in {out}");
        }
        Err(e) => {
            eprintln!("{e}");
            std::process::exit(essential::cli::exit_code(&e));
        }
    }
}
