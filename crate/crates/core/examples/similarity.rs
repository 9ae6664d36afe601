//! Cosine scores ignore embedding scale; dot-product scores do not.
//!
//! cargo run --example similarity

use essential::classifier::{prototype_probabilities, PrototypeSource, PrototypeTable};
use essential::datamodel::SimilarityKind;

fn main() -> essential::Result<()> {
    // an old class with a large-norm prototype and a new one with a small norm
    let table = PrototypeTable::new(
        vec![0, 1],
        vec![vec![4.0, 1.0], vec![0.2, 0.9]],
        PrototypeSource::AllSamples,
        16.0,
    )?;
    let x = [0.3, 1.0];
    for kind in [SimilarityKind::Cos, SimilarityKind::Dot, SimilarityKind::Euc] {
        println!("{kind}: predicts class {}", table.predict(&x, kind, None)?);
    }
    for s in [1.0, 10.0, 0.01] {
        let scaled: Vec<f64> = x.iter().map(|v| v * s).collect();
        let p = prototype_probabilities(&scaled, &table)?;
        println!("scale {s:>5}: cosine probabilities {:.4?}", p);
    }
    Ok(())
}
