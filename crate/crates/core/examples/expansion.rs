//! Expands one image with the rotation bank, builds virtual prototypes and
//! predicts by summing similarities over all views.
//!
//! cargo run --example expansion

use std::collections::BTreeMap;

use essential::datamodel::{ExpansionVariant, SimilarityKind};
use essential::expansion::{build_virtual_prototypes, expand, expanded_predict, TransformationBank};
use ndarray::Array3;

fn flatten(img: &Array3<f32>) -> Vec<f64> {
    img.iter().map(|&v| v as f64).collect()
}

fn main() -> essential::Result<()> {
    let bank = TransformationBank::new(ExpansionVariant::Rotation);
    println!("{} views per image", bank.m());

    // two toy classes: a bright top row and a bright left column
    let mut top = Array3::<f32>::zeros((4, 4, 1));
    let mut left = Array3::<f32>::zeros((4, 4, 1));
    for k in 0..4 {
        top[[0, k, 0]] = 1.0;
        left[[k, 0, 0]] = 1.0;
    }
    top[[1, 1, 0]] = 0.5;
    left[[2, 1, 0]] = 0.5;

    let mut by_view: BTreeMap<(usize, usize), Vec<Vec<f64>>> = BTreeMap::new();
    for (class, img) in [(0, &top), (1, &left)] {
        for (m, view) in expand(img, &bank)?.iter().enumerate() {
            by_view.entry((class, m)).or_default().push(flatten(view));
        }
    }
    let protos = build_virtual_prototypes(&by_view, bank.m(), 0)?;
    println!("{} virtual prototypes", protos.len());

    let query: Vec<Vec<f64>> = expand(&top, &bank)?.iter().map(flatten).collect();
    let class = expanded_predict(&query, &protos, SimilarityKind::Cos, None)?;
    println!("expanded prediction for the top-row image: class {class}");
    Ok(())
}
