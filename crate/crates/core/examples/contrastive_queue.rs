//! Supervised contrastive loss against a FIFO queue of momentum keys.
//!
//! cargo run --example contrastive_queue

use essential::contrastive::{scl_loss, ContrastiveBatch, FeatureQueue};
use ndarray::{array, Array2};

fn unit_rows(mut a: Array2<f64>) -> Array2<f64> {
    for mut r in a.rows_mut() {
        let n = r.dot(&r).sqrt();
        r.mapv_inplace(|v| v / n);
    }
    a
}

fn main() -> essential::Result<()> {
    let queries = unit_rows(array![[1.0, 0.1], [0.9, 0.2], [0.0, 1.0]]);
    let keys = unit_rows(array![[1.0, 0.0], [0.8, 0.3], [0.1, 1.0]]);
    let labels = vec![0, 0, 1];

    let mut queue = FeatureQueue::new(4);
    for step in 0..3 {
        let batch = ContrastiveBatch {
            queries: queries.clone(),
            query_labels: labels.clone(),
            keys: keys.clone(),
            key_labels: labels.clone(),
            own_key: Some(vec![0, 1, 2]),
        };
        let loss = scl_loss(&batch, &queue, 0.07)?;
        println!("step {step}: queue {} / {}, loss {loss:.4}", queue.len(), queue.capacity);
        queue.enqueue(&keys, &labels)?;
    }
    Ok(())
}
