//! Evaluation quantities and session reports.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trajectory::{check_distribution, entropy_unchecked};

/// Smoothing mass added to every probability before a KL divergence.
pub const KL_EPS: f64 = 1e-8;
const DIST_TOL: f64 = 1e-6;

/// Percentage of `predictions` equal to `labels`.
pub fn accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::input(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::input("accuracy of an empty set"));
    }
    let correct = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(100.0 * correct as f64 / labels.len() as f64)
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// `(Δ_final, Δ_average)` of `baseline` relative to `ours`: baseline minus
/// ours, so a baseline that trails gives negative values.
pub fn deltas(ours: &[f64], baseline: &[f64]) -> Result<(f64, f64)> {
    if ours.len() != baseline.len() || ours.is_empty() {
        return Err(Error::input(format!(
            "session counts differ or are zero: {} vs {}",
            ours.len(),
            baseline.len()
        )));
    }
    let last = ours.len() - 1;
    Ok((baseline[last] - ours[last], mean(baseline) - mean(ours)))
}

fn round2(v: f64) -> f64 {
    (v * 100.0).round() / 100.0
}

/// [`deltas`] at two-decimal reporting precision: both averages are rounded
/// to two decimals before subtracting, as in a printed results table.
pub fn deltas_reported(ours: &[f64], baseline: &[f64]) -> Result<(f64, f64)> {
    let (df, _) = deltas(ours, baseline)?;
    Ok((
        round2(df),
        round2(round2(mean(baseline)) - round2(mean(ours))),
    ))
}

fn smooth(p: &[f64]) -> Vec<f64> {
    let s: f64 = p.iter().map(|v| v + KL_EPS).sum();
    p.iter().map(|v| (v + KL_EPS) / s).collect()
}

fn kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter().zip(q).map(|(a, b)| a * (a / b).ln()).sum()
}

/// Symmetric KL divergence `½[KL(p‖q) + KL(q‖p)]` after ε-smoothing.
pub fn symmetric_kl(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::input(format!(
            "distributions of length {} and {}",
            p.len(),
            q.len()
        )));
    }
    check_distribution(p, DIST_TOL)?;
    check_distribution(q, DIST_TOL)?;
    let (ps, qs) = (smooth(p), smooth(q));
    Ok((0.5 * (kl(&ps, &qs) + kl(&qs, &ps))).max(0.0))
}

/// Distance between the distributions of two classes.
pub fn inter_class_distance(p_i: &[f64], p_j: &[f64]) -> Result<f64> {
    symmetric_kl(p_i, p_j)
}

/// Distance between a class's distribution on original and on transformed inputs.
pub fn intra_class_distance(p_original: &[f64], p_augmented: &[f64]) -> Result<f64> {
    symmetric_kl(p_original, p_augmented)
}

/// Mean prediction entropy over a set of samples.
pub fn model_uncertainty(epoch_probs: &[Vec<f64>]) -> Result<f64> {
    if epoch_probs.is_empty() {
        return Err(Error::input("model uncertainty of an empty set"));
    }
    let mut total = 0.0;
    for p in epoch_probs {
        check_distribution(p, crate::trajectory::ENTROPY_SUM_TOL)?;
        total += entropy_unchecked(p).max(0.0);
    }
    Ok(total / epoch_probs.len() as f64)
}

/// Fraction of new-class samples predicted as one of `base_classes`.
pub fn misclassified_as_base(
    predictions: &[usize],
    labels: &[usize],
    base_classes: &[usize],
) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::input("predictions and labels differ in length"));
    }
    if labels.is_empty() {
        return Err(Error::input("no new-class samples"));
    }
    if let Some(l) = labels.iter().find(|l| base_classes.contains(l)) {
        return Err(Error::input(format!("label {l} is a base class")));
    }
    let hits = predictions
        .iter()
        .filter(|p| base_classes.contains(p))
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Counts indexed `[true class][predicted class]` over seen classes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<usize>>,
}

impl ConfusionMatrix {
    pub fn new(predictions: &[usize], labels: &[usize], num_classes: usize) -> Result<Self> {
        if predictions.len() != labels.len() {
            return Err(Error::input("predictions and labels differ in length"));
        }
        let mut counts = vec![vec![0; num_classes]; num_classes];
        for (&p, &l) in predictions.iter().zip(labels) {
            if p >= num_classes || l >= num_classes {
                return Err(Error::input(format!(
                    "class {} outside {num_classes} seen classes",
                    p.max(l)
                )));
            }
            counts[l][p] += 1;
        }
        Ok(Self { counts })
    }

    pub fn total(&self) -> usize {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> usize {
        (0..self.counts.len()).map(|i| self.counts[i][i]).sum()
    }

    pub fn row_sums(&self) -> Vec<usize> {
        self.counts.iter().map(|r| r.iter().sum()).collect()
    }

    /// Rows scaled to sum to one (zero rows stay zero).
    pub fn normalized(&self) -> Vec<Vec<f64>> {
        self.counts
            .iter()
            .map(|r| {
                let s: usize = r.iter().sum();
                r.iter()
                    .map(|&c| if s == 0 { 0.0 } else { c as f64 / s as f64 })
                    .collect()
            })
            .collect()
    }
}

/// Everything measured at the end of one session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionReport {
    pub session: usize,
    /// Accuracy (%) of sessions `0..=session` on their cumulative test sets.
    pub accuracies: Vec<f64>,
    pub confusion: ConfusionMatrix,
    /// Mean training-sample prediction entropy after each epoch.
    pub uncertainty_per_epoch: Vec<f64>,
    /// Symmetric KL between class mean predicted distributions.
    pub inter_class: Vec<Vec<f64>>,
    /// Per class, symmetric KL between predictions on original and transformed test images.
    pub intra_class: Vec<f64>,
    /// Share of this session's new-class test samples predicted as a base class, per epoch.
    pub misclassified_as_base: Vec<f64>,
    pub bank_size: usize,
    pub num_prototypes: usize,
    /// Classes introduced in this session.
    pub new_classes: Vec<usize>,
}

impl SessionReport {
    pub fn accuracy(&self) -> f64 {
        *self.accuracies.last().unwrap_or(&0.0)
    }

    /// Mean of the off-diagonal inter-class distances.
    pub fn mean_inter_class(&self) -> f64 {
        let n = self.inter_class.len();
        if n < 2 {
            return 0.0;
        }
        let mut total = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    total += self.inter_class[i][j];
                }
            }
        }
        total / (n * (n - 1)) as f64
    }

    /// Mean inter-class distance between this session's new classes and
    /// earlier classes; all pairs in the base session.
    pub fn mean_inter_new_old(&self) -> f64 {
        let n = self.inter_class.len();
        let mut total = 0.0;
        let mut count = 0;
        for i in 0..n {
            for j in 0..n {
                let new_i = self.new_classes.contains(&i);
                let new_j = self.new_classes.contains(&j);
                let keep = if self.session == 0 { i != j } else { new_i && !new_j };
                if keep {
                    total += self.inter_class[i][j];
                    count += 1;
                }
            }
        }
        if count == 0 {
            0.0
        } else {
            total / count as f64
        }
    }

    pub fn mean_intra_class(&self) -> f64 {
        if self.intra_class.is_empty() {
            0.0
        } else {
            mean(&self.intra_class)
        }
    }
}

/// One row of a per-session accuracy table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub label: String,
    pub accuracies: Vec<f64>,
}

/// Renders rows in the layout `label | acc_0 .. acc_T | Δ_final | average | Δ_average`,
/// with deltas relative to row `reference`. Returns `(human, tsv)`.
pub fn render_table(rows: &[TableRow], reference: usize) -> Result<(String, String)> {
    let reference_row = rows
        .get(reference)
        .ok_or_else(|| Error::input("reference row out of range"))?;
    let sessions = rows.iter().map(|r| r.accuracies.len()).max().unwrap_or(0);
    let label_w = rows.iter().map(|r| r.label.len()).max().unwrap_or(5).max(6);
    let mut human = String::new();
    let mut tsv = String::new();
    let _ = write!(human, "{:<label_w$}", "method");
    tsv.push_str("method");
    for t in 0..sessions {
        let _ = write!(human, " {:>7}", format!("s{t}"));
        let _ = write!(tsv, "\ts{t}");
    }
    let _ = writeln!(human, " {:>8} {:>8} {:>8}", "d_final", "average", "d_avg");
    tsv.push_str("\tdelta_final\taverage\tdelta_average\n");
    for (i, row) in rows.iter().enumerate() {
        let _ = write!(human, "{:<label_w$}", row.label);
        tsv.push_str(&row.label);
        for t in 0..sessions {
            match row.accuracies.get(t) {
                Some(a) => {
                    let _ = write!(human, " {a:>7.2}");
                    let _ = write!(tsv, "\t{a:.4}");
                }
                None => {
                    let _ = write!(human, " {:>7}", "-");
                    tsv.push('\t');
                }
            }
        }
        let avg = if row.accuracies.is_empty() {
            f64::NAN
        } else {
            mean(&row.accuracies)
        };
        let d = if i == reference || row.accuracies.len() != reference_row.accuracies.len() {
            None
        } else {
            Some(deltas(&reference_row.accuracies, &row.accuracies)?)
        };
        match d {
            Some((df, da)) => {
                let _ = writeln!(human, " {df:>8.2} {avg:>8.2} {da:>8.2}");
                let _ = writeln!(tsv, "\t{df:.4}\t{avg:.4}\t{da:.4}");
            }
            None => {
                let _ = writeln!(human, " {:>8} {avg:>8.2} {:>8}", "-", "-");
                let _ = writeln!(tsv, "\t\t{avg:.4}\t");
            }
        }
    }
    Ok((human, tsv))
}

/// Published per-session accuracies used as reference rows in reports.
pub mod published {
    /// Accuracy (%) per session on imbalanced BloodMNIST, with the printed
    /// `(Δ_final, Δ_average)` of each external method.
    pub const SOTA_BLOOD_IMBALANCED: &[(&str, [f64; 7], Option<(f64, f64)>)] = &[
        ("CEC", [97.78, 85.66, 69.34, 67.71, 55.04, 47.45, 46.39], Some((-37.67, -21.92))),
        ("FACT", [99.67, 94.37, 79.54, 80.24, 70.07, 71.31, 73.85], Some((-10.21, -7.53))),
        ("CLOM", [95.05, 70.57, 47.33, 44.58, 39.04, 35.89, 30.52], Some((-53.54, -37.12))),
        ("SAVC", [98.95, 90.39, 75.80, 69.29, 63.73, 56.41, 60.42], Some((-23.64, -15.40))),
        ("TEEN", [98.28, 84.80, 69.77, 69.62, 58.63, 54.74, 56.17], Some((-27.89, -18.68))),
        ("BidistFSCIL", [87.67, 81.42, 59.39, 56.27, 51.82, 50.22, 54.34], Some((-29.72, -25.95))),
        ("WaRP-CIFSL", [99.31, 89.82, 78.44, 67.37, 57.64, 62.42, 55.80], Some((-28.26, -16.00))),
        ("GKEAL", [88.60, 73.71, 57.17, 52.82, 46.17, 40.39, 41.65], Some((-42.41, -31.75))),
        ("ESSENTIAL", [99.89, 97.87, 90.56, 87.86, 80.86, 81.68, 84.06], None),
    ];

    /// Printed average accuracy of the full method on imbalanced BloodMNIST.
    pub const BLOOD_IMBALANCED_AVERAGE: f64 = 88.97;

    /// Ablation rows on long-tailed BloodMNIST: label, accuracies, printed
    /// `(Δ_final, average, Δ_average)`.
    pub const ABLATION_BLOOD_LONG_TAILED: &[(&str, [f64; 7], (Option<f64>, f64, Option<f64>))] = &[
        ("ours", [99.89, 95.26, 87.68, 85.19, 72.34, 73.74, 76.43], (None, 84.36, None)),
        ("w/o F", [98.78, 89.04, 74.62, 68.81, 58.42, 56.25, 58.17], (Some(-18.16), 72.01, Some(-12.35))),
        ("RANDOM", [98.89, 88.06, 72.95, 69.33, 52.09, 52.83, 57.62], (Some(-18.18), 70.25, Some(-14.11))),
        ("NME", [98.39, 90.40, 71.80, 66.48, 60.93, 53.00, 58.72], (Some(-17.71), 71.39, Some(-12.97))),
        ("POOL", [99.56, 92.08, 75.71, 72.91, 62.83, 56.57, 61.35], (Some(-15.08), 74.43, Some(-9.93))),
        ("COMMITTEE", [99.67, 92.50, 76.31, 75.00, 68.06, 65.62, 65.66], (Some(-10.77), 77.55, Some(-6.81))),
        ("dot", [99.89, 49.17, 34.96, 23.81, 29.88, 32.21, 37.76], (Some(-38.67), 43.95, Some(-40.41))),
        ("euc", [98.23, 87.05, 65.34, 70.67, 57.21, 54.40, 57.31], (Some(-19.12), 70.03, Some(-14.33))),
        ("mah", [100.0, 82.06, 56.16, 52.29, 36.17, 36.04, 46.23], (Some(-30.2), 58.42, Some(-25.94))),
    ];

    /// Printed average accuracy of the full method on long-tailed BloodMNIST.
    pub const BLOOD_LONG_TAILED_AVERAGE: f64 = 84.36;

    /// Memory budgets of the four dataset setups.
    pub const MEMORY_BUDGETS: [usize; 4] = [200, 70, 150, 60];
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn accuracy_examples() {
        assert_eq!(accuracy(&[1, 2, 3], &[1, 2, 3]).unwrap(), 100.0);
        assert_eq!(accuracy(&[0, 0], &[1, 1]).unwrap(), 0.0);
        assert_eq!(accuracy(&[1, 2, 3, 0], &[1, 2, 3, 4]).unwrap(), 75.0);
        assert!(accuracy(&[], &[]).is_err());
        assert!(accuracy(&[1], &[1, 2]).is_err());
    }

    #[test]
    fn delta_examples() {
        let ours = published::SOTA_BLOOD_IMBALANCED[8].1;
        let cec = published::SOTA_BLOOD_IMBALANCED[0].1;
        let (df, _) = deltas(&ours, &cec).unwrap();
        assert!((df - -37.67).abs() < 1e-9);
        assert_eq!(deltas(&cec, &cec).unwrap(), (0.0, 0.0));
        assert!(deltas(&ours[..3], &cec).is_err());
        assert!((round2(mean(&ours)) - published::BLOOD_IMBALANCED_AVERAGE).abs() < 1e-9);
    }

    #[test]
    fn kl_examples() {
        assert_eq!(inter_class_distance(&[0.2, 0.8], &[0.2, 0.8]).unwrap(), 0.0);
        let v = inter_class_distance(&[0.9, 0.1], &[0.1, 0.9]).unwrap();
        assert!((v - 1.757780).abs() < 1e-6, "{v}");
        let w = intra_class_distance(&[0.9, 0.1], &[0.1, 0.9]).unwrap();
        assert_eq!(v, w);
        // zeros are handled by smoothing
        assert!(symmetric_kl(&[1.0, 0.0], &[0.0, 1.0]).unwrap().is_finite());
        assert!(symmetric_kl(&[1.0], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn uncertainty_examples() {
        assert_eq!(model_uncertainty(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap(), 0.0);
        let u = model_uncertainty(&[vec![0.25; 4], vec![0.25; 4]]).unwrap();
        assert!((u - 4f64.ln()).abs() < 1e-12);
        let mixed = [vec![0.5, 0.5], vec![0.9, 0.1], vec![1.0, 0.0]];
        let want = mixed
            .iter()
            .map(|p| crate::trajectory::static_entropy(p).unwrap())
            .sum::<f64>()
            / 3.0;
        assert!((model_uncertainty(&mixed).unwrap() - want).abs() < 1e-12);
        assert!(model_uncertainty(&[]).is_err());
    }

    #[test]
    fn misclassified_examples() {
        assert_eq!(misclassified_as_base(&[0, 1], &[2, 2], &[0, 1]).unwrap(), 1.0);
        assert_eq!(misclassified_as_base(&[2, 3], &[2, 3], &[0, 1]).unwrap(), 0.0);
        assert_eq!(
            misclassified_as_base(&[0, 2, 1, 3, 3], &[2, 2, 3, 3, 3], &[0, 1]).unwrap(),
            0.4
        );
        assert!(misclassified_as_base(&[], &[], &[0]).is_err());
    }

    #[test]
    fn confusion_trace_matches_accuracy() {
        let preds = [0, 1, 1, 2, 2, 0];
        let labels = [0, 1, 2, 2, 1, 0];
        let m = ConfusionMatrix::new(&preds, &labels, 3).unwrap();
        assert_eq!(m.row_sums(), vec![2, 2, 2]);
        let acc = accuracy(&preds, &labels).unwrap();
        assert!((100.0 * m.trace() as f64 / m.total() as f64 - acc).abs() < 1e-12);
    }

    #[test]
    fn table_layout() {
        let rows = vec![
            TableRow { label: "uta".into(), accuracies: vec![90.0, 80.0, 70.0] },
            TableRow { label: "random".into(), accuracies: vec![90.0, 70.0, 60.0] },
        ];
        let (human, tsv) = render_table(&rows, 0).unwrap();
        assert!(human.contains("s2"));
        let line = tsv.lines().nth(2).unwrap();
        let cols: Vec<&str> = line.split('\t').collect();
        assert_eq!(cols.len(), 1 + 3 + 3);
        assert_eq!(cols[4], "-10.0000");
        assert_eq!(cols[6], "-6.6667");
    }

    fn dist() -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(0.0f64..1.0, 4).prop_filter_map("zero mass", |raw| {
            let s: f64 = raw.iter().sum();
            (s > 1e-9).then(|| raw.iter().map(|v| v / s).collect())
        })
    }

    proptest! {
        #[test]
        fn symmetric_kl_is_symmetric(p in dist(), q in dist()) {
            let a = inter_class_distance(&p, &q).unwrap();
            let b = inter_class_distance(&q, &p).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
            prop_assert!(a >= 0.0);
        }
    }
}
