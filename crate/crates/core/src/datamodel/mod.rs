//! Shared vocabulary: samples, label spaces, session schedules and run
//! configuration.

mod config;

pub use config::{BackboneKind, CumulativeRule, RunConfig, CONFIG_KEYS};

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Stable identifier of a sample within a dataset store.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
pub struct SampleId(pub u64);

impl fmt::Display for SampleId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// One labelled image, `H×W×C` with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: SampleId,
    pub image: Array3<f32>,
    pub label: usize,
    pub session_of_origin: usize,
}

/// Disjoint class sets introduced by each session.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelSpace {
    pub per_session_classes: Vec<BTreeSet<usize>>,
}

impl LabelSpace {
    pub fn new(per_session_classes: Vec<BTreeSet<usize>>) -> Self {
        Self {
            per_session_classes,
        }
    }

    /// Contiguous assignment: base classes first, then `classes_per_increment`
    /// per later session.
    pub fn from_schedule(schedule: &SessionSchedule) -> Self {
        let mut sets = Vec::with_capacity(schedule.num_sessions);
        let mut next = 0;
        for t in 0..schedule.num_sessions {
            let n = schedule.classes_in_session(t);
            sets.push((next..next + n).collect());
            next += n;
        }
        Self::new(sets)
    }

    pub fn classes_seen_through(&self, session: usize) -> BTreeSet<usize> {
        self.per_session_classes
            .iter()
            .take(session + 1)
            .flatten()
            .copied()
            .collect()
    }

    pub fn session_of(&self, class: usize) -> Option<usize> {
        self.per_session_classes
            .iter()
            .position(|s| s.contains(&class))
    }
}

/// `true` iff the per-session class sets are pairwise disjoint.
pub fn validate_label_spaces(ls: &LabelSpace) -> bool {
    let mut seen = BTreeSet::new();
    ls.per_session_classes
        .iter()
        .flatten()
        .all(|c| seen.insert(*c))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DatasetName {
    PathMnist,
    BloodMnist,
    Synthetic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Composition {
    Imbalanced,
    LongTailed,
}

/// Exemplar selection strategy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SelectorKind {
    Uta,
    Random,
    Nme,
    Pool,
    Committee,
}

impl SelectorKind {
    pub const ALL: [SelectorKind; 5] = [
        SelectorKind::Uta,
        SelectorKind::Random,
        SelectorKind::Nme,
        SelectorKind::Pool,
        SelectorKind::Committee,
    ];
}

/// Similarity used by the prototype classifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SimilarityKind {
    Cos,
    Dot,
    Euc,
    Mah,
}

impl SimilarityKind {
    pub const ALL: [SimilarityKind; 4] = [
        SimilarityKind::Cos,
        SimilarityKind::Dot,
        SimilarityKind::Euc,
        SimilarityKind::Mah,
    ];
}

/// Named transformation bank used for semantic expansion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ExpansionVariant {
    Rotation,
    Rotation2,
    ColorPerm,
    ColorPerm3,
    RotColorPerm6,
    RotColorPerm12,
    None,
}

impl ExpansionVariant {
    pub const ALL: [ExpansionVariant; 7] = [
        ExpansionVariant::Rotation,
        ExpansionVariant::Rotation2,
        ExpansionVariant::ColorPerm,
        ExpansionVariant::ColorPerm3,
        ExpansionVariant::RotColorPerm6,
        ExpansionVariant::RotColorPerm12,
        ExpansionVariant::None,
    ];
}

macro_rules! text_enum {
    ($ty:ty, $what:literal, { $($variant:path => $name:literal $(| $alias:literal)*),+ $(,)? }) => {
        impl $ty {
            pub fn as_str(&self) -> &'static str {
                match self { $($variant => $name),+ }
            }
        }

        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $ty {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s.trim().to_ascii_lowercase().as_str() {
                    $($name $(| $alias)* => Ok($variant),)+
                    other => Err(Error::config(format!(
                        concat!("unknown ", $what, " `{}` (expected one of: {})"),
                        other,
                        [$($name),+].join(", ")
                    ))),
                }
            }
        }
    };
}

text_enum!(DatasetName, "dataset", {
    DatasetName::PathMnist => "pathmnist",
    DatasetName::BloodMnist => "bloodmnist",
    DatasetName::Synthetic => "synthetic",
});

text_enum!(Composition, "composition", {
    Composition::Imbalanced => "imbalanced",
    Composition::LongTailed => "long_tailed" | "long-tailed" | "longtailed",
});

text_enum!(SelectorKind, "selector", {
    SelectorKind::Uta => "uta",
    SelectorKind::Random => "random",
    SelectorKind::Nme => "nme",
    SelectorKind::Pool => "pool",
    SelectorKind::Committee => "committee",
});

text_enum!(SimilarityKind, "similarity", {
    SimilarityKind::Cos => "cos" | "cosine",
    SimilarityKind::Dot => "dot",
    SimilarityKind::Euc => "euc" | "euclidean",
    SimilarityKind::Mah => "mah" | "mahalanobis",
});

text_enum!(ExpansionVariant, "expansion variant", {
    ExpansionVariant::Rotation => "rotation",
    ExpansionVariant::Rotation2 => "rotation2",
    ExpansionVariant::ColorPerm => "color_perm",
    ExpansionVariant::ColorPerm3 => "color_perm3",
    ExpansionVariant::RotColorPerm6 => "rot_color_perm6",
    ExpansionVariant::RotColorPerm12 => "rot_color_perm12",
    ExpansionVariant::None => "none",
});

/// Ordered plan of base and incremental sessions for one dataset setup.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionSchedule {
    /// Total sessions including the base session (`T + 1`).
    pub num_sessions: usize,
    pub base_classes: usize,
    pub classes_per_increment: usize,
    pub samples_per_base_class: usize,
    pub samples_per_increment_class: usize,
    /// Total exemplar budget of the memory bank.
    pub memory_size: usize,
    /// Square image side in pixels.
    pub resolution: usize,
    pub channels: usize,
}

impl SessionSchedule {
    pub fn total_classes(&self) -> usize {
        self.base_classes + self.classes_per_increment * self.num_sessions.saturating_sub(1)
    }

    pub fn classes_in_session(&self, session: usize) -> usize {
        if session == 0 {
            self.base_classes
        } else {
            self.classes_per_increment
        }
    }

    pub fn samples_per_class_in_session(&self, session: usize) -> usize {
        if session == 0 {
            self.samples_per_base_class
        } else {
            self.samples_per_increment_class
        }
    }

    pub fn validate(&self) -> Result<()> {
        let checks: [(&str, bool, &str); 6] = [
            ("schedule.num_sessions", self.num_sessions >= 1, "must be >= 1"),
            ("schedule.base_classes", self.base_classes >= 1, "must be >= 1"),
            ("schedule.memory_size", self.memory_size > 0, "must be > 0"),
            ("schedule.resolution", self.resolution > 0, "must be > 0"),
            (
                "schedule.samples_per_base_class",
                self.samples_per_base_class > 0,
                "must be > 0",
            ),
            (
                "schedule.classes_per_increment",
                self.num_sessions == 1 || self.classes_per_increment > 0,
                "must be > 0 when there are incremental sessions",
            ),
        ];
        for (field, ok, why) in checks {
            if !ok {
                return Err(Error::config(format!("field `{field}` {why}")));
            }
        }
        if self.num_sessions > 1 && self.samples_per_increment_class == 0 {
            return Err(Error::config(
                "field `schedule.samples_per_increment_class` must be > 0",
            ));
        }
        Ok(())
    }
}

/// Preset schedule for a dataset and composition.
///
/// The MedMNIST rows follow the published protocol; `synthetic` is a small
/// desk-scale plan (3 sessions, 2 base classes of 200, one class per
/// increment).
pub fn build_schedule(dataset_name: &str, composition: Composition) -> Result<SessionSchedule> {
    let dataset: DatasetName = dataset_name.parse()?;
    Ok(preset_schedule(dataset, composition))
}

pub fn preset_schedule(dataset: DatasetName, composition: Composition) -> SessionSchedule {
    use Composition::*;
    use DatasetName::*;
    let (base_classes, per_base, resolution, memory, per_incr) = match (dataset, composition) {
        (PathMnist, Imbalanced) => (3, 1000, 28, 200, 50),
        (PathMnist, LongTailed) => (3, 1000, 28, 70, 20),
        (BloodMnist, Imbalanced) => (2, 800, 224, 150, 50),
        (BloodMnist, LongTailed) => (2, 800, 224, 60, 20),
        (Synthetic, Imbalanced) => (2, 200, 8, 30, 20),
        (Synthetic, LongTailed) => (2, 200, 8, 20, 10),
    };
    let num_sessions = match dataset {
        Synthetic => 3,
        _ => 7,
    };
    SessionSchedule {
        num_sessions,
        base_classes,
        classes_per_increment: 1,
        samples_per_base_class: per_base,
        samples_per_increment_class: per_incr,
        memory_size: memory,
        resolution,
        channels: 3,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ls(sets: &[&[usize]]) -> LabelSpace {
        LabelSpace::new(sets.iter().map(|s| s.iter().copied().collect()).collect())
    }

    #[test]
    fn dataset_presets() {
        let p = build_schedule("PathMNIST", Composition::Imbalanced).unwrap();
        assert_eq!(
            (p.num_sessions, p.base_classes, p.samples_per_base_class),
            (7, 3, 1000)
        );
        assert_eq!(
            (p.classes_per_increment, p.samples_per_increment_class, p.memory_size, p.resolution),
            (1, 50, 200, 28)
        );
        let b = build_schedule("BloodMNIST", Composition::LongTailed).unwrap();
        assert_eq!(
            (b.num_sessions, b.base_classes, b.samples_per_base_class),
            (7, 2, 800)
        );
        assert_eq!(
            (b.classes_per_increment, b.samples_per_increment_class, b.memory_size, b.resolution),
            (1, 20, 60, 224)
        );
        let s = build_schedule("synthetic", Composition::Imbalanced).unwrap();
        assert_eq!(
            (s.num_sessions, s.base_classes, s.samples_per_base_class),
            (3, 2, 200)
        );
        assert_eq!((s.samples_per_increment_class, s.memory_size), (20, 30));
    }

    #[test]
    fn unknown_dataset_is_config_error() {
        let err = build_schedule("cifar100", Composition::Imbalanced).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn totals_match_dataset_class_counts() {
        for comp in [Composition::Imbalanced, Composition::LongTailed] {
            let p = preset_schedule(DatasetName::PathMnist, comp);
            let b = preset_schedule(DatasetName::BloodMnist, comp);
            let introduced = |s: &SessionSchedule| {
                (0..s.num_sessions)
                    .map(|t| s.classes_in_session(t))
                    .sum::<usize>()
            };
            assert_eq!(introduced(&p), 9);
            assert_eq!(introduced(&b), 8);
            assert_eq!(p.total_classes(), 9);
            assert_eq!(b.total_classes(), 8);
        }
    }

    #[test]
    fn label_space_predicate() {
        assert!(validate_label_spaces(&ls(&[&[0, 1], &[2], &[3]])));
        assert!(!validate_label_spaces(&ls(&[&[0, 1], &[1]])));
        assert!(validate_label_spaces(&ls(&[&[], &[0]])));
    }

    #[test]
    fn contiguous_label_space_from_schedule() {
        let s = preset_schedule(DatasetName::PathMnist, Composition::Imbalanced);
        let space = LabelSpace::from_schedule(&s);
        assert!(validate_label_spaces(&space));
        assert_eq!(space.per_session_classes[0], [0, 1, 2].into_iter().collect());
        assert_eq!(space.per_session_classes[6], [8].into_iter().collect());
        assert_eq!(space.session_of(5), Some(3));
        assert_eq!(space.classes_seen_through(2).len(), 5);
    }

    #[test]
    fn enum_names_round_trip() {
        for v in ExpansionVariant::ALL {
            assert_eq!(v.as_str().parse::<ExpansionVariant>().unwrap(), v);
        }
        for v in SelectorKind::ALL {
            assert_eq!(v.to_string().parse::<SelectorKind>().unwrap(), v);
        }
        assert_eq!("RANDOM".parse::<SelectorKind>().unwrap(), SelectorKind::Random);
        assert!("median".parse::<SimilarityKind>().is_err());
    }

    proptest! {
        #[test]
        fn disjointness_is_order_insensitive(
            sets in proptest::collection::vec(proptest::collection::btree_set(0usize..12, 0..4), 0..6),
            rot in 0usize..6,
        ) {
            let a = LabelSpace::new(sets.clone());
            let mut permuted = sets.clone();
            if !permuted.is_empty() {
                let r = rot % permuted.len();
                permuted.rotate_left(r);
                permuted.reverse();
            }
            let b = LabelSpace::new(permuted);
            prop_assert_eq!(validate_label_spaces(&a), validate_label_spaces(&b));
        }
    }
}
