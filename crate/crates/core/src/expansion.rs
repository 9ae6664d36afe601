//! Semantic expansion: deterministic transformation banks, per-transformation
//! ("virtual") prototypes, the expanded prediction rule and the multi-task
//! loss over class and transformation heads.

use std::collections::BTreeMap;

use ndarray::{Array2, Array3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::classifier::{similarity, DiagonalStats};
use crate::datamodel::{ExpansionVariant, SimilarityKind};
use crate::error::{Error, Result};
use crate::nn::{Graph, Linear, Node, ParamStore};

const IDENTITY_PERM: [usize; 3] = [0, 1, 2];
const GBR: [usize; 3] = [1, 2, 0];
const BRG: [usize; 3] = [2, 0, 1];
const ALL_PERMS: [[usize; 3]; 6] = [
    IDENTITY_PERM,
    [0, 2, 1],
    [1, 0, 2],
    GBR,
    BRG,
    [2, 1, 0],
];

/// One deterministic view: quarter-turn rotation then channel permutation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transform {
    /// Counter-clockwise quarter turns, 0..=3.
    pub quarter_turns: u8,
    /// Output channel `c` takes input channel `perm[c]`; `None` keeps channels.
    pub perm: Option<[usize; 3]>,
}

impl Transform {
    pub const IDENTITY: Transform = Transform {
        quarter_turns: 0,
        perm: None,
    };

    fn rot(k: u8) -> Self {
        Self {
            quarter_turns: k,
            perm: None,
        }
    }

    fn rot_perm(k: u8, perm: [usize; 3]) -> Self {
        Self {
            quarter_turns: k,
            perm: (perm != IDENTITY_PERM).then_some(perm),
        }
    }

    pub fn apply(&self, image: &Array3<f32>) -> Result<Array3<f32>> {
        let (h, w, c) = image.dim();
        if !self.quarter_turns.is_multiple_of(4) && h != w {
            return Err(Error::input(format!(
                "rotation needs a square image, got {h}x{w}"
            )));
        }
        if self.perm.is_some() && c != 3 {
            return Err(Error::input(format!(
                "channel permutation needs 3 channels, got {c}"
            )));
        }
        let mut out = image.clone();
        for _ in 0..self.quarter_turns % 4 {
            out = rotate_quarter(&out);
        }
        if let Some(perm) = self.perm {
            let src = out.clone();
            for (dst, &from) in perm.iter().enumerate() {
                out.index_axis_mut(ndarray::Axis(2), dst)
                    .assign(&src.index_axis(ndarray::Axis(2), from));
            }
        }
        Ok(out)
    }
}

/// 90° counter-clockwise rotation of a square `n×n×c` image.
fn rotate_quarter(image: &Array3<f32>) -> Array3<f32> {
    let (n, _, c) = image.dim();
    Array3::from_shape_fn((n, n, c), |(i, j, ch)| image[[j, n - 1 - i, ch]])
}

/// Ordered transformation set of one expansion variant; slot 0 is identity.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransformationBank {
    pub variant: ExpansionVariant,
    pub transforms: Vec<Transform>,
}

impl TransformationBank {
    pub fn new(variant: ExpansionVariant) -> Self {
        use ExpansionVariant::*;
        let transforms = match variant {
            None => vec![Transform::IDENTITY],
            Rotation => (0..4).map(Transform::rot).collect(),
            Rotation2 => vec![Transform::rot(0), Transform::rot(2)],
            ColorPerm => ALL_PERMS.iter().map(|&p| Transform::rot_perm(0, p)).collect(),
            ColorPerm3 => [IDENTITY_PERM, GBR, BRG]
                .iter()
                .map(|&p| Transform::rot_perm(0, p))
                .collect(),
            RotColorPerm6 => [0u8, 2]
                .iter()
                .flat_map(|&k| [IDENTITY_PERM, GBR, BRG].map(|p| Transform::rot_perm(k, p)))
                .collect(),
            RotColorPerm12 => (0u8..4)
                .flat_map(|k| [IDENTITY_PERM, GBR, BRG].map(|p| Transform::rot_perm(k, p)))
                .collect(),
        };
        Self {
            variant,
            transforms,
        }
    }

    /// Number of views `M`.
    pub fn m(&self) -> usize {
        self.transforms.len()
    }

    pub fn needs_color(&self) -> bool {
        self.transforms.iter().any(|t| t.perm.is_some())
    }

    /// Checks that images with `channels` channels can be expanded.
    pub fn check_channels(&self, channels: usize) -> Result<()> {
        if self.needs_color() && channels != 3 {
            return Err(Error::input(format!(
                "expansion variant {} permutes colour channels but images have {channels}",
                self.variant
            )));
        }
        Ok(())
    }
}

/// The `M` views of one image; view 0 is the image itself.
pub fn expand(image: &Array3<f32>, bank: &TransformationBank) -> Result<Vec<Array3<f32>>> {
    bank.check_channels(image.dim().2)?;
    bank.transforms.iter().map(|t| t.apply(image)).collect()
}

/// Per-(class, view) prototypes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpandedPrototypeSet {
    pub num_transforms: usize,
    pub session: usize,
    /// Mean embedding of each cell.
    means: BTreeMap<(usize, usize), Vec<f64>>,
    /// Unit-norm direction of each cell mean.
    units: BTreeMap<(usize, usize), Vec<f64>>,
}

const DEGENERATE_NORM: f64 = 1e-12;

/// L2-normalised mean embedding of every `(class, view)` cell.
pub fn build_virtual_prototypes(
    embeddings: &BTreeMap<(usize, usize), Vec<Vec<f64>>>,
    num_transforms: usize,
    session: usize,
) -> Result<ExpandedPrototypeSet> {
    if num_transforms == 0 {
        return Err(Error::input("expansion needs at least one view"));
    }
    let mut means = BTreeMap::new();
    let mut units = BTreeMap::new();
    let mut dim = None;
    for (&(class, m), vecs) in embeddings {
        if m >= num_transforms {
            return Err(Error::input(format!(
                "view index {m} outside 0..{num_transforms}"
            )));
        }
        if vecs.is_empty() {
            return Err(Error::input(format!("no embeddings for class {class}, view {m}")));
        }
        let d = *dim.get_or_insert(vecs[0].len());
        if vecs.iter().any(|v| v.len() != d) {
            return Err(Error::input("prototype embeddings differ in dimension"));
        }
        let mut mean = vec![0.0; d];
        for v in vecs {
            for (a, b) in mean.iter_mut().zip(v) {
                *a += b;
            }
        }
        mean.iter_mut().for_each(|a| *a /= vecs.len() as f64);
        let norm = mean.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm < DEGENERATE_NORM {
            return Err(Error::input(format!(
                "class {class}, view {m}: mean embedding is zero"
            )));
        }
        units.insert((class, m), mean.iter().map(|v| v / norm).collect());
        means.insert((class, m), mean);
    }
    let classes: Vec<usize> = means.keys().map(|(c, _)| *c).collect();
    for &c in &classes {
        for m in 0..num_transforms {
            if !means.contains_key(&(c, m)) {
                return Err(Error::input(format!("class {c} lacks a prototype for view {m}")));
            }
        }
    }
    Ok(ExpandedPrototypeSet {
        num_transforms,
        session,
        means,
        units,
    })
}

impl ExpandedPrototypeSet {
    pub fn classes(&self) -> Vec<usize> {
        let mut c: Vec<usize> = self.means.keys().map(|(c, _)| *c).collect();
        c.dedup();
        c
    }

    pub fn len(&self) -> usize {
        self.means.len()
    }

    pub fn is_empty(&self) -> bool {
        self.means.is_empty()
    }

    pub fn unit(&self, class: usize, m: usize) -> Option<&[f64]> {
        self.units.get(&(class, m)).map(Vec::as_slice)
    }

    pub fn mean(&self, class: usize, m: usize) -> Option<&[f64]> {
        self.means.get(&(class, m)).map(Vec::as_slice)
    }

    pub fn dim(&self) -> usize {
        self.means.values().next().map_or(0, Vec::len)
    }

    /// `classes × d` matrix of view-`m` prototypes, unit-norm or raw means.
    pub fn matrix(&self, m: usize, unit: bool) -> Result<Array2<f64>> {
        let classes = self.classes();
        let d = self.dim();
        let mut out = Array2::zeros((classes.len(), d));
        for (row, &c) in classes.iter().enumerate() {
            let v = if unit { self.unit(c, m) } else { self.mean(c, m) }
                .ok_or_else(|| Error::internal(format!("missing prototype ({c}, {m})")))?;
            out.row_mut(row).assign(&ndarray::ArrayView1::from(v));
        }
        Ok(out)
    }
}

/// Σ_m sim(view_m, p_{c,m}) for every class, in [`ExpandedPrototypeSet::classes`] order.
pub fn expanded_scores(
    views: &[Vec<f64>],
    protos: &ExpandedPrototypeSet,
    kind: SimilarityKind,
    stats: Option<&DiagonalStats>,
) -> Result<Vec<f64>> {
    if views.len() != protos.num_transforms {
        return Err(Error::input(format!(
            "{} views supplied for {} transformations",
            views.len(),
            protos.num_transforms
        )));
    }
    protos
        .classes()
        .into_iter()
        .map(|c| {
            let mut total = 0.0;
            for (m, v) in views.iter().enumerate() {
                let p = protos
                    .mean(c, m)
                    .ok_or_else(|| Error::internal(format!("missing prototype ({c}, {m})")))?;
                total += similarity(v, p, kind, stats)?;
            }
            Ok(total)
        })
        .collect()
}

/// First index of the maximum; ties go to the lowest index.
pub fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

/// Class whose prototypes are most similar to all views of one sample.
pub fn expanded_predict(
    views: &[Vec<f64>],
    protos: &ExpandedPrototypeSet,
    kind: SimilarityKind,
    stats: Option<&DiagonalStats>,
) -> Result<usize> {
    let scores = expanded_scores(views, protos, kind, stats)?;
    if scores.is_empty() {
        return Err(Error::input("no prototypes to predict with"));
    }
    Ok(protos.classes()[argmax(&scores)])
}

/// Class head ψ (over all classes of the run) and transformation head φ.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MultiTaskHeads {
    pub psi: Linear,
    pub phi: Linear,
}

impl MultiTaskHeads {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        embed_dim: usize,
        num_classes: usize,
        num_transforms: usize,
    ) -> Self {
        Self {
            psi: Linear::new(store, rng, "psi", embed_dim, num_classes),
            phi: Linear::new(store, rng, "phi", embed_dim, num_transforms),
        }
    }
}

/// Mean over views of `CE(ψ(z), y) + CE(φ(z), j)`, restricted to `seen` classes.
#[allow(clippy::too_many_arguments)]
pub fn multitask_loss(
    g: &mut Graph,
    embeddings: Node,
    class_labels: &[usize],
    transform_indices: &[usize],
    heads: &MultiTaskHeads,
    p: &[Node],
    seen: usize,
) -> Result<Node> {
    let m = heads.phi.out_dim;
    if let Some(j) = transform_indices.iter().find(|&&j| j >= m) {
        return Err(Error::input(format!("transform index {j} outside 0..{m}")));
    }
    if let Some(y) = class_labels.iter().find(|&&y| y >= seen) {
        return Err(Error::input(format!("class label {y} outside the {seen} seen classes")));
    }
    let class_logits = heads.psi.forward(g, embeddings, p)?;
    let class_logits = g.slice_cols(class_logits, 0, seen)?;
    let ce_class = g.softmax_cross_entropy(class_logits, class_labels)?;
    let t_logits = heads.phi.forward(g, embeddings, p)?;
    let ce_t = g.softmax_cross_entropy(t_logits, transform_indices)?;
    g.weighted_sum(&[(ce_class, 1.0), (ce_t, 1.0)])
}
