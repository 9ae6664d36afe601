//! Dataset stores: MedMNIST archives, the synthetic generator, and the
//! materialisation of a session schedule into per-session sample lists.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::path::{Path, PathBuf};

use ndarray::{s, Array3, Array4, ArrayD, Axis, Ix4, IxDyn};
use ndarray_npy::NpzReader;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::datamodel::{DatasetName, RunConfig, Sample, SampleId, SessionSchedule};
use crate::error::{Error, Result};

/// Environment variable naming the directory that holds MedMNIST archives.
pub const DATA_DIR_ENV: &str = "ESSENTIAL_DATA_DIR";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Images (`N×H×W×C`, 8-bit) and labels of one split.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitData {
    pub images: Array4<u8>,
    pub labels: Vec<usize>,
}

/// In-memory dataset with a train and a test split.
///
/// Pixels are stored as bytes and scaled to `[0, 1]` on access. Train sample
/// `i` has id `i`; test sample `j` has id `n_train + j`.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetStore {
    pub name: String,
    pub train: SplitData,
    pub test: SplitData,
    pub num_classes: usize,
}

impl DatasetStore {
    pub fn new(name: impl Into<String>, train: SplitData, test: SplitData) -> Result<Self> {
        for (what, split) in [("train", &train), ("test", &test)] {
            if split.images.shape()[0] != split.labels.len() {
                return Err(Error::data(format!(
                    "{what} split has {} images but {} labels",
                    split.images.shape()[0],
                    split.labels.len()
                )));
            }
            if split.labels.is_empty() {
                return Err(Error::data(format!("{what} split is empty")));
            }
        }
        let (_, h, w, c) = train.images.dim();
        let (_, th, tw, tc) = test.images.dim();
        if (h, w, c) != (th, tw, tc) {
            return Err(Error::data("train and test images differ in shape"));
        }
        let num_classes = train
            .labels
            .iter()
            .chain(&test.labels)
            .max()
            .map_or(0, |m| m + 1);
        Ok(Self {
            name: name.into(),
            train,
            test,
            num_classes,
        })
    }

    pub fn resolution(&self) -> (usize, usize) {
        let (_, h, w, _) = self.train.images.dim();
        (h, w)
    }

    pub fn channels(&self) -> usize {
        self.train.images.dim().3
    }

    fn locate(&self, id: SampleId) -> Result<(Split, usize)> {
        let n_train = self.train.labels.len() as u64;
        let n_test = self.test.labels.len() as u64;
        match id.0 {
            i if i < n_train => Ok((Split::Train, i as usize)),
            i if i < n_train + n_test => Ok((Split::Test, (i - n_train) as usize)),
            _ => Err(Error::input(format!("sample {id} is not in dataset {}", self.name))),
        }
    }

    pub fn id_of(&self, split: Split, index: usize) -> SampleId {
        match split {
            Split::Train => SampleId(index as u64),
            Split::Test => SampleId((self.train.labels.len() + index) as u64),
        }
    }

    fn split(&self, split: Split) -> &SplitData {
        match split {
            Split::Train => &self.train,
            Split::Test => &self.test,
        }
    }

    /// Image scaled to `[0, 1]`.
    pub fn image(&self, id: SampleId) -> Result<Array3<f32>> {
        let (split, i) = self.locate(id)?;
        Ok(self
            .split(split)
            .images
            .index_axis(Axis(0), i)
            .mapv(|v| f32::from(v) / 255.0))
    }

    /// Label as stored in the dataset (before any session remapping).
    pub fn raw_label(&self, id: SampleId) -> Result<usize> {
        let (split, i) = self.locate(id)?;
        Ok(self.split(split).labels[i])
    }

    pub fn sample(&self, id: SampleId, label: usize, session_of_origin: usize) -> Result<Sample> {
        Ok(Sample {
            id,
            image: self.image(id)?,
            label,
            session_of_origin,
        })
    }

    /// Indices of each raw label within a split.
    fn by_label(&self, split: Split) -> BTreeMap<usize, Vec<usize>> {
        let mut out: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, &l) in self.split(split).labels.iter().enumerate() {
            out.entry(l).or_default().push(i);
        }
        out
    }

    /// Loads the dataset a run configuration names.
    pub fn for_config(cfg: &RunConfig) -> Result<Self> {
        let store = match cfg.dataset {
            DatasetName::Synthetic => generate_synthetic(&SyntheticSpec {
                num_classes: cfg.schedule.total_classes(),
                train_per_class: cfg
                    .schedule
                    .samples_per_base_class
                    .max(cfg.schedule.samples_per_increment_class),
                test_per_class: cfg.synthetic_test_per_class,
                resolution: cfg.schedule.resolution,
                noise: cfg.synthetic_noise,
                seed: cfg.seed,
            })?,
            DatasetName::PathMnist | DatasetName::BloodMnist => {
                let dir = data_dir(cfg.data_dir.as_deref())?;
                let path = archive_path(&dir, cfg.dataset, cfg.schedule.resolution)?;
                load_medmnist_archive(&path)?
            }
        };
        let (h, w) = store.resolution();
        if (h, w) != (cfg.schedule.resolution, cfg.schedule.resolution) {
            return Err(Error::data(format!(
                "dataset images are {h}x{w} but the schedule expects {r}x{r}",
                r = cfg.schedule.resolution
            )));
        }
        Ok(store)
    }
}

fn data_dir(configured: Option<&Path>) -> Result<PathBuf> {
    if let Some(p) = configured {
        return Ok(p.to_path_buf());
    }
    std::env::var_os(DATA_DIR_ENV)
        .map(PathBuf::from)
        .ok_or_else(|| {
            Error::data(format!(
                "no data directory: set `data_dir` in the config or ${DATA_DIR_ENV}"
            ))
        })
}

/// `<dir>/<name>_<res>.npz` if present, else `<dir>/<name>.npz`.
pub fn archive_path(dir: &Path, dataset: DatasetName, resolution: usize) -> Result<PathBuf> {
    let stem = dataset.as_str();
    let sized = dir.join(format!("{stem}_{resolution}.npz"));
    if sized.exists() {
        return Ok(sized);
    }
    let plain = dir.join(format!("{stem}.npz"));
    if plain.exists() {
        return Ok(plain);
    }
    Err(Error::data(format!(
        "neither {} nor {} exists",
        sized.display(),
        plain.display()
    )))
}

fn read_images(npz: &mut NpzReader<File>, path: &Path, key: &str) -> Result<Array4<u8>> {
    let raw: ArrayD<u8> = npz
        .by_name(key)
        .map_err(|e| Error::format(path, format!("array `{key}`: {e}")))?;
    let raw = match raw.ndim() {
        3 => raw.insert_axis(Axis(3)),
        4 => raw,
        n => {
            return Err(Error::format(
                path,
                format!("array `{key}` has {n} dimensions, expected 3 or 4"),
            ))
        }
    };
    raw.into_dimensionality::<Ix4>()
        .map_err(|e| Error::format(path, format!("array `{key}`: {e}")))
}

fn read_labels(npz: &mut NpzReader<File>, path: &Path, key: &str) -> Result<Vec<usize>> {
    let flat = |shape: &[usize]| shape.iter().skip(1).all(|&d| d == 1);
    if let Ok(a) = npz.by_name::<ndarray::OwnedRepr<u8>, IxDyn>(key) {
        if !flat(a.shape()) {
            return Err(Error::format(path, format!("array `{key}` is not a label column")));
        }
        return Ok(a.iter().map(|&v| usize::from(v)).collect());
    }
    let a: ArrayD<i64> = npz
        .by_name(key)
        .map_err(|e| Error::format(path, format!("array `{key}`: {e}")))?;
    if !flat(a.shape()) {
        return Err(Error::format(path, format!("array `{key}` is not a label column")));
    }
    a.iter()
        .map(|&v| {
            usize::try_from(v)
                .map_err(|_| Error::format(path, format!("array `{key}` holds label {v}")))
        })
        .collect()
}

/// Reads a MedMNIST `.npz` archive (`train_images`, `train_labels`,
/// `test_images`, `test_labels`).
pub fn load_medmnist_archive(path: &Path) -> Result<DatasetStore> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut npz =
        NpzReader::new(file).map_err(|e| Error::format(path, format!("not an npz archive: {e}")))?;
    let names = npz
        .names()
        .map_err(|e| Error::format(path, format!("unreadable archive: {e}")))?;
    for key in ["train_images", "train_labels", "test_images", "test_labels"] {
        if !names.iter().any(|n| n == key) {
            return Err(Error::format(path, format!("missing array `{key}`")));
        }
    }
    let mut split = |img: &str, lab: &str| -> Result<SplitData> {
        let images = read_images(&mut npz, path, img)?;
        let labels = read_labels(&mut npz, path, lab)?;
        if images.shape()[0] != labels.len() {
            return Err(Error::format(
                path,
                format!(
                    "`{img}` has {} images but `{lab}` has {} labels",
                    images.shape()[0],
                    labels.len()
                ),
            ));
        }
        Ok(SplitData { images, labels })
    };
    let train = split("train_images", "train_labels")?;
    let test = split("test_images", "test_labels")?;
    let name = path
        .file_stem()
        .map_or_else(|| "medmnist".into(), |s| s.to_string_lossy().into_owned());
    DatasetStore::new(name, train, test).map_err(|e| Error::format(path, e.to_string()))
}

/// Parameters of the synthetic generator.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub resolution: usize,
    /// Standard deviation of additive pixel noise; also scales brightness jitter.
    pub noise: f64,
    pub seed: u64,
}

fn hue_to_rgb(h: f64) -> [f64; 3] {
    let k = |n: f64| {
        let k = (n + h * 6.0) % 6.0;
        1.0 - (k.min(4.0 - k).clamp(0.0, 1.0))
    };
    [k(5.0), k(3.0), k(1.0)]
}

/// Shape mask of class `class` at pixel `(i, j)` of an `n×n` image.
fn pattern(class: usize, i: usize, j: usize, n: usize) -> f64 {
    let width = 1 + class / 3;
    let on = match class % 3 {
        // horizontal bars
        0 => (i / width).is_multiple_of(2),
        // concentric rings around an off-centre point
        1 => {
            let (ci, cj) = (n as f64 * 0.35, n as f64 * 0.4);
            let r = ((i as f64 - ci).powi(2) + (j as f64 - cj).powi(2)).sqrt();
            (r as usize / width).is_multiple_of(2)
        }
        // checkerboard
        _ => ((i / width) + (j / width)).is_multiple_of(2),
    };
    // A corner marker breaks rotational symmetry.
    let marker = i < n.div_ceil(4) && j < n.div_ceil(4);
    if marker {
        1.0
    } else if on {
        0.85
    } else {
        0.15
    }
}

/// Class-conditional images: per-class hue and shape, a corner marker,
/// brightness jitter and additive Gaussian noise.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<DatasetStore> {
    if spec.num_classes < 2 {
        return Err(Error::config("synthetic data needs at least two classes"));
    }
    if spec.resolution < 2 || spec.train_per_class == 0 || spec.test_per_class == 0 {
        return Err(Error::config(
            "synthetic data needs resolution >= 2 and positive per-class counts",
        ));
    }
    if !(spec.noise >= 0.0) {
        return Err(Error::config("synthetic noise must be >= 0"));
    }
    let n = spec.resolution;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5EED_DA7A);
    let noise = Normal::new(0.0, spec.noise.max(1e-300)).expect("finite std");
    let templates: Vec<Array3<f64>> = (0..spec.num_classes)
        .map(|c| {
            let rgb = hue_to_rgb(c as f64 / spec.num_classes as f64);
            Array3::from_shape_fn((n, n, 3), |(i, j, ch)| {
                let m = pattern(c, i, j, n);
                m * (0.35 + 0.65 * rgb[ch])
            })
        })
        .collect();
    let mut make = |per_class: usize| -> SplitData {
        let total = per_class * spec.num_classes;
        let mut images = Array4::<u8>::zeros((total, n, n, 3));
        let mut labels = Vec::with_capacity(total);
        for c in 0..spec.num_classes {
            for k in 0..per_class {
                let idx = c * per_class + k;
                let gain = 1.0 + spec.noise * (rng.random::<f64>() * 2.0 - 1.0);
                let mut img = images.slice_mut(s![idx, .., .., ..]);
                for ((i, j, ch), px) in img.indexed_iter_mut() {
                    let eps = if spec.noise > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                    let v = (templates[c][[i, j, ch]] * gain + eps).clamp(0.0, 1.0);
                    *px = (v * 255.0).round() as u8;
                }
                labels.push(c);
            }
        }
        SplitData { images, labels }
    };
    let train = make(spec.train_per_class);
    let test = make(spec.test_per_class);
    DatasetStore::new("synthetic", train, test)
}

/// Training ids and class set of one session.
#[derive(Debug, Clone, PartialEq)]
pub struct SessionData {
    pub session: usize,
    pub classes: Vec<usize>,
    pub train: Vec<SampleId>,
}

/// A schedule laid over a dataset store. Classes are remapped so that
/// session-order class `k` is dataset label `class_order[k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Materialized {
    pub class_order: Vec<usize>,
    pub sessions: Vec<SessionData>,
    /// Full test split of every session's classes.
    pub test_by_session: Vec<Vec<SampleId>>,
    pub class_of: BTreeMap<SampleId, usize>,
    pub session_of: BTreeMap<SampleId, usize>,
}

impl Materialized {
    /// Cumulative test set at session `t`.
    pub fn test_through(&self, t: usize) -> Vec<SampleId> {
        self.test_by_session[..=t].iter().flatten().copied().collect()
    }

    pub fn class(&self, id: SampleId) -> Result<usize> {
        self.class_of
            .get(&id)
            .copied()
            .ok_or_else(|| Error::input(format!("sample {id} is not part of the schedule")))
    }
}

/// Subsamples each class to the scheduled count, uniformly without
/// replacement under `seed`.
pub fn materialize_sessions(
    store: &DatasetStore,
    schedule: &SessionSchedule,
    class_order: Option<&[usize]>,
    seed: u64,
) -> Result<Materialized> {
    let total = schedule.total_classes();
    let train_by = store.by_label(Split::Train);
    let test_by = store.by_label(Split::Test);
    let order: Vec<usize> = match class_order {
        Some(o) => o[..total.min(o.len())].to_vec(),
        None => train_by.keys().copied().take(total).collect(),
    };
    if order.len() < total {
        return Err(Error::data(format!(
            "schedule needs {total} classes but the dataset has {}",
            order.len()
        )));
    }
    let unique: BTreeSet<usize> = order.iter().copied().collect();
    if unique.len() != order.len() {
        return Err(Error::data("class order repeats a class"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5E55_1045);
    let mut sessions = Vec::with_capacity(schedule.num_sessions);
    let mut test_by_session = Vec::with_capacity(schedule.num_sessions);
    let mut class_of = BTreeMap::new();
    let mut session_of = BTreeMap::new();
    let mut next = 0;
    for t in 0..schedule.num_sessions {
        let count = schedule.classes_in_session(t);
        let per_class = schedule.samples_per_class_in_session(t);
        let mut classes = Vec::with_capacity(count);
        let mut train = Vec::new();
        let mut test = Vec::new();
        for class in next..next + count {
            let raw = order[class];
            let pool = train_by.get(&raw).map(Vec::as_slice).unwrap_or(&[]);
            if pool.len() < per_class {
                return Err(Error::data(format!(
                    "class {raw} has {} training samples, session {t} needs {per_class}",
                    pool.len()
                )));
            }
            let tests = test_by.get(&raw).map(Vec::as_slice).unwrap_or(&[]);
            if tests.is_empty() {
                return Err(Error::data(format!("class {raw} has no test samples")));
            }
            let mut chosen: Vec<usize> = pool.choose_multiple(&mut rng, per_class).copied().collect();
            chosen.sort_unstable();
            for i in chosen {
                let id = store.id_of(Split::Train, i);
                train.push(id);
                class_of.insert(id, class);
                session_of.insert(id, t);
            }
            for &j in tests {
                let id = store.id_of(Split::Test, j);
                test.push(id);
                class_of.insert(id, class);
                session_of.insert(id, t);
            }
            classes.push(class);
        }
        next += count;
        sessions.push(SessionData {
            session: t,
            classes,
            train,
        });
        test_by_session.push(test);
    }
    Ok(Materialized {
        class_order: order,
        sessions,
        test_by_session,
        class_of,
        session_of,
    })
}
