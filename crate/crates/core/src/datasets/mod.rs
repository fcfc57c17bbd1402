//! Image datasets, deterministic splits and labeled-subset selection.
//!
//! Pixels are stored as bytes and scaled to `[0, 1]` when a batch is
//! gathered, so the full CIFAR10 train set fits comfortably in memory.

mod cifar;
mod matfile;
mod svhn;
mod synthetic;

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tbigan_nn::Tensor;

use crate::error::{Error, Result};

pub use cifar::load_cifar10;
pub use matfile::{read_mat, MatArray, MatData};
pub use svhn::load_svhn;
pub use synthetic::{synthetic_shapes, SyntheticConfig, MAX_SYNTHETIC_CLASSES};

/// Examples per class moved to the validation split of the benchmark datasets.
pub const VALIDATION_PER_CLASS: usize = 50;

/// Environment variable consulted when no data root is given explicitly.
pub const DATA_ROOT_ENV: &str = "TBIGAN_DATA_ROOT";

/// A labeled collection of equally-shaped images.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ImageSet {
    shape: [usize; 3],
    pixels: Vec<u8>,
    labels: Vec<usize>,
}

impl ImageSet {
    pub fn new(shape: [usize; 3], pixels: Vec<u8>, labels: Vec<usize>) -> Result<Self> {
        let per: usize = shape.iter().product();
        if per == 0 || pixels.len() != per * labels.len() {
            return Err(Error::Contract(format!(
                "{} pixel bytes do not describe {} images of shape {shape:?}",
                pixels.len(),
                labels.len()
            )));
        }
        Ok(Self { shape, pixels, labels })
    }

    pub fn empty(shape: [usize; 3]) -> Self {
        Self {
            shape,
            pixels: Vec::new(),
            labels: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn image_bytes(&self, i: usize) -> &[u8] {
        let per: usize = self.shape.iter().product();
        &self.pixels[i * per..(i + 1) * per]
    }

    /// `[indices.len(), c, h, w]` batch with values in `[0, 1]`.
    pub fn batch(&self, indices: &[usize]) -> Tensor {
        let per: usize = self.shape.iter().product();
        let mut data = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            data.extend(self.image_bytes(i).iter().map(|&b| f64::from(b) / 255.0));
        }
        let [c, h, w] = self.shape;
        Tensor::from_vec(&[indices.len(), c, h, w], data).expect("batch shape")
    }

    pub fn all(&self) -> Tensor {
        self.batch(&(0..self.len()).collect::<Vec<_>>())
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        let mut pixels = Vec::new();
        for &i in indices {
            pixels.extend_from_slice(self.image_bytes(i));
        }
        Self {
            shape: self.shape,
            pixels,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    pub fn class_counts(&self, class_count: usize) -> Vec<usize> {
        let mut counts = vec![0; class_count];
        for &l in &self.labels {
            if l < class_count {
                counts[l] += 1;
            }
        }
        counts
    }
}

/// Train, validation and test partitions of one dataset.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetSplit {
    pub name: String,
    pub train: ImageSet,
    pub validation: ImageSet,
    pub test: ImageSet,
    pub class_count: usize,
}

impl DatasetSplit {
    pub fn image_shape(&self) -> [usize; 3] {
        self.train.shape()
    }

    pub fn check_invariants(&self) -> Result<()> {
        for (part, set) in [("train", &self.train), ("validation", &self.validation), ("test", &self.test)] {
            if set.shape() != self.image_shape() {
                return Err(Error::Data(format!("{part} images have a different shape")));
            }
            if let Some(bad) = set.labels().iter().find(|&&l| l >= self.class_count) {
                return Err(Error::Data(format!("{part} label {bad} outside [0, {})", self.class_count)));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum DatasetId {
    Cifar10,
    Svhn,
    Synthetic,
}

impl FromStr for DatasetId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "cifar10" | "cifar-10" => Ok(DatasetId::Cifar10),
            "svhn" => Ok(DatasetId::Svhn),
            "synthetic" => Ok(DatasetId::Synthetic),
            other => Err(Error::Usage(format!(
                "unknown dataset {other:?} (expected cifar10, svhn or synthetic)"
            ))),
        }
    }
}

impl fmt::Display for DatasetId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DatasetId::Cifar10 => "cifar10",
            DatasetId::Svhn => "svhn",
            DatasetId::Synthetic => "synthetic",
        })
    }
}

/// Explicit root, else `$TBIGAN_DATA_ROOT`, else `./data`.
pub fn resolve_data_root(explicit: Option<&Path>) -> PathBuf {
    explicit
        .map(Path::to_path_buf)
        .or_else(|| std::env::var_os(DATA_ROOT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("data"))
}

/// Load a dataset by id. Benchmarks read their published binary archives
/// under `root`; the synthetic set is rendered from `synthetic`.
pub fn load_dataset(id: DatasetId, root: &Path, synthetic: &SyntheticConfig) -> Result<DatasetSplit> {
    let split = match id {
        DatasetId::Cifar10 => load_cifar10(root)?,
        DatasetId::Svhn => load_svhn(root)?,
        DatasetId::Synthetic => synthetic::render(synthetic)?,
    };
    split.check_invariants()?;
    Ok(split)
}

/// Move the last `VALIDATION_PER_CLASS` examples of every class (in the
/// given order) into a validation set; the remainder keeps its order.
pub fn make_validation_split(set: &ImageSet, class_count: usize) -> Result<(ImageSet, ImageSet)> {
    split_last_per_class(set, class_count, VALIDATION_PER_CLASS)
}

pub fn split_last_per_class(set: &ImageSet, class_count: usize, per_class: usize) -> Result<(ImageSet, ImageSet)> {
    let counts = set.class_counts(class_count);
    if let Some((class, &have)) = counts.iter().enumerate().find(|(_, &c)| c < per_class) {
        return Err(Error::Data(format!(
            "class {class} has {have} examples, validation needs {per_class}"
        )));
    }
    let mut seen = vec![0usize; class_count];
    let mut train = Vec::new();
    let mut validation = Vec::new();
    for (i, &l) in set.labels().iter().enumerate() {
        if l >= class_count {
            return Err(Error::Data(format!("label {l} outside [0, {class_count})")));
        }
        seen[l] += 1;
        if seen[l] > counts[l] - per_class {
            validation.push(i);
        } else {
            train.push(i);
        }
    }
    Ok((set.subset(&train), set.subset(&validation)))
}

/// The labeled portion of the train split: `n_per_class` indices per class.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabeledIndex {
    per_class: BTreeMap<usize, Vec<usize>>,
    n_per_class: usize,
    seed: u64,
}

impl LabeledIndex {
    pub fn from_parts(per_class: BTreeMap<usize, Vec<usize>>, seed: u64) -> Result<Self> {
        let n = per_class.values().next().map_or(0, Vec::len);
        if n == 0 || per_class.values().any(|v| v.len() != n) {
            return Err(Error::Contract("labeled classes must share a positive size".into()));
        }
        let mut per_class = per_class;
        per_class.values_mut().for_each(|v| v.sort_unstable());
        Ok(Self {
            per_class,
            n_per_class: n,
            seed,
        })
    }

    pub fn n_per_class(&self) -> usize {
        self.n_per_class
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn classes(&self) -> impl Iterator<Item = usize> + '_ {
        self.per_class.keys().copied()
    }

    pub fn class_count(&self) -> usize {
        self.per_class.len()
    }

    pub fn indices_of(&self, class: usize) -> &[usize] {
        self.per_class.get(&class).map_or(&[], Vec::as_slice)
    }

    /// All `(train index, class)` pairs, class-major and sorted within a class.
    pub fn entries(&self) -> Vec<(usize, usize)> {
        self.per_class
            .iter()
            .flat_map(|(&c, idx)| idx.iter().map(move |&i| (i, c)))
            .collect()
    }

    pub fn len(&self) -> usize {
        self.n_per_class * self.per_class.len()
    }

    pub fn is_empty(&self) -> bool {
        self.per_class.is_empty()
    }

    /// The labeled images as their own set, in [`LabeledIndex::entries`] order.
    pub fn images(&self, train: &ImageSet) -> ImageSet {
        let idx: Vec<usize> = self.entries().into_iter().map(|(i, _)| i).collect();
        train.subset(&idx)
    }
}

/// Seeded uniform choice without replacement of `n_per_class` train
/// examples per class.
pub fn select_labeled_subset(split: &DatasetSplit, n_per_class: usize, seed: u64) -> Result<LabeledIndex> {
    if n_per_class == 0 {
        return Err(Error::Data(
            "n_per_class must be positive; train the bigan model for an unsupervised run".into(),
        ));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); split.class_count];
    for (i, &l) in split.train.labels().iter().enumerate() {
        by_class[l].push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut per_class = BTreeMap::new();
    for (class, members) in by_class.iter().enumerate() {
        if members.len() < n_per_class {
            return Err(Error::Data(format!(
                "class {class} has {} train examples, cannot label {n_per_class}",
                members.len()
            )));
        }
        let mut chosen: Vec<usize> = rand::seq::index::sample(&mut rng, members.len(), n_per_class)
            .into_iter()
            .map(|j| members[j])
            .collect();
        chosen.sort_unstable();
        per_class.insert(class, chosen);
    }
    Ok(LabeledIndex {
        per_class,
        n_per_class,
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(labels: &[usize]) -> ImageSet {
        let pixels = labels.iter().enumerate().map(|(i, _)| i as u8).collect();
        ImageSet::new([1, 1, 1], pixels, labels.to_vec()).unwrap()
    }

    #[test]
    fn validation_takes_last_examples_in_order() {
        // class 0 at even positions (60 of them), class 1 at odd positions
        let labels: Vec<usize> = (0..120).map(|i| i % 2).collect();
        let set = toy(&labels);
        let (train, val) = make_validation_split(&set, 2).unwrap();
        assert_eq!(val.len(), 100);
        assert_eq!(train.len(), 20);
        // first ten of each class stay in train, in original order
        let train_ids: Vec<u8> = (0..train.len()).map(|i| train.image_bytes(i)[0]).collect();
        assert_eq!(train_ids, (0..20).collect::<Vec<u8>>());
        let val_ids: Vec<u8> = (0..val.len()).map(|i| val.image_bytes(i)[0]).collect();
        assert_eq!(val_ids, (20..120).collect::<Vec<u8>>());
    }

    #[test]
    fn validation_rejects_small_classes() {
        let mut labels = vec![0; 60];
        labels.extend(vec![1; 49]);
        assert!(matches!(make_validation_split(&toy(&labels), 2), Err(Error::Data(_))));
    }

    #[test]
    fn split_is_disjoint_and_complete() {
        let labels: Vec<usize> = (0..200).map(|i| (i * 7) % 3).collect();
        let set = toy(&labels);
        let (train, val) = split_last_per_class(&set, 3, 20).unwrap();
        let mut ids: Vec<u8> = (0..train.len())
            .map(|i| train.image_bytes(i)[0])
            .chain((0..val.len()).map(|i| val.image_bytes(i)[0]))
            .collect();
        ids.sort_unstable();
        assert_eq!(ids, (0..200).map(|i| i as u8).collect::<Vec<_>>());
    }

    #[test]
    fn labeled_subset_is_seeded_and_label_consistent() {
        let split = synthetic_shapes(3, 40, 8, 1).unwrap();
        let a = select_labeled_subset(&split, 10, 5).unwrap();
        let b = select_labeled_subset(&split, 10, 5).unwrap();
        let c = select_labeled_subset(&split, 10, 6).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!(a.len(), 30);
        for (i, class) in a.entries() {
            assert_eq!(split.train.label(i), class);
        }
        assert!(select_labeled_subset(&split, 0, 5).is_err());
        assert!(select_labeled_subset(&split, 41, 5).is_err());
    }

    #[test]
    fn dataset_ids_parse() {
        assert_eq!("CIFAR10".parse::<DatasetId>().unwrap(), DatasetId::Cifar10);
        assert!(matches!("mnist".parse::<DatasetId>(), Err(Error::Usage(_))));
    }
}
