//! Triplet sampling over the labeled subset and epoch ordering of the
//! unlabeled train set.

use rand::seq::SliceRandom;
use rand::Rng;
use tbigan_nn::Tensor;

use crate::datasets::{ImageSet, LabeledIndex};
use crate::error::{Error, Result};

/// Train-set indices of a batch of triplets, before images are gathered.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TripletIndices {
    pub anchor: Vec<usize>,
    pub positive: Vec<usize>,
    pub negative: Vec<usize>,
    pub anchor_class: Vec<usize>,
    pub negative_class: Vec<usize>,
}

impl TripletIndices {
    pub fn len(&self) -> usize {
        self.anchor.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchor.is_empty()
    }

    pub fn gather(self, train: &ImageSet) -> TripletBatch {
        TripletBatch {
            anchor: train.batch(&self.anchor),
            positive: train.batch(&self.positive),
            negative: train.batch(&self.negative),
            indices: self,
        }
    }
}

/// Anchor, positive and negative images with their source indices.
#[derive(Clone, Debug, PartialEq)]
pub struct TripletBatch {
    pub anchor: Tensor,
    pub positive: Tensor,
    pub negative: Tensor,
    pub indices: TripletIndices,
}

impl TripletBatch {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Flat view of a [`LabeledIndex`]: entries are class-major, and every class
/// occupies one contiguous block of `n_per_class` slots.
struct Pool {
    entries: Vec<(usize, usize)>,
    n: usize,
}

impl Pool {
    fn new(index: &LabeledIndex) -> Result<Self> {
        let entries = index.entries();
        let n = index.n_per_class();
        if index.class_count() < 2 {
            return Err(Error::Contract("triplets need at least two labeled classes".into()));
        }
        if n < 2 {
            return Err(Error::Contract(
                "triplets need at least two labeled examples in some class".into(),
            ));
        }
        Ok(Self { entries, n })
    }

    fn block_start(&self, slot: usize) -> usize {
        slot - slot % self.n
    }

    fn anchor_and_positive<R: Rng + ?Sized>(&self, rng: &mut R) -> (usize, usize) {
        let a = rng.random_range(0..self.entries.len());
        let start = self.block_start(a);
        let mut p = start + rng.random_range(0..self.n - 1);
        if p >= a {
            p += 1;
        }
        (a, p)
    }

    fn random_negative<R: Rng + ?Sized>(&self, anchor: usize, rng: &mut R) -> usize {
        let start = self.block_start(anchor);
        let mut q = rng.random_range(0..self.entries.len() - self.n);
        if q >= start {
            q += self.n;
        }
        q
    }

    fn indices(&self, slots: &[(usize, usize, usize)]) -> TripletIndices {
        let e = &self.entries;
        TripletIndices {
            anchor: slots.iter().map(|s| e[s.0].0).collect(),
            positive: slots.iter().map(|s| e[s.1].0).collect(),
            negative: slots.iter().map(|s| e[s.2].0).collect(),
            anchor_class: slots.iter().map(|s| e[s.0].1).collect(),
            negative_class: slots.iter().map(|s| e[s.2].1).collect(),
        }
    }
}

/// Uniform anchors over the labeled examples, uniform same-class positives
/// (never the anchor itself) and uniform other-class negatives.
pub fn sample_triplet_indices<R: Rng + ?Sized>(index: &LabeledIndex, batch: usize, rng: &mut R) -> Result<TripletIndices> {
    let pool = Pool::new(index)?;
    let slots: Vec<_> = (0..batch)
        .map(|_| {
            let (a, p) = pool.anchor_and_positive(rng);
            (a, p, pool.random_negative(a, rng))
        })
        .collect();
    Ok(pool.indices(&slots))
}

pub fn sample_triplet_batch<R: Rng + ?Sized>(index: &LabeledIndex, train: &ImageSet, batch: usize, rng: &mut R) -> Result<TripletBatch> {
    Ok(sample_triplet_indices(index, batch, rng)?.gather(train))
}

/// For each labeled example, its nearest other-class labeled example in code
/// space. Built from an encoder snapshot and refreshed by the caller.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HardNegatives {
    /// Indexed by slot in [`LabeledIndex::entries`] order, holds a slot.
    nearest: Vec<usize>,
}

impl HardNegatives {
    /// `codes` holds one row per labeled example, in [`LabeledIndex::entries`] order.
    pub fn from_codes(index: &LabeledIndex, codes: &Tensor) -> Result<Self> {
        let pool = Pool::new(index)?;
        let count = pool.entries.len();
        if codes.shape().len() != 2 || codes.dim(0) != count {
            return Err(Error::Contract(format!(
                "{count} labeled examples but codes of shape {:?}",
                codes.shape()
            )));
        }
        let nearest = (0..count)
            .map(|a| {
                let class = pool.entries[a].1;
                let mut best: Option<(f64, usize)> = None;
                for q in 0..count {
                    if pool.entries[q].1 == class {
                        continue;
                    }
                    let d = euclidean(codes.row(a), codes.row(q));
                    let better = match best {
                        None => true,
                        Some((bd, bq)) => d < bd || (d == bd && pool.entries[q].0 < pool.entries[bq].0),
                    };
                    if better {
                        best = Some((d, q));
                    }
                }
                best.map(|b| b.1).expect("another class exists")
            })
            .collect();
        Ok(Self { nearest })
    }

    /// Train index of the hard negative for the labeled example at `slot`.
    pub fn negative_of(&self, index: &LabeledIndex, slot: usize) -> usize {
        index.entries()[self.nearest[slot]].0
    }
}

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Anchors and positives drawn as in [`sample_triplet_indices`]; each
/// negative is the anchor's precomputed hard negative.
pub fn sample_hard_negative_indices<R: Rng + ?Sized>(
    index: &LabeledIndex,
    hard: &HardNegatives,
    batch: usize,
    rng: &mut R,
) -> Result<TripletIndices> {
    let pool = Pool::new(index)?;
    if hard.nearest.len() != pool.entries.len() {
        return Err(Error::Contract("hard-negative table built for a different labeled subset".into()));
    }
    let slots: Vec<_> = (0..batch)
        .map(|_| {
            let (a, p) = pool.anchor_and_positive(rng);
            (a, p, hard.nearest[a])
        })
        .collect();
    Ok(pool.indices(&slots))
}

pub fn sample_hard_negative_batch<R: Rng + ?Sized>(
    index: &LabeledIndex,
    train: &ImageSet,
    hard: &HardNegatives,
    batch: usize,
    rng: &mut R,
) -> Result<TripletBatch> {
    Ok(sample_hard_negative_indices(index, hard, batch, rng)?.gather(train))
}

/// A fresh permutation of `0..len` cut into consecutive batches; the last
/// batch is short when `batch` does not divide `len`.
pub fn epoch_batches<R: Rng + ?Sized>(len: usize, batch: usize, rng: &mut R) -> Result<Vec<Vec<usize>>> {
    if batch == 0 || batch > len {
        return Err(Error::Contract(format!("batch size {batch} for a train set of {len}")));
    }
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(rng);
    Ok(order.chunks(batch).map(<[usize]>::to_vec).collect())
}

/// Draws unsupervised batches without replacement, reshuffling at every
/// epoch boundary.
#[derive(Clone, Debug)]
pub struct EpochSampler {
    len: usize,
    batch: usize,
    pending: std::collections::VecDeque<Vec<usize>>,
}

impl EpochSampler {
    pub fn new(len: usize, batch: usize) -> Result<Self> {
        if batch == 0 || batch > len {
            return Err(Error::Contract(format!("batch size {batch} for a train set of {len}")));
        }
        Ok(Self {
            len,
            batch,
            pending: Default::default(),
        })
    }

    pub fn next_indices<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Vec<usize> {
        if self.pending.is_empty() {
            self.pending = epoch_batches(self.len, self.batch, rng).expect("validated").into();
        }
        self.pending.pop_front().expect("non-empty epoch")
    }

    pub fn unsupervised_batch<R: Rng + ?Sized>(&mut self, train: &ImageSet, rng: &mut R) -> Tensor {
        train.batch(&self.next_indices(rng))
    }
}
