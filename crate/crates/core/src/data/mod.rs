//! Datasets, mini-batching and the on-disk formats they come from.

mod batches;
mod idx;
mod synth;

pub use batches::{split_batch, BatchStream};
pub use idx::{load_idx, parse_idx_images, parse_idx_labels, IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC};
pub use synth::{synth_dataset, synth_prototypes, SynthSpec, SynthSplits};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Single-channel images in `[0, 1]` with integer class labels.
///
/// Forget and retain sets are never stored separately; they are label
/// filters over a dataset (see [`Dataset::of_class`] and [`Dataset::without_class`]).
#[derive(Clone, Debug)]
pub struct Dataset {
    images: Tensor,
    labels: Vec<usize>,
    n_classes: usize,
    split: Split,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, n_classes: usize, split: Split) -> Result<Self> {
        let s = images.shape();
        if s.len() != 4 || s[1] != 1 {
            return Err(Error::shape("dataset", format!("images must be [N, 1, H, W], got {s:?}")));
        }
        if s[0] != labels.len() {
            return Err(Error::shape("dataset", format!("{} images but {} labels", s[0], labels.len())));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= n_classes) {
            return Err(Error::LabelOutOfRange { label: l, classes: n_classes });
        }
        Ok(Dataset { images, labels, n_classes, split })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Height (= width) of the images.
    pub fn image_size(&self) -> usize {
        self.images.shape()[2]
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            images: self.images.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            n_classes: self.n_classes,
            split: self.split,
        }
    }

    pub fn indices_where(&self, pred: impl Fn(usize) -> bool) -> Vec<usize> {
        (0..self.len()).filter(|&i| pred(self.labels[i])).collect()
    }

    /// The forget set for class `c`.
    pub fn of_class(&self, c: usize) -> Dataset {
        self.subset(&self.indices_where(|l| l == c))
    }

    /// The retain set for class `c`.
    pub fn without_class(&self, c: usize) -> Dataset {
        self.subset(&self.indices_where(|l| l != c))
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Deterministically split off `fraction` of the samples (stratified per class).
    /// Returns `(rest, taken)`.
    pub fn split_off(&self, fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        if !(0.0..=1.0).contains(&fraction) {
            return Err(Error::InvalidArgument(format!("split fraction {fraction} outside [0, 1]")));
        }
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let (mut rest, mut taken) = (Vec::new(), Vec::new());
        for c in 0..self.n_classes {
            let mut idx = self.indices_where(|l| l == c);
            idx.shuffle(&mut rng);
            let k = (idx.len() as f64 * fraction).round() as usize;
            taken.extend_from_slice(&idx[..k]);
            rest.extend_from_slice(&idx[k..]);
        }
        rest.sort_unstable();
        taken.sort_unstable();
        Ok((self.subset(&rest), self.subset(&taken)))
    }

    pub fn with_split(mut self, split: Split) -> Dataset {
        self.split = split;
        self
    }
}
