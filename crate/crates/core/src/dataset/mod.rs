//! Datasets, splitting protocols, paired batch iteration and the synthetic
//! stained-patch generator.

mod batches;
pub mod container;
mod split;
mod synthetic;

use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};

use crate::augment::ImagePatch;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub use batches::{make_dual_views, BatchPair, DualViewBatch, PairedBatchIterator};
pub use container::Container;
pub use split::{split_labeled_unlabeled, LabeledRule, Split, SplitIndices, SplitSpec};
pub use synthetic::{generate_synthetic, imbalanced_class_sizes, SyntheticParams};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub height: usize,
    pub width: usize,
    pub seed: Option<u64>,
    pub generator: Option<SyntheticParams>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    pub images: Vec<ImagePatch>,
    pub labels: Vec<usize>,
    pub class_names: Vec<String>,
    pub meta: DatasetMeta,
}

impl LabeledDataset {
    pub fn new(
        images: Vec<ImagePatch>,
        labels: Vec<usize>,
        class_names: Vec<String>,
        meta: DatasetMeta,
    ) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(Error::InvalidArgument(format!(
                "{} images but {} labels",
                images.len(),
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= class_names.len()) {
            return Err(Error::InvalidArgument(format!(
                "label {bad} out of range for {} classes",
                class_names.len()
            )));
        }
        if images
            .iter()
            .any(|i| i.height() != meta.height || i.width() != meta.width)
        {
            return Err(Error::InvalidArgument(
                "images disagree with meta size".into(),
            ));
        }
        Ok(Self {
            images,
            labels,
            class_names,
            meta,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes()];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            images: idx.iter().map(|&i| self.images[i].clone()).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            class_names: self.class_names.clone(),
            meta: self.meta.clone(),
        }
    }

    pub fn to_container(&self) -> Container {
        Container {
            header: container::Header {
                num_images: self.len(),
                height: self.meta.height,
                width: self.meta.width,
                channels: 3,
                class_names: self.class_names.clone(),
                labeled_flag: true,
                tensors: Vec::new(),
                attributes: serde_json::Value::Null,
            },
            labels: self.labels.iter().map(|&l| Some(l)).collect(),
            images: self.images.clone(),
            tensors: Vec::new(),
        }
    }

    /// Reads a fully labeled container.
    pub fn from_container(c: Container) -> Result<Self> {
        let labels = c
            .labels
            .iter()
            .map(|l| l.ok_or_else(|| Error::Format("container has unlabeled images".into())))
            .collect::<Result<Vec<_>>>()?;
        let meta = DatasetMeta {
            height: c.header.height,
            width: c.header.width,
            ..DatasetMeta::default()
        };
        Self::new(c.images, labels, c.header.class_names, meta)
    }
}

/// Ground truth for unlabeled images, readable only through a counted
/// accessor so that any access from the training path is detectable.
#[derive(Debug, Default)]
pub struct HiddenTruth {
    labels: Vec<usize>,
    reads: AtomicUsize,
}

impl Clone for HiddenTruth {
    fn clone(&self) -> Self {
        Self {
            labels: self.labels.clone(),
            reads: AtomicUsize::new(self.reads.load(Ordering::Relaxed)),
        }
    }
}

impl PartialEq for HiddenTruth {
    fn eq(&self, other: &Self) -> bool {
        self.labels == other.labels
    }
}

impl HiddenTruth {
    pub fn new(labels: Vec<usize>) -> Self {
        Self {
            labels,
            reads: AtomicUsize::new(0),
        }
    }

    /// Audit-only access; every call is counted.
    pub fn reveal(&self) -> &[usize] {
        self.reads.fetch_add(1, Ordering::Relaxed);
        &self.labels
    }

    pub fn read_count(&self) -> usize {
        self.reads.load(Ordering::Relaxed)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct UnlabeledDataset {
    pub images: Vec<ImagePatch>,
    truth: HiddenTruth,
}

impl UnlabeledDataset {
    pub fn new(images: Vec<ImagePatch>) -> Self {
        Self {
            images,
            truth: HiddenTruth::default(),
        }
    }

    pub(crate) fn with_truth(images: Vec<ImagePatch>, labels: Vec<usize>) -> Self {
        Self {
            images,
            truth: HiddenTruth::new(labels),
        }
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn hidden_truth(&self) -> &HiddenTruth {
        &self.truth
    }
}

/// Flattens patches into a `B×(H·W·3)` matrix.
pub fn images_to_tensor(images: &[ImagePatch]) -> Result<Tensor> {
    let Some(first) = images.first() else {
        return Err(Error::InvalidArgument("empty image batch".into()));
    };
    let width = first.pixels().len();
    let mut data = Vec::with_capacity(images.len() * width);
    for img in images {
        if img.pixels().len() != width {
            return Err(Error::InvalidArgument("mixed patch sizes in batch".into()));
        }
        data.extend_from_slice(img.pixels());
    }
    Tensor::matrix(images.len(), width, data)
}
