use crate::augment::{apply_policy, AugmentationPolicy, ImagePatch};
use crate::autodiff::SeedStream;
use crate::error::{Error, Result};

/// Index batches drawn for one step. `unlabeled` is empty in supervised-only
/// epochs.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BatchPair {
    pub labeled: Vec<usize>,
    pub unlabeled: Vec<usize>,
}

/// Splits `order` into batches of `size`, folding a trailing singleton into
/// the previous batch.
fn chunk(order: &[usize], size: usize) -> Vec<Vec<usize>> {
    let mut out: Vec<Vec<usize>> = order.chunks(size).map(<[usize]>::to_vec).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() == 1) {
        let tail = out.pop().expect("non-empty");
        out.last_mut().expect("non-empty").extend(tail);
    }
    out
}

/// Pairs every unlabeled batch with a labeled batch.
///
/// An epoch is one shuffled pass over the unlabeled set; the labeled loader
/// cycles through reshuffled permutations as often as needed and keeps its
/// position across epochs. With no unlabeled images an epoch is one shuffled
/// pass over the labeled set.
#[derive(Clone, Debug)]
pub struct PairedBatchIterator {
    n_labeled: usize,
    n_unlabeled: usize,
    labeled_batch: usize,
    unlabeled_batch: usize,
    rng: SeedStream,
    order: Vec<usize>,
    cursor: usize,
}

impl PairedBatchIterator {
    pub fn new(
        n_labeled: usize,
        n_unlabeled: usize,
        labeled_batch: usize,
        unlabeled_batch: usize,
        rng: SeedStream,
    ) -> Result<Self> {
        if labeled_batch < 2 || unlabeled_batch < 2 {
            return Err(Error::InvalidArgument(
                "batch sizes must be at least 2".into(),
            ));
        }
        if n_labeled == 0 && n_unlabeled == 0 {
            return Err(Error::InvalidArgument(
                "both labeled and unlabeled sets are empty".into(),
            ));
        }
        if n_labeled == 1 {
            return Err(Error::InvalidArgument(
                "labeled set needs at least 2 images".into(),
            ));
        }
        Ok(Self {
            n_labeled,
            n_unlabeled,
            labeled_batch: labeled_batch.min(n_labeled.max(2)),
            unlabeled_batch,
            rng,
            order: Vec::new(),
            cursor: 0,
        })
    }

    fn next_labeled(&mut self) -> Vec<usize> {
        let mut batch = Vec::with_capacity(self.labeled_batch);
        while batch.len() < self.labeled_batch {
            if self.cursor == self.order.len() {
                self.order = (0..self.n_labeled).collect();
                self.rng.shuffle(&mut self.order);
                self.cursor = 0;
            }
            batch.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        batch
    }

    /// All batch pairs of the next epoch.
    pub fn epoch(&mut self) -> Vec<BatchPair> {
        if self.n_unlabeled == 0 {
            let mut order: Vec<usize> = (0..self.n_labeled).collect();
            self.rng.shuffle(&mut order);
            return chunk(&order, self.labeled_batch)
                .into_iter()
                .map(|labeled| BatchPair {
                    labeled,
                    unlabeled: Vec::new(),
                })
                .collect();
        }
        let mut order: Vec<usize> = (0..self.n_unlabeled).collect();
        self.rng.shuffle(&mut order);
        chunk(&order, self.unlabeled_batch)
            .into_iter()
            .map(|unlabeled| BatchPair {
                labeled: if self.n_labeled > 0 {
                    self.next_labeled()
                } else {
                    Vec::new()
                },
                unlabeled,
            })
            .collect()
    }
}

/// Weakly and strongly augmented views of one batch.
#[derive(Clone, Debug, PartialEq)]
pub struct DualViewBatch {
    pub weak: Vec<ImagePatch>,
    pub strong: Vec<ImagePatch>,
    /// Class ids for labeled batches, instance ids (0..B) otherwise.
    pub labels: Vec<usize>,
}

/// Builds both views. Image `k` of the batch is augmented with the sub-stream
/// keyed by `keys[k]` (its dataset index), separately for each view.
pub fn make_dual_views(
    images: &[&ImagePatch],
    keys: &[usize],
    labels: Option<&[usize]>,
    weak: &AugmentationPolicy,
    strong: Option<&AugmentationPolicy>,
    stream: &SeedStream,
) -> Result<DualViewBatch> {
    if keys.len() != images.len() || labels.is_some_and(|l| l.len() != images.len()) {
        return Err(Error::InvalidArgument(
            "batch keys/labels disagree with images".into(),
        ));
    }
    let (weak_stream, strong_stream) = stream.split();
    let weak_views = images
        .iter()
        .zip(keys)
        .map(|(img, &k)| apply_policy(img, weak, &weak_stream, k as u64))
        .collect::<Result<Vec<_>>>()?;
    let strong_views = match strong {
        Some(p) => images
            .iter()
            .zip(keys)
            .map(|(img, &k)| apply_policy(img, p, &strong_stream, k as u64))
            .collect::<Result<Vec<_>>>()?,
        None => Vec::new(),
    };
    Ok(DualViewBatch {
        weak: weak_views,
        strong: strong_views,
        labels: labels.map_or_else(|| (0..images.len()).collect(), <[usize]>::to_vec),
    })
}
