//! Classification metrics, MAP@R and embedding-hierarchy statistics.

use serde::{Deserialize, Serialize};

use crate::augment::{apply_policy, AugmentationPolicy};
use crate::autodiff::{SeedStream, Tensor};
use crate::dataset::{images_to_tensor, LabeledDataset};
use crate::error::{Error, Result};
use crate::losses::generate_pseudo_labels;
use crate::model::S5CLModel;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViewTag {
    Original,
    WeakAug,
    StrongAug,
}

impl ViewTag {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Original => "original",
            Self::WeakAug => "weak_aug",
            Self::StrongAug => "strong_aug",
        }
    }
}

/// Unit-norm embeddings with class labels and provenance per row.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingSet {
    pub embeddings: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub view_tags: Vec<ViewTag>,
    pub origin_index: Vec<usize>,
}

impl EmbeddingSet {
    /// Normalizes every row; all rows are tagged as originals of themselves.
    pub fn from_raw(embeddings: &Tensor, labels: Vec<usize>) -> Result<Self> {
        let n = embeddings.rows();
        Self::new(
            (0..n).map(|i| embeddings.row(i).to_vec()).collect(),
            labels,
            vec![ViewTag::Original; n],
            (0..n).collect(),
        )
    }

    pub fn new(
        rows: Vec<Vec<f64>>,
        labels: Vec<usize>,
        view_tags: Vec<ViewTag>,
        origin_index: Vec<usize>,
    ) -> Result<Self> {
        let n = rows.len();
        if labels.len() != n || view_tags.len() != n || origin_index.len() != n {
            return Err(Error::InvalidArgument(
                "embedding set columns differ in length".into(),
            ));
        }
        let embeddings = rows
            .into_iter()
            .map(|r| {
                let norm = r.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
                r.into_iter().map(|v| v / norm).collect()
            })
            .collect();
        Ok(Self {
            embeddings,
            labels,
            view_tags,
            origin_index,
        })
    }

    pub fn len(&self) -> usize {
        self.embeddings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.embeddings.is_empty()
    }

    fn sim(&self, i: usize, j: usize) -> f64 {
        dot(&self.embeddings[i], &self.embeddings[j])
    }

    /// One CSV line per row: origin_index, label, view_tag, then the floats.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("origin_index,label,view_tag");
        let d = self.embeddings.first().map_or(0, Vec::len);
        for k in 0..d {
            out.push_str(&format!(",e{k}"));
        }
        out.push('\n');
        for i in 0..self.len() {
            out.push_str(&format!(
                "{},{},{}",
                self.origin_index[i],
                self.labels[i],
                self.view_tags[i].as_str()
            ));
            for v in &self.embeddings[i] {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
        out
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct HierarchyReport {
    pub s_own: f64,
    pub s_pos: f64,
    pub s_neg: f64,
    /// Fraction of anchors with `s_own > s_pos > s_neg`.
    pub ordering_fraction: f64,
    pub anchors: usize,
    pub skipped_anchors: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub macro_f1: f64,
    pub per_class: Vec<ClassScores>,
    /// `confusion[truth][prediction]`.
    pub confusion: Vec<Vec<usize>>,
    pub map_at_r: Option<f64>,
    pub hierarchy: Option<HierarchyReport>,
}

impl MetricsReport {
    pub fn confusion_csv(&self) -> String {
        let k = self.confusion.len();
        let mut out = String::from("truth");
        for c in 0..k {
            out.push_str(&format!(",pred_{c}"));
        }
        out.push('\n');
        for (t, row) in self.confusion.iter().enumerate() {
            out.push_str(&t.to_string());
            for v in row {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
        out
    }
}

pub fn classification_metrics(
    predictions: &[usize],
    truth: &[usize],
    num_classes: usize,
) -> Result<MetricsReport> {
    if predictions.len() != truth.len() {
        return Err(Error::InvalidArgument(format!(
            "{} predictions for {} labels",
            predictions.len(),
            truth.len()
        )));
    }
    if predictions.iter().chain(truth).any(|&c| c >= num_classes) {
        return Err(Error::InvalidArgument("class index out of range".into()));
    }
    let mut confusion = vec![vec![0usize; num_classes]; num_classes];
    for (&p, &t) in predictions.iter().zip(truth) {
        confusion[t][p] += 1;
    }
    let total = truth.len();
    let correct: usize = (0..num_classes).map(|c| confusion[c][c]).sum();
    let per_class: Vec<ClassScores> = (0..num_classes)
        .map(|c| {
            let tp = confusion[c][c] as f64;
            let support: usize = confusion[c].iter().sum();
            let predicted: usize = confusion.iter().map(|r| r[c]).sum();
            let precision = if predicted > 0 {
                tp / predicted as f64
            } else {
                0.0
            };
            let recall = if support > 0 {
                tp / support as f64
            } else {
                0.0
            };
            let f1 = if precision + recall > 0.0 {
                2.0 * precision * recall / (precision + recall)
            } else {
                0.0
            };
            ClassScores {
                precision,
                recall,
                f1,
                support,
            }
        })
        .collect();
    let macro_f1 = if num_classes > 0 {
        per_class.iter().map(|s| s.f1).sum::<f64>() / num_classes as f64
    } else {
        0.0
    };
    Ok(MetricsReport {
        accuracy: if total > 0 {
            correct as f64 / total as f64
        } else {
            0.0
        },
        macro_f1,
        per_class,
        confusion,
        map_at_r: None,
        hierarchy: None,
    })
}

/// MAP@R with original rows as queries and every other row as a candidate.
///
/// Candidates are ranked by descending cosine similarity, ties by row
/// index. Returns the mean score and the number of skipped queries (those
/// with no other row of their class).
pub fn map_at_r(set: &EmbeddingSet) -> (f64, usize) {
    let n = set.len();
    let mut total = 0.0;
    let mut queries = 0usize;
    let mut skipped = 0usize;
    let mut order: Vec<(f64, usize)> = Vec::with_capacity(n);
    for q in 0..n {
        if set.view_tags[q] != ViewTag::Original {
            continue;
        }
        let r = set.labels.iter().filter(|&&l| l == set.labels[q]).count() - 1;
        if r == 0 {
            skipped += 1;
            continue;
        }
        order.clear();
        order.extend((0..n).filter(|&j| j != q).map(|j| (set.sim(q, j), j)));
        // partial_cmp, unlike total_cmp, ties -0.0 with 0.0
        order.sort_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.1.cmp(&b.1))
        });
        let mut hits = 0usize;
        let mut score = 0.0;
        for (i, &(_, j)) in order.iter().take(r).enumerate() {
            if set.labels[j] == set.labels[q] {
                hits += 1;
                score += hits as f64 / (i + 1) as f64;
            }
        }
        total += score / r as f64;
        queries += 1;
    }
    if skipped > 0 {
        log::warn!("map_at_r skipped {skipped} singleton queries");
    }
    let mean = if queries > 0 {
        total / queries as f64
    } else {
        0.0
    };
    (mean, skipped)
}

fn median(values: &mut [f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.sort_by(f64::total_cmp);
    let m = values.len() / 2;
    if values.len() % 2 == 1 {
        values[m]
    } else {
        0.5 * (values[m - 1] + values[m])
    }
}

/// Per-anchor mean similarities to its own augmentations, same-class rows of
/// other origins and different-class rows, summarized by medians.
pub fn hierarchy_report(set: &EmbeddingSet) -> HierarchyReport {
    let n = set.len();
    let (mut own, mut pos, mut neg) = (Vec::new(), Vec::new(), Vec::new());
    let mut ordered = 0usize;
    let mut skipped = 0usize;
    for a in 0..n {
        if set.view_tags[a] != ViewTag::Original {
            continue;
        }
        let mut acc = [(0.0, 0usize); 3];
        for j in (0..n).filter(|&j| j != a) {
            let k = if set.origin_index[j] == set.origin_index[a] {
                0
            } else if set.labels[j] == set.labels[a] {
                1
            } else {
                2
            };
            acc[k].0 += set.sim(a, j);
            acc[k].1 += 1;
        }
        if acc.iter().any(|&(_, c)| c == 0) {
            skipped += 1;
            continue;
        }
        let [o, p, q] = acc.map(|(s, c)| s / c as f64);
        ordered += usize::from(o > p && p > q);
        own.push(o);
        pos.push(p);
        neg.push(q);
    }
    let anchors = own.len();
    HierarchyReport {
        s_own: median(&mut own),
        s_pos: median(&mut pos),
        s_neg: median(&mut neg),
        ordering_fraction: if anchors > 0 {
            ordered as f64 / anchors as f64
        } else {
            0.0
        },
        anchors,
        skipped_anchors: skipped,
    }
}

/// Eval-mode predictions and raw embeddings in dataset order.
pub fn predict_dataset(
    model: &S5CLModel,
    data: &LabeledDataset,
    batch_size: usize,
) -> Result<(Vec<usize>, Tensor)> {
    if data.is_empty() {
        return Ok((
            Vec::new(),
            Tensor::zeros(&[0, model.config().embedding_dim]),
        ));
    }
    let mut predictions = Vec::with_capacity(data.len());
    let mut rows = Vec::with_capacity(data.len() * model.config().embedding_dim);
    for chunk in data.images.chunks(batch_size.max(1)) {
        let x = images_to_tensor(chunk)?;
        let (z, logits) = model.infer(&x)?;
        predictions.extend(generate_pseudo_labels(&logits));
        rows.extend_from_slice(z.data());
    }
    let emb = Tensor::matrix(data.len(), model.config().embedding_dim, rows)?;
    Ok((predictions, emb))
}

/// Embedding set of the originals plus `views` augmented copies per policy.
pub fn embed_with_views(
    model: &S5CLModel,
    data: &LabeledDataset,
    policies: &[(ViewTag, AugmentationPolicy)],
    views: usize,
    stream: &SeedStream,
    batch_size: usize,
) -> Result<EmbeddingSet> {
    let (_, base) = predict_dataset(model, data, batch_size)?;
    let n = data.len();
    let mut rows: Vec<Vec<f64>> = (0..n).map(|i| base.row(i).to_vec()).collect();
    let mut labels = data.labels.clone();
    let mut tags = vec![ViewTag::Original; n];
    let mut origin: Vec<usize> = (0..n).collect();
    for (p_idx, (tag, policy)) in policies.iter().enumerate() {
        for v in 0..views {
            let s = stream.derive(p_idx as u64).derive(v as u64);
            let images = data
                .images
                .iter()
                .enumerate()
                .map(|(i, img)| apply_policy(img, policy, &s, i as u64))
                .collect::<Result<Vec<_>>>()?;
            let aug = LabeledDataset {
                images,
                ..data.clone()
            };
            let (_, z) = predict_dataset(model, &aug, batch_size)?;
            rows.extend((0..n).map(|i| z.row(i).to_vec()));
            labels.extend_from_slice(&data.labels);
            tags.extend(std::iter::repeat_n(*tag, n));
            origin.extend(0..n);
        }
    }
    EmbeddingSet::new(rows, labels, tags, origin)
}

/// Full test report: classification metrics, MAP@R on the originals and
/// the hierarchy statistics over `views` weak and `views` strong copies of
/// every image.
pub fn evaluate_model(
    model: &S5CLModel,
    data: &LabeledDataset,
    weak: &AugmentationPolicy,
    strong: &AugmentationPolicy,
    views: usize,
    stream: &SeedStream,
    batch_size: usize,
) -> Result<(MetricsReport, EmbeddingSet)> {
    let (pred, _) = predict_dataset(model, data, batch_size)?;
    let mut report = classification_metrics(&pred, &data.labels, data.num_classes())?;
    let policies = [
        (ViewTag::WeakAug, weak.clone()),
        (ViewTag::StrongAug, strong.clone()),
    ];
    let set = embed_with_views(model, data, &policies, views, stream, batch_size)?;
    // original rows are the queries, every row is a candidate
    report.map_at_r = Some(map_at_r(&set).0);
    report.hierarchy = Some(hierarchy_report(&set));
    Ok((report, set))
}
