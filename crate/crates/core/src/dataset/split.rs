use serde::{Deserialize, Serialize};

use super::{LabeledDataset, UnlabeledDataset};
use crate::autodiff::SeedStream;
use crate::error::{Error, Result};

/// How many images per class receive labels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabeledRule {
    /// Same labeled count for every class.
    PerClass(usize),
    /// Explicit labeled count per class.
    PerClassMap(Vec<usize>),
    /// Fraction of each class's training pool.
    FractionOfMajority(f64),
}

/// How a labeled dataset is divided into test, validation, labeled and
/// unlabeled parts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSpec {
    pub labeled: LabeledRule,
    /// Classes whose training pool is smaller than this are labeled entirely.
    pub keep_all_minority_below: Option<usize>,
    pub validation_fraction: f64,
    pub test_fraction: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            labeled: LabeledRule::PerClass(5),
            keep_all_minority_below: None,
            validation_fraction: 0.1,
            test_fraction: 0.25,
            seed: 0,
        }
    }
}

impl SplitSpec {
    pub fn per_class(n: usize) -> Self {
        Self {
            labeled: LabeledRule::PerClass(n),
            ..Self::default()
        }
    }

    pub fn fraction(f: f64) -> Self {
        Self {
            labeled: LabeledRule::FractionOfMajority(f),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let LabeledRule::FractionOfMajority(f) = self.labeled {
            if !(f > 0.0 && f <= 1.0) {
                return Err(Error::Config("labeled fraction must lie in (0, 1]".into()));
            }
        }
        let (v, t) = (self.validation_fraction, self.test_fraction);
        if !(0.0..1.0).contains(&v) || !(0.0..1.0).contains(&t) || v + t >= 1.0 {
            return Err(Error::Config(
                "validation and test fractions must be in [0, 1) and sum below 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitIndices {
    pub labeled: Vec<usize>,
    pub unlabeled: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct Split {
    pub labeled: LabeledDataset,
    pub unlabeled: UnlabeledDataset,
    pub validation: LabeledDataset,
    pub test: LabeledDataset,
    pub indices: SplitIndices,
}

fn share(n: usize, fraction: f64) -> usize {
    ((n as f64) * fraction).round() as usize
}

/// Stratified, seeded split. Within each class a fixed shuffle assigns
/// test images first, then validation, then labeled; the rest of the
/// training pool becomes unlabeled.
pub fn split_labeled_unlabeled(data: &LabeledDataset, spec: &SplitSpec) -> Result<Split> {
    spec.validate()?;
    let k = data.num_classes();
    if let LabeledRule::PerClassMap(map) = &spec.labeled {
        if map.len() != k {
            return Err(Error::Config(format!(
                "labeled_per_class_map has {} entries for {k} classes",
                map.len()
            )));
        }
    }
    let root = SeedStream::new(spec.seed);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (i, &l) in data.labels.iter().enumerate() {
        by_class[l].push(i);
    }

    let mut idx = SplitIndices::default();
    let mut deficient = Vec::new();
    for (c, members) in by_class.iter_mut().enumerate() {
        root.derive(c as u64).shuffle(members);
        let n = members.len();
        let n_test = share(n, spec.test_fraction);
        let n_val = share(n, spec.validation_fraction).min(n - n_test);
        let pool = n - n_test - n_val;
        let minority = spec.keep_all_minority_below.is_some_and(|t| pool < t);
        let wanted = match &spec.labeled {
            _ if minority => pool,
            LabeledRule::PerClass(per) => *per,
            LabeledRule::PerClassMap(map) => map[c],
            LabeledRule::FractionOfMajority(f) => share(pool, *f).max(1).min(pool),
        };
        if wanted > pool {
            deficient.push(c);
            continue;
        }
        let (test, rest) = members.split_at(n_test);
        let (val, rest) = rest.split_at(n_val);
        let (lab, unl) = rest.split_at(wanted);
        idx.test.extend_from_slice(test);
        idx.validation.extend_from_slice(val);
        idx.labeled.extend_from_slice(lab);
        idx.unlabeled.extend_from_slice(unl);
    }
    if !deficient.is_empty() {
        return Err(Error::InfeasibleSplit(deficient));
    }
    for part in [
        &mut idx.labeled,
        &mut idx.unlabeled,
        &mut idx.validation,
        &mut idx.test,
    ] {
        part.sort_unstable();
    }
    let unlabeled = UnlabeledDataset::with_truth(
        idx.unlabeled
            .iter()
            .map(|&i| data.images[i].clone())
            .collect(),
        idx.unlabeled.iter().map(|&i| data.labels[i]).collect(),
    );
    Ok(Split {
        labeled: data.subset(&idx.labeled),
        unlabeled,
        validation: data.subset(&idx.validation),
        test: data.subset(&idx.test),
        indices: idx,
    })
}
