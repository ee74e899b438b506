//! Contrastive and classification losses and their scheduled combination.
//!
//! All contrastive terms share one kernel, [`supcon_loss`]: embeddings are
//! L2-normalized, each anchor's positives are the other rows carrying its
//! label, and the loss is averaged over anchors that have at least one
//! positive. The self-supervised and pseudo-labeled terms only differ in
//! how they label the concatenated two-view batch.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Temperature of the supervised term.
    pub temperature_labeled: f64,
    /// Temperature of the self-supervised (instance) term.
    pub temperature_unlabeled: f64,
    /// Temperature of the pseudo-labeled term; follows `temperature_unlabeled`
    /// when unset.
    pub temperature_pseudo: Option<f64>,
    pub weight_unlabeled: f64,
    pub weight_pseudo: f64,
    pub weight_labeled: f64,
    pub weight_cross_entropy: f64,
    /// First epoch (0-indexed) of the pseudo-labeled term; `None` never starts it.
    pub pseudo_start_epoch: Option<usize>,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            temperature_labeled: 0.2,
            temperature_unlabeled: 0.7,
            temperature_pseudo: None,
            weight_unlabeled: 1.0,
            weight_pseudo: 1.0,
            weight_labeled: 1.0,
            weight_cross_entropy: 1.0,
            pseudo_start_epoch: Some(1),
        }
    }
}

impl LossConfig {
    pub fn pseudo_temperature(&self) -> f64 {
        self.temperature_pseudo
            .unwrap_or(self.temperature_unlabeled)
    }

    pub fn validate(&self) -> Result<()> {
        let temps = [
            self.temperature_labeled,
            self.temperature_unlabeled,
            self.pseudo_temperature(),
        ];
        if temps.iter().any(|t| !(t.is_finite() && *t > 0.0)) {
            return Err(Error::Config("temperatures must be positive".into()));
        }
        let weights = [
            self.weight_unlabeled,
            self.weight_pseudo,
            self.weight_labeled,
            self.weight_cross_entropy,
        ];
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        if !self.hierarchy_holds() {
            log::warn!(
                "temperature hierarchy violated: T_L={} T_U={} T_P={}",
                self.temperature_labeled,
                self.temperature_unlabeled,
                self.pseudo_temperature()
            );
        }
        Ok(())
    }

    /// `T_U > T_L` and `T_P > T_L` wherever both weights are positive.
    pub fn hierarchy_holds(&self) -> bool {
        let labeled = self.weight_labeled > 0.0;
        let u_ok = !(labeled && self.weight_unlabeled > 0.0)
            || self.temperature_unlabeled > self.temperature_labeled;
        let p_ok = !(labeled && self.weight_pseudo > 0.0)
            || self.pseudo_temperature() > self.temperature_labeled;
        u_ok && p_ok
    }

    /// Which terms the schedule enables at `epoch`.
    pub fn active_terms(&self, epoch: usize, has_unlabeled: bool) -> ActiveTerms {
        let pseudo_started = self.pseudo_start_epoch.is_some_and(|t| epoch >= t);
        ActiveTerms {
            labeled: self.weight_labeled > 0.0,
            unlabeled: has_unlabeled && self.weight_unlabeled > 0.0 && !pseudo_started,
            pseudo: has_unlabeled && self.weight_pseudo > 0.0 && pseudo_started,
            cross_entropy: self.weight_cross_entropy > 0.0,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActiveTerms {
    pub labeled: bool,
    pub unlabeled: bool,
    pub pseudo: bool,
    pub cross_entropy: bool,
}

impl ActiveTerms {
    pub fn any(&self) -> bool {
        self.labeled || self.unlabeled || self.pseudo || self.cross_entropy
    }
}

/// Scalar values of every term for one step. Inactive terms read 0.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub labeled: f64,
    pub unlabeled: f64,
    pub pseudo: f64,
    pub cross_entropy: f64,
    pub total: f64,
    pub active: ActiveTerms,
}

/// Loss terms computed for one step, before weighting.
#[derive(Clone, Copy, Debug, Default)]
pub struct LossTerms {
    pub labeled: Option<Var>,
    pub unlabeled: Option<Var>,
    pub pseudo: Option<Var>,
    pub cross_entropy: Option<Var>,
}

/// Supervised contrastive loss with mean reduction over contributing anchors.
///
/// Returns the loss and the number of anchors that had at least one positive.
pub fn supcon_loss(
    tape: &mut Tape,
    embeddings: Var,
    labels: &[usize],
    temperature: f64,
) -> Result<(Var, usize)> {
    if !(temperature.is_finite() && temperature > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    let b = tape.value(embeddings).rows();
    if b < 2 || !tape.value(embeddings).is_matrix() {
        return Err(Error::InvalidArgument(format!(
            "contrastive batch needs at least 2 rows, got {b}"
        )));
    }
    if labels.len() != b {
        return Err(Error::ShapeMismatch {
            op: "supcon_loss",
            lhs: tape.value(embeddings).shape().to_vec(),
            rhs: vec![labels.len()],
        });
    }

    let mut positives = vec![0usize; b];
    for i in 0..b {
        positives[i] = (0..b).filter(|&p| p != i && labels[p] == labels[i]).count();
    }
    let anchors = positives.iter().filter(|&&n| n > 0).count();
    if anchors == 0 {
        return Ok((tape.constant(Tensor::scalar(0.0))?, 0));
    }

    let z = tape.l2_normalize_rows(embeddings)?;
    let zt = tape.transpose(z)?;
    let sim = tape.matmul(z, zt)?;
    let logits = tape.scalar_mul(sim, 1.0 / temperature)?;
    // Shifting each row by its largest off-diagonal logit keeps the
    // denominator at least 1; the shift cancels in the log-ratio.
    let mut shift = Tensor::zeros(&[b, b]);
    {
        let l = tape.value(logits);
        for i in 0..b {
            let m = (0..b)
                .filter(|&j| j != i)
                .map(|j| l.at(i, j))
                .fold(f64::NEG_INFINITY, f64::max);
            shift.data_mut()[i * b..(i + 1) * b].fill(-m);
        }
    }
    let shift = tape.constant(shift)?;
    let shifted = tape.add(logits, shift)?;
    let e = tape.exp(shifted)?;
    let mut off_diag = Tensor::full(&[b, b], 1.0);
    for i in 0..b {
        off_diag.data_mut()[i * b + i] = 0.0;
    }
    let off_diag = tape.constant(off_diag)?;
    let masked = tape.mul(e, off_diag)?;
    let ones_col = tape.constant(Tensor::full(&[b, 1], 1.0))?;
    let denom = tape.matmul(masked, ones_col)?;
    let log_denom = tape.log(denom)?;
    let ones_row = tape.constant(Tensor::full(&[1, b], 1.0))?;
    let log_denom_full = tape.matmul(log_denom, ones_row)?;
    let log_prob = tape.sub(shifted, log_denom_full)?;

    let mut weights = Tensor::zeros(&[b, b]);
    for i in 0..b {
        if positives[i] == 0 {
            continue;
        }
        let w = 1.0 / (positives[i] as f64 * anchors as f64);
        for p in 0..b {
            if p != i && labels[p] == labels[i] {
                weights.data_mut()[i * b + p] = w;
            }
        }
    }
    let weights = tape.constant(weights)?;
    let weighted = tape.mul(log_prob, weights)?;
    let total = tape.sum(weighted)?;
    Ok((tape.scalar_mul(total, -1.0)?, anchors))
}

/// Instance-discrimination loss: row `k` of each view shares label `k`.
pub fn self_supervised_loss(
    tape: &mut Tape,
    view1: Var,
    view2: Var,
    temperature: f64,
) -> Result<Var> {
    let (s1, s2) = (tape.value(view1).shape(), tape.value(view2).shape());
    if s1 != s2 {
        return Err(Error::ShapeMismatch {
            op: "self_supervised_loss",
            lhs: s1.to_vec(),
            rhs: s2.to_vec(),
        });
    }
    let b = tape.value(view1).rows();
    let labels: Vec<usize> = (0..b).chain(0..b).collect();
    let both = tape.concat_rows(&[view1, view2])?;
    supcon_loss(tape, both, &labels, temperature).map(|r| r.0)
}

/// Contrastive loss on two views that both carry the image's pseudo-label.
pub fn pseudo_labeled_loss(
    tape: &mut Tape,
    view1: Var,
    view2: Var,
    pseudo_labels: &[usize],
    num_classes: usize,
    temperature: f64,
) -> Result<Var> {
    let (s1, s2) = (tape.value(view1).shape(), tape.value(view2).shape());
    if s1 != s2 || pseudo_labels.len() != tape.value(view1).rows() {
        return Err(Error::ShapeMismatch {
            op: "pseudo_labeled_loss",
            lhs: s1.to_vec(),
            rhs: s2.to_vec(),
        });
    }
    if let Some(bad) = pseudo_labels.iter().find(|&&l| l >= num_classes) {
        return Err(Error::InvalidArgument(format!(
            "pseudo-label {bad} out of range for {num_classes} classes"
        )));
    }
    let labels: Vec<usize> = pseudo_labels.iter().chain(pseudo_labels).copied().collect();
    let both = tape.concat_rows(&[view1, view2])?;
    supcon_loss(tape, both, &labels, temperature).map(|r| r.0)
}

/// Mean negative log-likelihood of the true class.
pub fn cross_entropy_loss(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let t = tape.value(logits);
    let (b, c) = (t.rows(), t.cols());
    if labels.len() != b {
        return Err(Error::ShapeMismatch {
            op: "cross_entropy_loss",
            lhs: t.shape().to_vec(),
            rhs: vec![labels.len()],
        });
    }
    if let Some(bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::InvalidArgument(format!(
            "label {bad} out of range for {c} classes"
        )));
    }
    let mut pick = Tensor::zeros(&[b, c]);
    for (i, &l) in labels.iter().enumerate() {
        pick.data_mut()[i * c + l] = 1.0 / b as f64;
    }
    let log_p = tape.log_softmax_rows(logits)?;
    let pick = tape.constant(pick)?;
    let chosen = tape.mul(log_p, pick)?;
    let s = tape.sum(chosen)?;
    tape.scalar_mul(s, -1.0)
}

/// Weighted sum of the terms the schedule enables at `epoch`.
///
/// A term contributes only if it is scheduled, has positive weight and was
/// actually computed; everything else reads 0 in the breakdown.
pub fn total_loss(
    tape: &mut Tape,
    terms: &LossTerms,
    config: &LossConfig,
    epoch: usize,
) -> Result<(Var, LossBreakdown)> {
    let schedule = config.active_terms(epoch, true);
    let mut breakdown = LossBreakdown::default();
    let mut parts = Vec::new();
    let entries = [
        (terms.unlabeled, schedule.unlabeled, config.weight_unlabeled),
        (terms.pseudo, schedule.pseudo, config.weight_pseudo),
        (terms.labeled, schedule.labeled, config.weight_labeled),
        (
            terms.cross_entropy,
            schedule.cross_entropy,
            config.weight_cross_entropy,
        ),
    ];
    let mut values = [0.0; 4];
    let mut flags = [false; 4];
    for (k, (term, scheduled, weight)) in entries.into_iter().enumerate() {
        let Some(var) = term else { continue };
        if !scheduled || weight <= 0.0 {
            continue;
        }
        values[k] = tape.value(var).item();
        flags[k] = true;
        parts.push(tape.scalar_mul(var, weight)?);
    }
    let total = match parts.split_first() {
        None => tape.constant(Tensor::scalar(0.0))?,
        Some((&first, rest)) => {
            let mut acc = first;
            for &p in rest {
                acc = tape.add(acc, p)?;
            }
            acc
        }
    };
    breakdown.unlabeled = values[0];
    breakdown.pseudo = values[1];
    breakdown.labeled = values[2];
    breakdown.cross_entropy = values[3];
    breakdown.active = ActiveTerms {
        unlabeled: flags[0],
        pseudo: flags[1],
        labeled: flags[2],
        cross_entropy: flags[3],
    };
    breakdown.total = tape.value(total).item();
    Ok((total, breakdown))
}

/// Row-wise argmax; ties go to the lowest class index.
pub fn generate_pseudo_labels(logits: &Tensor) -> Vec<usize> {
    (0..logits.rows())
        .map(|i| {
            let row = logits.row(i);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::seeded_rng;

    /// Direct evaluation of the anchor/positive/denominator sums.
    fn supcon_oracle(rows: &[Vec<f64>], labels: &[usize], tau: f64) -> f64 {
        let z: Vec<Vec<f64>> = rows
            .iter()
            .map(|r| {
                let n = r.iter().map(|x| x * x).sum::<f64>().sqrt();
                r.iter().map(|x| x / n).collect()
            })
            .collect();
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        let b = z.len();
        let mut total = 0.0;
        let mut anchors = 0;
        for i in 0..b {
            let pos: Vec<usize> = (0..b)
                .filter(|&p| p != i && labels[p] == labels[i])
                .collect();
            if pos.is_empty() {
                continue;
            }
            anchors += 1;
            let mut inner = 0.0;
            for &p in &pos {
                let mut denom = 0.0;
                for a in (0..b).filter(|&a| a != i) {
                    denom += (dot(&z[i], &z[a]) / tau).exp();
                }
                inner += ((dot(&z[i], &z[p]) / tau).exp() / denom).ln();
            }
            total += -inner / pos.len() as f64;
        }
        if anchors == 0 {
            0.0
        } else {
            total / anchors as f64
        }
    }

    fn random_rows(n: usize, d: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = seeded_rng(seed);
        (0..n)
            .map(|_| (0..d).map(|_| rng.normal()).collect())
            .collect()
    }

    fn supcon_value(rows: &[Vec<f64>], labels: &[usize], tau: f64) -> (f64, usize) {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_rows(rows).unwrap()).unwrap();
        let (l, n) = supcon_loss(&mut tape, x, labels, tau).unwrap();
        (tape.value(l).item(), n)
    }

    #[test]
    fn two_same_label_rows_give_zero() {
        let rows = vec![vec![1.0, 0.3], vec![-0.2, 2.0]];
        let (v, n) = supcon_value(&rows, &[4, 4], 0.2);
        assert!(v.abs() < 1e-15);
        assert_eq!(n, 2);
    }

    #[test]
    fn distinct_labels_give_zero_and_no_anchors() {
        let rows = random_rows(5, 3, 1);
        let (v, n) = supcon_value(&rows, &[0, 1, 2, 3, 4], 0.5);
        assert_eq!((v, n), (0.0, 0));
    }

    #[test]
    fn supcon_matches_oracle() {
        let rows = random_rows(8, 4, 2);
        let labels = [0, 1, 2, 0, 1, 2, 0, 0];
        let (v, _) = supcon_value(&rows, &labels, 0.2);
        assert!((v - supcon_oracle(&rows, &labels, 0.2)).abs() < 1e-10);
    }

    #[test]
    fn supcon_argument_errors() {
        let mut tape = Tape::new();
        let x = tape
            .constant(Tensor::from_rows(&random_rows(1, 3, 0)).unwrap())
            .unwrap();
        assert!(supcon_loss(&mut tape, x, &[0], 0.1).is_err());
        let y = tape
            .constant(Tensor::from_rows(&random_rows(3, 3, 0)).unwrap())
            .unwrap();
        assert!(supcon_loss(&mut tape, y, &[0, 0, 1], 0.0).is_err());
        assert!(supcon_loss(&mut tape, y, &[0, 0, 1], -1.0).is_err());
    }

    #[test]
    fn self_supervised_identical_single_pair_is_zero() {
        let mut tape = Tape::new();
        let v = tape
            .constant(Tensor::from_rows(&[vec![0.3, 0.4]]).unwrap())
            .unwrap();
        let l = self_supervised_loss(&mut tape, v, v, 0.7).unwrap();
        assert!(tape.value(l).item().abs() < 1e-15);
    }

    #[test]
    fn self_supervised_is_instance_labeled_supcon() {
        let v1 = random_rows(6, 3, 3);
        let v2 = random_rows(6, 3, 4);
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::from_rows(&v1).unwrap()).unwrap();
        let b = tape.constant(Tensor::from_rows(&v2).unwrap()).unwrap();
        let l = self_supervised_loss(&mut tape, a, b, 0.7).unwrap();
        let got = tape.value(l).item();
        let both: Vec<Vec<f64>> = v1.iter().chain(&v2).cloned().collect();
        let ids: Vec<usize> = (0..6).chain(0..6).collect();
        assert_eq!(got, supcon_value(&both, &ids, 0.7).0);
        assert!((got - supcon_oracle(&both, &ids, 0.7)).abs() < 1e-10);
    }

    #[test]
    fn self_supervised_shape_mismatch() {
        let mut tape = Tape::new();
        let a = tape
            .constant(Tensor::from_rows(&random_rows(3, 2, 1)).unwrap())
            .unwrap();
        let b = tape
            .constant(Tensor::from_rows(&random_rows(2, 2, 1)).unwrap())
            .unwrap();
        assert!(self_supervised_loss(&mut tape, a, b, 0.7).is_err());
    }

    #[test]
    fn pseudo_labeled_uniform_similarity_batch() {
        // every row is the same unit vector, so all similarities tie and each
        // positive's ratio is 1/(2B-1)
        let rows = vec![vec![0.6, 0.8]; 3];
        let mut tape = Tape::new();
        let v = tape.constant(Tensor::from_rows(&rows).unwrap()).unwrap();
        let l = pseudo_labeled_loss(&mut tape, v, v, &[2, 2, 2], 3, 0.7).unwrap();
        let both: Vec<Vec<f64>> = rows.iter().chain(&rows).cloned().collect();
        let expected = supcon_oracle(&both, &[2; 6], 0.7);
        assert!((tape.value(l).item() - expected).abs() < 1e-12);
        assert!((expected - 5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn pseudo_labeled_distinct_labels_equal_self_supervised() {
        let v1 = random_rows(3, 4, 7);
        let v2 = random_rows(3, 4, 8);
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::from_rows(&v1).unwrap()).unwrap();
        let b = tape.constant(Tensor::from_rows(&v2).unwrap()).unwrap();
        let p = pseudo_labeled_loss(&mut tape, a, b, &[2, 0, 1], 3, 0.7).unwrap();
        let s = self_supervised_loss(&mut tape, a, b, 0.7).unwrap();
        assert!((tape.value(p).item() - tape.value(s).item()).abs() < 1e-14);
    }

    #[test]
    fn pseudo_labeled_matches_oracle() {
        let v1 = random_rows(5, 3, 9);
        let v2 = random_rows(5, 3, 10);
        let pl = [0, 2, 1, 0, 2];
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::from_rows(&v1).unwrap()).unwrap();
        let b = tape.constant(Tensor::from_rows(&v2).unwrap()).unwrap();
        let l = pseudo_labeled_loss(&mut tape, a, b, &pl, 3, 0.7).unwrap();
        let both: Vec<Vec<f64>> = v1.iter().chain(&v2).cloned().collect();
        let labels: Vec<usize> = pl.iter().chain(&pl).copied().collect();
        assert!((tape.value(l).item() - supcon_oracle(&both, &labels, 0.7)).abs() < 1e-10);
        assert!(pseudo_labeled_loss(&mut tape, a, b, &[0, 3, 1, 0, 2], 3, 0.7).is_err());
    }

    #[test]
    fn cross_entropy_uniform_nine_classes() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[2, 9])).unwrap();
        let l = cross_entropy_loss(&mut tape, x, &[0, 8]).unwrap();
        assert!((tape.value(l).item() - 9f64.ln()).abs() < 1e-12);
        assert!((tape.value(l).item() - 2.19722).abs() < 1e-5);
    }

    #[test]
    fn cross_entropy_saturated() {
        let mut tape = Tape::new();
        let x = tape
            .constant(Tensor::from_rows(&[vec![0.0, 1000.0, 0.0]]).unwrap())
            .unwrap();
        let l = cross_entropy_loss(&mut tape, x, &[1]).unwrap();
        assert!(tape.value(l).item() < 1e-6);
        assert!(cross_entropy_loss(&mut tape, x, &[3]).is_err());
    }

    #[test]
    fn cross_entropy_matches_direct_formula() {
        let rows = random_rows(4, 3, 12);
        let labels = [2, 0, 1, 1];
        let direct: f64 = rows
            .iter()
            .zip(labels)
            .map(|(r, y)| {
                let lse = r.iter().map(|x| x.exp()).sum::<f64>().ln();
                lse - r[y]
            })
            .sum::<f64>()
            / 4.0;
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_rows(&rows).unwrap()).unwrap();
        let l = cross_entropy_loss(&mut tape, x, &labels).unwrap();
        assert!((tape.value(l).item() - direct).abs() < 1e-12);
    }

    fn scalar_terms(tape: &mut Tape) -> LossTerms {
        LossTerms {
            labeled: Some(tape.constant(Tensor::scalar(1.5)).unwrap()),
            unlabeled: Some(tape.constant(Tensor::scalar(2.5)).unwrap()),
            pseudo: Some(tape.constant(Tensor::scalar(3.5)).unwrap()),
            cross_entropy: Some(tape.constant(Tensor::scalar(0.25)).unwrap()),
        }
    }

    #[test]
    fn schedule_before_pseudo_start() {
        let mut tape = Tape::new();
        let terms = scalar_terms(&mut tape);
        let (_, b) = total_loss(&mut tape, &terms, &LossConfig::default(), 0).unwrap();
        assert!(b.active.unlabeled && !b.active.pseudo);
        assert_eq!(b.pseudo, 0.0);
        assert_eq!(b.total, 2.5 + 1.5 + 0.25);
    }

    #[test]
    fn schedule_after_pseudo_start() {
        let mut tape = Tape::new();
        let terms = scalar_terms(&mut tape);
        let (_, b) = total_loss(&mut tape, &terms, &LossConfig::default(), 3).unwrap();
        assert!(!b.active.unlabeled && b.active.pseudo);
        assert_eq!(b.total, 3.5 + 1.5 + 0.25);
        // the boundary epoch already belongs to the pseudo-labeled phase
        let (_, at_t) = total_loss(&mut tape, &terms, &LossConfig::default(), 1).unwrap();
        assert!(at_t.active.pseudo && !at_t.active.unlabeled);
    }

    #[test]
    fn cross_entropy_only_weights() {
        let config = LossConfig {
            weight_unlabeled: 0.0,
            weight_pseudo: 0.0,
            weight_labeled: 0.0,
            ..LossConfig::default()
        };
        let mut tape = Tape::new();
        let terms = scalar_terms(&mut tape);
        let (v, b) = total_loss(&mut tape, &terms, &config, 0).unwrap();
        assert_eq!(tape.value(v).item(), 0.25);
        assert_eq!(b.total, b.cross_entropy);
        assert!(!b.active.labeled && !b.active.unlabeled && !b.active.pseudo);
    }

    #[test]
    fn weighted_total_is_exact() {
        let config = LossConfig {
            weight_unlabeled: 0.3,
            weight_labeled: 2.0,
            weight_cross_entropy: 0.7,
            ..LossConfig::default()
        };
        let mut tape = Tape::new();
        let terms = scalar_terms(&mut tape);
        let (_, b) = total_loss(&mut tape, &terms, &config, 0).unwrap();
        let expected = 0.3 * b.unlabeled + 2.0 * b.labeled + 0.7 * b.cross_entropy;
        assert!((b.total - expected).abs() < 1e-12);
    }

    #[test]
    fn pseudo_label_argmax_and_ties() {
        let logits = Tensor::from_rows(&[vec![0.1, 0.9, 0.0], vec![0.5, 0.5, 0.5]]).unwrap();
        assert_eq!(generate_pseudo_labels(&logits), vec![1, 0]);
    }

    #[test]
    fn pseudo_labels_match_linear_scan() {
        let rows = random_rows(100, 5, 13);
        let logits = Tensor::from_rows(&rows).unwrap();
        let got = generate_pseudo_labels(&logits);
        for (r, g) in rows.iter().zip(got) {
            let max = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            assert_eq!(r.iter().position(|&v| v == max).unwrap(), g);
        }
    }

    #[test]
    fn hierarchy_check() {
        let mut c = LossConfig::default();
        assert!(c.hierarchy_holds());
        c.temperature_unlabeled = 0.2;
        assert!(!c.hierarchy_holds());
        c.weight_unlabeled = 0.0;
        // the pseudo temperature follows the unlabeled one
        assert_eq!(c.pseudo_temperature(), 0.2);
        c.weight_pseudo = 0.0;
        assert!(c.hierarchy_holds());
        c.temperature_labeled = 0.0;
        assert!(c.validate().is_err());
    }
}
