//! Evaluation quantities.
//!
//! Everything here is a pure function of model outputs (or of two models):
//! per-set accuracy, knowledge-erosion and forgetting-reversal rates over a
//! phase sequence, the tug-of-war score against a retrained reference, a
//! Davies–Bouldin cluster score over feature space, unlearning-margin
//! histograms, a loss-threshold membership-inference score, and per-row
//! feature cosine similarity between two models.
//!
//! Accuracies are fractions in [0, 1]; reports multiply by 100 when
//! rendering. An empty evaluation set yields `None` — an explicit
//! "undefined" marker — never a silent zero.

use crate::diffcore::{kernels, Tensor};
use crate::losses::margin;
use crate::model::Model;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("accuracy tables list different evaluation sets: {left:?} vs {right:?}")]
    MismatchedSets { left: Vec<EvalSet>, right: Vec<EvalSet> },
    #[error("cluster score needs at least two classes, got {got}")]
    TooFewClasses { got: usize },
    #[error("{what} must be non-empty")]
    EmptySet { what: &'static str },
    #[error("{rows} feature rows but {labels} labels")]
    RowLabelMismatch { rows: usize, labels: usize },
}

/// The evaluation sets an experiment can score per phase. Class-aligned runs
/// use the test-split entries; the misaligned setting adds train-split and
/// full-test entries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalSet {
    RetainTrain,
    RetainTest,
    ForgetTrain,
    ForgetTest,
    ForgotTrain,
    ForgotTest,
    FullTest,
}

impl EvalSet {
    pub fn as_str(self) -> &'static str {
        match self {
            EvalSet::RetainTrain => "retain_train",
            EvalSet::RetainTest => "retain_test",
            EvalSet::ForgetTrain => "forget_train",
            EvalSet::ForgetTest => "forget_test",
            EvalSet::ForgotTrain => "forgot_train",
            EvalSet::ForgotTest => "forgot_test",
            EvalSet::FullTest => "full_test",
        }
    }
}

/// Per-phase accuracy fractions; sets that are empty at a phase are simply
/// absent.
pub type AccuracyTable = BTreeMap<EvalSet, f64>;

fn argmax_lowest(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, v) in row.iter().enumerate().skip(1) {
        if *v > row[best] {
            best = j;
        }
    }
    best
}

/// Fraction of rows whose argmax logit equals the label; argmax ties break
/// toward the lowest class index.
pub fn accuracy_from_logits(logits: &Tensor, labels: &[usize]) -> f64 {
    let rows = logits.shape()[0];
    assert_eq!(rows, labels.len(), "one label per logit row");
    let correct = (0..rows)
        .filter(|&i| argmax_lowest(logits.row(i)) == labels[i])
        .count();
    correct as f64 / rows as f64
}

/// Accuracy of a model on a (possibly empty) evaluation set. `None` marks an
/// empty set as undefined.
pub fn set_accuracy(model: &Model, features: Option<&Tensor>, labels: &[usize]) -> Option<f64> {
    let features = features?;
    if labels.is_empty() {
        return None;
    }
    let (_, logits) = model.forward_classify(features);
    Some(accuracy_from_logits(&logits, labels))
}

/// Mean per-phase accuracy drop on retained data:
/// (1/(T−1)) Σ_{t=1}^{T−1} (Acc_t − Acc_{t+1}). Positive values mean the
/// model is losing retained knowledge; `None` below two phases.
pub fn knowledge_erosion(retain_acc: &[f64]) -> Option<f64> {
    if retain_acc.len() < 2 {
        return None;
    }
    let steps = retain_acc.len() - 1;
    let sum: f64 = retain_acc.windows(2).map(|w| w[0] - w[1]).sum();
    Some(sum / steps as f64)
}

/// Mean resurgence of forgotten data. Each pair holds the accuracy on the
/// phase-t forget set right after phase t, and the accuracy on the
/// accumulated forgotten set right after phase t+1:
/// (−1/(T−1)) Σ (Acc_t(forget) − Acc_{t+1}(forgot)). Positive values mean
/// forgotten data is coming back; `None` with no pairs.
pub fn forgetting_reversal(pairs: &[(f64, f64)]) -> Option<f64> {
    if pairs.is_empty() {
        return None;
    }
    let sum: f64 = pairs.iter().map(|(forget_now, forgot_after)| forget_now - forgot_after).sum();
    Some(-sum / pairs.len() as f64)
}

/// Π over evaluation sets of (1 − |acc_unlearned − acc_retrain|), on
/// fraction-valued tables covering identical sets. 1.0 means the unlearned
/// model is indistinguishable from the retrained reference.
pub fn tug_of_war(unlearned: &AccuracyTable, retrain: &AccuracyTable) -> Result<f64, MetricError> {
    let left: Vec<EvalSet> = unlearned.keys().copied().collect();
    let right: Vec<EvalSet> = retrain.keys().copied().collect();
    if left != right {
        return Err(MetricError::MismatchedSets { left, right });
    }
    Ok(unlearned
        .iter()
        .map(|(set, a)| 1.0 - (a - retrain[set]).abs())
        .product())
}

/// Guard for coincident centroids in the cluster score.
pub const DBI_EPS: f64 = 1e-12;

/// Cluster score plus a count of centroid pairs closer than the guard.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DbiScore {
    pub value: f64,
    pub degenerate_pairs: usize,
}

/// Davies–Bouldin-style score over feature rows: per class i,
/// DBI_i = max_{j≠i} (S_i + S_j) / ‖c_i − c_j‖ with S the *mean squared*
/// distance to the class centroid, averaged over classes. Lower means
/// tighter, better-separated clusters.
pub fn dbi(features: &Tensor, labels: &[usize]) -> Result<DbiScore, MetricError> {
    let rows = features.shape()[0];
    let d = features.shape()[1];
    if rows != labels.len() {
        return Err(MetricError::RowLabelMismatch { rows, labels: labels.len() });
    }
    let mut classes: Vec<usize> = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    if classes.len() < 2 {
        return Err(MetricError::TooFewClasses { got: classes.len() });
    }

    let mut centroids = Vec::with_capacity(classes.len());
    let mut spreads = Vec::with_capacity(classes.len());
    for &c in &classes {
        let idx: Vec<usize> = (0..rows).filter(|&i| labels[i] == c).collect();
        let mut centroid = vec![0.0; d];
        for &i in &idx {
            for (acc, v) in centroid.iter_mut().zip(features.row(i)) {
                *acc += v;
            }
        }
        for v in &mut centroid {
            *v /= idx.len() as f64;
        }
        let spread = idx
            .iter()
            .map(|&i| {
                features
                    .row(i)
                    .iter()
                    .zip(&centroid)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
            })
            .sum::<f64>()
            / idx.len() as f64;
        centroids.push(centroid);
        spreads.push(spread);
    }

    let dist = |a: &[f64], b: &[f64]| -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
    };
    let mut degenerate = 0;
    let mut total = 0.0;
    for i in 0..classes.len() {
        let mut worst = f64::NEG_INFINITY;
        for j in 0..classes.len() {
            if i == j {
                continue;
            }
            let mut inter = dist(&centroids[i], &centroids[j]);
            if inter < DBI_EPS {
                inter = DBI_EPS;
                if i < j {
                    degenerate += 1;
                }
            }
            worst = worst.max((spreads[i] + spreads[j]) / inter);
        }
        total += worst;
    }
    Ok(DbiScore { value: total / classes.len() as f64, degenerate_pairs: degenerate })
}

/// Histogram over uniform bins on [lo, hi]; out-of-range values land in the
/// nearest edge bin, so counts always sum to the sample count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginHistogram {
    pub lo: f64,
    pub hi: f64,
    pub counts: Vec<usize>,
}

impl MarginHistogram {
    pub fn edges(&self) -> Vec<f64> {
        let n = self.counts.len();
        let width = (self.hi - self.lo) / n as f64;
        (0..=n).map(|i| self.lo + width * i as f64).collect()
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    /// Fraction of mass strictly below zero-margin bins (bins whose upper
    /// edge is ≤ 0); 0 for an empty histogram.
    pub fn fraction_below_zero(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            return 0.0;
        }
        let edges = self.edges();
        let below: usize = self
            .counts
            .iter()
            .enumerate()
            .filter(|(i, _)| edges[i + 1] <= 0.0)
            .map(|(_, c)| c)
            .sum();
        below as f64 / total as f64
    }
}

/// Bin margin values into a fixed-edge histogram.
pub fn margin_histogram(margins: &[f64], lo: f64, hi: f64, n_bins: usize) -> MarginHistogram {
    assert!(n_bins >= 1 && hi > lo, "need at least one bin and hi > lo");
    let width = (hi - lo) / n_bins as f64;
    let mut counts = vec![0usize; n_bins];
    for &m in margins {
        let bin = ((m - lo) / width).floor();
        let bin = (bin.max(0.0) as usize).min(n_bins - 1);
        counts[bin] += 1;
    }
    MarginHistogram { lo, hi, counts }
}

/// Unlearning margin per row on the evaluation path: true-class logit minus
/// the best competing logit.
pub fn margins_of(model: &Model, features: &Tensor, labels: &[usize]) -> Vec<f64> {
    let (_, logits) = model.forward_classify(features);
    labels
        .iter()
        .enumerate()
        .map(|(i, &y)| margin(logits.row(i), y))
        .collect()
}

/// Per-sample cross-entropy on the evaluation path; the attacker's signal.
pub fn per_sample_losses(model: &Model, features: &Tensor, labels: &[usize]) -> Vec<f64> {
    let (_, logits) = model.forward_classify(features);
    kernels::per_row_cross_entropy(&logits, labels).expect("labels validated by dataset")
}

/// Outcome of the loss-threshold membership attack.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MiaScore {
    /// 100 × fraction of forget rows judged absent from training.
    pub score: f64,
    /// The chosen loss threshold (member ⇔ loss ≤ threshold).
    pub threshold: f64,
    /// Balanced accuracy the threshold achieves on member vs non-member rows.
    pub balanced_accuracy: f64,
    /// True when member and non-member losses were all identical; the score
    /// is then pinned to 50.
    pub degenerate: bool,
}

/// Threshold membership attack. The attacker sees per-sample losses of known
/// members (retain-train rows) and known non-members (test rows), picks the
/// loss threshold maximizing balanced accuracy (smallest such threshold),
/// and then judges each forget row: loss above the threshold means "absent
/// from training". The score is the percentage judged absent.
pub fn mia_score(
    member_losses: &[f64],
    nonmember_losses: &[f64],
    forget_losses: &[f64],
) -> Result<MiaScore, MetricError> {
    if member_losses.is_empty() {
        return Err(MetricError::EmptySet { what: "member losses" });
    }
    if nonmember_losses.is_empty() {
        return Err(MetricError::EmptySet { what: "non-member losses" });
    }
    if forget_losses.is_empty() {
        return Err(MetricError::EmptySet { what: "forget losses" });
    }

    let first = member_losses[0];
    let all_equal = member_losses
        .iter()
        .chain(nonmember_losses)
        .all(|v| *v == first);
    if all_equal {
        return Ok(MiaScore {
            score: 50.0,
            threshold: first,
            balanced_accuracy: 0.5,
            degenerate: true,
        });
    }

    let mut candidates: Vec<f64> = member_losses
        .iter()
        .chain(nonmember_losses)
        .copied()
        .collect();
    candidates.sort_by(f64::total_cmp);
    candidates.dedup();

    let balanced = |tau: f64| -> f64 {
        let tpr = member_losses.iter().filter(|v| **v <= tau).count() as f64
            / member_losses.len() as f64;
        let tnr = nonmember_losses.iter().filter(|v| **v > tau).count() as f64
            / nonmember_losses.len() as f64;
        0.5 * (tpr + tnr)
    };
    let mut best_tau = candidates[0];
    let mut best = balanced(best_tau);
    for &tau in &candidates[1..] {
        let b = balanced(tau);
        if b > best {
            best = b;
            best_tau = tau;
        }
    }

    let absent = forget_losses.iter().filter(|v| **v > best_tau).count() as f64
        / forget_losses.len() as f64;
    Ok(MiaScore {
        score: 100.0 * absent,
        threshold: best_tau,
        balanced_accuracy: best,
        degenerate: false,
    })
}

/// Per-row cosine similarities between two models' features, with rows whose
/// feature vector has zero norm in either model excluded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityResult {
    pub per_row: Vec<Option<f64>>,
    pub excluded: usize,
}

impl SimilarityResult {
    pub fn values(&self) -> Vec<f64> {
        self.per_row.iter().flatten().copied().collect()
    }
}

/// Cosine similarity between the two models' feature representations of the
/// same input rows.
pub fn representation_similarity(before: &Model, after: &Model, x: &Tensor) -> SimilarityResult {
    let fa = before.features(x);
    let fb = after.features(x);
    let rows = x.shape()[0];
    let mut per_row = Vec::with_capacity(rows);
    let mut excluded = 0;
    for i in 0..rows {
        let a = fa.row(i);
        let b = fb.row(i);
        let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
        let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
        if na == 0.0 || nb == 0.0 {
            per_row.push(None);
            excluded += 1;
            continue;
        }
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        per_row.push(Some((dot / (na * nb)).clamp(-1.0, 1.0)));
    }
    SimilarityResult { per_row, excluded }
}
