//! Classification metrics and the round-evaluation schedule.

use serde::Serialize;

use crate::error::{Error, Result};

/// Whose test data produced a report.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricScope {
    ServerGlobal,
    ClientMean,
}

/// One-vs-rest counts for a single class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ClassCounts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

/// Accuracy, precision, recall, and F1 in micro and macro averages.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Scores {
    pub accuracy: f64,
    pub precision_micro: f64,
    pub precision_macro: f64,
    pub recall_micro: f64,
    pub recall_macro: f64,
    pub f1_micro: f64,
    pub f1_macro: f64,
    pub n_samples: usize,
}

/// Scores stamped with the round and scope they belong to.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MetricsReport {
    pub round: usize,
    pub scope: MetricScope,
    #[serde(flatten)]
    pub scores: Scores,
}

impl Scores {
    pub fn into_report(self, round: usize, scope: MetricScope) -> MetricsReport {
        MetricsReport {
            round,
            scope,
            scores: self,
        }
    }
}

fn check_labels(y_true: &[usize], y_pred: &[usize], n_classes: usize) -> Result<()> {
    if y_true.is_empty() {
        return Err(Error::Precondition("empty label vectors".into()));
    }
    if y_true.len() != y_pred.len() {
        return Err(Error::Precondition(format!(
            "label length mismatch: {} true vs {} predicted",
            y_true.len(),
            y_pred.len()
        )));
    }
    if let Some(&bad) = y_true.iter().chain(y_pred).find(|&&l| l >= n_classes) {
        return Err(Error::Precondition(format!(
            "label {bad} out of range for {n_classes} classes"
        )));
    }
    Ok(())
}

/// Standard one-vs-rest tp/fp/fn per class.
pub fn confusion_counts(
    y_true: &[usize],
    y_pred: &[usize],
    n_classes: usize,
) -> Result<Vec<ClassCounts>> {
    check_labels(y_true, y_pred, n_classes)?;
    let mut counts = vec![ClassCounts::default(); n_classes];
    for (&t, &p) in y_true.iter().zip(y_pred) {
        if t == p {
            counts[t].tp += 1;
        } else {
            counts[p].fp += 1;
            counts[t].fn_ += 1;
        }
    }
    Ok(counts)
}

fn ratio(num: usize, denom: usize) -> f64 {
    if denom == 0 {
        0.0 // zero-denominator convention: undefined scores count as 0
    } else {
        num as f64 / denom as f64
    }
}

/// Micro scores pool counts over classes; macro scores average per-class
/// values. Per-class precision/recall with an empty denominator are 0, and
/// F1 is the harmonic mean (0 when both components are 0).
pub fn metrics(y_true: &[usize], y_pred: &[usize], n_classes: usize) -> Result<Scores> {
    let counts = confusion_counts(y_true, y_pred, n_classes)?;
    let n = y_true.len();

    let (mut tp_all, mut fp_all, mut fn_all) = (0usize, 0usize, 0usize);
    let (mut p_sum, mut r_sum, mut f1_sum) = (0.0, 0.0, 0.0);
    for c in &counts {
        tp_all += c.tp;
        fp_all += c.fp;
        fn_all += c.fn_;
        let p = ratio(c.tp, c.tp + c.fp);
        let r = ratio(c.tp, c.tp + c.fn_);
        let f1 = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
        p_sum += p;
        r_sum += r;
        f1_sum += f1;
    }

    // Computing the micro scores straight from pooled counts keeps the
    // single-label identity micro P = micro R = micro F1 = accuracy exact:
    // every misclassified sample contributes one fp and one fn, so all
    // four reduce to the same integer division.
    Ok(Scores {
        accuracy: ratio(tp_all, n),
        precision_micro: ratio(tp_all, tp_all + fp_all),
        precision_macro: p_sum / n_classes as f64,
        recall_micro: ratio(tp_all, tp_all + fn_all),
        recall_macro: r_sum / n_classes as f64,
        f1_micro: ratio(2 * tp_all, 2 * tp_all + fp_all + fn_all),
        f1_macro: f1_sum / n_classes as f64,
        n_samples: n,
    })
}

/// Combine per-client scores into one `client_mean` row, weighted by each
/// client's test-set size (or unweighted when `weighted` is false).
pub fn combine_client_scores(per_client: &[Scores], weighted: bool) -> Option<Scores> {
    if per_client.is_empty() {
        return None;
    }
    let total: usize = per_client.iter().map(|s| s.n_samples).sum();
    let weight = |s: &Scores| {
        if weighted && total > 0 {
            s.n_samples as f64 / total as f64
        } else {
            1.0 / per_client.len() as f64
        }
    };
    let mut acc = Scores {
        accuracy: 0.0,
        precision_micro: 0.0,
        precision_macro: 0.0,
        recall_micro: 0.0,
        recall_macro: 0.0,
        f1_micro: 0.0,
        f1_macro: 0.0,
        n_samples: total,
    };
    for s in per_client {
        let w = weight(s);
        acc.accuracy += w * s.accuracy;
        acc.precision_micro += w * s.precision_micro;
        acc.precision_macro += w * s.precision_macro;
        acc.recall_micro += w * s.recall_micro;
        acc.recall_macro += w * s.recall_macro;
        acc.f1_micro += w * s.f1_micro;
        acc.f1_macro += w * s.f1_macro;
    }
    Some(acc)
}

/// Evaluate every `frequency` rounds, and always at the last round.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EvalSchedule {
    pub frequency: usize,
}

impl EvalSchedule {
    pub fn new(frequency: usize) -> Result<Self> {
        if frequency == 0 {
            return Err(Error::config("eval.frequency", "must be at least 1"));
        }
        Ok(Self { frequency })
    }

    pub fn due(&self, round: usize, total_rounds: usize) -> bool {
        round > 0 && (round.is_multiple_of(self.frequency) || round == total_rounds)
    }
}
