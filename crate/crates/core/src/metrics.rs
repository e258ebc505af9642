//! Multi-label evaluation: per-label confusion counts and macro / micro
//! precision, recall and F1.
//!
//! Any 0/0 ratio counts as 0. Macro F1 is the harmonic mean of macro
//! precision and macro recall; the mean of per-label F1 scores is reported
//! alongside as `macro_f1_by_class`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MetricsError {
    #[error("no documents to evaluate")]
    EmptyDataset,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub per_label: Vec<LabelCounts>,
    pub n_docs: u64,
}

impl ConfusionCounts {
    pub fn c(&self) -> usize {
        self.per_label.len()
    }

    pub fn pooled(&self) -> LabelCounts {
        self.per_label.iter().fold(LabelCounts::default(), |acc, l| LabelCounts {
            tp: acc.tp + l.tp,
            fp: acc.fp + l.fp,
            fn_: acc.fn_ + l.fn_,
        })
    }
}

pub fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn harmonic_mean(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

pub fn confusion(predictions: &[Vec<bool>], targets: &[Vec<bool>]) -> Result<ConfusionCounts, MetricsError> {
    if predictions.len() != targets.len() {
        return Err(MetricsError::ShapeMismatch(format!(
            "{} prediction rows vs {} target rows",
            predictions.len(),
            targets.len()
        )));
    }
    let c = targets.first().ok_or(MetricsError::EmptyDataset)?.len();
    let mut per_label = vec![LabelCounts::default(); c];
    for (row, (pred, gold)) in predictions.iter().zip(targets).enumerate() {
        if pred.len() != c || gold.len() != c {
            return Err(MetricsError::ShapeMismatch(format!(
                "row {row}: {} predictions, {} targets, expected {c}",
                pred.len(),
                gold.len()
            )));
        }
        for (counts, (&p, &g)) in per_label.iter_mut().zip(pred.iter().zip(gold)) {
            match (p, g) {
                (true, true) => counts.tp += 1,
                (true, false) => counts.fp += 1,
                (false, true) => counts.fn_ += 1,
                (false, false) => {}
            }
        }
    }
    Ok(ConfusionCounts { per_label, n_docs: predictions.len() as u64 })
}

/// Precision / recall / F1 triple.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Prf {
    fn new(precision: f64, recall: f64) -> Self {
        Prf { precision, recall, f1: harmonic_mean(precision, recall) }
    }
}

pub fn label_prf(counts: &LabelCounts) -> Prf {
    Prf::new(ratio(counts.tp, counts.tp + counts.fp), ratio(counts.tp, counts.tp + counts.fn_))
}

pub fn macro_prf(counts: &ConfusionCounts) -> Prf {
    let c = counts.c() as f64;
    let precision = counts.per_label.iter().map(|l| ratio(l.tp, l.tp + l.fp)).sum::<f64>() / c;
    let recall = counts.per_label.iter().map(|l| ratio(l.tp, l.tp + l.fn_)).sum::<f64>() / c;
    Prf::new(precision, recall)
}

pub fn micro_prf(counts: &ConfusionCounts) -> Prf {
    let pooled = counts.pooled();
    Prf::new(ratio(pooled.tp, pooled.tp + pooled.fp), ratio(pooled.tp, pooled.tp + pooled.fn_))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelReport {
    pub label: String,
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n_docs: u64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub macro_f1_by_class: f64,
    pub micro_precision: f64,
    pub micro_recall: f64,
    pub micro_f1: f64,
    pub per_label: Vec<LabelReport>,
}

impl MetricsReport {
    pub fn from_counts(counts: &ConfusionCounts, labels: &[String]) -> Self {
        let macro_ = macro_prf(counts);
        let micro = micro_prf(counts);
        let per_label: Vec<LabelReport> = counts
            .per_label
            .iter()
            .enumerate()
            .map(|(i, l)| {
                let prf = label_prf(l);
                LabelReport {
                    label: labels.get(i).cloned().unwrap_or_else(|| i.to_string()),
                    tp: l.tp,
                    fp: l.fp,
                    fn_: l.fn_,
                    precision: prf.precision,
                    recall: prf.recall,
                    f1: prf.f1,
                }
            })
            .collect();
        let macro_f1_by_class = per_label.iter().map(|l| l.f1).sum::<f64>() / counts.c().max(1) as f64;
        MetricsReport {
            n_docs: counts.n_docs,
            macro_precision: macro_.precision,
            macro_recall: macro_.recall,
            macro_f1: macro_.f1,
            macro_f1_by_class,
            micro_precision: micro.precision,
            micro_recall: micro.recall,
            micro_f1: micro.f1,
            per_label,
        }
    }

    pub fn evaluate(predictions: &[Vec<bool>], targets: &[Vec<bool>], labels: &[String]) -> Result<Self, MetricsError> {
        Ok(Self::from_counts(&confusion(predictions, targets)?, labels))
    }

    /// Macro / micro summary rows plus one row per label.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("documents: {}\n\n", self.n_docs));
        out.push_str(&format!("{:<10} {:>10} {:>10} {:>10}\n", "average", "precision", "recall", "f1"));
        out.push_str(&format!(
            "{:<10} {:>10.5} {:>10.5} {:>10.5}\n",
            "macro", self.macro_precision, self.macro_recall, self.macro_f1
        ));
        out.push_str(&format!(
            "{:<10} {:>10.5} {:>10.5} {:>10.5}\n",
            "micro", self.micro_precision, self.micro_recall, self.micro_f1
        ));
        out.push_str(&format!("macro f1 (mean of per-label f1): {:.5}\n\n", self.macro_f1_by_class));
        out.push_str(&format!(
            "{:<16} {:>6} {:>6} {:>6} {:>10} {:>10} {:>10}\n",
            "label", "tp", "fp", "fn", "precision", "recall", "f1"
        ));
        for l in &self.per_label {
            out.push_str(&format!(
                "{:<16} {:>6} {:>6} {:>6} {:>10.5} {:>10.5} {:>10.5}\n",
                l.label, l.tp, l.fp, l.fn_, l.precision, l.recall, l.f1
            ));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn col(bits: &[u8]) -> Vec<bool> {
        bits.iter().map(|&b| b == 1).collect()
    }

    fn two_label_counts() -> ConfusionCounts {
        ConfusionCounts {
            per_label: vec![LabelCounts { tp: 1, fp: 1, fn_: 1 }, LabelCounts { tp: 0, fp: 0, fn_: 1 }],
            n_docs: 3,
        }
    }

    #[test]
    fn three_document_enumeration() {
        // label 1: y = [1,1,0], ŷ = [1,0,1]
        let targets: Vec<Vec<bool>> = [1, 1, 0].iter().map(|&y| col(&[y])).collect();
        let preds: Vec<Vec<bool>> = [1, 0, 1].iter().map(|&y| col(&[y])).collect();
        let c = confusion(&preds, &targets).unwrap();
        assert_eq!(c.per_label, vec![LabelCounts { tp: 1, fp: 1, fn_: 1 }]);
    }

    #[test]
    fn perfect_and_inverted() {
        let t = vec![col(&[1, 0, 1]), col(&[0, 1, 1])];
        let c = confusion(&t, &t).unwrap();
        assert!(c.per_label.iter().all(|l| l.fp == 0 && l.fn_ == 0));
        let inv: Vec<Vec<bool>> = t.iter().map(|r| r.iter().map(|b| !b).collect()).collect();
        let c = confusion(&inv, &t).unwrap();
        assert!(c.per_label.iter().all(|l| l.tp == 0));
        let p = macro_prf(&confusion(&t, &t).unwrap());
        assert_eq!((p.precision, p.recall, p.f1), (1.0, 1.0, 1.0));
        let p = micro_prf(&confusion(&t, &t).unwrap());
        assert_eq!((p.precision, p.recall, p.f1), (1.0, 1.0, 1.0));
    }

    #[test]
    fn worked_two_label_example() {
        let m = macro_prf(&two_label_counts());
        assert_eq!((m.precision, m.recall, m.f1), (0.25, 0.25, 0.25));
        let u = micro_prf(&two_label_counts());
        assert_eq!(u.precision, 0.5);
        assert_eq!(u.recall, 1.0 / 3.0);
        assert!((u.f1 - 0.4).abs() <= 1e-15);
    }

    #[test]
    fn degenerate_counts_are_zero() {
        let zero = ConfusionCounts { per_label: vec![LabelCounts::default(); 3], n_docs: 4 };
        assert_eq!(macro_prf(&zero), Prf::default());
        assert_eq!(micro_prf(&zero), Prf::default());
        let t = vec![col(&[1, 0]), col(&[0, 1])];
        let none = vec![col(&[0, 0]); 2];
        assert_eq!(micro_prf(&confusion(&none, &t).unwrap()), Prf::default());
    }

    #[test]
    fn shape_errors() {
        assert_eq!(confusion(&[], &[]), Err(MetricsError::EmptyDataset));
        assert!(matches!(confusion(&[col(&[1])], &[]), Err(MetricsError::ShapeMismatch(_))));
        assert!(matches!(confusion(&[col(&[1])], &[col(&[1, 0])]), Err(MetricsError::ShapeMismatch(_))));
    }

    #[test]
    fn table_rows_use_five_decimals() {
        let r = MetricsReport::from_counts(&two_label_counts(), &["A".into(), "B".into()]);
        let table = r.to_table();
        assert!(table.contains("macro         0.25000    0.25000    0.25000"), "{table}");
        assert!(table.contains("micro         0.50000    0.33333    0.40000"), "{table}");
        // per-label F1: 0.5 and 0 (0/0 precision)
        assert_eq!(r.macro_f1_by_class, 0.25);
    }

    #[test]
    fn report_json_keys() {
        let r = MetricsReport::from_counts(&two_label_counts(), &["A".into(), "B".into()]);
        let v = serde_json::to_value(&r).unwrap();
        for key in ["macro_f1", "micro_f1", "macro_f1_by_class", "per_label"] {
            assert!(v.get(key).is_some(), "missing {key}");
        }
        assert_eq!(v["per_label"][0]["fn"], 1);
    }
}
