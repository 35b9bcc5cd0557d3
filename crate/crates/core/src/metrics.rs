//! Confusion matrices and precision / recall / F1 reporting.
//!
//! Undefined ratios (empty predicted column or empty true row) are reported
//! as 0 and flagged, so reports stay valid JSON.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio_io::ClassLabel;

const K: usize = ClassLabel::COUNT;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MetricsError {
    #[error("{truths} truths but {preds} predictions")]
    LengthMismatch { truths: usize, preds: usize },
    #[error("no examples")]
    Empty,
    #[error("confusion matrix is empty")]
    EmptyMatrix,
    #[error("class index {0} out of range")]
    BadClass(usize),
}

/// Rows are true classes, columns predicted classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: [[u64; K]; K],
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..K).map(|i| self.counts[i][i]).sum()
    }

    pub fn row_sum(&self, i: usize) -> u64 {
        self.counts[i].iter().sum()
    }

    pub fn col_sum(&self, j: usize) -> u64 {
        (0..K).map(|i| self.counts[i][j]).sum()
    }
}

pub fn confusion(truths: &[usize], preds: &[usize]) -> Result<ConfusionMatrix, MetricsError> {
    if truths.len() != preds.len() {
        return Err(MetricsError::LengthMismatch { truths: truths.len(), preds: preds.len() });
    }
    if truths.is_empty() {
        return Err(MetricsError::Empty);
    }
    let mut counts = [[0u64; K]; K];
    for (&t, &p) in truths.iter().zip(preds) {
        if t >= K {
            return Err(MetricsError::BadClass(t));
        }
        if p >= K {
            return Err(MetricsError::BadClass(p));
        }
        counts[t][p] += 1;
    }
    Ok(ConfusionMatrix { counts })
}

pub fn f1(precision: f64, recall: f64) -> f64 {
    if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    }
}

fn ratio(num: u64, den: u64) -> (f64, bool) {
    if den == 0 {
        (0.0, true)
    } else {
        (num as f64 / den as f64, false)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Nothing was predicted as this class.
    pub precision_undefined: bool,
    /// No example of this class was evaluated.
    pub recall_undefined: bool,
}

impl ClassMetrics {
    fn from_counts(tp: u64, predicted: u64, actual: u64) -> Self {
        let (precision, precision_undefined) = ratio(tp, predicted);
        let (recall, recall_undefined) = ratio(tp, actual);
        Self { precision, recall, f1: f1(precision, recall), precision_undefined, recall_undefined }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerClass {
    pub ambient: ClassMetrics,
    pub extruder_normal: ClassMetrics,
    pub extruder_fault: ClassMetrics,
}

impl PerClass {
    pub fn get(&self, class: ClassLabel) -> &ClassMetrics {
        match class {
            ClassLabel::Ambient => &self.ambient,
            ClassLabel::ExtruderNormal => &self.extruder_normal,
            ClassLabel::ExtruderFault => &self.extruder_fault,
        }
    }
}

/// Serializes as `{"accuracy", "per_class", "macro", "binary_fault", "confusion"}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub per_class: PerClass,
    #[serde(rename = "macro")]
    pub macro_avg: Summary,
    /// Extruder fault as the positive class, the other two negative.
    pub binary_fault: ClassMetrics,
    pub confusion: [[u64; K]; K],
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

pub fn metrics_from_confusion(cm: &ConfusionMatrix) -> Result<MetricsReport, MetricsError> {
    let total = cm.total();
    if total == 0 {
        return Err(MetricsError::EmptyMatrix);
    }
    let per: Vec<ClassMetrics> = (0..K)
        .map(|i| ClassMetrics::from_counts(cm.counts[i][i], cm.col_sum(i), cm.row_sum(i)))
        .collect();
    let mean = |f: fn(&ClassMetrics) -> f64| per.iter().map(f).sum::<f64>() / K as f64;
    let macro_avg = Summary {
        precision: mean(|m| m.precision),
        recall: mean(|m| m.recall),
        f1: mean(|m| m.f1),
    };
    let pos = ClassLabel::ExtruderFault.index();
    let binary_fault = ClassMetrics::from_counts(cm.counts[pos][pos], cm.col_sum(pos), cm.row_sum(pos));
    Ok(MetricsReport {
        accuracy: cm.trace() as f64 / total as f64,
        per_class: PerClass { ambient: per[0], extruder_normal: per[1], extruder_fault: per[2] },
        macro_avg,
        binary_fault,
        confusion: cm.counts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn confusion_cases() {
        let truths: Vec<usize> = (0..12).map(|i| i % 3).collect();
        let cm = confusion(&truths, &truths).unwrap();
        assert_eq!(cm.counts, [[4, 0, 0], [0, 4, 0], [0, 0, 4]]);

        let cm = confusion(&truths, &[0; 12]).unwrap();
        assert!((0..3).all(|i| cm.counts[i][1] == 0 && cm.counts[i][2] == 0));
        assert_eq!(cm.col_sum(0), 12);

        let cm = confusion(&[0, 0, 1], &[0, 1, 1]).unwrap();
        assert_eq!(cm.counts, [[1, 1, 0], [0, 1, 0], [0, 0, 0]]);

        assert_eq!(confusion(&[0], &[0, 1]), Err(MetricsError::LengthMismatch { truths: 1, preds: 2 }));
        assert_eq!(confusion(&[], &[]), Err(MetricsError::Empty));
        assert_eq!(confusion(&[3], &[0]), Err(MetricsError::BadClass(3)));
    }

    #[test]
    fn binary_f1_of_reported_precision_recall() {
        // TP 748, FN 132, FP 102: P = 748/850 = 0.88, R = 748/880 = 0.85.
        let cm = ConfusionMatrix { counts: [[500, 0, 52], [0, 500, 50], [66, 66, 748]] };
        let r = metrics_from_confusion(&cm).unwrap();
        assert!((r.binary_fault.precision - 0.88).abs() < 1e-12);
        assert!((r.binary_fault.recall - 0.85).abs() < 1e-12);
        assert!((r.binary_fault.f1 - 0.8647).abs() < 5e-4);
        assert!((f1(0.88, 0.85) - 2.0 * 0.88 * 0.85 / 1.73).abs() < 1e-15);
    }

    #[test]
    fn identity_and_hand_values() {
        let id = ConfusionMatrix { counts: [[3, 0, 0], [0, 5, 0], [0, 0, 2]] };
        let r = metrics_from_confusion(&id).unwrap();
        assert_eq!(r.accuracy, 1.0);
        for c in ClassLabel::ALL {
            let m = r.per_class.get(c);
            assert_eq!((m.precision, m.recall, m.f1), (1.0, 1.0, 1.0));
        }
        assert_eq!((r.macro_avg.precision, r.macro_avg.recall, r.macro_avg.f1), (1.0, 1.0, 1.0));
        assert_eq!(r.binary_fault.f1, 1.0);

        let cm = ConfusionMatrix { counts: [[8, 1, 1], [0, 9, 1], [1, 0, 9]] };
        let r = metrics_from_confusion(&cm).unwrap();
        assert!((r.accuracy - 26.0 / 30.0).abs() < 1e-12);
        assert!((r.per_class.ambient.precision - 8.0 / 9.0).abs() < 1e-12);
        assert!((r.per_class.ambient.recall - 0.8).abs() < 1e-12);
        assert_eq!(metrics_from_confusion(&ConfusionMatrix { counts: [[0; 3]; 3] }), Err(MetricsError::EmptyMatrix));
    }

    #[test]
    fn undefined_ratios_are_flagged_zero() {
        let cm = ConfusionMatrix { counts: [[2, 0, 0], [1, 0, 0], [0, 0, 0]] };
        let r = metrics_from_confusion(&cm).unwrap();
        assert!(r.per_class.extruder_normal.precision_undefined);
        assert_eq!(r.per_class.extruder_normal.precision, 0.0);
        assert!(r.per_class.extruder_fault.recall_undefined);
        assert_eq!(r.per_class.extruder_fault.f1, 0.0);
        let json: serde_json::Value = serde_json::from_str(&r.to_json()).unwrap();
        for key in ["accuracy", "per_class", "macro", "binary_fault", "confusion"] {
            assert!(json.get(key).is_some(), "missing {key}");
        }
    }

    proptest! {
        #[test]
        fn f1_is_harmonic_mean(p in 0.0f64..=1.0, r in 0.0f64..=1.0) {
            let f = f1(p, r);
            if p + r > 0.0 {
                prop_assert!(f >= p.min(r) - 1e-12 && f <= p.max(r) + 1e-12);
            }
            prop_assert!((f1(p, p) - p).abs() < 1e-12);
        }

        #[test]
        fn accuracy_is_weighted_recall_and_order_free(
            pairs in prop::collection::vec((0usize..3, 0usize..3), 1..80),
            seed in any::<u64>(),
        ) {
            let (t, p): (Vec<_>, Vec<_>) = pairs.iter().copied().unzip();
            let cm = confusion(&t, &p).unwrap();
            let r = metrics_from_confusion(&cm).unwrap();
            let weighted: f64 = ClassLabel::ALL
                .iter()
                .map(|&c| r.per_class.get(c).recall * cm.row_sum(c.index()) as f64)
                .sum::<f64>() / cm.total() as f64;
            prop_assert!((weighted - r.accuracy).abs() < 1e-12);

            let mut shuffled = pairs.clone();
            crate::rng::SplitMix64::new(seed).shuffle(&mut shuffled);
            let (t2, p2): (Vec<_>, Vec<_>) = shuffled.into_iter().unzip();
            prop_assert_eq!(confusion(&t2, &p2).unwrap(), cm);
            for v in [r.accuracy, r.macro_avg.precision, r.macro_avg.recall, r.macro_avg.f1,
                      r.binary_fault.precision, r.binary_fault.recall, r.binary_fault.f1] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
        }
    }
}
