//! Confusion matrices and the eight-class macro F1.

use serde::{Deserialize, Serialize};

use crate::data::NUM_CLASSES;
use crate::error::{Error, Result};

/// Counts indexed `[true][predicted]`.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: [[u64; NUM_CLASSES]; NUM_CLASSES],
}

impl ConfusionMatrix {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, label: usize, pred: usize) -> Result<()> {
        if label >= NUM_CLASSES || pred >= NUM_CLASSES {
            return Err(Error::validation(format!(
                "class pair ({label}, {pred}) outside 0..{NUM_CLASSES}"
            )));
        }
        self.counts[label][pred] += 1;
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        for (row, o) in self.counts.iter_mut().zip(&other.counts) {
            for (c, v) in row.iter_mut().zip(o) {
                *c += v;
            }
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    /// F1 per class; any `0/0` is taken as 0.
    pub fn per_class_f1(&self) -> [f64; NUM_CLASSES] {
        let mut out = [0.0; NUM_CLASSES];
        for (c, f1) in out.iter_mut().enumerate() {
            let tp = self.counts[c][c] as f64;
            let predicted: u64 = self.counts.iter().map(|row| row[c]).sum();
            let actual: u64 = self.counts[c].iter().sum();
            let precision = ratio(tp, predicted as f64);
            let recall = ratio(tp, actual as f64);
            *f1 = ratio(2.0 * precision * recall, precision + recall);
        }
        out
    }
}

fn ratio(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

/// Tallies frames whose `mask` entry is set. Masked-out labels may be
/// anything, including -1.
pub fn confusion(labels: &[i8], preds: &[u8], mask: &[bool]) -> Result<ConfusionMatrix> {
    if labels.len() != preds.len() || labels.len() != mask.len() {
        return Err(Error::validation(format!(
            "length mismatch: {} labels, {} predictions, {} mask entries",
            labels.len(),
            preds.len(),
            mask.len()
        )));
    }
    let mut cm = ConfusionMatrix::new();
    for (i, ((&y, &p), &m)) in labels.iter().zip(preds).zip(mask).enumerate() {
        if p as usize >= NUM_CLASSES {
            return Err(Error::validation(format!(
                "frame {}: prediction {p} outside 0..{NUM_CLASSES}",
                i + 1
            )));
        }
        if m {
            if y < 0 {
                return Err(Error::validation(format!(
                    "frame {}: invalid label {y} is not masked out",
                    i + 1
                )));
            }
            cm.add(y as usize, p as usize)?;
        }
    }
    Ok(cm)
}

/// Confusion over frames with a valid label (`>= 0`).
pub fn confusion_valid(labels: &[i8], preds: &[u8]) -> Result<ConfusionMatrix> {
    let mask: Vec<bool> = labels.iter().map(|&y| y >= 0).collect();
    confusion(labels, preds, &mask)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub macro_f1: f64,
    pub per_class_f1: [f64; NUM_CLASSES],
    pub support: [u64; NUM_CLASSES],
    pub confusion: [[u64; NUM_CLASSES]; NUM_CLASSES],
}

/// Mean of the eight per-class F1 scores; absent classes count as 0.
pub fn macro_f1(cm: &ConfusionMatrix) -> MetricReport {
    let per_class_f1 = cm.per_class_f1();
    let mut support = [0; NUM_CLASSES];
    for (s, row) in support.iter_mut().zip(&cm.counts) {
        *s = row.iter().sum();
    }
    MetricReport {
        macro_f1: per_class_f1.iter().sum::<f64>() / NUM_CLASSES as f64,
        per_class_f1,
        support,
        confusion: cm.counts,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn direct_tally() {
        let cm = confusion_valid(&[0, 0, 1, 1, 2], &[0, 1, 1, 1, 2]).unwrap();
        let mut want = [[0; 8]; 8];
        want[0][0] = 1;
        want[0][1] = 1;
        want[1][1] = 2;
        want[2][2] = 1;
        assert_eq!(cm.counts, want);
        assert_eq!(cm.total(), 5);
    }

    #[test]
    fn hand_example() {
        let r = macro_f1(&confusion_valid(&[0, 0, 1, 1, 2], &[0, 1, 1, 1, 2]).unwrap());
        let want = [2.0 / 3.0, 0.8, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0];
        for (a, b) in r.per_class_f1.iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((r.macro_f1 - 0.308_333_333_333).abs() < 1e-9);
        assert_eq!(r.support, [2, 2, 1, 0, 0, 0, 0, 0]);
    }

    #[test]
    fn masked_and_empty() {
        let cm = confusion(&[0, 1], &[1, 1], &[false, false]).unwrap();
        assert_eq!(cm.total(), 0);
        assert_eq!(macro_f1(&cm).macro_f1, 0.0);
        let cm = confusion_valid(&[-1, 3], &[5, 3]).unwrap();
        assert_eq!(cm.total(), 1);
    }

    #[test]
    fn perfect_with_all_classes() {
        let y: Vec<i8> = (0..16).map(|i| (i % 8) as i8).collect();
        let p: Vec<u8> = y.iter().map(|&v| v as u8).collect();
        assert_eq!(macro_f1(&confusion_valid(&y, &p).unwrap()).macro_f1, 1.0);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(confusion_valid(&[0], &[8]).is_err());
        assert!(confusion_valid(&[0, 1], &[0]).is_err());
        assert!(confusion(&[-1], &[0], &[true]).is_err());
    }

    #[test]
    fn report_json_fields() {
        let r = macro_f1(&confusion_valid(&[0], &[0]).unwrap());
        let v: serde_json::Value = serde_json::to_value(&r).unwrap();
        for key in ["macro_f1", "per_class_f1", "support", "confusion"] {
            assert!(v.get(key).is_some(), "{key}");
        }
        assert_eq!(v["confusion"].as_array().unwrap().len(), 8);
    }
}
