//! Confusion-matrix evaluation: per-class IoU, mIoU, mAcc.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::scenegen::{CLASS_NAMES, IGNORE};

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum MetricError {
    #[error("prediction {value} at pixel {pixel} is outside 0..{classes}")]
    Prediction { value: u8, pixel: usize, classes: usize },
    #[error("label {value} at pixel {pixel} is outside 0..{classes}")]
    Label { value: u8, pixel: usize, classes: usize },
    #[error("size mismatch: {0} predictions vs {1} labels")]
    Size(usize, usize),
    #[error("cannot merge {0}-class and {1}-class matrices")]
    Classes(usize, usize),
}

/// `counts[gt * k + pred]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    k: usize,
    counts: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scores {
    /// `None` where TP + FP + FN = 0.
    pub iou: Vec<Option<f64>>,
    /// `None` where the class never occurs in the labels.
    pub acc: Vec<Option<f64>>,
    pub miou: Option<f64>,
    pub macc: Option<f64>,
}

impl ConfusionMatrix {
    pub fn new(k: usize) -> Self {
        Self { k, counts: vec![0; k * k] }
    }

    pub fn from_counts(k: usize, counts: Vec<u64>) -> Self {
        assert_eq!(counts.len(), k * k);
        Self { k, counts }
    }

    pub fn num_classes(&self) -> usize {
        self.k
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.k + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn accumulate(&mut self, predictions: &[u8], labels: &[u8]) -> Result<(), MetricError> {
        if predictions.len() != labels.len() {
            return Err(MetricError::Size(predictions.len(), labels.len()));
        }
        let k = self.k;
        if let Some((pixel, &value)) = predictions.iter().enumerate().find(|(_, &p)| p as usize >= k) {
            return Err(MetricError::Prediction { value, pixel, classes: k });
        }
        if let Some((pixel, &value)) = labels.iter().enumerate().find(|(_, &l)| l != IGNORE && l as usize >= k) {
            return Err(MetricError::Label { value, pixel, classes: k });
        }
        for (&p, &l) in predictions.iter().zip(labels) {
            if l != IGNORE {
                self.counts[l as usize * k + p as usize] += 1;
            }
        }
        Ok(())
    }

    pub fn merge(&self, other: &Self) -> Result<Self, MetricError> {
        if self.k != other.k {
            return Err(MetricError::Classes(self.k, other.k));
        }
        Ok(Self { k: self.k, counts: self.counts.iter().zip(&other.counts).map(|(a, b)| a + b).collect() })
    }

    pub fn scores(&self) -> Scores {
        let k = self.k;
        let mut iou = Vec::with_capacity(k);
        let mut acc = Vec::with_capacity(k);
        for c in 0..k {
            let tp = self.get(c, c);
            let row: u64 = (0..k).map(|p| self.get(c, p)).sum();
            let col: u64 = (0..k).map(|g| self.get(g, c)).sum();
            let union = row + col - tp;
            iou.push((union > 0).then(|| tp as f64 / union as f64));
            acc.push((row > 0).then(|| tp as f64 / row as f64));
        }
        let mean = |v: &[Option<f64>]| {
            let kept: Vec<f64> = v.iter().flatten().copied().collect();
            (!kept.is_empty()).then(|| kept.iter().sum::<f64>() / kept.len() as f64)
        };
        Scores { miou: mean(&iou), macc: mean(&acc), iou, acc }
    }
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

fn class_name(c: usize) -> String {
    CLASS_NAMES.get(c).map(|s| s.to_string()).unwrap_or_else(|| format!("class{c}"))
}

impl Scores {
    /// `class,iou,acc` rows followed by `mean` rows; absent values are empty.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("class,iou,acc\n");
        for c in 0..self.iou.len() {
            let _ = writeln!(out, "{},{},{}", class_name(c), cell(self.iou[c]), cell(self.acc[c]));
        }
        let _ = writeln!(out, "mean,{},{}", cell(self.miou), cell(self.macc));
        out
    }

    pub fn to_table(&self) -> String {
        let show = |v: Option<f64>| v.map(|x| format!("{:6.2}", 100.0 * x)).unwrap_or_else(|| "     -".into());
        let mut out = format!("{:<14} {:>6} {:>6}\n", "class", "IoU", "Acc");
        for c in 0..self.iou.len() {
            let _ = writeln!(out, "{:<14} {} {}", class_name(c), show(self.iou[c]), show(self.acc[c]));
        }
        let _ = writeln!(out, "{:<14} {} {}", "mean", show(self.miou), show(self.macc));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn perfect_single_class() {
        let mut cm = ConfusionMatrix::new(10);
        cm.accumulate(&[3; 100], &[3; 100]).unwrap();
        assert_eq!(cm.get(3, 3), 100);
        assert_eq!(cm.total(), 100);
    }

    #[test]
    fn all_ignore_leaves_matrix_unchanged() {
        let mut cm = ConfusionMatrix::new(10);
        cm.accumulate(&[1, 2, 3], &[IGNORE; 3]).unwrap();
        assert_eq!(cm, ConfusionMatrix::new(10));
    }

    #[test]
    fn out_of_range_prediction_is_rejected() {
        let mut cm = ConfusionMatrix::new(4);
        assert!(matches!(cm.accumulate(&[0, 4], &[0, 0]), Err(MetricError::Prediction { value: 4, pixel: 1, .. })));
        assert!(cm.merge(&ConfusionMatrix::new(5)).is_err());
    }

    #[test]
    fn two_class_hand_example() {
        let s = ConfusionMatrix::from_counts(2, vec![3, 1, 2, 4]).scores();
        assert_eq!(s.iou, vec![Some(0.5), Some(4.0 / 7.0)]);
        assert_eq!(s.acc, vec![Some(0.75), Some(2.0 / 3.0)]);
        assert!((s.miou.unwrap() - 0.5357).abs() < 1e-4);
        assert!((s.macc.unwrap() - 0.7083).abs() < 1e-4);
    }

    #[test]
    fn diagonal_is_perfect_and_absent_classes_are_excluded() {
        let s = ConfusionMatrix::from_counts(3, vec![5, 0, 0, 0, 7, 0, 0, 0, 0]).scores();
        assert_eq!(s.iou, vec![Some(1.0), Some(1.0), None]);
        assert_eq!((s.miou, s.macc), (Some(1.0), Some(1.0)));
        let empty = ConfusionMatrix::new(3).scores();
        assert_eq!((empty.miou, empty.macc), (None, None));
    }

    #[test]
    fn reports_list_every_class() {
        let s = ConfusionMatrix::from_counts(2, vec![3, 1, 2, 4]).scores();
        let csv = s.to_csv();
        assert_eq!(csv.lines().count(), 4);
        assert!(csv.contains("road,0.500000,0.750000"));
        assert!(s.to_table().contains("mean"));
    }

    fn brute(pred: &[u8], labels: &[u8], k: usize) -> (Vec<Option<f64>>, Vec<Option<f64>>) {
        let mut iou = vec![];
        let mut acc = vec![];
        for c in 0..k as u8 {
            let (mut tp, mut fp, mut fn_) = (0u64, 0u64, 0u64);
            for (&p, &l) in pred.iter().zip(labels) {
                if l == IGNORE {
                    continue;
                }
                match (p == c, l == c) {
                    (true, true) => tp += 1,
                    (true, false) => fp += 1,
                    (false, true) => fn_ += 1,
                    _ => {}
                }
            }
            iou.push((tp + fp + fn_ > 0).then(|| tp as f64 / (tp + fp + fn_) as f64));
            acc.push((tp + fn_ > 0).then(|| tp as f64 / (tp + fn_) as f64));
        }
        (iou, acc)
    }

    fn maps(n: usize) -> impl Strategy<Value = (Vec<u8>, Vec<u8>)> {
        (proptest::collection::vec(0u8..6, n), proptest::collection::vec(prop_oneof![4 => 0u8..6, 1 => Just(IGNORE)], n))
    }

    proptest! {
        #[test]
        fn matches_brute_force_counting((pred, labels) in maps(64)) {
            let mut cm = ConfusionMatrix::new(6);
            cm.accumulate(&pred, &labels).unwrap();
            prop_assert_eq!(cm.total() as usize, labels.iter().filter(|&&l| l != IGNORE).count());
            let s = cm.scores();
            let (iou, acc) = brute(&pred, &labels, 6);
            for c in 0..6 {
                match (s.iou[c], iou[c]) {
                    (Some(a), Some(b)) => prop_assert!((a - b).abs() <= 1e-12),
                    (a, b) => prop_assert_eq!(a, b),
                }
                prop_assert_eq!(s.acc[c], acc[c]);
                if let (Some(i), Some(a)) = (s.iou[c], s.acc[c]) {
                    prop_assert!(i <= a && (0.0..=1.0).contains(&i) && (0.0..=1.0).contains(&a));
                }
            }
        }

        #[test]
        fn merging_partitions_equals_whole((pred, labels) in maps(50), cut in 0usize..=50, other in maps(20)) {
            let mut whole = ConfusionMatrix::new(6);
            whole.accumulate(&pred, &labels).unwrap();
            let (mut a, mut b) = (ConfusionMatrix::new(6), ConfusionMatrix::new(6));
            a.accumulate(&pred[..cut], &labels[..cut]).unwrap();
            b.accumulate(&pred[cut..], &labels[cut..]).unwrap();
            prop_assert_eq!(&a.merge(&b).unwrap(), &whole);
            prop_assert_eq!(a.merge(&b).unwrap(), b.merge(&a).unwrap());
            prop_assert_eq!(&whole.merge(&ConfusionMatrix::new(6)).unwrap(), &whole);
            let mut c = ConfusionMatrix::new(6);
            c.accumulate(&other.0, &other.1).unwrap();
            prop_assert_eq!(a.merge(&b).unwrap().merge(&c).unwrap(), a.merge(&b.merge(&c).unwrap()).unwrap());
        }
    }
}
