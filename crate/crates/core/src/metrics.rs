//! Confusion-matrix segmentation metrics.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::mask::Mask;

/// `K×K` pixel counts; rows are ground truth, columns are predictions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn from_masks(pred: &Mask, truth: &Mask, classes: usize) -> Result<Self> {
        let mut m = ConfusionMatrix::new(classes);
        m.add(pred, truth)?;
        Ok(m)
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn add(&mut self, pred: &Mask, truth: &Mask) -> Result<()> {
        if pred.height() != truth.height() || pred.width() != truth.width() {
            return Err(Error::dim(
                "confusion",
                "H,W",
                format!("{}x{}", truth.height(), truth.width()),
                format!("{}x{}", pred.height(), pred.width()),
            ));
        }
        pred.check_classes(self.classes)?;
        truth.check_classes(self.classes)?;
        for (&p, &t) in pred.labels().iter().zip(truth.labels()) {
            self.counts[t as usize * self.classes + p as usize] += 1;
        }
        Ok(())
    }

    /// Element-wise sum; associative and commutative.
    pub fn merge(&mut self, other: &ConfusionMatrix) {
        assert_eq!(
            self.classes, other.classes,
            "merging confusion matrices of different K"
        );
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes).map(|c| self.get(c, c)).sum()
    }

    pub fn row_sum(&self, c: usize) -> u64 {
        (0..self.classes).map(|p| self.get(c, p)).sum()
    }

    pub fn col_sum(&self, c: usize) -> u64 {
        (0..self.classes).map(|t| self.get(t, c)).sum()
    }

    pub fn report(&self) -> MetricsReport {
        let k = self.classes;
        let total = self.total();
        let ratio = |num: u64, den: u64| (den > 0).then(|| num as f64 / den as f64);
        let mut per_class = Vec::with_capacity(k);
        for c in 0..k {
            let (tp, row, col) = (self.get(c, c), self.row_sum(c), self.col_sum(c));
            per_class.push(ClassMetrics {
                present: row > 0,
                iou: ratio(tp, row + col - tp),
                f1: ratio(2 * tp, row + col),
                fp_rate: if col == 0 {
                    0.0
                } else {
                    (col - tp) as f64 / col as f64
                },
                fallout: ratio(col - tp, total - row).unwrap_or(0.0),
            });
        }
        let present: Vec<&ClassMetrics> = per_class.iter().filter(|m| m.present).collect();
        let mean = |f: &dyn Fn(&ClassMetrics) -> f64| {
            if present.is_empty() {
                0.0
            } else {
                present.iter().map(|m| f(m)).sum::<f64>() / present.len() as f64
            }
        };
        MetricsReport {
            miou: mean(&|m| m.iou.unwrap_or(0.0)),
            macro_f1: mean(&|m| m.f1.unwrap_or(0.0)),
            oa: ratio(self.trace(), total).unwrap_or(0.0),
            overall_fp: ratio(total - self.trace(), total).unwrap_or(0.0),
            per_class,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassMetrics {
    /// Class occurs in the ground truth.
    pub present: bool,
    /// `None` when the class appears in neither truth nor prediction.
    pub iou: Option<f64>,
    pub f1: Option<f64>,
    /// False-discovery rate: share of pixels predicted as this class that
    /// belong to another class.
    pub fp_rate: f64,
    /// False positives over all true negatives plus false positives.
    pub fallout: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub per_class: Vec<ClassMetrics>,
    /// Mean IoU over classes present in the ground truth.
    pub miou: f64,
    pub macro_f1: f64,
    pub oa: f64,
    pub overall_fp: f64,
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

impl MetricsReport {
    pub fn from_masks(pred: &Mask, truth: &Mask, classes: usize) -> Result<Self> {
        Ok(ConfusionMatrix::from_masks(pred, truth, classes)?.report())
    }

    pub fn iou(&self, class: usize) -> f64 {
        self.per_class[class].iou.unwrap_or(0.0)
    }

    /// CSV with header `class,iou,f1,fp_rate`, one row per class, then the
    /// summary rows `mIoU`, `OA`, `overall_fp`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("class,iou,f1,fp_rate\n");
        for (c, m) in self.per_class.iter().enumerate() {
            let _ = writeln!(s, "{c},{},{},{:.6}", cell(m.iou), cell(m.f1), m.fp_rate);
        }
        let _ = writeln!(s, "mIoU,{:.6},,", self.miou);
        let _ = writeln!(s, "OA,{:.6},,", self.oa);
        let _ = writeln!(s, "overall_fp,{:.6},,", self.overall_fp);
        s
    }

    /// Human-readable table, class names taken from `names` when given.
    pub fn table(&self, names: &[&str]) -> String {
        let mut s = format!(
            "{:<14}{:>9}{:>9}{:>9}{:>9}\n",
            "class", "IoU", "F1", "FP", "fallout"
        );
        for (c, m) in self.per_class.iter().enumerate() {
            let name = names
                .get(c)
                .copied()
                .map(str::to_string)
                .unwrap_or_else(|| c.to_string());
            let pct = |v: Option<f64>| {
                v.map(|x| format!("{:.2}", 100.0 * x))
                    .unwrap_or_else(|| "-".into())
            };
            let _ = writeln!(
                s,
                "{name:<14}{:>9}{:>9}{:>9.2}{:>9.2}",
                pct(m.iou),
                pct(m.f1),
                100.0 * m.fp_rate,
                100.0 * m.fallout
            );
        }
        let _ = writeln!(
            s,
            "mIoU {:.2}%  macro-F1 {:.2}%  OA {:.2}%  overall FP {:.2}%",
            100.0 * self.miou,
            100.0 * self.macro_f1,
            100.0 * self.oa,
            100.0 * self.overall_fp
        );
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_counted_two_class() {
        let truth = Mask::new(1, 4, vec![0, 0, 1, 1]).unwrap();
        let pred = Mask::new(1, 4, vec![0, 1, 1, 1]).unwrap();
        let cm = ConfusionMatrix::from_masks(&pred, &truth, 2).unwrap();
        assert_eq!(
            [cm.get(0, 0), cm.get(0, 1), cm.get(1, 0), cm.get(1, 1)],
            [1, 1, 0, 2]
        );
        let r = cm.report();
        assert_eq!(r.per_class[0].iou, Some(0.5));
        assert!((r.per_class[1].iou.unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert!((r.miou - 7.0 / 12.0).abs() < 1e-15);
        assert_eq!(r.oa, 0.75);
        assert!((r.per_class[1].fp_rate - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(r.per_class[0].fp_rate, 0.0);
        assert_eq!(r.overall_fp, 0.25);
    }

    #[test]
    fn perfect_prediction() {
        let m = Mask::new(2, 2, vec![0, 1, 2, 1]).unwrap();
        let r = MetricsReport::from_masks(&m, &m, 4).unwrap();
        for c in 0..3 {
            assert_eq!(r.per_class[c].iou, Some(1.0));
            assert_eq!(r.per_class[c].fp_rate, 0.0);
        }
        assert_eq!(r.per_class[3].iou, None);
        assert_eq!((r.miou, r.oa, r.overall_fp), (1.0, 1.0, 0.0));
    }

    #[test]
    fn absent_class_excluded_from_mean() {
        let truth = Mask::new(1, 2, vec![0, 1]).unwrap();
        let pred = Mask::new(1, 2, vec![0, 0]).unwrap();
        let r = MetricsReport::from_masks(&pred, &truth, 3).unwrap();
        assert!(!r.per_class[2].present);
        assert!((r.miou - 0.25).abs() < 1e-15);
    }

    #[test]
    fn label_out_of_range() {
        let a = Mask::new(1, 2, vec![0, 5]).unwrap();
        assert!(ConfusionMatrix::from_masks(&a, &a, 5).is_err());
    }

    #[test]
    fn csv_layout() {
        let m = Mask::new(1, 2, vec![0, 1]).unwrap();
        let csv = MetricsReport::from_masks(&m, &m, 2).unwrap().to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "class,iou,f1,fp_rate");
        assert_eq!(lines[1], "0,1.000000,1.000000,0.000000");
        assert_eq!(lines[3], "mIoU,1.000000,,");
        assert_eq!(lines.len(), 6);
    }
}
