//! Confusion-matrix segmentation metrics.

use crate::error::{Error, Result};
use crate::head::SegmentationMap;

/// Pixel counts indexed `[ground truth][prediction]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    n: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Result<Self> {
        if num_classes == 0 || num_classes > 255 {
            return Err(Error::Metric(format!("cannot track {num_classes} classes")));
        }
        Ok(Self {
            n: num_classes,
            counts: vec![0; num_classes * num_classes],
        })
    }

    pub fn num_classes(&self) -> usize {
        self.n
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.n + pred]
    }

    /// Number of counted (non-ignored) pixels.
    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Counts every pixel whose ground truth is not `ignore`.
    ///
    /// Validates the whole pair before counting anything.
    pub fn update(&mut self, pred: &SegmentationMap, gt: &SegmentationMap, ignore: u8) -> Result<()> {
        if (pred.height, pred.width) != (gt.height, gt.width) || pred.data.len() != gt.data.len() {
            return Err(Error::shape(format!(
                "prediction {}x{} vs ground truth {}x{}",
                pred.height, pred.width, gt.height, gt.width
            )));
        }
        let w = gt.width.max(1);
        for (i, (&p, &g)) in pred.data.iter().zip(&gt.data).enumerate() {
            if g != ignore && usize::from(g) >= self.n {
                return Err(Error::Data(format!(
                    "ground-truth class {g} at pixel ({}, {}) is outside 0..{}",
                    i / w,
                    i % w,
                    self.n
                )));
            }
            if g != ignore && usize::from(p) >= self.n {
                return Err(Error::Data(format!(
                    "predicted class {p} at pixel ({}, {}) is outside 0..{}",
                    i / w,
                    i % w,
                    self.n
                )));
            }
        }
        for (&p, &g) in pred.data.iter().zip(&gt.data) {
            if g != ignore {
                self.counts[usize::from(g) * self.n + usize::from(p)] += 1;
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.n != self.n {
            return Err(Error::Metric(format!(
                "cannot merge a {}-class matrix into a {}-class one",
                other.n, self.n
            )));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    /// `TP / (TP + FP + FN)` per class; `None` when the class never occurs
    /// in either prediction or ground truth.
    pub fn iou_per_class(&self) -> Vec<Option<f64>> {
        (0..self.n)
            .map(|c| {
                let tp = self.get(c, c);
                let row: u64 = (0..self.n).map(|p| self.get(c, p)).sum();
                let col: u64 = (0..self.n).map(|g| self.get(g, c)).sum();
                let union = row + col - tp;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect()
    }

    /// Mean IoU over the defined classes.
    pub fn miou(&self) -> Result<f64> {
        let defined: Vec<f64> = self.iou_per_class().into_iter().flatten().collect();
        if defined.is_empty() {
            return Err(Error::Metric("mIoU is undefined: no class occurs".into()));
        }
        Ok(defined.iter().sum::<f64>() / defined.len() as f64)
    }

    /// Two-line table: class names, then IoU x100 to one decimal, with a
    /// trailing `| mIoU` column. Undefined entries print as `—`.
    pub fn format_table(&self, class_names: &[String]) -> Result<String> {
        self.check_names(class_names)?;
        let mut names: Vec<String> = class_names.to_vec();
        names.push("mIoU".into());
        let mut values: Vec<String> = self.iou_per_class().into_iter().map(pct).collect();
        values.push(pct(self.miou().ok()));

        let widths: Vec<usize> = names
            .iter()
            .zip(&values)
            .map(|(a, b)| a.chars().count().max(b.chars().count()))
            .collect();
        let row = |cells: &[String]| {
            let padded: Vec<String> = cells
                .iter()
                .zip(&widths)
                .map(|(c, &w)| format!("{}{c}", " ".repeat(w - c.chars().count())))
                .collect();
            let (last, classes) = padded.split_last().expect("mIoU column");
            format!("{} | {last}", classes.join(" "))
        };
        Ok(format!("{}\n{}\n", row(&names), row(&values)))
    }

    /// `class,iou` rows (IoU as a fraction, empty when undefined), then a
    /// `mean` row.
    pub fn to_csv(&self, class_names: &[String]) -> Result<String> {
        self.check_names(class_names)?;
        let mut out = String::from("class,iou\n");
        for (name, iou) in class_names.iter().zip(self.iou_per_class()) {
            out.push_str(&format!(
                "{name},{}\n",
                iou.map(|v| format!("{v:.6}")).unwrap_or_default()
            ));
        }
        let mean = self.miou().ok().map(|v| format!("{v:.6}")).unwrap_or_default();
        out.push_str(&format!("mean,{mean}\n"));
        Ok(out)
    }

    fn check_names(&self, class_names: &[String]) -> Result<()> {
        if class_names.len() != self.n {
            return Err(Error::Metric(format!(
                "{} class names for {} classes",
                class_names.len(),
                self.n
            )));
        }
        Ok(())
    }
}

fn pct(v: Option<f64>) -> String {
    v.map(|x| format!("{:.1}", 100.0 * x)).unwrap_or_else(|| "—".into())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(h: usize, w: usize, d: &[u8]) -> SegmentationMap {
        SegmentationMap::new(h, w, d.to_vec()).unwrap()
    }

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|c| format!("c{c}")).collect()
    }

    #[test]
    fn two_by_two_example() {
        let mut cm = ConfusionMatrix::new(2).unwrap();
        cm.update(&map(2, 2, &[0, 0, 1, 1]), &map(2, 2, &[0, 1, 1, 1]), 255)
            .unwrap();
        let iou = cm.iou_per_class();
        assert_eq!(iou, vec![Some(0.5), Some(2.0 / 3.0)]);
        assert!((cm.miou().unwrap() - 7.0 / 12.0).abs() < 1e-15);
        let table = cm.format_table(&names(2)).unwrap();
        assert_eq!(table.lines().nth(1).unwrap(), "50.0 66.7 | 58.3");
    }

    #[test]
    fn perfect_prediction_scores_one() {
        let mut cm = ConfusionMatrix::new(3).unwrap();
        let m = map(1, 3, &[0, 1, 2]);
        cm.update(&m, &m, 255).unwrap();
        assert_eq!(cm.miou().unwrap(), 1.0);
    }

    #[test]
    fn absent_class_is_undefined_and_excluded() {
        let mut cm = ConfusionMatrix::new(3).unwrap();
        cm.update(&map(1, 2, &[0, 1]), &map(1, 2, &[0, 1]), 255).unwrap();
        assert_eq!(cm.iou_per_class()[2], None);
        assert_eq!(cm.miou().unwrap(), 1.0);
        let table = cm.format_table(&names(3)).unwrap();
        assert_eq!(table.lines().nth(1).unwrap(), "100.0 100.0  — | 100.0");
    }

    #[test]
    fn ignored_pixels_do_not_count() {
        let mut cm = ConfusionMatrix::new(2).unwrap();
        cm.update(&map(1, 3, &[1, 1, 0]), &map(1, 3, &[255, 255, 0]), 255)
            .unwrap();
        assert_eq!(cm.total(), 1);
    }

    #[test]
    fn all_ignored_has_no_miou() {
        let mut cm = ConfusionMatrix::new(2).unwrap();
        cm.update(&map(1, 2, &[0, 1]), &map(1, 2, &[255, 255]), 255).unwrap();
        assert!(matches!(cm.miou(), Err(Error::Metric(_))));
        assert_eq!(
            cm.format_table(&names(2)).unwrap().lines().nth(1).unwrap(),
            " —  — |    —"
        );
    }

    #[test]
    fn out_of_range_label_names_pixel() {
        let mut cm = ConfusionMatrix::new(2).unwrap();
        let err = cm
            .update(&map(2, 2, &[0; 4]), &map(2, 2, &[0, 0, 0, 7]), 255)
            .unwrap_err();
        assert!(err.to_string().contains("(1, 1)"), "{err}");
        assert_eq!(cm.total(), 0);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut cm = ConfusionMatrix::new(2).unwrap();
        assert!(matches!(
            cm.update(&map(1, 2, &[0, 0]), &map(2, 1, &[0, 0]), 255),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn merge_equals_joint_update() {
        let (a, b) = (map(1, 4, &[0, 1, 2, 1]), map(1, 4, &[0, 2, 2, 1]));
        let (c, d) = (map(1, 3, &[2, 2, 0]), map(1, 3, &[1, 2, 0]));
        let mut joint = ConfusionMatrix::new(3).unwrap();
        joint.update(&a, &b, 255).unwrap();
        joint.update(&c, &d, 255).unwrap();
        let mut x = ConfusionMatrix::new(3).unwrap();
        let mut y = ConfusionMatrix::new(3).unwrap();
        x.update(&a, &b, 255).unwrap();
        y.update(&c, &d, 255).unwrap();
        x.merge(&y).unwrap();
        assert_eq!(x, joint);
        assert!(x.merge(&ConfusionMatrix::new(2).unwrap()).is_err());
    }

    #[test]
    fn csv_lists_every_class() {
        let mut cm = ConfusionMatrix::new(2).unwrap();
        cm.update(&map(2, 2, &[0, 0, 1, 1]), &map(2, 2, &[0, 1, 1, 1]), 255)
            .unwrap();
        let csv = cm.to_csv(&names(2)).unwrap();
        assert_eq!(csv, "class,iou\nc0,0.500000\nc1,0.666667\nmean,0.583333\n");
    }
}
