use alloc::vec;
use alloc::vec::Vec;

use crate::error::shape_err;
use crate::ops::LabelMap;
use crate::Result;

/// Row = ground truth, column = prediction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix { classes, counts: vec![0; classes * classes] }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    /// Accumulates a prediction. Pixels labelled `ignore` are skipped; other
    /// out-of-range labels are an error.
    pub fn add(&mut self, pred: &LabelMap, truth: &LabelMap, ignore: u32) -> Result<()> {
        if (pred.n, pred.h, pred.w) != (truth.n, truth.h, truth.w) {
            return Err(shape_err!("prediction and ground truth sizes differ"));
        }
        for (&p, &t) in pred.data.iter().zip(&truth.data) {
            if t == ignore {
                continue;
            }
            let (p, t) = (p as usize, t as usize);
            if p >= self.classes || t >= self.classes {
                return Err(shape_err!("class index out of range for {} classes", self.classes));
            }
            self.counts[t * self.classes + p] += 1;
        }
        Ok(())
    }

    /// Per-class IoU; `None` for classes absent from both truth and prediction.
    pub fn iou(&self) -> Vec<Option<f64>> {
        (0..self.classes)
            .map(|c| {
                let tp = self.get(c, c);
                let row: u64 = (0..self.classes).map(|p| self.get(c, p)).sum();
                let col: u64 = (0..self.classes).map(|t| self.get(t, c)).sum();
                let union = row + col - tp;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect()
    }

    /// Mean IoU over the classes that occur. Zero if nothing was counted.
    pub fn miou(&self) -> f64 {
        let present: Vec<f64> = self.iou().into_iter().flatten().collect();
        if present.is_empty() {
            return 0.0;
        }
        present.iter().sum::<f64>() / present.len() as f64
    }
}

pub fn miou(pred: &LabelMap, truth: &LabelMap, classes: usize, ignore: u32) -> Result<f64> {
    let mut cm = ConfusionMatrix::new(classes);
    cm.add(pred, truth, ignore)?;
    Ok(cm.miou())
}
