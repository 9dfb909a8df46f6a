use serde::Serialize;

use super::data::IGNORE_ID;

/// Class confusion counts, `counts[gt * n + pred]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub n_classes: usize,
    pub counts: Vec<u64>,
}

/// Per-class IoU (`None` for classes absent from both maps) and their mean.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct IouReport {
    pub per_class: Vec<Option<f64>>,
    pub mean: f64,
}

impl ConfusionMatrix {
    pub fn new(n_classes: usize) -> Self {
        ConfusionMatrix { n_classes, counts: vec![0; n_classes * n_classes] }
    }

    /// Accumulates one map. Ground-truth ids that are the ignore id or out of
    /// range are skipped; out-of-range predictions count as misses.
    pub fn add(&mut self, pred: &[u32], gt: &[u32]) {
        let n = self.n_classes;
        for (&p, &g) in pred.iter().zip(gt) {
            if g == u32::from(IGNORE_ID) || g as usize >= n {
                continue;
            }
            if (p as usize) < n {
                self.counts[g as usize * n + p as usize] += 1;
            }
        }
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        self.counts.iter_mut().zip(&other.counts).for_each(|(a, b)| *a += b);
    }

    pub fn report(&self) -> IouReport {
        let n = self.n_classes;
        let per_class: Vec<Option<f64>> = (0..n)
            .map(|c| {
                let tp = self.counts[c * n + c];
                let fn_: u64 = (0..n).map(|p| self.counts[c * n + p]).sum::<u64>() - tp;
                let fp: u64 = (0..n).map(|g| self.counts[g * n + c]).sum::<u64>() - tp;
                let denom = tp + fp + fn_;
                (denom > 0).then(|| tp as f64 / denom as f64)
            })
            .collect();
        let present: Vec<f64> = per_class.iter().flatten().copied().collect();
        let mean = if present.is_empty() { 0.0 } else { present.iter().sum::<f64>() / present.len() as f64 };
        IouReport { per_class, mean }
    }
}

/// mIoU of a single pair of maps.
pub fn mean_iou(pred: &[u32], gt: &[u32], n_classes: usize) -> IouReport {
    let mut cm = ConfusionMatrix::new(n_classes);
    cm.add(pred, gt);
    cm.report()
}
