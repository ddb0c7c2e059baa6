/// Point-level confusion matrix, `counts[truth][pred]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Metrics {
    pub miou: f64,
    pub macc: f64,
    pub allacc: f64,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self { classes, counts: vec![0; classes * classes] }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn add(&mut self, truth: &[usize], pred: &[usize]) {
        assert_eq!(truth.len(), pred.len(), "label and prediction counts differ");
        for (&t, &p) in truth.iter().zip(pred) {
            self.counts[t * self.classes + p] += 1;
        }
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        assert_eq!(self.classes, other.classes, "class counts differ");
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

    /// mIoU over classes present in the ground truth or the predictions;
    /// mAcc over classes present in the ground truth.
    pub fn metrics(&self) -> Metrics {
        let (mut iou_sum, mut iou_n, mut acc_sum, mut acc_n) = (0.0, 0usize, 0.0, 0usize);
        for c in 0..self.classes {
            let tp = self.get(c, c);
            let truth: u64 = (0..self.classes).map(|p| self.get(c, p)).sum();
            let pred: u64 = (0..self.classes).map(|t| self.get(t, c)).sum();
            let union = truth + pred - tp;
            if union > 0 {
                iou_sum += tp as f64 / union as f64;
                iou_n += 1;
            }
            if truth > 0 {
                acc_sum += tp as f64 / truth as f64;
                acc_n += 1;
            }
        }
        let ratio = |s: f64, n: usize| if n == 0 { 0.0 } else { s / n as f64 };
        let total = self.total();
        Metrics {
            miou: ratio(iou_sum, iou_n),
            macc: ratio(acc_sum, acc_n),
            allacc: if total == 0 { 0.0 } else { self.trace() as f64 / total as f64 },
        }
    }
}
