//! Binary segmentation metrics: Dice score, Jaccard index, pixel accuracy.
//!
//! Both-empty masks score 1.0 on Dice and Jaccard. Aggregates are the
//! unweighted mean over cases.

use serde::{Deserialize, Serialize};

use crate::autodiff::kernels::sigmoid_scalar;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentationMask {
    width: usize,
    height: usize,
    labels: Vec<u8>,
}

impl SegmentationMask {
    pub fn new(width: usize, height: usize, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != width * height {
            return Err(Error::Invalid(format!(
                "mask {width}x{height} needs {} labels, got {}",
                width * height,
                labels.len()
            )));
        }
        if let Some(v) = labels.iter().find(|&&v| v > 1) {
            return Err(Error::Invalid(format!("mask label {v} is not 0 or 1")));
        }
        Ok(Self {
            width,
            height,
            labels,
        })
    }

    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            labels: vec![0; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut labels = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                labels.push(f(x, y) as u8);
            }
        }
        Self {
            width,
            height,
            labels,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.labels[y * self.width + x] == 1
    }

    pub fn count(&self) -> usize {
        self.labels.iter().map(|&v| v as usize).sum()
    }

    pub fn inverted(&self) -> Self {
        Self {
            width: self.width,
            height: self.height,
            labels: self.labels.iter().map(|&v| 1 - v).collect(),
        }
    }

    /// `[1, 1, H, W]` tensor of 0/1 values.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::new(
            [1, 1, self.height, self.width],
            self.labels
                .iter()
                .map(|&v| if v == 1 { T::one() } else { T::zero() })
                .collect(),
        )
        .expect("mask dims")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

pub fn confusion(pred: &SegmentationMask, gt: &SegmentationMask) -> Result<ConfusionCounts> {
    if (pred.width, pred.height) != (gt.width, gt.height) {
        return Err(Error::Invalid(format!(
            "confusion: prediction is {}x{}, ground truth is {}x{}",
            pred.width, pred.height, gt.width, gt.height
        )));
    }
    let mut c = ConfusionCounts::default();
    for (&p, &g) in pred.labels.iter().zip(&gt.labels) {
        match (p, g) {
            (1, 1) => c.tp += 1,
            (1, _) => c.fp += 1,
            (_, 1) => c.fn_ += 1,
            _ => c.tn += 1,
        }
    }
    Ok(c)
}

pub fn dice(c: &ConfusionCounts) -> f64 {
    let denom = 2 * c.tp + c.fp + c.fn_;
    if denom == 0 {
        1.0
    } else {
        (2 * c.tp) as f64 / denom as f64
    }
}

pub fn jaccard(c: &ConfusionCounts) -> f64 {
    let denom = c.tp + c.fp + c.fn_;
    if denom == 0 {
        1.0
    } else {
        c.tp as f64 / denom as f64
    }
}

pub fn pixel_accuracy(c: &ConfusionCounts) -> f64 {
    let total = c.total();
    if total == 0 {
        1.0
    } else {
        (c.tp + c.tn) as f64 / total as f64
    }
}

/// One mask per batch item: 1 where `sigmoid(logit) > threshold`.
pub fn threshold_logits<T: Scalar>(logits: &Tensor<T>, threshold: f64) -> Result<Vec<SegmentationMask>> {
    let [n, c, h, w] = logits.shape();
    if c != 1 {
        return Err(Error::InvalidShape {
            op: "threshold_logits",
            reason: format!("expected one channel, got {:?}", logits.shape()),
        });
    }
    Ok(logits
        .data()
        .chunks(h * w)
        .take(n)
        .map(|plane| {
            let labels = plane
                .iter()
                .map(|&x| (sigmoid_scalar(x).to_f64().unwrap_or(0.0) > threshold) as u8)
                .collect();
            SegmentationMask {
                width: w,
                height: h,
                labels,
            }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub dice: f64,
    pub jaccard: f64,
    pub pixel_accuracy: f64,
}

impl Scores {
    pub fn from_counts(c: &ConfusionCounts) -> Self {
        Self {
            dice: dice(c),
            jaccard: jaccard(c),
            pixel_accuracy: pixel_accuracy(c),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseScores {
    pub id: String,
    pub dice: f64,
    pub jaccard: f64,
    pub pixel_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub cases: Vec<CaseScores>,
    pub mean: Scores,
}

impl MetricsReport {
    pub fn from_cases(cases: Vec<CaseScores>) -> Self {
        let n = cases.len().max(1) as f64;
        let sum = |f: fn(&CaseScores) -> f64| cases.iter().map(f).sum::<f64>() / n;
        let mean = Scores {
            dice: sum(|c| c.dice),
            jaccard: sum(|c| c.jaccard),
            pixel_accuracy: sum(|c| c.pixel_accuracy),
        };
        Self { cases, mean }
    }

    /// Scores each `(id, prediction, ground truth)` triple.
    pub fn evaluate<'a>(
        pairs: impl IntoIterator<Item = (String, &'a SegmentationMask, &'a SegmentationMask)>,
    ) -> Result<Self> {
        let mut cases = Vec::new();
        for (id, pred, gt) in pairs {
            let s = Scores::from_counts(&confusion(pred, gt)?);
            cases.push(CaseScores {
                id,
                dice: s.dice,
                jaccard: s.jaccard,
                pixel_accuracy: s.pixel_accuracy,
            });
        }
        Ok(Self::from_cases(cases))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}
