//! Confusion matrix and mIoU, pseudo-label quality, and LDA-style
//! intra/inter-class scatter of feature sets.

use log::warn;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Rows are ground truth, columns are predictions.
#[derive(Debug, Clone, PartialEq, Eq)]
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

    pub fn from_counts(classes: usize, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != classes * classes {
            return Err(Error::InvalidShape {
                shape: vec![classes, classes],
                len: counts.len(),
            });
        }
        Ok(ConfusionMatrix { classes, counts })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn add(&mut self, truth: &[u8], pred: &[u8]) -> Result<()> {
        if truth.len() != pred.len() {
            return Err(Error::ShapeMismatch {
                op: "confusion",
                left: vec![truth.len()],
                right: vec![pred.len()],
            });
        }
        for (&t, &p) in truth.iter().zip(pred) {
            let (t, p) = (t as usize, p as usize);
            if t >= self.classes || p >= self.classes {
                return Err(Error::MissingClass(t.max(p)));
            }
            self.counts[t * self.classes + p] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::ShapeMismatch {
                op: "confusion_merge",
                left: vec![self.classes],
                right: vec![other.classes],
            });
        }
        self.counts.iter_mut().zip(&other.counts).for_each(|(a, b)| *a += b);
        Ok(())
    }

    /// Per-class IoU; `None` where the class has zero union.
    pub fn iou(&self) -> Vec<Option<f64>> {
        let c = self.classes;
        (0..c)
            .map(|k| {
                let tp = self.get(k, k);
                let row: u64 = (0..c).map(|j| self.get(k, j)).sum();
                let col: u64 = (0..c).map(|i| self.get(i, k)).sum();
                let union = row + col - tp;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect()
    }

    pub fn miou(&self) -> Result<f64> {
        let ious: Vec<f64> = self.iou().into_iter().flatten().collect();
        if ious.is_empty() {
            return Err(Error::EmptyConfusion);
        }
        Ok(ious.iter().sum::<f64>() / ious.len() as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PseudoLabelQuality {
    /// NaN when no pixel is valid.
    pub precision: f64,
    pub recall: f64,
    pub coverage: f64,
}

/// Counts for [`PseudoLabelQuality`], summable across images.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PseudoLabelCounts {
    pub total: u64,
    pub valid: u64,
    pub correct_valid: u64,
}

impl PseudoLabelCounts {
    pub fn add(&mut self, labels: &[u8], valid: &[bool], truth: &[u8]) -> Result<()> {
        if labels.len() != truth.len() || valid.len() != truth.len() {
            return Err(Error::ShapeMismatch {
                op: "pseudo_label_quality",
                left: vec![labels.len(), valid.len()],
                right: vec![truth.len()],
            });
        }
        self.total += truth.len() as u64;
        for ((&l, &v), &t) in labels.iter().zip(valid).zip(truth) {
            if v {
                self.valid += 1;
                self.correct_valid += (l == t) as u64;
            }
        }
        Ok(())
    }

    pub fn quality(&self) -> PseudoLabelQuality {
        let frac = |n: u64, d: u64| if d == 0 { f64::NAN } else { n as f64 / d as f64 };
        PseudoLabelQuality {
            precision: frac(self.correct_valid, self.valid),
            recall: if self.total == 0 { 0.0 } else { frac(self.correct_valid, self.total) },
            coverage: if self.total == 0 { 0.0 } else { frac(self.valid, self.total) },
        }
    }
}

pub fn pseudo_label_quality(labels: &[u8], valid: &[bool], truth: &[u8]) -> Result<PseudoLabelQuality> {
    let mut c = PseudoLabelCounts::default();
    c.add(labels, valid, truth)?;
    Ok(c.quality())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DiscriminationStats {
    pub intra_trace: f64,
    pub inter_trace: f64,
    /// `inter / intra`; absent when `intra == 0`.
    pub ratio: Option<f64>,
}

impl DiscriminationStats {
    pub fn ratio(&self) -> Result<f64> {
        self.ratio.ok_or(Error::UndefinedRatio)
    }
}

/// `features` is `n x dim` row-major with one class id per row.
///
/// intra: mean over classes (with at least two members) of the trace of the
/// population covariance. inter: `sum_c (n_c / n) |mu_c - mu|^2`.
pub fn discrimination<S: Scalar>(features: &[S], dim: usize, classes: &[usize]) -> Result<DiscriminationStats> {
    if dim == 0 || features.len() != classes.len() * dim {
        return Err(Error::InvalidShape {
            shape: vec![classes.len(), dim],
            len: features.len(),
        });
    }
    let nc = classes.iter().max().map_or(0, |&m| m + 1);
    let mut count = vec![0usize; nc];
    let mut sum = vec![0.0f64; nc * dim];
    for (row, &c) in features.chunks_exact(dim).zip(classes) {
        count[c] += 1;
        sum[c * dim..(c + 1) * dim].iter_mut().zip(row).for_each(|(s, v)| *s += v.f64());
    }
    let present: Vec<usize> = (0..nc).filter(|&c| count[c] > 0).collect();
    if present.len() < 2 {
        return Err(Error::TooFewClasses);
    }
    let mean: Vec<f64> = (0..nc * dim)
        .map(|i| if count[i / dim] > 0 { sum[i] / count[i / dim] as f64 } else { 0.0 })
        .collect();
    let mut scatter = vec![0.0f64; nc];
    for (row, &c) in features.chunks_exact(dim).zip(classes) {
        let m = &mean[c * dim..(c + 1) * dim];
        scatter[c] += row.iter().zip(m).map(|(v, m)| (v.f64() - m).powi(2)).sum::<f64>();
    }
    let mut intra = 0.0;
    let mut used = 0;
    for &c in &present {
        if count[c] < 2 {
            warn!("discrimination: class {c} has a single sample; skipped in intra-class variance");
            continue;
        }
        intra += scatter[c] / count[c] as f64;
        used += 1;
    }
    let intra = if used > 0 { intra / used as f64 } else { 0.0 };
    let n = classes.len() as f64;
    let global: Vec<f64> = (0..dim)
        .map(|t| present.iter().map(|&c| sum[c * dim + t]).sum::<f64>() / n)
        .collect();
    let inter = present
        .iter()
        .map(|&c| {
            let d2: f64 = (0..dim).map(|t| (mean[c * dim + t] - global[t]).powi(2)).sum();
            count[c] as f64 / n * d2
        })
        .sum();
    Ok(DiscriminationStats {
        intra_trace: intra,
        inter_trace: inter,
        ratio: (intra > 0.0).then(|| inter / intra),
    })
}
