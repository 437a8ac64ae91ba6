//! Confusion-matrix accumulation and mean IoU.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::pipeline::SegMap;

pub const DEFAULT_IGNORE_INDEX: u32 = 255;

/// `counts[gt][pred]` over non-ignored pixels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    ignore_index: u32,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self::with_ignore(classes, DEFAULT_IGNORE_INDEX)
    }

    pub fn with_ignore(classes: usize, ignore_index: u32) -> Self {
        Self {
            classes,
            ignore_index,
            counts: vec![0; classes * classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn ignore_index(&self) -> u32 {
        self.ignore_index
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn accumulate(&mut self, pred: &SegMap, gt: &SegMap) -> Result<()> {
        if (pred.height, pred.width) != (gt.height, gt.width) {
            return Err(Error::Validation(format!(
                "prediction {}x{} vs ground truth {}x{}",
                pred.height, pred.width, gt.height, gt.width
            )));
        }
        let c = self.classes;
        // validate first so a bad map leaves the counts untouched
        for (&p, &g) in pred.labels.iter().zip(&gt.labels) {
            if g == self.ignore_index {
                continue;
            }
            if g as usize >= c || p as usize >= c {
                return Err(Error::Validation(format!(
                    "label pair (gt {g}, pred {p}) outside [0, {c})"
                )));
            }
        }
        for (&p, &g) in pred.labels.iter().zip(&gt.labels) {
            if g != self.ignore_index {
                self.counts[g as usize * c + p as usize] += 1;
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes || other.ignore_index != self.ignore_index {
            return Err(Error::Validation(format!(
                "cannot merge {}-class matrix into {}-class matrix",
                other.classes, self.classes
            )));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += *b;
        }
        Ok(())
    }

    /// `TP / (TP + FP + FN)` per class; classes with an empty union are `None`
    /// and excluded from the mean.
    pub fn miou(&self) -> MiouResult {
        let c = self.classes;
        let per_class: Vec<Option<f64>> = (0..c)
            .map(|k| {
                let tp = self.get(k, k);
                let fn_: u64 = (0..c).map(|p| self.get(k, p)).sum::<u64>() - tp;
                let fp: u64 = (0..c).map(|g| self.get(g, k)).sum::<u64>() - tp;
                let union = tp + fp + fn_;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect();
        let present: Vec<f64> = per_class.iter().flatten().copied().collect();
        let mean =
            (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64);
        MiouResult { per_class, mean }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MiouResult {
    pub per_class: Vec<Option<f64>>,
    /// `None` when no class had any pixel ("no data").
    pub mean: Option<f64>,
}
