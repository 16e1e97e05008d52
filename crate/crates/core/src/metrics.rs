//! Evaluation metrics: per-class IoU, grouped means over the schedule's
//! base/incremental split, and the rate at which old-class pixels collapse
//! into background.

use crate::error::{Error, Result};
use crate::protocol::ClassId;
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

#[derive(Clone, Copy, Debug, Default)]
struct Counts {
    tp: u64,
    fp: u64,
    fn_: u64,
}

/// Streaming confusion counts. Ground-truth ignore pixels are excluded from
/// everything.
#[derive(Clone, Debug, Default)]
pub struct ConfusionAccum {
    counts: BTreeMap<ClassId, Counts>,
}

impl ConfusionAccum {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_maps(&mut self, pred: &Array2<ClassId>, gt: &Array2<ClassId>) -> Result<()> {
        if pred.dim() != gt.dim() {
            return Err(Error::Shape(format!(
                "prediction {:?} does not match ground truth {:?}",
                pred.dim(),
                gt.dim()
            )));
        }
        for (&p, &g) in pred.iter().zip(gt.iter()) {
            if g.is_ignore() {
                continue;
            }
            if p == g {
                self.counts.entry(p).or_default().tp += 1;
            } else {
                self.counts.entry(p).or_default().fp += 1;
                self.counts.entry(g).or_default().fn_ += 1;
            }
        }
        Ok(())
    }

    /// IoU per class; classes that never occur (no tp, fp, or fn) are absent.
    pub fn iou_per_class(&self) -> BTreeMap<ClassId, f64> {
        self.counts
            .iter()
            .filter(|(_, c)| c.tp + c.fp + c.fn_ > 0)
            .map(|(&class, c)| (class, c.tp as f64 / (c.tp + c.fp + c.fn_) as f64))
            .collect()
    }
}

/// Mean of the IoUs of `group` members that have a defined IoU. `None` when
/// no member does.
pub fn group_mean(iou: &BTreeMap<ClassId, f64>, group: &BTreeSet<ClassId>) -> Option<f64> {
    let values: Vec<f64> = group.iter().filter_map(|c| iou.get(c)).copied().collect();
    if values.is_empty() {
        None
    } else {
        Some(values.iter().sum::<f64>() / values.len() as f64)
    }
}

/// Accumulates P(pred = background | gt in targets).
#[derive(Clone, Debug, Default)]
pub struct BgMisclassAccum {
    hits: u64,
    total: u64,
}

impl BgMisclassAccum {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_maps(
        &mut self,
        pred: &Array2<ClassId>,
        gt: &Array2<ClassId>,
        targets: &BTreeSet<ClassId>,
    ) {
        for (&p, &g) in pred.iter().zip(gt.iter()) {
            if g.is_ignore() || !targets.contains(&g) {
                continue;
            }
            self.total += 1;
            if p.is_background() {
                self.hits += 1;
            }
        }
    }

    /// Rate in `[0, 1]`; 0 when no target pixels were seen.
    pub fn rate(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.hits as f64 / self.total as f64
        }
    }
}

/// Frozen per-step evaluation result, serialized to `metrics.json`.
///
/// `base` covers the first step's classes plus background; `inc` covers every
/// later class; `all` covers everything evaluated so far. Values are mIoU in
/// percent-free `[0, 1]` units times 100 at the reporting boundary; here they
/// stay as fractions times 100 for readability in reports.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct MetricReport {
    pub step: usize,
    /// Per-class IoU, keyed by class id.
    pub per_class: BTreeMap<u16, f64>,
    pub base: Option<f64>,
    pub inc: Option<f64>,
    pub all: Option<f64>,
    /// P(predicted background | gt is an already-learned class).
    pub bg_misclass: f64,
}

impl MetricReport {
    pub fn compute(
        confusion: &ConfusionAccum,
        base_classes: &BTreeSet<ClassId>,
        inc_classes: &BTreeSet<ClassId>,
        bg_misclass: f64,
        step: usize,
    ) -> Self {
        let iou = confusion.iou_per_class();
        let mut base_group = base_classes.clone();
        base_group.insert(ClassId::BACKGROUND);
        let mut all_group = base_group.clone();
        all_group.extend(inc_classes.iter().copied());
        let scale = |v: Option<f64>| v.map(|x| x * 100.0);
        MetricReport {
            step,
            per_class: iou.iter().map(|(c, &v)| (c.0, v * 100.0)).collect(),
            base: scale(group_mean(&iou, &base_group)),
            inc: scale(group_mean(&iou, inc_classes)),
            all: scale(group_mean(&iou, &all_group)),
            bg_misclass,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self).expect("report serializes");
        fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let raw = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&raw)
            .map_err(|e| Error::Data(format!("parsing {}: {e}", path.display())))
    }
}
