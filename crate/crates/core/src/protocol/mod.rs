//! Learning protocol: class identities, step schedules, and the relabeling
//! that turns a fully annotated dataset into per-step training views.

pub mod synthetic;
pub mod voc;

use crate::error::{Error, Result};
use crate::Scalar;
use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::fmt;

/// Semantic class identifier. `0` is background; the maximum representable
/// value is the ignore sentinel and never a real class.
#[derive(
    Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Debug, Serialize, Deserialize, Default,
)]
#[serde(transparent)]
pub struct ClassId(pub u16);

impl ClassId {
    pub const BACKGROUND: ClassId = ClassId(0);
    /// Pixels carrying this value are excluded from every loss and metric.
    pub const IGNORE: ClassId = ClassId(u16::MAX);

    pub fn is_background(self) -> bool {
        self == Self::BACKGROUND
    }

    pub fn is_ignore(self) -> bool {
        self == Self::IGNORE
    }
}

impl fmt::Display for ClassId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_ignore() {
            write!(f, "ignore")
        } else {
            write!(f, "{}", self.0)
        }
    }
}

/// How step datasets treat images containing classes from other steps.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleMode {
    /// An image joins step `t` if it shows any current class; pixels of old
    /// and future classes are relabeled to background (background shift).
    Overlapped,
    /// An image joins step `t` only if it contains no future classes at all.
    Disjoint,
}

impl fmt::Display for ScheduleMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ScheduleMode::Overlapped => write!(f, "overlapped"),
            ScheduleMode::Disjoint => write!(f, "disjoint"),
        }
    }
}

/// Partition of the class set into an ordered sequence of learning steps.
///
/// Steps are 1-based throughout. Background is implicit and never part of
/// any step.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSchedule {
    steps: Vec<BTreeSet<ClassId>>,
    mode: ScheduleMode,
}

impl TaskSchedule {
    /// Validates that the groups are non-empty, mutually disjoint, and
    /// together cover `1..=max` with no gaps.
    pub fn new(groups: Vec<Vec<u16>>, mode: ScheduleMode) -> Result<Self> {
        if groups.is_empty() {
            return Err(Error::Config("schedule has no steps".into()));
        }
        let mut seen = BTreeSet::new();
        let mut steps = Vec::with_capacity(groups.len());
        for (i, group) in groups.iter().enumerate() {
            if group.is_empty() {
                return Err(Error::Config(format!("schedule step {} is empty", i + 1)));
            }
            let mut set = BTreeSet::new();
            for &c in group {
                if c == 0 {
                    return Err(Error::Config(
                        "schedule may not contain the background class 0".into(),
                    ));
                }
                if c == u16::MAX {
                    return Err(Error::Config(
                        "schedule may not contain the ignore sentinel".into(),
                    ));
                }
                if !seen.insert(c) {
                    return Err(Error::Config(format!(
                        "class {c} appears in more than one schedule step"
                    )));
                }
                set.insert(ClassId(c));
            }
            steps.push(set);
        }
        let max = *seen.iter().max().expect("non-empty");
        if seen.len() != max as usize {
            return Err(Error::Config(format!(
                "schedule covers {} classes but the largest id is {max}; class ids must be contiguous from 1",
                seen.len()
            )));
        }
        Ok(TaskSchedule { steps, mode })
    }

    /// Parses the `"<base>-<increment>"` shorthand, e.g. `"15-1"`: a base
    /// step with the first `base` classes followed by steps of `increment`
    /// classes each until `total_classes` is reached.
    pub fn from_shorthand(shorthand: &str, total_classes: u16, mode: ScheduleMode) -> Result<Self> {
        let parts: Vec<&str> = shorthand.split('-').collect();
        if parts.len() != 2 {
            return Err(Error::Config(format!(
                "schedule shorthand '{shorthand}' must be '<base>-<increment>'"
            )));
        }
        let base: u16 = parts[0]
            .parse()
            .map_err(|_| Error::Config(format!("bad schedule base '{}'", parts[0])))?;
        let inc: u16 = parts[1]
            .parse()
            .map_err(|_| Error::Config(format!("bad schedule increment '{}'", parts[1])))?;
        if base == 0 || inc == 0 {
            return Err(Error::Config(
                "schedule base and increment must be positive".into(),
            ));
        }
        if base > total_classes {
            return Err(Error::Config(format!(
                "schedule base {base} exceeds the {total_classes} available classes"
            )));
        }
        if (total_classes - base) % inc != 0 {
            return Err(Error::Config(format!(
                "remaining {} classes are not divisible by increment {inc}",
                total_classes - base
            )));
        }
        let mut groups = vec![(1..=base).collect::<Vec<u16>>()];
        let mut next = base + 1;
        while next <= total_classes {
            groups.push((next..next + inc).collect());
            next += inc;
        }
        TaskSchedule::new(groups, mode)
    }

    pub fn mode(&self) -> ScheduleMode {
        self.mode
    }

    pub fn num_steps(&self) -> usize {
        self.steps.len()
    }

    /// Classes introduced at step `t` (1-based).
    pub fn new_classes(&self, t: usize) -> &BTreeSet<ClassId> {
        assert!(t >= 1 && t <= self.steps.len(), "step {t} out of range");
        &self.steps[t - 1]
    }

    /// Classes learned strictly before step `t`.
    pub fn old_classes(&self, t: usize) -> BTreeSet<ClassId> {
        assert!(t >= 1 && t <= self.steps.len(), "step {t} out of range");
        self.steps[..t - 1].iter().flatten().copied().collect()
    }

    /// Classes learned up to and including step `t`.
    pub fn seen_classes(&self, t: usize) -> BTreeSet<ClassId> {
        assert!(t >= 1 && t <= self.steps.len(), "step {t} out of range");
        self.steps[..t].iter().flatten().copied().collect()
    }

    pub fn future_classes(&self, t: usize) -> BTreeSet<ClassId> {
        assert!(t >= 1 && t <= self.steps.len(), "step {t} out of range");
        self.steps[t..].iter().flatten().copied().collect()
    }

    pub fn all_classes(&self) -> BTreeSet<ClassId> {
        self.steps.iter().flatten().copied().collect()
    }

    /// Classes of the base step, plus background. Used for grouped metrics.
    pub fn base_classes(&self) -> BTreeSet<ClassId> {
        self.steps[0].clone()
    }

    /// Classes of every step after the base step.
    pub fn incremental_classes(&self) -> BTreeSet<ClassId> {
        self.steps[1..].iter().flatten().copied().collect()
    }
}

/// One annotated image: RGB pixels in `[0, 1]` and a per-pixel class map.
#[derive(Clone, Debug, PartialEq)]
pub struct SegSample<F> {
    pub id: String,
    /// Shape `(H, W, 3)`.
    pub image: Array3<F>,
    /// Shape `(H, W)`.
    pub label: Array2<ClassId>,
}

impl<F: Scalar> SegSample<F> {
    pub fn new(id: String, image: Array3<F>, label: Array2<ClassId>) -> Result<Self> {
        let (h, w, c) = image.dim();
        if c != 3 {
            return Err(Error::Shape(format!(
                "sample '{id}': image has {c} channels, expected 3"
            )));
        }
        if label.dim() != (h, w) {
            return Err(Error::Shape(format!(
                "sample '{id}': label {:?} does not match image {:?}",
                label.dim(),
                (h, w)
            )));
        }
        if image
            .iter()
            .any(|v| !v.is_finite() || *v < F::zero() || *v > F::one())
        {
            return Err(Error::Data(format!(
                "sample '{id}': image values must be finite and within [0, 1]"
            )));
        }
        Ok(SegSample { id, image, label })
    }

    pub fn height(&self) -> usize {
        self.image.dim().0
    }

    pub fn width(&self) -> usize {
        self.image.dim().1
    }

    /// Real classes present in the label map (background and ignore excluded).
    pub fn classes_present(&self) -> BTreeSet<ClassId> {
        self.label
            .iter()
            .copied()
            .filter(|c| !c.is_background() && !c.is_ignore())
            .collect()
    }

    pub fn class_pixel_count(&self, class: ClassId) -> usize {
        self.label.iter().filter(|&&c| c == class).count()
    }
}

/// Training view of one learning step after sample selection and relabeling.
#[derive(Clone, Debug)]
pub struct StepDataset<F> {
    pub step: usize,
    pub new_classes: BTreeSet<ClassId>,
    pub old_classes: BTreeSet<ClassId>,
    pub samples: Vec<SegSample<F>>,
}

/// Selects and relabels the samples visible at step `t`.
///
/// A sample qualifies when it carries at least `min_new_pixels` pixels of
/// some class introduced at `t` (and, in disjoint mode, no future-class
/// pixels at all). Pixels of classes outside the current step are relabeled
/// to background; ignore pixels are preserved.
pub fn build_step_dataset<F: Scalar>(
    full: &[SegSample<F>],
    schedule: &TaskSchedule,
    t: usize,
    min_new_pixels: usize,
) -> Result<StepDataset<F>> {
    if t < 1 || t > schedule.num_steps() {
        return Err(Error::Config(format!(
            "step {t} outside schedule of {} steps",
            schedule.num_steps()
        )));
    }
    let min_new_pixels = min_new_pixels.max(1);
    let new = schedule.new_classes(t);
    let future = schedule.future_classes(t);
    let mut samples = Vec::new();
    for sample in full {
        let mut new_px = 0usize;
        let mut has_future = false;
        for c in sample.label.iter() {
            if new.contains(c) {
                new_px += 1;
            } else if future.contains(c) {
                has_future = true;
            }
        }
        if new_px < min_new_pixels {
            continue;
        }
        if schedule.mode() == ScheduleMode::Disjoint && has_future {
            continue;
        }
        let label = sample.label.mapv(|c| {
            if c.is_ignore() || c.is_background() || new.contains(&c) {
                c
            } else {
                ClassId::BACKGROUND
            }
        });
        samples.push(SegSample {
            id: sample.id.clone(),
            image: sample.image.clone(),
            label,
        });
    }
    if samples.is_empty() {
        return Err(Error::Data(format!(
            "step {t} selects no samples; classes {:?} never reach {min_new_pixels} pixels",
            new.iter().map(|c| c.0).collect::<Vec<_>>()
        )));
    }
    Ok(StepDataset {
        step: t,
        new_classes: new.clone(),
        old_classes: schedule.old_classes(t),
        samples,
    })
}

/// Relabels an evaluation sample for step `t`: classes not yet learned become
/// ignore so they count neither for nor against, everything else is kept.
pub fn eval_view_label(
    label: &Array2<ClassId>,
    schedule: &TaskSchedule,
    t: usize,
) -> Array2<ClassId> {
    let seen = schedule.seen_classes(t);
    label.mapv(|c| {
        if c.is_background() || c.is_ignore() || seen.contains(&c) {
            c
        } else {
            ClassId::IGNORE
        }
    })
}
