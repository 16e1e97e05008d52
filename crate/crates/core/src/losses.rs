//! Training objectives: multi-label binary cross-entropy over sigmoid
//! per-class probabilities, and a relation-aware distillation term that
//! anchors old knowledge through the background channel. Both come with
//! closed-form gradients w.r.t. the raw scores.

use crate::error::{Error, Result};
use crate::memory::InstanceRecord;
use crate::model::{sigmoid, softmax, ClassLayout, ConvSegNet, Gradients, ModelSnapshot};
use crate::placement::FusedSample;
use crate::protocol::ClassId;
use crate::Scalar;
use ndarray::{Array2, Array3};
use std::collections::BTreeSet;

/// Probability clamp for the log terms.
pub const MBCE_EPS: f64 = 1e-7;

fn check_same_dims<F: Scalar>(
    probs: &Array3<F>,
    targets: &Array3<F>,
    valid: &Array2<bool>,
) -> Result<()> {
    if probs.dim() != targets.dim() {
        return Err(Error::Shape(format!(
            "probs {:?} vs targets {:?}",
            probs.dim(),
            targets.dim()
        )));
    }
    let (h, w, _) = probs.dim();
    if valid.dim() != (h, w) {
        return Err(Error::Shape(format!(
            "valid mask {:?} vs probs {:?}",
            valid.dim(),
            probs.dim()
        )));
    }
    Ok(())
}

/// Mean binary cross-entropy over every class channel (background included)
/// of every valid pixel. Probabilities are clamped to `[eps, 1-eps]` inside
/// the logs. Zero valid pixels yield a zero loss.
pub fn mbce<F: Scalar>(probs: &Array3<F>, targets: &Array3<F>, valid: &Array2<bool>) -> Result<F> {
    check_same_dims(probs, targets, valid)?;
    let (h, w, k) = probs.dim();
    let eps = F::of(MBCE_EPS);
    let one = F::one();
    let mut acc = F::zero();
    let mut n_valid = 0usize;
    for y in 0..h {
        for x in 0..w {
            if !valid[[y, x]] {
                continue;
            }
            n_valid += 1;
            for c in 0..k {
                let p = probs[[y, x, c]].max(eps).min(one - eps);
                let t = targets[[y, x, c]];
                acc = acc - t * p.ln() - (one - t) * (one - p).ln();
            }
        }
    }
    if n_valid == 0 {
        return Ok(F::zero());
    }
    Ok(acc / F::of_usize(n_valid * k))
}

/// Gradient of [`mbce`] w.r.t. the raw scores: `(sigmoid(s) - t) / (Nv * K)`
/// at valid pixels, zero elsewhere.
pub fn mbce_grad_scores<F: Scalar>(
    probs: &Array3<F>,
    targets: &Array3<F>,
    valid: &Array2<bool>,
) -> Result<Array3<F>> {
    check_same_dims(probs, targets, valid)?;
    let (h, w, k) = probs.dim();
    let n_valid = valid.iter().filter(|&&v| v).count();
    let mut grad = Array3::<F>::zeros((h, w, k));
    if n_valid == 0 {
        return Ok(grad);
    }
    let norm = F::of_usize(n_valid * k);
    for y in 0..h {
        for x in 0..w {
            if !valid[[y, x]] {
                continue;
            }
            for c in 0..k {
                grad[[y, x, c]] = (probs[[y, x, c]] - targets[[y, x, c]]) / norm;
            }
        }
    }
    Ok(grad)
}

fn rskd_validate<F: Scalar>(
    old_probs: &Array3<F>,
    new_probs: &Array3<F>,
    label: &Array2<ClassId>,
    old_classes: &BTreeSet<ClassId>,
    new_classes: &BTreeSet<ClassId>,
    layout: &ClassLayout,
) -> Result<usize> {
    if let Some(c) = old_classes.intersection(new_classes).next() {
        return Err(Error::Config(format!(
            "class {c} appears in both the old and new sets"
        )));
    }
    let (h, w, k_old) = old_probs.dim();
    let (h2, w2, k_new) = new_probs.dim();
    if (h, w) != (h2, w2) || label.dim() != (h, w) {
        return Err(Error::Shape(
            "old probs, new probs, and labels must share spatial dims".into(),
        ));
    }
    if k_old != old_classes.len() + 1 {
        return Err(Error::Shape(format!(
            "old probs have {k_old} channels for {} old classes plus background",
            old_classes.len()
        )));
    }
    if k_new != layout.num_channels() {
        return Err(Error::Shape(format!(
            "new probs have {k_new} channels but the layout has {}",
            layout.num_channels()
        )));
    }
    for &c in old_classes {
        match layout.channel_of(c) {
            Some(ch) if ch < k_old => {}
            _ => {
                return Err(Error::Shape(format!(
                    "old class {c} is not in the layout's old-channel prefix"
                )))
            }
        }
    }
    for &c in new_classes {
        if layout.channel_of(c).is_none() {
            return Err(Error::Shape(format!("new class {c} has no channel")));
        }
    }
    Ok(k_old)
}

/// Relation-style distillation between the previous model's probabilities
/// and the current ones, both computed on the same (fused) image.
///
/// Pixels whose label belongs to the old world (background or an old class)
/// pull the current distribution, restricted to the old channels, toward
/// the old distribution via cross-entropy. Pixels labeled with a new class
/// tie the old background probability to the current merged mass of the new
/// classes plus background, so "new object here" is explained as what the
/// old model called background. The sum is averaged over non-ignore pixels.
pub fn rskd<F: Scalar>(
    old_probs: &Array3<F>,
    new_probs: &Array3<F>,
    label: &Array2<ClassId>,
    old_classes: &BTreeSet<ClassId>,
    new_classes: &BTreeSet<ClassId>,
    layout: &ClassLayout,
) -> Result<F> {
    let k_old = rskd_validate(
        old_probs,
        new_probs,
        label,
        old_classes,
        new_classes,
        layout,
    )?;
    let (h, w, k_new) = new_probs.dim();
    let merged: Vec<usize> = std::iter::once(0)
        .chain(new_classes.iter().map(|&c| layout.channel_of(c).unwrap()))
        .collect();
    let eps = F::of(MBCE_EPS);
    let mut acc = F::zero();
    let mut n_valid = 0usize;
    for y in 0..h {
        for x in 0..w {
            let l = label[[y, x]];
            if l.is_ignore() {
                continue;
            }
            n_valid += 1;
            if new_classes.contains(&l) {
                let mut s = F::zero();
                for &ch in &merged {
                    s += new_probs[[y, x, ch]];
                }
                acc = acc - old_probs[[y, x, 0]] * s.max(eps).ln();
            } else if l.is_background() || old_classes.contains(&l) {
                for ch in 0..k_old {
                    let p = new_probs[[y, x, ch]].max(eps);
                    acc = acc - old_probs[[y, x, ch]] * p.ln();
                }
            } else {
                return Err(Error::Shape(format!(
                    "label class {l} is neither old, new, nor background"
                )));
            }
        }
    }
    let _ = k_new;
    if n_valid == 0 {
        return Ok(F::zero());
    }
    Ok(acc / F::of_usize(n_valid))
}

/// Gradient of [`rskd`] w.r.t. the current raw scores (`new_probs` must be
/// the softmax of those scores).
///
/// Old-world pixels: `p_j - q_j [j in old channels]` (the old distribution
/// sums to 1 over its channels). New-class pixels with merged mass
/// `S = sum_{M} p_k`: `q_bg * p_j * (1 - [j in M] / S)`. Both divided by the
/// number of contributing pixels.
pub fn rskd_grad_scores<F: Scalar>(
    old_probs: &Array3<F>,
    new_probs: &Array3<F>,
    label: &Array2<ClassId>,
    old_classes: &BTreeSet<ClassId>,
    new_classes: &BTreeSet<ClassId>,
    layout: &ClassLayout,
) -> Result<Array3<F>> {
    let k_old = rskd_validate(
        old_probs,
        new_probs,
        label,
        old_classes,
        new_classes,
        layout,
    )?;
    let (h, w, k_new) = new_probs.dim();
    let merged: Vec<usize> = std::iter::once(0)
        .chain(new_classes.iter().map(|&c| layout.channel_of(c).unwrap()))
        .collect();
    let in_merged: Vec<bool> = (0..k_new).map(|ch| merged.contains(&ch)).collect();
    let n_valid = label.iter().filter(|l| !l.is_ignore()).count();
    let mut grad = Array3::<F>::zeros((h, w, k_new));
    if n_valid == 0 {
        return Ok(grad);
    }
    let norm = F::of_usize(n_valid);
    let eps = F::of(MBCE_EPS);
    for y in 0..h {
        for x in 0..w {
            let l = label[[y, x]];
            if l.is_ignore() {
                continue;
            }
            if new_classes.contains(&l) {
                let mut s = F::zero();
                for &ch in &merged {
                    s += new_probs[[y, x, ch]];
                }
                let s = s.max(eps);
                let q_bg = old_probs[[y, x, 0]];
                for j in 0..k_new {
                    let ind = if in_merged[j] { F::one() } else { F::zero() };
                    grad[[y, x, j]] = q_bg * new_probs[[y, x, j]] * (F::one() - ind / s) / norm;
                }
            } else {
                for j in 0..k_new {
                    let q = if j < k_old {
                        old_probs[[y, x, j]]
                    } else {
                        F::zero()
                    };
                    grad[[y, x, j]] = (new_probs[[y, x, j]] - q) / norm;
                }
            }
        }
    }
    Ok(grad)
}

/// Per-sample loss report. `total` always equals
/// `mbce_instance + mbce_image + alpha * rskd` up to rounding.
#[derive(Clone, Copy, Debug, Default)]
pub struct LossBreakdown {
    pub mbce_instance: f64,
    pub mbce_image: f64,
    pub rskd: f64,
    pub alpha: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn add(&mut self, other: &LossBreakdown) {
        self.mbce_instance += other.mbce_instance;
        self.mbce_image += other.mbce_image;
        self.rskd += other.rskd;
        self.total += other.total;
        self.alpha = other.alpha;
    }

    pub fn scale(&mut self, f: f64) {
        self.mbce_instance *= f;
        self.mbce_image *= f;
        self.rskd *= f;
        self.total *= f;
    }
}

/// One-vs-all targets for a stored instance crop: the instance channel is 1
/// inside the mask, background is 1 outside, everything else 0.
pub fn instance_targets<F: Scalar>(
    record: &InstanceRecord<F>,
    layout: &ClassLayout,
) -> Result<Array3<F>> {
    let channel = layout
        .channel_of(record.class)
        .ok_or_else(|| Error::Shape(format!("instance class {} has no channel", record.class)))?;
    let (h, w) = record.mask.dim();
    let k = layout.num_channels();
    let mut targets = Array3::<F>::zeros((h, w, k));
    for y in 0..h {
        for x in 0..w {
            let ch = if record.mask[[y, x]] { channel } else { 0 };
            targets[[y, x, ch]] = F::one();
        }
    }
    Ok(targets)
}

/// Full objective for one image-bearing batch item: image-level mbce on the
/// fused soft labels, mean instance-level mbce over crop forwards of the
/// pasted instances, and (when `old` is supplied) the distillation term
/// weighted by `alpha`. Returns the breakdown and the parameter gradient.
pub fn image_item_loss<F: Scalar>(
    net: &ConvSegNet<F>,
    old: Option<&ModelSnapshot<F>>,
    fused: &FusedSample<F>,
    instances: &[&InstanceRecord<F>],
    alpha: f64,
) -> Result<(LossBreakdown, Gradients<F>)> {
    let layout = net.layout();
    let (scores, tape) = net.forward_train(&fused.image);
    let probs = sigmoid(&scores);
    let valid = fused.hard_label.mapv(|c| !c.is_ignore());
    let mbce_image = mbce(&probs, &fused.soft_label, &valid)?;
    let mut dscores = mbce_grad_scores(&probs, &fused.soft_label, &valid)?;

    let mut rskd_value = F::zero();
    if let Some(old_model) = old {
        let old_layout = old_model.layout();
        if !old_layout.is_prefix_of(layout) {
            return Err(Error::Shape(
                "old model's layout is not a prefix of the current one".into(),
            ));
        }
        let old_classes: BTreeSet<ClassId> = old_layout
            .classes()
            .iter()
            .copied()
            .filter(|c| !c.is_background())
            .collect();
        let new_classes: BTreeSet<ClassId> = layout.classes()[old_layout.num_channels()..]
            .iter()
            .copied()
            .collect();
        let old_probs = softmax(&old_model.forward(&fused.image));
        let new_probs = softmax(&scores);
        let branch = fused.dominant_label(layout);
        rskd_value = rskd(
            &old_probs,
            &new_probs,
            &branch,
            &old_classes,
            &new_classes,
            layout,
        )?;
        let rskd_grad = rskd_grad_scores(
            &old_probs,
            &new_probs,
            &branch,
            &old_classes,
            &new_classes,
            layout,
        )?;
        let a = F::of(alpha);
        ndarray::Zip::from(&mut dscores)
            .and(&rskd_grad)
            .for_each(|d, &g| *d += a * g);
    }

    let mut grads = net.backward(&tape, &dscores);

    let mut mbce_inst = F::zero();
    if !instances.is_empty() {
        let weight = F::of(1.0 / instances.len() as f64);
        for record in instances {
            let (crop_scores, crop_tape) = net.forward_train(&record.pixels);
            let crop_probs = sigmoid(&crop_scores);
            let targets = instance_targets(record, layout)?;
            let all_valid = Array2::from_elem(record.mask.dim(), true);
            mbce_inst += mbce(&crop_probs, &targets, &all_valid)? * weight;
            let mut dcrop = mbce_grad_scores(&crop_probs, &targets, &all_valid)?;
            dcrop.mapv_inplace(|v| v * weight);
            grads.add_assign(&net.backward(&crop_tape, &dcrop));
        }
    }

    let breakdown = LossBreakdown {
        mbce_instance: mbce_inst.as_f64(),
        mbce_image: mbce_image.as_f64(),
        rskd: rskd_value.as_f64(),
        alpha,
        total: mbce_inst.as_f64() + mbce_image.as_f64() + alpha * rskd_value.as_f64(),
    };
    Ok((breakdown, grads))
}

/// Objective for a bare stored-crop batch item (the plain instance-replay
/// baseline): instance-level mbce only.
pub fn crop_item_loss<F: Scalar>(
    net: &ConvSegNet<F>,
    record: &InstanceRecord<F>,
) -> Result<(LossBreakdown, Gradients<F>)> {
    let (scores, tape) = net.forward_train(&record.pixels);
    let probs = sigmoid(&scores);
    let targets = instance_targets(record, net.layout())?;
    let all_valid = Array2::from_elem(record.mask.dim(), true);
    let value = mbce(&probs, &targets, &all_valid)?;
    let dscores = mbce_grad_scores(&probs, &targets, &all_valid)?;
    let grads = net.backward(&tape, &dscores);
    let breakdown = LossBreakdown {
        mbce_instance: value.as_f64(),
        mbce_image: 0.0,
        rskd: 0.0,
        alpha: 0.0,
        total: value.as_f64(),
    };
    Ok((breakdown, grads))
}
