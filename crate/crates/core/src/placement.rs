//! Instance placement: a region grid over the target image, background-rich
//! anchor selection, shrink-only fitting, and mixup blending of the pasted
//! crop into both pixels and soft labels.

use crate::error::{Error, Result};
use crate::memory::InstanceRecord;
use crate::model::ClassLayout;
use crate::protocol::{ClassId, SegSample};
use crate::rng::sample_beta;
use crate::Scalar;
use ndarray::{Array2, Array3};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Rect {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

/// Partition of an `h x w` image into `rows x cols` near-equal cells.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RegionGrid {
    pub rows: usize,
    pub cols: usize,
    regions: Vec<Rect>,
}

impl RegionGrid {
    pub fn len(&self) -> usize {
        self.regions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.regions.is_empty()
    }

    pub fn region(&self, index: usize) -> Rect {
        self.regions[index]
    }

    pub fn regions(&self) -> &[Rect] {
        &self.regions
    }
}

/// Splits `extent` into `parts` bands; the first `extent % parts` bands are
/// one longer.
fn bands(extent: usize, parts: usize) -> Vec<(usize, usize)> {
    let base = extent / parts;
    let rem = extent % parts;
    let mut out = Vec::with_capacity(parts);
    let mut start = 0;
    for i in 0..parts {
        let len = base + usize::from(i < rem);
        out.push((start, len));
        start += len;
    }
    out
}

/// `|ln(c*h / (r*w))|` comparison in exact integer arithmetic: the pair with
/// the smaller max(ratio, 1/ratio) wins; ties go to more columns.
fn ratio_badness(rows: usize, cols: usize, h: usize, w: usize) -> (u128, u128) {
    let a = (cols * h) as u128;
    let b = (rows * w) as u128;
    if a >= b {
        (a, b)
    } else {
        (b, a)
    }
}

/// Builds the placement grid: `n` cells arranged in the factor pair whose
/// cols/rows ratio is closest to the image aspect ratio (ties toward more
/// columns), cells sized near-equally.
pub fn build_region_grid(h: usize, w: usize, n: usize) -> Result<RegionGrid> {
    if n == 0 {
        return Err(Error::Config("region count must be positive".into()));
    }
    if h == 0 || w == 0 {
        return Err(Error::Shape("cannot grid an empty image".into()));
    }
    let mut best: Option<(usize, usize)> = None;
    for rows in 1..=n {
        if n % rows != 0 {
            continue;
        }
        let cols = n / rows;
        if rows > h || cols > w {
            continue;
        }
        let better = match best {
            None => true,
            Some((br, bc)) => {
                // Compare cur = (n1, d1) and best = (n2, d2) as fractions.
                let (n1, d1) = ratio_badness(rows, cols, h, w);
                let (n2, d2) = ratio_badness(br, bc, h, w);
                match (n1 * d2).cmp(&(n2 * d1)) {
                    std::cmp::Ordering::Less => true,
                    std::cmp::Ordering::Equal => cols > bc,
                    std::cmp::Ordering::Greater => false,
                }
            }
        };
        if better {
            best = Some((rows, cols));
        }
    }
    let (rows, cols) =
        best.ok_or_else(|| Error::Config(format!("no {n}-cell grid fits a {h}x{w} image")))?;
    let mut regions = Vec::with_capacity(n);
    for (top, height) in bands(h, rows) {
        for (left, width) in bands(w, cols) {
            regions.push(Rect {
                top,
                left,
                height,
                width,
            });
        }
    }
    Ok(RegionGrid {
        rows,
        cols,
        regions,
    })
}

/// Picks the unoccupied region with the most background-labeled pixels (ties
/// to the lowest region index) and anchors at its top-left corner. `None`
/// when every region is occupied.
pub fn choose_anchor(
    label: &Array2<ClassId>,
    grid: &RegionGrid,
    occupied: &[usize],
) -> Option<(usize, (usize, usize))> {
    let mut best: Option<(usize, usize)> = None; // (count, index)
    for (i, r) in grid.regions().iter().enumerate() {
        if occupied.contains(&i) {
            continue;
        }
        let mut count = 0usize;
        for y in r.top..r.top + r.height {
            for x in r.left..r.left + r.width {
                if label[[y, x]].is_background() {
                    count += 1;
                }
            }
        }
        let better = match best {
            None => true,
            Some((bc, _)) => count > bc,
        };
        if better {
            best = Some((count, i));
        }
    }
    best.map(|(_, i)| {
        let r = grid.region(i);
        (i, (r.top, r.left))
    })
}

/// A committed placement: anchor, region, and the shrink-only scale.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PlacementPlan {
    pub region_index: usize,
    pub anchor: (usize, usize),
    pub scale: f64,
    pub target_h: usize,
    pub target_w: usize,
}

/// Why an instance was not pasted.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum FitReject {
    /// Required shrink fell below the minimum scale.
    BelowMinScale { scale: f64 },
    /// Every grid region is already occupied.
    NoFreeRegion,
}

/// Scales the instance down (never up) so it fits between the anchor and the
/// image border: `scale = min(1, (H-u)/h, (W-v)/w)`. Scales below
/// `min_scale` are rejected.
pub fn fit_instance<F: Scalar>(
    record: &InstanceRecord<F>,
    anchor: (usize, usize),
    region_index: usize,
    img_h: usize,
    img_w: usize,
    min_scale: f64,
) -> std::result::Result<PlacementPlan, FitReject> {
    let (h, w) = record.mask.dim();
    let (u, v) = anchor;
    assert!(u < img_h && v < img_w, "anchor must lie inside the image");
    let scale = 1.0f64
        .min((img_h - u) as f64 / h as f64)
        .min((img_w - v) as f64 / w as f64);
    if scale < min_scale {
        return Err(FitReject::BelowMinScale { scale });
    }
    let (target_h, target_w) = if scale >= 1.0 {
        (h, w)
    } else {
        (
            ((h as f64 * scale).round() as usize).clamp(1, img_h - u),
            ((w as f64 * scale).round() as usize).clamp(1, img_w - v),
        )
    };
    Ok(PlacementPlan {
        region_index,
        anchor,
        scale,
        target_h,
        target_w,
    })
}

/// Bilinear resampling of an `(h, w, 3)` crop, pixel-center aligned.
pub fn resize_bilinear<F: Scalar>(pixels: &Array3<F>, nh: usize, nw: usize) -> Array3<F> {
    let (h, w, c) = pixels.dim();
    if (nh, nw) == (h, w) {
        return pixels.clone();
    }
    let sy = h as f64 / nh as f64;
    let sx = w as f64 / nw as f64;
    Array3::from_shape_fn((nh, nw, c), |(y, x, ch)| {
        let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
        let y0 = fy.floor() as usize;
        let x0 = fx.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let x1 = (x0 + 1).min(w - 1);
        let wy = fy - y0 as f64;
        let wx = fx - x0 as f64;
        let v00 = pixels[[y0, x0, ch]].as_f64();
        let v01 = pixels[[y0, x1, ch]].as_f64();
        let v10 = pixels[[y1, x0, ch]].as_f64();
        let v11 = pixels[[y1, x1, ch]].as_f64();
        let top = v00 * (1.0 - wx) + v01 * wx;
        let bot = v10 * (1.0 - wx) + v11 * wx;
        F::of(top * (1.0 - wy) + bot * wy)
    })
}

/// Nearest-neighbor resampling for binary masks; never invents membership.
pub fn resize_mask_nearest(mask: &Array2<bool>, nh: usize, nw: usize) -> Array2<bool> {
    let (h, w) = mask.dim();
    if (nh, nw) == (h, w) {
        return mask.clone();
    }
    let sy = h as f64 / nh as f64;
    let sx = w as f64 / nw as f64;
    Array2::from_shape_fn((nh, nw), |(y, x)| {
        let fy = (((y as f64 + 0.5) * sy).floor() as usize).min(h - 1);
        let fx = (((x as f64 + 0.5) * sx).floor() as usize).min(w - 1);
        mask[[fy, fx]]
    })
}

/// A training sample after zero or more fusions: blended pixels, soft
/// per-channel targets, the untouched hard label (for ignore handling and
/// bookkeeping), and a record of what was pasted where.
#[derive(Clone, Debug, PartialEq)]
pub struct FusedSample<F> {
    pub id: String,
    /// Blended pixels `(H, W, 3)`.
    pub image: Array3<F>,
    /// Soft targets `(H, W, K)` over the layout's channels; rows sum to 1
    /// except at ignore pixels, which are all zero.
    pub soft_label: Array3<F>,
    /// The sample's original (relabeled) hard annotation.
    pub hard_label: Array2<ClassId>,
    /// Pixels touched by at least one paste.
    pub fused_mask: Array2<bool>,
    /// Classes of successfully pasted instances.
    pub fused_classes: BTreeSet<ClassId>,
}

impl<F: Scalar> FusedSample<F> {
    /// Lifts a plain sample: one-hot soft labels, nothing fused.
    pub fn from_sample(sample: &SegSample<F>, layout: &ClassLayout) -> Result<Self> {
        let (h, w, _) = sample.image.dim();
        let k = layout.num_channels();
        let mut soft = Array3::<F>::zeros((h, w, k));
        for y in 0..h {
            for x in 0..w {
                let c = sample.label[[y, x]];
                if c.is_ignore() {
                    continue;
                }
                let ch = layout.channel_of(c).ok_or_else(|| {
                    Error::Shape(format!("label class {c} has no channel in the layout"))
                })?;
                soft[[y, x, ch]] = F::one();
            }
        }
        Ok(FusedSample {
            id: sample.id.clone(),
            image: sample.image.clone(),
            soft_label: soft,
            hard_label: sample.label.clone(),
            fused_mask: Array2::from_elem((h, w), false),
            fused_classes: BTreeSet::new(),
        })
    }

    /// Per-pixel dominant class: argmax of the soft target decoded through
    /// the layout; ignore pixels stay ignore. At unfused pixels this is the
    /// hard label.
    pub fn dominant_label(&self, layout: &ClassLayout) -> Array2<ClassId> {
        let (h, w, k) = self.soft_label.dim();
        Array2::from_shape_fn((h, w), |(y, x)| {
            if self.hard_label[[y, x]].is_ignore() {
                return ClassId::IGNORE;
            }
            let mut best = 0usize;
            let mut best_v = self.soft_label[[y, x, 0]];
            for c in 1..k {
                if self.soft_label[[y, x, c]] > best_v {
                    best_v = self.soft_label[[y, x, c]];
                    best = c;
                }
            }
            layout.class_at(best)
        })
    }
}

/// Blends a fitted instance into the sample. `lambda` is the weight of the
/// existing content: at masked pixels the image becomes
/// `lambda * base + (1 - lambda) * instance` and the soft label row becomes
/// the same convex mix of the current row with the instance's one-hot.
/// Ignore pixels are never touched.
pub fn mixup_fuse<F: Scalar>(
    base: &mut FusedSample<F>,
    record: &InstanceRecord<F>,
    layout: &ClassLayout,
    plan: &PlacementPlan,
    lambda: f64,
) -> Result<()> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Config(format!(
            "mixup weight {lambda} outside [0, 1]"
        )));
    }
    let channel = layout.channel_of(record.class).ok_or_else(|| {
        Error::Shape(format!(
            "instance class {} has no channel in the layout",
            record.class
        ))
    })?;
    let (img_h, img_w, k) = base.soft_label.dim();
    let (u, v) = plan.anchor;
    if u + plan.target_h > img_h || v + plan.target_w > img_w {
        return Err(Error::Shape("placement exceeds the image".into()));
    }
    let pixels = resize_bilinear(&record.pixels, plan.target_h, plan.target_w);
    let mask = resize_mask_nearest(&record.mask, plan.target_h, plan.target_w);
    let lam = F::of(lambda);
    let inv = F::of(1.0 - lambda);
    for iy in 0..plan.target_h {
        for ix in 0..plan.target_w {
            if !mask[[iy, ix]] {
                continue;
            }
            let (y, x) = (u + iy, v + ix);
            if base.hard_label[[y, x]].is_ignore() {
                continue;
            }
            for ch in 0..3 {
                base.image[[y, x, ch]] = lam * base.image[[y, x, ch]] + inv * pixels[[iy, ix, ch]];
            }
            for c in 0..k {
                let onehot = if c == channel { F::one() } else { F::zero() };
                base.soft_label[[y, x, c]] = lam * base.soft_label[[y, x, c]] + inv * onehot;
            }
            base.fused_mask[[y, x]] = true;
        }
    }
    base.fused_classes.insert(record.class);
    Ok(())
}

/// How the pasted-instance mixup weight is drawn.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LambdaMode {
    Beta { a: f64, b: f64 },
    Fixed { value: f64 },
}

impl LambdaMode {
    pub fn draw(&self, rng: &mut ChaCha8Rng) -> f64 {
        match *self {
            LambdaMode::Beta { a, b } => sample_beta(rng, a, b),
            LambdaMode::Fixed { value } => value,
        }
    }
}

/// Per-instance outcome while fusing a batch sample, for the fusion log.
#[derive(Clone, Debug, Serialize)]
pub struct FusionEvent {
    pub class: u16,
    pub source_id: String,
    pub outcome: FusionOutcome,
}

#[derive(Clone, Debug, Serialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FusionOutcome {
    Pasted {
        region: usize,
        anchor: [usize; 2],
        scale: f64,
        lambda: f64,
    },
    SkippedBelowMinScale {
        scale: f64,
    },
    SkippedNoFreeRegion,
}

pub struct FuseParams {
    pub region_n: usize,
    pub min_scale: f64,
    pub lambda: LambdaMode,
}

/// Fuses the selected instances into one sample. Each paste occupies one
/// grid region; anchors always target the most background-rich free region
/// of the *original* label map. Instances that cannot fit are skipped, not
/// errors.
pub fn fuse_all<F: Scalar>(
    sample: &SegSample<F>,
    records: &[&InstanceRecord<F>],
    layout: &ClassLayout,
    params: &FuseParams,
    rng: &mut ChaCha8Rng,
) -> Result<(FusedSample<F>, Vec<FusionEvent>)> {
    let mut fused = FusedSample::from_sample(sample, layout)?;
    let mut events = Vec::with_capacity(records.len());
    if records.is_empty() {
        return Ok((fused, events));
    }
    let grid = build_region_grid(sample.height(), sample.width(), params.region_n)?;
    let mut occupied = Vec::new();
    for record in records {
        let Some((region_index, anchor)) = choose_anchor(&sample.label, &grid, &occupied) else {
            events.push(FusionEvent {
                class: record.class.0,
                source_id: record.source_id.clone(),
                outcome: FusionOutcome::SkippedNoFreeRegion,
            });
            continue;
        };
        match fit_instance(
            record,
            anchor,
            region_index,
            sample.height(),
            sample.width(),
            params.min_scale,
        ) {
            Ok(plan) => {
                let lambda = params.lambda.draw(rng);
                mixup_fuse(&mut fused, record, layout, &plan, lambda)?;
                occupied.push(region_index);
                events.push(FusionEvent {
                    class: record.class.0,
                    source_id: record.source_id.clone(),
                    outcome: FusionOutcome::Pasted {
                        region: region_index,
                        anchor: [anchor.0, anchor.1],
                        scale: plan.scale,
                        lambda,
                    },
                });
            }
            Err(FitReject::BelowMinScale { scale }) => {
                events.push(FusionEvent {
                    class: record.class.0,
                    source_id: record.source_id.clone(),
                    outcome: FusionOutcome::SkippedBelowMinScale { scale },
                });
            }
            Err(FitReject::NoFreeRegion) => unreachable!("anchor was just chosen"),
        }
    }
    Ok((fused, events))
}
