//! Property tests for the geometric and bookkeeping invariants.

use ndarray::{Array2, Array3};
use proptest::prelude::*;
use segreplay::memory::{class_quotas, InstanceRecord};
use segreplay::metrics::ConfusionAccum;
use segreplay::model::{predict, softmax, ClassLayout};
use segreplay::placement::{
    build_region_grid, fit_instance, mixup_fuse, resize_bilinear, FusedSample, PlacementPlan,
};
use segreplay::protocol::{ClassId, SegSample};
use std::collections::BTreeSet;

proptest! {
    /// Any grid that builds at all tiles the image: every pixel in exactly
    /// one region, and exactly `n` regions. When no factorization fits, the
    /// constructor must refuse instead.
    #[test]
    fn grid_tiles_exactly_or_refuses(
        h in 4usize..80,
        w in 4usize..80,
        n in 1usize..=16,
    ) {
        match build_region_grid(h, w, n) {
            Ok(grid) => {
                prop_assert_eq!(grid.len(), n);
                prop_assert_eq!(grid.rows * grid.cols, n);
                let mut cover = Array2::<u32>::zeros((h, w));
                for r in grid.regions() {
                    prop_assert!(r.height > 0 && r.width > 0);
                    for y in r.top..r.top + r.height {
                        for x in r.left..r.left + r.width {
                            cover[[y, x]] += 1;
                        }
                    }
                }
                prop_assert!(cover.iter().all(|&c| c == 1));
            }
            Err(_) => {
                let fits = (1..=n).any(|r| n % r == 0 && r <= h && n / r <= w);
                prop_assert!(!fits, "a {}x{} factorization fits {n} but build refused", h, w);
            }
        }
    }

    /// Quotas always hand out the whole capacity, differ by at most one, and
    /// favor lower class ids with the remainder.
    #[test]
    fn quotas_partition_capacity_evenly(
        capacity in 0usize..200,
        ids in proptest::collection::btree_set(1u16..40, 1..12),
    ) {
        let classes: BTreeSet<ClassId> = ids.into_iter().map(ClassId).collect();
        let quotas = class_quotas(capacity, &classes);
        prop_assert_eq!(quotas.len(), classes.len());
        let total: usize = quotas.values().sum();
        prop_assert_eq!(total, capacity);
        let max = quotas.values().copied().max().unwrap();
        let min = quotas.values().copied().min().unwrap();
        prop_assert!(max - min <= 1);
        // Walking ids upward, quotas never increase.
        let vals: Vec<usize> = quotas.values().copied().collect();
        prop_assert!(vals.windows(2).all(|p| p[0] >= p[1]));
    }

    /// A fitted placement never grows the crop, never leaves the image, and
    /// never accepts a scale below the floor.
    #[test]
    fn fitted_placements_stay_inside_the_image(
        ch in 1usize..24,
        cw in 1usize..24,
        img_h in 8usize..64,
        img_w in 8usize..64,
        ay_frac in 0.0f64..1.0,
        ax_frac in 0.0f64..1.0,
        min_scale in 0.05f64..0.9,
    ) {
        let anchor = (
            (ay_frac * (img_h - 1) as f64) as usize,
            (ax_frac * (img_w - 1) as f64) as usize,
        );
        let record = InstanceRecord {
            pixels: Array3::<f32>::zeros((ch, cw, 3)),
            mask: Array2::from_elem((ch, cw), true),
            class: ClassId(1),
            source_id: "p".into(),
            origin: (0, 0),
            contiguity: 1.0,
        };
        match fit_instance(&record, anchor, 0, img_h, img_w, min_scale) {
            Ok(plan) => {
                prop_assert!(plan.scale <= 1.0 + 1e-12);
                prop_assert!(plan.scale >= min_scale - 1e-12);
                prop_assert!(plan.target_h <= ch && plan.target_w <= cw);
                prop_assert!(plan.target_h >= 1 && plan.target_w >= 1);
                prop_assert!(anchor.0 + plan.target_h <= img_h);
                prop_assert!(anchor.1 + plan.target_w <= img_w);
            }
            Err(_) => {
                let fit = ((img_h - anchor.0) as f64 / ch as f64)
                    .min((img_w - anchor.1) as f64 / cw as f64)
                    .min(1.0);
                prop_assert!(fit < min_scale);
            }
        }
    }

    /// Bilinear resampling is a convex combination: outputs stay within the
    /// input's per-channel min/max.
    #[test]
    fn bilinear_resize_respects_input_bounds(
        h in 1usize..12,
        w in 1usize..12,
        nh in 1usize..20,
        nw in 1usize..20,
        seed in 0u64..1000,
    ) {
        let mut state = seed;
        let mut next = move || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 33) as f32) / (u32::MAX >> 1) as f32
        };
        let pixels = Array3::from_shape_fn((h, w, 3), |_| next());
        let out = resize_bilinear(&pixels, nh, nw);
        prop_assert_eq!(out.dim(), (nh, nw, 3));
        for c in 0..3 {
            let ch_in = pixels.index_axis(ndarray::Axis(2), c);
            let lo = ch_in.iter().copied().fold(f32::INFINITY, f32::min);
            let hi = ch_in.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            for &v in out.index_axis(ndarray::Axis(2), c).iter() {
                prop_assert!(v >= lo - 1e-5 && v <= hi + 1e-5);
            }
        }
    }

    /// One fuse keeps soft-label rows normalized, keeps pixels inside the
    /// convex hull of base and instance, and never touches pixels outside
    /// the paste footprint.
    #[test]
    fn fusing_preserves_normalization_and_locality(
        lambda in 0.0f64..=1.0,
        ch in 2usize..6,
        cw in 2usize..6,
        class in 1u16..=3,
        seed in 0u64..500,
    ) {
        let layout = ClassLayout::new((1..=3).map(ClassId)).unwrap();
        let mut state = seed.wrapping_add(1);
        let mut next = move || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 33) as f32) / (u32::MAX >> 1) as f32
        };
        let image = Array3::from_shape_fn((10, 10, 3), |_| next());
        let label = Array2::from_shape_fn((10, 10), |(y, x)| {
            if y == 0 && x < 3 { ClassId::IGNORE } else { ClassId((y + x) as u16 % 4) }
        });
        let sample = SegSample::new("prop".into(), image, label).unwrap();
        let base = FusedSample::from_sample(&sample, &layout).unwrap();
        let record = InstanceRecord {
            pixels: Array3::from_shape_fn((ch, cw, 3), |_| next()),
            mask: Array2::from_shape_fn((ch, cw), |(y, x)| (y * cw + x) % 3 != 0),
            class: ClassId(class),
            source_id: "p".into(),
            origin: (0, 0),
            contiguity: 1.0,
        };
        let plan = PlacementPlan {
            region_index: 0,
            anchor: (1, 2),
            scale: 1.0,
            target_h: ch,
            target_w: cw,
        };
        let mut fused = base.clone();
        mixup_fuse(&mut fused, &record, &layout, &plan, lambda).unwrap();
        for y in 0..10 {
            for x in 0..10 {
                let inside = y >= 1 && y < 1 + ch && x >= 2 && x < 2 + cw;
                let touched = fused.fused_mask[[y, x]];
                if !inside {
                    prop_assert!(!touched);
                }
                if !touched {
                    for c in 0..3 {
                        prop_assert_eq!(fused.image[[y, x, c]], base.image[[y, x, c]]);
                    }
                }
                let row: f32 = (0..4).map(|c| fused.soft_label[[y, x, c]]).sum();
                if sample.label[[y, x]].is_ignore() {
                    prop_assert!(row.abs() < 1e-6);
                    prop_assert!(!touched);
                } else {
                    prop_assert!((row - 1.0).abs() < 1e-5);
                }
                if touched {
                    for c in 0..3 {
                        let (iy, ix) = (y - 1, x - 2);
                        let lo = base.image[[y, x, c]].min(record.pixels[[iy, ix, c]]);
                        let hi = base.image[[y, x, c]].max(record.pixels[[iy, ix, c]]);
                        prop_assert!(fused.image[[y, x, c]] >= lo - 1e-5);
                        prop_assert!(fused.image[[y, x, c]] <= hi + 1e-5);
                    }
                }
            }
        }
    }

    /// IoU accumulation is invariant to the order maps arrive in.
    #[test]
    fn iou_accumulation_is_permutation_invariant(
        seed in 0u64..300,
        pairs in 2usize..6,
    ) {
        let mut state = seed.wrapping_add(7);
        let mut next = move || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (state >> 33) as usize
        };
        let maps: Vec<(Array2<ClassId>, Array2<ClassId>)> = (0..pairs)
            .map(|_| {
                let p = Array2::from_shape_fn((6, 6), |_| ClassId((next() % 4) as u16));
                let g = Array2::from_shape_fn((6, 6), |_| match next() % 5 {
                    4 => ClassId::IGNORE,
                    v => ClassId(v as u16),
                });
                (p, g)
            })
            .collect();
        let mut fwd = ConfusionAccum::new();
        for (p, g) in &maps {
            fwd.add_maps(p, g).unwrap();
        }
        let mut rev = ConfusionAccum::new();
        for (p, g) in maps.iter().rev() {
            rev.add_maps(p, g).unwrap();
        }
        let a = fwd.iou_per_class();
        let b = rev.iou_per_class();
        prop_assert_eq!(a, b);
    }

    /// Softmax rows are probability distributions and the decoded prediction
    /// is always the class whose raw score is maximal.
    #[test]
    fn softmax_normalizes_and_predict_matches_argmax(
        seed in 0u64..300,
        k in 2usize..6,
    ) {
        let layout = ClassLayout::new((1..k as u16).map(ClassId)).unwrap();
        let mut state = seed.wrapping_add(13);
        let mut next = move || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 33) as f64) / (u32::MAX >> 1) as f64 * 8.0 - 4.0
        };
        let scores = Array3::from_shape_fn((5, 5, k), |_| next());
        let probs = softmax(&scores);
        for y in 0..5 {
            for x in 0..5 {
                let row: f64 = (0..k).map(|c| probs[[y, x, c]]).sum();
                prop_assert!((row - 1.0).abs() < 1e-9);
            }
        }
        let pred = predict(&scores, &layout);
        for y in 0..5 {
            for x in 0..5 {
                let best = (0..k)
                    .max_by(|&a, &b| scores[[y, x, a]].partial_cmp(&scores[[y, x, b]]).unwrap())
                    .unwrap();
                prop_assert!(scores[[y, x, layout.channel_of(pred[[y, x]]).unwrap()]]
                    >= scores[[y, x, best]]);
            }
        }
    }
}
