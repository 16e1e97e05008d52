//! Class-balanced instance memory.
//!
//! Instances are connected components of a class's pixels, stored as tight
//! crops with binary masks. The buffer splits its capacity evenly across all
//! learned classes: `floor(capacity / k)` per class, remainder to the lowest
//! class ids. Storage preference is deterministic: solitary contiguous
//! regions first (contiguity score), then larger components, with source id
//! and crop origin as final tiebreaks, so selection is a total order and
//! independent of input ordering.

use crate::error::{Error, Result};
use crate::protocol::{ClassId, SegSample, StepDataset};
use crate::Scalar;
use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};
use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fs;
use std::path::Path;

/// One stored object instance: a tight image crop plus the component mask.
#[derive(Clone, Debug, PartialEq)]
pub struct InstanceRecord<F> {
    /// Crop of the source image, shape `(h, w, 3)`.
    pub pixels: Array3<F>,
    /// Component membership inside the crop, shape `(h, w)`.
    pub mask: Array2<bool>,
    pub class: ClassId,
    pub source_id: String,
    /// Top-left corner of the crop in the source image.
    pub origin: (usize, usize),
    /// Component size divided by the class's total pixels in the source
    /// image; 1.0 means the instance was solitary.
    pub contiguity: f64,
}

impl<F: Scalar> InstanceRecord<F> {
    pub fn mask_pixels(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// Total storage-preference order: contiguity desc, size desc, source id
/// asc, crop origin asc.
pub fn storage_rank<F: Scalar>(a: &InstanceRecord<F>, b: &InstanceRecord<F>) -> Ordering {
    b.contiguity
        .partial_cmp(&a.contiguity)
        .unwrap_or(Ordering::Equal)
        .then_with(|| b.mask_pixels().cmp(&a.mask_pixels()))
        .then_with(|| a.source_id.cmp(&b.source_id))
        .then_with(|| a.origin.cmp(&b.origin))
}

/// Connected components (4-connectivity) of `label == class`, as lists of
/// pixel coordinates in discovery order.
fn components(label: &Array2<ClassId>, class: ClassId) -> Vec<Vec<(usize, usize)>> {
    let (h, w) = label.dim();
    let mut visited = Array2::from_elem((h, w), false);
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if label[[y, x]] != class || visited[[y, x]] {
                continue;
            }
            let mut comp = Vec::new();
            let mut queue = VecDeque::new();
            visited[[y, x]] = true;
            queue.push_back((y, x));
            while let Some((cy, cx)) = queue.pop_front() {
                comp.push((cy, cx));
                let mut push = |ny: usize, nx: usize| {
                    if label[[ny, nx]] == class && !visited[[ny, nx]] {
                        visited[[ny, nx]] = true;
                        queue.push_back((ny, nx));
                    }
                };
                if cy > 0 {
                    push(cy - 1, cx);
                }
                if cy + 1 < h {
                    push(cy + 1, cx);
                }
                if cx > 0 {
                    push(cy, cx - 1);
                }
                if cx + 1 < w {
                    push(cy, cx + 1);
                }
            }
            out.push(comp);
        }
    }
    out
}

/// Extracts every component of at least `min_pixels` pixels for each class
/// present in the sample's label map.
pub fn extract_from_sample<F: Scalar>(
    sample: &SegSample<F>,
    min_pixels: usize,
) -> Vec<InstanceRecord<F>> {
    let mut records = Vec::new();
    for class in sample.classes_present() {
        let total = sample.class_pixel_count(class);
        for comp in components(&sample.label, class) {
            if comp.len() < min_pixels {
                continue;
            }
            let top = comp.iter().map(|&(y, _)| y).min().unwrap();
            let bottom = comp.iter().map(|&(y, _)| y).max().unwrap();
            let left = comp.iter().map(|&(_, x)| x).min().unwrap();
            let right = comp.iter().map(|&(_, x)| x).max().unwrap();
            let (ch, cw) = (bottom - top + 1, right - left + 1);
            let pixels = sample
                .image
                .slice(ndarray::s![top..=bottom, left..=right, ..])
                .to_owned();
            let mut mask = Array2::from_elem((ch, cw), false);
            for &(y, x) in &comp {
                mask[[y - top, x - left]] = true;
            }
            records.push(InstanceRecord {
                pixels,
                mask,
                class,
                source_id: sample.id.clone(),
                origin: (top, left),
                contiguity: comp.len() as f64 / total as f64,
            });
        }
    }
    records
}

/// Extracts storage candidates from a whole step dataset, grouped by class.
pub fn extract_instances<F: Scalar>(
    dataset: &StepDataset<F>,
    min_pixels: usize,
) -> BTreeMap<ClassId, Vec<InstanceRecord<F>>> {
    let mut by_class: BTreeMap<ClassId, Vec<InstanceRecord<F>>> = BTreeMap::new();
    for class in &dataset.new_classes {
        by_class.insert(*class, Vec::new());
    }
    for sample in &dataset.samples {
        for record in extract_from_sample(sample, min_pixels) {
            by_class.entry(record.class).or_default().push(record);
        }
    }
    by_class
}

/// Per-class slot counts: `floor(capacity / k)` each, remainder to the
/// lowest class ids.
pub fn class_quotas(capacity: usize, classes: &BTreeSet<ClassId>) -> BTreeMap<ClassId, usize> {
    let k = classes.len();
    let mut quotas = BTreeMap::new();
    if k == 0 {
        return quotas;
    }
    let base = capacity / k;
    let remainder = capacity % k;
    for (i, &c) in classes.iter().enumerate() {
        quotas.insert(c, base + usize::from(i < remainder));
    }
    quotas
}

/// Deterministically picks the `quota` best candidates under [`storage_rank`].
pub fn sample_for_storage<F: Scalar>(
    mut candidates: Vec<InstanceRecord<F>>,
    quota: usize,
) -> Vec<InstanceRecord<F>> {
    candidates.sort_by(storage_rank);
    candidates.truncate(quota);
    candidates
}

/// Fixed-capacity instance store, rebalanced after every learning step.
#[derive(Clone, Debug)]
pub struct MemoryBuffer<F> {
    capacity: usize,
    learned: BTreeSet<ClassId>,
    per_class: BTreeMap<ClassId, Vec<InstanceRecord<F>>>,
}

impl<F: Scalar> MemoryBuffer<F> {
    pub fn new(capacity: usize) -> Self {
        MemoryBuffer {
            capacity,
            learned: BTreeSet::new(),
            per_class: BTreeMap::new(),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn learned(&self) -> &BTreeSet<ClassId> {
        &self.learned
    }

    pub fn total_stored(&self) -> usize {
        self.per_class.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.total_stored() == 0
    }

    pub fn records(&self, class: ClassId) -> &[InstanceRecord<F>] {
        self.per_class.get(&class).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn counts(&self) -> BTreeMap<ClassId, usize> {
        self.learned
            .iter()
            .map(|&c| (c, self.records(c).len()))
            .collect()
    }

    pub fn quotas(&self) -> BTreeMap<ClassId, usize> {
        class_quotas(self.capacity, &self.learned)
    }

    /// All stored records of the given classes, flattened in class order.
    pub fn records_of(&self, classes: &BTreeSet<ClassId>) -> Vec<&InstanceRecord<F>> {
        classes
            .iter()
            .flat_map(|c| self.records(*c).iter())
            .collect()
    }

    /// Registers the classes of a finished step and their candidate
    /// instances, then re-splits capacity across all learned classes. Old
    /// classes evict their worst-ranked records down to the new quota; they
    /// never gain records back.
    pub fn rebalance(
        &mut self,
        new_candidates: BTreeMap<ClassId, Vec<InstanceRecord<F>>>,
    ) -> Result<()> {
        for (&class, candidates) in &new_candidates {
            if self.learned.contains(&class) {
                return Err(Error::Config(format!(
                    "class {class} is already in the memory buffer"
                )));
            }
            if let Some(bad) = candidates.iter().find(|r| r.class != class) {
                return Err(Error::Shape(format!(
                    "candidate for class {class} is labeled {}",
                    bad.class
                )));
            }
        }
        for &class in new_candidates.keys() {
            self.learned.insert(class);
        }
        let quotas = self.quotas();
        for (class, candidates) in new_candidates {
            let quota = quotas[&class];
            self.per_class
                .insert(class, sample_for_storage(candidates, quota));
        }
        for (&class, records) in self.per_class.iter_mut() {
            let quota = quotas[&class];
            if records.len() > quota {
                records.sort_by(storage_rank);
                records.truncate(quota);
            }
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct BufferManifest {
    capacity: usize,
    learned: Vec<u16>,
    records: Vec<RecordMeta>,
}

#[derive(Serialize, Deserialize)]
struct RecordMeta {
    stem: String,
    class: u16,
    source_id: String,
    origin: [usize; 2],
    contiguity: f64,
}

/// Writes the buffer as `manifest.json` plus `NNN_rgb.png` / `NNN_mask.png`
/// pairs (8-bit; masks 0/255).
pub fn save_buffer<F: Scalar>(buffer: &MemoryBuffer<F>, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = BufferManifest {
        capacity: buffer.capacity,
        learned: buffer.learned.iter().map(|c| c.0).collect(),
        records: Vec::new(),
    };
    let mut index = 0usize;
    for &class in &buffer.learned {
        for record in buffer.records(class) {
            let stem = format!("{index:03}");
            let (h, w) = record.mask.dim();
            let mut rgb = image::RgbImage::new(w as u32, h as u32);
            let mut mask = image::GrayImage::new(w as u32, h as u32);
            for y in 0..h {
                for x in 0..w {
                    let px = [0, 1, 2].map(|ch| {
                        (record.pixels[[y, x, ch]].as_f64() * 255.0)
                            .round()
                            .clamp(0.0, 255.0) as u8
                    });
                    rgb.put_pixel(x as u32, y as u32, image::Rgb(px));
                    let m = if record.mask[[y, x]] { 255 } else { 0 };
                    mask.put_pixel(x as u32, y as u32, image::Luma([m]));
                }
            }
            let rgb_path = dir.join(format!("{stem}_rgb.png"));
            rgb.save(&rgb_path)
                .map_err(|e| Error::Data(format!("writing {}: {e}", rgb_path.display())))?;
            let mask_path = dir.join(format!("{stem}_mask.png"));
            mask.save(&mask_path)
                .map_err(|e| Error::Data(format!("writing {}: {e}", mask_path.display())))?;
            manifest.records.push(RecordMeta {
                stem,
                class: class.0,
                source_id: record.source_id.clone(),
                origin: [record.origin.0, record.origin.1],
                contiguity: record.contiguity,
            });
            index += 1;
        }
    }
    let path = dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    Ok(())
}

pub fn load_buffer<F: Scalar>(dir: &Path) -> Result<MemoryBuffer<F>> {
    let path = dir.join("manifest.json");
    let raw = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: BufferManifest = serde_json::from_str(&raw)
        .map_err(|e| Error::Data(format!("parsing {}: {e}", path.display())))?;
    let mut buffer = MemoryBuffer::new(manifest.capacity);
    for c in &manifest.learned {
        buffer.learned.insert(ClassId(*c));
        buffer.per_class.entry(ClassId(*c)).or_default();
    }
    for meta in &manifest.records {
        let rgb_path = dir.join(format!("{}_rgb.png", meta.stem));
        let rgb = image::open(&rgb_path)
            .map_err(|e| Error::Data(format!("reading {}: {e}", rgb_path.display())))?
            .to_rgb8();
        let mask_path = dir.join(format!("{}_mask.png", meta.stem));
        let mask_img = image::open(&mask_path)
            .map_err(|e| Error::Data(format!("reading {}: {e}", mask_path.display())))?
            .to_luma8();
        let (w, h) = rgb.dimensions();
        if mask_img.dimensions() != (w, h) {
            return Err(Error::Data(format!(
                "buffer record {}: mask and pixels disagree on size",
                meta.stem
            )));
        }
        let mut pixels = Array3::<F>::zeros((h as usize, w as usize, 3));
        let mut mask = Array2::from_elem((h as usize, w as usize), false);
        for y in 0..h {
            for x in 0..w {
                let p = rgb.get_pixel(x, y);
                for ch in 0..3 {
                    pixels[[y as usize, x as usize, ch]] = F::of(p[ch] as f64 / 255.0);
                }
                mask[[y as usize, x as usize]] = mask_img.get_pixel(x, y)[0] >= 128;
            }
        }
        let class = ClassId(meta.class);
        if !buffer.learned.contains(&class) {
            return Err(Error::Data(format!(
                "buffer record {} names unregistered class {class}",
                meta.stem
            )));
        }
        buffer
            .per_class
            .entry(class)
            .or_default()
            .push(InstanceRecord {
                pixels,
                mask,
                class,
                source_id: meta.source_id.clone(),
                origin: (meta.origin[0], meta.origin[1]),
                contiguity: meta.contiguity,
            });
    }
    Ok(buffer)
}

/// Whole-image replay store with the same per-class quota split. Candidates
/// for a class are the step's images containing it, preferred by that
/// class's pixel count (desc) with sample id as tiebreak. A stored image
/// keeps the partial labels of the step it was taken from.
#[derive(Clone, Debug)]
pub struct ImageBuffer<F> {
    capacity: usize,
    learned: BTreeSet<ClassId>,
    per_class: BTreeMap<ClassId, Vec<SegSample<F>>>,
}

impl<F: Scalar> ImageBuffer<F> {
    pub fn new(capacity: usize) -> Self {
        ImageBuffer {
            capacity,
            learned: BTreeSet::new(),
            per_class: BTreeMap::new(),
        }
    }

    pub fn total_stored(&self) -> usize {
        self.per_class.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.total_stored() == 0
    }

    /// All stored images, flattened in class order.
    pub fn all(&self) -> Vec<&SegSample<F>> {
        self.per_class.values().flat_map(|v| v.iter()).collect()
    }

    pub fn rebalance(&mut self, dataset: &StepDataset<F>) -> Result<()> {
        for class in &dataset.new_classes {
            if self.learned.contains(class) {
                return Err(Error::Config(format!(
                    "class {class} is already in the image buffer"
                )));
            }
        }
        self.learned.extend(dataset.new_classes.iter().copied());
        let quotas = class_quotas(self.capacity, &self.learned);
        for &class in &dataset.new_classes {
            let mut candidates: Vec<&SegSample<F>> = dataset
                .samples
                .iter()
                .filter(|s| s.class_pixel_count(class) > 0)
                .collect();
            candidates.sort_by(|a, b| {
                b.class_pixel_count(class)
                    .cmp(&a.class_pixel_count(class))
                    .then_with(|| a.id.cmp(&b.id))
            });
            candidates.truncate(quotas[&class]);
            self.per_class
                .insert(class, candidates.into_iter().cloned().collect());
        }
        for (&class, samples) in self.per_class.iter_mut() {
            let quota = quotas[&class];
            if samples.len() > quota {
                samples.sort_by(|a, b| {
                    b.class_pixel_count(class)
                        .cmp(&a.class_pixel_count(class))
                        .then_with(|| a.id.cmp(&b.id))
                });
                samples.truncate(quota);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    fn sample_from_rows(id: &str, rows: &[&[u16]]) -> SegSample<f64> {
        let h = rows.len();
        let w = rows[0].len();
        let mut label = Array2::from_elem((h, w), ClassId::BACKGROUND);
        for (y, row) in rows.iter().enumerate() {
            for (x, &c) in row.iter().enumerate() {
                label[[y, x]] = ClassId(c);
            }
        }
        // Pixel value encodes position so crops are checkable.
        let image =
            Array3::from_shape_fn((h, w, 3), |(y, x, c)| ((y * w + x) * 3 + c) as f64 / 255.0);
        SegSample::new(id.to_string(), image, label).unwrap()
    }

    #[test]
    fn four_connectivity_splits_diagonal_touch() {
        // Two pixels meeting only at a corner are two components.
        let s = sample_from_rows("d", &[&[1, 0], &[0, 1]]);
        let recs = extract_from_sample(&s, 1);
        assert_eq!(recs.len(), 2);
        assert!(recs.iter().all(|r| r.mask_pixels() == 1));
        assert!((recs[0].contiguity - 0.5).abs() < 1e-12);
    }

    #[test]
    fn components_crop_tightly_and_mask_only_their_own_pixels() {
        let s = sample_from_rows("c", &[&[0, 1, 1, 0, 0], &[0, 1, 1, 0, 1], &[0, 0, 0, 0, 1]]);
        let mut recs = extract_from_sample(&s, 1);
        recs.sort_by(storage_rank);
        assert_eq!(recs.len(), 2);
        let big = &recs[0];
        assert_eq!(big.origin, (0, 1));
        assert_eq!(big.mask.dim(), (2, 2));
        assert_eq!(big.mask_pixels(), 4);
        assert!((big.contiguity - 4.0 / 6.0).abs() < 1e-12);
        // Crop pixels come from the right place in the source.
        assert_eq!(big.pixels[[0, 0, 0]], s.image[[0, 1, 0]]);
        let small = &recs[1];
        assert_eq!(small.origin, (1, 4));
        assert_eq!(small.mask.dim(), (2, 1));
    }

    #[test]
    fn min_pixels_filters_small_components() {
        let s = sample_from_rows("m", &[&[1, 0, 1, 1], &[0, 0, 1, 1]]);
        let recs = extract_from_sample(&s, 2);
        assert_eq!(recs.len(), 1);
        assert_eq!(recs[0].mask_pixels(), 4);
    }

    #[test]
    fn quota_formula_matches_floor_plus_remainder() {
        let classes: BTreeSet<ClassId> = [1, 2, 3].map(ClassId).into_iter().collect();
        let q = class_quotas(10, &classes);
        assert_eq!(q[&ClassId(1)], 4);
        assert_eq!(q[&ClassId(2)], 3);
        assert_eq!(q[&ClassId(3)], 3);
        let q0 = class_quotas(0, &classes);
        assert!(q0.values().all(|&v| v == 0));
    }

    #[test]
    fn rebalance_shrinks_old_classes_and_rejects_relearning() {
        let s1 = sample_from_rows("a", &[&[1, 1, 1, 0], &[1, 1, 0, 0]]);
        let mut buffer = MemoryBuffer::<f64>::new(4);
        let mut by_class = BTreeMap::new();
        by_class.insert(ClassId(1), extract_from_sample(&s1, 1));
        buffer.rebalance(by_class).unwrap();
        assert_eq!(buffer.counts()[&ClassId(1)], 1);

        // Class 2 arrives; capacity 4 over 2 classes leaves 2 slots each.
        let s2a = sample_from_rows("b", &[&[2, 2], &[2, 2]]);
        let s2b = sample_from_rows("c", &[&[2, 2, 0], &[0, 0, 2]]);
        let mut by_class = BTreeMap::new();
        let mut cands = extract_from_sample(&s2a, 1);
        cands.extend(extract_from_sample(&s2b, 1));
        by_class.insert(ClassId(2), cands);
        buffer.rebalance(by_class).unwrap();
        assert_eq!(buffer.counts()[&ClassId(1)], 1);
        assert_eq!(buffer.counts()[&ClassId(2)], 2);
        assert!(buffer.total_stored() <= buffer.capacity());
        // Best-ranked candidate for class 2 is the solitary full square.
        assert_eq!(buffer.records(ClassId(2))[0].source_id, "b");

        let mut again = BTreeMap::new();
        again.insert(ClassId(2), Vec::<InstanceRecord<f64>>::new());
        assert!(matches!(buffer.rebalance(again), Err(Error::Config(_))));
    }

    #[test]
    fn under_quota_class_keeps_slots_unused() {
        let s = sample_from_rows("a", &[&[1, 1, 0, 2], &[0, 0, 0, 2]]);
        let mut buffer = MemoryBuffer::<f64>::new(10);
        let mut by_class = BTreeMap::new();
        by_class.insert(
            ClassId(1),
            extract_from_sample(&s, 1)
                .into_iter()
                .filter(|r| r.class == ClassId(1))
                .collect(),
        );
        by_class.insert(
            ClassId(2),
            extract_from_sample(&s, 1)
                .into_iter()
                .filter(|r| r.class == ClassId(2))
                .collect(),
        );
        buffer.rebalance(by_class).unwrap();
        // Quotas are 5/5 but only one instance exists per class.
        assert_eq!(buffer.total_stored(), 2);
    }

    #[test]
    fn storage_selection_is_input_order_invariant() {
        let s1 = sample_from_rows("a", &[&[1, 1, 0, 1], &[1, 1, 0, 0]]);
        let s2 = sample_from_rows("b", &[&[1, 1, 1], &[1, 1, 1]]);
        let mut fwd = extract_from_sample(&s1, 1);
        fwd.extend(extract_from_sample(&s2, 1));
        let mut rev = fwd.clone();
        rev.reverse();
        let picked_fwd = sample_for_storage(fwd, 2);
        let picked_rev = sample_for_storage(rev, 2);
        assert_eq!(picked_fwd.len(), 2);
        for (a, b) in picked_fwd.iter().zip(&picked_rev) {
            assert_eq!(a.source_id, b.source_id);
            assert_eq!(a.origin, b.origin);
        }
        // Solitary instance ("b", contiguity 1.0) outranks the bigger count.
        assert_eq!(picked_fwd[0].source_id, "b");
    }

    #[test]
    fn buffer_round_trip_is_bit_exact() {
        // Quantized pixel values survive the PNG round trip exactly.
        let mut img = Array3::<f64>::zeros((3, 4, 3));
        for (i, v) in img.iter_mut().enumerate() {
            *v = ((i * 7) % 256) as f64 / 255.0;
        }
        let mut label = Array2::from_elem((3, 4), ClassId::BACKGROUND);
        label[[0, 0]] = ClassId(1);
        label[[0, 1]] = ClassId(1);
        label[[2, 3]] = ClassId(2);
        let s = SegSample::new("src".into(), img, label).unwrap();
        let mut buffer = MemoryBuffer::<f64>::new(6);
        let mut by_class = BTreeMap::new();
        for r in extract_from_sample(&s, 1) {
            by_class.entry(r.class).or_insert_with(Vec::new).push(r);
        }
        buffer.rebalance(by_class).unwrap();

        let dir = std::env::temp_dir().join(format!("segreplay_buf_{}", std::process::id()));
        let _ = fs::remove_dir_all(&dir);
        save_buffer(&buffer, &dir).unwrap();
        let loaded = load_buffer::<f64>(&dir).unwrap();
        assert_eq!(loaded.capacity(), buffer.capacity());
        assert_eq!(loaded.learned(), buffer.learned());
        for &c in buffer.learned() {
            let (a, b) = (buffer.records(c), loaded.records(c));
            assert_eq!(a.len(), b.len());
            for (x, y) in a.iter().zip(b) {
                assert_eq!(x.pixels, y.pixels);
                assert_eq!(x.mask, y.mask);
                assert_eq!(x.source_id, y.source_id);
                assert_eq!(x.origin, y.origin);
                assert_eq!(x.contiguity, y.contiguity);
            }
        }
        let _ = fs::remove_dir_all(&dir);
    }

    #[test]
    fn image_buffer_prefers_larger_class_regions() {
        let mk = |id: &str, pixels: usize| {
            let img = Array3::from_elem((4, 4, 3), 0.5f64);
            let mut label = Array2::from_elem((4, 4), ClassId::BACKGROUND);
            for i in 0..pixels {
                label[[i / 4, i % 4]] = ClassId(1);
            }
            SegSample::new(id.into(), img, label).unwrap()
        };
        let ds = StepDataset {
            step: 1,
            new_classes: [ClassId(1)].into_iter().collect(),
            old_classes: BTreeSet::new(),
            samples: vec![mk("a", 2), mk("b", 6), mk("c", 4)],
        };
        let mut buf = ImageBuffer::<f64>::new(2);
        buf.rebalance(&ds).unwrap();
        let ids: Vec<&str> = buf.all().iter().map(|s| s.id.as_str()).collect();
        assert_eq!(ids, ["b", "c"]);
        assert!(buf
            .rebalance(&ds)
            .is_err_and(|e| matches!(e, Error::Config(_))));
    }

    #[test]
    fn image_buffer_shrinks_old_classes_on_rebalance() {
        let mk = |id: &str, class: u16| {
            let img = Array3::from_elem((4, 4, 3), 0.5f64);
            let mut label = Array2::from_elem((4, 4), ClassId::BACKGROUND);
            label[[0, 0]] = ClassId(class);
            SegSample::new(id.into(), img, label).unwrap()
        };
        let step = |t: usize, class: u16, ids: &[&str]| StepDataset {
            step: t,
            new_classes: [ClassId(class)].into_iter().collect(),
            old_classes: BTreeSet::new(),
            samples: ids.iter().map(|id| mk(id, class)).collect(),
        };
        let mut buf = ImageBuffer::<f64>::new(3);
        buf.rebalance(&step(1, 1, &["a", "b", "c"])).unwrap();
        assert_eq!(buf.total_stored(), 3);
        buf.rebalance(&step(2, 2, &["d", "e"])).unwrap();
        // Quotas 3/2 -> class 1 keeps 2, class 2 gets 1.
        assert_eq!(buf.total_stored(), 3);
        let ids: Vec<&str> = buf.all().iter().map(|s| s.id.as_str()).collect();
        assert_eq!(ids, ["a", "b", "d"]);
    }
}
