//! Disk layout for datasets: `images/*.png|jpg`, `masks/*.png`, and a
//! `palette.json` mapping mask palette indices to class ids. Masks are
//! single-channel PNGs whose pixel value is the palette index; an entry may
//! map explicitly to `null`, meaning the ignore sentinel.

use super::{ClassId, SegSample};
use crate::error::{Error, Result};
use crate::Scalar;
use ndarray::{Array2, Array3};
use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

/// Writes `samples` under `dir` in the standard layout. Image values are
/// quantized with `round(v * 255)`; class ids above 254 cannot be encoded in
/// an 8-bit mask and are rejected (255 is reserved for ignore).
pub fn save_voc_format<F: Scalar>(dir: &Path, samples: &[SegSample<F>]) -> Result<()> {
    let images = dir.join("images");
    let masks = dir.join("masks");
    fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    fs::create_dir_all(&masks).map_err(|e| Error::io(&masks, e))?;

    let mut palette: BTreeMap<u16, Option<u16>> = BTreeMap::new();
    palette.insert(0, Some(0));
    palette.insert(255, None);
    for sample in samples {
        let (h, w, _) = sample.image.dim();
        let mut rgb = image::RgbImage::new(w as u32, h as u32);
        for y in 0..h {
            for x in 0..w {
                let px = [0, 1, 2].map(|ch| {
                    (sample.image[[y, x, ch]].as_f64() * 255.0)
                        .round()
                        .clamp(0.0, 255.0) as u8
                });
                rgb.put_pixel(x as u32, y as u32, image::Rgb(px));
            }
        }
        let img_path = images.join(format!("{}.png", sample.id));
        rgb.save(&img_path)
            .map_err(|e| Error::Data(format!("writing {}: {e}", img_path.display())))?;

        let mut mask = image::GrayImage::new(w as u32, h as u32);
        for y in 0..h {
            for x in 0..w {
                let c = sample.label[[y, x]];
                let index = if c.is_ignore() {
                    255u8
                } else if c.0 <= 254 {
                    palette.insert(c.0, Some(c.0));
                    c.0 as u8
                } else {
                    return Err(Error::Data(format!(
                        "sample '{}': class id {} does not fit an 8-bit mask",
                        sample.id, c.0
                    )));
                };
                mask.put_pixel(x as u32, y as u32, image::Luma([index]));
            }
        }
        let mask_path = masks.join(format!("{}.png", sample.id));
        mask.save(&mask_path)
            .map_err(|e| Error::Data(format!("writing {}: {e}", mask_path.display())))?;
    }

    let palette_path = dir.join("palette.json");
    let json = serde_json::to_string_pretty(&palette).expect("palette serializes");
    fs::write(&palette_path, json).map_err(|e| Error::io(&palette_path, e))?;
    Ok(())
}

/// Loads a dataset written by [`save_voc_format`] (or hand-assembled in the
/// same layout). Samples are ordered by file stem; every image must have a
/// mask of the same stem, and every mask pixel must appear in the palette.
pub fn load_voc_format<F: Scalar>(root: &Path) -> Result<Vec<SegSample<F>>> {
    let palette_path = root.join("palette.json");
    let raw = fs::read_to_string(&palette_path).map_err(|e| Error::io(&palette_path, e))?;
    let table: BTreeMap<u16, Option<u16>> = serde_json::from_str(&raw)
        .map_err(|e| Error::Data(format!("parsing {}: {e}", palette_path.display())))?;
    let mut palette: BTreeMap<u8, ClassId> = BTreeMap::new();
    for (&index, &class) in &table {
        if index > 255 {
            return Err(Error::Data(format!(
                "palette index {index} exceeds the 8-bit mask range"
            )));
        }
        let id = match class {
            Some(c) if c == u16::MAX => ClassId::IGNORE,
            Some(c) => ClassId(c),
            None => ClassId::IGNORE,
        };
        palette.insert(index as u8, id);
    }

    let images_dir = root.join("images");
    let masks_dir = root.join("masks");
    let mut stems: Vec<String> = Vec::new();
    let entries = fs::read_dir(&images_dir).map_err(|e| Error::io(&images_dir, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(&images_dir, e))?;
        let path = entry.path();
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase());
        match ext.as_deref() {
            Some("png") | Some("jpg") | Some("jpeg") => {
                let stem = path
                    .file_stem()
                    .and_then(|s| s.to_str())
                    .ok_or_else(|| Error::Data(format!("unreadable file name {path:?}")))?;
                stems.push(stem.to_string());
            }
            _ => {}
        }
    }
    stems.sort();
    if stems.is_empty() {
        return Err(Error::Data(format!(
            "no images found under {}",
            images_dir.display()
        )));
    }

    let mut samples = Vec::with_capacity(stems.len());
    for stem in stems {
        let img_path = ["png", "jpg", "jpeg"]
            .iter()
            .map(|ext| images_dir.join(format!("{stem}.{ext}")))
            .find(|p| p.exists())
            .expect("stem came from a directory listing");
        let dyn_img = image::open(&img_path)
            .map_err(|e| Error::Data(format!("reading {}: {e}", img_path.display())))?;
        let rgb = dyn_img.to_rgb8();
        let (w, h) = rgb.dimensions();

        let mask_path = masks_dir.join(format!("{stem}.png"));
        if !mask_path.exists() {
            return Err(Error::Data(format!(
                "image '{stem}' has no mask at {}",
                mask_path.display()
            )));
        }
        let mask_img = image::open(&mask_path)
            .map_err(|e| Error::Data(format!("reading {}: {e}", mask_path.display())))?
            .to_luma8();
        if mask_img.dimensions() != (w, h) {
            return Err(Error::Data(format!(
                "mask '{stem}' is {:?} but the image is {:?}",
                mask_img.dimensions(),
                (w, h)
            )));
        }

        let mut image_arr = Array3::<F>::zeros((h as usize, w as usize, 3));
        for y in 0..h {
            for x in 0..w {
                let p = rgb.get_pixel(x, y);
                for ch in 0..3 {
                    image_arr[[y as usize, x as usize, ch]] = F::of(p[ch] as f64 / 255.0);
                }
            }
        }
        let mut label = Array2::from_elem((h as usize, w as usize), ClassId::BACKGROUND);
        for y in 0..h {
            for x in 0..w {
                let index = mask_img.get_pixel(x, y)[0];
                let class = palette.get(&index).copied().ok_or_else(|| {
                    Error::Data(format!(
                        "mask '{stem}': palette index {index} is not in palette.json"
                    ))
                })?;
                label[[y as usize, x as usize]] = class;
            }
        }
        samples.push(SegSample {
            id: stem,
            image: image_arr,
            label,
        });
    }
    Ok(samples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocol::synthetic::{generate, SyntheticSpec};

    fn tmpdir(tag: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join(format!("segreplay_voc_{tag}_{}", std::process::id()));
        let _ = fs::remove_dir_all(&dir);
        fs::create_dir_all(&dir).unwrap();
        dir
    }

    #[test]
    fn round_trip_is_bit_exact_for_quantized_samples() {
        let dir = tmpdir("rt");
        let mut data = generate::<f32>(&SyntheticSpec::new(3, 2, 24, 24, 4)).unwrap();
        data[0].label[[0, 0]] = ClassId::IGNORE;
        save_voc_format(&dir, &data).unwrap();
        let loaded = load_voc_format::<f32>(&dir).unwrap();
        assert_eq!(loaded.len(), data.len());
        for (a, b) in data.iter().zip(&loaded) {
            assert_eq!(a.id, b.id);
            assert_eq!(a.image, b.image);
            assert_eq!(a.label, b.label);
        }
        let _ = fs::remove_dir_all(&dir);
    }

    #[test]
    fn missing_mask_is_an_error_naming_the_stem() {
        let dir = tmpdir("mm");
        let data = generate::<f32>(&SyntheticSpec::new(2, 1, 24, 24, 4)).unwrap();
        save_voc_format(&dir, &data).unwrap();
        fs::remove_file(dir.join("masks").join(format!("{}.png", data[1].id))).unwrap();
        let err = load_voc_format::<f32>(&dir).unwrap_err();
        assert!(matches!(&err, Error::Data(m) if m.contains(&data[1].id)));
        let _ = fs::remove_dir_all(&dir);
    }

    #[test]
    fn unknown_palette_index_is_an_error_naming_the_index() {
        let dir = tmpdir("pi");
        let data = generate::<f32>(&SyntheticSpec::new(2, 1, 24, 24, 4)).unwrap();
        save_voc_format(&dir, &data).unwrap();
        // Shrink the palette so index 2 becomes unknown.
        fs::write(dir.join("palette.json"), r#"{"0": 0, "1": 1, "255": null}"#).unwrap();
        let err = load_voc_format::<f32>(&dir).unwrap_err();
        assert!(matches!(&err, Error::Data(m) if m.contains("index 2")));
        let _ = fs::remove_dir_all(&dir);
    }

    #[test]
    fn explicit_null_palette_entry_maps_to_ignore() {
        let dir = tmpdir("ig");
        let mut data = generate::<f32>(&SyntheticSpec::new(2, 1, 24, 24, 4)).unwrap();
        data.truncate(1);
        data[0].label[[3, 3]] = ClassId::IGNORE;
        save_voc_format(&dir, &data).unwrap();
        let loaded = load_voc_format::<f32>(&dir).unwrap();
        assert_eq!(loaded[0].label[[3, 3]], ClassId::IGNORE);
        let _ = fs::remove_dir_all(&dir);
    }
}
