//! Segmentation model: class/channel bookkeeping, a small convolutional
//! encoder-decoder with hand-rolled backprop, and checkpoint persistence.

pub mod layers;
pub mod net;

pub use net::{ConvSegNet, Gradients, Tape};

use crate::error::{Error, Result};
use crate::protocol::ClassId;
use crate::Scalar;
use ndarray::{Array2, Array3, Axis};
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::Read;
use std::path::Path;

/// Maps class ids to score channels. Channel 0 is always background; learned
/// classes append in learning order, so an older layout is a prefix of every
/// later one.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassLayout {
    classes: Vec<ClassId>,
}

impl ClassLayout {
    pub fn new(learned: impl IntoIterator<Item = ClassId>) -> Result<Self> {
        let mut layout = ClassLayout {
            classes: vec![ClassId::BACKGROUND],
        };
        let new: Vec<ClassId> = learned.into_iter().collect();
        layout.extend(&new)?;
        Ok(layout)
    }

    pub fn background_only() -> Self {
        ClassLayout {
            classes: vec![ClassId::BACKGROUND],
        }
    }

    pub fn extend(&mut self, new: &[ClassId]) -> Result<()> {
        for &c in new {
            if c.is_ignore() {
                return Err(Error::Config(
                    "the ignore sentinel cannot occupy a channel".into(),
                ));
            }
            if self.classes.contains(&c) {
                return Err(Error::Config(format!("class {c} already has a channel")));
            }
            self.classes.push(c);
        }
        Ok(())
    }

    pub fn num_channels(&self) -> usize {
        self.classes.len()
    }

    pub fn channel_of(&self, class: ClassId) -> Option<usize> {
        self.classes.iter().position(|&c| c == class)
    }

    pub fn class_at(&self, channel: usize) -> ClassId {
        self.classes[channel]
    }

    pub fn classes(&self) -> &[ClassId] {
        &self.classes
    }

    pub fn is_prefix_of(&self, other: &ClassLayout) -> bool {
        other.classes.len() >= self.classes.len()
            && other.classes[..self.classes.len()] == self.classes[..]
    }
}

/// Channel-wise softmax over `(H, W, K)` scores, numerically stabilized.
pub fn softmax<F: Scalar>(scores: &Array3<F>) -> Array3<F> {
    let mut out = scores.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().copied().fold(F::neg_infinity(), F::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum: F = row.iter().copied().sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

/// Elementwise sigmoid.
pub fn sigmoid<F: Scalar>(scores: &Array3<F>) -> Array3<F> {
    scores.mapv(|v| F::one() / (F::one() + (-v).exp()))
}

/// Per-pixel argmax decoded through the layout.
pub fn predict<F: Scalar>(scores: &Array3<F>, layout: &ClassLayout) -> Array2<ClassId> {
    let (h, w, k) = scores.dim();
    assert_eq!(k, layout.num_channels(), "scores do not match the layout");
    Array2::from_shape_fn((h, w), |(y, x)| {
        let mut best = 0usize;
        let mut best_v = scores[[y, x, 0]];
        for c in 1..k {
            if scores[[y, x, c]] > best_v {
                best_v = scores[[y, x, c]];
                best = c;
            }
        }
        layout.class_at(best)
    })
}

/// Immutable copy of a trained model, used as the previous-step teacher.
/// Mutating the live model never affects an existing snapshot.
#[derive(Clone, Debug)]
pub struct ModelSnapshot<F> {
    net: ConvSegNet<F>,
}

impl<F: Scalar> ModelSnapshot<F> {
    pub fn of(net: &ConvSegNet<F>) -> Self {
        ModelSnapshot { net: net.clone() }
    }

    pub fn forward(&self, image: &Array3<F>) -> Array3<F> {
        self.net.forward(image)
    }

    pub fn layout(&self) -> &ClassLayout {
        self.net.layout()
    }
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"SEGRPLY1";

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    step: usize,
    seed: u64,
    width: usize,
    classes: Vec<u16>,
    scalar: String,
    param_count: usize,
}

fn scalar_name<F: Scalar>() -> &'static str {
    if std::mem::size_of::<F>() == 4 {
        "f32"
    } else {
        "f64"
    }
}

/// Writes the model as a stable binary blob: magic, JSON header, then all
/// parameters as little-endian f64 in canonical layer order. Byte-identical
/// for identical models.
pub fn save_checkpoint<F: Scalar>(
    path: &Path,
    net: &ConvSegNet<F>,
    step: usize,
    seed: u64,
) -> Result<()> {
    let params = net.get_params();
    let header = CheckpointHeader {
        step,
        seed,
        width: net.width(),
        classes: net.layout().classes().iter().map(|c| c.0).collect(),
        scalar: scalar_name::<F>().to_string(),
        param_count: params.len(),
    };
    let header_json = serde_json::to_vec(&header).expect("header serializes");
    let mut bytes = Vec::with_capacity(16 + header_json.len() + params.len() * 8);
    bytes.extend_from_slice(CHECKPOINT_MAGIC);
    bytes.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
    bytes.extend_from_slice(&header_json);
    for p in &params {
        bytes.extend_from_slice(&p.as_f64().to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Metadata stored alongside the weights.
#[derive(Clone, Debug)]
pub struct CheckpointMeta {
    pub step: usize,
    pub seed: u64,
    pub classes: Vec<ClassId>,
}

pub fn load_checkpoint<F: Scalar>(path: &Path) -> Result<(ConvSegNet<F>, CheckpointMeta)> {
    let mut file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes)
        .map_err(|e| Error::io(path, e))?;
    if bytes.len() < 12 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(Error::Data(format!(
            "{} is not a model checkpoint (bad magic)",
            path.display()
        )));
    }
    let header_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    if bytes.len() < 12 + header_len {
        return Err(Error::Data(format!("{} is truncated", path.display())));
    }
    let header: CheckpointHeader = serde_json::from_slice(&bytes[12..12 + header_len])
        .map_err(|e| Error::Data(format!("bad checkpoint header in {}: {e}", path.display())))?;
    if header.scalar != scalar_name::<F>() {
        return Err(Error::Data(format!(
            "{} stores {} weights but {} was requested",
            path.display(),
            header.scalar,
            scalar_name::<F>()
        )));
    }
    let body = &bytes[12 + header_len..];
    if body.len() != header.param_count * 8 {
        return Err(Error::Data(format!(
            "{} has {} weight bytes, expected {}",
            path.display(),
            body.len(),
            header.param_count * 8
        )));
    }
    let params: Vec<F> = body
        .chunks_exact(8)
        .map(|c| F::of(f64::from_le_bytes(c.try_into().unwrap())))
        .collect();
    let classes: Vec<ClassId> = header.classes.iter().map(|&c| ClassId(c)).collect();
    if classes.first() != Some(&ClassId::BACKGROUND) {
        return Err(Error::Data(format!(
            "{} has a layout that does not start with background",
            path.display()
        )));
    }
    let layout = ClassLayout::new(classes[1..].iter().copied())?;
    let mut net = ConvSegNet::new(layout, header.width, 0);
    if net.param_count() != header.param_count {
        return Err(Error::Data(format!(
            "{} declares {} parameters but the architecture has {}",
            path.display(),
            header.param_count,
            net.param_count()
        )));
    }
    net.set_params(&params);
    Ok((
        net,
        CheckpointMeta {
            step: header.step,
            seed: header.seed,
            classes,
        },
    ))
}

/// Splits `(H, W, K)` scores along the channel axis at `at`.
pub fn split_channels<F: Scalar>(scores: &Array3<F>, at: usize) -> (Array3<F>, Array3<F>) {
    let (a, b) = scores.view().split_at(Axis(2), at);
    (a.to_owned(), b.to_owned())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr3;

    #[test]
    fn layout_is_background_first_and_rejects_duplicates() {
        let mut layout = ClassLayout::new([ClassId(1), ClassId(2)]).unwrap();
        assert_eq!(layout.num_channels(), 3);
        assert_eq!(layout.channel_of(ClassId::BACKGROUND), Some(0));
        assert_eq!(layout.channel_of(ClassId(2)), Some(2));
        assert!(layout.extend(&[ClassId(2)]).is_err());
        layout.extend(&[ClassId(3)]).unwrap();
        assert_eq!(layout.class_at(3), ClassId(3));
        let old = ClassLayout::new([ClassId(1), ClassId(2)]).unwrap();
        assert!(old.is_prefix_of(&layout));
        assert!(!layout.is_prefix_of(&old));
    }

    #[test]
    fn softmax_rows_sum_to_one_and_are_stable() {
        let scores = arr3(&[[[1000.0f64, 1001.0, 999.0], [0.0, 0.0, 0.0]]]);
        let p = softmax(&scores);
        for row in p.rows() {
            let s: f64 = row.sum();
            assert!((s - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|v| v.is_finite()));
        }
        assert!((p[[0, 1, 0]] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn predict_decodes_through_layout() {
        let layout = ClassLayout::new([ClassId(5)]).unwrap();
        let scores = arr3(&[[[0.1f32, 0.9], [0.7, 0.2]]]);
        let pred = predict(&scores, &layout);
        assert_eq!(pred[[0, 0]], ClassId(5));
        assert_eq!(pred[[0, 1]], ClassId::BACKGROUND);
    }
}
