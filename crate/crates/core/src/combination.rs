//! Choosing what to replay into a new-step image: the previous model ranks
//! old classes by how much background it believes they occupy, and stored
//! instances of the top classes are selected for pasting.

use crate::error::{Error, Result};
use crate::memory::{InstanceRecord, MemoryBuffer};
use crate::model::{softmax, ModelSnapshot};
use crate::protocol::{ClassId, SegSample};
use crate::Scalar;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// An old class the previous model sees hiding in background-labeled pixels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RankedClass {
    pub class: ClassId,
    /// Number of confident background-labeled pixels voting for the class.
    pub pixels: usize,
}

/// Runs the previous model over the sample and counts, per old class, the
/// background-labeled pixels whose argmax is that class with probability
/// above `tau`. The result is sorted by count descending (ties to the lower
/// class id); classes with no votes are absent.
pub fn rank_potential_classes<F: Scalar>(
    old: &ModelSnapshot<F>,
    sample: &SegSample<F>,
    tau: f64,
) -> Result<Vec<RankedClass>> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::Config(format!(
            "confidence threshold {tau} outside [0, 1]"
        )));
    }
    let probs = softmax(&old.forward(&sample.image));
    let (h, w, k) = probs.dim();
    let threshold = F::of(tau);
    let mut counts = vec![0usize; k];
    for y in 0..h {
        for x in 0..w {
            if !sample.label[[y, x]].is_background() {
                continue;
            }
            let mut best = 0usize;
            let mut best_p = probs[[y, x, 0]];
            for c in 1..k {
                if probs[[y, x, c]] > best_p {
                    best_p = probs[[y, x, c]];
                    best = c;
                }
            }
            if best != 0 && best_p > threshold {
                counts[best] += 1;
            }
        }
    }
    let mut ranking: Vec<RankedClass> = counts
        .iter()
        .enumerate()
        .skip(1)
        .filter(|(_, &n)| n > 0)
        .map(|(ch, &n)| RankedClass {
            class: old.layout().class_at(ch),
            pixels: n,
        })
        .collect();
    ranking.sort_by(|a, b| b.pixels.cmp(&a.pixels).then(a.class.cmp(&b.class)));
    Ok(ranking)
}

/// Picks up to `max_instances` stored instances, one per class, walking the
/// ranking first and falling back to uniformly drawn learned classes when
/// the ranking runs dry. Within a class the instance is drawn uniformly.
///
/// An empty or zero-capacity buffer (or `max_instances == 0`) returns an
/// empty selection without consuming any randomness, which is what makes the
/// degenerate configurations coincide with no replay at all.
pub fn select_instances<'a, F: Scalar>(
    ranking: &[RankedClass],
    buffer: &'a MemoryBuffer<F>,
    max_instances: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<&'a InstanceRecord<F>> {
    if max_instances == 0 || buffer.is_empty() {
        return Vec::new();
    }
    let mut chosen: Vec<&InstanceRecord<F>> = Vec::with_capacity(max_instances);
    let mut used: Vec<ClassId> = Vec::with_capacity(max_instances);
    for rc in ranking {
        if chosen.len() == max_instances {
            break;
        }
        let records = buffer.records(rc.class);
        if records.is_empty() || used.contains(&rc.class) {
            continue;
        }
        let idx = rng.random_range(0..records.len());
        chosen.push(&records[idx]);
        used.push(rc.class);
    }
    // Fallback: the remaining slots draw classes uniformly from the learned
    // classes that still have stored instances.
    while chosen.len() < max_instances {
        let pool: Vec<ClassId> = buffer
            .learned()
            .iter()
            .copied()
            .filter(|c| !used.contains(c) && !buffer.records(*c).is_empty())
            .collect();
        if pool.is_empty() {
            break;
        }
        let class = pool[rng.random_range(0..pool.len())];
        let records = buffer.records(class);
        let idx = rng.random_range(0..records.len());
        chosen.push(&records[idx]);
        used.push(class);
    }
    chosen
}
