//! Continual training loop with pluggable replay strategies.
//!
//! The loop is identical for every strategy; strategies only differ in how a
//! batch is assembled. Model init and epoch shuffling draw from streams that
//! do not depend on the strategy, so two runs with the same seed diverge only
//! where a strategy actually consumes randomness. A strategy that never
//! touches its streams (empty buffer, zero instance budget) is bit-identical
//! to plain fine-tuning.

use crate::combination::{rank_potential_classes, select_instances, RankedClass};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::losses::{crop_item_loss, image_item_loss, LossBreakdown};
use crate::memory::{extract_instances, save_buffer, ImageBuffer, InstanceRecord, MemoryBuffer};
use crate::metrics::{BgMisclassAccum, ConfusionAccum, MetricReport};
use crate::model::{predict, save_checkpoint, ClassLayout, ConvSegNet, Gradients, ModelSnapshot};
use crate::placement::{
    fit_instance, fuse_all, mixup_fuse, FuseParams, FusedSample, FusionEvent, FusionOutcome,
};
use crate::protocol::{build_step_dataset, eval_view_label, ClassId, SegSample, TaskSchedule};
use crate::rng::{fnv1a, kind, substream};
use crate::Scalar;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;
use std::fs::{self, File};
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReplayStrategy {
    /// Fine-tune on new data only.
    None,
    /// Replay whole stored images with their stale partial labels.
    ImageReplay,
    /// Feed stored instance crops as extra batch items.
    VanillaInstance,
    /// Paste random stored instances at random positions, hard labels.
    RandomCopyPaste,
    /// Ranked selection, region placement, mixup and distillation.
    Eir,
}

impl ReplayStrategy {
    pub const ALL: [ReplayStrategy; 5] = [
        ReplayStrategy::None,
        ReplayStrategy::ImageReplay,
        ReplayStrategy::VanillaInstance,
        ReplayStrategy::RandomCopyPaste,
        ReplayStrategy::Eir,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ReplayStrategy::None => "none",
            ReplayStrategy::ImageReplay => "image_replay",
            ReplayStrategy::VanillaInstance => "vanilla_instance",
            ReplayStrategy::RandomCopyPaste => "random_copy_paste",
            ReplayStrategy::Eir => "eir",
        }
    }
}

impl fmt::Display for ReplayStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ReplayStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ReplayStrategy::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown strategy '{s}'")))
    }
}

/// One gradient contributor inside a batch.
enum BatchItem<'a, F: Scalar> {
    Image {
        fused: FusedSample<F>,
        instances: Vec<&'a InstanceRecord<F>>,
        distill: bool,
    },
    Crop(&'a InstanceRecord<F>),
}

#[derive(Clone, Copy, Debug)]
pub struct EpochLoss {
    pub step: usize,
    pub epoch: usize,
    pub breakdown: LossBreakdown,
}

pub struct TrainOutcome<F: Scalar> {
    pub net: ConvSegNet<F>,
    /// One evaluation report per learning step, in order.
    pub reports: Vec<MetricReport>,
    /// Buffer occupancy after each step's rebalance.
    pub buffer_counts: Vec<BTreeMap<ClassId, usize>>,
    pub buffer: MemoryBuffer<F>,
    pub losses: Vec<EpochLoss>,
    /// Fusion outcomes across the whole run.
    pub pastes: usize,
    pub skips: usize,
}

/// Artifact writers for a run directory.
struct RunSink {
    losses: File,
    fusions: File,
}

impl RunSink {
    fn create(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let losses_path = dir.join("losses.csv");
        let mut losses = File::create(&losses_path).map_err(|e| Error::io(&losses_path, e))?;
        writeln!(losses, "step,epoch,mbce_inst,mbce_img,rskd,total")
            .map_err(|e| Error::io(&losses_path, e))?;
        let fusions_path = dir.join("fusions.jsonl");
        let fusions = File::create(&fusions_path).map_err(|e| Error::io(&fusions_path, e))?;
        Ok(RunSink { losses, fusions })
    }

    fn epoch_row(&mut self, step: usize, epoch: usize, b: &LossBreakdown) -> Result<()> {
        writeln!(
            self.losses,
            "{step},{epoch},{:.9},{:.9},{:.9},{:.9}",
            b.mbce_instance, b.mbce_image, b.rskd, b.total
        )
        .map_err(|e| Error::io(Path::new("losses.csv"), e))
    }

    fn fusion_line(
        &mut self,
        step: usize,
        epoch: usize,
        sample: &str,
        events: &[FusionEvent],
    ) -> Result<()> {
        let line = serde_json::json!({
            "step": step,
            "epoch": epoch,
            "sample": sample,
            "events": events,
        });
        writeln!(self.fusions, "{line}").map_err(|e| Error::io(Path::new("fusions.jsonl"), e))
    }
}

/// Evaluates the model against the step-t view of the eval set: classes not
/// yet learned count as ignore, and background misclassification is measured
/// over the classes learned before step t.
pub fn evaluate<F: Scalar>(
    net: &ConvSegNet<F>,
    eval_set: &[SegSample<F>],
    schedule: &TaskSchedule,
    t: usize,
) -> Result<MetricReport> {
    let mut confusion = ConfusionAccum::new();
    let mut bg = BgMisclassAccum::new();
    let old = schedule.old_classes(t);
    for sample in eval_set {
        let pred = predict(&net.forward(&sample.image), net.layout());
        let gt = eval_view_label(&sample.label, schedule, t);
        confusion.add_maps(&pred, &gt)?;
        bg.add_maps(&pred, &gt, &old);
    }
    Ok(MetricReport::compute(
        &confusion,
        &schedule.base_classes(),
        &schedule.incremental_classes(),
        bg.rate(),
        t,
    ))
}

fn count_events(events: &[FusionEvent], pastes: &mut usize, skips: &mut usize) {
    for e in events {
        match e.outcome {
            FusionOutcome::Pasted { .. } => *pastes += 1,
            _ => *skips += 1,
        }
    }
}

/// Runs the full continual schedule and returns the trained model plus
/// per-step evaluation reports. When `out_dir` is given, writes losses.csv,
/// fusions.jsonl, per-step metrics and checkpoints, and the final buffer.
pub fn train_continual<F: Scalar>(
    cfg: &RunConfig,
    train_set: &[SegSample<F>],
    eval_set: &[SegSample<F>],
    out_dir: Option<&Path>,
) -> Result<TrainOutcome<F>> {
    cfg.validate()?;
    let schedule = cfg.schedule()?;
    let strategy = cfg.strategy;
    let fuse_params = FuseParams {
        region_n: cfg.placement.region_n,
        min_scale: cfg.placement.min_scale,
        lambda: cfg.lambda_mode(),
    };
    let mut sink = match out_dir {
        Some(dir) => Some(RunSink::create(dir)?),
        None => None,
    };

    let first = ClassLayout::new(schedule.new_classes(1).iter().copied())?;
    let mut net = ConvSegNet::<F>::new(first, cfg.model.width, cfg.seed);
    let mut old_snapshot: Option<ModelSnapshot<F>> = None;
    let mut buffer = MemoryBuffer::<F>::new(cfg.replay.capacity);
    let mut images = ImageBuffer::<F>::new(cfg.replay.capacity);

    let mut reports = Vec::new();
    let mut buffer_counts = Vec::new();
    let mut losses = Vec::new();
    let (mut pastes, mut skips) = (0usize, 0usize);

    for t in 1..=schedule.num_steps() {
        let step_ds = build_step_dataset(train_set, &schedule, t, cfg.protocol.min_new_pixels)?;
        if t > 1 {
            let added: Vec<ClassId> = step_ds.new_classes.iter().copied().collect();
            net.extend_head(&added)?;
        }
        let lr = if t == 1 {
            cfg.train.lr_base
        } else {
            cfg.train.lr_inc
        };
        let mut velocity = Gradients::zeros_like(&net);

        // Ranking depends only on the frozen teacher and the sample, so it
        // is computed once per step, not per epoch.
        let rankings: Vec<Vec<RankedClass>> = match (&old_snapshot, strategy) {
            (Some(teacher), ReplayStrategy::Eir) => step_ds
                .samples
                .iter()
                .map(|s| rank_potential_classes(teacher, s, cfg.combination.tau))
                .collect::<Result<_>>()?,
            _ => vec![Vec::new(); step_ds.samples.len()],
        };

        for epoch in 1..=cfg.train.epochs {
            let mut order: Vec<usize> = (0..step_ds.samples.len()).collect();
            order.shuffle(&mut substream(
                cfg.seed,
                &[kind::SHUFFLE, t as u64, epoch as u64],
            ));

            let mut epoch_acc = LossBreakdown::default();
            let mut batches = 0usize;
            for (batch_index, chunk) in order.chunks(cfg.train.batch_size).enumerate() {
                let items = build_items(
                    cfg,
                    t,
                    epoch,
                    batch_index,
                    chunk,
                    &step_ds.samples,
                    &rankings,
                    &buffer,
                    &images,
                    old_snapshot.as_ref(),
                    net.layout(),
                    &fuse_params,
                    &mut sink,
                    &mut pastes,
                    &mut skips,
                )?;

                let mut grads = Gradients::zeros_like(&net);
                let mut batch_loss = LossBreakdown::default();
                for item in &items {
                    let (b, g) = match item {
                        BatchItem::Image {
                            fused,
                            instances,
                            distill,
                        } => {
                            let teacher = if *distill {
                                old_snapshot.as_ref()
                            } else {
                                None
                            };
                            image_item_loss(&net, teacher, fused, instances, cfg.losses.alpha)?
                        }
                        BatchItem::Crop(record) => crop_item_loss(&net, record)?,
                    };
                    batch_loss.add(&b);
                    grads.add_assign(&g);
                }
                let inv = 1.0 / items.len() as f64;
                batch_loss.scale(inv);
                grads.scale(F::of(inv));
                if !batch_loss.total.is_finite() {
                    return Err(Error::Diverged { step: t, epoch });
                }
                net.sgd_step(&mut velocity, &grads, F::of(lr), F::of(cfg.train.momentum));
                epoch_acc.add(&batch_loss);
                batches += 1;
            }
            epoch_acc.scale(1.0 / batches.max(1) as f64);
            if let Some(s) = sink.as_mut() {
                s.epoch_row(t, epoch, &epoch_acc)?;
            }
            losses.push(EpochLoss {
                step: t,
                epoch,
                breakdown: epoch_acc,
            });
        }

        old_snapshot = Some(ModelSnapshot::of(&net));
        buffer.rebalance(extract_instances(&step_ds, cfg.replay.min_pixels))?;
        if strategy == ReplayStrategy::ImageReplay {
            images.rebalance(&step_ds)?;
        }
        buffer_counts.push(buffer.counts());

        let report = evaluate(&net, eval_set, &schedule, t)?;
        if let Some(dir) = out_dir {
            report.save(&dir.join(format!("metrics_step_{t}.json")))?;
            save_checkpoint(&dir.join(format!("step_{t}.ckpt")), &net, t, cfg.seed)?;
        }
        reports.push(report);
    }

    if let Some(dir) = out_dir {
        if let Some(last) = reports.last() {
            last.save(&dir.join("metrics.json"))?;
        }
        save_buffer(&buffer, &dir.join("buffer"))?;
    }

    Ok(TrainOutcome {
        net,
        reports,
        buffer_counts,
        buffer,
        losses,
        pastes,
        skips,
    })
}

/// Assembles one batch's gradient contributors according to the strategy.
#[allow(clippy::too_many_arguments)]
fn build_items<'a, F: Scalar>(
    cfg: &RunConfig,
    t: usize,
    epoch: usize,
    batch_index: usize,
    chunk: &[usize],
    samples: &[SegSample<F>],
    rankings: &[Vec<RankedClass>],
    buffer: &'a MemoryBuffer<F>,
    images: &ImageBuffer<F>,
    old: Option<&ModelSnapshot<F>>,
    layout: &ClassLayout,
    fuse_params: &FuseParams,
    sink: &mut Option<RunSink>,
    pastes: &mut usize,
    skips: &mut usize,
) -> Result<Vec<BatchItem<'a, F>>> {
    let strategy = cfg.strategy;
    let force = cfg.losses.force_rskd;
    let mut items: Vec<BatchItem<'a, F>> = Vec::with_capacity(chunk.len() + 2);

    for &index in chunk {
        let sample = &samples[index];
        match strategy {
            ReplayStrategy::Eir => {
                let mut rng = substream(
                    cfg.seed,
                    &[
                        kind::SAMPLE,
                        t as u64,
                        epoch as u64,
                        fnv1a(sample.id.as_bytes()),
                    ],
                );
                let selected = select_instances(
                    &rankings[index],
                    buffer,
                    cfg.combination.max_instances,
                    &mut rng,
                );
                let (fused, events) = fuse_all(sample, &selected, layout, fuse_params, &mut rng)?;
                count_events(&events, pastes, skips);
                if let Some(s) = sink.as_mut() {
                    if !events.is_empty() {
                        s.fusion_line(t, epoch, &sample.id, &events)?;
                    }
                }
                let distill = old.is_some() && (force || !fused.fused_classes.is_empty());
                items.push(BatchItem::Image {
                    fused,
                    instances: selected,
                    distill,
                });
            }
            ReplayStrategy::RandomCopyPaste => {
                let mut fused = FusedSample::from_sample(sample, layout)?;
                if !buffer.is_empty() && cfg.combination.max_instances > 0 {
                    let mut rng = substream(
                        cfg.seed,
                        &[
                            kind::SAMPLE,
                            t as u64,
                            epoch as u64,
                            fnv1a(sample.id.as_bytes()),
                        ],
                    );
                    let selected =
                        select_instances(&[], buffer, cfg.combination.max_instances, &mut rng);
                    let (h, w) = (sample.height(), sample.width());
                    for record in selected {
                        let anchor = (rng.random_range(0..h), rng.random_range(0..w));
                        if let Ok(plan) =
                            fit_instance(record, anchor, 0, h, w, cfg.placement.min_scale)
                        {
                            mixup_fuse(&mut fused, record, layout, &plan, 0.0)?;
                        }
                    }
                }
                let distill = old.is_some() && force;
                items.push(BatchItem::Image {
                    fused,
                    instances: Vec::new(),
                    distill,
                });
            }
            ReplayStrategy::None
            | ReplayStrategy::ImageReplay
            | ReplayStrategy::VanillaInstance => {
                let fused = FusedSample::from_sample(sample, layout)?;
                let distill = old.is_some() && force;
                items.push(BatchItem::Image {
                    fused,
                    instances: Vec::new(),
                    distill,
                });
            }
        }
    }

    let n_replay = chunk.len() / cfg.replay.replay_ratio;
    match strategy {
        ReplayStrategy::VanillaInstance if n_replay > 0 && !buffer.is_empty() => {
            let mut rng = substream(
                cfg.seed,
                &[
                    kind::REPLAY_PICK,
                    t as u64,
                    epoch as u64,
                    batch_index as u64,
                ],
            );
            let stored = buffer.records_of(&buffer.learned().clone());
            for _ in 0..n_replay {
                let idx = rng.random_range(0..stored.len());
                items.push(BatchItem::Crop(stored[idx]));
            }
        }
        ReplayStrategy::ImageReplay if n_replay > 0 && !images.is_empty() => {
            let mut rng = substream(
                cfg.seed,
                &[
                    kind::REPLAY_PICK,
                    t as u64,
                    epoch as u64,
                    batch_index as u64,
                ],
            );
            let stored = images.all();
            for _ in 0..n_replay {
                let idx = rng.random_range(0..stored.len());
                let fused = FusedSample::from_sample(stored[idx], layout)?;
                let distill = old.is_some() && cfg.losses.force_rskd;
                items.push(BatchItem::Image {
                    fused,
                    instances: Vec::new(),
                    distill,
                });
            }
        }
        _ => {}
    }

    Ok(items)
}
