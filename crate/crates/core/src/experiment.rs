//! Experiment orchestration: datasets from config, self-describing run
//! directories, and the read-only reporting tools built on them.

use crate::config::{DatasetKind, RunConfig};
use crate::error::{Error, Result};
use crate::memory::load_buffer;
use crate::metrics::MetricReport;
use crate::model::{load_checkpoint, ModelSnapshot};
use crate::placement::{fuse_all, FuseParams, FusedSample};
use crate::protocol::synthetic::generate_synthetic_dataset;
use crate::protocol::voc::{load_voc_format, save_voc_format};
use crate::protocol::{build_step_dataset, ClassId, SegSample};
use crate::rng::{derive_seed, fnv1a, kind, substream};
use crate::trainer::{train_continual, ReplayStrategy};
use crate::Scalar;
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

/// Everything needed to reproduce a run, written before training starts.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: String,
    pub created_unix: u64,
    pub seed: u64,
    pub strategy: ReplayStrategy,
    pub precision: String,
    pub out_dir: String,
    pub config: RunConfig,
}

impl RunManifest {
    pub fn path_in(dir: &Path) -> PathBuf {
        dir.join("manifest.json")
    }

    /// Creates the run directory and freezes the manifest plus a re-runnable
    /// config snapshot. Refuses a directory that already holds a run.
    pub fn write(cfg: &RunConfig, out_dir: &Path) -> Result<Self> {
        fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
        let path = Self::path_in(out_dir);
        if path.exists() {
            return Err(Error::Config(format!(
                "{} already holds a run; pick a fresh output directory",
                out_dir.display()
            )));
        }
        let manifest = RunManifest {
            version: env!("CARGO_PKG_VERSION").to_string(),
            created_unix: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
            seed: cfg.seed,
            strategy: cfg.strategy,
            precision: cfg.precision.clone(),
            out_dir: out_dir.display().to_string(),
            config: cfg.clone(),
        };
        let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
        let snapshot = toml::to_string(cfg)
            .map_err(|e| Error::Config(format!("config snapshot failed: {e}")))?;
        let toml_path = out_dir.join("config.toml");
        fs::write(&toml_path, snapshot).map_err(|e| Error::io(&toml_path, e))?;
        Ok(manifest)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = Self::path_in(dir);
        let raw = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&raw)
            .map_err(|e| Error::Data(format!("parsing {}: {e}", path.display())))
    }
}

/// Builds the (train, eval) pair a config describes. Synthetic eval data
/// comes from a derived master seed so seed sweeps never leak train images
/// into evaluation.
pub fn load_datasets<F: Scalar>(cfg: &RunConfig) -> Result<(Vec<SegSample<F>>, Vec<SegSample<F>>)> {
    match cfg.dataset.kind {
        DatasetKind::Synthetic => {
            let d = &cfg.dataset;
            let train = generate_synthetic_dataset::<F>(
                d.num_classes,
                d.samples_per_class,
                d.height,
                d.width,
                cfg.seed,
            )?;
            let eval = generate_synthetic_dataset::<F>(
                d.num_classes,
                d.eval_samples_per_class,
                d.height,
                d.width,
                derive_seed(cfg.seed, kind::EVAL_DATA),
            )?;
            Ok((train, eval))
        }
        DatasetKind::Voc => {
            let train_dir = cfg
                .dataset
                .train_dir
                .as_deref()
                .ok_or_else(|| Error::Config("voc datasets need train_dir".into()))?;
            let eval_dir = cfg
                .dataset
                .eval_dir
                .as_deref()
                .ok_or_else(|| Error::Config("voc datasets need eval_dir".into()))?;
            Ok((
                load_voc_format(Path::new(train_dir))?,
                load_voc_format(Path::new(eval_dir))?,
            ))
        }
    }
}

/// Precision-erased view of a finished run.
pub struct RunSummary {
    pub reports: Vec<MetricReport>,
    pub pastes: usize,
    pub skips: usize,
}

impl RunSummary {
    pub fn final_report(&self) -> &MetricReport {
        self.reports.last().expect("a run has at least one step")
    }
}

/// Runs one experiment end to end into `out_dir`.
pub fn run_experiment(cfg: &RunConfig, out_dir: &Path) -> Result<RunSummary> {
    cfg.validate()?;
    RunManifest::write(cfg, out_dir)?;
    match cfg.precision.as_str() {
        "f64" => run_typed::<f64>(cfg, out_dir),
        _ => run_typed::<f32>(cfg, out_dir),
    }
}

fn run_typed<F: Scalar>(cfg: &RunConfig, out_dir: &Path) -> Result<RunSummary> {
    let (train, eval) = load_datasets::<F>(cfg)?;
    let out = train_continual(cfg, &train, &eval, Some(out_dir))?;
    Ok(RunSummary {
        reports: out.reports,
        pastes: out.pastes,
        skips: out.skips,
    })
}

#[derive(Clone, Debug)]
pub struct CompareRow {
    pub run: String,
    pub strategy: String,
    pub base: Option<f64>,
    pub inc: Option<f64>,
    pub all: Option<f64>,
    pub bg_misclass: f64,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.2}")).unwrap_or_else(|| "-".into())
}

/// Reads finished run directories into comparison rows.
pub fn compare_rows(run_dirs: &[PathBuf]) -> Result<Vec<CompareRow>> {
    let mut rows = Vec::with_capacity(run_dirs.len());
    for dir in run_dirs {
        let manifest = RunManifest::load(dir)?;
        let report = MetricReport::load(&dir.join("metrics.json"))?;
        rows.push(CompareRow {
            run: dir
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_else(|| dir.display().to_string()),
            strategy: manifest.strategy.name().to_string(),
            base: report.base,
            inc: report.inc,
            all: report.all,
            bg_misclass: report.bg_misclass,
        });
    }
    Ok(rows)
}

pub fn compare_csv(rows: &[CompareRow]) -> String {
    let mut out = String::from("run,strategy,base,inc,all,bg_misclass\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{:.4}\n",
            r.run,
            r.strategy,
            fmt_opt(r.base),
            fmt_opt(r.inc),
            fmt_opt(r.all),
            r.bg_misclass
        ));
    }
    out
}

/// Fixed-width text table over the same rows.
pub fn compare_table(rows: &[CompareRow]) -> String {
    let headers = ["run", "strategy", "base", "inc", "all", "bg_misclass"];
    let cells: Vec<[String; 6]> = rows
        .iter()
        .map(|r| {
            [
                r.run.clone(),
                r.strategy.clone(),
                fmt_opt(r.base),
                fmt_opt(r.inc),
                fmt_opt(r.all),
                format!("{:.4}", r.bg_misclass),
            ]
        })
        .collect();
    let mut widths: Vec<usize> = headers.iter().map(|h| h.len()).collect();
    for row in &cells {
        for (w, cell) in widths.iter_mut().zip(row.iter()) {
            *w = (*w).max(cell.len());
        }
    }
    let mut out = String::new();
    let line = |cols: &[String], widths: &[usize]| {
        cols.iter()
            .zip(widths)
            .map(|(c, w)| format!("{c:<w$}"))
            .collect::<Vec<_>>()
            .join("  ")
            .trim_end()
            .to_string()
    };
    out.push_str(&line(
        &headers.iter().map(|s| s.to_string()).collect::<Vec<_>>(),
        &widths,
    ));
    out.push('\n');
    for row in &cells {
        out.push_str(&line(row.as_slice(), &widths));
        out.push('\n');
    }
    out
}

/// Materializes a synthetic config's train and eval splits to disk in the
/// directory-per-split mask format.
pub fn generate_to_disk(cfg: &RunConfig, out: &Path) -> Result<(PathBuf, PathBuf)> {
    cfg.validate()?;
    if cfg.dataset.kind != DatasetKind::Synthetic {
        return Err(Error::Config(
            "gen-data needs a synthetic dataset config".into(),
        ));
    }
    let (train, eval) = load_datasets::<f32>(cfg)?;
    let train_dir = out.join("train");
    let eval_dir = out.join("eval");
    save_voc_format(&train_dir, &train)?;
    save_voc_format(&eval_dir, &eval)?;
    Ok((train_dir, eval_dir))
}

fn write_fused_pngs<F: Scalar>(
    fused: &FusedSample<F>,
    layout_label: &ndarray::Array2<ClassId>,
    dir: &Path,
    index: usize,
) -> Result<()> {
    let (h, w, _) = fused.image.dim();
    let mut rgb = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px =
                |c: usize| (fused.image[[y, x, c]].as_f64().clamp(0.0, 1.0) * 255.0).round() as u8;
            rgb.put_pixel(x as u32, y as u32, image::Rgb([px(0), px(1), px(2)]));
        }
    }
    let img_path = dir.join(format!("fusion_{index:03}_image.png"));
    rgb.save(&img_path)
        .map_err(|e| Error::Data(format!("writing {}: {e}", img_path.display())))?;

    let mut mask = image::GrayImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let c = layout_label[[y, x]];
            let v = if c.is_ignore() {
                255
            } else if c.0 > 254 {
                return Err(Error::Data(format!(
                    "class {} does not fit an 8-bit mask",
                    c.0
                )));
            } else {
                c.0 as u8
            };
            mask.put_pixel(x as u32, y as u32, image::Luma([v]));
        }
    }
    let mask_path = dir.join(format!("fusion_{index:03}_mask.png"));
    mask.save(&mask_path)
        .map_err(|e| Error::Data(format!("writing {}: {e}", mask_path.display())))?;
    Ok(())
}

/// Recreates the final step's fusion pipeline from a finished run directory
/// and writes `n` fused images plus their label argmax masks for audit.
/// Returns how many pairs were written.
pub fn dump_fusions(run_dir: &Path, n: usize, out: &Path) -> Result<usize> {
    let manifest = RunManifest::load(run_dir)?;
    match manifest.precision.as_str() {
        "f64" => dump_fusions_typed::<f64>(&manifest, run_dir, n, out),
        _ => dump_fusions_typed::<f32>(&manifest, run_dir, n, out),
    }
}

fn dump_fusions_typed<F: Scalar>(
    manifest: &RunManifest,
    run_dir: &Path,
    n: usize,
    out: &Path,
) -> Result<usize> {
    let cfg = &manifest.config;
    let schedule = cfg.schedule()?;
    let last = schedule.num_steps();
    let buffer = load_buffer::<F>(&run_dir.join("buffer"))?;
    let teacher = if last > 1 {
        let (net, _) = load_checkpoint::<F>(&run_dir.join(format!("step_{}.ckpt", last - 1)))?;
        Some(ModelSnapshot::of(&net))
    } else {
        None
    };
    let (final_net, _) = load_checkpoint::<F>(&run_dir.join(format!("step_{last}.ckpt")))?;
    let layout = final_net.layout();

    let (train, _) = load_datasets::<F>(cfg)?;
    let step_ds = build_step_dataset(&train, &schedule, last, cfg.protocol.min_new_pixels)?;
    let fuse_params = FuseParams {
        region_n: cfg.placement.region_n,
        min_scale: cfg.placement.min_scale,
        lambda: cfg.lambda_mode(),
    };

    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut written = 0usize;
    for sample in step_ds.samples.iter().take(n) {
        let mut rng = substream(
            cfg.seed,
            &[kind::SAMPLE, last as u64, 1, fnv1a(sample.id.as_bytes())],
        );
        let ranking = match &teacher {
            Some(t) => crate::combination::rank_potential_classes(t, sample, cfg.combination.tau)?,
            None => Vec::new(),
        };
        let selected = crate::combination::select_instances(
            &ranking,
            &buffer,
            cfg.combination.max_instances,
            &mut rng,
        );
        let (fused, _events) = fuse_all(sample, &selected, layout, &fuse_params, &mut rng)?;
        let label = fused.dominant_label(layout);
        write_fused_pngs(&fused, &label, out, written)?;
        written += 1;
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(strategy: &str, seed: u64) -> RunConfig {
        let raw = format!(
            r#"
            seed = {seed}
            strategy = "{strategy}"
            [schedule]
            steps = "1-1"
            [dataset]
            kind = "synthetic"
            num_classes = 2
            samples_per_class = 3
            eval_samples_per_class = 2
            height = 24
            width = 24
            [model]
            width = 2
            [train]
            epochs = 1
            batch_size = 2
            [replay]
            capacity = 4
            "#
        );
        RunConfig::from_toml_str(&raw).unwrap()
    }

    fn temp(tag: &str) -> PathBuf {
        let dir = std::env::temp_dir().join(format!("segreplay_{tag}_{}", std::process::id()));
        let _ = fs::remove_dir_all(&dir);
        dir
    }

    #[test]
    fn eval_split_never_shares_images_with_nearby_train_seeds() {
        // Seed sweeps use consecutive seeds; a naive seed+1 eval would alias.
        for seed in 0..5u64 {
            let eval_master = derive_seed(seed, kind::EVAL_DATA);
            for other in 0..5u64 {
                assert_ne!(eval_master, other);
            }
        }
    }

    #[test]
    fn manifest_freezes_and_refuses_reuse() {
        let c = cfg("eir", 3);
        let dir = temp("manifest");
        let m = RunManifest::write(&c, &dir).unwrap();
        assert_eq!(m.strategy, ReplayStrategy::Eir);
        let loaded = RunManifest::load(&dir).unwrap();
        assert_eq!(loaded.seed, 3);
        assert_eq!(loaded.config.dataset.num_classes, 2);
        assert!(matches!(
            RunManifest::write(&c, &dir),
            Err(Error::Config(_))
        ));
        // The config snapshot is itself a loadable config.
        let snap = RunConfig::load(&dir.join("config.toml")).unwrap();
        assert_eq!(snap.seed, c.seed);
        assert_eq!(snap.strategy, c.strategy);
        let _ = fs::remove_dir_all(&dir);
    }

    #[test]
    fn run_compare_and_dump_cover_the_artifact_surface() {
        let dir = temp("exp");
        let run_a = dir.join("none");
        let run_b = dir.join("eir");
        let mut ca = cfg("none", 5);
        ca.precision = "f64".into();
        let mut cb = cfg("eir", 5);
        cb.precision = "f64".into();
        run_experiment(&ca, &run_a).unwrap();
        run_experiment(&cb, &run_b).unwrap();

        let rows = compare_rows(&[run_a.clone(), run_b.clone()]).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].strategy, "none");
        assert_eq!(rows[1].strategy, "eir");
        let csv = compare_csv(&rows);
        assert_eq!(csv.lines().count(), 3);
        assert!(csv.starts_with("run,strategy,base,inc,all,bg_misclass"));
        let table = compare_table(&rows);
        assert_eq!(table.lines().count(), 3);

        let fused_dir = dir.join("fused");
        let written = dump_fusions(&run_b, 2, &fused_dir).unwrap();
        assert_eq!(written, 2);
        assert!(fused_dir.join("fusion_000_image.png").exists());
        assert!(fused_dir.join("fusion_001_mask.png").exists());
        let _ = fs::remove_dir_all(&dir);
    }

    #[test]
    fn disk_round_trip_reproduces_in_memory_metrics_exactly() {
        let dir = temp("roundtrip");
        let mut mem_cfg = cfg("eir", 9);
        mem_cfg.precision = "f64".into();
        let (train_dir, eval_dir) = generate_to_disk(&mem_cfg, &dir.join("data")).unwrap();

        let mem_out = run_experiment(&mem_cfg, &dir.join("mem")).unwrap();

        let mut disk_cfg = mem_cfg.clone();
        disk_cfg.dataset.kind = DatasetKind::Voc;
        disk_cfg.dataset.train_dir = Some(train_dir.display().to_string());
        disk_cfg.dataset.eval_dir = Some(eval_dir.display().to_string());
        let disk_out = run_experiment(&disk_cfg, &dir.join("disk")).unwrap();

        for (a, b) in mem_out.reports.iter().zip(disk_out.reports.iter()) {
            assert_eq!(a.per_class, b.per_class);
            assert_eq!(a.all, b.all);
            assert_eq!(a.bg_misclass, b.bg_misclass);
        }
        let _ = fs::remove_dir_all(&dir);
    }
}
