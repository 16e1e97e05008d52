//! Run configuration: TOML-backed, validated before anything executes.

use crate::error::{Error, Result};
use crate::placement::LambdaMode;
use crate::protocol::{ScheduleMode, TaskSchedule};
use crate::trainer::ReplayStrategy;
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub strategy: ReplayStrategy,
    /// Numeric precision of the training run: "f32" (default) or "f64".
    #[serde(default = "default_precision")]
    pub precision: String,
    pub schedule: ScheduleConfig,
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub replay: ReplayConfig,
    #[serde(default)]
    pub combination: CombinationConfig,
    #[serde(default)]
    pub placement: PlacementConfig,
    #[serde(default)]
    pub losses: LossConfig,
    #[serde(default)]
    pub protocol: ProtocolConfig,
}

fn default_precision() -> String {
    "f32".into()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    /// `"<base>-<increment>"`, e.g. `"15-1"` or `"3-1"`.
    pub steps: String,
    #[serde(default = "default_mode")]
    pub mode: ScheduleMode,
}

fn default_mode() -> ScheduleMode {
    ScheduleMode::Overlapped
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "snake_case")]
pub struct DatasetConfig {
    pub kind: DatasetKind,
    pub num_classes: u16,
    #[serde(default = "default_samples_per_class")]
    pub samples_per_class: usize,
    #[serde(default = "default_eval_samples_per_class")]
    pub eval_samples_per_class: usize,
    #[serde(default = "default_side")]
    pub height: usize,
    #[serde(default = "default_side")]
    pub width: usize,
    /// Root directories for `kind = "voc"`.
    pub train_dir: Option<String>,
    pub eval_dir: Option<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Synthetic,
    Voc,
}

fn default_samples_per_class() -> usize {
    20
}
fn default_eval_samples_per_class() -> usize {
    8
}
fn default_side() -> usize {
    64
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default = "default_width")]
    pub width: usize,
}

fn default_width() -> usize {
    12
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            width: default_width(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    /// Learning rate of the base step.
    #[serde(default = "default_lr_base")]
    pub lr_base: f64,
    /// Learning rate of every incremental step.
    #[serde(default = "default_lr_inc")]
    pub lr_inc: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
}

fn default_epochs() -> usize {
    20
}
fn default_lr_base() -> f64 {
    0.01
}
fn default_lr_inc() -> f64 {
    0.001
}
fn default_momentum() -> f64 {
    0.9
}
fn default_batch_size() -> usize {
    8
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: default_epochs(),
            lr_base: default_lr_base(),
            lr_inc: default_lr_inc(),
            momentum: default_momentum(),
            batch_size: default_batch_size(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReplayConfig {
    #[serde(default = "default_capacity")]
    pub capacity: usize,
    /// One stored item joins a batch per this many new samples.
    #[serde(default = "default_replay_ratio")]
    pub replay_ratio: usize,
    /// Minimum component size for instance extraction.
    #[serde(default = "default_min_pixels")]
    pub min_pixels: usize,
}

fn default_capacity() -> usize {
    60
}
fn default_replay_ratio() -> usize {
    3
}
fn default_min_pixels() -> usize {
    16
}

impl Default for ReplayConfig {
    fn default() -> Self {
        ReplayConfig {
            capacity: default_capacity(),
            replay_ratio: default_replay_ratio(),
            min_pixels: default_min_pixels(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CombinationConfig {
    /// Confidence threshold for pseudo-label class ranking.
    #[serde(default = "default_tau")]
    pub tau: f64,
    #[serde(default = "default_max_instances")]
    pub max_instances: usize,
}

fn default_tau() -> f64 {
    0.7
}
fn default_max_instances() -> usize {
    2
}

impl Default for CombinationConfig {
    fn default() -> Self {
        CombinationConfig {
            tau: default_tau(),
            max_instances: default_max_instances(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlacementConfig {
    #[serde(default = "default_region_n")]
    pub region_n: usize,
    #[serde(default = "default_min_scale")]
    pub min_scale: f64,
    #[serde(default = "default_beta")]
    pub beta_a: f64,
    #[serde(default = "default_beta")]
    pub beta_b: f64,
    /// When set, replaces the Beta draw with a constant.
    pub fixed_lambda: Option<f64>,
}

fn default_region_n() -> usize {
    6
}
fn default_min_scale() -> f64 {
    0.1
}
fn default_beta() -> f64 {
    0.5
}

impl Default for PlacementConfig {
    fn default() -> Self {
        PlacementConfig {
            region_n: default_region_n(),
            min_scale: default_min_scale(),
            beta_a: default_beta(),
            beta_b: default_beta(),
            fixed_lambda: None,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    /// Weight of the distillation term.
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    /// Reserved ramp weight; carried in configs and reports but not attached
    /// to any implemented term.
    #[serde(default = "default_beta_loss")]
    pub beta: f64,
    /// Attaches the distillation term to every strategy, for ablations.
    #[serde(default)]
    pub force_rskd: bool,
}

fn default_alpha() -> f64 {
    5.0
}
fn default_beta_loss() -> f64 {
    0.05
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            alpha: default_alpha(),
            beta: default_beta_loss(),
            force_rskd: false,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProtocolConfig {
    /// Minimum new-class pixels for an image to join a step.
    #[serde(default = "default_min_new_pixels")]
    pub min_new_pixels: usize,
}

fn default_min_new_pixels() -> usize {
    1
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        ProtocolConfig {
            min_new_pixels: default_min_new_pixels(),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(raw: &str) -> Result<Self> {
        let cfg: RunConfig =
            toml::from_str(raw).map_err(|e| Error::Config(format!("bad config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let raw = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&raw)
    }

    pub fn schedule(&self) -> Result<TaskSchedule> {
        TaskSchedule::from_shorthand(
            &self.schedule.steps,
            self.dataset.num_classes,
            self.schedule.mode,
        )
    }

    pub fn lambda_mode(&self) -> LambdaMode {
        match self.placement.fixed_lambda {
            Some(value) => LambdaMode::Fixed { value },
            None => LambdaMode::Beta {
                a: self.placement.beta_a,
                b: self.placement.beta_b,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.precision != "f32" && self.precision != "f64" {
            return Err(Error::Config(format!(
                "precision must be f32 or f64, got '{}'",
                self.precision
            )));
        }
        self.schedule()?;
        match self.dataset.kind {
            DatasetKind::Synthetic => {
                if self.dataset.height < 16 || self.dataset.width < 16 {
                    return Err(Error::Config(
                        "synthetic images must be at least 16x16".into(),
                    ));
                }
                if self.dataset.samples_per_class == 0 || self.dataset.eval_samples_per_class == 0 {
                    return Err(Error::Config("sample counts must be positive".into()));
                }
            }
            DatasetKind::Voc => {
                if self.dataset.train_dir.is_none() || self.dataset.eval_dir.is_none() {
                    return Err(Error::Config(
                        "voc datasets need train_dir and eval_dir".into(),
                    ));
                }
            }
        }
        if self.model.width == 0 {
            return Err(Error::Config("model width must be positive".into()));
        }
        if self.train.epochs == 0 || self.train.batch_size == 0 {
            return Err(Error::Config(
                "epochs and batch_size must be positive".into(),
            ));
        }
        if self.train.lr_base <= 0.0 || self.train.lr_inc <= 0.0 {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.train.momentum) {
            return Err(Error::Config("momentum must be in [0, 1)".into()));
        }
        if self.replay.replay_ratio == 0 {
            return Err(Error::Config("replay_ratio must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.combination.tau) {
            return Err(Error::Config("tau must be in [0, 1]".into()));
        }
        if self.placement.region_n == 0 {
            return Err(Error::Config("region_n must be positive".into()));
        }
        if !(0.0 < self.placement.min_scale && self.placement.min_scale <= 1.0) {
            return Err(Error::Config("min_scale must be in (0, 1]".into()));
        }
        if self.placement.beta_a <= 0.0 || self.placement.beta_b <= 0.0 {
            return Err(Error::Config("beta parameters must be positive".into()));
        }
        if let Some(l) = self.placement.fixed_lambda {
            if !(0.0..=1.0).contains(&l) {
                return Err(Error::Config("fixed_lambda must be in [0, 1]".into()));
            }
        }
        if self.losses.alpha < 0.0 || self.losses.beta < 0.0 {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
        seed = 7
        strategy = "eir"
        [schedule]
        steps = "3-1"
        [dataset]
        kind = "synthetic"
        num_classes = 6
    "#;

    #[test]
    fn minimal_config_parses_with_defaults() {
        let cfg = RunConfig::from_toml_str(MINIMAL).unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.strategy, ReplayStrategy::Eir);
        assert_eq!(cfg.combination.tau, 0.7);
        assert_eq!(cfg.combination.max_instances, 2);
        assert_eq!(cfg.placement.region_n, 6);
        assert_eq!(cfg.placement.min_scale, 0.1);
        assert_eq!(cfg.losses.alpha, 5.0);
        assert_eq!(cfg.losses.beta, 0.05);
        assert_eq!(cfg.train.momentum, 0.9);
        assert_eq!(cfg.replay.min_pixels, 16);
        assert_eq!(cfg.schedule().unwrap().num_steps(), 4);
        assert!(matches!(
            cfg.lambda_mode(),
            LambdaMode::Beta { a, b } if a == 0.5 && b == 0.5
        ));
    }

    #[test]
    fn bad_values_are_config_errors() {
        let cases = [
            (
                MINIMAL.replace("strategy = \"eir\"", "strategy = \"nope\""),
                "bad config",
            ),
            (format!("{MINIMAL}\n[combination]\ntau = 1.4"), "tau"),
            (format!("{MINIMAL}\n[train]\nmomentum = 1.0"), "momentum"),
            (
                format!("{MINIMAL}\n[placement]\nmin_scale = 0.0"),
                "min_scale",
            ),
            (
                format!("{MINIMAL}\n[placement]\nfixed_lambda = 2.0"),
                "fixed_lambda",
            ),
        ];
        for (raw, needle) in cases {
            match RunConfig::from_toml_str(&raw).unwrap_err() {
                Error::Config(msg) => {
                    assert!(msg.contains(needle), "expected '{needle}' in '{msg}'")
                }
                other => panic!("expected config error, got {other:?}"),
            }
        }
    }

    #[test]
    fn schedule_shorthand_must_divide_classes() {
        let raw = MINIMAL.replace("steps = \"3-1\"", "steps = \"4-3\"");
        assert!(matches!(
            RunConfig::from_toml_str(&raw),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn voc_kind_requires_directories() {
        let raw = MINIMAL.replace("kind = \"synthetic\"", "kind = \"voc\"");
        assert!(matches!(
            RunConfig::from_toml_str(&raw),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let raw = format!("{MINIMAL}\ntypo_key = 3");
        assert!(RunConfig::from_toml_str(&raw).is_err());
    }

    #[test]
    fn fixed_lambda_overrides_beta() {
        let raw = format!("{MINIMAL}\n[placement]\nfixed_lambda = 0.4");
        let cfg = RunConfig::from_toml_str(&raw).unwrap();
        assert!(matches!(
            cfg.lambda_mode(),
            LambdaMode::Fixed { value } if value == 0.4
        ));
    }
}
