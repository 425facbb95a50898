//! Flat key=value run configuration with section prefixes.
//!
//! Chosen over a structured format for diff-ability in experiment logs:
//! overrides are single lines, and the full effective config echoes back as
//! sorted `key=value` text (stored verbatim in checkpoints).

use std::path::Path;
use std::str::FromStr;

use crate::backbone::EncoderConfig;
use crate::data::{Background, PhotoConfig, SceneConfig, ShapeKind};
use crate::distill::{HeadConfig, ScheduleConfig};
use crate::error::{Error, Result};
use crate::filtering::{FilterConfig, FilterMetric, SupervisionStrategy};
use crate::geometry::AugConfig;
use crate::optim::OptimConfig;
use crate::slots::SlotConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

/// Complete run configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    pub batch_size: usize,
    pub eval_every: usize,
    pub num_slots_eval: usize,
    pub deterministic_mode: bool,
    pub precision: Precision,
    pub train_dir: String,
    pub val_dir: String,
    pub train_count: usize,
    pub val_count: usize,
    pub scene: SceneConfig,
    pub aug: AugConfig,
    pub photo: PhotoConfig,
    pub encoder: EncoderConfig,
    pub slots: SlotConfig,
    pub head: HeadConfig,
    pub separate_global_head: bool,
    pub filter: FilterConfig,
    pub schedule: ScheduleConfig,
    pub optim: OptimConfig,
    pub tau: f64,
    pub center_momentum: f64,
    pub lambda_oc: f64,
    pub lambda_global: f64,
    /// Sharpening-stage reconstruction target: same view (default) or the
    /// aligned other view.
    pub sharpening_cross_view: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl TrainConfig {
    /// Desk-scale profile: small enough for CPU training.
    pub fn desk() -> Self {
        TrainConfig {
            seed: 0,
            batch_size: 32,
            eval_every: 10,
            num_slots_eval: 4,
            deterministic_mode: true,
            precision: Precision::F32,
            train_dir: "data/train".into(),
            val_dir: "data/val".into(),
            train_count: 5000,
            val_count: 500,
            scene: SceneConfig::default(),
            aug: AugConfig::default(),
            photo: PhotoConfig::default(),
            encoder: EncoderConfig::default(),
            slots: SlotConfig::default(),
            head: HeadConfig::default(),
            separate_global_head: false,
            filter: FilterConfig::default(),
            schedule: ScheduleConfig::default(),
            optim: OptimConfig::default(),
            tau: 0.1,
            center_momentum: 0.9,
            lambda_oc: 1.0,
            lambda_global: 1.0,
            sharpening_cross_view: false,
        }
    }

    /// Full-scale profile mirroring the original recipe (not CPU-trainable
    /// at desk scale; kept for reference and config completeness).
    pub fn paper() -> Self {
        TrainConfig {
            batch_size: 64,
            num_slots_eval: 7,
            encoder: EncoderConfig {
                depth: 12,
                embed_dim: 384,
                patch_size: 16,
                num_heads: 6,
                mlp_ratio: 4.0,
                image_size: 224,
                in_channels: 3,
                use_pos_embed: true,
            },
            aug: AugConfig {
                output_size: 224,
                patch_size: 16,
                ..AugConfig::default()
            },
            scene: SceneConfig {
                image_size: 224,
                ..SceneConfig::default()
            },
            slots: SlotConfig::paper(),
            head: HeadConfig::paper(),
            schedule: ScheduleConfig::paper(),
            ..Self::desk()
        }
    }

    pub fn epochs(&self) -> usize {
        self.schedule.total_epochs
    }

    pub fn sharpening_epochs(&self) -> usize {
        self.schedule.sharpening_epochs
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.slots.validate()?;
        self.head.validate()?;
        self.filter.validate()?;
        self.schedule.validate()?;
        self.aug.validate()?;
        self.scene.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.schedule.total_epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.encoder.image_size != self.aug.output_size
            || self.encoder.patch_size != self.aug.patch_size
        {
            return Err(Error::Config(format!(
                "encoder geometry ({}, patch {}) must match aug geometry ({}, patch {})",
                self.encoder.image_size,
                self.encoder.patch_size,
                self.aug.output_size,
                self.aug.patch_size
            )));
        }
        if self.tau <= 0.0 || self.schedule.tau_t_start <= 0.0 || self.schedule.tau_t_end <= 0.0 {
            return Err(Error::Config("temperatures must be positive".into()));
        }
        Ok(())
    }

    /// Apply one `key=value` assignment; unknown keys are rejected by name.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn p<V: FromStr>(key: &str, value: &str) -> Result<V> {
            value
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("key {key}: cannot parse value '{value}'")))
        }
        let v = value.trim();
        match key {
            "profile" => {
                *self = match v {
                    "desk" => Self::desk(),
                    "paper" => Self::paper(),
                    other => {
                        return Err(Error::Config(format!(
                            "unknown profile '{other}' (expected desk or paper)"
                        )))
                    }
                };
            }
            "seed" => self.seed = p(key, v)?,
            "batch_size" => self.batch_size = p(key, v)?,
            "epochs" => self.schedule.total_epochs = p(key, v)?,
            "sharpening_epochs" => self.schedule.sharpening_epochs = p(key, v)?,
            "eval_every" => self.eval_every = p(key, v)?,
            "num_slots_eval" => self.num_slots_eval = p(key, v)?,
            "deterministic_mode" => self.deterministic_mode = p(key, v)?,
            "precision" => {
                self.precision = match v {
                    "f32" => Precision::F32,
                    "f64" => Precision::F64,
                    other => {
                        return Err(Error::Config(format!("unknown precision '{other}'")))
                    }
                }
            }
            "sharpening_cross_view" => self.sharpening_cross_view = p(key, v)?,

            "data.train_dir" => self.train_dir = v.to_string(),
            "data.val_dir" => self.val_dir = v.to_string(),
            "data.train_count" => self.train_count = p(key, v)?,
            "data.val_count" => self.val_count = p(key, v)?,

            "scene.image_size" => self.scene.image_size = p(key, v)?,
            "scene.num_objects_min" => self.scene.num_objects_min = p(key, v)?,
            "scene.num_objects_max" => self.scene.num_objects_max = p(key, v)?,
            "scene.palette_size" => self.scene.palette_size = p(key, v)?,
            "scene.allow_occlusion" => self.scene.allow_occlusion = p(key, v)?,
            "scene.background" => {
                self.scene.background = match v {
                    "noise" => Background::Noise,
                    "gradient" => Background::Gradient,
                    other => return Err(Error::Config(format!("unknown background '{other}'"))),
                }
            }
            "scene.shapes" => {
                let mut shapes = Vec::new();
                for part in v.split(',') {
                    shapes.push(match part.trim() {
                        "disk" => ShapeKind::Disk,
                        "rectangle" => ShapeKind::Rectangle,
                        "triangle" => ShapeKind::Triangle,
                        other => return Err(Error::Config(format!("unknown shape '{other}'"))),
                    });
                }
                self.scene.shapes = shapes;
            }

            "aug.crop_scale_min" => self.aug.crop_scale_min = p(key, v)?,
            "aug.crop_scale_max" => self.aug.crop_scale_max = p(key, v)?,
            "aug.hflip_prob" => self.aug.hflip_prob = p(key, v)?,
            "aug.output_size" => self.aug.output_size = p(key, v)?,
            "aug.patch_size" => self.aug.patch_size = p(key, v)?,
            "aug.overlap_fallback_retries" => self.aug.overlap_fallback_retries = p(key, v)?,

            "photo.jitter_prob" => self.photo.jitter_prob = p(key, v)?,
            "photo.brightness_strength" => self.photo.brightness_strength = p(key, v)?,
            "photo.contrast_strength" => self.photo.contrast_strength = p(key, v)?,
            "photo.saturation_strength" => self.photo.saturation_strength = p(key, v)?,
            "photo.blur_sigma_min" => self.photo.blur_sigma_min = p(key, v)?,
            "photo.blur_sigma_max" => self.photo.blur_sigma_max = p(key, v)?,
            "photo.blur_prob_view1" => self.photo.blur_prob[0] = p(key, v)?,
            "photo.blur_prob_view2" => self.photo.blur_prob[1] = p(key, v)?,
            "photo.solarize_prob_view1" => self.photo.solarize_prob[0] = p(key, v)?,
            "photo.solarize_prob_view2" => self.photo.solarize_prob[1] = p(key, v)?,
            "photo.solarize_threshold" => self.photo.solarize_threshold = p(key, v)?,

            "encoder.depth" => self.encoder.depth = p(key, v)?,
            "encoder.embed_dim" => self.encoder.embed_dim = p(key, v)?,
            "encoder.patch_size" => self.encoder.patch_size = p(key, v)?,
            "encoder.num_heads" => self.encoder.num_heads = p(key, v)?,
            "encoder.mlp_ratio" => self.encoder.mlp_ratio = p(key, v)?,
            "encoder.image_size" => self.encoder.image_size = p(key, v)?,
            "encoder.use_pos_embed" => self.encoder.use_pos_embed = p(key, v)?,

            "slots.num_slots" => self.slots.num_slots = p(key, v)?,
            "slots.slot_dim" => self.slots.slot_dim = p(key, v)?,
            "slots.num_layers" => self.slots.num_layers = p(key, v)?,
            "slots.mlp_hidden" => self.slots.mlp_hidden = p(key, v)?,
            "slots.decoder_hidden" => self.slots.decoder_hidden = p(key, v)?,
            "slots.decoder_layers" => self.slots.decoder_layers = p(key, v)?,

            "head.out_dim" => self.head.out_dim = p(key, v)?,
            "head.hidden" => self.head.hidden = p(key, v)?,
            "head.bottleneck" => self.head.bottleneck = p(key, v)?,
            "head.layers" => self.head.layers = p(key, v)?,
            "head.separate_global" => self.separate_global_head = p(key, v)?,

            "filter_k" => self.filter.k = p(key, v)?,
            "filter_metric" => self.filter.metric = FilterMetric::from_str(v)?,
            "supervision_strategy" => self.filter.strategy = SupervisionStrategy::from_str(v)?,
            "strategy_start" => self.filter.strategy_start = p(key, v)?,
            "strategy_end" => self.filter.strategy_end = p(key, v)?,

            "distill.tau" => self.tau = p(key, v)?,
            "distill.center_momentum" => self.center_momentum = p(key, v)?,
            "distill.lambda_oc" => self.lambda_oc = p(key, v)?,
            "distill.lambda_global" => self.lambda_global = p(key, v)?,

            "schedule.base_lr" => self.schedule.base_lr = p(key, v)?,
            "schedule.lr_warmup_epochs" => self.schedule.lr_warmup_epochs = p(key, v)?,
            "schedule.teacher_momentum_start" => {
                self.schedule.teacher_momentum_start = p(key, v)?
            }
            "schedule.teacher_momentum_end" => self.schedule.teacher_momentum_end = p(key, v)?,
            "schedule.tau_t_start" => self.schedule.tau_t_start = p(key, v)?,
            "schedule.tau_t_end" => self.schedule.tau_t_end = p(key, v)?,
            "schedule.tau_t_warmup_epochs" => self.schedule.tau_t_warmup_epochs = p(key, v)?,

            "optim.beta1" => self.optim.beta1 = p(key, v)?,
            "optim.beta2" => self.optim.beta2 = p(key, v)?,
            "optim.eps" => self.optim.eps = p(key, v)?,
            "optim.weight_decay" => self.optim.weight_decay = p(key, v)?,

            other => return Err(Error::Config(format!("unknown config key '{other}'"))),
        }
        Ok(())
    }

    /// Parse a config file (lines of `key=value`, `#` comments). A
    /// `profile=` line is applied before all other assignments.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_str_content(&text)
    }

    pub fn from_str_content(text: &str) -> Result<Self> {
        let mut cfg = Self::desk();
        let mut assignments = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key=value", lineno + 1))
            })?;
            assignments.push((key.trim().to_string(), value.to_string()));
        }
        if let Some((_, profile)) = assignments.iter().find(|(k, _)| k == "profile") {
            cfg.set("profile", profile)?;
        }
        for (key, value) in &assignments {
            if key != "profile" {
                cfg.set(key, value)?;
            }
        }
        Ok(cfg)
    }

    /// Apply `key=value` override strings (winning over file values).
    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<()> {
        for item in overrides {
            let (key, value) = item.split_once('=').ok_or_else(|| {
                Error::Config(format!("override '{item}': expected key=value"))
            })?;
            self.set(key.trim(), value)?;
        }
        Ok(())
    }

    /// Full effective configuration as sorted `key=value` lines.
    pub fn echo(&self) -> String {
        let shapes = self
            .scene
            .shapes
            .iter()
            .map(|s| match s {
                ShapeKind::Disk => "disk",
                ShapeKind::Rectangle => "rectangle",
                ShapeKind::Triangle => "triangle",
            })
            .collect::<Vec<_>>()
            .join(",");
        let mut lines = vec![
            format!("aug.crop_scale_max={}", self.aug.crop_scale_max),
            format!("aug.crop_scale_min={}", self.aug.crop_scale_min),
            format!("aug.hflip_prob={}", self.aug.hflip_prob),
            format!("aug.output_size={}", self.aug.output_size),
            format!(
                "aug.overlap_fallback_retries={}",
                self.aug.overlap_fallback_retries
            ),
            format!("aug.patch_size={}", self.aug.patch_size),
            format!("batch_size={}", self.batch_size),
            format!("data.train_count={}", self.train_count),
            format!("data.train_dir={}", self.train_dir),
            format!("data.val_count={}", self.val_count),
            format!("data.val_dir={}", self.val_dir),
            format!("deterministic_mode={}", self.deterministic_mode),
            format!("distill.center_momentum={}", self.center_momentum),
            format!("distill.lambda_global={}", self.lambda_global),
            format!("distill.lambda_oc={}", self.lambda_oc),
            format!("distill.tau={}", self.tau),
            format!("encoder.depth={}", self.encoder.depth),
            format!("encoder.embed_dim={}", self.encoder.embed_dim),
            format!("encoder.image_size={}", self.encoder.image_size),
            format!("encoder.mlp_ratio={}", self.encoder.mlp_ratio),
            format!("encoder.num_heads={}", self.encoder.num_heads),
            format!("encoder.patch_size={}", self.encoder.patch_size),
            format!("encoder.use_pos_embed={}", self.encoder.use_pos_embed),
            format!("epochs={}", self.schedule.total_epochs),
            format!("eval_every={}", self.eval_every),
            format!("filter_k={}", self.filter.k),
            format!(
                "filter_metric={}",
                match self.filter.metric {
                    FilterMetric::Cosine => "cosine",
                    FilterMetric::Euclidean => "euclidean",
                }
            ),
            format!("head.bottleneck={}", self.head.bottleneck),
            format!("head.hidden={}", self.head.hidden),
            format!("head.layers={}", self.head.layers),
            format!("head.out_dim={}", self.head.out_dim),
            format!("head.separate_global={}", self.separate_global_head),
            format!("num_slots_eval={}", self.num_slots_eval),
            format!("optim.beta1={}", self.optim.beta1),
            format!("optim.beta2={}", self.optim.beta2),
            format!("optim.eps={}", self.optim.eps),
            format!("optim.weight_decay={}", self.optim.weight_decay),
            format!("photo.blur_prob_view1={}", self.photo.blur_prob[0]),
            format!("photo.blur_prob_view2={}", self.photo.blur_prob[1]),
            format!("photo.blur_sigma_max={}", self.photo.blur_sigma_max),
            format!("photo.blur_sigma_min={}", self.photo.blur_sigma_min),
            format!(
                "photo.brightness_strength={}",
                self.photo.brightness_strength
            ),
            format!("photo.contrast_strength={}", self.photo.contrast_strength),
            format!("photo.jitter_prob={}", self.photo.jitter_prob),
            format!(
                "photo.saturation_strength={}",
                self.photo.saturation_strength
            ),
            format!("photo.solarize_prob_view1={}", self.photo.solarize_prob[0]),
            format!("photo.solarize_prob_view2={}", self.photo.solarize_prob[1]),
            format!("photo.solarize_threshold={}", self.photo.solarize_threshold),
            format!(
                "precision={}",
                match self.precision {
                    Precision::F32 => "f32",
                    Precision::F64 => "f64",
                }
            ),
            format!("scene.allow_occlusion={}", self.scene.allow_occlusion),
            format!(
                "scene.background={}",
                match self.scene.background {
                    Background::Noise => "noise",
                    Background::Gradient => "gradient",
                }
            ),
            format!("scene.image_size={}", self.scene.image_size),
            format!("scene.num_objects_max={}", self.scene.num_objects_max),
            format!("scene.num_objects_min={}", self.scene.num_objects_min),
            format!("scene.palette_size={}", self.scene.palette_size),
            format!("scene.shapes={shapes}"),
            format!("schedule.base_lr={}", self.schedule.base_lr),
            format!("schedule.lr_warmup_epochs={}", self.schedule.lr_warmup_epochs),
            format!(
                "schedule.tau_t_end={}",
                self.schedule.tau_t_end
            ),
            format!("schedule.tau_t_start={}", self.schedule.tau_t_start),
            format!(
                "schedule.tau_t_warmup_epochs={}",
                self.schedule.tau_t_warmup_epochs
            ),
            format!(
                "schedule.teacher_momentum_end={}",
                self.schedule.teacher_momentum_end
            ),
            format!(
                "schedule.teacher_momentum_start={}",
                self.schedule.teacher_momentum_start
            ),
            format!("seed={}", self.seed),
            format!("slots.decoder_hidden={}", self.slots.decoder_hidden),
            format!("slots.decoder_layers={}", self.slots.decoder_layers),
            format!("slots.mlp_hidden={}", self.slots.mlp_hidden),
            format!("slots.num_layers={}", self.slots.num_layers),
            format!("slots.num_slots={}", self.slots.num_slots),
            format!("slots.slot_dim={}", self.slots.slot_dim),
            format!("sharpening_cross_view={}", self.sharpening_cross_view),
            format!("sharpening_epochs={}", self.schedule.sharpening_epochs),
            format!(
                "supervision_strategy={}",
                match self.filter.strategy {
                    SupervisionStrategy::CrossViewFilter => "cross_view_filter",
                    SupervisionStrategy::AllIncreasingWeight => "all_increasing_weight",
                    SupervisionStrategy::RandomDropDecay => "random_drop_decay",
                }
            ),
            format!("strategy_end={}", self.filter.strategy_end),
            format!("strategy_start={}", self.filter.strategy_start),
        ];
        lines.sort();
        lines.join("\n") + "\n"
    }
}
