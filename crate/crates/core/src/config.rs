//! Flat `key = value` run configuration.
//!
//! One setting per line, `#` starts a comment, unknown keys are rejected.
//! Lists are comma-separated, optionally wrapped in brackets.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::channel::ChannelConfig;
use crate::diffusion::{LossConfig, NoiseSchedule, SamplerConfig, LAMBDA_KL};
use crate::error::{Error, Result};
use crate::fds::FdsConfig;
use crate::unet::ModelConfig;

/// Linear schedule end for 200 steps from `5e-4` that reaches the same final
/// cumulative product as 1000 steps from `1e-4` to `0.02`.
pub const DESK_BETA_END: f64 = 0.097_330_292_485_383_33;

/// Channel conditions drawn during noisy training.
pub const PSNR_POOL: [f64; 7] = [1.0, 5.0, 10.0, 15.0, 20.0, 30.0, 100.0];

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub dir: Option<PathBuf>,
    pub autogen: bool,
    pub image_size: usize,
    pub num_classes: usize,
    pub train_size: usize,
    pub test_size: usize,
    pub min_shapes: usize,
    pub max_shapes: usize,
    pub texture: f64,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            dir: None,
            autogen: true,
            image_size: 32,
            num_classes: 6,
            train_size: 512,
            test_size: 16,
            min_shapes: 1,
            max_shapes: 4,
            texture: 0.05,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub ema_decay: f64,
    pub psnr_pool: Vec<f64>,
    pub psnr_weights: Vec<f64>,
    pub cond_drop_prob: f64,
    pub grad_clip: f64,
    pub seed: u64,
    pub loss: LossConfig,
    /// Apply the receiver denoiser to training conditions as well.
    pub fds_in_training: bool,
    pub checkpoint_every: usize,
    /// Record wall-clock milliseconds; off keeps metrics byte-reproducible.
    pub log_wall_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 5000,
            batch_size: 8,
            learning_rate: 1e-4,
            weight_decay: 0.0,
            ema_decay: 0.9999,
            psnr_pool: PSNR_POOL.to_vec(),
            psnr_weights: vec![1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 4.0],
            cond_drop_prob: 0.2,
            grad_clip: 1.0,
            seed: 0,
            loss: LossConfig { lambda_kl: LAMBDA_KL, squared: true },
            fds_in_training: false,
            checkpoint_every: 0,
            log_wall_time: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSettings {
    pub out_dir: PathBuf,
    pub psnr_sweep: Vec<f64>,
    pub samples_per_psnr: usize,
    pub ablation_psnr: f64,
    pub seed: u64,
}

impl Default for RunSettings {
    fn default() -> Self {
        RunSettings {
            out_dir: PathBuf::from("out"),
            psnr_sweep: PSNR_POOL.to_vec(),
            samples_per_psnr: 4,
            ablation_psnr: 10.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub run: RunSettings,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub diffusion_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub train: TrainConfig,
    pub channel_power: f64,
    pub fds: FdsConfig,
    pub sample: SamplerConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            run: RunSettings::default(),
            data: DataConfig::default(),
            model: ModelConfig::default(),
            diffusion_steps: 200,
            beta_start: 5e-4,
            beta_end: DESK_BETA_END,
            train: TrainConfig::default(),
            channel_power: 1.0,
            fds: FdsConfig::default(),
            sample: SamplerConfig { guidance_scale: 2.0, seed: 0, steps: 0, clip_denoised: true },
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config(format!("{key}: cannot parse `{v}`")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected a boolean, got `{v}`"))),
    }
}

fn parse_list<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    let inner = v.trim().trim_start_matches('[').trim_end_matches(']');
    if inner.trim().is_empty() {
        return Ok(Vec::new());
    }
    inner.split(',').map(|s| parse(key, s.trim())).collect()
}

fn list<T: std::fmt::Display>(v: &[T]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Apply one setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "run.out_dir" => self.run.out_dir = PathBuf::from(v),
            "run.psnr_sweep" => self.run.psnr_sweep = parse_list(key, v)?,
            "run.samples_per_psnr" => self.run.samples_per_psnr = parse(key, v)?,
            "run.ablation_psnr" => self.run.ablation_psnr = parse(key, v)?,
            "run.seed" => self.run.seed = parse(key, v)?,
            "data.dir" => self.data.dir = if v.is_empty() { None } else { Some(PathBuf::from(v)) },
            "data.autogen" => self.data.autogen = parse_bool(key, v)?,
            "data.image_size" => self.data.image_size = parse(key, v)?,
            "data.num_classes" => self.data.num_classes = parse(key, v)?,
            "data.train_size" => self.data.train_size = parse(key, v)?,
            "data.test_size" => self.data.test_size = parse(key, v)?,
            "data.min_shapes" => self.data.min_shapes = parse(key, v)?,
            "data.max_shapes" => self.data.max_shapes = parse(key, v)?,
            "data.texture" => self.data.texture = parse(key, v)?,
            "data.seed" => self.data.seed = parse(key, v)?,
            "model.base_channels" => self.model.base_channels = parse(key, v)?,
            "model.channel_mult" => self.model.channel_mult = parse_list(key, v)?,
            "model.num_res_blocks" => self.model.num_res_blocks = parse(key, v)?,
            "model.attention_resolutions" => self.model.attention_resolutions = parse_list(key, v)?,
            "model.head_channels" => self.model.head_channels = parse(key, v)?,
            "model.groups" => self.model.groups = parse(key, v)?,
            "model.spade_hidden" => self.model.spade_hidden = parse(key, v)?,
            "model.attention_scale" => self.model.attention_scale = parse(key, v)?,
            "model.learn_attention_scale" => self.model.learn_attention_scale = parse_bool(key, v)?,
            "diffusion.T" => self.diffusion_steps = parse(key, v)?,
            "diffusion.beta_start" => self.beta_start = parse(key, v)?,
            "diffusion.beta_end" => self.beta_end = parse(key, v)?,
            "train.steps" => self.train.steps = parse(key, v)?,
            "train.batch_size" => self.train.batch_size = parse(key, v)?,
            "train.learning_rate" => self.train.learning_rate = parse(key, v)?,
            "train.weight_decay" => self.train.weight_decay = parse(key, v)?,
            "train.ema_decay" => self.train.ema_decay = parse(key, v)?,
            "train.psnr_pool" => self.train.psnr_pool = parse_list(key, v)?,
            "train.psnr_weights" => self.train.psnr_weights = parse_list(key, v)?,
            "train.cond_drop_prob" => self.train.cond_drop_prob = parse(key, v)?,
            "train.grad_clip" => self.train.grad_clip = parse(key, v)?,
            "train.seed" => self.train.seed = parse(key, v)?,
            "train.lambda_kl" => self.train.loss.lambda_kl = parse(key, v)?,
            "train.squared_loss" => self.train.loss.squared = parse_bool(key, v)?,
            "train.fds_in_training" => self.train.fds_in_training = parse_bool(key, v)?,
            "train.checkpoint_every" => self.train.checkpoint_every = parse(key, v)?,
            "train.log_wall_time" => self.train.log_wall_time = parse_bool(key, v)?,
            "channel.power" => self.channel_power = parse(key, v)?,
            "fds.avg_kernel" => self.fds.avg_kernel = parse(key, v)?,
            "fds.max_kernel" => self.fds.max_kernel = parse(key, v)?,
            "fds.threshold" => self.fds.threshold = parse(key, v)?,
            "fds.enabled" => self.fds.enabled = parse_bool(key, v)?,
            "fds.enforce_partition" => self.fds.enforce_partition = parse_bool(key, v)?,
            "sample.guidance_scale" => self.sample.guidance_scale = parse(key, v)?,
            "sample.seed" => self.sample.seed = parse(key, v)?,
            "sample.steps" => self.sample.steps = parse(key, v)?,
            "sample.clip_denoised" => self.sample.clip_denoised = parse_bool(key, v)?,
            _ => return Err(Error::Config(format!("unknown configuration key `{key}`"))),
        }
        self.sync();
        Ok(())
    }

    /// Settings the model derives from other sections.
    fn sync(&mut self) {
        self.model.image_size = self.data.image_size;
        self.model.cond_channels = self.data.num_classes;
        self.model.timesteps = self.diffusion_steps;
    }

    /// Parse config text on top of the defaults.
    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got `{line}`", no + 1)))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_str(&text)
    }

    /// Apply `key=value` overrides in order.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let o = o.as_ref();
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{o}` is not key=value")))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        self.model.validate()?;
        self.fds.validate()?;
        self.schedule()?;
        let t = &self.train;
        if t.batch_size == 0 {
            return bad("train.batch_size must be positive".into());
        }
        if !(t.learning_rate > 0.0) || t.weight_decay < 0.0 {
            return bad("train.learning_rate must be positive and train.weight_decay non-negative".into());
        }
        if !(t.ema_decay > 0.0 && t.ema_decay < 1.0) {
            return bad(format!("train.ema_decay must lie in (0, 1), got {}", t.ema_decay));
        }
        if t.psnr_pool.is_empty() || t.psnr_pool.len() != t.psnr_weights.len() {
            return bad("train.psnr_pool and train.psnr_weights must be non-empty and equally long".into());
        }
        if t.psnr_weights.iter().any(|w| !(*w > 0.0)) {
            return bad("train.psnr_weights must be positive".into());
        }
        if !(0.0..=1.0).contains(&t.cond_drop_prob) {
            return bad("train.cond_drop_prob must lie in [0, 1]".into());
        }
        if !(t.grad_clip > 0.0) || t.loss.lambda_kl < 0.0 {
            return bad("train.grad_clip must be positive and train.lambda_kl non-negative".into());
        }
        if !(self.channel_power > 0.0) {
            return bad("channel.power must be positive".into());
        }
        if self.sample.guidance_scale < 0.0 || !self.sample.guidance_scale.is_finite() {
            return bad("sample.guidance_scale must be a finite value >= 0".into());
        }
        if self.sample.steps > self.diffusion_steps {
            return bad(format!("sample.steps must not exceed diffusion.T = {}", self.diffusion_steps));
        }
        let d = &self.data;
        if d.num_classes < 2 || d.num_classes > crate::data::MAX_CLASSES {
            return bad(format!("data.num_classes must lie in [2, {}]", crate::data::MAX_CLASSES));
        }
        if d.min_shapes > d.max_shapes || !(0.0..1.0).contains(&d.texture) {
            return bad("data.min_shapes must not exceed data.max_shapes and data.texture must lie in [0, 1)".into());
        }
        if !d.autogen && d.dir.is_none() {
            return bad("data.dir is required when data.autogen is false".into());
        }
        Ok(())
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.diffusion_steps, self.beta_start, self.beta_end)
    }

    pub fn model_config(&self) -> ModelConfig {
        let mut m = self.model.clone();
        m.image_size = self.data.image_size;
        m.cond_channels = self.data.num_classes;
        m.timesteps = self.diffusion_steps;
        m
    }

    pub fn channel(&self, psnr_db: f64, seed: u64) -> ChannelConfig {
        ChannelConfig::new(psnr_db, self.channel_power, seed)
    }

    /// Every key with its resolved value, sorted, in the input syntax.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let d = &self.data;
        let t = &self.train;
        let mut entries: Vec<(&str, String)> = vec![
            ("run.out_dir", self.run.out_dir.display().to_string()),
            ("run.psnr_sweep", list(&self.run.psnr_sweep)),
            ("run.samples_per_psnr", self.run.samples_per_psnr.to_string()),
            ("run.ablation_psnr", self.run.ablation_psnr.to_string()),
            ("run.seed", self.run.seed.to_string()),
            ("data.dir", d.dir.as_ref().map(|p| p.display().to_string()).unwrap_or_default()),
            ("data.autogen", d.autogen.to_string()),
            ("data.image_size", d.image_size.to_string()),
            ("data.num_classes", d.num_classes.to_string()),
            ("data.train_size", d.train_size.to_string()),
            ("data.test_size", d.test_size.to_string()),
            ("data.min_shapes", d.min_shapes.to_string()),
            ("data.max_shapes", d.max_shapes.to_string()),
            ("data.texture", d.texture.to_string()),
            ("data.seed", d.seed.to_string()),
            ("model.base_channels", m.base_channels.to_string()),
            ("model.channel_mult", list(&m.channel_mult)),
            ("model.num_res_blocks", m.num_res_blocks.to_string()),
            ("model.attention_resolutions", list(&m.attention_resolutions)),
            ("model.head_channels", m.head_channels.to_string()),
            ("model.groups", m.groups.to_string()),
            ("model.spade_hidden", m.spade_hidden.to_string()),
            ("model.attention_scale", m.attention_scale.to_string()),
            ("model.learn_attention_scale", m.learn_attention_scale.to_string()),
            ("diffusion.T", self.diffusion_steps.to_string()),
            ("diffusion.beta_start", self.beta_start.to_string()),
            ("diffusion.beta_end", self.beta_end.to_string()),
            ("train.steps", t.steps.to_string()),
            ("train.batch_size", t.batch_size.to_string()),
            ("train.learning_rate", t.learning_rate.to_string()),
            ("train.weight_decay", t.weight_decay.to_string()),
            ("train.ema_decay", t.ema_decay.to_string()),
            ("train.psnr_pool", list(&t.psnr_pool)),
            ("train.psnr_weights", list(&t.psnr_weights)),
            ("train.cond_drop_prob", t.cond_drop_prob.to_string()),
            ("train.grad_clip", t.grad_clip.to_string()),
            ("train.seed", t.seed.to_string()),
            ("train.lambda_kl", t.loss.lambda_kl.to_string()),
            ("train.squared_loss", t.loss.squared.to_string()),
            ("train.fds_in_training", t.fds_in_training.to_string()),
            ("train.checkpoint_every", t.checkpoint_every.to_string()),
            ("train.log_wall_time", t.log_wall_time.to_string()),
            ("channel.power", self.channel_power.to_string()),
            ("fds.avg_kernel", self.fds.avg_kernel.to_string()),
            ("fds.max_kernel", self.fds.max_kernel.to_string()),
            ("fds.threshold", self.fds.threshold.to_string()),
            ("fds.enabled", self.fds.enabled.to_string()),
            ("fds.enforce_partition", self.fds.enforce_partition.to_string()),
            ("sample.guidance_scale", self.sample.guidance_scale.to_string()),
            ("sample.seed", self.sample.seed.to_string()),
            ("sample.steps", self.sample.steps.to_string()),
            ("sample.clip_denoised", self.sample.clip_denoised.to_string()),
        ];
        entries.sort_by(|a, b| a.0.cmp(b.0));
        let mut out = String::new();
        for (k, v) in entries {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }
}
