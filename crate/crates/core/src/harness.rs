//! Run configuration, the ablation grid runner, external metric hooks, and
//! plot rendering.
//!
//! Configs are flat `key = value` text. Unknown keys are rejected, every
//! run can emit its resolved config, and in ablate mode any sweepable key
//! may carry a comma list (`axis = v1,v2,v3`) to become a grid axis.

use std::collections::BTreeMap;
use std::io::Read;
use std::process::{Command, Stdio};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use crate::adapter::{ActivationWindow, LossWeights};
use crate::bilateral::{BilateralConfig, Boundary, FilterDirection};
use crate::denoiser::{ToyDenoiser, ToyDenoiserConfig, TrainScope};
use crate::error::{CoreError, Result};
use crate::grid::{Grid, Scalar};
use crate::mat::Mat;
use crate::metrics::{clip_metrics, MetricReport};
use crate::optim::{OptimConfig, OptimizerKind};
use crate::pipeline::{synthetic_clip, Codec, EditConfig, ShapeKind, SyntheticClipSpec};
use crate::schedule::{build_schedule, AnalyticGaussianDenoiser, NoiseSchedule};
use crate::tokens::{
    assemble, init_shared, pool_adjacent, project_unshared, GuidedMode, VisionFeatures,
};
use crate::train::{train_driver, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    TrainAdapter,
    Invert,
    Sample,
    Edit,
    Metrics,
    Ablate,
}

impl Mode {
    pub fn as_str(&self) -> &'static str {
        match self {
            Mode::TrainAdapter => "train-adapter",
            Mode::Invert => "invert",
            Mode::Sample => "sample",
            Mode::Edit => "edit",
            Mode::Metrics => "metrics",
            Mode::Ablate => "ablate",
        }
    }
}

/// Which denoiser backs a run: the closed-form oracle or the trainable toy
/// network.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Backend {
    Oracle,
    Toy,
}

/// One sweep axis: the key it overrides and the raw values, re-parsed per
/// cell so every value gets the same typed validation as a scalar config.
#[derive(Clone, Debug, PartialEq)]
pub struct Axis {
    pub key: String,
    pub values: Vec<String>,
}

/// Fully resolved settings for one run. Field names double as config keys.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub mode: Mode,
    pub seeds: Vec<u64>,
    pub jobs: usize,
    pub out_dir: String,
    pub backend: Backend,
    // Synthetic clip.
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub shape: ShapeKind,
    pub start_x: f64,
    pub start_y: f64,
    pub velocity_x: f64,
    pub velocity_y: f64,
    pub half_size: f64,
    pub texture_noise: f64,
    pub background: f64,
    pub foreground: f64,
    // Codec, inversion, and filtering.
    pub codec: Codec,
    pub invert_steps: usize,
    pub kernel_size: usize,
    pub sigma_spatial: f64,
    pub sigma_intensity: f64,
    pub boundary: Boundary,
    pub filter_direction: FilterDirection,
    // Model.
    pub d_feat: usize,
    pub d_cond: usize,
    pub lora_rank: usize,
    pub t_total: usize,
    pub adapter_scale: f64,
    pub merge_ratio: f64,
    // Training.
    pub steps: usize,
    pub lr: f64,
    pub warmup_steps: usize,
    pub accumulation: usize,
    pub optimizer: OptimizerKind,
    pub weight_decay: f64,
    pub frames_per_step: usize,
    pub scope: TrainScope,
    pub lambda_temporal: f64,
    pub lambda_diffusion: f64,
    pub train_window_lo: f64,
    pub train_window_hi: f64,
    pub infer_window_lo: f64,
    pub infer_window_hi: f64,
    // Conditioning tokens.
    pub n_share: usize,
    pub toy_text_len: usize,
    pub n_vision: usize,
    pub guided_mode: GuidedMode,
    pub unshare_boost: f64,
    pub drop_shared: bool,
    pub drop_unshared: bool,
    // External metric hooks, `hook_<name> = command`.
    pub hooks: BTreeMap<String, String>,
    pub axes: Vec<Axis>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Edit,
            seeds: vec![0],
            jobs: 1,
            out_dir: String::new(),
            backend: Backend::Oracle,
            frames: 8,
            height: 32,
            width: 32,
            shape: ShapeKind::Square,
            start_x: 9.0,
            start_y: 9.0,
            velocity_x: 1.5,
            velocity_y: 0.75,
            half_size: 5.0,
            texture_noise: 0.02,
            background: 0.1,
            foreground: 0.9,
            codec: Codec::Pool2x,
            invert_steps: 5,
            kernel_size: 3,
            sigma_spatial: 1.0,
            sigma_intensity: 0.1,
            boundary: Boundary::Reflect,
            filter_direction: FilterDirection::Roundtrip,
            d_feat: 16,
            d_cond: 0,
            lora_rank: crate::adapter::DEFAULT_RANK,
            t_total: 1000,
            adapter_scale: 1.0,
            merge_ratio: 0.0,
            steps: 2000,
            lr: crate::optim::DEFAULT_LR,
            warmup_steps: crate::optim::DEFAULT_WARMUP_STEPS,
            accumulation: crate::optim::DEFAULT_ACCUMULATION,
            optimizer: OptimizerKind::AdamW,
            weight_decay: 0.0,
            frames_per_step: 4,
            scope: TrainScope::AdapterOnly,
            lambda_temporal: 1.0,
            lambda_diffusion: 0.01,
            train_window_lo: 0.5,
            train_window_hi: 1.0,
            infer_window_lo: 0.9,
            infer_window_hi: 1.0,
            n_share: 18,
            toy_text_len: 8,
            n_vision: 50,
            guided_mode: GuidedMode::Standard,
            unshare_boost: 1.0,
            drop_shared: false,
            drop_unshared: false,
            hooks: BTreeMap::new(),
            axes: Vec::new(),
        }
    }
}

fn bad_value(key: &str, value: &str, want: &str) -> CoreError {
    CoreError::Config(format!("key {key}: cannot parse {value:?} as {want}"))
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str, want: &str) -> Result<T> {
    value.trim().parse::<T>().map_err(|_| bad_value(key, value, want))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        other => Err(bad_value(key, other, "bool")),
    }
}

impl RunConfig {
    /// Assign one scalar `key = value`. Shared by the file parser and the
    /// ablation cell expansion.
    pub fn assign(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "mode" => {
                self.mode = match v {
                    "train-adapter" => Mode::TrainAdapter,
                    "invert" => Mode::Invert,
                    "sample" => Mode::Sample,
                    "edit" => Mode::Edit,
                    "metrics" => Mode::Metrics,
                    "ablate" => Mode::Ablate,
                    other => return Err(bad_value(key, other, "mode")),
                }
            }
            "seeds" => {
                let seeds: Result<Vec<u64>> =
                    v.split(',').map(|s| parse_num(key, s, "u64")).collect();
                self.seeds = seeds?;
                if self.seeds.is_empty() {
                    return Err(CoreError::Config("seeds must not be empty".into()));
                }
            }
            "jobs" => self.jobs = parse_num(key, v, "usize")?,
            "out_dir" => self.out_dir = v.to_string(),
            "backend" => {
                self.backend = match v {
                    "oracle" => Backend::Oracle,
                    "toy" => Backend::Toy,
                    other => return Err(bad_value(key, other, "backend")),
                }
            }
            "frames" => self.frames = parse_num(key, v, "usize")?,
            "height" => self.height = parse_num(key, v, "usize")?,
            "width" => self.width = parse_num(key, v, "usize")?,
            "shape" => {
                self.shape = match v {
                    "square" => ShapeKind::Square,
                    "circle" => ShapeKind::Circle,
                    other => return Err(bad_value(key, other, "shape")),
                }
            }
            "start_x" => self.start_x = parse_num(key, v, "f64")?,
            "start_y" => self.start_y = parse_num(key, v, "f64")?,
            "velocity_x" => self.velocity_x = parse_num(key, v, "f64")?,
            "velocity_y" => self.velocity_y = parse_num(key, v, "f64")?,
            "half_size" => self.half_size = parse_num(key, v, "f64")?,
            "texture_noise" => self.texture_noise = parse_num(key, v, "f64")?,
            "background" => self.background = parse_num(key, v, "f64")?,
            "foreground" => self.foreground = parse_num(key, v, "f64")?,
            "codec" => {
                self.codec = match v {
                    "identity" => Codec::Identity,
                    "pool2x" => Codec::Pool2x,
                    other => return Err(bad_value(key, other, "codec")),
                }
            }
            "invert_steps" => self.invert_steps = parse_num(key, v, "usize")?,
            "kernel_size" => self.kernel_size = parse_num(key, v, "usize")?,
            "sigma_spatial" => self.sigma_spatial = parse_num(key, v, "f64")?,
            "sigma_intensity" => self.sigma_intensity = parse_num(key, v, "f64")?,
            "boundary" => {
                self.boundary = match v {
                    "reflect" => Boundary::Reflect,
                    "clamp" => Boundary::Clamp,
                    other => return Err(bad_value(key, other, "boundary")),
                }
            }
            "filter_direction" => {
                self.filter_direction = match v {
                    "paper" => FilterDirection::Paper,
                    "roundtrip" => FilterDirection::Roundtrip,
                    other => return Err(bad_value(key, other, "filter direction")),
                }
            }
            "d_feat" => self.d_feat = parse_num(key, v, "usize")?,
            "d_cond" => self.d_cond = parse_num(key, v, "usize")?,
            "lora_rank" => self.lora_rank = parse_num(key, v, "usize")?,
            "t_total" => self.t_total = parse_num(key, v, "usize")?,
            "adapter_scale" => self.adapter_scale = parse_num(key, v, "f64")?,
            "merge_ratio" => self.merge_ratio = parse_num(key, v, "f64")?,
            "steps" => self.steps = parse_num(key, v, "usize")?,
            "lr" => self.lr = parse_num(key, v, "f64")?,
            "warmup_steps" => self.warmup_steps = parse_num(key, v, "usize")?,
            "accumulation" => self.accumulation = parse_num(key, v, "usize")?,
            "optimizer" => {
                self.optimizer = match v {
                    "sgd" => OptimizerKind::Sgd,
                    "adamw" => OptimizerKind::AdamW,
                    other => return Err(bad_value(key, other, "optimizer")),
                }
            }
            "weight_decay" => self.weight_decay = parse_num(key, v, "f64")?,
            "frames_per_step" => self.frames_per_step = parse_num(key, v, "usize")?,
            "scope" => {
                self.scope = match v {
                    "adapter-only" => TrainScope::AdapterOnly,
                    "full" => TrainScope::Full,
                    other => return Err(bad_value(key, other, "train scope")),
                }
            }
            "lambda_temporal" => self.lambda_temporal = parse_num(key, v, "f64")?,
            "lambda_diffusion" => self.lambda_diffusion = parse_num(key, v, "f64")?,
            "train_window_lo" => self.train_window_lo = parse_num(key, v, "f64")?,
            "train_window_hi" => self.train_window_hi = parse_num(key, v, "f64")?,
            "infer_window_lo" => self.infer_window_lo = parse_num(key, v, "f64")?,
            "infer_window_hi" => self.infer_window_hi = parse_num(key, v, "f64")?,
            "n_share" => self.n_share = parse_num(key, v, "usize")?,
            "toy_text_len" => self.toy_text_len = parse_num(key, v, "usize")?,
            "n_vision" => self.n_vision = parse_num(key, v, "usize")?,
            "guided_mode" => {
                self.guided_mode = match v {
                    "paper" => GuidedMode::Paper,
                    "standard" => GuidedMode::Standard,
                    other => return Err(bad_value(key, other, "guided mode")),
                }
            }
            "unshare_boost" => self.unshare_boost = parse_num(key, v, "f64")?,
            "drop_shared" => self.drop_shared = parse_bool(key, v)?,
            "drop_unshared" => self.drop_unshared = parse_bool(key, v)?,
            _ => {
                if let Some(name) = key.strip_prefix("hook_") {
                    if name.is_empty() {
                        return Err(CoreError::Config("hook key needs a name".into()));
                    }
                    self.hooks.insert(name.to_string(), v.to_string());
                } else {
                    return Err(CoreError::Config(format!("unknown key {key}")));
                }
            }
        }
        Ok(())
    }

    /// Parse flat `key = value` text. Comma lists are only legal for
    /// `seeds`, hooks, and (in ablate mode) sweepable keys, which become
    /// grid axes.
    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        let mut seen = std::collections::BTreeSet::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                CoreError::Config(format!("line {}: expected key = value", lineno + 1))
            })?;
            let key = key.trim().to_string();
            if !seen.insert(key.clone()) {
                return Err(CoreError::Config(format!("duplicate key {key}")));
            }
            pairs.push((key, value.trim().to_string()));
        }

        let mut cfg = RunConfig::default();
        // Mode first; list handling depends on it.
        if let Some((_, v)) = pairs.iter().find(|(k, _)| k == "mode") {
            cfg.assign("mode", v)?;
        }
        for (key, value) in &pairs {
            if key == "mode" {
                continue;
            }
            let is_list = value.contains(',');
            let listable = key == "seeds" || key.starts_with("hook_");
            if is_list && !listable {
                if cfg.mode != Mode::Ablate {
                    return Err(CoreError::Config(format!(
                        "key {key}: value lists are only valid in ablate mode"
                    )));
                }
                let values: Vec<String> =
                    value.split(',').map(|s| s.trim().to_string()).collect();
                if values.iter().any(|s| s.is_empty()) {
                    return Err(CoreError::Config(format!("key {key}: empty value in list")));
                }
                // Validate each value through the scalar path.
                let mut probe = cfg.clone();
                for v in &values {
                    probe.assign(key, v)?;
                }
                cfg.axes.push(Axis { key: key.clone(), values });
            } else {
                cfg.assign(key, value)?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.jobs == 0 {
            return Err(CoreError::Config("jobs must be at least 1".into()));
        }
        if self.frames < 2 {
            return Err(CoreError::Config("clips need at least 2 frames".into()));
        }
        if self.height == 0 || self.width == 0 || self.height % 2 != 0 || self.width % 2 != 0 {
            return Err(CoreError::Config("frame dims must be positive and even".into()));
        }
        if self.kernel_size % 2 == 0 {
            return Err(CoreError::Config("kernel size must be odd".into()));
        }
        for (name, v) in [
            ("train_window_lo", self.train_window_lo),
            ("train_window_hi", self.train_window_hi),
            ("infer_window_lo", self.infer_window_lo),
            ("infer_window_hi", self.infer_window_hi),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(CoreError::Config(format!("{name} must be in [0, 1], got {v}")));
            }
        }
        Ok(())
    }

    /// The inference window must sit inside the training window; grid cells
    /// violating this are skipped rather than run.
    pub fn windows_feasible(&self) -> bool {
        self.train_window_lo <= self.infer_window_lo
            && self.infer_window_hi <= self.train_window_hi
    }

    /// Canonical `key = value` text; reparsing reproduces the config. Axis
    /// keys are emitted last, in declaration order, because that order
    /// defines the sweep's cell layout.
    pub fn to_text(&self) -> String {
        let is_axis = |key: &str| self.axes.iter().any(|a| a.key == key);
        let mut out = String::new();
        let mut push = |key: &str, value: String| {
            if !is_axis(key) {
                out.push_str(&format!("{key} = {value}\n"));
            }
        };
        push("mode", self.mode.as_str().to_string());
        push(
            "seeds",
            self.seeds.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(","),
        );
        push("jobs", self.jobs.to_string());
        if !self.out_dir.is_empty() {
            push("out_dir", self.out_dir.clone());
        }
        push("backend", if self.backend == Backend::Oracle { "oracle" } else { "toy" }.into());
        push("frames", self.frames.to_string());
        push("height", self.height.to_string());
        push("width", self.width.to_string());
        push("shape", if self.shape == ShapeKind::Square { "square" } else { "circle" }.into());
        push("start_x", self.start_x.to_string());
        push("start_y", self.start_y.to_string());
        push("velocity_x", self.velocity_x.to_string());
        push("velocity_y", self.velocity_y.to_string());
        push("half_size", self.half_size.to_string());
        push("texture_noise", self.texture_noise.to_string());
        push("background", self.background.to_string());
        push("foreground", self.foreground.to_string());
        push("codec", if self.codec == Codec::Identity { "identity" } else { "pool2x" }.into());
        push("invert_steps", self.invert_steps.to_string());
        push("kernel_size", self.kernel_size.to_string());
        push("sigma_spatial", self.sigma_spatial.to_string());
        push("sigma_intensity", self.sigma_intensity.to_string());
        push(
            "boundary",
            if self.boundary == Boundary::Reflect { "reflect" } else { "clamp" }.into(),
        );
        push(
            "filter_direction",
            if self.filter_direction == FilterDirection::Paper { "paper" } else { "roundtrip" }
                .into(),
        );
        push("d_feat", self.d_feat.to_string());
        push("d_cond", self.d_cond.to_string());
        push("lora_rank", self.lora_rank.to_string());
        push("t_total", self.t_total.to_string());
        push("adapter_scale", self.adapter_scale.to_string());
        push("merge_ratio", self.merge_ratio.to_string());
        push("steps", self.steps.to_string());
        push("lr", self.lr.to_string());
        push("warmup_steps", self.warmup_steps.to_string());
        push("accumulation", self.accumulation.to_string());
        push(
            "optimizer",
            if self.optimizer == OptimizerKind::Sgd { "sgd" } else { "adamw" }.into(),
        );
        push("weight_decay", self.weight_decay.to_string());
        push("frames_per_step", self.frames_per_step.to_string());
        push(
            "scope",
            if self.scope == TrainScope::Full { "full" } else { "adapter-only" }.into(),
        );
        push("lambda_temporal", self.lambda_temporal.to_string());
        push("lambda_diffusion", self.lambda_diffusion.to_string());
        push("train_window_lo", self.train_window_lo.to_string());
        push("train_window_hi", self.train_window_hi.to_string());
        push("infer_window_lo", self.infer_window_lo.to_string());
        push("infer_window_hi", self.infer_window_hi.to_string());
        push("n_share", self.n_share.to_string());
        push("toy_text_len", self.toy_text_len.to_string());
        push("n_vision", self.n_vision.to_string());
        push(
            "guided_mode",
            if self.guided_mode == GuidedMode::Paper { "paper" } else { "standard" }.into(),
        );
        push("unshare_boost", self.unshare_boost.to_string());
        push("drop_shared", self.drop_shared.to_string());
        push("drop_unshared", self.drop_unshared.to_string());
        for axis in &self.axes {
            out.push_str(&format!("{} = {}\n", axis.key, axis.values.join(",")));
        }
        for (name, cmd) in &self.hooks {
            out.push_str(&format!("hook_{name} = {cmd}\n"));
        }
        out
    }

    pub fn clip_spec(&self, seed: u64) -> SyntheticClipSpec {
        SyntheticClipSpec {
            frames: self.frames,
            height: self.height,
            width: self.width,
            kind: self.shape,
            start: (self.start_x, self.start_y),
            velocity: (self.velocity_x, self.velocity_y),
            half_size: self.half_size,
            background: self.background,
            foreground: self.foreground,
            texture_noise: self.texture_noise,
            seed,
        }
    }

    pub fn edit_config(&self, seed: u64) -> EditConfig {
        EditConfig {
            codec: self.codec,
            invert_steps: self.invert_steps,
            bilateral: BilateralConfig {
                kernel_size: self.kernel_size,
                sigma_spatial: self.sigma_spatial,
                sigma_intensity: self.sigma_intensity,
                boundary: self.boundary,
            },
            filter_direction: self.filter_direction,
            seed,
        }
    }

    pub fn train_config(&self, seed: u64) -> Result<TrainConfig> {
        Ok(TrainConfig {
            steps: self.steps,
            scope: self.scope,
            optim: OptimConfig {
                kind: self.optimizer,
                lr: self.lr,
                weight_decay: self.weight_decay,
                warmup_steps: self.warmup_steps,
                accumulation: self.accumulation,
                ..OptimConfig::default()
            },
            weights: LossWeights {
                lambda_temporal: self.lambda_temporal,
                lambda_diffusion: self.lambda_diffusion,
            },
            window: ActivationWindow::new(self.train_window_lo, self.train_window_hi)?,
            frames_per_step: self.frames_per_step,
            codec: self.codec,
            seed,
        })
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        build_schedule(self.t_total, 1e-4, 0.02)
    }
}

/// Frozen toy vision encoder: fixed seeded projections mapping a frame's
/// pixel tokens to an `n_vision x d` feature matrix.
pub fn toy_vision_encode<T: Scalar>(
    frames: &Grid<T>,
    n_vision: usize,
    d: usize,
    seed: u64,
) -> Result<VisionFeatures> {
    let s = frames.shape();
    let n_pix = s.height * s.width;
    let row_proj = Mat::randn(n_vision, n_pix, 1.0 / (n_pix as f64).sqrt(), seed);
    let col_proj = Mat::randn(s.channels, d, 1.0 / (s.channels as f64).sqrt(), seed + 1);
    let mut per_frame = Vec::with_capacity(s.batch);
    for f in 0..s.batch {
        let tokens = crate::denoiser::grid_item_tokens(frames, f)?;
        per_frame.push(row_proj.matmul(&tokens)?.matmul(&col_proj)?);
    }
    VisionFeatures::new(per_frame)
}

const TOY_TEXT_SEED: u64 = 0x7ead;
const TOY_VISION_SEED: u64 = 0x517e;

/// Per-frame conditioning rows assembled from shared tokens, pooled vision
/// features, and the toy text table, honoring the ablation switches.
pub fn build_conditioning(cfg: &RunConfig, frames: &Grid<f64>, seed: u64) -> Result<Vec<Mat>> {
    let d = cfg.d_cond;
    if d == 0 {
        return Err(CoreError::InvalidParameter(
            "conditioning requested for a model without cross-attention".into(),
        ));
    }
    let t_share = if cfg.drop_shared {
        Mat::zeros(0, d)
    } else {
        init_shared(cfg.n_share, d, seed)?
    };
    let w_unshare = Mat::identity(d);
    let vision = toy_vision_encode(frames, cfg.n_vision, d, TOY_VISION_SEED)?;
    let cond_text = Mat::randn(cfg.toy_text_len, d, 0.02, TOY_TEXT_SEED);
    let uncond_text = Mat::randn(cfg.toy_text_len, d, 0.02, TOY_TEXT_SEED + 1);

    let mut out = Vec::with_capacity(vision.len());
    for f in 0..vision.len() {
        let z_frame = if cfg.drop_unshared {
            Mat::zeros(0, d)
        } else {
            let pooled = pool_adjacent(vision.frame(f))?;
            project_unshared(&pooled, &w_unshare)?.scale(cfg.unshare_boost)
        };
        out.push(assemble(&t_share, &z_frame, &cond_text, &uncond_text)?.z_final);
    }
    Ok(out)
}

/// Build, optionally train, and configure the toy denoiser for one seed.
pub fn build_toy_denoiser(cfg: &RunConfig, seed: u64) -> Result<ToyDenoiser> {
    let latent = cfg.codec.latent_shape(crate::grid::GridShape {
        batch: cfg.frames,
        channels: 1,
        height: cfg.height,
        width: cfg.width,
    })?;
    let model_cfg = ToyDenoiserConfig {
        latent_channels: 1,
        control_channels: 1,
        height: latent.height,
        width: latent.width,
        d_feat: cfg.d_feat,
        d_cond: cfg.d_cond,
        rank: cfg.lora_rank,
        t_total: cfg.t_total,
        seed,
    };
    let mut model = ToyDenoiser::init(model_cfg)?;
    if cfg.steps > 0 {
        let clip = synthetic_clip::<f64>(&cfg.clip_spec(seed))?.clip;
        let schedule = cfg.schedule()?;
        train_driver(&mut model, &[clip], &schedule, &cfg.train_config(seed)?)?;
    }
    model.adapter_enabled = true;
    model.window = Some(ActivationWindow::new(cfg.infer_window_lo, cfg.infer_window_hi)?);
    model.set_adapter_scale(cfg.adapter_scale);
    if cfg.merge_ratio > 0.0 {
        model.merge_adapters(cfg.merge_ratio)?;
    }
    Ok(model)
}

/// The standard experiment for one config: synthesize clips, edit them with
/// the configured backend, and score against the clean frames.
pub fn standard_cell_runner(cfg: &RunConfig) -> Result<MetricReport> {
    let schedule = cfg.schedule()?;
    let mut rows = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        let synth = synthetic_clip::<f64>(&cfg.clip_spec(seed))?;
        let edit_cfg = cfg.edit_config(seed);
        let edited = match cfg.backend {
            Backend::Oracle => {
                let d = AnalyticGaussianDenoiser::new(0.3, 0.25, schedule.clone())?;
                let conditioning = if cfg.d_cond > 0 {
                    Some(build_conditioning(cfg, &synth.clip.frames, seed)?)
                } else {
                    None
                };
                crate::pipeline::edit_clip(
                    &synth.clip,
                    conditioning.as_deref(),
                    &schedule,
                    &d,
                    &edit_cfg,
                )?
            }
            Backend::Toy => {
                let d = build_toy_denoiser(cfg, seed)?;
                let conditioning = if cfg.d_cond > 0 {
                    Some(build_conditioning(cfg, &synth.clip.frames, seed)?)
                } else {
                    None
                };
                crate::pipeline::edit_clip(
                    &synth.clip,
                    conditioning.as_deref(),
                    &schedule,
                    &d,
                    &edit_cfg,
                )?
            }
        };
        rows.push(clip_metrics(
            format!("seed-{seed}"),
            &edited.clip.frames,
            &synth.clean,
            1.0,
        )?);
    }
    MetricReport::new(rows)
}

/// One grid point: the axis assignments that produced it and its report.
#[derive(Clone, Debug)]
pub struct AblationCell {
    pub settings: Vec<(String, String)>,
    pub report: MetricReport,
}

#[derive(Clone, Debug)]
pub struct AblationOutcome {
    pub axes: Vec<Axis>,
    pub cells: Vec<AblationCell>,
    /// Resolved base config, the reproduction manifest.
    pub manifest: String,
    /// Cell index per metric; PSNR, SSIM and similarity prefer high values,
    /// flicker prefers low.
    pub best: BTreeMap<&'static str, usize>,
}

fn cartesian(axes: &[Axis]) -> Vec<Vec<(String, String)>> {
    let mut combos: Vec<Vec<(String, String)>> = vec![Vec::new()];
    for axis in axes {
        let mut next = Vec::with_capacity(combos.len() * axis.values.len());
        for combo in &combos {
            for v in &axis.values {
                let mut c = combo.clone();
                c.push((axis.key.clone(), v.clone()));
                next.push(c);
            }
        }
        combos = next;
    }
    combos
}

/// Run every feasible grid cell with identical seeds, up to `jobs` at a
/// time. Results keep grid order regardless of the thread count.
pub fn ablation_runner(
    base: &RunConfig,
    runner: &(dyn Fn(&RunConfig) -> Result<MetricReport> + Sync),
) -> Result<AblationOutcome> {
    if base.axes.is_empty() || base.axes.iter().any(|a| a.values.is_empty()) {
        return Err(CoreError::EmptyInput("ablation grid has no cells".into()));
    }
    let mut configs = Vec::new();
    for combo in cartesian(&base.axes) {
        let mut cfg = base.clone();
        cfg.axes.clear();
        for (key, value) in &combo {
            cfg.assign(key, value)?;
        }
        cfg.validate()?;
        if cfg.windows_feasible() {
            configs.push((combo, cfg));
        }
    }
    if configs.is_empty() {
        return Err(CoreError::EmptyInput("every grid cell was infeasible".into()));
    }

    let results: Vec<Option<Result<MetricReport>>> = {
        let slots = Mutex::new((0..configs.len()).map(|_| None).collect::<Vec<_>>());
        let cursor = AtomicUsize::new(0);
        let workers = base.jobs.min(configs.len());
        std::thread::scope(|scope| {
            for _ in 0..workers {
                scope.spawn(|| loop {
                    let i = cursor.fetch_add(1, Ordering::SeqCst);
                    if i >= configs.len() {
                        break;
                    }
                    let out = runner(&configs[i].1);
                    slots.lock().unwrap()[i] = Some(out);
                });
            }
        });
        slots.into_inner().unwrap()
    };

    let mut cells = Vec::with_capacity(configs.len());
    for ((combo, _), slot) in configs.into_iter().zip(results) {
        let report = slot.expect("worker filled every slot")?;
        cells.push(AblationCell { settings: combo, report });
    }

    let mut best = BTreeMap::new();
    let pick = |f: &dyn Fn(&AblationCell) -> f64, lower_better: bool| -> usize {
        let mut idx = 0;
        for (i, c) in cells.iter().enumerate() {
            let (a, b) = (f(c), f(&cells[idx]));
            if (lower_better && a < b) || (!lower_better && a > b) {
                idx = i;
            }
        }
        idx
    };
    best.insert("psnr", pick(&|c| c.report.aggregate().psnr, false));
    best.insert("ssim", pick(&|c| c.report.aggregate().ssim, false));
    best.insert("flicker", pick(&|c| c.report.aggregate().flicker, true));
    best.insert("mean_similarity", pick(&|c| c.report.aggregate().mean_similarity, false));

    Ok(AblationOutcome { axes: base.axes.clone(), cells, manifest: base.to_text(), best })
}

impl AblationOutcome {
    /// Summary CSV: one row per cell with its axis values, aggregate
    /// metrics, and the metrics (if any) this cell wins.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for axis in &self.axes {
            out.push_str(&axis.key);
            out.push(',');
        }
        out.push_str("psnr,ssim,flicker,mean_similarity,best_for\n");
        for (i, cell) in self.cells.iter().enumerate() {
            for (_, value) in &cell.settings {
                out.push_str(value);
                out.push(',');
            }
            let agg = cell.report.aggregate();
            let wins: Vec<&str> = self
                .best
                .iter()
                .filter_map(|(metric, &idx)| (idx == i).then_some(*metric))
                .collect();
            let best_for = if wins.is_empty() { "-".to_string() } else { wins.join(";") };
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                agg.psnr, agg.ssim, agg.flicker, agg.mean_similarity, best_for
            ));
        }
        out
    }
}

/// Result of one external hook invocation. Failures never abort a report;
/// they surface here and render as "n/a".
#[derive(Clone, Debug)]
pub struct HookOutcome {
    pub values: Vec<Option<f64>>,
    pub failure: Option<String>,
}

impl HookOutcome {
    fn all_missing(n: usize, failure: String) -> Self {
        Self { values: vec![None; n], failure: Some(failure) }
    }
}

/// Run `command` through the shell and parse one float per line, in clip
/// order. Garbage or missing lines degrade to `None`; spawn errors,
/// non-zero exits, and timeouts fail the whole column.
pub fn external_metric_hook(
    name: &str,
    command: &str,
    n_clips: usize,
    timeout: Duration,
) -> HookOutcome {
    let mut child = match Command::new("sh")
        .arg("-c")
        .arg(command)
        .stdin(Stdio::null())
        .stdout(Stdio::piped())
        .stderr(Stdio::null())
        .spawn()
    {
        Ok(c) => c,
        Err(e) => return HookOutcome::all_missing(n_clips, format!("{name}: spawn failed: {e}")),
    };

    // Drain stdout concurrently so a chatty tool cannot block on the pipe.
    let mut stdout = child.stdout.take().expect("stdout was piped");
    let reader = std::thread::spawn(move || {
        let mut buf = String::new();
        let _ = stdout.read_to_string(&mut buf);
        buf
    });

    let deadline = Instant::now() + timeout;
    let status = loop {
        match child.try_wait() {
            Ok(Some(status)) => break status,
            Ok(None) => {
                if Instant::now() >= deadline {
                    let _ = child.kill();
                    let _ = child.wait();
                    // Grandchildren may hold the pipe open past the kill;
                    // leave the reader detached rather than block on it.
                    drop(reader);
                    return HookOutcome::all_missing(
                        n_clips,
                        format!("{name}: timed out after {timeout:?}"),
                    );
                }
                std::thread::sleep(Duration::from_millis(5));
            }
            Err(e) => {
                let _ = child.kill();
                drop(reader);
                return HookOutcome::all_missing(n_clips, format!("{name}: wait failed: {e}"));
            }
        }
    };
    let output = reader.join().unwrap_or_default();
    if !status.success() {
        return HookOutcome::all_missing(n_clips, format!("{name}: exited with {status}"));
    }

    let lines: Vec<&str> = output.lines().collect();
    let values = (0..n_clips)
        .map(|i| lines.get(i).and_then(|l| l.trim().parse::<f64>().ok()))
        .collect();
    HookOutcome { values, failure: None }
}

/// Attach a hook column to a report, row by row.
pub fn attach_hook_column(report: &mut MetricReport, name: &str, values: &[Option<f64>]) {
    for (row, v) in report.rows.iter_mut().zip(values) {
        row.external.insert(name.to_string(), *v);
    }
}

/// Run every configured hook and attach the parsed columns. Returns the
/// names of hooks that failed outright (their columns render as n/a).
pub fn run_hooks(
    cfg: &RunConfig,
    report: &mut MetricReport,
    substitute: &dyn Fn(&str) -> String,
    timeout: Duration,
) -> Vec<(String, String)> {
    let mut failures = Vec::new();
    for (name, template) in &cfg.hooks {
        let command = substitute(template);
        let outcome = external_metric_hook(name, &command, report.rows.len(), timeout);
        attach_hook_column(report, name, &outcome.values);
        if let Some(reason) = outcome.failure {
            failures.push((name.clone(), reason));
        }
    }
    failures
}

const PLOT_W: f64 = 640.0;
const PLOT_H: f64 = 400.0;
const MARGIN: f64 = 56.0;
const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

fn axis_bounds(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for v in values {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !lo.is_finite() || !hi.is_finite() {
        return (0.0, 1.0);
    }
    if lo == hi {
        return (lo - 0.5, hi + 0.5);
    }
    let pad = 0.05 * (hi - lo);
    (lo - pad, hi + pad)
}

/// Minimal line plot, one polyline per series, rendered as standalone SVG.
pub fn svg_line_plot(title: &str, series: &[(String, Vec<(f64, f64)>)]) -> String {
    let (x_lo, x_hi) = axis_bounds(series.iter().flat_map(|(_, p)| p.iter().map(|q| q.0)));
    let (y_lo, y_hi) = axis_bounds(series.iter().flat_map(|(_, p)| p.iter().map(|q| q.1)));
    let sx = |x: f64| MARGIN + (x - x_lo) / (x_hi - x_lo) * (PLOT_W - 2.0 * MARGIN);
    let sy = |y: f64| PLOT_H - MARGIN - (y - y_lo) / (y_hi - y_lo) * (PLOT_H - 2.0 * MARGIN);

    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{PLOT_W}\" height=\"{PLOT_H}\" \
         viewBox=\"0 0 {PLOT_W} {PLOT_H}\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"24\" text-anchor=\"middle\" font-size=\"15\">{title}</text>\n",
        PLOT_W / 2.0
    );
    svg.push_str(&format!(
        "<line x1=\"{m}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"black\"/>\n\
         <line x1=\"{m}\" y1=\"{t}\" x2=\"{m}\" y2=\"{b}\" stroke=\"black\"/>\n\
         <text x=\"{m}\" y=\"{lb}\" font-size=\"11\">{x_lo:.4}</text>\n\
         <text x=\"{r}\" y=\"{lb}\" text-anchor=\"end\" font-size=\"11\">{x_hi:.4}</text>\n\
         <text x=\"{ly}\" y=\"{b}\" text-anchor=\"end\" font-size=\"11\">{y_lo:.4}</text>\n\
         <text x=\"{ly}\" y=\"{t}\" text-anchor=\"end\" font-size=\"11\">{y_hi:.4}</text>\n",
        m = MARGIN,
        b = PLOT_H - MARGIN,
        r = PLOT_W - MARGIN,
        t = MARGIN,
        lb = PLOT_H - MARGIN + 16.0,
        ly = MARGIN - 6.0,
    ));
    for (i, (label, points)) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let path: Vec<String> =
            points.iter().map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
        svg.push_str(&format!(
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>\n",
            path.join(" ")
        ));
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-size=\"12\" fill=\"{color}\">{label}</text>\n",
            PLOT_W - MARGIN + 4.0,
            MARGIN + 14.0 * i as f64,
        ));
    }
    svg.push_str("</svg>\n");
    svg
}

/// Minimal bar plot with one bar per label.
pub fn svg_bar_plot(title: &str, labels: &[String], values: &[f64]) -> String {
    debug_assert_eq!(labels.len(), values.len());
    let (y_lo, y_hi) = axis_bounds(values.iter().copied().chain(std::iter::once(0.0)));
    let sy = |y: f64| PLOT_H - MARGIN - (y - y_lo) / (y_hi - y_lo) * (PLOT_H - 2.0 * MARGIN);
    let span = PLOT_W - 2.0 * MARGIN;
    let slot = span / labels.len().max(1) as f64;
    let bar_w = 0.6 * slot;

    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{PLOT_W}\" height=\"{PLOT_H}\" \
         viewBox=\"0 0 {PLOT_W} {PLOT_H}\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"24\" text-anchor=\"middle\" font-size=\"15\">{title}</text>\n",
        PLOT_W / 2.0
    );
    let base = sy(0.0f64.clamp(y_lo, y_hi));
    for (i, (label, &v)) in labels.iter().zip(values).enumerate() {
        let x = MARGIN + slot * i as f64 + 0.5 * (slot - bar_w);
        let top = sy(v);
        let (y, h) = if top <= base { (top, base - top) } else { (base, top - base) };
        svg.push_str(&format!(
            "<rect x=\"{x:.2}\" y=\"{y:.2}\" width=\"{bar_w:.2}\" height=\"{h:.2}\" \
             fill=\"{}\"/>\n<text x=\"{:.2}\" y=\"{}\" text-anchor=\"middle\" \
             font-size=\"11\">{label}</text>\n",
            PALETTE[i % PALETTE.len()],
            x + bar_w / 2.0,
            PLOT_H - MARGIN + 16.0,
        ));
    }
    svg.push_str("</svg>\n");
    svg
}
