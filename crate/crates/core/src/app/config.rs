use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::denoiser::NetConfig;
use crate::diffusion::SamplerConfig;
use crate::error::{config, PathContext, Result};
use crate::pipeline::VideoSamplerConfig;
use crate::scalar::DType;
use crate::scenes::{SceneConfig, VideoSceneConfig};
use crate::train::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn dtype(self) -> DType {
        match self {
            Precision::F32 => DType::F32,
            Precision::F64 => DType::F64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataOptions {
    pub train_size: usize,
    pub val_size: usize,
    pub train_videos: usize,
    pub val_videos: usize,
}

impl Default for DataOptions {
    fn default() -> Self {
        Self {
            train_size: 2000,
            val_size: 200,
            train_videos: 200,
            val_videos: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VideoOptions {
    pub frames: usize,
    pub max_speed: i64,
    pub allow_occlusion: bool,
    /// Past masks the fine-tuned network conditions on.
    pub past_frames: usize,
    pub train: TrainConfig,
    pub sampler: VideoSamplerConfig,
}

impl Default for VideoOptions {
    fn default() -> Self {
        Self {
            frames: 8,
            max_speed: 2,
            allow_occlusion: true,
            past_frames: 1,
            train: TrainConfig {
                steps: 400,
                checkpoint_every: 200,
                ..TrainConfig::default()
            },
            sampler: VideoSamplerConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalOptions {
    /// Boundary tolerance in pixels; `None` uses `ceil(0.008 * diagonal)`.
    pub boundary_radius: Option<usize>,
    /// Sample with the EMA weights rather than the raw ones.
    pub use_ema: bool,
    /// Discard predicted instances smaller than this many pixels.
    pub min_pixels: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            boundary_radius: None,
            use_ema: true,
            min_pixels: 10,
        }
    }
}

/// Every knob of every command. Missing keys take their defaults; unknown
/// keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub precision: Precision,
    pub scene: SceneConfig,
    pub data: DataOptions,
    pub net: NetConfig,
    pub train: TrainConfig,
    pub sampler: SamplerConfig,
    pub eval: EvalOptions,
    pub video: VideoOptions,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            precision: Precision::F32,
            scene: SceneConfig::default(),
            data: DataOptions::default(),
            net: NetConfig::default(),
            train: TrainConfig::default(),
            sampler: SamplerConfig::default(),
            eval: EvalOptions::default(),
            video: VideoOptions::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).at(path)?;
        Self::from_json(&text).map_err(|e| config(format!("{}: {e}", path.display())))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Writes `effective_config.json` into `dir`.
    pub fn dump(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).at(dir)?;
        let path = dir.join("effective_config.json");
        std::fs::write(&path, self.to_json() + "\n").at(&path)
    }

    pub fn video_scene(&self) -> VideoSceneConfig {
        VideoSceneConfig {
            scene: self.scene.clone(),
            frames: self.video.frames,
            max_speed: self.video.max_speed,
            allow_occlusion: self.video.allow_occlusion,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.net.validate()?;
        self.train.validate()?;
        self.video.train.validate()?;
        self.sampler.validate()?;
        if self.net.num_classes != self.scene.num_classes()
            || self.net.max_instances != self.scene.max_instances
        {
            return Err(config(format!(
                "net expects C = {}, K = {} but the scenes have C = {}, K = {}",
                self.net.num_classes,
                self.net.max_instances,
                self.scene.num_classes(),
                self.scene.max_instances
            )));
        }
        if self.video.past_frames == 0 || self.video.past_frames > 2 {
            return Err(config("video.past_frames must be 1 or 2"));
        }
        if self.video.sampler.steps_first == 0 || self.video.sampler.steps_rest == 0 {
            return Err(config("video sampler steps must be positive"));
        }
        Ok(())
    }
}
