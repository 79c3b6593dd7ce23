//! Inference: image segmentation by reverse diffusion, and streaming video
//! segmentation conditioned on the previous predictions.

use serde::{Deserialize, Serialize};

use crate::denoiser::Denoiser;
use crate::diffusion::{sample, NoiseSchedule, SamplerConfig};
use crate::error::{invalid, Result};
use crate::imageio::RgbImage;
use crate::mask::{decode_analog, PanopticMask};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::train::{encode_past, stack};

/// SplitMix64 finalizer of `seed` and `index`, for per-item sampling seeds.
pub fn mix_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Decoded prediction after each sampling step, for trajectory dumps.
pub type Trajectory = Vec<(usize, PanopticMask)>;

fn decode<T: Scalar>(net: &Denoiser<T>, m: &Tensor<T>) -> Result<PanopticMask> {
    let cfg = net.config();
    let s = m.shape();
    let single = m.clone().reshape(&s[1..])?;
    Ok(decode_analog(
        &single,
        &cfg.codec,
        cfg.num_classes,
        cfg.max_instances,
    )?)
}

fn run<T: Scalar>(
    net: &Denoiser<T>,
    features: &Tensor<T>,
    past: Option<&Tensor<T>>,
    sampler: &SamplerConfig,
    schedule: &NoiseSchedule,
    mut trajectory: Option<&mut Trajectory>,
) -> Result<PanopticMask> {
    let cfg = net.config();
    let fs = features.shape();
    let shape = [1, cfg.bit_channels(), fs[2], fs[3]];
    let m = sample::<T, _>(
        &shape,
        sampler,
        schedule,
        cfg.codec.scale,
        |m_t, t, step| {
            let out = net.decode_mask(m_t, features, &[t], past)?;
            if let Some(tr) = trajectory.as_deref_mut() {
                tr.push((step, decode(net, &out.m_pred)?));
            }
            Ok(out.m_pred)
        },
    )?;
    decode(net, &m)
}

/// Segments one image. The encoder runs once; the decoder runs `steps` times.
pub fn segment_image<T: Scalar>(
    net: &Denoiser<T>,
    image: &RgbImage,
    sampler: &SamplerConfig,
    schedule: &NoiseSchedule,
    min_pixels: usize,
    trajectory: Option<&mut Trajectory>,
) -> Result<PanopticMask> {
    let x = stack(&[&image.to_tensor::<T>()])?;
    let h = net.encode_image(&x)?;
    let past = if net.config().past_frames > 0 {
        let p = encode_past::<T>(&[], net.config(), image.height(), image.width())?;
        Some(stack(&[&p])?)
    } else {
        None
    };
    let mask = run(net, &h, past.as_ref(), sampler, schedule, trajectory)?;
    Ok(mask.filter_small_instances(min_pixels))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VideoSamplerConfig {
    pub steps_first: usize,
    pub steps_rest: usize,
    pub td: f64,
    pub min_pixels: usize,
    pub seed: u64,
}

impl Default for VideoSamplerConfig {
    fn default() -> Self {
        Self {
            steps_first: 32,
            steps_rest: 8,
            td: 1.0,
            min_pixels: 10,
            seed: 0,
        }
    }
}

impl VideoSamplerConfig {
    /// Sampler for frame `f`: `steps_first` steps on frame 0, `steps_rest` after.
    pub fn frame_sampler(&self, f: usize) -> SamplerConfig {
        SamplerConfig {
            steps: if f == 0 {
                self.steps_first
            } else {
                self.steps_rest
            },
            td: self.td,
            seed: mix_seed(self.seed, f as u64),
        }
    }
}

/// Segments frames in order. Each frame after the first is conditioned on
/// the masks predicted for the preceding frames (the all-null mask stands in
/// before the start).
pub fn segment_video<T: Scalar>(
    net: &Denoiser<T>,
    frames: &[RgbImage],
    cfg: &VideoSamplerConfig,
    schedule: &NoiseSchedule,
) -> Result<Vec<PanopticMask>> {
    continue_video(net, frames, &[], cfg, schedule)
}

/// Like [`segment_video`], but the first `known.len()` frames take the given
/// masks instead of being sampled, and later frames are conditioned on them.
pub fn continue_video<T: Scalar>(
    net: &Denoiser<T>,
    frames: &[RgbImage],
    known: &[PanopticMask],
    cfg: &VideoSamplerConfig,
    schedule: &NoiseSchedule,
) -> Result<Vec<PanopticMask>> {
    if known.len() > frames.len() {
        return Err(invalid(format!(
            "{} known masks for {} frames",
            known.len(),
            frames.len()
        )));
    }
    let mut out: Vec<PanopticMask> = known.to_vec();
    for (f, image) in frames.iter().enumerate().skip(known.len()) {
        let sampler = cfg.frame_sampler(f);
        let x = stack(&[&image.to_tensor::<T>()])?;
        let h = net.encode_image(&x)?;
        let past = if net.config().past_frames > 0 {
            let prev: Vec<Option<PanopticMask>> = (1..=net.config().past_frames)
                .map(|k| f.checked_sub(k).map(|i| out[i].clone()))
                .collect();
            let p = encode_past::<T>(&prev, net.config(), image.height(), image.width())?;
            Some(stack(&[&p])?)
        } else {
            None
        };
        let mask = run(net, &h, past.as_ref(), &sampler, schedule, None)?;
        out.push(mask.filter_small_instances(cfg.min_pixels));
    }
    Ok(out)
}
