//! Denoiser training: per-pixel loss weighting, the cross-entropy and ℓ2
//! objectives, the corrupt-denoise-update step, EMA weights, checkpoints and
//! the step loop.

mod checkpoint;

use std::collections::HashMap;
use std::io::Write;
use std::time::Instant;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::denoiser::{DecoderVars, Denoiser, DenoiserOutput, NetConfig};
use crate::diffusion::{corrupt, gaussian, NoiseSchedule};
use crate::error::{config, invalid, Error, Result};
use crate::mask::{encode_analog, permute_instance_ids_jointly, PanopticMask};
use crate::scalar::Scalar;
use crate::tensor::{AdamConfig, AdamState, Graph, ParamSet, Tensor, Var};

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    #[serde(alias = "ce")]
    CrossEntropy,
    L2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    /// Linear decay to zero at `steps`.
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub loss: LossKind,
    /// Exponent `p` of the inverse segment-size loss weighting.
    pub weight_power: f64,
    pub adam: AdamConfig,
    pub lr_schedule: LrSchedule,
    pub ema_decay: f64,
    pub batch_size: usize,
    pub steps: u64,
    pub seed: u64,
    /// Write a checkpoint every this many steps (0: only at the end).
    pub checkpoint_every: u64,
    pub schedule: NoiseSchedule,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            loss: LossKind::CrossEntropy,
            weight_power: 0.2,
            adam: AdamConfig {
                lr: 4e-3,
                ..AdamConfig::default()
            },
            lr_schedule: LrSchedule::Linear,
            ema_decay: 0.999,
            batch_size: 8,
            steps: 2500,
            seed: 0,
            checkpoint_every: 500,
            schedule: NoiseSchedule::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.weight_power >= 0.0) {
            return Err(config(format!(
                "train: weight_power must be >= 0, got {}",
                self.weight_power
            )));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(config(format!(
                "train: ema_decay must lie in [0, 1), got {}",
                self.ema_decay
            )));
        }
        if !(self.adam.lr >= 0.0) {
            return Err(config(format!(
                "train: lr must be >= 0, got {}",
                self.adam.lr
            )));
        }
        if self.batch_size == 0 {
            return Err(config("train: batch_size must be positive"));
        }
        Ok(())
    }

    pub fn lr_at(&self, step: u64) -> f64 {
        match self.lr_schedule {
            LrSchedule::Constant => self.adam.lr,
            LrSchedule::Linear => {
                self.adam.lr * (1.0 - step as f64 / self.steps.max(1) as f64).max(0.0)
            }
        }
    }
}

/// Normalized inverse-size weights `w' = H W w / sum(w)` with `w = c^-p`,
/// where `c` is the pixel count of the segment `(class, instance)` containing
/// each pixel. Row-major, one weight per pixel.
pub fn loss_weights(mask: &PanopticMask, p: f64) -> Vec<f64> {
    let mut counts: HashMap<(u16, u16), usize> = HashMap::new();
    for (&c, &k) in mask.classes().iter().zip(mask.instances()) {
        *counts.entry((c, k)).or_insert(0) += 1;
    }
    let raw: Vec<f64> = mask
        .classes()
        .iter()
        .zip(mask.instances())
        .map(|(&c, &k)| (counts[&(c, k)] as f64).powf(-p))
        .collect();
    let total: f64 = raw.iter().sum();
    let n = raw.len() as f64;
    raw.into_iter().map(|w| n * w / total).collect()
}

/// Weighted negative log-likelihood of the target categories: `logits` is
/// `[n, k, h, w]`, `targets` and `weights` are `n*h*w` long in sample-major,
/// row-major pixel order. Returns the weighted sum (not yet averaged).
fn weighted_nll<T: Scalar>(
    g: &mut Graph<T>,
    logits: Var,
    targets: &[usize],
    weights: Var,
) -> Result<Var> {
    let s = g.shape(logits).to_vec();
    let (n, k, h, w) = (s[0], s[1], s[2], s[3]);
    let x = g.permute(logits, &[0, 2, 3, 1])?;
    let x = g.reshape(x, &[n * h * w, k])?;
    let ls = g.log_softmax(x)?;
    let picked = g
        .gather_last(ls, targets)
        .map_err(|e| invalid(format!("cross-entropy target: {e}")))?;
    let wp = g.mul(picked, weights)?;
    let s = g.sum(wp);
    Ok(g.neg(s))
}

/// Class plus instance cross-entropy, weighted per pixel and averaged over
/// pixels and batch.
pub fn ce_loss_graph<T: Scalar>(
    g: &mut Graph<T>,
    out: &DecoderVars,
    targets: &[&PanopticMask],
    weights: &[f64],
) -> Result<Var> {
    let classes: Vec<usize> = targets
        .iter()
        .flat_map(|m| m.classes().iter().map(|&c| c as usize))
        .collect();
    let instances: Vec<usize> = targets
        .iter()
        .flat_map(|m| m.instances().iter().map(|&k| k as usize))
        .collect();
    if weights.len() != classes.len() {
        return Err(invalid(format!(
            "ce_loss: {} weights for {} pixels",
            weights.len(),
            classes.len()
        )));
    }
    let wv = g.constant(Tensor::from_f64(&[weights.len()], weights)?);
    let a = weighted_nll(g, out.class_logits, &classes, wv)?;
    let b = weighted_nll(g, out.instance_logits, &instances, wv)?;
    let total = g.add(a, b)?;
    Ok(g.scale(total, T::lit(1.0 / classes.len().max(1) as f64)))
}

/// Weighted mean squared error between predicted and target analog bits
/// (both `[n, D, h, w]`), averaged over channels, pixels and batch.
pub fn l2_loss_graph<T: Scalar>(
    g: &mut Graph<T>,
    m_pred: Var,
    target: Var,
    weights: &[f64],
) -> Result<Var> {
    let s = g.shape(m_pred).to_vec();
    if s.len() != 4 || weights.len() != s[0] * s[2] * s[3] {
        return Err(invalid(format!(
            "l2_loss: {} weights for bits of shape {s:?}",
            weights.len()
        )));
    }
    let wv = g.constant(Tensor::from_f64(&[s[0], 1, s[2], s[3]], weights)?);
    let d = g.sub(m_pred, target)?;
    let d2 = g.square(d)?;
    let wd = g.mul(d2, wv)?;
    let total = g.sum(wd);
    Ok(g.scale(total, T::lit(1.0 / (s[0] * s[1] * s[2] * s[3]) as f64)))
}

/// Tensor-level cross-entropy of a decoder output against target masks.
pub fn ce_loss<T: Scalar>(
    output: &DenoiserOutput<T>,
    targets: &[&PanopticMask],
    weights: &[f64],
) -> Result<f64> {
    let mut g = Graph::new();
    let out = DecoderVars {
        class_logits: g.constant(output.class_logits.clone()),
        instance_logits: g.constant(output.instance_logits.clone()),
        m_pred: g.constant(output.m_pred.clone()),
    };
    let l = ce_loss_graph(&mut g, &out, targets, weights)?;
    Ok(g.value(l).data()[0].as_f64())
}

/// Tensor-level ℓ2 loss.
pub fn l2_loss<T: Scalar>(m_pred: &Tensor<T>, target: &Tensor<T>, weights: &[f64]) -> Result<f64> {
    let mut g = Graph::new();
    let a = g.constant(m_pred.clone());
    let b = g.constant(target.clone());
    let l = l2_loss_graph(&mut g, a, b, weights)?;
    Ok(g.value(l).data()[0].as_f64())
}

/// `ema <- decay * ema + (1 - decay) * raw`, tensor by tensor.
pub fn ema_update<T: Scalar>(ema: &mut ParamSet<T>, raw: &ParamSet<T>, decay: f64) {
    let (d, r) = (T::lit(decay), T::lit(1.0 - decay));
    for (e, p) in ema.tensors_mut().iter_mut().zip(raw.tensors()) {
        for (x, &y) in e.data_mut().iter_mut().zip(p.data()) {
            *x = d * *x + r * y;
        }
    }
}

/// EMA decay actually applied after `step` updates: the configured decay,
/// ramped up from small values early on so the average is not dominated by
/// the initialization during short runs.
pub fn ema_decay_at(decay: f64, step: u64) -> f64 {
    let s = step as f64;
    decay.min((1.0 + s) / (10.0 + s))
}

/// One training example: an image `[3, h, w]`, its mask and, for video
/// training, the ground-truth masks of the preceding frames (most recent
/// first; missing frames are `None`).
#[derive(Debug, Clone)]
pub struct TrainSample<T> {
    pub image: Tensor<T>,
    pub mask: PanopticMask,
    pub past: Vec<Option<PanopticMask>>,
}

/// Stacks `[c, h, w]` tensors into `[n, c, h, w]`.
pub fn stack<T: Scalar>(items: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = items
        .first()
        .ok_or_else(|| invalid("stack: no tensors"))?
        .shape()
        .to_vec();
    let mut data = Vec::with_capacity(items.len() * first.iter().product::<usize>());
    for t in items {
        if t.shape() != first {
            return Err(invalid(format!(
                "stack: shapes {first:?} and {:?} differ",
                t.shape()
            )));
        }
        data.extend_from_slice(t.data());
    }
    let mut shape = vec![items.len()];
    shape.extend(first);
    Ok(Tensor::new(shape, data)?)
}

/// Analog bits of the past-frame masks, `[past_frames * D, h, w]`; missing
/// frames use the all-null mask.
pub fn encode_past<T: Scalar>(
    past: &[Option<PanopticMask>],
    net: &NetConfig,
    height: usize,
    width: usize,
) -> Result<Tensor<T>> {
    let null = PanopticMask::empty(height, width, net.num_classes, net.max_instances);
    let mut parts = Vec::with_capacity(net.past_frames);
    for i in 0..net.past_frames {
        let m = past.get(i).and_then(Option::as_ref).unwrap_or(&null);
        parts.push(encode_analog::<T>(m, &net.codec)?);
    }
    let refs: Vec<&Tensor<T>> = parts.iter().collect();
    let s = stack(&refs)?;
    let d = net.bit_channels();
    Ok(s.reshape(&[net.past_frames * d, height, width])?)
}

/// Per-step random stream: batch choice, id permutation, times and noise for
/// step `step` depend only on `(seed, step)`, which makes resuming exact.
pub fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step + 1);
    rng
}

/// Everything that evolves during training.
#[derive(Debug, Clone)]
pub struct TrainState<T> {
    pub config: TrainConfig,
    pub net: Denoiser<T>,
    pub ema: ParamSet<T>,
    pub adam: AdamState<T>,
    pub step: u64,
}

/// One row of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    pub wall_ms: u64,
}

impl<T: Scalar> TrainState<T> {
    pub fn new(config: TrainConfig, net: Denoiser<T>) -> Result<Self> {
        config.validate()?;
        let ema = net.params().clone();
        let adam = AdamState::new(config.adam, net.params().tensors());
        Ok(Self {
            config,
            net,
            ema,
            adam,
            step: 0,
        })
    }

    /// Denoiser carrying the EMA weights.
    pub fn ema_net(&self) -> Denoiser<T> {
        Denoiser::from_params(*self.net.config(), self.ema.clone())
            .expect("EMA mirrors the raw weights")
    }

    /// Forward pass and loss for a batch with explicit randomness.
    fn loss_graph(
        &self,
        g: &mut Graph<T>,
        vars: &[Var],
        batch: &[&TrainSample<T>],
        rng: &mut ChaCha8Rng,
    ) -> Result<Var> {
        let net = self.net.config();
        let cfg = &self.config;
        let mut images = Vec::with_capacity(batch.len());
        let mut targets = Vec::with_capacity(batch.len());
        let mut noisy = Vec::with_capacity(batch.len());
        let mut clean = Vec::with_capacity(batch.len());
        let mut pasts = Vec::new();
        let mut times = Vec::with_capacity(batch.len());
        let mut weights = Vec::new();
        for s in batch {
            let (h, w) = (s.mask.height(), s.mask.width());
            let mut group: Vec<&PanopticMask> = vec![&s.mask];
            group.extend(s.past.iter().take(net.past_frames).flatten());
            let mut permuted = permute_instance_ids_jointly(&group, rng)?.into_iter();
            let mask = permuted.next().expect("current frame");
            let past: Vec<Option<PanopticMask>> = s
                .past
                .iter()
                .take(net.past_frames)
                .map(|p| {
                    p.as_ref()
                        .map(|_| permuted.next().expect("one per present frame"))
                })
                .collect();
            let x0 = encode_analog::<T>(&mask, &net.codec)?;
            let t: f64 = rng.random_range(0.0..1.0);
            let eps = gaussian::<T>(x0.shape(), rng);
            noisy.push(corrupt(&x0, t, &eps, &cfg.schedule)?);
            if net.past_frames > 0 {
                pasts.push(encode_past::<T>(&past, net, h, w)?);
            }
            weights.extend(loss_weights(&mask, cfg.weight_power));
            times.push(t);
            images.push(&s.image);
            clean.push(x0);
            targets.push(mask);
        }
        let images = g.constant(stack(&images)?);
        let m_t = g.constant(stack(&noisy.iter().collect::<Vec<_>>())?);
        let past = if net.past_frames > 0 {
            Some(g.constant(stack(&pasts.iter().collect::<Vec<_>>())?))
        } else {
            None
        };
        let h = self.net.encode_image_graph(g, vars, images)?;
        let out = self.net.decode_mask_graph(g, vars, m_t, h, &times, past)?;
        match cfg.loss {
            LossKind::CrossEntropy => {
                let refs: Vec<&PanopticMask> = targets.iter().collect();
                ce_loss_graph(g, &out, &refs, &weights)
            }
            LossKind::L2 => {
                let x0 = g.constant(stack(&clean.iter().collect::<Vec<_>>())?);
                l2_loss_graph(g, out.m_pred, x0, &weights)
            }
        }
    }

    /// Loss of the current weights on `batch` without updating anything.
    pub fn evaluate_loss(&self, batch: &[&TrainSample<T>], rng: &mut ChaCha8Rng) -> Result<f64> {
        let mut g = Graph::new();
        let vars = self.net.register(&mut g, false);
        let l = self.loss_graph(&mut g, &vars, batch, rng)?;
        Ok(g.value(l).data()[0].as_f64())
    }

    /// One optimization step on `batch`, drawing randomness from `rng`.
    /// Returns the loss before the update.
    pub fn train_step(&mut self, batch: &[&TrainSample<T>], rng: &mut ChaCha8Rng) -> Result<f64> {
        let mut g = Graph::new();
        let vars = self.net.register(&mut g, true);
        let l = self.loss_graph(&mut g, &vars, batch, rng)?;
        let loss = g.value(l).data()[0].as_f64();
        if !loss.is_finite() {
            return Err(Error::Diverged {
                step: self.step,
                detail: format!("loss is {loss}"),
            });
        }
        let mut grads = g.backward(l)?;
        let grads: Vec<Tensor<T>> = vars
            .iter()
            .zip(self.net.params().tensors())
            .map(|(&v, p)| grads.take_or_zeros(v, p.shape()))
            .collect();
        let lr = self.config.lr_at(self.step);
        self.adam
            .update_with_lr(lr, self.net.params_mut().tensors_mut(), &grads)
            .map_err(|e| Error::Diverged {
                step: self.step,
                detail: e.to_string(),
            })?;
        self.step += 1;
        ema_update(
            &mut self.ema,
            self.net.params(),
            ema_decay_at(self.config.ema_decay, self.step),
        );
        Ok(loss)
    }

    /// Draws the batch for the current step from `data` and trains on it.
    pub fn step_on(&mut self, data: &[TrainSample<T>]) -> Result<LogRow> {
        if data.is_empty() {
            return Err(invalid("train: empty dataset"));
        }
        let start = Instant::now();
        let mut rng = step_rng(self.config.seed, self.step);
        let bs = self.config.batch_size.min(data.len());
        let picks = index::sample(&mut rng, data.len(), bs);
        let batch: Vec<&TrainSample<T>> = picks.iter().map(|i| &data[i]).collect();
        let step = self.step;
        let lr = self.config.lr_at(step);
        let loss = self.train_step(&batch, &mut rng)?;
        Ok(LogRow {
            step,
            loss,
            lr,
            wall_ms: start.elapsed().as_millis() as u64,
        })
    }

    /// Trains until `self.config.steps`, calling `on_row` after every step.
    pub fn fit<F>(&mut self, data: &[TrainSample<T>], mut on_row: F) -> Result<()>
    where
        F: FnMut(&Self, &LogRow) -> Result<()>,
    {
        while self.step < self.config.steps {
            let row = self.step_on(data)?;
            on_row(self, &row)?;
        }
        Ok(())
    }
}

/// CSV training log with header `step,loss,lr,wall_ms`.
pub struct TrainLog<W: Write> {
    writer: csv::Writer<W>,
}

impl<W: Write> TrainLog<W> {
    pub fn new(out: W, write_header: bool) -> Self {
        let writer = csv::WriterBuilder::new()
            .has_headers(write_header)
            .from_writer(out);
        Self { writer }
    }

    pub fn append(&mut self, row: &LogRow) -> Result<()> {
        self.writer.serialize(row)?;
        self.writer.flush()?;
        Ok(())
    }
}

/// Reads a CSV training log.
pub fn read_log<R: std::io::Read>(input: R) -> Result<Vec<LogRow>> {
    let mut r = csv::Reader::from_reader(input);
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_by_two_weights_by_hand() {
        let m = PanopticMask::new(2, 2, 3, 2, vec![1, 1, 1, 2], vec![0, 0, 0, 1]).unwrap();
        let w = loss_weights(&m, 1.0);
        // raw weights 1/3, 1/3, 1/3, 1 sum to 2; scaled by 4/2.
        let want = [2.0 / 3.0, 2.0 / 3.0, 2.0 / 3.0, 2.0];
        for (a, b) in w.iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(loss_weights(&m, 0.0).iter().all(|&x| x == 1.0));
    }

    #[test]
    fn ema_extremes() {
        let mut ema = ParamSet::<f64>::new();
        ema.add("a", Tensor::from_f64(&[2], &[0.0, 0.0]).unwrap());
        let mut raw = ParamSet::<f64>::new();
        raw.add("a", Tensor::from_f64(&[2], &[1.0, -2.0]).unwrap());
        let mut e = ema.clone();
        ema_update(&mut e, &raw, 0.0);
        assert_eq!(e, raw);
        let mut prev = f64::INFINITY;
        for _ in 0..50 {
            ema_update(&mut ema, &raw, 0.9);
            let gap = (ema.tensors()[0].data()[0] - 1.0).abs();
            assert!(gap < prev);
            prev = gap;
        }
        assert!((prev - 0.9f64.powi(50)).abs() < 1e-12);
    }

    #[test]
    fn ema_ramp_is_bounded_by_configured_decay() {
        assert!((ema_decay_at(0.999, 0) - 0.1).abs() < 1e-12);
        assert_eq!(ema_decay_at(0.999, 1_000_000), 0.999);
    }

    #[test]
    fn linear_schedule_reaches_zero() {
        let c = TrainConfig {
            steps: 10,
            ..TrainConfig::default()
        };
        assert_eq!(c.lr_at(0), c.adam.lr);
        assert_eq!(c.lr_at(10), 0.0);
    }

    #[test]
    fn step_streams_are_independent_of_history() {
        let a: u64 = step_rng(3, 7).random();
        let _ = step_rng(3, 6).random::<u64>();
        let b: u64 = step_rng(3, 7).random();
        assert_eq!(a, b);
        assert_ne!(a, step_rng(3, 8).random::<u64>());
    }
}
