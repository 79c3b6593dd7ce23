//! Conditional mask denoiser: an image encoder run once per image and a mask
//! decoder run at every diffusion step.
//!
//! Encoder: four 3×3 conv blocks over two scales, merged by upsampling and a
//! 1×1 projection to `feature_dim` channels at mask resolution.
//! Decoder: a two-resolution U-shaped conv net over the concatenation of the
//! noisy analog bits, the image features and optional past-frame bits, with a
//! time embedding added inside every block. Two 1×1 heads produce class and
//! instance logits, and the analog-bit prediction is their softmax-weighted
//! bit code.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config, invalid, Result};
use crate::mask::{analog_codebook, BitCodecConfig};
use crate::scalar::Scalar;
use crate::tensor::{glorot_uniform, Graph, ParamSet, Tensor, Var};

/// Width of the sinusoidal time features fed to the time MLP.
pub const SINUSOID_DIM: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetConfig {
    pub num_classes: u16,
    pub max_instances: u16,
    pub codec: BitCodecConfig,
    /// Channels at full resolution; the half-resolution stage uses twice this.
    pub width: usize,
    /// Residual blocks at half resolution in the decoder.
    pub depth: usize,
    /// Channels of the image feature map.
    pub feature_dim: usize,
    /// Hidden size of the time-embedding MLP.
    pub time_dim: usize,
    /// Number of past-frame masks concatenated to the decoder input (0, 1 or 2).
    pub past_frames: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            num_classes: 5,
            max_instances: 8,
            codec: BitCodecConfig::default(),
            width: 16,
            depth: 2,
            feature_dim: 16,
            time_dim: 64,
            past_frames: 0,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        self.codec.validate(self.num_classes, self.max_instances)?;
        if self.width == 0 || self.feature_dim == 0 || self.time_dim == 0 {
            return Err(config(
                "net: width, feature_dim and time_dim must be positive",
            ));
        }
        if self.past_frames > 2 {
            return Err(config(format!(
                "net: past_frames must be 0, 1 or 2, got {}",
                self.past_frames
            )));
        }
        Ok(())
    }

    /// Analog-bit channels per mask.
    pub fn bit_channels(&self) -> usize {
        self.codec.channels()
    }

    /// Input channels of the first decoder layer.
    pub fn decoder_in_channels(&self) -> usize {
        self.bit_channels() * (1 + self.past_frames) + self.feature_dim
    }

    pub fn instance_categories(&self) -> usize {
        usize::from(self.max_instances) + 1
    }
}

/// Concrete output of one decoder evaluation, all `[N, ·, H, W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserOutput<T> {
    pub class_logits: Tensor<T>,
    pub instance_logits: Tensor<T>,
    pub m_pred: Tensor<T>,
}

/// Graph handles of one decoder evaluation.
#[derive(Debug, Clone, Copy)]
pub struct DecoderVars {
    pub class_logits: Var,
    pub instance_logits: Var,
    pub m_pred: Var,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Denoiser<T> {
    config: NetConfig,
    params: ParamSet<T>,
    index: BTreeMap<String, usize>,
}

struct Layout<'a, T: Scalar> {
    params: ParamSet<T>,
    rng: &'a mut ChaCha8Rng,
}

impl<T: Scalar> Layout<'_, T> {
    fn conv(&mut self, name: &str, c_in: usize, c_out: usize, k: usize) {
        let w = glorot_uniform(&[c_out, c_in, k, k], c_in * k * k, c_out * k * k, self.rng);
        self.params.add(format!("{name}.w"), w);
        self.params
            .add(format!("{name}.b"), Tensor::zeros(&[c_out]));
    }

    fn linear(&mut self, name: &str, d_in: usize, d_out: usize) {
        let w = glorot_uniform(&[d_in, d_out], d_in, d_out, self.rng);
        self.params.add(format!("{name}.w"), w);
        self.params
            .add(format!("{name}.b"), Tensor::zeros(&[d_out]));
    }

    fn norm(&mut self, name: &str, c: usize) {
        self.params
            .add(format!("{name}.g"), Tensor::full(&[c], T::one()));
        self.params.add(format!("{name}.b"), Tensor::zeros(&[c]));
    }

    fn resblock(&mut self, name: &str, c: usize, time_dim: usize) {
        self.norm(&format!("{name}.norm"), c);
        self.conv(&format!("{name}.conv1"), c, c, 3);
        self.linear(&format!("{name}.time"), time_dim, c);
        self.conv(&format!("{name}.conv2"), c, c, 3);
    }
}

fn build_params<T: Scalar>(cfg: &NetConfig, seed: u64) -> ParamSet<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut l = Layout {
        params: ParamSet::new(),
        rng: &mut rng,
    };
    let (w, e) = (cfg.width, cfg.time_dim);
    l.conv("enc.conv1", 3, w, 3);
    l.conv("enc.conv2", w, w, 3);
    l.conv("enc.conv3", w, 2 * w, 3);
    l.conv("enc.conv4", 2 * w, 2 * w, 3);
    l.conv("enc.proj", 3 * w, cfg.feature_dim, 1);

    l.linear("time.fc1", SINUSOID_DIM, e);
    l.linear("time.fc2", e, e);

    l.conv("dec.in", cfg.decoder_in_channels(), w, 3);
    l.linear("dec.in.time", e, w);
    l.conv("dec.down", w, 2 * w, 3);
    for i in 0..cfg.depth {
        l.resblock(&format!("dec.mid{i}"), 2 * w, e);
    }
    l.conv("dec.up", 3 * w, w, 1);
    l.resblock("dec.out", w, e);
    l.norm("dec.final_norm", w);
    l.conv("dec.class_head", w, usize::from(cfg.num_classes), 1);
    l.conv("dec.instance_head", w, cfg.instance_categories(), 1);
    l.params
}

fn index_of<T: Scalar>(params: &ParamSet<T>) -> BTreeMap<String, usize> {
    params
        .names()
        .iter()
        .enumerate()
        .map(|(i, n)| (n.clone(), i))
        .collect()
}

/// Sinusoidal features of `t * 1000`, one row per batch element.
pub fn time_features<T: Scalar>(t: &[f64]) -> Tensor<T> {
    let half = SINUSOID_DIM / 2;
    let mut data = Vec::with_capacity(t.len() * SINUSOID_DIM);
    for &ti in t {
        let x = ti * 1000.0;
        let freqs = (0..half).map(|i| (-(10000f64.ln()) * i as f64 / half as f64).exp());
        let (sin, cos): (Vec<f64>, Vec<f64>) =
            freqs.map(|f| ((x * f).sin(), (x * f).cos())).unzip();
        data.extend(sin.into_iter().chain(cos).map(T::lit));
    }
    Tensor::new(vec![t.len(), SINUSOID_DIM], data).expect("sized above")
}

struct Net<'a, T: Scalar> {
    g: &'a mut Graph<T>,
    vars: &'a [Var],
    index: &'a BTreeMap<String, usize>,
}

impl<T: Scalar> Net<'_, T> {
    fn p(&self, name: &str) -> Var {
        self.vars[self.index[name]]
    }

    fn conv(&mut self, name: &str, x: Var) -> Result<Var> {
        let (w, b) = (self.p(&format!("{name}.w")), self.p(&format!("{name}.b")));
        Ok(self.g.conv2d(x, w, Some(b))?)
    }

    fn linear(&mut self, name: &str, x: Var) -> Result<Var> {
        let (w, b) = (self.p(&format!("{name}.w")), self.p(&format!("{name}.b")));
        let y = self.g.matmul(x, w)?;
        Ok(self.g.add(y, b)?)
    }

    fn norm(&mut self, name: &str, x: Var) -> Result<Var> {
        let (gain, bias) = (self.p(&format!("{name}.g")), self.p(&format!("{name}.b")));
        Ok(self.g.layer_norm(x, gain, bias)?)
    }

    /// Adds a per-sample, per-channel time projection to `x: [n, c, h, w]`.
    fn add_time(&mut self, name: &str, x: Var, temb: Var) -> Result<Var> {
        let p = self.linear(name, temb)?;
        let s = self.g.shape(p).to_vec();
        let p = self.g.reshape(p, &[s[0], s[1], 1, 1])?;
        Ok(self.g.add(x, p)?)
    }

    fn resblock(&mut self, name: &str, x: Var, temb: Var) -> Result<Var> {
        let y = self.norm(&format!("{name}.norm"), x)?;
        let y = self.g.gelu(y);
        let y = self.conv(&format!("{name}.conv1"), y)?;
        let y = self.add_time(&format!("{name}.time"), y, temb)?;
        let y = self.g.gelu(y);
        let y = self.conv(&format!("{name}.conv2"), y)?;
        Ok(self.g.add(x, y)?)
    }
}

impl<T: Scalar> Denoiser<T> {
    pub fn new(config: NetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = build_params(&config, seed);
        let index = index_of(&params);
        Ok(Self {
            config,
            params,
            index,
        })
    }

    /// Wraps existing weights, checking names and shapes against `config`.
    pub fn from_params(config: NetConfig, params: ParamSet<T>) -> Result<Self> {
        config.validate()?;
        let expected = build_params::<T>(&config, 0);
        if expected.names() != params.names() {
            return Err(invalid(
                "denoiser: parameter names do not match the network config",
            ));
        }
        for ((name, a), b) in expected.iter().zip(params.tensors()) {
            if a.shape() != b.shape() {
                return Err(invalid(format!(
                    "denoiser: parameter {name} has shape {:?}, config implies {:?}",
                    b.shape(),
                    a.shape()
                )));
            }
        }
        let index = index_of(&params);
        Ok(Self {
            config,
            params,
            index,
        })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    pub fn into_params(self) -> ParamSet<T> {
        self.params
    }

    pub fn cast<U: Scalar>(&self) -> Denoiser<U> {
        Denoiser {
            config: self.config,
            params: self.params.cast(),
            index: self.index.clone(),
        }
    }

    /// Copy of this network that also accepts `past_frames` past masks. The
    /// added input channels of the first decoder layer start at zero, so the
    /// new network computes exactly the old function until trained.
    pub fn with_past_frames(&self, past_frames: usize) -> Result<Self> {
        let cfg = NetConfig {
            past_frames,
            ..self.config
        };
        cfg.validate()?;
        if past_frames < self.config.past_frames {
            return Err(config("denoiser: cannot drop past-frame inputs"));
        }
        let mut params = ParamSet::new();
        for (name, t) in self.params.iter() {
            if name != "dec.in.w" {
                params.add(name, t.clone());
                continue;
            }
            let s = t.shape();
            let (c_out, c_old, kk) = (s[0], s[1], s[2] * s[3]);
            let c_new = cfg.decoder_in_channels();
            let mut data = vec![T::zero(); c_out * c_new * kk];
            for o in 0..c_out {
                let src = &t.data()[o * c_old * kk..(o + 1) * c_old * kk];
                data[o * c_new * kk..o * c_new * kk + c_old * kk].copy_from_slice(src);
            }
            params.add(name, Tensor::new(vec![c_out, c_new, s[2], s[3]], data)?);
        }
        Self::from_params(cfg, params)
    }

    /// Places the weights on `g`; see [`ParamSet::register`].
    pub fn register(&self, g: &mut Graph<T>, trainable: bool) -> Vec<Var> {
        self.params.register(g, trainable)
    }

    fn net<'a>(&'a self, g: &'a mut Graph<T>, vars: &'a [Var]) -> Net<'a, T> {
        Net {
            g,
            vars,
            index: &self.index,
        }
    }

    /// `images: [n, 3, h, w]` in `[0, 1]` -> features `[n, feature_dim, h, w]`.
    pub fn encode_image_graph(&self, g: &mut Graph<T>, vars: &[Var], images: Var) -> Result<Var> {
        let s = g.shape(images).to_vec();
        if s.len() != 4
            || s[1] != 3
            || !s[2].is_multiple_of(2)
            || !s[3].is_multiple_of(2)
            || s[2] == 0
            || s[3] == 0
        {
            return Err(invalid(format!(
                "encode_image: expected [n, 3, h, w] with even nonzero h and w, got {s:?}"
            )));
        }
        let mut n = self.net(g, vars);
        let x = n.g.shift(images, T::lit(-0.5));
        let x = n.conv("enc.conv1", x)?;
        let x = n.g.gelu(x);
        let x = n.conv("enc.conv2", x)?;
        let s1 = n.g.gelu(x);
        let x = n.g.avg_pool2(s1)?;
        let x = n.conv("enc.conv3", x)?;
        let x = n.g.gelu(x);
        let x = n.conv("enc.conv4", x)?;
        let x = n.g.gelu(x);
        let x = n.g.upsample2(x)?;
        let x = n.g.concat(&[x, s1], 1)?;
        n.conv("enc.proj", x)
    }

    /// One decoder evaluation. `m_t: [n, D, h, w]`, `features: [n, d, h, w]`,
    /// `t`: one time per batch element, `past: [n, past_frames * D, h, w]`.
    pub fn decode_mask_graph(
        &self,
        g: &mut Graph<T>,
        vars: &[Var],
        m_t: Var,
        features: Var,
        t: &[f64],
        past: Option<Var>,
    ) -> Result<DecoderVars> {
        let cfg = &self.config;
        let (sm, sf) = (g.shape(m_t).to_vec(), g.shape(features).to_vec());
        let nb = sm.first().copied().unwrap_or(0);
        if sm.len() != 4 || sm[1] != cfg.bit_channels() || sm[2] % 2 != 0 || sm[3] % 2 != 0 {
            return Err(invalid(format!(
                "decode_mask: expected noisy bits [n, {}, h, w] with even h and w, got {sm:?}",
                cfg.bit_channels()
            )));
        }
        if sf != [nb, cfg.feature_dim, sm[2], sm[3]] {
            return Err(invalid(format!(
                "decode_mask: features {sf:?} do not match noisy bits {sm:?} and feature_dim {}",
                cfg.feature_dim
            )));
        }
        if t.len() != nb {
            return Err(invalid(format!(
                "decode_mask: {} times for a batch of {nb}",
                t.len()
            )));
        }
        let mut inputs = vec![m_t, features];
        match (past, cfg.past_frames) {
            (None, 0) => {}
            (Some(_), 0) => {
                return Err(invalid(
                    "decode_mask: past masks given but the network has no past-frame inputs",
                ))
            }
            (None, k) => {
                return Err(invalid(format!(
                    "decode_mask: network expects {k} past masks"
                )))
            }
            (Some(p), k) => {
                let want = [nb, k * cfg.bit_channels(), sm[2], sm[3]];
                if g.shape(p) != want {
                    return Err(invalid(format!(
                        "decode_mask: past masks have shape {:?}, expected {want:?}",
                        g.shape(p)
                    )));
                }
                inputs.push(p);
            }
        }

        let tf = g.constant(time_features(t));
        let mut n = self.net(g, vars);
        let temb = n.linear("time.fc1", tf)?;
        let temb = n.g.gelu(temb);
        let temb = n.linear("time.fc2", temb)?;
        let temb = n.g.gelu(temb);

        let x = n.g.concat(&inputs, 1)?;
        let x = n.conv("dec.in", x)?;
        let x = n.add_time("dec.in.time", x, temb)?;
        let skip = n.g.gelu(x);
        let x = n.g.avg_pool2(skip)?;
        let mut x = n.conv("dec.down", x)?;
        for i in 0..cfg.depth {
            x = n.resblock(&format!("dec.mid{i}"), x, temb)?;
        }
        let x = n.g.upsample2(x)?;
        let x = n.g.concat(&[x, skip], 1)?;
        let x = n.conv("dec.up", x)?;
        let x = n.resblock("dec.out", x, temb)?;
        let x = n.norm("dec.final_norm", x)?;
        let x = n.g.gelu(x);
        let class_logits = n.conv("dec.class_head", x)?;
        let instance_logits = n.conv("dec.instance_head", x)?;
        let m_pred = logits_to_analog(g, class_logits, instance_logits, &cfg.codec)?;
        Ok(DecoderVars {
            class_logits,
            instance_logits,
            m_pred,
        })
    }

    /// Inference-only encoder pass.
    pub fn encode_image(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let vars = self.register(&mut g, false);
        let x = g.constant(images.clone());
        let h = self.encode_image_graph(&mut g, &vars, x)?;
        Ok(g.value(h).clone())
    }

    /// Inference-only decoder pass.
    pub fn decode_mask(
        &self,
        m_t: &Tensor<T>,
        features: &Tensor<T>,
        t: &[f64],
        past: Option<&Tensor<T>>,
    ) -> Result<DenoiserOutput<T>> {
        let mut g = Graph::new();
        let vars = self.register(&mut g, false);
        let m = g.constant(m_t.clone());
        let h = g.constant(features.clone());
        let p = past.map(|p| g.constant(p.clone()));
        let out = self.decode_mask_graph(&mut g, &vars, m, h, t, p)?;
        Ok(DenoiserOutput {
            class_logits: g.value(out.class_logits).clone(),
            instance_logits: g.value(out.instance_logits).clone(),
            m_pred: g.value(out.m_pred).clone(),
        })
    }
}

/// `[n, k, h, w]` logits -> `[n, bits, h, w]` expected analog code under the
/// softmax over the `k` categories.
fn expected_code<T: Scalar>(g: &mut Graph<T>, logits: Var, bits: u32, scale: f64) -> Result<Var> {
    let s = g.shape(logits).to_vec();
    if s.len() != 4 {
        return Err(invalid(format!(
            "logits_to_analog: expected [n, k, h, w] logits, got {s:?}"
        )));
    }
    let (n, k, h, w) = (s[0], s[1], s[2], s[3]);
    let b = bits as usize;
    let x = g.permute(logits, &[0, 2, 3, 1])?;
    let x = g.reshape(x, &[n * h * w, k])?;
    let p = g.softmax(x)?;
    let book = g.constant(Tensor::from_f64(&[k, b], &analog_codebook(k, bits, scale))?);
    let y = g.matmul(p, book)?;
    let y = g.reshape(y, &[n, h, w, b])?;
    Ok(g.permute(y, &[0, 3, 1, 2])?)
}

/// Softmax-weighted average of the category bit codes, per channel:
/// bit `j` is `b * (2 * sum_k p_k * bit_j(k) - 1)`. Class bits come first.
pub fn logits_to_analog<T: Scalar>(
    g: &mut Graph<T>,
    class_logits: Var,
    instance_logits: Var,
    codec: &BitCodecConfig,
) -> Result<Var> {
    let c = expected_code(g, class_logits, codec.class_bits, codec.scale)?;
    let i = expected_code(g, instance_logits, codec.instance_bits, codec.scale)?;
    Ok(g.concat(&[c, i], 1)?)
}

/// Tensor-level [`logits_to_analog`].
pub fn logits_to_analog_tensor<T: Scalar>(
    class_logits: &Tensor<T>,
    instance_logits: &Tensor<T>,
    codec: &BitCodecConfig,
) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let c = g.constant(class_logits.clone());
    let i = g.constant(instance_logits.clone());
    let m = logits_to_analog(&mut g, c, i, codec)?;
    Ok(g.value(m).clone())
}
