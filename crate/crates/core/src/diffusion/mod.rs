//! Continuous-time diffusion over analog bits: the cosine schedule, forward
//! corruption, the DDIM update and the sampling loop.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{config, invalid, Result};
use crate::scalar::Scalar;
use crate::tensor::{Tensor, TensorError};

/// `gamma(t) = cos(((t + ns) / (1 + ds)) * pi / 2)^2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseSchedule {
    pub ns: f64,
    pub ds: f64,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self {
            ns: 0.0002,
            ds: 0.00025,
        }
    }
}

impl NoiseSchedule {
    pub fn gamma(&self, t: f64) -> Result<f64> {
        if !(0.0..=1.0).contains(&t) {
            return Err(invalid(format!("gamma: t must lie in [0, 1], got {t}")));
        }
        Ok(
            (((t + self.ns) / (1.0 + self.ds)) * std::f64::consts::FRAC_PI_2)
                .cos()
                .powi(2),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub steps: usize,
    /// Asymmetric time offset added to the next-step index.
    pub td: f64,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            steps: 20,
            td: 2.0,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(config("sampler: steps must be at least 1"));
        }
        if !(self.td >= 0.0 && self.td.is_finite()) {
            return Err(config(format!(
                "sampler: td must be a nonnegative number, got {}",
                self.td
            )));
        }
        Ok(())
    }
}

/// `(t_now, t_next)` for sampling step `step` of `steps`.
pub fn time_grid(step: usize, steps: usize, td: f64) -> (f64, f64) {
    let s = steps as f64;
    let t_now = 1.0 - step as f64 / s;
    let t_next = (1.0 - (step as f64 + 1.0 + td) / s).max(0.0);
    (t_now, t_next)
}

fn same_shape<T: Scalar>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(TensorError::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        }
        .into());
    }
    Ok(())
}

/// `x_t = sqrt(gamma(t)) * x0 + sqrt(1 - gamma(t)) * eps`.
pub fn corrupt<T: Scalar>(
    x0: &Tensor<T>,
    t: f64,
    eps: &Tensor<T>,
    sched: &NoiseSchedule,
) -> Result<Tensor<T>> {
    same_shape("corrupt", x0, eps)?;
    let g = sched.gamma(t)?;
    let mut out = x0.clone();
    combine(out.data_mut(), eps.data(), g.sqrt(), (1.0 - g).sqrt());
    Ok(out)
}

/// `a <- ca * a + cb * b`.
fn combine<T: Scalar>(a: &mut [T], b: &[T], ca: f64, cb: f64) {
    let (ca, cb) = (T::lit(ca), T::lit(cb));
    for (x, &y) in a.iter_mut().zip(b) {
        *x = ca * *x + cb * y;
    }
}

/// One deterministic reverse step from `t_now` to `t_next` given the
/// network's estimate of the clean signal.
pub fn ddim_step<T: Scalar>(
    x_t: &Tensor<T>,
    x_pred: &Tensor<T>,
    t_now: f64,
    t_next: f64,
    sched: &NoiseSchedule,
    scale: f64,
) -> Result<Tensor<T>> {
    same_shape("ddim_step", x_t, x_pred)?;
    if t_next > t_now {
        return Err(invalid(format!(
            "ddim_step: t_next {t_next} is after t_now {t_now}"
        )));
    }
    let g_now = sched.gamma(t_now)?;
    let g_next = sched.gamma(t_next)?;
    if g_now >= 1.0 {
        return Err(invalid(format!(
            "ddim_step: gamma({t_now}) == 1 leaves the noise undetermined; use t_now > 0"
        )));
    }
    let (lo, hi) = (T::lit(-scale), T::lit(scale));
    let (sg_now, sn_now) = (T::lit(g_now.sqrt()), T::lit((1.0 - g_now).sqrt()));
    let (sg_next, sn_next) = (T::lit(g_next.sqrt()), T::lit((1.0 - g_next).sqrt()));
    let data = x_t
        .data()
        .iter()
        .zip(x_pred.data())
        .map(|(&xt, &xp)| {
            let xp = xp.max(lo).min(hi);
            let eps = (xt - sg_now * xp) / sn_now;
            sg_next * xp + sn_next * eps
        })
        .collect();
    Ok(Tensor::new(x_t.shape().to_vec(), data)?)
}

/// Standard normal tensor drawn from a seeded stream.
pub fn gaussian<T: Scalar>(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<T> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v: f64 = StandardNormal.sample(rng);
            T::lit(v)
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("sized above")
}

/// Reverse diffusion from pure noise. `predict(m_t, t_now, step)` returns the
/// predicted clean analog bits; the final prediction is returned (not the
/// final noisy state), ready for decoding.
pub fn sample<T, F>(
    shape: &[usize],
    cfg: &SamplerConfig,
    sched: &NoiseSchedule,
    scale: f64,
    mut predict: F,
) -> Result<Tensor<T>>
where
    T: Scalar,
    F: FnMut(&Tensor<T>, f64, usize) -> Result<Tensor<T>>,
{
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut m_t = gaussian::<T>(shape, &mut rng);
    let mut m_pred = None;
    for step in 0..cfg.steps {
        let (t_now, t_next) = time_grid(step, cfg.steps, cfg.td);
        let pred = predict(&m_t, t_now, step)?;
        m_t = ddim_step(&m_t, &pred, t_now, t_next, sched, scale)?;
        m_pred = Some(pred);
    }
    Ok(m_pred.expect("at least one step"))
}
