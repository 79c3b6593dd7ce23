//! Test-only oracles shared by the integration test targets.
#![allow(dead_code)]

pub mod oracles;

use panoptic_diffusion::mask::PanopticMask;
use panoptic_diffusion::tensor::{Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

/// Norm-wise relative error `‖a − b‖ / max(‖a‖, ‖b‖)`.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale < 1e-300 {
        diff
    } else {
        diff / scale
    }
}

/// Checks analytic gradients of a scalar-valued graph function against
/// five-point central differences with step `h`. Returns the worst per-input
/// relative error.
pub fn gradient_check(
    inputs: &[Tensor<f64>],
    h: f64,
    f: impl Fn(&mut Graph<f64>, &[Var]) -> Var,
) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = f(&mut g, &vars);
    let mut grads = g.backward(loss).unwrap();
    let eval = |ts: &[Tensor<f64>]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = ts.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars);
        g.value(out).item().unwrap()
    };
    let mut worst: f64 = 0.0;
    for (i, t) in inputs.iter().enumerate() {
        let analytic = grads.take_or_zeros(vars[i], t.shape());
        let mut numeric = vec![0.0; t.numel()];
        let mut work = inputs.to_vec();
        for (j, slot) in numeric.iter_mut().enumerate() {
            let orig = t.data()[j];
            let mut at = |d: f64| {
                work[i].data_mut()[j] = orig + d;
                eval(&work)
            };
            let (near, far) = (at(h) - at(-h), at(2.0 * h) - at(-2.0 * h));
            work[i].data_mut()[j] = orig;
            *slot = (8.0 * near - far) / (12.0 * h);
        }
        worst = worst.max(relative_error(analytic.data(), &numeric));
    }
    worst
}

/// Projects any tensor to a scalar through fixed pseudo-random weights so that
/// gradient checks see non-symmetric upstream gradients.
pub fn project(g: &mut Graph<f64>, x: Var) -> Var {
    let shape = g.shape(x).to_vec();
    let n: usize = shape.iter().product();
    let w: Vec<f64> = (0..n)
        .map(|i| ((i as f64) * 0.618_033_988_7).fract() - 0.5)
        .collect();
    let w = g.constant(Tensor::new(shape, w).unwrap());
    let p = g.mul(x, w).unwrap();
    g.sum(p)
}

/// Mask with independent uniformly random pixels; null pixels get instance 0.
pub fn random_mask(h: usize, w: usize, c: u16, k: u16, rng: &mut impl Rng) -> PanopticMask {
    let classes: Vec<u16> = (0..h * w).map(|_| rng.random_range(0..c)).collect();
    let instances = classes
        .iter()
        .map(|&cl| if cl == 0 { 0 } else { rng.random_range(0..=k) })
        .collect();
    PanopticMask::new(h, w, c, k, classes, instances).unwrap()
}

/// Mask painted with a few random rectangles, so segments are spatially
/// coherent and matches with IoU above 0.5 are common.
pub fn blocky_mask(h: usize, w: usize, c: u16, k: u16, rng: &mut impl Rng) -> PanopticMask {
    let mut m = PanopticMask::empty(h, w, c, k);
    for _ in 0..rng.random_range(1..8) {
        let (y0, x0) = (rng.random_range(0..h), rng.random_range(0..w));
        let (y1, x1) = (rng.random_range(y0..h) + 1, rng.random_range(x0..w) + 1);
        let class = rng.random_range(0..c);
        let inst = rng.random_range(0..=k);
        for y in y0..y1 {
            for x in x0..x1 {
                m.set(y, x, class, inst);
            }
        }
    }
    m
}

/// Nudges a mask: each pixel is repainted with probability `p`.
pub fn perturb(m: &PanopticMask, p: f64, rng: &mut impl Rng) -> PanopticMask {
    let mut out = m.clone();
    for y in 0..m.height() {
        for x in 0..m.width() {
            if rng.random_bool(p) {
                let c = rng.random_range(0..m.num_classes());
                let k = rng.random_range(0..=m.max_instances());
                out.set(y, x, c, k);
            }
        }
    }
    out
}
