//! Independent reference implementations used by several test targets.

use std::collections::{BTreeMap, BTreeSet};

use super::{blocky_mask, project, random_tensor, relative_error, rng};
use panoptic_diffusion::denoiser::{Denoiser, NetConfig};
use panoptic_diffusion::mask::{PanopticMask, SegmentId};
use panoptic_diffusion::tensor::{Graph, Tensor};
use panoptic_diffusion::train::{ce_loss_graph, encode_past, loss_weights, stack};

/// `cos(x)^2` written as `(1 + cos 2x) / 2`, evaluated independently.
pub fn gamma_oracle(t: f64) -> f64 {
    let u = (t + 0.0002) / 1.00025;
    0.5 * (1.0 + (u * std::f64::consts::PI).cos())
}

/// Weights by direct pixel comparison: each pixel counts the pixels sharing
/// its `(class, instance)` pair.
pub fn weights_oracle(m: &PanopticMask, p: f64) -> Vec<f64> {
    let c = m.classes();
    let k = m.instances();
    let n = c.len();
    let raw: Vec<f64> = (0..n)
        .map(|i| {
            let count = (0..n).filter(|&j| c[j] == c[i] && k[j] == k[i]).count();
            1.0 / (count as f64).powf(p)
        })
        .collect();
    let total: f64 = raw.iter().sum();
    raw.iter().map(|w| w * n as f64 / total).collect()
}

/// All-pairs oracle: every same-class (gt, pred) segment pair is scored by
/// scanning the whole image.
pub fn oracle_pairs(
    pred: &PanopticMask,
    gt: &PanopticMask,
) -> (
    Vec<(SegmentId, SegmentId, f64)>,
    Vec<SegmentId>,
    Vec<SegmentId>,
) {
    let segs = |m: &PanopticMask| -> BTreeSet<SegmentId> {
        m.classes()
            .iter()
            .zip(m.instances())
            .filter(|(&c, _)| c != 0)
            .map(|(&c, &k)| (c, k))
            .collect()
    };
    let (gs, ps) = (segs(gt), segs(pred));
    let mut pairs = Vec::new();
    for &g in &gs {
        for &p in &ps {
            if g.0 != p.0 {
                continue;
            }
            let (mut inter, mut union) = (0usize, 0usize);
            for i in 0..gt.num_pixels() {
                let a = (gt.classes()[i], gt.instances()[i]) == g;
                let b = (pred.classes()[i], pred.instances()[i]) == p;
                inter += usize::from(a && b);
                union += usize::from(a || b);
            }
            let iou = inter as f64 / union as f64;
            if iou > 0.5 {
                pairs.push((g, p, iou));
            }
        }
    }
    let mg: BTreeSet<SegmentId> = pairs.iter().map(|x| x.0).collect();
    let mp: BTreeSet<SegmentId> = pairs.iter().map(|x| x.1).collect();
    (
        pairs,
        gs.into_iter().filter(|s| !mg.contains(s)).collect(),
        ps.into_iter().filter(|s| !mp.contains(s)).collect(),
    )
}

/// PQ from the oracle's matches, class by class.
pub fn oracle_pq(pairs: &[(&PanopticMask, &PanopticMask)], is_thing: &[bool]) -> Option<f64> {
    let mut per: BTreeMap<u16, (f64, f64, f64, f64)> = BTreeMap::new();
    for (p, g) in pairs {
        let p = p.with_stuff_instances_cleared(is_thing);
        let g = g.with_stuff_instances_cleared(is_thing);
        let (tp, ug, up) = oracle_pairs(&p, &g);
        for (s, _, iou) in tp {
            let e = per.entry(s.0).or_default();
            e.0 += 1.0;
            e.3 += iou;
        }
        for s in ug {
            per.entry(s.0).or_default().2 += 1.0;
        }
        for s in up {
            per.entry(s.0).or_default().1 += 1.0;
        }
    }
    let vals: Vec<f64> = per
        .values()
        .map(|&(tp, fp, fn_, iou)| iou / (tp + 0.5 * fp + 0.5 * fn_))
        .collect();
    (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
}

pub fn toy() -> NetConfig {
    NetConfig {
        width: 8,
        depth: 1,
        feature_dim: 8,
        time_dim: 16,
        past_frames: 1,
        ..NetConfig::default()
    }
}

pub struct Batch {
    images: Tensor<f64>,
    noisy: Tensor<f64>,
    past: Tensor<f64>,
    targets: Vec<PanopticMask>,
    times: Vec<f64>,
}

pub fn batch(cfg: &NetConfig) -> Batch {
    let mut r = rng(77);
    let targets: Vec<PanopticMask> = (0..2).map(|_| blocky_mask(8, 8, 5, 8, &mut r)).collect();
    let pasts: Vec<Tensor<f64>> = targets
        .iter()
        .map(|m| encode_past(&[Some(m.clone())], cfg, 8, 8).unwrap())
        .collect();
    let images = random_tensor(&[2, 3, 8, 8], &mut r);
    let noisy = random_tensor(&[2, cfg.bit_channels(), 8, 8], &mut r);
    Batch {
        images,
        noisy,
        past: stack(&pasts.iter().collect::<Vec<_>>()).unwrap(),
        targets,
        times: vec![0.3, 0.85],
    }
}

/// Weighted cross-entropy plus a fixed projection of the analog prediction,
/// so both heads and the codebook path reach the loss.
pub fn loss(net: &Denoiser<f64>, b: &Batch, trainable: bool) -> (f64, Vec<Tensor<f64>>) {
    let mut g = Graph::new();
    let vars = net.register(&mut g, trainable);
    let images = g.constant(b.images.clone());
    let noisy = g.constant(b.noisy.clone());
    let past = g.constant(b.past.clone());
    let h = net.encode_image_graph(&mut g, &vars, images).unwrap();
    let out = net
        .decode_mask_graph(&mut g, &vars, noisy, h, &b.times, Some(past))
        .unwrap();
    let refs: Vec<&PanopticMask> = b.targets.iter().collect();
    let weights: Vec<f64> = b
        .targets
        .iter()
        .flat_map(|m| loss_weights(m, 0.4))
        .collect();
    let ce = ce_loss_graph(&mut g, &out, &refs, &weights).unwrap();
    let pr = project(&mut g, out.m_pred);
    let total = g.add(ce, pr).unwrap();
    let value = g.value(total).item().unwrap();
    if !trainable {
        return (value, Vec::new());
    }
    let mut grads = g.backward(total).unwrap();
    let gs = vars
        .iter()
        .zip(net.params().tensors())
        .map(|(&v, p)| grads.take_or_zeros(v, p.shape()))
        .collect();
    (value, gs)
}

pub struct FdReport {
    pub per_tensor: Vec<(String, f64, f64)>,
    pub overall: f64,
}

/// Central differences on every parameter of a small past-conditioned network.
pub fn denoiser_fd_check() -> FdReport {
    let cfg = toy();
    let mut net = Denoiser::<f64>::new(cfg, 5).unwrap();
    // Nonzero biases and gains so no parameter sits at a symmetric point.
    let mut r = rng(6);
    for t in net.params_mut().tensors_mut() {
        for v in t.data_mut() {
            *v += 0.05 * rand::Rng::random_range(&mut r, -1.0..1.0);
        }
    }
    let b = batch(&cfg);
    let (_, analytic) = loss(&net, &b, true);
    let h = 1e-5;
    let mut per_tensor = Vec::new();
    let mut flat_a = Vec::new();
    let mut flat_n = Vec::new();
    for i in 0..net.params().len() {
        for j in 0..net.params().tensors()[i].numel() {
            let orig = net.params().tensors()[i].data()[j];
            net.params_mut().tensors_mut()[i].data_mut()[j] = orig + h;
            let up = loss(&net, &b, false).0;
            net.params_mut().tensors_mut()[i].data_mut()[j] = orig - h;
            let down = loss(&net, &b, false).0;
            net.params_mut().tensors_mut()[i].data_mut()[j] = orig;
            flat_n.push((up - down) / (2.0 * h));
            flat_a.push(analytic[i].data()[j]);
        }
        let name = &net.params().names()[i];
        let n = analytic[i].numel();
        let (a, num) = (&flat_a[flat_a.len() - n..], &flat_n[flat_n.len() - n..]);
        let err = relative_error(a, num);
        let abs = a
            .iter()
            .zip(num)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        per_tensor.push((name.clone(), err, abs));
    }
    FdReport {
        per_tensor,
        overall: relative_error(&flat_a, &flat_n),
    }
}
