use std::collections::{BTreeMap, BTreeSet};

use pathfinding::prelude::{kuhn_munkres, Matrix};

use crate::error::{invalid, Result};
use crate::mask::PanopticMask;

/// Intersection over union of two binary masks; 1 when both are empty.
pub fn jaccard(pred: &[bool], gt: &[bool]) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &g) in pred.iter().zip(gt) {
        inter += usize::from(p && g);
        union += usize::from(p || g);
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Foreground pixels with a 4-neighbour inside the image that is background.
pub fn binary_boundary(m: &[bool], height: usize, width: usize) -> Vec<bool> {
    let mut out = vec![false; m.len()];
    for y in 0..height {
        for x in 0..width {
            let i = y * width + x;
            if !m[i] {
                continue;
            }
            let off = |dy: isize, dx: isize| {
                let (ny, nx) = (y as isize + dy, x as isize + dx);
                ny >= 0
                    && nx >= 0
                    && (ny as usize) < height
                    && (nx as usize) < width
                    && !m[ny as usize * width + nx as usize]
            };
            out[i] = off(-1, 0) || off(1, 0) || off(0, -1) || off(0, 1);
        }
    }
    out
}

fn dilate(m: &[bool], height: usize, width: usize, r: usize) -> Vec<bool> {
    let ri = r as isize;
    let disk: Vec<(isize, isize)> = (-ri..=ri)
        .flat_map(|dy| (-ri..=ri).map(move |dx| (dy, dx)))
        .filter(|&(dy, dx)| dy * dy + dx * dx <= ri * ri)
        .collect();
    let mut out = vec![false; m.len()];
    for y in 0..height {
        for x in 0..width {
            if !m[y * width + x] {
                continue;
            }
            for &(dy, dx) in &disk {
                let (ny, nx) = (y as isize + dy, x as isize + dx);
                if ny >= 0 && nx >= 0 && (ny as usize) < height && (nx as usize) < width {
                    out[ny as usize * width + nx as usize] = true;
                }
            }
        }
    }
    out
}

/// Boundary F-measure with a disk tolerance of radius `r` pixels. Both masks
/// without boundary score 1; exactly one without boundary scores 0.
pub fn boundary_f(pred: &[bool], gt: &[bool], height: usize, width: usize, r: usize) -> f64 {
    let pb = binary_boundary(pred, height, width);
    let gb = binary_boundary(gt, height, width);
    let (np, ng) = (
        pb.iter().filter(|&&b| b).count(),
        gb.iter().filter(|&&b| b).count(),
    );
    match (np, ng) {
        (0, 0) => return 1.0,
        (0, _) | (_, 0) => return 0.0,
        _ => {}
    }
    let gd = dilate(&gb, height, width, r);
    let pd = dilate(&pb, height, width, r);
    let hit_p = pb.iter().zip(&gd).filter(|(&a, &b)| a && b).count();
    let hit_g = gb.iter().zip(&pd).filter(|(&a, &b)| a && b).count();
    let precision = hit_p as f64 / np as f64;
    let recall = hit_g as f64 / ng as f64;
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// `ceil(0.008 * diagonal)`.
pub fn default_boundary_radius(height: usize, width: usize) -> usize {
    (0.008 * ((height * height + width * width) as f64).sqrt()).ceil() as usize
}

fn object_mask(m: &PanopticMask, id: u16) -> Vec<bool> {
    m.instances().iter().map(|&k| k == id).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct VideoScores {
    pub j_mean: f64,
    pub j_recall: f64,
    pub f_mean: f64,
    pub f_recall: f64,
    pub track_consistency: f64,
    pub objects: usize,
    /// Adjacent-frame object transitions, and those keeping their id.
    pub transitions: usize,
    pub consistent: usize,
}

impl VideoScores {
    pub fn jf_mean(&self) -> f64 {
        0.5 * (self.j_mean + self.f_mean)
    }

    /// Dataset-level scores: region and boundary scores averaged over all
    /// objects, consistency over all transitions.
    pub fn pool(videos: &[VideoScores]) -> VideoScores {
        let objects: usize = videos.iter().map(|v| v.objects).sum();
        let transitions: usize = videos.iter().map(|v| v.transitions).sum();
        let consistent: usize = videos.iter().map(|v| v.consistent).sum();
        let avg = |f: fn(&VideoScores) -> f64| {
            if objects == 0 {
                1.0
            } else {
                videos.iter().map(|v| f(v) * v.objects as f64).sum::<f64>() / objects as f64
            }
        };
        VideoScores {
            j_mean: avg(|v| v.j_mean),
            j_recall: avg(|v| v.j_recall),
            f_mean: avg(|v| v.f_mean),
            f_recall: avg(|v| v.f_recall),
            track_consistency: if transitions == 0 {
                1.0
            } else {
                consistent as f64 / transitions as f64
            },
            objects,
            transitions,
            consistent,
        }
    }
}

fn check_video(pred: &[PanopticMask], gt: &[PanopticMask]) -> Result<()> {
    if pred.len() != gt.len() {
        return Err(invalid(format!(
            "video has {} predicted and {} ground-truth frames",
            pred.len(),
            gt.len()
        )));
    }
    for (p, g) in pred.iter().zip(gt) {
        if p.height() != g.height() || p.width() != g.width() {
            return Err(invalid("video frames differ in size"));
        }
    }
    Ok(())
}

/// Region and boundary scores of one video. Ground-truth objects are the
/// nonzero instance ids; each is assigned at most one predicted id for the
/// whole video by maximizing total region similarity. Per-object scores average
/// over all frames; recalls count frames scoring above 0.5.
pub fn video_scores(
    pred: &[PanopticMask],
    gt: &[PanopticMask],
    radius: usize,
) -> Result<VideoScores> {
    check_video(pred, gt)?;
    let objects: Vec<u16> = gt
        .iter()
        .flat_map(|m| m.instance_ids())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let (consistent, transitions) = track_counts(pred, gt)?;
    let track = if transitions == 0 {
        1.0
    } else {
        consistent as f64 / transitions as f64
    };
    if objects.is_empty() || gt.is_empty() {
        return Ok(VideoScores {
            j_mean: 1.0,
            j_recall: 1.0,
            f_mean: 1.0,
            f_recall: 1.0,
            track_consistency: track,
            objects: 0,
            transitions,
            consistent,
        });
    }
    let candidates: Vec<u16> = pred
        .iter()
        .flat_map(|m| m.instance_ids())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let (h, w) = (gt[0].height(), gt[0].width());
    let gt_masks: Vec<Vec<Vec<bool>>> = objects
        .iter()
        .map(|&o| gt.iter().map(|m| object_mask(m, o)).collect())
        .collect();
    let empty = vec![false; h * w];
    // One empty column per object, so leaving an object unassigned is always an option.
    let cols = candidates.len() + objects.len();
    let j_table: Vec<Vec<Vec<f64>>> = gt_masks
        .iter()
        .map(|frames| {
            (0..cols)
                .map(|c| {
                    frames
                        .iter()
                        .zip(pred)
                        .map(|(g, p)| match candidates.get(c) {
                            Some(&id) => jaccard(&object_mask(p, id), g),
                            None => jaccard(&empty, g),
                        })
                        .collect()
                })
                .collect()
        })
        .collect();
    let weights = Matrix::from_rows(j_table.iter().map(|row| {
        row.iter()
            .map(|js| (js.iter().sum::<f64>() * 1e6).round() as i64)
            .collect::<Vec<_>>()
    }))
    .expect("rectangular");
    let (_, assign) = kuhn_munkres(&weights);
    let n_frames = gt.len() as f64;
    let (mut jm, mut jr, mut fm, mut fr) = (0.0, 0.0, 0.0, 0.0);
    for (o, &c) in assign.iter().enumerate() {
        let js = &j_table[o][c];
        jm += js.iter().sum::<f64>() / n_frames;
        jr += js.iter().filter(|&&j| j > 0.5).count() as f64 / n_frames;
        let fs: Vec<f64> = gt_masks[o]
            .iter()
            .zip(pred)
            .map(|(g, p)| {
                let pm = candidates
                    .get(c)
                    .map(|&id| object_mask(p, id))
                    .unwrap_or_else(|| empty.clone());
                boundary_f(&pm, g, h, w, radius)
            })
            .collect();
        fm += fs.iter().sum::<f64>() / n_frames;
        fr += fs.iter().filter(|&&f| f > 0.5).count() as f64 / n_frames;
    }
    let n = objects.len() as f64;
    Ok(VideoScores {
        j_mean: jm / n,
        j_recall: jr / n,
        f_mean: fm / n,
        f_recall: fr / n,
        track_consistency: track,
        objects: objects.len(),
        transitions,
        consistent,
    })
}

/// Fraction of adjacent-frame transitions, over all ground-truth objects
/// present in both frames, whose best-IoU predicted instance id is unchanged.
/// Frames where an object overlaps no predicted instance map to no id, which
/// never counts as unchanged. 1 when there are no transitions.
pub fn track_consistency(pred: &[PanopticMask], gt: &[PanopticMask]) -> Result<f64> {
    let (same, total) = track_counts(pred, gt)?;
    Ok(if total == 0 {
        1.0
    } else {
        same as f64 / total as f64
    })
}

/// `(consistent, total)` transitions behind [`track_consistency`].
pub fn track_counts(pred: &[PanopticMask], gt: &[PanopticMask]) -> Result<(usize, usize)> {
    check_video(pred, gt)?;
    let best = |p: &PanopticMask, g: &PanopticMask, o: u16| -> Option<Option<u16>> {
        let gm = object_mask(g, o);
        if !gm.iter().any(|&b| b) {
            return None;
        }
        let mut inter: BTreeMap<u16, usize> = BTreeMap::new();
        for (&k, &inside) in p.instances().iter().zip(&gm) {
            if inside && k != 0 {
                *inter.entry(k).or_insert(0) += 1;
            }
        }
        let areas: BTreeMap<u16, usize> =
            p.instances()
                .iter()
                .filter(|&&k| k != 0)
                .fold(BTreeMap::new(), |mut a, &k| {
                    *a.entry(k).or_insert(0) += 1;
                    a
                });
        let g_area = gm.iter().filter(|&&b| b).count();
        let pick = inter
            .iter()
            .map(|(&k, &n)| (n as f64 / (g_area + areas[&k] - n) as f64, k))
            .max_by(|a, b| a.0.total_cmp(&b.0).then(b.1.cmp(&a.1)))
            .map(|(_, k)| k);
        Some(pick)
    };
    let objects: BTreeSet<u16> = gt.iter().flat_map(|m| m.instance_ids()).collect();
    let (mut same, mut total) = (0usize, 0usize);
    for &o in &objects {
        let mapped: Vec<Option<Option<u16>>> =
            pred.iter().zip(gt).map(|(p, g)| best(p, g, o)).collect();
        for w in mapped.windows(2) {
            if let (Some(a), Some(b)) = (w[0], w[1]) {
                total += 1;
                same += usize::from(a.is_some() && a == b);
            }
        }
    }
    Ok((same, total))
}
