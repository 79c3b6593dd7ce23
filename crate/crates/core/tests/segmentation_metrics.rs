mod common;

use common::oracles::{oracle_pairs, oracle_pq};

use std::collections::BTreeSet;

use common::{blocky_mask, perturb, random_mask, rng};
use panoptic_diffusion::mask::PanopticMask;
use panoptic_diffusion::metrics::{
    binary_boundary, boundary_f, default_boundary_radius, jaccard, match_segments,
    panoptic_quality, track_consistency, video_scores, PqStats, VideoScores,
};
use proptest::prelude::*;
use rand::Rng;

#[test]
fn matching_agrees_with_the_all_pairs_oracle() {
    let mut r = rng(2024);
    let mut matched = 0;
    for i in 0..1500 {
        let gt = if i % 3 == 0 {
            random_mask(16, 16, 5, 8, &mut r)
        } else {
            blocky_mask(16, 16, 5, 8, &mut r)
        };
        let pred = match i % 4 {
            0 => blocky_mask(16, 16, 5, 8, &mut r),
            _ => {
                let p = r.random_range(0.0..0.5);
                perturb(&gt, p, &mut r)
                    .permute_instance_ids(&mut r)
                    .unwrap()
            }
        };
        let m = match_segments(&pred, &gt).unwrap();
        let (pairs, ug, up) = oracle_pairs(&pred, &gt);
        let mut got = m.pairs.clone();
        got.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.cmp(&b.1)));
        assert_eq!(got, pairs, "case {i}");
        assert_eq!(m.unmatched_gt, ug, "case {i}");
        assert_eq!(m.unmatched_pred, up, "case {i}");
        matched += pairs.len();
    }
    assert!(
        matched > 1000,
        "the oracle cases exercise matching ({matched} pairs)"
    );
}

#[test]
fn dataset_pq_matches_the_oracle() {
    let is_thing = [false, false, false, true, true];
    let mut r = rng(7);
    for _ in 0..50 {
        let gts: Vec<PanopticMask> = (0..5).map(|_| blocky_mask(16, 16, 5, 8, &mut r)).collect();
        let preds: Vec<PanopticMask> = gts.iter().map(|g| perturb(g, 0.2, &mut r)).collect();
        let pairs: Vec<(&PanopticMask, &PanopticMask)> = preds.iter().zip(&gts).collect();
        let got = panoptic_quality(pairs.iter().copied(), &is_thing)
            .unwrap()
            .pq;
        let want = oracle_pq(&pairs, &is_thing);
        match (got, want) {
            (Some(a), Some(b)) => assert!((a - b).abs() < 1e-12, "{a} vs {b}"),
            (a, b) => assert_eq!(a, b),
        }
    }
}

#[test]
fn a_mask_scores_perfectly_against_itself() {
    let is_thing = [false, false, false, true, true];
    let mut r = rng(1);
    for _ in 0..100 {
        let m = blocky_mask(16, 16, 5, 8, &mut r);
        let rep = panoptic_quality([(&m, &m)], &is_thing).unwrap();
        if m.segment_areas().is_empty() {
            assert_eq!(rep.pq, None);
        } else {
            assert_eq!(rep.pq, Some(1.0));
        }
    }
}

#[test]
fn hand_case_one_true_positive_and_one_miss() {
    // gt: class 1 instance 1 on 3 pixels, instance 2 on 2 pixels.
    // pred: class 1 instance 5 on 5 pixels covering gt instance 1 -> IoU 3/5.
    let gt = PanopticMask::new(
        1,
        8,
        2,
        8,
        vec![1, 1, 1, 0, 0, 0, 1, 1],
        vec![1, 1, 1, 0, 0, 0, 2, 2],
    )
    .unwrap();
    let pred = PanopticMask::new(
        1,
        8,
        2,
        8,
        vec![1, 1, 1, 1, 1, 0, 0, 0],
        vec![5, 5, 5, 5, 5, 0, 0, 0],
    )
    .unwrap();
    let m = match_segments(&pred, &gt).unwrap();
    assert_eq!(m.pairs, vec![((1, 1), (1, 5), 0.6)]);
    assert_eq!(m.unmatched_gt, vec![(1, 2)]);
    assert!(m.unmatched_pred.is_empty());
    let pq = panoptic_quality([(&pred, &gt)], &[false, true])
        .unwrap()
        .pq
        .unwrap();
    // 0.6 / (1 + 0.5): the nearest double to 0.4, up to one rounding step.
    assert!((pq - 0.4).abs() <= f64::EPSILON, "{pq}");
}

#[test]
fn stuff_instance_ids_are_ignored() {
    let gt = PanopticMask::new(1, 4, 3, 2, vec![1, 1, 2, 2], vec![0, 0, 1, 1]).unwrap();
    let pred = PanopticMask::new(1, 4, 3, 2, vec![1, 1, 2, 2], vec![1, 2, 2, 2]).unwrap();
    let mut s = PqStats::default();
    s.add_image(&pred, &gt, &[false, false, true]).unwrap();
    let rep = s.report(&[false, false, true]);
    assert_eq!(rep.pq_stuff, Some(1.0));
    assert_eq!(rep.pq_thing, Some(1.0));
}

#[test]
fn mismatched_sizes_are_rejected() {
    let a = PanopticMask::empty(2, 3, 2, 1);
    let b = PanopticMask::empty(3, 2, 2, 1);
    assert!(match_segments(&a, &b).is_err());
}

fn disk_oracle_f(pred: &[bool], gt: &[bool], h: usize, w: usize, r: usize) -> f64 {
    let pb = binary_boundary(pred, h, w);
    let gb = binary_boundary(gt, h, w);
    let pts = |b: &[bool]| -> Vec<(i64, i64)> {
        (0..h * w)
            .filter(|&i| b[i])
            .map(|i| ((i / w) as i64, (i % w) as i64))
            .collect()
    };
    let (pp, gp) = (pts(&pb), pts(&gb));
    if pp.is_empty() && gp.is_empty() {
        return 1.0;
    }
    if pp.is_empty() || gp.is_empty() {
        return 0.0;
    }
    let near = |a: (i64, i64), set: &[(i64, i64)]| {
        set.iter()
            .any(|b| (a.0 - b.0).pow(2) + (a.1 - b.1).pow(2) <= (r * r) as i64)
    };
    let prec = pp.iter().filter(|&&a| near(a, &gp)).count() as f64 / pp.len() as f64;
    let rec = gp.iter().filter(|&&a| near(a, &pp)).count() as f64 / gp.len() as f64;
    if prec + rec == 0.0 {
        0.0
    } else {
        2.0 * prec * rec / (prec + rec)
    }
}

#[test]
fn boundary_f_matches_a_distance_oracle() {
    let mut r = rng(9);
    for _ in 0..300 {
        let (h, w) = (r.random_range(2..14), r.random_range(2..14));
        let a: Vec<bool> = (0..h * w).map(|_| r.random_bool(0.4)).collect();
        let b: Vec<bool> = (0..h * w).map(|_| r.random_bool(0.4)).collect();
        let rad = r.random_range(0..4);
        assert!((boundary_f(&a, &b, h, w, rad) - disk_oracle_f(&a, &b, h, w, rad)).abs() < 1e-12);
        let jo = {
            let i = a.iter().zip(&b).filter(|(x, y)| **x && **y).count();
            let u = a.iter().zip(&b).filter(|(x, y)| **x || **y).count();
            if u == 0 {
                1.0
            } else {
                i as f64 / u as f64
            }
        };
        assert_eq!(jaccard(&a, &b), jo);
    }
}

#[test]
fn default_radius_is_a_fraction_of_the_diagonal() {
    assert_eq!(default_boundary_radius(64, 64), 1);
    assert_eq!(default_boundary_radius(480, 854), 8);
}

fn video(masks: Vec<Vec<(u16, u16)>>, len: usize) -> Vec<PanopticMask> {
    masks
        .into_iter()
        .map(|px| {
            assert_eq!(px.len(), len);
            let (c, k): (Vec<u16>, Vec<u16>) = px.into_iter().unzip();
            PanopticMask::new(1, len, 3, 8, c, k).unwrap()
        })
        .collect()
}

#[test]
fn ground_truth_scores_perfectly_on_every_video_metric() {
    let mut r = rng(4);
    for _ in 0..20 {
        let frames: Vec<PanopticMask> = (0..5).map(|_| blocky_mask(12, 12, 5, 8, &mut r)).collect();
        let s = video_scores(&frames, &frames, 1).unwrap();
        assert_eq!((s.j_mean, s.f_mean, s.track_consistency), (1.0, 1.0, 1.0));
        let permuted = {
            let ids: BTreeSet<u16> = frames.iter().flat_map(|m| m.instance_ids()).collect();
            let map = panoptic_diffusion::mask::random_instance_map(&ids, 8, &mut r).unwrap();
            frames
                .iter()
                .map(|m| m.map_instances(&map))
                .collect::<Vec<_>>()
        };
        let s = video_scores(&permuted, &frames, 1).unwrap();
        assert_eq!(
            (s.j_mean, s.track_consistency),
            (1.0, 1.0),
            "one fixed relabelling is free"
        );
    }
}

#[test]
fn swapping_ids_midway_breaks_tracks_but_not_frames() {
    let a = vec![(1, 1), (1, 1), (0, 0), (1, 2), (1, 2)];
    let b = vec![(1, 2), (1, 2), (0, 0), (1, 1), (1, 1)];
    let gt = video(vec![a.clone(), a.clone(), a.clone(), a.clone()], 5);
    let pred = video(vec![a.clone(), a.clone(), b.clone(), b], 5);
    assert_eq!(track_consistency(&gt, &gt).unwrap(), 1.0);
    let t = track_consistency(&pred, &gt).unwrap();
    assert!((t - 4.0 / 6.0).abs() < 1e-12, "{t}");
    let s = video_scores(&pred, &gt, 0).unwrap();
    assert!((s.j_mean - 0.5).abs() < 1e-12, "{}", s.j_mean);
    assert_eq!((s.transitions, s.consistent), (6, 4));
}

/// Best total J over every injective object -> predicted-id assignment.
fn brute_force_j(pred: &[PanopticMask], gt: &[PanopticMask]) -> f64 {
    let objects: Vec<u16> = gt
        .iter()
        .flat_map(|m| m.instance_ids())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let cands: Vec<u16> = pred
        .iter()
        .flat_map(|m| m.instance_ids())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let j = |o: u16, c: Option<u16>| -> f64 {
        pred.iter()
            .zip(gt)
            .map(|(p, g)| {
                let gm: Vec<bool> = g.instances().iter().map(|&k| k == o).collect();
                let pm: Vec<bool> = p.instances().iter().map(|&k| Some(k) == c).collect();
                jaccard(&pm, &gm)
            })
            .sum::<f64>()
            / gt.len() as f64
    };
    fn search(
        i: usize,
        objects: &[u16],
        cands: &[u16],
        used: &mut Vec<bool>,
        j: &dyn Fn(u16, Option<u16>) -> f64,
    ) -> f64 {
        if i == objects.len() {
            return 0.0;
        }
        let mut best = j(objects[i], None) + search(i + 1, objects, cands, used, j);
        for c in 0..cands.len() {
            if !used[c] {
                used[c] = true;
                best = best
                    .max(j(objects[i], Some(cands[c])) + search(i + 1, objects, cands, used, j));
                used[c] = false;
            }
        }
        best
    }
    let total = search(0, &objects, &cands, &mut vec![false; cands.len()], &j);
    if objects.is_empty() {
        1.0
    } else {
        total / objects.len() as f64
    }
}

#[test]
fn region_scores_use_the_optimal_assignment() {
    let mut r = rng(31);
    for _ in 0..100 {
        let gt: Vec<PanopticMask> = (0..3).map(|_| blocky_mask(8, 8, 3, 4, &mut r)).collect();
        let pred: Vec<PanopticMask> = (0..3).map(|_| blocky_mask(8, 8, 3, 4, &mut r)).collect();
        let s = video_scores(&pred, &gt, 1).unwrap();
        let want = brute_force_j(&pred, &gt);
        assert!((s.j_mean - want).abs() < 1e-5, "{} vs {want}", s.j_mean);
    }
}

#[test]
fn pooling_weights_objects_and_transitions() {
    let a = VideoScores {
        j_mean: 1.0,
        j_recall: 1.0,
        f_mean: 1.0,
        f_recall: 1.0,
        track_consistency: 1.0,
        objects: 1,
        transitions: 2,
        consistent: 2,
    };
    let b = VideoScores {
        j_mean: 0.0,
        j_recall: 0.0,
        f_mean: 0.5,
        f_recall: 0.0,
        track_consistency: 0.0,
        objects: 3,
        transitions: 6,
        consistent: 0,
    };
    let p = VideoScores::pool(&[a, b]);
    assert_eq!(p.j_mean, 0.25);
    assert_eq!(p.f_mean, 0.625);
    assert_eq!(p.track_consistency, 0.25);
    assert_eq!(p.objects, 4);
}

proptest! {
    #[test]
    fn pq_ignores_instance_relabelling(seed in 0u64..10_000) {
        let mut r = rng(seed);
        let is_thing = [false, false, false, true, true];
        let gt = blocky_mask(16, 16, 5, 8, &mut r);
        let pred = perturb(&gt, 0.15, &mut r);
        let base = panoptic_quality([(&pred, &gt)], &is_thing).unwrap();
        let p2 = pred.permute_instance_ids(&mut r).unwrap();
        let g2 = gt.permute_instance_ids(&mut r).unwrap();
        let moved = panoptic_quality([(&p2, &g2)], &is_thing).unwrap();
        let close = |a: Option<f64>, b: Option<f64>| match (a, b) {
            (Some(a), Some(b)) => (a - b).abs() <= 1e-12,
            (a, b) => a == b,
        };
        prop_assert!(close(base.pq, moved.pq), "{:?} vs {:?}", base.pq, moved.pq);
        prop_assert!(close(base.pq_thing, moved.pq_thing), "{:?} vs {:?}", base.pq_thing, moved.pq_thing);
    }

    #[test]
    fn pq_is_a_fraction(seed in 0u64..10_000) {
        let mut r = rng(seed);
        let gt = random_mask(6, 6, 5, 8, &mut r);
        let pred = blocky_mask(6, 6, 5, 8, &mut r);
        if let Some(pq) = panoptic_quality([(&pred, &gt)], &[false, false, false, true, true]).unwrap().pq {
            prop_assert!((0.0..=1.0).contains(&pq));
        }
    }
}
