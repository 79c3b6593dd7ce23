//! Panoptic quality for images; region, boundary and tracking scores for
//! videos; CSV and text reports.

mod report;
mod video;

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::mask::{PanopticMask, SegmentId};

pub use report::{pq_csv, pq_table, video_csv, video_table};
pub use video::{
    binary_boundary, boundary_f, default_boundary_radius, jaccard, track_consistency, track_counts,
    video_scores, VideoScores,
};

/// Matched `(gt, pred, IoU)` triples plus the unmatched segments of each side.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SegmentMatch {
    pub pairs: Vec<(SegmentId, SegmentId, f64)>,
    pub unmatched_gt: Vec<SegmentId>,
    pub unmatched_pred: Vec<SegmentId>,
}

fn same_dims(a: &PanopticMask, b: &PanopticMask) -> Result<()> {
    if a.height() != b.height() || a.width() != b.width() {
        return Err(invalid(format!(
            "masks differ in size: {}x{} vs {}x{}",
            a.height(),
            a.width(),
            b.height(),
            b.width()
        )));
    }
    Ok(())
}

/// Pairs same-class segments whose IoU exceeds 0.5 (such pairs are unique).
/// Null-class pixels form no segment on either side.
pub fn match_segments(pred: &PanopticMask, gt: &PanopticMask) -> Result<SegmentMatch> {
    same_dims(pred, gt)?;
    let gt_area = gt.segment_areas();
    let pred_area = pred.segment_areas();
    let mut inter: HashMap<(SegmentId, SegmentId), usize> = HashMap::new();
    for i in 0..gt.num_pixels() {
        let g = (gt.classes()[i], gt.instances()[i]);
        let p = (pred.classes()[i], pred.instances()[i]);
        if g.0 != 0 && g.0 == p.0 {
            *inter.entry((g, p)).or_insert(0) += 1;
        }
    }
    let mut out = SegmentMatch::default();
    let mut matched_pred = BTreeMap::new();
    let mut matched_gt = BTreeMap::new();
    let mut keys: Vec<_> = inter.into_iter().collect();
    keys.sort_unstable();
    for ((g, p), n) in keys {
        let union = gt_area[&g] + pred_area[&p] - n;
        let iou = n as f64 / union as f64;
        if iou > 0.5 {
            out.pairs.push((g, p, iou));
            matched_gt.insert(g, ());
            matched_pred.insert(p, ());
        }
    }
    out.unmatched_gt = gt_area
        .keys()
        .filter(|k| !matched_gt.contains_key(k))
        .copied()
        .collect();
    out.unmatched_pred = pred_area
        .keys()
        .filter(|k| !matched_pred.contains_key(k))
        .copied()
        .collect();
    Ok(out)
}

/// Per-class true/false positives, false negatives and summed matched IoU.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ClassStats {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub iou_sum: f64,
}

impl ClassStats {
    /// `None` for a class with no segments on either side.
    pub fn pq(&self) -> Option<f64> {
        let denom = self.tp as f64 + 0.5 * (self.fp + self.fn_) as f64;
        (denom > 0.0).then(|| self.iou_sum / denom)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PqStats {
    pub per_class: BTreeMap<u16, ClassStats>,
}

impl PqStats {
    pub fn add(&mut self, m: &SegmentMatch) {
        for &((c, _), _, iou) in &m.pairs {
            let s = self.per_class.entry(c).or_default();
            s.tp += 1;
            s.iou_sum += iou;
        }
        for &(c, _) in &m.unmatched_gt {
            self.per_class.entry(c).or_default().fn_ += 1;
        }
        for &(c, _) in &m.unmatched_pred {
            self.per_class.entry(c).or_default().fp += 1;
        }
    }

    /// Accumulates one image. Instance ids on stuff classes are ignored.
    pub fn add_image(
        &mut self,
        pred: &PanopticMask,
        gt: &PanopticMask,
        is_thing: &[bool],
    ) -> Result<()> {
        let m = match_segments(
            &pred.with_stuff_instances_cleared(is_thing),
            &gt.with_stuff_instances_cleared(is_thing),
        )?;
        self.add(&m);
        Ok(())
    }

    pub fn merge(&mut self, other: &PqStats) {
        for (&c, s) in &other.per_class {
            let e = self.per_class.entry(c).or_default();
            e.tp += s.tp;
            e.fp += s.fp;
            e.fn_ += s.fn_;
            e.iou_sum += s.iou_sum;
        }
    }

    pub fn report(&self, is_thing: &[bool]) -> PqReport {
        let mean = |filter: &dyn Fn(u16) -> bool| {
            let v: Vec<f64> = self
                .per_class
                .iter()
                .filter(|(&c, _)| filter(c))
                .filter_map(|(_, s)| s.pq())
                .collect();
            (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
        };
        let thing = |c: u16| is_thing.get(usize::from(c)).copied().unwrap_or(false);
        PqReport {
            pq: mean(&|_| true),
            pq_thing: mean(&|c| thing(c)),
            pq_stuff: mean(&|c| !thing(c)),
            per_class: self.per_class.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PqReport {
    pub pq: Option<f64>,
    pub pq_thing: Option<f64>,
    pub pq_stuff: Option<f64>,
    pub per_class: BTreeMap<u16, ClassStats>,
}

/// PQ over a dataset of `(pred, gt)` pairs.
pub fn panoptic_quality<'a, I>(pairs: I, is_thing: &[bool]) -> Result<PqReport>
where
    I: IntoIterator<Item = (&'a PanopticMask, &'a PanopticMask)>,
{
    let mut stats = PqStats::default();
    for (p, g) in pairs {
        stats.add_image(p, g, is_thing)?;
    }
    Ok(stats.report(is_thing))
}
