//! Evaluation metrics: pixel accuracy and IoU from confusion matrices,
//! Knowledgeability, Panoptic Quality, Part-aware PQ, Part IoU and the
//! artifact Impact score.

use std::collections::{BTreeMap, HashMap};

use serde::Serialize;

use crate::error::{invalid, Result};
use crate::panoptic_uid::{decode, PanopticSpec};
use crate::raster_io::{ConfusionMatrix, UidRaster};

pub const DEFAULT_THRESHOLD_COUNT: usize = 10;

/// Per-class IoU with a validity mask; invalid classes are absent from both
/// ground truth and prediction and stay out of every mean.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IouTable {
    pub iou: Vec<f64>,
    pub valid: Vec<bool>,
}

impl IouTable {
    pub fn valid_values(&self) -> Vec<f64> {
        self.iou
            .iter()
            .zip(&self.valid)
            .filter_map(|(&v, &ok)| ok.then_some(v))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SemsegScores {
    pub per_class_iou: Vec<Option<f64>>,
    pub per_class_pa: Vec<Option<f64>>,
    pub miou: Option<f64>,
    pub mpa: Option<f64>,
}

impl SemsegScores {
    pub fn iou_table(&self) -> IouTable {
        IouTable {
            iou: self
                .per_class_iou
                .iter()
                .map(|v| v.unwrap_or(0.0))
                .collect(),
            valid: self.per_class_iou.iter().map(Option::is_some).collect(),
        }
    }
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Per-class IoU and pixel accuracy plus their means.
///
/// A class is left out of the IoU mean when its row and column are both
/// empty, and out of the accuracy mean when its row is empty.
pub fn miou_mpa(cm: &ConfusionMatrix) -> SemsegScores {
    let n = cm.classes();
    let mut per_class_iou = Vec::with_capacity(n);
    let mut per_class_pa = Vec::with_capacity(n);
    for c in 0..n {
        let tp = cm.get(c, c);
        let row = cm.row_sum(c);
        let col = cm.col_sum(c);
        let union = row + col - tp;
        per_class_iou.push((union > 0).then(|| tp as f64 / union as f64));
        per_class_pa.push((row > 0).then(|| tp as f64 / row as f64));
    }
    SemsegScores {
        miou: mean(per_class_iou.iter().flatten().copied()),
        mpa: mean(per_class_pa.iter().flatten().copied()),
        per_class_iou,
        per_class_pa,
    }
}

/// Thresholds `{0, 1/n, ..., 1 - 1/n}`.
pub fn equidistant_thresholds(count: usize) -> Vec<f64> {
    (0..count).map(|i| i as f64 / count as f64).collect()
}

/// Threshold-averaged, `budget`-normalized count of classes with IoU
/// strictly above each threshold.
pub fn knowledgeability(ious: &[f64], budget: usize, threshold_count: usize) -> Result<f64> {
    if budget == 0 {
        return Err(invalid("knowledgeability class budget must be at least 1"));
    }
    if threshold_count == 0 {
        return Err(invalid("knowledgeability needs at least one threshold"));
    }
    let total: f64 = equidistant_thresholds(threshold_count)
        .into_iter()
        .map(|t| {
            let above = ious.iter().filter(|&&v| v > t).count();
            above.min(budget) as f64 / budget as f64
        })
        .sum();
    Ok(total / threshold_count as f64)
}

// ---------------------------------------------------------------- PQ -----

/// One panoptic segment. `pixels` are sorted raster indices; `parts`, when
/// present, holds the part id (0 = void part) of each pixel in order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segment {
    pub class: u16,
    pub instance: Option<u16>,
    pub pixels: Vec<u32>,
    pub parts: Option<Vec<u8>>,
}

/// The segments of one image plus the ground-truth void region.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentSet {
    pub pixel_count: usize,
    pub segments: Vec<Segment>,
    pub void_pixels: Vec<u32>,
}

impl SegmentSet {
    /// Checks bounds, sortedness, part alignment and mask disjointness.
    pub fn new(pixel_count: usize, segments: Vec<Segment>, void_pixels: Vec<u32>) -> Result<Self> {
        let mut owner = vec![false; pixel_count];
        let mut claim = |p: u32, what: &str| -> Result<()> {
            let slot = owner
                .get_mut(p as usize)
                .ok_or_else(|| invalid(format!("{what} pixel {p} out of bounds")))?;
            if *slot {
                return Err(invalid(format!("pixel {p} belongs to two segments")));
            }
            *slot = true;
            Ok(())
        };
        for seg in &segments {
            if let Some(parts) = &seg.parts {
                if parts.len() != seg.pixels.len() {
                    return Err(invalid("segment part map does not match its mask"));
                }
            }
            if seg.pixels.windows(2).any(|w| w[0] >= w[1]) {
                return Err(invalid("segment pixels must be strictly increasing"));
            }
            for &p in &seg.pixels {
                claim(p, "segment")?;
            }
        }
        for &p in &void_pixels {
            claim(p, "void")?;
        }
        Ok(SegmentSet {
            pixel_count,
            segments,
            void_pixels,
        })
    }

    /// Splits a UID raster into segments: one per stuff class, one per
    /// (thing class, instance). Void classes and thing pixels without an
    /// instance id form the void region.
    pub fn from_uid_raster(raster: &UidRaster, spec: &PanopticSpec) -> Result<Self> {
        let mut index: BTreeMap<(u8, Option<u16>), usize> = BTreeMap::new();
        let mut segments: Vec<Segment> = Vec::new();
        let mut void_pixels = Vec::new();
        for (p, &value) in raster.data().iter().enumerate() {
            let uid = decode(value)?;
            let sid = uid.semantic;
            let key = if spec.is_stuff(sid) {
                (sid, None)
            } else if spec.is_thing(sid) && uid.instance.is_some() {
                (sid, uid.instance)
            } else if spec.is_void(sid) || spec.is_thing(sid) {
                void_pixels.push(p as u32);
                continue;
            } else {
                return Err(invalid(format!("semantic id {sid} is not declared")));
            };
            let has_parts = spec.part_count(sid).is_some();
            let slot = *index.entry(key).or_insert_with(|| {
                segments.push(Segment {
                    class: sid as u16,
                    instance: key.1,
                    pixels: Vec::new(),
                    parts: has_parts.then(Vec::new),
                });
                segments.len() - 1
            });
            let seg = &mut segments[slot];
            seg.pixels.push(p as u32);
            if let Some(parts) = seg.parts.as_mut() {
                parts.push(uid.part.unwrap_or(0));
            } else if uid.part.is_some_and(|p| p != 0) {
                return Err(invalid(format!(
                    "uid {value} has part digits but class {sid} declares no parts"
                )));
            }
        }
        SegmentSet::new(raster.len(), segments, void_pixels)
    }
}

/// Per-class PQ accumulator. `score_sum` holds Σ IoU over true positives
/// (or Σ part-aware IoU for PartPQ).
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct ClassPq {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub score_sum: f64,
}

impl ClassPq {
    pub fn quality(&self) -> Option<f64> {
        let denom = self.tp as f64 + 0.5 * self.fp as f64 + 0.5 * self.fn_ as f64;
        (denom > 0.0).then(|| self.score_sum / denom)
    }
}

/// Mergeable PQ statistics keyed by scene class.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct PqStats {
    pub per_class: BTreeMap<u16, ClassPq>,
    /// Matched `(gt segment, pred segment)` indices of the last image, kept
    /// for inspection; empty after merging.
    #[serde(skip)]
    pub matches: Vec<(usize, usize)>,
}

impl PqStats {
    pub fn merge(&mut self, other: &PqStats) {
        for (class, s) in &other.per_class {
            let e = self.per_class.entry(*class).or_default();
            e.tp += s.tp;
            e.fp += s.fp;
            e.fn_ += s.fn_;
            e.score_sum += s.score_sum;
        }
        self.matches.clear();
    }

    /// Mean of per-class quality over classes with at least one segment.
    pub fn quality(&self) -> Option<f64> {
        mean(self.per_class.values().filter_map(ClassPq::quality))
    }

    pub fn per_class_quality(&self) -> BTreeMap<u16, f64> {
        self.per_class
            .iter()
            .filter_map(|(c, s)| s.quality().map(|q| (*c, q)))
            .collect()
    }
}

const NONE_SEG: u32 = u32::MAX;

fn segment_map(set: &SegmentSet) -> Vec<u32> {
    let mut map = vec![NONE_SEG; set.pixel_count];
    for (i, seg) in set.segments.iter().enumerate() {
        for &p in &seg.pixels {
            map[p as usize] = i as u32;
        }
    }
    map
}

type PartScore<'a> = dyn Fn(&Segment, &Segment, f64) -> Result<f64> + 'a;

fn panoptic_match(gt: &SegmentSet, pred: &SegmentSet, score: &PartScore<'_>) -> Result<PqStats> {
    if gt.pixel_count != pred.pixel_count {
        return Err(invalid("ground truth and prediction differ in size"));
    }
    let gt_map = segment_map(gt);
    let mut is_void = vec![false; gt.pixel_count];
    for &p in &gt.void_pixels {
        is_void[p as usize] = true;
    }

    let mut intersections: HashMap<(usize, usize), u64> = HashMap::new();
    let mut pred_area = vec![0u64; pred.segments.len()];
    let mut pred_void = vec![0u64; pred.segments.len()];
    for (j, seg) in pred.segments.iter().enumerate() {
        for &p in &seg.pixels {
            if is_void[p as usize] {
                pred_void[j] += 1;
                continue;
            }
            pred_area[j] += 1;
            let g = gt_map[p as usize];
            if g != NONE_SEG {
                *intersections.entry((g as usize, j)).or_default() += 1;
            }
        }
    }

    let mut stats = PqStats::default();
    let mut gt_matched = vec![false; gt.segments.len()];
    let mut pred_matched = vec![false; pred.segments.len()];
    let mut pairs: Vec<_> = intersections.into_iter().collect();
    pairs.sort_unstable();
    for ((g, j), inter) in pairs {
        let (gs, ps) = (&gt.segments[g], &pred.segments[j]);
        if gs.class != ps.class {
            continue;
        }
        let union = gs.pixels.len() as u64 + pred_area[j] - inter;
        let iou = inter as f64 / union as f64;
        if iou > 0.5 {
            if gt_matched[g] || pred_matched[j] {
                return Err(invalid("segment matched twice; masks overlap"));
            }
            gt_matched[g] = true;
            pred_matched[j] = true;
            stats.matches.push((g, j));
            let e = stats.per_class.entry(gs.class).or_default();
            e.tp += 1;
            e.score_sum += score(gs, ps, iou)?;
        }
    }
    for (g, seg) in gt.segments.iter().enumerate() {
        if !gt_matched[g] {
            stats.per_class.entry(seg.class).or_default().fn_ += 1;
        }
    }
    for (j, seg) in pred.segments.iter().enumerate() {
        if pred_matched[j] {
            continue;
        }
        // predictions lying mostly on unlabeled ground truth are not penalized
        let total = pred_area[j] + pred_void[j];
        if total > 0 && pred_void[j] * 2 > total {
            continue;
        }
        stats.per_class.entry(seg.class).or_default().fp += 1;
    }
    stats.matches.sort_unstable();
    Ok(stats)
}

/// Panoptic Quality statistics for one image. Pairs of the same class with
/// IoU above 0.5 are true positives.
pub fn pq(gt: &SegmentSet, pred: &SegmentSet) -> Result<PqStats> {
    panoptic_match(gt, pred, &|_, _, iou| Ok(iou))
}

/// Part-aware PQ for one image. Matching is identical to [`pq`]; the score
/// of a matched pair of a class listed in `parts_spec` is the mean part IoU
/// over the union of both masks. Other classes, including ones whose
/// segments carry part labels, score by instance IoU as in [`pq`].
pub fn part_pq(
    gt: &SegmentSet,
    pred: &SegmentSet,
    parts_spec: &BTreeMap<u16, u8>,
) -> Result<PqStats> {
    for set in [gt, pred] {
        for seg in &set.segments {
            check_parts(seg, parts_spec)?;
        }
    }
    panoptic_match(gt, pred, &|g, p, iou| match parts_spec.get(&g.class) {
        None => Ok(iou),
        Some(&n) => Ok(mean_part_iou(g, p, n).unwrap_or(iou)),
    })
}

fn check_parts(seg: &Segment, parts_spec: &BTreeMap<u16, u8>) -> Result<()> {
    let Some(parts) = &seg.parts else {
        return Ok(());
    };
    // part labels of classes missing from `parts_spec` are ignored
    match parts_spec.get(&seg.class) {
        Some(&n) if parts.iter().any(|&p| p > n) => Err(invalid(format!(
            "class {} has a part label above its {n} declared parts",
            seg.class
        ))),
        _ => Ok(()),
    }
}

/// Mean IoU over part classes `1..=n` that occur in either segment. Pixels
/// with a void gt part are skipped. `None` when no part class occurs.
fn mean_part_iou(gt: &Segment, pred: &Segment, n: u8) -> Option<f64> {
    const OUTSIDE: u8 = u8::MAX;
    let part_at = |seg: &Segment, i: usize| seg.parts.as_ref().map_or(0, |p| p[i]);
    // merge the two sorted masks
    let mut inter = vec![0u64; n as usize + 1];
    let mut union = vec![0u64; n as usize + 1];
    let (mut i, mut j) = (0, 0);
    while i < gt.pixels.len() || j < pred.pixels.len() {
        let (gp, pp) = match (gt.pixels.get(i), pred.pixels.get(j)) {
            (Some(a), Some(b)) if a == b => {
                let r = (part_at(gt, i), part_at(pred, j));
                i += 1;
                j += 1;
                r
            }
            (Some(a), Some(b)) if a < b => {
                i += 1;
                (part_at(gt, i - 1), OUTSIDE)
            }
            (Some(_), None) => {
                i += 1;
                (part_at(gt, i - 1), OUTSIDE)
            }
            _ => {
                j += 1;
                (OUTSIDE, part_at(pred, j - 1))
            }
        };
        if gp == 0 {
            continue;
        }
        for part in [gp, pp] {
            if (1..=n).contains(&part) {
                union[part as usize] += 1;
            }
        }
        if gp == pp {
            inter[gp as usize] += 1;
            union[gp as usize] -= 1;
        }
    }
    mean(
        (1..=n as usize)
            .filter(|&p| union[p] > 0)
            .map(|p| inter[p] as f64 / union[p] as f64),
    )
}

/// Part IoU accumulator: per (scene class, part) true positives, false
/// positives and false negatives.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct PartIouStats {
    pub counts: BTreeMap<(u16, u8), [u64; 3]>,
}

impl PartIouStats {
    /// Adds one image. Ground-truth pixels of a class with parts whose part
    /// id is void are skipped.
    pub fn accumulate(
        &mut self,
        gt: &UidRaster,
        pred: &UidRaster,
        parts_spec: &BTreeMap<u16, u8>,
    ) -> Result<()> {
        if gt.width() != pred.width() || gt.height() != pred.height() {
            return Err(invalid("ground truth and prediction differ in size"));
        }
        let part_label = |value: u32| -> Result<Option<(u16, u8)>> {
            let uid = decode(value)?;
            let sid = uid.semantic as u16;
            Ok(parts_spec
                .contains_key(&sid)
                .then(|| (sid, uid.part.unwrap_or(0))))
        };
        for (&g, &p) in gt.data().iter().zip(pred.data()) {
            let g = part_label(g)?;
            if matches!(g, Some((_, 0))) {
                continue;
            }
            let p = part_label(p)?.filter(|&(_, part)| part != 0);
            for (label, field) in [(g, 2usize), (p, 1)] {
                if let Some((sid, part)) = label {
                    if part > parts_spec[&sid] {
                        return Err(invalid(format!(
                            "class {sid} part {part} exceeds declared count"
                        )));
                    }
                    if g != p {
                        self.counts.entry((sid, part)).or_default()[field] += 1;
                    }
                }
            }
            if let (Some(key), true) = (g, g == p) {
                self.counts.entry(key).or_default()[0] += 1;
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &PartIouStats) {
        for (k, v) in &other.counts {
            let e = self.counts.entry(*k).or_default();
            for i in 0..3 {
                e[i] += v[i];
            }
        }
    }

    /// Mean part IoU per scene class over the parts that occur.
    pub fn per_class(&self) -> BTreeMap<u16, f64> {
        let mut acc: BTreeMap<u16, (f64, usize)> = BTreeMap::new();
        for (&(sid, _), &[tp, fp, fn_]) in &self.counts {
            let union = tp + fp + fn_;
            if union > 0 {
                let e = acc.entry(sid).or_default();
                e.0 += tp as f64 / union as f64;
                e.1 += 1;
            }
        }
        acc.into_iter()
            .map(|(k, (s, n))| (k, s / n as f64))
            .collect()
    }
}

/// Per scene class mean part IoU for one pair of UID rasters.
pub fn part_iou(
    gt: &UidRaster,
    pred: &UidRaster,
    parts_spec: &BTreeMap<u16, u8>,
) -> Result<BTreeMap<u16, f64>> {
    let mut stats = PartIouStats::default();
    stats.accumulate(gt, pred, parts_spec)?;
    Ok(stats.per_class())
}

/// Relative mIoU degradation under a visual artifact in percent, truncated
/// to be non-positive.
pub fn impact(miou_none: f64, miou_low: f64, miou_high: f64) -> Result<f64> {
    if [miou_none, miou_low, miou_high]
        .iter()
        .any(|v| !(*v >= 0.0))
    {
        return Err(invalid("impact inputs must be non-negative"));
    }
    let reference = miou_none.max(miou_low);
    if reference == 0.0 {
        return Err(invalid("impact undefined when max(none, low) is zero"));
    }
    Ok((100.0 * miou_low.min(miou_high) / reference - 100.0).min(0.0))
}
