//! Pseudo-labels from bounding boxes and image tags.
//!
//! Every annotation casts one vote on each pixel it covers; a pixel's votes
//! are normalized into a categorical distribution over the dataset labels.
//! Channel 0 is "unlabeled" and holds all the mass of pixels nobody voted
//! for. Refinement keeps a pixel only where the model agrees with the
//! pseudo-label confidently enough.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::conversion::{argmax, Loss, LOG_FLOOR};
use crate::error::{invalid, Error, Result};
use crate::raster_io::{ClassRaster, ProbRaster};

pub const UNLABELED: usize = 0;
pub const DEFAULT_REFINE_THRESHOLD: f64 = 0.9;

/// A weak annotation. Box coordinates are half-open pixel ranges.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum WeakAnnotation {
    Box {
        label: usize,
        x0: usize,
        y0: usize,
        x1: usize,
        y1: usize,
    },
    Tag {
        label: usize,
    },
}

impl WeakAnnotation {
    pub fn label(&self) -> usize {
        match *self {
            WeakAnnotation::Box { label, .. } | WeakAnnotation::Tag { label } => label,
        }
    }

    /// Covered rectangle `(x0, y0, x1, y1)`; tags cover the whole image.
    pub fn extent(&self, width: usize, height: usize) -> Result<(usize, usize, usize, usize)> {
        match *self {
            WeakAnnotation::Tag { .. } => Ok((0, 0, width, height)),
            WeakAnnotation::Box { x0, y0, x1, y1, .. } => {
                if x0 < x1 && x1 <= width && y0 < y1 && y1 <= height {
                    Ok((x0, y0, x1, y1))
                } else {
                    Err(invalid(format!(
                        "box ({x0},{y0})-({x1},{y1}) is empty or outside {width}x{height}"
                    )))
                }
            }
        }
    }
}

/// Reads one JSON annotation per non-blank line.
pub fn load_annotations(path: impl AsRef<Path>) -> Result<Vec<WeakAnnotation>> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Format(format!("line {}: {e}", i + 1)))
        })
        .collect()
}

/// Raw vote counts, `width·height·labels` entries, channel-fastest.
///
/// Each box is written into a per-label 2-D difference table, so the cost is
/// `O(labels·pixels + annotations)` regardless of box sizes.
pub fn vote_counts(
    annots: &[WeakAnnotation],
    labels: usize,
    width: usize,
    height: usize,
) -> Result<Vec<u32>> {
    let stride = width + 1;
    let mut diff = vec![0i64; labels * stride * (height + 1)];
    for a in annots {
        let label = a.label();
        if label >= labels {
            return Err(invalid(format!(
                "label {label} out of range for {labels} labels"
            )));
        }
        let (x0, y0, x1, y1) = a.extent(width, height)?;
        if x0 == x1 || y0 == y1 {
            continue;
        }
        let base = label * stride * (height + 1);
        diff[base + y0 * stride + x0] += 1;
        diff[base + y0 * stride + x1] -= 1;
        diff[base + y1 * stride + x0] -= 1;
        diff[base + y1 * stride + x1] += 1;
    }
    let mut votes = vec![0u32; width * height * labels];
    for label in 0..labels {
        let table = &mut diff[label * stride * (height + 1)..(label + 1) * stride * (height + 1)];
        for y in 0..height {
            for x in 0..width {
                let mut v = table[y * stride + x];
                if x > 0 {
                    v += table[y * stride + x - 1];
                }
                if y > 0 {
                    v += table[(y - 1) * stride + x];
                }
                if x > 0 && y > 0 {
                    v -= table[(y - 1) * stride + x - 1];
                }
                table[y * stride + x] = v;
                votes[(y * width + x) * labels + label] = v as u32;
            }
        }
    }
    Ok(votes)
}

/// Pseudo-label raster with `labels` channels from weak annotations.
pub fn rasterize_votes(
    annots: &[WeakAnnotation],
    labels: usize,
    width: usize,
    height: usize,
) -> Result<ProbRaster> {
    if labels == 0 {
        return Err(invalid("label space must contain the unlabeled class"));
    }
    let votes = vote_counts(annots, labels, width, height)?;
    let mut data = vec![0.0; votes.len()];
    for (px, out) in votes
        .chunks_exact(labels)
        .zip(data.chunks_exact_mut(labels))
    {
        let total: u32 = px.iter().sum();
        if total == 0 {
            out[UNLABELED] = 1.0;
        } else {
            for (o, &v) in out.iter_mut().zip(px) {
                *o = v as f64 / total as f64;
            }
        }
    }
    ProbRaster::new_unchecked(width, height, labels, data)
}

/// True when the pixel carries any label mass.
pub fn is_labeled(pixel: &[f64]) -> bool {
    argmax(pixel) != UNLABELED
}

/// Keeps a pseudo-label pixel when the prediction's argmax equals the
/// pseudo-label's argmax and its probability is at least `threshold`;
/// every other pixel becomes unlabeled.
pub fn refine(pseudo: &ProbRaster, pred: &ProbRaster, threshold: f64) -> Result<ProbRaster> {
    if !pseudo.same_shape(pred) {
        return Err(invalid(format!(
            "pseudo-label raster {}x{}x{} and prediction {}x{}x{} differ",
            pseudo.width(),
            pseudo.height(),
            pseudo.channels(),
            pred.width(),
            pred.height(),
            pred.channels()
        )));
    }
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(invalid(format!("threshold {threshold} outside (0, 1]")));
    }
    let mut out = pseudo.clone();
    for p in 0..pseudo.pixel_count() {
        let target = argmax(pseudo.pixel(p));
        let sigma = pred.pixel(p);
        let predicted = argmax(sigma);
        let keep = target != UNLABELED && predicted == target && sigma[predicted] >= threshold;
        if !keep {
            let px = out.pixel_mut(p);
            px.fill(0.0);
            px[UNLABELED] = 1.0;
        }
    }
    Ok(out)
}

/// Batch loss over strongly labeled pixels (class raster with prediction)
/// and refined weakly labeled pixels (pseudo raster with prediction). Each
/// supervision type is normalized by its own labeled-pixel count; the
/// unlabeled channel and strong void pixels contribute nothing.
pub fn mixed_loss(
    strong: &[(ClassRaster, ProbRaster)],
    weak: &[(ProbRaster, ProbRaster)],
) -> Result<Loss> {
    let mut clamped = false;
    let mut ln = |s: f64| {
        if s < LOG_FLOOR {
            clamped = true;
            LOG_FLOOR.ln()
        } else {
            s.ln()
        }
    };

    let mut strong_sum = 0.0;
    let mut strong_count = 0usize;
    for (labels, sigma) in strong {
        if labels.width() != sigma.width() || labels.height() != sigma.height() {
            return Err(invalid(
                "strong label and prediction rasters differ in size",
            ));
        }
        for (&y, px) in labels.data().iter().zip(sigma.pixels()) {
            let y = y as usize;
            if y == UNLABELED {
                continue;
            }
            let s = *px.get(y).ok_or_else(|| {
                invalid(format!(
                    "strong label {y} out of range for {} channels",
                    px.len()
                ))
            })?;
            strong_sum -= ln(s);
            strong_count += 1;
        }
    }

    let mut weak_sum = 0.0;
    let mut weak_count = 0usize;
    for (target, sigma) in weak {
        if !target.same_shape(sigma) {
            return Err(invalid("weak pseudo-label and prediction rasters differ"));
        }
        for (t, s) in target.pixels().zip(sigma.pixels()) {
            if !is_labeled(t) {
                continue;
            }
            weak_count += 1;
            for (j, (&tj, &sj)) in t.iter().zip(s).enumerate() {
                if j != UNLABELED && tj != 0.0 {
                    weak_sum -= tj * ln(sj);
                }
            }
        }
    }

    if strong_count == 0 && weak_count == 0 {
        return Err(invalid(
            "no labeled strong or weak pixels; loss normalization undefined",
        ));
    }
    let mut value = 0.0;
    if strong_count > 0 {
        value += strong_sum / strong_count as f64;
    }
    if weak_count > 0 {
        value += weak_sum / weak_count as f64;
    }
    Ok(Loss { value, clamped })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::LN_2;

    fn bx(label: usize, x0: usize, y0: usize, x1: usize, y1: usize) -> WeakAnnotation {
        WeakAnnotation::Box {
            label,
            x0,
            y0,
            x1,
            y1,
        }
    }

    #[test]
    fn single_box() {
        let r = rasterize_votes(&[bx(2, 0, 0, 1, 1)], 3, 2, 1).unwrap();
        assert_eq!(r.pixel(0), &[0.0, 0.0, 1.0]);
        assert_eq!(r.pixel(1), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn overlapping_boxes_split_votes() {
        let r = rasterize_votes(&[bx(1, 0, 0, 2, 1), bx(2, 1, 0, 3, 1)], 3, 3, 1).unwrap();
        assert_eq!(r.pixel(0), &[0.0, 1.0, 0.0]);
        assert_eq!(r.pixel(1), &[0.0, 0.5, 0.5]);
        assert_eq!(r.pixel(2), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn no_annotations() {
        let r = rasterize_votes(&[], 4, 3, 2).unwrap();
        assert!(r.pixels().all(|px| px == [1.0, 0.0, 0.0, 0.0]));
    }

    #[test]
    fn tag_covers_image() {
        let r = rasterize_votes(
            &[WeakAnnotation::Tag { label: 1 }, bx(2, 0, 0, 1, 1)],
            3,
            2,
            2,
        )
        .unwrap();
        assert_eq!(r.pixel(0), &[0.0, 0.5, 0.5]);
        assert_eq!(r.pixel(3), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn rasterize_errors() {
        assert!(rasterize_votes(&[bx(1, 0, 0, 3, 1)], 2, 2, 1).is_err());
        assert!(rasterize_votes(&[bx(1, 1, 0, 1, 1)], 2, 2, 1).is_err());
        assert!(rasterize_votes(&[bx(5, 0, 0, 1, 1)], 2, 2, 1).is_err());
    }

    #[test]
    fn annotation_json() {
        let a: WeakAnnotation =
            serde_json::from_str(r#"{"kind":"box","label":3,"x0":0,"y0":0,"x1":10,"y1":8}"#)
                .unwrap();
        assert_eq!(a, bx(3, 0, 0, 10, 8));
        let t: WeakAnnotation = serde_json::from_str(r#"{"kind":"tag","label":5}"#).unwrap();
        assert_eq!(t, WeakAnnotation::Tag { label: 5 });
    }

    fn one_pixel(px: &[f64]) -> ProbRaster {
        ProbRaster::new(1, 1, px.len(), px.to_vec()).unwrap()
    }

    #[test]
    fn refine_rule() {
        let pseudo = one_pixel(&[0.0, 0.0, 1.0]);
        let kept = refine(&pseudo, &one_pixel(&[0.0, 0.05, 0.95]), 0.9).unwrap();
        assert_eq!(kept, pseudo);
        let dropped = refine(&pseudo, &one_pixel(&[0.0, 0.95, 0.05]), 0.9).unwrap();
        assert_eq!(dropped.pixel(0), &[1.0, 0.0, 0.0]);
        let weak = refine(&pseudo, &one_pixel(&[0.0, 0.15, 0.85]), 0.9).unwrap();
        assert_eq!(weak.pixel(0), &[1.0, 0.0, 0.0]);
        // threshold is inclusive
        let edge = refine(&pseudo, &one_pixel(&[0.0, 0.5, 0.5]), 0.5).unwrap();
        assert_eq!(edge.pixel(0), &[1.0, 0.0, 0.0]); // tie resolves to index 1
        let edge = refine(&pseudo, &one_pixel(&[0.0, 0.25, 0.75]), 0.75).unwrap();
        assert_eq!(edge, pseudo);
    }

    #[test]
    fn refine_never_keeps_unlabeled_argmax() {
        let pseudo = one_pixel(&[1.0, 0.0]);
        let out = refine(&pseudo, &one_pixel(&[1.0, 0.0]), 0.9).unwrap();
        assert_eq!(out, pseudo);
        assert!(!is_labeled(out.pixel(0)));
    }

    #[test]
    fn refine_errors() {
        let p = one_pixel(&[0.0, 1.0]);
        assert!(refine(&p, &one_pixel(&[0.0, 0.0, 1.0]), 0.9).is_err());
        assert!(refine(&p, &p, 0.0).is_err());
        assert!(refine(&p, &p, 1.5).is_err());
    }

    #[test]
    fn mixed_loss_examples() {
        let labels = ClassRaster::new(1, 1, vec![1]).unwrap();
        let perfect = one_pixel(&[0.0, 1.0]);
        let unlabeled = one_pixel(&[1.0, 0.0]);
        let l = mixed_loss(
            &[(labels.clone(), perfect.clone())],
            &[(unlabeled, perfect.clone())],
        )
        .unwrap();
        assert_eq!(l.value, 0.0);

        let half = one_pixel(&[0.5, 0.5]);
        let l = mixed_loss(&[(labels.clone(), half.clone())], &[]).unwrap();
        assert!((l.value - LN_2).abs() < 1e-15);

        let l = mixed_loss(&[(labels, half.clone())], &[(perfect, half)]).unwrap();
        assert!((l.value - 2.0 * LN_2).abs() < 1e-15);

        assert!(mixed_loss(&[], &[]).is_err());
    }
}
