//! Greedy non-maximum suppression and COCO-style average precision.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};
use crate::scalar::Scalar;

/// Image identifier; accepts JSON numbers or strings.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ImageId {
    Num(u64),
    Name(String),
}

impl Default for ImageId {
    fn default() -> Self {
        ImageId::Num(0)
    }
}

impl fmt::Display for ImageId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ImageId::Num(n) => write!(f, "{n}"),
            ImageId::Name(s) => f.write_str(s),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(deserialize = "T: Scalar + Deserialize<'de>"))]
pub struct Detection<T> {
    #[serde(flatten)]
    pub bbox: BBox<T>,
    pub score: T,
    #[serde(default)]
    pub image_id: ImageId,
}

impl<T: Scalar> Detection<T> {
    pub fn new(bbox: BBox<T>, score: T, image_id: ImageId) -> Result<Self> {
        if !(score >= T::zero() && score <= T::one()) {
            return Err(Error::InvalidArgument(format!(
                "score must be in [0, 1], got {score}"
            )));
        }
        Ok(Self {
            bbox,
            score,
            image_id,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(deserialize = "T: Scalar + Deserialize<'de>"))]
pub struct GroundTruth<T> {
    #[serde(flatten)]
    pub bbox: BBox<T>,
    #[serde(default)]
    pub image_id: ImageId,
}

/// Indices sorted by descending score, lower index first on ties.
fn score_order<T: Scalar>(dets: &[Detection<T>]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..dets.len()).collect();
    idx.sort_by(|&a, &b| {
        dets[b]
            .score
            .partial_cmp(&dets[a].score)
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    idx
}

/// Greedy NMS over detections of a single image and class. Keeps the
/// highest-scoring detection, drops every remaining one whose IoU with it
/// exceeds `iou_threshold`, and repeats. Output is in descending score order.
pub fn nms<T: Scalar>(dets: &[Detection<T>], iou_threshold: T) -> Vec<Detection<T>> {
    nms_indices(dets, iou_threshold)
        .into_iter()
        .map(|i| dets[i].clone())
        .collect()
}

/// Like [`nms`] but returns indices into `dets`.
pub fn nms_indices<T: Scalar>(dets: &[Detection<T>], iou_threshold: T) -> Vec<usize> {
    let mut kept: Vec<usize> = Vec::new();
    for i in score_order(dets) {
        if kept
            .iter()
            .all(|&k| iou(&dets[k].bbox, &dets[i].bbox) <= iou_threshold)
        {
            kept.push(i);
        }
    }
    kept
}

/// NMS applied separately within each image.
pub fn nms_per_image<T: Scalar>(dets: &[Detection<T>], iou_threshold: T) -> Vec<Detection<T>> {
    let mut by_image: BTreeMap<&ImageId, Vec<Detection<T>>> = BTreeMap::new();
    for d in dets {
        by_image.entry(&d.image_id).or_default().push(d.clone());
    }
    by_image
        .values()
        .flat_map(|group| nms(group, iou_threshold))
        .collect()
}

/// `0.50, 0.55, ..., 0.95`, each built as `k / 100` so that `0.6` is the
/// correctly rounded literal.
pub fn coco_thresholds<T: Scalar>() -> Vec<T> {
    (0..10)
        .map(|i| T::lit((50 + 5 * i) as f64 / 100.0))
        .collect()
}

/// Width bins keyed on the ground-truth box width.
pub const SMALL_MAX_WIDTH: f64 = 32.0;
pub const MEDIUM_MAX_WIDTH: f64 = 96.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum SizeBin {
    All,
    Small,
    Medium,
    Large,
}

impl SizeBin {
    pub fn contains<T: Scalar>(self, width: T) -> bool {
        let w = width.as_f64();
        match self {
            SizeBin::All => true,
            SizeBin::Small => w < SMALL_MAX_WIDTH,
            SizeBin::Medium => (SMALL_MAX_WIDTH..MEDIUM_MAX_WIDTH).contains(&w),
            SizeBin::Large => w >= MEDIUM_MAX_WIDTH,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ApReport<T> {
    /// Mean AP over the thresholds.
    pub ap: T,
    pub ap50: Option<T>,
    pub ap75: Option<T>,
    /// Absent when no ground truth falls in the bin.
    pub ap_s: Option<T>,
    pub ap_m: Option<T>,
    pub ap_l: Option<T>,
    pub per_threshold: Vec<(T, T)>,
}

/// Match flags for detections in score order at a single IoU threshold.
///
/// Each detection, in global descending score order, claims the unmatched
/// ground truth of its image with the highest IoU at or above `threshold`.
/// Returns `(det index, matched gt index)` pairs in that order.
pub fn greedy_match<T: Scalar>(
    dets: &[Detection<T>],
    gts: &[GroundTruth<T>],
    threshold: T,
) -> Vec<(usize, Option<usize>)> {
    let mut taken = vec![false; gts.len()];
    score_order(dets)
        .into_iter()
        .map(|d| {
            let mut best: Option<(usize, T)> = None;
            for (g, gt) in gts.iter().enumerate() {
                if taken[g] || gt.image_id != dets[d].image_id {
                    continue;
                }
                let v = iou(&dets[d].bbox, &gt.bbox);
                if v >= threshold && best.is_none_or(|(_, bv)| v > bv) {
                    best = Some((g, v));
                }
            }
            if let Some((g, _)) = best {
                taken[g] = true;
            }
            (d, best.map(|(g, _)| g))
        })
        .collect()
}

/// Area under the precision envelope for a sequence of TP flags in score
/// order, given `n_gt` positives.
pub fn average_precision_from_flags<T: Scalar>(tp_flags: &[bool], n_gt: usize) -> T {
    if n_gt == 0 {
        return T::zero();
    }
    let n = T::from_usize(n_gt).unwrap_or_else(T::one);
    let mut tp = 0usize;
    let mut recall = Vec::with_capacity(tp_flags.len());
    let mut precision = Vec::with_capacity(tp_flags.len());
    for (k, &hit) in tp_flags.iter().enumerate() {
        if hit {
            tp += 1;
        }
        let tp_t = T::from_usize(tp).unwrap_or_else(T::zero);
        recall.push(tp_t / n);
        precision.push(tp_t / T::from_usize(k + 1).unwrap_or_else(T::one));
    }
    // envelope: running max from the right
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut ap = T::zero();
    let mut prev_recall = T::zero();
    for (r, p) in recall.iter().zip(&precision) {
        if *r > prev_recall {
            ap += (*r - prev_recall) * *p;
            prev_recall = *r;
        }
    }
    ap
}

/// AP for one threshold restricted to a width bin.
///
/// Matching runs against every ground truth; detections matched to objects
/// outside the bin are ignored, as are unmatched detections whose own width
/// falls outside it. Returns `None` when the bin holds no ground truth.
pub fn ap_at<T: Scalar>(
    dets: &[Detection<T>],
    gts: &[GroundTruth<T>],
    threshold: T,
    bin: SizeBin,
) -> Option<T> {
    let n_gt = gts.iter().filter(|g| bin.contains(g.bbox.w)).count();
    if n_gt == 0 {
        return None;
    }
    let flags: Vec<bool> = greedy_match(dets, gts, threshold)
        .into_iter()
        .filter_map(|(d, g)| match g {
            Some(g) if bin.contains(gts[g].bbox.w) => Some(true),
            Some(_) => None,
            None if bin.contains(dets[d].bbox.w) => Some(false),
            None => None,
        })
        .collect();
    Some(average_precision_from_flags(&flags, n_gt))
}

fn mean_over<T: Scalar>(
    dets: &[Detection<T>],
    gts: &[GroundTruth<T>],
    thresholds: &[T],
    bin: SizeBin,
) -> Option<T> {
    let vals: Option<Vec<T>> = thresholds
        .iter()
        .map(|&t| ap_at(dets, gts, t, bin))
        .collect();
    vals.map(|v| {
        v.iter().copied().sum::<T>() / T::from_usize(v.len().max(1)).unwrap_or_else(T::one)
    })
}

/// COCO-style report. `thresholds` defaults to [`coco_thresholds`] when empty.
pub fn evaluate_ap<T: Scalar>(
    dets: &[Detection<T>],
    gts: &[GroundTruth<T>],
    thresholds: &[T],
) -> ApReport<T> {
    let default_thr;
    let thresholds = if thresholds.is_empty() {
        default_thr = coco_thresholds::<T>();
        &default_thr[..]
    } else {
        thresholds
    };
    let per_threshold: Vec<(T, T)> = thresholds
        .iter()
        .map(|&t| (t, ap_at(dets, gts, t, SizeBin::All).unwrap_or_else(T::zero)))
        .collect();
    let ap = per_threshold.iter().map(|(_, v)| *v).sum::<T>()
        / T::from_usize(per_threshold.len().max(1)).unwrap_or_else(T::one);
    let at = |x: f64| {
        let x = T::lit(x);
        per_threshold.iter().find(|(t, _)| *t == x).map(|(_, v)| *v)
    };
    ApReport {
        ap,
        ap50: at(0.5),
        ap75: at(0.75),
        ap_s: mean_over(dets, gts, thresholds, SizeBin::Small),
        ap_m: mean_over(dets, gts, thresholds, SizeBin::Medium),
        ap_l: mean_over(dets, gts, thresholds, SizeBin::Large),
        per_threshold,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn det(cx: f64, cy: f64, w: f64, h: f64, score: f64) -> Detection<f64> {
        Detection::new(BBox::new(cx, cy, w, h).unwrap(), score, ImageId::Num(0)).unwrap()
    }

    fn gt(cx: f64, cy: f64, w: f64, h: f64) -> GroundTruth<f64> {
        GroundTruth {
            bbox: BBox::new(cx, cy, w, h).unwrap(),
            image_id: ImageId::Num(0),
        }
    }

    #[test]
    fn nms_examples() {
        let same = [det(0.0, 0.0, 2.0, 2.0, 0.8), det(0.0, 0.0, 2.0, 2.0, 0.9)];
        let kept = nms(&same, 0.5);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].score, 0.9);

        let apart = [det(0.0, 0.0, 2.0, 2.0, 0.8), det(10.0, 0.0, 2.0, 2.0, 0.9)];
        assert_eq!(nms(&apart, 0.5).len(), 2);

        // A-B and B-C at IoU 0.6. Two IoUs above 0.5 through a shared box
        // force A and C to overlap too; here A-C is 1/3, below the threshold.
        let chain = [
            det(0.0, 0.0, 10.0, 10.0, 0.9),
            det(2.5, 0.0, 10.0, 10.0, 0.8),
            det(5.0, 0.0, 10.0, 10.0, 0.7),
        ];
        assert!((iou(&chain[0].bbox, &chain[1].bbox) - 0.6).abs() < 1e-12);
        assert!((iou(&chain[1].bbox, &chain[2].bbox) - 0.6).abs() < 1e-12);
        let kept: Vec<f64> = nms(&chain, 0.5).iter().map(|d| d.score).collect();
        assert_eq!(kept, vec![0.9, 0.7]);
    }

    #[test]
    fn nms_keeps_ties_by_index() {
        let a = det(0.0, 0.0, 2.0, 2.0, 0.5);
        let mut b = a.clone();
        b.bbox.cx = 0.1;
        let kept = nms_indices(&[a, b], 0.5);
        assert_eq!(kept, vec![0]);
    }

    #[test]
    fn thresholds_are_exact_literals() {
        let t = coco_thresholds::<f64>();
        assert_eq!(t.len(), 10);
        assert_eq!(t[2], 0.6);
        assert_eq!(t[5], 0.75);
        assert_eq!(t[9], 0.95);
    }

    #[test]
    fn single_gt_iou_06() {
        let g = gt(0.0, 0.0, 10.0, 10.0);
        let d = det(2.5, 0.0, 10.0, 10.0, 0.9);
        assert_eq!(iou(&d.bbox, &g.bbox), 0.6);
        let r = evaluate_ap(&[d], &[g], &[]);
        assert_eq!(r.ap50, Some(1.0));
        assert_eq!(r.ap75, Some(0.0));
        assert!((r.ap - 0.3).abs() < 1e-15);
        assert!((r.ap_s.unwrap() - 0.3).abs() < 1e-15);
        assert_eq!(r.ap_m, None);
        assert_eq!(r.ap_l, None);
    }

    #[test]
    fn perfect_and_empty() {
        let gts = [gt(0.0, 0.0, 10.0, 10.0), gt(50.0, 0.0, 40.0, 20.0)];
        let dets: Vec<_> = gts
            .iter()
            .map(|g| Detection::new(g.bbox, 0.9, ImageId::Num(0)).unwrap())
            .collect();
        let r = evaluate_ap(&dets, &gts, &[]);
        assert_eq!(r.ap, 1.0);
        assert_eq!(r.ap_s, Some(1.0));
        assert_eq!(r.ap_m, Some(1.0));
        assert_eq!(evaluate_ap(&[], &gts, &[]).ap, 0.0);
    }

    #[test]
    fn images_are_kept_apart() {
        let g = GroundTruth {
            bbox: BBox::new(0.0, 0.0, 10.0, 10.0).unwrap(),
            image_id: ImageId::Num(1),
        };
        let d = det(0.0, 0.0, 10.0, 10.0, 0.9);
        assert_eq!(evaluate_ap(&[d], &[g], &[]).ap, 0.0);
    }

    #[test]
    fn envelope_area() {
        // TP, FP, TP with 2 gts: recall .5 @ p 1, recall 1 @ p 2/3
        let ap: f64 = average_precision_from_flags(&[true, false, true], 2);
        assert!((ap - (0.5 + 0.5 * 2.0 / 3.0)).abs() < 1e-15);
        assert_eq!(average_precision_from_flags::<f64>(&[], 3), 0.0);
    }

    #[test]
    fn score_must_be_probability() {
        assert!(
            Detection::new(BBox::new(0.0, 0.0, 1.0, 1.0).unwrap(), 1.5, ImageId::Num(0)).is_err()
        );
    }
}
