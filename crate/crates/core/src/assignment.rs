//! Anchor to ground-truth matching, hard negative mining and k-means
//! clustering of box sizes into anchor shapes.

use std::cmp::Ordering;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};
use crate::losses::SampleKind;
use crate::scalar::Scalar;

/// Default IoU an anchor needs with its best ground truth to be positive.
pub const DEFAULT_POS_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AnchorRecord<T> {
    pub kind: SampleKind,
    /// Assigned ground truth; present iff positive.
    pub target: Option<usize>,
    /// IoU with the assigned ground truth for positives, best IoU over all
    /// ground truths for negatives.
    pub best_iou: T,
    /// Promoted by the best-anchor-per-object rule.
    pub forced: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AnchorMatch<T> {
    pub records: Vec<AnchorRecord<T>>,
    pub n_positive: usize,
}

impl<T: Scalar> AnchorMatch<T> {
    pub fn positives(&self) -> impl Iterator<Item = usize> + '_ {
        self.records
            .iter()
            .enumerate()
            .filter(|(_, r)| r.kind == SampleKind::Positive)
            .map(|(i, _)| i)
    }

    pub fn negatives(&self) -> impl Iterator<Item = usize> + '_ {
        self.records
            .iter()
            .enumerate()
            .filter(|(_, r)| r.kind == SampleKind::Negative)
            .map(|(i, _)| i)
    }
}

/// Matches anchors to ground truths.
///
/// An anchor is positive when its best IoU reaches `pos_threshold`. Each
/// ground truth additionally promotes its highest-IoU anchor (lowest index on
/// ties). When two objects share a best anchor the later one takes its best
/// anchor not already promoted, so every object gets a positive whenever
/// there are at least as many anchors as objects.
pub fn match_anchors<T: Scalar>(
    anchors: &[BBox<T>],
    gts: &[BBox<T>],
    pos_threshold: T,
) -> AnchorMatch<T> {
    let ious: Vec<Vec<T>> = anchors
        .iter()
        .map(|a| gts.iter().map(|g| iou(a, g)).collect())
        .collect();

    let mut records: Vec<AnchorRecord<T>> = ious
        .iter()
        .map(|row| {
            let best = argmax(row.iter().copied());
            match best {
                Some((j, v)) if v >= pos_threshold => AnchorRecord {
                    kind: SampleKind::Positive,
                    target: Some(j),
                    best_iou: v,
                    forced: false,
                },
                Some((_, v)) => negative(v),
                None => negative(T::zero()),
            }
        })
        .collect();

    let mut promoted = vec![false; anchors.len()];
    for j in 0..gts.len() {
        let pick = argmax(ious.iter().enumerate().map(|(i, row)| {
            if promoted[i] {
                T::neg_infinity()
            } else {
                row[j]
            }
        }));
        if let Some((i, v)) = pick.filter(|(_, v)| *v > T::neg_infinity()) {
            promoted[i] = true;
            records[i] = AnchorRecord {
                kind: SampleKind::Positive,
                target: Some(j),
                best_iou: v,
                forced: true,
            };
        }
    }

    let n_positive = records
        .iter()
        .filter(|r| r.kind == SampleKind::Positive)
        .count();
    AnchorMatch {
        records,
        n_positive,
    }
}

fn negative<T: Scalar>(best_iou: T) -> AnchorRecord<T> {
    AnchorRecord {
        kind: SampleKind::Negative,
        target: None,
        best_iou,
        forced: false,
    }
}

/// First index of the maximum.
fn argmax<T: Scalar>(it: impl Iterator<Item = T>) -> Option<(usize, T)> {
    it.enumerate().fold(None, |best, (i, v)| match best {
        Some((_, bv)) if bv >= v => best,
        _ => Some((i, v)),
    })
}

/// Selects the negatives with the highest loss, `ratio` per positive.
///
/// Ties go to the lower index. Without positives, `ratio` negatives are kept.
/// Returns indices in ascending order.
pub fn mine_hard_negatives<T: Scalar>(
    losses: &[T],
    m: &AnchorMatch<T>,
    ratio: usize,
) -> Result<Vec<usize>> {
    if losses.len() != m.records.len() {
        return Err(Error::InvalidArgument(format!(
            "{} losses for {} anchors",
            losses.len(),
            m.records.len()
        )));
    }
    if ratio < 1 {
        return Err(Error::InvalidArgument(
            "mining ratio must be at least 1".into(),
        ));
    }
    let mut negatives: Vec<usize> = m.negatives().collect();
    let quota = if m.n_positive == 0 {
        ratio
    } else {
        ratio * m.n_positive
    }
    .min(negatives.len());
    negatives.sort_by(|&a, &b| {
        losses[b]
            .partial_cmp(&losses[a])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut chosen = negatives[..quota].to_vec();
    chosen.sort_unstable();
    Ok(chosen)
}

/// Distance used by [`kmeans_anchors`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum KMeansDistance {
    /// `1 - IoU` of the two sizes placed on a common center.
    #[default]
    OneMinusIoU,
    /// Squared Euclidean distance on `(w, h)`.
    Euclidean,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SizeCluster<T> {
    pub w: T,
    pub h: T,
    pub member_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KMeansResult<T> {
    /// Sorted by area, then width.
    pub clusters: Vec<SizeCluster<T>>,
    /// Cluster of each input size, indexing into `clusters`.
    pub assignments: Vec<usize>,
    /// Total distortion after every update-and-assign iteration.
    pub distortion_history: Vec<T>,
    pub iterations: usize,
}

impl<T: Scalar> KMeansResult<T> {
    pub fn distortion(&self) -> T {
        self.distortion_history
            .last()
            .copied()
            .unwrap_or_else(T::zero)
    }
}

pub fn size_distance<T: Scalar>(a: (T, T), b: (T, T), metric: KMeansDistance) -> T {
    match metric {
        KMeansDistance::OneMinusIoU => {
            let inter = a.0.min(b.0) * a.1.min(b.1);
            let union = a.0 * a.1 + b.0 * b.1 - inter;
            T::one() - inter / union.max(T::denom_eps())
        }
        KMeansDistance::Euclidean => {
            let dw = a.0 - b.0;
            let dh = a.1 - b.1;
            dw * dw + dh * dh
        }
    }
}

/// Lloyd iteration over box sizes with k-means++ seeding.
///
/// Inputs are put in a canonical order before seeding, so the result does not
/// depend on input order. The first update moves every centroid to the mean
/// of its members; later updates do so only when that does not raise the
/// members' distortion, which keeps the recorded distortion history
/// non-increasing under the IoU distance as well. An emptied
/// cluster is re-seeded at the point farthest from its centroid.
pub fn kmeans_anchors<T: Scalar>(
    sizes: &[(T, T)],
    k: usize,
    seed: u64,
    max_iters: usize,
    metric: KMeansDistance,
) -> Result<KMeansResult<T>> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    if k > sizes.len() {
        return Err(Error::InvalidArgument(format!(
            "k = {k} exceeds the {} sizes",
            sizes.len()
        )));
    }
    if let Some((i, _)) = sizes
        .iter()
        .enumerate()
        .find(|(_, (w, h))| !(w.is_finite() && h.is_finite() && *w > T::zero() && *h > T::zero()))
    {
        return Err(Error::InvalidArgument(format!(
            "size {i} is not positive and finite"
        )));
    }

    let mut order: Vec<usize> = (0..sizes.len()).collect();
    order.sort_by(|&a, &b| {
        let (wa, ha) = sizes[a];
        let (wb, hb) = sizes[b];
        wa.partial_cmp(&wb)
            .unwrap_or(Ordering::Equal)
            .then(ha.partial_cmp(&hb).unwrap_or(Ordering::Equal))
            .then(a.cmp(&b))
    });
    let pts: Vec<(T, T)> = order.iter().map(|&i| sizes[i]).collect();
    let dist = |a: (T, T), b: (T, T)| size_distance(a, b, metric);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = seed_plus_plus(&pts, k, &mut rng, &dist);

    let assign = |centroids: &[(T, T)]| -> Vec<usize> {
        pts.iter()
            .map(|&p| {
                argmax(centroids.iter().map(|&c| -dist(p, c)))
                    .map(|(i, _)| i)
                    .unwrap_or(0)
            })
            .collect()
    };
    let distortion = |centroids: &[(T, T)], labels: &[usize]| -> T {
        pts.iter()
            .zip(labels)
            .map(|(&p, &l)| dist(p, centroids[l]))
            .sum()
    };

    let mut labels = assign(&centroids);
    reseed_empty(&pts, &mut centroids, &mut labels, &dist);
    let mut history = Vec::new();
    if max_iters == 0 {
        history.push(distortion(&centroids, &labels));
    }
    let mut iterations = 0;

    for it in 0..max_iters {
        iterations += 1;
        for (c, centroid) in centroids.iter_mut().enumerate() {
            let members: Vec<(T, T)> = pts
                .iter()
                .zip(&labels)
                .filter(|(_, &l)| l == c)
                .map(|(&p, _)| p)
                .collect();
            if members.is_empty() {
                continue;
            }
            let n = T::from_usize(members.len()).unwrap_or_else(T::one);
            let mean = (
                members.iter().map(|m| m.0).sum::<T>() / n,
                members.iter().map(|m| m.1).sum::<T>() / n,
            );
            let cost = |c: (T, T)| members.iter().map(|&m| dist(m, c)).sum::<T>();
            if it == 0 || cost(mean) <= cost(*centroid) {
                *centroid = mean;
            }
        }
        let mut next = assign(&centroids);
        reseed_empty(&pts, &mut centroids, &mut next, &dist);
        history.push(distortion(&centroids, &next));
        let stable = next == labels;
        labels = next;
        if stable {
            break;
        }
    }

    // canonical output order
    let mut idx: Vec<usize> = (0..k).collect();
    idx.sort_by(|&a, &b| {
        let (wa, ha) = centroids[a];
        let (wb, hb) = centroids[b];
        (wa * ha)
            .partial_cmp(&(wb * hb))
            .unwrap_or(Ordering::Equal)
            .then(wa.partial_cmp(&wb).unwrap_or(Ordering::Equal))
            .then(a.cmp(&b))
    });
    let mut rank = vec![0; k];
    for (r, &c) in idx.iter().enumerate() {
        rank[c] = r;
    }
    let clusters = idx
        .iter()
        .map(|&c| SizeCluster {
            w: centroids[c].0,
            h: centroids[c].1,
            member_count: labels.iter().filter(|&&l| l == c).count(),
        })
        .collect();
    let mut assignments = vec![0; sizes.len()];
    for (pos, &orig) in order.iter().enumerate() {
        assignments[orig] = rank[labels[pos]];
    }

    Ok(KMeansResult {
        clusters,
        assignments,
        distortion_history: history,
        iterations,
    })
}

fn seed_plus_plus<T: Scalar>(
    pts: &[(T, T)],
    k: usize,
    rng: &mut ChaCha8Rng,
    dist: &impl Fn((T, T), (T, T)) -> T,
) -> Vec<(T, T)> {
    let mut centroids = vec![pts[rng.gen_range(0..pts.len())]];
    while centroids.len() < k {
        let weights: Vec<f64> = pts
            .iter()
            .map(|&p| {
                let d = centroids
                    .iter()
                    .map(|&c| dist(p, c))
                    .fold(T::infinity(), T::min);
                (d * d).as_f64()
            })
            .collect();
        let total: f64 = weights.iter().sum();
        let pick = if total > 0.0 {
            let mut r = rng.gen_range(0.0..total);
            let mut chosen = pts.len() - 1;
            for (i, w) in weights.iter().enumerate() {
                if r < *w {
                    chosen = i;
                    break;
                }
                r -= w;
            }
            chosen
        } else {
            rng.gen_range(0..pts.len())
        };
        centroids.push(pts[pick]);
    }
    centroids
}

fn reseed_empty<T: Scalar>(
    pts: &[(T, T)],
    centroids: &mut [(T, T)],
    labels: &mut [usize],
    dist: &impl Fn((T, T), (T, T)) -> T,
) {
    for c in 0..centroids.len() {
        if labels.contains(&c) {
            continue;
        }
        // farthest point from its own centroid, taken from a cluster that can spare it
        let donor = pts
            .iter()
            .enumerate()
            .filter(|(i, _)| labels.iter().filter(|&&l| l == labels[*i]).count() > 1)
            .map(|(i, &p)| (i, dist(p, centroids[labels[i]])))
            .fold(None::<(usize, T)>, |best, (i, d)| match best {
                Some((_, bd)) if bd >= d => best,
                _ => Some((i, d)),
            });
        if let Some((i, _)) = donor {
            centroids[c] = pts[i];
            labels[i] = c;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn b(cx: f64, cy: f64, w: f64, h: f64) -> BBox<f64> {
        BBox::new(cx, cy, w, h).unwrap()
    }

    #[test]
    fn identical_anchor_is_positive() {
        let g = b(5.0, 5.0, 4.0, 4.0);
        let m = match_anchors(&[g, b(50.0, 50.0, 4.0, 4.0)], &[g], 0.5);
        assert_eq!(m.records[0].kind, SampleKind::Positive);
        assert_eq!(m.records[0].best_iou, 1.0);
        assert_eq!(m.records[0].target, Some(0));
        assert_eq!(m.records[1].kind, SampleKind::Negative);
        assert_eq!(m.n_positive, 1);
    }

    #[test]
    fn below_threshold_non_best_is_negative() {
        let g = b(0.0, 0.0, 2.0, 2.0);
        // IoU 1/3 and 0.4 style anchors; the identical one is the best
        let weak = b(0.0, 0.0, 2.0, 5.0); // inter 4, union 10 -> 0.4
        let m = match_anchors(&[g, weak], &[g], 0.5);
        assert!((m.records[1].best_iou - 0.4).abs() < 1e-15);
        assert_eq!(m.records[1].kind, SampleKind::Negative);
        assert_eq!(m.records[1].target, None);
    }

    #[test]
    fn forced_match_picks_argmax() {
        let g = b(0.0, 0.0, 2.0, 2.0);
        let anchors = [
            b(1.5, 0.0, 2.0, 2.0),
            b(1.0, 0.0, 2.0, 2.0),
            b(0.0, 1.8, 2.0, 2.0),
        ];
        // IoUs: 1/7, 1/3, 1/19
        let m = match_anchors(&anchors, &[g], 0.5);
        assert_eq!(m.n_positive, 1);
        assert_eq!(m.records[1].kind, SampleKind::Positive);
        assert!(m.records[1].forced);
        assert_eq!(m.positives().collect::<Vec<_>>(), vec![1]);
    }

    #[test]
    fn shared_best_anchor_still_covers_each_object() {
        let anchors = [b(0.0, 0.0, 2.0, 2.0), b(10.0, 10.0, 2.0, 2.0)];
        let gts = [b(0.1, 0.0, 2.0, 2.0), b(-0.1, 0.0, 2.0, 2.0)];
        let m = match_anchors(&anchors, &gts, 0.5);
        let covered: Vec<_> = m.records.iter().filter_map(|r| r.target).collect();
        assert!(covered.contains(&0) && covered.contains(&1));
    }

    #[test]
    fn empty_gts() {
        let m = match_anchors(&[b(0.0, 0.0, 1.0, 1.0)], &[], 0.5);
        assert_eq!(m.n_positive, 0);
        assert_eq!(m.records[0].kind, SampleKind::Negative);
    }

    fn synthetic_match(n_pos: usize, n_neg: usize) -> AnchorMatch<f64> {
        let mut records = vec![
            AnchorRecord {
                kind: SampleKind::Positive,
                target: Some(0),
                best_iou: 0.9,
                forced: false
            };
            n_pos
        ];
        records.extend(std::iter::repeat_n(negative(0.0), n_neg));
        AnchorMatch {
            records,
            n_positive: n_pos,
        }
    }

    #[test]
    fn mining_examples() {
        let m = synthetic_match(2, 10);
        let mut losses = vec![9.0, 9.0];
        losses.extend([0.3, 1.2, 0.1, 2.5, 0.7, 3.3, 0.05, 1.9, 0.8, 0.6]);
        // negatives at 2..12; top six losses: 3.3(7) 2.5(5) 1.9(9) 1.2(3) 0.8(10) 0.7(6)
        assert_eq!(
            mine_hard_negatives(&losses, &m, 3).unwrap(),
            vec![3, 5, 6, 7, 9, 10]
        );

        let flat = vec![1.0; 12];
        assert_eq!(
            mine_hard_negatives(&flat, &m, 3).unwrap(),
            vec![2, 3, 4, 5, 6, 7]
        );

        let all = mine_hard_negatives(&losses, &m, 5).unwrap();
        assert_eq!(all, (2..12).collect::<Vec<_>>());

        let none = synthetic_match(0, 10);
        assert_eq!(
            mine_hard_negatives(&[0.0; 10], &none, 3).unwrap(),
            vec![0, 1, 2]
        );

        assert!(mine_hard_negatives(&losses[..3], &m, 3).is_err());
        assert!(mine_hard_negatives(&losses, &m, 0).is_err());
    }

    #[test]
    fn kmeans_trivial_cases() {
        let sizes: [(f64, f64); 4] = [(10.0, 12.0), (30.0, 25.0), (60.0, 40.0), (5.0, 9.0)];
        let r = kmeans_anchors(&sizes, 4, 1, 50, KMeansDistance::OneMinusIoU).unwrap();
        assert_eq!(r.distortion(), 0.0);
        assert!(r.clusters.iter().all(|c| c.member_count == 1));

        let one = kmeans_anchors(&sizes, 1, 1, 50, KMeansDistance::OneMinusIoU).unwrap();
        assert_eq!(one.clusters.len(), 1);
        assert!((one.clusters[0].w - 26.25).abs() < 1e-12);
        assert!((one.clusters[0].h - 21.5).abs() < 1e-12);
        assert_eq!(one.clusters[0].member_count, 4);
    }

    #[test]
    fn kmeans_rejects_bad_input() {
        let sizes = [(1.0, 1.0)];
        assert!(kmeans_anchors(&sizes, 2, 0, 10, KMeansDistance::OneMinusIoU).is_err());
        assert!(kmeans_anchors(&sizes, 0, 0, 10, KMeansDistance::OneMinusIoU).is_err());
        assert!(kmeans_anchors(&[(1.0, -1.0)], 1, 0, 10, KMeansDistance::OneMinusIoU).is_err());
    }

    #[test]
    fn kmeans_duplicates_do_not_leave_empty_clusters() {
        let sizes = [(5.0, 5.0); 6];
        let r = kmeans_anchors(&sizes, 3, 4, 10, KMeansDistance::Euclidean).unwrap();
        assert_eq!(r.clusters.iter().map(|c| c.member_count).sum::<usize>(), 6);
        assert_eq!(r.distortion(), 0.0);
    }
}
