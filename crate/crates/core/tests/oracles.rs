use boxloss::assignment::{kmeans_anchors, KMeansDistance};
use boxloss::geometry::{iou, BBox, PenaltyKind};
use boxloss::gradcheck::{check_kind, DEFAULT_STEP, DEFAULT_TOL};
use boxloss::postprocess::{ap_at, nms_indices, Detection, GroundTruth, ImageId, SizeBin};
use boxloss::simulation::{
    run_regression_benchmark, run_toy_experiment, BenchmarkConfig, ToyConfig,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn bx(cx: f64, cy: f64, w: f64, h: f64) -> BBox<f64> {
    BBox { cx, cy, w, h }
}

fn det(b: BBox<f64>, score: f64) -> Detection<f64> {
    Detection::new(b, score, ImageId::Num(0)).unwrap()
}

fn gt(b: BBox<f64>) -> GroundTruth<f64> {
    GroundTruth {
        bbox: b,
        image_id: ImageId::Num(0),
    }
}

fn small_box() -> impl Strategy<Value = BBox<f64>> {
    (0.0..6.0, 0.0..6.0, 1.0..4.0, 1.0..4.0).prop_map(|(cx, cy, w, h)| bx(cx, cy, w, h))
}

// Coarse scores so that ties are common.
fn small_det() -> impl Strategy<Value = Detection<f64>> {
    (small_box(), 1u32..6).prop_map(|(b, s)| det(b, s as f64 / 5.0))
}

fn rank(dets: &[Detection<f64>]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| {
        dets[b]
            .score
            .partial_cmp(&dets[a].score)
            .unwrap()
            .then(a.cmp(&b))
    });
    order
}

/// The greedy kept set is the unique subset in which a detection is kept
/// iff no kept detection ranked before it overlaps it above the threshold.
fn nms_oracle(dets: &[Detection<f64>], thr: f64) -> Vec<usize> {
    let order = rank(dets);
    let n = dets.len();
    let mut found = Vec::new();
    for mask in 0u32..(1 << n) {
        let kept = |i: usize| mask & (1 << i) != 0;
        let consistent = order.iter().enumerate().all(|(pos, &d)| {
            let free = order[..pos]
                .iter()
                .all(|&e| !kept(e) || iou(&dets[e].bbox, &dets[d].bbox) <= thr);
            kept(d) == free
        });
        if consistent {
            found.push(mask);
        }
    }
    assert_eq!(found.len(), 1, "fixed point must be unique");
    order
        .into_iter()
        .filter(|&i| found[0] & (1 << i) != 0)
        .collect()
}

/// AP by enumerating every score cutoff.
fn ap_oracle(dets: &[Detection<f64>], gts: &[GroundTruth<f64>], thr: f64) -> f64 {
    let order = rank(dets);
    let mut taken = vec![false; gts.len()];
    let mut tp = Vec::new();
    for &d in &order {
        let mut best: Option<(usize, f64)> = None;
        for (g, t) in gts.iter().enumerate() {
            let v = iou(&dets[d].bbox, &t.bbox);
            if !taken[g] && v >= thr && best.is_none_or(|(_, bv)| v > bv) {
                best = Some((g, v));
            }
        }
        if let Some((g, _)) = best {
            taken[g] = true;
        }
        tp.push(best.is_some());
    }
    let n_gt = gts.len() as f64;
    let cut: Vec<(f64, f64)> = (1..=tp.len())
        .map(|k| {
            let hits = tp[..k].iter().filter(|&&t| t).count() as f64;
            (hits / n_gt, hits / k as f64)
        })
        .collect();
    let mut ap = 0.0;
    for (k, &is_tp) in tp.iter().enumerate() {
        if is_tp {
            let r = cut[k].0;
            let p = cut
                .iter()
                .filter(|c| c.0 >= r)
                .map(|c| c.1)
                .fold(0.0, f64::max);
            ap += p / n_gt;
        }
    }
    ap
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn nms_matches_exhaustive_oracle(dets in prop::collection::vec(small_det(), 0..=5), thr in 0.0f64..1.0) {
        let kept = nms_indices(&dets, thr);
        prop_assert_eq!(&kept, &nms_oracle(&dets, thr));
        for (a, &i) in kept.iter().enumerate() {
            for &j in &kept[a + 1..] {
                prop_assert!(iou(&dets[i].bbox, &dets[j].bbox) <= thr);
            }
        }
    }

    #[test]
    fn ap_matches_exhaustive_oracle(
        dets in prop::collection::vec(small_det(), 0..=5),
        gts in prop::collection::vec(small_box(), 1..=3),
        thr_k in 1u32..20,
    ) {
        let thr = thr_k as f64 / 20.0;
        let gts: Vec<_> = gts.into_iter().map(gt).collect();
        let ap = ap_at(&dets, &gts, thr, SizeBin::All).unwrap();
        let want = ap_oracle(&dets, &gts, thr);
        prop_assert!((ap - want).abs() <= 1e-12, "{ap} vs {want}");
    }

    #[test]
    fn dropping_a_false_positive_never_lowers_ap(
        dets in prop::collection::vec(small_det(), 1..=5),
        gts in prop::collection::vec(small_box(), 1..=3),
        thr_k in 1u32..20,
    ) {
        let thr = thr_k as f64 / 20.0;
        let gts: Vec<_> = gts.into_iter().map(gt).collect();
        let before = ap_at(&dets, &gts, thr, SizeBin::All).unwrap();
        let matched = boxloss::postprocess::greedy_match(&dets, &gts, thr);
        for &(d, g) in &matched {
            if g.is_none() {
                let mut fewer = dets.clone();
                fewer.remove(d);
                prop_assert!(ap_at(&fewer, &gts, thr, SizeBin::All).unwrap() >= before - 1e-12);
            }
        }
    }

    #[test]
    fn duplicating_a_true_positive_never_raises_ap(
        dets in prop::collection::vec(small_det(), 1..=5),
        gts in prop::collection::vec(small_box(), 1..=3),
        thr_k in 1u32..20,
        drop in 0.01f64..0.2,
    ) {
        let thr = thr_k as f64 / 20.0;
        let gts: Vec<_> = gts.into_iter().map(gt).collect();
        let before = ap_at(&dets, &gts, thr, SizeBin::All).unwrap();
        for (d, g) in boxloss::postprocess::greedy_match(&dets, &gts, thr) {
            let Some(_) = g else { continue };
            // A copy that could reach a second object is not a duplicate
            // of this match; see the counterexample test below.
            let reachable = gts.iter().filter(|t| iou(&dets[d].bbox, &t.bbox) >= thr).count();
            if reachable > 1 {
                continue;
            }
            let mut more = dets.clone();
            more.push(det(dets[d].bbox, (dets[d].score - drop).max(0.0)));
            prop_assert!(ap_at(&more, &gts, thr, SizeBin::All).unwrap() <= before + 1e-12);
        }
    }
}

#[test]
fn duplicate_can_raise_ap_when_it_reaches_another_object() {
    // Two objects both within reach of one box: the copy claims the second.
    let gts = vec![gt(bx(0.0, 0.0, 10.0, 10.0)), gt(bx(0.5, 0.0, 10.0, 10.0))];
    let one = vec![det(bx(0.2, 0.0, 10.0, 10.0), 0.9)];
    let two = vec![one[0].clone(), det(one[0].bbox, 0.8)];
    let a1 = ap_at(&one, &gts, 0.5, SizeBin::All).unwrap();
    let a2 = ap_at(&two, &gts, 0.5, SizeBin::All).unwrap();
    assert_eq!(a1, 0.5);
    assert_eq!(a2, 1.0);
}

#[test]
fn raising_nms_threshold_can_shrink_kept_set() {
    // A covers B at IoU 0.4; C and D are disjoint halves of B at IoU 0.46.
    let dets = vec![
        det(BBox::from_corners(-7.5, 0.0, 17.5, 10.0).unwrap(), 0.9),
        det(BBox::from_corners(0.0, 0.0, 10.0, 10.0).unwrap(), 0.8),
        det(BBox::from_corners(0.0, 0.0, 4.6, 10.0).unwrap(), 0.7),
        det(BBox::from_corners(5.4, 0.0, 10.0, 10.0).unwrap(), 0.6),
    ];
    assert_eq!(nms_indices(&dets, 0.30), vec![0, 2, 3]);
    assert_eq!(nms_indices(&dets, 0.45), vec![0, 1]);
}

#[test]
fn gradients_match_differences_on_a_thousand_pairs() {
    for kind in PenaltyKind::BOX_KINDS {
        let s = check_kind(kind, 1000, 7, DEFAULT_STEP).unwrap();
        assert_eq!(s.samples, 1000);
        assert!(s.passes(DEFAULT_TOL), "{kind}: {}", s.max_rel_err);
        assert!(s.per_regime.iter().all(|&(_, n)| n > 0));
    }
}

fn planted_sizes() -> Vec<(f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut v = Vec::new();
    for _ in 0..50 {
        v.push((
            10.0 + rng.gen_range(-1.0..1.0),
            10.0 + rng.gen_range(-1.0..1.0),
        ));
    }
    for _ in 0..50 {
        v.push((
            100.0 + rng.gen_range(-5.0..5.0),
            80.0 + rng.gen_range(-5.0..5.0),
        ));
    }
    v
}

#[test]
fn kmeans_recovers_planted_clusters() {
    let sizes = planted_sizes();
    let res = kmeans_anchors(&sizes, 2, 0, 100, KMeansDistance::OneMinusIoU).unwrap();
    let c = &res.clusters;
    assert!(
        (c[0].w - 10.0).abs() <= 2.0 && (c[0].h - 10.0).abs() <= 2.0,
        "{c:?}"
    );
    assert!(
        (c[1].w - 100.0).abs() <= 2.0 && (c[1].h - 80.0).abs() <= 2.0,
        "{c:?}"
    );
    assert_eq!((c[0].member_count, c[1].member_count), (50, 50));

    // No restart finds a better partition.
    let best = (0..100)
        .map(|s| {
            kmeans_anchors(&sizes, 2, s, 100, KMeansDistance::OneMinusIoU)
                .unwrap()
                .distortion()
        })
        .fold(f64::INFINITY, f64::min);
    assert!(res.distortion() <= best + 1e-12);
}

#[test]
fn benchmark_is_deterministic() {
    let cfg = BenchmarkConfig {
        starts: BenchmarkConfig::default_grid()
            .into_iter()
            .step_by(9)
            .collect(),
        start_jitter: 0.2,
        seed: 5,
        max_steps: 100,
        ..BenchmarkConfig::default()
    };
    assert_eq!(
        run_regression_benchmark(&cfg).unwrap(),
        run_regression_benchmark(&cfg).unwrap()
    );
}

#[test]
fn toy_experiment_is_deterministic() {
    let cfg = ToyConfig {
        epochs: 10,
        ..ToyConfig::default()
    };
    assert_eq!(
        run_toy_experiment(&cfg).unwrap(),
        run_toy_experiment(&cfg).unwrap()
    );
}
