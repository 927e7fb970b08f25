//! Desk-scale experiments: the moving-box direction profile of the DIoU
//! distance term, gradient alignment of the distance terms, gradient-descent
//! box regression, and a toy detection head trained with free per-anchor
//! parameters.
//!
//! Every experiment is a pure function of its configuration. Runs that need
//! randomness draw from a stream seeded by `(seed, run index)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::assignment::{match_anchors, mine_hard_negatives, AnchorMatch};
use crate::error::{Error, Result};
use crate::geometry::{self, iou, loc_penalty_with_grad, BBox, Grad4, PenaltyKind};
use crate::losses::{
    self, decode_jacobian_apply, decode_offsets, encode_offsets, l1_loc_grad, l1_loc_loss,
    total_loss, weighted_cls_grad, weighted_cls_loss, ClassificationSample, LossConfig, Offsets4,
    SampleKind, BACKGROUND,
};
use crate::postprocess::{evaluate_ap, nms, ApReport, Detection, GroundTruth, ImageId};
use crate::scalar::Scalar;

/// Previously reported minimum of the moving-box profile, kept for comparison.
pub const PUBLISHED_MIN_DEG: f64 = 157.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    /// Side of both (square) boxes.
    pub a: f64,
    /// Length of the move.
    pub dr: f64,
    /// Number of uniformly spaced directions over a full turn.
    pub n_theta: usize,
}

impl SweepConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.a.is_finite() && self.a > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "a must be positive, got {}",
                self.a
            )));
        }
        if !(self.dr.is_finite() && self.dr > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "dr must be positive, got {}",
                self.dr
            )));
        }
        if self.n_theta < 8 {
            return Err(Error::InvalidArgument(format!(
                "at least 8 directions are required, got {}",
                self.n_theta
            )));
        }
        Ok(())
    }
}

/// Moving-box model of the DIoU distance term: both boxes are squares of
/// side `a`, the predicted center starts at `(a, a)` from the target center
/// and moves by `dr` in direction `theta`. Evaluated literally, including
/// regimes where the enclosing-side terms turn negative.
pub fn moving_box_r_diou(a: f64, dr: f64, theta: f64) -> f64 {
    let (s, c) = theta.sin_cos();
    let num = (a + dr * c).powi(2) + (a + dr * s).powi(2);
    let den = (2.0 * a + dr * c).powi(2) + (2.0 * a + dr * s).powi(2);
    num / den
}

/// Same configuration with the true enclosing box after the move.
pub fn moving_box_r_diou_geometric(a: f64, dr: f64, theta: f64) -> f64 {
    let (s, c) = theta.sin_cos();
    let target = BBox {
        cx: 0.0,
        cy: 0.0,
        w: a,
        h: a,
    };
    let pred = BBox {
        cx: a + dr * c,
        cy: a + dr * s,
        w: a,
        h: a,
    };
    geometry::r_diou(&pred, &target)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SweepPoint {
    pub theta: f64,
    pub r_model: f64,
    pub r_geometric: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepProfile {
    pub config: SweepConfig,
    pub points: Vec<SweepPoint>,
    /// Direction minimizing the model profile (first on ties), radians.
    pub argmin_theta: f64,
    pub argmin_theta_geometric: f64,
    pub published_min_deg: f64,
    /// Set when the computed minimum is further than one grid step from
    /// `published_min_deg`.
    pub disagrees_with_published: bool,
}

impl SweepProfile {
    pub fn argmin_deg(&self) -> f64 {
        self.argmin_theta.to_degrees()
    }
}

fn first_argmin(vals: impl Iterator<Item = f64>) -> usize {
    vals.enumerate()
        .fold(
            (0, f64::INFINITY),
            |(bi, bv), (i, v)| if v < bv { (i, v) } else { (bi, bv) },
        )
        .0
}

/// Evaluates the moving-box profile at `theta_i = 2π i / n_theta`.
pub fn direction_sweep(cfg: &SweepConfig) -> Result<SweepProfile> {
    cfg.validate()?;
    let points: Vec<SweepPoint> = (0..cfg.n_theta)
        .map(|i| {
            let theta = std::f64::consts::TAU * i as f64 / cfg.n_theta as f64;
            SweepPoint {
                theta,
                r_model: moving_box_r_diou(cfg.a, cfg.dr, theta),
                r_geometric: moving_box_r_diou_geometric(cfg.a, cfg.dr, theta),
            }
        })
        .collect();
    let argmin_theta = points[first_argmin(points.iter().map(|p| p.r_model))].theta;
    let argmin_theta_geometric = points[first_argmin(points.iter().map(|p| p.r_geometric))].theta;
    let step_deg = 360.0 / cfg.n_theta as f64;
    let gap = (argmin_theta.to_degrees() - PUBLISHED_MIN_DEG).abs();
    Ok(SweepProfile {
        config: *cfg,
        points,
        argmin_theta,
        argmin_theta_geometric,
        published_min_deg: PUBLISHED_MIN_DEG,
        disagrees_with_published: gap.min(360.0 - gap) > step_deg,
    })
}

/// Distance term whose descent direction is measured.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DistanceTerm {
    Diou,
    Miou,
}

impl DistanceTerm {
    pub fn grad<T: Scalar>(self, pred: &BBox<T>, target: &BBox<T>) -> Grad4<T> {
        match self {
            DistanceTerm::Diou => geometry::r_diou_grad(pred, target),
            DistanceTerm::Miou => geometry::r_miou_grad(pred, target),
        }
    }

    pub fn value<T: Scalar>(self, pred: &BBox<T>, target: &BBox<T>) -> T {
        match self {
            DistanceTerm::Diou => geometry::r_diou(pred, target),
            DistanceTerm::Miou => geometry::r_miou(pred, target),
        }
    }
}

/// Angle in `[0, π]` between the negated center gradient of the distance
/// term and the straight line from the predicted to the target center.
pub fn gradient_alignment_angle<T: Scalar>(
    term: DistanceTerm,
    pred: &BBox<T>,
    target: &BBox<T>,
) -> Result<T> {
    let dx = target.cx - pred.cx;
    let dy = target.cy - pred.cy;
    if dx == T::zero() && dy == T::zero() {
        return Err(Error::CoincidentCenters);
    }
    let g = term.grad(pred, target);
    let (gx, gy) = (-g.d_cx, -g.d_cy);
    // atan2 keeps full precision near zero, unlike acos of a cosine
    let cross = gx * dy - gy * dx;
    let dot = gx * dx + gy * dy;
    Ok(cross.abs().atan2(dot))
}

/// Which part of the loss drives the regression.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum DescentObjective {
    /// The whole localization loss of the run's kind.
    #[default]
    FullLoss,
    /// Only the distance term (DIoU or MIoU kinds).
    DistanceTermOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Convergence {
    /// IoU with the target reaches the value.
    Iou(f64),
    /// Center distance falls to the value.
    CenterDistance(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkConfig {
    pub kinds: Vec<PenaltyKind>,
    pub target: BBox<f64>,
    pub starts: Vec<BBox<f64>>,
    pub learning_rate: f64,
    pub max_steps: usize,
    pub convergence: Convergence,
    pub objective: DescentObjective,
    /// Update only the center parameters.
    pub center_only: bool,
    pub record_trajectories: bool,
    /// Uniform jitter applied to each start center, drawn per run.
    pub start_jitter: f64,
    pub seed: u64,
}

/// Side lengths at or below this count as divergence.
pub const MIN_SIDE: f64 = 1e-9;

pub const DEFAULT_LEARNING_RATE: f64 = 0.1;
pub const DEFAULT_MAX_STEPS: usize = 500;
pub const DEFAULT_CONVERGE_IOU: f64 = 0.9;

impl BenchmarkConfig {
    /// 5×5 center offsets in `[-3, 3]²`, scales `{0.5, 1, 2}` and aspect
    /// ratios `{0.5, 1, 2}` around a unit square at the origin.
    pub fn default_grid() -> Vec<BBox<f64>> {
        let offsets = [-3.0, -1.5, 0.0, 1.5, 3.0];
        let mut starts = Vec::with_capacity(225);
        for &cy in &offsets {
            for &cx in &offsets {
                for scale in [0.5, 1.0, 2.0] {
                    for aspect in [0.5_f64, 1.0, 2.0] {
                        let r = aspect.sqrt();
                        starts.push(BBox {
                            cx,
                            cy,
                            w: scale * r,
                            h: scale / r,
                        });
                    }
                }
            }
        }
        starts
    }

    pub fn validate(&self) -> Result<()> {
        if self.kinds.is_empty() {
            return Err(Error::InvalidArgument("no loss kinds to compare".into()));
        }
        if self.starts.is_empty() {
            return Err(Error::InvalidArgument("start grid is empty".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(self.start_jitter.is_finite() && self.start_jitter >= 0.0) {
            return Err(Error::InvalidArgument(
                "start jitter must be non-negative".into(),
            ));
        }
        if self.objective == DescentObjective::DistanceTermOnly
            && self
                .kinds
                .iter()
                .any(|k| !matches!(k, PenaltyKind::DIoULoss | PenaltyKind::MIoULoss))
        {
            return Err(Error::InvalidArgument(
                "the distance-term objective needs DIoU or MIoU kinds".into(),
            ));
        }
        Ok(())
    }
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            kinds: vec![
                PenaltyKind::L1Norm,
                PenaltyKind::IoULoss,
                PenaltyKind::GIoULoss,
                PenaltyKind::DIoULoss,
                PenaltyKind::MIoULoss,
            ],
            target: BBox {
                cx: 0.0,
                cy: 0.0,
                w: 1.0,
                h: 1.0,
            },
            starts: Self::default_grid(),
            learning_rate: DEFAULT_LEARNING_RATE,
            max_steps: DEFAULT_MAX_STEPS,
            convergence: Convergence::Iou(DEFAULT_CONVERGE_IOU),
            objective: DescentObjective::FullLoss,
            center_only: false,
            record_trajectories: false,
            start_jitter: 0.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunRecord {
    pub run_index: usize,
    pub kind: PenaltyKind,
    pub start: BBox<f64>,
    pub initial_iou: f64,
    pub final_box: [f64; 4],
    pub final_iou: f64,
    /// Steps taken.
    pub steps: usize,
    pub converged: bool,
    pub diverged: bool,
    /// Center distance before each step and after the last.
    pub center_distance: Vec<f64>,
    pub trajectory: Vec<[f64; 4]>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KindSummary {
    pub kind: PenaltyKind,
    pub runs: usize,
    pub overlapping_starts: usize,
    pub converged_overlapping: usize,
    pub converged_total: usize,
    pub diverged: usize,
    /// Fraction of overlapping starts that converged.
    pub overlapping_rate: f64,
    pub mean_steps_converged: f64,
    pub mean_final_iou: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchmarkReport {
    pub config: BenchmarkConfig,
    pub runs: Vec<RunRecord>,
    pub summaries: Vec<KindSummary>,
}

fn converged(criterion: Convergence, b: &[f64; 4], target: &BBox<f64>) -> bool {
    let bb = BBox {
        cx: b[0],
        cy: b[1],
        w: b[2],
        h: b[3],
    };
    match criterion {
        Convergence::Iou(tau) => iou(&bb, target) >= tau,
        Convergence::CenterDistance(eps) => bb.center_distance_sq(target).sqrt() <= eps,
    }
}

fn params_valid(p: &[f64; 4]) -> bool {
    p.iter().all(|v| v.is_finite()) && p[2] > MIN_SIDE && p[3] > MIN_SIDE
}

/// Gradient of the configured objective with respect to the box parameters
/// (or, for `L1Norm`, the offsets relative to `anchor`).
fn objective_grad(
    cfg: &BenchmarkConfig,
    kind: PenaltyKind,
    state: &[f64; 4],
    anchor: &BBox<f64>,
) -> Result<[f64; 4]> {
    if kind == PenaltyKind::L1Norm {
        let goal = encode_offsets(anchor, &cfg.target);
        return Ok(l1_loc_grad(&Offsets4(*state), &goal));
    }
    let pred = BBox {
        cx: state[0],
        cy: state[1],
        w: state[2],
        h: state[3],
    };
    let g = match (cfg.objective, kind) {
        (DescentObjective::FullLoss, _) => loc_penalty_with_grad(kind, &pred, &cfg.target)?.1,
        (DescentObjective::DistanceTermOnly, PenaltyKind::DIoULoss) => {
            DistanceTerm::Diou.grad(&pred, &cfg.target)
        }
        (DescentObjective::DistanceTermOnly, PenaltyKind::MIoULoss) => {
            DistanceTerm::Miou.grad(&pred, &cfg.target)
        }
        (DescentObjective::DistanceTermOnly, k) => {
            return Err(Error::InvalidArgument(format!("{k} has no distance term")))
        }
    };
    Ok(g.to_array())
}

fn run_one(
    cfg: &BenchmarkConfig,
    run_index: usize,
    kind: PenaltyKind,
    start: BBox<f64>,
) -> Result<RunRecord> {
    let mut start = start;
    if cfg.start_jitter > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(run_index as u64);
        start.cx += rng.gen_range(-cfg.start_jitter..=cfg.start_jitter);
        start.cy += rng.gen_range(-cfg.start_jitter..=cfg.start_jitter);
    }
    // l1 descends on offsets relative to the start box
    let anchor = start;
    let as_box = |s: &[f64; 4]| -> [f64; 4] {
        if kind == PenaltyKind::L1Norm {
            [
                anchor.cx + s[0] * anchor.w,
                anchor.cy + s[1] * anchor.h,
                anchor.w * s[2].exp(),
                anchor.h * s[3].exp(),
            ]
        } else {
            *s
        }
    };
    let mut state = if kind == PenaltyKind::L1Norm {
        [0.0; 4]
    } else {
        start.params()
    };

    let dist =
        |b: &[f64; 4]| ((b[0] - cfg.target.cx).powi(2) + (b[1] - cfg.target.cy).powi(2)).sqrt();
    let mut center_distance = vec![dist(&as_box(&state))];
    let mut trajectory = Vec::new();
    if cfg.record_trajectories {
        trajectory.push(as_box(&state));
    }
    let mut steps = 0;
    let mut diverged = false;
    let mut done = converged(cfg.convergence, &as_box(&state), &cfg.target);
    while !done && steps < cfg.max_steps {
        let g = objective_grad(cfg, kind, &state, &anchor)?;
        let n_params = if cfg.center_only { 2 } else { 4 };
        for i in 0..n_params {
            state[i] -= cfg.learning_rate * g[i];
        }
        steps += 1;
        let b = as_box(&state);
        if !params_valid(&b) {
            diverged = true;
            break;
        }
        center_distance.push(dist(&b));
        if cfg.record_trajectories {
            trajectory.push(b);
        }
        done = converged(cfg.convergence, &b, &cfg.target);
    }
    let final_box = as_box(&state);
    let final_iou = if params_valid(&final_box) {
        iou(
            &BBox {
                cx: final_box[0],
                cy: final_box[1],
                w: final_box[2],
                h: final_box[3],
            },
            &cfg.target,
        )
    } else {
        0.0
    };
    Ok(RunRecord {
        run_index,
        kind,
        start,
        initial_iou: iou(&start, &cfg.target),
        final_box,
        final_iou,
        steps,
        converged: done && !diverged,
        diverged,
        center_distance,
        trajectory,
    })
}

/// Plain gradient descent from every start under every loss kind.
/// Divergent runs are recorded as failures; the batch always completes.
pub fn run_regression_benchmark(cfg: &BenchmarkConfig) -> Result<BenchmarkReport> {
    cfg.validate()?;
    let jobs: Vec<(usize, PenaltyKind, BBox<f64>)> = cfg
        .kinds
        .iter()
        .flat_map(|&k| cfg.starts.iter().map(move |&s| (k, s)))
        .enumerate()
        .map(|(i, (k, s))| (i, k, s))
        .collect();
    let runs: Vec<RunRecord> = jobs
        .par_iter()
        .map(|&(i, k, s)| run_one(cfg, i, k, s))
        .collect::<Result<_>>()?;

    let summaries = cfg
        .kinds
        .iter()
        .map(|&kind| {
            let rs: Vec<&RunRecord> = runs.iter().filter(|r| r.kind == kind).collect();
            let overlapping: Vec<&&RunRecord> = rs.iter().filter(|r| r.initial_iou > 0.0).collect();
            let conv_overlap = overlapping.iter().filter(|r| r.converged).count();
            let conv: Vec<&&RunRecord> = rs.iter().filter(|r| r.converged).collect();
            KindSummary {
                kind,
                runs: rs.len(),
                overlapping_starts: overlapping.len(),
                converged_overlapping: conv_overlap,
                converged_total: conv.len(),
                diverged: rs.iter().filter(|r| r.diverged).count(),
                overlapping_rate: if overlapping.is_empty() {
                    0.0
                } else {
                    conv_overlap as f64 / overlapping.len() as f64
                },
                mean_steps_converged: if conv.is_empty() {
                    0.0
                } else {
                    conv.iter().map(|r| r.steps as f64).sum::<f64>() / conv.len() as f64
                },
                mean_final_iou: rs.iter().map(|r| r.final_iou).sum::<f64>()
                    / rs.len().max(1) as f64,
            }
        })
        .collect();

    Ok(BenchmarkReport {
        config: cfg.clone(),
        runs,
        summaries,
    })
}

/// Largest perpendicular distance of trajectory centers from the line
/// through the first center and `goal`.
pub fn max_perpendicular_deviation(trajectory: &[[f64; 4]], goal: (f64, f64)) -> f64 {
    let Some(first) = trajectory.first() else {
        return 0.0;
    };
    let (ux, uy) = (goal.0 - first[0], goal.1 - first[1]);
    let norm = (ux * ux + uy * uy).sqrt();
    if norm == 0.0 {
        return 0.0;
    }
    trajectory
        .iter()
        .map(|p| ((p[0] - first[0]) * uy - (p[1] - first[1]) * ux).abs() / norm)
        .fold(0.0, f64::max)
}

/// Synthetic scene: ground-truth objects and an anchor grid over one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub image_w: f64,
    pub image_h: f64,
    pub stride: f64,
    /// Anchor `(w, h)` placed at every grid position.
    pub anchor_sizes: Vec<(f64, f64)>,
    pub gts: Vec<BBox<f64>>,
}

impl SceneSpec {
    pub fn anchors(&self) -> Vec<BBox<f64>> {
        let nx = (self.image_w / self.stride).floor() as usize;
        let ny = (self.image_h / self.stride).floor() as usize;
        let mut out = Vec::with_capacity(nx * ny * self.anchor_sizes.len());
        for iy in 0..ny {
            for ix in 0..nx {
                let cx = (ix as f64 + 0.5) * self.stride;
                let cy = (iy as f64 + 0.5) * self.stride;
                for &(w, h) in &self.anchor_sizes {
                    out.push(BBox { cx, cy, w, h });
                }
            }
        }
        out
    }
}

impl Default for SceneSpec {
    fn default() -> Self {
        let b = |cx, cy, w, h| BBox { cx, cy, w, h };
        Self {
            image_w: 320.0,
            image_h: 320.0,
            stride: 16.0,
            anchor_sizes: vec![(32.0, 32.0), (64.0, 48.0)],
            gts: vec![
                b(80.0, 84.0, 60.0, 50.0),
                b(216.0, 100.0, 40.0, 36.0),
                b(150.0, 230.0, 90.0, 70.0),
                b(262.0, 250.0, 30.0, 28.0),
            ],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyConfig {
    pub scene: SceneSpec,
    pub loss: LossConfig<f64>,
    pub epochs: usize,
    pub lr_cls: f64,
    pub lr_loc: f64,
    /// Standard deviation of the initial logits.
    pub logit_std: f64,
    /// Standard deviation of the initial offsets.
    pub offset_std: f64,
    pub pos_threshold: f64,
    pub nms_iou: f64,
    pub seed: u64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            scene: SceneSpec::default(),
            loss: LossConfig {
                loc_kind: PenaltyKind::DIoULoss,
                ..LossConfig::default()
            },
            epochs: 200,
            lr_cls: 0.5,
            lr_loc: 0.05,
            logit_std: 1.0,
            offset_std: 0.25,
            pos_threshold: 0.5,
            nms_iou: 0.5,
            seed: 0,
        }
    }
}

impl ToyConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        if self.scene.gts.is_empty() {
            return Err(Error::InvalidArgument(
                "scene has no ground-truth boxes".into(),
            ));
        }
        if !(self.scene.stride > 0.0 && self.scene.image_w > 0.0 && self.scene.image_h > 0.0) {
            return Err(Error::InvalidArgument(
                "scene dimensions must be positive".into(),
            ));
        }
        if self.scene.anchors().is_empty() {
            return Err(Error::InvalidArgument("scene has no anchors".into()));
        }
        for (name, v) in [
            ("lr_cls", self.lr_cls),
            ("lr_loc", self.lr_loc),
            ("logit_std", self.logit_std),
            ("offset_std", self.offset_std),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "{name} must be non-negative, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// IoU ranges used to bucket negatives: low, middle, high.
pub const IOU_BUCKETS: [(f64, f64); 3] = [(0.0, 0.1), (0.1, 0.5), (0.5, 1.0)];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BucketStat {
    pub lo: f64,
    pub hi: f64,
    pub negatives: usize,
    pub misclassified: usize,
    /// `None` for an empty bucket.
    pub rate: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ToyReport {
    pub epochs_run: usize,
    pub n_anchors: usize,
    pub n_positive: usize,
    pub negative_buckets: Vec<BucketStat>,
    pub positive_misclassified: usize,
    /// Pearson correlation of foreground probability and IoU over positives.
    pub positive_score_iou_corr: Option<f64>,
    pub mean_positive_iou: f64,
    pub ap: ApReport<f64>,
    /// Objective value per epoch.
    pub loss_history: Vec<f64>,
}

impl ToyReport {
    pub fn bucket_rate(&self, i: usize) -> Option<f64> {
        self.negative_buckets.get(i).and_then(|b| b.rate)
    }
}

struct ToyState {
    logits: Vec<[f64; 2]>,
    offsets: Vec<Offsets4<f64>>,
}

fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len();
    if n < 2 {
        return None;
    }
    let mx = x.iter().sum::<f64>() / n as f64;
    let my = y.iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

fn decode_all(anchors: &[BBox<f64>], offsets: &[Offsets4<f64>]) -> Result<Vec<BBox<f64>>> {
    anchors
        .iter()
        .zip(offsets)
        .map(|(a, o)| decode_offsets(a, o))
        .collect()
}

/// IoU fed to the coefficient: with the assigned object for positives, the
/// best over all objects for negatives.
fn coeff_ious(decoded: &[BBox<f64>], gts: &[BBox<f64>], m: &AnchorMatch<f64>) -> Vec<f64> {
    decoded
        .iter()
        .zip(&m.records)
        .map(|(d, r)| match r.target {
            Some(t) => iou(d, &gts[t]),
            None => gts.iter().map(|g| iou(d, g)).fold(0.0, f64::max),
        })
        .collect()
}

fn toy_report(
    cfg: &ToyConfig,
    anchors: &[BBox<f64>],
    m: &AnchorMatch<f64>,
    state: &ToyState,
    epochs_run: usize,
    loss_history: Vec<f64>,
) -> Result<ToyReport> {
    let gts = &cfg.scene.gts;
    let decoded = decode_all(anchors, &state.offsets)?;
    let ious = coeff_ious(&decoded, gts, m);
    let fg_prob: Vec<f64> = state.logits.iter().map(|l| losses::softmax(l)[1]).collect();
    let is_fg = |i: usize| state.logits[i][1] > state.logits[i][BACKGROUND];

    let mut buckets: Vec<BucketStat> = IOU_BUCKETS
        .iter()
        .map(|&(lo, hi)| BucketStat {
            lo,
            hi,
            negatives: 0,
            misclassified: 0,
            rate: None,
        })
        .collect();
    for i in m.negatives() {
        let v = ious[i];
        let bi = IOU_BUCKETS
            .iter()
            .position(|&(lo, hi)| v >= lo && (v < hi || hi == 1.0))
            .unwrap_or(IOU_BUCKETS.len() - 1);
        buckets[bi].negatives += 1;
        if is_fg(i) {
            buckets[bi].misclassified += 1;
        }
    }
    for b in &mut buckets {
        if b.negatives > 0 {
            b.rate = Some(b.misclassified as f64 / b.negatives as f64);
        }
    }

    let pos: Vec<usize> = m.positives().collect();
    let pos_scores: Vec<f64> = pos.iter().map(|&i| fg_prob[i]).collect();
    let pos_ious: Vec<f64> = pos.iter().map(|&i| ious[i]).collect();

    let dets: Vec<Detection<f64>> = decoded
        .iter()
        .zip(&fg_prob)
        .map(|(b, &s)| Detection {
            bbox: *b,
            score: s.clamp(0.0, 1.0),
            image_id: ImageId::Num(0),
        })
        .collect();
    let kept = nms(&dets, cfg.nms_iou);
    let gt_records: Vec<GroundTruth<f64>> = gts
        .iter()
        .map(|g| GroundTruth {
            bbox: *g,
            image_id: ImageId::Num(0),
        })
        .collect();

    Ok(ToyReport {
        epochs_run,
        n_anchors: anchors.len(),
        n_positive: m.n_positive,
        negative_buckets: buckets,
        positive_misclassified: pos.iter().filter(|&&i| !is_fg(i)).count(),
        positive_score_iou_corr: pearson(&pos_scores, &pos_ious),
        mean_positive_iou: if pos_ious.is_empty() {
            0.0
        } else {
            pos_ious.iter().sum::<f64>() / pos_ious.len() as f64
        },
        ap: evaluate_ap(&kept, &gt_records, &[]),
        loss_history,
    })
}

/// Trains free per-anchor logits and offsets on one synthetic image.
///
/// Each epoch decodes the boxes, computes the coefficient IoUs (constants),
/// weights the cross entropy, mines negatives on the weighted loss, and takes
/// one gradient step on the combined objective.
pub fn run_toy_experiment(cfg: &ToyConfig) -> Result<ToyReport> {
    cfg.validate()?;
    let anchors = cfg.scene.anchors();
    let gts = &cfg.scene.gts;
    let m = match_anchors(&anchors, gts, cfg.pos_threshold);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let logit_dist =
        Normal::new(0.0, cfg.logit_std).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let offset_dist =
        Normal::new(0.0, cfg.offset_std).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let mut state = ToyState {
        logits: (0..anchors.len())
            .map(|_| [logit_dist.sample(&mut rng), logit_dist.sample(&mut rng)])
            .collect(),
        offsets: (0..anchors.len())
            .map(|_| {
                Offsets4([
                    offset_dist.sample(&mut rng),
                    offset_dist.sample(&mut rng),
                    offset_dist.sample(&mut rng),
                    offset_dist.sample(&mut rng),
                ])
            })
            .collect(),
    };

    let n_pos = m.n_positive.max(1) as f64;
    let mut history = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        let decoded = decode_all(&anchors, &state.offsets)?;
        let ious = coeff_ious(&decoded, gts, &m);
        let samples: Vec<ClassificationSample<f64>> = m
            .records
            .iter()
            .enumerate()
            .map(|(i, r)| ClassificationSample {
                logits: state.logits[i].to_vec(),
                label: if r.kind == SampleKind::Positive {
                    1
                } else {
                    BACKGROUND
                },
                kind: r.kind,
                coeff_iou: ious[i],
            })
            .collect();
        let weighted: Vec<f64> = samples
            .iter()
            .map(|s| weighted_cls_loss(s, &cfg.loss))
            .collect::<Result<_>>()?;
        let mined = mine_hard_negatives(&weighted, &m, cfg.loss.mining_ratio)?;

        let mut cls_sum = 0.0;
        let mut loc_sum = 0.0;
        let mut logit_grads = vec![[0.0; 2]; anchors.len()];
        let mut offset_grads = vec![[0.0; 4]; anchors.len()];
        for i in m.positives().chain(mined.iter().copied()) {
            cls_sum += weighted[i];
            let g = weighted_cls_grad(&samples[i], &cfg.loss);
            logit_grads[i] = [g[0] / n_pos, g[1] / n_pos];
        }
        for i in m.positives() {
            let t = gts[m.records[i].target.expect("positive has a target")];
            let (value, grad) = match cfg.loss.loc_kind {
                PenaltyKind::L1Norm => {
                    let goal = encode_offsets(&anchors[i], &t);
                    (
                        l1_loc_loss(&state.offsets[i], &goal),
                        l1_loc_grad(&state.offsets[i], &goal),
                    )
                }
                kind => {
                    let (v, g) = loc_penalty_with_grad(kind, &decoded[i], &t)?;
                    (v, decode_jacobian_apply(&anchors[i], &decoded[i], &g))
                }
            };
            loc_sum += value;
            for k in 0..4 {
                offset_grads[i][k] = cfg.loss.alpha * grad[k] / n_pos;
            }
        }
        history.push(total_loss(cls_sum, loc_sum, m.n_positive, &cfg.loss).value);

        for i in 0..anchors.len() {
            for k in 0..2 {
                state.logits[i][k] -= cfg.lr_cls * logit_grads[i][k];
            }
            for k in 0..4 {
                state.offsets[i].0[k] -= cfg.lr_loc * offset_grads[i][k];
            }
        }
    }

    toy_report(cfg, &anchors, &m, &state, cfg.epochs, history)
}
