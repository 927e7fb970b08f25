//! Central finite-difference checks for the localization penalty gradients.
//!
//! The forward functions used here are written out independently of the
//! analytic gradient code in [`crate::geometry`]. For MIoU the normalizers
//! `W` and `H` are frozen at the evaluation point, which is the function
//! whose true gradient the stop-gradient analytic gradient reports.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::geometry::{loc_penalty_grad, BBox, PenaltyKind};

pub const DEFAULT_STEP: f64 = 1e-6;
pub const DEFAULT_TOL: f64 = 1e-5;

/// Minimum separation between any pair of parallel edges (and between the
/// two centers) for a sampled pair to count as non-degenerate.
pub const KINK_MARGIN: f64 = 1e-3;

/// Overlap regime of a box pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Regime {
    Disjoint,
    Partial,
    Contained,
}

impl Regime {
    pub const ALL: [Regime; 3] = [Regime::Disjoint, Regime::Partial, Regime::Contained];

    pub fn classify(a: &BBox<f64>, b: &BBox<f64>) -> Regime {
        let ox = a.x2().min(b.x2()) - a.x1().max(b.x1());
        let oy = a.y2().min(b.y2()) - a.y1().max(b.y1());
        if ox <= 0.0 || oy <= 0.0 {
            return Regime::Disjoint;
        }
        let inside = |p: &BBox<f64>, q: &BBox<f64>| {
            p.x1() >= q.x1() && p.x2() <= q.x2() && p.y1() >= q.y1() && p.y2() <= q.y2()
        };
        if inside(a, b) || inside(b, a) {
            Regime::Contained
        } else {
            Regime::Partial
        }
    }
}

fn plain_iou(p: &BBox<f64>, t: &BBox<f64>) -> f64 {
    let iw = (p.x2().min(t.x2()) - p.x1().max(t.x1())).max(0.0);
    let ih = (p.y2().min(t.y2()) - p.y1().max(t.y1())).max(0.0);
    let inter = iw * ih;
    let union = p.w * p.h + t.w * t.h - inter;
    inter / union.max(1e-12)
}

/// Forward penalty evaluated from scratch, with MIoU normalizers frozen to
/// `frozen` when given.
pub fn reference_penalty(
    kind: PenaltyKind,
    pred: &BBox<f64>,
    target: &BBox<f64>,
    frozen: Option<(f64, f64)>,
) -> Result<f64> {
    let iou = plain_iou(pred, target);
    let ex = pred.x2().max(target.x2()) - pred.x1().min(target.x1());
    let ey = pred.y2().max(target.y2()) - pred.y1().min(target.y1());
    let dx = pred.cx - target.cx;
    let dy = pred.cy - target.cy;
    match kind {
        PenaltyKind::L1Norm => Err(Error::WrongOperandSpace("l1")),
        PenaltyKind::IoULoss => Ok(1.0 - iou),
        PenaltyKind::GIoULoss => {
            let iw = (pred.x2().min(target.x2()) - pred.x1().max(target.x1())).max(0.0);
            let ih = (pred.y2().min(target.y2()) - pred.y1().max(target.y1())).max(0.0);
            let union = pred.w * pred.h + target.w * target.h - iw * ih;
            let hull = (ex * ey).max(1e-12);
            Ok(1.0 - iou + (hull - union) / hull)
        }
        PenaltyKind::DIoULoss => {
            Ok(1.0 - iou + (dx * dx + dy * dy) / (ex * ex + ey * ey).max(1e-12))
        }
        PenaltyKind::MIoULoss => {
            let (w, h) = frozen.unwrap_or(((pred.w + target.w) / 2.0, (pred.h + target.h) / 2.0));
            Ok(1.0 - iou + dx * dx / (w * w).max(1e-12) + dy * dy / (h * h).max(1e-12))
        }
    }
}

/// Central differences of `f` at `x`.
pub fn central_difference<F>(f: F, x: [f64; 4], step: f64) -> [f64; 4]
where
    F: Fn([f64; 4]) -> f64,
{
    let mut out = [0.0; 4];
    for i in 0..4 {
        let mut plus = x;
        let mut minus = x;
        plus[i] += step;
        minus[i] -= step;
        out[i] = (f(plus) - f(minus)) / (2.0 * step);
    }
    out
}

/// Finite-difference gradient of the penalty with respect to `pred`.
pub fn numeric_grad(
    kind: PenaltyKind,
    pred: &BBox<f64>,
    target: &BBox<f64>,
    step: f64,
) -> Result<[f64; 4]> {
    let frozen = match kind {
        PenaltyKind::MIoULoss => Some(crate::geometry::miou_normalizers(pred, target)),
        PenaltyKind::L1Norm => return Err(Error::WrongOperandSpace("l1")),
        _ => None,
    };
    Ok(central_difference(
        |p| {
            let b = BBox {
                cx: p[0],
                cy: p[1],
                w: p[2],
                h: p[3],
            };
            reference_penalty(kind, &b, target, frozen).unwrap_or(f64::NAN)
        },
        pred.params(),
        step,
    ))
}

/// Componentwise `|analytic - fd| / max(1, |fd|)`, maximized over components.
pub fn relative_error(analytic: [f64; 4], numeric: [f64; 4]) -> f64 {
    analytic
        .iter()
        .zip(numeric.iter())
        .map(|(a, n)| (a - n).abs() / n.abs().max(1.0))
        .fold(0.0, f64::max)
}

/// True when every pair of parallel edges and the two centers are at least
/// `margin` apart, and the boxes differ.
pub fn is_non_degenerate(a: &BBox<f64>, b: &BBox<f64>, margin: f64) -> bool {
    let xs_a = [a.x1(), a.x2()];
    let xs_b = [b.x1(), b.x2()];
    let ys_a = [a.y1(), a.y2()];
    let ys_b = [b.y1(), b.y2()];
    let far =
        |u: &[f64; 2], v: &[f64; 2]| u.iter().all(|p| v.iter().all(|q| (p - q).abs() > margin));
    far(&xs_a, &xs_b)
        && far(&ys_a, &ys_b)
        && (a.cx - b.cx).abs() > margin
        && (a.cy - b.cy).abs() > margin
}

fn log_uniform(rng: &mut impl Rng, lo: f64, hi: f64) -> f64 {
    (rng.gen_range(lo.ln()..hi.ln())).exp()
}

/// Draws a non-degenerate `(pred, target)` pair in the requested regime.
/// Side ratios between the boxes stay in `[0.2, 5]`.
pub fn sample_pair(rng: &mut impl Rng, regime: Regime) -> (BBox<f64>, BBox<f64>) {
    loop {
        let tw = rng.gen_range(0.5..2.0);
        let th = rng.gen_range(0.5..2.0);
        let target = BBox {
            cx: rng.gen_range(-2.0..2.0),
            cy: rng.gen_range(-2.0..2.0),
            w: tw,
            h: th,
        };
        let (w, h, dx, dy) = match regime {
            Regime::Contained => {
                let shrink = rng.gen_bool(0.5);
                let (lo, hi) = if shrink { (0.2, 0.9) } else { (1.1, 5.0) };
                let w = tw * log_uniform(rng, lo, hi);
                let h = th * log_uniform(rng, lo, hi);
                let sx = ((w - tw).abs() / 2.0) * 0.95;
                let sy = ((h - th).abs() / 2.0) * 0.95;
                (w, h, rng.gen_range(-sx..=sx), rng.gen_range(-sy..=sy))
            }
            Regime::Partial => {
                let w = tw * log_uniform(rng, 0.2, 5.0);
                let h = th * log_uniform(rng, 0.2, 5.0);
                let mx = (w + tw) / 2.0;
                let my = (h + th) / 2.0;
                (w, h, rng.gen_range(-mx..mx), rng.gen_range(-my..my))
            }
            Regime::Disjoint => {
                let w = tw * log_uniform(rng, 0.2, 5.0);
                let h = th * log_uniform(rng, 0.2, 5.0);
                let mx = (w + tw) / 2.0;
                let my = (h + th) / 2.0;
                let sign = |r: &mut dyn rand::RngCore| if r.gen_bool(0.5) { 1.0 } else { -1.0 };
                let dx = sign(rng) * rng.gen_range(mx..mx + 3.0);
                let dy = rng.gen_range(-(my + 3.0)..(my + 3.0));
                if rng.gen_bool(0.5) {
                    (w, h, dx, dy)
                } else {
                    (
                        w,
                        h,
                        rng.gen_range(-(mx + 3.0)..(mx + 3.0)),
                        sign(rng) * rng.gen_range(my..my + 3.0),
                    )
                }
            }
        };
        let pred = BBox {
            cx: target.cx + dx,
            cy: target.cy + dy,
            w,
            h,
        };
        if Regime::classify(&pred, &target) == regime
            && is_non_degenerate(&pred, &target, KINK_MARGIN)
        {
            return (pred, target);
        }
    }
}

/// Outcome of checking one penalty kind.
#[derive(Debug, Clone, Serialize)]
pub struct GradCheckSummary {
    pub kind: PenaltyKind,
    pub samples: usize,
    pub max_rel_err: f64,
    pub per_regime: Vec<(Regime, usize)>,
    pub worst_pred: Option<BBox<f64>>,
    pub worst_target: Option<BBox<f64>>,
}

impl GradCheckSummary {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err.is_finite() && self.max_rel_err <= tol
    }
}

/// Compares analytic and central-difference gradients over `n` seeded random
/// pairs, cycling through the three overlap regimes.
pub fn check_kind(kind: PenaltyKind, n: usize, seed: u64, step: f64) -> Result<GradCheckSummary> {
    if kind == PenaltyKind::L1Norm {
        return Err(Error::WrongOperandSpace("l1"));
    }
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "step must be positive, got {step}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut summary = GradCheckSummary {
        kind,
        samples: 0,
        max_rel_err: 0.0,
        per_regime: Regime::ALL.iter().map(|r| (*r, 0)).collect(),
        worst_pred: None,
        worst_target: None,
    };
    for i in 0..n {
        let regime = Regime::ALL[i % 3];
        let (pred, target) = sample_pair(&mut rng, regime);
        let analytic = loc_penalty_grad(kind, &pred, &target)?.to_array();
        let numeric = numeric_grad(kind, &pred, &target, step)?;
        let err = relative_error(analytic, numeric);
        summary.samples += 1;
        summary.per_regime[i % 3].1 += 1;
        if err.is_nan() || err > summary.max_rel_err {
            summary.max_rel_err = err;
            summary.worst_pred = Some(pred);
            summary.worst_target = Some(target);
        }
    }
    Ok(summary)
}
