//! Axis-aligned boxes in center/size form and the IoU family of
//! localization penalties.
//!
//! Every penalty takes `(pred, target)` and every gradient is taken with
//! respect to the four parameters of `pred`. Denominators are guarded with
//! `max(d, 1e-12)` so identical boxes give an IoU of exactly one.

use std::fmt;
use std::ops::{Add, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Axis-aligned rectangle given by its center and its size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(
    try_from = "RawBox<T>",
    bound(deserialize = "T: Scalar + Deserialize<'de>")
)]
pub struct BBox<T> {
    pub cx: T,
    pub cy: T,
    pub w: T,
    pub h: T,
}

#[derive(Deserialize)]
struct RawBox<T> {
    cx: T,
    cy: T,
    w: T,
    h: T,
}

impl<T: Scalar> TryFrom<RawBox<T>> for BBox<T> {
    type Error = Error;

    fn try_from(raw: RawBox<T>) -> Result<Self> {
        BBox::new(raw.cx, raw.cy, raw.w, raw.h)
    }
}

impl<T: Scalar> BBox<T> {
    /// Builds a box, rejecting non-finite fields and non-positive sizes.
    pub fn new(cx: T, cy: T, w: T, h: T) -> Result<Self> {
        for (name, v) in [("cx", cx), ("cy", cy), ("w", w), ("h", h)] {
            if !v.is_finite() {
                return Err(Error::InvalidBox(format!(
                    "field `{name}` is not finite ({v})"
                )));
            }
        }
        if w <= T::zero() {
            return Err(Error::InvalidBox(format!(
                "field `w` must be positive, got {w}"
            )));
        }
        if h <= T::zero() {
            return Err(Error::InvalidBox(format!(
                "field `h` must be positive, got {h}"
            )));
        }
        Ok(Self { cx, cy, w, h })
    }

    /// Builds a box from corner coordinates `(x1, y1, x2, y2)`.
    pub fn from_corners(x1: T, y1: T, x2: T, y2: T) -> Result<Self> {
        Self::new(
            (x1 + x2) * T::half(),
            (y1 + y2) * T::half(),
            x2 - x1,
            y2 - y1,
        )
    }

    pub fn x1(&self) -> T {
        self.cx - self.w * T::half()
    }

    pub fn x2(&self) -> T {
        self.cx + self.w * T::half()
    }

    pub fn y1(&self) -> T {
        self.cy - self.h * T::half()
    }

    pub fn y2(&self) -> T {
        self.cy + self.h * T::half()
    }

    pub fn area(&self) -> T {
        self.w * self.h
    }

    pub fn params(&self) -> [T; 4] {
        [self.cx, self.cy, self.w, self.h]
    }

    pub fn from_params(p: [T; 4]) -> Result<Self> {
        Self::new(p[0], p[1], p[2], p[3])
    }

    /// Multiplies all four parameters by `s`.
    pub fn scaled(&self, s: T) -> Result<Self> {
        Self::new(self.cx * s, self.cy * s, self.w * s, self.h * s)
    }

    pub fn center_distance_sq(&self, other: &Self) -> T {
        let dx = self.cx - other.cx;
        let dy = self.cy - other.cy;
        dx * dx + dy * dy
    }

    pub fn cast<U: Scalar>(&self) -> BBox<U> {
        BBox {
            cx: U::lit(self.cx.as_f64()),
            cy: U::lit(self.cy.as_f64()),
            w: U::lit(self.w.as_f64()),
            h: U::lit(self.h.as_f64()),
        }
    }
}

impl<T: Scalar> fmt::Display for BBox<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {}, {})", self.cx, self.cy, self.w, self.h)
    }
}

/// Gradient of a scalar with respect to `(cx, cy, w, h)` of a box.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Grad4<T> {
    pub d_cx: T,
    pub d_cy: T,
    pub d_w: T,
    pub d_h: T,
}

impl<T: Scalar> Grad4<T> {
    pub fn zero() -> Self {
        Self::from_array([T::zero(); 4])
    }

    pub fn from_array(a: [T; 4]) -> Self {
        Self {
            d_cx: a[0],
            d_cy: a[1],
            d_w: a[2],
            d_h: a[3],
        }
    }

    pub fn to_array(self) -> [T; 4] {
        [self.d_cx, self.d_cy, self.d_w, self.d_h]
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }

    pub fn center(&self) -> (T, T) {
        (self.d_cx, self.d_cy)
    }
}

impl<T: Scalar> Add for Grad4<T> {
    type Output = Self;

    fn add(self, rhs: Self) -> Self {
        Self {
            d_cx: self.d_cx + rhs.d_cx,
            d_cy: self.d_cy + rhs.d_cy,
            d_w: self.d_w + rhs.d_w,
            d_h: self.d_h + rhs.d_h,
        }
    }
}

impl<T: Scalar> Sub for Grad4<T> {
    type Output = Self;

    fn sub(self, rhs: Self) -> Self {
        self + (-rhs)
    }
}

impl<T: Scalar> Neg for Grad4<T> {
    type Output = Self;

    fn neg(self) -> Self {
        self * (-T::one())
    }
}

impl<T: Scalar> Mul<T> for Grad4<T> {
    type Output = Self;

    fn mul(self, s: T) -> Self {
        Self {
            d_cx: self.d_cx * s,
            d_cy: self.d_cy * s,
            d_w: self.d_w * s,
            d_h: self.d_h * s,
        }
    }
}

/// Localization loss family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PenaltyKind {
    /// l1 distance between anchor-encoded offsets; see [`crate::losses::l1_loc_loss`].
    L1Norm,
    IoULoss,
    GIoULoss,
    DIoULoss,
    MIoULoss,
}

impl PenaltyKind {
    pub const BOX_KINDS: [PenaltyKind; 4] = [
        PenaltyKind::IoULoss,
        PenaltyKind::GIoULoss,
        PenaltyKind::DIoULoss,
        PenaltyKind::MIoULoss,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PenaltyKind::L1Norm => "l1",
            PenaltyKind::IoULoss => "iou",
            PenaltyKind::GIoULoss => "giou",
            PenaltyKind::DIoULoss => "diou",
            PenaltyKind::MIoULoss => "miou",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "l1" | "l1norm" => Some(PenaltyKind::L1Norm),
            "iou" => Some(PenaltyKind::IoULoss),
            "giou" => Some(PenaltyKind::GIoULoss),
            "diou" => Some(PenaltyKind::DIoULoss),
            "miou" => Some(PenaltyKind::MIoULoss),
            _ => None,
        }
    }
}

impl fmt::Display for PenaltyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[inline]
fn guard<T: Scalar>(d: T) -> T {
    d.max(T::denom_eps())
}

#[inline]
fn indicator<T: Scalar>(b: bool) -> T {
    if b {
        T::one()
    } else {
        T::zero()
    }
}

/// Length of a 1-D interval span together with its derivatives with respect
/// to the predicted interval's center and size.
#[derive(Debug, Clone, Copy)]
struct Span<T> {
    len: T,
    d_center: T,
    d_size: T,
}

impl<T: Scalar> Span<T> {
    fn from_edges(len: T, hi_active: bool, lo_active: bool) -> Self {
        let hi = indicator::<T>(hi_active);
        let lo = indicator::<T>(lo_active);
        Self {
            len,
            d_center: hi - lo,
            d_size: (hi + lo) * T::half(),
        }
    }

    /// Overlap of two intervals. At coincident edges the predicted edge is
    /// taken as the active one (derivative from the overlapping side).
    fn overlap(p: Axis<T>, t: Axis<T>) -> Self {
        // Center form, so identical intervals give exactly their length.
        let len = ((p.size + t.size) * T::half() - (p.center - t.center).abs())
            .min(p.size)
            .min(t.size);
        let (p_lo, p_hi, t_lo, t_hi) = (p.lo(), p.hi(), t.lo(), t.hi());
        if len <= T::zero() {
            return Self {
                len: T::zero(),
                d_center: T::zero(),
                d_size: T::zero(),
            };
        }
        Self::from_edges(len, p_hi <= t_hi, p_lo >= t_lo)
    }

    /// Smallest interval covering both. At coincident edges the predicted
    /// edge is taken as the active one.
    fn cover(p: Axis<T>, t: Axis<T>) -> Self {
        let len = ((p.size + t.size) * T::half() + (p.center - t.center).abs())
            .max(p.size)
            .max(t.size);
        Self::from_edges(len, p.hi() >= t.hi(), p.lo() <= t.lo())
    }
}

/// One axis of a box.
#[derive(Clone, Copy)]
struct Axis<T> {
    center: T,
    size: T,
}

impl<T: Scalar> Axis<T> {
    fn x(b: &BBox<T>) -> Self {
        Self {
            center: b.cx,
            size: b.w,
        }
    }

    fn y(b: &BBox<T>) -> Self {
        Self {
            center: b.cy,
            size: b.h,
        }
    }

    fn lo(self) -> T {
        self.center - self.size * T::half()
    }

    fn hi(self) -> T {
        self.center + self.size * T::half()
    }
}

/// Value plus gradient with respect to `pred`.
#[derive(Debug, Clone, Copy)]
struct Valued<T> {
    value: T,
    grad: Grad4<T>,
}

fn overlap_spans<T: Scalar>(pred: &BBox<T>, target: &BBox<T>) -> (Span<T>, Span<T>) {
    (
        Span::overlap(Axis::x(pred), Axis::x(target)),
        Span::overlap(Axis::y(pred), Axis::y(target)),
    )
}

fn cover_spans<T: Scalar>(pred: &BBox<T>, target: &BBox<T>) -> (Span<T>, Span<T>) {
    (
        Span::cover(Axis::x(pred), Axis::x(target)),
        Span::cover(Axis::y(pred), Axis::y(target)),
    )
}

/// Intersection area, union area and their gradients.
fn inter_union<T: Scalar>(pred: &BBox<T>, target: &BBox<T>) -> (Valued<T>, Valued<T>) {
    let (sx, sy) = overlap_spans(pred, target);
    let inter = Valued {
        value: sx.len * sy.len,
        grad: Grad4 {
            d_cx: sx.d_center * sy.len,
            d_cy: sy.d_center * sx.len,
            d_w: sx.d_size * sy.len,
            d_h: sy.d_size * sx.len,
        },
    };
    let union = Valued {
        value: pred.area() + target.area() - inter.value,
        grad: Grad4 {
            d_cx: T::zero(),
            d_cy: T::zero(),
            d_w: pred.h,
            d_h: pred.w,
        } - inter.grad,
    };
    (inter, union)
}

/// Quotient `num / guard(den)` and its gradient. When the guard is active the
/// denominator is treated as the constant epsilon.
fn quotient<T: Scalar>(num: Valued<T>, den: Valued<T>) -> Valued<T> {
    if den.value > T::denom_eps() {
        let d = den.value;
        Valued {
            value: num.value / d,
            grad: num.grad * (T::one() / d) - den.grad * (num.value / (d * d)),
        }
    } else {
        let d = T::denom_eps();
        Valued {
            value: num.value / d,
            grad: num.grad * (T::one() / d),
        }
    }
}

fn iou_valued<T: Scalar>(pred: &BBox<T>, target: &BBox<T>) -> Valued<T> {
    let (inter, union) = inter_union(pred, target);
    quotient(inter, union)
}

fn enclosing_area_valued<T: Scalar>(pred: &BBox<T>, target: &BBox<T>) -> Valued<T> {
    let (sx, sy) = cover_spans(pred, target);
    Valued {
        value: sx.len * sy.len,
        grad: Grad4 {
            d_cx: sx.d_center * sy.len,
            d_cy: sy.d_center * sx.len,
            d_w: sx.d_size * sy.len,
            d_h: sy.d_size * sx.len,
        },
    }
}

fn enclosing_diagonal_sq_valued<T: Scalar>(pred: &BBox<T>, target: &BBox<T>) -> Valued<T> {
    let (sx, sy) = cover_spans(pred, target);
    let two = T::two();
    Valued {
        value: sx.len * sx.len + sy.len * sy.len,
        grad: Grad4 {
            d_cx: two * sx.len * sx.d_center,
            d_cy: two * sy.len * sy.d_center,
            d_w: two * sx.len * sx.d_size,
            d_h: two * sy.len * sy.d_size,
        },
    }
}

fn center_distance_sq_valued<T: Scalar>(pred: &BBox<T>, target: &BBox<T>) -> Valued<T> {
    let dx = pred.cx - target.cx;
    let dy = pred.cy - target.cy;
    Valued {
        value: dx * dx + dy * dy,
        grad: Grad4 {
            d_cx: T::two() * dx,
            d_cy: T::two() * dy,
            d_w: T::zero(),
            d_h: T::zero(),
        },
    }
}

fn r_diou_valued<T: Scalar>(pred: &BBox<T>, target: &BBox<T>) -> Valued<T> {
    quotient(
        center_distance_sq_valued(pred, target),
        enclosing_diagonal_sq_valued(pred, target),
    )
}

/// Mean width and height of the two boxes, the MIoU normalizers.
pub fn miou_normalizers<T: Scalar>(pred: &BBox<T>, target: &BBox<T>) -> (T, T) {
    (
        (pred.w + target.w) * T::half(),
        (pred.h + target.h) * T::half(),
    )
}

fn r_miou_valued<T: Scalar>(pred: &BBox<T>, target: &BBox<T>) -> Valued<T> {
    let (nw, nh) = miou_normalizers(pred, target);
    let ww = guard(nw * nw);
    let hh = guard(nh * nh);
    let dx = pred.cx - target.cx;
    let dy = pred.cy - target.cy;
    // W and H are constants under differentiation.
    Valued {
        value: dx * dx / ww + dy * dy / hh,
        grad: Grad4 {
            d_cx: T::two() * dx / ww,
            d_cy: T::two() * dy / hh,
            d_w: T::zero(),
            d_h: T::zero(),
        },
    }
}

fn giou_loss_valued<T: Scalar>(pred: &BBox<T>, target: &BBox<T>) -> Valued<T> {
    // 1 - GIoU = 1 - IoU + (C - U)/C = 2 - IoU - U/C
    let (inter, union) = inter_union(pred, target);
    let iou = quotient(inter, union);
    let ratio = quotient(union, enclosing_area_valued(pred, target));
    Valued {
        value: T::two() - iou.value - ratio.value,
        grad: -(iou.grad + ratio.grad),
    }
}

/// Intersection over union; 0 for disjoint boxes, symmetric.
pub fn iou<T: Scalar>(a: &BBox<T>, b: &BBox<T>) -> T {
    iou_valued(a, b).value
}

/// Generalized IoU, in `(-1, 1]`.
pub fn giou<T: Scalar>(a: &BBox<T>, b: &BBox<T>) -> T {
    T::one() - giou_loss_valued(a, b).value
}

/// Squared diagonal of the smallest axis-aligned box covering both.
pub fn enclosing_diagonal_sq<T: Scalar>(a: &BBox<T>, b: &BBox<T>) -> T {
    enclosing_diagonal_sq_valued(a, b).value
}

/// DIoU distance term: squared center distance over the squared enclosing
/// diagonal. Always in `[0, 1)`.
pub fn r_diou<T: Scalar>(pred: &BBox<T>, target: &BBox<T>) -> T {
    r_diou_valued(pred, target).value
}

/// MIoU distance term: center offsets normalized per axis by the mean width
/// and mean height of the two boxes.
pub fn r_miou<T: Scalar>(pred: &BBox<T>, target: &BBox<T>) -> T {
    r_miou_valued(pred, target).value
}

fn penalty_valued<T: Scalar>(
    kind: PenaltyKind,
    pred: &BBox<T>,
    target: &BBox<T>,
) -> Result<Valued<T>> {
    let one_minus_iou = || {
        let v = iou_valued(pred, target);
        Valued {
            value: T::one() - v.value,
            grad: -v.grad,
        }
    };
    let with_term = |term: Valued<T>| {
        let base = one_minus_iou();
        Valued {
            value: base.value + term.value,
            grad: base.grad + term.grad,
        }
    };
    match kind {
        PenaltyKind::L1Norm => Err(Error::WrongOperandSpace("l1")),
        PenaltyKind::IoULoss => Ok(one_minus_iou()),
        PenaltyKind::GIoULoss => Ok(giou_loss_valued(pred, target)),
        PenaltyKind::DIoULoss => Ok(with_term(r_diou_valued(pred, target))),
        PenaltyKind::MIoULoss => Ok(with_term(r_miou_valued(pred, target))),
    }
}

/// Localization penalty of `pred` against `target`.
///
/// `L1Norm` is rejected: it lives in offset space, not box space.
pub fn loc_penalty<T: Scalar>(kind: PenaltyKind, pred: &BBox<T>, target: &BBox<T>) -> Result<T> {
    penalty_valued(kind, pred, target).map(|v| v.value)
}

/// Analytic gradient of [`loc_penalty`] with respect to `pred`.
///
/// For `MIoULoss` the normalizers `W` and `H` are held constant, so `d_w` and
/// `d_h` come from the `1 - IoU` term alone. Disjoint boxes give a zero IoU
/// gradient.
pub fn loc_penalty_grad<T: Scalar>(
    kind: PenaltyKind,
    pred: &BBox<T>,
    target: &BBox<T>,
) -> Result<Grad4<T>> {
    penalty_valued(kind, pred, target).map(|v| v.grad)
}

/// Penalty value and gradient in one pass.
pub fn loc_penalty_with_grad<T: Scalar>(
    kind: PenaltyKind,
    pred: &BBox<T>,
    target: &BBox<T>,
) -> Result<(T, Grad4<T>)> {
    penalty_valued(kind, pred, target).map(|v| (v.value, v.grad))
}

/// Gradient of the DIoU distance term alone.
pub fn r_diou_grad<T: Scalar>(pred: &BBox<T>, target: &BBox<T>) -> Grad4<T> {
    r_diou_valued(pred, target).grad
}

/// Gradient of the MIoU distance term alone (W and H held constant).
pub fn r_miou_grad<T: Scalar>(pred: &BBox<T>, target: &BBox<T>) -> Grad4<T> {
    r_miou_valued(pred, target).grad
}

/// Gradient of the IoU itself.
pub fn iou_grad<T: Scalar>(pred: &BBox<T>, target: &BBox<T>) -> Grad4<T> {
    iou_valued(pred, target).grad
}
