//! Classification loss with an IoU-based coefficient, the l1 offset loss
//! and assembly of the combined detection objective.
//!
//! The coefficient `f(IoU)` scales the softmax cross entropy of each anchor.
//! It is a constant under differentiation: it changes how much each anchor
//! contributes but never sends gradient back to the box parameters that
//! produced the IoU.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{BBox, PenaltyKind};
use crate::scalar::Scalar;

/// Whether an anchor was assigned to an object or to background.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SampleKind {
    Positive,
    Negative,
}

/// Form of the negative-anchor coefficient.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum NegativeBranch {
    /// `(1 - IoU)^γ`: largest for negatives whose box misses every object.
    #[default]
    OneMinusIoUPow,
    /// `IoU^γ`, kept for comparison.
    IoUPowAsPrinted,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoeffConfig<T> {
    pub gamma: T,
    pub negative_branch: NegativeBranch,
}

impl<T: Scalar> CoeffConfig<T> {
    pub fn new(gamma: T, negative_branch: NegativeBranch) -> Result<Self> {
        if !(gamma.is_finite() && gamma > T::zero()) {
            return Err(Error::InvalidArgument(format!(
                "gamma must be finite and positive, got {gamma}"
            )));
        }
        Ok(Self {
            gamma,
            negative_branch,
        })
    }
}

impl<T: Scalar> Default for CoeffConfig<T> {
    fn default() -> Self {
        Self {
            gamma: T::two(),
            negative_branch: NegativeBranch::default(),
        }
    }
}

/// Which sample kinds get the coefficient.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum CoeffMode {
    #[default]
    None,
    PosOnly,
    NegOnly,
    Both,
}

impl CoeffMode {
    pub fn applies_to(self, kind: SampleKind) -> bool {
        matches!(
            (self, kind),
            (CoeffMode::Both, _)
                | (CoeffMode::PosOnly, SampleKind::Positive)
                | (CoeffMode::NegOnly, SampleKind::Negative)
        )
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "none" => Some(CoeffMode::None),
            "pos" | "posonly" | "pos-only" => Some(CoeffMode::PosOnly),
            "neg" | "negonly" | "neg-only" => Some(CoeffMode::NegOnly),
            "both" => Some(CoeffMode::Both),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig<T> {
    /// Weight of the localization term.
    pub alpha: T,
    pub loc_kind: PenaltyKind,
    pub coeff_mode: CoeffMode,
    pub coeff: CoeffConfig<T>,
    /// Mined negatives per positive.
    pub mining_ratio: usize,
}

impl<T: Scalar> Default for LossConfig<T> {
    fn default() -> Self {
        Self {
            alpha: T::one(),
            loc_kind: PenaltyKind::L1Norm,
            coeff_mode: CoeffMode::None,
            coeff: CoeffConfig::default(),
            mining_ratio: 3,
        }
    }
}

impl<T: Scalar> LossConfig<T> {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha.is_finite() && self.alpha > T::zero()) {
            return Err(Error::InvalidArgument(format!(
                "alpha must be positive, got {}",
                self.alpha
            )));
        }
        if self.mining_ratio < 1 {
            return Err(Error::InvalidArgument(
                "mining ratio must be at least 1".into(),
            ));
        }
        CoeffConfig::new(self.coeff.gamma, self.coeff.negative_branch).map(|_| ())
    }
}

/// One anchor's classification input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationSample<T> {
    /// One logit per class; class 0 is background.
    pub logits: Vec<T>,
    pub label: usize,
    pub kind: SampleKind,
    /// IoU fed to the coefficient. Treated as a constant.
    pub coeff_iou: T,
}

pub const BACKGROUND: usize = 0;

impl<T: Scalar> ClassificationSample<T> {
    pub fn new(logits: Vec<T>, label: usize, kind: SampleKind, coeff_iou: T) -> Result<Self> {
        if logits.len() < 2 {
            return Err(Error::InvalidArgument(
                "at least two classes are required".into(),
            ));
        }
        if label >= logits.len() {
            return Err(Error::InvalidArgument(format!(
                "label {label} out of range for {} classes",
                logits.len()
            )));
        }
        if kind == SampleKind::Negative && label != BACKGROUND {
            return Err(Error::InvalidArgument(
                "negative samples must carry the background label".into(),
            ));
        }
        if !(coeff_iou >= T::zero() && coeff_iou <= T::one()) {
            return Err(Error::InvalidArgument(format!(
                "coefficient IoU must be in [0, 1], got {coeff_iou}"
            )));
        }
        Ok(Self {
            logits,
            label,
            kind,
            coeff_iou,
        })
    }
}

/// Softmax probabilities, computed with max-shifted exponentials.
pub fn softmax<T: Scalar>(logits: &[T]) -> Vec<T> {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: T = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// `-log softmax(logits)[label]` via log-sum-exp.
pub fn softmax_ce<T: Scalar>(logits: &[T], label: usize) -> Result<T> {
    if label >= logits.len() {
        return Err(Error::InvalidArgument(format!(
            "label {label} out of range for {} logits",
            logits.len()
        )));
    }
    if logits.iter().any(|z| !z.is_finite()) {
        return Err(Error::InvalidArgument("logits must be finite".into()));
    }
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = max + logits.iter().map(|&z| (z - max).exp()).sum::<T>().ln();
    Ok((lse - logits[label]).max(T::zero()))
}

/// Gradient of [`softmax_ce`] with respect to the logits: `softmax - onehot`.
pub fn softmax_ce_grad<T: Scalar>(logits: &[T], label: usize) -> Vec<T> {
    let mut p = softmax(logits);
    if let Some(v) = p.get_mut(label) {
        *v -= T::one();
    }
    p
}

/// IoU-based coefficient. Positives: `1 - (1 - IoU)^γ`, rising with IoU.
/// Negatives: `(1 - IoU)^γ` by default, falling with IoU.
pub fn iou_coefficient<T: Scalar>(kind: SampleKind, iou: T, cfg: &CoeffConfig<T>) -> T {
    let iou = iou.max(T::zero()).min(T::one());
    let miss = T::one() - iou;
    match kind {
        SampleKind::Positive => T::one() - pow(miss, cfg.gamma),
        SampleKind::Negative => match cfg.negative_branch {
            NegativeBranch::OneMinusIoUPow => pow(miss, cfg.gamma),
            NegativeBranch::IoUPowAsPrinted => pow(iou, cfg.gamma),
        },
    }
}

/// `x^γ` taking the integer path for integral γ, so `0.2^2` is `0.2 * 0.2`.
fn pow<T: Scalar>(x: T, gamma: T) -> T {
    if gamma.fract() == T::zero() && gamma <= T::lit(64.0) {
        x.powi(gamma.to_i32().unwrap_or(0))
    } else {
        x.powf(gamma)
    }
}

/// Coefficient actually applied to a sample under `cfg`.
pub fn sample_weight<T: Scalar>(sample: &ClassificationSample<T>, cfg: &LossConfig<T>) -> T {
    if cfg.coeff_mode.applies_to(sample.kind) {
        iou_coefficient(sample.kind, sample.coeff_iou, &cfg.coeff)
    } else {
        T::one()
    }
}

/// `f(IoU) * CE` when the mode covers the sample's kind, plain CE otherwise.
pub fn weighted_cls_loss<T: Scalar>(
    sample: &ClassificationSample<T>,
    cfg: &LossConfig<T>,
) -> Result<T> {
    Ok(sample_weight(sample, cfg) * softmax_ce(&sample.logits, sample.label)?)
}

/// Gradient of [`weighted_cls_loss`] with respect to the logits. There is no
/// gradient with respect to `coeff_iou`.
pub fn weighted_cls_grad<T: Scalar>(
    sample: &ClassificationSample<T>,
    cfg: &LossConfig<T>,
) -> Vec<T> {
    let wgt = sample_weight(sample, cfg);
    softmax_ce_grad(&sample.logits, sample.label)
        .into_iter()
        .map(|g| g * wgt)
        .collect()
}

/// Anchor-relative box encoding `(dx/aw, dy/ah, ln(w/aw), ln(h/ah))`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Offsets4<T>(pub [T; 4]);

impl<T: Scalar> Offsets4<T> {
    pub fn zero() -> Self {
        Self([T::zero(); 4])
    }
}

pub fn encode_offsets<T: Scalar>(anchor: &BBox<T>, target: &BBox<T>) -> Offsets4<T> {
    Offsets4([
        (target.cx - anchor.cx) / anchor.w,
        (target.cy - anchor.cy) / anchor.h,
        (target.w / anchor.w).ln(),
        (target.h / anchor.h).ln(),
    ])
}

pub fn decode_offsets<T: Scalar>(anchor: &BBox<T>, offsets: &Offsets4<T>) -> Result<BBox<T>> {
    let o = offsets.0;
    BBox::new(
        anchor.cx + o[0] * anchor.w,
        anchor.cy + o[1] * anchor.h,
        anchor.w * o[2].exp(),
        anchor.h * o[3].exp(),
    )
}

/// Chain rule through [`decode_offsets`]: maps a gradient with respect to
/// the decoded box onto the offsets.
pub fn decode_jacobian_apply<T: Scalar>(
    anchor: &BBox<T>,
    decoded: &BBox<T>,
    grad_box: &crate::geometry::Grad4<T>,
) -> [T; 4] {
    [
        grad_box.d_cx * anchor.w,
        grad_box.d_cy * anchor.h,
        grad_box.d_w * decoded.w,
        grad_box.d_h * decoded.h,
    ]
}

/// Sum of absolute componentwise differences.
pub fn l1_loc_loss<T: Scalar>(pred: &Offsets4<T>, target: &Offsets4<T>) -> T {
    pred.0
        .iter()
        .zip(target.0.iter())
        .map(|(p, t)| (*p - *t).abs())
        .sum()
}

/// Subgradient of [`l1_loc_loss`] with respect to `pred` (0 at ties).
pub fn l1_loc_grad<T: Scalar>(pred: &Offsets4<T>, target: &Offsets4<T>) -> [T; 4] {
    let mut g = [T::zero(); 4];
    for i in 0..4 {
        let d = pred.0[i] - target.0[i];
        g[i] = if d > T::zero() {
            T::one()
        } else if d < T::zero() {
            -T::one()
        } else {
            T::zero()
        };
    }
    g
}

/// Combined objective value. `no_positives` is set when `n_positive` was 0,
/// in which case the value is 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TotalLoss<T> {
    pub value: T,
    pub no_positives: bool,
}

/// `(cls_sum + alpha * loc_sum) / n_positive`.
pub fn total_loss<T: Scalar>(
    cls_sum: T,
    loc_sum: T,
    n_positive: usize,
    cfg: &LossConfig<T>,
) -> TotalLoss<T> {
    if n_positive == 0 {
        return TotalLoss {
            value: T::zero(),
            no_positives: true,
        };
    }
    let n = T::from_usize(n_positive).unwrap_or_else(T::one);
    TotalLoss {
        value: (cls_sum + cfg.alpha * loc_sum) / n,
        no_positives: false,
    }
}

/// Coefficients evaluated exactly over rationals for integer γ.
pub mod exact {
    use num_rational::Ratio;
    use num_traits::{One, Pow, Zero};

    use super::{NegativeBranch, SampleKind};
    use crate::error::{Error, Result};

    pub fn iou_coefficient(
        kind: SampleKind,
        iou: Ratio<i64>,
        gamma: u32,
        branch: NegativeBranch,
    ) -> Result<Ratio<i64>> {
        if iou < Ratio::zero() || iou > Ratio::one() {
            return Err(Error::InvalidArgument(format!("IoU {iou} outside [0, 1]")));
        }
        if gamma == 0 {
            return Err(Error::InvalidArgument("gamma must be positive".into()));
        }
        let miss = Ratio::one() - iou;
        Ok(match kind {
            SampleKind::Positive => Ratio::one() - Pow::pow(miss, gamma),
            SampleKind::Negative => match branch {
                NegativeBranch::OneMinusIoUPow => Pow::pow(miss, gamma),
                NegativeBranch::IoUPowAsPrinted => Pow::pow(iou, gamma),
            },
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use num_rational::Ratio;

    fn cfg(mode: CoeffMode) -> LossConfig<f64> {
        LossConfig {
            coeff_mode: mode,
            ..LossConfig::default()
        }
    }

    #[test]
    fn defaults() {
        let c = LossConfig::<f64>::default();
        assert_eq!(c.alpha, 1.0);
        assert_eq!(c.coeff.gamma, 2.0);
        assert_eq!(c.mining_ratio, 3);
        assert_eq!(c.coeff.negative_branch, NegativeBranch::OneMinusIoUPow);
        assert!(c.validate().is_ok());
        assert!(LossConfig {
            mining_ratio: 0,
            ..c
        }
        .validate()
        .is_err());
        assert!(CoeffConfig::new(0.0, NegativeBranch::OneMinusIoUPow).is_err());
        assert!(CoeffConfig::new(f64::NAN, NegativeBranch::OneMinusIoUPow).is_err());
    }

    #[test]
    fn ce_examples() {
        assert_relative_eq!(
            softmax_ce(&[0.0, 0.0], 0).unwrap(),
            2f64.ln(),
            max_relative = 1e-15
        );
        assert_relative_eq!(
            softmax_ce(&[2.0, 0.0], 0).unwrap(),
            (1.0 + (-2f64).exp()).ln(),
            max_relative = 1e-14
        );
        let sat: f64 = softmax_ce(&[100.0, 0.0], 0).unwrap();
        assert!(sat.is_finite() && sat < 1e-40);
        assert_relative_eq!(
            softmax_ce(&[100.0, 0.0], 1).unwrap(),
            100.0,
            max_relative = 1e-15
        );
        assert!(softmax_ce(&[1.0, 2.0], 2).is_err());
        assert!(softmax_ce(&[f64::NAN, 2.0], 0).is_err());
    }

    #[test]
    fn coefficient_examples() {
        let c = CoeffConfig::<f64>::default();
        assert_relative_eq!(
            iou_coefficient(SampleKind::Positive, 0.95, &c),
            0.9975,
            max_relative = 1e-14
        );
        assert_relative_eq!(
            iou_coefficient(SampleKind::Negative, 0.8, &c),
            0.04,
            max_relative = 1e-14
        );
        assert_eq!(iou_coefficient(SampleKind::Negative, 0.0, &c), 1.0);
        let printed = CoeffConfig {
            negative_branch: NegativeBranch::IoUPowAsPrinted,
            ..c
        };
        assert_relative_eq!(
            iou_coefficient(SampleKind::Negative, 0.8, &printed),
            0.64,
            max_relative = 1e-14
        );
        assert_eq!(iou_coefficient(SampleKind::Negative, 0.0, &printed), 0.0);
    }

    #[test]
    fn exact_coefficient() {
        let v = exact::iou_coefficient(
            SampleKind::Negative,
            Ratio::new(4, 5),
            2,
            NegativeBranch::OneMinusIoUPow,
        )
        .unwrap();
        assert_eq!(v, Ratio::new(1, 25));
        let p = exact::iou_coefficient(
            SampleKind::Positive,
            Ratio::new(19, 20),
            2,
            NegativeBranch::default(),
        )
        .unwrap();
        assert_eq!(p, Ratio::new(399, 400));
        assert!(exact::iou_coefficient(
            SampleKind::Positive,
            Ratio::new(3, 2),
            2,
            NegativeBranch::default()
        )
        .is_err());
    }

    #[test]
    fn positive_ratio_between_095_and_052() {
        // 0.9975 / (1 - 0.48^2), about 1.30
        let c = CoeffConfig::<f64>::default();
        let r = iou_coefficient(SampleKind::Positive, 0.95, &c)
            / iou_coefficient(SampleKind::Positive, 0.52, &c);
        assert_relative_eq!(r, 0.9975 / 0.7696, max_relative = 1e-12);
    }

    #[test]
    fn weighted_loss_examples() {
        let neg = ClassificationSample::new(vec![0.0, 0.0], 0, SampleKind::Negative, 0.8).unwrap();
        assert_eq!(
            weighted_cls_loss(&neg, &cfg(CoeffMode::None)).unwrap(),
            2f64.ln()
        );
        assert_relative_eq!(
            weighted_cls_loss(&neg, &cfg(CoeffMode::NegOnly)).unwrap(),
            0.04 * 2f64.ln(),
            max_relative = 1e-13
        );
        assert_relative_eq!(
            weighted_cls_loss(&neg, &cfg(CoeffMode::NegOnly)).unwrap(),
            0.0277259,
            max_relative = 1e-5
        );
        // PosOnly leaves negatives untouched
        assert_eq!(
            weighted_cls_loss(&neg, &cfg(CoeffMode::PosOnly)).unwrap(),
            2f64.ln()
        );

        let pos =
            ClassificationSample::new(vec![0.3, 1.2, -0.4], 1, SampleKind::Positive, 1.0).unwrap();
        for gamma in [0.5, 1.0, 2.0, 5.0] {
            let c = LossConfig {
                coeff: CoeffConfig {
                    gamma,
                    ..CoeffConfig::default()
                },
                ..cfg(CoeffMode::Both)
            };
            assert_eq!(
                weighted_cls_loss(&pos, &c).unwrap(),
                softmax_ce(&pos.logits, 1).unwrap()
            );
        }
    }

    #[test]
    fn sample_validation() {
        assert!(ClassificationSample::new(vec![0.0], 0, SampleKind::Positive, 0.5).is_err());
        assert!(ClassificationSample::new(vec![0.0, 1.0], 2, SampleKind::Positive, 0.5).is_err());
        assert!(ClassificationSample::new(vec![0.0, 1.0], 1, SampleKind::Negative, 0.5).is_err());
        assert!(ClassificationSample::new(vec![0.0, 1.0], 0, SampleKind::Negative, 1.5).is_err());
    }

    #[test]
    fn offsets_examples() {
        let a = BBox::new(0.0, 0.0, 2.0, 2.0).unwrap();
        assert_eq!(encode_offsets(&a, &a), Offsets4::zero());
        let t = BBox::new(1.0, 1.0, 4.0, 4.0).unwrap();
        let o = encode_offsets(&a, &t);
        assert_eq!(o.0[0], 0.5);
        assert_eq!(o.0[1], 0.5);
        assert_relative_eq!(o.0[2], 2f64.ln(), max_relative = 1e-15);
        assert_eq!(decode_offsets(&a, &o).unwrap(), t);
    }

    #[test]
    fn l1_examples() {
        let z = Offsets4([0.0; 4]);
        let o = Offsets4([0.5, 0.5, 2f64.ln(), 2f64.ln()]);
        assert_eq!(l1_loc_loss(&z, &z), 0.0);
        assert_relative_eq!(
            l1_loc_loss(&z, &o),
            1.0 + 2.0 * 2f64.ln(),
            max_relative = 1e-15
        );
        assert_eq!(l1_loc_loss(&z, &o), l1_loc_loss(&o, &z));
        assert_eq!(l1_loc_grad(&z, &o), [-1.0; 4]);
    }

    #[test]
    fn total_loss_examples() {
        let c = LossConfig::<f64>::default();
        assert_eq!(total_loss(1.0, 0.5, 2, &c).value, 0.75);
        assert_eq!(total_loss(1.7, 0.0, 1, &c).value, 1.7);
        let c2 = LossConfig { alpha: 2.0, ..c };
        assert_eq!(total_loss(1.0, 1.0, 1, &c2).value, 3.0);
        let empty = total_loss(1.0, 1.0, 0, &c);
        assert_eq!(
            empty,
            TotalLoss {
                value: 0.0,
                no_positives: true
            }
        );
    }
}
