//! Loss functions and detection plumbing for anchor-based object detectors.
//!
//! The crate covers the IoU family of localization penalties (IoU, GIoU, DIoU
//! and the Mahalanobis-normalized MIoU) with analytic gradients, an IoU-based
//! coefficient for weighting the classification loss of positive and negative
//! anchors, anchor matching with hard negative mining, k-means anchor sizing,
//! NMS, COCO-style average precision, and a set of small simulations that
//! exercise all of the above without a network.
//!
//! Geometry, losses, assignment and postprocessing are generic over
//! [`Scalar`] (`f32` or `f64`). The simulations run in `f64`. Integer-γ
//! coefficients can also be evaluated exactly over rationals, see
//! [`losses::exact`].

pub mod assignment;
pub mod error;
pub mod geometry;
pub mod gradcheck;
pub mod losses;
pub mod postprocess;
pub mod scalar;
pub mod simulation;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type BBoxF32 = geometry::BBox<f32>;
pub type BBoxF64 = geometry::BBox<f64>;
pub type Grad4F64 = geometry::Grad4<f64>;
pub type OffsetsF64 = losses::Offsets4<f64>;
pub type LossConfigF64 = losses::LossConfig<f64>;
pub type CoeffConfigF64 = losses::CoeffConfig<f64>;
pub type DetectionF64 = postprocess::Detection<f64>;
pub type GroundTruthF64 = postprocess::GroundTruth<f64>;
pub type ApReportF64 = postprocess::ApReport<f64>;
pub type AnchorMatchF64 = assignment::AnchorMatch<f64>;
pub type SizeClusterF64 = assignment::SizeCluster<f64>;
/// Exact rational used by [`losses::exact`].
pub type Rational = num_rational::Ratio<i64>;
