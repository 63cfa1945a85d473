//! Metric scale prediction and pose/depth readout.
//!
//! Raw pose and depth estimates live in an arbitrary scale. A scale head
//! reads a summary token and predicts a strictly positive factor
//! `s = exp(g(z))` that converts translations and depths to metric units.
//! Relative-pose estimates from overlapping windows are fused by weighted
//! averaging, with quaternions aligned to a common hemisphere first. The
//! composite loss combines translation and rotation error, confidence-
//! weighted depth error, and (on metric-scale samples only) a log-scale
//! error.

use crate::error::{Error, Result};
use crate::gla::RecurrentState;
use crate::linalg::{all_finite, dot};

/// Switch point of the smooth-L1 penalty: quadratic below, linear above.
pub const SMOOTH_L1_BETA: f64 = 1.0;

/// Largest magnitude accepted in the scale head's log space; `exp` of
/// anything beyond this over- or underflows an `f64`.
pub const LOG_SCALE_LIMIT: f64 = 700.0;

// =========================================================================
// Types
// =========================================================================

/// Summary embedding the scale head reads.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricToken {
    pub z: Vec<f64>,
}

impl MetricToken {
    pub fn new(z: Vec<f64>) -> Result<Self> {
        if z.is_empty() {
            return Err(Error::InvalidConfig("metric token must be non-empty".into()));
        }
        if !all_finite(&z) {
            return Err(Error::NonFinite("metric token"));
        }
        Ok(MetricToken { z })
    }

    /// Builds the token from the evidence held in a recurrent state's
    /// slow-retention channels: one row norm per selected channel, indexed
    /// as in [`RecurrentState::row_norms`]. This is one plausible wiring of
    /// state to scale, not the only one.
    pub fn from_state_slow_channels(state: &RecurrentState, slow: &[usize]) -> Result<Self> {
        if slow.is_empty() {
            return Err(Error::InvalidConfig(
                "at least one slow channel is needed to form a metric token".into(),
            ));
        }
        let norms = state.row_norms();
        let mut z = Vec::with_capacity(slow.len());
        for &c in slow {
            if c >= norms.len() {
                return Err(Error::IndexOutOfRange {
                    context: "slow channel index",
                    index: c,
                    len: norms.len(),
                });
            }
            z.push(norms[c]);
        }
        MetricToken::new(z)
    }
}

/// Affine map from the metric token to log-scale.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaleHead {
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl ScaleHead {
    pub fn new(weights: Vec<f64>, bias: f64) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::InvalidConfig("scale head must be non-empty".into()));
        }
        if !all_finite(&weights) || !bias.is_finite() {
            return Err(Error::NonFinite("scale head parameters"));
        }
        Ok(ScaleHead { weights, bias })
    }
}

/// Relative camera pose with the focal length that rendered it.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseEstimate {
    pub translation: [f64; 3],
    /// Unit quaternion in (w, x, y, z) order.
    pub rotation: [f64; 4],
    pub focal: f64,
}

impl PoseEstimate {
    pub fn new(translation: [f64; 3], rotation: [f64; 4], focal: f64) -> Result<Self> {
        if !all_finite(&translation) || !all_finite(&rotation) || !focal.is_finite() {
            return Err(Error::NonFinite("pose estimate"));
        }
        if focal <= 0.0 {
            return Err(Error::Domain(format!("focal length {focal} must be positive")));
        }
        let norm = dot(&rotation, &rotation).sqrt();
        if norm < 1e-12 {
            return Err(Error::Domain("rotation quaternion has zero norm".into()));
        }
        let rotation = [
            rotation[0] / norm,
            rotation[1] / norm,
            rotation[2] / norm,
            rotation[3] / norm,
        ];
        Ok(PoseEstimate {
            translation,
            rotation,
            focal,
        })
    }

    pub fn identity(focal: f64) -> Result<Self> {
        PoseEstimate::new([0.0; 3], [1.0, 0.0, 0.0, 0.0], focal)
    }
}

/// Per-pixel depth with a confidence in `[0, 1]` for each pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    height: usize,
    width: usize,
    depth: Vec<f64>,
    confidence: Vec<f64>,
}

impl DepthMap {
    pub fn new(height: usize, width: usize, depth: Vec<f64>, confidence: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidConfig("depth map must be non-empty".into()));
        }
        if depth.len() != height * width {
            return Err(Error::DimensionMismatch {
                context: "depth buffer size",
                expected: height * width,
                got: depth.len(),
            });
        }
        if confidence.len() != depth.len() {
            return Err(Error::DimensionMismatch {
                context: "confidence buffer size",
                expected: depth.len(),
                got: confidence.len(),
            });
        }
        for &d in &depth {
            if !d.is_finite() || d < 0.0 {
                return Err(Error::Domain(format!("depth {d} must be finite and nonnegative")));
            }
        }
        for &c in &confidence {
            if !c.is_finite() || !(0.0..=1.0).contains(&c) {
                return Err(Error::Domain(format!("confidence {c} outside [0, 1]")));
            }
        }
        Ok(DepthMap {
            height,
            width,
            depth,
            confidence,
        })
    }

    pub fn uniform_confidence(height: usize, width: usize, depth: Vec<f64>) -> Result<Self> {
        let n = depth.len();
        DepthMap::new(height, width, depth, vec![1.0; n])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn depth(&self) -> &[f64] {
        &self.depth
    }

    pub fn confidence(&self) -> &[f64] {
        &self.confidence
    }

    /// Median depth over all pixels.
    pub fn median_depth(&self) -> f64 {
        let mut sorted = self.depth.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let n = sorted.len();
        if n % 2 == 1 {
            sorted[n / 2]
        } else {
            0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub pose: f64,
    pub depth: f64,
    pub scale: f64,
}

impl LossWeights {
    pub fn new(pose: f64, depth: f64, scale: f64) -> Result<Self> {
        for (name, v) in [("pose", pose), ("depth", depth), ("scale", scale)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Domain(format!(
                    "loss weight {name} = {v} must be finite and nonnegative"
                )));
            }
        }
        Ok(LossWeights { pose, depth, scale })
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            pose: 1.0,
            depth: 1.0,
            scale: 1.0,
        }
    }
}

// =========================================================================
// Scale prediction
// =========================================================================

/// Predicted metric scale `exp(w . z + b)`, always strictly positive.
pub fn predict_scale(token: &MetricToken, head: &ScaleHead) -> Result<f64> {
    if token.z.len() != head.weights.len() {
        return Err(Error::DimensionMismatch {
            context: "scale head input width",
            expected: head.weights.len(),
            got: token.z.len(),
        });
    }
    let log_scale = dot(&token.z, &head.weights) + head.bias;
    if log_scale.abs() > LOG_SCALE_LIMIT {
        return Err(Error::Overflow {
            context: "scale head log output",
            value: log_scale,
            limit: LOG_SCALE_LIMIT,
        });
    }
    Ok(log_scale.exp())
}

/// Converts a pose and depth map to metric units: translation and depth are
/// multiplied by the scale, rotation, focal length, and confidence are not.
pub fn apply_scale(
    pose: &PoseEstimate,
    depth: &DepthMap,
    scale: f64,
) -> Result<(PoseEstimate, DepthMap)> {
    if !(scale > 0.0) || !scale.is_finite() {
        return Err(Error::Domain(format!(
            "metric scale {scale} must be positive and finite"
        )));
    }
    let scaled_pose = PoseEstimate {
        translation: [
            pose.translation[0] * scale,
            pose.translation[1] * scale,
            pose.translation[2] * scale,
        ],
        rotation: pose.rotation,
        focal: pose.focal,
    };
    let scaled_depth = DepthMap {
        height: depth.height,
        width: depth.width,
        depth: depth.depth.iter().map(|d| d * scale).collect(),
        confidence: depth.confidence.clone(),
    };
    Ok((scaled_pose, scaled_depth))
}

// =========================================================================
// Pose fusion
// =========================================================================

/// Weighted fusion of pose estimates. Translations and focal lengths are
/// averaged directly. Quaternions are first flipped onto the hemisphere of
/// the first estimate (a quaternion and its negation encode the same
/// rotation), then averaged and renormalized.
pub fn fuse_relative_pose(estimates: &[PoseEstimate], weights: &[f64]) -> Result<PoseEstimate> {
    if estimates.is_empty() {
        return Err(Error::InvalidConfig("nothing to fuse".into()));
    }
    if weights.len() != estimates.len() {
        return Err(Error::DimensionMismatch {
            context: "fusion weight count",
            expected: estimates.len(),
            got: weights.len(),
        });
    }
    let mut sum = 0.0;
    for &w in weights {
        if !w.is_finite() || w < 0.0 {
            return Err(Error::Domain(format!(
                "fusion weight {w} must be finite and nonnegative"
            )));
        }
        sum += w;
    }
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::Domain(format!(
            "fusion weights sum to {sum}, not 1"
        )));
    }
    let mut translation = [0.0; 3];
    let mut focal = 0.0;
    let mut rotation = [0.0; 4];
    let anchor = estimates[0].rotation;
    for (est, &w) in estimates.iter().zip(weights) {
        for (acc, v) in translation.iter_mut().zip(est.translation) {
            *acc += w * v;
        }
        focal += w * est.focal;
        let flip = if dot(&est.rotation, &anchor) < 0.0 { -1.0 } else { 1.0 };
        for (acc, v) in rotation.iter_mut().zip(est.rotation) {
            *acc += w * flip * v;
        }
    }
    let norm = dot(&rotation, &rotation).sqrt();
    if norm < 1e-12 {
        return Err(Error::Domain(
            "fused quaternion is degenerate: the estimates cancel out".into(),
        ));
    }
    for v in rotation.iter_mut() {
        *v /= norm;
    }
    PoseEstimate::new(translation, rotation, focal)
}

/// Angle of the relative rotation between two unit quaternions:
/// `2 * arccos(|<a, b>|)`, in radians, insensitive to the sign convention.
pub fn quaternion_geodesic(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    2.0 * dot(a, b).abs().clamp(0.0, 1.0).acos()
}

// =========================================================================
// Composite loss
// =========================================================================

#[derive(Debug, Clone)]
pub struct ReadoutPrediction {
    pub pose: PoseEstimate,
    pub depth: DepthMap,
    pub scale: f64,
}

#[derive(Debug, Clone)]
pub struct ReadoutTarget {
    pub pose: PoseEstimate,
    pub depth: DepthMap,
    pub scale: f64,
    /// Whether the sample carries trustworthy metric scale; the scale term
    /// contributes only when it does.
    pub is_metric: bool,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct LossBreakdown {
    pub pose: f64,
    pub depth: f64,
    pub scale: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("loss breakdown serializes")
    }
}

/// Smooth-L1 penalty: `0.5 r^2 / beta` inside `|r| < beta`, `|r| - beta/2`
/// outside.
pub fn smooth_l1(r: f64) -> f64 {
    let a = r.abs();
    if a < SMOOTH_L1_BETA {
        0.5 * r * r / SMOOTH_L1_BETA
    } else {
        a - 0.5 * SMOOTH_L1_BETA
    }
}

/// Pose, depth, and scale errors with their weighted total.
///
/// Translation residuals and depth residuals are normalized by the median
/// target depth before the smooth-L1 penalty, so the loss is insensitive to
/// the arbitrary scale of the raw predictions; an all-zero target depth map
/// leaves residuals unnormalized. The pose term adds the quaternion geodesic
/// angle. The depth term averages confidence-weighted pixel penalties. The
/// scale term compares log-scales and is skipped for samples without metric
/// ground truth.
pub fn composite_loss(
    pred: &ReadoutPrediction,
    target: &ReadoutTarget,
    weights: &LossWeights,
) -> Result<LossBreakdown> {
    if pred.depth.height != target.depth.height || pred.depth.width != target.depth.width {
        return Err(Error::DimensionMismatch {
            context: "depth map shape",
            expected: target.depth.depth.len(),
            got: pred.depth.depth.len(),
        });
    }
    if !(pred.scale > 0.0) || !(target.scale > 0.0) {
        return Err(Error::Domain("scales must be positive".into()));
    }

    let median = target.depth.median_depth();
    let normalizer = if median > 0.0 { median } else { 1.0 };

    let mut pose_loss = 0.0;
    for (p, t) in pred.pose.translation.iter().zip(target.pose.translation) {
        pose_loss += smooth_l1((p - t) / normalizer);
    }
    pose_loss += quaternion_geodesic(&pred.pose.rotation, &target.pose.rotation);

    let n = pred.depth.depth.len() as f64;
    let mut depth_loss = 0.0;
    for ((dp, dt), c) in pred
        .depth
        .depth
        .iter()
        .zip(&target.depth.depth)
        .zip(&pred.depth.confidence)
    {
        depth_loss += c * smooth_l1((dp - dt) / normalizer);
    }
    depth_loss /= n;

    let scale_loss = if target.is_metric {
        smooth_l1(pred.scale.ln() - target.scale.ln())
    } else {
        0.0
    };

    Ok(LossBreakdown {
        pose: pose_loss,
        depth: depth_loss,
        scale: scale_loss,
        total: weights.pose * pose_loss + weights.depth * depth_loss + weights.scale * scale_loss,
    })
}
