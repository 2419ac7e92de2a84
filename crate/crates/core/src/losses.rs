//! Scaled end-point-error losses on the residual (ego-compensated) flow.
//!
//! All three schemes reduce to `Σ_p w(p) · ‖ΔF̂(p) − ΔF_gt(p)‖₂` for some
//! per-point weight `w`; [`point_weights`] produces those weights so the
//! training loop needs a single differentiable reduction.
//!
//! * `foreground`: σ = 1 on foreground points, 0.1 elsewhere; mean over points.
//! * `speed`: σ from the ego-compensated speed (0.1 below `low`, 1 above
//!   `high`, `1.8 s − 0.8` in between); mean over points.
//! * `bucket`: points are split into slow / medium / fast speed buckets and
//!   the per-bucket mean errors are summed.

use serde::{Deserialize, Serialize};

use crate::error::{validation, Error, Result};
use crate::geometry::Vec3;

pub const FOREGROUND_WEIGHT: f64 = 1.0;
pub const BACKGROUND_WEIGHT: f64 = 0.1;
pub const SLOW_WEIGHT: f64 = 0.1;
pub const FAST_WEIGHT: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossScheme {
    Foreground,
    Speed,
    Bucket,
}

impl std::str::FromStr for LossScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "foreground" => Ok(Self::Foreground),
            "speed" => Ok(Self::Speed),
            "bucket" => Ok(Self::Bucket),
            other => Err(Error::Config(format!("unknown loss scheme {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub scheme: LossScheme,
    /// Speed (m/s) below which a point is "slow".
    pub low: f64,
    /// Speed (m/s) above which a point is "fast".
    pub high: f64,
    /// Frame interval in seconds.
    pub dt: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { scheme: LossScheme::Bucket, low: 0.4, high: 1.0, dt: 0.1 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.low > 0.0 && self.low < self.high && self.high.is_finite()) {
            return Err(Error::Config(format!("loss thresholds need 0 < low < high, got {} / {}", self.low, self.high)));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::Config(format!("loss.dt must be positive, got {}", self.dt)));
        }
        Ok(())
    }
}

/// Supervision for one frame's valid points.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualTargets {
    /// `F_gt − F_ego`, meters per frame.
    pub delta_gt: Vec<Vec3>,
    /// `‖delta_gt‖ / dt`, m/s.
    pub speeds: Vec<f64>,
    pub foreground_mask: Vec<bool>,
}

impl ResidualTargets {
    pub fn new(delta_gt: Vec<Vec3>, foreground_mask: Vec<bool>, dt: f64) -> Result<Self> {
        if delta_gt.len() != foreground_mask.len() {
            return Err(validation("residual targets and foreground mask differ in length"));
        }
        if delta_gt.iter().any(|d| !d.iter().all(|v| v.is_finite())) {
            return Err(validation("residual targets must be finite"));
        }
        let speeds = delta_gt.iter().map(|d| d.norm() / dt).collect();
        Ok(Self { delta_gt, speeds, foreground_mask })
    }

    pub fn len(&self) -> usize {
        self.delta_gt.len()
    }

    pub fn is_empty(&self) -> bool {
        self.delta_gt.is_empty()
    }
}

pub fn sigma_foreground(foreground_mask: &[bool]) -> Vec<f64> {
    foreground_mask.iter().map(|&fg| if fg { FOREGROUND_WEIGHT } else { BACKGROUND_WEIGHT }).collect()
}

/// Speed scaling, evaluated exactly as written, including the jump from 0.1
/// to `1.8·low − 0.8` just above `low`.
pub fn sigma_speed_with(speeds: &[f64], low: f64, high: f64) -> Result<Vec<f64>> {
    speeds
        .iter()
        .map(|&s| {
            if !(s >= 0.0) {
                return Err(validation(format!("speed {s} is negative or NaN")));
            }
            Ok(if s < low {
                SLOW_WEIGHT
            } else if s > high {
                FAST_WEIGHT
            } else {
                1.8 * s - 0.8
            })
        })
        .collect()
}

pub fn sigma_speed(speeds: &[f64]) -> Result<Vec<f64>> {
    let d = LossConfig::default();
    sigma_speed_with(speeds, d.low, d.high)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SpeedBucket {
    Slow,
    Medium,
    Fast,
}

/// Slow: `s < low`; medium: `low ≤ s ≤ high`; fast: `s > high`.
pub fn speed_bucket(speed: f64, cfg: &LossConfig) -> SpeedBucket {
    if speed < cfg.low {
        SpeedBucket::Slow
    } else if speed > cfg.high {
        SpeedBucket::Fast
    } else {
        SpeedBucket::Medium
    }
}

fn check_lengths(pred: &[Vec3], targets: &ResidualTargets) -> Result<()> {
    if pred.len() != targets.len() {
        return Err(validation(format!("{} predictions for {} targets", pred.len(), targets.len())));
    }
    Ok(())
}

/// `(1/N) Σ σ(p) ‖ΔF̂(p) − ΔF_gt(p)‖₂`.
pub fn weighted_loss(pred_residual: &[Vec3], targets: &ResidualTargets, weights: &[f64]) -> Result<f64> {
    check_lengths(pred_residual, targets)?;
    if weights.len() != targets.len() {
        return Err(validation("weight count does not match point count"));
    }
    if targets.is_empty() {
        log::warn!("weighted loss over zero points is defined as 0");
        return Ok(0.0);
    }
    let sum: f64 = pred_residual
        .iter()
        .zip(&targets.delta_gt)
        .zip(weights)
        .map(|((p, t), w)| w * (p - t).norm())
        .sum();
    Ok(sum / targets.len() as f64)
}

/// Sum over the three speed buckets of the bucket's mean error. Empty buckets
/// contribute nothing.
pub fn bucket_loss(pred_residual: &[Vec3], targets: &ResidualTargets, cfg: &LossConfig) -> Result<f64> {
    check_lengths(pred_residual, targets)?;
    if targets.is_empty() {
        log::warn!("bucket loss over zero points is defined as 0");
        return Ok(0.0);
    }
    let mut sums = [0.0f64; 3];
    let mut counts = [0usize; 3];
    for ((p, t), &s) in pred_residual.iter().zip(&targets.delta_gt).zip(&targets.speeds) {
        let b = speed_bucket(s, cfg) as usize;
        sums[b] += (p - t).norm();
        counts[b] += 1;
    }
    Ok(sums.iter().zip(&counts).filter(|(_, &c)| c > 0).map(|(s, &c)| s / c as f64).sum())
}

/// Per-point weights `w` such that the configured loss equals
/// `Σ_p w(p) ‖ΔF̂(p) − ΔF_gt(p)‖₂`.
pub fn point_weights(cfg: &LossConfig, targets: &ResidualTargets) -> Result<Vec<f64>> {
    let n = targets.len();
    if n == 0 {
        return Ok(Vec::new());
    }
    let inv_n = 1.0 / n as f64;
    Ok(match cfg.scheme {
        LossScheme::Foreground => sigma_foreground(&targets.foreground_mask).into_iter().map(|s| s * inv_n).collect(),
        LossScheme::Speed => sigma_speed_with(&targets.speeds, cfg.low, cfg.high)?.into_iter().map(|s| s * inv_n).collect(),
        LossScheme::Bucket => {
            let buckets: Vec<usize> = targets.speeds.iter().map(|&s| speed_bucket(s, cfg) as usize).collect();
            let mut counts = [0usize; 3];
            for &b in &buckets {
                counts[b] += 1;
            }
            buckets.iter().map(|&b| 1.0 / counts[b] as f64).collect()
        }
    })
}

/// Value of the configured loss.
pub fn scheme_loss(cfg: &LossConfig, pred_residual: &[Vec3], targets: &ResidualTargets) -> Result<f64> {
    match cfg.scheme {
        LossScheme::Foreground => weighted_loss(pred_residual, targets, &sigma_foreground(&targets.foreground_mask)),
        LossScheme::Speed => weighted_loss(pred_residual, targets, &sigma_speed_with(&targets.speeds, cfg.low, cfg.high)?),
        LossScheme::Bucket => bucket_loss(pred_residual, targets, cfg),
    }
}

/// Gradient of `Σ_p w(p) ‖ΔF̂(p) − ΔF_gt(p)‖₂` with respect to the prediction.
/// Zero-error points get a zero gradient.
pub fn weighted_norm_grad(pred_residual: &[Vec3], targets: &ResidualTargets, weights: &[f64]) -> Vec<Vec3> {
    pred_residual
        .iter()
        .zip(&targets.delta_gt)
        .zip(weights)
        .map(|((p, t), w)| {
            let e = p - t;
            let n = e.norm();
            if n > 0.0 {
                e * (w / n)
            } else {
                Vec3::zeros()
            }
        })
        .collect()
}
