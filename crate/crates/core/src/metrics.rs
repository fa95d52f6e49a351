//! Depth and surface-normal accuracy metrics.
//!
//! Maps are flat, row-major and channel-interleaved (HWC); masks have one
//! entry per pixel.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensorcore::Real;

/// Predictions are clamped to at least this before depth ratios.
pub const MIN_PRED_DEPTH: f64 = 1e-6;

pub const NORMAL_THRESHOLDS_DEG: [f64; 3] = [11.25, 22.5, 30.0];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthMetrics {
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
    pub rmse: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalMetrics {
    pub recall_11_25: f64,
    pub recall_22_5: f64,
    pub recall_30: f64,
    /// degrees
    pub rmse: f64,
}

fn check_lengths(op: &'static str, pred: usize, gt: usize, pixels: usize, channels: usize) -> Result<()> {
    if pred != gt || gt != pixels * channels {
        return Err(Error::shape(op, &[pred, gt], &[pixels * channels, pixels * channels]));
    }
    Ok(())
}

pub fn depth_metrics<T: Real>(pred: &[T], gt: &[T], mask: &[bool]) -> Result<DepthMetrics> {
    check_lengths("depth_metrics", pred.len(), gt.len(), mask.len(), 1)?;
    let mut hits = [0usize; 3];
    let mut sq = 0.0;
    let mut n = 0usize;
    for (i, _) in mask.iter().enumerate().filter(|(_, m)| **m) {
        let g = gt[i].as_f64();
        if !(g > 0.0) {
            return Err(Error::invalid(format!(
                "nonpositive ground-truth depth {g} at valid pixel {i}"
            )));
        }
        let p = pred[i].as_f64().max(MIN_PRED_DEPTH);
        let ratio = (p / g).max(g / p);
        for (k, hit) in hits.iter_mut().enumerate() {
            if ratio < 1.25f64.powi(k as i32 + 1) {
                *hit += 1;
            }
        }
        sq += (p - g) * (p - g);
        n += 1;
    }
    if n == 0 {
        return Err(Error::EmptyMask);
    }
    let pct = |h: usize| 100.0 * h as f64 / n as f64;
    Ok(DepthMetrics {
        delta1: pct(hits[0]),
        delta2: pct(hits[1]),
        delta3: pct(hits[2]),
        rmse: (sq / n as f64).sqrt(),
    })
}

/// Angle in degrees between two 3-vectors (arccos of the clamped dot
/// product of the normalized vectors).
pub fn angle_deg(a: [f64; 3], b: [f64; 3]) -> f64 {
    let na = (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt();
    let nb = (b[0] * b[0] + b[1] * b[1] + b[2] * b[2]).sqrt();
    let dot = (a[0] * b[0] + a[1] * b[1] + a[2] * b[2]) / (na * nb);
    dot.clamp(-1.0, 1.0).acos().to_degrees()
}

pub fn normal_metrics<T: Real>(pred: &[T], gt: &[T], mask: &[bool]) -> Result<NormalMetrics> {
    check_lengths("normal_metrics", pred.len(), gt.len(), mask.len(), 3)?;
    let v = |s: &[T], i: usize| [s[3 * i].as_f64(), s[3 * i + 1].as_f64(), s[3 * i + 2].as_f64()];
    let mut hits = [0usize; 3];
    let mut sq = 0.0;
    let mut n = 0usize;
    for (i, _) in mask.iter().enumerate().filter(|(_, m)| **m) {
        let angle = angle_deg(v(pred, i), v(gt, i));
        if !angle.is_finite() {
            return Err(Error::NonFinite(format!("normal angle at pixel {i}")));
        }
        for (hit, t) in hits.iter_mut().zip(NORMAL_THRESHOLDS_DEG) {
            if angle < t {
                *hit += 1;
            }
        }
        sq += angle * angle;
        n += 1;
    }
    if n == 0 {
        return Err(Error::EmptyMask);
    }
    let pct = |h: usize| 100.0 * h as f64 / n as f64;
    Ok(NormalMetrics {
        recall_11_25: pct(hits[0]),
        recall_22_5: pct(hits[1]),
        recall_30: pct(hits[2]),
        rmse: (sq / n as f64).sqrt(),
    })
}

/// Rescales masked depths to [0, 1] (0 = closest). Pixels outside the mask
/// are set to 0, the invalid sentinel.
pub fn normalize_object_depth<T: Real>(gt: &[T], mask: &[bool]) -> Result<Vec<T>> {
    if gt.len() != mask.len() {
        return Err(Error::shape("normalize_object_depth", &[gt.len()], &[mask.len()]));
    }
    let masked = || gt.iter().zip(mask).filter(|(_, m)| **m).map(|(d, _)| d.as_f64());
    if masked().next().is_none() {
        return Err(Error::EmptyMask);
    }
    let lo = masked().fold(f64::INFINITY, f64::min);
    let hi = masked().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return Err(Error::Degenerate(format!("constant object depth {lo}")));
    }
    Ok(gt
        .iter()
        .zip(mask)
        .map(|(d, &m)| {
            if m {
                let d = d.as_f64();
                // pin the endpoints exactly
                let v = if d == lo {
                    0.0
                } else if d == hi {
                    1.0
                } else {
                    (d - lo) / (hi - lo)
                };
                T::cast(v)
            } else {
                T::zero()
            }
        })
        .collect())
}

/// Component-wise mean of per-image depth metrics.
pub fn mean_depth_metrics(items: &[DepthMetrics]) -> Option<DepthMetrics> {
    let n = items.len() as f64;
    (!items.is_empty()).then(|| DepthMetrics {
        delta1: items.iter().map(|m| m.delta1).sum::<f64>() / n,
        delta2: items.iter().map(|m| m.delta2).sum::<f64>() / n,
        delta3: items.iter().map(|m| m.delta3).sum::<f64>() / n,
        rmse: items.iter().map(|m| m.rmse).sum::<f64>() / n,
    })
}

pub fn mean_normal_metrics(items: &[NormalMetrics]) -> Option<NormalMetrics> {
    let n = items.len() as f64;
    (!items.is_empty()).then(|| NormalMetrics {
        recall_11_25: items.iter().map(|m| m.recall_11_25).sum::<f64>() / n,
        recall_22_5: items.iter().map(|m| m.recall_22_5).sum::<f64>() / n,
        recall_30: items.iter().map(|m| m.recall_30).sum::<f64>() / n,
        rmse: items.iter().map(|m| m.rmse).sum::<f64>() / n,
    })
}
