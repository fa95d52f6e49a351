use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensorcore::{sigmoid, softplus, Real};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub silog_lambda: f64,
    pub grad_weight: f64,
    pub grad_scales: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            silog_lambda: 0.5,
            grad_weight: 0.5,
            grad_scales: 4,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.silog_lambda) {
            return Err(Error::invalid(format!(
                "silog_lambda {} outside [0, 1]",
                self.silog_lambda
            )));
        }
        if !(self.grad_weight >= 0.0 && self.grad_weight.is_finite()) {
            return Err(Error::invalid(format!(
                "grad_weight {} must be finite and >= 0",
                self.grad_weight
            )));
        }
        if self.grad_scales == 0 {
            return Err(Error::invalid("grad_scales must be >= 1"));
        }
        Ok(())
    }
}

/// A scalar loss together with its gradient w.r.t. the prediction.
#[derive(Clone, Debug, PartialEq)]
pub struct LossGrad<T> {
    pub value: f64,
    pub grad: Vec<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AngularLoss<T> {
    pub value: f64,
    /// w.r.t. the unit normal, planar 3×H×W
    pub grad_normal: Vec<T>,
    /// w.r.t. the concentration κ, H×W
    pub grad_kappa: Vec<T>,
}

/// Log residuals `ln pred − ln gt` on valid pixels (0 elsewhere).
fn log_residuals<T: Real>(op: &'static str, pred: &[T], gt: &[f32], mask: &[bool]) -> Result<(Vec<f64>, usize)> {
    if pred.len() != gt.len() || gt.len() != mask.len() {
        return Err(Error::shape(op, &[pred.len(), gt.len()], &[mask.len(), mask.len()]));
    }
    let mut r = vec![0.0; pred.len()];
    let mut n = 0;
    for i in 0..pred.len() {
        if !mask[i] {
            continue;
        }
        let (p, g) = (pred[i].as_f64(), gt[i] as f64);
        if !p.is_finite() {
            return Err(Error::NonFinite(format!("{op}: prediction {p} at pixel {i}")));
        }
        if !(p > 0.0 && g > 0.0) {
            return Err(Error::invalid(format!(
                "{op}: nonpositive depth at valid pixel {i} (pred {p}, gt {g})"
            )));
        }
        r[i] = p.ln() - g.ln();
        n += 1;
    }
    if n == 0 {
        return Err(Error::EmptyMask);
    }
    Ok((r, n))
}

/// Scale-invariant log loss `mean(g²) − λ·mean(g)²`, `g = ln pred − ln gt`.
pub fn silog_loss<T: Real>(pred: &[T], gt: &[f32], mask: &[bool], lambda: f64) -> Result<LossGrad<T>> {
    let (r, n) = log_residuals("silog_loss", pred, gt, mask)?;
    let n = n as f64;
    let mean = r.iter().sum::<f64>() / n;
    let mean_sq = r.iter().map(|g| g * g).sum::<f64>() / n;
    let grad = (0..r.len())
        .map(|i| {
            if mask[i] {
                let dr = 2.0 * r[i] / n - 2.0 * lambda * mean / n;
                T::cast(dr / pred[i].as_f64())
            } else {
                T::zero()
            }
        })
        .collect();
    Ok(LossGrad {
        value: mean_sq - lambda * mean * mean,
        grad,
    })
}

/// Multi-scale gradient matching on log residuals. Scale `s` subsamples
/// every `2^s`-th pixel; its term is the sum of absolute forward
/// differences (both ends valid) over the count of valid subsampled pixels.
/// Scales without valid pixels are skipped.
pub fn gradmatch_loss<T: Real>(
    pred: &[T],
    gt: &[f32],
    mask: &[bool],
    (height, width): (usize, usize),
    scales: usize,
) -> Result<LossGrad<T>> {
    if height * width != pred.len() {
        return Err(Error::shape("gradmatch_loss", &[pred.len()], &[height, width]));
    }
    if scales == 0 {
        return Err(Error::invalid("gradmatch_loss needs at least one scale"));
    }
    let (r, _) = log_residuals("gradmatch_loss", pred, gt, mask)?;
    let mut value = 0.0;
    let mut dr = vec![0.0; r.len()];
    // scales past the map size contribute nothing
    for s in 0..scales.min(usize::BITS as usize - 1) {
        let step = 1usize << s;
        if step > height.max(width) {
            break;
        }
        let n = (0..height)
            .step_by(step)
            .flat_map(|y| (0..width).step_by(step).map(move |x| y * width + x))
            .filter(|&i| mask[i])
            .count();
        if n == 0 {
            continue;
        }
        let inv = 1.0 / n as f64;
        let mut pair = |a: usize, b: usize| {
            if mask[a] && mask[b] {
                let d = r[b] - r[a];
                value += d.abs() * inv;
                let sign = if d > 0.0 {
                    1.0
                } else if d < 0.0 {
                    -1.0
                } else {
                    0.0
                };
                dr[b] += sign * inv;
                dr[a] -= sign * inv;
            }
        };
        for y in (0..height).step_by(step) {
            for x in (0..width).step_by(step) {
                let i = y * width + x;
                if x + step < width {
                    pair(i, i + step);
                }
                if y + step < height {
                    pair(i, i + step * width);
                }
            }
        }
    }
    let grad = dr
        .iter()
        .zip(pred)
        .map(|(d, p)| if *d == 0.0 { T::zero() } else { T::cast(d / p.as_f64()) })
        .collect();
    Ok(LossGrad { value, grad })
}

/// Per-pixel negative log-likelihood of the angular density
/// `(κ²+1) / (2π(1+e^(−κπ))) · e^(−κθ)`.
pub fn angular_nll(theta: f64, kappa: f64) -> f64 {
    -(kappa * kappa).ln_1p()
        + (2.0 * std::f64::consts::PI).ln()
        + softplus(-kappa * std::f64::consts::PI)
        + kappa * theta
}

/// `d angular_nll / d κ`.
pub fn angular_nll_dkappa(theta: f64, kappa: f64) -> f64 {
    use std::f64::consts::PI;
    -2.0 * kappa / (kappa * kappa + 1.0) - PI * sigmoid(-kappa * PI) + theta
}

/// Mean angular NLL over valid pixels. `normal` and `kappa` are the probe
/// outputs (planar 3×H×W and H×W); `gt` holds unit normals interleaved per
/// pixel.
pub fn angular_nll_loss<T: Real>(normal: &[T], kappa: &[T], gt: &[f32], mask: &[bool]) -> Result<AngularLoss<T>> {
    let hw = mask.len();
    if normal.len() != 3 * hw || kappa.len() != hw || gt.len() != 3 * hw {
        return Err(Error::shape(
            "angular_nll_loss",
            &[normal.len(), kappa.len(), gt.len()],
            &[3 * hw, hw, 3 * hw],
        ));
    }
    let n = mask.iter().filter(|m| **m).count();
    if n == 0 {
        return Err(Error::EmptyMask);
    }
    let inv = 1.0 / n as f64;
    let mut value = 0.0;
    let mut grad_normal = vec![T::zero(); 3 * hw];
    let mut grad_kappa = vec![T::zero(); hw];
    for i in (0..hw).filter(|&i| mask[i]) {
        let p = [0, 1, 2].map(|c| normal[c * hw + i].as_f64());
        let g = [0, 1, 2].map(|c| gt[3 * i + c] as f64);
        let k = kappa[i].as_f64();
        let cos = p[0] * g[0] + p[1] * g[1] + p[2] * g[2];
        let theta = cos.clamp(-1.0, 1.0).acos();
        value += angular_nll(theta, k) * inv;
        grad_kappa[i] = T::cast(angular_nll_dkappa(theta, k) * inv);
        // dθ/dn restricted to the tangent plane of the unit prediction
        let perp = [0, 1, 2].map(|c| g[c] - cos * p[c]);
        let s = (perp[0] * perp[0] + perp[1] * perp[1] + perp[2] * perp[2]).sqrt();
        if s > 1e-12 {
            for c in 0..3 {
                grad_normal[c * hw + i] = T::cast(-k * perp[c] / s * inv);
            }
        }
    }
    Ok(AngularLoss {
        value,
        grad_normal,
        grad_kappa,
    })
}
