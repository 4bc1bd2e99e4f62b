//! Gaussian heatmap targets, top-k decoding and the keypoint losses.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autograd::Real;
use crate::error::{Error, Result};

/// Radius (in heatmap cells) such that jittering a `box_w × box_h` box's
/// corners by up to that amount keeps IoU with the original at least
/// `min_overlap`. Takes the tightest of the three corner-displacement cases
/// and clamps the result to at least one cell.
pub fn gaussian_radius(box_w: f64, box_h: f64, min_overlap: f64) -> Result<f64> {
    if !(min_overlap > 0.0 && min_overlap < 1.0) {
        return Err(Error::InvalidConfig(format!("min_overlap {} outside (0, 1)", min_overlap)));
    }
    if !(box_w > 0.0 && box_h > 0.0) {
        return Err(Error::InvalidConfig(format!("box {}x{} must be positive", box_w, box_h)));
    }
    let (w, h, o) = (box_w, box_h, min_overlap);
    // One corner inside, one outside: (w-r)(h-r) / (2wh - (w-r)(h-r)) = o.
    let b1 = w + h;
    let c1 = w * h * (1.0 - o) / (1.0 + o);
    let r1 = (b1 - (b1 * b1 - 4.0 * c1).sqrt()) / 2.0;
    // Both corners inside: (w-2r)(h-2r) / wh = o.
    let b2 = 2.0 * (w + h);
    let c2 = (1.0 - o) * w * h;
    let r2 = (b2 - (b2 * b2 - 16.0 * c2).sqrt()) / 8.0;
    // Both corners outside: wh / ((w+2r)(h+2r)) = o.
    let a3 = 4.0 * o;
    let b3 = 2.0 * o * (w + h);
    let c3 = (o - 1.0) * w * h;
    let r3 = (-b3 + (b3 * b3 - 4.0 * a3 * c3).sqrt()) / (2.0 * a3);
    Ok(r1.min(r2).min(r3).max(1.0))
}

/// Training targets for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetMaps {
    pub width: usize,
    pub height: usize,
    pub stride: usize,
    /// `[height, width]`, values in `[0, 1]`.
    pub heatmap: Vec<f64>,
    /// `[2, height, width]`: x plane then y plane.
    pub offsets: Vec<f64>,
    pub mask: Vec<bool>,
}

impl TargetMaps {
    pub fn cells(&self) -> usize {
        self.width * self.height
    }

    pub fn keypoint_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// Encodes keypoints `(x, y)` of a `width × height` image into a stride-`g`
/// Gaussian heatmap with sub-cell offset targets. `sigma = radius / 3`.
pub fn encode_target(keypoints: &[(f64, f64)], width: usize, height: usize, stride: usize, radius: f64) -> Result<TargetMaps> {
    if stride == 0 || width % stride != 0 || height % stride != 0 {
        return Err(Error::InvalidConfig(format!(
            "stride {} must divide image {}x{}",
            stride, width, height
        )));
    }
    if !(radius > 0.0 && radius.is_finite()) {
        return Err(Error::InvalidConfig(format!("gaussian radius {} must be positive", radius)));
    }
    let (hw, hh) = (width / stride, height / stride);
    let mut maps = TargetMaps {
        width: hw,
        height: hh,
        stride,
        heatmap: vec![0.0; hw * hh],
        offsets: vec![0.0; 2 * hw * hh],
        mask: vec![false; hw * hh],
    };
    let sigma = radius / 3.0;
    let reach = radius.ceil() as isize;
    let g = stride as f64;
    for &(x, y) in keypoints {
        if !(x >= 0.0 && x < width as f64 && y >= 0.0 && y < height as f64) {
            return Err(Error::KeypointOutOfBounds { x, y, width, height });
        }
        let (fx, fy) = (x / g, y / g);
        let (cx, cy) = (fx.floor() as isize, fy.floor() as isize);
        for dy in -reach..=reach {
            for dx in -reach..=reach {
                let (px, py) = (cx + dx, cy + dy);
                if px < 0 || py < 0 || px >= hw as isize || py >= hh as isize {
                    continue;
                }
                let v = (-((dx * dx + dy * dy) as f64) / (2.0 * sigma * sigma)).exp();
                let cell = &mut maps.heatmap[py as usize * hw + px as usize];
                *cell = cell.max(v);
            }
        }
        let idx = cy as usize * hw + cx as usize;
        maps.heatmap[idx] = 1.0;
        maps.offsets[idx] = fx - cx as f64;
        maps.offsets[hw * hh + idx] = fy - cy as f64;
        maps.mask[idx] = true;
    }
    Ok(maps)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub x: f64,
    pub y: f64,
    pub confidence: f64,
}

/// Top-`k` peaks of a `[height, width]` heatmap after 3×3 local-maximum
/// suppression, mapped to image pixels via `(cell + offset) · stride`.
/// Equal scores are ordered by row-major cell index.
pub fn decode_topk<T: Real>(heatmap: &[T], offsets: &[T], width: usize, height: usize, stride: usize, k: usize) -> Result<Vec<Detection>> {
    if heatmap.is_empty() || width * height == 0 {
        return Err(Error::Empty("heatmap has no cells".into()));
    }
    if heatmap.len() != width * height || offsets.len() != 2 * width * height {
        return Err(Error::Shape(format!(
            "heatmap {} / offsets {} do not match {}x{}",
            heatmap.len(),
            offsets.len(),
            width,
            height
        )));
    }
    if k == 0 {
        return Err(Error::InvalidConfig("k must be at least 1".into()));
    }
    let mut peaks: Vec<(f64, usize)> = Vec::new();
    for y in 0..height {
        for x in 0..width {
            let v = heatmap[y * width + x];
            let mut is_max = true;
            'nb: for ny in y.saturating_sub(1)..=(y + 1).min(height - 1) {
                for nx in x.saturating_sub(1)..=(x + 1).min(width - 1) {
                    if heatmap[ny * width + nx] > v {
                        is_max = false;
                        break 'nb;
                    }
                }
            }
            if is_max {
                peaks.push((v.to_f64(), y * width + x));
            }
        }
    }
    peaks.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let g = stride as f64;
    let x_max = (width * stride) as f64 * (1.0 - f64::EPSILON);
    let y_max = (height * stride) as f64 * (1.0 - f64::EPSILON);
    Ok(peaks
        .into_iter()
        .take(k)
        .map(|(v, idx)| {
            let (cx, cy) = ((idx % width) as f64, (idx / width) as f64);
            let ox = offsets[idx].to_f64();
            let oy = offsets[width * height + idx].to_f64();
            Detection {
                x: ((cx + ox) * g).clamp(0.0, x_max),
                y: ((cy + oy) * g).clamp(0.0, y_max),
                confidence: v.clamp(0.0, 1.0),
            }
        })
        .collect())
}

/// Loss hyper-parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub alpha: i32,
    pub beta: i32,
    pub lambda_off: f64,
    /// Predictions are clamped to `[eps, 1 - eps]` before taking logs.
    pub eps: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 2,
            beta: 4,
            lambda_off: 0.55,
            eps: 1e-7,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub l_k: f64,
    pub l_off: f64,
    pub l_total: f64,
    pub lambda_off: f64,
}

/// Penalty-reduced pixel-wise focal loss and its gradient with respect to
/// the predicted heatmap.
pub fn focal_loss<T: Real>(pred: &[T], target: &[T], n_keypoints: usize, cfg: &LossConfig) -> Result<(T, Vec<T>)> {
    if n_keypoints == 0 {
        return Err(Error::Empty("focal loss needs at least one keypoint".into()));
    }
    if pred.len() != target.len() {
        return Err(Error::Shape(format!("focal loss: {} vs {}", pred.len(), target.len())));
    }
    let eps = T::from_f64(cfg.eps);
    let hi = T::ONE - eps;
    let (alpha, beta) = (cfg.alpha, cfg.beta);
    let a = T::from_f64(alpha as f64);
    let scale = -T::ONE / T::from_f64(n_keypoints as f64);
    let mut total = T::ZERO;
    let mut grad = Vec::with_capacity(pred.len());
    for (&raw, &f) in pred.iter().zip(target) {
        let p = raw.max(eps).min(hi);
        let active = raw >= eps && raw <= hi;
        let (l, dl) = if f == T::ONE {
            let q = T::ONE - p;
            let l = q.powi(alpha) * p.ln();
            let dl = -a * q.powi(alpha - 1) * p.ln() + q.powi(alpha) / p;
            (l, dl)
        } else {
            let w = (T::ONE - f).powi(beta);
            let l = w * p.powi(alpha) * (T::ONE - p).ln();
            let dl = w * (a * p.powi(alpha - 1) * (T::ONE - p).ln() - p.powi(alpha) / (T::ONE - p));
            (l, dl)
        };
        total += l;
        grad.push(if active { scale * dl } else { T::ZERO });
    }
    Ok((scale * total, grad))
}

/// Mean absolute offset error over masked cells (both components), with
/// its subgradient (zero where prediction equals target).
///
/// `pred`/`target` hold `[N, 2, cells]`, `mask` holds `[N, cells]`.
pub fn offset_loss<T: Real>(pred: &[T], target: &[T], mask: &[bool], cells: usize) -> Result<(T, Vec<T>)> {
    if cells == 0 || mask.len() % cells != 0 || pred.len() != 2 * mask.len() || target.len() != pred.len() {
        return Err(Error::Shape(format!(
            "offset loss: pred {}, target {}, mask {}, cells {}",
            pred.len(),
            target.len(),
            mask.len(),
            cells
        )));
    }
    let masked = mask.iter().filter(|&&m| m).count();
    if masked == 0 {
        return Err(Error::Empty("offset loss mask is empty".into()));
    }
    let denom = T::from_f64(2.0 * masked as f64);
    let mut total = T::ZERO;
    let mut grad = vec![T::ZERO; pred.len()];
    for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
        let (s, c) = (i / cells, i % cells);
        for ch in 0..2 {
            let j = (2 * s + ch) * cells + c;
            let d = pred[j] - target[j];
            total += d.abs();
            grad[j] = if d > T::ZERO {
                T::ONE / denom
            } else if d < T::ZERO {
                -T::ONE / denom
            } else {
                T::ZERO
            };
        }
    }
    Ok((total / denom, grad))
}

pub fn total_loss(l_k: f64, l_off: f64, lambda_off: f64) -> f64 {
    l_k + lambda_off * l_off
}

/// Per-slice detections of one patient.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionsFile {
    pub patient: String,
    /// Cross-validation fold this patient was held out in, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fold: Option<usize>,
    pub slices: Vec<SliceDetections>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SliceDetections {
    pub z: usize,
    pub detections: Vec<Detection>,
}

impl DetectionsFile {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }
}
