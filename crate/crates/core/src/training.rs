//! Augmentation, Adam, the step learning-rate schedule and the epoch loop.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::{Real, Tensor};
use crate::error::{Error, Result};
use crate::heatmap::{encode_target, focal_loss, gaussian_radius, offset_loss, LossConfig, LossTerms};
use crate::network::{forward, Model, ModelParams, NetConfig};
use crate::volume::SliceImage;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub scale: bool,
    pub crop: bool,
    pub flip: bool,
    pub scale_range: (f64, f64),
    pub flip_prob: f64,
    pub crop_retries: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            scale: true,
            crop: true,
            flip: true,
            scale_range: (0.8, 1.2),
            flip_prob: 0.5,
            crop_retries: 20,
        }
    }
}

impl AugmentConfig {
    pub fn none() -> Self {
        Self {
            scale: false,
            crop: false,
            flip: false,
            ..Self::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub base_lr: f64,
    pub epochs: usize,
    pub lr_drops: Vec<usize>,
    pub drop_factor: f64,
    pub crop_size: usize,
    pub augment: AugmentConfig,
    /// Side of the keypoint box (pixels) the Gaussian radius is derived from.
    pub box_size: f64,
    pub min_overlap: f64,
    /// Overrides the derived Gaussian radius (heatmap cells).
    pub radius: Option<f64>,
    pub loss: LossConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 6,
            base_lr: 5e-4,
            epochs: 140,
            lr_drops: vec![60, 100],
            drop_factor: 10.0,
            crop_size: 512,
            augment: AugmentConfig::default(),
            box_size: 21.0,
            min_overlap: 0.7,
            radius: None,
            loss: LossConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.batch_size == 0 || self.epochs == 0 || self.crop_size == 0 {
            return bad("batch size, epochs and crop size must be positive".into());
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) || !(self.drop_factor >= 1.0) {
            return bad(format!("bad learning rate {} / drop factor {}", self.base_lr, self.drop_factor));
        }
        if self.lr_drops.windows(2).any(|w| w[0] >= w[1]) || self.lr_drops.iter().any(|&e| e >= self.epochs) {
            return bad(format!(
                "lr drops {:?} must be strictly increasing and below {} epochs",
                self.lr_drops, self.epochs
            ));
        }
        let (lo, hi) = self.augment.scale_range;
        if !(lo > 0.0 && lo <= hi) || !(0.0..=1.0).contains(&self.augment.flip_prob) {
            return bad("bad augmentation ranges".into());
        }
        if let Some(r) = self.radius {
            if !(r > 0.0) {
                return bad(format!("radius {} must be positive", r));
            }
        }
        Ok(())
    }

    /// Gaussian radius in heatmap cells for stride `g`.
    pub fn radius_for(&self, g: usize) -> Result<f64> {
        match self.radius {
            Some(r) => Ok(r),
            None => gaussian_radius(self.box_size / g as f64, self.box_size / g as f64, self.min_overlap),
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// `base_lr / drop_factor^(number of drop epochs ≤ epoch)`.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    let drops = cfg.lr_drops.iter().filter(|&&e| e <= epoch).count();
    cfg.base_lr / cfg.drop_factor.powi(drops as i32)
}

/// Random scale, keypoint-preserving crop to `crop_size`, then horizontal
/// flip, applied to a slice and its keypoint.
pub fn augment<R: Rng>(
    image: &SliceImage,
    keypoint: (f64, f64),
    crop_size: usize,
    cfg: &AugmentConfig,
    rng: &mut R,
) -> Result<(SliceImage, (f64, f64))> {
    let (w, h) = (image.width(), image.height());
    let inside = |(x, y): (f64, f64), w: usize, h: usize| x >= 0.0 && y >= 0.0 && x < w as f64 && y < h as f64;
    let out_of_bounds = |(x, y): (f64, f64), w: usize, h: usize| Error::KeypointOutOfBounds { x, y, width: w, height: h };
    if !inside(keypoint, w, h) {
        return Err(out_of_bounds(keypoint, w, h));
    }
    let (mut img, mut kp) = (image.clone(), keypoint);
    if cfg.scale {
        let s = rng.gen_range(cfg.scale_range.0..=cfg.scale_range.1);
        let (nw, nh) = (((w as f64 * s).round() as usize).max(1), ((h as f64 * s).round() as usize).max(1));
        img = img.resize(nw, nh);
        kp = clamp_inside(
            (
                (kp.0 + 0.5) * nw as f64 / w as f64 - 0.5,
                (kp.1 + 0.5) * nh as f64 / h as f64 - 0.5,
            ),
            nw,
            nh,
        );
    }
    if cfg.crop {
        let c = crop_size;
        let ox = crop_origin(img.width(), c, rng);
        let oy = crop_origin(img.height(), c, rng);
        let (ox, oy) = pick_crop(&img, c, kp, ox, oy, cfg.crop_retries, rng);
        img = crop_padded(&img, ox, oy, c);
        kp = (kp.0 - ox as f64, kp.1 - oy as f64);
    } else if img.width() != crop_size || img.height() != crop_size {
        let (iw, ih) = (img.width(), img.height());
        img = img.resize(crop_size, crop_size);
        kp = clamp_inside(
            (
                (kp.0 + 0.5) * crop_size as f64 / iw as f64 - 0.5,
                (kp.1 + 0.5) * crop_size as f64 / ih as f64 - 0.5,
            ),
            crop_size,
            crop_size,
        );
    }
    if cfg.flip && rng.gen_bool(cfg.flip_prob) {
        img = flip_horizontal(&img);
        kp = clamp_inside((img.width() as f64 - 1.0 - kp.0, kp.1), img.width(), img.height());
    }
    if !inside(kp, img.width(), img.height()) {
        return Err(out_of_bounds(kp, img.width(), img.height()));
    }
    Ok((img, kp))
}

/// Pulls a point that a pixel-centre mapping pushed up to half a pixel
/// past the border back onto the image.
fn clamp_inside((x, y): (f64, f64), w: usize, h: usize) -> (f64, f64) {
    let top = |n: usize| n as f64 * (1.0 - f64::EPSILON);
    (x.clamp(0.0, top(w)), y.clamp(0.0, top(h)))
}

/// Candidate crop origin along one axis. Negative origins pad.
fn crop_origin<R: Rng>(len: usize, crop: usize, rng: &mut R) -> isize {
    if len >= crop {
        rng.gen_range(0..=(len - crop)) as isize
    } else {
        -(rng.gen_range(0..=(crop - len)) as isize)
    }
}

fn pick_crop<R: Rng>(img: &SliceImage, c: usize, kp: (f64, f64), ox: isize, oy: isize, retries: usize, rng: &mut R) -> (isize, isize) {
    let contains = |ox: isize, oy: isize| {
        let (x, y) = (kp.0 - ox as f64, kp.1 - oy as f64);
        x >= 0.0 && y >= 0.0 && x < c as f64 && y < c as f64
    };
    let (mut ox, mut oy) = (ox, oy);
    for _ in 0..retries {
        if contains(ox, oy) {
            return (ox, oy);
        }
        ox = crop_origin(img.width(), c, rng);
        oy = crop_origin(img.height(), c, rng);
    }
    if contains(ox, oy) {
        return (ox, oy);
    }
    let centre = |len: usize, k: f64| -> isize {
        let o = (k - c as f64 / 2.0).round() as isize;
        if len >= c {
            o.clamp(0, (len - c) as isize)
        } else {
            o.clamp(-((c - len) as isize), 0)
        }
    };
    (centre(img.width(), kp.0), centre(img.height(), kp.1))
}

/// `c × c` window at `(ox, oy)`; pixels outside the source are zero.
fn crop_padded(img: &SliceImage, ox: isize, oy: isize, c: usize) -> SliceImage {
    let (w, h) = (img.width() as isize, img.height() as isize);
    let src = img.gray();
    let mut out = vec![0.0f32; c * c];
    for y in 0..c as isize {
        let sy = y + oy;
        if sy < 0 || sy >= h {
            continue;
        }
        for x in 0..c as isize {
            let sx = x + ox;
            if sx >= 0 && sx < w {
                out[(y * c as isize + x) as usize] = src[(sy * w + sx) as usize];
            }
        }
    }
    SliceImage::from_gray(c, c, out)
}

pub fn flip_horizontal(img: &SliceImage) -> SliceImage {
    let w = img.width();
    let gray = img
        .gray()
        .chunks(w)
        .flat_map(|row| row.iter().rev().copied())
        .collect();
    SliceImage::from_gray(w, img.height(), gray)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T: Real> {
    pub m: ModelParams<T>,
    pub v: ModelParams<T>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &ModelParams<T>) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update.
pub fn adam_step<T: Real>(params: &mut ModelParams<T>, grads: &ModelParams<T>, state: &mut AdamState<T>, lr: f64) -> Result<()> {
    params.check_layout(grads)?;
    params.check_layout(&state.m)?;
    if let Some((name, _)) = grads.iter().find(|(_, g)| !g.all_finite()) {
        return Err(Error::NonFinite(format!("gradient of {}", name)));
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (T::from_f64(state.beta1), T::from_f64(state.beta2));
    let c1 = T::from_f64(1.0 - state.beta1.powi(t));
    let c2 = T::from_f64(1.0 - state.beta2.powi(t));
    let (lr, eps) = (T::from_f64(lr), T::from_f64(state.eps));
    let moments = state.m.iter_mut().zip(state.v.iter_mut());
    for (((_, p), (_, g)), ((_, m), (_, v))) in params.iter_mut().zip(grads.iter()).zip(moments) {
        let (p, m, v) = (p.data_mut(), m.data_mut(), v.data_mut());
        for i in 0..p.len() {
            let gi = g.data()[i];
            m[i] = b1 * m[i] + (T::ONE - b1) * gi;
            v[i] = b2 * v[i] + (T::ONE - b2) * gi * gi;
            let mh = m[i] / c1;
            let vh = v[i] / c2;
            p[i] -= lr * mh / (vh.sqrt() + eps);
        }
    }
    Ok(())
}

/// One training example.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainSample {
    pub image: SliceImage,
    pub keypoint: (f64, f64),
}

/// Losses and summed parameter gradients of one batch of already
/// augmented samples.
pub fn batch_gradients<T: Real>(
    net: &NetConfig,
    params: &ModelParams<T>,
    batch: &[TrainSample],
    radius: f64,
    loss: &LossConfig,
) -> Result<(LossTerms, ModelParams<T>)> {
    if batch.is_empty() {
        return Err(Error::Empty("empty batch".into()));
    }
    let g = net.stride();
    let targets = batch
        .iter()
        .map(|s| encode_target(&[s.keypoint], s.image.width(), s.image.height(), g, radius))
        .collect::<Result<Vec<_>>>()?;
    let n_kp: usize = targets.iter().map(|t| t.keypoint_count()).sum();
    let m_total = n_kp as f64;
    let lambda = loss.lambda_off;
    let per_sample: Vec<Result<(f64, f64, ModelParams<T>)>> = batch
        .par_iter()
        .zip(targets.par_iter())
        .map(|(s, t)| {
            let x = s.image.to_tensor::<T>().reshape(&[1, 3, s.image.height(), s.image.width()])?;
            let pass = forward(net, params, &x)?;
            let heat_t: Vec<T> = t.heatmap.iter().map(|&v| T::from_f64(v)).collect();
            let off_t: Vec<T> = t.offsets.iter().map(|&v| T::from_f64(v)).collect();
            let (lk, dk) = focal_loss(pass.output.heatmap.data(), &heat_t, n_kp, loss)?;
            let (lo, mut doff) = offset_loss(pass.output.offsets.data(), &off_t, &t.mask, t.cells())?;
            let share = t.keypoint_count() as f64 / m_total;
            let scale = T::from_f64(share * lambda);
            doff.iter_mut().for_each(|d| *d = *d * scale);
            let dh = Tensor::new(pass.output.heatmap.shape().to_vec(), dk)?;
            let dof = Tensor::new(pass.output.offsets.shape().to_vec(), doff)?;
            let grads = pass.backward(&dh, &dof)?;
            Ok((lk.to_f64(), lo.to_f64() * share, grads))
        })
        .collect();
    let mut total: Option<ModelParams<T>> = None;
    let (mut l_k, mut l_off) = (0.0, 0.0);
    for r in per_sample {
        let (lk, lo, grads) = r?;
        l_k += lk;
        l_off += lo;
        match total.as_mut() {
            Some(acc) => acc.add_assign(&grads)?,
            None => total = Some(grads),
        }
    }
    let terms = LossTerms {
        l_k,
        l_off,
        l_total: crate::heatmap::total_loss(l_k, l_off, lambda),
        lambda_off: lambda,
    };
    Ok((terms, total.expect("non-empty batch")))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub epoch: usize,
    pub step: usize,
    pub l_k: f64,
    pub l_off: f64,
    pub l_total: f64,
    pub lr: f64,
}

pub fn write_loss_csv(records: &[LossRecord], mut out: impl Write) -> std::io::Result<()> {
    writeln!(out, "epoch,step,l_k,l_off,l_total,lr")?;
    for r in records {
        writeln!(out, "{},{},{},{},{},{}", r.epoch, r.step, r.l_k, r.l_off, r.l_total, r.lr)?;
    }
    Ok(())
}

/// Trains a freshly initialised network. `on_step` sees every loss record
/// as it is produced.
pub fn train(
    data: &[TrainSample],
    net: &NetConfig,
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&LossRecord),
) -> Result<(Model, Vec<LossRecord>)> {
    net.validate()?;
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Empty("training set has no samples".into()));
    }
    if cfg.crop_size != net.image_size {
        return Err(Error::InvalidConfig(format!(
            "crop size {} must equal the network input {}",
            cfg.crop_size, net.image_size
        )));
    }
    if cfg.augment.crop {
        if let Some(s) = data.iter().find(|s| s.image.width() < cfg.crop_size || s.image.height() < cfg.crop_size) {
            return Err(Error::InvalidConfig(format!(
                "crop {} exceeds source image {}x{}",
                cfg.crop_size,
                s.image.width(),
                s.image.height()
            )));
        }
    }
    let radius = cfg.radius_for(net.stride())?;
    let mut model = Model::new(net.clone(), cfg.seed)?;
    let mut adam = AdamState::new(&model.params);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut records = Vec::new();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let lr = lr_at(epoch, cfg);
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch = chunk
                .iter()
                .map(|&i| {
                    let s = &data[i];
                    let (image, keypoint) = augment(&s.image, s.keypoint, cfg.crop_size, &cfg.augment, &mut rng)?;
                    Ok(TrainSample { image, keypoint })
                })
                .collect::<Result<Vec<_>>>()?;
            let (terms, grads) = batch_gradients(net, &model.params, &batch, radius, &cfg.loss)?;
            if !terms.l_total.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    step,
                    loss: terms.l_total,
                });
            }
            adam_step(&mut model.params, &grads, &mut adam, lr).map_err(|_| Error::Diverged {
                epoch,
                step,
                loss: terms.l_total,
            })?;
            let rec = LossRecord {
                epoch,
                step,
                l_k: terms.l_k,
                l_off: terms.l_off,
                l_total: terms.l_total,
                lr,
            };
            on_step(&rec);
            records.push(rec);
            step += 1;
        }
    }
    Ok((model, records))
}
