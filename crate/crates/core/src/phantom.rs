//! Synthetic dental CBCT phantoms.
//!
//! Each axial slice shows an arch of elliptical teeth with one tooth
//! missing. The arch is translated slice by slice so that the centre of the
//! missing tooth follows a straight implant centerline. Crown slices are
//! crisp; root slices show smaller, jittered roots embedded in bone and are
//! blurred and noisier.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{KeypointTrack, Region, TrackPoint, Volume};

const AIR_HU: f32 = -1000.0;
const BONE_HU: f32 = 700.0;
const ROOT_HU: f32 = 1300.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomConfig {
    pub image_size: usize,
    pub depth: usize,
    pub crown_boundary: usize,
    pub tooth_count: usize,
    pub gap_index: usize,
    /// Centerline slope `(dx/dz, dy/dz)` in pixels per slice.
    pub tilt: (f64, f64),
    /// Gaussian blur sigma (pixels) applied to root slices.
    pub root_blur: f64,
    /// Noise sigma (HU) on crown slices; root slices get three times this.
    pub noise: f64,
    pub seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            depth: 40,
            crown_boundary: 20,
            tooth_count: 8,
            gap_index: 3,
            tilt: (0.08, -0.05),
            root_blur: 1.2,
            noise: 40.0,
            seed: 0,
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.image_size < 16 {
            return bad(format!("image size {} too small", self.image_size));
        }
        if self.depth < 2 || self.crown_boundary == 0 || self.crown_boundary >= self.depth {
            return bad(format!(
                "crown boundary {} must lie strictly inside depth {}",
                self.crown_boundary, self.depth
            ));
        }
        if self.tooth_count < 3 {
            return bad(format!("need at least 3 teeth, got {}", self.tooth_count));
        }
        if self.gap_index >= self.tooth_count {
            return bad(format!(
                "gap index {} outside tooth count {}",
                self.gap_index, self.tooth_count
            ));
        }
        if !self.tilt.0.is_finite() || !self.tilt.1.is_finite() {
            return bad("tilt must be finite".into());
        }
        if !(self.root_blur >= 0.0 && self.noise >= 0.0) {
            return bad("blur and noise must be non-negative".into());
        }
        let layout = PhantomLayout::new(self);
        for z in [0, self.depth - 1] {
            let (x, y) = layout.gap_center(z as f64);
            let s = self.image_size as f64;
            if !(x >= 0.0 && x < s && y >= 0.0 && y < s) {
                return bad(format!(
                    "tilt {:?} drives the centerline out of the image at z = {}",
                    self.tilt, z
                ));
            }
        }
        Ok(())
    }
}

/// One tooth: centre at the reference slice, semi-axes and orientation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ToothEllipse {
    pub cx: f64,
    pub cy: f64,
    /// Semi-axis along the arch tangent.
    pub a: f64,
    /// Semi-axis across the arch.
    pub b: f64,
    pub angle: f64,
    pub intensity: f32,
}

impl ToothEllipse {
    /// Normalised elliptical radius of `(x, y)`; `< 1` inside.
    pub fn radius_at(&self, x: f64, y: f64) -> f64 {
        let (s, c) = self.angle.sin_cos();
        let (dx, dy) = (x - self.cx, y - self.cy);
        let u = dx * c + dy * s;
        let v = -dx * s + dy * c;
        ((u / self.a).powi(2) + (v / self.b).powi(2)).sqrt()
    }

    fn shifted(&self, dx: f64, dy: f64) -> Self {
        Self {
            cx: self.cx + dx,
            cy: self.cy + dy,
            ..*self
        }
    }
}

/// Deterministic geometry of a phantom (everything except noise).
#[derive(Clone, Debug)]
pub struct PhantomLayout {
    teeth: Vec<ToothEllipse>,
    gap_index: usize,
    tilt: (f64, f64),
    z_ref: f64,
}

impl PhantomLayout {
    pub fn new(config: &PhantomConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_a7c4);
        let s = config.image_size as f64;
        let half_width = s * rng.gen_range(0.31..0.37);
        let arch_depth = s * rng.gen_range(0.40..0.48);
        let cx = s * 0.5 + rng.gen_range(-0.04..0.04) * s;
        let base_y = s * rng.gen_range(0.72..0.78);

        // Sample the parabola densely and place teeth at equal arc length.
        let samples = 2000;
        let curve: Vec<(f64, f64)> = (0..=samples)
            .map(|i| {
                let u = -1.0 + 2.0 * i as f64 / samples as f64;
                (cx + half_width * u, base_y - arch_depth * (1.0 - u * u))
            })
            .collect();
        let mut arc = vec![0.0];
        for w in curve.windows(2) {
            let d = ((w[1].0 - w[0].0).powi(2) + (w[1].1 - w[0].1).powi(2)).sqrt();
            arc.push(arc.last().unwrap() + d);
        }
        let total = *arc.last().unwrap();
        let n = config.tooth_count;
        let spacing = total / n as f64;
        let teeth = (0..n)
            .map(|i| {
                let target = (i as f64 + 0.5) * spacing;
                let j = arc.partition_point(|&l| l < target).clamp(1, samples);
                let t = (target - arc[j - 1]) / (arc[j] - arc[j - 1]);
                let x = curve[j - 1].0 + t * (curve[j].0 - curve[j - 1].0);
                let y = curve[j - 1].1 + t * (curve[j].1 - curve[j - 1].1);
                let angle = (curve[j].1 - curve[j - 1].1).atan2(curve[j].0 - curve[j - 1].0);
                ToothEllipse {
                    cx: x,
                    cy: y,
                    a: spacing * rng.gen_range(0.38..0.44),
                    b: spacing * rng.gen_range(0.50..0.60),
                    angle,
                    intensity: rng.gen_range(2100.0..2600.0),
                }
            })
            .collect();
        Self {
            teeth,
            gap_index: config.gap_index,
            tilt: config.tilt,
            z_ref: (config.depth as f64 - 1.0) / 2.0,
        }
    }

    /// Arch translation at slice `z`.
    pub fn shift(&self, z: f64) -> (f64, f64) {
        ((z - self.z_ref) * self.tilt.0, (z - self.z_ref) * self.tilt.1)
    }

    /// Teeth at slice `z`, gap tooth included.
    pub fn teeth_at(&self, z: f64) -> Vec<ToothEllipse> {
        let (dx, dy) = self.shift(z);
        self.teeth.iter().map(|t| t.shifted(dx, dy)).collect()
    }

    /// Ellipse of the missing tooth at slice `z`.
    pub fn gap_ellipse(&self, z: f64) -> ToothEllipse {
        let (dx, dy) = self.shift(z);
        self.teeth[self.gap_index].shifted(dx, dy)
    }

    pub fn gap_center(&self, z: f64) -> (f64, f64) {
        let e = self.gap_ellipse(z);
        (e.cx, e.cy)
    }

    pub fn gap_index(&self) -> usize {
        self.gap_index
    }
}

/// Generates a phantom volume and its root-region implant track.
pub fn generate_phantom(config: &PhantomConfig) -> Result<(Volume, KeypointTrack)> {
    config.validate()?;
    let layout = PhantomLayout::new(config);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let size = config.image_size;
    let mut voxels = Vec::with_capacity(size * size * config.depth);
    let crown_noise = Normal::new(0.0, config.noise.max(1e-9)).expect("finite sigma");
    let root_noise = Normal::new(0.0, 3.0 * config.noise.max(1e-9)).expect("finite sigma");

    for z in 0..config.depth {
        let zf = z as f64;
        let plane = if z >= config.crown_boundary {
            let progress = (zf - config.crown_boundary as f64) / (config.depth - config.crown_boundary) as f64;
            let taper = 1.0 - 0.2 * progress * progress;
            let mut plane = vec![AIR_HU; size * size];
            for (i, t) in layout.teeth_at(zf).iter().enumerate() {
                if i == layout.gap_index {
                    continue;
                }
                let tooth = ToothEllipse {
                    a: t.a * taper,
                    b: t.b * taper,
                    ..*t
                };
                paint_ellipse(&mut plane, size, &tooth);
            }
            add_noise(&mut plane, &crown_noise, &mut rng);
            plane
        } else {
            let depth_frac = zf / config.crown_boundary as f64;
            let mut plane = vec![AIR_HU; size * size];
            let teeth = layout.teeth_at(zf);
            // Alveolar bone: a band of enlarged ellipses around every tooth site.
            for t in &teeth {
                let bone = ToothEllipse {
                    a: t.a * 1.45,
                    b: t.b * 1.25,
                    intensity: BONE_HU,
                    ..*t
                };
                paint_ellipse(&mut plane, size, &bone);
            }
            for (i, t) in teeth.iter().enumerate() {
                if i == layout.gap_index {
                    continue;
                }
                let shrink = (0.45 + 0.4 * depth_frac) * rng.gen_range(0.8..1.2);
                let root = ToothEllipse {
                    cx: t.cx + rng.gen_range(-1.0..1.0),
                    cy: t.cy + rng.gen_range(-1.0..1.0),
                    a: t.a * shrink,
                    b: t.b * shrink,
                    intensity: ROOT_HU * rng.gen_range(0.85..1.15),
                    ..*t
                };
                paint_ellipse(&mut plane, size, &root);
            }
            if config.root_blur > 0.0 {
                plane = gaussian_blur(&plane, size, config.root_blur);
            }
            add_noise(&mut plane, &root_noise, &mut rng);
            plane
        };
        voxels.extend(plane.iter().map(|&v| v.round().clamp(i16::MIN as f32, i16::MAX as f32) as i16));
    }

    let volume = Volume::new(size, size, config.depth, [0.25, 0.25, 0.25], config.crown_boundary, voxels)?;
    let points = (0..config.crown_boundary)
        .map(|z| {
            let (x, y) = layout.gap_center(z as f64);
            TrackPoint { x, y, z }
        })
        .collect();
    let track = KeypointTrack::new(format!("phantom_{}", config.seed), Region::Root, points)?;
    Ok((volume, track))
}

/// A generated patient: id, volume and root annotation.
#[derive(Clone, Debug)]
pub struct PhantomPatient {
    pub id: String,
    pub config: PhantomConfig,
    pub volume: Volume,
    pub root_track: KeypointTrack,
}

/// Generates `patients` phantoms whose gap position, tilt and arch shape
/// vary per patient. Tilt components are drawn uniformly within
/// `base.tilt ± tilt_jitter`.
pub fn generate_cohort(base: &PhantomConfig, patients: usize, seed: u64, tilt_jitter: f64) -> Result<Vec<PhantomPatient>> {
    base.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(patients);
    for i in 0..patients {
        let mut config = base.clone();
        config.seed = rng.gen();
        config.gap_index = rng.gen_range(1..base.tooth_count - 1);
        config.tilt = (
            base.tilt.0 + rng.gen_range(-1.0..=1.0) * tilt_jitter,
            base.tilt.1 + rng.gen_range(-1.0..=1.0) * tilt_jitter,
        );
        let (volume, mut root_track) = generate_phantom(&config)?;
        let id = format!("patient_{:03}", i);
        root_track.patient = id.clone();
        out.push(PhantomPatient {
            id,
            config,
            volume,
            root_track,
        });
    }
    Ok(out)
}

/// Blends `tooth` over `plane` with a one-pixel soft edge, so sub-pixel
/// positions are visible in the image.
fn paint_ellipse(plane: &mut [f32], size: usize, tooth: &ToothEllipse) {
    let reach = tooth.a.max(tooth.b) + 2.0;
    let x0 = (tooth.cx - reach).floor().max(0.0) as usize;
    let x1 = ((tooth.cx + reach).ceil() as usize).min(size - 1);
    let y0 = (tooth.cy - reach).floor().max(0.0) as usize;
    let y1 = ((tooth.cy + reach).ceil() as usize).min(size - 1);
    let scale = tooth.a.min(tooth.b);
    for y in y0..=y1 {
        for x in x0..=x1 {
            let r = tooth.radius_at(x as f64, y as f64);
            let alpha = ((1.0 - r) * scale + 0.5).clamp(0.0, 1.0) as f32;
            if alpha > 0.0 {
                let p = &mut plane[y * size + x];
                *p = *p * (1.0 - alpha) + tooth.intensity * alpha;
            }
        }
    }
}

fn add_noise(plane: &mut [f32], dist: &Normal<f64>, rng: &mut ChaCha8Rng) {
    for v in plane.iter_mut() {
        *v += dist.sample(rng) as f32;
    }
}

fn gaussian_blur(plane: &[f32], size: usize, sigma: f64) -> Vec<f32> {
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f32> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp() as f32)
        .collect();
    let norm: f32 = kernel.iter().sum();
    let clamp = |i: isize| i.clamp(0, size as isize - 1) as usize;
    let mut tmp = vec![0.0; plane.len()];
    for y in 0..size {
        for x in 0..size {
            tmp[y * size + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, w)| w * plane[y * size + clamp(x as isize + k as isize - radius)])
                .sum::<f32>()
                / norm;
        }
    }
    let mut out = vec![0.0; plane.len()];
    for y in 0..size {
        for x in 0..size {
            out[y * size + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, w)| w * tmp[clamp(y as isize + k as isize - radius) * size + x])
                .sum::<f32>()
                / norm;
        }
    }
    out
}
