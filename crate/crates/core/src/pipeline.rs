//! Label projection, full-volume inference and implant rendering.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::Tensor;
use crate::centerline::{fit_centerline, project_crown_to_root, project_root_to_crown, CenterlineFit};
use crate::error::{Error, Result};
use crate::heatmap::{decode_topk, Detection, DetectionsFile, SliceDetections};
use crate::network::Model;
use crate::training::TrainSample;
use crate::volume::{IntensityWindow, KeypointTrack, Region, SliceImage, TrackPoint, Volume};

/// Crown-slice training labels: the root annotation's centerline extended
/// into every crown slice.
pub fn crown_labels(volume: &Volume, root_track: &KeypointTrack) -> Result<KeypointTrack> {
    root_track.check_bounds(volume.width(), volume.height())?;
    let crown = project_root_to_crown(root_track, &volume.partition().crown_zs())?;
    crown.check_bounds(volume.width(), volume.height())?;
    Ok(crown)
}

/// One sample per track point: the windowed slice and its keypoint.
pub fn track_samples(volume: &Volume, track: &KeypointTrack, window: IntensityWindow) -> Result<Vec<TrainSample>> {
    track.check_bounds(volume.width(), volume.height())?;
    track
        .points
        .iter()
        .map(|p| {
            Ok(TrainSample {
                image: volume.slice_windowed(p.z, window)?,
                keypoint: (p.x, p.y),
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InferConfig {
    pub top_k: usize,
    /// Top-1 detections below this confidence are left out of the fit.
    pub min_confidence: f64,
    pub window: IntensityWindow,
    pub batch: usize,
}

impl Default for InferConfig {
    fn default() -> Self {
        Self {
            top_k: 1,
            min_confidence: 0.0,
            window: IntensityWindow::default(),
            batch: 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Inference {
    pub crown: DetectionsFile,
    /// Top-1 crown detections that entered the centerline fit.
    pub crown_track: KeypointTrack,
    pub fit: Option<CenterlineFit>,
    /// Empty when fewer than two crown slices produced a usable detection.
    pub root_track: KeypointTrack,
}

/// Detections for the given slices, in native pixel coordinates.
pub fn detect_slices(model: &Model, volume: &Volume, zs: &[usize], cfg: &InferConfig) -> Result<Vec<SliceDetections>> {
    let size = model.config.image_size;
    let g = model.config.stride();
    let hm = model.config.heatmap_size();
    let (sx, sy) = (volume.width() as f64 / size as f64, volume.height() as f64 / size as f64);
    let chunks: Vec<&[usize]> = zs.chunks(cfg.batch.max(1)).collect();
    let out: Vec<Result<Vec<SliceDetections>>> = chunks
        .par_iter()
        .map(|chunk| {
            let images = chunk
                .iter()
                .map(|&z| Ok(volume.slice_windowed(z, cfg.window)?.resize(size, size).to_tensor::<f32>()))
                .collect::<Result<Vec<_>>>()?;
            let x = Tensor::stack(&images)?;
            let pred = model.predict(&x)?;
            let cells = hm * hm;
            chunk
                .iter()
                .enumerate()
                .map(|(i, &z)| {
                    let heat = &pred.heatmap.data()[i * cells..(i + 1) * cells];
                    let off = &pred.offsets.data()[2 * i * cells..2 * (i + 1) * cells];
                    let detections = decode_topk(heat, off, hm, hm, g, cfg.top_k)?
                        .into_iter()
                        .map(|d| Detection {
                            x: (d.x + 0.5) * sx - 0.5,
                            y: (d.y + 0.5) * sy - 0.5,
                            ..d
                        })
                        .collect();
                    Ok(SliceDetections { z, detections })
                })
                .collect()
        })
        .collect();
    let mut slices = Vec::with_capacity(zs.len());
    for r in out {
        slices.extend(r?);
    }
    Ok(slices)
}

/// Runs the network on every crown slice and back-projects the fitted
/// centerline into the root slices.
pub fn infer_volume(model: &Model, volume: &Volume, patient: &str, cfg: &InferConfig) -> Result<Inference> {
    let part = volume.partition();
    let crown_zs = part.crown_zs();
    if crown_zs.is_empty() {
        return Err(Error::Empty("volume has no crown slices".into()));
    }
    let slices = detect_slices(model, volume, &crown_zs, cfg)?;
    let points: Vec<TrackPoint> = slices
        .iter()
        .filter_map(|s| {
            s.detections
                .first()
                .filter(|d| d.confidence >= cfg.min_confidence)
                .map(|d| TrackPoint { x: d.x, y: d.y, z: s.z })
        })
        .collect();
    let crown_track = KeypointTrack::new(patient, Region::Crown, points)?;
    let (fit, root_track) = if crown_track.points.len() >= 2 {
        (
            Some(fit_centerline(&crown_track)?),
            project_crown_to_root(&crown_track, &part.root_zs())?,
        )
    } else {
        (None, KeypointTrack::new(patient, Region::Root, Vec::new())?)
    };
    Ok(Inference {
        crown: DetectionsFile {
            patient: patient.to_string(),
            fold: None,
            slices,
        },
        crown_track,
        fit,
        root_track,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RenderConfig {
    pub radius: f64,
    /// Number of root slices below the crown boundary to fill.
    pub depth: usize,
    pub value: i16,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            radius: 10.0,
            depth: 10,
            value: 3100,
        }
    }
}

/// Sets every voxel within `radius` of the track centre to `value` on the
/// `depth` root slices just below the crown boundary.
pub fn render_implant_cylinder(volume: &Volume, track: &KeypointTrack, cfg: &RenderConfig) -> Result<Volume> {
    if track.points.is_empty() {
        return Err(Error::Empty("implant track has no points".into()));
    }
    if !(cfg.radius > 0.0) {
        return Err(Error::InvalidConfig(format!("radius {} must be positive", cfg.radius)));
    }
    let boundary = volume.crown_boundary();
    if cfg.depth == 0 || cfg.depth > boundary {
        return Err(Error::InvalidConfig(format!(
            "implant depth {} must lie within the {} root slices",
            cfg.depth, boundary
        )));
    }
    if let Some(p) = track.points.iter().find(|p| p.z >= volume.depth()) {
        return Err(Error::SliceOutOfRange {
            z: p.z,
            depth: volume.depth(),
        });
    }
    let (w, h) = (volume.width(), volume.height());
    let mut voxels = volume.voxels().to_vec();
    let r2 = cfg.radius * cfg.radius;
    for p in track.points.iter().filter(|p| p.z + cfg.depth >= boundary && p.z < boundary) {
        let plane = &mut voxels[p.z * w * h..(p.z + 1) * w * h];
        let (x0, x1) = ((p.x - cfg.radius).floor().max(0.0) as usize, ((p.x + cfg.radius).ceil().max(0.0) as usize).min(w - 1));
        let (y0, y1) = ((p.y - cfg.radius).floor().max(0.0) as usize, ((p.y + cfg.radius).ceil().max(0.0) as usize).min(h - 1));
        for y in y0..=y1 {
            for x in x0..=x1 {
                if (x as f64 - p.x).powi(2) + (y as f64 - p.y).powi(2) <= r2 {
                    plane[y * w + x] = cfg.value;
                }
            }
        }
    }
    volume.with_voxels(voxels)
}

/// Windowed slice resized to `size`, for display or export.
pub fn display_slice(volume: &Volume, z: usize, size: usize) -> Result<SliceImage> {
    Ok(volume.slice_windowed(z, IntensityWindow::default())?.resize(size, size))
}
