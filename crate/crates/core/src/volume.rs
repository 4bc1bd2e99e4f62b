//! CBCT volumes, axial slices and implant keypoint tracks.

use std::fs;
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autograd::{Real, Tensor};
use crate::error::{Error, Result};

pub const IVOL_MAGIC: &[u8; 8] = b"IVOLv001";
pub const IVOL_HEADER_LEN: usize = 8 + 4 * 4 + 3 * 4;

/// Axial stack of square slices stored slice-major (z, then y, then x).
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    width: usize,
    height: usize,
    depth: usize,
    spacing: [f32; 3],
    crown_boundary: usize,
    voxels: Vec<i16>,
}

impl Volume {
    pub fn new(
        width: usize,
        height: usize,
        depth: usize,
        spacing: [f32; 3],
        crown_boundary: usize,
        voxels: Vec<i16>,
    ) -> Result<Self> {
        if width == 0 || height == 0 || depth == 0 {
            return Err(Error::InvalidVolume(format!(
                "empty volume {}x{}x{}",
                width, height, depth
            )));
        }
        if width != height {
            return Err(Error::InvalidVolume(format!(
                "axial slices must be square, got {}x{}",
                width, height
            )));
        }
        if crown_boundary == 0 || crown_boundary >= depth {
            return Err(Error::BoundaryOutOfRange {
                boundary: crown_boundary,
                depth,
            });
        }
        let expected = width * height * depth;
        if voxels.len() != expected {
            return Err(Error::SizeMismatch {
                expected: expected * 2,
                found: voxels.len() * 2,
            });
        }
        Ok(Self {
            width,
            height,
            depth,
            spacing,
            crown_boundary,
            voxels,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn spacing(&self) -> [f32; 3] {
        self.spacing
    }

    pub fn crown_boundary(&self) -> usize {
        self.crown_boundary
    }

    pub fn voxels(&self) -> &[i16] {
        &self.voxels
    }

    pub fn voxel(&self, x: usize, y: usize, z: usize) -> i16 {
        self.voxels[(z * self.height + y) * self.width + x]
    }

    pub fn slice_voxels(&self, z: usize) -> Result<&[i16]> {
        if z >= self.depth {
            return Err(Error::SliceOutOfRange { z, depth: self.depth });
        }
        let plane = self.width * self.height;
        Ok(&self.voxels[z * plane..(z + 1) * plane])
    }

    /// Copy of this volume with different voxel data.
    pub fn with_voxels(&self, voxels: Vec<i16>) -> Result<Self> {
        Self::new(
            self.width,
            self.height,
            self.depth,
            self.spacing,
            self.crown_boundary,
            voxels,
        )
    }

    /// Crown slices `[boundary, depth)` and root slices `[0, boundary)`.
    pub fn partition(&self) -> Partition {
        Partition {
            crown: self.crown_boundary..self.depth,
            root: 0..self.crown_boundary,
        }
    }

    pub fn slice_at(&self, z: usize) -> Result<SliceImage> {
        self.slice_windowed(z, IntensityWindow::default())
    }

    pub fn slice_windowed(&self, z: usize, window: IntensityWindow) -> Result<SliceImage> {
        let raw = self.slice_voxels(z)?;
        let gray = raw.iter().map(|&v| window.apply(v as f32)).collect();
        Ok(SliceImage::from_gray(self.width, self.height, gray))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(IVOL_HEADER_LEN + self.voxels.len() * 2);
        out.extend_from_slice(IVOL_MAGIC);
        for v in [self.width, self.height, self.depth, self.crown_boundary] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for s in self.spacing {
            out.extend_from_slice(&s.to_le_bytes());
        }
        for v in &self.voxels {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < IVOL_HEADER_LEN {
            return Err(Error::MalformedHeader(format!(
                "{} bytes is shorter than the {}-byte header",
                bytes.len(),
                IVOL_HEADER_LEN
            )));
        }
        if &bytes[..8] != IVOL_MAGIC {
            return Err(Error::MalformedHeader("bad magic".into()));
        }
        let u32_at = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes")) as usize;
        let f32_at = |i: usize| f32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
        let (width, height, depth, boundary) = (u32_at(8), u32_at(12), u32_at(16), u32_at(20));
        let spacing = [f32_at(24), f32_at(28), f32_at(32)];
        if width == 0 || height == 0 || depth == 0 {
            return Err(Error::MalformedHeader(format!(
                "zero dimension {}x{}x{}",
                width, height, depth
            )));
        }
        if width != height {
            return Err(Error::MalformedHeader(format!(
                "non-square slices {}x{}",
                width, height
            )));
        }
        let expected = width
            .checked_mul(height)
            .and_then(|v| v.checked_mul(depth))
            .and_then(|v| v.checked_mul(2))
            .ok_or_else(|| Error::MalformedHeader("dimensions overflow".into()))?;
        let payload = &bytes[IVOL_HEADER_LEN..];
        if payload.len() != expected {
            return Err(Error::SizeMismatch {
                expected,
                found: payload.len(),
            });
        }
        if boundary == 0 || boundary >= depth {
            return Err(Error::BoundaryOutOfRange { boundary, depth });
        }
        let voxels = payload
            .chunks_exact(2)
            .map(|c| i16::from_le_bytes([c[0], c[1]]))
            .collect();
        Self::new(width, height, depth, spacing, boundary, voxels)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Partition {
    pub crown: Range<usize>,
    pub root: Range<usize>,
}

impl Partition {
    pub fn crown_zs(&self) -> Vec<usize> {
        self.crown.clone().collect()
    }

    pub fn root_zs(&self) -> Vec<usize> {
        self.root.clone().collect()
    }

    pub fn zs(&self, region: Region) -> Vec<usize> {
        match region {
            Region::Crown => self.crown_zs(),
            Region::Root => self.root_zs(),
        }
    }
}

/// Linear intensity window mapping `[low, high]` onto `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntensityWindow {
    pub low: f32,
    pub high: f32,
}

impl Default for IntensityWindow {
    fn default() -> Self {
        Self {
            low: -1000.0,
            high: 3100.0,
        }
    }
}

impl IntensityWindow {
    pub fn apply(&self, v: f32) -> f32 {
        ((v - self.low) / (self.high - self.low)).clamp(0.0, 1.0)
    }
}

/// Three-channel (replicated grayscale) image with values in `[0, 1]`,
/// stored channel-major.
#[derive(Clone, Debug, PartialEq)]
pub struct SliceImage {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl SliceImage {
    pub const CHANNELS: usize = 3;

    pub fn from_gray(width: usize, height: usize, gray: Vec<f32>) -> Self {
        assert_eq!(gray.len(), width * height, "gray plane size");
        let mut data = Vec::with_capacity(3 * gray.len());
        for _ in 0..Self::CHANNELS {
            data.extend_from_slice(&gray);
        }
        Self { width, height, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let plane = self.width * self.height;
        &self.data[c * plane..(c + 1) * plane]
    }

    pub fn gray(&self) -> &[f32] {
        self.channel(0)
    }

    pub fn pixel(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    /// `[3, H, W]` tensor.
    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        Tensor::new(
            vec![3, self.height, self.width],
            self.data.iter().map(|&v| T::from_f64(v as f64)).collect(),
        )
        .expect("consistent slice shape")
    }

    /// Bilinear resize with half-pixel centers.
    pub fn resize(&self, width: usize, height: usize) -> Self {
        if width == self.width && height == self.height {
            return self.clone();
        }
        let gray = resize_bilinear(self.gray(), self.width, self.height, width, height);
        Self::from_gray(width, height, gray)
    }
}

/// Bilinear resize of a single plane (half-pixel centers, edge clamp).
pub fn resize_bilinear(src: &[f32], sw: usize, sh: usize, dw: usize, dh: usize) -> Vec<f32> {
    let sx = sw as f32 / dw as f32;
    let sy = sh as f32 / dh as f32;
    let mut out = Vec::with_capacity(dw * dh);
    for y in 0..dh {
        let fy = ((y as f32 + 0.5) * sy - 0.5).clamp(0.0, (sh - 1) as f32);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(sh - 1);
        let ly = fy - y0 as f32;
        for x in 0..dw {
            let fx = ((x as f32 + 0.5) * sx - 0.5).clamp(0.0, (sw - 1) as f32);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(sw - 1);
            let lx = fx - x0 as f32;
            let top = src[y0 * sw + x0] * (1.0 - lx) + src[y0 * sw + x1] * lx;
            let bot = src[y1 * sw + x0] * (1.0 - lx) + src[y1 * sw + x1] * lx;
            out.push(top * (1.0 - ly) + bot * ly);
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Region {
    Crown,
    Root,
}

impl std::fmt::Display for Region {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Region::Crown => "crown",
            Region::Root => "root",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrackPoint {
    pub x: f64,
    pub y: f64,
    pub z: usize,
}

/// Per-slice implant positions for one patient and region.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KeypointTrack {
    pub patient: String,
    pub region: Region,
    pub points: Vec<TrackPoint>,
}

impl KeypointTrack {
    pub fn new(patient: impl Into<String>, region: Region, points: Vec<TrackPoint>) -> Result<Self> {
        let track = Self {
            patient: patient.into(),
            region,
            points,
        };
        track.validate()?;
        Ok(track)
    }

    /// Checks that z is strictly increasing and all coordinates are finite.
    pub fn validate(&self) -> Result<()> {
        for w in self.points.windows(2) {
            if w[1].z <= w[0].z {
                return Err(Error::InvalidConfig(format!(
                    "track {} z values not strictly increasing ({} then {})",
                    self.patient, w[0].z, w[1].z
                )));
            }
        }
        if let Some(p) = self.points.iter().find(|p| !p.x.is_finite() || !p.y.is_finite()) {
            return Err(Error::NonFinite(format!("track point at z = {}", p.z)));
        }
        Ok(())
    }

    /// Checks that every point lies inside a `width × height` slice.
    pub fn check_bounds(&self, width: usize, height: usize) -> Result<()> {
        for p in &self.points {
            if !(p.x >= 0.0 && p.x < width as f64 && p.y >= 0.0 && p.y < height as f64) {
                return Err(Error::KeypointOutOfBounds {
                    x: p.x,
                    y: p.y,
                    width,
                    height,
                });
            }
        }
        Ok(())
    }

    pub fn point_at(&self, z: usize) -> Option<&TrackPoint> {
        self.points
            .binary_search_by_key(&z, |p| p.z)
            .ok()
            .map(|i| &self.points[i])
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let track: Self = serde_json::from_str(&text)?;
        track.validate()?;
        Ok(track)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}
