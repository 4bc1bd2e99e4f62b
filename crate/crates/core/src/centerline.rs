//! Least-squares implant centerline and the root↔crown space transforms.
//!
//! The centerline is parametrised per axis against slice index,
//! `x = k1·z + b1` and `y = k2·z + b2`, and fitted by the closed-form
//! normal equations. Projection fits a line on one region's track and
//! substitutes the other region's slice indices.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{KeypointTrack, Region, TrackPoint};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CenterlineFit {
    pub k1: f64,
    pub b1: f64,
    pub k2: f64,
    pub b2: f64,
    /// Residual sums of squares attained by the fit.
    pub q1: f64,
    pub q2: f64,
    pub n: usize,
}

impl CenterlineFit {
    /// A line with the given coefficients and no fitted points.
    pub fn from_coefficients(k1: f64, b1: f64, k2: f64, b2: f64) -> Self {
        Self {
            k1,
            b1,
            k2,
            b2,
            q1: 0.0,
            q2: 0.0,
            n: 0,
        }
    }

    pub fn eval(&self, z: f64) -> (f64, f64) {
        (self.k1 * z + self.b1, self.k2 * z + self.b2)
    }

    /// Residual sums of squares of `points` under this line.
    pub fn residual_q(&self, points: &[TrackPoint]) -> (f64, f64) {
        points.iter().fold((0.0, 0.0), |(q1, q2), p| {
            let (x, y) = self.eval(p.z as f64);
            (q1 + (p.x - x).powi(2), q2 + (p.y - y).powi(2))
        })
    }
}

/// Fits the centerline through `points` by least squares.
pub fn fit_points(points: &[TrackPoint]) -> Result<CenterlineFit> {
    let n = points.len();
    if n < 2 {
        return Err(Error::TooFewPoints(n));
    }
    let nf = n as f64;
    let (mut sz, mut szz, mut sx, mut sxz, mut sy, mut syz) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
    for p in points {
        let z = p.z as f64;
        sz += z;
        szz += z * z;
        sx += p.x;
        sxz += p.x * z;
        sy += p.y;
        syz += p.y * z;
    }
    let denom = nf * szz - sz * sz;
    if denom == 0.0 {
        return Err(Error::DegenerateFit(points[0].z as f64));
    }
    let k1 = (nf * sxz - sx * sz) / denom;
    let b1 = (sx - k1 * sz) / nf;
    let k2 = (nf * syz - sy * sz) / denom;
    let b2 = (sy - k2 * sz) / nf;
    let mut fit = CenterlineFit {
        k1,
        b1,
        k2,
        b2,
        q1: 0.0,
        q2: 0.0,
        n,
    };
    let (q1, q2) = fit.residual_q(points);
    fit.q1 = q1;
    fit.q2 = q2;
    Ok(fit)
}

pub fn fit_centerline(track: &KeypointTrack) -> Result<CenterlineFit> {
    fit_points(&track.points)
}

pub fn eval_line(fit: &CenterlineFit, z: f64) -> (f64, f64) {
    fit.eval(z)
}

pub fn residual_q(fit: &CenterlineFit, track: &KeypointTrack) -> (f64, f64) {
    fit.residual_q(&track.points)
}

/// Extends the root annotation's centerline into the crown slices.
pub fn project_root_to_crown(root_track: &KeypointTrack, crown_zs: &[usize]) -> Result<KeypointTrack> {
    project(root_track, Region::Root, Region::Crown, crown_zs)
}

/// Extends the centerline of crown predictions back into the root slices.
pub fn project_crown_to_root(crown_track: &KeypointTrack, root_zs: &[usize]) -> Result<KeypointTrack> {
    project(crown_track, Region::Crown, Region::Root, root_zs)
}

fn project(track: &KeypointTrack, from: Region, to: Region, zs: &[usize]) -> Result<KeypointTrack> {
    if track.region != from {
        return Err(Error::WrongRegion {
            expected: from.to_string(),
            found: track.region.to_string(),
        });
    }
    if zs.is_empty() {
        return Err(Error::Empty(format!("no {} slices to project onto", to)));
    }
    let fit = fit_centerline(track)?;
    let mut zs = zs.to_vec();
    zs.sort_unstable();
    zs.dedup();
    let points = zs
        .into_iter()
        .map(|z| {
            let (x, y) = fit.eval(z as f64);
            TrackPoint { x, y, z }
        })
        .collect();
    KeypointTrack::new(track.patient.clone(), to, points)
}
