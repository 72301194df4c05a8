//! Keypoint transfer between two images through their surface maps.
//!
//! A source pixel is lifted to the template with φ and matched to the target
//! foreground pixel whose template point is nearest in 3D. Large residual
//! distances mark points with no counterpart in the target (for example,
//! occluded ones).

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{CsmError, Result};
use crate::surface_map::{pixel_center, Mask, SurfaceMap, Vec3};
use crate::template::TemplateShape;

/// Default correspondence threshold as a fraction of the template's
/// bounding radius.
pub const DEFAULT_TAU_FRACTION: f64 = 0.1;

pub fn default_tau(template: &TemplateShape) -> f64 {
    DEFAULT_TAU_FRACTION * template.bounding_radius()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransferResult {
    /// Pixel-center coordinates in the target image.
    pub target_pixel: [f64; 2],
    /// Template-space distance between the matched points.
    pub distance_3d: f64,
    /// `1 / (1 + distance_3d)`.
    pub confidence: f64,
    pub corresponds: bool,
}

/// Template points of every target foreground pixel, in raster order.
#[derive(Debug, Clone)]
pub struct TargetIndex {
    width: usize,
    pixels: Vec<usize>,
    points: Vec<Vec3>,
}

impl TargetIndex {
    pub fn new(c_t: &SurfaceMap, fg_t: &Mask, template: &TemplateShape) -> Result<Self> {
        check_sizes(c_t, fg_t)?;
        let pixels = fg_t.fg_indices();
        if pixels.is_empty() {
            return Err(CsmError::NoCandidates);
        }
        let points = pixels.iter().map(|&i| template.phi(&c_t.dirs[i]).position).collect();
        Ok(TargetIndex {
            width: c_t.width,
            pixels,
            points,
        })
    }

    /// Nearest target point to `q`; ties go to the first pixel in raster order.
    pub fn nearest(&self, q: &Vec3, tau: f64) -> TransferResult {
        let mut best = (f64::INFINITY, 0usize);
        for (k, p) in self.points.iter().enumerate() {
            let d = (p - q).norm_squared();
            if d < best.0 {
                best = (d, k);
            }
        }
        let distance = best.0.sqrt();
        let (x, y) = pixel_center(self.pixels[best.1], self.width);
        TransferResult {
            target_pixel: [x, y],
            distance_3d: distance,
            confidence: 1.0 / (1.0 + distance),
            corresponds: distance <= tau,
        }
    }
}

fn check_sizes(c: &SurfaceMap, m: &Mask) -> Result<()> {
    if c.width != m.width || c.height != m.height {
        return Err(CsmError::InvalidArgument(format!(
            "surface map is {}x{} but mask is {}x{}",
            c.width, c.height, m.width, m.height
        )));
    }
    Ok(())
}

/// Transfers source pixel `p_s` (row-major index) into the target image.
pub fn transfer(
    c_s: &SurfaceMap,
    fg_s: &Mask,
    c_t: &SurfaceMap,
    fg_t: &Mask,
    p_s: usize,
    template: &TemplateShape,
    tau: f64,
) -> Result<TransferResult> {
    check_sizes(c_s, fg_s)?;
    if p_s >= c_s.len() || !fg_s.is_fg(p_s) {
        return Err(CsmError::InvalidArgument(format!("source pixel {p_s} is not on the source foreground")));
    }
    let index = TargetIndex::new(c_t, fg_t, template)?;
    Ok(index.nearest(&template.phi(&c_s.dirs[p_s]).position, tau))
}

/// Source pixel for a sub-pixel location: the containing pixel when it is
/// foreground, otherwise the nearest foreground pixel center (raster-order
/// ties). `None` when the location is off-image or the mask is empty.
pub fn source_pixel(fg_s: &Mask, x: f64, y: f64) -> Option<usize> {
    if !(x >= 0.0 && y >= 0.0 && x < fg_s.width as f64 && y < fg_s.height as f64) {
        return None;
    }
    let idx = y as usize * fg_s.width + x as usize;
    if fg_s.is_fg(idx) {
        return Some(idx);
    }
    let mut best: Option<(f64, usize)> = None;
    for i in fg_s.fg_indices() {
        let (px, py) = pixel_center(i, fg_s.width);
        let d = (px - x).powi(2) + (py - y).powi(2);
        if best.is_none_or(|(bd, _)| d < bd) {
            best = Some((d, i));
        }
    }
    best.map(|(_, i)| i)
}

/// Transfers a batch of sub-pixel source keypoints; φ over the target
/// foreground is computed once.
pub fn transfer_set(
    c_s: &SurfaceMap,
    fg_s: &Mask,
    c_t: &SurfaceMap,
    fg_t: &Mask,
    keypoints_s: &[[f64; 2]],
    template: &TemplateShape,
    tau: f64,
) -> Result<Vec<TransferResult>> {
    check_sizes(c_s, fg_s)?;
    if keypoints_s.is_empty() {
        return Ok(Vec::new());
    }
    let index = TargetIndex::new(c_t, fg_t, template)?;
    keypoints_s
        .par_iter()
        .map(|&[x, y]| {
            let p = source_pixel(fg_s, x, y).ok_or_else(|| {
                CsmError::InvalidArgument(format!("keypoint ({x}, {y}) has no source foreground pixel"))
            })?;
            Ok(index.nearest(&template.phi(&c_s.dirs[p]).position, tau))
        })
        .collect()
}
