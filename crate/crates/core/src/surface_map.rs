//! Per-pixel image buffers shared across the pipeline.

use nalgebra::Vector3;

use crate::error::{CsmError, Result};

pub type Vec3 = Vector3<f64>;

/// Foreground mask; values in `[0, 1]`, binary for hard masks.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub fg: Vec<f64>,
}

impl Mask {
    pub fn new(width: usize, height: usize, fg: Vec<f64>) -> Result<Self> {
        if fg.len() != width * height {
            return Err(CsmError::InvalidArgument(format!(
                "mask buffer has {} values, expected {}x{}",
                fg.len(),
                width,
                height
            )));
        }
        if fg.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(CsmError::InvalidArgument("mask values must lie in [0, 1]".into()));
        }
        Ok(Mask { width, height, fg })
    }

    pub fn empty(width: usize, height: usize) -> Self {
        Mask {
            width,
            height,
            fg: vec![0.0; width * height],
        }
    }

    pub fn is_fg(&self, idx: usize) -> bool {
        self.fg[idx] > 0.5
    }

    pub fn count(&self) -> usize {
        (0..self.fg.len()).filter(|&i| self.is_fg(i)).count()
    }

    /// Foreground pixel indices in raster order.
    pub fn fg_indices(&self) -> Vec<usize> {
        (0..self.fg.len()).filter(|&i| self.is_fg(i)).collect()
    }

    /// Intersection over union of the two binarized masks (1 when both empty).
    pub fn iou(&self, other: &Mask) -> f64 {
        let mut inter = 0usize;
        let mut union = 0usize;
        for i in 0..self.fg.len() {
            let a = self.is_fg(i);
            let b = other.is_fg(i);
            inter += usize::from(a && b);
            union += usize::from(a || b);
        }
        if union == 0 {
            1.0
        } else {
            inter as f64 / union as f64
        }
    }

    /// Centroid of the binarized mask in pixel coordinates (pixel centers at +0.5).
    pub fn centroid(&self) -> Option<(f64, f64)> {
        let mut sx = 0.0;
        let mut sy = 0.0;
        let mut n = 0usize;
        for i in 0..self.fg.len() {
            if self.is_fg(i) {
                sx += (i % self.width) as f64 + 0.5;
                sy += (i / self.width) as f64 + 0.5;
                n += 1;
            }
        }
        (n > 0).then(|| (sx / n as f64, sy / n as f64))
    }
}

/// Pixel center of a row-major index.
pub fn pixel_center(idx: usize, width: usize) -> (f64, f64) {
    ((idx % width) as f64 + 0.5, (idx / width) as f64 + 0.5)
}

/// Per-pixel unit surface directions plus foreground probability.
#[derive(Debug, Clone, PartialEq)]
pub struct SurfaceMap {
    pub width: usize,
    pub height: usize,
    pub dirs: Vec<Vec3>,
    pub fg_prob: Vec<f64>,
}

impl SurfaceMap {
    pub fn new(width: usize, height: usize, dirs: Vec<Vec3>, fg_prob: Vec<f64>) -> Result<Self> {
        let n = width * height;
        if dirs.len() != n || fg_prob.len() != n {
            return Err(CsmError::InvalidArgument(format!(
                "surface map buffers must hold {n} entries"
            )));
        }
        if dirs.iter().any(|d| (d.norm() - 1.0).abs() > 1e-6) {
            return Err(CsmError::InvalidArgument("surface directions must be unit vectors".into()));
        }
        if fg_prob.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(CsmError::InvalidArgument("fg_prob must lie in [0, 1]".into()));
        }
        Ok(SurfaceMap {
            width,
            height,
            dirs,
            fg_prob,
        })
    }

    pub fn len(&self) -> usize {
        self.dirs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dirs.is_empty()
    }

    /// Encodes directions as RGB bytes via `(n + 1) / 2`.
    pub fn to_rgb(&self) -> Vec<[u8; 3]> {
        self.dirs
            .iter()
            .map(|d| {
                let c = |v: f64| (((v + 1.0) * 0.5).clamp(0.0, 1.0) * 255.0).round() as u8;
                [c(d.x), c(d.y), c(d.z)]
            })
            .collect()
    }
}
