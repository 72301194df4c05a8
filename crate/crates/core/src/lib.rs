//! Canonical surface mapping by direct optimization.
//!
//! Pixels of an object image are mapped to points on a category template
//! mesh through a per-pixel unit direction on the sphere and the template's
//! spherical parametrization. The maps and weak-perspective cameras are fit
//! per image by minimizing cycle-consistency, visibility, mask-reprojection
//! and pose-diversity objectives; keypoints are then transferred between
//! images through the shared template.

pub mod camera;
pub mod correspondence;
pub mod losses;
pub mod metrics;
pub mod error;
pub mod fitter;
pub mod gradcheck;
pub mod io;
pub mod raster;
pub mod scenegen;
pub mod surface_map;
pub mod template;

pub use camera::{Camera, HypothesisSet};
pub use error::{CsmError, Result};
pub use surface_map::{Mask, SurfaceMap};
pub use template::{RadialProfile, TemplateShape, UvCoord};
