//! Synthetic scenes: template views with known cameras, masks, depth maps,
//! ground-truth surface maps and keypoints.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::{euler_from_matrix, rot_x, rot_y, Camera};
use crate::error::{CsmError, Result};
use std::path::Path;

use crate::io;
use crate::raster::{depth_at_point, rasterize, render_depth, DepthMap};
use crate::surface_map::{Mask, SurfaceMap, Vec3};
use crate::template::{load_template, save_template, TemplateShape, TemplateSpec};

/// Slack when comparing a keypoint's depth with the rendered surface.
pub const VISIBILITY_EPS: f64 = 1e-4;

pub const NUM_KEYPOINTS: usize = 14;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CameraLaw {
    /// Evenly spaced azimuths at a fixed elevation.
    Ring,
    /// Uniform azimuth, elevation uniform in [−30°, 30°].
    Random,
}

impl std::str::FromStr for CameraLaw {
    type Err = CsmError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ring" => Ok(CameraLaw::Ring),
            "random" => Ok(CameraLaw::Random),
            other => Err(CsmError::InvalidArgument(format!(
                "camera law must be 'ring' or 'random', got '{other}'"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub n_views: usize,
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub law: CameraLaw,
    /// Elevation of ring views, degrees.
    pub ring_elevation_deg: f64,
    /// Azimuth of the first ring view, degrees.
    pub ring_phase_deg: f64,
    /// Object radius on screen as a fraction of `min(height, width)`.
    pub fill: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            n_views: 8,
            seed: 0,
            height: 64,
            width: 64,
            law: CameraLaw::Ring,
            ring_elevation_deg: 15.0,
            ring_phase_deg: 0.0,
            fill: 0.3,
        }
    }
}

/// A named template surface point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Keypoint {
    pub face: usize,
    pub bary: [f64; 3],
    pub position: Vec3,
}

/// One keypoint's image location in one view.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeypointObs {
    pub name: String,
    pub x: f64,
    pub y: f64,
    pub visible: bool,
}

#[derive(Debug, Clone)]
pub struct View {
    pub camera: Camera,
    pub mask: Mask,
    pub depth: DepthMap,
    pub gt: SurfaceMap,
    pub keypoints: Vec<KeypointObs>,
}

#[derive(Debug, Clone)]
pub struct SyntheticScene {
    pub config: SceneConfig,
    pub keypoints: Vec<Keypoint>,
    pub views: Vec<View>,
}

pub fn keypoint_name(i: usize) -> String {
    format!("kp{i:02}")
}

/// Camera for each view under the configured law.
pub fn scene_cameras(template: &TemplateShape, config: &SceneConfig) -> Vec<Camera> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let s = config.fill * config.height.min(config.width) as f64 / template.bounding_radius();
    let t = [config.width as f64 / 2.0, config.height as f64 / 2.0];
    (0..config.n_views)
        .map(|k| {
            let (az, el) = match config.law {
                CameraLaw::Ring => (
                    config.ring_phase_deg.to_radians() + 2.0 * std::f64::consts::PI * k as f64 / config.n_views as f64,
                    config.ring_elevation_deg.to_radians(),
                ),
                CameraLaw::Random => (
                    rng.random_range(0.0..2.0 * std::f64::consts::PI),
                    rng.random_range(-30f64.to_radians()..=30f64.to_radians()),
                ),
            };
            Camera {
                s,
                t,
                r: euler_from_matrix(&(rot_x(el) * rot_y(az))),
            }
        })
        .collect()
}

/// Farthest-point sampling over template vertices from a seeded start.
pub fn sample_keypoints(template: &TemplateShape, count: usize, seed: u64) -> Vec<Keypoint> {
    let verts = template.vertices();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6b65_7970_6f69_6e74);
    let mut chosen = vec![rng.random_range(0..verts.len())];
    let mut dist: Vec<f64> = verts.iter().map(|v| (v - verts[chosen[0]]).norm()).collect();
    while chosen.len() < count.min(verts.len()) {
        let mut best = 0;
        for i in 0..verts.len() {
            if dist[i] > dist[best] {
                best = i;
            }
        }
        chosen.push(best);
        for i in 0..verts.len() {
            dist[i] = dist[i].min((verts[i] - verts[best]).norm());
        }
    }
    chosen
        .into_iter()
        .map(|v| {
            let (face, slot) = template
                .faces()
                .iter()
                .enumerate()
                .find_map(|(fi, f)| f.iter().position(|&x| x == v).map(|k| (fi, k)))
                .expect("closed mesh: every vertex has a face");
            let mut bary = [0.0; 3];
            bary[slot] = 1.0;
            Keypoint {
                face,
                bary,
                position: verts[v],
            }
        })
        .collect()
}

/// Projects keypoints into a view and decides visibility against the
/// rendered surface.
pub fn observe_keypoints(template: &TemplateShape, cam: &Camera, keypoints: &[Keypoint], height: usize, width: usize) -> Vec<KeypointObs> {
    keypoints
        .iter()
        .enumerate()
        .map(|(i, kp)| {
            let (pix, z) = cam.project(&kp.position);
            let inside = pix.x >= 0.0 && pix.y >= 0.0 && pix.x < width as f64 && pix.y < height as f64;
            let visible = inside && z <= depth_at_point(template, cam, pix.x, pix.y) + VISIBILITY_EPS;
            KeypointObs {
                name: keypoint_name(i),
                x: pix.x,
                y: pix.y,
                visible,
            }
        })
        .collect()
}

pub fn render_view(template: &TemplateShape, cam: &Camera, keypoints: &[Keypoint], height: usize, width: usize) -> View {
    let r = rasterize(template, cam, height, width);
    let mask = r.coverage();
    let dirs = r
        .face
        .iter()
        .zip(&r.bary)
        .map(|(&f, w)| {
            if f == crate::raster::NO_FACE {
                Vec3::z()
            } else {
                template.interpolate_sphere(f as usize, w)
            }
        })
        .collect();
    let gt = SurfaceMap {
        width,
        height,
        dirs,
        fg_prob: mask.fg.clone(),
    };
    View {
        camera: *cam,
        depth: r.depth_map(),
        keypoints: observe_keypoints(template, cam, keypoints, height, width),
        mask,
        gt,
    }
}

/// Renders `config.n_views` views of the template.
pub fn generate(template: &TemplateShape, config: &SceneConfig) -> Result<SyntheticScene> {
    if config.n_views == 0 || config.height == 0 || config.width == 0 {
        return Err(CsmError::InvalidArgument("scene needs at least one view and a non-empty raster".into()));
    }
    if !(config.fill > 0.0) {
        return Err(CsmError::InvalidArgument("fill must be positive".into()));
    }
    let cameras = scene_cameras(template, config);
    let keypoints = sample_keypoints(template, NUM_KEYPOINTS, config.seed);
    let views = cameras
        .par_iter()
        .map(|cam| render_view(template, cam, &keypoints, config.height, config.width))
        .collect();
    Ok(SyntheticScene {
        config: *config,
        keypoints,
        views,
    })
}

pub fn keypoint_projections(scene: &SyntheticScene, view: usize) -> Result<Vec<KeypointObs>> {
    scene
        .views
        .get(view)
        .map(|v| v.keypoints.clone())
        .ok_or_else(|| CsmError::InvalidArgument(format!("view {view} out of range (scene has {})", scene.views.len())))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestKeypoint {
    pub name: String,
    pub face: usize,
    pub bary: [f64; 3],
}

/// Contents of `manifest.json` in a scene directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneManifest {
    /// Generator settings when the template is a built-in one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub template: Option<TemplateSpec>,
    pub config: SceneConfig,
    pub n_views: usize,
    pub height: usize,
    pub width: usize,
    pub keypoints: Vec<ManifestKeypoint>,
}

pub fn mask_file(k: usize) -> String {
    format!("mask_{k}.pgm")
}

pub fn gt_file(k: usize) -> String {
    format!("gt_{k}.csmuv")
}

pub fn keypoints_file(k: usize) -> String {
    format!("keypoints_{k}.csv")
}

/// Writes the scene directory (created if missing).
pub fn save_scene(scene: &SyntheticScene, template: &TemplateShape, spec: Option<&TemplateSpec>, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| CsmError::io(dir, e))?;
    save_template(template, &dir.join("template.obj"), &dir.join("template.sph"))?;
    let cams: Vec<Camera> = scene.views.iter().map(|v| v.camera).collect();
    io::write_cameras(&cams, &dir.join("cameras.json"))?;
    for (k, v) in scene.views.iter().enumerate() {
        io::write_mask_pgm(&v.mask, &dir.join(mask_file(k)))?;
        io::write_csmuv(&v.gt, &dir.join(gt_file(k)))?;
        io::write_keypoints_csv(&v.keypoints, &dir.join(keypoints_file(k)))?;
    }
    let manifest = SceneManifest {
        template: spec.copied(),
        config: scene.config,
        n_views: scene.views.len(),
        height: scene.config.height,
        width: scene.config.width,
        keypoints: scene
            .keypoints
            .iter()
            .enumerate()
            .map(|(i, kp)| ManifestKeypoint {
                name: keypoint_name(i),
                face: kp.face,
                bary: kp.bary,
            })
            .collect(),
    };
    io::write_json_value(&manifest, &dir.join("manifest.json"))
}

/// Reads a scene directory. Depth maps are re-rendered from the stored
/// template and cameras.
pub fn load_scene(dir: &Path) -> Result<(SyntheticScene, TemplateShape, SceneManifest)> {
    let template = load_template(&dir.join("template.obj"), &dir.join("template.sph"))?;
    let manifest: SceneManifest = io::read_json_value(&dir.join("manifest.json"))?;
    let cams = io::read_cameras(&dir.join("cameras.json"))?;
    if cams.len() != manifest.n_views {
        return Err(CsmError::InvalidArgument(format!(
            "cameras.json has {} cameras but the manifest lists {} views",
            cams.len(),
            manifest.n_views
        )));
    }
    let mut keypoints = Vec::with_capacity(manifest.keypoints.len());
    for kp in &manifest.keypoints {
        if kp.face >= template.num_faces() {
            return Err(CsmError::InvalidArgument(format!("keypoint {} references face {}", kp.name, kp.face)));
        }
        keypoints.push(Keypoint {
            face: kp.face,
            bary: kp.bary,
            position: template.interpolate(kp.face, &kp.bary),
        });
    }
    let views = cams
        .iter()
        .enumerate()
        .map(|(k, cam)| {
            let mask = io::read_mask_pgm(&dir.join(mask_file(k)))?;
            let gt = io::read_csmuv(&dir.join(gt_file(k)))?;
            if (mask.width, mask.height) != (manifest.width, manifest.height)
                || (gt.width, gt.height) != (manifest.width, manifest.height)
            {
                return Err(CsmError::InvalidArgument(format!("view {k} does not match the manifest size")));
            }
            Ok(View {
                camera: *cam,
                depth: render_depth(&template, cam, manifest.height, manifest.width),
                keypoints: io::read_keypoints_csv(&dir.join(keypoints_file(k)))?,
                mask,
                gt,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let scene = SyntheticScene {
        config: manifest.config,
        keypoints,
        views,
    };
    Ok((scene, template, manifest))
}
