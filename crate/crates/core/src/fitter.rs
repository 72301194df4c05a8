//! Direct per-image optimization of surface maps and camera hypotheses.
//!
//! Each image owns its variables: a unit direction and a foreground logit per
//! pixel, and `N_c` cameras with logits. Images are independent and are
//! fitted in parallel; within an image everything runs sequentially, so the
//! result does not depend on the thread count.

use nalgebra::Matrix3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, UnitSphere};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::{rotation_matrix, spread_rotations, Camera, CameraFrame, HypothesisSet};
use crate::error::{CsmError, Result};
use crate::losses::{loss_total_with, LossBreakdown, LossConfig, LossScalars, PhiField, RotationParam, FG_CLAMP};
use crate::raster::{rasterize_frame, soft_silhouette_frame, DepthMap};
use crate::surface_map::{pixel_center, Mask, SurfaceMap, Vec3};
use crate::template::TemplateShape;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub iterations: usize,
    pub lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub n_hypotheses: usize,
    pub seed: u64,
    /// Standard deviation of the noise added to the initial directions.
    pub init_noise: f64,
    pub init: DirectionInit,
    pub loss: LossConfig,
}

/// How per-pixel directions are seeded.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DirectionInit {
    /// Camera-facing hemisphere fitted to the mask, plus noise.
    #[default]
    Hemisphere,
    /// Independent uniform directions on the sphere.
    Random,
}

impl std::str::FromStr for DirectionInit {
    type Err = CsmError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hemisphere" => Ok(DirectionInit::Hemisphere),
            "random" => Ok(DirectionInit::Random),
            other => Err(CsmError::InvalidArgument(format!(
                "init must be 'hemisphere' or 'random', got '{other}'"
            ))),
        }
    }
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            iterations: 2000,
            lr: 1e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            n_hypotheses: 8,
            seed: 0,
            init_noise: 0.05,
            init: DirectionInit::Hemisphere,
            loss: LossConfig::default(),
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(CsmError::InvalidArgument(m.into()));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return bad("Adam betas must lie in [0, 1)");
        }
        if self.adam_eps <= 0.0 {
            return bad("Adam eps must be positive");
        }
        if self.n_hypotheses == 0 {
            return bad("n_hypotheses must be at least 1");
        }
        if self.loss.flags.known_pose && self.n_hypotheses != 1 {
            return bad("known-pose fitting uses exactly one camera; set n_hypotheses to 1");
        }
        if !(self.loss.gamma > 0.0) || self.loss.lambda_div < 0.0 || self.loss.margin < 0.0 {
            return bad("gamma must be positive and lambda_div, margin non-negative");
        }
        if !(self.init_noise >= 0.0) {
            return bad("init_noise must be non-negative");
        }
        Ok(())
    }
}

/// Bias-corrected Adam over one flat block of variables.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub name: &'static str,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl Adam {
    pub fn new(name: &'static str, len: usize) -> Self {
        Adam {
            name,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    /// Consumes a gradient and returns the step to add to the variables.
    pub fn step(&mut self, grad: &[f64], lr: f64, b1: f64, b2: f64, eps: f64) -> Result<Vec<f64>> {
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(CsmError::NonFinite {
                block: self.name.to_string(),
            });
        }
        self.t += 1;
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        let mut out = Vec::with_capacity(grad.len());
        for (i, &g) in grad.iter().enumerate() {
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g;
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g * g;
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            out.push(-lr * mh / (vh.sqrt() + eps));
        }
        Ok(out)
    }
}

/// One training image: its mask and, for known-pose fitting, its camera.
#[derive(Debug, Clone)]
pub struct FitImage {
    pub mask: Mask,
    pub camera: Option<Camera>,
}

/// Variables of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageVars {
    pub width: usize,
    pub height: usize,
    pub dirs: Vec<Vec3>,
    pub fg_logit: Vec<f64>,
    pub cameras: Vec<Camera>,
    pub rotations: Vec<Matrix3<f64>>,
    pub logits: Vec<f64>,
}

impl ImageVars {
    pub fn surface_map(&self) -> SurfaceMap {
        SurfaceMap {
            width: self.width,
            height: self.height,
            dirs: self.dirs.clone(),
            fg_prob: self.fg_logit.iter().map(|&l| sigmoid(l)).collect(),
        }
    }

    pub fn hypotheses(&self) -> HypothesisSet {
        HypothesisSet {
            cameras: self.cameras.clone(),
            logits: self.logits.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageState {
    pub vars: ImageVars,
    dirs_opt: Adam,
    fg_opt: Adam,
    cam_opt: Adam,
    logit_opt: Adam,
}

/// All per-image states plus the global iteration counter.
#[derive(Debug, Clone, PartialEq)]
pub struct FitState {
    pub images: Vec<ImageState>,
    pub iteration: usize,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Scale and translation that make the template's silhouette under rotation
/// `r` match the mask's area and centroid.
pub fn fit_scale_translation(template: &TemplateShape, r: &[f64; 3], mask: &Mask) -> Result<(f64, [f64; 2])> {
    let area = mask.count() as f64;
    let (cx, cy) = mask.centroid().ok_or(CsmError::EmptyMask { image: 0 })?;
    let (w, h) = (mask.width, mask.height);
    let s_ref = 0.25 * w.min(h) as f64 / template.bounding_radius();
    let t_ref = [w as f64 / 2.0, h as f64 / 2.0];
    let cam = Camera::new(s_ref, t_ref, *r)?;
    let cov = rasterize_frame(template, &cam.frame(), h, w).coverage();
    let (rx, ry) = cov
        .centroid()
        .ok_or_else(|| CsmError::InvalidTemplate("template renders to an empty silhouette".into()))?;
    let k = (area / cov.count() as f64).sqrt();
    let s = s_ref * k;
    Ok((s, [cx - (rx - t_ref[0]) * k, cy - (ry - t_ref[1]) * k]))
}

/// Front-hemisphere direction for each pixel from its offset to the mask
/// centroid, rotated into the template frame by `rot` and perturbed.
fn heuristic_directions(mask: &Mask, rot: &Matrix3<f64>, noise: f64, rng: &mut ChaCha8Rng) -> Vec<Vec3> {
    let (cx, cy) = mask.centroid().expect("checked non-empty");
    let rho = (mask.count() as f64 / std::f64::consts::PI).sqrt().max(0.5);
    let normal = Normal::new(0.0, noise.max(f64::MIN_POSITIVE)).expect("valid sigma");
    (0..mask.fg.len())
        .map(|i| {
            let (px, py) = pixel_center(i, mask.width);
            let mut ox = (px - cx) / rho;
            let mut oy = (py - cy) / rho;
            let r = ox.hypot(oy);
            let rim = 1.0 - 1e-3;
            if r > rim {
                ox *= rim / r;
                oy *= rim / r;
            }
            let cam_dir = Vec3::new(ox, oy, -(1.0 - ox * ox - oy * oy).sqrt());
            let mut n = rot.transpose() * cam_dir;
            if noise > 0.0 {
                n += Vec3::new(normal.sample(rng), normal.sample(rng), normal.sample(rng));
            }
            n.normalize()
        })
        .collect()
}

fn init_image(index: usize, image: &FitImage, template: &TemplateShape, config: &FitConfig) -> Result<ImageState> {
    let mask = &image.mask;
    if mask.count() == 0 {
        return Err(CsmError::EmptyMask { image: index });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(index as u64));
    let (cameras, reference) = if config.loss.flags.known_pose {
        let cam = image.camera.ok_or_else(|| {
            CsmError::InvalidArgument(format!("image {index} has no camera for known-pose fitting"))
        })?;
        cam.validate()?;
        (vec![cam], 0)
    } else {
        let mut cams = Vec::with_capacity(config.n_hypotheses);
        for r in spread_rotations(config.n_hypotheses)? {
            let (s, t) = fit_scale_translation(template, &r, mask)
                .map_err(|e| match e {
                    CsmError::EmptyMask { .. } => CsmError::EmptyMask { image: index },
                    e => e,
                })?;
            cams.push(Camera::new(s, t, r)?);
        }
        // Directions are seeded from the hypothesis whose silhouette best
        // explains the mask.
        let mut best = (f64::INFINITY, 0);
        for (i, cam) in cams.iter().enumerate() {
            let sil = soft_silhouette_frame(template, &cam.frame(), mask.height, mask.width, config.loss.gamma, false);
            let l = crate::losses::loss_mask(&sil, mask).0;
            if l < best.0 {
                best = (l, i);
            }
        }
        (cams, best.1)
    };
    let rotations: Vec<Matrix3<f64>> = cameras.iter().map(|c| c.rotation()).collect();
    let dirs = match config.init {
        DirectionInit::Hemisphere => heuristic_directions(mask, &rotations[reference], config.init_noise, &mut rng),
        DirectionInit::Random => (0..mask.fg.len())
            .map(|_| Vec3::from(UnitSphere.sample(&mut rng)))
            .collect(),
    };
    let n = mask.fg.len();
    let nh = cameras.len();
    Ok(ImageState {
        vars: ImageVars {
            width: mask.width,
            height: mask.height,
            dirs,
            fg_logit: vec![0.0; n],
            logits: vec![0.0; nh],
            cameras,
            rotations,
        },
        dirs_opt: Adam::new("dirs", 3 * n),
        fg_opt: Adam::new("fg", n),
        cam_opt: Adam::new("camera", 6 * nh),
        logit_opt: Adam::new("logits", nh),
    })
}

/// Builds the initial variables for every image.
pub fn init_state(images: &[FitImage], template: &TemplateShape, config: &FitConfig) -> Result<FitState> {
    config.validate()?;
    if let Some(first) = images.first() {
        let (w, h) = (first.mask.width, first.mask.height);
        if images.iter().any(|im| im.mask.width != w || im.mask.height != h) {
            return Err(CsmError::InvalidArgument("all masks must have the same size".into()));
        }
    }
    let states = images
        .iter()
        .enumerate()
        .map(|(i, im)| init_image(i, im, template, config))
        .collect::<Result<Vec<_>>>()?;
    Ok(FitState {
        images: states,
        iteration: 0,
    })
}

fn camera_with_rotation(cam: &Camera, rot: &Matrix3<f64>) -> Camera {
    Camera::from_rotation(cam.s, cam.t, rot)
}

/// Evaluates the objective for one image with rotation gradients expressed
/// as left increments.
fn evaluate(vars: &ImageVars, mask: &Mask, template: &TemplateShape, config: &FitConfig, fixed_depth: Option<&DepthMap>) -> Result<LossBreakdown> {
    let map = vars.surface_map();
    let h = vars.hypotheses();
    let mut loss_cfg = config.loss;
    loss_cfg.rotation = RotationParam::Local;
    let field = PhiField::compute(template, &map, mask, loss_cfg.flags.restrict_to_mask);
    let frames: Vec<CameraFrame> = vars
        .cameras
        .iter()
        .zip(&vars.rotations)
        .map(|(c, r)| CameraFrame {
            s: c.s,
            t: nalgebra::Vector2::new(c.t[0], c.t[1]),
            // The tracked matrix, not one rebuilt from the Euler angles.
            rot: *r,
            drot: [skew_x() * r, skew_y() * r, skew_z() * r],
        })
        .collect();
    let depths: Vec<Option<DepthMap>> = frames
        .iter()
        .map(|f| {
            loss_cfg.flags.enable_vis.then(|| match fixed_depth {
                Some(d) => d.clone(),
                None => rasterize_frame(template, f, mask.height, mask.width).depth_map(),
            })
        })
        .collect();
    loss_total_with(&map, mask, template, &field, &h, &frames, &depths, &loss_cfg)
}

fn skew_x() -> Matrix3<f64> {
    Matrix3::new(0.0, 0.0, 0.0, 0.0, 0.0, -1.0, 0.0, 1.0, 0.0)
}

fn skew_y() -> Matrix3<f64> {
    Matrix3::new(0.0, 0.0, 1.0, 0.0, 0.0, 0.0, -1.0, 0.0, 0.0)
}

fn skew_z() -> Matrix3<f64> {
    Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0)
}

/// Applies one Adam update to every block of one image.
pub fn adam_step(state: &mut ImageState, loss: &LossBreakdown, config: &FitConfig) -> Result<()> {
    let (lr, b1, b2, eps) = (config.lr, config.adam_beta1, config.adam_beta2, config.adam_eps);
    let vars = &mut state.vars;

    let g: Vec<f64> = loss.dirs_grad.iter().flat_map(|v| [v.x, v.y, v.z]).collect();
    let step = state.dirs_opt.step(&g, lr, b1, b2, eps)?;
    for (i, d) in vars.dirs.iter_mut().enumerate() {
        let moved = *d + Vec3::new(step[3 * i], step[3 * i + 1], step[3 * i + 2]);
        let norm = moved.norm();
        if norm > 0.0 {
            *d = moved / norm;
        }
    }

    // Chain through p = sigmoid(logit).
    let g: Vec<f64> = loss
        .fg_grad
        .iter()
        .zip(&vars.fg_logit)
        .map(|(g, &l)| {
            let p = sigmoid(l);
            g * p * (1.0 - p)
        })
        .collect();
    let step = state.fg_opt.step(&g, lr, b1, b2, eps)?;
    for (l, s) in vars.fg_logit.iter_mut().zip(step) {
        *l += s;
    }

    if !config.loss.flags.known_pose {
        let mut g = Vec::with_capacity(6 * vars.cameras.len());
        for (cam, cg) in vars.cameras.iter().zip(&loss.cam_grad) {
            // Scale is optimized in log space.
            g.push(cg[0] * cam.s);
            g.extend_from_slice(&cg[1..]);
        }
        let step = state.cam_opt.step(&g, lr, b1, b2, eps)?;
        for (k, cam) in vars.cameras.iter_mut().enumerate() {
            let st = &step[6 * k..6 * k + 6];
            let s = cam.s * st[0].exp();
            let t = [cam.t[0] + st[1], cam.t[1] + st[2]];
            let rot = rotation_matrix(&[st[3], st[4], st[5]]) * vars.rotations[k];
            // Re-orthonormalize to keep round-off from accumulating.
            let svd = rot.svd(true, true);
            let rot = svd.u.expect("u") * svd.v_t.expect("v_t");
            vars.rotations[k] = rot;
            *cam = camera_with_rotation(&Camera { s, t, r: cam.r }, &rot);
        }
        let step = state.logit_opt.step(&loss.logit_grad, lr, b1, b2, eps)?;
        for (l, s) in vars.logits.iter_mut().zip(step) {
            *l += s;
        }
    }
    Ok(())
}

/// Output of [`fit`] for one image.
#[derive(Debug, Clone)]
pub struct ImageFit {
    pub map: SurfaceMap,
    pub hypotheses: HypothesisSet,
    /// `iterations + 1` rows: one per step plus the final evaluation.
    pub history: Vec<LossScalars>,
    /// Iteration whose variables were returned (lowest total).
    pub best_iteration: usize,
}

#[derive(Debug, Clone)]
pub struct FitOutput {
    pub images: Vec<ImageFit>,
}

impl FitOutput {
    /// Per-iteration mean over images.
    pub fn mean_history(&self) -> Vec<LossScalars> {
        let n = self.images.len().max(1) as f64;
        let rows = self.images.first().map_or(0, |i| i.history.len());
        (0..rows)
            .map(|r| {
                let mut acc = LossScalars {
                    cyc: 0.0,
                    vis: 0.0,
                    mask: 0.0,
                    div: 0.0,
                    fg: 0.0,
                    total: 0.0,
                };
                for im in &self.images {
                    let h = &im.history[r];
                    acc.cyc += h.cyc / n;
                    acc.vis += h.vis / n;
                    acc.mask += h.mask / n;
                    acc.div += h.div / n;
                    acc.fg += h.fg / n;
                    acc.total += h.total / n;
                }
                acc
            })
            .collect()
    }
}

fn fit_image(mut state: ImageState, image: &FitImage, template: &TemplateShape, config: &FitConfig) -> Result<ImageFit> {
    let mask = &image.mask;
    let fixed_depth = if config.loss.flags.known_pose && config.loss.flags.enable_vis {
        let cam = &state.vars.cameras[0];
        Some(rasterize_frame(template, &cam.frame(), mask.height, mask.width).depth_map())
    } else {
        None
    };
    let mut history = Vec::with_capacity(config.iterations + 1);
    let mut best: Option<(f64, usize, ImageVars)> = None;
    for it in 0..=config.iterations {
        let loss = evaluate(&state.vars, mask, template, config, fixed_depth.as_ref())?;
        if !loss.total.is_finite() {
            return Err(CsmError::NonFinite { block: "loss".into() });
        }
        history.push(loss.scalars());
        if best.as_ref().is_none_or(|b| loss.total < b.0) {
            best = Some((loss.total, it, state.vars.clone()));
        }
        if it < config.iterations {
            adam_step(&mut state, &loss, config)?;
        }
    }
    let (_, best_iteration, vars) = best.expect("at least one evaluation");
    Ok(ImageFit {
        map: vars.surface_map(),
        hypotheses: vars.hypotheses(),
        history,
        best_iteration,
    })
}

/// Fits every image independently and returns the lowest-loss variables
/// seen for each.
pub fn fit(images: &[FitImage], template: &TemplateShape, config: &FitConfig) -> Result<FitOutput> {
    let state = init_state(images, template, config)?;
    fit_from_state(state, images, template, config)
}

pub fn fit_from_state(state: FitState, images: &[FitImage], template: &TemplateShape, config: &FitConfig) -> Result<FitOutput> {
    let results: Vec<Result<ImageFit>> = state
        .images
        .into_par_iter()
        .zip(images.par_iter())
        .map(|(s, im)| fit_image(s, im, template, config))
        .collect();
    Ok(FitOutput {
        images: results.into_iter().collect::<Result<Vec<_>>>()?,
    })
}

/// Camera of the most probable hypothesis.
pub fn select_camera(h: &HypothesisSet) -> Camera {
    crate::camera::select_camera(h)
}

/// Clamp used when reporting foreground probabilities.
pub fn clamp_prob(p: f64) -> f64 {
    p.clamp(FG_CLAMP, 1.0 - FG_CLAMP)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::render_surface_directions;
    use crate::template::{make_icosphere_template, RadialProfile};

    fn disk_mask(size: usize, radius: f64) -> Mask {
        let c = size as f64 / 2.0;
        let fg = (0..size * size)
            .map(|i| {
                let (x, y) = pixel_center(i, size);
                if (x - c).hypot(y - c) <= radius {
                    1.0
                } else {
                    0.0
                }
            })
            .collect();
        Mask::new(size, size, fg).unwrap()
    }

    #[test]
    fn adam_closed_form_and_zero_gradient() {
        let mut a = Adam::new("x", 1);
        // The eps term contributes lr·eps/|g|, negligible for this |g|.
        let s = a.step(&[-2.5e4], 0.01, 0.9, 0.999, 1e-8).unwrap();
        assert!((s[0] - 0.01).abs() < 1e-12);
        let mut a = Adam::new("x", 2);
        let s = a.step(&[0.0, 0.0], 0.01, 0.9, 0.999, 1e-8).unwrap();
        assert_eq!(s, vec![0.0, 0.0]);
        let err = Adam::new("camera", 1).step(&[f64::NAN], 0.1, 0.9, 0.999, 1e-8).unwrap_err();
        assert!(err.to_string().contains("camera"));
    }

    #[test]
    fn adam_decreases_quadratic() {
        let mut a = Adam::new("x", 2);
        let mut x = [3.0, -2.0];
        let f = |x: &[f64; 2]| x[0] * x[0] + 4.0 * x[1] * x[1];
        let mut prev = f(&x);
        for _ in 0..10 {
            let s = a.step(&[2.0 * x[0], 8.0 * x[1]], 0.1, 0.9, 0.999, 1e-8).unwrap();
            x[0] += s[0];
            x[1] += s[1];
            let cur = f(&x);
            assert!(cur < prev);
            prev = cur;
        }
    }

    #[test]
    fn init_scale_matches_disk_radius() {
        let t = make_icosphere_template(3, RadialProfile::Sphere).unwrap();
        let mask = disk_mask(64, 15.0);
        let (s, c) = fit_scale_translation(&t, &[0.0; 3], &mask).unwrap();
        assert!((s - 15.0).abs() <= 1.5, "{s}");
        assert!((c[0] - 32.0).abs() < 1.0 && (c[1] - 32.0).abs() < 1.0);
    }

    #[test]
    fn init_is_deterministic_and_uniform() {
        let t = make_icosphere_template(2, RadialProfile::Blob { a: 0.3, b: 0.2 }).unwrap();
        let images = vec![FitImage { mask: disk_mask(32, 9.0), camera: None }; 2];
        let cfg = FitConfig { seed: 7, ..Default::default() };
        let a = init_state(&images, &t, &cfg).unwrap();
        let b = init_state(&images, &t, &cfg).unwrap();
        assert_eq!(a, b);
        for im in &a.images {
            let p = im.vars.hypotheses().probs();
            assert!(p.iter().all(|&x| (x - 0.125).abs() < 1e-15));
            assert!(im.vars.dirs.iter().all(|d| (d.norm() - 1.0).abs() < 1e-12));
        }
        // Different images draw different noise.
        assert_ne!(a.images[0].vars.dirs, a.images[1].vars.dirs);
    }

    #[test]
    fn init_rejects_empty_masks_and_missing_cameras() {
        let t = make_icosphere_template(1, RadialProfile::Sphere).unwrap();
        let images = vec![FitImage { mask: Mask::empty(8, 8), camera: None }];
        assert!(matches!(init_state(&images, &t, &FitConfig::default()), Err(CsmError::EmptyMask { image: 0 })));
        let images = vec![FitImage { mask: disk_mask(16, 4.0), camera: None }];
        let mut cfg = FitConfig { n_hypotheses: 1, ..Default::default() };
        cfg.loss.flags.known_pose = true;
        assert!(init_state(&images, &t, &cfg).is_err());
    }

    #[test]
    fn zero_iterations_return_initial_state() {
        let t = make_icosphere_template(2, RadialProfile::Blob { a: 0.3, b: 0.2 }).unwrap();
        let cam = Camera::new(8.0, [16.0, 16.0], [0.2, 0.5, 0.0]).unwrap();
        let (_, mask) = render_surface_directions(&t, &cam, 32, 32);
        let images = vec![FitImage { mask, camera: Some(cam) }];
        let mut cfg = FitConfig { iterations: 0, n_hypotheses: 1, ..Default::default() };
        cfg.loss.flags.known_pose = true;
        let init = init_state(&images, &t, &cfg).unwrap();
        let out = fit(&images, &t, &cfg).unwrap();
        assert_eq!(out.images[0].map, init.images[0].vars.surface_map());
        assert_eq!(out.images[0].history.len(), 1);
    }

    #[test]
    fn known_pose_fit_reduces_loss_and_more_iterations_never_hurt() {
        let t = make_icosphere_template(2, RadialProfile::Blob { a: 0.3, b: 0.2 }).unwrap();
        let cam = Camera::new(8.0, [16.0, 16.0], [0.2, 0.5, 0.0]).unwrap();
        let (_, mask) = render_surface_directions(&t, &cam, 32, 32);
        let images = vec![FitImage { mask, camera: Some(cam) }];
        let mut cfg = FitConfig { iterations: 40, n_hypotheses: 1, lr: 1e-2, ..Default::default() };
        cfg.loss.flags.known_pose = true;
        let a = fit(&images, &t, &cfg).unwrap();
        let h = &a.images[0].history;
        assert_eq!(h.len(), 41);
        assert!(h.last().unwrap().total < h[0].total);
        let best_a = h.iter().map(|r| r.total).fold(f64::INFINITY, f64::min);
        cfg.iterations = 80;
        let b = fit(&images, &t, &cfg).unwrap();
        let best_b = b.images[0].history.iter().map(|r| r.total).fold(f64::INFINITY, f64::min);
        assert!(best_b <= best_a);
        assert_eq!(&b.images[0].history[..41], &h[..]);
    }

    #[test]
    fn pose_free_step_keeps_invariants() {
        let t = make_icosphere_template(1, RadialProfile::Blob { a: 0.3, b: 0.2 }).unwrap();
        let cam = Camera::new(6.0, [12.0, 12.0], [0.0, 0.4, 0.0]).unwrap();
        let (_, mask) = render_surface_directions(&t, &cam, 24, 24);
        let images = vec![FitImage { mask, camera: None }];
        let cfg = FitConfig { iterations: 5, n_hypotheses: 4, lr: 1e-2, ..Default::default() };
        let out = fit(&images, &t, &cfg).unwrap();
        let im = &out.images[0];
        assert!(im.map.dirs.iter().all(|d| (d.norm() - 1.0).abs() < 1e-12));
        let p = im.hypotheses.probs();
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for c in &im.hypotheses.cameras {
            let r = c.rotation();
            assert!((r.transpose() * r - Matrix3::identity()).norm() < 1e-9);
        }
    }
}
