//! Central finite-difference checks of every analytic gradient in the crate.
//!
//! Each suite draws seeded random configurations, compares the analytic
//! gradient block against central differences and keeps the largest
//! norm-wise relative error. Configurations are chosen away from the
//! non-smooth sets of the objectives (face edges of the sphere partition,
//! hinge kinks, bilinear cell boundaries); `perturb_kinks` deliberately adds
//! a sample sitting on a hinge kink so that the visibility suite fails.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, UnitSphere};
use serde::{Deserialize, Serialize};

use crate::camera::{rot_x, rot_y, rot_z, Camera, CameraFrame, HypothesisSet};
use crate::error::Result;
use crate::losses::{
    div_term, loss_cyc, loss_fg, loss_mask, loss_total, loss_vis, LossConfig,
};
use crate::raster::{render_soft_silhouette, soft_silhouette_frame, DepthMap};
use crate::scenegen::{render_view, View};
use crate::surface_map::{Mask, SurfaceMap, Vec3};
use crate::template::{make_icosphere_template, RadialProfile, TemplateShape};

pub const PHI_TOL: f64 = 1e-4;
pub const PROJECTION_TOL: f64 = 1e-5;
pub const SILHOUETTE_TOL: f64 = 1e-2;
pub const CYC_TOL: f64 = 1e-4;
pub const VIS_TOL: f64 = 1e-4;
pub const MASK_TOL: f64 = 1e-2;
pub const DIV_LOGIT_TOL: f64 = 1e-6;
pub const DIV_ROTATION_TOL: f64 = 1e-4;
pub const FG_TOL: f64 = 1e-6;
pub const TOTAL_LOGIT_TOL: f64 = 1e-4;

/// Denominator floor of the relative error, so that two vanishing gradients
/// compare as equal.
const REL_FLOOR: f64 = 1e-8;
/// Minimum edge sine of sampled sphere directions.
const SAFE_SINE: f64 = 1e-4;
/// Minimum distance (pixels or depth units) from any kink of the visibility
/// term.
const SAFE_KINK: f64 = 1e-3;
const SIZE: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct GradcheckConfig {
    pub seed: u64,
    pub perturb_kinks: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub name: String,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub samples: usize,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub seed: u64,
    pub passed: bool,
    pub suites: Vec<SuiteReport>,
}

impl GradcheckReport {
    pub fn suite(&self, name: &str) -> Option<&SuiteReport> {
        self.suites.iter().find(|s| s.name == name)
    }
}

/// `‖a − f‖ / max(‖a‖, ‖f‖, floor)`.
pub fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: f64 = analytic.iter().zip(numeric).map(|(a, f)| (a - f).powi(2)).sum::<f64>().sqrt();
    let scale = norm(analytic).max(norm(numeric)).max(REL_FLOOR);
    let e = diff / scale;
    if e.is_nan() {
        f64::INFINITY
    } else {
        e
    }
}

/// Central differences of a vector function of `x`.
fn central_diff(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> Vec<f64>) -> Vec<Vec<f64>> {
    (0..x.len())
        .map(|k| {
            let mut xp = x.to_vec();
            let mut xm = x.to_vec();
            xp[k] += h;
            xm[k] -= h;
            let (fp, fm) = (f(&xp), f(&xm));
            fp.iter().zip(&fm).map(|(a, b)| (a - b) / (2.0 * h)).collect()
        })
        .collect()
}

/// Central-difference gradient of a scalar function.
fn scalar_grad(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    central_diff(x, h, |v| vec![f(v)]).into_iter().map(|c| c[0]).collect()
}

struct Suite {
    name: &'static str,
    tolerance: f64,
    max: f64,
    samples: usize,
}

impl Suite {
    fn new(name: &'static str, tolerance: f64) -> Self {
        Suite {
            name,
            tolerance,
            max: 0.0,
            samples: 0,
        }
    }

    fn add(&mut self, analytic: &[f64], numeric: &[f64]) {
        let e = rel_err(analytic, numeric);
        self.max = self.max.max(e);
        self.samples += 1;
    }

    fn finish(self) -> SuiteReport {
        log::info!("gradcheck {}: max rel err {:.3e} over {} samples", self.name, self.max, self.samples);
        SuiteReport {
            name: self.name.to_string(),
            max_rel_err: self.max,
            tolerance: self.tolerance,
            samples: self.samples,
            passed: self.samples > 0 && self.max <= self.tolerance,
        }
    }
}

fn unit(rng: &mut ChaCha8Rng) -> Vec3 {
    Vec3::from(UnitSphere.sample(rng))
}

fn gauss3(rng: &mut ChaCha8Rng) -> Vec3 {
    let g = Normal::new(0.0, 1.0).unwrap();
    Vec3::new(g.sample(rng), g.sample(rng), g.sample(rng))
}

fn min_sine(template: &TemplateShape, n: &Vec3) -> f64 {
    let face = template.locate(n).face;
    template.edge_sines(face, n).iter().copied().fold(f64::INFINITY, f64::min)
}

fn random_camera(rng: &mut ChaCha8Rng) -> Camera {
    Camera {
        s: rng.random_range(0.5..80.0),
        t: [rng.random_range(-50.0..50.0), rng.random_range(-50.0..50.0)],
        r: [
            rng.random_range(-3.0..3.0),
            rng.random_range(-1.5..1.5),
            rng.random_range(-3.0..3.0),
        ],
    }
}

fn cam_from(x: &[f64]) -> Camera {
    Camera {
        s: x[0],
        t: [x[1], x[2]],
        r: [x[3], x[4], x[5]],
    }
}

fn cam_vec(cam: &Camera) -> Vec<f64> {
    cam.to_vec().as_slice().to_vec()
}

/// Runs every suite.
pub fn run(config: &GradcheckConfig) -> Result<GradcheckReport> {
    let template = make_icosphere_template(3, RadialProfile::Blob { a: 0.3, b: 0.2 })?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let s = 0.3 * SIZE as f64 / template.bounding_radius();
    let view_cam = Camera::new(
        s,
        [SIZE as f64 / 2.0 + rng.random_range(-2.0..2.0), SIZE as f64 / 2.0 + rng.random_range(-2.0..2.0)],
        [rng.random_range(-0.6..0.6), rng.random_range(-3.0..3.0), rng.random_range(-0.3..0.3)],
    )?;
    let view = render_view(&template, &view_cam, &[], SIZE, SIZE);

    let mut suites = vec![
        phi_suite(&template, &mut rng),
        projection_suite(&mut rng),
        silhouette_suite(&template, &view_cam, &mut rng),
        cyc_suite(&template, &view, &mut rng)?,
        vis_suite(&template, &view, &mut rng, config.perturb_kinks)?,
        mask_suite(&template, &view, &mut rng),
    ];
    suites.extend(div_suites(&mut rng));
    suites.push(fg_suite(&mut rng)?);
    suites.push(total_suite(&template, &view, &mut rng)?);
    let passed = suites.iter().all(|s| s.passed);
    Ok(GradcheckReport {
        seed: config.seed,
        passed,
        suites,
    })
}

fn phi_suite(template: &TemplateShape, rng: &mut ChaCha8Rng) -> SuiteReport {
    let mut suite = Suite::new("phi_jacobian", PHI_TOL);
    let h = 1e-5;
    while suite.samples < 100 {
        let n = unit(rng);
        // Steps of size h must stay inside the face.
        if min_sine(template, &n) < 1e3 * h {
            continue;
        }
        let j = template.phi_jacobian(&n).matrix;
        let cols = central_diff(n.as_slice(), h, |x| {
            let m = Vec3::new(x[0], x[1], x[2]).normalize();
            template.phi(&m).position.as_slice().to_vec()
        });
        let analytic: Vec<f64> = (0..3).flat_map(|c| (0..3).map(move |r| (r, c))).map(|(r, c)| j[(r, c)]).collect();
        let numeric: Vec<f64> = cols.into_iter().flatten().collect();
        suite.add(&analytic, &numeric);
    }
    suite.finish()
}

/// Pixel position and depth under a camera, stacked.
fn projected(frame: &CameraFrame, p: &Vec3) -> Vec<f64> {
    let (pix, z) = frame.project(p);
    vec![pix.x, pix.y, z]
}

fn projection_suite(rng: &mut ChaCha8Rng) -> SuiteReport {
    let mut suite = Suite::new("camera_projection", PROJECTION_TOL);
    let h = 1e-6;
    for i in 0..200 {
        let cam = random_camera(rng);
        let p = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let local = i % 2 == 1;
        let frame = if local { CameraFrame::local(&cam) } else { CameraFrame::euler(&cam) };
        let j = frame.jacobians(&p);

        let by_point = central_diff(p.as_slice(), h, |x| projected(&frame, &Vec3::new(x[0], x[1], x[2])));
        let mut analytic = Vec::new();
        for c in 0..3 {
            analytic.extend([j.dpix_dp[(0, c)], j.dpix_dp[(1, c)], j.ddepth_dp[c]]);
        }
        suite.add(&analytic, &by_point.into_iter().flatten().collect::<Vec<_>>());

        let moved = |x: &[f64]| {
            let f = if local {
                let base = cam.rotation();
                let rot = rot_z(x[5]) * rot_y(x[4]) * rot_x(x[3]) * base;
                CameraFrame::euler(&Camera::from_rotation(x[0], [x[1], x[2]], &rot))
            } else {
                CameraFrame::euler(&cam_from(x))
            };
            projected(&f, &p)
        };
        let x0 = if local {
            vec![cam.s, cam.t[0], cam.t[1], 0.0, 0.0, 0.0]
        } else {
            cam_vec(&cam)
        };
        let by_cam = central_diff(&x0, h, moved);
        let mut analytic = Vec::new();
        for c in 0..6 {
            analytic.extend([j.dpix_dcam[(0, c)], j.dpix_dcam[(1, c)], j.ddepth_dcam[c]]);
        }
        suite.add(&analytic, &by_cam.into_iter().flatten().collect::<Vec<_>>());
    }
    suite.finish()
}

fn silhouette_suite(template: &TemplateShape, view_cam: &Camera, rng: &mut ChaCha8Rng) -> SuiteReport {
    let mut suite = Suite::new("soft_silhouette", SILHOUETTE_TOL);
    let h = 1e-3;
    for _ in 0..4 {
        // Shift the object across the image border so that the total
        // coverage depends on the translation.
        let mut cam = *view_cam;
        cam.t[0] = rng.random_range(-4.0..8.0);
        cam.t[1] += rng.random_range(-8.0..8.0);
        cam.r[1] += rng.random_range(-1.0..1.0);
        let sil = render_soft_silhouette(template, &cam, SIZE, SIZE, 1.0);
        let analytic: Vec<f64> = (0..6).map(|c| sil.grad.iter().map(|g| g[c]).sum()).collect();
        let numeric = scalar_grad(&cam_vec(&cam), h, |x| {
            soft_silhouette_frame(template, &CameraFrame::euler(&cam_from(x)), SIZE, SIZE, 1.0, false)
                .alpha
                .iter()
                .sum()
        });
        suite.add(&analytic, &numeric);
    }
    suite.finish()
}

/// A random surface map near the ground truth; background pixels point along
/// +z.
fn noisy_map(view: &View, sigma: f64, rng: &mut ChaCha8Rng) -> SurfaceMap {
    let dirs = view
        .gt
        .dirs
        .iter()
        .map(|d| (d + gauss3(rng) * sigma).normalize())
        .collect();
    SurfaceMap::new(view.gt.width, view.gt.height, dirs, view.gt.fg_prob.clone()).expect("unit directions")
}

fn subset_mask(width: usize, height: usize, pixels: &[usize]) -> Mask {
    let mut fg = vec![0.0; width * height];
    for &p in pixels {
        fg[p] = 1.0;
    }
    Mask { width, height, fg }
}

fn tangent_field(c: &SurfaceMap, pixels: &[usize], rng: &mut ChaCha8Rng) -> Vec<Vec3> {
    let mut delta = vec![Vec3::zeros(); c.len()];
    for &p in pixels {
        let n = c.dirs[p];
        let g = gauss3(rng);
        delta[p] = g - n * n.dot(&g);
    }
    delta
}

fn displaced(c: &SurfaceMap, delta: &[Vec3], h: f64) -> SurfaceMap {
    let dirs = c.dirs.iter().zip(delta).map(|(n, d)| (n + d * h).normalize()).collect();
    SurfaceMap {
        dirs,
        ..c.clone()
    }
}

fn directional(grad: &[Vec3], delta: &[Vec3]) -> f64 {
    grad.iter().zip(delta).map(|(g, d)| g.dot(d)).sum()
}

fn cyc_suite(template: &TemplateShape, view: &View, rng: &mut ChaCha8Rng) -> Result<SuiteReport> {
    let mut suite = Suite::new("loss_cyc", CYC_TOL);
    let h = 1e-6;
    let c = noisy_map(view, 0.2, rng);
    let pixels: Vec<usize> = view
        .mask
        .fg_indices()
        .into_iter()
        .filter(|&p| min_sine(template, &c.dirs[p]) > SAFE_SINE)
        .collect();
    let mask = subset_mask(c.width, c.height, &pixels);
    let cam = view.camera;
    let term = loss_cyc(&c, &mask, &cam, template);
    for _ in 0..50 {
        let delta = tangent_field(&c, &pixels, rng);
        let fp = loss_cyc(&displaced(&c, &delta, h), &mask, &cam, template).value;
        let fm = loss_cyc(&displaced(&c, &delta, -h), &mask, &cam, template).value;
        suite.add(&[directional(&term.dirs_grad, &delta)], &[(fp - fm) / (2.0 * h)]);
    }
    let numeric = scalar_grad(&cam_vec(&cam), h, |x| loss_cyc(&c, &mask, &cam_from(x), template).value);
    suite.add(&term.cam_grad, &numeric);
    Ok(suite.finish())
}

/// Whether the visibility hinge at pixel `p` is at least `SAFE_KINK` away
/// from each of its kinks.
fn vis_safe(template: &TemplateShape, frame: &CameraFrame, depth: &DepthMap, margin: f64, n: &Vec3) -> Option<f64> {
    if min_sine(template, n) <= SAFE_SINE {
        return None;
    }
    let fill = depth.max_finite()?;
    let (pix, z) = frame.project(&template.phi(n).position);
    let (w, hgt) = (depth.width as f64, depth.height as f64);
    let inside = pix.x > SAFE_KINK && pix.y > SAFE_KINK && pix.x < w - SAFE_KINK && pix.y < hgt - SAFE_KINK;
    let off_grid = |v: f64| {
        let f = (v - 0.5) - (v - 0.5).floor();
        f > SAFE_KINK && f < 1.0 - SAFE_KINK
    };
    if !inside || !off_grid(pix.x) || !off_grid(pix.y) {
        return None;
    }
    let d = depth.sample_bilinear(pix.x, pix.y, fill)?;
    let hinge = z - d.value + margin;
    (hinge.abs() > SAFE_KINK).then_some(hinge)
}

fn vis_suite(template: &TemplateShape, view: &View, rng: &mut ChaCha8Rng, perturb_kinks: bool) -> Result<SuiteReport> {
    let mut suite = Suite::new("loss_vis", VIS_TOL);
    let h = 1e-6;
    let margin = 0.0;
    let c = noisy_map(view, 0.6, rng);
    let cam = view.camera;
    let frame = cam.frame();
    let depth = &view.depth;
    let hinges: Vec<(usize, f64)> = view
        .mask
        .fg_indices()
        .into_iter()
        .filter_map(|p| vis_safe(template, &frame, depth, margin, &c.dirs[p]).map(|v| (p, v)))
        .collect();
    let pixels: Vec<usize> = hinges.iter().map(|&(p, _)| p).collect();
    let mask = subset_mask(c.width, c.height, &pixels);
    let term = loss_vis(&c, &mask, &cam, template, depth, margin);
    for _ in 0..50 {
        let delta = tangent_field(&c, &pixels, rng);
        let fp = loss_vis(&displaced(&c, &delta, h), &mask, &cam, template, depth, margin).value;
        let fm = loss_vis(&displaced(&c, &delta, -h), &mask, &cam, template, depth, margin).value;
        suite.add(&[directional(&term.dirs_grad, &delta)], &[(fp - fm) / (2.0 * h)]);
    }
    let numeric = scalar_grad(&cam_vec(&cam), h, |x| loss_vis(&c, &mask, &cam_from(x), template, depth, margin).value);
    suite.add(&term.cam_grad, &numeric);

    if perturb_kinks {
        // Move the margin so that one active pixel sits exactly on its hinge
        // kink and probe it along its own gradient.
        if let Some(&(p, hinge)) = hinges.iter().find(|&&(_, v)| v > 0.0) {
            let single = subset_mask(c.width, c.height, &[p]);
            let active = loss_vis(&c, &single, &cam, template, depth, margin);
            let kink_margin = margin - hinge;
            let at_kink = loss_vis(&c, &single, &cam, template, depth, kink_margin);
            let delta = active.dirs_grad.clone();
            let fp = loss_vis(&displaced(&c, &delta, h), &single, &cam, template, depth, kink_margin).value;
            let fm = loss_vis(&displaced(&c, &delta, -h), &single, &cam, template, depth, kink_margin).value;
            suite.add(&[directional(&at_kink.dirs_grad, &delta)], &[(fp - fm) / (2.0 * h)]);
        }
    }
    Ok(suite.finish())
}

fn mask_suite(template: &TemplateShape, view: &View, rng: &mut ChaCha8Rng) -> SuiteReport {
    let mut suite = Suite::new("loss_mask", MASK_TOL);
    let h = 1e-3;
    for _ in 0..3 {
        let mut cam = view.camera;
        cam.s *= rng.random_range(0.85..1.15);
        cam.t[0] += rng.random_range(-3.0..3.0);
        cam.t[1] += rng.random_range(-3.0..3.0);
        for r in cam.r.iter_mut() {
            *r += rng.random_range(-0.3..0.3);
        }
        let (_, analytic) = loss_mask(&render_soft_silhouette(template, &cam, SIZE, SIZE, 1.0), &view.mask);
        let numeric = scalar_grad(&cam_vec(&cam), h, |x| {
            let sil = soft_silhouette_frame(template, &CameraFrame::euler(&cam_from(x)), SIZE, SIZE, 1.0, false);
            loss_mask(&sil, &view.mask).0
        });
        suite.add(&analytic, &numeric);
    }
    suite.finish()
}

fn div_suites(rng: &mut ChaCha8Rng) -> [SuiteReport; 2] {
    let mut logits_suite = Suite::new("loss_div_logits", DIV_LOGIT_TOL);
    let mut rot_suite = Suite::new("loss_div_rotations", DIV_ROTATION_TOL);
    let lambda = 0.1;
    let h = 1e-6;
    let normal = Normal::new(0.0, 1.0).unwrap();
    for _ in 0..20 {
        let n = rng.random_range(2..=8);
        let logits: Vec<f64> = (0..n).map(|_| normal.sample(rng)).collect();
        let cams: Vec<Camera> = (0..n).map(|_| random_camera(rng)).collect();
        let frames: Vec<CameraFrame> = cams.iter().map(CameraFrame::euler).collect();
        let term = div_term(&logits, &frames, lambda);
        let numeric = scalar_grad(&logits, h, |l| div_term(l, &frames, lambda).value);
        logits_suite.add(&term.logit_grad, &numeric);
        for i in 0..n {
            let numeric = scalar_grad(&cams[i].r, h, |r| {
                let mut moved = frames.clone();
                moved[i] = CameraFrame::euler(&Camera { r: [r[0], r[1], r[2]], ..cams[i] });
                div_term(&logits, &moved, lambda).value
            });
            rot_suite.add(&term.rot_grad[i], &numeric);
        }
    }
    [logits_suite.finish(), rot_suite.finish()]
}

fn fg_suite(rng: &mut ChaCha8Rng) -> Result<SuiteReport> {
    let mut suite = Suite::new("loss_fg", FG_TOL);
    let h = 1e-7;
    for _ in 0..10 {
        let fg: Vec<f64> = (0..256).map(|_| if rng.random_bool(0.5) { 1.0 } else { 0.0 }).collect();
        let mask = Mask::new(16, 16, fg)?;
        let probs: Vec<f64> = (0..256).map(|_| rng.random_range(0.01..0.99)).collect();
        let (_, analytic) = loss_fg(&probs, &mask);
        let numeric = scalar_grad(&probs, h, |p| loss_fg(p, &mask).0);
        suite.add(&analytic, &numeric);
    }
    Ok(suite.finish())
}

fn total_suite(template: &TemplateShape, view: &View, rng: &mut ChaCha8Rng) -> Result<SuiteReport> {
    let mut suite = Suite::new("loss_total_logits", TOTAL_LOGIT_TOL);
    let h = 1e-6;
    let config = LossConfig::default();
    let normal = Normal::new(0.0, 1.0).unwrap();
    for _ in 0..3 {
        let c = noisy_map(view, 0.3, rng);
        let cams: Vec<Camera> = (0..4)
            .map(|_| {
                let mut cam = view.camera;
                for r in cam.r.iter_mut() {
                    *r += rng.random_range(-0.5..0.5);
                }
                cam
            })
            .collect();
        let logits: Vec<f64> = (0..4).map(|_| normal.sample(rng)).collect();
        let hyp = HypothesisSet::new(cams.clone(), logits.clone())?;
        let analytic = loss_total(&c, &view.mask, template, &hyp, &config)?.logit_grad;
        let mut failure = None;
        let numeric = scalar_grad(&logits, h, |l| {
            let hyp = HypothesisSet {
                cameras: cams.clone(),
                logits: l.to_vec(),
            };
            match loss_total(&c, &view.mask, template, &hyp, &config) {
                Ok(b) => b.total,
                Err(e) => {
                    failure = Some(e);
                    f64::NAN
                }
            }
        });
        if let Some(e) = failure {
            return Err(e);
        }
        suite.add(&analytic, &numeric);
    }
    Ok(suite.finish())
}
