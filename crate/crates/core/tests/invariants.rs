//! Cross-module properties exercised through the public API.

use std::sync::OnceLock;

use csm_core::camera::{rot_y, softmax};
use csm_core::correspondence::{default_tau, TargetIndex};
use csm_core::losses::{loss_cyc, loss_total, loss_vis, LossConfig};
use csm_core::raster::{render_depth, render_soft_silhouette, render_surface_directions};
use csm_core::scenegen::{generate, SceneConfig, SyntheticScene};
use csm_core::surface_map::{pixel_center, Vec3};
use csm_core::template::{make_icosphere_template, sphere_to_uv, uv_to_sphere};
use csm_core::{Camera, HypothesisSet, RadialProfile, SurfaceMap, TemplateShape, UvCoord};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn blob() -> &'static TemplateShape {
    static T: OnceLock<TemplateShape> = OnceLock::new();
    T.get_or_init(|| make_icosphere_template(3, RadialProfile::Blob { a: 0.3, b: 0.2 }).unwrap())
}

fn blob_scene() -> &'static SyntheticScene {
    static S: OnceLock<SyntheticScene> = OnceLock::new();
    S.get_or_init(|| {
        generate(
            blob(),
            &SceneConfig {
                n_views: 4,
                height: 32,
                width: 32,
                ..Default::default()
            },
        )
        .unwrap()
    })
}

fn random_map(width: usize, height: usize, seed: u64) -> SurfaceMap {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dirs = (0..width * height)
        .map(|_| {
            let v = Vec3::new(rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal));
            v.normalize()
        })
        .collect();
    let fg = (0..width * height).map(|_| rng.random_range(0.05..0.95)).collect();
    SurfaceMap::new(width, height, dirs, fg).unwrap()
}

fn perturbed(cam: &Camera, rng: &mut ChaCha8Rng) -> Camera {
    Camera {
        s: cam.s * rng.random_range(0.9..1.1),
        t: [cam.t[0] + rng.random_range(-2.0..2.0), cam.t[1] + rng.random_range(-2.0..2.0)],
        r: [cam.r[0] + rng.random_range(-0.3..0.3), cam.r[1] + rng.random_range(-0.3..0.3), cam.r[2]],
    }
}

fn hypotheses(view: usize, n: usize, seed: u64) -> HypothesisSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cam = blob_scene().views[view].camera;
    let cams = (0..n).map(|_| perturbed(&cam, &mut rng)).collect();
    let logits = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    HypothesisSet::new(cams, logits).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn uv_sphere_round_trips(u in 0.01f64..0.99, v in 0.02f64..0.98) {
        let uv = UvCoord::new(u, v);
        let back = sphere_to_uv(&uv_to_sphere(uv));
        prop_assert!((back.u - u).abs() < 1e-9 && (back.v - v).abs() < 1e-9);
        let n = uv_to_sphere(uv);
        prop_assert!((uv_to_sphere(sphere_to_uv(&n)) - n).norm() < 1e-9);
    }

    #[test]
    fn softmax_is_a_shift_invariant_simplex(
        logits in prop::collection::vec(-30.0f64..30.0, 1..12),
        shift in -500.0f64..500.0,
    ) {
        let p = softmax(&logits);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(p.iter().all(|&x| (0.0..=1.0).contains(&x)));
        let shifted: Vec<f64> = logits.iter().map(|l| l + shift).collect();
        for (a, b) in p.iter().zip(softmax(&shifted)) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn losses_are_signed_and_background_gets_no_gradient(seed in 0u64..1000, view in 0usize..4) {
        let v = &blob_scene().views[view];
        let c = random_map(32, 32, seed);
        let h = hypotheses(view, 3, seed);
        let out = loss_total(&c, &v.mask, blob(), &h, &LossConfig::default()).unwrap();
        for x in [out.cyc, out.vis, out.mask, out.fg] {
            prop_assert!(x >= 0.0);
        }
        for (i, g) in out.dirs_grad.iter().enumerate() {
            if !v.mask.is_fg(i) {
                prop_assert_eq!(*g, Vec3::zeros());
            }
        }
    }

    #[test]
    fn weight_scaling_scales_everything(seed in 0u64..1000, e in -3i32..4) {
        let k = 2f64.powi(e);
        let v = &blob_scene().views[1];
        let c = random_map(32, 32, seed);
        let h = hypotheses(1, 2, seed);
        let base = LossConfig::default();
        let scaled = LossConfig { weights: base.weights.scaled(k), ..base };
        let a = loss_total(&c, &v.mask, blob(), &h, &base).unwrap();
        let b = loss_total(&c, &v.mask, blob(), &h, &scaled).unwrap();
        prop_assert_eq!(b.total, k * a.total);
        for (x, y) in a.logit_grad.iter().zip(&b.logit_grad) {
            prop_assert_eq!(*y, k * x);
        }
        for (x, y) in a.cam_grad.iter().zip(&b.cam_grad) {
            for j in 0..6 {
                prop_assert_eq!(y[j], k * x[j]);
            }
        }
        for (x, y) in a.dirs_grad.iter().zip(&b.dirs_grad) {
            prop_assert_eq!(*y, *x * k);
        }
    }
}

/// A line search along one logit never increases the objective, and strictly
/// decreases it whenever that logit's gradient is non-zero.
#[test]
fn single_variable_line_search_decreases_total() {
    let v = &blob_scene().views[2];
    let config = LossConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for trial in 0..20u64 {
        let c = random_map(32, 32, 100 + trial);
        let h = hypotheses(2, 3, trial);
        let k = rng.random_range(0..3);
        let base = loss_total(&c, &v.mask, blob(), &h, &config).unwrap();
        let eval = |step: f64| {
            let mut logits = h.logits.clone();
            logits[k] += step;
            let hk = HypothesisSet::new(h.cameras.clone(), logits).unwrap();
            loss_total(&c, &v.mask, blob(), &hk, &config).unwrap().total
        };
        let dir = -base.logit_grad[k].signum();
        let best = (1..=40).map(|i| eval(dir * 0.05 * i as f64)).fold(base.total, f64::min);
        assert!(best <= base.total);
        if base.logit_grad[k].abs() > 1e-9 {
            assert!(best < base.total, "trial {trial}: no decrease along logit {k}");
        }
    }
}

/// Forward then backward transfer on ground-truth maps of neighbouring ring
/// views returns close to the starting pixel.
#[test]
fn transfer_is_exchange_consistent_on_ground_truth() {
    let t = blob();
    let scene = generate(t, &SceneConfig { n_views: 8, ..Default::default() }).unwrap();
    let tau = default_tau(t);
    for (a, b) in [(0, 1), (3, 4), (7, 0)] {
        let (va, vb) = (&scene.views[a], &scene.views[b]);
        let to_b = TargetIndex::new(&vb.gt, &vb.mask, t).unwrap();
        let to_a = TargetIndex::new(&va.gt, &va.mask, t).unwrap();
        let (mut mutual, mut close) = (0, 0);
        for p in va.mask.fg_indices() {
            let fwd = to_b.nearest(&t.phi(&va.gt.dirs[p]).position, tau);
            if !fwd.corresponds {
                continue;
            }
            mutual += 1;
            let q = (fwd.target_pixel[1] as usize) * vb.mask.width + fwd.target_pixel[0] as usize;
            let back = to_a.nearest(&t.phi(&vb.gt.dirs[q]).position, tau);
            let (px, py) = pixel_center(p, va.mask.width);
            close += ((back.target_pixel[0] - px).hypot(back.target_pixel[1] - py) <= 2.0) as usize;
        }
        assert!(mutual > 100);
        let frac = close as f64 / mutual as f64;
        assert!(frac >= 0.9, "views {a}->{b}: {frac:.3} within 2 px");
    }
}

/// On a front/back-symmetric template, mirroring every direction through
/// the image plane keeps the cycle loss at its ground-truth level; only the
/// visibility term tells the two apart.
#[test]
fn symmetric_template_needs_visibility_to_reject_back_faces() {
    let t = make_icosphere_template(3, RadialProfile::Sphere).unwrap();
    let cam = Camera::from_rotation(20.0, [32.0, 32.0], &rot_y(0.4));
    let (gt, mask) = render_surface_directions(&t, &cam, 64, 64);
    let rot = cam.rotation();
    let back_dirs = gt
        .dirs
        .iter()
        .map(|n| {
            // Flip the camera-depth component in the camera frame.
            let mut q = rot * n;
            q.z = -q.z;
            rot.transpose() * q
        })
        .collect();
    let back = SurfaceMap::new(64, 64, back_dirs, gt.fg_prob.clone()).unwrap();
    let depth = render_depth(&t, &cam, 64, 64);
    let (front_cyc, back_cyc) = (loss_cyc(&gt, &mask, &cam, &t).value, loss_cyc(&back, &mask, &cam, &t).value);
    assert!(front_cyc < 0.5 && back_cyc < 0.5, "cyc front {front_cyc} back {back_cyc}");
    assert!((back_cyc - front_cyc).abs() < 0.25);
    let (front_vis, back_vis) = (
        loss_vis(&gt, &mask, &cam, &t, &depth, 0.0).value,
        loss_vis(&back, &mask, &cam, &t, &depth, 0.0).value,
    );
    assert!(front_vis < 1e-3);
    assert!(back_vis > 100.0 * front_vis.max(1e-4), "vis front {front_vis} back {back_vis}");
}

/// Thresholded soft silhouette against the hard coverage mask at 128².
#[test]
fn soft_silhouette_agrees_with_hard_mask_at_128() {
    let t = blob();
    let scene = generate(t, &SceneConfig { n_views: 4, height: 128, width: 128, ..Default::default() }).unwrap();
    for (k, v) in scene.views.iter().enumerate() {
        let soft = render_soft_silhouette(t, &v.camera, 128, 128, 1.0).threshold(0.5);
        let iou = soft.iou(&v.mask);
        assert!(iou >= 0.98, "view {k}: IoU {iou:.3}");
    }
}
