//! Training objectives with analytic gradients.
//!
//! Per-pixel terms (cycle and visibility) are averaged over the active pixel
//! set: the foreground when `restrict_to_mask` is on, every pixel otherwise.
//! Image-level terms (mask, foreground cross-entropy) average over all pixels.

use nalgebra::{Matrix3, RowVector3};
use serde::{Deserialize, Serialize};

use crate::camera::{geodesic_between, geodesic_grad, softmax, Camera, CameraFrame, HypothesisSet};
use crate::error::{CsmError, Result};
use crate::raster::{rasterize_frame, soft_silhouette_frame, DepthMap, SilhouetteMap};
use crate::surface_map::{pixel_center, Mask, SurfaceMap, Vec3};
use crate::template::TemplateShape;

/// Probabilities are clamped into `[FG_CLAMP, 1 − FG_CLAMP]` before the log.
pub const FG_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub cyc: f64,
    pub vis: f64,
    pub mask: f64,
    pub div: f64,
    pub fg: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            cyc: 1.0,
            vis: 1.0,
            mask: 1.0,
            div: 1.0,
            fg: 1.0,
        }
    }
}

impl LossWeights {
    pub fn scaled(&self, k: f64) -> Self {
        LossWeights {
            cyc: self.cyc * k,
            vis: self.vis * k,
            mask: self.mask * k,
            div: self.div * k,
            fg: self.fg * k,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossFlags {
    /// Off reproduces the "-vis" ablation.
    pub enable_vis: bool,
    /// Off reproduces the "-mask" ablation: cycle/visibility over all pixels.
    pub restrict_to_mask: bool,
    /// One fixed camera; objective is cycle + visibility + foreground.
    pub known_pose: bool,
}

impl Default for LossFlags {
    fn default() -> Self {
        LossFlags {
            enable_vis: true,
            restrict_to_mask: true,
            known_pose: false,
        }
    }
}

/// Which three numbers the rotation part of a camera gradient refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum RotationParam {
    /// The Euler angles `r`.
    #[default]
    Euler,
    /// A left-multiplied small rotation `Rz(ω3)Ry(ω2)Rx(ω1)·R` at `ω = 0`.
    Local,
}

impl RotationParam {
    pub fn frame(&self, cam: &Camera) -> CameraFrame {
        match self {
            RotationParam::Euler => CameraFrame::euler(cam),
            RotationParam::Local => CameraFrame::local(cam),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub weights: LossWeights,
    pub flags: LossFlags,
    pub lambda_div: f64,
    pub margin: f64,
    pub gamma: f64,
    pub rotation: RotationParam,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            weights: LossWeights::default(),
            flags: LossFlags::default(),
            lambda_div: 0.1,
            margin: 0.0,
            gamma: 1.0,
            rotation: RotationParam::Euler,
        }
    }
}

/// `phi` and its jacobian evaluated once for every active pixel.
#[derive(Debug, Clone)]
pub struct PhiField {
    pub width: usize,
    /// Active pixel indices in raster order.
    pub pixels: Vec<usize>,
    pub points: Vec<Vec3>,
    pub jacobians: Vec<Matrix3<f64>>,
    pub smooth: Vec<bool>,
}

impl PhiField {
    pub fn compute(template: &TemplateShape, c: &SurfaceMap, mask: &Mask, restrict_to_mask: bool) -> Self {
        let pixels: Vec<usize> = if restrict_to_mask {
            mask.fg_indices()
        } else {
            (0..c.len()).collect()
        };
        let mut points = Vec::with_capacity(pixels.len());
        let mut jacobians = Vec::with_capacity(pixels.len());
        let mut smooth = Vec::with_capacity(pixels.len());
        for &p in &pixels {
            let (sp, j) = template.phi_with_jacobian(&c.dirs[p]);
            points.push(sp.position);
            jacobians.push(j.matrix);
            smooth.push(j.smooth);
        }
        PhiField {
            width: c.width,
            pixels,
            points,
            jacobians,
            smooth,
        }
    }

    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }
}

/// A per-pixel term under one camera.
#[derive(Debug, Clone)]
pub struct PixelTerm {
    pub value: f64,
    /// Gradient with respect to each pixel direction (full image, tangent).
    pub dirs_grad: Vec<Vec3>,
    /// Gradient with respect to `(s, tx, ty, θ1, θ2, θ3)`.
    pub cam_grad: [f64; 6],
    /// True when there were no active pixels.
    pub empty: bool,
    /// Active pixels whose reprojection fell outside the image (visibility only).
    pub offscreen: usize,
}

impl PixelTerm {
    fn zero(n: usize) -> Self {
        PixelTerm {
            value: 0.0,
            dirs_grad: vec![Vec3::zeros(); n],
            cam_grad: [0.0; 6],
            empty: true,
            offscreen: 0,
        }
    }
}

fn add_row(dst: &mut [f64; 6], row: &nalgebra::SMatrix<f64, 1, 6>, k: f64) {
    for c in 0..6 {
        dst[c] += k * row[c];
    }
}

/// Mean squared reprojection error `‖π(φ(C[p])) − p‖²` over the active pixels.
pub fn cyc_term(field: &PhiField, frame: &CameraFrame, n_pixels: usize) -> PixelTerm {
    let mut out = PixelTerm::zero(n_pixels);
    if field.is_empty() {
        return out;
    }
    out.empty = false;
    let inv = 1.0 / field.len() as f64;
    let mut sum = 0.0;
    for (k, &p) in field.pixels.iter().enumerate() {
        let pt = &field.points[k];
        let (pix, _) = frame.project(pt);
        let (cx, cy) = pixel_center(p, field.width);
        let rx = pix.x - cx;
        let ry = pix.y - cy;
        sum += rx * rx + ry * ry;
        let j = frame.jacobians(pt);
        let g = j.dpix_dp.row(0) * (2.0 * rx * inv) + j.dpix_dp.row(1) * (2.0 * ry * inv);
        out.dirs_grad[p] = (g * field.jacobians[k]).transpose();
        add_row(&mut out.cam_grad, &j.dpix_dcam.row(0).into_owned(), 2.0 * rx * inv);
        add_row(&mut out.cam_grad, &j.dpix_dcam.row(1).into_owned(), 2.0 * ry * inv);
    }
    out.value = sum * inv;
    out
}

/// Mean hinge `max(0, z_p − D(p̄) + margin)` over the active pixels, with `D`
/// held fixed (its spatial slope at `p̄` is still differentiated).
pub fn vis_term(field: &PhiField, frame: &CameraFrame, depth: &DepthMap, margin: f64, n_pixels: usize) -> PixelTerm {
    let mut out = PixelTerm::zero(n_pixels);
    if field.is_empty() {
        return out;
    }
    out.empty = false;
    let Some(fill) = depth.max_finite() else {
        // Nothing rendered: visibility is undefined everywhere.
        out.offscreen = field.len();
        return out;
    };
    let inv = 1.0 / field.len() as f64;
    let mut sum = 0.0;
    for (k, &p) in field.pixels.iter().enumerate() {
        let pt = &field.points[k];
        let (pix, z) = frame.project(pt);
        let Some(d) = depth.sample_bilinear(pix.x, pix.y, fill) else {
            out.offscreen += 1;
            continue;
        };
        let h = z - d.value + margin;
        if h <= 0.0 {
            continue;
        }
        sum += h;
        let j = frame.jacobians(pt);
        let g: RowVector3<f64> = (j.ddepth_dp - j.dpix_dp.row(0) * d.ddx - j.dpix_dp.row(1) * d.ddy) * inv;
        out.dirs_grad[p] = (g * field.jacobians[k]).transpose();
        add_row(&mut out.cam_grad, &j.ddepth_dcam, inv);
        add_row(&mut out.cam_grad, &j.dpix_dcam.row(0).into_owned(), -d.ddx * inv);
        add_row(&mut out.cam_grad, &j.dpix_dcam.row(1).into_owned(), -d.ddy * inv);
    }
    if out.offscreen > 0 {
        log::debug!("{} pixels reprojected off-raster in visibility term", out.offscreen);
    }
    out.value = sum * inv;
    out
}

pub fn loss_cyc(c: &SurfaceMap, mask: &Mask, cam: &Camera, template: &TemplateShape) -> PixelTerm {
    let field = PhiField::compute(template, c, mask, true);
    cyc_term(&field, &cam.frame(), c.len())
}

pub fn loss_vis(c: &SurfaceMap, mask: &Mask, cam: &Camera, template: &TemplateShape, depth: &DepthMap, margin: f64) -> PixelTerm {
    let field = PhiField::compute(template, c, mask, true);
    vis_term(&field, &cam.frame(), depth, margin, c.len())
}

/// Mean squared difference between soft silhouette and mask, and its
/// gradient with respect to the camera parameters the silhouette was
/// differentiated against.
pub fn loss_mask(alpha: &SilhouetteMap, mask: &Mask) -> (f64, [f64; 6]) {
    let n = alpha.alpha.len();
    let inv = 1.0 / n as f64;
    let mut value = 0.0;
    let mut grad = [0.0; 6];
    for i in 0..n {
        let r = alpha.alpha[i] - mask.fg[i];
        value += r * r;
        if !alpha.grad.is_empty() {
            for c in 0..6 {
                grad[c] += 2.0 * r * inv * alpha.grad[i][c];
            }
        }
    }
    (value * inv, grad)
}

/// Mean binary cross-entropy between clamped probabilities and the mask.
/// The gradient is zero where the clamp is active.
pub fn loss_fg(fg_prob: &[f64], mask: &Mask) -> (f64, Vec<f64>) {
    let n = fg_prob.len();
    let inv = 1.0 / n as f64;
    let mut value = 0.0;
    let mut grad = vec![0.0; n];
    for i in 0..n {
        let raw = fg_prob[i];
        let p = raw.clamp(FG_CLAMP, 1.0 - FG_CLAMP);
        let m = mask.fg[i];
        value -= m * p.ln() + (1.0 - m) * (1.0 - p).ln();
        if raw > FG_CLAMP && raw < 1.0 - FG_CLAMP {
            grad[i] = (-m / p + (1.0 - m) / (1.0 - p)) * inv;
        }
    }
    (value * inv, grad)
}

#[derive(Debug, Clone)]
pub struct DivTerm {
    pub value: f64,
    pub entropy: f64,
    pub spread: f64,
    pub logit_grad: Vec<f64>,
    /// Per hypothesis, with respect to the rotation parameters of that frame.
    pub rot_grad: Vec<[f64; 3]>,
}

/// `Σ c log c − λ Σ_{i≠j} dist(R_i, R_j)` over ordered pairs.
pub fn div_term(logits: &[f64], frames: &[CameraFrame], lambda: f64) -> DivTerm {
    let n = logits.len();
    let c = softmax(logits);
    let entropy: f64 = c.iter().map(|&x| if x > 0.0 { x * x.ln() } else { 0.0 }).sum();
    let logit_grad = c
        .iter()
        .map(|&x| if x > 0.0 { x * (x.ln() - entropy) } else { 0.0 })
        .collect();
    let mut spread = 0.0;
    let mut rot_grad = vec![[0.0; 3]; n];
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            spread += geodesic_between(&frames[i].rot, &frames[j].rot);
            // Each ordered pair (i, j) and (j, i) depends on R_i.
            let g = geodesic_grad(&frames[i].rot, &frames[j].rot, &frames[i].drot);
            for k in 0..3 {
                rot_grad[i][k] -= 2.0 * lambda * g[k];
            }
        }
    }
    DivTerm {
        value: entropy - lambda * spread,
        entropy,
        spread,
        logit_grad,
        rot_grad,
    }
}

pub fn loss_div(h: &HypothesisSet, lambda: f64) -> DivTerm {
    let frames: Vec<CameraFrame> = h.cameras.iter().map(CameraFrame::euler).collect();
    div_term(&h.logits, &frames, lambda)
}

/// Scalar parts and gradients of the total objective.
#[derive(Debug, Clone)]
pub struct LossBreakdown {
    /// Probability-weighted over hypotheses (unweighted by loss weights).
    pub cyc: f64,
    pub vis: f64,
    pub mask: f64,
    pub div: f64,
    pub fg: f64,
    pub total: f64,
    pub per_hypothesis: Vec<HypothesisLoss>,
    pub dirs_grad: Vec<Vec3>,
    pub fg_grad: Vec<f64>,
    pub cam_grad: Vec<[f64; 6]>,
    pub logit_grad: Vec<f64>,
    pub empty_foreground: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HypothesisLoss {
    pub cyc: f64,
    pub vis: f64,
    pub mask: f64,
}

/// Scalars only, for logs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossScalars {
    pub cyc: f64,
    pub vis: f64,
    pub mask: f64,
    pub div: f64,
    pub fg: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn scalars(&self) -> LossScalars {
        LossScalars {
            cyc: self.cyc,
            vis: self.vis,
            mask: self.mask,
            div: self.div,
            fg: self.fg,
            total: self.total,
        }
    }

    /// Weighted recombination of the stored parts.
    pub fn recombined(&self, w: &LossWeights) -> f64 {
        w.div * self.div + w.cyc * self.cyc + w.vis * self.vis + w.mask * self.mask + w.fg * self.fg
    }
}

/// The complete objective for one image.
///
/// Camera gradients refer to `config.rotation`. In known-pose mode the
/// single camera is fixed and the mask and diversity terms are dropped.
pub fn loss_total(
    c: &SurfaceMap,
    mask: &Mask,
    template: &TemplateShape,
    h: &HypothesisSet,
    config: &LossConfig,
) -> Result<LossBreakdown> {
    if config.flags.known_pose && h.len() != 1 {
        return Err(CsmError::InvalidArgument(format!(
            "known-pose objective takes exactly one camera, got {}",
            h.len()
        )));
    }
    let field = PhiField::compute(template, c, mask, config.flags.restrict_to_mask);
    let frames: Vec<CameraFrame> = h.cameras.iter().map(|cam| config.rotation.frame(cam)).collect();
    let depths: Vec<Option<DepthMap>> = frames
        .iter()
        .map(|f| config.flags.enable_vis.then(|| rasterize_frame(template, f, mask.height, mask.width).depth_map()))
        .collect();
    loss_total_with(c, mask, template, &field, h, &frames, &depths, config)
}

/// As [`loss_total`] with `phi`, camera frames and depth maps supplied.
#[allow(clippy::too_many_arguments)]
pub fn loss_total_with(
    c: &SurfaceMap,
    mask: &Mask,
    template: &TemplateShape,
    field: &PhiField,
    h: &HypothesisSet,
    frames: &[CameraFrame],
    depths: &[Option<DepthMap>],
    config: &LossConfig,
) -> Result<LossBreakdown> {
    let w = &config.weights;
    let flags = &config.flags;
    let n = c.len();
    let nh = h.len();
    let probs = if flags.known_pose { vec![1.0] } else { softmax(&h.logits) };

    let mut dirs_grad = vec![Vec3::zeros(); n];
    let mut cam_grad = vec![[0.0; 6]; nh];
    let mut per_hypothesis = Vec::with_capacity(nh);
    let mut weighted = Vec::with_capacity(nh);
    let (mut cyc, mut vis, mut msk) = (0.0, 0.0, 0.0);

    let mut empty = field.is_empty();
    for i in 0..nh {
        let frame = &frames[i];
        let ct = cyc_term(field, frame, n);
        let vt = match (&depths[i], flags.enable_vis) {
            (Some(d), true) => Some(vis_term(field, frame, d, config.margin, n)),
            _ => None,
        };
        let (mt, mg) = if flags.known_pose {
            (0.0, [0.0; 6])
        } else {
            let sil = soft_silhouette_frame(template, frame, mask.height, mask.width, config.gamma, true);
            loss_mask(&sil, mask)
        };
        let vt_value = vt.as_ref().map_or(0.0, |v| v.value);
        let pi = probs[i];
        for p in 0..n {
            let mut g = ct.dirs_grad[p] * w.cyc;
            if let Some(v) = &vt {
                g += v.dirs_grad[p] * w.vis;
            }
            dirs_grad[p] += g * pi;
        }
        for k in 0..6 {
            let mut g = w.cyc * ct.cam_grad[k] + w.mask * mg[k];
            if let Some(v) = &vt {
                g += w.vis * v.cam_grad[k];
            }
            cam_grad[i][k] = pi * g;
        }
        empty |= ct.empty;
        cyc += pi * ct.value;
        vis += pi * vt_value;
        msk += pi * mt;
        per_hypothesis.push(HypothesisLoss {
            cyc: ct.value,
            vis: vt_value,
            mask: mt,
        });
        weighted.push(w.cyc * ct.value + w.vis * vt_value + w.mask * mt);
    }

    let (fg, fg_grad_raw) = loss_fg(&c.fg_prob, mask);
    let fg_grad = fg_grad_raw.into_iter().map(|g| g * w.fg).collect();

    let mut logit_grad = vec![0.0; nh];
    let mut div = 0.0;
    if !flags.known_pose {
        let expected: f64 = probs.iter().zip(&weighted).map(|(p, l)| p * l).sum();
        for k in 0..nh {
            logit_grad[k] = probs[k] * (weighted[k] - expected);
        }
        let dt = div_term(&h.logits, frames, config.lambda_div);
        div = dt.value;
        for k in 0..nh {
            logit_grad[k] += w.div * dt.logit_grad[k];
            for j in 0..3 {
                cam_grad[k][3 + j] += w.div * dt.rot_grad[k][j];
            }
        }
    }

    let total = w.div * div + w.cyc * cyc + w.vis * vis + w.mask * msk + w.fg * fg;
    Ok(LossBreakdown {
        cyc,
        vis,
        mask: msk,
        div,
        fg,
        total,
        per_hypothesis,
        dirs_grad,
        fg_grad,
        cam_grad,
        logit_grad,
        empty_foreground: empty,
    })
}
