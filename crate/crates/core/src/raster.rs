//! Software rendering of the template: z-buffered depth, face ids and
//! barycentrics, soft silhouettes with analytic camera gradients, and
//! ground-truth surface-direction images.
//!
//! Pixel `(ix, iy)` has its center at `(ix + 0.5, iy + 0.5)`, x to the right,
//! y downward; buffers are row-major (`iy * width + ix`).

use nalgebra::Vector2;

use crate::camera::{Camera, CameraFrame, Matrix2x6};
use crate::surface_map::{Mask, SurfaceMap, Vec3};
use crate::template::TemplateShape;

type Vec2 = Vector2<f64>;

/// Label for pixels not covered by any face.
pub const NO_FACE: u32 = u32::MAX;

/// Soft-silhouette contributions vanish below `d / gamma = -SOFT_CUTOFF`.
pub const SOFT_CUTOFF: f64 = 9.0;
/// Width of the smooth fade-out just above the cutoff.
const SOFT_TAPER: f64 = 2.0;

const DEGENERATE_AREA: f64 = 1e-12;

#[derive(Debug, Clone, Copy)]
pub struct ProjectedVertex {
    pub pos: Vec2,
    pub depth: f64,
}

pub fn project_vertices(template: &TemplateShape, frame: &CameraFrame) -> Vec<ProjectedVertex> {
    template
        .vertices()
        .iter()
        .map(|v| {
            let (pos, depth) = frame.project(v);
            ProjectedVertex { pos, depth }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub width: usize,
    pub height: usize,
    /// Camera-frame depth; `+inf` on background.
    pub depth: Vec<f64>,
}

/// Bilinear sample of a depth map and its spatial gradient.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DepthSample {
    pub value: f64,
    pub ddx: f64,
    pub ddy: f64,
}

impl DepthMap {
    pub fn max_finite(&self) -> Option<f64> {
        self.depth
            .iter()
            .copied()
            .filter(|d| d.is_finite())
            .fold(None, |m, d| Some(m.map_or(d, |m: f64| m.max(d))))
    }

    /// Bilinear interpolation between pixel centers; infinite neighbours are
    /// replaced by `fill` (normally [`DepthMap::max_finite`]). Returns `None`
    /// outside `[0, width) × [0, height)`.
    pub fn sample_bilinear(&self, x: f64, y: f64, fill: f64) -> Option<DepthSample> {
        if !(x >= 0.0 && y >= 0.0 && x < self.width as f64 && y < self.height as f64) {
            return None;
        }
        let u = x - 0.5;
        let v = y - 0.5;
        let i0 = u.floor();
        let j0 = v.floor();
        let fx = u - i0;
        let fy = v - j0;
        let clamp = |k: f64, n: usize| (k.max(0.0) as usize).min(n - 1);
        let xa = clamp(i0, self.width);
        let xb = clamp(i0 + 1.0, self.width);
        let ya = clamp(j0, self.height);
        let yb = clamp(j0 + 1.0, self.height);
        let at = |ix: usize, iy: usize| {
            let d = self.depth[iy * self.width + ix];
            if d.is_finite() {
                d
            } else {
                fill
            }
        };
        let (d00, d10, d01, d11) = (at(xa, ya), at(xb, ya), at(xa, yb), at(xb, yb));
        let top = d00 + (d10 - d00) * fx;
        let bottom = d01 + (d11 - d01) * fx;
        // Replicated borders have zero slope across the clamp.
        let gx = if xa == xb { 0.0 } else { 1.0 };
        let gy = if ya == yb { 0.0 } else { 1.0 };
        Some(DepthSample {
            value: top + (bottom - top) * fy,
            ddx: gx * ((d10 - d00) * (1.0 - fy) + (d11 - d01) * fy),
            ddy: gy * (bottom - top),
        })
    }
}

/// Hard rasterization result: front-most face and its screen barycentrics.
#[derive(Debug, Clone)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    pub depth: Vec<f64>,
    pub face: Vec<u32>,
    pub bary: Vec<[f64; 3]>,
}

impl Raster {
    pub fn depth_map(&self) -> DepthMap {
        DepthMap {
            width: self.width,
            height: self.height,
            depth: self.depth.clone(),
        }
    }

    pub fn coverage(&self) -> Mask {
        Mask {
            width: self.width,
            height: self.height,
            fg: self.face.iter().map(|&f| if f == NO_FACE { 0.0 } else { 1.0 }).collect(),
        }
    }
}

fn cross2(a: Vec2, b: Vec2) -> f64 {
    a.x * b.y - a.y * b.x
}

/// Screen barycentrics of `p` in triangle `abc`, or `None` when degenerate.
fn screen_bary(p: Vec2, a: Vec2, b: Vec2, c: Vec2) -> Option<[f64; 3]> {
    let area = cross2(b - a, c - a);
    if area.abs() < DEGENERATE_AREA {
        return None;
    }
    let w0 = cross2(c - b, p - b) / area;
    let w1 = cross2(a - c, p - c) / area;
    let w2 = cross2(b - a, p - a) / area;
    Some([w0, w1, w2])
}

/// Z-buffer rasterization with inclusive edges; depth ties go to the lower
/// face index so the result is independent of face order.
pub fn rasterize_frame(template: &TemplateShape, frame: &CameraFrame, height: usize, width: usize) -> Raster {
    let proj = project_vertices(template, frame);
    let n = width * height;
    let mut out = Raster {
        width,
        height,
        depth: vec![f64::INFINITY; n],
        face: vec![NO_FACE; n],
        bary: vec![[0.0; 3]; n],
    };
    for (fi, f) in template.faces().iter().enumerate() {
        let [a, b, c] = [proj[f[0]], proj[f[1]], proj[f[2]]];
        if cross2(b.pos - a.pos, c.pos - a.pos).abs() < DEGENERATE_AREA {
            continue;
        }
        let Some((x0, x1, y0, y1)) = pixel_box(&[a.pos, b.pos, c.pos], 0.0, width, height) else {
            continue;
        };
        for iy in y0..=y1 {
            for ix in x0..=x1 {
                let p = Vec2::new(ix as f64 + 0.5, iy as f64 + 0.5);
                let Some(w) = screen_bary(p, a.pos, b.pos, c.pos) else {
                    continue;
                };
                if w.iter().any(|&x| x < 0.0) {
                    continue;
                }
                let z = w[0] * a.depth + w[1] * b.depth + w[2] * c.depth;
                let idx = iy * width + ix;
                let better = z < out.depth[idx] || (z == out.depth[idx] && (fi as u32) < out.face[idx]);
                if better {
                    out.depth[idx] = z;
                    out.face[idx] = fi as u32;
                    out.bary[idx] = w;
                }
            }
        }
    }
    out
}

pub fn rasterize(template: &TemplateShape, cam: &Camera, height: usize, width: usize) -> Raster {
    rasterize_frame(template, &cam.frame(), height, width)
}

pub fn render_depth(template: &TemplateShape, cam: &Camera, height: usize, width: usize) -> DepthMap {
    rasterize(template, cam, height, width).depth_map()
}

/// Minimum rendered depth at an arbitrary image point (`+inf` if uncovered).
pub fn depth_at_point(template: &TemplateShape, cam: &Camera, x: f64, y: f64) -> f64 {
    let frame = cam.frame();
    let proj = project_vertices(template, &frame);
    let p = Vec2::new(x, y);
    let mut best = f64::INFINITY;
    for f in template.faces() {
        let [a, b, c] = [proj[f[0]], proj[f[1]], proj[f[2]]];
        if let Some(w) = screen_bary(p, a.pos, b.pos, c.pos) {
            if w.iter().all(|&x| x >= 0.0) {
                best = best.min(w[0] * a.depth + w[1] * b.depth + w[2] * c.depth);
            }
        }
    }
    best
}

/// Ground-truth surface map: interpolated sphere coordinates of the front
/// face at each covered pixel. Background pixels get `(0, 0, 1)` and
/// `fg_prob = 0`.
pub fn render_surface_directions(
    template: &TemplateShape,
    cam: &Camera,
    height: usize,
    width: usize,
) -> (SurfaceMap, Mask) {
    let r = rasterize(template, cam, height, width);
    let mask = r.coverage();
    let dirs = r
        .face
        .iter()
        .zip(&r.bary)
        .map(|(&f, w)| {
            if f == NO_FACE {
                Vec3::z()
            } else {
                template.interpolate_sphere(f as usize, w)
            }
        })
        .collect();
    let map = SurfaceMap {
        width,
        height,
        dirs,
        fg_prob: mask.fg.clone(),
    };
    (map, mask)
}

/// Inclusive pixel index range whose centers fall inside the bounding box of
/// `pts` grown by `margin`; `None` if it misses the image.
fn pixel_box(pts: &[Vec2; 3], margin: f64, width: usize, height: usize) -> Option<(usize, usize, usize, usize)> {
    let minx = pts[0].x.min(pts[1].x).min(pts[2].x) - margin;
    let maxx = pts[0].x.max(pts[1].x).max(pts[2].x) + margin;
    let miny = pts[0].y.min(pts[1].y).min(pts[2].y) - margin;
    let maxy = pts[0].y.max(pts[1].y).max(pts[2].y) + margin;
    if !(minx.is_finite() && maxx.is_finite() && miny.is_finite() && maxy.is_finite()) {
        return None;
    }
    let x0 = (minx - 0.5).ceil().max(0.0);
    let x1 = (maxx - 0.5).floor().min(width as f64 - 1.0);
    let y0 = (miny - 0.5).ceil().max(0.0);
    let y1 = (maxy - 0.5).floor().min(height as f64 - 1.0);
    if x0 > x1 || y0 > y1 {
        return None;
    }
    Some((x0 as usize, x1 as usize, y0 as usize, y1 as usize))
}

/// Signed distance from `p` to triangle `abc` (positive inside) and its
/// gradient with respect to the three corners.
pub fn signed_distance(p: Vec2, tri: &[Vec2; 3]) -> (f64, [Vec2; 3]) {
    let mut best = (f64::INFINITY, 0usize, 0.0, Vec2::zeros());
    for k in 0..3 {
        let a = tri[k];
        let b = tri[(k + 1) % 3];
        let e = b - a;
        let len2 = e.norm_squared();
        let t = if len2 > 0.0 {
            ((p - a).dot(&e) / len2).clamp(0.0, 1.0)
        } else {
            0.0
        };
        let r = p - (a + e * t);
        let d = r.norm();
        if d < best.0 {
            best = (d, k, t, r);
        }
    }
    let (dist, k, t, r) = best;
    let area = cross2(tri[1] - tri[0], tri[2] - tri[0]);
    let inside = area.abs() >= DEGENERATE_AREA && {
        let s = area.signum();
        (0..3).all(|i| s * cross2(tri[(i + 1) % 3] - tri[i], p - tri[i]) >= 0.0)
    };
    let sign = if inside { 1.0 } else { -1.0 };
    let mut grad = [Vec2::zeros(); 3];
    if dist > 0.0 {
        let rhat = r / dist;
        grad[k] = -rhat * ((1.0 - t) * sign);
        grad[(k + 1) % 3] = -rhat * (t * sign);
    }
    (sign * dist, grad)
}

/// Projected triangle prepared for repeated signed-distance queries.
struct SoftFace {
    a: [Vec2; 3],
    e: [Vec2; 3],
    inv_len2: [f64; 3],
    /// `orient / |e|`, turning edge cross products into signed line
    /// distances (positive on the inner side).
    line_scale: [f64; 3],
    /// Orientation sign; zero for degenerate triangles, which are never
    /// "inside".
    orient: f64,
    center: Vec2,
    radius: f64,
}

struct SoftDistance {
    /// Signed distance, positive inside.
    d: f64,
    dist: f64,
    sign: f64,
    edge: usize,
    t: f64,
    /// Unit vector from the closest point to the query.
    rx: f64,
    ry: f64,
}

impl SoftFace {
    fn new(tri: &[Vec2; 3]) -> Self {
        let e = [tri[1] - tri[0], tri[2] - tri[1], tri[0] - tri[2]];
        let inv_len2 = e.map(|v| {
            let l = v.norm_squared();
            if l > 0.0 {
                1.0 / l
            } else {
                0.0
            }
        });
        let area = cross2(e[0], tri[2] - tri[0]);
        let orient = if area.abs() >= DEGENERATE_AREA { area.signum() } else { 0.0 };
        let center = (tri[0] + tri[1] + tri[2]) / 3.0;
        let radius = tri.iter().map(|v| (v - center).norm()).fold(0.0, f64::max);
        let line_scale = inv_len2.map(|il2| orient * il2.sqrt());
        SoftFace {
            a: *tri,
            e,
            inv_len2,
            line_scale,
            orient,
            center,
            radius,
        }
    }

    /// Same result as [`signed_distance`], or `None` when the point lies
    /// outside by more than `reach`.
    #[inline]
    fn distance(&self, px: f64, py: f64, reach: f64) -> Option<SoftDistance> {
        let mut best = (f64::INFINITY, 0usize, 0.0, 0.0, 0.0);
        let mut inside = self.orient != 0.0;
        for k in 0..3 {
            let wx = px - self.a[k].x;
            let wy = py - self.a[k].y;
            let (ex, ey) = (self.e[k].x, self.e[k].y);
            let line = (ex * wy - ey * wx) * self.line_scale[k];
            if line < 0.0 {
                inside = false;
                // Beyond this edge's line by more than `reach`: the whole
                // triangle is at least that far away.
                if line < -reach {
                    return None;
                }
            }
            let t = ((wx * ex + wy * ey) * self.inv_len2[k]).clamp(0.0, 1.0);
            let rx = wx - ex * t;
            let ry = wy - ey * t;
            let d2 = rx * rx + ry * ry;
            if d2 < best.0 {
                best = (d2, k, t, rx, ry);
            }
        }
        let (d2, edge, t, rx, ry) = best;
        if !inside && d2 > reach * reach {
            return None;
        }
        let dist = d2.sqrt();
        let sign = if inside { 1.0 } else { -1.0 };
        let (rx, ry) = if dist > 0.0 { (rx / dist, ry / dist) } else { (0.0, 0.0) };
        Some(SoftDistance {
            d: sign * dist,
            dist,
            sign,
            edge,
            t,
            rx,
            ry,
        })
    }
}

/// `1 − σ(x)` and `σ(x)` sharing one exponential.
#[inline]
fn complement_sigmoid(x: f64) -> (f64, f64) {
    if x > 0.0 {
        let e = (-x).exp();
        let inv = 1.0 / (1.0 + e);
        (e * inv, inv)
    } else {
        let e = x.exp();
        let inv = 1.0 / (1.0 + e);
        (inv, e * inv)
    }
}

/// `softplus(x)` and `sigmoid(x)` sharing one exponential.
#[inline]
fn softplus_sigmoid(x: f64) -> (f64, f64) {
    if x > 0.0 {
        let e = (-x).exp();
        (x + e.ln_1p(), 1.0 / (1.0 + e))
    } else {
        let e = x.exp();
        (e.ln_1p(), e / (1.0 + e))
    }
}

#[cfg(test)]
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

#[cfg(test)]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Fade-out weight and its derivative in `x = d / gamma`.
fn taper(x: f64) -> (f64, f64) {
    let u = (x + SOFT_CUTOFF) / SOFT_TAPER;
    if u >= 1.0 {
        (1.0, 0.0)
    } else if u <= 0.0 {
        (0.0, 0.0)
    } else {
        (u * u * (3.0 - 2.0 * u), 6.0 * u * (1.0 - u) / SOFT_TAPER)
    }
}

/// Soft silhouette and, optionally, per-pixel gradients of alpha with respect
/// to the six camera parameters of the frame.
#[derive(Debug, Clone)]
pub struct SilhouetteMap {
    pub width: usize,
    pub height: usize,
    pub alpha: Vec<f64>,
    /// Empty when gradients were not requested.
    pub grad: Vec<[f64; 6]>,
}

impl SilhouetteMap {
    /// Binarizes at `alpha >= 0.5`.
    pub fn threshold(&self, level: f64) -> Mask {
        Mask {
            width: self.width,
            height: self.height,
            fg: self.alpha.iter().map(|&a| if a >= level { 1.0 } else { 0.0 }).collect(),
        }
    }
}

/// `alpha = 1 − Π_f (1 − σ(d_f / γ))`; faces further than `SOFT_CUTOFF·γ`
/// outside a pixel are skipped, with a smooth fade (an exponent on the
/// factor) just inside the cutoff.
pub fn soft_silhouette_frame(
    template: &TemplateShape,
    frame: &CameraFrame,
    height: usize,
    width: usize,
    gamma: f64,
    with_grad: bool,
) -> SilhouetteMap {
    assert!(gamma > 0.0, "gamma must be positive");
    let n = width * height;
    // Running product Π_f (1 − σ(d_f/γ))^taper, i.e. exp(−acc).
    let mut keep = vec![1.0f64; n];
    let mut dacc = if with_grad { vec![[0.0f64; 6]; n] } else { Vec::new() };
    let proj = project_vertices(template, frame);
    let jac: Vec<Matrix2x6> = if with_grad {
        template.vertices().iter().map(|v| frame.jacobians(v).dpix_dcam).collect()
    } else {
        Vec::new()
    };
    let reach = SOFT_CUTOFF * gamma;
    let inv_gamma = 1.0 / gamma;
    for f in template.faces() {
        let tri = [proj[f[0]].pos, proj[f[1]].pos, proj[f[2]].pos];
        let Some((x0, x1, y0, y1)) = pixel_box(&tri, reach, width, height) else {
            continue;
        };
        let face = SoftFace::new(&tri);
        let cull = (face.radius + reach).powi(2);
        for iy in y0..=y1 {
            let py = iy as f64 + 0.5;
            let dy = py - face.center.y;
            for ix in x0..=x1 {
                let px = ix as f64 + 0.5;
                let dx = px - face.center.x;
                if dx * dx + dy * dy > cull {
                    continue;
                }
                let Some(sd) = face.distance(px, py, reach) else {
                    continue;
                };
                let x = sd.d * inv_gamma;
                let (tw, dtw) = taper(x);
                if tw == 0.0 {
                    continue;
                }
                let idx = iy * width + ix;
                // d acc / dx = dtw·softplus(x) + tw·σ(x).
                let dacc_dx = if tw == 1.0 {
                    let (factor, sig) = complement_sigmoid(x);
                    keep[idx] *= factor;
                    sig
                } else {
                    let (sp, sig) = softplus_sigmoid(x);
                    keep[idx] *= (-tw * sp).exp();
                    dtw * sp + tw * sig
                };
                if with_grad && sd.dist > 0.0 {
                    // d(d)/d(corner) = -rhat * weight * sign for the two
                    // endpoints of the closest edge.
                    let dx = dacc_dx * inv_gamma;
                    let k = sd.edge;
                    let slot = &mut dacc[idx];
                    for (corner, wgt) in [(k, 1.0 - sd.t), ((k + 1) % 3, sd.t)] {
                        if wgt == 0.0 {
                            continue;
                        }
                        let c = -dx * wgt * sd.sign;
                        let gx = c * sd.rx;
                        let gy = c * sd.ry;
                        let j = &jac[f[corner]];
                        for q in 0..6 {
                            slot[q] += gx * j[(0, q)] + gy * j[(1, q)];
                        }
                    }
                }
            }
        }
    }
    let mut alpha = Vec::with_capacity(n);
    for (i, &e) in keep.iter().enumerate() {
        alpha.push(1.0 - e);
        if with_grad {
            for c in 0..6 {
                dacc[i][c] *= e;
            }
        }
    }
    SilhouetteMap {
        width,
        height,
        alpha,
        grad: dacc,
    }
}

/// Soft silhouette with gradients with respect to `(s, tx, ty, r1, r2, r3)`.
pub fn render_soft_silhouette(
    template: &TemplateShape,
    cam: &Camera,
    height: usize,
    width: usize,
    gamma: f64,
) -> SilhouetteMap {
    soft_silhouette_frame(template, &cam.frame(), height, width, gamma, true)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::Vec6;
    use crate::template::{make_icosphere_template, RadialProfile};
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn centered(template: &TemplateShape, size: usize, frac: f64, r: [f64; 3]) -> Camera {
        let s = frac * size as f64 / template.bounding_radius();
        Camera::new(s, [size as f64 / 2.0, size as f64 / 2.0], r).unwrap()
    }

    #[test]
    fn center_depth_of_unit_sphere() {
        let t = make_icosphere_template(4, RadialProfile::Sphere).unwrap();
        let w = 64;
        let s = w as f64 / 4.0;
        // Put the view axis through a pixel center.
        let cam = Camera::new(s, [32.5, 32.5], [0.0; 3]).unwrap();
        let d = render_depth(&t, &cam, w, w);
        let center = d.depth[32 * w + 32];
        // Chord error at subdiv 4 bounds how far the mesh sits inside the sphere.
        let chord = 1.0 - (0.5 * 0.0785f64).cos();
        assert!(center >= -s && center <= -s * (1.0 - chord) + 1e-9, "{center}");
    }

    #[test]
    fn empty_view() {
        let t = make_icosphere_template(2, RadialProfile::Sphere).unwrap();
        let cam = Camera::new(5.0, [1e4, 1e4], [0.0; 3]).unwrap();
        assert!(render_depth(&t, &cam, 32, 32).depth.iter().all(|d| d.is_infinite()));
    }

    #[test]
    fn depth_is_invariant_to_face_order() {
        let t = make_icosphere_template(3, RadialProfile::Blob { a: 0.3, b: 0.2 }).unwrap();
        let cam = centered(&t, 64, 0.3, [0.4, 0.8, -0.3]);
        let mut faces = t.faces().to_vec();
        faces.shuffle(&mut ChaCha8Rng::seed_from_u64(1));
        let shuffled = TemplateShape::new(t.vertices().to_vec(), faces, t.sphere_coords().to_vec()).unwrap();
        let a = render_depth(&t, &cam, 64, 64);
        let b = render_depth(&shuffled, &cam, 64, 64);
        assert_eq!(a, b);
    }

    #[test]
    fn surface_directions_hit_front_vertex() {
        let t = make_icosphere_template(3, RadialProfile::Sphere).unwrap();
        // Front vertex (minimum depth) is (0,0,-1); center the camera on it.
        let cam = Camera::new(20.0, [16.5, 16.5], [0.0; 3]).unwrap();
        let (map, mask) = render_surface_directions(&t, &cam, 33, 33);
        let idx = 16 * 33 + 16;
        assert!(mask.is_fg(idx));
        assert!((map.dirs[idx] - Vec3::new(0.0, 0.0, -1.0)).norm() < 1e-12);
    }

    #[test]
    fn soft_alpha_deep_inside_large_face() {
        let t = make_icosphere_template(0, RadialProfile::Sphere).unwrap();
        let cam = centered(&t, 64, 0.45, [0.1, 0.2, 0.3]);
        let sil = render_soft_silhouette(&t, &cam, 64, 64, 1.0);
        let r = rasterize(&t, &cam, 64, 64);
        // Pixel closest to the centroid of a front face.
        let proj = project_vertices(&t, &cam.frame());
        let fi = r.face[32 * 64 + 32] as usize;
        let f = t.faces()[fi];
        let c = (proj[f[0]].pos + proj[f[1]].pos + proj[f[2]].pos) / 3.0;
        let idx = (c.y.floor() as usize) * 64 + c.x.floor() as usize;
        assert!(sil.alpha[idx] >= 0.99, "{}", sil.alpha[idx]);
        assert!(sil.alpha.iter().all(|a| (0.0..=1.0).contains(a)));
    }

    #[test]
    fn soft_matches_hard_as_gamma_shrinks() {
        let t = make_icosphere_template(3, RadialProfile::Blob { a: 0.3, b: 0.2 }).unwrap();
        let cam = centered(&t, 64, 0.3, [0.2, 1.0, 0.1]);
        let hard = rasterize(&t, &cam, 64, 64).coverage();
        let sil = soft_silhouette_frame(&t, &cam.frame(), 64, 64, 1e-3, false);
        let soft = sil.threshold(0.5);
        let disagree = (0..hard.fg.len()).filter(|&i| hard.fg[i] != soft.fg[i]).count();
        assert!((disagree as f64) <= 0.01 * hard.fg.len() as f64);
    }

    #[test]
    fn soft_monotone_in_gamma_outside() {
        let t = make_icosphere_template(2, RadialProfile::Blob { a: 0.3, b: 0.2 }).unwrap();
        let cam = centered(&t, 48, 0.3, [0.3, -0.4, 0.2]);
        let hard = rasterize(&t, &cam, 48, 48).coverage();
        let mut prev = soft_silhouette_frame(&t, &cam.frame(), 48, 48, 0.25, false).alpha;
        for gamma in [0.5, 1.0, 2.0] {
            let cur = soft_silhouette_frame(&t, &cam.frame(), 48, 48, gamma, false).alpha;
            for i in 0..cur.len() {
                if !hard.is_fg(i) {
                    assert!(cur[i] >= prev[i] - 1e-15);
                }
            }
            prev = cur;
        }
    }

    #[test]
    fn soft_gradient_matches_finite_differences() {
        let t = make_icosphere_template(2, RadialProfile::Blob { a: 0.3, b: 0.2 }).unwrap();
        let cam = centered(&t, 48, 0.3, [0.3, 0.7, -0.2]);
        let sil = render_soft_silhouette(&t, &cam, 48, 48, 1.0);
        let v = cam.to_vec();
        // Σ alpha is nearly translation invariant for an object inside the
        // frame, so weight pixels by a position-dependent ramp as well.
        let ramp: Vec<f64> = (0..48 * 48).map(|i| 1.0 + (i % 48) as f64 / 48.0 + 0.5 * (i / 48) as f64 / 48.0).collect();
        for weights in [vec![1.0; 48 * 48], ramp] {
            let total = |c: &Camera| {
                let a = soft_silhouette_frame(&t, &c.frame(), 48, 48, 1.0, false).alpha;
                a.iter().zip(&weights).map(|(x, w)| x * w).sum::<f64>()
            };
            for k in 0..6 {
                let h = if (1..3).contains(&k) { 1e-3 } else { 1e-5 };
                let mut e = Vec6::zeros();
                e[k] = h;
                let fd = (total(&Camera::from_vec(&(v + e))) - total(&Camera::from_vec(&(v - e)))) / (2.0 * h);
                let an: f64 = sil.grad.iter().zip(&weights).map(|(g, w)| g[k] * w).sum();
                let scale = an.abs().max(fd.abs()).max(1.0);
                assert!((an - fd).abs() / scale <= 1e-2, "param {k}: analytic {an}, fd {fd}");
            }
        }
    }

    #[test]
    fn surface_mask_matches_limit_silhouette() {
        let t = make_icosphere_template(3, RadialProfile::Blob { a: 0.3, b: 0.2 }).unwrap();
        let cam = centered(&t, 64, 0.3, [0.0, 0.5, 0.0]);
        let (_, mask) = render_surface_directions(&t, &cam, 64, 64);
        let soft = soft_silhouette_frame(&t, &cam.frame(), 64, 64, 1e-4, false).threshold(0.5);
        assert!(mask.iou(&soft) >= 0.99);
    }

    #[test]
    fn signed_distance_gradient() {
        let tri = [Vec2::new(0.0, 0.0), Vec2::new(4.0, 0.0), Vec2::new(0.0, 3.0)];
        for p in [Vec2::new(1.0, 0.8), Vec2::new(5.0, -1.0), Vec2::new(2.0, -2.0), Vec2::new(-1.0, 1.5)] {
            let (_, g) = signed_distance(p, &tri);
            for k in 0..3 {
                for c in 0..2 {
                    let h = 1e-7;
                    let mut tp = tri;
                    let mut tm = tri;
                    tp[k][c] += h;
                    tm[k][c] -= h;
                    let fd = (signed_distance(p, &tp).0 - signed_distance(p, &tm).0) / (2.0 * h);
                    assert!((g[k][c] - fd).abs() < 1e-6, "{p:?} {k} {c}: {} vs {fd}", g[k][c]);
                }
            }
        }
        assert!(signed_distance(Vec2::new(1.0, 1.0), &tri).0 > 0.0);
        assert!(signed_distance(Vec2::new(-1.0, 1.0), &tri).0 < 0.0);
    }

    #[test]
    fn prepared_face_matches_reference_distance() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let mut tri = [Vec2::zeros(); 3];
            for v in &mut tri {
                *v = Vec2::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0));
            }
            if rng.random_bool(0.05) {
                tri[2] = tri[0] + (tri[1] - tri[0]) * 0.5;
            }
            let face = SoftFace::new(&tri);
            for _ in 0..20 {
                let p = Vec2::new(rng.random_range(-8.0..8.0), rng.random_range(-8.0..8.0));
                let (d, g) = signed_distance(p, &tri);
                match face.distance(p.x, p.y, 3.0) {
                    None => assert!(d < -3.0),
                    Some(sd) => {
                        assert!((sd.d - d).abs() < 1e-12);
                        let r = Vec2::new(sd.rx, sd.ry) * sd.sign;
                        let mut gf = [Vec2::zeros(); 3];
                        gf[sd.edge] -= r * (1.0 - sd.t);
                        gf[(sd.edge + 1) % 3] -= r * sd.t;
                        // Collinear corners make overlapping edges tie.
                        if face.orient != 0.0 {
                            for k in 0..3 {
                                assert!((gf[k] - g[k]).norm() < 1e-9, "{tri:?} {p:?}");
                            }
                        }
                    }
                }
            }
        }
        for x in [-30.0, -2.0, -1e-3, 0.0, 0.5, 40.0, 800.0] {
            let (sp, sg) = softplus_sigmoid(x);
            assert!((sp - softplus(x)).abs() < 1e-15 && (sg - sigmoid(x)).abs() < 1e-15);
            let (keep, sg) = complement_sigmoid(x);
            assert!((keep - (-softplus(x)).exp()).abs() < 1e-15 && (sg - sigmoid(x)).abs() < 1e-15);
        }
    }

    #[test]
    fn bilinear_depth_sampling() {
        let d = DepthMap {
            width: 2,
            height: 2,
            depth: vec![0.0, 1.0, 2.0, f64::INFINITY],
        };
        let fill = d.max_finite().unwrap();
        assert_eq!(fill, 2.0);
        let s = d.sample_bilinear(1.0, 1.0, fill).unwrap();
        assert!((s.value - 1.25).abs() < 1e-15);
        assert!((d.sample_bilinear(0.5, 0.5, fill).unwrap().value).abs() < 1e-15);
        assert!(d.sample_bilinear(-0.1, 1.0, fill).is_none());
        assert!(d.sample_bilinear(1.0, 2.0, fill).is_none());
    }
}
