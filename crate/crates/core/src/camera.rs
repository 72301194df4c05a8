//! Weak-perspective camera: `pixel = s·(R·P)_xy + t`, `depth = s·(R·P)_z`.
//!
//! Rotations use intrinsic Z·Y·X Euler angles, `R = Rz(r3)·Ry(r2)·Rx(r1)`.
//! Smaller depth is nearer to the viewer.

use nalgebra::{Matrix2x3, Matrix3, RowVector3, SMatrix, SVector, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{CsmError, Result};

pub type Vec3 = Vector3<f64>;
pub type Vec2 = Vector2<f64>;
pub type Matrix2x6 = SMatrix<f64, 2, 6>;
pub type RowVector6 = SMatrix<f64, 1, 6>;
pub type Vec6 = SVector<f64, 6>;

/// Camera parameters `(s, t, r)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub s: f64,
    pub t: [f64; 2],
    pub r: [f64; 3],
}

impl Default for Camera {
    fn default() -> Self {
        Camera {
            s: 1.0,
            t: [0.0, 0.0],
            r: [0.0, 0.0, 0.0],
        }
    }
}

impl Camera {
    pub fn new(s: f64, t: [f64; 2], r: [f64; 3]) -> Result<Self> {
        let cam = Camera { s, t, r };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = self.s.is_finite()
            && self.t.iter().all(|x| x.is_finite())
            && self.r.iter().all(|x| x.is_finite());
        if !finite || self.s <= 0.0 {
            return Err(CsmError::InvalidArgument(format!(
                "camera needs finite parameters and s > 0, got {self:?}"
            )));
        }
        Ok(())
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        rotation_matrix(&self.r)
    }

    /// Builds a camera from a rotation matrix, canonicalizing the angles.
    pub fn from_rotation(s: f64, t: [f64; 2], rot: &Matrix3<f64>) -> Self {
        Camera {
            s,
            t,
            r: euler_from_matrix(rot),
        }
    }

    /// Parameters flattened as `(s, tx, ty, r1, r2, r3)`.
    pub fn to_vec(&self) -> Vec6 {
        Vec6::new(self.s, self.t[0], self.t[1], self.r[0], self.r[1], self.r[2])
    }

    pub fn from_vec(v: &Vec6) -> Self {
        Camera {
            s: v[0],
            t: [v[1], v[2]],
            r: [v[3], v[4], v[5]],
        }
    }

    /// Same rotation with every angle wrapped into `(−π, π]`.
    pub fn canonicalized(&self) -> Self {
        Camera {
            r: euler_from_matrix(&self.rotation()),
            ..*self
        }
    }

    pub fn project(&self, p: &Vec3) -> (Vec2, f64) {
        self.frame().project(p)
    }

    pub fn frame(&self) -> CameraFrame {
        CameraFrame::euler(self)
    }
}

pub fn rot_x(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c)
}

pub fn rot_y(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
}

pub fn rot_z(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

fn drot_x(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(0.0, 0.0, 0.0, 0.0, -s, -c, 0.0, c, -s)
}

fn drot_y(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(-s, 0.0, c, 0.0, 0.0, 0.0, -c, 0.0, -s)
}

fn drot_z(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(-s, -c, 0.0, c, -s, 0.0, 0.0, 0.0, 0.0)
}

/// `Rz(r[2]) · Ry(r[1]) · Rx(r[0])`.
pub fn rotation_matrix(r: &[f64; 3]) -> Matrix3<f64> {
    rot_z(r[2]) * rot_y(r[1]) * rot_x(r[0])
}

/// Partial derivatives of [`rotation_matrix`] with respect to each angle.
pub fn rotation_derivatives(r: &[f64; 3]) -> [Matrix3<f64>; 3] {
    let (rx, ry, rz) = (rot_x(r[0]), rot_y(r[1]), rot_z(r[2]));
    [
        rz * ry * drot_x(r[0]),
        rz * drot_y(r[1]) * rx,
        drot_z(r[2]) * ry * rx,
    ]
}

/// Wraps an angle into `(−π, π]`.
pub fn wrap_angle(a: f64) -> f64 {
    let two_pi = 2.0 * std::f64::consts::PI;
    let mut w = a.rem_euclid(two_pi);
    if w > std::f64::consts::PI {
        w -= two_pi;
    }
    w
}

/// Z·Y·X Euler angles of a rotation matrix, each in `(−π, π]`.
///
/// At gimbal lock (`|r2| = π/2`) the X angle is set to zero.
pub fn euler_from_matrix(m: &Matrix3<f64>) -> [f64; 3] {
    let sy = (-m[(2, 0)]).clamp(-1.0, 1.0);
    let r2 = sy.asin();
    let cy = m[(2, 1)].hypot(m[(2, 2)]);
    let (r1, r3) = if cy > 1e-12 {
        (m[(2, 1)].atan2(m[(2, 2)]), m[(1, 0)].atan2(m[(0, 0)]))
    } else {
        // With r1 = 0, R = Rz(r3)·Ry(±π/2) and column 1 is (−sin r3, cos r3, 0).
        (0.0, (-m[(0, 1)]).atan2(m[(1, 1)]))
    };
    [wrap_angle(r1), wrap_angle(r2), wrap_angle(r3)]
}

/// Angle of the relative rotation `Raᵀ·Rb`, in `[0, π]`.
pub fn geodesic_between(ra: &Matrix3<f64>, rb: &Matrix3<f64>) -> f64 {
    let tr = (ra.transpose() * rb).trace();
    ((tr - 1.0) * 0.5).clamp(-1.0, 1.0).acos()
}

pub fn geodesic_distance(ra: &[f64; 3], rb: &[f64; 3]) -> f64 {
    geodesic_between(&rotation_matrix(ra), &rotation_matrix(rb))
}

/// Gradient of [`geodesic_between`] with respect to three parameters of
/// `Ra`, given `∂Ra/∂θ_k`. Zero where the distance is 0 or π (non-smooth).
pub fn geodesic_grad(ra: &Matrix3<f64>, rb: &Matrix3<f64>, dra: &[Matrix3<f64>; 3]) -> [f64; 3] {
    let x = ((ra.transpose() * rb).trace() - 1.0) * 0.5;
    let sx = 1.0 - x * x;
    if sx <= 1e-14 {
        return [0.0; 3];
    }
    let k = -0.5 / sx.sqrt();
    let mut g = [0.0; 3];
    for (gk, d) in g.iter_mut().zip(dra) {
        *gk = k * (d.transpose() * rb).trace();
    }
    g
}

/// Deterministic, widely spread rotations: azimuths at even steps around
/// the vertical (y) axis. For `n ≥ 4` every other hypothesis is also
/// tilted by 30° about x.
pub fn spread_rotations(n: usize) -> Result<Vec<[f64; 3]>> {
    if n == 0 || n > 24 {
        return Err(CsmError::InvalidArgument(format!(
            "spread_rotations supports 1..=24 hypotheses, got {n}"
        )));
    }
    let tilt = 30f64.to_radians();
    Ok((0..n)
        .map(|i| {
            let az = 2.0 * std::f64::consts::PI * i as f64 / n as f64;
            let el = if n >= 4 && i % 2 == 1 { tilt } else { 0.0 };
            euler_from_matrix(&(rot_x(el) * rot_y(az)))
        })
        .collect())
}

fn skew(v: &Vec3) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Jacobians of one projection.
#[derive(Debug, Clone, Copy)]
pub struct ProjectJacobians {
    pub dpix_dp: Matrix2x3<f64>,
    pub ddepth_dp: RowVector3<f64>,
    /// Columns `(s, tx, ty, θ1, θ2, θ3)`.
    pub dpix_dcam: Matrix2x6,
    pub ddepth_dcam: RowVector6,
}

/// A camera with its rotation and rotation derivatives precomputed.
///
/// The three rotation parameters are either the Euler angles themselves or a
/// left-multiplied infinitesimal rotation `Rz(ω3)Ry(ω2)Rx(ω1)·R` at `ω = 0`;
/// the second is free of gimbal lock and is what the fitter optimizes.
#[derive(Debug, Clone, Copy)]
pub struct CameraFrame {
    pub s: f64,
    pub t: Vec2,
    pub rot: Matrix3<f64>,
    pub drot: [Matrix3<f64>; 3],
}

impl CameraFrame {
    pub fn euler(cam: &Camera) -> Self {
        CameraFrame {
            s: cam.s,
            t: Vec2::new(cam.t[0], cam.t[1]),
            rot: cam.rotation(),
            drot: rotation_derivatives(&cam.r),
        }
    }

    pub fn local(cam: &Camera) -> Self {
        let rot = cam.rotation();
        let drot = [
            skew(&Vec3::x()) * rot,
            skew(&Vec3::y()) * rot,
            skew(&Vec3::z()) * rot,
        ];
        CameraFrame {
            s: cam.s,
            t: Vec2::new(cam.t[0], cam.t[1]),
            rot,
            drot,
        }
    }

    pub fn project(&self, p: &Vec3) -> (Vec2, f64) {
        let q = self.rot * p;
        (Vec2::new(self.s * q.x + self.t.x, self.s * q.y + self.t.y), self.s * q.z)
    }

    pub fn jacobians(&self, p: &Vec3) -> ProjectJacobians {
        let q = self.rot * p;
        let sr = self.rot * self.s;
        let dpix_dp = sr.fixed_view::<2, 3>(0, 0).into_owned();
        let ddepth_dp = sr.fixed_view::<1, 3>(2, 0).into_owned();
        let mut dpix_dcam = Matrix2x6::zeros();
        let mut ddepth_dcam = RowVector6::zeros();
        dpix_dcam[(0, 0)] = q.x;
        dpix_dcam[(1, 0)] = q.y;
        ddepth_dcam[0] = q.z;
        dpix_dcam[(0, 1)] = 1.0;
        dpix_dcam[(1, 2)] = 1.0;
        for k in 0..3 {
            let dq = self.drot[k] * p * self.s;
            dpix_dcam[(0, 3 + k)] = dq.x;
            dpix_dcam[(1, 3 + k)] = dq.y;
            ddepth_dcam[3 + k] = dq.z;
        }
        ProjectJacobians {
            dpix_dp,
            ddepth_dp,
            dpix_dcam,
            ddepth_dcam,
        }
    }
}

pub fn project(cam: &Camera, p: &Vec3) -> (Vec2, f64) {
    cam.project(p)
}

pub fn project_jacobians(cam: &Camera, p: &Vec3) -> ProjectJacobians {
    cam.frame().jacobians(p)
}

/// Softmax with max subtraction.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|x| x / z).collect()
}

/// `N_c` camera hypotheses with their logits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HypothesisSet {
    pub cameras: Vec<Camera>,
    pub logits: Vec<f64>,
}

impl HypothesisSet {
    pub fn new(cameras: Vec<Camera>, logits: Vec<f64>) -> Result<Self> {
        if cameras.is_empty() || cameras.len() != logits.len() {
            return Err(CsmError::InvalidArgument(format!(
                "hypothesis set needs matching non-empty cameras/logits ({} vs {})",
                cameras.len(),
                logits.len()
            )));
        }
        Ok(HypothesisSet { cameras, logits })
    }

    pub fn uniform(cameras: Vec<Camera>) -> Self {
        let logits = vec![0.0; cameras.len()];
        HypothesisSet { cameras, logits }
    }

    pub fn len(&self) -> usize {
        self.cameras.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cameras.is_empty()
    }

    pub fn probs(&self) -> Vec<f64> {
        softmax(&self.logits)
    }

    /// Index of the most probable hypothesis; ties go to the lowest index.
    pub fn best_index(&self) -> usize {
        let p = self.probs();
        let mut best = 0;
        for (i, &x) in p.iter().enumerate() {
            if x > p[best] {
                best = i;
            }
        }
        best
    }
}

pub fn select_camera(h: &HypothesisSet) -> Camera {
    h.cameras[h.best_index()]
}

/// JSON form of one hypothesis: camera fields plus its logit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HypothesisRecord {
    pub s: f64,
    pub t: [f64; 2],
    pub r: [f64; 3],
    pub logit: f64,
}

impl HypothesisSet {
    pub fn to_records(&self) -> Vec<HypothesisRecord> {
        self.cameras
            .iter()
            .zip(&self.logits)
            .map(|(c, &logit)| HypothesisRecord {
                s: c.s,
                t: c.t,
                r: c.r,
                logit,
            })
            .collect()
    }

    pub fn from_records(records: &[HypothesisRecord]) -> Result<Self> {
        let cameras = records
            .iter()
            .map(|r| Camera::new(r.s, r.t, r.r))
            .collect::<Result<Vec<_>>>()?;
        HypothesisSet::new(cameras, records.iter().map(|r| r.logit).collect())
    }
}
