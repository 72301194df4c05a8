//! Category template shape and its spherical parametrization.
//!
//! A [`TemplateShape`] is a closed genus-0 triangle mesh whose vertices also
//! carry a unit-sphere coordinate. The sphere coordinates triangulate the
//! unit sphere with the same connectivity as the mesh, so a direction `n` on
//! the sphere identifies a spherical triangle and barycentric weights inside
//! it, and the same weights applied to the mesh vertices give the point
//! `phi(n)` on the surface.
//!
//! Barycentrics are computed by central (gnomonic) projection of `n` onto the
//! plane of the face's three sphere coordinates. That is the unique choice for
//! which a ray through the origin keeps constant weights, so `phi` is
//! homogeneous of degree zero in `n` and agrees with the screen-space
//! barycentrics produced by the rasterizer under orthographic projection.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{Matrix3, RowVector3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{CsmError, Result};

pub type Vec3 = Vector3<f64>;

/// Lower/upper clamp applied to both uv components.
pub const UV_EPS: f64 = 1e-6;

/// Edge-plane tolerance (sine of the angular distance) for containment tests.
const CONTAIN_EPS: f64 = 1e-12;

/// Queries closer than this (sine of angular distance) to a face edge are
/// flagged as non-smooth by [`TemplateShape::phi_jacobian`].
pub const NONSMOOTH_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UvCoord {
    pub u: f64,
    pub v: f64,
}

impl UvCoord {
    /// Builds a coordinate, clamping both components into `[UV_EPS, 1 - UV_EPS]`.
    pub fn new(u: f64, v: f64) -> Self {
        UvCoord {
            u: u.clamp(UV_EPS, 1.0 - UV_EPS),
            v: v.clamp(UV_EPS, 1.0 - UV_EPS),
        }
    }
}

/// Latitude/longitude style map from the unit square to the unit sphere.
///
/// Azimuth `a = 2πu − π`, polar angle `b = πv`,
/// `n = (cos a sin b, sin a sin b, cos b)`.
pub fn uv_to_sphere(uv: UvCoord) -> Vec3 {
    let uv = UvCoord::new(uv.u, uv.v);
    let a = 2.0 * std::f64::consts::PI * uv.u - std::f64::consts::PI;
    let b = std::f64::consts::PI * uv.v;
    Vec3::new(a.cos() * b.sin(), a.sin() * b.sin(), b.cos())
}

/// Inverse of [`uv_to_sphere`]. At the poles `u` is canonicalized to 0.5.
pub fn sphere_to_uv(n: &Vec3) -> UvCoord {
    let n = n.normalize();
    let b = n.z.clamp(-1.0, 1.0).acos();
    let planar = n.x.hypot(n.y);
    let u = if planar < 1e-12 {
        0.5
    } else {
        (n.y.atan2(n.x) + std::f64::consts::PI) / (2.0 * std::f64::consts::PI)
    };
    UvCoord::new(u, b / std::f64::consts::PI)
}

/// Face index plus barycentric weights.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FaceLocation {
    pub face: usize,
    pub bary: [f64; 3],
}

/// A point on the template surface.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurfacePoint {
    pub face: usize,
    pub bary: [f64; 3],
    pub position: Vec3,
}

/// Derivative of `phi` with respect to the sphere direction.
#[derive(Debug, Clone, Copy)]
pub struct PhiJacobian {
    pub matrix: Matrix3<f64>,
    /// False when the query lies within [`NONSMOOTH_EPS`] of a face edge.
    pub smooth: bool,
}

/// Radial profile applied to the icosphere when generating a template.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "profile", rename_all = "lowercase")]
pub enum RadialProfile {
    Sphere,
    /// Axis-aligned scaling `diag(sx, sy, sz)`.
    Ellipsoid { axes: [f64; 3] },
    /// `r(n) = 1 + a·n_x + b·n_x·n_z`, star-shaped when `|a| + |b| < 1`.
    Blob { a: f64, b: f64 },
}

impl RadialProfile {
    /// Parses a profile id (`sphere`, `ellipsoid`, `blob`) and its parameter list.
    pub fn from_id(id: &str, params: &[f64]) -> Result<Self> {
        let profile = match id {
            "sphere" => {
                if !params.is_empty() {
                    return Err(CsmError::InvalidProfile(
                        "sphere takes no parameters".into(),
                    ));
                }
                RadialProfile::Sphere
            }
            "ellipsoid" => match params {
                [x, y, z] => RadialProfile::Ellipsoid { axes: [*x, *y, *z] },
                _ => {
                    return Err(CsmError::InvalidProfile(
                        "ellipsoid takes three axis scales".into(),
                    ))
                }
            },
            "blob" => match params {
                [a, b] => RadialProfile::Blob { a: *a, b: *b },
                _ => {
                    return Err(CsmError::InvalidProfile(
                        "blob takes two coefficients a, b".into(),
                    ))
                }
            },
            other => {
                return Err(CsmError::InvalidProfile(format!(
                    "unknown profile '{other}' (expected sphere, ellipsoid or blob)"
                )))
            }
        };
        profile.validate()?;
        Ok(profile)
    }

    pub fn id(&self) -> &'static str {
        match self {
            RadialProfile::Sphere => "sphere",
            RadialProfile::Ellipsoid { .. } => "ellipsoid",
            RadialProfile::Blob { .. } => "blob",
        }
    }

    pub fn params(&self) -> Vec<f64> {
        match *self {
            RadialProfile::Sphere => vec![],
            RadialProfile::Ellipsoid { axes } => axes.to_vec(),
            RadialProfile::Blob { a, b } => vec![a, b],
        }
    }

    fn validate(&self) -> Result<()> {
        match *self {
            RadialProfile::Sphere => Ok(()),
            RadialProfile::Ellipsoid { axes } => {
                if axes.iter().all(|s| s.is_finite() && *s > 0.0) {
                    Ok(())
                } else {
                    Err(CsmError::InvalidProfile(
                        "ellipsoid axes must be finite and positive".into(),
                    ))
                }
            }
            RadialProfile::Blob { a, b } => {
                if a.is_finite() && b.is_finite() && a.abs() + b.abs() < 1.0 {
                    Ok(())
                } else {
                    Err(CsmError::InvalidProfile(format!(
                        "blob requires |a| + |b| < 1 for a star-shaped surface, got a={a}, b={b}"
                    )))
                }
            }
        }
    }

    fn displace(&self, n: &Vec3) -> Vec3 {
        match *self {
            RadialProfile::Sphere => *n,
            RadialProfile::Ellipsoid { axes } => {
                Vec3::new(axes[0] * n.x, axes[1] * n.y, axes[2] * n.z)
            }
            RadialProfile::Blob { a, b } => n * (1.0 + a * n.x + b * n.x * n.z),
        }
    }
}

/// Precomputed per-face data used by point location.
#[derive(Debug, Clone)]
struct FaceFrame {
    /// `b×c`, `c×a`, `a×b` for sphere coordinates `(a, b, c)`.
    cross: [Vec3; 3],
    /// The same vectors normalized to unit length.
    unit: [Vec3; 3],
}

/// Cube-map lookup giving a nearby start face for the locate walk.
#[derive(Debug, Clone)]
struct StartGrid {
    res: usize,
    start: Vec<u32>,
}

impl StartGrid {
    fn cell(&self, n: &Vec3) -> usize {
        let (axis, neg, u, v) = cube_coords(n);
        let g = self.res as f64;
        let iu = (((u + 1.0) * 0.5 * g) as usize).min(self.res - 1);
        let iv = (((v + 1.0) * 0.5 * g) as usize).min(self.res - 1);
        ((2 * axis + usize::from(neg)) * self.res + iv) * self.res + iu
    }

    fn cell_center(res: usize, cell: usize) -> Vec3 {
        let iu = cell % res;
        let iv = (cell / res) % res;
        let side = cell / (res * res);
        let (axis, neg) = (side / 2, side % 2 == 1);
        let u = (iu as f64 + 0.5) / res as f64 * 2.0 - 1.0;
        let v = (iv as f64 + 0.5) / res as f64 * 2.0 - 1.0;
        let sign = if neg { -1.0 } else { 1.0 };
        let mut d = Vec3::zeros();
        d[axis] = sign;
        d[(axis + 1) % 3] = u;
        d[(axis + 2) % 3] = v;
        d.normalize()
    }
}

fn cube_coords(n: &Vec3) -> (usize, bool, f64, f64) {
    let ax = n.x.abs();
    let ay = n.y.abs();
    let az = n.z.abs();
    let axis = if ax >= ay && ax >= az {
        0
    } else if ay >= az {
        1
    } else {
        2
    };
    let m = n[axis].abs().max(f64::MIN_POSITIVE);
    (
        axis,
        n[axis] < 0.0,
        n[(axis + 1) % 3] / m,
        n[(axis + 2) % 3] / m,
    )
}

/// Template mesh `S` together with its spherical parametrization.
///
/// Immutable after construction; all queries take `&self`.
#[derive(Debug, Clone)]
pub struct TemplateShape {
    vertices: Vec<Vec3>,
    faces: Vec<[usize; 3]>,
    sphere_coords: Vec<Vec3>,
    frames: Vec<FaceFrame>,
    /// `neighbors[f][i]` is the face across the edge opposite corner `i`.
    neighbors: Vec<[usize; 3]>,
    /// Faces incident to each vertex, ascending.
    vertex_faces: Vec<Vec<usize>>,
    grid: StartGrid,
}

impl TemplateShape {
    /// Validates the mesh and builds the point-location structures.
    pub fn new(
        vertices: Vec<Vec3>,
        faces: Vec<[usize; 3]>,
        sphere_coords: Vec<Vec3>,
    ) -> Result<Self> {
        if vertices.len() != sphere_coords.len() {
            return Err(CsmError::CountMismatch {
                mesh: vertices.len(),
                sphere: sphere_coords.len(),
            });
        }
        if faces.is_empty() {
            return Err(CsmError::InvalidTemplate("mesh has no faces".into()));
        }
        let nv = vertices.len();
        for (fi, f) in faces.iter().enumerate() {
            if f.iter().any(|&i| i >= nv) {
                return Err(CsmError::InvalidTemplate(format!(
                    "face {fi} references a vertex out of range"
                )));
            }
            if f[0] == f[1] || f[1] == f[2] || f[0] == f[2] {
                return Err(CsmError::InvalidTemplate(format!(
                    "face {fi} repeats a vertex"
                )));
            }
        }
        for (i, s) in sphere_coords.iter().enumerate() {
            let norm = s.norm();
            if !norm.is_finite() || (norm - 1.0).abs() > 1e-6 {
                return Err(CsmError::NonUnitSphere { index: i, norm });
            }
        }
        if vertices.iter().any(|v| !v.iter().all(|c| c.is_finite())) {
            return Err(CsmError::InvalidTemplate("non-finite vertex".into()));
        }

        // Closed + consistently oriented: every directed edge appears once and
        // its reverse appears once.
        let mut directed: HashMap<(usize, usize), (usize, usize)> = HashMap::new();
        for (fi, f) in faces.iter().enumerate() {
            for k in 0..3 {
                let e = (f[(k + 1) % 3], f[(k + 2) % 3]);
                if directed.insert(e, (fi, k)).is_some() {
                    return Err(CsmError::InvalidTemplate(format!(
                        "edge ({}, {}) is used twice with the same orientation",
                        e.0, e.1
                    )));
                }
            }
        }
        let mut neighbors = vec![[usize::MAX; 3]; faces.len()];
        for (&(a, b), &(fi, k)) in &directed {
            match directed.get(&(b, a)) {
                Some(&(gj, _)) => neighbors[fi][k] = gj,
                None => return Err(CsmError::OpenMesh(a.min(b), a.max(b))),
            }
        }
        let edges = directed.len() / 2;
        let euler = nv as i64 - edges as i64 + faces.len() as i64;
        if euler != 2 {
            return Err(CsmError::InvalidTemplate(format!(
                "mesh is not genus 0 (Euler characteristic {euler})"
            )));
        }

        let mut frames = Vec::with_capacity(faces.len());
        let mut area = 0.0;
        for (fi, f) in faces.iter().enumerate() {
            let [a, b, c] = [sphere_coords[f[0]], sphere_coords[f[1]], sphere_coords[f[2]]];
            let det = a.dot(&b.cross(&c));
            if det <= 0.0 {
                return Err(CsmError::InvalidTemplate(format!(
                    "spherical face {fi} is degenerate or inverted"
                )));
            }
            area += spherical_triangle_area(&a, &b, &c);
            let cross = [b.cross(&c), c.cross(&a), a.cross(&b)];
            let unit = [cross[0].normalize(), cross[1].normalize(), cross[2].normalize()];
            frames.push(FaceFrame { cross, unit });
        }
        if (area - 4.0 * std::f64::consts::PI).abs() > 1e-6 {
            return Err(CsmError::InvalidTemplate(format!(
                "sphere coordinates do not tile the sphere (total area {area})"
            )));
        }

        let mut vertex_faces = vec![Vec::new(); nv];
        for (fi, f) in faces.iter().enumerate() {
            for &v in f {
                vertex_faces[v].push(fi);
            }
        }

        let mut shape = TemplateShape {
            vertices,
            faces,
            sphere_coords,
            frames,
            neighbors,
            vertex_faces,
            grid: StartGrid {
                res: 1,
                start: vec![],
            },
        };
        shape.grid = shape.build_grid();
        Ok(shape)
    }

    fn build_grid(&self) -> StartGrid {
        let res = ((self.faces.len() as f64 / 6.0).sqrt().ceil() as usize).clamp(1, 64);
        let cells = 6 * res * res;
        let mut start = Vec::with_capacity(cells);
        let mut prev = 0usize;
        for cell in 0..cells {
            let d = StartGrid::cell_center(res, cell);
            let f = self.walk(prev, &d).unwrap_or_else(|| self.scan(&d));
            start.push(f as u32);
            prev = f;
        }
        StartGrid { res, start }
    }

    pub fn vertices(&self) -> &[Vec3] {
        &self.vertices
    }

    pub fn faces(&self) -> &[[usize; 3]] {
        &self.faces
    }

    pub fn sphere_coords(&self) -> &[Vec3] {
        &self.sphere_coords
    }

    pub fn num_faces(&self) -> usize {
        self.faces.len()
    }

    /// Faces sharing an edge with `face`; entry `i` is across from corner `i`.
    pub fn face_neighbors(&self, face: usize) -> [usize; 3] {
        self.neighbors[face]
    }

    /// Radius of the origin-centered sphere enclosing all template vertices.
    pub fn bounding_radius(&self) -> f64 {
        self.vertices.iter().map(|v| v.norm()).fold(0.0, f64::max)
    }

    /// Signed sines of the angular distance from `n` to the three edge great
    /// circles of `face` (all non-negative iff `n` is inside).
    pub fn edge_sines(&self, face: usize, n: &Vec3) -> [f64; 3] {
        let u = &self.frames[face].unit;
        [u[0].dot(n), u[1].dot(n), u[2].dot(n)]
    }

    /// Whether the closed spherical triangle `face` contains `n`.
    pub fn face_contains(&self, face: usize, n: &Vec3) -> bool {
        self.edge_sines(face, n).iter().all(|&s| s >= -CONTAIN_EPS)
    }

    /// Lowest-index face containing `n`, by exhaustive scan.
    pub fn locate_exhaustive(&self, n: &Vec3) -> usize {
        self.scan(n)
    }

    fn scan(&self, n: &Vec3) -> usize {
        let mut best = (f64::NEG_INFINITY, 0usize);
        for f in 0..self.faces.len() {
            let s = self.edge_sines(f, n);
            let m = s[0].min(s[1]).min(s[2]);
            if m >= -CONTAIN_EPS {
                return f;
            }
            if m > best.0 {
                best = (m, f);
            }
        }
        best.1
    }

    /// Greedy walk across edges towards `n`. `None` if it fails to settle.
    fn walk(&self, start: usize, n: &Vec3) -> Option<usize> {
        let limit = 4 * (self.faces.len() as f64).sqrt() as usize + 64;
        let mut f = start;
        for _ in 0..limit {
            let s = self.edge_sines(f, n);
            let (k, m) = s
                .iter()
                .copied()
                .enumerate()
                .fold((0, f64::INFINITY), |acc, (i, v)| if v < acc.1 { (i, v) } else { acc });
            if m >= -CONTAIN_EPS {
                return Some(f);
            }
            f = self.neighbors[f][k];
        }
        None
    }

    /// Point location: the spherical triangle containing `n` and the gnomonic
    /// barycentric weights of `n` inside it. Points on shared edges or
    /// vertices resolve to the lowest face index.
    pub fn locate(&self, n: &Vec3) -> FaceLocation {
        let start = self.grid.start[self.grid.cell(n)] as usize;
        let found = self.walk(start, n).unwrap_or_else(|| self.scan(n));
        let face = self.lowest_containing(found, n);
        FaceLocation {
            face,
            bary: self.gnomonic_bary(face, n),
        }
    }

    fn lowest_containing(&self, face: usize, n: &Vec3) -> usize {
        if !self.face_contains(face, n) {
            return face;
        }
        let mut best = face;
        for &v in &self.faces[face] {
            for &g in &self.vertex_faces[v] {
                if g >= best {
                    break;
                }
                if self.face_contains(g, n) {
                    best = g;
                }
            }
        }
        best
    }

    /// Gnomonic barycentrics of `n` with respect to `face`; negatives are
    /// clamped to zero and the weights renormalized.
    pub fn gnomonic_bary(&self, face: usize, n: &Vec3) -> [f64; 3] {
        let c = &self.frames[face].cross;
        let lam = [c[0].dot(n), c[1].dot(n), c[2].dot(n)];
        let sum = lam[0] + lam[1] + lam[2];
        let mut w = [lam[0] / sum, lam[1] / sum, lam[2] / sum];
        if w.iter().any(|&x| x < 0.0) {
            for x in &mut w {
                *x = x.max(0.0);
            }
            let s = w[0] + w[1] + w[2];
            for x in &mut w {
                *x /= s;
            }
        }
        w
    }

    /// Barycentric combination of the vertices of `face`.
    pub fn interpolate(&self, face: usize, bary: &[f64; 3]) -> Vec3 {
        let f = &self.faces[face];
        self.vertices[f[0]] * bary[0] + self.vertices[f[1]] * bary[1] + self.vertices[f[2]] * bary[2]
    }

    /// Barycentric combination of the sphere coordinates of `face`, renormalized.
    pub fn interpolate_sphere(&self, face: usize, bary: &[f64; 3]) -> Vec3 {
        let f = &self.faces[face];
        (self.sphere_coords[f[0]] * bary[0]
            + self.sphere_coords[f[1]] * bary[1]
            + self.sphere_coords[f[2]] * bary[2])
            .normalize()
    }

    /// The surface map `phi`: sphere direction to template surface point.
    pub fn phi(&self, n: &Vec3) -> SurfacePoint {
        let loc = self.locate(n);
        SurfacePoint {
            face: loc.face,
            bary: loc.bary,
            position: self.interpolate(loc.face, &loc.bary),
        }
    }

    /// `phi` together with its jacobian, sharing one point location.
    pub fn phi_with_jacobian(&self, n: &Vec3) -> (SurfacePoint, PhiJacobian) {
        let loc = self.locate(n);
        let face = loc.face;
        let frame = &self.frames[face];
        let k = Matrix3::from_rows(&[
            frame.cross[0].transpose(),
            frame.cross[1].transpose(),
            frame.cross[2].transpose(),
        ]);
        let lam = k * n;
        let sum = lam.sum();
        let w = lam / sum;
        let ones_k: RowVector3<f64> = k.row(0) + k.row(1) + k.row(2);
        let dw = (k - w * ones_k) / sum;
        let f = &self.faces[face];
        let v = Matrix3::from_columns(&[self.vertices[f[0]], self.vertices[f[1]], self.vertices[f[2]]]);
        let nn = n.normalize();
        let tangent = Matrix3::identity() - nn * nn.transpose();
        let matrix = v * dw * tangent;
        let s = self.edge_sines(face, n);
        let smooth = s.iter().all(|&x| x > NONSMOOTH_EPS * n.norm());
        (
            SurfacePoint {
                face,
                bary: loc.bary,
                position: self.interpolate(face, &loc.bary),
            },
            PhiJacobian { matrix, smooth },
        )
    }

    /// `d phi / d n`, composed with the tangent projector at `n`.
    pub fn phi_jacobian(&self, n: &Vec3) -> PhiJacobian {
        self.phi_with_jacobian(n).1
    }
}

/// Solid angle of the spherical triangle `abc` (Van Oosterom–Strackee).
pub fn spherical_triangle_area(a: &Vec3, b: &Vec3, c: &Vec3) -> f64 {
    let num = a.dot(&b.cross(c)).abs();
    let den = 1.0 + a.dot(b) + b.dot(c) + c.dot(a);
    2.0 * num.atan2(den)
}

/// Icosahedron with vertices at both poles and two staggered rings of five.
fn icosahedron() -> (Vec<Vec3>, Vec<[usize; 3]>) {
    let mut v = vec![Vec3::new(0.0, 0.0, 1.0)];
    let z = 1.0 / 5f64.sqrt();
    let r = 2.0 / 5f64.sqrt();
    for k in 0..5 {
        let lon = (k as f64) * 2.0 * std::f64::consts::PI / 5.0;
        v.push(Vec3::new(r * lon.cos(), r * lon.sin(), z));
    }
    for k in 0..5 {
        let lon = (k as f64 + 0.5) * 2.0 * std::f64::consts::PI / 5.0;
        v.push(Vec3::new(r * lon.cos(), r * lon.sin(), -z));
    }
    v.push(Vec3::new(0.0, 0.0, -1.0));

    let mut f = Vec::with_capacity(20);
    for k in 0..5 {
        let u0 = 1 + k;
        let u1 = 1 + (k + 1) % 5;
        let l0 = 6 + k;
        let l1 = 6 + (k + 1) % 5;
        f.push([0, u0, u1]);
        f.push([u0, l0, u1]);
        f.push([u1, l0, l1]);
        f.push([11, l1, l0]);
    }
    orient_outward(&v, &mut f);
    (v, f)
}

fn orient_outward(v: &[Vec3], faces: &mut [[usize; 3]]) {
    for f in faces.iter_mut() {
        if v[f[0]].dot(&v[f[1]].cross(&v[f[2]])) < 0.0 {
            f.swap(1, 2);
        }
    }
}

fn subdivide(v: &mut Vec<Vec3>, faces: &[[usize; 3]]) -> Vec<[usize; 3]> {
    let mut cache: HashMap<(usize, usize), usize> = HashMap::new();
    let mut midpoint = |a: usize, b: usize, v: &mut Vec<Vec3>| -> usize {
        let key = (a.min(b), a.max(b));
        *cache.entry(key).or_insert_with(|| {
            v.push(((v[a] + v[b]) * 0.5).normalize());
            v.len() - 1
        })
    };
    let mut out = Vec::with_capacity(faces.len() * 4);
    for &[a, b, c] in faces {
        let ab = midpoint(a, b, v);
        let bc = midpoint(b, c, v);
        let ca = midpoint(c, a, v);
        out.push([a, ab, ca]);
        out.push([ab, b, bc]);
        out.push([ca, bc, c]);
        out.push([ab, bc, ca]);
    }
    out
}

/// Generates a template by radially displacing a subdivided icosphere.
///
/// Sphere coordinates are the undisplaced icosphere vertices.
pub fn make_icosphere_template(subdivisions: u32, profile: RadialProfile) -> Result<TemplateShape> {
    if subdivisions > 5 {
        return Err(CsmError::InvalidArgument(format!(
            "subdivisions must be in [0, 5], got {subdivisions}"
        )));
    }
    profile.validate()?;
    let (mut sphere, mut faces) = icosahedron();
    for _ in 0..subdivisions {
        faces = subdivide(&mut sphere, &faces);
    }
    let vertices = sphere.iter().map(|n| profile.displace(n)).collect();
    TemplateShape::new(vertices, faces, sphere)
}

/// Template generation parameters, as stored in scene manifests.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TemplateSpec {
    pub subdivisions: u32,
    #[serde(flatten)]
    pub profile: RadialProfile,
}

impl TemplateSpec {
    pub fn build(&self) -> Result<TemplateShape> {
        make_icosphere_template(self.subdivisions, self.profile)
    }
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| CsmError::io(path, e))
}

fn parse_f64(tok: Option<&str>, file: &str, line: usize) -> Result<f64> {
    let tok = tok.ok_or_else(|| CsmError::Parse {
        file: file.into(),
        line,
        msg: "missing coordinate".into(),
    })?;
    tok.parse::<f64>().map_err(|_| CsmError::Parse {
        file: file.into(),
        line,
        msg: format!("bad number '{tok}'"),
    })
}

/// Parses an OBJ triangle mesh (`v` and `f` records only).
pub fn parse_obj(text: &str, file: &str) -> Result<(Vec<Vec3>, Vec<[usize; 3]>)> {
    let mut verts = Vec::new();
    let mut faces = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let mut toks = raw.split_whitespace();
        match toks.next() {
            Some("v") => {
                let x = parse_f64(toks.next(), file, line)?;
                let y = parse_f64(toks.next(), file, line)?;
                let z = parse_f64(toks.next(), file, line)?;
                verts.push(Vec3::new(x, y, z));
            }
            Some("f") => {
                let idx: Vec<&str> = toks.collect();
                if idx.len() != 3 {
                    return Err(CsmError::NonTriangularFace { line });
                }
                let mut tri = [0usize; 3];
                for (k, t) in idx.iter().enumerate() {
                    // Accept `i`, `i/t`, `i/t/n` and `i//n`.
                    let head = t.split('/').next().unwrap_or("");
                    let one_based: usize = head.parse().map_err(|_| CsmError::Parse {
                        file: file.into(),
                        line,
                        msg: format!("bad face index '{t}'"),
                    })?;
                    if one_based == 0 {
                        return Err(CsmError::Parse {
                            file: file.into(),
                            line,
                            msg: "face indices are 1-based".into(),
                        });
                    }
                    tri[k] = one_based - 1;
                }
                faces.push(tri);
            }
            _ => {}
        }
    }
    Ok((verts, faces))
}

/// Parses a sphere sidecar: one `vs x y z` line per vertex.
pub fn parse_sphere(text: &str, file: &str) -> Result<Vec<Vec3>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let mut toks = raw.split_whitespace();
        match toks.next() {
            Some("vs") => {
                let x = parse_f64(toks.next(), file, line)?;
                let y = parse_f64(toks.next(), file, line)?;
                let z = parse_f64(toks.next(), file, line)?;
                let v = Vec3::new(x, y, z);
                let norm = v.norm();
                if (norm - 1.0).abs() > 1e-6 {
                    return Err(CsmError::NonUnitSphere {
                        index: out.len(),
                        norm,
                    });
                }
                out.push(v);
            }
            None => {}
            Some(t) if t.starts_with('#') => {}
            Some(t) => {
                return Err(CsmError::Parse {
                    file: file.into(),
                    line,
                    msg: format!("unexpected record '{t}'"),
                })
            }
        }
    }
    Ok(out)
}

/// Loads a template from an OBJ mesh and its sphere-coordinate sidecar.
pub fn load_template(mesh_path: &Path, sphere_path: &Path) -> Result<TemplateShape> {
    let (verts, faces) = parse_obj(&read_text(mesh_path)?, &mesh_path.display().to_string())?;
    let sphere = parse_sphere(&read_text(sphere_path)?, &sphere_path.display().to_string())?;
    TemplateShape::new(verts, faces, sphere)
}

/// OBJ text with coordinates at nine significant digits.
pub fn obj_string(template: &TemplateShape) -> String {
    let mut s = String::new();
    for v in template.vertices() {
        let _ = writeln!(s, "v {:.8e} {:.8e} {:.8e}", v.x, v.y, v.z);
    }
    for f in template.faces() {
        let _ = writeln!(s, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1);
    }
    s
}

pub fn sphere_string(template: &TemplateShape) -> String {
    let mut s = String::new();
    for v in template.sphere_coords() {
        let _ = writeln!(s, "vs {:.8e} {:.8e} {:.8e}", v.x, v.y, v.z);
    }
    s
}

pub fn save_template(template: &TemplateShape, mesh_path: &Path, sphere_path: &Path) -> Result<()> {
    std::fs::write(mesh_path, obj_string(template)).map_err(|e| CsmError::io(mesh_path, e))?;
    std::fs::write(sphere_path, sphere_string(template)).map_err(|e| CsmError::io(sphere_path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_dir(rng: &mut impl Rng) -> Vec3 {
        loop {
            let v = Vec3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            );
            let n = v.norm();
            if n > 1e-3 && n <= 1.0 {
                return v / n;
            }
        }
    }

    fn blob() -> TemplateShape {
        make_icosphere_template(3, RadialProfile::Blob { a: 0.3, b: 0.2 }).unwrap()
    }

    #[test]
    fn uv_known_values() {
        let n = uv_to_sphere(UvCoord::new(0.5, 0.5));
        assert!((n - Vec3::new(1.0, 0.0, 0.0)).norm() < 1e-12);
        let n = uv_to_sphere(UvCoord::new(0.75, 0.5));
        assert!((n - Vec3::new(0.0, 1.0, 0.0)).norm() < 1e-12);
        let n = uv_to_sphere(UvCoord::new(0.5, 0.0));
        assert!((n - Vec3::new(0.0, 0.0, 1.0)).norm() < 1e-5);
    }

    #[test]
    fn sphere_to_uv_known_values_and_pole_convention() {
        let uv = sphere_to_uv(&Vec3::new(1.0, 0.0, 0.0));
        assert!((uv.u - 0.5).abs() < 1e-12 && (uv.v - 0.5).abs() < 1e-12);
        let uv = sphere_to_uv(&Vec3::new(0.0, 0.0, -1.0));
        assert_eq!(uv.u, 0.5);
        assert_eq!(uv.v, 1.0 - UV_EPS);
    }

    #[test]
    fn uv_round_trip_sampled() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..10_000 {
            let uv = UvCoord::new(rng.random_range(0.01..0.99), rng.random_range(0.01..0.99));
            let back = sphere_to_uv(&uv_to_sphere(uv));
            assert!((back.u - uv.u).abs() < 1e-9 && (back.v - uv.v).abs() < 1e-9);
            let n = uv_to_sphere(uv);
            assert!((n.norm() - 1.0).abs() < 1e-12);
            assert!((uv_to_sphere(sphere_to_uv(&n)) - n).norm() < 1e-9);
        }
    }

    #[test]
    fn icosphere_counts_and_identity_profile() {
        let t = make_icosphere_template(3, RadialProfile::Sphere).unwrap();
        assert_eq!(t.vertices().len(), 642);
        assert_eq!(t.num_faces(), 1280);
        assert_eq!(t.vertices(), t.sphere_coords());
        for s in t.sphere_coords() {
            assert!((s.norm() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn ellipsoid_scales_vertices() {
        let t = make_icosphere_template(0, RadialProfile::Ellipsoid { axes: [2.0, 1.0, 1.0] }).unwrap();
        assert_eq!(t.vertices().len(), 12);
        let pole = t
            .sphere_coords()
            .iter()
            .position(|s| (s - Vec3::new(0.0, 0.0, 1.0)).norm() < 1e-12)
            .expect("north pole vertex");
        assert!((t.vertices()[pole] - Vec3::new(0.0, 0.0, 1.0)).norm() < 1e-15);
        let (near, _) = t
            .sphere_coords()
            .iter()
            .enumerate()
            .map(|(i, s)| (i, s.x))
            .fold((0, f64::MIN), |a, b| if b.1 > a.1 { b } else { a });
        let s = t.sphere_coords()[near];
        assert_eq!(t.vertices()[near], Vec3::new(2.0 * s.x, s.y, s.z));
    }

    #[test]
    fn blob_is_valid_and_rejects_non_star_shaped() {
        let t = blob();
        assert_eq!(t.vertices().len(), 642);
        assert!(RadialProfile::from_id("blob", &[0.6, 0.5]).is_err());
        assert!(RadialProfile::from_id("ellipsoid", &[1.0, -1.0, 1.0]).is_err());
        assert!(RadialProfile::from_id("cube", &[]).is_err());
        assert!(make_icosphere_template(6, RadialProfile::Sphere).is_err());
    }

    #[test]
    fn sphere_faces_tile_without_overlap() {
        let t = blob();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100_000 {
            let n = random_dir(&mut rng);
            let count = (0..t.num_faces())
                .filter(|&f| t.edge_sines(f, &n).iter().all(|&s| s > 1e-12))
                .count();
            let closed = (0..t.num_faces()).filter(|&f| t.face_contains(f, &n)).count();
            // Interior hits are unique; boundary hits are shared by neighbours.
            assert!(count <= 1 && closed >= 1);
            if count == 1 {
                assert_eq!(closed, 1);
            }
        }
    }

    #[test]
    fn locate_agrees_with_exhaustive_scan() {
        let t = blob();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100_000 {
            let n = random_dir(&mut rng);
            let loc = t.locate(&n);
            assert_eq!(loc.face, t.locate_exhaustive(&n));
            assert!(t.face_contains(loc.face, &n));
            let s: f64 = loc.bary.iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
            assert!(loc.bary.iter().all(|&w| w >= 0.0));
        }
    }

    #[test]
    fn locate_vertex_and_edge_midpoint() {
        let t = blob();
        for (vi, s) in t.sphere_coords().iter().enumerate().take(50) {
            let loc = t.locate(s);
            let f = t.faces()[loc.face];
            let k = f.iter().position(|&x| x == vi).expect("incident face");
            assert!((loc.bary[k] - 1.0).abs() < 1e-9);
        }
        for f in t.faces().iter().take(50) {
            let a = t.sphere_coords()[f[0]];
            let b = t.sphere_coords()[f[1]];
            let m = (a + b).normalize();
            let loc = t.locate(&m);
            let g = t.faces()[loc.face];
            let wa = loc.bary[g.iter().position(|&x| x == f[0]).unwrap()];
            let wb = loc.bary[g.iter().position(|&x| x == f[1]).unwrap()];
            assert!((wa - 0.5).abs() < 1e-6 && (wb - 0.5).abs() < 1e-6);
        }
    }

    #[test]
    fn phi_on_sphere_profile() {
        let t = make_icosphere_template(3, RadialProfile::Sphere).unwrap();
        for s in t.sphere_coords() {
            assert!((t.phi(s).position - s).norm() < 1e-12);
        }
        // Edge midpoints land on the chord midpoint, within chord error of n.
        for f in t.faces().iter().take(200) {
            let a = t.sphere_coords()[f[0]];
            let b = t.sphere_coords()[f[1]];
            let m = (a + b).normalize();
            let p = t.phi(&m).position;
            assert!((p - (a + b) * 0.5).norm() < 1e-9);
            let half = 0.5 * a.dot(&b).clamp(-1.0, 1.0).acos();
            assert!((p - m).norm() <= 1.0 - half.cos() + 1e-12);
        }
    }

    #[test]
    fn phi_ellipsoid_exact_at_vertices() {
        let t = make_icosphere_template(2, RadialProfile::Ellipsoid { axes: [2.0, 1.0, 1.0] }).unwrap();
        for s in t.sphere_coords() {
            let p = t.phi(s).position;
            assert!((p - Vec3::new(2.0 * s.x, s.y, s.z)).norm() < 1e-12);
        }
    }

    #[test]
    fn phi_matches_brute_force_barycentrics() {
        let t = blob();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..2000 {
            let n = random_dir(&mut rng);
            let f = t.locate_exhaustive(&n);
            // Independent route: solve n = Σ λ_i s_i directly, normalise λ.
            let fv = t.faces()[f];
            let m = Matrix3::from_columns(&[
                t.sphere_coords()[fv[0]],
                t.sphere_coords()[fv[1]],
                t.sphere_coords()[fv[2]],
            ]);
            let lam = m.lu().solve(&n).unwrap();
            let w = lam / lam.sum();
            let expect = t.vertices()[fv[0]] * w[0] + t.vertices()[fv[1]] * w[1] + t.vertices()[fv[2]] * w[2];
            assert!((t.phi(&n).position - expect).norm() < 1e-9);
        }
    }

    #[test]
    fn phi_continuous_across_edges() {
        let t = blob();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..1000 {
            let f = rng.random_range(0..t.num_faces());
            let k = rng.random_range(0..3);
            let fv = t.faces()[f];
            let a = t.sphere_coords()[fv[(k + 1) % 3]];
            let b = t.sphere_coords()[fv[(k + 2) % 3]];
            let s: f64 = rng.random_range(0.05..0.95);
            let on_edge = (a * s + b * (1.0 - s)).normalize();
            let normal = a.cross(&b).normalize();
            let left = t.phi(&(on_edge + normal * 1e-9).normalize()).position;
            let right = t.phi(&(on_edge - normal * 1e-9).normalize()).position;
            assert!((left - right).norm() < 1e-6);
        }
    }

    fn fd_jacobian(t: &TemplateShape, n: &Vec3, h: f64) -> Matrix3<f64> {
        let mut j = Matrix3::zeros();
        for k in 0..3 {
            let mut e = Vec3::zeros();
            e[k] = h;
            // phi is degree-0 homogeneous, so off-sphere evaluation is exact.
            let fp = t.phi(&(n + e)).position;
            let fm = t.phi(&(n - e)).position;
            j.set_column(k, &((fp - fm) / (2.0 * h)));
        }
        j
    }

    #[test]
    fn phi_jacobian_matches_finite_differences() {
        let t = blob();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut tested = 0;
        while tested < 100 {
            let n = random_dir(&mut rng);
            let jac = t.phi_jacobian(&n);
            let s = t.edge_sines(t.locate(&n).face, &n);
            if !jac.smooth || s.iter().any(|&x| x < 1e-4) {
                continue;
            }
            let fd = fd_jacobian(&t, &n, 1e-5);
            let rel = (jac.matrix - fd).norm() / jac.matrix.norm().max(1e-12);
            assert!(rel <= 1e-4, "rel err {rel}");
            assert!((jac.matrix * n).norm() < 1e-9);
            tested += 1;
        }
    }

    #[test]
    fn phi_jacobian_sphere_profile_is_near_tangent_projector() {
        let t = make_icosphere_template(3, RadialProfile::Sphere).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        // Piecewise-linear phi deviates from the identity map by the chord
        // error, so compare against I - n nᵀ at that scale.
        for _ in 0..200 {
            let n = random_dir(&mut rng);
            let j = t.phi_jacobian(&n).matrix;
            let proj = Matrix3::identity() - n * n.transpose();
            assert!((j - proj).norm() < 0.25, "{}", (j - proj).norm());
            assert!((j * n).norm() < 1e-9);
        }
    }

    #[test]
    fn jacobian_flags_boundary_queries() {
        let t = blob();
        let f = t.faces()[0];
        let a = t.sphere_coords()[f[0]];
        let b = t.sphere_coords()[f[1]];
        let on_edge = (a + b).normalize();
        assert!(!t.phi_jacobian(&on_edge).smooth);
        let c = t.sphere_coords()[f[2]];
        assert!(t.phi_jacobian(&(a + b + c).normalize()).smooth);
    }

    #[test]
    fn obj_round_trip_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        let t = make_icosphere_template(2, RadialProfile::Sphere).unwrap();
        let mesh = dir.path().join("t.obj");
        let sph = dir.path().join("t.sph");
        save_template(&t, &mesh, &sph).unwrap();
        let loaded = load_template(&mesh, &sph).unwrap();
        assert_eq!(obj_string(&loaded), obj_string(&t));
        assert_eq!(sphere_string(&loaded), sphere_string(&t));

        let quad = "v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1 2 3 4\n";
        let err = parse_obj(quad, "q.obj").unwrap_err();
        assert!(err.to_string().contains("non-triangular face"));

        let bad = sphere_string(&t).replacen("vs ", "vs 0.5 0 0 #", 1);
        let bad = bad.lines().next().unwrap().split('#').next().unwrap().to_string();
        let err = parse_sphere(&bad, "s.sph").unwrap_err();
        assert!(err.to_string().contains("non-unit sphere coordinate"));

        let mut faces = t.faces().to_vec();
        faces.pop();
        let err = TemplateShape::new(t.vertices().to_vec(), faces, t.sphere_coords().to_vec()).unwrap_err();
        assert!(matches!(err, CsmError::OpenMesh(..)));

        let err = TemplateShape::new(t.vertices()[1..].to_vec(), t.faces().to_vec(), t.sphere_coords().to_vec())
            .unwrap_err();
        assert!(matches!(err, CsmError::CountMismatch { .. }));
    }
}
