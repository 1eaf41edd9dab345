//! Synthetic multi-view scenes with analytic ground truth.
//!
//! Pixel convention: pixel `(col, row)` of a camera has its centre at the
//! continuous image coordinate `(col, row)`. A sampling grid of `gh × gw`
//! cells laid over a `height × width` camera puts cell `(r, c)` at
//! `((c + 0.5) · width / gw − 0.5, (r + 0.5) · height / gh − 0.5)`, which is
//! the same align-corners-false convention used by [`crate::io::resize_bilinear`].
//!
//! Camera frame follows the usual vision convention: x right, y down, z forward.

use std::fs;
use std::path::Path;

use nalgebra::{Matrix3, Point3, Vector3};
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::io::{self, Rng, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("invalid camera: {0}")]
    InvalidCamera(String),
    #[error("invalid scene: {0}")]
    InvalidScene(String),
    #[error("unsatisfiable scene-set spec: {0}")]
    Unsatisfiable(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

/// Pinhole camera with a world-to-camera pose `x_cam = R · x_world + t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// Row-major world-to-camera rotation.
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
    pub width: usize,
    pub height: usize,
}

impl Camera {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
        width: usize,
        height: usize,
    ) -> Result<Self, SceneError> {
        let mut rows = [[0.0; 3]; 3];
        for (r, row) in rows.iter_mut().enumerate() {
            for (c, v) in row.iter_mut().enumerate() {
                *v = rotation[(r, c)];
            }
        }
        let cam = Self {
            fx,
            fy,
            cx,
            cy,
            rotation: rows,
            translation: [translation.x, translation.y, translation.z],
            width,
            height,
        };
        cam.validate()?;
        Ok(cam)
    }

    /// Camera at `eye` looking at `target` with world `up` pointing towards the top of the image.
    pub fn look_at(
        eye: Point3<f64>,
        target: Point3<f64>,
        up: Vector3<f64>,
        fov_deg: f64,
        width: usize,
        height: usize,
    ) -> Result<Self, SceneError> {
        let forward = (target - eye).normalize();
        let down = -up;
        let right = down.cross(&forward);
        if right.norm() < 1e-9 {
            return Err(SceneError::InvalidCamera("view direction parallel to up".into()));
        }
        let right = right.normalize();
        let ydir = forward.cross(&right);
        let rot = Matrix3::from_rows(&[right.transpose(), ydir.transpose(), forward.transpose()]);
        let t = -(rot * eye.coords);
        let f = (width as f64 / 2.0) / (fov_deg.to_radians() / 2.0).tan();
        Self::new(
            f,
            f,
            (width as f64 - 1.0) / 2.0,
            (height as f64 - 1.0) / 2.0,
            rot,
            t,
            width,
            height,
        )
    }

    pub fn validate(&self) -> Result<(), SceneError> {
        let r = self.rotation_matrix();
        let orth = (r * r.transpose() - Matrix3::identity()).abs().max();
        if orth > 1e-6 || (r.determinant() - 1.0).abs() > 1e-6 {
            return Err(SceneError::InvalidCamera("rotation is not a proper rotation".into()));
        }
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(SceneError::InvalidCamera("focal lengths must be positive".into()));
        }
        if self.width == 0 || self.height == 0 {
            return Err(SceneError::InvalidCamera("empty image".into()));
        }
        if !(0.0..self.width as f64).contains(&self.cx) || !(0.0..self.height as f64).contains(&self.cy) {
            return Err(SceneError::InvalidCamera("principal point outside the image".into()));
        }
        Ok(())
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        Matrix3::from_fn(|r, c| self.rotation[r][c])
    }

    pub fn translation_vector(&self) -> Vector3<f64> {
        Vector3::from(self.translation)
    }

    /// Camera centre in world coordinates, `−Rᵀ t`.
    pub fn center(&self) -> Point3<f64> {
        Point3::from(-(self.rotation_matrix().transpose() * self.translation_vector()))
    }

    /// Continuous pixel coordinate of the centre of grid cell `(row, col)`.
    pub fn grid_pixel(&self, row: usize, col: usize, grid_h: usize, grid_w: usize) -> (f64, f64) {
        let u = (col as f64 + 0.5) * self.width as f64 / grid_w as f64 - 0.5;
        let v = (row as f64 + 0.5) * self.height as f64 / grid_h as f64 - 0.5;
        (u, v)
    }

    /// Unit world-space direction of the ray through continuous pixel `(u, v)`.
    pub fn ray_direction(&self, u: f64, v: f64) -> Vector3<f64> {
        let d_cam = Vector3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0);
        (self.rotation_matrix().transpose() * d_cam).normalize()
    }

    /// Projects a world point; returns `(u, v, depth)` with depth along the optical axis.
    pub fn project(&self, p: &Point3<f64>) -> (f64, f64, f64) {
        let pc = self.rotation_matrix() * p.coords + self.translation_vector();
        (self.fx * pc.x / pc.z + self.cx, self.fy * pc.y / pc.z + self.cy, pc.z)
    }
}

/// Relative rotation angle between two cameras in degrees, in `[0, 180]`.
pub fn relative_rotation_deg(a: &Camera, b: &Camera) -> f64 {
    let rel = a.rotation_matrix() * b.rotation_matrix().transpose();
    let c = ((rel.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
    c.acos().to_degrees().clamp(0.0, 180.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Primitive {
    Sphere { center: [f64; 3], radius: f64, albedo: f64 },
    /// Axis-aligned box given by its centre and half extents.
    Cuboid { center: [f64; 3], half_extents: [f64; 3], albedo: f64 },
}

impl Primitive {
    /// Smallest ray parameter `t > eps` at which `origin + t·dir` hits the surface.
    pub fn intersect(&self, origin: &Point3<f64>, dir: &Vector3<f64>) -> Option<f64> {
        const EPS: f64 = 1e-9;
        match self {
            Primitive::Sphere { center, radius, .. } => {
                let oc = origin - Point3::from(*center);
                let b = oc.dot(dir);
                let c = oc.norm_squared() - radius * radius;
                let disc = b * b - c;
                if disc < 0.0 {
                    return None;
                }
                let s = disc.sqrt();
                let t0 = -b - s;
                let t1 = -b + s;
                if t0 > EPS {
                    Some(t0)
                } else if t1 > EPS {
                    Some(t1)
                } else {
                    None
                }
            }
            Primitive::Cuboid { center, half_extents, .. } => {
                let mut tmin = f64::NEG_INFINITY;
                let mut tmax = f64::INFINITY;
                for k in 0..3 {
                    let lo = center[k] - half_extents[k];
                    let hi = center[k] + half_extents[k];
                    if dir[k].abs() < 1e-15 {
                        if origin[k] < lo || origin[k] > hi {
                            return None;
                        }
                    } else {
                        let a = (lo - origin[k]) / dir[k];
                        let b = (hi - origin[k]) / dir[k];
                        tmin = tmin.max(a.min(b));
                        tmax = tmax.min(a.max(b));
                    }
                }
                if tmax < tmin {
                    None
                } else if tmin > EPS {
                    Some(tmin)
                } else if tmax > EPS {
                    Some(tmax)
                } else {
                    None
                }
            }
        }
    }

    pub fn albedo(&self) -> f64 {
        match self {
            Primitive::Sphere { albedo, .. } | Primitive::Cuboid { albedo, .. } => *albedo,
        }
    }

    pub fn bounding_radius_from(&self, origin: &Point3<f64>) -> f64 {
        match self {
            Primitive::Sphere { center, radius, .. } => (Point3::from(*center) - origin).norm() + radius,
            Primitive::Cuboid { center, half_extents, .. } => {
                (Point3::from(*center) - origin).norm() + Vector3::from(*half_extents).norm()
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub name: String,
    pub primitives: Vec<Primitive>,
    pub cameras: Vec<Camera>,
}

impl Scene {
    pub fn new(name: impl Into<String>, primitives: Vec<Primitive>, cameras: Vec<Camera>) -> Result<Self, SceneError> {
        let s = Self {
            name: name.into(),
            primitives,
            cameras,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<(), SceneError> {
        if self.primitives.is_empty() {
            return Err(SceneError::InvalidScene("no primitives".into()));
        }
        if self.cameras.len() < 2 {
            return Err(SceneError::InvalidScene("need at least two cameras".into()));
        }
        self.cameras.iter().try_for_each(Camera::validate)
    }

    /// Centroid of the primitive centres and the radius of the sphere around
    /// it that encloses every primitive.
    pub fn bounding_sphere(&self) -> (Point3<f64>, f64) {
        bounding_sphere(&self.primitives)
    }

    /// Nearest hit along a ray: `(t, primitive index)`.
    pub fn cast(&self, origin: &Point3<f64>, dir: &Vector3<f64>) -> Option<(f64, usize)> {
        self.primitives
            .iter()
            .enumerate()
            .filter_map(|(k, p)| p.intersect(origin, dir).map(|t| (t, k)))
            .min_by(|a, b| a.0.total_cmp(&b.0))
    }
}

/// Per-pixel world coordinates of one view; invalid pixels hold NaN.
#[derive(Debug, Clone, PartialEq)]
pub struct Pointmap {
    pub h: usize,
    pub w: usize,
    pub points: Vec<[f64; 3]>,
    pub valid: Vec<bool>,
}

impl Pointmap {
    pub fn from_points(h: usize, w: usize, points: Vec<[f64; 3]>) -> Self {
        assert_eq!(points.len(), h * w);
        let valid = points.iter().map(|p| p.iter().all(|v| v.is_finite())).collect();
        Self { h, w, points, valid }
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    pub fn to_grid(&self) -> io::Grid {
        io::Grid::new(self.h, self.w, 3, self.points.iter().flatten().copied().collect())
    }

    pub fn to_tensor(&self) -> Tensor {
        self.to_grid().to_tensor()
    }

    /// Accepts any `H × W × 3` tensor; non-finite entries mark invalid pixels.
    pub fn from_tensor(t: &Tensor) -> Result<Self, SceneError> {
        let g = io::Grid::from_tensor(t)?;
        if g.c != 3 {
            return Err(TensorError::InvalidShape(t.dims().to_vec()).into());
        }
        let points = g.data.chunks_exact(3).map(|c| {
            if c.iter().all(|v| v.is_finite()) {
                [c[0], c[1], c[2]]
            } else {
                [f64::NAN; 3]
            }
        });
        Ok(Self::from_points(g.h, g.w, points.collect()))
    }
}

/// Ray-casts view `cam_index` on an `res.0 × res.1` grid; nearest hit wins.
pub fn render_pointmap(scene: &Scene, cam_index: usize, res: (usize, usize)) -> Pointmap {
    let (h, w) = res;
    assert!(h >= 1 && w >= 1, "resolution must be at least 1x1");
    let cam = &scene.cameras[cam_index];
    let origin = cam.center();
    let mut points = Vec::with_capacity(h * w);
    for r in 0..h {
        for c in 0..w {
            let (u, v) = cam.grid_pixel(r, c, h, w);
            let dir = cam.ray_direction(u, v);
            points.push(match scene.cast(&origin, &dir) {
                Some((t, _)) => {
                    let p = origin + dir * t;
                    [p.x, p.y, p.z]
                }
                None => [f64::NAN; 3],
            });
        }
    }
    Pointmap::from_points(h, w, points)
}

/// Whether world point `p` is the first surface seen by `cam` along its ray.
pub fn is_visible(scene: &Scene, cam: &Camera, p: &Point3<f64>, tol: f64) -> bool {
    let origin = cam.center();
    let to_p = p - origin;
    let dist = to_p.norm();
    let (_, _, z) = cam.project(p);
    if z <= 0.0 {
        return false;
    }
    match scene.cast(&origin, &(to_p / dist)) {
        Some((t, _)) => (t - dist).abs() <= tol,
        None => false,
    }
}

/// Per-pixel Plücker line coordinates `(d, o × d)` with `d` the unit ray direction.
#[derive(Debug, Clone, PartialEq)]
pub struct PluckerGrid {
    pub h: usize,
    pub w: usize,
    pub values: Vec<[f64; 6]>,
}

impl PluckerGrid {
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_f64(vec![self.h, self.w, 6], self.values.iter().flatten().copied().collect())
            .expect("plucker shape")
    }
}

pub fn plucker_embedding(cam: &Camera, res: (usize, usize)) -> PluckerGrid {
    let (h, w) = res;
    let o = cam.center().coords;
    let mut values = Vec::with_capacity(h * w);
    for r in 0..h {
        for c in 0..w {
            let (u, v) = cam.grid_pixel(r, c, h, w);
            let d = cam.ray_direction(u, v);
            let m = o.cross(&d);
            values.push([d.x, d.y, d.z, m.x, m.y, m.z]);
        }
    }
    PluckerGrid { h, w, values }
}

/// Number of latent channels carried by [`surface_code`]; must be even.
pub const MAX_CODE_CHANNELS: usize = 16;

/// Position-dependent surface appearance used as the image content of a view.
///
/// Channels come in `(sin, cos)` pairs of fixed plane waves, so every code
/// has squared norm `channels / 2` and dot-product similarity ranks nearby
/// codes by Euclidean closeness. Wavelengths run geometrically from
/// `wavelength` down to `0.3 · wavelength`.
pub fn surface_code(p: &[f64; 3], channels: usize, wavelength: f64) -> Vec<f64> {
    assert!(channels % 2 == 0 && channels <= MAX_CODE_CHANNELS);
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    let pairs = channels / 2;
    let mut out = Vec::with_capacity(channels);
    for k in 0..pairs {
        // golden-spiral directions
        let z = 1.0 - (2.0 * k as f64 + 1.0) / pairs as f64;
        let r = (1.0 - z * z).sqrt();
        let phi = golden * k as f64;
        let dir = [r * phi.cos(), r * phi.sin(), z];
        let shrink = if pairs > 1 { 0.3f64.powf(k as f64 / (pairs - 1) as f64) } else { 1.0 };
        let omega = std::f64::consts::TAU / (wavelength * shrink);
        let phase = omega * (dir[0] * p[0] + dir[1] * p[1] + dir[2] * p[2]) + 0.7 * k as f64;
        out.push(phase.sin());
        out.push(phase.cos());
    }
    out
}

/// Parameters of a synthetic scene collection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSetSpec {
    pub scenes: usize,
    pub views: usize,
    /// Upper bound on the relative rotation between any two cameras of a scene.
    pub spread_deg: f64,
    /// Object size range in meters (sphere diameters and box edges).
    pub size_min: f64,
    pub size_max: f64,
    pub image_width: usize,
    pub image_height: usize,
    pub fov_deg: f64,
    pub name_prefix: String,
}

impl Default for SceneSetSpec {
    fn default() -> Self {
        Self {
            scenes: 1,
            views: 2,
            spread_deg: 120.0,
            size_min: 0.2,
            size_max: 1.0,
            image_width: 128,
            image_height: 128,
            fov_deg: 40.0,
            name_prefix: "scene".into(),
        }
    }
}

impl SceneSetSpec {
    /// Small objects rendered at 64×64, sized so that 16×16 token matching
    /// can resolve 2 cm.
    pub fn tiny() -> Self {
        Self { size_min: 0.04, size_max: 0.08, image_width: 64, image_height: 64, ..Self::default() }
    }
}

const UP: Vector3<f64> = Vector3::new(0.0, 0.0, 1.0);

fn uniform(rng: &mut Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

fn random_objects(rng: &mut Rng, spec: &SceneSetSpec) -> Vec<Primitive> {
    let (lo, hi) = (spec.size_min, spec.size_max);
    let diameter = uniform(rng, lo, hi);
    let mut prims = vec![Primitive::Sphere {
        center: [0.0, 0.0, diameter / 2.0],
        radius: diameter / 2.0,
        albedo: uniform(rng, 0.3, 0.9),
    }];
    // a box beside the sphere, tall enough to occlude it from some directions
    let e = [uniform(rng, lo, hi), uniform(rng, lo, hi), uniform(rng, lo, hi)];
    let ang = uniform(rng, 0.0, std::f64::consts::TAU);
    let dist = diameter / 2.0 + e[0].max(e[1]) / 2.0 + uniform(rng, 0.0, 0.3 * lo);
    prims.push(Primitive::Cuboid {
        center: [dist * ang.cos(), dist * ang.sin(), e[2] / 2.0],
        half_extents: [e[0] / 2.0, e[1] / 2.0, e[2] / 2.0],
        albedo: uniform(rng, 0.3, 0.9),
    });
    if rng.random::<f64>() < 0.5 {
        let r = uniform(rng, lo, hi) / 4.0;
        let a2 = ang + uniform(rng, 1.5, 4.5);
        let d2 = diameter / 2.0 + r + uniform(rng, 0.0, 0.2 * lo);
        prims.push(Primitive::Sphere {
            center: [d2 * a2.cos(), d2 * a2.sin(), r],
            radius: r,
            albedo: uniform(rng, 0.3, 0.9),
        });
    }
    prims
}

fn bounding_sphere(prims: &[Primitive]) -> (Point3<f64>, f64) {
    let mut c = Vector3::zeros();
    for p in prims {
        let cc = match p {
            Primitive::Sphere { center, .. } | Primitive::Cuboid { center, .. } => Vector3::from(*center),
        };
        c += cc;
    }
    let centroid = Point3::from(c / prims.len().max(1) as f64);
    let radius = prims.iter().map(|p| p.bounding_radius_from(&centroid)).fold(0.0, f64::max);
    (centroid, radius)
}

/// Cameras on a ring around the objects looking at their centroid; the first
/// two cameras span the scene's azimuth range and the rest fall inside it.
fn place_cameras(rng: &mut Rng, spec: &SceneSetSpec, prims: &[Primitive]) -> Result<Vec<Camera>, SceneError> {
    let (centroid, radius) = bounding_sphere(prims);
    let half_fov = (spec.fov_deg / 2.0).to_radians();
    let distance = 1.05 * radius / half_fov.sin();
    for _ in 0..200 {
        let az0 = uniform(rng, 0.0, 360.0);
        let span = spec.spread_deg * rng.random::<f64>().sqrt();
        let mut cams = Vec::with_capacity(spec.views);
        for v in 0..spec.views {
            let offset = match v {
                0 => 0.0,
                1 => span,
                _ => uniform(rng, 0.0, span),
            };
            let az = (az0 + offset).to_radians();
            let el = uniform(rng, 10.0, 35.0).to_radians();
            let dir = Vector3::new(el.cos() * az.cos(), el.cos() * az.sin(), el.sin());
            let eye = centroid + dir * distance;
            cams.push(Camera::look_at(
                eye,
                centroid,
                UP,
                spec.fov_deg,
                spec.image_width,
                spec.image_height,
            )?);
        }
        let ok = (0..cams.len())
            .all(|a| (a + 1..cams.len()).all(|b| relative_rotation_deg(&cams[a], &cams[b]) <= spec.spread_deg));
        if ok {
            return Ok(cams);
        }
    }
    Err(SceneError::Unsatisfiable(format!(
        "could not place {} cameras within {}°",
        spec.views, spec.spread_deg
    )))
}

/// Deterministic scene collection drawn from `rng`.
pub fn generate_scene_set(spec: &SceneSetSpec, rng: &mut Rng) -> Result<Vec<Scene>, SceneError> {
    if spec.views < 2 {
        return Err(SceneError::Unsatisfiable("need at least two views".into()));
    }
    if !(spec.spread_deg > 0.0 && spec.spread_deg <= 180.0) {
        return Err(SceneError::Unsatisfiable(format!("spread {}° outside (0, 180]", spec.spread_deg)));
    }
    if !(spec.size_min > 0.0 && spec.size_min <= spec.size_max) {
        return Err(SceneError::Unsatisfiable("object size range".into()));
    }
    if !(spec.fov_deg > 0.0 && spec.fov_deg < 180.0) {
        return Err(SceneError::Unsatisfiable("field of view".into()));
    }
    (0..spec.scenes)
        .map(|k| {
            let prims = random_objects(rng, spec);
            let cams = place_cameras(rng, spec, &prims)?;
            Scene::new(format!("{}_{:04}", spec.name_prefix, k), prims, cams)
        })
        .collect()
}

/// File name of the pointmap of `view` inside a scene directory.
pub fn pointmap_file(view: usize) -> String {
    format!("{view}.pointmap.camt")
}

pub fn plucker_file(view: usize) -> String {
    format!("{view}.plucker.camt")
}

/// Writes `<dir>/scene.json` plus per-view pointmap and Plücker TensorFiles.
pub fn write_scene_dir(dir: &Path, scene: &Scene, res: (usize, usize)) -> Result<(), SceneError> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("scene.json"), serde_json::to_string_pretty(scene)?)?;
    for v in 0..scene.cameras.len() {
        io::save_tensor(dir.join(pointmap_file(v)), &render_pointmap(scene, v, res).to_tensor())?;
        io::save_tensor(dir.join(plucker_file(v)), &plucker_embedding(&scene.cameras[v], res).to_tensor())?;
    }
    Ok(())
}

pub fn read_scene_json(dir: &Path) -> Result<Scene, SceneError> {
    let scene: Scene = serde_json::from_str(&fs::read_to_string(dir.join("scene.json"))?)?;
    scene.validate()?;
    Ok(scene)
}

/// Pointmaps of every view of a scene directory, in view order.
pub fn read_pointmaps(dir: &Path, views: usize) -> Result<Vec<Pointmap>, SceneError> {
    (0..views)
        .map(|v| Pointmap::from_tensor(&io::load_tensor(dir.join(pointmap_file(v)))?))
        .collect()
}
