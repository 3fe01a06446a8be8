//! Pinhole cameras, projection and the synthetic capture trajectories.

use nalgebra::{Matrix3, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{CustomOp, Shape, Tape, Var};
use crate::error::{Error, Result};
use crate::math::{arr3, mat3, mat3_to_array, v3};

/// Points at or closer than this camera-frame depth are treated as behind
/// the camera.
pub const MIN_DEPTH: f64 = 1e-6;

/// Focal length as a multiple of the image width when none is given.
pub const DEFAULT_FOCAL_FACTOR: f64 = 1.2;

/// World-to-camera pinhole model. Camera frame is x right, y down, z forward;
/// pixel centers sit at half-integer coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(into = "CameraRecord", try_from = "CameraRecord")]
pub struct PinholeCamera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// Row-major world-to-camera rotation.
    pub rotation: [f64; 9],
    pub translation: [f64; 3],
    pub width: u32,
    pub height: u32,
}

/// On-disk camera layout: 4x4 extrinsic, intrinsics and image size.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CameraRecord {
    pub extrinsic: [[f64; 4]; 4],
    /// `[fx, fy, cx, cy]` in pixels.
    pub intrinsics: [f64; 4],
    pub size: [u32; 2],
}

impl From<PinholeCamera> for CameraRecord {
    fn from(c: PinholeCamera) -> Self {
        CameraRecord {
            extrinsic: c.extrinsic(),
            intrinsics: [c.fx, c.fy, c.cx, c.cy],
            size: [c.width, c.height],
        }
    }
}

impl TryFrom<CameraRecord> for PinholeCamera {
    type Error = Error;

    fn try_from(r: CameraRecord) -> Result<Self> {
        let e = r.extrinsic;
        if e[3] != [0.0, 0.0, 0.0, 1.0] {
            return Err(Error::Invalid("extrinsic bottom row must be [0, 0, 0, 1]".into()));
        }
        let mut rotation = [0.0; 9];
        for i in 0..3 {
            for j in 0..3 {
                rotation[i * 3 + j] = e[i][j];
            }
        }
        let cam = PinholeCamera {
            fx: r.intrinsics[0],
            fy: r.intrinsics[1],
            cx: r.intrinsics[2],
            cy: r.intrinsics[3],
            rotation,
            translation: [e[0][3], e[1][3], e[2][3]],
            width: r.size[0],
            height: r.size[1],
        };
        cam.validate()?;
        Ok(cam)
    }
}

/// A projected point. `in_front` is false for depth <= [`MIN_DEPTH`], in which
/// case `pixel` is meaningless.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Projection {
    pub pixel: [f64; 2],
    pub depth: f64,
    pub in_front: bool,
}

impl PinholeCamera {
    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::Invalid(format!("focal lengths must be positive: {} {}", self.fx, self.fy)));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::Invalid("zero-area image".into()));
        }
        if !(self.cx >= 0.0 && self.cx < self.width as f64 && self.cy >= 0.0 && self.cy < self.height as f64) {
            return Err(Error::Invalid(format!("principal point ({}, {}) outside image", self.cx, self.cy)));
        }
        let r = mat3(&self.rotation);
        if (r.transpose() * r - Matrix3::identity()).abs().max() > 1e-9 {
            return Err(Error::Invalid("camera rotation is not orthonormal".into()));
        }
        if self.translation.iter().chain(&self.rotation).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("camera extrinsics".into()));
        }
        Ok(())
    }

    /// Default intrinsics: `fx = fy = 1.2 * width`, principal point at the center.
    pub fn default_intrinsics(width: u32, height: u32) -> [f64; 4] {
        let f = DEFAULT_FOCAL_FACTOR * width as f64;
        [f, f, width as f64 / 2.0, height as f64 / 2.0]
    }

    /// Camera at `eye` looking at `target` with world up `+y` and zero roll.
    pub fn look_at(eye: [f64; 3], target: [f64; 3], width: u32, height: u32) -> Result<Self> {
        let forward = v3(target) - v3(eye);
        if forward.norm() < 1e-12 {
            return Err(Error::Invalid("look_at with eye == target".into()));
        }
        let forward = forward.normalize();
        let up = Vector3::new(0.0, 1.0, 0.0);
        let right = forward.cross(&up);
        if right.norm() < 1e-9 {
            return Err(Error::Invalid("look_at direction parallel to world up".into()));
        }
        let right = right.normalize();
        let down = forward.cross(&right);
        let r = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let t = -(r * v3(eye));
        let [fx, fy, cx, cy] = Self::default_intrinsics(width, height);
        let cam = PinholeCamera {
            fx,
            fy,
            cx,
            cy,
            rotation: mat3_to_array(&r),
            translation: arr3(&t),
            width,
            height,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        mat3(&self.rotation)
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> [f64; 3] {
        arr3(&(-(self.rotation_matrix().transpose() * v3(self.translation))))
    }

    pub fn extrinsic(&self) -> [[f64; 4]; 4] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            [r[0], r[1], r[2], t[0]],
            [r[3], r[4], r[5], t[1]],
            [r[6], r[7], r[8], t[2]],
            [0.0, 0.0, 0.0, 1.0],
        ]
    }

    pub fn to_camera(&self, p: [f64; 3]) -> [f64; 3] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[0] * p[0] + r[1] * p[1] + r[2] * p[2] + t[0],
            r[3] * p[0] + r[4] * p[1] + r[5] * p[2] + t[1],
            r[6] * p[0] + r[7] * p[1] + r[8] * p[2] + t[2],
        ]
    }

    pub fn project_point(&self, p: [f64; 3]) -> Projection {
        let [x, y, z] = self.to_camera(p);
        if z <= MIN_DEPTH {
            return Projection {
                pixel: [f64::NAN, f64::NAN],
                depth: z,
                in_front: false,
            };
        }
        Projection {
            pixel: [self.fx * x / z + self.cx, self.fy * y / z + self.cy],
            depth: z,
            in_front: true,
        }
    }

    pub fn project(&self, points: &[[f64; 3]]) -> Vec<Projection> {
        points.iter().map(|&p| self.project_point(p)).collect()
    }

    /// World point at camera-frame depth `depth` along the ray through `pixel`.
    pub fn unproject(&self, pixel: [f64; 2], depth: f64) -> [f64; 3] {
        let xc = Vector3::new(
            (pixel[0] - self.cx) / self.fx * depth,
            (pixel[1] - self.cy) / self.fy * depth,
            depth,
        );
        arr3(&(self.rotation_matrix().transpose() * (xc - v3(self.translation))))
    }

    pub fn in_image(&self, pixel: [f64; 2]) -> bool {
        pixel[0] >= 0.0 && pixel[1] >= 0.0 && pixel[0] < self.width as f64 && pixel[1] < self.height as f64
    }

    /// Same pose with image size and intrinsics scaled to a new width/height.
    pub fn resized(&self, width: u32, height: u32) -> PinholeCamera {
        let sx = width as f64 / self.width as f64;
        let sy = height as f64 / self.height as f64;
        PinholeCamera {
            fx: self.fx * sx,
            fy: self.fy * sy,
            cx: self.cx * sx,
            cy: self.cy * sy,
            width,
            height,
            ..self.clone()
        }
    }
}

/// Camera whose rotation increment, translation and log focal scale live on
/// a tape: `R = rodrigues(delta) * R0`, `f = f0 * exp(log_focal)`.
pub struct TapedCamera {
    pub rotation: Var,
    pub translation: Var,
    pub log_focal: Var,
    base: PinholeCamera,
}

impl TapedCamera {
    pub fn new(tape: &mut Tape, base: &PinholeCamera, delta_rotation: Var, translation: Var, log_focal: Var) -> Result<Self> {
        if delta_rotation.len() != 3 || translation.len() != 3 || log_focal.len() != 1 {
            return Err(Error::Shape("taped camera expects (3, 3, 1) parameters".into()));
        }
        let delta = tape.rodrigues(delta_rotation)?;
        let delta = tape.reshape(delta, Shape::Matrix(3, 3))?;
        let r0 = tape.constant(base.rotation.to_vec(), Shape::Matrix(3, 3))?;
        let rotation = tape.matmul(delta, r0)?;
        Ok(TapedCamera {
            rotation,
            translation,
            log_focal,
            base: base.clone(),
        })
    }

    pub fn base(&self) -> &PinholeCamera {
        &self.base
    }

    /// Projects `n x 3` world points to `n x 3` rows of `(u, v, depth)`.
    /// Rows behind the camera carry `u = v = 0` and receive no gradient.
    pub fn project(&self, tape: &mut Tape, points: Var) -> Result<Var> {
        if points.len() % 3 != 0 {
            return Err(Error::Shape(format!("project expects rows of 3, got {:?}", points.shape())));
        }
        let n = points.len() / 3;
        let x = tape.value(points).to_vec();
        let r: [f64; 9] = tape.value(self.rotation).try_into().expect("3x3");
        let t: [f64; 3] = tape.value(self.translation).try_into().expect("3");
        let scale = tape.scalar(self.log_focal).exp();
        let (fx, fy) = (self.base.fx * scale, self.base.fy * scale);
        let mut out = vec![0.0; n * 3];
        let mut cam_points = vec![0.0; n * 3];
        for i in 0..n {
            let p = [x[i * 3], x[i * 3 + 1], x[i * 3 + 2]];
            let pc = [
                r[0] * p[0] + r[1] * p[1] + r[2] * p[2] + t[0],
                r[3] * p[0] + r[4] * p[1] + r[5] * p[2] + t[1],
                r[6] * p[0] + r[7] * p[1] + r[8] * p[2] + t[2],
            ];
            cam_points[i * 3..i * 3 + 3].copy_from_slice(&pc);
            out[i * 3 + 2] = pc[2];
            if pc[2] > MIN_DEPTH {
                out[i * 3] = fx * pc[0] / pc[2] + self.base.cx;
                out[i * 3 + 1] = fy * pc[1] / pc[2] + self.base.cy;
            }
        }
        let op = ProjectOp {
            cam_points,
            fx,
            fy,
        };
        tape.custom(
            Box::new(op),
            &[points, self.rotation, self.translation, self.log_focal],
            out,
            Shape::Matrix(n, 3),
        )
    }

    /// Plain camera at the current parameter values.
    pub fn current(&self, tape: &Tape) -> PinholeCamera {
        let scale = tape.scalar(self.log_focal).exp();
        PinholeCamera {
            fx: self.base.fx * scale,
            fy: self.base.fy * scale,
            rotation: tape.value(self.rotation).try_into().expect("3x3"),
            translation: tape.value(self.translation).try_into().expect("3"),
            ..self.base.clone()
        }
    }
}

struct ProjectOp {
    cam_points: Vec<f64>,
    fx: f64,
    fy: f64,
}

impl CustomOp for ProjectOp {
    fn name(&self) -> &str {
        "project"
    }

    fn backward(&self, inputs: &[&[f64]], _output: &[f64], g: &[f64], gi: &mut [Option<Vec<f64>>]) {
        let x = inputs[0];
        let r = inputs[1];
        let n = x.len() / 3;
        let mut g_rot = [0.0; 9];
        let mut g_t = [0.0; 3];
        let mut g_logf = 0.0;
        let (head, rest) = gi.split_at_mut(1);
        let g_points = &mut head[0];
        for i in 0..n {
            let [xc, yc, zc] = [self.cam_points[i * 3], self.cam_points[i * 3 + 1], self.cam_points[i * 3 + 2]];
            let (gu, gv, gz) = (g[i * 3], g[i * 3 + 1], g[i * 3 + 2]);
            let mut gpc = [0.0, 0.0, gz];
            if zc > MIN_DEPTH {
                gpc[0] = gu * self.fx / zc;
                gpc[1] = gv * self.fy / zc;
                gpc[2] += -(gu * self.fx * xc + gv * self.fy * yc) / (zc * zc);
                g_logf += gu * self.fx * xc / zc + gv * self.fy * yc / zc;
            }
            if let Some(gp) = g_points {
                for j in 0..3 {
                    gp[i * 3 + j] += r[j] * gpc[0] + r[3 + j] * gpc[1] + r[6 + j] * gpc[2];
                }
            }
            for a in 0..3 {
                for b in 0..3 {
                    g_rot[a * 3 + b] += gpc[a] * x[i * 3 + b];
                }
                g_t[a] += gpc[a];
            }
        }
        if let Some(gr) = &mut rest[0] {
            gr.iter_mut().zip(g_rot).for_each(|(a, b)| *a += b);
        }
        if let Some(gt) = &mut rest[1] {
            gt.iter_mut().zip(g_t).for_each(|(a, b)| *a += b);
        }
        if let Some(gf) = &mut rest[2] {
            gf[0] += g_logf;
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrajectoryKind {
    Fix,
    Dolly,
    Orbit,
}

impl std::str::FromStr for TrajectoryKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fix" => Ok(TrajectoryKind::Fix),
            "dolly" => Ok(TrajectoryKind::Dolly),
            "orbit" => Ok(TrajectoryKind::Orbit),
            other => Err(Error::Invalid(format!("unknown trajectory kind `{other}`"))),
        }
    }
}

/// One camera path around a target point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySpec {
    pub kind: TrajectoryKind,
    pub pitch_deg: f64,
    pub azimuth_deg: f64,
    /// Initial target distance in meters.
    pub radius: f64,
    /// Degrees per frame for orbit, meters per frame for dolly, unused for fix.
    pub rate: f64,
    pub frames: usize,
}

impl TrajectorySpec {
    pub fn fixed(pitch_deg: f64, azimuth_deg: f64, radius: f64, frames: usize) -> Self {
        TrajectorySpec {
            kind: TrajectoryKind::Fix,
            pitch_deg,
            azimuth_deg,
            radius,
            rate: 0.0,
            frames,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 {
            return Err(Error::Invalid("trajectory needs at least one frame".into()));
        }
        if !(self.radius > 0.0) {
            return Err(Error::Invalid(format!("trajectory radius must be positive, got {}", self.radius)));
        }
        if self.kind == TrajectoryKind::Dolly {
            let last = self.radius + self.rate * (self.frames - 1) as f64;
            if last <= 0.0 {
                return Err(Error::Invalid(format!(
                    "dolly rate {} drives the radius to {last} by frame {}",
                    self.rate,
                    self.frames - 1
                )));
            }
        }
        Ok(())
    }

    /// (pitch, azimuth, radius) for frame `t`.
    pub fn frame_params(&self, t: usize) -> (f64, f64, f64) {
        let t = t as f64;
        match self.kind {
            TrajectoryKind::Fix => (self.pitch_deg, self.azimuth_deg, self.radius),
            TrajectoryKind::Orbit => (self.pitch_deg, self.azimuth_deg + self.rate * t, self.radius),
            TrajectoryKind::Dolly => (self.pitch_deg, self.azimuth_deg, self.radius + self.rate * t),
        }
    }

    /// One camera per frame looking at `target`.
    pub fn cameras(&self, target: [f64; 3], width: u32, height: u32) -> Result<Vec<PinholeCamera>> {
        self.validate()?;
        (0..self.frames)
            .map(|t| {
                let (pitch, azimuth, radius) = self.frame_params(t);
                PinholeCamera::look_at(orbit_eye(target, pitch, azimuth, radius), target, width, height)
            })
            .collect()
    }
}

/// Camera position at the given pitch/azimuth (degrees) and distance from `target`.
pub fn orbit_eye(target: [f64; 3], pitch_deg: f64, azimuth_deg: f64, radius: f64) -> [f64; 3] {
    let (p, a) = (pitch_deg.to_radians(), azimuth_deg.to_radians());
    [
        target[0] + radius * p.cos() * a.sin(),
        target[1] + radius * p.sin(),
        target[2] + radius * p.cos() * a.cos(),
    ]
}

/// Random trajectory generator. Kind probabilities and angle ranges default to
/// fix/dolly/orbit = 0.4/0.3/0.3, pitch in (-15, 15) and azimuth in (-180, 180)
/// degrees; distances are multiples of the subject's body length.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrajectorySampler {
    /// Probabilities of fix, dolly and orbit.
    pub probabilities: [f64; 3],
    pub pitch_range_deg: (f64, f64),
    pub azimuth_range_deg: (f64, f64),
    /// Initial distance range in body lengths.
    pub radius_range: (f64, f64),
    /// Orbit speed magnitude range, degrees per frame.
    pub orbit_rate_range_deg: (f64, f64),
    /// Total relative distance change over a dolly clip.
    pub dolly_change_range: (f64, f64),
}

impl Default for TrajectorySampler {
    fn default() -> Self {
        TrajectorySampler {
            probabilities: [0.4, 0.3, 0.3],
            pitch_range_deg: (-15.0, 15.0),
            azimuth_range_deg: (-180.0, 180.0),
            radius_range: (2.0, 5.0),
            orbit_rate_range_deg: (0.25, 1.5),
            dolly_change_range: (0.1, 0.4),
        }
    }
}

/// Uniform sample strictly inside `(lo, hi)`.
fn open_uniform<R: Rng + ?Sized>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    loop {
        let x = rng.random_range(lo..hi);
        if x > lo {
            return x;
        }
    }
}

impl TrajectorySampler {
    pub fn sample_kind<R: Rng + ?Sized>(&self, rng: &mut R) -> TrajectoryKind {
        let total: f64 = self.probabilities.iter().sum();
        let u = rng.random::<f64>() * total;
        if u < self.probabilities[0] {
            TrajectoryKind::Fix
        } else if u < self.probabilities[0] + self.probabilities[1] {
            TrajectoryKind::Dolly
        } else {
            TrajectoryKind::Orbit
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, frames: usize, body_length: f64) -> TrajectorySpec {
        let kind = self.sample_kind(rng);
        let pitch_deg = open_uniform(rng, self.pitch_range_deg);
        let azimuth_deg = open_uniform(rng, self.azimuth_range_deg);
        let radius = body_length * rng.random_range(self.radius_range.0..=self.radius_range.1);
        let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
        let rate = match kind {
            TrajectoryKind::Fix => 0.0,
            TrajectoryKind::Orbit => sign * rng.random_range(self.orbit_rate_range_deg.0..=self.orbit_rate_range_deg.1),
            TrajectoryKind::Dolly => {
                let change = rng.random_range(self.dolly_change_range.0..=self.dolly_change_range.1);
                sign * change * radius / frames.max(1) as f64
            }
        };
        TrajectorySpec {
            kind,
            pitch_deg,
            azimuth_deg,
            radius,
            rate,
            frames,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::check::check_gradient;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn test_camera() -> PinholeCamera {
        PinholeCamera::look_at([0.7, 0.4, 4.0], [0.0, 0.1, 0.0], 128, 96).unwrap()
    }

    #[test]
    fn optical_axis_projects_to_principal_point() {
        let cam = test_camera();
        for d in [0.5, 2.0, 7.0] {
            let p = cam.unproject([cam.cx, cam.cy], d);
            let proj = cam.project_point(p);
            assert!((proj.pixel[0] - cam.cx).abs() < 1e-9 && (proj.pixel[1] - cam.cy).abs() < 1e-9);
            assert!((proj.depth - d).abs() < 1e-12);
        }
    }

    #[test]
    fn doubling_focal_doubles_offset() {
        let cam = test_camera();
        let mut wide = cam.clone();
        wide.fx *= 2.0;
        let p = [0.3, -0.2, 0.5];
        let a = cam.project_point(p).pixel[0] - cam.cx;
        let b = wide.project_point(p).pixel[0] - cam.cx;
        assert!((b - 2.0 * a).abs() < 1e-9);
    }

    #[test]
    fn projection_matches_matrix_form() {
        let cam = test_camera();
        let k = nalgebra::Matrix3::new(cam.fx, 0.0, cam.cx, 0.0, cam.fy, cam.cy, 0.0, 0.0, 1.0);
        let ext = nalgebra::Matrix3x4::from_fn(|i, j| cam.extrinsic()[i][j]);
        let p_mat = k * ext;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let p = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
            let h = p_mat * nalgebra::Vector4::new(p[0], p[1], p[2], 1.0);
            let ours = cam.project_point(p);
            assert!((ours.pixel[0] - h.x / h.z).abs() < 1e-10);
            assert!((ours.pixel[1] - h.y / h.z).abs() < 1e-10);
        }
    }

    #[test]
    fn behind_camera_is_flagged() {
        let cam = test_camera();
        let behind = cam.unproject([10.0, 10.0], -1.0);
        assert!(!cam.project_point(behind).in_front);
    }

    #[test]
    fn unproject_round_trip() {
        let cam = test_camera();
        let p = [0.2, -0.4, 0.9];
        let proj = cam.project_point(p);
        let back = cam.unproject(proj.pixel, proj.depth);
        for i in 0..3 {
            assert!((back[i] - p[i]).abs() < 1e-9);
        }
    }

    #[test]
    fn record_round_trip_and_validation() {
        let cam = test_camera();
        let json = serde_json::to_string(&cam).unwrap();
        let back: PinholeCamera = serde_json::from_str(&json).unwrap();
        assert_eq!(back, cam);
        let mut bad = cam.clone();
        bad.cx = 500.0;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn taped_projection_gradients() {
        let base = test_camera();
        let pts = vec![0.1, 0.2, -0.3, -0.4, 0.0, 0.25, 0.3, -0.1, 0.05];
        let inputs = vec![
            (pts, Shape::Matrix(3, 3)),
            (vec![0.01, -0.02, 0.03], Shape::Vector(3)),
            (base.translation.to_vec(), Shape::Vector(3)),
            (vec![0.05], Shape::Scalar),
        ];
        let report = check_gradient(&inputs, 1e-6, |t, v| {
            let cam = TapedCamera::new(t, &base, v[1], v[2], v[3])?;
            let uvz = cam.project(t, v[0])?;
            let w = t.constant((0..9).map(|i| (i as f64 * 1.3).cos()).collect(), Shape::Matrix(3, 3))?;
            t.dot(uvz, w)
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-6, "{}", report.max_rel_err);
    }

    #[test]
    fn fix_trajectory_is_constant() {
        let spec = TrajectorySpec::fixed(10.0, 30.0, 4.0, 10);
        let cams = spec.cameras([0.0, 1.0, 0.0], 64, 64).unwrap();
        assert_eq!(cams.len(), 10);
        assert!(cams.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn orbit_advances_azimuth_and_keeps_distance() {
        let spec = TrajectorySpec {
            kind: TrajectoryKind::Orbit,
            pitch_deg: 5.0,
            azimuth_deg: 12.0,
            radius: 3.0,
            rate: 90.0,
            frames: 4,
        };
        let target = [0.2, 1.0, -0.1];
        let azimuths: Vec<f64> = (0..4).map(|t| spec.frame_params(t).1).collect();
        assert_eq!(azimuths, vec![12.0, 102.0, 192.0, 282.0]);
        for cam in spec.cameras(target, 64, 64).unwrap() {
            let c = cam.center();
            let d = ((c[0] - target[0]).powi(2) + (c[1] - target[1]).powi(2) + (c[2] - target[2]).powi(2)).sqrt();
            assert!((d - 3.0).abs() < 1e-9);
            let proj = cam.project_point(target);
            assert!((proj.pixel[0] - 32.0).abs() < 1e-9 && (proj.pixel[1] - 32.0).abs() < 1e-9);
        }
    }

    #[test]
    fn dolly_keeps_direction_and_rejects_collapse() {
        let mut spec = TrajectorySpec {
            kind: TrajectoryKind::Dolly,
            pitch_deg: -5.0,
            azimuth_deg: 40.0,
            radius: 3.0,
            rate: 0.1,
            frames: 5,
        };
        let cams = spec.cameras([0.0; 3], 32, 32).unwrap();
        assert!(cams.windows(2).all(|w| (w[0].rotation_matrix() - w[1].rotation_matrix()).abs().max() < 1e-12));
        spec.rate = -1.0;
        assert!(spec.cameras([0.0; 3], 32, 32).is_err());
    }

    #[test]
    fn sampler_frequencies_and_ranges() {
        let sampler = TrajectorySampler::default();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut counts = [0usize; 3];
        let n = 10_000;
        for _ in 0..n {
            let s = sampler.sample(&mut rng, 16, 2.0);
            counts[s.kind as usize] += 1;
            assert!(s.pitch_deg > -15.0 && s.pitch_deg < 15.0);
            assert!(s.azimuth_deg > -180.0 && s.azimuth_deg < 180.0);
            s.validate().unwrap();
        }
        for (c, p) in counts.iter().zip([0.4, 0.3, 0.3]) {
            assert!((*c as f64 / n as f64 - p).abs() < 0.03, "{counts:?}");
        }
    }
}
