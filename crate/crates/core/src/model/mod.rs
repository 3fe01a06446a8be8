//! Parametric skinned body model.
//!
//! A [`ModelCard`] maps shape coefficients `beta`, per-joint axis-angle
//! rotations `theta` and a global translation `gamma` to a posed mesh:
//! shape blend shapes and per-region pose correctives are added to the
//! template, then the result is skinned by linear blend skinning over the
//! kinematic tree and translated by `gamma`.

mod asset;
mod subdivide;
mod taped;
pub mod toy;

use std::collections::BTreeMap;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::camera::PinholeCamera;
use crate::error::{Error, Result};
use crate::math::{arr3, mat3, polar_rotation, rodrigues, v3};

pub use asset::{load_model_card, save_model_card, ASSET_FORMAT, ASSET_FORMAT_VERSION};
pub use subdivide::subdivide;
pub use taped::{PointQuery, TapedPose};
pub use toy::make_toy_quadruped;

/// Tolerance on skinning-weight row sums.
pub const WEIGHT_SUM_TOLERANCE: f64 = 1e-6;

/// Pose-dependent linear corrective over a vertex subset.
///
/// The corrective displacement of the region's vertices is
/// `basis * f`, where `f` concatenates `R_d - I` (row-major) over the
/// driving joints `d` and `R_d` is the joint's rotation relative to its parent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MuscleRegion {
    pub name: String,
    pub vertices: Vec<u32>,
    pub drivers: Vec<u32>,
    /// Row-major `(3 * vertices.len()) x (9 * drivers.len())`.
    pub basis: Vec<f64>,
}

impl MuscleRegion {
    pub fn feature_len(&self) -> usize {
        9 * self.drivers.len()
    }
}

/// Where a keypoint lives on the body.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum KeypointAnchor {
    /// Barycentric combination of three vertices.
    Surface { vertices: [u32; 3], bary: [f64; 3] },
    /// World position of a joint.
    Joint(u32),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelCard {
    pub name: String,
    pub version: String,
    pub vertices: Vec<[f64; 3]>,
    pub faces: Vec<[u32; 3]>,
    pub joint_names: Vec<String>,
    /// Rest joint positions at `beta = 0`.
    pub joints: Vec<[f64; 3]>,
    /// Parent of each joint; joints are listed parents-first, so
    /// `parents[j] < j` for every non-root joint.
    pub parents: Vec<Option<usize>>,
    /// Dense row-major `V x J`.
    pub skin_weights: Vec<f64>,
    /// Row-major `(3V) x B`: entry `((v * 3 + c) * B) + b`.
    pub shape_basis: Vec<f64>,
    /// Row-major `(3J) x B`; rest joints move with shape as `joints + Sj * beta`.
    pub joint_shape_basis: Vec<f64>,
    pub n_shape: usize,
    pub muscle_regions: Vec<MuscleRegion>,
    pub keypoint_anchors: Vec<KeypointAnchor>,
    pub keypoint_names: Vec<String>,
    /// Named joint chains, e.g. `leg_fl -> [upper, knee, fetlock]`.
    pub chains: BTreeMap<String, Vec<usize>>,
}

impl ModelCard {
    pub fn n_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn n_joints(&self) -> usize {
        self.joints.len()
    }

    pub fn n_keypoints(&self) -> usize {
        self.keypoint_anchors.len()
    }

    pub fn weight(&self, v: usize, j: usize) -> f64 {
        self.skin_weights[v * self.n_joints() + j]
    }

    /// Checks every structural invariant of the card.
    pub fn validate(&self) -> Result<()> {
        let nv = self.n_vertices();
        let nj = self.n_joints();
        let b = self.n_shape;
        let bad = |m: String| Err(Error::InvalidAsset(m));
        if nv == 0 || nj == 0 {
            return bad("card needs at least one vertex and one joint".into());
        }
        if self.joint_names.len() != nj || self.parents.len() != nj {
            return bad(format!(
                "{nj} joints but {} names and {} parents",
                self.joint_names.len(),
                self.parents.len()
            ));
        }
        if self.parents[0].is_some() {
            return bad("joint 0 must be the root".into());
        }
        for (j, p) in self.parents.iter().enumerate().skip(1) {
            match p {
                None => return bad(format!("joint {j} is a second root")),
                Some(p) if *p >= j => {
                    return bad(format!("joint {j} has parent {p}; parents must precede children"))
                }
                _ => {}
            }
        }
        if self.skin_weights.len() != nv * nj {
            return bad(format!("skin weights hold {} values, expected {}", self.skin_weights.len(), nv * nj));
        }
        for v in 0..nv {
            let row = &self.skin_weights[v * nj..(v + 1) * nj];
            if row.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
                return bad(format!("vertex {v} has a negative or non-finite skin weight"));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > WEIGHT_SUM_TOLERANCE {
                return bad(format!("skin weights of vertex {v} sum to {sum}, not 1"));
            }
        }
        if self.shape_basis.len() != nv * 3 * b || self.joint_shape_basis.len() != nj * 3 * b {
            return bad(format!("shape bases do not match rank {b}"));
        }
        for (i, f) in self.faces.iter().enumerate() {
            if f.iter().any(|&x| x as usize >= nv) {
                return bad(format!("face {i} references a vertex out of range"));
            }
        }
        for r in &self.muscle_regions {
            if r.vertices.iter().any(|&x| x as usize >= nv) {
                return bad(format!("muscle region `{}` references an invalid vertex", r.name));
            }
            if r.drivers.iter().any(|&x| x as usize >= nj) {
                return bad(format!("muscle region `{}` references an invalid joint", r.name));
            }
            if r.basis.len() != 3 * r.vertices.len() * r.feature_len() {
                return bad(format!("muscle region `{}` basis has the wrong size", r.name));
            }
        }
        if self.keypoint_anchors.is_empty() {
            return bad("card needs at least one keypoint anchor".into());
        }
        if !self.keypoint_names.is_empty() && self.keypoint_names.len() != self.n_keypoints() {
            return bad("keypoint names do not match anchors".into());
        }
        for (k, a) in self.keypoint_anchors.iter().enumerate() {
            let ok = match a {
                KeypointAnchor::Surface { vertices, bary } => {
                    vertices.iter().all(|&x| (x as usize) < nv) && bary.iter().all(|x| x.is_finite())
                }
                KeypointAnchor::Joint(j) => (*j as usize) < nj,
            };
            if !ok {
                return bad(format!("keypoint anchor {k} is out of range"));
            }
        }
        for (name, chain) in &self.chains {
            if chain.iter().any(|&j| j >= nj) {
                return bad(format!("chain `{name}` references an invalid joint"));
            }
        }
        let finite = self.vertices.iter().chain(&self.joints).flatten().all(|x| x.is_finite())
            && self.shape_basis.iter().chain(&self.joint_shape_basis).all(|x| x.is_finite())
            && self.muscle_regions.iter().flat_map(|r| &r.basis).all(|x| x.is_finite());
        if !finite {
            return Err(Error::NonFinite("model card arrays".into()));
        }
        Ok(())
    }

    /// Children lists of the kinematic tree.
    pub fn children(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.n_joints()];
        for (j, p) in self.parents.iter().enumerate() {
            if let Some(p) = p {
                out[*p].push(j);
            }
        }
        out
    }

    /// Joint chains whose name starts with `leg`.
    pub fn leg_chains(&self) -> Vec<(&str, &[usize])> {
        self.chains
            .iter()
            .filter(|(k, _)| k.starts_with("leg"))
            .map(|(k, v)| (k.as_str(), v.as_slice()))
            .collect()
    }

    /// Template plus shape blend shapes.
    pub fn shaped_vertices(&self, beta: &[f64]) -> Vec<[f64; 3]> {
        let b = self.n_shape;
        self.vertices
            .iter()
            .enumerate()
            .map(|(v, p)| {
                let mut out = *p;
                for c in 0..3 {
                    let row = &self.shape_basis[(v * 3 + c) * b..(v * 3 + c + 1) * b];
                    out[c] += row.iter().zip(beta).map(|(s, x)| s * x).sum::<f64>();
                }
                out
            })
            .collect()
    }

    pub fn shaped_joints(&self, beta: &[f64]) -> Vec<[f64; 3]> {
        let b = self.n_shape;
        self.joints
            .iter()
            .enumerate()
            .map(|(j, p)| {
                let mut out = *p;
                for c in 0..3 {
                    let row = &self.joint_shape_basis[(j * 3 + c) * b..(j * 3 + c + 1) * b];
                    out[c] += row.iter().zip(beta).map(|(s, x)| s * x).sum::<f64>();
                }
                out
            })
            .collect()
    }

    /// Rough body extent: the largest side of the template's bounding box.
    pub fn body_length(&self) -> f64 {
        let (lo, hi) = bounds(&self.vertices);
        (0..3).map(|c| hi[c] - lo[c]).fold(0.0, f64::max)
    }

    /// Center of the template's bounding box.
    pub fn center(&self) -> [f64; 3] {
        let (lo, hi) = bounds(&self.vertices);
        [(lo[0] + hi[0]) / 2.0, (lo[1] + hi[1]) / 2.0, (lo[2] + hi[2]) / 2.0]
    }

    /// Content hash over every array of the card.
    pub fn content_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        let mut put = |xs: &mut dyn Iterator<Item = f64>| {
            for x in xs {
                h.update(x.to_le_bytes());
            }
        };
        put(&mut self.vertices.iter().flatten().copied());
        put(&mut self.faces.iter().flatten().map(|&x| x as f64));
        put(&mut self.joints.iter().flatten().copied());
        put(&mut self.parents.iter().map(|p| p.map_or(-1.0, |p| p as f64)));
        put(&mut self.skin_weights.iter().copied());
        put(&mut self.shape_basis.iter().copied());
        put(&mut self.joint_shape_basis.iter().copied());
        for r in &self.muscle_regions {
            put(&mut r.vertices.iter().map(|&x| x as f64));
            put(&mut r.drivers.iter().map(|&x| x as f64));
            put(&mut r.basis.iter().copied());
        }
        hex::encode(h.finalize())
    }
}

pub(crate) fn bounds(points: &[[f64; 3]]) -> ([f64; 3], [f64; 3]) {
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in points {
        for c in 0..3 {
            lo[c] = lo[c].min(p[c]);
            hi[c] = hi[c].max(p[c]);
        }
    }
    (lo, hi)
}

/// Per-frame model parameters plus the camera observing the frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseState {
    pub beta: Vec<f64>,
    /// Axis-angle rotation of each joint relative to its parent (radians).
    pub theta: Vec<[f64; 3]>,
    pub gamma: [f64; 3],
    pub camera: PinholeCamera,
}

impl PoseState {
    /// Rest pose with zero shape and translation.
    pub fn rest(card: &ModelCard, camera: PinholeCamera) -> Self {
        PoseState {
            beta: vec![0.0; card.n_shape],
            theta: vec![[0.0; 3]; card.n_joints()],
            gamma: [0.0; 3],
            camera,
        }
    }

    pub fn validate(&self, card: &ModelCard) -> Result<()> {
        if self.beta.len() != card.n_shape {
            return Err(Error::Shape(format!("beta has {} entries, card rank is {}", self.beta.len(), card.n_shape)));
        }
        if self.theta.len() != card.n_joints() {
            return Err(Error::Shape(format!("theta has {} rows, card has {} joints", self.theta.len(), card.n_joints())));
        }
        let finite = self.beta.iter().chain(self.theta.iter().flatten()).chain(&self.gamma).all(|x| x.is_finite());
        if !finite {
            return Err(Error::NonFinite("pose parameters".into()));
        }
        Ok(())
    }

    pub fn theta_flat(&self) -> Vec<f64> {
        self.theta.iter().flatten().copied().collect()
    }
}

/// Output of [`forward`].
#[derive(Clone, Debug)]
pub struct PosedMesh {
    pub vertices: Vec<[f64; 3]>,
    /// Skinning-weighted blend of joint rotations for each vertex.
    pub blend_affine: Vec<Matrix3<f64>>,
    /// Nearest rotation to `blend_affine`.
    pub blend_rotation: Vec<Matrix3<f64>>,
    /// Chosen so that `vertices[v] = blend_affine[v] * template[v] + blend_translation[v]`;
    /// shape, corrective and global translation offsets are folded in.
    pub blend_translation: Vec<[f64; 3]>,
    pub joint_rotations: Vec<Matrix3<f64>>,
    /// World joint positions including `gamma`.
    pub joint_positions: Vec<[f64; 3]>,
}

impl PosedMesh {
    /// Applies vertex `v`'s blended transform to a canonical point.
    pub fn transform_point(&self, v: usize, p: [f64; 3]) -> [f64; 3] {
        arr3(&(self.blend_affine[v] * v3(p) + v3(self.blend_translation[v])))
    }
}

/// Local joint rotations from axis-angle rows.
pub fn local_rotations(theta: &[[f64; 3]]) -> Vec<[f64; 9]> {
    theta.iter().map(|w| rodrigues(*w)).collect()
}

/// Adds every region's pose corrective to `shaped` in place.
pub(crate) fn apply_correctives(card: &ModelCard, rotations: &[[f64; 9]], shaped: &mut [[f64; 3]]) {
    for region in &card.muscle_regions {
        let f = region_features(region, rotations);
        let m = f.len();
        for (i, &v) in region.vertices.iter().enumerate() {
            for c in 0..3 {
                let row = &region.basis[(i * 3 + c) * m..(i * 3 + c + 1) * m];
                shaped[v as usize][c] += row.iter().zip(&f).map(|(a, b)| a * b).sum::<f64>();
            }
        }
    }
}

/// `R_d - I` flattened over the region's drivers.
pub(crate) fn region_features(region: &MuscleRegion, rotations: &[[f64; 9]]) -> Vec<f64> {
    let mut f = Vec::with_capacity(region.feature_len());
    for &d in &region.drivers {
        let r = &rotations[d as usize];
        for k in 0..9 {
            f.push(r[k] - if k % 4 == 0 { 1.0 } else { 0.0 });
        }
    }
    f
}

/// World rotation and position of every joint (without `gamma`).
pub(crate) fn kinematic_chain(
    parents: &[Option<usize>],
    rest_joints: &[[f64; 3]],
    rotations: &[[f64; 9]],
) -> (Vec<Matrix3<f64>>, Vec<Vector3<f64>>) {
    let n = parents.len();
    let mut world_r = Vec::with_capacity(n);
    let mut world_p = Vec::with_capacity(n);
    for j in 0..n {
        let local = mat3(&rotations[j]);
        match parents[j] {
            None => {
                world_r.push(local);
                world_p.push(v3(rest_joints[j]));
            }
            Some(p) => {
                let offset = v3(rest_joints[j]) - v3(rest_joints[p]);
                let r: Matrix3<f64> = world_r[p] * local;
                let pos: Vector3<f64> = world_r[p] * offset + world_p[p];
                world_r.push(r);
                world_p.push(pos);
            }
        }
    }
    (world_r, world_p)
}

/// Poses the card: blend shapes, pose correctives, skinning, translation.
pub fn forward(card: &ModelCard, state: &PoseState) -> Result<PosedMesh> {
    state.validate(card)?;
    let nj = card.n_joints();
    let rotations = local_rotations(&state.theta);
    let mut shaped = card.shaped_vertices(&state.beta);
    apply_correctives(card, &rotations, &mut shaped);
    let rest = card.shaped_joints(&state.beta);
    let (world_r, world_p) = kinematic_chain(&card.parents, &rest, &rotations);
    let skin_t: Vec<Vector3<f64>> = (0..nj).map(|j| world_p[j] - world_r[j] * v3(rest[j])).collect();
    let gamma = v3(state.gamma);

    let nv = card.n_vertices();
    let mut vertices = Vec::with_capacity(nv);
    let mut blend_affine = Vec::with_capacity(nv);
    let mut blend_translation = Vec::with_capacity(nv);
    for v in 0..nv {
        let mut a = Matrix3::zeros();
        let mut t = Vector3::zeros();
        for j in 0..nj {
            let w = card.weight(v, j);
            if w != 0.0 {
                a += world_r[j] * w;
                t += skin_t[j] * w;
            }
        }
        let posed = a * v3(shaped[v]) + t + gamma;
        blend_translation.push(arr3(&(posed - a * v3(card.vertices[v]))));
        vertices.push(arr3(&posed));
        blend_affine.push(a);
    }
    let blend_rotation = blend_affine.iter().map(polar_rotation).collect();
    let joint_positions = world_p.iter().map(|p| arr3(&(p + gamma))).collect();
    Ok(PosedMesh {
        vertices,
        blend_affine,
        blend_rotation,
        blend_translation,
        joint_rotations: world_r,
        joint_positions,
    })
}

/// Evaluates the card's keypoint anchors on a posed mesh.
pub fn keypoints_3d(card: &ModelCard, mesh: &PosedMesh) -> Vec<[f64; 3]> {
    card.keypoint_anchors
        .iter()
        .map(|a| anchor_position(a, &mesh.vertices, &mesh.joint_positions))
        .collect()
}

pub(crate) fn anchor_position(a: &KeypointAnchor, vertices: &[[f64; 3]], joints: &[[f64; 3]]) -> [f64; 3] {
    match a {
        KeypointAnchor::Surface { vertices: ids, bary } => {
            let mut p = [0.0; 3];
            for (&id, &w) in ids.iter().zip(bary) {
                for c in 0..3 {
                    p[c] += w * vertices[id as usize][c];
                }
            }
            p
        }
        KeypointAnchor::Joint(j) => joints[*j as usize],
    }
}

/// Area-weighted vertex normals of a triangle mesh.
pub fn vertex_normals(vertices: &[[f64; 3]], faces: &[[u32; 3]]) -> Vec<[f64; 3]> {
    let mut acc = vec![Vector3::zeros(); vertices.len()];
    for f in faces {
        let [a, b, c] = f.map(|i| v3(vertices[i as usize]));
        let n = (b - a).cross(&(c - a));
        for &i in f {
            acc[i as usize] += n;
        }
    }
    acc.iter()
        .map(|n| {
            let len = n.norm();
            if len > 0.0 {
                arr3(&(n / len))
            } else {
                [0.0; 3]
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn camera() -> PinholeCamera {
        PinholeCamera::look_at([0.0, 1.0, 6.0], [0.0, 1.0, 0.0], 64, 64).unwrap()
    }

    #[test]
    fn identity_pose_reproduces_template() {
        let card = make_toy_quadruped(0);
        let mesh = forward(&card, &PoseState::rest(&card, camera())).unwrap();
        for (a, b) in mesh.vertices.iter().zip(&card.vertices) {
            for c in 0..3 {
                assert!((a[c] - b[c]).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn translation_is_additive() {
        let card = make_toy_quadruped(0);
        let mut state = PoseState::rest(&card, camera());
        state.gamma = [1.0, 2.0, 3.0];
        let mesh = forward(&card, &state).unwrap();
        for (a, b) in mesh.vertices.iter().zip(&card.vertices) {
            assert!((a[0] - b[0] - 1.0).abs() < 1e-12);
            assert!((a[1] - b[1] - 2.0).abs() < 1e-12);
            assert!((a[2] - b[2] - 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn correctives_vanish_at_rest() {
        let card = make_toy_quadruped(3);
        let rotations = local_rotations(&vec![[0.0; 3]; card.n_joints()]);
        let mut v = card.vertices.clone();
        apply_correctives(&card, &rotations, &mut v);
        assert_eq!(v, card.vertices);
    }

    #[test]
    fn rejects_bad_states() {
        let card = make_toy_quadruped(0);
        let mut state = PoseState::rest(&card, camera());
        state.beta.push(0.0);
        assert!(forward(&card, &state).is_err());
        let mut state = PoseState::rest(&card, camera());
        state.theta[2][1] = f64::NAN;
        assert!(matches!(forward(&card, &state), Err(Error::NonFinite(_))));
    }

    #[test]
    fn validation_catches_unnormalized_weights() {
        let mut card = make_toy_quadruped(0);
        let nj = card.n_joints();
        for w in &mut card.skin_weights[..nj] {
            *w *= 0.5;
        }
        assert!(matches!(card.validate(), Err(Error::InvalidAsset(_))));
    }

    #[test]
    fn validation_catches_cycles_and_bad_faces() {
        let mut card = make_toy_quadruped(0);
        card.parents[3] = Some(5);
        assert!(card.validate().is_err());
        let mut card = make_toy_quadruped(0);
        card.faces[0][1] = card.vertices.len() as u32;
        assert!(card.validate().is_err());
    }
}
