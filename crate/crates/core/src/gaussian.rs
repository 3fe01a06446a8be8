//! Gaussians bound to the vertices of a (subdivided) model card and their
//! deformation to pose space by the card's skinning transforms.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use nalgebra::Matrix3;
use serde::{Deserialize, Serialize};

use crate::autodiff::{CustomOp, Shape, Tape, Var};
use crate::blob::{self, BlobEntry};
use crate::error::{Error, Result};
use crate::math::{arr3, unit_quat_to_mat, unit_quat_to_mat_jacobian, v3};
use crate::model::{forward, ModelCard, PosedMesh, PoseState};

/// Initial decoded opacity.
pub const INITIAL_OPACITY: f64 = 0.9;
/// Initial per-axis scale as a fraction of the mean incident edge length.
pub const INITIAL_SCALE_FACTOR: f64 = 0.5;

/// Per-Gaussian appearance and geometry in canonical space. Scales are stored
/// as logarithms and opacities as logits.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianAttributes {
    pub offsets: Vec<[f64; 3]>,
    /// Quaternions `[w, x, y, z]`; normalized when decoded.
    pub rotations: Vec<[f64; 4]>,
    pub log_scales: Vec<[f64; 3]>,
    pub colors: Vec<[f64; 3]>,
    pub opacity_logits: Vec<f64>,
}

impl GaussianAttributes {
    pub fn len(&self) -> usize {
        self.offsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.offsets.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        if self.rotations.len() != n
            || self.log_scales.len() != n
            || self.colors.len() != n
            || self.opacity_logits.len() != n
        {
            return Err(Error::Shape("gaussian attribute arrays differ in length".into()));
        }
        let finite = self.offsets.iter().flatten()
            .chain(self.rotations.iter().flatten())
            .chain(self.log_scales.iter().flatten())
            .chain(self.colors.iter().flatten())
            .chain(&self.opacity_logits)
            .all(|x| x.is_finite());
        if !finite {
            return Err(Error::NonFinite("gaussian attributes".into()));
        }
        if self.rotations.iter().any(|q| q.iter().map(|x| x * x).sum::<f64>() < 1e-24) {
            return Err(Error::Invalid("zero quaternion".into()));
        }
        Ok(())
    }

    pub fn opacity(&self, i: usize) -> f64 {
        sigmoid(self.opacity_logits[i])
    }

    pub fn scale(&self, i: usize) -> [f64; 3] {
        self.log_scales[i].map(f64::exp)
    }

    pub fn unit_rotation(&self, i: usize) -> [f64; 4] {
        normalize_quat(self.rotations[i])
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    crate::autodiff::sigmoid(x)
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

fn normalize_quat(q: [f64; 4]) -> [f64; 4] {
    let n = q.iter().map(|x| x * x).sum::<f64>().sqrt();
    q.map(|x| x / n)
}

/// Gaussians bound one-to-one to the vertices of `card`.
#[derive(Clone, Debug)]
pub struct BoundGaussianSet {
    pub attributes: GaussianAttributes,
    /// Canonical vertex positions the Gaussians are bound to.
    pub base: Vec<[f64; 3]>,
    pub card: Arc<ModelCard>,
}

impl BoundGaussianSet {
    pub fn len(&self) -> usize {
        self.base.len()
    }

    pub fn is_empty(&self) -> bool {
        self.base.is_empty()
    }

    pub fn canonical_centers(&self) -> Vec<[f64; 3]> {
        self.base
            .iter()
            .zip(&self.attributes.offsets)
            .map(|(b, o)| [b[0] + o[0], b[1] + o[1], b[2] + o[2]])
            .collect()
    }

    /// Mean initial scale, used as the length unit of the offset regularizer.
    pub fn mean_edge_scale(&self) -> f64 {
        mean_incident_edge(&self.card).iter().sum::<f64>() / self.len().max(1) as f64 * INITIAL_SCALE_FACTOR
    }
}

/// Mean length of the edges incident to each vertex.
pub fn mean_incident_edge(card: &ModelCard) -> Vec<f64> {
    let mut seen = std::collections::BTreeSet::new();
    let mut sum = vec![0.0; card.n_vertices()];
    let mut count = vec![0usize; card.n_vertices()];
    for f in &card.faces {
        for k in 0..3 {
            let (a, b) = (f[k].min(f[(k + 1) % 3]), f[k].max(f[(k + 1) % 3]));
            if seen.insert((a, b)) {
                let d = (v3(card.vertices[a as usize]) - v3(card.vertices[b as usize])).norm();
                for v in [a, b] {
                    sum[v as usize] += d;
                    count[v as usize] += 1;
                }
            }
        }
    }
    sum.iter().zip(&count).map(|(s, &c)| if c > 0 { s / c as f64 } else { 0.0 }).collect()
}

/// Initial Gaussians on every vertex of an already subdivided card: zero
/// offsets, identity rotations, half the mean incident edge length as scale,
/// mid-gray color and opacity 0.9. Isolated vertices fall back to the mean
/// edge length of the mesh.
pub fn init_bound_set(card: Arc<ModelCard>) -> BoundGaussianSet {
    let edges = mean_incident_edge(&card);
    let positive: Vec<f64> = edges.iter().copied().filter(|&e| e > 0.0).collect();
    let fallback = if positive.is_empty() { 0.01 } else { positive.iter().sum::<f64>() / positive.len() as f64 };
    let n = card.n_vertices();
    let log_scales = edges
        .iter()
        .map(|&e| [(INITIAL_SCALE_FACTOR * if e > 0.0 { e } else { fallback }).ln(); 3])
        .collect();
    BoundGaussianSet {
        attributes: GaussianAttributes {
            offsets: vec![[0.0; 3]; n],
            rotations: vec![[1.0, 0.0, 0.0, 0.0]; n],
            log_scales,
            colors: vec![[0.5; 3]; n],
            opacity_logits: vec![logit(INITIAL_OPACITY); n],
        },
        base: card.vertices.clone(),
        card,
    }
}

/// Gaussians in pose space, ready for rendering.
#[derive(Clone, Debug, Default)]
pub struct PosedGaussians {
    pub centers: Vec<[f64; 3]>,
    /// Upper triangle `[xx, xy, xz, yy, yz, zz]` of each covariance.
    pub covariances: Vec<[f64; 6]>,
    pub colors: Vec<[f64; 3]>,
    pub opacities: Vec<f64>,
}

impl PosedGaussians {
    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }
}

pub fn covariance_matrix(c: &[f64; 6]) -> Matrix3<f64> {
    Matrix3::new(c[0], c[1], c[2], c[1], c[3], c[4], c[2], c[4], c[5])
}

fn pack_sym(m: &Matrix3<f64>) -> [f64; 6] {
    [m[(0, 0)], m[(0, 1)], m[(0, 2)], m[(1, 1)], m[(1, 2)], m[(2, 2)]]
}

/// Deforms the set into the pose of `state` using the skinning transforms of
/// its card.
pub fn deform_lbs(set: &BoundGaussianSet, state: &PoseState) -> Result<PosedGaussians> {
    let mesh = forward(&set.card, state)?;
    Ok(deform_with_mesh(set, &mesh))
}

/// Like [`deform_lbs`] for a mesh already posed from `set.card`.
pub fn deform_with_mesh(set: &BoundGaussianSet, mesh: &PosedMesh) -> PosedGaussians {
    let a = &set.attributes;
    let n = set.len();
    let mut out = PosedGaussians {
        centers: Vec::with_capacity(n),
        covariances: Vec::with_capacity(n),
        colors: a.colors.clone(),
        opacities: (0..n).map(|i| a.opacity(i)).collect(),
    };
    for i in 0..n {
        let p = v3(set.base[i]) + v3(a.offsets[i]);
        out.centers.push(arr3(&(mesh.blend_affine[i] * p + v3(mesh.blend_translation[i]))));
        let r = mesh.blend_rotation[i] * unit_quat_to_mat(a.unit_rotation(i));
        let s = a.scale(i);
        let m = r * Matrix3::from_diagonal(&nalgebra::Vector3::new(s[0] * s[0], s[1] * s[1], s[2] * s[2])) * r.transpose();
        out.covariances.push(pack_sym(&m));
    }
    out
}

/// Differentiable counterpart of [`deform_with_mesh`] for the geometric
/// attributes; `unit_quats` must already be normalized on the tape.
/// Returns `(centers N x 3, covariances N x 6)`.
pub fn deform_taped(
    tape: &mut Tape,
    set: &BoundGaussianSet,
    mesh: &PosedMesh,
    offsets: Var,
    unit_quats: Var,
    log_scales: Var,
) -> Result<(Var, Var)> {
    let n = set.len();
    if offsets.len() != 3 * n || unit_quats.len() != 4 * n || log_scales.len() != 3 * n {
        return Err(Error::Shape(format!("deform expects {n} Gaussians")));
    }
    let affine: Arc<[Matrix3<f64>]> = mesh.blend_affine.clone().into();
    let mut centers = Vec::with_capacity(3 * n);
    let off = tape.value(offsets);
    for i in 0..n {
        let p = v3(set.base[i]) + v3([off[i * 3], off[i * 3 + 1], off[i * 3 + 2]]);
        centers.extend_from_slice(&arr3(&(affine[i] * p + v3(mesh.blend_translation[i]))));
    }
    let centers = tape.custom(Box::new(CentersOp { affine }), &[offsets], centers, Shape::Matrix(n, 3))?;

    let blend: Arc<[Matrix3<f64>]> = mesh.blend_rotation.clone().into();
    let (q, s) = (tape.value(unit_quats), tape.value(log_scales));
    let mut cov = Vec::with_capacity(6 * n);
    for i in 0..n {
        let m = scaled_frame(&blend[i], &q[i * 4..i * 4 + 4], &s[i * 3..i * 3 + 3]);
        cov.extend_from_slice(&pack_sym(&(m * m.transpose())));
    }
    let cov = tape.custom(Box::new(CovarianceOp { blend }), &[unit_quats, log_scales], cov, Shape::Matrix(n, 6))?;
    Ok((centers, cov))
}

/// `B R(q) diag(exp s)`.
fn scaled_frame(blend: &Matrix3<f64>, q: &[f64], s: &[f64]) -> Matrix3<f64> {
    let r = blend * unit_quat_to_mat([q[0], q[1], q[2], q[3]]);
    let mut m = r;
    for c in 0..3 {
        let e = s[c].exp();
        for row in 0..3 {
            m[(row, c)] *= e;
        }
    }
    m
}

struct CentersOp {
    affine: Arc<[Matrix3<f64>]>,
}

impl CustomOp for CentersOp {
    fn name(&self) -> &str {
        "deform_centers"
    }

    fn backward(&self, _inputs: &[&[f64]], _output: &[f64], g: &[f64], gi: &mut [Option<Vec<f64>>]) {
        if let Some(go) = &mut gi[0] {
            for (i, a) in self.affine.iter().enumerate() {
                let gv = a.transpose() * v3([g[i * 3], g[i * 3 + 1], g[i * 3 + 2]]);
                for c in 0..3 {
                    go[i * 3 + c] += gv[c];
                }
            }
        }
    }
}

struct CovarianceOp {
    blend: Arc<[Matrix3<f64>]>,
}

impl CustomOp for CovarianceOp {
    fn name(&self) -> &str {
        "gaussian_covariance"
    }

    fn backward(&self, inputs: &[&[f64]], _output: &[f64], g: &[f64], gi: &mut [Option<Vec<f64>>]) {
        let (q, s) = (inputs[0], inputs[1]);
        let (head, tail) = gi.split_at_mut(1);
        for (i, blend) in self.blend.iter().enumerate() {
            let gs = &g[i * 6..i * 6 + 6];
            // Symmetric adjoint of the full matrix: off-diagonal entries are
            // shared by two matrix cells.
            let gsym = Matrix3::new(
                gs[0],
                gs[1] / 2.0,
                gs[2] / 2.0,
                gs[1] / 2.0,
                gs[3],
                gs[4] / 2.0,
                gs[2] / 2.0,
                gs[4] / 2.0,
                gs[5],
            );
            let qi = [q[i * 4], q[i * 4 + 1], q[i * 4 + 2], q[i * 4 + 3]];
            let si = &s[i * 3..i * 3 + 3];
            let m = scaled_frame(blend, &qi, si);
            let gm = gsym * m * 2.0;
            if let Some(gl) = &mut tail[0] {
                for c in 0..3 {
                    gl[i * 3 + c] += (0..3).map(|r| gm[(r, c)] * m[(r, c)]).sum::<f64>();
                }
            }
            if let Some(gq) = &mut head[0] {
                // M = B Rq E with E = diag(exp s): dL/dRq = B^T gM E.
                let mut grq = blend.transpose() * gm;
                for c in 0..3 {
                    let e = si[c].exp();
                    for r in 0..3 {
                        grq[(r, c)] *= e;
                    }
                }
                let jac = unit_quat_to_mat_jacobian(qi);
                for k in 0..4 {
                    gq[i * 4 + k] += jac[k].component_mul(&grq).sum();
                }
            }
        }
    }
}

const AVATAR_FORMAT: &str = "skinsplat-avatar";
const AVATAR_FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct AvatarManifest {
    format: String,
    format_version: u32,
    n_gaussians: usize,
    card_hash: String,
    blobs: BTreeMap<String, BlobEntry>,
}

/// Writes the attributes and base positions of `set` plus the hash of its
/// card to `dir`.
pub fn save_avatar(set: &BoundGaussianSet, dir: &Path) -> Result<()> {
    set.attributes.validate()?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let a = &set.attributes;
    let n = set.len();
    let mut blobs = BTreeMap::new();
    let flat = |x: &[[f64; 3]]| x.iter().flatten().copied().collect::<Vec<_>>();
    blobs.insert("base".into(), blob::write_f64(dir, "base.bin", &flat(&set.base), &[n, 3])?);
    blobs.insert("offsets".into(), blob::write_f64(dir, "offsets.bin", &flat(&a.offsets), &[n, 3])?);
    let rot: Vec<f64> = a.rotations.iter().flatten().copied().collect();
    blobs.insert("rotations".into(), blob::write_f64(dir, "rotations.bin", &rot, &[n, 4])?);
    blobs.insert("log_scales".into(), blob::write_f64(dir, "log_scales.bin", &flat(&a.log_scales), &[n, 3])?);
    blobs.insert("colors".into(), blob::write_f64(dir, "colors.bin", &flat(&a.colors), &[n, 3])?);
    blobs.insert("opacity_logits".into(), blob::write_f64(dir, "opacity_logits.bin", &a.opacity_logits, &[n])?);
    let manifest = AvatarManifest {
        format: AVATAR_FORMAT.into(),
        format_version: AVATAR_FORMAT_VERSION,
        n_gaussians: n,
        card_hash: set.card.content_hash(),
        blobs,
    };
    blob::write_json(&dir.join("manifest.json"), &manifest)
}

/// Reads an avatar written by [`save_avatar`]; `card` must be the card it was
/// fitted against.
pub fn load_avatar(dir: &Path, card: Arc<ModelCard>) -> Result<BoundGaussianSet> {
    let m: AvatarManifest = blob::read_json(&dir.join("manifest.json"))?;
    if m.format != AVATAR_FORMAT || m.format_version != AVATAR_FORMAT_VERSION {
        return Err(Error::InvalidAsset(format!("unsupported avatar format {} v{}", m.format, m.format_version)));
    }
    if m.card_hash != card.content_hash() {
        return Err(Error::InvalidAsset("avatar was fitted against a different model card".into()));
    }
    let n = m.n_gaussians;
    if n != card.n_vertices() {
        return Err(Error::Shape(format!("avatar has {n} Gaussians, card has {} vertices", card.n_vertices())));
    }
    let read = |name: &str, cols: usize| -> Result<Vec<f64>> {
        let e = m.blobs.get(name).ok_or_else(|| Error::InvalidAsset(format!("avatar lacks `{name}`")))?;
        let expected: Vec<usize> = if cols == 1 { vec![n] } else { vec![n, cols] };
        if e.shape != expected {
            return Err(Error::Shape(format!("avatar blob `{name}` has shape {:?}", e.shape)));
        }
        blob::read_f64(dir, e)
    };
    let rows3 = |x: Vec<f64>| x.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect::<Vec<_>>();
    let attributes = GaussianAttributes {
        offsets: rows3(read("offsets", 3)?),
        rotations: read("rotations", 4)?.chunks_exact(4).map(|c| [c[0], c[1], c[2], c[3]]).collect(),
        log_scales: rows3(read("log_scales", 3)?),
        colors: rows3(read("colors", 3)?),
        opacity_logits: read("opacity_logits", 1)?,
    };
    attributes.validate()?;
    Ok(BoundGaussianSet {
        attributes,
        base: rows3(read("base", 3)?),
        card,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::check::check_gradient;
    use crate::camera::PinholeCamera;
    use crate::model::{make_toy_quadruped, subdivide};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tetra() -> ModelCard {
        let mut card = make_toy_quadruped(0);
        card.vertices = vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        card.faces = vec![[0, 2, 1], [0, 1, 3], [0, 3, 2], [1, 2, 3]];
        let nj = card.n_joints();
        card.skin_weights = (0..4).flat_map(|_| (0..nj).map(|j| if j == 0 { 1.0 } else { 0.0 })).collect();
        card.shape_basis = vec![0.0; 4 * 3 * card.n_shape];
        card.muscle_regions.clear();
        card.keypoint_anchors.truncate(1);
        card.keypoint_anchors[0] = crate::model::KeypointAnchor::Joint(0);
        card.keypoint_names.truncate(1);
        card
    }

    fn camera() -> PinholeCamera {
        PinholeCamera::look_at([0.0, 1.0, 6.0], [0.0, 1.0, 0.0], 64, 64).unwrap()
    }

    #[test]
    fn init_on_subdivided_tetrahedron() {
        let card = subdivide(&tetra()).unwrap();
        let set = init_bound_set(Arc::new(card.clone()));
        assert_eq!(set.len(), 10);
        assert_eq!(set.canonical_centers(), card.vertices);
        // Brute-force neighbor scan for the scales.
        for v in 0..card.n_vertices() {
            let mut neighbors = std::collections::BTreeSet::new();
            for f in &card.faces {
                if f.contains(&(v as u32)) {
                    neighbors.extend(f.iter().copied().filter(|&u| u != v as u32));
                }
            }
            let mean = neighbors.iter().map(|&u| (v3(card.vertices[v]) - v3(card.vertices[u as usize])).norm()).sum::<f64>()
                / neighbors.len() as f64;
            for s in set.attributes.scale(v) {
                assert!((s - 0.5 * mean).abs() < 1e-12);
            }
        }
        assert!((set.attributes.opacity(0) - 0.9).abs() < 1e-12);
    }

    #[test]
    fn identity_pose_keeps_centers() {
        let card = Arc::new(make_toy_quadruped(0));
        let set = init_bound_set(card.clone());
        let posed = deform_lbs(&set, &PoseState::rest(&card, camera())).unwrap();
        for (a, b) in posed.centers.iter().zip(&set.base) {
            for c in 0..3 {
                assert!((a[c] - b[c]).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn taped_deform_gradients() {
        let card = Arc::new(subdivide(&tetra()).unwrap());
        let set = init_bound_set(card.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut state = PoseState::rest(&card, camera());
        state.theta.iter_mut().flatten().for_each(|x| *x = rng.random_range(-0.4..0.4));
        let mesh = forward(&card, &state).unwrap();
        let n = set.len();
        let off: Vec<f64> = (0..3 * n).map(|_| rng.random_range(-0.01..0.01)).collect();
        let q: Vec<f64> = (0..4 * n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let s: Vec<f64> = (0..3 * n).map(|_| rng.random_range(-4.0..-2.0)).collect();
        let wc: Vec<f64> = (0..3 * n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let wv: Vec<f64> = (0..6 * n).map(|_| rng.random_range(-1e3..1e3)).collect();
        let inputs = vec![
            (off, Shape::Matrix(n, 3)),
            (q, Shape::Matrix(n, 4)),
            (s, Shape::Matrix(n, 3)),
        ];
        let report = check_gradient(&inputs, 1e-6, |t, v| {
            let uq = t.normalize_quat(v[1])?;
            let (c, cov) = deform_taped(t, &set, &mesh, v[0], uq, v[2])?;
            let a = t.constant(wc.clone(), c.shape())?;
            let b = t.constant(wv.clone(), cov.shape())?;
            let x = t.dot(c, a)?;
            let y = t.dot(cov, b)?;
            t.add(x, y)
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-5, "{}", report.max_rel_err);
    }

    #[test]
    fn avatar_round_trip_and_card_check() {
        let card = Arc::new(make_toy_quadruped(0));
        let mut set = init_bound_set(card.clone());
        set.attributes.colors[3] = [0.1, 0.2, 0.3];
        let dir = tempfile::tempdir().unwrap();
        save_avatar(&set, dir.path()).unwrap();
        let back = load_avatar(dir.path(), card.clone()).unwrap();
        assert_eq!(back.attributes, set.attributes);
        let other = Arc::new(make_toy_quadruped(1));
        assert!(load_avatar(dir.path(), other).is_err());
    }
}
