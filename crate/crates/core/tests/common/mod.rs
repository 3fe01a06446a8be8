//! Independent reference implementations and scene builders shared by the
//! integration tests.
#![allow(dead_code)]

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Matrix4, Rotation3, Vector3, Vector4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use skinsplat::camera::{orbit_eye, PinholeCamera};
use skinsplat::datagen::{procedural_gait, vertex_colors, GaitKind, MotionSource, TextureSpec};
use skinsplat::gaussian::{covariance_matrix, PosedGaussians};
use skinsplat::model::{forward, ModelCard, PoseState};
use skinsplat::optim::AvatarView;
use skinsplat::render::{mesh_raster, SplatConfig};

/// Per-pixel global depth sort over every Gaussian, no tiling and no
/// culling. Returns interleaved RGBA.
pub fn brute_force_splat(g: &PosedGaussians, cam: &PinholeCamera, bg: [f64; 3], cfg: &SplatConfig) -> Vec<f64> {
    let (w, h) = (cam.width as usize, cam.height as usize);
    let r = cam.rotation_matrix();
    let mut order: Vec<(f64, usize)> = Vec::new();
    let mut proj = Vec::new();
    for i in 0..g.len() {
        let t = r * Vector3::from(g.centers[i]) + Vector3::from(cam.translation);
        proj.push(t);
        if t.z > cfg.near {
            order.push((t.z, i));
        }
    }
    order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut out = vec![0.0; w * h * 4];
    for y in 0..h {
        for x in 0..w {
            let mut t_acc = 1.0;
            let mut c = [0.0; 3];
            for &(_, i) in &order {
                let t = proj[i];
                let j = Matrix2x3::new(
                    cam.fx / t.z,
                    0.0,
                    -cam.fx * t.x / (t.z * t.z),
                    0.0,
                    cam.fy / t.z,
                    -cam.fy * t.y / (t.z * t.z),
                );
                let s: Matrix2<f64> =
                    j * r * covariance_matrix(&g.covariances[i]) * r.transpose() * j.transpose() + Matrix2::identity() * cfg.low_pass;
                let inv = s.try_inverse().unwrap();
                let m = [cam.fx * t.x / t.z + cam.cx, cam.fy * t.y / t.z + cam.cy];
                let d = nalgebra::Vector2::new(x as f64 + 0.5 - m[0], y as f64 + 0.5 - m[1]);
                let alpha = (g.opacities[i] * (-0.5 * d.dot(&(inv * d))).exp()).min(cfg.alpha_max);
                for ch in 0..3 {
                    c[ch] += g.colors[i][ch] * alpha * t_acc;
                }
                t_acc *= 1.0 - alpha;
                if t_acc < cfg.min_transmittance {
                    break;
                }
            }
            let p = y * w + x;
            for ch in 0..3 {
                out[p * 4 + ch] = c[ch] + t_acc * bg[ch];
            }
            out[p * 4 + 3] = 1.0 - t_acc;
        }
    }
    out
}

/// `n` Gaussians with random anisotropic covariances around the origin.
pub fn random_scene(rng: &mut ChaCha8Rng, n: usize) -> PosedGaussians {
    let mut g = PosedGaussians::default();
    for _ in 0..n {
        g.centers.push([rng.random_range(-1.2..1.2), rng.random_range(-1.2..1.2), rng.random_range(-1.5..1.5)]);
        let a = Matrix3::from_fn(|_, _| rng.random_range(-1.0..1.0));
        let s: f64 = rng.random_range(0.02..0.25);
        let cov = a * a.transpose() * (s * s) + Matrix3::identity() * (0.05 * s * s);
        g.covariances.push([cov[(0, 0)], cov[(0, 1)], cov[(0, 2)], cov[(1, 1)], cov[(1, 2)], cov[(2, 2)]]);
        g.colors.push([rng.random(), rng.random(), rng.random()]);
        g.opacities.push(rng.random_range(0.05..1.0));
    }
    g
}

/// Largest absolute difference between a render and the RGBA oracle.
pub fn splat_oracle_error(ours: &skinsplat::render::RenderTarget, oracle: &[f64]) -> f64 {
    let n = ours.alpha.data.len();
    let mut worst: f64 = 0.0;
    for p in 0..n {
        for ch in 0..3 {
            worst = worst.max((ours.color.data[p * 3 + ch] - oracle[p * 4 + ch]).abs());
        }
        worst = worst.max((ours.alpha.data[p] - oracle[p * 4 + 3]).abs());
    }
    worst
}

fn homogeneous(r: &Matrix3<f64>, t: Vector3<f64>) -> Matrix4<f64> {
    let mut m = Matrix4::identity();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(r);
    m.fixed_view_mut::<3, 1>(0, 3).copy_from(&t);
    m
}

/// Textbook linear blend skinning with 4x4 homogeneous joint transforms:
/// `G_j = G_parent [R_j | J_j - J_parent]`, `A_j = G_j [I | -J_j]`, then
/// `v' = sum_j w_vj A_j v + gamma` on the shaped, corrected template.
pub fn naive_lbs(card: &ModelCard, state: &PoseState) -> Vec<[f64; 3]> {
    let nb = card.n_shape;
    let nj = card.n_joints();
    let dot = |row: &[f64]| row.iter().zip(&state.beta).map(|(a, b)| a * b).sum::<f64>();
    let joints: Vec<Vector3<f64>> = (0..nj)
        .map(|j| Vector3::from_fn(|c, _| card.joints[j][c] + dot(&card.joint_shape_basis[(j * 3 + c) * nb..(j * 3 + c + 1) * nb])))
        .collect();
    let mut verts: Vec<Vector3<f64>> = (0..card.n_vertices())
        .map(|v| Vector3::from_fn(|c, _| card.vertices[v][c] + dot(&card.shape_basis[(v * 3 + c) * nb..(v * 3 + c + 1) * nb])))
        .collect();
    let rot: Vec<Matrix3<f64>> = state
        .theta
        .iter()
        .map(|w| *Rotation3::from_scaled_axis(Vector3::from(*w)).matrix())
        .collect();
    for region in &card.muscle_regions {
        let feats: Vec<f64> = region
            .drivers
            .iter()
            .flat_map(|&d| {
                let m = rot[d as usize] - Matrix3::identity();
                (0..9).map(move |k| m[(k / 3, k % 3)])
            })
            .collect();
        let m = feats.len();
        for (i, &v) in region.vertices.iter().enumerate() {
            for c in 0..3 {
                let row = &region.basis[(i * 3 + c) * m..(i * 3 + c + 1) * m];
                verts[v as usize][c] += row.iter().zip(&feats).map(|(a, b)| a * b).sum::<f64>();
            }
        }
    }
    let mut global: Vec<Matrix4<f64>> = Vec::with_capacity(nj);
    for j in 0..nj {
        let g = match card.parents[j] {
            None => homogeneous(&rot[j], joints[j]),
            Some(p) => global[p] * homogeneous(&rot[j], joints[j] - joints[p]),
        };
        global.push(g);
    }
    let skin: Vec<Matrix4<f64>> = (0..nj).map(|j| global[j] * homogeneous(&Matrix3::identity(), -joints[j])).collect();
    verts
        .iter()
        .enumerate()
        .map(|(v, p)| {
            let mut a = Matrix4::zeros();
            for j in 0..nj {
                a += skin[j] * card.weight(v, j);
            }
            let q = a * Vector4::new(p.x, p.y, p.z, 1.0);
            [q.x + state.gamma[0], q.y + state.gamma[1], q.z + state.gamma[2]]
        })
        .collect()
}

/// O(nm) symmetric Chamfer distance.
pub fn brute_chamfer(a: &[[f64; 3]], b: &[[f64; 3]]) -> f64 {
    let d = |p: &[f64; 3], q: &[f64; 3]| ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)).sqrt();
    let one_way = |x: &[[f64; 3]], y: &[[f64; 3]]| {
        x.iter().map(|p| y.iter().map(|q| d(p, q)).fold(f64::INFINITY, f64::min)).sum::<f64>() / x.len() as f64
    };
    0.5 * (one_way(a, b) + one_way(b, a))
}

pub fn random_cloud(rng: &mut ChaCha8Rng, n: usize) -> Vec<[f64; 3]> {
    (0..n).map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]).collect()
}

/// Number of distinct undirected edges of a triangle list.
pub fn count_edges(faces: &[[u32; 3]]) -> usize {
    let mut edges = std::collections::HashSet::new();
    for f in faces {
        for k in 0..3 {
            let (a, b) = (f[k], f[(k + 1) % 3]);
            edges.insert((a.min(b), a.max(b)));
        }
    }
    edges.len()
}

/// Multi-view capture of the textured toy animal for avatar fitting.
pub struct AvatarScene {
    pub motion: MotionSource,
    pub colors: Vec<[f64; 3]>,
    pub light: [f64; 3],
    pub resolution: u32,
}

impl AvatarScene {
    pub fn new(card: &ModelCard, texture: u64, resolution: u32) -> Self {
        AvatarScene {
            motion: procedural_gait(card, GaitKind::Walk, 16, 60.0, 3, 1.0).unwrap(),
            colors: vertex_colors(card, &TextureSpec::from_id(texture)).unwrap(),
            light: [0.3, 1.0, 0.6],
            resolution,
        }
    }

    pub fn camera(&self, card: &ModelCard, azimuth: f64, pitch: f64) -> PinholeCamera {
        let target = card.center();
        let eye = orbit_eye(target, pitch, azimuth, 2.0 * card.body_length());
        PinholeCamera::look_at(eye, target, self.resolution, self.resolution).unwrap()
    }

    /// Ground-truth mesh render of gait frame `frame` seen from `camera`.
    pub fn view(&self, card: &ModelCard, frame: usize, camera: PinholeCamera) -> AvatarView {
        let state = PoseState {
            beta: vec![0.0; card.n_shape],
            theta: self.motion.theta[frame].clone(),
            gamma: self.motion.gamma[frame],
            camera,
        };
        let mesh = forward(card, &state).unwrap();
        let out = mesh_raster(&mesh.vertices, &card.faces, &self.colors, &state.camera, self.light, [0.0; 3]).unwrap();
        AvatarView { image: out.target.color.quantized(), mask: out.mask, state }
    }

    /// Eight training views on a ring with alternating elevation.
    pub fn training_views(&self, card: &ModelCard, frame: usize) -> Vec<AvatarView> {
        (0..8)
            .map(|i| {
                let pitch = if i % 2 == 0 { 10.0 } else { -5.0 };
                self.view(card, frame, self.camera(card, i as f64 * 45.0, pitch))
            })
            .collect()
    }
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
