//! The model's forward pass as a single differentiable tape op.

use std::sync::Arc;

use nalgebra::{Matrix3, Vector3};

use super::{kinematic_chain, region_features, KeypointAnchor, ModelCard};
use crate::autodiff::{CustomOp, Shape, Tape, Var};
use crate::error::{Error, Result};
use crate::math::{arr3, mat3, v3};

/// A posed point requested from [`TapedPose::eval`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum PointQuery {
    Vertex(u32),
    Surface { vertices: [u32; 3], bary: [f64; 3] },
    Joint(u32),
}

impl From<&KeypointAnchor> for PointQuery {
    fn from(a: &KeypointAnchor) -> Self {
        match *a {
            KeypointAnchor::Surface { vertices, bary } => PointQuery::Surface { vertices, bary },
            KeypointAnchor::Joint(j) => PointQuery::Joint(j),
        }
    }
}

/// Precomputed evaluation plan for a fixed set of point queries.
///
/// Only vertices referenced by the queries are skinned, so keypoints and
/// silhouette samples stay cheap on large meshes.
pub struct TapedPose {
    plan: Arc<Plan>,
}

struct Plan {
    card: Arc<ModelCard>,
    queries: Vec<PointQuery>,
    /// Referenced vertex ids.
    used: Vec<usize>,
    /// Per referenced vertex: nonzero `(joint, weight)` pairs.
    weights: Vec<Vec<(usize, f64)>>,
    /// Per query: `(local vertex index, coefficient)` terms, or a joint.
    terms: Vec<QueryTerms>,
    /// Per region: `(row in region, local vertex index)` for referenced vertices.
    region_rows: Vec<Vec<(usize, usize)>>,
}

enum QueryTerms {
    Vertices(Vec<(usize, f64)>),
    Joint(usize),
}

impl TapedPose {
    pub fn new(card: Arc<ModelCard>, queries: Vec<PointQuery>) -> Result<Self> {
        let nv = card.n_vertices();
        let mut local = vec![usize::MAX; nv];
        let mut used = Vec::new();
        let mut touch = |v: u32, used: &mut Vec<usize>| -> Result<usize> {
            let v = v as usize;
            if v >= nv {
                return Err(Error::Invalid(format!("query references vertex {v} of {nv}")));
            }
            if local[v] == usize::MAX {
                local[v] = used.len();
                used.push(v);
            }
            Ok(local[v])
        };
        let mut terms = Vec::with_capacity(queries.len());
        for q in &queries {
            terms.push(match *q {
                PointQuery::Vertex(v) => QueryTerms::Vertices(vec![(touch(v, &mut used)?, 1.0)]),
                PointQuery::Surface { vertices, bary } => {
                    let mut t = Vec::with_capacity(3);
                    for (v, w) in vertices.into_iter().zip(bary) {
                        t.push((touch(v, &mut used)?, w));
                    }
                    QueryTerms::Vertices(t)
                }
                PointQuery::Joint(j) => {
                    if j as usize >= card.n_joints() {
                        return Err(Error::Invalid(format!("query references joint {j}")));
                    }
                    QueryTerms::Joint(j as usize)
                }
            });
        }
        let nj = card.n_joints();
        let weights = used
            .iter()
            .map(|&v| (0..nj).map(|j| (j, card.weight(v, j))).filter(|(_, w)| *w != 0.0).collect())
            .collect();
        let region_rows = card
            .muscle_regions
            .iter()
            .map(|r| {
                r.vertices
                    .iter()
                    .enumerate()
                    .filter(|(_, &v)| local[v as usize] != usize::MAX)
                    .map(|(i, &v)| (i, local[v as usize]))
                    .collect()
            })
            .collect();
        Ok(TapedPose {
            plan: Arc::new(Plan {
                card,
                queries,
                used,
                weights,
                terms,
                region_rows,
            }),
        })
    }

    /// Query points for every keypoint anchor of `card`.
    pub fn keypoints(card: Arc<ModelCard>) -> Result<Self> {
        let queries = card.keypoint_anchors.iter().map(PointQuery::from).collect();
        Self::new(card, queries)
    }

    pub fn queries(&self) -> &[PointQuery] {
        &self.plan.queries
    }

    pub fn card(&self) -> &ModelCard {
        &self.plan.card
    }

    /// Posed query points, `Q x 3`, from `beta` (B), `theta` (J x 3) and
    /// `gamma` (3).
    pub fn eval(&self, tape: &mut Tape, beta: Var, theta: Var, gamma: Var) -> Result<Var> {
        let card = &self.plan.card;
        let (nj, b) = (card.n_joints(), card.n_shape);
        if beta.len() != b || theta.len() != nj * 3 || gamma.len() != 3 {
            return Err(Error::Shape(format!(
                "posed points expect beta {b}, theta {nj}x3, gamma 3; got {:?}, {:?}, {:?}",
                beta.shape(),
                theta.shape(),
                gamma.shape()
            )));
        }
        let rot = tape.rodrigues(theta)?;
        let beta_v = tape.value(beta).to_vec();
        let rot_v: Vec<[f64; 9]> = tape.value(rot).chunks_exact(9).map(|c| c.try_into().unwrap()).collect();
        let gamma_v = v3(tape.value(gamma).try_into().unwrap());
        let (cache, out) = self.forward(&beta_v, &rot_v, gamma_v);
        let n = self.plan.queries.len();
        let op = PoseOp {
            plan: self.plan.clone(),
            cache,
        };
        tape.custom(Box::new(op), &[beta, rot, gamma], out, Shape::Matrix(n, 3))
    }

    fn forward(&self, beta: &[f64], rot: &[[f64; 9]], gamma: Vector3<f64>) -> (Cache, Vec<f64>) {
        let plan = &*self.plan;
        let card = &*plan.card;
        let b = card.n_shape;
        let rest = card.shaped_joints(beta);
        let (world_r, world_p) = kinematic_chain(&card.parents, &rest, rot);

        let mut shaped: Vec<Vector3<f64>> = plan
            .used
            .iter()
            .map(|&v| {
                let mut p = v3(card.vertices[v]);
                for c in 0..3 {
                    let row = &card.shape_basis[(v * 3 + c) * b..(v * 3 + c + 1) * b];
                    p[c] += row.iter().zip(beta).map(|(s, x)| s * x).sum::<f64>();
                }
                p
            })
            .collect();
        for (region, rows) in card.muscle_regions.iter().zip(&plan.region_rows) {
            if rows.is_empty() {
                continue;
            }
            let f = region_features(region, rot);
            let m = f.len();
            for &(i, l) in rows {
                for c in 0..3 {
                    let row = &region.basis[(i * 3 + c) * m..(i * 3 + c + 1) * m];
                    shaped[l][c] += row.iter().zip(&f).map(|(a, b)| a * b).sum::<f64>();
                }
            }
        }
        let skin_t: Vec<Vector3<f64>> = (0..card.n_joints()).map(|j| world_p[j] - world_r[j] * v3(rest[j])).collect();
        let posed: Vec<Vector3<f64>> = shaped
            .iter()
            .zip(&plan.weights)
            .map(|(x, ws)| {
                let mut y = gamma;
                for &(j, w) in ws {
                    y += (world_r[j] * x + skin_t[j]) * w;
                }
                y
            })
            .collect();
        let mut out = Vec::with_capacity(plan.queries.len() * 3);
        for t in &plan.terms {
            let p = match t {
                QueryTerms::Vertices(terms) => terms.iter().map(|&(l, w)| posed[l] * w).sum(),
                QueryTerms::Joint(j) => world_p[*j] + gamma,
            };
            out.extend_from_slice(&arr3(&p));
        }
        (
            Cache {
                rest,
                world_r,
                shaped,
            },
            out,
        )
    }
}

struct Cache {
    rest: Vec<[f64; 3]>,
    world_r: Vec<Matrix3<f64>>,
    shaped: Vec<Vector3<f64>>,
}

struct PoseOp {
    plan: Arc<Plan>,
    cache: Cache,
}

impl CustomOp for PoseOp {
    fn name(&self) -> &str {
        "posed_points"
    }

    fn backward(&self, inputs: &[&[f64]], _output: &[f64], g: &[f64], gi: &mut [Option<Vec<f64>>]) {
        let plan = &*self.plan;
        let card = &*plan.card;
        let (nj, b) = (card.n_joints(), card.n_shape);
        let c = &self.cache;
        let rot = inputs[1];

        let mut g_gamma = Vector3::zeros();
        let mut g_posed = vec![Vector3::zeros(); plan.used.len()];
        let mut g_wp = vec![Vector3::<f64>::zeros(); nj];
        let mut g_wr = vec![Matrix3::<f64>::zeros(); nj];
        for (q, t) in plan.terms.iter().enumerate() {
            let gq = Vector3::new(g[q * 3], g[q * 3 + 1], g[q * 3 + 2]);
            g_gamma += gq;
            match t {
                QueryTerms::Vertices(terms) => {
                    for &(l, w) in terms {
                        g_posed[l] += gq * w;
                    }
                }
                QueryTerms::Joint(j) => g_wp[*j] += gq,
            }
        }

        // Skinning: y = sum_j w_j (W_j x + P_j - W_j Jr_j).
        let mut g_shaped = vec![Vector3::zeros(); plan.used.len()];
        let mut g_rest = vec![Vector3::<f64>::zeros(); nj];
        for (l, ws) in plan.weights.iter().enumerate() {
            let gy = g_posed[l];
            if gy == Vector3::zeros() {
                continue;
            }
            for &(j, w) in ws {
                let gyw = gy * w;
                g_shaped[l] += c.world_r[j].transpose() * gyw;
                g_wr[j] += gyw * (c.shaped[l] - v3(c.rest[j])).transpose();
                g_wp[j] += gyw;
                g_rest[j] -= c.world_r[j].transpose() * gyw;
            }
        }

        // Kinematic chain, children before parents.
        let mut g_rot = vec![0.0; nj * 9];
        for j in (0..nj).rev() {
            let local = mat3(rot[j * 9..j * 9 + 9].try_into().unwrap());
            match card.parents[j] {
                None => {
                    add_mat(&mut g_rot[j * 9..j * 9 + 9], &g_wr[j]);
                    g_rest[j] += g_wp[j];
                }
                Some(p) => {
                    let offset = v3(c.rest[j]) - v3(c.rest[p]);
                    let gp = g_wp[j];
                    let gw = g_wr[j];
                    g_wr[p] += gp * offset.transpose() + gw * local.transpose();
                    let g_off = c.world_r[p].transpose() * gp;
                    g_rest[j] += g_off;
                    g_rest[p] -= g_off;
                    g_wp[p] += gp;
                    add_mat(&mut g_rot[j * 9..j * 9 + 9], &(c.world_r[p].transpose() * gw));
                }
            }
        }

        // Pose correctives.
        for (region, rows) in card.muscle_regions.iter().zip(&plan.region_rows) {
            if rows.is_empty() {
                continue;
            }
            let m = region.feature_len();
            let mut gf = vec![0.0; m];
            for &(i, l) in rows {
                for ch in 0..3 {
                    let gx = g_shaped[l][ch];
                    if gx == 0.0 {
                        continue;
                    }
                    let row = &region.basis[(i * 3 + ch) * m..(i * 3 + ch + 1) * m];
                    gf.iter_mut().zip(row).for_each(|(a, r)| *a += r * gx);
                }
            }
            for (q, &d) in region.drivers.iter().enumerate() {
                let d = d as usize;
                for k in 0..9 {
                    g_rot[d * 9 + k] += gf[q * 9 + k];
                }
            }
        }

        if let Some(gb) = &mut gi[0] {
            for (l, &v) in plan.used.iter().enumerate() {
                for ch in 0..3 {
                    let gx = g_shaped[l][ch];
                    let row = &card.shape_basis[(v * 3 + ch) * b..(v * 3 + ch + 1) * b];
                    gb.iter_mut().zip(row).for_each(|(a, s)| *a += s * gx);
                }
            }
            for j in 0..nj {
                for ch in 0..3 {
                    let gj = g_rest[j][ch];
                    let row = &card.joint_shape_basis[(j * 3 + ch) * b..(j * 3 + ch + 1) * b];
                    gb.iter_mut().zip(row).for_each(|(a, s)| *a += s * gj);
                }
            }
        }
        if let Some(gr) = &mut gi[1] {
            gr.iter_mut().zip(&g_rot).for_each(|(a, x)| *a += x);
        }
        if let Some(gg) = &mut gi[2] {
            for ch in 0..3 {
                gg[ch] += g_gamma[ch];
            }
        }
    }
}

fn add_mat(dst: &mut [f64], m: &Matrix3<f64>) {
    for r in 0..3 {
        for c in 0..3 {
            dst[r * 3 + c] += m[(r, c)];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::check::check_gradient;
    use crate::camera::PinholeCamera;
    use crate::model::{forward, keypoints_3d, make_toy_quadruped, PoseState};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_state(card: &ModelCard, rng: &mut ChaCha8Rng) -> PoseState {
        let cam = PinholeCamera::look_at([0.0, 1.0, 6.0], [0.0, 1.0, 0.0], 64, 64).unwrap();
        let mut s = PoseState::rest(card, cam);
        s.beta.iter_mut().for_each(|x| *x = rng.random_range(-1.0..1.0));
        s.theta.iter_mut().flatten().for_each(|x| *x = rng.random_range(-0.5..0.5));
        s.gamma = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
        s
    }

    #[test]
    fn matches_plain_forward() {
        let card = Arc::new(make_toy_quadruped(1));
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut queries: Vec<PointQuery> = (0..card.n_vertices() as u32).step_by(7).map(PointQuery::Vertex).collect();
        queries.extend(card.keypoint_anchors.iter().map(PointQuery::from));
        let plan = TapedPose::new(card.clone(), queries.clone()).unwrap();
        for _ in 0..5 {
            let s = random_state(&card, &mut rng);
            let mesh = forward(&card, &s).unwrap();
            let kp = keypoints_3d(&card, &mesh);
            let mut tape = Tape::new();
            let beta = tape.var(s.beta.clone(), Shape::Vector(card.n_shape)).unwrap();
            let theta = tape.var(s.theta_flat(), Shape::Matrix(card.n_joints(), 3)).unwrap();
            let gamma = tape.var(s.gamma.to_vec(), Shape::Vector(3)).unwrap();
            let out = plan.eval(&mut tape, beta, theta, gamma).unwrap();
            let out = tape.value(out);
            let n_vq = queries.len() - kp.len();
            for (q, query) in queries.iter().enumerate() {
                let expected = match query {
                    PointQuery::Vertex(v) => mesh.vertices[*v as usize],
                    _ => kp[q - n_vq],
                };
                for ch in 0..3 {
                    assert!((out[q * 3 + ch] - expected[ch]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let card = Arc::new(make_toy_quadruped(2));
        let mut queries: Vec<PointQuery> = card.keypoint_anchors.iter().map(PointQuery::from).collect();
        for r in &card.muscle_regions {
            queries.push(PointQuery::Vertex(r.vertices[r.vertices.len() / 2]));
        }
        let plan = TapedPose::new(card.clone(), queries).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..5 {
            let s = random_state(&card, &mut rng);
            let n = plan.queries().len() * 3;
            let w: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let inputs = vec![
                (s.beta.clone(), Shape::Vector(card.n_shape)),
                (s.theta_flat(), Shape::Matrix(card.n_joints(), 3)),
                (s.gamma.to_vec(), Shape::Vector(3)),
            ];
            let report = check_gradient(&inputs, 1e-6, |t, v| {
                let p = plan.eval(t, v[0], v[1], v[2])?;
                let wv = t.constant(w.clone(), p.shape())?;
                t.dot(p, wv)
            })
            .unwrap();
            assert!(report.max_rel_err < 1e-6, "{}", report.max_rel_err);
        }
    }
}
