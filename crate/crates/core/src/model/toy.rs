//! Procedural quadruped used in place of a licensed body asset.
//!
//! The body is a union of closed tubes (torso, neck, head, tail, four legs)
//! swept along a 20-joint skeleton. The x axis points toward the head, y is
//! up and the ground plane is `y = 0`.

use std::collections::BTreeMap;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{vertex_normals, KeypointAnchor, ModelCard, MuscleRegion};
use crate::math::{arr3, v3};

pub const TOY_JOINTS: [&str; 20] = [
    "root",
    "spine_mid",
    "spine_chest",
    "neck_base",
    "neck_mid",
    "head",
    "tail_base",
    "tail_mid",
    "fl_upper",
    "fl_knee",
    "fl_fetlock",
    "fr_upper",
    "fr_knee",
    "fr_fetlock",
    "hl_upper",
    "hl_knee",
    "hl_fetlock",
    "hr_upper",
    "hr_knee",
    "hr_fetlock",
];

const PARENTS: [Option<usize>; 20] = [
    None,
    Some(0),
    Some(1),
    Some(2),
    Some(3),
    Some(4),
    Some(0),
    Some(6),
    Some(2),
    Some(8),
    Some(9),
    Some(2),
    Some(11),
    Some(12),
    Some(0),
    Some(14),
    Some(15),
    Some(0),
    Some(17),
    Some(18),
];

pub const TOY_KEYPOINTS: [&str; 21] = [
    "nose",
    "eye_l",
    "eye_r",
    "poll",
    "throat",
    "withers",
    "croup",
    "tail_base",
    "tail_tip",
    "fl_knee",
    "fl_fetlock",
    "fl_hoof",
    "fr_knee",
    "fr_fetlock",
    "fr_hoof",
    "hl_knee",
    "hl_fetlock",
    "hl_hoof",
    "hr_knee",
    "hr_fetlock",
    "hr_hoof",
];

const SHAPE_MODES: usize = 4;

#[derive(Clone, Copy, PartialEq, Eq)]
enum PartKind {
    Torso,
    Neck,
    Head,
    Tail,
    Leg,
}

/// One closed tube of the body.
struct Part {
    kind: PartKind,
    first_vertex: usize,
    first_face: usize,
    n_faces: usize,
    /// Skeleton point each vertex was swept from.
    centers: Vec<Vector3<f64>>,
    /// Candidate joints for skinning.
    joints: Vec<usize>,
    sigma: f64,
}

struct Skeleton {
    joints: Vec<Vector3<f64>>,
    /// End point of each joint's bone.
    bone_end: Vec<Vector3<f64>>,
    neck_dir: Vector3<f64>,
    neck_len: f64,
    head_dir: Vector3<f64>,
    muzzle: Vector3<f64>,
    tail_tip: Vector3<f64>,
    hoofs: [Vector3<f64>; 4],
    torso_y: f64,
}

struct Dims {
    leg: f64,
    torso_len: f64,
    girth: f64,
    neck_len: f64,
    neck_angle: f64,
    head_len: f64,
    tail_len: f64,
    stance: f64,
}

impl Dims {
    fn sample(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut j = |x: f64, rel: f64| x * (1.0 + rel * rng.random_range(-1.0..1.0));
        Dims {
            leg: j(1.0, 0.06),
            torso_len: j(1.0, 0.06),
            girth: j(1.0, 0.08),
            neck_len: j(0.6, 0.08),
            neck_angle: j(55f64.to_radians(), 0.08),
            head_len: j(0.5, 0.06),
            tail_len: j(0.6, 0.1),
            stance: j(0.2, 0.08),
        }
    }
}

fn skeleton(d: &Dims) -> Skeleton {
    let yc = 0.1 + 1.1 * d.leg;
    let l = d.torso_len;
    let mut j = vec![Vector3::zeros(); 20];
    j[0] = Vector3::new(-0.6 * l, yc, 0.0);
    j[1] = Vector3::new(0.0, yc + 0.02, 0.0);
    j[2] = Vector3::new(0.55 * l, yc + 0.05, 0.0);
    j[3] = Vector3::new(0.8 * l, yc + 0.15, 0.0);
    let neck_dir = Vector3::new(d.neck_angle.cos(), d.neck_angle.sin(), 0.0);
    j[4] = j[3] + neck_dir * (d.neck_len / 2.0);
    j[5] = j[3] + neck_dir * d.neck_len;
    let head_dir = Vector3::new((-40f64).to_radians().cos(), (-40f64).to_radians().sin(), 0.0);
    let muzzle = j[5] + head_dir * d.head_len;
    j[6] = Vector3::new(-0.95 * l, yc + 0.05, 0.0);
    let tail_dir = Vector3::new(-0.5, -0.866, 0.0).normalize();
    j[7] = j[6] + tail_dir * (d.tail_len / 2.0);
    let tail_tip = j[6] + tail_dir * d.tail_len;
    let mut hoofs = [Vector3::zeros(); 4];
    for (leg, (x, z)) in [(0.5 * l, 1.0), (0.5 * l, -1.0), (-0.55 * l, 1.0), (-0.55 * l, -1.0)].into_iter().enumerate() {
        let z = z * d.stance;
        let base = 8 + 3 * leg;
        j[base] = Vector3::new(x, yc - 0.15, z);
        j[base + 1] = Vector3::new(x, 0.55 * d.leg, z);
        j[base + 2] = Vector3::new(x, 0.2 * d.leg, z);
        hoofs[leg] = Vector3::new(x, 0.02, z);
    }
    let mut bone_end = vec![Vector3::zeros(); 20];
    bone_end[0] = j[1];
    bone_end[1] = j[2];
    bone_end[2] = j[3];
    bone_end[3] = j[4];
    bone_end[4] = j[5];
    bone_end[5] = muzzle;
    bone_end[6] = j[7];
    bone_end[7] = tail_tip;
    for leg in 0..4 {
        let base = 8 + 3 * leg;
        bone_end[base] = j[base + 1];
        bone_end[base + 1] = j[base + 2];
        bone_end[base + 2] = hoofs[leg];
    }
    Skeleton {
        joints: j,
        bone_end,
        neck_dir,
        neck_len: d.neck_len,
        head_dir,
        muzzle,
        tail_tip,
        hoofs,
        torso_y: yc,
    }
}

/// Sweeps a closed tube along `path`; `radii[i]` is the (u, w) half-width at
/// `path[i]`.
fn sweep(
    path: &[Vector3<f64>],
    radii: &[(f64, f64)],
    rings: usize,
    segments: usize,
    vertices: &mut Vec<[f64; 3]>,
    faces: &mut Vec<[u32; 3]>,
) -> Vec<Vector3<f64>> {
    let mut arc = vec![0.0];
    for w in path.windows(2) {
        arc.push(arc.last().unwrap() + (w[1] - w[0]).norm());
    }
    let total = *arc.last().unwrap();
    let at = |s: f64| -> (Vector3<f64>, Vector3<f64>, (f64, f64)) {
        let i = (1..arc.len()).find(|&i| arc[i] >= s).unwrap_or(arc.len() - 1);
        let t = ((s - arc[i - 1]) / (arc[i] - arc[i - 1])).clamp(0.0, 1.0);
        let p = path[i - 1] + (path[i] - path[i - 1]) * t;
        let r = (
            radii[i - 1].0 + (radii[i].0 - radii[i - 1].0) * t,
            radii[i - 1].1 + (radii[i].1 - radii[i - 1].1) * t,
        );
        (p, (path[i] - path[i - 1]).normalize(), r)
    };

    let base = vertices.len() as u32;
    let mut centers = Vec::new();
    let (_, t0, r0) = at(0.0);
    let reference = if t0.y.abs() > 0.9 { Vector3::x() } else { Vector3::y() };
    let mut u = (reference - t0 * reference.dot(&t0)).normalize();
    let mut first_tangent = t0;
    let mut last_tangent = t0;
    let mut last_radius = r0;
    for i in 0..rings {
        let s = total * i as f64 / (rings - 1) as f64;
        let (p, tangent, r) = at(s);
        u = (u - tangent * u.dot(&tangent)).normalize();
        let w = tangent.cross(&u);
        for k in 0..segments {
            let phi = std::f64::consts::TAU * k as f64 / segments as f64;
            vertices.push(arr3(&(p + u * (r.0 * phi.cos()) + w * (r.1 * phi.sin()))));
            centers.push(p);
        }
        if i == 0 {
            first_tangent = tangent;
        }
        last_tangent = tangent;
        last_radius = r;
    }
    let cap0 = path[0] - first_tangent * (0.5 * r0.0.min(r0.1));
    let cap1 = *path.last().unwrap() + last_tangent * (0.5 * last_radius.0.min(last_radius.1));
    let start_pole = vertices.len() as u32;
    vertices.push(arr3(&cap0));
    centers.push(path[0]);
    vertices.push(arr3(&cap1));
    centers.push(*path.last().unwrap());
    let end_pole = start_pole + 1;

    let idx = |i: usize, k: usize| base + (i * segments + k % segments) as u32;
    let first_face = faces.len();
    for i in 0..rings - 1 {
        for k in 0..segments {
            faces.push([idx(i, k), idx(i, k + 1), idx(i + 1, k + 1)]);
            faces.push([idx(i, k), idx(i + 1, k + 1), idx(i + 1, k)]);
        }
    }
    for k in 0..segments {
        faces.push([start_pole, idx(0, k + 1), idx(0, k)]);
        faces.push([end_pole, idx(rings - 1, k), idx(rings - 1, k + 1)]);
    }
    // Make the winding outward.
    let volume: f64 = faces[first_face..]
        .iter()
        .map(|f| {
            let [a, b, c] = f.map(|i| v3(vertices[i as usize]));
            a.dot(&b.cross(&c))
        })
        .sum();
    if volume < 0.0 {
        for f in &mut faces[first_face..] {
            f.swap(1, 2);
        }
    }
    centers
}

fn segment_distance(p: Vector3<f64>, a: Vector3<f64>, b: Vector3<f64>) -> f64 {
    let ab = b - a;
    let t = ((p - a).dot(&ab) / ab.norm_squared().max(1e-18)).clamp(0.0, 1.0);
    (p - (a + ab * t)).norm()
}

/// Deterministic procedural quadruped; `seed` jitters the proportions and
/// the muscle correctives.
pub fn make_toy_quadruped(seed: u64) -> ModelCard {
    let dims = Dims::sample(seed);
    let sk = skeleton(&dims);
    let j = &sk.joints;
    let g = dims.girth;
    let yc = sk.torso_y;
    let l = dims.torso_len;

    let mut vertices = Vec::new();
    let mut faces = Vec::new();
    let mut parts = Vec::new();
    let mut add = |kind: PartKind,
                   path: Vec<Vector3<f64>>,
                   radii: Vec<(f64, f64)>,
                   rings: usize,
                   segments: usize,
                   joints: Vec<usize>,
                   sigma: f64,
                   vertices: &mut Vec<[f64; 3]>,
                   faces: &mut Vec<[u32; 3]>| {
        let first_vertex = vertices.len();
        let first_face = faces.len();
        let centers = sweep(&path, &radii, rings, segments, vertices, faces);
        parts.push(Part {
            kind,
            first_vertex,
            first_face,
            n_faces: faces.len() - first_face,
            centers,
            joints,
            sigma,
        });
    };

    add(
        PartKind::Torso,
        vec![
            Vector3::new(-1.0 * l, yc, 0.0),
            j[0],
            j[1],
            j[2],
            Vector3::new(0.88 * l, yc + 0.1, 0.0),
        ],
        vec![
            (0.2 * g, 0.17 * g),
            (0.3 * g, 0.25 * g),
            (0.33 * g, 0.27 * g),
            (0.31 * g, 0.24 * g),
            (0.17 * g, 0.14 * g),
        ],
        22,
        20,
        vec![0, 1, 2],
        0.25,
        &mut vertices,
        &mut faces,
    );
    add(
        PartKind::Neck,
        vec![j[3] - sk.neck_dir * 0.12, j[4], j[5] + sk.neck_dir * 0.04],
        vec![(0.15 * g, 0.11 * g), (0.12 * g, 0.09 * g), (0.1 * g, 0.08 * g)],
        10,
        14,
        vec![2, 3, 4],
        0.12,
        &mut vertices,
        &mut faces,
    );
    add(
        PartKind::Head,
        vec![j[5] - sk.head_dir * 0.04, j[5] + sk.head_dir * (0.4 * dims.head_len), sk.muzzle],
        vec![(0.11 * g, 0.09 * g), (0.1 * g, 0.08 * g), (0.07 * g, 0.06 * g)],
        10,
        14,
        vec![4, 5],
        0.08,
        &mut vertices,
        &mut faces,
    );
    add(
        PartKind::Tail,
        vec![j[6], j[7], sk.tail_tip],
        vec![(0.06, 0.06), (0.04, 0.04), (0.02, 0.02)],
        10,
        8,
        vec![6, 7],
        0.1,
        &mut vertices,
        &mut faces,
    );
    for leg in 0..4 {
        let b = 8 + 3 * leg;
        add(
            PartKind::Leg,
            vec![j[b] + Vector3::new(0.0, 0.12, 0.0), j[b], j[b + 1], j[b + 2], sk.hoofs[leg]],
            vec![(0.11, 0.1), (0.1, 0.09), (0.065, 0.06), (0.05, 0.05), (0.06, 0.06)],
            18,
            12,
            vec![b, b + 1, b + 2],
            0.08,
            &mut vertices,
            &mut faces,
        );
    }

    let nv = vertices.len();
    let nj = TOY_JOINTS.len();

    let mut skin_weights = vec![0.0; nv * nj];
    for part in &parts {
        for (i, c) in part.centers.iter().enumerate() {
            let v = part.first_vertex + i;
            let mut w: Vec<(usize, f64)> = part
                .joints
                .iter()
                .map(|&jj| {
                    let d = segment_distance(*c, j[jj], sk.bone_end[jj]);
                    (jj, (-(d / part.sigma).powi(2)).exp())
                })
                .collect();
            let max = w.iter().map(|x| x.1).fold(0.0, f64::max);
            w.retain(|x| x.1 >= 1e-3 * max);
            let sum: f64 = w.iter().map(|x| x.1).sum();
            for (jj, x) in w {
                skin_weights[v * nj + jj] = x / sum;
            }
        }
    }

    let mut shape_basis = vec![0.0; nv * 3 * SHAPE_MODES];
    let mut joint_shape_basis = vec![0.0; nj * 3 * SHAPE_MODES];
    let leg_top = yc - 0.15;
    let lift = |y: f64| 0.12 * (y / leg_top).clamp(0.0, 1.0);
    let neck_u = |p: Vector3<f64>| ((p - j[3]).dot(&sk.neck_dir) / sk.neck_len).clamp(0.0, 1.0);
    let set = |basis: &mut Vec<f64>, row: usize, mode: usize, d: Vector3<f64>| {
        for c in 0..3 {
            basis[(row * 3 + c) * SHAPE_MODES + mode] = d[c];
        }
    };
    for part in &parts {
        for (i, c) in part.centers.iter().enumerate() {
            let v = part.first_vertex + i;
            let p = v3(vertices[v]);
            set(&mut shape_basis, v, 0, p * 0.1);
            set(&mut shape_basis, v, 1, Vector3::new(0.0, lift(p.y), 0.0));
            if part.kind == PartKind::Torso {
                let o = p - c;
                if o.norm() > 1e-9 {
                    let dir = o / o.norm();
                    let bump = (-((c.x - j[1].x) / 0.45).powi(2)).exp();
                    set(&mut shape_basis, v, 2, dir * (0.06 * bump * (1.0 - dir.y) / 2.0));
                }
            }
            match part.kind {
                PartKind::Neck => set(&mut shape_basis, v, 3, sk.neck_dir * (0.12 * neck_u(p))),
                PartKind::Head => set(&mut shape_basis, v, 3, sk.neck_dir * 0.12),
                _ => {}
            }
        }
    }
    for (jj, p) in j.iter().enumerate() {
        set(&mut joint_shape_basis, jj, 0, p * 0.1);
        set(&mut joint_shape_basis, jj, 1, Vector3::new(0.0, lift(p.y), 0.0));
        if jj == 4 || jj == 5 {
            set(&mut joint_shape_basis, jj, 3, sk.neck_dir * (0.12 * neck_u(*p)));
        }
    }

    let normals = vertex_normals(&vertices, &faces);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6d75_7363_6c65);
    let region_specs: [(&str, usize, [usize; 2]); 5] = [
        ("shoulder_l", 8, [8, 9]),
        ("shoulder_r", 11, [11, 12]),
        ("haunch_l", 14, [14, 15]),
        ("haunch_r", 17, [17, 18]),
        ("neck", 4, [3, 4]),
    ];
    let radius = 0.3;
    let muscle_regions = region_specs
        .iter()
        .map(|&(name, center, drivers)| {
            let coeffs: Vec<f64> = (0..18).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mut ids = Vec::new();
            let mut basis = Vec::new();
            for (v, p) in vertices.iter().enumerate() {
                let d = (v3(*p) - j[center]).norm();
                if d >= radius {
                    continue;
                }
                let falloff = 0.05 * (1.0 - d / radius).powi(2);
                ids.push(v as u32);
                for c in 0..3 {
                    basis.extend(coeffs.iter().map(|k| k * falloff * normals[v][c]));
                }
            }
            MuscleRegion {
                name: name.into(),
                vertices: ids,
                drivers: drivers.iter().map(|&d| d as u32).collect(),
                basis,
            }
        })
        .collect();

    let hd = sk.head_dir;
    let side = Vector3::z();
    let up = Vector3::y();
    let mut targets: Vec<(PartKind, Option<usize>, Vector3<f64>)> = vec![
        (PartKind::Head, None, sk.muzzle + hd * 0.05),
        (PartKind::Head, None, j[5] + hd * 0.15 + up * 0.06 + side * 0.09),
        (PartKind::Head, None, j[5] + hd * 0.15 + up * 0.06 - side * 0.09),
        (PartKind::Head, None, j[5] + up * 0.12),
        (PartKind::Neck, None, j[5] - up * 0.12 - sk.neck_dir * 0.1),
        (PartKind::Torso, None, j[2] + up * 0.35),
        (PartKind::Torso, None, j[0] + up * 0.35),
        (PartKind::Tail, None, j[6] + up * 0.06),
        (PartKind::Tail, None, sk.tail_tip),
    ];
    for leg in 0..4 {
        let b = 8 + 3 * leg;
        targets.push((PartKind::Leg, Some(leg), j[b + 1] + Vector3::x() * 0.08));
        targets.push((PartKind::Leg, Some(leg), j[b + 2] + Vector3::x() * 0.06));
        targets.push((PartKind::Leg, Some(leg), sk.hoofs[leg] - up * 0.05));
    }
    let keypoint_anchors = targets
        .iter()
        .map(|&(kind, leg, target)| {
            let part = parts
                .iter()
                .filter(|p| p.kind == kind)
                .nth(leg.unwrap_or(0))
                .expect("part exists");
            let face = faces[part.first_face..part.first_face + part.n_faces]
                .iter()
                .min_by(|a, b| {
                    let ca = face_centroid(&vertices, a);
                    let cb = face_centroid(&vertices, b);
                    (ca - target).norm().total_cmp(&(cb - target).norm())
                })
                .expect("part has faces");
            KeypointAnchor::Surface {
                vertices: *face,
                bary: [1.0 / 3.0; 3],
            }
        })
        .collect();

    let mut chains = BTreeMap::new();
    chains.insert("spine".to_string(), vec![0, 1, 2]);
    chains.insert("neck".to_string(), vec![3, 4, 5]);
    chains.insert("tail".to_string(), vec![6, 7]);
    for (leg, name) in ["leg_fl", "leg_fr", "leg_hl", "leg_hr"].iter().enumerate() {
        let b = 8 + 3 * leg;
        chains.insert(name.to_string(), vec![b, b + 1, b + 2]);
    }

    ModelCard {
        name: "toy-quadruped".into(),
        version: format!("seed-{seed}"),
        vertices,
        faces,
        joint_names: TOY_JOINTS.iter().map(|s| s.to_string()).collect(),
        joints: j.iter().map(arr3).collect(),
        parents: PARENTS.to_vec(),
        skin_weights,
        shape_basis,
        joint_shape_basis,
        n_shape: SHAPE_MODES,
        muscle_regions,
        keypoint_anchors,
        keypoint_names: TOY_KEYPOINTS.iter().map(|s| s.to_string()).collect(),
        chains,
    }
}

fn face_centroid(vertices: &[[f64; 3]], f: &[u32; 3]) -> Vector3<f64> {
    f.iter().map(|&i| v3(vertices[i as usize])).sum::<Vector3<f64>>() / 3.0
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    #[test]
    fn deterministic_per_seed() {
        assert_eq!(make_toy_quadruped(0), make_toy_quadruped(0));
        assert_ne!(make_toy_quadruped(0).vertices, make_toy_quadruped(1).vertices);
    }

    #[test]
    fn sizes_and_validity() {
        let card = make_toy_quadruped(0);
        card.validate().unwrap();
        assert_eq!(card.n_joints(), 20);
        assert_eq!(card.n_shape, 4);
        assert_eq!(card.n_keypoints(), 21);
        assert!(card.muscle_regions.len() >= 4);
        assert!(card.muscle_regions.iter().all(|r| !r.vertices.is_empty()));
        assert!((1000..=3000).contains(&card.n_vertices()), "{}", card.n_vertices());
    }

    #[test]
    fn mesh_is_closed_with_outward_winding() {
        let card = make_toy_quadruped(4);
        let mut directed: HashMap<(u32, u32), usize> = HashMap::new();
        for f in &card.faces {
            for k in 0..3 {
                *directed.entry((f[k], f[(k + 1) % 3])).or_default() += 1;
            }
        }
        for (&(a, b), &n) in &directed {
            assert_eq!(n, 1, "edge {a}->{b} used {n} times");
            assert_eq!(directed.get(&(b, a)), Some(&1), "edge {a}->{b} has no twin");
        }
        let volume: f64 = card
            .faces
            .iter()
            .map(|f| {
                let [a, b, c] = f.map(|i| v3(card.vertices[i as usize]));
                a.dot(&b.cross(&c)) / 6.0
            })
            .sum();
        assert!(volume > 0.2, "{volume}");
    }

    #[test]
    fn stands_on_the_ground() {
        let card = make_toy_quadruped(0);
        let min_y = card.vertices.iter().map(|p| p[1]).fold(f64::INFINITY, f64::min);
        assert!(min_y > -0.05 && min_y < 0.05, "{min_y}");
        assert!(card.body_length() > 1.5 && card.body_length() < 3.5);
    }
}
