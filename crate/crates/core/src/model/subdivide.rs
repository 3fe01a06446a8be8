use std::collections::BTreeMap;

use super::{ModelCard, MuscleRegion};
use crate::error::{Error, Result};

/// Midpoint subdivision: one new vertex per unique undirected edge and four
/// faces per face.
///
/// Original vertices keep their ids; edge midpoints follow, ordered by
/// `(min, max)` endpoint ids. Every per-vertex attribute of a midpoint is the
/// mean of its endpoints (skin weights are renormalized). A midpoint joins a
/// muscle region when either endpoint belongs to it, with the absent endpoint
/// contributing a zero corrective row. Keypoint anchors and joints carry over.
pub fn subdivide(card: &ModelCard) -> Result<ModelCard> {
    for (i, f) in card.faces.iter().enumerate() {
        if f[0] == f[1] || f[1] == f[2] || f[0] == f[2] {
            return Err(Error::InvalidAsset(format!("face {i} is degenerate: {f:?}")));
        }
    }
    let nv = card.n_vertices();
    let nj = card.n_joints();
    let b = card.n_shape;

    let mut edges: BTreeMap<(u32, u32), u32> = BTreeMap::new();
    for f in &card.faces {
        for k in 0..3 {
            let (a, c) = (f[k], f[(k + 1) % 3]);
            edges.insert((a.min(c), a.max(c)), 0);
        }
    }
    for (i, id) in edges.values_mut().enumerate() {
        *id = (nv + i) as u32;
    }
    let mid = |a: u32, c: u32| edges[&(a.min(c), a.max(c))];

    let mut vertices = card.vertices.clone();
    let mut skin_weights = card.skin_weights.clone();
    let mut shape_basis = card.shape_basis.clone();
    for &(a, c) in edges.keys() {
        let (a, c) = (a as usize, c as usize);
        let (pa, pc) = (card.vertices[a], card.vertices[c]);
        vertices.push([(pa[0] + pc[0]) / 2.0, (pa[1] + pc[1]) / 2.0, (pa[2] + pc[2]) / 2.0]);
        let mut w: Vec<f64> = (0..nj).map(|j| (card.weight(a, j) + card.weight(c, j)) / 2.0).collect();
        let sum: f64 = w.iter().sum();
        w.iter_mut().for_each(|x| *x /= sum);
        skin_weights.extend(w);
        for k in 0..3 * b {
            shape_basis.push((card.shape_basis[a * 3 * b + k] + card.shape_basis[c * 3 * b + k]) / 2.0);
        }
    }

    let mut faces = Vec::with_capacity(card.faces.len() * 4);
    for &[a, b2, c] in &card.faces {
        let (ab, bc, ca) = (mid(a, b2), mid(b2, c), mid(c, a));
        faces.push([a, ab, ca]);
        faces.push([ab, b2, bc]);
        faces.push([ca, bc, c]);
        faces.push([ab, bc, ca]);
    }

    let muscle_regions = card
        .muscle_regions
        .iter()
        .map(|r| subdivide_region(r, nv, &edges))
        .collect();

    Ok(ModelCard {
        name: card.name.clone(),
        version: card.version.clone(),
        vertices,
        faces,
        joint_names: card.joint_names.clone(),
        joints: card.joints.clone(),
        parents: card.parents.clone(),
        skin_weights,
        shape_basis,
        joint_shape_basis: card.joint_shape_basis.clone(),
        n_shape: card.n_shape,
        muscle_regions,
        keypoint_anchors: card.keypoint_anchors.clone(),
        keypoint_names: card.keypoint_names.clone(),
        chains: card.chains.clone(),
    })
}

fn subdivide_region(region: &MuscleRegion, nv: usize, edges: &BTreeMap<(u32, u32), u32>) -> MuscleRegion {
    let m = region.feature_len();
    let mut local = vec![usize::MAX; nv];
    for (i, &v) in region.vertices.iter().enumerate() {
        local[v as usize] = i;
    }
    let mut vertices = region.vertices.clone();
    let mut basis = region.basis.clone();
    for (&(a, c), &id) in edges {
        let (la, lc) = (local[a as usize], local[c as usize]);
        if la == usize::MAX && lc == usize::MAX {
            continue;
        }
        vertices.push(id);
        for k in 0..3 * m {
            let ra = if la == usize::MAX { 0.0 } else { region.basis[la * 3 * m + k] };
            let rc = if lc == usize::MAX { 0.0 } else { region.basis[lc * 3 * m + k] };
            basis.push((ra + rc) / 2.0);
        }
    }
    MuscleRegion {
        name: region.name.clone(),
        vertices,
        drivers: region.drivers.clone(),
        basis,
    }
}
