//! On-disk card format: `manifest.json` naming little-endian blobs, each with
//! its byte length and SHA-256 recorded in the manifest.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{KeypointAnchor, ModelCard, MuscleRegion};
use crate::blob::{self, BlobEntry};
use crate::error::{Error, Result};

pub const ASSET_FORMAT: &str = "skinsplat-model";
pub const ASSET_FORMAT_VERSION: u32 = 1;

const ROOT_SENTINEL: u32 = u32::MAX;
const ANCHOR_SURFACE: u32 = 0;
const ANCHOR_JOINT: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: String,
    format_version: u32,
    name: String,
    version: String,
    n_vertices: usize,
    n_faces: usize,
    n_joints: usize,
    n_shape: usize,
    n_keypoints: usize,
    joint_names: Vec<String>,
    keypoint_names: Vec<String>,
    chains: BTreeMap<String, Vec<usize>>,
    regions: Vec<RegionEntry>,
    blobs: BTreeMap<String, BlobEntry>,
}

#[derive(Serialize, Deserialize)]
struct RegionEntry {
    name: String,
    vertices: String,
    drivers: String,
    basis: String,
}

/// Manifest path for either a card directory or the manifest file itself.
fn manifest_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join("manifest.json")
    } else {
        path.to_path_buf()
    }
}

/// Writes `card` as `dir/manifest.json` plus blobs.
pub fn save_model_card(card: &ModelCard, dir: &Path) -> Result<()> {
    card.validate()?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let nv = card.n_vertices();
    let nj = card.n_joints();
    let b = card.n_shape;
    let k = card.n_keypoints();
    let mut blobs = BTreeMap::new();
    let flat3 = |xs: &[[f64; 3]]| xs.iter().flatten().copied().collect::<Vec<_>>();

    blobs.insert("vertices".into(), blob::write_f64(dir, "vertices.bin", &flat3(&card.vertices), &[nv, 3])?);
    let faces: Vec<u32> = card.faces.iter().flatten().copied().collect();
    blobs.insert("faces".into(), blob::write_u32(dir, "faces.bin", &faces, &[card.faces.len(), 3])?);
    blobs.insert("joints".into(), blob::write_f64(dir, "joints.bin", &flat3(&card.joints), &[nj, 3])?);
    let parents: Vec<u32> = card.parents.iter().map(|p| p.map_or(ROOT_SENTINEL, |p| p as u32)).collect();
    blobs.insert("parents".into(), blob::write_u32(dir, "parents.bin", &parents, &[nj])?);
    blobs.insert("skin_weights".into(), blob::write_f64(dir, "skin_weights.bin", &card.skin_weights, &[nv, nj])?);
    blobs.insert("shape_basis".into(), blob::write_f64(dir, "shape_basis.bin", &card.shape_basis, &[nv, 3, b])?);
    blobs.insert(
        "joint_shape_basis".into(),
        blob::write_f64(dir, "joint_shape_basis.bin", &card.joint_shape_basis, &[nj, 3, b])?,
    );

    let mut kinds = Vec::with_capacity(k);
    let mut anchor_vertices = Vec::with_capacity(k * 3);
    let mut anchor_bary = Vec::with_capacity(k * 3);
    for a in &card.keypoint_anchors {
        match a {
            KeypointAnchor::Surface { vertices, bary } => {
                kinds.push(ANCHOR_SURFACE);
                anchor_vertices.extend_from_slice(vertices);
                anchor_bary.extend_from_slice(bary);
            }
            KeypointAnchor::Joint(j) => {
                kinds.push(ANCHOR_JOINT);
                anchor_vertices.extend_from_slice(&[*j, 0, 0]);
                anchor_bary.extend_from_slice(&[0.0; 3]);
            }
        }
    }
    blobs.insert("anchor_kind".into(), blob::write_u32(dir, "anchor_kind.bin", &kinds, &[k])?);
    blobs.insert("anchor_index".into(), blob::write_u32(dir, "anchor_index.bin", &anchor_vertices, &[k, 3])?);
    blobs.insert("anchor_bary".into(), blob::write_f64(dir, "anchor_bary.bin", &anchor_bary, &[k, 3])?);

    let mut regions = Vec::new();
    for (i, r) in card.muscle_regions.iter().enumerate() {
        let key = |s: &str| format!("region{i}_{s}");
        blobs.insert(
            key("vertices"),
            blob::write_u32(dir, &format!("{}.bin", key("vertices")), &r.vertices, &[r.vertices.len()])?,
        );
        blobs.insert(
            key("drivers"),
            blob::write_u32(dir, &format!("{}.bin", key("drivers")), &r.drivers, &[r.drivers.len()])?,
        );
        blobs.insert(
            key("basis"),
            blob::write_f64(
                dir,
                &format!("{}.bin", key("basis")),
                &r.basis,
                &[3 * r.vertices.len(), r.feature_len()],
            )?,
        );
        regions.push(RegionEntry {
            name: r.name.clone(),
            vertices: key("vertices"),
            drivers: key("drivers"),
            basis: key("basis"),
        });
    }

    let manifest = Manifest {
        format: ASSET_FORMAT.into(),
        format_version: ASSET_FORMAT_VERSION,
        name: card.name.clone(),
        version: card.version.clone(),
        n_vertices: nv,
        n_faces: card.faces.len(),
        n_joints: nj,
        n_shape: b,
        n_keypoints: k,
        joint_names: card.joint_names.clone(),
        keypoint_names: card.keypoint_names.clone(),
        chains: card.chains.clone(),
        regions,
        blobs,
    };
    blob::write_json(&dir.join("manifest.json"), &manifest)
}

/// Reads and validates a card written by [`save_model_card`] (or any export
/// following the same format). `path` may be the directory or its manifest.
pub fn load_model_card(path: &Path) -> Result<ModelCard> {
    let manifest_file = manifest_path(path);
    let dir = manifest_file.parent().unwrap_or(Path::new(".")).to_path_buf();
    let m: Manifest = blob::read_json(&manifest_file)?;
    if m.format != ASSET_FORMAT {
        return Err(Error::InvalidAsset(format!("unknown asset format `{}`", m.format)));
    }
    if m.format_version != ASSET_FORMAT_VERSION {
        return Err(Error::InvalidAsset(format!("unsupported asset version {}", m.format_version)));
    }
    let entry = |name: &str| {
        m.blobs
            .get(name)
            .ok_or_else(|| Error::InvalidAsset(format!("manifest lacks blob `{name}`")))
    };
    let expect = |name: &str, e: &BlobEntry, shape: &[usize]| {
        if e.shape != shape {
            return Err(Error::Shape(format!("blob `{name}` has shape {:?}, expected {shape:?}", e.shape)));
        }
        Ok(())
    };
    let f64s = |name: &str, shape: &[usize]| -> Result<Vec<f64>> {
        let e = entry(name)?;
        expect(name, e, shape)?;
        blob::read_f64(&dir, e)
    };
    let u32s = |name: &str, shape: &[usize]| -> Result<Vec<u32>> {
        let e = entry(name)?;
        expect(name, e, shape)?;
        blob::read_u32(&dir, e)
    };
    let rows3 = |xs: Vec<f64>| xs.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect::<Vec<_>>();

    let (nv, nj, b, k) = (m.n_vertices, m.n_joints, m.n_shape, m.n_keypoints);
    let vertices = rows3(f64s("vertices", &[nv, 3])?);
    let faces = u32s("faces", &[m.n_faces, 3])?
        .chunks_exact(3)
        .map(|c| [c[0], c[1], c[2]])
        .collect();
    let joints = rows3(f64s("joints", &[nj, 3])?);
    let parents = u32s("parents", &[nj])?
        .into_iter()
        .map(|p| (p != ROOT_SENTINEL).then_some(p as usize))
        .collect();
    let skin_weights = f64s("skin_weights", &[nv, nj])?;
    let shape_basis = f64s("shape_basis", &[nv, 3, b])?;
    let joint_shape_basis = f64s("joint_shape_basis", &[nj, 3, b])?;

    let kinds = u32s("anchor_kind", &[k])?;
    let index = u32s("anchor_index", &[k, 3])?;
    let bary = f64s("anchor_bary", &[k, 3])?;
    let mut keypoint_anchors = Vec::with_capacity(k);
    for i in 0..k {
        let ids = [index[i * 3], index[i * 3 + 1], index[i * 3 + 2]];
        keypoint_anchors.push(match kinds[i] {
            ANCHOR_SURFACE => KeypointAnchor::Surface {
                vertices: ids,
                bary: [bary[i * 3], bary[i * 3 + 1], bary[i * 3 + 2]],
            },
            ANCHOR_JOINT => KeypointAnchor::Joint(ids[0]),
            other => return Err(Error::InvalidAsset(format!("anchor {i} has unknown kind {other}"))),
        });
    }

    let mut muscle_regions = Vec::with_capacity(m.regions.len());
    for r in &m.regions {
        let rv = entry(&r.vertices)?;
        let rd = entry(&r.drivers)?;
        let n_rv = rv.shape.first().copied().unwrap_or(0);
        let n_rd = rd.shape.first().copied().unwrap_or(0);
        muscle_regions.push(MuscleRegion {
            name: r.name.clone(),
            vertices: u32s(&r.vertices, &[n_rv])?,
            drivers: u32s(&r.drivers, &[n_rd])?,
            basis: f64s(&r.basis, &[3 * n_rv, 9 * n_rd])?,
        });
    }

    let card = ModelCard {
        name: m.name,
        version: m.version,
        vertices,
        faces,
        joint_names: m.joint_names,
        joints,
        parents,
        skin_weights,
        shape_basis,
        joint_shape_basis,
        n_shape: b,
        muscle_regions,
        keypoint_anchors,
        keypoint_names: m.keypoint_names,
        chains: m.chains,
    };
    card.validate()?;
    Ok(card)
}
