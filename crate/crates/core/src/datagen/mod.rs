//! Synthetic clip generation and initial pose sources.
//!
//! A clip is rendered from a [`ModelCard`] driven by a [`MotionSource`], with
//! a random per-clip shape, a procedural texture and a camera trajectory.
//! Bundles are written as a directory:
//!
//! ```text
//! manifest.json          metadata, cameras, blob and PNG checksums
//! frames/000000.png      RGB frames
//! masks/000000.png       binary silhouettes
//! *.bin                  keypoints, visibility and GT parameters
//! ```

mod gait;
mod texture;

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::blob::{self, BlobEntry};
use crate::camera::{PinholeCamera, TrajectorySampler, TrajectorySpec};
use crate::error::{Error, Result};
use crate::model::{bounds, forward, keypoints_3d, ModelCard, PoseState};
use crate::optim::MotionEvidence;
use crate::render::{mesh_raster, Image};

pub use gait::{gait_plan, procedural_gait, sample_plan, Channel, GaitKind, GaitPlan, Harmonic, MotionKind, MotionSource};
pub use texture::{vertex_colors, TextureSpec, COAT_PALETTE};

pub const CLIP_FORMAT: &str = "skinsplat-clip";
pub const POSES_FORMAT: &str = "skinsplat-poses";
pub const FORMAT_VERSION: u32 = 1;
pub const DEFAULT_FPS: f64 = 60.0;
pub const DEFAULT_RESOLUTION: u32 = 512;
pub const DEFAULT_SHAPE_SIGMA: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClipConfig {
    pub width: u32,
    pub height: u32,
    pub fps: f64,
    /// Standard deviation of the per-clip shape coefficients.
    pub shape_sigma: f64,
    pub background: [f64; 3],
    /// Optional backdrop image, same size as the frames; overrides `background`.
    pub background_image: Option<PathBuf>,
    /// Direction toward the light, world coordinates.
    pub light: [f64; 3],
    /// Relative depth slack of the z-buffer visibility test.
    pub visibility_tolerance: f64,
    pub sampler: TrajectorySampler,
}

impl Default for ClipConfig {
    fn default() -> Self {
        ClipConfig {
            width: DEFAULT_RESOLUTION,
            height: DEFAULT_RESOLUTION,
            fps: DEFAULT_FPS,
            shape_sigma: DEFAULT_SHAPE_SIGMA,
            background: [0.0; 3],
            background_image: None,
            light: [0.3, 1.0, 0.6],
            visibility_tolerance: 0.01,
            sampler: TrajectorySampler::default(),
        }
    }
}

impl ClipConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::Config("clip resolution must be nonzero".into()));
        }
        if !(self.fps > 0.0) || !(self.shape_sigma >= 0.0) || !(self.visibility_tolerance >= 0.0) {
            return Err(Error::Config("fps must be positive; shape_sigma and visibility_tolerance non-negative".into()));
        }
        Ok(())
    }
}

/// Clip-level metadata recorded in the manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipMeta {
    pub width: u32,
    pub height: u32,
    pub fps: f64,
    pub seed: u64,
    pub shape_sigma: f64,
    pub texture: TextureSpec,
    pub trajectory: TrajectorySpec,
    pub motion: MotionKind,
    pub card_hash: String,
    pub keypoint_names: Vec<String>,
}

/// A rendered, fully annotated clip.
#[derive(Clone, Debug, PartialEq)]
pub struct ClipBundle {
    pub meta: ClipMeta,
    pub frames: Vec<Image>,
    pub masks: Vec<Image>,
    /// Projected keypoints; invisible points keep their projection when it is
    /// finite and `[0, 0]` otherwise.
    pub keypoints_2d: Vec<Vec<[f64; 2]>>,
    pub visible: Vec<Vec<bool>>,
    pub keypoints_3d: Vec<Vec<[f64; 3]>>,
    /// Ground-truth parameters and camera per frame.
    pub states: Vec<PoseState>,
}

impl ClipBundle {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn cameras(&self) -> Vec<PinholeCamera> {
        self.states.iter().map(|s| s.camera.clone()).collect()
    }

    /// Lengths agree, images match the recorded resolution, masks are binary
    /// and every visible keypoint lies inside the image.
    pub fn validate(&self) -> Result<()> {
        let n = self.frames.len();
        let lens = [
            self.masks.len(),
            self.keypoints_2d.len(),
            self.visible.len(),
            self.keypoints_3d.len(),
            self.states.len(),
        ];
        if lens.iter().any(|&l| l != n) {
            return Err(Error::Shape(format!("per-frame arrays differ in length: {n} frames vs {lens:?}")));
        }
        let (w, h) = (self.meta.width as usize, self.meta.height as usize);
        let k = self.meta.keypoint_names.len();
        for t in 0..n {
            let f = &self.frames[t];
            let m = &self.masks[t];
            if (f.width, f.height, f.channels) != (w, h, 3) || (m.width, m.height, m.channels) != (w, h, 1) {
                return Err(Error::Shape(format!("frame {t}: image or mask is not {w}x{h}")));
            }
            if m.data.iter().any(|&v| v != 0.0 && v != 1.0) {
                return Err(Error::InvalidAsset(format!("frame {t}: mask is not binary")));
            }
            if self.keypoints_2d[t].len() != k || self.visible[t].len() != k || self.keypoints_3d[t].len() != k {
                return Err(Error::Shape(format!("frame {t}: expected {k} keypoints")));
            }
            let cam = &self.states[t].camera;
            if (cam.width as usize, cam.height as usize) != (w, h) {
                return Err(Error::Shape(format!("frame {t}: camera is {}x{}", cam.width, cam.height)));
            }
            for (i, (&p, &vis)) in self.keypoints_2d[t].iter().zip(&self.visible[t]).enumerate() {
                if vis && !cam.in_image(p) {
                    return Err(Error::InvalidAsset(format!("frame {t}: visible keypoint {i} at {p:?} lies outside the image")));
                }
            }
        }
        Ok(())
    }

    /// 2-D observations for motion fitting.
    pub fn evidence(&self) -> MotionEvidence {
        MotionEvidence {
            keypoints: self.keypoints_2d.clone(),
            visible: self.visible.clone(),
            masks: self.masks.clone(),
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        self.validate()?;
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let n = self.len();
        let k = self.meta.keypoint_names.len();
        let mut files = Vec::with_capacity(n);
        for t in 0..n {
            let image = format!("frames/{t:06}.png");
            let mask = format!("masks/{t:06}.png");
            self.frames[t].save_png(&dir.join(&image))?;
            self.masks[t].save_png(&dir.join(&mask))?;
            files.push(FrameFiles {
                image_sha256: file_sha256(&dir.join(&image))?,
                mask_sha256: file_sha256(&dir.join(&mask))?,
                image,
                mask,
            });
        }
        let kp2: Vec<f64> = self.keypoints_2d.iter().flatten().flatten().copied().collect();
        let kp3: Vec<f64> = self.keypoints_3d.iter().flatten().flatten().copied().collect();
        let vis: Vec<u32> = self.visible.iter().flatten().map(|&v| v as u32).collect();
        let manifest = ClipManifest {
            format: CLIP_FORMAT.into(),
            format_version: FORMAT_VERSION,
            frames: n,
            meta: self.meta.clone(),
            files,
            keypoints_2d: blob::write_f64(dir, "keypoints_2d.bin", &kp2, &[n, k, 2])?,
            visible: blob::write_u32(dir, "visible.bin", &vis, &[n, k])?,
            keypoints_3d: blob::write_f64(dir, "keypoints_3d.bin", &kp3, &[n, k, 3])?,
            params: write_params(dir, &self.states)?,
        };
        blob::write_json(&dir.join("manifest.json"), &manifest)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.json");
        let m: ClipManifest = blob::read_json(&path)?;
        if m.format != CLIP_FORMAT || m.format_version != FORMAT_VERSION {
            return Err(Error::InvalidAsset(format!(
                "{} is `{}` v{}, expected `{CLIP_FORMAT}` v{FORMAT_VERSION}",
                path.display(),
                m.format,
                m.format_version
            )));
        }
        let n = m.frames;
        let k = m.meta.keypoint_names.len();
        if m.files.len() != n {
            return Err(Error::Shape(format!("manifest lists {} frame files for {n} frames", m.files.len())));
        }
        let mut frames = Vec::with_capacity(n);
        let mut masks = Vec::with_capacity(n);
        for f in &m.files {
            frames.push(load_checked_png(dir, &f.image, &f.image_sha256, 3)?);
            masks.push(load_checked_png(dir, &f.mask, &f.mask_sha256, 1)?);
        }
        let kp2 = read_shaped_f64(dir, &m.keypoints_2d, &[n, k, 2])?;
        let kp3 = read_shaped_f64(dir, &m.keypoints_3d, &[n, k, 3])?;
        check_blob_shape(&m.visible, &[n, k])?;
        let vis = blob::read_u32(dir, &m.visible)?;
        let states = read_params(dir, &m.params, n)?;
        let bundle = ClipBundle {
            keypoints_2d: kp2.chunks_exact(2 * k.max(1)).take(n).map(|c| c.chunks_exact(2).map(|p| [p[0], p[1]]).collect()).collect(),
            keypoints_3d: kp3.chunks_exact(3 * k.max(1)).take(n).map(|c| c.chunks_exact(3).map(|p| [p[0], p[1], p[2]]).collect()).collect(),
            visible: vis.chunks_exact(k.max(1)).take(n).map(|c| c.iter().map(|&v| v != 0).collect()).collect(),
            meta: m.meta,
            frames,
            masks,
            states,
        };
        bundle.validate()?;
        Ok(bundle)
    }
}

#[derive(Serialize, Deserialize)]
struct FrameFiles {
    image: String,
    image_sha256: String,
    mask: String,
    mask_sha256: String,
}

#[derive(Serialize, Deserialize)]
struct ClipManifest {
    format: String,
    format_version: u32,
    frames: usize,
    meta: ClipMeta,
    files: Vec<FrameFiles>,
    keypoints_2d: BlobEntry,
    visible: BlobEntry,
    keypoints_3d: BlobEntry,
    params: ParamBlobs,
}

/// Per-frame parameter arrays plus the cameras; shared by clip bundles and
/// pose-sequence files.
#[derive(Clone, Debug, Serialize, Deserialize)]
struct ParamBlobs {
    n_shape: usize,
    n_joints: usize,
    cameras: Vec<PinholeCamera>,
    beta: BlobEntry,
    theta: BlobEntry,
    gamma: BlobEntry,
}

#[derive(Serialize, Deserialize)]
struct PosesManifest {
    format: String,
    format_version: u32,
    fps: f64,
    frames: usize,
    params: ParamBlobs,
}

fn file_sha256(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(blob::sha256_hex(&bytes))
}

fn load_checked_png(dir: &Path, file: &str, sha: &str, channels: usize) -> Result<Image> {
    let path = dir.join(file);
    if file_sha256(&path)? != sha {
        return Err(Error::Checksum(file.to_string()));
    }
    Image::load_png(&path, channels)
}

fn check_blob_shape(entry: &BlobEntry, shape: &[usize]) -> Result<()> {
    if entry.shape != shape {
        return Err(Error::Shape(format!("blob `{}` has shape {:?}, expected {shape:?}", entry.file, entry.shape)));
    }
    Ok(())
}

fn read_shaped_f64(dir: &Path, entry: &BlobEntry, shape: &[usize]) -> Result<Vec<f64>> {
    check_blob_shape(entry, shape)?;
    blob::read_f64(dir, entry)
}

fn write_params(dir: &Path, states: &[PoseState]) -> Result<ParamBlobs> {
    let n = states.len();
    let b = states.first().map_or(0, |s| s.beta.len());
    let j = states.first().map_or(0, |s| s.theta.len());
    if states.iter().any(|s| s.beta.len() != b || s.theta.len() != j) {
        return Err(Error::Shape("pose sequence frames differ in parameter sizes".into()));
    }
    let beta: Vec<f64> = states.iter().flat_map(|s| s.beta.iter().copied()).collect();
    let theta: Vec<f64> = states.iter().flat_map(|s| s.theta_flat()).collect();
    let gamma: Vec<f64> = states.iter().flat_map(|s| s.gamma).collect();
    Ok(ParamBlobs {
        n_shape: b,
        n_joints: j,
        cameras: states.iter().map(|s| s.camera.clone()).collect(),
        beta: blob::write_f64(dir, "beta.bin", &beta, &[n, b])?,
        theta: blob::write_f64(dir, "theta.bin", &theta, &[n, j, 3])?,
        gamma: blob::write_f64(dir, "gamma.bin", &gamma, &[n, 3])?,
    })
}

fn read_params(dir: &Path, p: &ParamBlobs, n: usize) -> Result<Vec<PoseState>> {
    let (b, j) = (p.n_shape, p.n_joints);
    if p.cameras.len() != n {
        return Err(Error::Shape(format!("{} cameras recorded for {n} frames", p.cameras.len())));
    }
    let beta = read_shaped_f64(dir, &p.beta, &[n, b])?;
    let theta = read_shaped_f64(dir, &p.theta, &[n, j, 3])?;
    let gamma = read_shaped_f64(dir, &p.gamma, &[n, 3])?;
    Ok((0..n)
        .map(|t| PoseState {
            beta: beta[t * b..(t + 1) * b].to_vec(),
            theta: theta[t * j * 3..(t + 1) * j * 3].chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect(),
            gamma: [gamma[t * 3], gamma[t * 3 + 1], gamma[t * 3 + 2]],
            camera: p.cameras[t].clone(),
        })
        .collect())
}

/// Writes a parameter sequence as `dir/poses.json` plus blobs. This is also
/// the format read by [`EstimatorSource::File`].
pub fn save_pose_sequence(dir: &Path, states: &[PoseState], fps: f64) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = PosesManifest {
        format: POSES_FORMAT.into(),
        format_version: FORMAT_VERSION,
        fps,
        frames: states.len(),
        params: write_params(dir, states)?,
    };
    blob::write_json(&dir.join("poses.json"), &manifest)
}

/// Reads a sequence written by [`save_pose_sequence`]; `path` is the
/// directory or its `poses.json`. Returns the states and the frame rate.
pub fn load_pose_sequence(path: &Path) -> Result<(Vec<PoseState>, f64)> {
    let (dir, file) = if path.is_dir() {
        (path.to_path_buf(), path.join("poses.json"))
    } else {
        (path.parent().map(Path::to_path_buf).unwrap_or_default(), path.to_path_buf())
    };
    let m: PosesManifest = blob::read_json(&file)?;
    if m.format != POSES_FORMAT || m.format_version != FORMAT_VERSION {
        return Err(Error::InvalidAsset(format!(
            "{} is `{}` v{}, expected `{POSES_FORMAT}` v{FORMAT_VERSION}",
            file.display(),
            m.format,
            m.format_version
        )));
    }
    Ok((read_params(&dir, &m.params, m.frames)?, m.fps))
}

/// Depth-tested keypoint visibility: in front of the camera, inside the
/// image and no farther than the z-buffer at its pixel by more than the
/// relative `tolerance`.
pub fn keypoint_visibility(points: &[[f64; 3]], cam: &PinholeCamera, depth: &[f64], tolerance: f64) -> Vec<([f64; 2], bool)> {
    let w = cam.width as usize;
    points
        .iter()
        .map(|&p| {
            let pr = cam.project_point(p);
            if !pr.in_front || !pr.pixel.iter().all(|x| x.is_finite()) {
                return ([0.0, 0.0], false);
            }
            if !cam.in_image(pr.pixel) {
                return (pr.pixel, false);
            }
            let i = pr.pixel[1].floor() as usize * w + pr.pixel[0].floor() as usize;
            (pr.pixel, pr.depth <= depth[i] * (1.0 + tolerance))
        })
        .collect()
}

/// Renders `frames` frames of `motion` on `card`. The shape is drawn once per
/// clip from `N(0, shape_sigma^2)`; the trajectory is sampled when `traj` is
/// `None` and targets the center of the first posed mesh.
pub fn generate_clip(
    card: &ModelCard,
    motion: &MotionSource,
    texture: &TextureSpec,
    traj: Option<TrajectorySpec>,
    frames: usize,
    seed: u64,
    cfg: &ClipConfig,
) -> Result<ClipBundle> {
    cfg.validate()?;
    motion.validate(card)?;
    if frames == 0 {
        return Err(Error::Invalid("a clip needs at least one frame".into()));
    }
    if motion.len() < frames {
        return Err(Error::Invalid(format!("motion has {} frames, {frames} requested", motion.len())));
    }
    let backdrop = match &cfg.background_image {
        Some(p) => {
            let img = Image::load_png(p, 3)?;
            if (img.width, img.height) != (cfg.width as usize, cfg.height as usize) {
                return Err(Error::Shape(format!(
                    "background image is {}x{}, clip is {}x{}",
                    img.width, img.height, cfg.width, cfg.height
                )));
            }
            Some(img)
        }
        None => None,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, cfg.shape_sigma).map_err(|e| Error::Config(e.to_string()))?;
    let beta: Vec<f64> = (0..card.n_shape).map(|_| normal.sample(&mut rng)).collect();
    let traj = match traj {
        Some(t) => TrajectorySpec { frames, ..t },
        None => cfg.sampler.sample(&mut rng, frames, card.body_length()),
    };
    let colors = vertex_colors(card, texture)?;

    let state_at = |t: usize, camera: PinholeCamera| PoseState {
        beta: beta.clone(),
        theta: motion.theta[t].clone(),
        gamma: motion.gamma[t],
        camera,
    };
    let probe = PinholeCamera::look_at([0.0, 0.0, 1.0], [0.0; 3], cfg.width, cfg.height)?;
    let first = forward(card, &state_at(0, probe))?;
    let (lo, hi) = bounds(&first.vertices);
    let target = std::array::from_fn(|k| 0.5 * (lo[k] + hi[k]));
    let cameras = traj.cameras(target, cfg.width, cfg.height)?;

    type Frame = (Image, Image, Vec<[f64; 2]>, Vec<bool>, Vec<[f64; 3]>, PoseState);
    let rendered: Vec<Frame> = cameras
        .into_par_iter()
        .enumerate()
        .map(|(t, cam)| -> Result<Frame> {
            let state = state_at(t, cam);
            let mesh = forward(card, &state)?;
            let out = mesh_raster(&mesh.vertices, &card.faces, &colors, &state.camera, cfg.light, cfg.background)?;
            let mut image = out.target.color;
            if let Some(bg) = &backdrop {
                for (i, &m) in out.mask.data.iter().enumerate() {
                    if m == 0.0 {
                        image.data[3 * i..3 * i + 3].copy_from_slice(&bg.data[3 * i..3 * i + 3]);
                    }
                }
            }
            let kp3 = keypoints_3d(card, &mesh);
            let (kp2, vis) = keypoint_visibility(&kp3, &state.camera, &out.depth, cfg.visibility_tolerance)
                .into_iter()
                .unzip();
            Ok((image.quantized(), out.mask, kp2, vis, kp3, state))
        })
        .collect::<Result<_>>()?;

    let mut bundle = ClipBundle {
        meta: ClipMeta {
            width: cfg.width,
            height: cfg.height,
            fps: cfg.fps,
            seed,
            shape_sigma: cfg.shape_sigma,
            texture: texture.clone(),
            trajectory: traj,
            motion: motion.kind.clone(),
            card_hash: card.content_hash(),
            keypoint_names: card.keypoint_names.clone(),
        },
        frames: Vec::with_capacity(frames),
        masks: Vec::with_capacity(frames),
        keypoints_2d: Vec::with_capacity(frames),
        visible: Vec::with_capacity(frames),
        keypoints_3d: Vec::with_capacity(frames),
        states: Vec::with_capacity(frames),
    };
    for (image, mask, kp2, vis, kp3, state) in rendered {
        bundle.frames.push(image);
        bundle.masks.push(mask);
        bundle.keypoints_2d.push(kp2);
        bundle.visible.push(vis);
        bundle.keypoints_3d.push(kp3);
        bundle.states.push(state);
    }
    bundle.validate()?;
    Ok(bundle)
}

/// Per-group standard deviations of the noisy-oracle estimator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleNoise {
    pub sigma_beta: f64,
    pub sigma_theta: f64,
    pub sigma_gamma: f64,
    pub seed: u64,
}

impl Default for OracleNoise {
    fn default() -> Self {
        OracleNoise {
            sigma_beta: 0.0,
            sigma_theta: 0.1,
            sigma_gamma: 0.0,
            seed: 0,
        }
    }
}

/// Where initial per-frame parameters come from.
#[derive(Clone, Debug, PartialEq)]
pub enum EstimatorSource {
    /// A pose sequence on disk, e.g. exported network predictions.
    File(PathBuf),
    /// Ground truth plus i.i.d. Gaussian noise per parameter group. Cameras
    /// are passed through unchanged.
    NoisyOracle(OracleNoise),
}

/// Initial pose sequence for `bundle`, checked against `card`.
pub fn estimator_source(card: &ModelCard, source: &EstimatorSource, bundle: Option<&ClipBundle>) -> Result<Vec<PoseState>> {
    let states = match source {
        EstimatorSource::File(path) => load_pose_sequence(path)?.0,
        EstimatorSource::NoisyOracle(noise) => {
            let bundle = bundle.ok_or_else(|| Error::Invalid("noisy-oracle estimator needs a ground-truth bundle".into()))?;
            let dist = |s: f64| Normal::new(0.0, s).map_err(|e| Error::Config(format!("noise sigma {s}: {e}")));
            let (nb, nt, ng) = (dist(noise.sigma_beta)?, dist(noise.sigma_theta)?, dist(noise.sigma_gamma)?);
            let mut rng = ChaCha8Rng::seed_from_u64(noise.seed);
            bundle
                .states
                .iter()
                .map(|s| PoseState {
                    beta: s.beta.iter().map(|&b| b + nb.sample(&mut rng)).collect(),
                    theta: s.theta.iter().map(|r| r.map(|x| x + nt.sample(&mut rng))).collect(),
                    gamma: s.gamma.map(|x| x + ng.sample(&mut rng)),
                    camera: s.camera.clone(),
                })
                .collect()
        }
    };
    for (t, s) in states.iter().enumerate() {
        s.validate(card).map_err(|e| Error::Shape(format!("estimate for frame {t}: {e}")))?;
    }
    if let Some(b) = bundle {
        if b.len() != states.len() {
            return Err(Error::Shape(format!("estimator returned {} frames for a {}-frame clip", states.len(), b.len())));
        }
    }
    Ok(states)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::TrajectoryKind;
    use crate::model::make_toy_quadruped;

    fn small_clip(seed: u64, traj: Option<TrajectorySpec>) -> (ModelCard, ClipBundle) {
        let card = make_toy_quadruped(0);
        let motion = procedural_gait(&card, GaitKind::Walk, 4, 60.0, seed, 1.0).unwrap();
        let cfg = ClipConfig {
            width: 64,
            height: 64,
            ..ClipConfig::default()
        };
        let clip = generate_clip(&card, &motion, &TextureSpec::from_id(1), traj, 4, seed, &cfg).unwrap();
        (card, clip)
    }

    #[test]
    fn bundle_round_trips_through_disk() {
        let (_, clip) = small_clip(3, None);
        let dir = tempfile::tempdir().unwrap();
        clip.save(dir.path()).unwrap();
        assert_eq!(ClipBundle::load(dir.path()).unwrap(), clip);
    }

    #[test]
    fn tampered_frame_fails_checksum() {
        let (_, clip) = small_clip(3, None);
        let dir = tempfile::tempdir().unwrap();
        clip.save(dir.path()).unwrap();
        let mut other = clip.frames[1].clone();
        other.data[0] = 1.0 - other.data[0];
        other.save_png(&dir.path().join("frames/000000.png")).unwrap();
        assert!(matches!(ClipBundle::load(dir.path()), Err(Error::Checksum(_))));
    }

    #[test]
    fn fixed_trajectory_keeps_one_camera() {
        let (_, clip) = small_clip(1, Some(TrajectorySpec::fixed(5.0, 30.0, 4.0, 4)));
        assert_eq!(clip.meta.trajectory.kind, TrajectoryKind::Fix);
        assert!(clip.states.windows(2).all(|w| w[0].camera == w[1].camera));
        assert!(clip.masks.iter().all(|m| m.data.iter().any(|&v| v > 0.0)));
    }

    #[test]
    fn short_motion_is_rejected() {
        let card = make_toy_quadruped(0);
        let motion = procedural_gait(&card, GaitKind::Walk, 2, 60.0, 0, 1.0).unwrap();
        let r = generate_clip(&card, &motion, &TextureSpec::default(), None, 3, 0, &ClipConfig::default());
        assert!(r.is_err());
    }

    #[test]
    fn zero_noise_oracle_is_exact_and_file_round_trips() {
        let (card, clip) = small_clip(2, None);
        let noise = OracleNoise { sigma_theta: 0.0, ..OracleNoise::default() };
        let est = estimator_source(&card, &EstimatorSource::NoisyOracle(noise), Some(&clip)).unwrap();
        assert_eq!(est, clip.states);
        let dir = tempfile::tempdir().unwrap();
        save_pose_sequence(dir.path(), &clip.states, 60.0).unwrap();
        let back = estimator_source(&card, &EstimatorSource::File(dir.path().into()), Some(&clip)).unwrap();
        assert_eq!(back, clip.states);
    }

    #[test]
    fn file_for_another_card_is_rejected() {
        let (card, clip) = small_clip(2, None);
        let mut states = clip.states.clone();
        for s in &mut states {
            s.theta.pop();
        }
        let dir = tempfile::tempdir().unwrap();
        save_pose_sequence(dir.path(), &states, 60.0).unwrap();
        assert!(estimator_source(&card, &EstimatorSource::File(dir.path().into()), None).is_err());
    }
}
