use std::fs;
use std::path::Path;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use log::info;

use skinsplat::camera::TrajectoryKind;
use skinsplat::datagen::{
    estimator_source, generate_clip, procedural_gait, save_pose_sequence, load_pose_sequence, vertex_colors, ClipBundle,
    EstimatorSource, GaitKind, MotionSource, TextureSpec,
};
use skinsplat::gaussian::{deform_lbs, init_bound_set, load_avatar, save_avatar, BoundGaussianSet};
use skinsplat::metrics::{accel, accel_error, chamfer_aligned, psnr, ssim, MetricReport};
use skinsplat::model::{forward, keypoints_3d, load_model_card, make_toy_quadruped, save_model_card, subdivide, ModelCard, PoseState};
use skinsplat::optim::{fit_avatar as fit_avatar_views, fit_motion as fit_motion_window, stitch_windows, window_starts, AvatarView, LossTrace, MotionEvidence, MotionFitConfig};
use skinsplat::render::{mesh_raster, splat_render, Image};
use skinsplat::Error;

use crate::config::RunConfig;
use crate::{AnimateArgs, EvaluateArgs, FitAvatarArgs, FitMotionArgs, GenDataArgs, InitArgs, RenderArgs};

const PCK_ALPHAS: [f64; 2] = [0.05, 0.1];

fn frame_name(t: usize) -> String {
    format!("{t:06}.png")
}

fn load_card(path: &Path) -> Result<ModelCard> {
    load_model_card(path).with_context(|| format!("loading model card {}", path.display()))
}

/// Loads a clip and checks it was rendered from `card`.
fn load_clip(path: &Path, card: &ModelCard) -> Result<ClipBundle> {
    let clip = ClipBundle::load(path).with_context(|| format!("loading clip {}", path.display()))?;
    if clip.meta.card_hash != card.content_hash() {
        return Err(Error::InvalidAsset(format!("clip {} was rendered from a different model card", path.display())).into());
    }
    Ok(clip)
}

/// Loads a pose sequence; a clip directory stands for its ground-truth states.
fn load_poses(path: &Path, card: &ModelCard) -> Result<Vec<PoseState>> {
    if path.is_dir() && !path.join("poses.json").exists() && path.join("manifest.json").exists() {
        return Ok(load_clip(path, card)?.states);
    }
    let (states, _) = load_pose_sequence(path).with_context(|| format!("loading poses {}", path.display()))?;
    for (t, s) in states.iter().enumerate() {
        s.validate(card).with_context(|| format!("pose {t} of {}", path.display()))?;
    }
    Ok(states)
}

pub fn make_toy_model(cfg: &RunConfig, out: &Path) -> Result<()> {
    let card = make_toy_quadruped(cfg.seed);
    save_model_card(&card, out)?;
    info!("toy model with {} vertices and {} joints written to {}", card.n_vertices(), card.n_joints(), out.display());
    Ok(())
}

pub fn gen_data(cfg: &mut RunConfig, a: &GenDataArgs) -> Result<()> {
    let card = load_card(&a.card)?;
    if let Some(w) = a.width {
        cfg.clip.width = w;
    }
    if let Some(h) = a.height {
        cfg.clip.height = h;
    }
    if let Some(f) = a.fps {
        cfg.clip.fps = f;
    }
    if let Some(kind) = &a.trajectory {
        let kind: TrajectoryKind = kind.parse()?;
        cfg.clip.sampler.probabilities = match kind {
            TrajectoryKind::Fix => [1.0, 0.0, 0.0],
            TrajectoryKind::Dolly => [0.0, 1.0, 0.0],
            TrajectoryKind::Orbit => [0.0, 0.0, 1.0],
        };
    }
    cfg.clip.validate()?;
    let motion = match &a.motion {
        Some(p) => MotionSource::from_pose_file(p)?,
        None => {
            let gait: GaitKind = a.gait.parse()?;
            procedural_gait(&card, gait, a.frames, cfg.clip.fps, cfg.seed, a.amplitude)?
        }
    };
    let texture = TextureSpec::from_id(a.texture.unwrap_or(cfg.seed));
    let clip = generate_clip(&card, &motion, &texture, None, a.frames, cfg.seed, &cfg.clip)?;
    clip.save(&a.out)?;
    info!("{}-frame clip written to {}", clip.len(), a.out.display());
    Ok(())
}

fn initial_states(cfg: &RunConfig, card: &ModelCard, clip: &ClipBundle, init: &InitArgs) -> Result<Vec<PoseState>> {
    let source = match &init.init {
        Some(p) => EstimatorSource::File(p.clone()),
        None => {
            let mut noise = cfg.oracle.clone();
            if let Some(s) = init.sigma_theta {
                noise.sigma_theta = s;
            }
            noise.seed = cfg.seed;
            EstimatorSource::NoisyOracle(noise)
        }
    };
    Ok(estimator_source(card, &source, Some(clip))?)
}

fn evidence_range(e: &MotionEvidence, start: usize, len: usize) -> MotionEvidence {
    MotionEvidence {
        keypoints: e.keypoints[start..start + len].to_vec(),
        visible: e.visible[start..start + len].to_vec(),
        masks: e.masks[start..start + len].to_vec(),
    }
}

/// Fits every sliding window independently and cross-fades the overlaps.
fn fit_windows(
    card: &Arc<ModelCard>,
    evidence: &MotionEvidence,
    init: &[PoseState],
    motion: &MotionFitConfig,
    window: usize,
    stride: usize,
) -> Result<(Vec<PoseState>, Vec<LossTrace>)> {
    let total = init.len();
    let starts = window_starts(total, window, stride)?;
    let len = window.min(total);
    let mut fitted = Vec::with_capacity(starts.len());
    let mut traces = Vec::with_capacity(starts.len());
    for (w, &s) in starts.iter().enumerate() {
        info!("fitting window {}/{} (frames {s}..{})", w + 1, starts.len(), s + len);
        let fit = fit_motion_window(card.clone(), &evidence_range(evidence, s, len), &init[s..s + len], motion)?;
        fitted.push(fit.states);
        traces.push(fit.trace);
    }
    Ok((stitch_windows(&fitted, window, stride, total)?, traces))
}

fn apply_motion_overrides(cfg: &mut RunConfig, iterations: Option<usize>, lr: Option<f64>) {
    for stage in &mut cfg.motion.stages {
        if let Some(n) = iterations {
            stage.iterations = n;
        }
        if let Some(lr) = lr {
            stage.adam.lr = lr;
        }
    }
}

fn write_traces(out: &Path, traces: &[LossTrace]) -> Result<()> {
    if let [only] = traces {
        only.write_csv(&out.join("trace.csv"))?;
    } else {
        for (w, t) in traces.iter().enumerate() {
            t.write_csv(&out.join(format!("trace_window{w}.csv")))?;
        }
    }
    Ok(())
}

pub fn fit_motion(cfg: &mut RunConfig, a: &FitMotionArgs) -> Result<()> {
    let card = Arc::new(load_card(&a.card)?);
    let clip = load_clip(&a.clip, &card)?;
    apply_motion_overrides(cfg, a.iterations, a.lr);
    if let Some(d) = a.mask_downsample {
        cfg.motion.mask_downsample = d;
    }
    let window = a.window.unwrap_or(cfg.window);
    let stride = a.stride.unwrap_or(cfg.stride);
    let init = initial_states(cfg, &card, &clip, &a.init)?;
    let (states, traces) = fit_windows(&card, &clip.evidence(), &init, &cfg.motion, window, stride)?;
    save_pose_sequence(&a.out, &states, clip.meta.fps)?;
    write_traces(&a.out, &traces)?;
    info!("refined {} frames written to {}", states.len(), a.out.display());
    Ok(())
}

fn avatar_views(clip: &ClipBundle, states: &[PoseState], frames: &[usize]) -> Result<Vec<AvatarView>> {
    if states.len() != clip.len() {
        return Err(Error::Shape(format!("{} poses for a {}-frame clip", states.len(), clip.len())).into());
    }
    frames
        .iter()
        .map(|&t| {
            if t >= clip.len() {
                bail!(Error::Invalid(format!("frame {t} is outside the {}-frame clip", clip.len())));
            }
            Ok(AvatarView { image: clip.frames[t].clone(), mask: clip.masks[t].clone(), state: states[t].clone() })
        })
        .collect()
}

/// The avatar binds to the once-subdivided card.
fn avatar_card(card: &ModelCard) -> Result<Arc<ModelCard>> {
    Ok(Arc::new(subdivide(card)?))
}

fn fit_new_avatar(cfg: &RunConfig, card: &ModelCard, views: &[AvatarView], out: &Path) -> Result<BoundGaussianSet> {
    let set = init_bound_set(avatar_card(card)?);
    info!("fitting {} Gaussians to {} views", set.len(), views.len());
    let fit = fit_avatar_views(&set, views, &cfg.avatar)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    fit.trace.write_csv(&out.join("trace.csv"))?;
    Ok(fit.set)
}

pub fn fit_avatar(cfg: &mut RunConfig, a: &FitAvatarArgs) -> Result<()> {
    let card = load_card(&a.card)?;
    let clip = load_clip(&a.clip, &card)?;
    if let Some(n) = a.iterations {
        cfg.avatar.iterations = n;
    }
    if let Some(lr) = a.lr {
        cfg.avatar.adam.lr = lr;
    }
    let states = match &a.poses {
        Some(p) => load_poses(p, &card)?,
        None => clip.states.clone(),
    };
    let frames: Vec<usize> = if a.frames.is_empty() { (0..clip.len()).collect() } else { a.frames.clone() };
    let views = avatar_views(&clip, &states, &frames)?;
    let set = fit_new_avatar(cfg, &card, &views, &a.out)?;
    save_avatar(&set, &a.out)?;
    info!("avatar written to {}", a.out.display());
    Ok(())
}

fn render_avatar(set: &BoundGaussianSet, state: &PoseState, background: [f64; 3]) -> Result<(Image, Image)> {
    let g = deform_lbs(set, state)?;
    let cfg = skinsplat::render::SplatConfig::default();
    let out = splat_render(&g, &state.camera, background, &cfg)?;
    Ok((out.color, out.alpha))
}

fn write_frames(dir: &Path, frames: &[(Image, Image)]) -> Result<()> {
    let masks = dir.join("masks");
    fs::create_dir_all(&masks).with_context(|| format!("creating {}", masks.display()))?;
    for (t, (color, alpha)) in frames.iter().enumerate() {
        color.save_png(&dir.join(frame_name(t)))?;
        alpha.save_png(&masks.join(frame_name(t)))?;
    }
    Ok(())
}

pub fn animate(cfg: &mut RunConfig, a: &AnimateArgs) -> Result<()> {
    let card = Arc::new(load_card(&a.card)?);
    let clip = load_clip(&a.clip, &card)?;
    if let Some(n) = a.iterations {
        cfg.avatar.iterations = n;
    }
    let mut states = initial_states(cfg, &card, &clip, &a.init)?;
    if a.refine {
        states = fit_windows(&card, &clip.evidence(), &states, &cfg.motion, cfg.window, cfg.stride)?.0;
    }
    save_pose_sequence(&a.out.join("poses"), &states, clip.meta.fps)?;
    let set = match &a.avatar {
        Some(dir) => load_avatar(dir, avatar_card(&card)?)?,
        None => {
            let keys: Vec<usize> =
                if a.keyframes.is_empty() { (0..clip.len()).step_by(4).collect() } else { a.keyframes.clone() };
            let views = avatar_views(&clip, &states, &keys)?;
            let dir = a.out.join("avatar");
            let set = fit_new_avatar(cfg, &card, &views, &dir)?;
            save_avatar(&set, &dir)?;
            set
        }
    };
    let background = cfg.avatar.background;
    let frames = states.iter().map(|s| render_avatar(&set, s, background)).collect::<Result<Vec<_>>>()?;
    write_frames(&a.out.join("frames"), &frames)?;
    info!("{} animated frames written to {}", frames.len(), a.out.display());
    Ok(())
}

pub fn render(cfg: &RunConfig, a: &RenderArgs) -> Result<()> {
    let card = load_card(&a.card)?;
    let states = load_poses(&a.poses, &card)?;
    let frames = match &a.avatar {
        Some(dir) => {
            let set = load_avatar(dir, avatar_card(&card)?)?;
            states.iter().map(|s| render_avatar(&set, s, cfg.avatar.background)).collect::<Result<Vec<_>>>()?
        }
        None => {
            let colors = vertex_colors(&card, &TextureSpec::from_id(a.texture))?;
            states
                .iter()
                .map(|s| {
                    let mesh = forward(&card, s)?;
                    let out = mesh_raster(&mesh.vertices, &card.faces, &colors, &s.camera, cfg.clip.light, cfg.clip.background)?;
                    Ok((out.target.color, out.mask))
                })
                .collect::<Result<Vec<_>>>()?
        }
    };
    write_frames(&a.out, &frames)?;
    info!("{} frames written to {}", frames.len(), a.out.display());
    Ok(())
}

pub fn evaluate(a: &EvaluateArgs) -> Result<()> {
    let card = load_card(&a.card)?;
    let clip = load_clip(&a.clip, &card)?;
    let pred = load_poses(&a.pred, &card)?;
    if pred.len() != clip.len() {
        return Err(Error::Shape(format!("prediction has {} frames, clip has {}", pred.len(), clip.len())).into());
    }
    let mut kp2 = Vec::with_capacity(pred.len());
    let mut kp3 = Vec::with_capacity(pred.len());
    let mut cd = Vec::with_capacity(pred.len());
    for (s, gt) in pred.iter().zip(&clip.states) {
        let mesh = forward(&card, s)?;
        let k = keypoints_3d(&card, &mesh);
        kp2.push(k.iter().map(|&p| s.camera.project_point(p).pixel).collect::<Vec<_>>());
        kp3.push(k);
        cd.push(chamfer_aligned(&mesh.vertices, &forward(&card, gt)?.vertices)?);
    }
    let mut report = MetricReport::default();
    report.add_pck(&kp2, &clip.keypoints_2d, &clip.visible, &PCK_ALPHAS)?;
    if pred.len() >= 3 {
        let scale = card.body_length();
        report.accel = Some(accel(&kp3)? / scale);
        report.accel_error = Some(accel_error(&kp3, &clip.keypoints_3d)? / scale);
        report.accel_unit = "body lengths/frame^2".into();
    }
    report.ensure_frames(clip.len());
    for (row, &c) in report.frames.iter_mut().zip(&cd) {
        row.chamfer = Some(c);
    }
    report.chamfer = Some(cd.iter().sum::<f64>() / cd.len() as f64);
    if let Some(dir) = &a.renders {
        let (mut p_sum, mut s_sum) = (0.0, 0.0);
        for (t, gt) in clip.frames.iter().enumerate() {
            let img = Image::load_png(&dir.join(frame_name(t)), 3)?;
            let (p, s) = (psnr(&img, gt)?, ssim(&img, gt)?);
            report.frames[t].psnr = Some(p);
            report.frames[t].ssim = Some(s);
            p_sum += p;
            s_sum += s;
        }
        report.psnr = Some(p_sum / clip.len() as f64);
        report.ssim = Some(s_sum / clip.len() as f64);
    }
    report.write(&a.out)?;
    print!("{}", report.summary());
    Ok(())
}
