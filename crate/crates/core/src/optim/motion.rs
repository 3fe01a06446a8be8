//! Two-stage refinement of per-frame body and camera parameters against 2-D
//! keypoints and silhouettes.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{adamw_step, check_finite, AdamState, LossTrace, ParamGroup, StageConfig};
use crate::autodiff::{Gradients, Shape, Tape, Var};
use crate::camera::{PinholeCamera, TapedCamera};
use crate::error::{Error, Result};
use crate::losses::{l_kp2d, l_mask, l_reg_pose, l_smooth, LossWeights};
use crate::math::{mat3, mat3_to_array, rodrigues};
use crate::model::{ModelCard, PointQuery, PoseState, TapedPose};
use crate::render::silhouette::silhouette_from_points;
use crate::render::{Image, SilhouetteConfig};

/// Observed evidence per frame: 2-D keypoints with visibility and a
/// single-channel mask at the camera resolution.
#[derive(Clone, Debug)]
pub struct MotionEvidence {
    pub keypoints: Vec<Vec<[f64; 2]>>,
    pub visible: Vec<Vec<bool>>,
    pub masks: Vec<Image>,
}

impl MotionEvidence {
    pub fn len(&self) -> usize {
        self.keypoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keypoints.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MotionFitConfig {
    pub stages: Vec<StageConfig>,
    pub silhouette: SilhouetteConfig,
    /// Silhouettes are rendered and compared at the camera resolution
    /// divided by this factor.
    pub mask_downsample: usize,
}

impl Default for MotionFitConfig {
    fn default() -> Self {
        MotionFitConfig {
            stages: vec![StageConfig::motion_stage1(), StageConfig::motion_stage2()],
            silhouette: SilhouetteConfig::default(),
            mask_downsample: 1,
        }
    }
}

impl MotionFitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::Config("motion fit needs at least one stage".into()));
        }
        for s in &self.stages {
            s.validate()?;
        }
        if self.mask_downsample == 0 {
            return Err(Error::Config("mask_downsample must be at least 1".into()));
        }
        Ok(())
    }
}

/// Everything about a motion fit that stays fixed while parameters move.
pub struct MotionProblem {
    card: Arc<ModelCard>,
    pose: TapedPose,
    n_keypoints: usize,
    evidence: MotionEvidence,
    /// Reduced-resolution masks.
    masks: Vec<Image>,
    silhouette: SilhouetteConfig,
    mask_downsample: usize,
}

impl MotionProblem {
    pub fn new(
        card: Arc<ModelCard>,
        evidence: MotionEvidence,
        silhouette: SilhouetteConfig,
        mask_downsample: usize,
    ) -> Result<Self> {
        let n = evidence.len();
        if n == 0 {
            return Err(Error::Invalid("motion evidence has no frames".into()));
        }
        if evidence.visible.len() != n || evidence.masks.len() != n {
            return Err(Error::Invalid(format!(
                "motion evidence needs keypoints, visibility and a mask per frame: {} / {} / {}",
                n,
                evidence.visible.len(),
                evidence.masks.len()
            )));
        }
        let k = card.n_keypoints();
        for f in 0..n {
            if evidence.keypoints[f].len() != k || evidence.visible[f].len() != k {
                return Err(Error::Shape(format!("frame {f}: expected {k} keypoints")));
            }
            if evidence.masks[f].channels != 1 {
                return Err(Error::Shape(format!("frame {f}: mask must have one channel")));
            }
        }
        silhouette.validate()?;
        let mut queries: Vec<PointQuery> = card.keypoint_anchors.iter().map(PointQuery::from).collect();
        queries.extend((0..card.n_vertices() as u32).map(PointQuery::Vertex));
        let pose = TapedPose::new(card.clone(), queries)?;
        let masks = evidence
            .masks
            .iter()
            .map(|m| m.downsample(mask_downsample))
            .collect::<Result<Vec<_>>>()?;
        Ok(MotionProblem {
            card,
            pose,
            n_keypoints: k,
            evidence,
            masks,
            silhouette,
            mask_downsample,
        })
    }

    pub fn card(&self) -> &Arc<ModelCard> {
        &self.card
    }

    pub fn len(&self) -> usize {
        self.evidence.len()
    }

    pub fn is_empty(&self) -> bool {
        self.evidence.is_empty()
    }

    fn check_cameras(&self, cams: &[&PinholeCamera]) -> Result<()> {
        if cams.len() != self.len() {
            return Err(Error::Shape(format!("{} frames of parameters for {} frames of evidence", cams.len(), self.len())));
        }
        for (f, (c, m)) in cams.iter().zip(&self.evidence.masks).enumerate() {
            if (c.width as usize, c.height as usize) != (m.width, m.height) {
                return Err(Error::Shape(format!(
                    "frame {f}: camera is {}x{} but the mask is {}x{}",
                    c.width, c.height, m.width, m.height
                )));
            }
        }
        Ok(())
    }
}

/// Free parameters of one frame. The camera is expressed relative to a base
/// camera: `R = rodrigues(cam_delta) R0`, `f = f0 exp(log_focal)`.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameParams {
    pub beta: Vec<f64>,
    /// Flattened `J x 3` axis-angle rows.
    pub theta: Vec<f64>,
    pub gamma: [f64; 3],
    pub cam_delta: [f64; 3],
    pub cam_translation: [f64; 3],
    pub log_focal: f64,
    pub base_camera: PinholeCamera,
}

impl FrameParams {
    pub fn from_state(s: &PoseState) -> Self {
        FrameParams {
            beta: s.beta.clone(),
            theta: s.theta_flat(),
            gamma: s.gamma,
            cam_delta: [0.0; 3],
            cam_translation: s.camera.translation,
            log_focal: 0.0,
            base_camera: s.camera.clone(),
        }
    }

    pub fn camera(&self) -> PinholeCamera {
        let scale = self.log_focal.exp();
        let r = mat3(&rodrigues(self.cam_delta)) * mat3(&self.base_camera.rotation);
        PinholeCamera {
            fx: self.base_camera.fx * scale,
            fy: self.base_camera.fy * scale,
            rotation: mat3_to_array(&r),
            translation: self.cam_translation,
            ..self.base_camera.clone()
        }
    }

    pub fn to_state(&self) -> PoseState {
        PoseState {
            beta: self.beta.clone(),
            theta: self.theta.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect(),
            gamma: self.gamma,
            camera: self.camera(),
        }
    }

    fn blocks_mut(&mut self, g: ParamGroup) -> Vec<&mut [f64]> {
        match g {
            ParamGroup::Shape => vec![&mut self.beta[..]],
            ParamGroup::Pose => vec![&mut self.theta[..]],
            ParamGroup::Translation => vec![&mut self.gamma[..]],
            ParamGroup::Camera => vec![
                &mut self.cam_delta[..],
                &mut self.cam_translation[..],
                std::slice::from_mut(&mut self.log_focal),
            ],
        }
    }
}

/// Tape handles of one frame's parameters.
#[derive(Clone, Copy, Debug)]
pub struct FrameVars {
    pub beta: Var,
    pub theta: Var,
    pub gamma: Var,
    pub cam_delta: Var,
    pub cam_translation: Var,
    pub log_focal: Var,
}

impl FrameVars {
    /// Records `p` on the tape; groups in `trainable` become variables and
    /// the rest constants.
    pub fn record(tape: &mut Tape, p: &FrameParams, trainable: &[ParamGroup]) -> Result<Self> {
        let mut leaf = |v: &[f64], shape: Shape, g: ParamGroup| {
            if trainable.contains(&g) {
                tape.var(v.to_vec(), shape)
            } else {
                tape.constant(v.to_vec(), shape)
            }
        };
        Ok(FrameVars {
            beta: leaf(&p.beta, Shape::Vector(p.beta.len()), ParamGroup::Shape)?,
            theta: leaf(&p.theta, Shape::Matrix(p.theta.len() / 3, 3), ParamGroup::Pose)?,
            gamma: leaf(&p.gamma, Shape::Vector(3), ParamGroup::Translation)?,
            cam_delta: leaf(&p.cam_delta, Shape::Vector(3), ParamGroup::Camera)?,
            cam_translation: leaf(&p.cam_translation, Shape::Vector(3), ParamGroup::Camera)?,
            log_focal: leaf(&[p.log_focal], Shape::Scalar, ParamGroup::Camera)?,
        })
    }

    /// Vars in the order [`FrameParams::blocks_mut`] lists their blocks.
    fn group(&self, g: ParamGroup) -> Vec<Var> {
        match g {
            ParamGroup::Shape => vec![self.beta],
            ParamGroup::Pose => vec![self.theta],
            ParamGroup::Translation => vec![self.gamma],
            ParamGroup::Camera => vec![self.cam_delta, self.cam_translation, self.log_focal],
        }
    }
}

/// Unweighted loss terms of the motion objective.
#[derive(Clone, Copy, Debug)]
pub struct MotionTerms {
    pub kp2d: Var,
    pub smooth: Var,
    pub mask: Var,
    pub reg: Var,
}

pub const MOTION_TERM_NAMES: [&str; 4] = ["kp2d", "smooth", "mask", "reg"];

/// Builds the weighted motion objective. Keypoint and mask terms are
/// averaged over frames; the smoothness term is summed over consecutive
/// frames. The silhouette is skipped when its weight is zero.
pub fn motion_objective(
    tape: &mut Tape,
    problem: &MotionProblem,
    frames: &[FrameVars],
    bases: &[&PinholeCamera],
    weights: &LossWeights,
) -> Result<(Var, MotionTerms)> {
    problem.check_cameras(bases)?;
    if frames.len() != problem.len() {
        return Err(Error::Shape(format!("{} frame vars for {} frames", frames.len(), problem.len())));
    }
    let n = frames.len();
    let k = problem.n_keypoints;
    let s = problem.card.n_vertices();
    let inv_n = 1.0 / n as f64;
    let mut kp_terms = Vec::with_capacity(n);
    let mut mask_terms = Vec::with_capacity(n);
    for (f, (fv, base)) in frames.iter().zip(bases).enumerate() {
        let pts = problem.pose.eval(tape, fv.beta, fv.theta, fv.gamma)?;
        let cam = TapedCamera::new(tape, base, fv.cam_delta, fv.cam_translation, fv.log_focal)?;
        let kp = tape.slice(pts, 0, 3 * k)?;
        let kp = tape.reshape(kp, Shape::Matrix(k, 3))?;
        let uvz = cam.project(tape, kp)?;
        let l2d = l_kp2d(
            tape,
            uvz,
            &problem.evidence.keypoints[f],
            &problem.evidence.visible[f],
            base.width,
            base.height,
        )?;
        kp_terms.push((inv_n, l2d.value));
        if weights.mask > 0.0 {
            let verts = tape.slice(pts, 3 * k, 3 * s)?;
            let verts = tape.reshape(verts, Shape::Matrix(s, 3))?;
            let small = if problem.mask_downsample == 1 {
                (*base).clone()
            } else {
                let d = problem.mask_downsample as u32;
                base.resized(base.width / d, base.height / d)
            };
            let small_cam = TapedCamera::new(tape, &small, fv.cam_delta, fv.cam_translation, fv.log_focal)?;
            let mask = silhouette_from_points(tape, verts, &problem.card.faces, &small_cam, &problem.silhouette)?;
            mask_terms.push((inv_n, l_mask(tape, mask, &problem.masks[f])?));
        }
    }
    let kp2d = tape.weighted_sum(&kp_terms)?;
    let mask = tape.weighted_sum(&mask_terms)?;
    let betas: Vec<Var> = frames.iter().map(|f| f.beta).collect();
    let thetas: Vec<Var> = frames.iter().map(|f| f.theta).collect();
    let smooth = l_smooth(tape, &betas, &thetas)?;
    let reg = l_reg_pose(tape, &thetas)?;
    let total = tape.weighted_sum(&[
        (weights.kp2d, kp2d),
        (weights.smooth, smooth),
        (weights.mask, mask),
        (weights.reg, reg),
    ])?;
    Ok((total, MotionTerms { kp2d, smooth, mask, reg }))
}

#[derive(Clone, Debug)]
pub struct MotionFit {
    pub states: Vec<PoseState>,
    pub trace: LossTrace,
}

fn gather_grads(grads: &Gradients, vars: &[FrameVars], groups: &[ParamGroup]) -> Vec<f64> {
    let mut out = Vec::new();
    for fv in vars {
        for &g in groups {
            for v in fv.group(g) {
                out.extend(grads.get(v));
            }
        }
    }
    out
}

fn flatten(params: &mut [FrameParams], groups: &[ParamGroup]) -> Vec<f64> {
    let mut out = Vec::new();
    for p in params.iter_mut() {
        for &g in groups {
            for b in p.blocks_mut(g) {
                out.extend_from_slice(b);
            }
        }
    }
    out
}

fn scatter(params: &mut [FrameParams], groups: &[ParamGroup], flat: &[f64]) {
    let mut i = 0;
    for p in params.iter_mut() {
        for &g in groups {
            for b in p.blocks_mut(g) {
                b.copy_from_slice(&flat[i..i + b.len()]);
                i += b.len();
            }
        }
    }
}

/// Runs every stage in order starting from `init`. Each stage restarts the
/// optimizer moments and re-bases the cameras on the previous stage's result,
/// so frozen groups come out bit-identical.
pub fn fit_motion(
    card: Arc<ModelCard>,
    evidence: &MotionEvidence,
    init: &[PoseState],
    cfg: &MotionFitConfig,
) -> Result<MotionFit> {
    cfg.validate()?;
    if init.len() != evidence.len() {
        return Err(Error::Shape(format!(
            "initial sequence has {} frames, evidence has {}",
            init.len(),
            evidence.len()
        )));
    }
    for s in init {
        s.validate(&card)?;
    }
    let problem = MotionProblem::new(card, evidence.clone(), cfg.silhouette.clone(), cfg.mask_downsample)?;
    let mut states = init.to_vec();
    let mut trace = LossTrace::new(&MOTION_TERM_NAMES);
    for (si, stage) in cfg.stages.iter().enumerate() {
        let mut groups = stage.trainable.clone();
        groups.sort();
        groups.dedup();
        let mut params: Vec<FrameParams> = states.iter().map(FrameParams::from_state).collect();
        let mut flat = flatten(&mut params, &groups);
        let mut adam = AdamState::new(flat.len());
        for it in 0..stage.iterations {
            let mut tape = Tape::new();
            let vars = params
                .iter()
                .map(|p| FrameVars::record(&mut tape, p, &groups))
                .collect::<Result<Vec<_>>>()?;
            let bases: Vec<&PinholeCamera> = params.iter().map(|p| &p.base_camera).collect();
            let (total, terms) = motion_objective(&mut tape, &problem, &vars, &bases, &stage.weights)?;
            let value = tape.scalar(total);
            check_finite(value, "motion loss", si, it)?;
            trace.push(
                si,
                it,
                value,
                [terms.kp2d, terms.smooth, terms.mask, terms.reg].iter().map(|&v| tape.scalar(v)).collect(),
            );
            let grads = tape.backward(total)?;
            let g = gather_grads(&grads, &vars, &groups);
            adamw_step(&mut flat, &g, &mut adam, &stage.adam)?;
            scatter(&mut params, &groups, &flat);
        }
        states = params.iter().map(FrameParams::to_state).collect();
        log::info!(
            "motion stage {si}: {} iterations, final loss {:?}",
            stage.iterations,
            trace.last_total()
        );
    }
    Ok(MotionFit { states, trace })
}
