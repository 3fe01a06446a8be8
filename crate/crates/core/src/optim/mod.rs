//! AdamW, motion refinement against keypoint and silhouette evidence,
//! direct avatar fitting and sliding-window stitching.

mod avatar;
mod motion;
mod stitch;

use std::fmt::Write as _;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use avatar::{avatar_objective, fit_avatar, AttributeVars, AvatarFit, AvatarFitConfig, AvatarView, AVATAR_TERM_NAMES};
pub use motion::{
    fit_motion, motion_objective, FrameParams, FrameVars, MotionEvidence, MotionFit, MotionFitConfig, MotionProblem,
    MotionTerms, MOTION_TERM_NAMES,
};
pub use stitch::{stitch_windows, window_starts};

/// Default learning rate for every fit.
pub const DEFAULT_LR: f64 = 5e-3;
/// Default iterations per motion stage.
pub const DEFAULT_STAGE_ITERATIONS: usize = 100;
/// Sliding-window length.
pub const DEFAULT_WINDOW: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: DEFAULT_LR,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && self.lr.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0
            && self.weight_decay.is_finite();
        if !ok {
            return Err(Error::Config(format!("invalid AdamW settings: {self:?}")));
        }
        Ok(())
    }
}

/// First and second moments plus the step count.
#[derive(Clone, Debug, Default)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        AdamState {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }
}

/// One bias-corrected Adam step with decoupled weight decay, in place.
pub fn adamw_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, cfg: &AdamWConfig) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(Error::Shape(format!(
            "adamw: {} params, {} grads, {} moments",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFinite(format!(
            "gradient entry {i} is {} at step {}",
            grads[i],
            state.step + 1
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        params[i] -= cfg.lr * (cfg.weight_decay * params[i] + m_hat / (v_hat.sqrt() + cfg.eps));
    }
    Ok(())
}

/// Parameter groups of a motion fit.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamGroup {
    /// Shape coefficients.
    Shape,
    /// Joint rotations.
    Pose,
    /// Global translation.
    Translation,
    /// Per-frame camera rotation increment, translation and log focal scale.
    Camera,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageConfig {
    pub weights: crate::losses::LossWeights,
    pub trainable: Vec<ParamGroup>,
    pub adam: AdamWConfig,
    pub iterations: usize,
}

impl Default for StageConfig {
    fn default() -> Self {
        StageConfig::motion_stage1()
    }
}

impl StageConfig {
    /// Keypoint-driven stage over every body and camera parameter.
    pub fn motion_stage1() -> Self {
        StageConfig {
            weights: crate::losses::LossWeights::motion_stage1(),
            trainable: vec![ParamGroup::Shape, ParamGroup::Pose, ParamGroup::Translation, ParamGroup::Camera],
            adam: AdamWConfig::default(),
            iterations: DEFAULT_STAGE_ITERATIONS,
        }
    }

    /// Silhouette-driven stage with pose and camera frozen.
    pub fn motion_stage2() -> Self {
        StageConfig {
            weights: crate::losses::LossWeights::motion_stage2(),
            trainable: vec![ParamGroup::Shape],
            adam: AdamWConfig::default(),
            iterations: DEFAULT_STAGE_ITERATIONS,
        }
    }

    pub fn trains(&self, g: ParamGroup) -> bool {
        self.trainable.contains(&g)
    }

    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        self.adam.validate()?;
        if self.trainable.is_empty() {
            return Err(Error::Config("a stage needs at least one trainable parameter group".into()));
        }
        Ok(())
    }
}

/// Per-iteration loss record; `terms` are unweighted values.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossTrace {
    pub term_names: Vec<String>,
    pub rows: Vec<TraceRow>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TraceRow {
    pub stage: usize,
    pub iteration: usize,
    pub total: f64,
    pub terms: Vec<f64>,
}

impl LossTrace {
    pub fn new(term_names: &[&str]) -> Self {
        LossTrace {
            term_names: term_names.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, stage: usize, iteration: usize, total: f64, terms: Vec<f64>) {
        self.rows.push(TraceRow {
            stage,
            iteration,
            total,
            terms,
        });
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("stage,iteration,total");
        for n in &self.term_names {
            out.push(',');
            out.push_str(n);
        }
        out.push('\n');
        for r in &self.rows {
            let _ = write!(out, "{},{},{:.10e}", r.stage, r.iteration, r.total);
            for t in &r.terms {
                let _ = write!(out, ",{t:.10e}");
            }
            out.push('\n');
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn last_total(&self) -> Option<f64> {
        self.rows.last().map(|r| r.total)
    }
}

/// Reads a TOML config; absent keys keep their defaults.
pub fn load_config<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

pub(crate) fn check_finite(value: f64, what: &str, stage: usize, iteration: usize) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::Diverged(format!("{what} is {value} at stage {stage}, iteration {iteration}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_keeps_params() {
        let mut p = vec![1.0, -2.0];
        let mut s = AdamState::new(2);
        adamw_step(&mut p, &[0.0, 0.0], &mut s, &AdamWConfig::default()).unwrap();
        assert_eq!(p, vec![1.0, -2.0]);
    }

    #[test]
    fn weight_decay_closed_form() {
        let cfg = AdamWConfig {
            weight_decay: 0.1,
            ..AdamWConfig::default()
        };
        let mut p = vec![3.0];
        let mut s = AdamState::new(1);
        adamw_step(&mut p, &[0.0], &mut s, &cfg).unwrap();
        assert!((p[0] - 3.0 * (1.0 - cfg.lr * 0.1)).abs() < 1e-15);
    }

    #[test]
    fn quadratic_descends() {
        let cfg = AdamWConfig::default();
        // Adam travels about lr per step, so the start must lie within reach
        let start = 0.5;
        let mut x = vec![start];
        let mut s = AdamState::new(1);
        let mut prev = start;
        for step in 0..200 {
            let g = [2.0 * x[0]];
            adamw_step(&mut x, &g, &mut s, &cfg).unwrap();
            if step >= 5 {
                assert!(x[0].abs() < prev);
            }
            prev = x[0].abs();
        }
        assert!(x[0].abs() < 0.1 * start);
    }

    #[test]
    fn non_finite_gradient_is_reported() {
        let mut p = vec![0.0];
        let mut s = AdamState::new(1);
        let err = adamw_step(&mut p, &[f64::NAN], &mut s, &AdamWConfig::default()).unwrap_err();
        assert!(err.is_numerical());
    }

    #[test]
    fn stage_config_round_trips_toml() {
        let s = StageConfig::motion_stage2();
        let text = toml::to_string(&s).unwrap();
        let back: StageConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, s);
        assert!(StageConfig { trainable: vec![], ..s }.validate().is_err());
    }
}
