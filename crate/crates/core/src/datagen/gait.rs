//! Procedural joint-angle tracks built from sums of sinusoids.

use std::f64::consts::{PI, TAU};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelCard;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GaitKind {
    Walk,
    Trot,
    IdleSway,
}

impl FromStr for GaitKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "walk" => Ok(GaitKind::Walk),
            "trot" => Ok(GaitKind::Trot),
            "idle-sway" | "idle" => Ok(GaitKind::IdleSway),
            other => Err(Error::Invalid(format!("unknown gait `{other}` (walk, trot, idle-sway)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MotionKind {
    Procedural(GaitKind),
    Imported,
}

/// Per-frame joint rotations and root translation.
#[derive(Clone, Debug, PartialEq)]
pub struct MotionSource {
    pub kind: MotionKind,
    pub theta: Vec<Vec<[f64; 3]>>,
    pub gamma: Vec<[f64; 3]>,
    pub fps: f64,
}

impl MotionSource {
    pub fn len(&self) -> usize {
        self.theta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.theta.is_empty()
    }

    pub fn validate(&self, card: &ModelCard) -> Result<()> {
        if self.gamma.len() != self.theta.len() {
            return Err(Error::Shape("motion theta and gamma tracks differ in length".into()));
        }
        if let Some(f) = self.theta.iter().position(|t| t.len() != card.n_joints()) {
            return Err(Error::Shape(format!(
                "motion frame {f} has {} joints, card has {}",
                self.theta[f].len(),
                card.n_joints()
            )));
        }
        let finite = self.theta.iter().flatten().flatten().chain(self.gamma.iter().flatten()).all(|x| x.is_finite());
        if !finite || !(self.fps > 0.0) {
            return Err(Error::NonFinite("motion tracks or fps".into()));
        }
        Ok(())
    }

    /// Motion taken from a saved pose sequence (shape and cameras ignored).
    pub fn from_pose_file(path: &Path) -> Result<Self> {
        let (states, fps) = super::load_pose_sequence(path)?;
        Ok(MotionSource {
            kind: MotionKind::Imported,
            theta: states.iter().map(|s| s.theta.clone()).collect(),
            gamma: states.iter().map(|s| s.gamma).collect(),
            fps,
        })
    }
}

/// What a harmonic term drives.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Channel {
    Joint { joint: usize, axis: usize },
    Translation { axis: usize },
}

/// `offset + amplitude * sin(harmonic * 2 pi f t + phase)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Harmonic {
    pub channel: Channel,
    pub offset: f64,
    pub amplitude: f64,
    pub harmonic: f64,
    pub phase: f64,
}

/// A gait as a list of harmonic terms at base frequency `frequency` (Hz).
#[derive(Clone, Debug, PartialEq)]
pub struct GaitPlan {
    pub kind: GaitKind,
    pub frequency: f64,
    pub terms: Vec<Harmonic>,
}

impl GaitPlan {
    /// Per channel, the bound `sum |A| (k w dt)^2` on the magnitude of the
    /// second difference of the sampled track.
    pub fn second_difference_bound(&self, channel: Channel, fps: f64) -> f64 {
        let dt = 1.0 / fps;
        self.terms
            .iter()
            .filter(|h| h.channel == channel)
            .map(|h| h.amplitude.abs() * (h.harmonic * TAU * self.frequency * dt).powi(2))
            .sum()
    }
}

/// Phase of each leg within the stride, in cycles, for legs named
/// `*_fl`, `*_fr`, `*_hl`, `*_hr`. Other names are spread evenly.
fn leg_phase(kind: GaitKind, name: &str, index: usize, count: usize) -> f64 {
    let suffix = name.rsplit('_').next().unwrap_or("");
    let table = match kind {
        // lateral four-beat sequence
        GaitKind::Walk => [("hl", 0.0), ("fl", 0.25), ("hr", 0.5), ("fr", 0.75)],
        // diagonal pairs
        GaitKind::Trot => [("fl", 0.0), ("hr", 0.0), ("fr", 0.5), ("hl", 0.5)],
        GaitKind::IdleSway => [("fl", 0.0), ("fr", 0.5), ("hl", 0.5), ("hr", 0.0)],
    };
    table
        .iter()
        .find(|(s, _)| *s == suffix)
        .map_or(index as f64 / count.max(1) as f64, |(_, p)| *p)
}

/// Builds the harmonic plan for `kind` on `card`, scaled by `amplitude`.
/// Legs swing about the lateral (z) axis.
pub fn gait_plan(card: &ModelCard, kind: GaitKind, amplitude: f64) -> Result<GaitPlan> {
    let legs = card.leg_chains();
    if legs.is_empty() {
        return Err(Error::InvalidAsset("card has no chains labelled `leg*`".into()));
    }
    let (frequency, swing, knee, fetlock, bob, neck_amp, tail_amp, sway) = match kind {
        GaitKind::Walk => (1.0, 0.30, 0.25, 0.20, 0.015, 0.06, 0.10, 0.0),
        GaitKind::Trot => (1.6, 0.40, 0.35, 0.30, 0.030, 0.05, 0.15, 0.0),
        GaitKind::IdleSway => (0.25, 0.02, 0.02, 0.02, 0.005, 0.10, 0.20, 0.04),
    };
    let a = amplitude;
    let mut terms = Vec::new();
    let mut push = |channel, offset: f64, amp: f64, harmonic: f64, phase: f64| {
        if amp != 0.0 || offset != 0.0 {
            terms.push(Harmonic {
                channel,
                offset: a * offset,
                amplitude: a * amp,
                harmonic,
                phase,
            });
        }
    };
    let count = legs.len();
    for (i, (name, chain)) in legs.iter().enumerate() {
        let phase = TAU * leg_phase(kind, name, i, count);
        let joint = |k: usize| chain.get(k).copied();
        if let Some(j) = joint(0) {
            push(Channel::Joint { joint: j, axis: 2 }, 0.0, swing, 1.0, phase);
        }
        if let Some(j) = joint(1) {
            // flexes one way only: offset exceeds amplitude
            push(Channel::Joint { joint: j, axis: 2 }, -1.1 * knee, knee, 1.0, phase + PI / 2.0);
        }
        if let Some(j) = joint(2) {
            push(Channel::Joint { joint: j, axis: 2 }, 0.0, fetlock, 1.0, phase + PI);
        }
    }
    push(Channel::Translation { axis: 1 }, 0.0, bob, 2.0, 0.0);
    if let Some(&root) = card.chains.get("spine").and_then(|c| c.first()) {
        push(Channel::Joint { joint: root, axis: 2 }, 0.0, bob, 2.0, PI / 2.0);
        push(Channel::Joint { joint: root, axis: 0 }, 0.0, sway, 1.0, 0.0);
    }
    if let Some(chain) = card.chains.get("neck") {
        for (k, &j) in chain.iter().enumerate() {
            push(Channel::Joint { joint: j, axis: 2 }, 0.0, neck_amp, 1.0, 0.3 * k as f64);
            push(Channel::Joint { joint: j, axis: 1 }, 0.0, 0.5 * sway, 1.0, 0.5 * k as f64);
        }
    }
    if let Some(chain) = card.chains.get("tail") {
        for (k, &j) in chain.iter().enumerate() {
            push(Channel::Joint { joint: j, axis: 1 }, 0.0, tail_amp, 1.0, 0.6 * k as f64);
        }
    }
    Ok(GaitPlan { kind, frequency, terms })
}

/// Samples a plan at `fps` for `frames` frames.
pub fn sample_plan(card: &ModelCard, plan: &GaitPlan, frames: usize, fps: f64) -> Result<MotionSource> {
    if !(fps > 0.0) {
        return Err(Error::Invalid(format!("fps must be positive, got {fps}")));
    }
    let nj = card.n_joints();
    let mut theta = vec![vec![[0.0; 3]; nj]; frames];
    let mut gamma = vec![[0.0; 3]; frames];
    for t in 0..frames {
        let time = t as f64 / fps;
        for h in &plan.terms {
            let v = h.offset + h.amplitude * (h.harmonic * TAU * plan.frequency * time + h.phase).sin();
            match h.channel {
                Channel::Joint { joint, axis } => theta[t][joint][axis] += v,
                Channel::Translation { axis } => gamma[t][axis] += v,
            }
        }
    }
    Ok(MotionSource {
        kind: MotionKind::Procedural(plan.kind),
        theta,
        gamma,
        fps,
    })
}

/// Smooth periodic motion for `card`: phase-offset leg swings, a vertical bob
/// at twice the stride frequency, neck and tail sway. The `seed` shifts the
/// starting phase of the cycle.
pub fn procedural_gait(card: &ModelCard, kind: GaitKind, frames: usize, fps: f64, seed: u64, amplitude: f64) -> Result<MotionSource> {
    use rand::{Rng, SeedableRng};
    let mut plan = gait_plan(card, kind, amplitude)?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let shift = rng.random_range(0.0..TAU);
    for h in &mut plan.terms {
        h.phase += h.harmonic * shift;
    }
    sample_plan(card, &plan, frames, fps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::make_toy_quadruped;

    #[test]
    fn zero_amplitude_is_rest() {
        let card = make_toy_quadruped(0);
        let m = procedural_gait(&card, GaitKind::IdleSway, 20, 60.0, 3, 0.0).unwrap();
        assert!(m.theta.iter().flatten().flatten().all(|&x| x == 0.0));
        assert!(m.gamma.iter().flatten().all(|&x| x == 0.0));
    }

    #[test]
    fn second_differences_respect_the_sinusoid_bound() {
        let card = make_toy_quadruped(0);
        let plan = gait_plan(&card, GaitKind::Trot, 1.0).unwrap();
        let fps = 30.0;
        let m = sample_plan(&card, &plan, 90, fps).unwrap();
        for j in 0..card.n_joints() {
            for axis in 0..3 {
                let bound = plan.second_difference_bound(Channel::Joint { joint: j, axis }, fps);
                for t in 1..89 {
                    let d2 = m.theta[t + 1][j][axis] - 2.0 * m.theta[t][j][axis] + m.theta[t - 1][j][axis];
                    assert!(d2.abs() <= bound + 1e-12, "joint {j} axis {axis}: {d2} > {bound}");
                }
            }
        }
    }

    #[test]
    fn card_without_legs_is_rejected() {
        let mut card = make_toy_quadruped(0);
        card.chains.retain(|k, _| !k.starts_with("leg"));
        assert!(procedural_gait(&card, GaitKind::Walk, 4, 60.0, 0, 1.0).is_err());
    }
}
