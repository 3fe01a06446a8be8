//! Direct fitting of bound Gaussian attributes to posed multi-view images.

use serde::{Deserialize, Serialize};

use super::{adamw_step, check_finite, AdamState, AdamWConfig, LossTrace};
use crate::autodiff::{Shape, Tape, Var};
use crate::error::{Error, Result};
use crate::gaussian::{deform_taped, BoundGaussianSet, GaussianAttributes};
use crate::losses::{l_image, l_mask, LossWeights};
use crate::model::{forward, PoseState, PosedMesh};
use crate::render::{splat_render_taped, Image, SplatConfig};

/// A calibrated observation: RGB image, single-channel mask and the pose and
/// camera it was taken at.
#[derive(Clone, Debug)]
pub struct AvatarView {
    pub image: Image,
    pub mask: Image,
    pub state: PoseState,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AvatarFitConfig {
    pub weights: LossWeights,
    pub adam: AdamWConfig,
    pub iterations: usize,
    /// Views per optimizer step, taken round-robin.
    pub views_per_step: usize,
    pub splat: SplatConfig,
    pub background: [f64; 3],
}

impl Default for AvatarFitConfig {
    fn default() -> Self {
        AvatarFitConfig {
            weights: LossWeights::avatar(),
            adam: AdamWConfig::default(),
            iterations: 2000,
            views_per_step: 1,
            splat: SplatConfig::default(),
            background: [0.0; 3],
        }
    }
}

impl AvatarFitConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        self.adam.validate()?;
        if self.views_per_step == 0 {
            return Err(Error::Config("views_per_step must be at least 1".into()));
        }
        Ok(())
    }
}

/// Taped attribute tensors, in the order the optimizer stores them.
#[derive(Clone, Copy, Debug)]
pub struct AttributeVars {
    pub offsets: Var,
    pub rotations: Var,
    pub log_scales: Var,
    pub colors: Var,
    pub opacity_logits: Var,
}

impl AttributeVars {
    pub fn record(tape: &mut Tape, a: &GaussianAttributes) -> Result<Self> {
        let n = a.len();
        Ok(AttributeVars {
            offsets: tape.var(a.offsets.iter().flatten().copied().collect(), Shape::Matrix(n, 3))?,
            rotations: tape.var(a.rotations.iter().flatten().copied().collect(), Shape::Matrix(n, 4))?,
            log_scales: tape.var(a.log_scales.iter().flatten().copied().collect(), Shape::Matrix(n, 3))?,
            colors: tape.var(a.colors.iter().flatten().copied().collect(), Shape::Matrix(n, 3))?,
            opacity_logits: tape.var(a.opacity_logits.clone(), Shape::Vector(n))?,
        })
    }

    fn all(&self) -> [Var; 5] {
        [self.offsets, self.rotations, self.log_scales, self.colors, self.opacity_logits]
    }
}

fn flatten(a: &GaussianAttributes) -> Vec<f64> {
    let mut out: Vec<f64> = a.offsets.iter().flatten().copied().collect();
    out.extend(a.rotations.iter().flatten());
    out.extend(a.log_scales.iter().flatten());
    out.extend(a.colors.iter().flatten());
    out.extend(&a.opacity_logits);
    out
}

fn unflatten(flat: &[f64], a: &mut GaussianAttributes) {
    let n = a.len();
    let mut it = flat.iter().copied();
    let take3 = |it: &mut dyn Iterator<Item = f64>| [it.next().unwrap(), it.next().unwrap(), it.next().unwrap()];
    for i in 0..n {
        a.offsets[i] = take3(&mut it);
    }
    for i in 0..n {
        a.rotations[i] = [it.next().unwrap(), it.next().unwrap(), it.next().unwrap(), it.next().unwrap()];
    }
    for i in 0..n {
        a.log_scales[i] = take3(&mut it);
    }
    for i in 0..n {
        a.colors[i] = take3(&mut it);
    }
    for i in 0..n {
        a.opacity_logits[i] = it.next().unwrap();
    }
}

pub const AVATAR_TERM_NAMES: [&str; 3] = ["image", "mask", "reg"];

/// Attribute regularizer: squared offsets in units of the mean initial
/// scale plus squared log-scale drift from the initial set.
fn regularizer(tape: &mut Tape, vars: &AttributeVars, reference: &BoundGaussianSet) -> Result<Var> {
    let n = reference.len() as f64;
    let unit = reference.mean_edge_scale().max(f64::MIN_POSITIVE);
    let off = tape.square(vars.offsets)?;
    let off = tape.sum(off)?;
    let off = tape.scale(off, 1.0 / (n * unit * unit))?;
    let init: Vec<f64> = reference.attributes.log_scales.iter().flatten().map(|x| -x).collect();
    let drift = tape.add_const(vars.log_scales, &init)?;
    let drift = tape.square(drift)?;
    let drift = tape.mean(drift)?;
    tape.add(off, drift)
}

/// Weighted avatar objective averaged over `views` (with their posed meshes).
/// `reference` supplies the binding, the card and the regularizer's anchor.
pub fn avatar_objective(
    tape: &mut Tape,
    reference: &BoundGaussianSet,
    vars: &AttributeVars,
    views: &[(&AvatarView, &PosedMesh)],
    weights: &LossWeights,
    splat: &SplatConfig,
    background: [f64; 3],
) -> Result<(Var, [Var; 3])> {
    if views.is_empty() {
        return Err(Error::Invalid("avatar objective needs at least one view".into()));
    }
    let inv = 1.0 / views.len() as f64;
    let quats = tape.normalize_quat(vars.rotations)?;
    let opacities = tape.sigmoid(vars.opacity_logits)?;
    let mut image_terms = Vec::new();
    let mut mask_terms = Vec::new();
    for (view, mesh) in views {
        let (centers, cov) = deform_taped(tape, reference, mesh, vars.offsets, quats, vars.log_scales)?;
        let (rgb, alpha) =
            splat_render_taped(tape, centers, cov, vars.colors, opacities, &view.state.camera, background, splat)?;
        image_terms.push((inv, l_image(tape, rgb, &view.image)?));
        if weights.mask > 0.0 {
            mask_terms.push((inv, l_mask(tape, alpha, &view.mask)?));
        }
    }
    let image = tape.weighted_sum(&image_terms)?;
    let mask = tape.weighted_sum(&mask_terms)?;
    let reg = regularizer(tape, vars, reference)?;
    let total = tape.weighted_sum(&[(weights.image, image), (weights.mask, mask), (weights.reg, reg)])?;
    Ok((total, [image, mask, reg]))
}

#[derive(Clone, Debug)]
pub struct AvatarFit {
    pub set: BoundGaussianSet,
    pub trace: LossTrace,
}

fn check_view(set: &BoundGaussianSet, i: usize, v: &AvatarView) -> Result<()> {
    v.state.validate(&set.card).map_err(|e| Error::Invalid(format!("view {i}: {e}")))?;
    let (w, h) = (v.state.camera.width as usize, v.state.camera.height as usize);
    if (v.image.width, v.image.height, v.image.channels) != (w, h, 3) {
        return Err(Error::Shape(format!("view {i}: image must be {w}x{h} RGB")));
    }
    if (v.mask.width, v.mask.height, v.mask.channels) != (w, h, 1) {
        return Err(Error::Shape(format!("view {i}: mask must be {w}x{h} single-channel")));
    }
    Ok(())
}

/// Optimizes offsets, rotations, scales, colors and opacities of `set`
/// against `views`. The card and the views are never modified.
pub fn fit_avatar(set: &BoundGaussianSet, views: &[AvatarView], cfg: &AvatarFitConfig) -> Result<AvatarFit> {
    cfg.validate()?;
    if views.is_empty() {
        return Err(Error::Invalid("avatar fitting needs at least one view".into()));
    }
    set.attributes.validate()?;
    for (i, v) in views.iter().enumerate() {
        check_view(set, i, v)?;
    }
    let meshes = views
        .iter()
        .map(|v| forward(&set.card, &v.state))
        .collect::<Result<Vec<_>>>()?;
    let mut fitted = set.clone();
    let mut flat = flatten(&set.attributes);
    let mut adam = AdamState::new(flat.len());
    let mut trace = LossTrace::new(&AVATAR_TERM_NAMES);
    let per_step = cfg.views_per_step.min(views.len());
    for it in 0..cfg.iterations {
        let batch: Vec<(&AvatarView, &PosedMesh)> = (0..per_step)
            .map(|j| {
                let i = (it * per_step + j) % views.len();
                (&views[i], &meshes[i])
            })
            .collect();
        let mut tape = Tape::new();
        let vars = AttributeVars::record(&mut tape, &fitted.attributes)?;
        let (total, terms) =
            avatar_objective(&mut tape, set, &vars, &batch, &cfg.weights, &cfg.splat, cfg.background)?;
        let value = tape.scalar(total);
        check_finite(value, "avatar loss", 0, it)?;
        trace.push(0, it, value, terms.iter().map(|&t| tape.scalar(t)).collect());
        let grads = tape.backward(total)?;
        let g: Vec<f64> = vars.all().iter().flat_map(|&v| grads.get(v)).collect();
        adamw_step(&mut flat, &g, &mut adam, &cfg.adam)?;
        unflatten(&flat, &mut fitted.attributes);
    }
    fitted.attributes.validate()?;
    Ok(AvatarFit { set: fitted, trace })
}
