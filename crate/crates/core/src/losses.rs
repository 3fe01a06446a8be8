//! Loss terms as scalars on a [`Tape`].
//!
//! Every term is nonnegative and vanishes on ground truth. Keypoint terms
//! are per frame; callers average them over a sequence.

use serde::{Deserialize, Serialize};

use crate::autodiff::{CustomOp, Shape, Tape, Var};
use crate::camera::MIN_DEPTH;
use crate::error::{Error, Result};
use crate::metrics::ssim_with_grad;
use crate::model::PoseState;
use crate::render::Image;

/// Balancing weights. Unused terms stay at zero.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub varen: f64,
    pub smooth: f64,
    pub kp2d: f64,
    pub kp3d: f64,
    pub reg: f64,
    pub mask: f64,
    pub image: f64,
}

impl LossWeights {
    /// First motion stage: keypoints dominate.
    pub fn motion_stage1() -> Self {
        LossWeights {
            kp2d: 10000.0,
            smooth: 100.0,
            mask: 100.0,
            reg: 1000.0,
            ..Self::default()
        }
    }

    /// Second motion stage: silhouettes dominate.
    pub fn motion_stage2() -> Self {
        LossWeights {
            kp2d: 100.0,
            smooth: 100.0,
            mask: 10000.0,
            reg: 300.0,
            ..Self::default()
        }
    }

    pub fn avatar() -> Self {
        LossWeights {
            image: 1.0,
            mask: 0.5,
            reg: 0.1,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.varen, self.smooth, self.kp2d, self.kp3d, self.reg, self.mask, self.image];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Config(format!("loss weights must be finite and nonnegative: {self:?}")));
        }
        Ok(())
    }
}

/// Mean squared error over the stacked `(beta, theta)` of every frame.
/// `pred` holds taped `(beta, theta)` pairs, theta flattened `J x 3`.
pub fn l_varen(tape: &mut Tape, pred: &[(Var, Var)], gt: &[PoseState]) -> Result<Var> {
    if pred.len() != gt.len() {
        return Err(Error::Shape(format!("l_varen: {} predicted vs {} reference frames", pred.len(), gt.len())));
    }
    if pred.is_empty() {
        return Ok(tape.scalar_const(0.0));
    }
    let mut parts = Vec::with_capacity(2 * pred.len());
    let mut target = Vec::new();
    for (&(beta, theta), g) in pred.iter().zip(gt) {
        if beta.len() != g.beta.len() || theta.len() != 3 * g.theta.len() {
            return Err(Error::Shape("l_varen: parameter sizes differ".into()));
        }
        parts.extend([beta, theta]);
        target.extend_from_slice(&g.beta);
        target.extend(g.theta.iter().flatten());
    }
    let stacked = tape.concat(&parts)?;
    let neg: Vec<f64> = target.iter().map(|x| -x).collect();
    let diff = tape.add_const(stacked, &neg)?;
    let sq = tape.square(diff)?;
    tape.mean(sq)
}

/// Sum over consecutive frames of squared first differences of beta and theta.
pub fn l_smooth(tape: &mut Tape, betas: &[Var], thetas: &[Var]) -> Result<Var> {
    if betas.len() != thetas.len() {
        return Err(Error::Shape(format!("l_smooth: {} beta vs {} theta frames", betas.len(), thetas.len())));
    }
    let mut terms = Vec::new();
    for track in [betas, thetas] {
        for pair in track.windows(2) {
            if pair[0].is_empty() {
                continue;
            }
            let d = tape.sub(pair[1], pair[0])?;
            let sq = tape.square(d)?;
            terms.push((1.0, tape.sum(sq)?));
        }
    }
    tape.weighted_sum(&terms)
}

/// A keypoint term together with how many keypoints entered it.
#[derive(Clone, Copy, Debug)]
pub struct KeypointLoss {
    pub value: Var,
    pub used: usize,
}

impl KeypointLoss {
    /// True when nothing was visible, so the term is a constant 0.
    pub fn all_invisible(&self) -> bool {
        self.used == 0
    }
}

fn masked_l1(tape: &mut Tape, pred: Var, pick: Vec<usize>, target: &[f64], weights: Vec<f64>) -> Result<Var> {
    let n = pick.len();
    let g = tape.gather(pred, pick, Shape::Vector(n))?;
    let neg: Vec<f64> = target.iter().map(|x| -x).collect();
    let d = tape.add_const(g, &neg)?;
    let a = tape.abs(d)?;
    let w = tape.constant(weights, Shape::Vector(n))?;
    tape.dot(a, w)
}

/// Mean L1 error of visible keypoints in image-normalized coordinates:
/// `sum(|du|/W + |dv|/H) / (2 K_vis)`. `pred` is the `K x 3` output of a
/// taped projection; points at depth at most `MIN_DEPTH` are excluded.
pub fn l_kp2d(
    tape: &mut Tape,
    pred: Var,
    gt: &[[f64; 2]],
    visible: &[bool],
    width: u32,
    height: u32,
) -> Result<KeypointLoss> {
    if pred.len() != 3 * gt.len() || visible.len() != gt.len() {
        return Err(Error::Shape(format!(
            "l_kp2d: {} projected values for {} keypoints and {} flags",
            pred.len(),
            gt.len(),
            visible.len()
        )));
    }
    let depth_ok: Vec<bool> = tape.value(pred).chunks_exact(3).map(|p| p[2] > MIN_DEPTH).collect();
    let used: Vec<usize> = (0..gt.len()).filter(|&k| visible[k] && depth_ok[k]).collect();
    if used.is_empty() {
        log::warn!("l_kp2d: no visible keypoint in frame, term is zero");
        return Ok(KeypointLoss {
            value: tape.scalar_const(0.0),
            used: 0,
        });
    }
    let denom = 2.0 * used.len() as f64;
    let (sx, sy) = (1.0 / (width as f64 * denom), 1.0 / (height as f64 * denom));
    let pick = used.iter().flat_map(|&k| [3 * k, 3 * k + 1]).collect();
    let target: Vec<f64> = used.iter().flat_map(|&k| gt[k]).collect();
    let weights = used.iter().flat_map(|_| [sx, sy]).collect();
    Ok(KeypointLoss {
        value: masked_l1(tape, pred, pick, &target, weights)?,
        used: used.len(),
    })
}

/// Mean L1 error over the coordinates of visible 3-D keypoints (`K x 3`).
pub fn l_kp3d(tape: &mut Tape, pred: Var, gt: &[[f64; 3]], visible: &[bool]) -> Result<KeypointLoss> {
    if pred.len() != 3 * gt.len() || visible.len() != gt.len() {
        return Err(Error::Shape(format!("l_kp3d: {} values for {} keypoints", pred.len(), gt.len())));
    }
    let used: Vec<usize> = (0..gt.len()).filter(|&k| visible[k]).collect();
    if used.is_empty() {
        log::warn!("l_kp3d: no visible keypoint in frame, term is zero");
        return Ok(KeypointLoss {
            value: tape.scalar_const(0.0),
            used: 0,
        });
    }
    let w = 1.0 / (3 * used.len()) as f64;
    let pick = used.iter().flat_map(|&k| [3 * k, 3 * k + 1, 3 * k + 2]).collect();
    let target: Vec<f64> = used.iter().flat_map(|&k| gt[k]).collect();
    Ok(KeypointLoss {
        value: masked_l1(tape, pred, pick, &target, vec![w; 3 * used.len()])?,
        used: used.len(),
    })
}

/// Mean absolute difference between a taped soft mask (`H W` values) and a
/// single-channel reference.
pub fn l_mask(tape: &mut Tape, pred: Var, gt: &Image) -> Result<Var> {
    if gt.channels != 1 || pred.len() != gt.data.len() {
        return Err(Error::Shape(format!(
            "l_mask: {} mask values vs a {}x{}x{} reference",
            pred.len(),
            gt.width,
            gt.height,
            gt.channels
        )));
    }
    let neg: Vec<f64> = gt.data.iter().map(|x| -x).collect();
    let d = tape.add_const(pred, &neg)?;
    let a = tape.abs(d)?;
    tape.mean(a)
}

/// Mean squared joint angle over every non-root joint of every frame.
pub fn l_reg_pose(tape: &mut Tape, thetas: &[Var]) -> Result<Var> {
    let mut parts = Vec::with_capacity(thetas.len());
    for &theta in thetas {
        if theta.len() % 3 != 0 {
            return Err(Error::Shape(format!("l_reg_pose: theta of length {}", theta.len())));
        }
        if theta.len() > 3 {
            parts.push(tape.slice(theta, 3, theta.len() - 3)?);
        }
    }
    if parts.is_empty() {
        return Ok(tape.scalar_const(0.0));
    }
    let all = tape.concat(&parts)?;
    let sq = tape.square(all)?;
    tape.mean(sq)
}

struct SsimOp {
    gt: Image,
}

impl CustomOp for SsimOp {
    fn name(&self) -> &str {
        "ssim"
    }

    fn backward(&self, inputs: &[&[f64]], _output: &[f64], grad_output: &[f64], grad_inputs: &mut [Option<Vec<f64>>]) {
        let Some(gi) = grad_inputs[0].as_mut() else { return };
        let pred = Image {
            data: inputs[0].to_vec(),
            ..self.gt.clone()
        };
        let (_, g) = ssim_with_grad(&pred, &self.gt, true).expect("sizes checked at record time");
        for (a, b) in gi.iter_mut().zip(g.expect("gradient requested")) {
            *a += grad_output[0] * b;
        }
    }
}

/// Taped mean SSIM between `pred` (interleaved, `gt`'s layout) and `gt`.
pub fn ssim_taped(tape: &mut Tape, pred: Var, gt: &Image) -> Result<Var> {
    if pred.len() != gt.data.len() {
        return Err(Error::Shape(format!("ssim: {} values vs {} reference values", pred.len(), gt.data.len())));
    }
    let image = Image {
        data: tape.value(pred).to_vec(),
        ..gt.clone()
    };
    let (s, _) = ssim_with_grad(&image, gt, false)?;
    tape.custom(Box::new(SsimOp { gt: gt.clone() }), &[pred], vec![s], Shape::Scalar)
}

/// Photometric term: mean L1 plus `1 - SSIM`, the structural part standing
/// in for a learned perceptual distance.
pub fn l_image(tape: &mut Tape, pred: Var, gt: &Image) -> Result<Var> {
    if pred.len() != gt.data.len() {
        return Err(Error::Shape(format!("l_image: {} values vs {} reference values", pred.len(), gt.data.len())));
    }
    let neg: Vec<f64> = gt.data.iter().map(|x| -x).collect();
    let d = tape.add_const(pred, &neg)?;
    let a = tape.abs(d)?;
    let l1 = tape.mean(a)?;
    let s = ssim_taped(tape, pred, gt)?;
    let one_minus = tape.scale(s, -1.0)?;
    let one_minus = tape.add_const(one_minus, &[1.0])?;
    tape.add(l1, one_minus)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::check::check_gradient;
    use crate::metrics::ssim;

    fn frame(tape: &mut Tape, v: Vec<f64>) -> Var {
        let n = v.len();
        tape.var(v, Shape::Vector(n)).unwrap()
    }

    #[test]
    fn weights_validate() {
        assert!(LossWeights::motion_stage1().validate().is_ok());
        let bad = LossWeights { mask: -1.0, ..LossWeights::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn smooth_two_frame_example_and_reverse_symmetry() {
        let mut tape = Tape::new();
        let b = [frame(&mut tape, vec![0.0, 0.0]), frame(&mut tape, vec![1.0, 0.0])];
        let t = [frame(&mut tape, vec![0.2; 6]), frame(&mut tape, vec![0.2; 6])];
        let l = l_smooth(&mut tape, &b, &t).unwrap();
        assert_eq!(tape.scalar(l), 1.0);

        let seq: Vec<Var> = (0..5).map(|i| frame(&mut tape, vec![(i as f64).sin(), (i * i) as f64 * 0.1])).collect();
        let th: Vec<Var> = (0..5).map(|i| frame(&mut tape, vec![(i as f64 * 0.7).cos(); 3])).collect();
        let fwd = l_smooth(&mut tape, &seq, &th).unwrap();
        let rev_b: Vec<Var> = seq.iter().rev().copied().collect();
        let rev_t: Vec<Var> = th.iter().rev().copied().collect();
        let rev = l_smooth(&mut tape, &rev_b, &rev_t).unwrap();
        assert!((tape.scalar(fwd) - tape.scalar(rev)).abs() < 1e-12);
        let single = l_smooth(&mut tape, &seq[..1], &th[..1]).unwrap();
        assert_eq!(tape.scalar(single), 0.0);
    }

    #[test]
    fn kp2d_convention() {
        let mut tape = Tape::new();
        let gt: Vec<[f64; 2]> = (0..21).map(|k| [k as f64, 50.0]).collect();
        let mut uvz: Vec<f64> = gt.iter().flat_map(|p| [p[0], p[1], 5.0]).collect();
        uvz[0] += 3.0;
        uvz[1] += 4.0;
        let pred = tape.var(uvz, Shape::Matrix(21, 3)).unwrap();
        let l = l_kp2d(&mut tape, pred, &gt, &[true; 21], 100, 100).unwrap();
        assert!((tape.scalar(l.value) - 0.07 / 42.0).abs() < 1e-15);
        let none = l_kp2d(&mut tape, pred, &gt, &[false; 21], 100, 100).unwrap();
        assert!(none.all_invisible());
    }

    #[test]
    fn reg_pose_skips_root() {
        let mut tape = Tape::new();
        let th = frame(&mut tape, vec![1.0, 1.0, 1.0, 0.0, 0.3, 0.0, 0.0, 0.0, 0.0]);
        let l = l_reg_pose(&mut tape, &[th]).unwrap();
        assert!((tape.scalar(l) - 0.09 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn image_term_constant_offset() {
        let gt = Image::from_data(16, 12, 3, (0..16 * 12 * 3).map(|i| ((i * 37) % 101) as f64 / 200.0).collect()).unwrap();
        let shifted = Image {
            data: gt.data.iter().map(|x| x + 0.1).collect(),
            ..gt.clone()
        };
        let mut tape = Tape::new();
        let pred = tape.var(shifted.data.clone(), Shape::Matrix(16 * 12, 3)).unwrap();
        let l = l_image(&mut tape, pred, &gt).unwrap();
        let expected = 0.1 + (1.0 - ssim(&shifted, &gt).unwrap());
        assert!((tape.scalar(l) - expected).abs() < 1e-12);
        let same = tape.var(gt.data.clone(), Shape::Matrix(16 * 12, 3)).unwrap();
        let l0 = l_image(&mut tape, same, &gt).unwrap();
        assert!(tape.scalar(l0).abs() < 1e-12);
    }

    #[test]
    fn image_term_gradient() {
        let gt = Image::from_data(12, 12, 1, (0..144).map(|i| ((i * 53) % 97) as f64 / 97.0).collect()).unwrap();
        let start: Vec<f64> = gt.data.iter().enumerate().map(|(i, x)| x + 0.05 + 0.01 * (i % 7) as f64).collect();
        let report = check_gradient(&[(start, Shape::Vector(144))], 1e-6, |t, v| l_image(t, v[0], &gt)).unwrap();
        assert!(report.max_rel_err < 1e-5, "{report:?}");
    }
}
