//! Merging overlapping fixed-length windows into one sequence.

use std::f64::consts::PI;

use nalgebra::{Rotation3, UnitQuaternion};

use crate::camera::PinholeCamera;
use crate::error::{Error, Result};
use crate::math::{mat3, mat3_to_array};
use crate::model::PoseState;

/// Window start frames: every `stride` frames, plus a last window flush with
/// the end. A clip shorter than `window` gets a single window.
pub fn window_starts(total: usize, window: usize, stride: usize) -> Result<Vec<usize>> {
    if window == 0 || stride == 0 || stride > window {
        return Err(Error::Invalid(format!("need 0 < stride <= window, got stride {stride}, window {window}")));
    }
    if total <= window {
        return Ok(vec![0]);
    }
    let last = total - window;
    let mut starts: Vec<usize> = (0..=last).step_by(stride).collect();
    if *starts.last().expect("starts begin at 0") != last {
        starts.push(last);
    }
    Ok(starts)
}

/// The representation of the rotation `w` closest to `reference`: either
/// `w` itself or the same rotation going the other way round.
fn align_axis_angle(w: [f64; 3], reference: [f64; 3]) -> [f64; 3] {
    let angle = (w[0] * w[0] + w[1] * w[1] + w[2] * w[2]).sqrt();
    if angle < 1e-12 {
        return w;
    }
    let flipped = w.map(|x| x * (1.0 - 2.0 * PI / angle));
    let dist = |a: [f64; 3]| (0..3).map(|k| (a[k] - reference[k]).powi(2)).sum::<f64>();
    if dist(flipped) < dist(w) {
        flipped
    } else {
        w
    }
}

fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a + t * (b - a)
}

fn blend_camera(a: &PinholeCamera, b: &PinholeCamera, t: f64) -> PinholeCamera {
    let rotation = if a.rotation == b.rotation {
        a.rotation
    } else {
        let qa = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix(&mat3(&a.rotation)));
        let qb = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix(&mat3(&b.rotation)));
        mat3_to_array(qa.slerp(&qb, t).to_rotation_matrix().matrix())
    };
    PinholeCamera {
        fx: lerp(a.fx, b.fx, t),
        fy: lerp(a.fy, b.fy, t),
        cx: lerp(a.cx, b.cx, t),
        cy: lerp(a.cy, b.cy, t),
        rotation,
        translation: std::array::from_fn(|k| lerp(a.translation[k], b.translation[k], t)),
        width: a.width,
        height: a.height,
    }
}

/// `a + t (b - a)` in parameter space, with `b`'s joint rotations first
/// re-expressed to lie nearest `a`'s.
fn blend(a: &PoseState, b: &PoseState, t: f64) -> Result<PoseState> {
    if a.beta.len() != b.beta.len() || a.theta.len() != b.theta.len() {
        return Err(Error::Shape("stitched windows disagree on parameter sizes".into()));
    }
    Ok(PoseState {
        beta: a.beta.iter().zip(&b.beta).map(|(&x, &y)| lerp(x, y, t)).collect(),
        theta: a
            .theta
            .iter()
            .zip(&b.theta)
            .map(|(&x, &y)| {
                let y = align_axis_angle(y, x);
                std::array::from_fn(|k| lerp(x[k], y[k], t))
            })
            .collect(),
        gamma: std::array::from_fn(|k| lerp(a.gamma[k], b.gamma[k], t)),
        camera: blend_camera(&a.camera, &b.camera, t),
    })
}

/// Stitches per-window sequences laid out by [`window_starts`]`(total,
/// window, stride)`. On an overlap of `L` frames the later window's weight
/// ramps `1/(L+1), 2/(L+1), ..., L/(L+1)`.
pub fn stitch_windows(windows: &[Vec<PoseState>], window: usize, stride: usize, total: usize) -> Result<Vec<PoseState>> {
    let starts = window_starts(total, window, stride)?;
    if windows.len() != starts.len() {
        return Err(Error::Invalid(format!(
            "{} windows supplied, {} needed to cover {total} frames",
            windows.len(),
            starts.len()
        )));
    }
    let expected = window.min(total);
    let mut out: Vec<PoseState> = Vec::with_capacity(total);
    for (w, (seq, &start)) in windows.iter().zip(&starts).enumerate() {
        if seq.len() != expected {
            return Err(Error::Invalid(format!("window {w} has {} frames, expected {expected}", seq.len())));
        }
        if start > out.len() {
            return Err(Error::Invalid(format!("frames {}..{start} are not covered by any window", out.len())));
        }
        let overlap = out.len() - start;
        for (i, s) in seq.iter().enumerate().take(overlap) {
            let t = (i + 1) as f64 / (overlap + 1) as f64;
            out[start + i] = blend(&out[start + i], s, t)?;
        }
        out.extend(seq.iter().skip(overlap).cloned());
    }
    if out.len() != total {
        return Err(Error::Invalid(format!("stitched {} frames, expected {total}", out.len())));
    }
    Ok(out)
}
