//! Windowed structural similarity with an analytic gradient.

use crate::error::{Error, Result};
use crate::render::Image;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

/// Normalized 1-D Gaussian taps; the 2-D window is their outer product.
pub fn gaussian_taps() -> [f64; SSIM_WINDOW] {
    let mut taps = [0.0; SSIM_WINDOW];
    let half = (SSIM_WINDOW / 2) as f64;
    for (k, t) in taps.iter_mut().enumerate() {
        let d = k as f64 - half;
        *t = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= s);
    taps
}

/// Separable "valid" correlation of an `h x w` plane.
fn filter_valid(plane: &[f64], w: usize, h: usize, taps: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (ow, oh) = (w + 1 - SSIM_WINDOW, h + 1 - SSIM_WINDOW);
    let mut rows = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = taps.iter().enumerate().map(|(k, t)| t * plane[y * w + x + k]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = taps.iter().enumerate().map(|(k, t)| t * rows[(y + k) * ow + x]).sum();
        }
    }
    out
}

/// Adjoint of [`filter_valid`]: scatters an output-sized map back to `h x w`.
fn filter_valid_adjoint(map: &[f64], w: usize, h: usize, taps: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (ow, oh) = (w + 1 - SSIM_WINDOW, h + 1 - SSIM_WINDOW);
    let mut rows = vec![0.0; ow * h];
    for y in 0..oh {
        for x in 0..ow {
            let m = map[y * ow + x];
            for (k, t) in taps.iter().enumerate() {
                rows[(y + k) * ow + x] += t * m;
            }
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..ow {
            let m = rows[y * ow + x];
            for (k, t) in taps.iter().enumerate() {
                out[y * w + x + k] += t * m;
            }
        }
    }
    out
}

fn channel(img: &Image, c: usize) -> Vec<f64> {
    img.data.iter().skip(c).step_by(img.channels).copied().collect()
}

fn check_pair(pred: &Image, gt: &Image) -> Result<()> {
    pred.same_size(gt)?;
    if pred.width < SSIM_WINDOW || pred.height < SSIM_WINDOW {
        return Err(Error::Shape(format!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {}x{}",
            pred.width, pred.height
        )));
    }
    Ok(())
}

struct Moments {
    mx: Vec<f64>,
    my: Vec<f64>,
    exx: Vec<f64>,
    eyy: Vec<f64>,
    exy: Vec<f64>,
}

fn moments(x: &[f64], y: &[f64], w: usize, h: usize, taps: &[f64; SSIM_WINDOW]) -> Moments {
    let prod = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).collect::<Vec<_>>();
    Moments {
        mx: filter_valid(x, w, h, taps),
        my: filter_valid(y, w, h, taps),
        exx: filter_valid(&prod(x, x), w, h, taps),
        eyy: filter_valid(&prod(y, y), w, h, taps),
        exy: filter_valid(&prod(x, y), w, h, taps),
    }
}

const C1: f64 = SSIM_K1 * SSIM_K1;
const C2: f64 = SSIM_K2 * SSIM_K2;

/// Mean SSIM over valid window positions and channels, for data in [0, 1].
pub fn ssim(pred: &Image, gt: &Image) -> Result<f64> {
    Ok(ssim_with_grad(pred, gt, false)?.0)
}

/// SSIM and, when requested, its gradient with respect to `pred` in the
/// image's interleaved layout.
pub fn ssim_with_grad(pred: &Image, gt: &Image, want_grad: bool) -> Result<(f64, Option<Vec<f64>>)> {
    check_pair(pred, gt)?;
    let (w, h, ch) = (pred.width, pred.height, pred.channels);
    let taps = gaussian_taps();
    let positions = (w + 1 - SSIM_WINDOW) * (h + 1 - SSIM_WINDOW);
    let norm = 1.0 / (positions * ch) as f64;
    let mut total = 0.0;
    let mut grad = want_grad.then(|| vec![0.0; pred.data.len()]);
    for c in 0..ch {
        let (x, y) = (channel(pred, c), channel(gt, c));
        let m = moments(&x, &y, w, h, &taps);
        let mut d_mu = vec![0.0; positions];
        let mut d_exx = vec![0.0; positions];
        let mut d_exy = vec![0.0; positions];
        for i in 0..positions {
            let (mx, my) = (m.mx[i], m.my[i]);
            let a1 = 2.0 * mx * my + C1;
            let a2 = 2.0 * (m.exy[i] - mx * my) + C2;
            let b1 = mx * mx + my * my + C1;
            let b2 = (m.exx[i] - mx * mx) + (m.eyy[i] - my * my) + C2;
            let s = a1 * a2 / (b1 * b2);
            total += s;
            if grad.is_some() {
                // sigma terms are written through raw moments, so mu_x also
                // enters a2 and b2
                d_mu[i] = norm * s * (2.0 * my / a1 - 2.0 * my / a2 - 2.0 * mx / b1 + 2.0 * mx / b2);
                d_exx[i] = -norm * s / b2;
                d_exy[i] = norm * s * 2.0 / a2;
            }
        }
        if let Some(g) = grad.as_mut() {
            let t_mu = filter_valid_adjoint(&d_mu, w, h, &taps);
            let t_xx = filter_valid_adjoint(&d_exx, w, h, &taps);
            let t_xy = filter_valid_adjoint(&d_exy, w, h, &taps);
            for p in 0..w * h {
                g[p * ch + c] = t_mu[p] + 2.0 * x[p] * t_xx[p] + y[p] * t_xy[p];
            }
        }
    }
    Ok((total * norm, grad))
}
