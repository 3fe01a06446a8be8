//! Tiled front-to-back Gaussian splatting on the CPU.

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{Image, RenderTarget};
use crate::autodiff::{CustomOp, Shape, Tape, Var};
use crate::camera::PinholeCamera;
use crate::error::{Error, Result};
use crate::gaussian::{covariance_matrix, PosedGaussians};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplatConfig {
    pub tile_size: usize,
    /// Isotropic variance added to every projected covariance, in px².
    pub low_pass: f64,
    pub alpha_max: f64,
    /// Compositing stops once transmittance falls below this.
    pub min_transmittance: f64,
    /// Squared Mahalanobis radius beyond which a splat is ignored.
    pub cutoff: f64,
    /// Gaussians closer than this camera depth are skipped.
    pub near: f64,
}

impl Default for SplatConfig {
    fn default() -> Self {
        SplatConfig {
            tile_size: 16,
            low_pass: 0.3,
            alpha_max: 0.99,
            min_transmittance: 1e-4,
            cutoff: 40.0,
            near: 0.01,
        }
    }
}

/// A Gaussian after projection to the image plane.
#[derive(Clone, Debug)]
struct Splat {
    index: usize,
    depth: f64,
    mean: [f64; 2],
    /// Inverse 2D covariance `[a, b, c]` for `[[a, b], [b, c]]`.
    conic: [f64; 3],
    cam_point: Vector3<f64>,
    /// Projection Jacobian times world-to-camera rotation.
    jw: Matrix2x3<f64>,
    /// Pixel bounding box `[x0, y0, x1, y1)`.
    bbox: [usize; 4],
}

struct Prepared {
    splats: Vec<Splat>,
    /// Per tile, positions into `splats` in compositing order.
    tiles: Vec<Vec<u32>>,
    tiles_x: usize,
}

fn prepare(centers: &[f64], covs: &[f64], cam: &PinholeCamera, cfg: &SplatConfig) -> Result<Prepared> {
    let (w, h) = (cam.width as usize, cam.height as usize);
    if w == 0 || h == 0 {
        return Err(Error::Invalid("zero-area image".into()));
    }
    if cfg.tile_size == 0 {
        return Err(Error::Invalid("tile size must be positive".into()));
    }
    let rot = cam.rotation_matrix();
    let trans = Vector3::from(cam.translation);
    let n = centers.len() / 3;
    let mut splats: Vec<Splat> = (0..n)
        .into_par_iter()
        .filter_map(|i| {
            let p = Vector3::new(centers[i * 3], centers[i * 3 + 1], centers[i * 3 + 2]);
            let t = rot * p + trans;
            if t.z <= cfg.near {
                return None;
            }
            let cov: [f64; 6] = covs[i * 6..i * 6 + 6].try_into().unwrap();
            let j = Matrix2x3::new(
                cam.fx / t.z,
                0.0,
                -cam.fx * t.x / (t.z * t.z),
                0.0,
                cam.fy / t.z,
                -cam.fy * t.y / (t.z * t.z),
            );
            let jw = j * rot;
            let s: Matrix2<f64> = jw * covariance_matrix(&cov) * jw.transpose();
            let (s00, s01, s11) = (s[(0, 0)] + cfg.low_pass, s[(0, 1)], s[(1, 1)] + cfg.low_pass);
            let det = s00 * s11 - s01 * s01;
            if !(det > 0.0) {
                return None;
            }
            let conic = [s11 / det, -s01 / det, s00 / det];
            let mean = [cam.fx * t.x / t.z + cam.cx, cam.fy * t.y / t.z + cam.cy];
            let mid = 0.5 * (s00 + s11);
            let lambda = mid + (mid * mid - det).max(0.0).sqrt();
            let radius = (cfg.cutoff * lambda).sqrt();
            // Pixel centers sit at +0.5.
            let x0 = (mean[0] - radius - 0.5).ceil().max(0.0);
            let y0 = (mean[1] - radius - 0.5).ceil().max(0.0);
            let x1 = (mean[0] + radius - 0.5).floor() + 1.0;
            let y1 = (mean[1] + radius - 0.5).floor() + 1.0;
            if x1 <= x0 || y1 <= y0 || x0 >= w as f64 || y0 >= h as f64 || !mean.iter().all(|m| m.is_finite()) {
                return None;
            }
            Some(Splat {
                index: i,
                depth: t.z,
                mean,
                conic,
                cam_point: t,
                jw,
                bbox: [x0 as usize, y0 as usize, (x1 as usize).min(w), (y1 as usize).min(h)],
            })
        })
        .collect();
    splats.sort_by(|a, b| a.depth.total_cmp(&b.depth).then(a.index.cmp(&b.index)));

    let ts = cfg.tile_size;
    let tiles_x = w.div_ceil(ts);
    let tiles_y = h.div_ceil(ts);
    let mut tiles = vec![Vec::new(); tiles_x * tiles_y];
    for (k, s) in splats.iter().enumerate() {
        let [x0, y0, x1, y1] = s.bbox;
        for ty in y0 / ts..=(y1 - 1) / ts {
            for tx in x0 / ts..=(x1 - 1) / ts {
                tiles[ty * tiles_x + tx].push(k as u32);
            }
        }
    }
    Ok(Prepared { splats, tiles, tiles_x })
}

/// Opacity of splat `s` at pixel center `(px, py)`, or `None` when outside
/// the cutoff. Also returns the Gaussian falloff.
#[inline]
fn splat_alpha(s: &Splat, opacity: f64, px: f64, py: f64, cfg: &SplatConfig) -> Option<(f64, f64, [f64; 2])> {
    let d = [px - s.mean[0], py - s.mean[1]];
    let [a, b, c] = s.conic;
    let maha = a * d[0] * d[0] + 2.0 * b * d[0] * d[1] + c * d[1] * d[1];
    if maha > cfg.cutoff {
        return None;
    }
    let g = (-0.5 * maha).exp();
    Some(((opacity * g).min(cfg.alpha_max), g, d))
}

struct TileOutput {
    rgb: Vec<f64>,
    alpha: Vec<f64>,
    /// Number of tile-list entries scanned before compositing stopped.
    last: Vec<u32>,
}

fn tile_bounds(tile: usize, prep: &Prepared, w: usize, h: usize, ts: usize) -> (usize, usize, usize, usize) {
    let (tx, ty) = (tile % prep.tiles_x, tile / prep.tiles_x);
    (tx * ts, ty * ts, ((tx + 1) * ts).min(w), ((ty + 1) * ts).min(h))
}

fn rasterize(
    prep: &Prepared,
    colors: &[f64],
    opacities: &[f64],
    w: usize,
    h: usize,
    bg: [f64; 3],
    cfg: &SplatConfig,
) -> (Vec<f64>, Vec<f64>, Vec<u32>) {
    let ts = cfg.tile_size;
    let outputs: Vec<TileOutput> = (0..prep.tiles.len())
        .into_par_iter()
        .map(|tile| {
            let (x0, y0, x1, y1) = tile_bounds(tile, prep, w, h, ts);
            let n = (x1 - x0) * (y1 - y0);
            let mut out = TileOutput {
                rgb: Vec::with_capacity(n * 3),
                alpha: Vec::with_capacity(n),
                last: Vec::with_capacity(n),
            };
            let list = &prep.tiles[tile];
            for y in y0..y1 {
                for x in x0..x1 {
                    let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                    let mut t = 1.0;
                    let mut c = [0.0; 3];
                    let mut last = 0;
                    for (k, &si) in list.iter().enumerate() {
                        let s = &prep.splats[si as usize];
                        let Some((alpha, _, _)) = splat_alpha(s, opacities[s.index], px, py, cfg) else {
                            continue;
                        };
                        let col = &colors[s.index * 3..s.index * 3 + 3];
                        for ch in 0..3 {
                            c[ch] += col[ch] * alpha * t;
                        }
                        t *= 1.0 - alpha;
                        last = k + 1;
                        if t < cfg.min_transmittance {
                            break;
                        }
                    }
                    for ch in 0..3 {
                        out.rgb.push(c[ch] + t * bg[ch]);
                    }
                    out.alpha.push(1.0 - t);
                    out.last.push(last as u32);
                }
            }
            out
        })
        .collect();
    let mut rgb = vec![0.0; w * h * 3];
    let mut alpha = vec![0.0; w * h];
    let mut last = vec![0u32; w * h];
    for (tile, out) in outputs.into_iter().enumerate() {
        let (x0, y0, x1, y1) = tile_bounds(tile, prep, w, h, ts);
        let mut i = 0;
        for y in y0..y1 {
            for x in x0..x1 {
                let p = y * w + x;
                rgb[p * 3..p * 3 + 3].copy_from_slice(&out.rgb[i * 3..i * 3 + 3]);
                alpha[p] = out.alpha[i];
                last[p] = out.last[i];
                i += 1;
            }
        }
    }
    (rgb, alpha, last)
}

fn flatten_gaussians(g: &PosedGaussians) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    let n = g.len();
    if g.covariances.len() != n || g.colors.len() != n || g.opacities.len() != n {
        return Err(Error::Shape("posed Gaussian arrays differ in length".into()));
    }
    Ok((
        g.centers.iter().flatten().copied().collect(),
        g.covariances.iter().flatten().copied().collect(),
        g.colors.iter().flatten().copied().collect(),
    ))
}

/// Renders posed Gaussians over a flat background.
pub fn splat_render(g: &PosedGaussians, cam: &PinholeCamera, bg: [f64; 3], cfg: &SplatConfig) -> Result<RenderTarget> {
    let (centers, covs, colors) = flatten_gaussians(g)?;
    let prep = prepare(&centers, &covs, cam, cfg)?;
    let (w, h) = (cam.width as usize, cam.height as usize);
    let (rgb, alpha, _) = rasterize(&prep, &colors, &g.opacities, w, h, bg, cfg);
    Ok(RenderTarget {
        color: Image::from_data(w, h, 3, rgb)?,
        alpha: Image::from_data(w, h, 1, alpha)?,
        background: bg,
    })
}

/// Differentiable render. Inputs are `centers (N x 3)`, `covariances (N x 6)`,
/// `colors (N x 3)` and `opacities (N)`; returns `(rgb HW x 3, alpha HW)`.
/// The camera and background are constants.
#[allow(clippy::too_many_arguments)]
pub fn splat_render_taped(
    tape: &mut Tape,
    centers: Var,
    covariances: Var,
    colors: Var,
    opacities: Var,
    cam: &PinholeCamera,
    bg: [f64; 3],
    cfg: &SplatConfig,
) -> Result<(Var, Var)> {
    let n = opacities.len();
    if centers.len() != 3 * n || covariances.len() != 6 * n || colors.len() != 3 * n {
        return Err(Error::Shape(format!("splat inputs disagree on {n} Gaussians")));
    }
    let prep = prepare(tape.value(centers), tape.value(covariances), cam, cfg)?;
    let (w, h) = (cam.width as usize, cam.height as usize);
    let (rgb, alpha, last) = rasterize(&prep, tape.value(colors), tape.value(opacities), w, h, bg, cfg);
    let mut out = rgb;
    out.extend_from_slice(&alpha);
    let op = SplatOp {
        prep,
        last,
        alpha,
        cam: cam.clone(),
        cfg: cfg.clone(),
        bg,
    };
    let joined = tape.custom(Box::new(op), &[centers, covariances, colors, opacities], out, Shape::Vector(4 * w * h))?;
    let rgb = tape.slice(joined, 0, 3 * w * h)?;
    let rgb = tape.reshape(rgb, Shape::Matrix(w * h, 3))?;
    let alpha = tape.slice(joined, 3 * w * h, w * h)?;
    Ok((rgb, alpha))
}

struct SplatOp {
    prep: Prepared,
    last: Vec<u32>,
    alpha: Vec<f64>,
    cam: PinholeCamera,
    cfg: SplatConfig,
    bg: [f64; 3],
}

/// Adjoints of one splat's 2D parameters.
#[derive(Clone, Copy, Default)]
struct Grad2d {
    mean: [f64; 2],
    conic: [f64; 3],
    color: [f64; 3],
    opacity: f64,
}

impl CustomOp for SplatOp {
    fn name(&self) -> &str {
        "splat_render"
    }

    fn backward(&self, inputs: &[&[f64]], _output: &[f64], g: &[f64], gi: &mut [Option<Vec<f64>>]) {
        let (colors, opacities) = (inputs[2], inputs[3]);
        let cfg = &self.cfg;
        let prep = &self.prep;
        let (w, h) = (self.cam.width as usize, self.cam.height as usize);
        let ts = cfg.tile_size;
        let (g_rgb, g_alpha) = g.split_at(3 * w * h);

        let tile_grads: Vec<Vec<Grad2d>> = (0..prep.tiles.len())
            .into_par_iter()
            .map(|tile| {
                let list = &prep.tiles[tile];
                let mut acc = vec![Grad2d::default(); list.len()];
                let (x0, y0, x1, y1) = tile_bounds(tile, prep, w, h, ts);
                for y in y0..y1 {
                    for x in x0..x1 {
                        let p = y * w + x;
                        let gc = [g_rgb[p * 3], g_rgb[p * 3 + 1], g_rgb[p * 3 + 2]];
                        let ga = g_alpha[p];
                        if gc == [0.0; 3] && ga == 0.0 {
                            continue;
                        }
                        let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                        let t_end = 1.0 - self.alpha[p];
                        let mut t_next = t_end;
                        let mut rec = self.bg;
                        for k in (0..self.last[p] as usize).rev() {
                            let s = &prep.splats[list[k] as usize];
                            let o = opacities[s.index];
                            let Some((alpha, gauss, d)) = splat_alpha(s, o, px, py, cfg) else {
                                continue;
                            };
                            let t = t_next / (1.0 - alpha);
                            let col = &colors[s.index * 3..s.index * 3 + 3];
                            let e = &mut acc[k];
                            let mut g_a = ga * t_end / (1.0 - alpha);
                            for ch in 0..3 {
                                e.color[ch] += gc[ch] * alpha * t;
                                g_a += gc[ch] * t * (col[ch] - rec[ch]);
                                rec[ch] = alpha * col[ch] + (1.0 - alpha) * rec[ch];
                            }
                            t_next = t;
                            if o * gauss < cfg.alpha_max {
                                e.opacity += g_a * gauss;
                                let g_power = g_a * alpha;
                                let [a, b, c] = s.conic;
                                e.mean[0] += g_power * (a * d[0] + b * d[1]);
                                e.mean[1] += g_power * (b * d[0] + c * d[1]);
                                e.conic[0] -= 0.5 * g_power * d[0] * d[0];
                                e.conic[1] -= g_power * d[0] * d[1];
                                e.conic[2] -= 0.5 * g_power * d[1] * d[1];
                            }
                        }
                    }
                }
                acc
            })
            .collect();

        let n = opacities.len();
        let mut per_splat = vec![Grad2d::default(); prep.splats.len()];
        for (tile, acc) in tile_grads.iter().enumerate() {
            for (k, e) in prep.tiles[tile].iter().zip(acc) {
                let dst = &mut per_splat[*k as usize];
                for c in 0..2 {
                    dst.mean[c] += e.mean[c];
                }
                for c in 0..3 {
                    dst.conic[c] += e.conic[c];
                    dst.color[c] += e.color[c];
                }
                dst.opacity += e.opacity;
            }
        }

        let rot = self.cam.rotation_matrix();
        let (fx, fy) = (self.cam.fx, self.cam.fy);
        let covs = inputs[1];
        let geo: Vec<([f64; 3], [f64; 6])> = prep
            .splats
            .par_iter()
            .zip(&per_splat)
            .map(|(s, e)| {
                let cov = covariance_matrix(&covs[s.index * 6..s.index * 6 + 6].try_into().unwrap());
                let q = Matrix2::new(s.conic[0], s.conic[1], s.conic[1], s.conic[2]);
                let gq = Matrix2::new(e.conic[0], e.conic[1] / 2.0, e.conic[1] / 2.0, e.conic[2]);
                let gs = -(q * gq * q);
                let g_cov3: Matrix3<f64> = s.jw.transpose() * gs * s.jw;
                let g_jw: Matrix2x3<f64> = gs * s.jw * cov * 2.0;
                let g_j = g_jw * rot.transpose();
                let t = s.cam_point;
                let z2 = t.z * t.z;
                let z3 = z2 * t.z;
                let mut g_t = Vector3::new(
                    g_j[(0, 2)] * (-fx / z2),
                    g_j[(1, 2)] * (-fy / z2),
                    g_j[(0, 0)] * (-fx / z2)
                        + g_j[(0, 2)] * (2.0 * fx * t.x / z3)
                        + g_j[(1, 1)] * (-fy / z2)
                        + g_j[(1, 2)] * (2.0 * fy * t.y / z3),
                );
                g_t.x += e.mean[0] * fx / t.z;
                g_t.y += e.mean[1] * fy / t.z;
                g_t.z -= e.mean[0] * fx * t.x / z2 + e.mean[1] * fy * t.y / z2;
                let g_center = rot.transpose() * g_t;
                (
                    [g_center.x, g_center.y, g_center.z],
                    [
                        g_cov3[(0, 0)],
                        2.0 * g_cov3[(0, 1)],
                        2.0 * g_cov3[(0, 2)],
                        g_cov3[(1, 1)],
                        2.0 * g_cov3[(1, 2)],
                        g_cov3[(2, 2)],
                    ],
                )
            })
            .collect();

        let (first, rest) = gi.split_at_mut(2);
        let (g_centers, g_covs) = first.split_at_mut(1);
        let (g_colors, g_opac) = rest.split_at_mut(1);
        for ((s, e), (gc, gv)) in prep.splats.iter().zip(&per_splat).zip(&geo) {
            let i = s.index;
            debug_assert!(i < n);
            if let Some(b) = &mut g_centers[0] {
                for c in 0..3 {
                    b[i * 3 + c] += gc[c];
                }
            }
            if let Some(b) = &mut g_covs[0] {
                for c in 0..6 {
                    b[i * 6 + c] += gv[c];
                }
            }
            if let Some(b) = &mut g_colors[0] {
                for c in 0..3 {
                    b[i * 3 + c] += e.color[c];
                }
            }
            if let Some(b) = &mut g_opac[0] {
                b[i] += e.opacity;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::check::check_gradient;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn camera(w: u32, h: u32) -> PinholeCamera {
        PinholeCamera::look_at([0.0, 0.0, 4.0], [0.0, 0.0, 0.0], w, h).unwrap()
    }

    fn random_scene(rng: &mut ChaCha8Rng, n: usize, spread: f64, size: (f64, f64)) -> PosedGaussians {
        let mut g = PosedGaussians::default();
        for _ in 0..n {
            g.centers.push([
                rng.random_range(-spread..spread),
                rng.random_range(-spread..spread),
                rng.random_range(-spread..spread),
            ]);
            let a = Matrix3::from_fn(|_, _| rng.random_range(-1.0..1.0));
            let s = rng.random_range(size.0..size.1);
            let cov = a * a.transpose() * (s * s) + Matrix3::identity() * (0.1 * s * s);
            g.covariances.push([cov[(0, 0)], cov[(0, 1)], cov[(0, 2)], cov[(1, 1)], cov[(1, 2)], cov[(2, 2)]]);
            g.colors.push([rng.random(), rng.random(), rng.random()]);
            g.opacities.push(rng.random_range(0.05..0.99));
        }
        g
    }

    #[test]
    fn empty_set_is_background() {
        let bg = [0.2, 0.3, 0.4];
        let out = splat_render(&PosedGaussians::default(), &camera(20, 10), bg, &SplatConfig::default()).unwrap();
        assert_eq!(out, RenderTarget::background(20, 10, bg));
    }

    #[test]
    fn front_gaussian_dominates() {
        let mut g = PosedGaussians::default();
        for (z, color) in [(-1.0, [0.0, 0.0, 1.0]), (1.0, [1.0, 0.0, 0.0])] {
            g.centers.push([0.0, 0.0, z]);
            g.covariances.push([0.04, 0.0, 0.0, 0.04, 0.0, 0.04]);
            g.colors.push(color);
            g.opacities.push(0.99);
        }
        let out = splat_render(&g, &camera(32, 32), [0.0; 3], &SplatConfig::default()).unwrap();
        let px = out.color.pixel(16, 16);
        assert!(px[0] > 0.95 && px[2] < 0.05, "{px:?}");
    }

    #[test]
    fn order_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = random_scene(&mut rng, 60, 1.0, (0.05, 0.3));
        let mut perm: Vec<usize> = (0..g.len()).collect();
        perm.reverse();
        let h = PosedGaussians {
            centers: perm.iter().map(|&i| g.centers[i]).collect(),
            covariances: perm.iter().map(|&i| g.covariances[i]).collect(),
            colors: perm.iter().map(|&i| g.colors[i]).collect(),
            opacities: perm.iter().map(|&i| g.opacities[i]).collect(),
        };
        let cfg = SplatConfig::default();
        let a = splat_render(&g, &camera(48, 40), [0.0; 3], &cfg).unwrap();
        let b = splat_render(&h, &camera(48, 40), [0.0; 3], &cfg).unwrap();
        assert_eq!(a, b);
        assert!(a.alpha.data.iter().all(|&x| (0.0..=1.0).contains(&x)));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..3 {
            let g = random_scene(&mut rng, 12, 0.6, (0.1, 0.3));
            let n = g.len();
            let cam = camera(24, 20);
            let w: Vec<f64> = (0..24 * 20 * 4).map(|_| rng.random_range(-1.0..1.0)).collect();
            let (c, v, col) = flatten_gaussians(&g).unwrap();
            let inputs = vec![
                (c, Shape::Matrix(n, 3)),
                (v, Shape::Matrix(n, 6)),
                (col, Shape::Matrix(n, 3)),
                (g.opacities.iter().map(|o| o * 0.8).collect(), Shape::Vector(n)),
            ];
            let cfg = SplatConfig {
                min_transmittance: 0.0,
                cutoff: 1e4,
                ..SplatConfig::default()
            };
            let report = check_gradient(&inputs, 1e-6, |t, x| {
                let (rgb, alpha) = splat_render_taped(t, x[0], x[1], x[2], x[3], &cam, [0.3, 0.6, 0.1], &cfg)?;
                let joined = t.concat(&[rgb, alpha])?;
                let wv = t.constant(w.clone(), joined.shape())?;
                t.dot(joined, wv)
            })
            .unwrap();
            assert!(report.max_rel_err < 1e-5, "{}", report.max_rel_err);
        }
    }
}
