//! Differentiable silhouette of a triangle mesh.
//!
//! Every face is split into `density^2` sub-triangles. Each sub-triangle is
//! a sample at its centroid carrying its projected screen area `a`, spread
//! as a Gaussian of variance `blur^2 + a / (4 pi)` (the variance of a disk of
//! that area plus a fixed blur). Because `a` is the foreshortened area, the
//! summed density `D` counts the surface layers covering a pixel: about 2
//! inside a closed surface and about 1 on its outline, whatever the mesh
//! resolution or viewpoint. The mask is a sigmoid of `D`, rescaled to be
//! exactly 0 where `D = 0`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::Image;
use crate::autodiff::{sigmoid, CustomOp, Shape, Tape, Var};
use crate::camera::{PinholeCamera, TapedCamera, MIN_DEPTH};
use crate::error::{Error, Result};

/// Fixed split of the face set so the accumulation order does not depend on
/// the thread count.
const CHUNKS: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SilhouetteConfig {
    /// Slope of the sigmoid applied to the layer density.
    pub sharpness: f64,
    /// Layer density at the midpoint of the sigmoid.
    pub threshold: f64,
    /// Standard deviation of the blur added to every sample, in pixels.
    pub blur: f64,
    /// Kernels are truncated where the squared distance exceeds `cutoff`
    /// kernel variances, and shifted so they vanish continuously there.
    pub cutoff: f64,
    /// Samples per face edge; each face carries `density^2` samples.
    pub density: usize,
}

impl Default for SilhouetteConfig {
    fn default() -> Self {
        SilhouetteConfig {
            sharpness: 6.0,
            threshold: 1.0,
            blur: 0.5,
            cutoff: 16.0,
            density: 2,
        }
    }
}

impl SilhouetteConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [self.sharpness, self.threshold, self.blur, self.cutoff];
        if !positive.iter().all(|&x| x > 0.0 && x.is_finite()) || self.density == 0 {
            return Err(Error::Config("silhouette parameters must be positive and finite".into()));
        }
        Ok(())
    }

    /// Sigmoid offset at zero density, removed so empty pixels read 0.
    fn base(&self) -> f64 {
        sigmoid(-self.sharpness * self.threshold)
    }

    fn mask(&self, density: f64) -> f64 {
        let b = self.base();
        (sigmoid(self.sharpness * (density - self.threshold)) - b) / (1.0 - b)
    }

    fn mask_slope(&self, density: f64) -> f64 {
        let s = sigmoid(self.sharpness * (density - self.threshold));
        self.sharpness * s * (1.0 - s) / (1.0 - self.base())
    }

    /// Barycentric centroids of the `density^2` congruent sub-triangles.
    fn pattern(&self) -> Vec<[f64; 3]> {
        let n = self.density.max(1);
        let nf = n as f64;
        let mut out = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n - i {
                let b1 = (i as f64 + 1.0 / 3.0) / nf;
                let b2 = (j as f64 + 1.0 / 3.0) / nf;
                out.push([1.0 - b1 - b2, b1, b2]);
                if i + j + 2 <= n {
                    let b1 = (i as f64 + 2.0 / 3.0) / nf;
                    let b2 = (j as f64 + 2.0 / 3.0) / nf;
                    out.push([1.0 - b1 - b2, b1, b2]);
                }
            }
        }
        out
    }
}

/// Signed screen area of a projected triangle and its partials with respect
/// to `[u0, v0, u1, v1, u2, v2]`.
#[inline]
fn signed_area(p: &[[f64; 2]; 3]) -> (f64, [f64; 6]) {
    let [[u0, v0], [u1, v1], [u2, v2]] = *p;
    let a = 0.5 * ((u1 - u0) * (v2 - v0) - (u2 - u0) * (v1 - v0));
    let d = [
        0.5 * (v1 - v2),
        0.5 * (u2 - u1),
        0.5 * (v2 - v0),
        -0.5 * (u2 - u0),
        -0.5 * (v1 - v0),
        0.5 * (u1 - u0),
    ];
    (a, d)
}

/// Density contribution at `(px, py)` of a sample at `(u, v)` with area `a`,
/// plus partials with respect to `u`, `v` and `a`. `None` outside the
/// truncation radius.
#[inline]
fn kernel(u: f64, v: f64, a: f64, px: f64, py: f64, cfg: &SilhouetteConfig) -> Option<(f64, [f64; 3])> {
    let s2 = cfg.blur * cfg.blur + a / (4.0 * std::f64::consts::PI);
    let (dx, dy) = (px - u, py - v);
    let r2 = dx * dx + dy * dy;
    if r2 >= cfg.cutoff * s2 {
        return None;
    }
    let e = (-0.5 * r2 / s2).exp();
    let e0 = (-0.5 * cfg.cutoff).exp();
    let tau = std::f64::consts::TAU;
    let amp = a / (tau * s2);
    let ds2 = 1.0 / (2.0 * tau);
    let damp = 1.0 / (tau * s2) - a * ds2 / (tau * s2 * s2);
    let de = e * 0.5 * r2 / (s2 * s2) * ds2;
    Some((amp * (e - e0), [amp * e * dx / s2, amp * e * dy / s2, damp * (e - e0) + amp * de]))
}

/// Pixel box covering a kernel of area `a` centred at `(u, v)`.
fn support(u: f64, v: f64, a: f64, cfg: &SilhouetteConfig, w: usize, h: usize) -> Option<(usize, usize, usize, usize)> {
    let s2 = cfg.blur * cfg.blur + a / (4.0 * std::f64::consts::PI);
    let r = (cfg.cutoff * s2).sqrt();
    let x0 = (u - r - 0.5).ceil().max(0.0);
    let y0 = (v - r - 0.5).ceil().max(0.0);
    let x1 = ((u + r - 0.5).floor() + 1.0).min(w as f64);
    let y1 = ((v + r - 0.5).floor() + 1.0).min(h as f64);
    (x1 > x0 && y1 > y0).then(|| (x0 as usize, y0 as usize, x1 as usize, y1 as usize))
}

/// A face with all corners in front of the camera.
struct ProjectedFace {
    corners: [usize; 3],
    uv: [[f64; 2]; 3],
    area: f64,
    d_area: [f64; 6],
}

fn project_faces(uvz: &[f64], faces: &[[u32; 3]]) -> Vec<Option<ProjectedFace>> {
    faces
        .iter()
        .map(|f| {
            let corners = f.map(|i| i as usize);
            if corners.iter().any(|&i| !(uvz[i * 3 + 2] > MIN_DEPTH)) {
                return None;
            }
            let uv = corners.map(|i| [uvz[i * 3], uvz[i * 3 + 1]]);
            let (a, d) = signed_area(&uv);
            let s = a.signum();
            Some(ProjectedFace {
                corners,
                uv,
                area: a.abs(),
                d_area: d.map(|x| x * s),
            })
        })
        .collect()
}

fn sample_uv(face: &ProjectedFace, b: &[f64; 3]) -> (f64, f64) {
    let u = b[0] * face.uv[0][0] + b[1] * face.uv[1][0] + b[2] * face.uv[2][0];
    let v = b[0] * face.uv[0][1] + b[1] * face.uv[1][1] + b[2] * face.uv[2][1];
    (u, v)
}

/// Summed layer density per pixel.
fn layer_density(faces: &[Option<ProjectedFace>], w: usize, h: usize, cfg: &SilhouetteConfig) -> Vec<f64> {
    let pattern = cfg.pattern();
    let m = pattern.len() as f64;
    let chunk = faces.len().div_ceil(CHUNKS).max(1);
    let parts: Vec<Vec<f64>> = faces
        .par_chunks(chunk)
        .map(|part| {
            let mut acc = vec![0.0; w * h];
            for face in part.iter().flatten() {
                let a = face.area / m;
                for b in &pattern {
                    let (u, v) = sample_uv(face, b);
                    let Some((x0, y0, x1, y1)) = support(u, v, a, cfg, w, h) else { continue };
                    for y in y0..y1 {
                        for x in x0..x1 {
                            if let Some((c, _)) = kernel(u, v, a, x as f64 + 0.5, y as f64 + 0.5, cfg) {
                                acc[y * w + x] += c;
                            }
                        }
                    }
                }
            }
            acc
        })
        .collect();
    let mut total = vec![0.0; w * h];
    for p in parts {
        total.iter_mut().zip(p).for_each(|(a, b)| *a += b);
    }
    total
}

fn check_faces(faces: &[[u32; 3]], n_vertices: usize) -> Result<()> {
    if let Some(f) = faces.iter().find(|f| f.iter().any(|&i| i as usize >= n_vertices)) {
        return Err(Error::Shape(format!("face {f:?} indexes past {n_vertices} vertices")));
    }
    Ok(())
}

/// Render-only soft silhouette of a world-space mesh.
pub fn soft_silhouette(vertices: &[[f64; 3]], faces: &[[u32; 3]], cam: &PinholeCamera, cfg: &SilhouetteConfig) -> Result<Image> {
    cfg.validate()?;
    check_faces(faces, vertices.len())?;
    let (w, h) = (cam.width as usize, cam.height as usize);
    let uvz: Vec<f64> = vertices
        .iter()
        .flat_map(|&p| {
            let pr = cam.project_point(p);
            [pr.pixel[0], pr.pixel[1], pr.depth]
        })
        .collect();
    let density = layer_density(&project_faces(&uvz, faces), w, h, cfg);
    Image::from_data(w, h, 1, density.into_iter().map(|x| cfg.mask(x)).collect())
}

/// Differentiable silhouette from projected vertices `uvz` (`V x 3`, rows of
/// pixel u, v and depth). Faces with a corner at or below [`MIN_DEPTH`] are
/// ignored. Returns an `H*W` vector.
pub fn soft_silhouette_taped(
    tape: &mut Tape,
    uvz: Var,
    faces: &[[u32; 3]],
    width: usize,
    height: usize,
    cfg: &SilhouetteConfig,
) -> Result<Var> {
    cfg.validate()?;
    if uvz.len() % 3 != 0 {
        return Err(Error::Shape(format!("silhouette: projected vertices have shape {:?}", uvz.shape())));
    }
    check_faces(faces, uvz.len() / 3)?;
    let projected = project_faces(tape.value(uvz), faces);
    let density = layer_density(&projected, width, height, cfg);
    let mask = density.iter().map(|&x| cfg.mask(x)).collect();
    let op = SilhouetteOp {
        faces: projected,
        density,
        width,
        height,
        cfg: cfg.clone(),
    };
    tape.custom(Box::new(op), &[uvz], mask, Shape::Vector(width * height))
}

/// Projects taped world vertices (`V x 3`) with a taped camera and renders
/// the mesh's soft silhouette.
pub fn silhouette_from_points(
    tape: &mut Tape,
    vertices: Var,
    faces: &[[u32; 3]],
    cam: &TapedCamera,
    cfg: &SilhouetteConfig,
) -> Result<Var> {
    let base = cam.base();
    let (w, h) = (base.width as usize, base.height as usize);
    let uvz = cam.project(tape, vertices)?;
    soft_silhouette_taped(tape, uvz, faces, w, h, cfg)
}

struct SilhouetteOp {
    faces: Vec<Option<ProjectedFace>>,
    density: Vec<f64>,
    width: usize,
    height: usize,
    cfg: SilhouetteConfig,
}

impl CustomOp for SilhouetteOp {
    fn name(&self) -> &str {
        "soft_silhouette"
    }

    fn backward(&self, _inputs: &[&[f64]], _output: &[f64], g: &[f64], gi: &mut [Option<Vec<f64>>]) {
        let (w, h) = (self.width, self.height);
        let cfg = &self.cfg;
        let weight: Vec<f64> = g.iter().zip(&self.density).map(|(g, &d)| g * cfg.mask_slope(d)).collect();
        let pattern = cfg.pattern();
        let m = pattern.len() as f64;
        // per face: gradient on its six corner coordinates
        let grads: Vec<[f64; 6]> = self
            .faces
            .par_iter()
            .map(|face| {
                let Some(face) = face else { return [0.0; 6] };
                let a = face.area / m;
                let mut acc = [0.0; 6];
                let mut g_area = 0.0;
                for b in &pattern {
                    let (u, v) = sample_uv(face, b);
                    let Some((x0, y0, x1, y1)) = support(u, v, a, cfg, w, h) else { continue };
                    let (mut gu, mut gv) = (0.0, 0.0);
                    for y in y0..y1 {
                        for x in x0..x1 {
                            let gw = weight[y * w + x];
                            if gw == 0.0 {
                                continue;
                            }
                            if let Some((_, dk)) = kernel(u, v, a, x as f64 + 0.5, y as f64 + 0.5, cfg) {
                                gu += gw * dk[0];
                                gv += gw * dk[1];
                                g_area += gw * dk[2] / m;
                            }
                        }
                    }
                    for c in 0..3 {
                        acc[2 * c] += b[c] * gu;
                        acc[2 * c + 1] += b[c] * gv;
                    }
                }
                for k in 0..6 {
                    acc[k] += g_area * face.d_area[k];
                }
                acc
            })
            .collect();
        if let Some(gp) = &mut gi[0] {
            for (face, gr) in self.faces.iter().zip(&grads) {
                let Some(face) = face else { continue };
                for (c, &i) in face.corners.iter().enumerate() {
                    gp[i * 3] += gr[2 * c];
                    gp[i * 3 + 1] += gr[2 * c + 1];
                }
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

    #[test]
    fn no_faces_no_mask() {
        let mut tape = Tape::new();
        let uvz = tape.var(vec![1.0, 1.0, 1.0], Shape::Matrix(1, 3)).unwrap();
        let m = soft_silhouette_taped(&mut tape, uvz, &[], 8, 6, &SilhouetteConfig::default()).unwrap();
        assert!(tape.value(m).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn single_sample_closed_form() {
        let cfg = SilhouetteConfig {
            sharpness: 3.0,
            density: 1,
            ..SilhouetteConfig::default()
        };
        // right triangle with legs 1.5 px whose centroid sits on a pixel center
        let (cu, cv) = (4.5, 2.5);
        let uvz = vec![cu - 0.5, cv - 0.5, 1.0, cu + 1.0, cv - 0.5, 1.0, cu - 0.5, cv + 1.0, 1.0];
        let mut tape = Tape::new();
        let uvz = tape.var(uvz, Shape::Matrix(3, 3)).unwrap();
        let m = soft_silhouette_taped(&mut tape, uvz, &[[0, 1, 2]], 8, 6, &cfg).unwrap();
        let v = tape.value(m)[2 * 8 + 4];
        let a = 0.5 * 1.5 * 1.5;
        let s2 = 0.25 + a / (4.0 * std::f64::consts::PI);
        let density = a / (std::f64::consts::TAU * s2) * (1.0 - (-8.0f64).exp());
        let b = 1.0 / (1.0 + 3.0f64.exp());
        let expected = (1.0 / (1.0 + (-3.0 * (density - 1.0)).exp()) - b) / (1.0 - b);
        assert!((v - expected).abs() < 1e-12, "{v} vs {expected}");
    }

    /// A `size`-pixel square facing the camera at pixel `(x, y)`, as an
    /// `n x n` grid of quads.
    fn square(x: f64, y: f64, size: f64, n: usize) -> (Vec<[f64; 3]>, Vec<[u32; 3]>) {
        let mut v = Vec::new();
        let mut f = Vec::new();
        for i in 0..=n {
            for j in 0..=n {
                v.push([x + size * i as f64 / n as f64, y + size * j as f64 / n as f64, 1.0]);
            }
        }
        let id = |i: usize, j: usize| (i * (n + 1) + j) as u32;
        for i in 0..n {
            for j in 0..n {
                f.push([id(i, j), id(i + 1, j), id(i + 1, j + 1)]);
                f.push([id(i, j), id(i + 1, j + 1), id(i, j + 1)]);
            }
        }
        (v, f)
    }

    #[test]
    fn density_ignores_mesh_resolution() {
        // one layer has density 1, so halve the threshold
        let cfg = SilhouetteConfig {
            threshold: 0.5,
            ..SilhouetteConfig::default()
        };
        let render = |n: usize| {
            let (v, f) = square(8.0, 10.0, 20.0, n);
            let flat: Vec<f64> = v.iter().flatten().copied().collect();
            let mut tape = Tape::new();
            let uvz = tape.var(flat, Shape::Matrix(v.len(), 3)).unwrap();
            let m = soft_silhouette_taped(&mut tape, uvz, &f, 40, 40, &cfg).unwrap();
            tape.value(m).to_vec()
        };
        let (coarse, fine) = (render(10), render(40));
        let diff: f64 = coarse.iter().zip(&fine).map(|(a, b)| (a - b).abs()).sum();
        let area: f64 = fine.iter().sum();
        assert!(diff < 0.05 * area, "coverage differs by {diff} px of {area}");
        // corners round off by about a blur radius
        assert!((area - 400.0).abs() < 30.0, "{area}");
        assert_eq!(fine[0], 0.0);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let nv = 9;
        let (w, h) = (20, 16);
        let mut uvz = Vec::new();
        for _ in 0..nv {
            uvz.extend([rng.random_range(2.0..18.0), rng.random_range(2.0..14.0), 1.0]);
        }
        let faces = [[0, 1, 2], [2, 3, 4], [4, 5, 6], [6, 7, 8], [8, 0, 3], [1, 5, 7]];
        let wts: Vec<f64> = (0..w * h).map(|_| rng.random_range(-1.0..1.0)).collect();
        let cfg = SilhouetteConfig {
            sharpness: 2.0,
            ..SilhouetteConfig::default()
        };
        let report = check_gradient(&[(uvz, Shape::Matrix(nv, 3))], 1e-6, |t, v| {
            let m = soft_silhouette_taped(t, v[0], &faces, w, h, &cfg)?;
            let c = t.constant(wts.clone(), m.shape())?;
            t.dot(m, c)
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-6, "{}", report.max_rel_err);
    }
}
