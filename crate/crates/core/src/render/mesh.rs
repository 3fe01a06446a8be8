//! Z-buffered triangle rasterization with Lambertian shading.

use super::{Image, RenderTarget};
use crate::camera::PinholeCamera;
use crate::error::{Error, Result};
use crate::math::v3;
use crate::model::vertex_normals;

/// Minimum shading factor.
pub const AMBIENT: f64 = 0.2;

/// Triangles with a vertex at or closer than this camera depth are skipped.
pub const MESH_NEAR: f64 = 1e-3;

pub struct MeshRender {
    pub target: RenderTarget,
    /// Hard coverage mask, values in `{0, 1}`.
    pub mask: Image,
    /// Camera-frame depth per pixel, infinite where uncovered.
    pub depth: Vec<f64>,
}

/// Edge function of `p` against the directed edge `a -> b`.
#[inline]
pub fn edge(a: [f64; 2], b: [f64; 2], p: [f64; 2]) -> f64 {
    (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0])
}

/// True when `p` lies inside or on the boundary of triangle `abc` (either
/// winding) and the triangle has nonzero area.
#[inline]
pub fn point_in_triangle(a: [f64; 2], b: [f64; 2], c: [f64; 2], p: [f64; 2]) -> bool {
    let area = edge(a, b, c);
    if area == 0.0 {
        return false;
    }
    let (w0, w1, w2) = (edge(b, c, p), edge(c, a, p), edge(a, b, p));
    if area > 0.0 {
        w0 >= 0.0 && w1 >= 0.0 && w2 >= 0.0
    } else {
        w0 <= 0.0 && w1 <= 0.0 && w2 <= 0.0
    }
}

/// Rasterizes a posed mesh with per-vertex colors. `light` points from the
/// surface toward the light in world coordinates; shading is
/// `max(AMBIENT, n . l)` with interpolated vertex normals.
pub fn mesh_raster(
    vertices: &[[f64; 3]],
    faces: &[[u32; 3]],
    colors: &[[f64; 3]],
    cam: &PinholeCamera,
    light: [f64; 3],
    background: [f64; 3],
) -> Result<MeshRender> {
    if colors.len() != vertices.len() {
        return Err(Error::Shape(format!("{} colors for {} vertices", colors.len(), vertices.len())));
    }
    let (w, h) = (cam.width as usize, cam.height as usize);
    let light = v3(light).try_normalize(0.0).ok_or_else(|| Error::Invalid("zero light direction".into()))?;
    let normals = vertex_normals(vertices, faces);
    let projected: Vec<_> = vertices.iter().map(|&p| cam.project_point(p)).collect();

    let mut target = RenderTarget::background(w, h, background);
    let mut mask = Image::new(w, h, 1);
    let mut depth = vec![f64::INFINITY; w * h];
    for f in faces {
        let [ia, ib, ic] = f.map(|i| i as usize);
        let (pa, pb, pc) = (projected[ia], projected[ib], projected[ic]);
        if [pa, pb, pc].iter().any(|p| !p.in_front || p.depth <= MESH_NEAR) {
            continue;
        }
        let (a, b, c) = (pa.pixel, pb.pixel, pc.pixel);
        let area = edge(a, b, c);
        if area == 0.0 {
            continue;
        }
        let xmin = a[0].min(b[0]).min(c[0]);
        let xmax = a[0].max(b[0]).max(c[0]);
        let ymin = a[1].min(b[1]).min(c[1]);
        let ymax = a[1].max(b[1]).max(c[1]);
        let x0 = (xmin - 0.5).ceil().max(0.0) as usize;
        let y0 = (ymin - 0.5).ceil().max(0.0) as usize;
        let x1 = ((xmax - 0.5).floor() + 1.0).clamp(0.0, w as f64) as usize;
        let y1 = ((ymax - 0.5).floor() + 1.0).clamp(0.0, h as f64) as usize;
        for y in y0..y1 {
            for x in x0..x1 {
                let p = [x as f64 + 0.5, y as f64 + 0.5];
                if !point_in_triangle(a, b, c, p) {
                    continue;
                }
                let bary = [edge(b, c, p) / area, edge(c, a, p) / area, edge(a, b, p) / area];
                // Perspective-correct weights.
                let inv = [bary[0] / pa.depth, bary[1] / pb.depth, bary[2] / pc.depth];
                let inv_sum = inv[0] + inv[1] + inv[2];
                let z = 1.0 / inv_sum;
                let i = y * w + x;
                if z >= depth[i] {
                    continue;
                }
                depth[i] = z;
                let wts = inv.map(|v| v / inv_sum);
                let n = v3(normals[ia]) * wts[0] + v3(normals[ib]) * wts[1] + v3(normals[ic]) * wts[2];
                let shade = n.try_normalize(0.0).map_or(AMBIENT, |n| n.dot(&light).max(AMBIENT));
                let px = target.color.pixel_mut(x, y);
                for ch in 0..3 {
                    let col = colors[ia][ch] * wts[0] + colors[ib][ch] * wts[1] + colors[ic][ch] * wts[2];
                    px[ch] = (col * shade).clamp(0.0, 1.0);
                }
                target.alpha.data[i] = 1.0;
                mask.data[i] = 1.0;
            }
        }
    }
    Ok(MeshRender { target, mask, depth })
}
