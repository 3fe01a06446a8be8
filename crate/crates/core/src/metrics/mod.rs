//! Evaluation metrics: keypoint accuracy, temporal jitter, aligned surface
//! distance and image quality.

mod ssim;

use std::fmt::Write as _;
use std::path::Path;

use kiddo::immutable::float::kdtree::ImmutableKdTree;
use kiddo::SquaredEuclidean;
use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::render::Image;

pub use ssim::{gaussian_taps, ssim, ssim_with_grad, SSIM_K1, SSIM_K2, SSIM_SIGMA, SSIM_WINDOW};

/// PSNR reported for (near-)identical images.
pub const PSNR_CAP: f64 = 100.0;
const PSNR_MIN_MSE: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq)]
pub struct PckResult {
    /// Percentage in [0, 100].
    pub percent: f64,
    pub correct: usize,
    pub total: usize,
    /// Frames with fewer than two visible ground-truth keypoints.
    pub skipped_frames: Vec<usize>,
    /// Per-frame percentage; `None` for skipped frames.
    pub per_frame: Vec<Option<f64>>,
}

/// Percentage of visible keypoints whose pixel error is at most
/// `alpha * max(bbox width, bbox height)`, the box spanning the frame's
/// visible ground-truth keypoints.
pub fn pck(pred: &[Vec<[f64; 2]>], gt: &[Vec<[f64; 2]>], visible: &[Vec<bool>], alpha: f64) -> Result<PckResult> {
    if pred.len() != gt.len() || visible.len() != gt.len() {
        return Err(Error::Shape(format!(
            "pck: {} predicted, {} ground-truth and {} visibility frames",
            pred.len(),
            gt.len(),
            visible.len()
        )));
    }
    if !(alpha > 0.0) {
        return Err(Error::Invalid(format!("pck threshold {alpha} must be positive")));
    }
    let mut out = PckResult {
        percent: 0.0,
        correct: 0,
        total: 0,
        skipped_frames: Vec::new(),
        per_frame: Vec::with_capacity(gt.len()),
    };
    for (f, ((p, g), v)) in pred.iter().zip(gt).zip(visible).enumerate() {
        if p.len() != g.len() || v.len() != g.len() {
            return Err(Error::Shape(format!("pck: keypoint counts differ in frame {f}")));
        }
        let vis: Vec<usize> = (0..g.len()).filter(|&k| v[k]).collect();
        if vis.len() < 2 {
            out.skipped_frames.push(f);
            out.per_frame.push(None);
            continue;
        }
        let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
        for &k in &vis {
            for a in 0..2 {
                lo[a] = lo[a].min(g[k][a]);
                hi[a] = hi[a].max(g[k][a]);
            }
        }
        let threshold = alpha * (hi[0] - lo[0]).max(hi[1] - lo[1]);
        let correct = vis
            .iter()
            .filter(|&&k| (p[k][0] - g[k][0]).hypot(p[k][1] - g[k][1]) <= threshold)
            .count();
        out.correct += correct;
        out.total += vis.len();
        out.per_frame.push(Some(100.0 * correct as f64 / vis.len() as f64));
    }
    if out.total == 0 {
        return Err(Error::Invalid("pck: no frame has two visible keypoints".into()));
    }
    out.percent = 100.0 * out.correct as f64 / out.total as f64;
    Ok(out)
}

/// Mean norm of the second temporal difference over frames and keypoints.
pub fn accel<const D: usize>(tracks: &[Vec<[f64; D]>]) -> Result<f64> {
    if tracks.len() < 3 {
        return Err(Error::Invalid(format!("accel needs at least 3 frames, got {}", tracks.len())));
    }
    let k = tracks[0].len();
    if k == 0 || tracks.iter().any(|f| f.len() != k) {
        return Err(Error::Shape("accel: keypoint counts differ between frames or are zero".into()));
    }
    let mut total = 0.0;
    for t in 1..tracks.len() - 1 {
        for j in 0..k {
            let mut s = 0.0;
            for d in 0..D {
                let a = tracks[t + 1][j][d] - 2.0 * tracks[t][j][d] + tracks[t - 1][j][d];
                s += a * a;
            }
            total += s.sqrt();
        }
    }
    Ok(total / ((tracks.len() - 2) * k) as f64)
}

/// [`accel`] of the residual track `pred - gt`.
pub fn accel_error<const D: usize>(pred: &[Vec<[f64; D]>], gt: &[Vec<[f64; D]>]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::Shape(format!("accel_error: {} vs {} frames", pred.len(), gt.len())));
    }
    let mut diff = Vec::with_capacity(pred.len());
    for (p, g) in pred.iter().zip(gt) {
        if p.len() != g.len() {
            return Err(Error::Shape("accel_error: keypoint counts differ".into()));
        }
        diff.push(
            p.iter()
                .zip(g)
                .map(|(a, b)| std::array::from_fn(|d| a[d] - b[d]))
                .collect::<Vec<[f64; D]>>(),
        );
    }
    accel(&diff)
}

/// `x -> scale * R x + t`.
#[derive(Clone, Debug, PartialEq)]
pub struct Similarity {
    pub scale: f64,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Similarity {
    pub fn identity() -> Self {
        Similarity {
            scale: 1.0,
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        let q = self.rotation * Vector3::new(p[0], p[1], p[2]) * self.scale + self.translation;
        [q.x, q.y, q.z]
    }
}

fn centroid(points: &[[f64; 3]]) -> Vector3<f64> {
    points.iter().fold(Vector3::zeros(), |acc, p| acc + Vector3::new(p[0], p[1], p[2])) / points.len() as f64
}

/// Least-squares similarity taking `src[i]` onto `dst[i]` (Umeyama), with
/// the reflection removed from the rotation.
pub fn procrustes_align(src: &[[f64; 3]], dst: &[[f64; 3]]) -> Result<Similarity> {
    if src.len() != dst.len() {
        return Err(Error::Shape(format!("procrustes: {} vs {} points", src.len(), dst.len())));
    }
    if src.len() < 3 {
        return Err(Error::Invalid(format!("procrustes needs 3 correspondences, got {}", src.len())));
    }
    let (mu_s, mu_d) = (centroid(src), centroid(dst));
    let n = src.len() as f64;
    let mut cross = Matrix3::zeros();
    let mut spread = Matrix3::zeros();
    for (s, d) in src.iter().zip(dst) {
        let cs = Vector3::new(s[0], s[1], s[2]) - mu_s;
        let cd = Vector3::new(d[0], d[1], d[2]) - mu_d;
        cross += cd * cs.transpose();
        spread += cs * cs.transpose();
    }
    cross /= n;
    spread /= n;
    let sv = spread.symmetric_eigenvalues();
    let mut sorted = [sv[0], sv[1], sv[2]];
    sorted.sort_by(|a, b| b.total_cmp(a));
    if !(sorted[1] > 1e-12 * sorted[0].max(f64::MIN_POSITIVE)) {
        return Err(Error::Domain("procrustes: source points are collinear or coincident".into()));
    }
    let variance = spread.trace();
    let svd = cross.svd(true, true);
    let u = svd.u.expect("requested U");
    let v_t = svd.v_t.expect("requested V^T");
    let mut s = Matrix3::identity();
    if u.determinant() * v_t.determinant() < 0.0 {
        s[(2, 2)] = -1.0;
    }
    let rotation = u * s * v_t;
    let d = svd.singular_values;
    let scale = (d[0] * s[(0, 0)] + d[1] * s[(1, 1)] + d[2] * s[(2, 2)]) / variance;
    Ok(Similarity {
        scale,
        rotation,
        translation: mu_d - rotation * mu_s * scale,
    })
}

type Tree = ImmutableKdTree<f64, u32, 3, 32>;

fn mean_nearest(from: &[[f64; 3]], tree: &Tree) -> f64 {
    from.iter()
        .map(|p| tree.nearest_one::<SquaredEuclidean>(p).distance.sqrt())
        .sum::<f64>()
        / from.len() as f64
}

/// Symmetric Chamfer distance `(mean_a min_b |a-b| + mean_b min_a |a-b|) / 2`.
pub fn chamfer(a: &[[f64; 3]], b: &[[f64; 3]]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Invalid("chamfer of an empty point cloud".into()));
    }
    let (ta, tb) = (Tree::new_from_slice(a), Tree::new_from_slice(b));
    Ok(0.5 * (mean_nearest(a, &tb) + mean_nearest(b, &ta)))
}

/// Chamfer distance after aligning `pred` onto `gt` with the similarity
/// fitted on vertex correspondences.
pub fn chamfer_aligned(pred: &[[f64; 3]], gt: &[[f64; 3]]) -> Result<f64> {
    let sim = procrustes_align(pred, gt)?;
    let aligned: Vec<[f64; 3]> = pred.iter().map(|&p| sim.apply(p)).collect();
    chamfer(&aligned, gt)
}

pub fn mse(pred: &Image, gt: &Image) -> Result<f64> {
    pred.same_size(gt)?;
    if pred.data.is_empty() {
        return Err(Error::Invalid("mse of an empty image".into()));
    }
    Ok(pred.data.iter().zip(&gt.data).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / pred.data.len() as f64)
}

/// Peak signal-to-noise ratio for unit-range data, capped at [`PSNR_CAP`].
pub fn psnr(pred: &Image, gt: &Image) -> Result<f64> {
    let m = mse(pred, gt)?;
    Ok(if m < PSNR_MIN_MSE { PSNR_CAP } else { (10.0 * (1.0 / m).log10()).min(PSNR_CAP) })
}

/// One row of the per-frame breakdown.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FrameMetrics {
    pub frame: usize,
    /// Aligned to [`MetricReport::pck`]; `None` for skipped frames.
    pub pck: Vec<Option<f64>>,
    pub chamfer: Option<f64>,
    pub psnr: Option<f64>,
    pub ssim: Option<f64>,
}

/// Aggregated evaluation. Absent metrics stay `None` and print as `n/a`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricReport {
    /// `(alpha, percent)` pairs.
    pub pck: Vec<(f64, f64)>,
    pub accel: Option<f64>,
    pub accel_error: Option<f64>,
    pub accel_unit: String,
    pub chamfer: Option<f64>,
    pub psnr: Option<f64>,
    pub ssim: Option<f64>,
    pub skipped_frames: Vec<usize>,
    pub frames: Vec<FrameMetrics>,
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.6}"))
}

impl MetricReport {
    /// Fills the PCK table and per-frame PCK columns for each threshold.
    pub fn add_pck(
        &mut self,
        pred: &[Vec<[f64; 2]>],
        gt: &[Vec<[f64; 2]>],
        visible: &[Vec<bool>],
        alphas: &[f64],
    ) -> Result<()> {
        for &alpha in alphas {
            let r = pck(pred, gt, visible, alpha)?;
            self.pck.push((alpha, r.percent));
            self.skipped_frames = r.skipped_frames.clone();
            self.ensure_frames(gt.len());
            for (row, v) in self.frames.iter_mut().zip(&r.per_frame) {
                row.pck.push(*v);
            }
        }
        Ok(())
    }

    pub fn ensure_frames(&mut self, n: usize) {
        while self.frames.len() < n {
            let frame = self.frames.len();
            self.frames.push(FrameMetrics {
                frame,
                pck: vec![None; self.pck.len().saturating_sub(1)],
                ..FrameMetrics::default()
            });
        }
    }

    fn pck_header(&self) -> Vec<String> {
        self.pck.iter().map(|(a, _)| format!("PCK@{a}")).collect()
    }

    /// Single-row table: PCK columns, Accel, CD, PSNR, SSIM, LPIPS.
    pub fn to_csv(&self) -> String {
        let mut header = self.pck_header();
        header.extend(["Accel", "AccelErr", "CD", "PSNR", "SSIM", "LPIPS"].map(String::from));
        let mut row: Vec<String> = self.pck.iter().map(|(_, p)| format!("{p:.6}")).collect();
        row.extend([
            cell(self.accel),
            cell(self.accel_error),
            cell(self.chamfer),
            cell(self.psnr),
            cell(self.ssim),
            "n/a".into(),
        ]);
        format!("{}\n{}\n", header.join(","), row.join(","))
    }

    pub fn frames_csv(&self) -> String {
        let mut header = vec!["frame".to_string()];
        header.extend(self.pck_header());
        header.extend(["CD", "PSNR", "SSIM"].map(String::from));
        let mut out = header.join(",") + "\n";
        for f in &self.frames {
            let mut row = vec![f.frame.to_string()];
            row.extend(f.pck.iter().map(|v| cell(*v)));
            row.extend([cell(f.chamfer), cell(f.psnr), cell(f.ssim)]);
            out += &(row.join(",") + "\n");
        }
        out
    }

    pub fn summary(&self) -> String {
        let mut s = String::new();
        for (a, p) in &self.pck {
            let _ = writeln!(s, "{:<10} {p:.2}", format!("PCK@{a}"));
        }
        let unit = if self.accel_unit.is_empty() { String::new() } else { format!(" {}", self.accel_unit) };
        let _ = writeln!(s, "{:<10} {}{unit}", "Accel", cell(self.accel));
        let _ = writeln!(s, "{:<10} {}{unit}", "AccelErr", cell(self.accel_error));
        let _ = writeln!(s, "{:<10} {}", "CD", cell(self.chamfer));
        let _ = writeln!(s, "{:<10} {}", "PSNR", cell(self.psnr));
        let _ = writeln!(s, "{:<10} {}", "SSIM", cell(self.ssim));
        let _ = writeln!(s, "{:<10} unavailable (needs a pretrained network)", "LPIPS");
        if !self.pck.is_empty() {
            let _ = writeln!(s, "PCK threshold: alpha * max side of the visible ground-truth keypoint box");
        }
        if !self.skipped_frames.is_empty() {
            let _ = writeln!(s, "frames skipped by PCK (under 2 visible keypoints): {:?}", self.skipped_frames);
        }
        s
    }

    /// Writes `metrics.csv`, `frames.csv` and `summary.txt` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, body) in [
            ("metrics.csv", self.to_csv()),
            ("frames.csv", self.frames_csv()),
            ("summary.txt", self.summary()),
        ] {
            let path = dir.join(name);
            std::fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}
