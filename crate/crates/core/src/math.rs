//! Small rotation helpers shared by the plain and taped code paths.

use nalgebra::{Matrix3, UnitQuaternion, Vector3};

/// Below this angle the Rodrigues coefficients are evaluated by Taylor series.
/// The derivative coefficients lose precision to cancellation well above
/// 1e-6, so the switch happens early.
pub const RODRIGUES_SERIES_ANGLE: f64 = 1e-3;

/// Coefficients of `R = c I + a [w]x + b w w^T` and their angle derivatives.
#[derive(Clone, Copy, Debug)]
pub(crate) struct RodriguesCoeffs {
    pub c: f64,
    pub a: f64,
    pub b: f64,
    /// (c - a) / angle^2, the factor with d a / d w = da * w
    pub da: f64,
    /// (a - 2b) / angle^2, the factor with d b / d w = db * w
    pub db: f64,
}

pub(crate) fn rodrigues_coeffs(w: [f64; 3]) -> RodriguesCoeffs {
    let t2 = w[0] * w[0] + w[1] * w[1] + w[2] * w[2];
    if t2 < RODRIGUES_SERIES_ANGLE * RODRIGUES_SERIES_ANGLE {
        let t4 = t2 * t2;
        RodriguesCoeffs {
            c: 1.0 - t2 / 2.0 + t4 / 24.0,
            a: 1.0 - t2 / 6.0 + t4 / 120.0,
            b: 0.5 - t2 / 24.0 + t4 / 720.0,
            da: -1.0 / 3.0 + t2 / 30.0 - t4 / 840.0,
            db: -1.0 / 12.0 + t2 / 180.0 - t4 / 6720.0,
        }
    } else {
        let t = t2.sqrt();
        let (s, c) = t.sin_cos();
        let a = s / t;
        let b = (1.0 - c) / t2;
        RodriguesCoeffs {
            c,
            a,
            b,
            da: (c - a) / t2,
            db: (a - 2.0 * b) / t2,
        }
    }
}

/// Axis-angle to a row-major 3x3 rotation.
pub fn rodrigues(w: [f64; 3]) -> [f64; 9] {
    let k = rodrigues_coeffs(w);
    let mut r = [0.0; 9];
    for i in 0..3 {
        for j in 0..3 {
            let delta = if i == j { 1.0 } else { 0.0 };
            r[i * 3 + j] = k.c * delta + k.a * skew(w, i, j) + k.b * w[i] * w[j];
        }
    }
    r
}

/// Derivative of the row-major rotation entries with respect to `w[m]`.
pub(crate) fn rodrigues_jacobian(w: [f64; 3]) -> [[f64; 9]; 3] {
    let k = rodrigues_coeffs(w);
    let mut jac = [[0.0; 9]; 3];
    for (m, out) in jac.iter_mut().enumerate() {
        let dc = -k.a * w[m];
        let da = k.da * w[m];
        let db = k.db * w[m];
        for i in 0..3 {
            for j in 0..3 {
                let delta = if i == j { 1.0 } else { 0.0 };
                let dskew = skew_basis(m, i, j);
                let douter = if i == m { w[j] } else { 0.0 } + if j == m { w[i] } else { 0.0 };
                out[i * 3 + j] = dc * delta
                    + da * skew(w, i, j)
                    + k.a * dskew
                    + db * w[i] * w[j]
                    + k.b * douter;
            }
        }
    }
    jac
}

/// Entry (i, j) of the cross-product matrix of `w`.
fn skew(w: [f64; 3], i: usize, j: usize) -> f64 {
    match (i, j) {
        (0, 1) => -w[2],
        (0, 2) => w[1],
        (1, 0) => w[2],
        (1, 2) => -w[0],
        (2, 0) => -w[1],
        (2, 1) => w[0],
        _ => 0.0,
    }
}

fn skew_basis(m: usize, i: usize, j: usize) -> f64 {
    let mut e = [0.0; 3];
    e[m] = 1.0;
    skew(e, i, j)
}

pub fn mat3(r: &[f64; 9]) -> Matrix3<f64> {
    Matrix3::from_row_slice(r)
}

pub fn mat3_to_array(m: &Matrix3<f64>) -> [f64; 9] {
    let mut out = [0.0; 9];
    for i in 0..3 {
        for j in 0..3 {
            out[i * 3 + j] = m[(i, j)];
        }
    }
    out
}

/// Nearest rotation to `a` in the Frobenius sense (polar factor), with the
/// determinant forced to +1.
pub fn polar_rotation(a: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = a.svd(true, true);
    let u = svd.u.expect("requested U");
    let v_t = svd.v_t.expect("requested V^T");
    let mut r = u * v_t;
    if r.determinant() < 0.0 {
        let mut d = Matrix3::identity();
        d[(2, 2)] = -1.0;
        r = u * d * v_t;
    }
    r
}

/// Rotation matrix of a (not necessarily unit) quaternion stored `[w, x, y, z]`.
pub fn quat_to_mat(q: [f64; 4]) -> Matrix3<f64> {
    let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    let [w, x, y, z] = [q[0] / n, q[1] / n, q[2] / n, q[3] / n];
    unit_quat_to_mat([w, x, y, z])
}

pub(crate) fn unit_quat_to_mat(q: [f64; 4]) -> Matrix3<f64> {
    let [w, x, y, z] = q;
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Partial derivatives of [`unit_quat_to_mat`] with respect to `w, x, y, z`.
pub(crate) fn unit_quat_to_mat_jacobian(q: [f64; 4]) -> [Matrix3<f64>; 4] {
    let [w, x, y, z] = q;
    let two = 2.0;
    [
        Matrix3::new(0.0, -z, y, z, 0.0, -x, -y, x, 0.0) * two,
        Matrix3::new(0.0, y, z, y, -2.0 * x, -w, z, w, -2.0 * x) * two,
        Matrix3::new(-2.0 * y, x, w, x, 0.0, z, -w, z, -2.0 * y) * two,
        Matrix3::new(-2.0 * z, -w, x, w, -2.0 * z, y, x, y, 0.0) * two,
    ]
}

pub fn mat_to_quat(m: &Matrix3<f64>) -> [f64; 4] {
    let q = UnitQuaternion::from_matrix(m);
    [q.w, q.i, q.j, q.k]
}

pub fn v3(a: [f64; 3]) -> Vector3<f64> {
    Vector3::new(a[0], a[1], a[2])
}

pub fn arr3(v: &Vector3<f64>) -> [f64; 3] {
    [v.x, v.y, v.z]
}
