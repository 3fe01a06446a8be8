use super::sigmoid;

/// A user-defined node with a hand-written vector-Jacobian product.
///
/// The forward value is computed by whoever records the op; the op object
/// keeps any cache it needs for the backward sweep.
pub trait CustomOp: Send + Sync {
    fn name(&self) -> &str;

    /// Accumulates `d loss / d input` into `grad_inputs` for every input that
    /// requires a gradient (`None` entries can be skipped).
    fn backward(
        &self,
        inputs: &[&[f64]],
        output: &[f64],
        grad_output: &[f64],
        grad_inputs: &mut [Option<Vec<f64>>],
    );
}

pub(super) enum Kind {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    Scale(f64),
    AddConst,
    MatMul { m: usize, k: usize, n: usize },
    Dot,
    Norm,
    Exp,
    Log,
    Sigmoid,
    Abs,
    Square,
    Sum,
    Mean,
    Rodrigues,
    NormalizeQuat,
    ClampSmooth { lo: f64, hi: f64, k: f64 },
    Gather(Vec<usize>),
    Slice { start: usize },
    Concat,
    Custom(Box<dyn CustomOp>),
}

/// Adds `g` into `acc`, summing when `acc` is a broadcast scalar.
fn accumulate(acc: &mut Option<Vec<f64>>, g: impl Iterator<Item = f64>) {
    if let Some(acc) = acc {
        if acc.len() == 1 {
            acc[0] += g.sum::<f64>();
        } else {
            acc.iter_mut().zip(g).for_each(|(a, x)| *a += x);
        }
    }
}

fn at(v: &[f64], i: usize) -> f64 {
    if v.len() == 1 {
        v[0]
    } else {
        v[i]
    }
}

pub(super) fn backward(kind: &Kind, x: &[&[f64]], out: &[f64], g: &[f64], gi: &mut [Option<Vec<f64>>]) {
    let n = g.len();
    match kind {
        Kind::Leaf => {}
        Kind::Add => {
            accumulate(&mut gi[0], g.iter().copied());
            accumulate(&mut gi[1], g.iter().copied());
        }
        Kind::Sub => {
            accumulate(&mut gi[0], g.iter().copied());
            accumulate(&mut gi[1], g.iter().map(|v| -v));
        }
        Kind::Mul => {
            let (a, b) = (x[0], x[1]);
            accumulate(&mut gi[0], (0..n).map(|i| g[i] * at(b, i)));
            accumulate(&mut gi[1], (0..n).map(|i| g[i] * at(a, i)));
        }
        Kind::Div => {
            let (a, b) = (x[0], x[1]);
            accumulate(&mut gi[0], (0..n).map(|i| g[i] / at(b, i)));
            accumulate(&mut gi[1], (0..n).map(|i| -g[i] * at(a, i) / (at(b, i) * at(b, i))));
        }
        Kind::Scale(c) => accumulate(&mut gi[0], g.iter().map(|v| v * c)),
        Kind::AddConst => accumulate(&mut gi[0], g.iter().copied()),
        &Kind::MatMul { m, k, n: cols } => {
            let (a, b) = (x[0], x[1]);
            if let Some(ga) = &mut gi[0] {
                for i in 0..m {
                    for p in 0..k {
                        let mut s = 0.0;
                        for j in 0..cols {
                            s += g[i * cols + j] * b[p * cols + j];
                        }
                        ga[i * k + p] += s;
                    }
                }
            }
            if let Some(gb) = &mut gi[1] {
                for i in 0..m {
                    for p in 0..k {
                        let av = a[i * k + p];
                        if av == 0.0 {
                            continue;
                        }
                        for j in 0..cols {
                            gb[p * cols + j] += av * g[i * cols + j];
                        }
                    }
                }
            }
        }
        Kind::Dot => {
            accumulate(&mut gi[0], x[1].iter().map(|v| v * g[0]));
            accumulate(&mut gi[1], x[0].iter().map(|v| v * g[0]));
        }
        Kind::Norm => {
            let norm = out[0];
            if norm > 0.0 {
                accumulate(&mut gi[0], x[0].iter().map(|v| g[0] * v / norm));
            }
        }
        Kind::Exp => accumulate(&mut gi[0], (0..n).map(|i| g[i] * out[i])),
        Kind::Log => accumulate(&mut gi[0], (0..n).map(|i| g[i] / x[0][i])),
        Kind::Sigmoid => accumulate(&mut gi[0], (0..n).map(|i| g[i] * out[i] * (1.0 - out[i]))),
        Kind::Abs => accumulate(
            &mut gi[0],
            (0..n).map(|i| {
                let v = x[0][i];
                if v > 0.0 {
                    g[i]
                } else if v < 0.0 {
                    -g[i]
                } else {
                    0.0
                }
            }),
        ),
        Kind::Square => accumulate(&mut gi[0], (0..n).map(|i| 2.0 * x[0][i] * g[i])),
        Kind::Sum => accumulate(&mut gi[0], std::iter::repeat_n(g[0], x[0].len())),
        Kind::Mean => {
            let len = x[0].len();
            accumulate(&mut gi[0], std::iter::repeat_n(g[0] / len as f64, len));
        }
        Kind::Rodrigues => {
            if let Some(ga) = &mut gi[0] {
                for (row, w) in x[0].chunks_exact(3).enumerate() {
                    let jac = crate::math::rodrigues_jacobian([w[0], w[1], w[2]]);
                    let go = &g[row * 9..row * 9 + 9];
                    for m in 0..3 {
                        ga[row * 3 + m] += jac[m].iter().zip(go).map(|(j, g)| j * g).sum::<f64>();
                    }
                }
            }
        }
        Kind::NormalizeQuat => {
            if let Some(ga) = &mut gi[0] {
                for (row, q) in x[0].chunks_exact(4).enumerate() {
                    let norm = q.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let qh = &out[row * 4..row * 4 + 4];
                    let go = &g[row * 4..row * 4 + 4];
                    let proj: f64 = qh.iter().zip(go).map(|(a, b)| a * b).sum();
                    for c in 0..4 {
                        ga[row * 4 + c] += (go[c] - qh[c] * proj) / norm;
                    }
                }
            }
        }
        &Kind::ClampSmooth { lo, hi, k } => accumulate(
            &mut gi[0],
            (0..n).map(|i| g[i] * (sigmoid(k * (x[0][i] - lo)) - sigmoid(k * (x[0][i] - hi)))),
        ),
        Kind::Gather(idx) => {
            if let Some(ga) = &mut gi[0] {
                for (i, &src) in idx.iter().enumerate() {
                    ga[src] += g[i];
                }
            }
        }
        &Kind::Slice { start } => {
            if let Some(ga) = &mut gi[0] {
                ga[start..start + n].iter_mut().zip(g).for_each(|(a, b)| *a += b);
            }
        }
        Kind::Concat => {
            let mut offset = 0;
            for (part, slot) in x.iter().zip(gi.iter_mut()) {
                if let Some(gp) = slot {
                    gp.iter_mut().zip(&g[offset..offset + part.len()]).for_each(|(a, b)| *a += b);
                }
                offset += part.len();
            }
        }
        Kind::Custom(op) => op.backward(x, out, g, gi),
    }
}
