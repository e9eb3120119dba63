//! Forward kernels over rank-2 tensors.
//!
//! These are the primitive computations behind every [`crate::graph::Graph`]
//! node. All loops run in a fixed order so that identical inputs give
//! bit-identical outputs. Rank-1 inputs are read as a single row; outputs
//! are always rank 2.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Reduction direction for the axis reductions.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    /// Reduce over rows (axis 0): `m × n → 1 × n`.
    Rows,
    /// Reduce over columns (axis 1): `m × n → m × 1`.
    Cols,
}

fn dims(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    t.dims2().ok_or_else(|| Error::Shape {
        op,
        left: t.shape().to_vec(),
        right: vec![],
    })
}

fn same_dims(op: &'static str, a: &Tensor, b: &Tensor) -> Result<(usize, usize)> {
    let da = dims(op, a)?;
    let db = dims(op, b)?;
    if da != db {
        return Err(Error::Shape {
            op,
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    Ok(da)
}

fn check_finite(op: &'static str, t: &Tensor) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = dims("matmul", a)?;
    let (k2, n) = dims("matmul", b)?;
    if k != k2 {
        return Err(Error::Shape {
            op: "matmul",
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for l in 0..k {
            let x = ad[i * k + l];
            let brow = &bd[l * n..(l + 1) * n];
            for (o, &y) in row.iter_mut().zip(brow) {
                *o += x * y;
            }
        }
    }
    Ok(Tensor::matrix(m, n, out))
}

pub fn transpose(a: &Tensor) -> Result<Tensor> {
    dims("transpose", a)?;
    Ok(a.transpose())
}

fn zip_with(op: &'static str, a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    let (r, c) = same_dims(op, a, b)?;
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Ok(Tensor::matrix(r, c, data))
}

fn map2(op: &'static str, a: &Tensor, f: impl Fn(f64) -> f64) -> Result<Tensor> {
    let (r, c) = dims(op, a)?;
    Ok(Tensor::matrix(r, c, a.data().iter().map(|&x| f(x)).collect()))
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_with("add", a, b, |x, y| x + y)
}

pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_with("sub", a, b, |x, y| x - y)
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_with("mul", a, b, |x, y| x * y)
}

pub fn scale(a: &Tensor, factor: f64) -> Result<Tensor> {
    map2("scale", a, |x| x * factor)
}

pub fn exp(a: &Tensor) -> Result<Tensor> {
    map2("exp", a, f64::exp)
}

pub fn log(a: &Tensor) -> Result<Tensor> {
    if let Some(bad) = a.data().iter().find(|&&x| x.is_nan() || x <= 0.0) {
        return Err(Error::Domain {
            op: "log",
            message: format!("argument {bad} is not strictly positive"),
        });
    }
    map2("log", a, f64::ln)
}

pub fn tanh(a: &Tensor) -> Result<Tensor> {
    map2("tanh", a, f64::tanh)
}

/// Adds a `1 × n` row to every row of an `m × n` matrix.
pub fn add_row(x: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (m, n) = dims("add_row", x)?;
    let (br, bc) = dims("add_row", bias)?;
    if br != 1 || bc != n {
        return Err(Error::Shape {
            op: "add_row",
            left: x.shape().to_vec(),
            right: bias.shape().to_vec(),
        });
    }
    let b = bias.data();
    let mut out = x.data().to_vec();
    for i in 0..m {
        for (o, &v) in out[i * n..(i + 1) * n].iter_mut().zip(b) {
            *o += v;
        }
    }
    Ok(Tensor::matrix(m, n, out))
}

pub fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    let (m, n) = dims("softmax_rows", x)?;
    check_finite("softmax_rows", x)?;
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(n.max(1)).take(m) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    Ok(Tensor::matrix(m, n, out))
}

pub fn log_softmax_rows(x: &Tensor) -> Result<Tensor> {
    let (m, n) = dims("log_softmax_rows", x)?;
    check_finite("log_softmax_rows", x)?;
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(n.max(1)).take(m) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let total: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let lse = max + total.ln();
        for v in row.iter_mut() {
            *v -= lse;
        }
    }
    Ok(Tensor::matrix(m, n, out))
}

/// Per-row mean and reciprocal standard deviation (population variance).
pub(crate) fn row_moments(x: &Tensor, eps: f64) -> Vec<(f64, f64)> {
    let n = x.cols();
    (0..x.rows())
        .map(|i| {
            let row = x.row_slice(i);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            (mean, 1.0 / (var + eps).sqrt())
        })
        .collect()
}

pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    let (m, n) = dims("layer_norm", x)?;
    if n == 0 || eps.is_nan() || eps <= 0.0 {
        return Err(Error::Contract(format!(
            "layer_norm needs n >= 1 and eps > 0 (n = {n}, eps = {eps})"
        )));
    }
    for p in [gamma, beta] {
        if p.dims2() != Some((1, n)) {
            return Err(Error::Shape {
                op: "layer_norm",
                left: x.shape().to_vec(),
                right: p.shape().to_vec(),
            });
        }
    }
    let (g, b) = (gamma.data(), beta.data());
    let mut out = Vec::with_capacity(m * n);
    for (i, (mean, rstd)) in row_moments(x, eps).into_iter().enumerate() {
        for (j, &v) in x.row_slice(i).iter().enumerate() {
            out.push(g[j] * (v - mean) * rstd + b[j]);
        }
    }
    Ok(Tensor::matrix(m, n, out))
}

pub fn l2_normalize_rows(x: &Tensor) -> Result<Tensor> {
    let (m, n) = dims("l2_normalize_rows", x)?;
    let mut out = Vec::with_capacity(m * n);
    for i in 0..m {
        let row = x.row_slice(i);
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !norm.is_finite() || norm <= 0.0 {
            return Err(Error::ZeroNorm { side: "row", index: i });
        }
        out.extend(row.iter().map(|v| v / norm));
    }
    Ok(Tensor::matrix(m, n, out))
}

pub fn sum_axis(x: &Tensor, axis: Axis) -> Result<Tensor> {
    let (m, n) = dims("sum_axis", x)?;
    Ok(match axis {
        Axis::Rows => {
            let mut out = vec![0.0; n];
            for i in 0..m {
                for (o, &v) in out.iter_mut().zip(x.row_slice(i)) {
                    *o += v;
                }
            }
            Tensor::matrix(1, n, out)
        }
        Axis::Cols => {
            let out = (0..m).map(|i| x.row_slice(i).iter().sum()).collect();
            Tensor::matrix(m, 1, out)
        }
    })
}

pub fn mean_axis(x: &Tensor, axis: Axis) -> Result<Tensor> {
    let (m, n) = dims("mean_axis", x)?;
    let count = match axis {
        Axis::Rows => m,
        Axis::Cols => n,
    };
    if count == 0 {
        return Err(Error::Input("mean over an empty axis".into()));
    }
    let s = sum_axis(x, axis)?;
    scale(&s, 1.0 / count as f64)
}

/// Index of the first maximum along the reduced axis, for each output slot.
pub(crate) fn argmax_axis(x: &Tensor, axis: Axis) -> Vec<usize> {
    let (m, n) = x.dims2().expect("rank <= 2");
    let d = x.data();
    match axis {
        Axis::Rows => (0..n)
            .map(|j| {
                let mut best = 0;
                for i in 1..m {
                    if d[i * n + j] > d[best * n + j] {
                        best = i;
                    }
                }
                best
            })
            .collect(),
        Axis::Cols => (0..m)
            .map(|i| {
                let mut best = 0;
                for j in 1..n {
                    if d[i * n + j] > d[i * n + best] {
                        best = j;
                    }
                }
                best
            })
            .collect(),
    }
}

pub fn max_axis(x: &Tensor, axis: Axis) -> Result<Tensor> {
    let (m, n) = dims("max_axis", x)?;
    if m == 0 || n == 0 {
        return Err(Error::Input("max over an empty axis".into()));
    }
    let arg = argmax_axis(x, axis);
    Ok(match axis {
        Axis::Rows => Tensor::matrix(1, n, arg.iter().enumerate().map(|(j, &i)| x.at(i, j)).collect()),
        Axis::Cols => Tensor::matrix(m, 1, arg.iter().enumerate().map(|(i, &j)| x.at(i, j)).collect()),
    })
}

pub fn sum_all(x: &Tensor) -> Result<Tensor> {
    dims("sum_all", x)?;
    Ok(Tensor::scalar(x.data().iter().sum()))
}

pub fn concat_cols(parts: &[&Tensor]) -> Result<Tensor> {
    let first = parts
        .first()
        .ok_or_else(|| Error::Input("concat of zero tensors".into()))?;
    let m = dims("concat_cols", first)?.0;
    let mut widths = Vec::with_capacity(parts.len());
    for p in parts {
        let (r, c) = dims("concat_cols", p)?;
        if r != m {
            return Err(Error::Shape {
                op: "concat_cols",
                left: first.shape().to_vec(),
                right: p.shape().to_vec(),
            });
        }
        widths.push(c);
    }
    let total: usize = widths.iter().sum();
    let mut out = Vec::with_capacity(m * total);
    for i in 0..m {
        for p in parts {
            out.extend_from_slice(p.row_slice(i));
        }
    }
    Ok(Tensor::matrix(m, total, out))
}

pub fn concat_rows(parts: &[&Tensor]) -> Result<Tensor> {
    let first = parts
        .first()
        .ok_or_else(|| Error::Input("concat of zero tensors".into()))?;
    let n = dims("concat_rows", first)?.1;
    let mut rows = 0;
    let mut out = Vec::new();
    for p in parts {
        let (r, c) = dims("concat_rows", p)?;
        if c != n {
            return Err(Error::Shape {
                op: "concat_rows",
                left: first.shape().to_vec(),
                right: p.shape().to_vec(),
            });
        }
        rows += r;
        out.extend_from_slice(p.data());
    }
    Ok(Tensor::matrix(rows, n, out))
}
