//! Dense row-major tensors and the contraction kernels used by the score
//! function.

use serde::{Deserialize, Serialize};

use crate::error::{MeimError, Result};
use crate::par::{self, Exec};

/// Floor applied to probabilities before taking a logarithm.
pub const LOG_FLOOR: f64 = 1e-300;

/// Dense tensor of `f64` values stored in row-major order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if let Some(axis) = shape.iter().position(|&d| d == 0) {
            return Err(MeimError::dim(format!("axis {axis}"), 1, 0));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(MeimError::dim("data length", expected, data.len()));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.shape[axis]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn strides(&self) -> Vec<usize> {
        let mut strides = vec![1; self.shape.len()];
        for axis in (0..self.shape.len().saturating_sub(1)).rev() {
            strides[axis] = strides[axis + 1] * self.shape[axis + 1];
        }
        strides
    }

    fn offset(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.shape.len());
        index.iter().zip(self.strides()).map(|(i, s)| i * s).sum()
    }

    pub fn get(&self, index: &[usize]) -> f64 {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: f64) {
        let o = self.offset(index);
        self.data[o] = value;
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        Tensor::new(shape, self.data)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Slice of row `i` when the tensor is viewed as `[dim0, rest]`.
    pub fn row(&self, i: usize) -> &[f64] {
        let w = self.data.len() / self.shape[0];
        &self.data[i * w..(i + 1) * w]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let w = self.data.len() / self.shape[0];
        &mut self.data[i * w..(i + 1) * w]
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// Contracts a rank-3 tensor with a vector along `mode` (1, 2 or 3).
///
/// The result keeps the two remaining axes in their original order; for
/// mode 3, `out[i, j] = sum_l core[i, j, l] * vec[l]`.
pub fn n_mode_product(core: &Tensor, vec: &Tensor, mode: usize) -> Result<Tensor> {
    if core.rank() != 3 {
        return Err(MeimError::dim("core rank", 3, core.rank()));
    }
    if vec.rank() != 1 {
        return Err(MeimError::dim("vector rank", 1, vec.rank()));
    }
    if !(1..=3).contains(&mode) {
        return Err(MeimError::Config(format!(
            "mode must be 1, 2 or 3, got {mode}"
        )));
    }
    let axis = mode - 1;
    if core.dim(axis) != vec.len() {
        return Err(MeimError::dim(
            format!("core axis {mode}"),
            core.dim(axis),
            vec.len(),
        ));
    }
    let (a, b, c) = (core.dim(0), core.dim(1), core.dim(2));
    let x = core.data();
    let v = vec.data();
    let out = match mode {
        1 => {
            let mut out = vec![0.0; b * c];
            for (i, vi) in v.iter().enumerate() {
                let slab = &x[i * b * c..(i + 1) * b * c];
                for (o, s) in out.iter_mut().zip(slab) {
                    *o += vi * s;
                }
            }
            Tensor::new(vec![b, c], out)?
        }
        2 => {
            let mut out = vec![0.0; a * c];
            for i in 0..a {
                for (j, vj) in v.iter().enumerate() {
                    let fiber = &x[(i * b + j) * c..(i * b + j + 1) * c];
                    for (o, s) in out[i * c..(i + 1) * c].iter_mut().zip(fiber) {
                        *o += vj * s;
                    }
                }
            }
            Tensor::new(vec![a, c], out)?
        }
        _ => {
            let out = x.chunks_exact(c).map(|fiber| dot(fiber, v)).collect();
            Tensor::new(vec![a, b], out)?
        }
    };
    Ok(out)
}

/// `out[n] = H[n]^T M[n] T[n]` for a batch of quadratic forms.
pub fn batched_bilinear(h: &Tensor, m: &Tensor, t: &Tensor) -> Result<Tensor> {
    if h.rank() != 2 || t.rank() != 2 || m.rank() != 3 {
        return Err(MeimError::Validation(format!(
            "batched_bilinear expects [N,C], [N,C,C], [N,C]; got {:?}, {:?}, {:?}",
            h.shape(),
            m.shape(),
            t.shape()
        )));
    }
    let n = h.dim(0);
    if m.dim(0) != n {
        return Err(MeimError::dim("mapping batch", n, m.dim(0)));
    }
    if t.dim(0) != n {
        return Err(MeimError::dim("tail batch", n, t.dim(0)));
    }
    let c = h.dim(1);
    if m.dim(1) != c || m.dim(2) != t.dim(1) {
        return Err(MeimError::dim("mapping width", c, m.dim(1)));
    }
    let ct = t.dim(1);
    let out = (0..n)
        .map(|b| {
            let hb = h.row(b);
            let tb = t.row(b);
            let mb = m.row(b);
            hb.iter()
                .enumerate()
                .map(|(i, hi)| hi * dot(&mb[i * ct..(i + 1) * ct], tb))
                .sum()
        })
        .collect();
    Tensor::new(vec![n], out)
}

/// Summed softmax cross-entropy of `logits` rows against probability rows
/// in `target`.
pub fn softmax_cross_entropy(logits: &Tensor, target: &Tensor) -> Result<f64> {
    if logits.shape() != target.shape() {
        return Err(MeimError::Validation(format!(
            "logits shape {:?} differs from target shape {:?}",
            logits.shape(),
            target.shape()
        )));
    }
    let width = *logits.shape().last().unwrap_or(&1);
    let mut total = 0.0;
    for (row, (lrow, trow)) in logits
        .data()
        .chunks_exact(width)
        .zip(target.data().chunks_exact(width))
        .enumerate()
    {
        let mass: f64 = trow.iter().sum();
        if (mass - 1.0).abs() > 1e-9 || trow.iter().any(|&p| p < 0.0) {
            return Err(MeimError::Validation(format!(
                "target row {row} is not a probability distribution (sum {mass})"
            )));
        }
        let lse = log_sum_exp(lrow);
        total -= trow
            .iter()
            .zip(lrow)
            .filter(|(&p, _)| p != 0.0)
            .map(|(&p, &x)| p * floored_log_prob(x, lse))
            .sum::<f64>();
    }
    Ok(total)
}

/// `log(sum(exp(x)))` with max subtraction.
pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// `logit - lse` floored at `ln(LOG_FLOOR)`; NaN passes through.
pub(crate) fn floored_log_prob(logit: f64, lse: f64) -> f64 {
    let d = logit - lse;
    if d.is_nan() {
        d
    } else {
        d.max(LOG_FLOOR.ln())
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `out[q, e] = sum_d x[q, d] * table[e, d]`.
pub fn matmul_nt(x: &Tensor, table: &Tensor, exec: Exec) -> Result<Tensor> {
    let q = x.dim(0);
    let d = x.len() / q;
    let e = table.dim(0);
    if table.len() / e != d {
        return Err(MeimError::dim("embedding width", d, table.len() / e));
    }
    let mut out = vec![0.0; q * e];
    let xs = x.data();
    let ts = table.data();
    par::for_each_chunk_mut(exec, &mut out, e, |row, dst| {
        let xr = &xs[row * d..(row + 1) * d];
        for (o, tr) in dst.iter_mut().zip(ts.chunks_exact(d)) {
            *o = dot(xr, tr);
        }
    });
    Tensor::new(vec![q, e], out)
}

/// `out[q, d] = sum_e g[q, e] * table[e, d]`.
pub(crate) fn matmul_nn(g: &Tensor, table: &Tensor, exec: Exec) -> Tensor {
    let q = g.dim(0);
    let e = table.dim(0);
    let d = table.len() / e;
    let gs = g.data();
    let ts = table.data();
    let mut out = vec![0.0; q * d];
    par::for_each_chunk_mut(exec, &mut out, d, |row, dst| {
        for (gv, tr) in gs[row * e..(row + 1) * e].iter().zip(ts.chunks_exact(d)) {
            if *gv != 0.0 {
                for (o, t) in dst.iter_mut().zip(tr) {
                    *o += gv * t;
                }
            }
        }
    });
    Tensor {
        shape: vec![q, d],
        data: out,
    }
}

/// `out[e, d] = sum_q g[q, e] * x[q, d]`, computed in entity blocks so each
/// block walks `g` row by row.
pub(crate) fn matmul_tn(g: &Tensor, x: &Tensor, exec: Exec) -> Tensor {
    const BLOCK: usize = 64;
    let q = g.dim(0);
    let e = g.len() / q;
    let d = x.len() / q;
    let gs = g.data();
    let xs = x.data();
    let mut out = vec![0.0; e * d];
    par::for_each_chunk_mut(exec, &mut out, BLOCK * d, |block, dst| {
        let e0 = block * BLOCK;
        let width = dst.len() / d;
        for row in 0..q {
            let xr = &xs[row * d..(row + 1) * d];
            let gr = &gs[row * e + e0..row * e + e0 + width];
            for (gv, drow) in gr.iter().zip(dst.chunks_exact_mut(d)) {
                if *gv != 0.0 {
                    for (o, xv) in drow.iter_mut().zip(xr) {
                        *o += gv * xv;
                    }
                }
            }
        }
    });
    Tensor {
        shape: vec![e, d],
        data: out,
    }
}
