//! Reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`GradTape`] records every primitive in execution order. Each node
//! stores its forward value plus whatever the adjoint rule needs, and
//! [`GradTape::backward`] walks the nodes in exact reverse order, summing
//! adjoints into parents.

use crate::error::{MeimError, Result};
use crate::par::{self, Exec};
use crate::tensor::{self, Tensor};

/// Handle to a node on a [`GradTape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Normalization statistics source for [`GradTape::batch_norm`].
#[derive(Clone, Debug)]
pub enum NormStats<'a> {
    /// Normalize with the statistics of the current batch.
    Batch { eps: f64 },
    /// Normalize with fixed (running) statistics.
    Fixed {
        mean: &'a [f64],
        var: &'a [f64],
        eps: f64,
    },
}

/// Per-group statistics measured on a training batch.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased variance, or `None` when each group saw a single value.
    pub unbiased_var: Option<Vec<f64>>,
}

enum Op {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Sin(Var),
    MulConst(Var, Vec<f64>),
    Gather {
        table: Var,
        rows: Vec<usize>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        group_size: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    Mapping {
        core: Var,
        rel: Var,
        k: usize,
        ce: usize,
        cr: usize,
    },
    QueryMap {
        query: Var,
        maps: Var,
        map_row: Vec<usize>,
        transpose: Vec<bool>,
        k: usize,
        ce: usize,
    },
    MatMulNt {
        x: Var,
        table: Var,
    },
    SoftmaxCe {
        logits: Var,
        targets: Vec<Vec<(usize, f64)>>,
        lse: Vec<f64>,
    },
    OrthoPenalty {
        maps: Var,
        weights: Vec<f64>,
        ce: usize,
    },
    UnitNormPenalty {
        rel: Var,
        weights: Vec<f64>,
        k: usize,
        cr: usize,
        p: u32,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Single-owner record of a forward pass.
pub struct GradTape {
    nodes: Vec<Node>,
    exec: Exec,
}

impl Default for GradTape {
    fn default() -> Self {
        Self::new()
    }
}

/// Adjoints produced by [`GradTape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
    visited: Vec<usize>,
}

impl Gradients {
    /// Gradient for `var`; zero when the node did not influence the loss.
    pub fn get(&self, var: Var) -> Tensor {
        match &self.grads[var.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[var.0]),
        }
    }

    pub fn take(&mut self, var: Var) -> Tensor {
        self.grads[var.0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[var.0]))
    }

    /// Node indices whose adjoint rule ran, in the order they ran.
    pub fn visit_order(&self) -> &[usize] {
        &self.visited
    }
}

impl GradTape {
    pub fn new() -> Self {
        Self::with_exec(Exec::default())
    }

    pub fn with_exec(exec: Exec) -> Self {
        GradTape {
            nodes: Vec::new(),
            exec,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn scalar(&self, var: Var) -> f64 {
        self.nodes[var.0].value.item()
    }

    fn same_shape(&self, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(MeimError::Validation(format!(
                "operand shapes differ: {sa:?} vs {sb:?}"
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b)?;
        let mut v = self.value(a).clone();
        v.add_assign(self.value(b));
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b)?;
        let mut v = self.value(a).clone();
        for (x, y) in v.data_mut().iter_mut().zip(self.value(b).data()) {
            *x *= y;
        }
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let mut v = self.value(x).clone();
        v.data_mut().iter_mut().for_each(|e| *e *= c);
        self.push(v, Op::Scale(x, c))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn sin(&mut self, x: Var) -> Var {
        let mut v = self.value(x).clone();
        v.data_mut().iter_mut().for_each(|e| *e = e.sin());
        self.push(v, Op::Sin(x))
    }

    /// Elementwise product with a constant (e.g. a dropout mask).
    pub fn mul_const(&mut self, x: Var, mask: Vec<f64>) -> Result<Var> {
        if mask.len() != self.value(x).len() {
            return Err(MeimError::dim(
                "mask length",
                self.value(x).len(),
                mask.len(),
            ));
        }
        let mut v = self.value(x).clone();
        for (e, m) in v.data_mut().iter_mut().zip(&mask) {
            *e *= m;
        }
        Ok(self.push(v, Op::MulConst(x, mask)))
    }

    /// Selects rows of `table` (viewed as `[rows, width]`) into `[n, width]`.
    pub fn gather(&mut self, table: Var, rows: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let n_rows = t.dim(0);
        let width = t.len() / n_rows;
        let mut out = Vec::with_capacity(rows.len() * width);
        for &r in rows {
            if r >= n_rows {
                return Err(MeimError::Lookup {
                    kind: "row",
                    id: r,
                    size: n_rows,
                });
            }
            out.extend_from_slice(t.row(r));
        }
        let v = Tensor::new(vec![rows.len(), width], out)?;
        Ok(self.push(
            v,
            Op::Gather {
                table,
                rows: rows.to_vec(),
            },
        ))
    }

    /// Batch normalization of `x` viewed as `[n, features]`.
    ///
    /// Features are grouped in contiguous runs of `group_size`; each group
    /// shares one mean/variance and one `gamma`/`beta` entry. Returns the
    /// measured batch statistics when normalizing with batch statistics.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        group_size: usize,
        stats: NormStats<'_>,
    ) -> Result<(Var, Option<BatchStats>)> {
        let xv = self.value(x);
        let n = xv.dim(0);
        let features = xv.len() / n;
        if group_size == 0 || !features.is_multiple_of(group_size) {
            return Err(MeimError::Config(format!(
                "group size {group_size} does not divide {features} features"
            )));
        }
        let groups = features / group_size;
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            if self.value(v).len() != groups {
                return Err(MeimError::dim(name, groups, self.value(v).len()));
            }
        }
        let count = (n * group_size) as f64;
        let xs = xv.data();
        let group_of = |f: usize| f / group_size;

        let (mean, var, eps, batch_stats) = match stats {
            NormStats::Batch { eps } => {
                let mut mean = vec![0.0; groups];
                for row in xs.chunks_exact(features) {
                    for (f, v) in row.iter().enumerate() {
                        mean[group_of(f)] += v;
                    }
                }
                mean.iter_mut().for_each(|m| *m /= count);
                let mut var = vec![0.0; groups];
                for row in xs.chunks_exact(features) {
                    for (f, v) in row.iter().enumerate() {
                        let d = v - mean[group_of(f)];
                        var[group_of(f)] += d * d;
                    }
                }
                var.iter_mut().for_each(|s| *s /= count);
                (mean, var, eps, true)
            }
            NormStats::Fixed { mean, var, eps } => {
                if mean.len() != groups || var.len() != groups {
                    return Err(MeimError::dim("running statistics", groups, mean.len()));
                }
                (mean.to_vec(), var.to_vec(), eps, false)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0; xs.len()];
        let mut out = vec![0.0; xs.len()];
        for (i, v) in xs.iter().enumerate() {
            let c = group_of(i % features);
            xhat[i] = (v - mean[c]) * inv_std[c];
            out[i] = g[c] * xhat[i] + b[c];
        }
        let measured = batch_stats.then(|| BatchStats {
            unbiased_var: (count > 1.0)
                .then(|| var.iter().map(|v| v * count / (count - 1.0)).collect()),
            mean,
        });
        let shape = xv.shape().to_vec();
        let node = self.push(
            Tensor::new(shape, out)?,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                group_size,
                xhat,
                inv_std,
                batch_stats,
            },
        );
        Ok((node, measured))
    }

    /// Generates mapping matrices from a core bank and relation rows.
    ///
    /// `core` is `[kc, ce, ce, cr]` with `kc` either `k` (one core per
    /// partition) or 1 (shared). `rel` is `[u, k * cr]`. The output is
    /// `[u, k, ce, ce]` with `M[u,k,i,j] = sum_l W[k,i,j,l] r[u,k,l]`.
    pub fn mapping(&mut self, core: Var, rel: Var, k: usize) -> Result<Var> {
        let w = self.value(core);
        if w.rank() != 4 {
            return Err(MeimError::dim("core rank", 4, w.rank()));
        }
        let (kc, ce, ce2, cr) = (w.dim(0), w.dim(1), w.dim(2), w.dim(3));
        if ce != ce2 {
            return Err(MeimError::dim("core axis 2", ce, ce2));
        }
        if kc != k && kc != 1 {
            return Err(MeimError::dim("core count", k, kc));
        }
        let r = self.value(rel);
        let u = r.dim(0);
        if r.len() != u * k * cr {
            return Err(MeimError::dim("relation width", k * cr, r.len() / u));
        }
        let wd = w.data();
        let rd = r.data();
        let block = ce * ce;
        let mut out = vec![0.0; u * k * block];
        par::for_each_chunk_mut(self.exec, &mut out, block, |idx, dst| {
            let (row, part) = (idx / k, idx % k);
            let wk = if kc == 1 { 0 } else { part };
            let rv = &rd[(row * k + part) * cr..(row * k + part + 1) * cr];
            let wslab = &wd[wk * block * cr..(wk + 1) * block * cr];
            for (o, fiber) in dst.iter_mut().zip(wslab.chunks_exact(cr)) {
                *o = tensor::dot(fiber, rv);
            }
        });
        let v = Tensor::new(vec![u, k, ce, ce], out)?;
        Ok(self.push(
            v,
            Op::Mapping {
                core,
                rel,
                k,
                ce,
                cr,
            },
        ))
    }

    /// Applies per-row mapping matrices to query rows.
    ///
    /// Row `q` of `query` (`[n, k * ce]`) is mapped with `maps[map_row[q]]`:
    /// `out[q,k,j] = sum_i query[q,k,i] M[k,i,j]` when `transpose[q]` is
    /// false, and `out[q,k,i] = sum_j M[k,i,j] query[q,k,j]` otherwise.
    pub fn query_map(
        &mut self,
        query: Var,
        maps: Var,
        map_row: &[usize],
        transpose: &[bool],
    ) -> Result<Var> {
        let m = self.value(maps);
        if m.rank() != 4 {
            return Err(MeimError::dim("mapping rank", 4, m.rank()));
        }
        let (u, k, ce) = (m.dim(0), m.dim(1), m.dim(2));
        let qv = self.value(query);
        let n = qv.dim(0);
        if qv.len() != n * k * ce {
            return Err(MeimError::dim("query width", k * ce, qv.len() / n));
        }
        if map_row.len() != n || transpose.len() != n {
            return Err(MeimError::dim("query map rows", n, map_row.len()));
        }
        if let Some(&bad) = map_row.iter().find(|&&r| r >= u) {
            return Err(MeimError::Lookup {
                kind: "mapping",
                id: bad,
                size: u,
            });
        }
        let md = m.data();
        let qd = qv.data();
        let width = k * ce;
        let mut out = vec![0.0; n * width];
        par::for_each_chunk_mut(self.exec, &mut out, width, |q, dst| {
            let src = &qd[q * width..(q + 1) * width];
            let mrow = &md[map_row[q] * k * ce * ce..(map_row[q] + 1) * k * ce * ce];
            for part in 0..k {
                let mk = &mrow[part * ce * ce..(part + 1) * ce * ce];
                let s = &src[part * ce..(part + 1) * ce];
                let d = &mut dst[part * ce..(part + 1) * ce];
                if transpose[q] {
                    for (i, di) in d.iter_mut().enumerate() {
                        *di = tensor::dot(&mk[i * ce..(i + 1) * ce], s);
                    }
                } else {
                    for (i, si) in s.iter().enumerate() {
                        for (dj, mij) in d.iter_mut().zip(&mk[i * ce..(i + 1) * ce]) {
                            *dj += si * mij;
                        }
                    }
                }
            }
        });
        let v = Tensor::new(vec![n, width], out)?;
        Ok(self.push(
            v,
            Op::QueryMap {
                query,
                maps,
                map_row: map_row.to_vec(),
                transpose: transpose.to_vec(),
                k,
                ce,
            },
        ))
    }

    /// `x [n, d]` times the transpose of `table [e, d]`.
    pub fn matmul_nt(&mut self, x: Var, table: Var) -> Result<Var> {
        let v = tensor::matmul_nt(self.value(x), self.value(table), self.exec)?;
        Ok(self.push(v, Op::MatMulNt { x, table }))
    }

    /// Summed softmax cross-entropy of logit rows against sparse target rows.
    ///
    /// Each target row lists `(column, probability)` pairs summing to one.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: Var,
        targets: Vec<Vec<(usize, f64)>>,
    ) -> Result<Var> {
        let l = self.value(logits);
        let n = l.dim(0);
        let width = l.len() / n;
        if targets.len() != n {
            return Err(MeimError::dim("target rows", n, targets.len()));
        }
        for (row, t) in targets.iter().enumerate() {
            let mass: f64 = t.iter().map(|(_, p)| p).sum();
            if (mass - 1.0).abs() > 1e-9 || t.iter().any(|&(c, p)| c >= width || p < 0.0) {
                return Err(MeimError::Validation(format!(
                    "target row {row} is not a probability distribution over {width} entries"
                )));
            }
        }
        let ld = l.data();
        let lse = par::map_range(self.exec, n, |row| {
            tensor::log_sum_exp(&ld[row * width..(row + 1) * width])
        });
        let total: f64 = targets
            .iter()
            .zip(&lse)
            .enumerate()
            .map(|(row, (t, z))| {
                -t.iter()
                    .map(|&(c, p)| p * tensor::floored_log_prob(ld[row * width + c], *z))
                    .sum::<f64>()
            })
            .sum();
        Ok(self.push(
            Tensor::scalar(total),
            Op::SoftmaxCe {
                logits,
                targets,
                lse,
            },
        ))
    }

    /// `sum_u weights[u] * sum_k ||M_k^T M_k - I||_F^2` over `maps [u,k,ce,ce]`.
    pub fn ortho_penalty(&mut self, maps: Var, weights: &[f64]) -> Result<Var> {
        let m = self.value(maps);
        let (u, ce) = (m.dim(0), m.dim(2));
        if weights.len() != u {
            return Err(MeimError::dim("penalty weights", u, weights.len()));
        }
        let total: f64 = m
            .data()
            .chunks_exact(ce * ce)
            .enumerate()
            .map(|(idx, mk)| {
                let w = weights[idx / m.dim(1)];
                let gram = gram_minus_identity(mk, ce);
                w * gram.iter().map(|g| g * g).sum::<f64>()
            })
            .sum();
        Ok(self.push(
            Tensor::scalar(total),
            Op::OrthoPenalty {
                maps,
                weights: weights.to_vec(),
                ce,
            },
        ))
    }

    /// `sum_u weights[u] * sum_k |r_k^T r_k - 1|^p` over `rel [u, k * cr]`.
    pub fn unit_norm_penalty(
        &mut self,
        rel: Var,
        k: usize,
        weights: &[f64],
        p: u32,
    ) -> Result<Var> {
        let r = self.value(rel);
        let u = r.dim(0);
        if weights.len() != u {
            return Err(MeimError::dim("penalty weights", u, weights.len()));
        }
        if p == 0 {
            return Err(MeimError::Config(
                "unit-norm exponent must be positive".into(),
            ));
        }
        let cr = r.len() / (u * k);
        let total: f64 = r
            .data()
            .chunks_exact(cr)
            .enumerate()
            .map(|(idx, rk)| {
                let s = tensor::dot(rk, rk) - 1.0;
                weights[idx / k] * s.abs().powi(p as i32)
            })
            .sum();
        Ok(self.push(
            Tensor::scalar(total),
            Op::UnitNormPenalty {
                rel,
                weights: weights.to_vec(),
                k,
                cr,
                p,
            },
        ))
    }

    /// Propagates adjoints from the scalar `loss` back to every node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if !self.value(loss).is_scalar() {
            return Err(MeimError::Validation(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let shapes: Vec<Vec<usize>> = self
            .nodes
            .iter()
            .map(|n| n.value.shape().to_vec())
            .collect();
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));
        let mut visited = Vec::new();

        for idx in (0..=loss.0).rev() {
            let Some(upstream) = grads[idx].take() else {
                continue;
            };
            visited.push(idx);
            let node = &self.nodes[idx];
            self.propagate(&node.op, &node.value, &upstream, &mut grads);
            grads[idx] = Some(upstream);
        }
        Ok(Gradients {
            grads,
            shapes,
            visited,
        })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], var: Var, g: Tensor) {
        match &mut grads[var.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, op: &Op, out: &Tensor, up: &Tensor, grads: &mut [Option<Tensor>]) {
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, up.clone());
                self.accumulate(grads, *b, up.clone());
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let ga = zip_map(up, bv, |g, y| g * y);
                let gb = zip_map(up, av, |g, x| g * x);
                self.accumulate(grads, *a, ga);
                self.accumulate(grads, *b, gb);
            }
            Op::Scale(x, c) => {
                let g = map(up, |g| g * c);
                self.accumulate(grads, *x, g);
            }
            Op::Sum(x) => {
                let g = Tensor::full(self.value(*x).shape(), up.item());
                self.accumulate(grads, *x, g);
            }
            Op::Sin(x) => {
                let g = zip_map(up, self.value(*x), |g, v| g * v.cos());
                self.accumulate(grads, *x, g);
            }
            Op::MulConst(x, mask) => {
                let mut g = up.clone();
                for (e, m) in g.data_mut().iter_mut().zip(mask) {
                    *e *= m;
                }
                self.accumulate(grads, *x, g);
            }
            Op::Gather { table, rows } => {
                let t = self.value(*table);
                let mut g = Tensor::zeros(t.shape());
                let width = t.len() / t.dim(0);
                for (q, &r) in rows.iter().enumerate() {
                    let src = &up.data()[q * width..(q + 1) * width];
                    for (d, s) in g.row_mut(r).iter_mut().zip(src) {
                        *d += s;
                    }
                }
                self.accumulate(grads, *table, g);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                group_size,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let n = out.dim(0);
                let features = out.len() / n;
                let groups = features / group_size;
                let gv = self.value(*gamma).data();
                let ud = up.data();
                let mut dgamma = vec![0.0; groups];
                let mut dbeta = vec![0.0; groups];
                for (i, g) in ud.iter().enumerate() {
                    let c = (i % features) / group_size;
                    dgamma[c] += g * xhat[i];
                    dbeta[c] += g;
                }
                let mut dx = vec![0.0; ud.len()];
                if *batch_stats {
                    let count = (n * group_size) as f64;
                    // dxhat = up * gamma; sums over each group
                    let mut sum_dxhat = vec![0.0; groups];
                    let mut sum_dxhat_xhat = vec![0.0; groups];
                    for (i, g) in ud.iter().enumerate() {
                        let c = (i % features) / group_size;
                        let dxh = g * gv[c];
                        sum_dxhat[c] += dxh;
                        sum_dxhat_xhat[c] += dxh * xhat[i];
                    }
                    for (i, g) in ud.iter().enumerate() {
                        let c = (i % features) / group_size;
                        let dxh = g * gv[c];
                        dx[i] = inv_std[c] / count
                            * (count * dxh - sum_dxhat[c] - xhat[i] * sum_dxhat_xhat[c]);
                    }
                } else {
                    for (i, g) in ud.iter().enumerate() {
                        let c = (i % features) / group_size;
                        dx[i] = g * gv[c] * inv_std[c];
                    }
                }
                let shape = out.shape().to_vec();
                let gshape = self.value(*gamma).shape().to_vec();
                self.accumulate(grads, *x, Tensor::new(shape, dx).expect("shape"));
                self.accumulate(
                    grads,
                    *gamma,
                    Tensor::new(gshape.clone(), dgamma).expect("shape"),
                );
                self.accumulate(grads, *beta, Tensor::new(gshape, dbeta).expect("shape"));
            }
            Op::Mapping {
                core,
                rel,
                k,
                ce,
                cr,
            } => {
                let (k, ce, cr) = (*k, *ce, *cr);
                let w = self.value(*core);
                let r = self.value(*rel);
                let kc = w.dim(0);
                let u = r.dim(0);
                let block = ce * ce;
                let wd = w.data();
                let rd = r.data();
                let ud = up.data();
                // dR[u,k,l] = sum_ij dM[u,k,i,j] W[k,i,j,l]
                let mut drel = vec![0.0; r.len()];
                par::for_each_chunk_mut(self.exec, &mut drel, cr, |idx, dst| {
                    let part = idx % k;
                    let wk = if kc == 1 { 0 } else { part };
                    let dm = &ud[idx * block..(idx + 1) * block];
                    let wslab = &wd[wk * block * cr..(wk + 1) * block * cr];
                    for (g, fiber) in dm.iter().zip(wslab.chunks_exact(cr)) {
                        if *g != 0.0 {
                            for (d, f) in dst.iter_mut().zip(fiber) {
                                *d += g * f;
                            }
                        }
                    }
                });
                // dW[k,i,j,l] = sum_u dM[u,k,i,j] R[u,k,l]
                let mut dcore = vec![0.0; w.len()];
                for row in 0..u {
                    for part in 0..k {
                        let wk = if kc == 1 { 0 } else { part };
                        let rv = &rd[(row * k + part) * cr..(row * k + part + 1) * cr];
                        let dm = &ud[(row * k + part) * block..(row * k + part + 1) * block];
                        let dst = &mut dcore[wk * block * cr..(wk + 1) * block * cr];
                        for (g, fiber) in dm.iter().zip(dst.chunks_exact_mut(cr)) {
                            if *g != 0.0 {
                                for (d, rl) in fiber.iter_mut().zip(rv) {
                                    *d += g * rl;
                                }
                            }
                        }
                    }
                }
                let rshape = r.shape().to_vec();
                let wshape = w.shape().to_vec();
                self.accumulate(grads, *rel, Tensor::new(rshape, drel).expect("shape"));
                self.accumulate(grads, *core, Tensor::new(wshape, dcore).expect("shape"));
            }
            Op::QueryMap {
                query,
                maps,
                map_row,
                transpose,
                k,
                ce,
            } => {
                let (k, ce) = (*k, *ce);
                let m = self.value(*maps);
                let qv = self.value(*query);
                let md = m.data();
                let qd = qv.data();
                let ud = up.data();
                let width = k * ce;
                let mut dq = vec![0.0; qv.len()];
                par::for_each_chunk_mut(self.exec, &mut dq, width, |q, dst| {
                    let g = &ud[q * width..(q + 1) * width];
                    let mrow = &md[map_row[q] * k * ce * ce..(map_row[q] + 1) * k * ce * ce];
                    for part in 0..k {
                        let mk = &mrow[part * ce * ce..(part + 1) * ce * ce];
                        let gk = &g[part * ce..(part + 1) * ce];
                        let d = &mut dst[part * ce..(part + 1) * ce];
                        if transpose[q] {
                            // out_i = sum_j M_ij q_j  =>  dq_j = sum_i g_i M_ij
                            for (i, gi) in gk.iter().enumerate() {
                                for (dj, mij) in d.iter_mut().zip(&mk[i * ce..(i + 1) * ce]) {
                                    *dj += gi * mij;
                                }
                            }
                        } else {
                            // out_j = sum_i q_i M_ij  =>  dq_i = sum_j M_ij g_j
                            for (i, di) in d.iter_mut().enumerate() {
                                *di = tensor::dot(&mk[i * ce..(i + 1) * ce], gk);
                            }
                        }
                    }
                });
                let mut dm = vec![0.0; m.len()];
                for q in 0..map_row.len() {
                    let base = map_row[q] * k * ce * ce;
                    for part in 0..k {
                        let s = &qd[q * width + part * ce..q * width + (part + 1) * ce];
                        let g = &ud[q * width + part * ce..q * width + (part + 1) * ce];
                        let dst = &mut dm[base + part * ce * ce..base + (part + 1) * ce * ce];
                        let (left, right) = if transpose[q] { (g, s) } else { (s, g) };
                        for (i, li) in left.iter().enumerate() {
                            for (d, rj) in dst[i * ce..(i + 1) * ce].iter_mut().zip(right) {
                                *d += li * rj;
                            }
                        }
                    }
                }
                let qshape = qv.shape().to_vec();
                let mshape = m.shape().to_vec();
                self.accumulate(grads, *query, Tensor::new(qshape, dq).expect("shape"));
                self.accumulate(grads, *maps, Tensor::new(mshape, dm).expect("shape"));
            }
            Op::MatMulNt { x, table } => {
                let dx = tensor::matmul_nn(up, self.value(*table), self.exec);
                let dt = tensor::matmul_tn(up, self.value(*x), self.exec);
                let dx = dx.reshape(self.value(*x).shape().to_vec()).expect("shape");
                let dt = dt
                    .reshape(self.value(*table).shape().to_vec())
                    .expect("shape");
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *table, dt);
            }
            Op::SoftmaxCe {
                logits,
                targets,
                lse,
            } => {
                let l = self.value(*logits);
                let n = l.dim(0);
                let width = l.len() / n;
                let scale = up.item();
                let ld = l.data();
                let mut g = vec![0.0; l.len()];
                par::for_each_chunk_mut(self.exec, &mut g, width, |row, dst| {
                    let z = lse[row];
                    for (d, x) in dst.iter_mut().zip(&ld[row * width..(row + 1) * width]) {
                        *d = scale * (x - z).exp();
                    }
                    for &(c, p) in &targets[row] {
                        dst[c] -= scale * p;
                    }
                });
                self.accumulate(
                    grads,
                    *logits,
                    Tensor::new(l.shape().to_vec(), g).expect("shape"),
                );
            }
            Op::OrthoPenalty { maps, weights, ce } => {
                let ce = *ce;
                let m = self.value(*maps);
                let k = m.dim(1);
                let scale = up.item();
                let mut g = vec![0.0; m.len()];
                for (idx, (mk, gk)) in m
                    .data()
                    .chunks_exact(ce * ce)
                    .zip(g.chunks_exact_mut(ce * ce))
                    .enumerate()
                {
                    // d/dM ||M^T M - I||^2 = 4 M (M^T M - I)
                    let e = gram_minus_identity(mk, ce);
                    let c = 4.0 * scale * weights[idx / k];
                    for i in 0..ce {
                        for j in 0..ce {
                            let s: f64 = (0..ce).map(|a| mk[i * ce + a] * e[a * ce + j]).sum();
                            gk[i * ce + j] = c * s;
                        }
                    }
                }
                self.accumulate(
                    grads,
                    *maps,
                    Tensor::new(m.shape().to_vec(), g).expect("shape"),
                );
            }
            Op::UnitNormPenalty {
                rel,
                weights,
                k,
                cr,
                p,
            } => {
                let r = self.value(*rel);
                let scale = up.item();
                let mut g = vec![0.0; r.len()];
                for (idx, (rk, gk)) in r
                    .data()
                    .chunks_exact(*cr)
                    .zip(g.chunks_exact_mut(*cr))
                    .enumerate()
                {
                    let s = tensor::dot(rk, rk) - 1.0;
                    let dpow = if *p == 1 {
                        s.signum()
                    } else {
                        *p as f64 * s.abs().powi(*p as i32 - 1) * s.signum()
                    };
                    let c = scale * weights[idx / k] * dpow * 2.0;
                    for (d, v) in gk.iter_mut().zip(rk) {
                        *d = c * v;
                    }
                }
                self.accumulate(
                    grads,
                    *rel,
                    Tensor::new(r.shape().to_vec(), g).expect("shape"),
                );
            }
        }
    }
}

/// Row-major `M^T M - I` for a square `ce x ce` block.
pub(crate) fn gram_minus_identity(m: &[f64], ce: usize) -> Vec<f64> {
    let mut out = vec![0.0; ce * ce];
    for a in 0..ce {
        for b in 0..ce {
            let s: f64 = (0..ce).map(|i| m[i * ce + a] * m[i * ce + b]).sum();
            out[a * ce + b] = s - if a == b { 1.0 } else { 0.0 };
        }
    }
    out
}

fn map(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    let mut out = t.clone();
    out.data_mut().iter_mut().for_each(|v| *v = f(*v));
    out
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let mut out = a.clone();
    for (x, y) in out.data_mut().iter_mut().zip(b.data()) {
        *x = f(*x, *y);
    }
    out
}

/// Compares an analytic gradient with central finite differences.
///
/// `value_and_grad` returns the function value and its analytic gradient at
/// a point. The result is the largest `|analytic - numeric| / max(1, |analytic|)`
/// over all coordinates; any NaN yields `f64::INFINITY`.
pub fn finite_diff_check<F>(mut value_and_grad: F, params: &[f64], step: f64) -> f64
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    let (_, analytic) = value_and_grad(params);
    let mut probe = params.to_vec();
    let mut worst: f64 = 0.0;
    for i in 0..params.len() {
        probe[i] = params[i] + step;
        let (plus, _) = value_and_grad(&probe);
        probe[i] = params[i] - step;
        let (minus, _) = value_and_grad(&probe);
        probe[i] = params[i];
        let numeric = (plus - minus) / (2.0 * step);
        let a = analytic.get(i).copied().unwrap_or(f64::NAN);
        let err = (a - numeric).abs() / a.abs().max(1.0);
        if err.is_nan() {
            return f64::INFINITY;
        }
        worst = worst.max(err);
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const STEP: f64 = 1e-5;
    const TOL: f64 = 1e-4;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    /// Runs `build` on a fresh tape with leaf `x` taking the probe values and
    /// returns (loss, d loss / d x).
    fn check_op(x0: &Tensor, build: impl Fn(&mut GradTape, Var) -> Var) -> f64 {
        let shape = x0.shape().to_vec();
        finite_diff_check(
            |p| {
                let mut tape = GradTape::new();
                let x = tape.leaf(Tensor::new(shape.clone(), p.to_vec()).unwrap());
                let loss = build(&mut tape, x);
                let g = tape.backward(loss).unwrap();
                (tape.scalar(loss), g.get(x).into_data())
            },
            x0.data(),
            STEP,
        )
    }

    /// Scalar reduction with non-uniform weights so every output cell matters.
    fn weighted_sum(tape: &mut GradTape, v: Var) -> Var {
        let w: Vec<f64> = (0..tape.value(v).len())
            .map(|i| 0.3 + 0.17 * i as f64)
            .collect();
        let m = tape.mul_const(v, w).unwrap();
        tape.sum(m)
    }

    #[test]
    fn quadratic_gradient() {
        let mut tape = GradTape::new();
        let p = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        let sq = tape.mul(p, p).unwrap();
        let loss = tape.sum(sq);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(p).data(), &[2.0, 4.0]);
    }

    #[test]
    fn unused_leaf_gets_zero() {
        let mut tape = GradTape::new();
        let p = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        let unused = tape.leaf(Tensor::vector(vec![3.0; 3]));
        let loss = tape.sum(p);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(unused).data(), &[0.0; 3]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = GradTape::new();
        let p = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(tape.backward(p), Err(MeimError::Validation(_))));
    }

    #[test]
    fn visits_in_reverse_order() {
        let mut tape = GradTape::new();
        let p = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        let a = tape.scale(p, 2.0);
        let b = tape.sin(a);
        let loss = tape.sum(b);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.visit_order(), &[3, 2, 1, 0]);
    }

    #[test]
    fn reuse_accumulates_adjoints() {
        // f = sum(sin(p)) + sum(3p): gradient must be cos(p) + 3
        let mut tape = GradTape::new();
        let p = tape.leaf(Tensor::vector(vec![0.2, -1.1, 0.7]));
        let s = tape.sin(p);
        let a = tape.sum(s);
        let t = tape.scale(p, 3.0);
        let b = tape.sum(t);
        let loss = tape.add(a, b).unwrap();
        let g = tape.backward(loss).unwrap().get(p);
        for (gi, pi) in g.data().iter().zip([0.2f64, -1.1, 0.7]) {
            assert!((gi - (pi.cos() + 3.0)).abs() < 1e-15);
        }
    }

    #[test]
    fn finite_diff_quadratic_and_sine() {
        let p = [0.3, -1.2, 2.5, 0.0];
        let quad = finite_diff_check(
            |x| {
                (
                    x.iter().map(|v| v * v).sum(),
                    x.iter().map(|v| 2.0 * v).collect(),
                )
            },
            &p,
            STEP,
        );
        assert!(quad < 1e-9, "{quad}");
        let sine = finite_diff_check(
            |x| {
                (
                    x.iter().map(|v| v.sin()).sum(),
                    x.iter().map(|v| v.cos()).collect(),
                )
            },
            &p,
            STEP,
        );
        assert!(sine < 1e-6, "{sine}");
    }

    #[test]
    fn finite_diff_reports_nan() {
        let err = finite_diff_check(|_| (f64::NAN, vec![0.0]), &[1.0], STEP);
        assert!(err.is_infinite());
    }

    #[test]
    fn gather_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let table = random(&[4, 3], &mut rng);
        let err = check_op(&table, |t, x| {
            let g = t.gather(x, &[2, 0, 2]).unwrap();
            weighted_sum(t, g)
        });
        assert!(err < TOL, "{err}");
    }

    #[test]
    fn gather_rejects_bad_row() {
        let mut tape = GradTape::new();
        let t = tape.leaf(Tensor::zeros(&[2, 2]));
        assert!(matches!(
            tape.gather(t, &[2]),
            Err(MeimError::Lookup { .. })
        ));
    }

    #[test]
    fn batch_norm_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x0 = random(&[5, 4], &mut rng);
        for group in [1, 2] {
            let groups = 4 / group;
            let gamma = Tensor::from_fn(&[groups], |i| 0.8 + 0.3 * i as f64);
            let beta = Tensor::from_fn(&[groups], |i| 0.1 * i as f64);
            let err = check_op(&x0, |t, x| {
                let g = t.leaf(gamma.clone());
                let b = t.leaf(beta.clone());
                let (y, _) = t
                    .batch_norm(x, g, b, group, NormStats::Batch { eps: 1e-5 })
                    .unwrap();
                let y2 = t.mul(y, y).unwrap();
                weighted_sum(t, y2)
            });
            assert!(err < TOL, "group {group}: {err}");
            // gamma / beta gradients
            let err = check_op(&gamma, |t, g| {
                let x = t.leaf(x0.clone());
                let b = t.leaf(beta.clone());
                let (y, _) = t
                    .batch_norm(x, g, b, group, NormStats::Batch { eps: 1e-5 })
                    .unwrap();
                let y2 = t.mul(y, y).unwrap();
                weighted_sum(t, y2)
            });
            assert!(err < TOL, "gamma group {group}: {err}");
            let mean = vec![0.1; groups];
            let var = vec![0.7; groups];
            let err = check_op(&x0, |t, x| {
                let g = t.leaf(gamma.clone());
                let b = t.leaf(beta.clone());
                let stats = NormStats::Fixed {
                    mean: &mean,
                    var: &var,
                    eps: 1e-5,
                };
                let (y, s) = t.batch_norm(x, g, b, group, stats).unwrap();
                assert!(s.is_none());
                let y2 = t.mul(y, y).unwrap();
                weighted_sum(t, y2)
            });
            assert!(err < TOL, "fixed group {group}: {err}");
        }
    }

    #[test]
    fn batch_norm_normalizes() {
        let mut tape = GradTape::new();
        let x = tape.leaf(Tensor::new(vec![4, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let g = tape.leaf(Tensor::vector(vec![1.0]));
        let b = tape.leaf(Tensor::vector(vec![0.0]));
        let (y, stats) = tape
            .batch_norm(x, g, b, 1, NormStats::Batch { eps: 0.0 })
            .unwrap();
        let out = tape.value(y).data();
        assert!(out.iter().sum::<f64>().abs() < 1e-12);
        assert!((out.iter().map(|v| v * v).sum::<f64>() / 4.0 - 1.0).abs() < 1e-12);
        let stats = stats.unwrap();
        assert_eq!(stats.mean, vec![2.5]);
        assert!((stats.unbiased_var.unwrap()[0] - 5.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn mapping_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for kc in [1, 2] {
            let core = random(&[kc, 2, 2, 3], &mut rng);
            let rel = random(&[3, 2 * 3], &mut rng);
            let err = check_op(&core, |t, w| {
                let r = t.leaf(rel.clone());
                let m = t.mapping(w, r, 2).unwrap();
                weighted_sum(t, m)
            });
            assert!(err < TOL, "{err}");
            let err = check_op(&rel, |t, r| {
                let w = t.leaf(core.clone());
                let m = t.mapping(w, r, 2).unwrap();
                let m2 = t.mul(m, m).unwrap();
                weighted_sum(t, m2)
            });
            assert!(err < TOL, "{err}");
        }
    }

    #[test]
    fn query_map_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let maps = random(&[2, 2, 3, 3], &mut rng);
        let query = random(&[4, 6], &mut rng);
        let rows = [1, 0, 1, 1];
        let flags = [false, true, true, false];
        let err = check_op(&query, |t, q| {
            let m = t.leaf(maps.clone());
            let o = t.query_map(q, m, &rows, &flags).unwrap();
            weighted_sum(t, o)
        });
        assert!(err < TOL, "{err}");
        let err = check_op(&maps, |t, m| {
            let q = t.leaf(query.clone());
            let o = t.query_map(q, m, &rows, &flags).unwrap();
            let o2 = t.mul(o, o).unwrap();
            weighted_sum(t, o2)
        });
        assert!(err < TOL, "{err}");
    }

    #[test]
    fn query_map_transpose_semantics() {
        let mut tape = GradTape::new();
        // M = [[1, 2], [3, 4]]
        let m = tape.leaf(Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let q = tape.leaf(Tensor::new(vec![2, 2], vec![1.0, 0.0, 1.0, 0.0]).unwrap());
        let o = tape.query_map(q, m, &[0, 0], &[false, true]).unwrap();
        // row vector e1^T M = [1, 2]; M e1 = [1, 3]
        assert_eq!(tape.value(o).data(), &[1.0, 2.0, 1.0, 3.0]);
    }

    #[test]
    fn matmul_and_cross_entropy_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x0 = random(&[3, 4], &mut rng);
        let table = random(&[6, 4], &mut rng);
        let targets = vec![
            vec![(1, 1.0)],
            vec![(0, 0.5), (5, 0.5)],
            vec![(2, 0.25), (3, 0.75)],
        ];
        let err = check_op(&x0, |t, x| {
            let e = t.leaf(table.clone());
            let l = t.matmul_nt(x, e).unwrap();
            t.softmax_cross_entropy(l, targets.clone()).unwrap()
        });
        assert!(err < TOL, "{err}");
        let err = check_op(&table, |t, e| {
            let x = t.leaf(x0.clone());
            let l = t.matmul_nt(x, e).unwrap();
            t.softmax_cross_entropy(l, targets.clone()).unwrap()
        });
        assert!(err < TOL, "{err}");
    }

    #[test]
    fn cross_entropy_matches_dense_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let logits = random(&[2, 3], &mut rng);
        let mut tape = GradTape::new();
        let l = tape.leaf(logits.clone());
        let ce = tape
            .softmax_cross_entropy(l, vec![vec![(0, 0.5), (2, 0.5)], vec![(1, 1.0)]])
            .unwrap();
        let dense = Tensor::new(vec![2, 3], vec![0.5, 0.0, 0.5, 0.0, 1.0, 0.0]).unwrap();
        let want = tensor::softmax_cross_entropy(&logits, &dense).unwrap();
        assert!((tape.scalar(ce) - want).abs() < 1e-14);
    }

    #[test]
    fn penalty_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let maps = random(&[2, 2, 3, 3], &mut rng);
        let err = check_op(&maps, |t, m| t.ortho_penalty(m, &[0.5, 2.0]).unwrap());
        assert!(err < TOL, "{err}");
        let rel = random(&[2, 4], &mut rng);
        for p in [1, 2, 3] {
            let err = check_op(&rel, |t, r| {
                t.unit_norm_penalty(r, 2, &[1.0, 3.0], p).unwrap()
            });
            assert!(err < TOL, "p={p}: {err}");
        }
    }

    #[test]
    fn elementwise_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x0 = random(&[5], &mut rng);
        let err = check_op(&x0, |t, x| {
            let s = t.sin(x);
            let m = t.mul(s, x).unwrap();
            let a = t.add(m, x).unwrap();
            let c = t.scale(a, -1.5);
            weighted_sum(t, c)
        });
        assert!(err < TOL, "{err}");
    }
}
