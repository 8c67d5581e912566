use std::sync::Arc;

use super::ops::{self, axis_split, check_finite, gemm};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddBias(Var, Var),
    MulBias(Var, Var),
    MulConst(Var, Arc<[f64]>),
    MatMul(Var, Var),
    Bmm {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Slice {
        input: Var,
        axis: usize,
        start: usize,
    },
    Reshape(Var),
    Permute {
        input: Var,
        perm: Vec<usize>,
    },
    GatherRows {
        input: Var,
        index: Arc<[usize]>,
    },
    MeanAxis {
        input: Var,
        axis: usize,
    },
    Sum(Var),
    LayerNorm {
        input: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gelu(Var),
    Relu(Var),
    Softmax(Var),
    Softplus(Var),
    LogSumExp {
        input: Var,
        mask: Option<Arc<[bool]>>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    trainable: bool,
    grad: Option<Vec<f64>>,
}

/// Records operations in execution order and replays them backwards.
///
/// Recording order is a valid topological order, so the backward pass is a
/// single reverse sweep. A tape can be differentiated once; call
/// [`Tape::reset`] before reusing it.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    record: bool,
    differentiated: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            record: true,
            differentiated: false,
        }
    }

    /// A tape that keeps values but no backward information.
    pub fn inference() -> Self {
        Self {
            nodes: Vec::new(),
            record: false,
            differentiated: false,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn reset(&mut self) {
        self.nodes.clear();
        self.differentiated = false;
    }

    /// Adds a leaf. Trainable leaves receive gradients in [`Tape::backward`].
    pub fn leaf(&mut self, value: Tensor, trainable: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            trainable,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    /// Gradient of the last differentiated loss with respect to a trainable leaf.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    fn push(
        &mut self,
        op: &'static str,
        shape: Vec<usize>,
        data: Vec<f64>,
        rec: Op,
    ) -> Result<Var> {
        check_finite(op, &data)?;
        let op = if self.record { rec } else { Op::Leaf };
        self.nodes.push(Node {
            value: Tensor { shape, data },
            op,
            trainable: false,
            grad: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape(op, sa, sb));
        }
        Ok(())
    }

    fn zip_with(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        rec: Op,
    ) -> Result<Var> {
        self.same_shape(op, a, b)?;
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        self.push(op, shape, data, rec)
    }

    fn map(&mut self, op: &'static str, a: Var, f: impl Fn(f64) -> f64, rec: Op) -> Result<Var> {
        let data = self.data(a).iter().map(|&x| f(x)).collect();
        let shape = self.shape(a).to_vec();
        self.push(op, shape, data, rec)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.map("scale", a, |x| x * c, Op::Scale(a, c))
    }

    // `v` must match the trailing axes of `a`; returns its element count.
    fn row_vector_check(&self, op: &'static str, a: Var, v: Var) -> Result<usize> {
        let (sa, sv) = (self.shape(a), self.shape(v));
        if sv.is_empty() || sv.len() > sa.len() || sa[sa.len() - sv.len()..] != *sv {
            return Err(Error::shape(op, sa, sv));
        }
        Ok(sv.iter().product())
    }

    /// Adds `bias`, broadcast over the leading axes of `a`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let c = self.row_vector_check("add_bias", a, bias)?;
        let b = self.data(bias);
        let src = self.data(a);
        let mut data = Vec::with_capacity(src.len());
        for row in src.chunks_exact(c) {
            data.extend(row.iter().zip(b).map(|(x, y)| x + y));
        }
        let shape = self.shape(a).to_vec();
        self.push("add_bias", shape, data, Op::AddBias(a, bias))
    }

    /// Multiplies by `gain`, broadcast over the leading axes of `a`.
    pub fn mul_bias(&mut self, a: Var, gain: Var) -> Result<Var> {
        let c = self.row_vector_check("mul_bias", a, gain)?;
        let g = self.data(gain);
        let src = self.data(a);
        let mut data = Vec::with_capacity(src.len());
        for row in src.chunks_exact(c) {
            data.extend(row.iter().zip(g).map(|(x, y)| x * y));
        }
        let shape = self.shape(a).to_vec();
        self.push("mul_bias", shape, data, Op::MulBias(a, gain))
    }

    /// Elementwise product with a constant of the same shape.
    pub fn mul_const(&mut self, a: Var, c: Arc<[f64]>) -> Result<Var> {
        if c.len() != self.value(a).numel() {
            return Err(Error::shape("mul_const", self.shape(a), &[c.len()]));
        }
        let data = self
            .data(a)
            .iter()
            .zip(c.iter())
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        self.push("mul_const", shape, data, Op::MulConst(a, c))
    }

    /// `[..., k] x [k, m] -> [..., m]`.
    pub fn matmul(&mut self, a: Var, w: Var) -> Result<Var> {
        let (sa, sw) = (self.shape(a), self.shape(w));
        if sa.is_empty() || sw.len() != 2 || sa[sa.len() - 1] != sw[0] {
            return Err(Error::shape("matmul", sa, sw));
        }
        let (k, m) = (sw[0], sw[1]);
        let rows = self.value(a).numel() / k;
        let mut out = vec![0.0; rows * m];
        gemm(
            rows,
            k,
            m,
            self.data(a),
            false,
            self.data(w),
            false,
            &mut out,
            false,
        );
        let mut shape = sa.to_vec();
        *shape.last_mut().unwrap() = m;
        self.push("matmul", shape, out, Op::MatMul(a, w))
    }

    /// Batched matmul `[b, n, k] x [b, k, m]`, or `[b, n, k] x [b, m, k]^T` when `trans_b`.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let ok = sa.len() == 3
            && sb.len() == 3
            && sa[0] == sb[0]
            && if trans_b {
                sa[2] == sb[2]
            } else {
                sa[2] == sb[1]
            };
        if !ok {
            return Err(Error::shape("bmm", sa, sb));
        }
        let (batch, n, k) = (sa[0], sa[1], sa[2]);
        let m = if trans_b { sb[1] } else { sb[2] };
        let mut out = vec![0.0; batch * n * m];
        let (da, db) = (self.data(a), self.data(b));
        for i in 0..batch {
            gemm(
                n,
                k,
                m,
                &da[i * n * k..(i + 1) * n * k],
                false,
                &db[i * k * m..(i + 1) * k * m],
                trans_b,
                &mut out[i * n * m..(i + 1) * n * m],
                false,
            );
        }
        self.push("bmm", vec![batch, n, m], out, Op::Bmm { a, b, trans_b })
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = *inputs
            .first()
            .ok_or_else(|| Error::invalid("concat", "no inputs"))?;
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(Error::invalid(
                "concat",
                format!("axis {axis} for rank {}", base.len()),
            ));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let conforms = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(d, (x, y))| d == axis || x == y);
            if !conforms {
                return Err(Error::shape("concat", &base, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_split(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let mid = self.shape(v)[axis];
                let chunk = mid * inner;
                out.extend_from_slice(&self.data(v)[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        self.push(
            "concat",
            shape,
            out,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
        )
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if axis >= sa.len() || len == 0 || start + len > sa[axis] {
            return Err(Error::invalid(
                "slice",
                format!("[{start}, {}) on axis {axis} of {sa:?}", start + len),
            ));
        }
        let (outer, mid, inner) = axis_split(&sa, axis);
        let src = self.data(a);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let off = (o * mid + start) * inner;
            out.extend_from_slice(&src[off..off + len * inner]);
        }
        let mut shape = sa;
        shape[axis] = len;
        self.push(
            "slice",
            shape,
            out,
            Op::Slice {
                input: a,
                axis,
                start,
            },
        )
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.value(a).numel() || shape.contains(&0) {
            return Err(Error::shape("reshape", self.shape(a), shape));
        }
        let data = self.data(a).to_vec();
        self.push("reshape", shape.to_vec(), data, Op::Reshape(a))
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        ops::validate_perm(&sa, perm)?;
        let data = ops::permute(self.data(a), &sa, perm);
        let shape = ops::permute_shape(&sa, perm);
        self.push(
            "permute",
            shape,
            data,
            Op::Permute {
                input: a,
                perm: perm.to_vec(),
            },
        )
    }

    /// Selects rows (slices along all but the last axis) by index.
    ///
    /// The input is viewed as `[rows, c]` where `c` is its last extent; the
    /// output has `index.len()` rows and the given leading shape.
    pub fn gather_rows(&mut self, a: Var, index: Arc<[usize]>, out_lead: &[usize]) -> Result<Var> {
        let sa = self.shape(a);
        let c = *sa
            .last()
            .ok_or_else(|| Error::invalid("gather_rows", "rank-0 input"))?;
        let rows = self.value(a).numel() / c;
        if out_lead.iter().product::<usize>() != index.len() {
            return Err(Error::invalid(
                "gather_rows",
                format!("{} indices for leading shape {out_lead:?}", index.len()),
            ));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= rows) {
            return Err(Error::invalid(
                "gather_rows",
                format!("row {bad} of {rows}"),
            ));
        }
        let src = self.data(a);
        let mut out = Vec::with_capacity(index.len() * c);
        for &r in index.iter() {
            out.extend_from_slice(&src[r * c..(r + 1) * c]);
        }
        let mut shape = out_lead.to_vec();
        shape.push(c);
        self.push(
            "gather_rows",
            shape,
            out,
            Op::GatherRows { input: a, index },
        )
    }

    /// Mean over one axis; the axis is removed.
    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if axis >= sa.len() {
            return Err(Error::invalid(
                "mean_axis",
                format!("axis {axis} of {sa:?}"),
            ));
        }
        let (outer, mid, inner) = axis_split(&sa, axis);
        let src = self.data(a);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for m in 0..mid {
                let row = &src[(o * mid + m) * inner..(o * mid + m + 1) * inner];
                for (acc, x) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *acc += x;
                }
            }
        }
        let inv = 1.0 / mid as f64;
        out.iter_mut().for_each(|v| *v *= inv);
        let mut shape = sa;
        shape.remove(axis);
        self.push("mean_axis", shape, out, Op::MeanAxis { input: a, axis })
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s: f64 = self.data(a).iter().sum();
        self.push("sum", Vec::new(), vec![s], Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).numel() as f64;
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n)
    }

    /// Normalizes over the last axis (no affine part).
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let c = *sa
            .last()
            .ok_or_else(|| Error::invalid("layer_norm", "rank-0 input"))?;
        let src = self.data(a);
        let rows = src.len() / c;
        let mut xhat = Vec::with_capacity(src.len());
        let mut inv_std = Vec::with_capacity(rows);
        for row in src.chunks_exact(c) {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            xhat.extend(row.iter().map(|x| (x - mean) * is));
        }
        let out = xhat.clone();
        let rec = if self.record {
            Op::LayerNorm {
                input: a,
                xhat,
                inv_std,
            }
        } else {
            Op::Leaf
        };
        self.push("layer_norm", sa, out, rec)
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.map("gelu", a, ops::gelu, Op::Gelu(a))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.map("relu", a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.map("softplus", a, ops::softplus, Op::Softplus(a))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let c = *sa
            .last()
            .ok_or_else(|| Error::invalid("softmax", "rank-0 input"))?;
        let mut out = Vec::with_capacity(self.value(a).numel());
        for row in self.data(a).chunks_exact(c) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let start = out.len();
            out.extend(row.iter().map(|x| (x - m).exp()));
            let z: f64 = out[start..].iter().sum();
            out[start..].iter_mut().for_each(|v| *v /= z);
        }
        self.push("softmax", sa, out, Op::Softmax(a))
    }

    /// Log-sum-exp over the last axis, optionally restricted to `mask`.
    ///
    /// A row whose mask is all false yields 0 with zero gradient; callers
    /// that need the negative-infinity convention track row validity
    /// themselves.
    pub fn logsumexp(&mut self, a: Var, mask: Option<Arc<[bool]>>) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let c = *sa
            .last()
            .ok_or_else(|| Error::invalid("logsumexp", "rank-0 input"))?;
        if let Some(m) = &mask {
            if m.len() != self.value(a).numel() {
                return Err(Error::shape("logsumexp", &sa, &[m.len()]));
            }
        }
        let src = self.data(a);
        let rows = src.len() / c;
        let mut out = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &src[r * c..(r + 1) * c];
            let keep = |j: usize| mask.as_ref().is_none_or(|m| m[r * c + j]);
            let mx = (0..c)
                .filter(|&j| keep(j))
                .map(|j| row[j])
                .fold(f64::NEG_INFINITY, f64::max);
            if mx == f64::NEG_INFINITY {
                out.push(0.0);
                continue;
            }
            let s: f64 = (0..c)
                .filter(|&j| keep(j))
                .map(|j| (row[j] - mx).exp())
                .sum();
            out.push(mx + s.ln());
        }
        let mut shape = sa;
        shape.pop();
        self.push("logsumexp", shape, out, Op::LogSumExp { input: a, mask })
    }

    /// Reverse sweep from a scalar `loss`. Gradients land on trainable leaves.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.differentiated {
            return Err(Error::Tape(
                "backward already ran on this tape; reset first".into(),
            ));
        }
        if !self.record {
            return Err(Error::Tape(
                "inference tape records no backward information".into(),
            ));
        }
        if self.nodes.is_empty() {
            return Err(Error::Tape("empty tape".into()));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::Tape(format!(
                "loss must be scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.differentiated = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if matches!(self.nodes[i].op, Op::Leaf) {
                if self.nodes[i].trainable {
                    self.nodes[i].grad = Some(g);
                }
                continue;
            }
            self.propagate(i, &g, &mut grads);
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                accumulate(grads, *a, g.to_vec());
                accumulate(grads, *b, g.to_vec());
            }
            Op::Sub(a, b) => {
                accumulate(grads, *a, g.to_vec());
                accumulate(grads, *b, g.iter().map(|x| -x).collect());
            }
            Op::Mul(a, b) => {
                let (da, db) = (self.data(*a), self.data(*b));
                accumulate(grads, *a, g.iter().zip(db).map(|(x, y)| x * y).collect());
                accumulate(grads, *b, g.iter().zip(da).map(|(x, y)| x * y).collect());
            }
            Op::Scale(a, c) => accumulate(grads, *a, g.iter().map(|x| x * c).collect()),
            Op::AddBias(a, b) => {
                let c = self.value(*b).numel();
                let mut gb = vec![0.0; c];
                for row in g.chunks_exact(c) {
                    gb.iter_mut().zip(row).for_each(|(acc, x)| *acc += x);
                }
                accumulate(grads, *a, g.to_vec());
                accumulate(grads, *b, gb);
            }
            Op::MulBias(a, gain) => {
                let c = self.value(*gain).numel();
                let gv = self.data(*gain);
                let av = self.data(*a);
                let mut gg = vec![0.0; c];
                let mut ga = Vec::with_capacity(g.len());
                for (grow, arow) in g.chunks_exact(c).zip(av.chunks_exact(c)) {
                    for j in 0..c {
                        gg[j] += grow[j] * arow[j];
                        ga.push(grow[j] * gv[j]);
                    }
                }
                accumulate(grads, *a, ga);
                accumulate(grads, *gain, gg);
            }
            Op::MulConst(a, c) => accumulate(
                grads,
                *a,
                g.iter().zip(c.iter()).map(|(x, y)| x * y).collect(),
            ),
            Op::MatMul(a, w) => {
                let sw = self.shape(*w);
                let (k, m) = (sw[0], sw[1]);
                let rows = g.len() / m;
                let mut ga = vec![0.0; rows * k];
                gemm(rows, m, k, g, false, self.data(*w), true, &mut ga, false);
                let mut gw = vec![0.0; k * m];
                gemm(k, rows, m, self.data(*a), true, g, false, &mut gw, false);
                accumulate(grads, *a, ga);
                accumulate(grads, *w, gw);
            }
            Op::Bmm { a, b, trans_b } => {
                let sa = self.shape(*a);
                let (batch, n, k) = (sa[0], sa[1], sa[2]);
                let m = node.value.shape()[2];
                let (da, db) = (self.data(*a), self.data(*b));
                let mut ga = vec![0.0; batch * n * k];
                let mut gb = vec![0.0; batch * k * m];
                for t in 0..batch {
                    let gt = &g[t * n * m..(t + 1) * n * m];
                    let at = &da[t * n * k..(t + 1) * n * k];
                    let bt = &db[t * k * m..(t + 1) * k * m];
                    let ga_t = &mut ga[t * n * k..(t + 1) * n * k];
                    let gb_t = &mut gb[t * k * m..(t + 1) * k * m];
                    if *trans_b {
                        // out = a b^T, b stored m x k
                        gemm(n, m, k, gt, false, bt, false, ga_t, false);
                        gemm(m, n, k, gt, true, at, false, gb_t, false);
                    } else {
                        gemm(n, m, k, gt, false, bt, true, ga_t, false);
                        gemm(k, n, m, at, true, gt, false, gb_t, false);
                    }
                }
                accumulate(grads, *a, ga);
                accumulate(grads, *b, gb);
            }
            Op::Concat { inputs, axis } => {
                let (outer, total, inner) = axis_split(node.value.shape(), *axis);
                let mut offset = 0;
                for &v in inputs {
                    let mid = self.shape(v)[*axis];
                    let mut gv = Vec::with_capacity(outer * mid * inner);
                    for o in 0..outer {
                        let start = (o * total + offset) * inner;
                        gv.extend_from_slice(&g[start..start + mid * inner]);
                    }
                    offset += mid;
                    accumulate(grads, v, gv);
                }
            }
            Op::Slice { input, axis, start } => {
                let si = self.shape(*input);
                let (outer, mid, inner) = axis_split(si, *axis);
                let len = node.value.shape()[*axis];
                let mut gi = vec![0.0; outer * mid * inner];
                for o in 0..outer {
                    let dst = (o * mid + start) * inner;
                    gi[dst..dst + len * inner]
                        .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                accumulate(grads, *input, gi);
            }
            Op::Reshape(a) => accumulate(grads, *a, g.to_vec()),
            Op::Permute { input, perm } => {
                let gi = ops::permute(g, node.value.shape(), &ops::inverse_perm(perm));
                accumulate(grads, *input, gi);
            }
            Op::GatherRows { input, index } => {
                let c = *node.value.shape().last().unwrap();
                let mut gi = vec![0.0; self.value(*input).numel()];
                for (k, &r) in index.iter().enumerate() {
                    gi[r * c..(r + 1) * c]
                        .iter_mut()
                        .zip(&g[k * c..(k + 1) * c])
                        .for_each(|(acc, x)| *acc += x);
                }
                accumulate(grads, *input, gi);
            }
            Op::MeanAxis { input, axis } => {
                let (outer, mid, inner) = axis_split(self.shape(*input), *axis);
                let inv = 1.0 / mid as f64;
                let mut gi = Vec::with_capacity(outer * mid * inner);
                for o in 0..outer {
                    for _ in 0..mid {
                        gi.extend(g[o * inner..(o + 1) * inner].iter().map(|x| x * inv));
                    }
                }
                accumulate(grads, *input, gi);
            }
            Op::Sum(a) => accumulate(grads, *a, vec![g[0]; self.value(*a).numel()]),
            Op::LayerNorm {
                input,
                xhat,
                inv_std,
            } => {
                let c = *node.value.shape().last().unwrap();
                let mut gi = Vec::with_capacity(g.len());
                for ((grow, xrow), is) in g.chunks_exact(c).zip(xhat.chunks_exact(c)).zip(inv_std) {
                    let mg = grow.iter().sum::<f64>() / c as f64;
                    let mgx = grow.iter().zip(xrow).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                    gi.extend(
                        grow.iter()
                            .zip(xrow)
                            .map(|(gj, xj)| is * (gj - mg - xj * mgx)),
                    );
                }
                accumulate(grads, *input, gi);
            }
            Op::Gelu(a) => {
                let x = self.data(*a);
                accumulate(
                    grads,
                    *a,
                    g.iter()
                        .zip(x)
                        .map(|(gi, &xi)| gi * ops::gelu_grad(xi))
                        .collect(),
                );
            }
            Op::Relu(a) => {
                let x = self.data(*a);
                accumulate(
                    grads,
                    *a,
                    g.iter()
                        .zip(x)
                        .map(|(gi, &xi)| if xi > 0.0 { *gi } else { 0.0 })
                        .collect(),
                );
            }
            Op::Softplus(a) => {
                let x = self.data(*a);
                accumulate(
                    grads,
                    *a,
                    g.iter()
                        .zip(x)
                        .map(|(gi, &xi)| gi * ops::sigmoid(xi))
                        .collect(),
                );
            }
            Op::Softmax(a) => {
                let c = *node.value.shape().last().unwrap();
                let mut gi = Vec::with_capacity(g.len());
                for (grow, yrow) in g.chunks_exact(c).zip(out.chunks_exact(c)) {
                    let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                    gi.extend(grow.iter().zip(yrow).map(|(gj, yj)| yj * (gj - dot)));
                }
                accumulate(grads, *a, gi);
            }
            Op::LogSumExp { input, mask } => {
                let x = self.data(*input);
                let c = *self.shape(*input).last().unwrap();
                let mut gi = vec![0.0; x.len()];
                for (r, (&lse, &gr)) in out.iter().zip(g).enumerate() {
                    let keep = |j: usize| mask.as_ref().is_none_or(|m| m[r * c + j]);
                    if !(0..c).any(keep) {
                        continue;
                    }
                    for j in (0..c).filter(|&j| keep(j)) {
                        gi[r * c + j] = gr * (x[r * c + j] - lse).exp();
                    }
                }
                accumulate(grads, *input, gi);
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
    match &mut grads[v.0] {
        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
        slot => *slot = Some(g),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_shape_algebra() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(&[2, 3]), true);
        let b = tape.leaf(Tensor::zeros(&[3, 4]), true);
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.shape(c), &[2, 4]);
        let bad = tape.leaf(Tensor::zeros(&[4, 4]), false);
        let err = tape.matmul(a, bad).unwrap_err();
        assert!(err.to_string().contains("[2, 3]") && err.to_string().contains("[4, 4]"));
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[3]));
        let s = tape.softmax(a).unwrap();
        for &v in tape.data(s) {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn logsumexp_values() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2], &[0.0, 0.0]));
        let l = tape.logsumexp(a, None).unwrap();
        assert!((tape.data(l)[0] - std::f64::consts::LN_2).abs() < 1e-15);
        let big = tape.constant(t(&[2], &[1000.0, 1000.0]));
        let l = tape.logsumexp(big, None).unwrap();
        assert_eq!(tape.data(l)[0], 1000.0 + std::f64::consts::LN_2);
    }

    #[test]
    fn grad_of_sum_is_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_fn(&[2, 3, 2], |i| i as f64), true);
        let s = tape.sum(x).unwrap();
        tape.backward(s).unwrap();
        assert!(tape.grad(x).unwrap().iter().all(|&g| g == 1.0));
    }

    #[test]
    fn grad_of_square_sum() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[3], &[1.0, 2.0, 3.0]), true);
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn non_trainable_leaves_get_no_grad() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]), true);
        let c = tape.constant(t(&[2], &[3.0, 4.0]));
        let p = tape.mul(x, c).unwrap();
        let s = tape.sum(p).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[3.0, 4.0]);
        assert!(tape.grad(c).is_none());
    }

    #[test]
    fn backward_rejects_non_scalar_and_double_run() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]), true);
        let y = tape.scale(x, 2.0).unwrap();
        assert!(matches!(tape.backward(y), Err(Error::Tape(_))));
        let s = tape.sum(y).unwrap();
        tape.backward(s).unwrap();
        assert!(matches!(tape.backward(s), Err(Error::Tape(_))));
        tape.reset();
        assert!(tape.is_empty());
    }

    #[test]
    fn empty_tape_backward_is_rejected() {
        let mut tape = Tape::new();
        let mut other = Tape::new();
        let v = other.leaf(Tensor::scalar(1.0), true);
        // a foreign handle on an empty tape must not be differentiated
        assert!(tape.backward(v).is_err());
    }

    #[test]
    fn overflow_is_reported() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1], &[1e300]));
        let err = tape.mul(x, x).unwrap_err();
        assert!(matches!(err, Error::NumericOverflow { op: "mul" }));
    }

    #[test]
    fn concat_then_slice_round_trips() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::from_fn(&[2, 3, 2], |i| i as f64 * 0.1));
        let b = tape.constant(Tensor::from_fn(&[2, 1, 2], |i| -(i as f64)));
        let c = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(tape.shape(c), &[2, 4, 2]);
        let a2 = tape.slice(c, 1, 0, 3).unwrap();
        let b2 = tape.slice(c, 1, 3, 1).unwrap();
        assert_eq!(tape.value(a2), tape.value(a));
        assert_eq!(tape.value(b2), tape.value(b));
    }

    #[test]
    fn concat_rejects_mismatched_extents() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[3, 3]));
        assert!(tape.concat(&[a, b], 1).is_err());
        assert!(tape.concat(&[a, b], 0).is_ok());
    }

    #[test]
    fn masked_logsumexp_skips_masked_entries() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2, 3], &[1.0, 50.0, 2.0, 3.0, 4.0, 5.0]), true);
        let mask: Arc<[bool]> = vec![true, false, true, false, false, false].into();
        let l = tape.logsumexp(x, Some(mask)).unwrap();
        let want = (1f64.exp() + 2f64.exp()).ln();
        assert!((tape.data(l)[0] - want).abs() < 1e-14);
        assert_eq!(tape.data(l)[1], 0.0);
        let s = tape.sum(l).unwrap();
        tape.backward(s).unwrap();
        let g = tape.grad(x).unwrap();
        assert_eq!(g[1], 0.0);
        assert_eq!(&g[3..], &[0.0, 0.0, 0.0]);
        assert!((g[0] + g[2] - 1.0).abs() < 1e-14);
    }
}
