use std::collections::HashMap;

use super::{as_matrix, gemm, ParameterSet, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Sigmoid,
    Relu,
    /// Tanh approximation of GELU.
    Gelu,
    /// `x * sigmoid(x)`.
    Swish,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum NormAxis {
    /// Statistics over the trailing axis; affine indexed by column.
    Layer,
    /// Statistics over each row of a channels×length matrix; affine indexed by row.
    Instance,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    Transpose(Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    Norm {
        x: Var,
        gamma: Var,
        beta: Var,
        axis: NormAxis,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Act(Var, Activation),
    Glu(Var),
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    ConcatRows(Vec<Var>),
    GatherRows {
        table: Var,
        ids: Vec<usize>,
    },
    MaskRows {
        x: Var,
        mask: Vec<bool>,
        fill: Var,
    },
    Unfold {
        x: Var,
        kernel: usize,
        stride: usize,
    },
    DepthwiseConv(Var, Var),
    OuterAddRows(Var, Var),
    Sum(Var),
    Mean(Var),
    /// Scalar whose gradient w.r.t. `input` was computed alongside its value.
    ScalarWithGrad {
        input: Var,
        grad: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Operation tape for reverse-mode differentiation.
///
/// Graphs are single use: build the forward pass, call [`Graph::backward`]
/// once, then drop the graph.
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<String, Var>,
    grad_enabled: bool,
    check_finite: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            grad_enabled: true,
            check_finite: cfg!(debug_assertions),
        }
    }

    /// A graph on which nothing requires gradients, parameters included.
    pub fn inference() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    /// Toggle the per-op NaN/Inf check (on by default in debug builds).
    pub fn with_finite_checks(mut self, on: bool) -> Self {
        self.check_finite = on;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    fn matrix(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        as_matrix(&self.nodes[v.0].value, op)
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if self.check_finite && !value.is_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        let requires_grad = self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn leaf(&mut self, mut value: Tensor, requires_grad: bool) -> Var {
        value.requires_grad = false;
        value.grad = None;
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: requires_grad && self.grad_enabled,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Leaf that receives a gradient (readable from [`Gradients::wrt`]).
    pub fn input(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Leaf bound to a named parameter. Repeated lookups share one node.
    pub fn param(&mut self, params: &ParameterSet, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let t = params
            .get(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))?;
        let v = self.leaf(t.clone(), true);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn zip(&mut self, op_name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        self.same_shape(op_name, a, b)?;
        let data = self.data(a).iter().zip(self.data(b)).map(|(x, y)| f(*x, *y)).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        self.push(op_name, value, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds the vector `row` to every trailing-axis slice of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let n = self.value(x).cols();
        if self.value(row).numel() != n {
            return Err(Error::shape(
                "add_row",
                format!("{:?} + row {:?}", self.shape(x), self.shape(row)),
            ));
        }
        let r = self.data(row);
        let data = self
            .data(x)
            .iter()
            .enumerate()
            .map(|(i, v)| v + r[i % n])
            .collect();
        let value = Tensor::new(self.shape(x).to_vec(), data)?;
        self.push("add_row", value, Op::AddRow(x, row), &[x, row])
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let data = self.data(x).iter().map(|v| v * c).collect();
        let value = Tensor::new(self.shape(x).to_vec(), data)?;
        self.push("scale", value, Op::Scale(x, c), &[x])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix(a, "matmul")?;
        let (k2, n) = self.matrix(b, "matmul")?;
        if k != k2 {
            return Err(Error::shape("matmul", format!("{m}x{k} times {k2}x{n}")));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.data(a), (k, 1), self.data(b), (n, 1), &mut out, 0.0);
        let value = Tensor::new(vec![m, n], out)?;
        self.push("matmul", value, Op::MatMul(a, b), &[a, b])
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.matrix(x, "transpose")?;
        let src = self.data(x);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let value = Tensor::new(vec![c, r], out)?;
        self.push("transpose", value, Op::Transpose(x), &[x])
    }

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (outer, n, inner) = axis_split(&shape, axis, "softmax")?;
        let src = self.data(x);
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * n + j) * inner + i;
                let max = (0..n).map(|j| src[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for j in 0..n {
                    let e = (src[idx(j)] - max).exp();
                    out[idx(j)] = e;
                    z += e;
                }
                for j in 0..n {
                    out[idx(j)] /= z;
                }
            }
        }
        let value = Tensor::new(shape, out)?;
        self.push("softmax", value, Op::Softmax { x, axis }, &[x])
    }

    fn norm(&mut self, op_name: &'static str, x: Var, gamma: Var, beta: Var, eps: f64, axis: NormAxis) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (rows, len, affine) = match axis {
            NormAxis::Layer => {
                let d = *shape.last().ok_or_else(|| Error::shape(op_name, "scalar input"))?;
                (if d == 0 { 0 } else { self.value(x).numel() / d }, d, d)
            }
            NormAxis::Instance => {
                let (c, l) = self.matrix(x, op_name)?;
                (c, l, c)
            }
        };
        if len == 0 {
            return Err(Error::shape(op_name, "empty normalization axis"));
        }
        if self.value(gamma).numel() != affine || self.value(beta).numel() != affine {
            return Err(Error::shape(
                op_name,
                format!("affine parameters must have {affine} elements"),
            ));
        }
        let (src, g, b) = (self.data(x), self.data(gamma), self.data(beta));
        let mut out = vec![0.0; src.len()];
        let mut xhat = vec![0.0; src.len()];
        let mut rstd = vec![0.0; rows];
        for r in 0..rows {
            let row = &src[r * len..(r + 1) * len];
            let mean = row.iter().sum::<f64>() / len as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / len as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..len {
                let h = (row[j] - mean) * rs;
                let a = match axis {
                    NormAxis::Layer => j,
                    NormAxis::Instance => r,
                };
                xhat[r * len + j] = h;
                out[r * len + j] = h * g[a] + b[a];
            }
        }
        let value = Tensor::new(shape, out)?;
        self.push(
            op_name,
            value,
            Op::Norm {
                x,
                gamma,
                beta,
                axis,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        )
    }

    /// Normalizes every trailing-axis vector, then applies `gamma`/`beta` per feature.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        self.norm("layer_norm", x, gamma, beta, eps, NormAxis::Layer)
    }

    /// Normalizes each channel of a channels×length matrix over its length.
    pub fn instance_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        self.norm("instance_norm", x, gamma, beta, eps, NormAxis::Instance)
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Result<Var> {
        let data = self.data(x).iter().map(|&v| act_forward(kind, v)).collect();
        let value = Tensor::new(self.shape(x).to_vec(), data)?;
        self.push("activation", value, Op::Act(x, kind), &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Tanh)
    }

    /// Gated linear unit over the trailing axis: `a * sigmoid(b)` for halves `[a, b]`.
    pub fn glu(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.matrix(x, "glu")?;
        if c % 2 != 0 {
            return Err(Error::shape("glu", format!("odd width {c}")));
        }
        let h = c / 2;
        let src = self.data(x);
        let mut out = Vec::with_capacity(r * h);
        for i in 0..r {
            for j in 0..h {
                out.push(src[i * c + j] * sigmoid(src[i * c + h + j]));
            }
        }
        let value = Tensor::new(vec![r, h], out)?;
        self.push("glu", value, Op::Glu(x), &[x])
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.matrix(x, "slice_cols")?;
        if start + len > c {
            return Err(Error::shape("slice_cols", format!("{start}+{len} > {c}")));
        }
        let src = self.data(x);
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&src[i * c + start..i * c + start + len]);
        }
        let value = Tensor::new(vec![r, len], out)?;
        self.push("slice_cols", value, Op::SliceCols { x, start }, &[x])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::shape("concat_cols", "no inputs"))?;
        let (r, _) = self.matrix(first, "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = self.matrix(p, "concat_cols")?;
            if pr != r {
                return Err(Error::shape("concat_cols", format!("row counts {pr} vs {r}")));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.data(p)[i * w..(i + 1) * w]);
            }
        }
        let value = Tensor::new(vec![r, total], out)?;
        self.push("concat_cols", value, Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.matrix(x, "slice_rows")?;
        if start + len > r {
            return Err(Error::shape("slice_rows", format!("{start}+{len} > {r}")));
        }
        let out = self.data(x)[start * c..(start + len) * c].to_vec();
        let value = Tensor::new(vec![len, c], out)?;
        self.push("slice_rows", value, Op::SliceRows { x, start }, &[x])
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::shape("concat_rows", "no inputs"))?;
        let (_, c) = self.matrix(first, "concat_rows")?;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (pr, pc) = self.matrix(p, "concat_rows")?;
            if pc != c {
                return Err(Error::shape("concat_rows", format!("widths {pc} vs {c}")));
            }
            rows += pr;
            out.extend_from_slice(self.data(p));
        }
        let value = Tensor::new(vec![rows, c], out)?;
        self.push("concat_rows", value, Op::ConcatRows(parts.to_vec()), parts)
    }

    /// Row lookup (embedding tables).
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (n, d) = self.matrix(table, "gather_rows")?;
        let src = self.data(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= n {
                return Err(Error::shape("gather_rows", format!("index {id} >= {n}")));
            }
            out.extend_from_slice(&src[id * d..(id + 1) * d]);
        }
        let value = Tensor::new(vec![ids.len(), d], out)?;
        self.push(
            "gather_rows",
            value,
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        )
    }

    /// Replaces row `i` of `x` by the vector `fill` wherever `mask[i]`.
    pub fn mask_rows(&mut self, x: Var, mask: &[bool], fill: Var) -> Result<Var> {
        let (r, c) = self.matrix(x, "mask_rows")?;
        if mask.len() != r || self.value(fill).numel() != c {
            return Err(Error::shape("mask_rows", "mask or fill size mismatch"));
        }
        let mut out = self.data(x).to_vec();
        let f = self.data(fill);
        for (i, _) in mask.iter().enumerate().filter(|(_, m)| **m) {
            out[i * c..(i + 1) * c].copy_from_slice(f);
        }
        let value = Tensor::new(vec![r, c], out)?;
        self.push(
            "mask_rows",
            value,
            Op::MaskRows {
                x,
                mask: mask.to_vec(),
                fill,
            },
            &[x, fill],
        )
    }

    /// Sliding windows over rows: `T×D -> T'×(kernel·D)` with `T' = (T-kernel)/stride + 1`.
    pub fn unfold(&mut self, x: Var, kernel: usize, stride: usize) -> Result<Var> {
        let (t, d) = self.matrix(x, "unfold")?;
        if kernel == 0 || stride == 0 || t < kernel {
            return Err(Error::shape(
                "unfold",
                format!("length {t} with kernel {kernel} stride {stride}"),
            ));
        }
        let out_t = (t - kernel) / stride + 1;
        let src = self.data(x);
        let mut out = Vec::with_capacity(out_t * kernel * d);
        for i in 0..out_t {
            out.extend_from_slice(&src[i * stride * d..(i * stride + kernel) * d]);
        }
        let value = Tensor::new(vec![out_t, kernel * d], out)?;
        self.push("unfold", value, Op::Unfold { x, kernel, stride }, &[x])
    }

    /// Per-channel convolution over time with zero "same" padding.
    /// `x` is T×C, `w` is K×C with K odd.
    pub fn depthwise_conv(&mut self, x: Var, w: Var) -> Result<Var> {
        let (t, c) = self.matrix(x, "depthwise_conv")?;
        let (k, wc) = self.matrix(w, "depthwise_conv")?;
        if wc != c || k % 2 == 0 {
            return Err(Error::shape(
                "depthwise_conv",
                format!("kernel {k}x{wc} for {c} channels"),
            ));
        }
        let pad = (k - 1) / 2;
        let (src, kw) = (self.data(x), self.data(w));
        let mut out = vec![0.0; t * c];
        for ti in 0..t {
            for j in 0..k {
                let s = ti + j;
                if s < pad || s - pad >= t {
                    continue;
                }
                let s = s - pad;
                for ch in 0..c {
                    out[ti * c + ch] += kw[j * c + ch] * src[s * c + ch];
                }
            }
        }
        let value = Tensor::new(vec![t, c], out)?;
        self.push("depthwise_conv", value, Op::DepthwiseConv(x, w), &[x, w])
    }

    /// All pairwise row sums: `a` (T×J), `b` (U×J) -> (T·U)×J with row `t·U + u`.
    pub fn outer_add_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, j) = self.matrix(a, "outer_add_rows")?;
        let (u, j2) = self.matrix(b, "outer_add_rows")?;
        if j != j2 {
            return Err(Error::shape("outer_add_rows", format!("widths {j} vs {j2}")));
        }
        let (ad, bd) = (self.data(a), self.data(b));
        let mut out = Vec::with_capacity(t * u * j);
        for ti in 0..t {
            for ui in 0..u {
                out.extend(ad[ti * j..(ti + 1) * j].iter().zip(&bd[ui * j..(ui + 1) * j]).map(|(x, y)| x + y));
            }
        }
        let value = Tensor::new(vec![t * u, j], out)?;
        self.push("outer_add_rows", value, Op::OuterAddRows(a, b), &[a, b])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.data(x).iter().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        if n == 0 {
            return Err(Error::shape("mean", "empty tensor"));
        }
        let s = self.data(x).iter().sum::<f64>() / n as f64;
        self.push("mean", Tensor::scalar(s), Op::Mean(x), &[x])
    }

    /// Records a scalar `value` computed outside the tape together with its
    /// gradient with respect to `input`.
    pub fn scalar_with_grad(&mut self, op_name: &'static str, input: Var, value: f64, grad: Vec<f64>) -> Result<Var> {
        if grad.len() != self.value(input).numel() {
            return Err(Error::shape(op_name, "gradient size differs from input"));
        }
        self.push(op_name, Tensor::scalar(value), Op::ScalarWithGrad { input, grad }, &[input])
    }

    /// Mean negative log-likelihood over rows whose `ignore` flag is false.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], ignore: &[bool]) -> Result<Var> {
        let (n, v) = self.matrix(logits, "cross_entropy")?;
        if targets.len() != n || ignore.len() != n {
            return Err(Error::shape("cross_entropy", "targets/ignore length must equal rows"));
        }
        let count = ignore.iter().filter(|i| !**i).count();
        if count == 0 {
            return Err(Error::invalid("cross_entropy: every position is ignored"));
        }
        let src = self.data(logits);
        let mut grad = vec![0.0; n * v];
        let mut total = 0.0;
        for i in 0..n {
            if ignore[i] {
                continue;
            }
            let target = targets[i];
            if target >= v {
                return Err(Error::invalid(format!("cross_entropy: target {target} >= {v}")));
            }
            let row = &src[i * v..(i + 1) * v];
            let lse = log_sum_exp(row);
            total += lse - row[target];
            for j in 0..v {
                grad[i * v + j] = (row[j] - lse).exp() / count as f64;
            }
            grad[i * v + target] -= 1.0 / count as f64;
        }
        self.scalar_with_grad("cross_entropy", logits, total / count as f64, grad)
    }

    /// Multi-head scaled dot-product attention on already projected
    /// queries (Tq×d), keys and values (Tk×d).
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        Ok(self.attention_with_weights(q, k, v, heads)?.0)
    }

    /// As [`Graph::attention`], also returning each head's Tq×Tk weight matrix.
    pub fn attention_with_weights(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<(Var, Vec<Var>)> {
        let (_, d) = self.matrix(q, "attention")?;
        let (tk, dk) = self.matrix(k, "attention")?;
        let (tv, dv) = self.matrix(v, "attention")?;
        if heads == 0 || d % heads != 0 {
            return Err(Error::shape("attention", format!("dim {d} not divisible by {heads} heads")));
        }
        if dk != d || dv != d || tk != tv {
            return Err(Error::shape("attention", "query/key/value shapes disagree"));
        }
        let hd = d / heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let mut outs = Vec::with_capacity(heads);
        let mut weights = Vec::with_capacity(heads);
        for h in 0..heads {
            let (qh, kh, vh) = if heads == 1 {
                (q, k, v)
            } else {
                (
                    self.slice_cols(q, h * hd, hd)?,
                    self.slice_cols(k, h * hd, hd)?,
                    self.slice_cols(v, h * hd, hd)?,
                )
            };
            let kt = self.transpose(kh)?;
            let scores = self.matmul(qh, kt)?;
            let scores = self.scale(scores, scale)?;
            let w = self.softmax(scores, 1)?;
            outs.push(self.matmul(w, vh)?);
            weights.push(w);
        }
        let out = if heads == 1 { outs[0] } else { self.concat_cols(&outs)? };
        Ok((out, weights))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got {:?}", self.shape(loss)),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let params = self.params.iter().map(|(n, v)| (n.clone(), *v)).collect();
        Ok(Gradients { grads, params })
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, |d| add_into(d, g));
                self.acc(grads, *b, |d| add_into(d, g));
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, |d| add_into(d, g));
                self.acc(grads, *b, |d| d.iter_mut().zip(g).for_each(|(x, gi)| *x -= gi));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.data(*a), self.data(*b));
                self.acc(grads, *a, |d| {
                    d.iter_mut().zip(g).zip(bv).for_each(|((x, gi), bi)| *x += gi * bi)
                });
                self.acc(grads, *b, |d| {
                    d.iter_mut().zip(g).zip(av).for_each(|((x, gi), ai)| *x += gi * ai)
                });
            }
            Op::AddRow(x, row) => {
                self.acc(grads, *x, |d| add_into(d, g));
                let n = self.value(*row).numel();
                self.acc(grads, *row, |d| {
                    for (k, gi) in g.iter().enumerate() {
                        d[k % n] += gi;
                    }
                });
            }
            Op::Scale(x, c) => {
                self.acc(grads, *x, |d| d.iter_mut().zip(g).for_each(|(v, gi)| *v += c * gi));
            }
            Op::MatMul(a, b) => {
                let (m, k) = as_matrix(self.value(*a), "matmul").unwrap();
                let n = self.value(*b).cols();
                let (av, bv) = (self.data(*a), self.data(*b));
                // dA = dC · Bᵀ, dB = Aᵀ · dC
                self.acc(grads, *a, |d| gemm(m, n, k, g, (n, 1), bv, (1, n), d, 1.0));
                self.acc(grads, *b, |d| gemm(k, m, n, av, (1, k), g, (n, 1), d, 1.0));
            }
            Op::Transpose(x) => {
                let (r, c) = as_matrix(self.value(*x), "transpose").unwrap();
                self.acc(grads, *x, |d| {
                    for a in 0..r {
                        for b in 0..c {
                            d[a * c + b] += g[b * r + a];
                        }
                    }
                });
            }
            Op::Softmax { x, axis } => {
                let (outer, n, inner) = axis_split(node.value.shape(), *axis, "softmax").unwrap();
                self.acc(grads, *x, |d| {
                    for o in 0..outer {
                        for ii in 0..inner {
                            let idx = |j: usize| (o * n + j) * inner + ii;
                            let dot: f64 = (0..n).map(|j| g[idx(j)] * y[idx(j)]).sum();
                            for j in 0..n {
                                d[idx(j)] += y[idx(j)] * (g[idx(j)] - dot);
                            }
                        }
                    }
                });
            }
            Op::Norm {
                x,
                gamma,
                beta,
                axis,
                xhat,
                rstd,
            } => {
                let rows = rstd.len();
                let len = xhat.len() / rows.max(1);
                let aff = |r: usize, j: usize| match axis {
                    NormAxis::Layer => j,
                    NormAxis::Instance => r,
                };
                let gam = self.data(*gamma);
                self.acc(grads, *gamma, |d| {
                    for r in 0..rows {
                        for j in 0..len {
                            d[aff(r, j)] += g[r * len + j] * xhat[r * len + j];
                        }
                    }
                });
                self.acc(grads, *beta, |d| {
                    for r in 0..rows {
                        for j in 0..len {
                            d[aff(r, j)] += g[r * len + j];
                        }
                    }
                });
                self.acc(grads, *x, |d| {
                    let mut dh = vec![0.0; len];
                    for r in 0..rows {
                        let mut mean_dh = 0.0;
                        let mut mean_dh_h = 0.0;
                        for j in 0..len {
                            dh[j] = g[r * len + j] * gam[aff(r, j)];
                            mean_dh += dh[j];
                            mean_dh_h += dh[j] * xhat[r * len + j];
                        }
                        mean_dh /= len as f64;
                        mean_dh_h /= len as f64;
                        for j in 0..len {
                            d[r * len + j] += rstd[r] * (dh[j] - mean_dh - xhat[r * len + j] * mean_dh_h);
                        }
                    }
                });
            }
            Op::Act(x, kind) => {
                let xv = self.data(*x);
                self.acc(grads, *x, |d| {
                    for k in 0..d.len() {
                        d[k] += g[k] * act_derivative(*kind, xv[k], y[k]);
                    }
                });
            }
            Op::Glu(x) => {
                let (r, c) = as_matrix(self.value(*x), "glu").unwrap();
                let h = c / 2;
                let xv = self.data(*x);
                self.acc(grads, *x, |d| {
                    for i in 0..r {
                        for j in 0..h {
                            let a = xv[i * c + j];
                            let s = sigmoid(xv[i * c + h + j]);
                            let gi = g[i * h + j];
                            d[i * c + j] += gi * s;
                            d[i * c + h + j] += gi * a * s * (1.0 - s);
                        }
                    }
                });
            }
            Op::SliceCols { x, start } => {
                let c = self.value(*x).cols();
                let len = node.value.cols();
                self.acc(grads, *x, |d| {
                    for (i, row) in g.chunks(len).enumerate() {
                        add_into(&mut d[i * c + start..i * c + start + len], row);
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let mut off = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    self.acc(grads, p, |d| {
                        for (i, row) in d.chunks_mut(w).enumerate() {
                            add_into(row, &g[i * total + off..i * total + off + w]);
                        }
                    });
                    off += w;
                }
            }
            Op::SliceRows { x, start } => {
                let c = node.value.cols();
                self.acc(grads, *x, |d| add_into(&mut d[start * c..start * c + g.len()], g));
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    self.acc(grads, p, |d| add_into(d, &g[off..off + n]));
                    off += n;
                }
            }
            Op::GatherRows { table, ids } => {
                let d_w = node.value.cols();
                self.acc(grads, *table, |d| {
                    for (k, &id) in ids.iter().enumerate() {
                        add_into(&mut d[id * d_w..(id + 1) * d_w], &g[k * d_w..(k + 1) * d_w]);
                    }
                });
            }
            Op::MaskRows { x, mask, fill } => {
                let c = node.value.cols();
                self.acc(grads, *x, |d| {
                    for (i, m) in mask.iter().enumerate() {
                        if !m {
                            add_into(&mut d[i * c..(i + 1) * c], &g[i * c..(i + 1) * c]);
                        }
                    }
                });
                self.acc(grads, *fill, |d| {
                    for (i, m) in mask.iter().enumerate() {
                        if *m {
                            add_into(d, &g[i * c..(i + 1) * c]);
                        }
                    }
                });
            }
            Op::Unfold { x, kernel, stride } => {
                let dcols = self.value(*x).cols();
                let w = kernel * dcols;
                self.acc(grads, *x, |d| {
                    for (i, row) in g.chunks(w).enumerate() {
                        let s = i * stride * dcols;
                        add_into(&mut d[s..s + w], row);
                    }
                });
            }
            Op::DepthwiseConv(x, w) => {
                let (t, c) = as_matrix(self.value(*x), "depthwise_conv").unwrap();
                let k = self.value(*w).rows();
                let pad = (k - 1) / 2;
                let (xv, wv) = (self.data(*x), self.data(*w));
                let taps = |f: &mut dyn FnMut(usize, usize, usize)| {
                    for ti in 0..t {
                        for j in 0..k {
                            let s = ti + j;
                            if s < pad || s - pad >= t {
                                continue;
                            }
                            for ch in 0..c {
                                f(ti, j, (s - pad) * c + ch);
                            }
                        }
                    }
                };
                self.acc(grads, *x, |d| {
                    taps(&mut |ti, j, si| {
                        let ch = si % c;
                        d[si] += g[ti * c + ch] * wv[j * c + ch];
                    })
                });
                self.acc(grads, *w, |d| {
                    taps(&mut |ti, j, si| {
                        let ch = si % c;
                        d[j * c + ch] += g[ti * c + ch] * xv[si];
                    })
                });
            }
            Op::OuterAddRows(a, b) => {
                let (t, j) = as_matrix(self.value(*a), "outer_add_rows").unwrap();
                let u = self.value(*b).rows();
                self.acc(grads, *a, |d| {
                    for ti in 0..t {
                        for ui in 0..u {
                            add_into(&mut d[ti * j..(ti + 1) * j], &g[(ti * u + ui) * j..(ti * u + ui + 1) * j]);
                        }
                    }
                });
                self.acc(grads, *b, |d| {
                    for ti in 0..t {
                        for ui in 0..u {
                            add_into(&mut d[ui * j..(ui + 1) * j], &g[(ti * u + ui) * j..(ti * u + ui + 1) * j]);
                        }
                    }
                });
            }
            Op::Sum(x) => {
                self.acc(grads, *x, |d| d.iter_mut().for_each(|v| *v += g[0]));
            }
            Op::Mean(x) => {
                let n = self.value(*x).numel() as f64;
                self.acc(grads, *x, |d| d.iter_mut().for_each(|v| *v += g[0] / n));
            }
            Op::ScalarWithGrad { input, grad } => {
                self.acc(grads, *input, |d| {
                    d.iter_mut().zip(grad).for_each(|(v, gi)| *v += g[0] * gi)
                });
            }
        }
    }

    fn acc(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let n = self.nodes[v.0].value.numel();
        f(grads[v.0].get_or_insert_with(|| vec![0.0; n]));
    }
}

/// Result of a reverse pass.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    params: Vec<(String, Var)>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`; `None` if `v` does not
    /// require gradients or the loss does not depend on it.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient for a named parameter that was bound on the graph.
    pub fn param(&self, name: &str) -> Option<&[f64]> {
        self.params
            .iter()
            .find(|(n, _)| n == name)
            .and_then(|(_, v)| self.wrt(*v))
    }

    /// All parameter gradients (unused parameters report no entry).
    pub fn params(&self) -> impl Iterator<Item = (&str, &[f64])> {
        self.params
            .iter()
            .filter_map(|(n, v)| self.wrt(*v).map(|g| (n.as_str(), g)))
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

fn axis_split(shape: &[usize], axis: usize, op: &'static str) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::shape(op, format!("axis {axis} out of range for {shape:?}")));
    }
    let n = shape[axis];
    if n == 0 {
        return Err(Error::shape(op, "empty axis"));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, n, inner))
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn act_forward(kind: Activation, x: f64) -> f64 {
    match kind {
        Activation::Tanh => x.tanh(),
        Activation::Sigmoid => sigmoid(x),
        Activation::Relu => x.max(0.0),
        Activation::Gelu => 0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh()),
        Activation::Swish => x * sigmoid(x),
    }
}

fn act_derivative(kind: Activation, x: f64, y: f64) -> f64 {
    match kind {
        Activation::Tanh => 1.0 - y * y,
        Activation::Sigmoid => y * (1.0 - y),
        Activation::Relu => {
            if x > 0.0 {
                1.0
            } else {
                0.0
            }
        }
        Activation::Gelu => {
            let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
            0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
        }
        Activation::Swish => {
            let s = sigmoid(x);
            s + x * s * (1.0 - s)
        }
    }
}

#[cfg(test)]
#[path = "graph_tests.rs"]
mod tests;
