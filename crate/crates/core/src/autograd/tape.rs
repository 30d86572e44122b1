use std::collections::HashMap;

use super::kernels::{self, ConvDims, ConvSpec, LAYER_NORM_EPS};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
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
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRowBias(Var, Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Option<Var>,
        bias: Option<Var>,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gelu(Var),
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        dims: ConvDims,
    },
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
    L2Sq(Var),
    Reshape(Var),
    SliceRows {
        x: Var,
        start: usize,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
    RepeatRows(Var),
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    SigmoidBce {
        logits: Var,
        targets: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only record of primitive applications.
///
/// A tape is single-threaded; run independent forwards (e.g. one per masked
/// clone) on independent tapes and merge their gradients explicitly.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<String, Var>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn dims2(&self, v: Var, what: &str) -> Result<(usize, usize)> {
        self.value(v)
            .dims2()
            .map_err(|_| Error::shape(format!("{what}: expected 2-D operand, got {:?}", self.shape(v))))
    }

    // ----- leaves -------------------------------------------------------

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Binds every tensor of `store` as a named leaf.
    pub fn bind_store(&mut self, store: &ParamStore, requires_grad: bool) {
        for (name, t) in store.iter() {
            let v = self.leaf(t.clone(), requires_grad);
            self.params.insert(name.to_string(), v);
        }
    }

    /// Binds an existing var under a parameter name (used by gradient checks
    /// that perturb parameters as explicit inputs).
    pub fn bind_param(&mut self, name: &str, v: Var) {
        self.params.insert(name.to_string(), v);
    }

    pub fn param(&self, name: &str) -> Result<Var> {
        self.params
            .get(name)
            .copied()
            .ok_or_else(|| Error::invalid(format!("parameter `{name}` is not bound on this tape")))
    }

    pub fn has_param(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    // ----- linear algebra ----------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul lhs")?;
        let (k2, n) = self.dims2(b, "matmul rhs")?;
        if k != k2 {
            return Err(Error::shape(format!(
                "matmul inner dimensions differ: ({m}x{k}) * ({k2}x{n})"
            )));
        }
        let out = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims2(a, "transpose")?;
        let out = kernels::transpose(self.value(a).data(), r, c);
        let rg = self.any_grad(&[a]);
        Ok(self.push(Tensor::new(vec![c, r], out)?, Op::Transpose(a), rg))
    }

    // ----- elementwise ---------------------------------------------------

    fn zip_same(&self, a: Var, b: Var, what: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        ta.check_same_shape(tb, what)?;
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "add", |x, y| x + y)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "sub", |x, y| x - y)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "mul", |x, y| x * y)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let t = self.value(a).map(|x| x * s);
        let rg = self.any_grad(&[a]);
        self.push(t, Op::Scale(a, s), rg)
    }

    /// Adds a length-`n` bias to every row of an `(m, n)` matrix.
    pub fn add_row_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (m, n) = self.dims2(x, "add_row_bias")?;
        if self.value(b).len() != n {
            return Err(Error::shape(format!(
                "bias of length {} cannot be added to rows of width {n}",
                self.value(b).len()
            )));
        }
        let bias = self.value(b).data();
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(n) {
            for (o, &bv) in row.iter_mut().zip(bias) {
                *o += bv;
            }
        }
        let rg = self.any_grad(&[x, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::AddRowBias(x, b), rg))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let t = self.value(a).map(kernels::gelu_scalar);
        let rg = self.any_grad(&[a]);
        self.push(t, Op::Gelu(a), rg)
    }

    // ----- normalisation -----------------------------------------------

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims2(a, "softmax_rows")?;
        let mut out = self.value(a).data().to_vec();
        for row in out.chunks_mut(c) {
            kernels::softmax_in_place(row)?;
        }
        let rg = self.any_grad(&[a]);
        Ok(self.push(Tensor::new(vec![r, c], out)?, Op::SoftmaxRows(a), rg))
    }

    /// Row-wise layer norm (biased variance, eps = [`LAYER_NORM_EPS`]) with
    /// optional per-column gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Option<Var>, bias: Option<Var>) -> Result<Var> {
        let (m, n) = self.dims2(x, "layer_norm")?;
        for p in [gain, bias].into_iter().flatten() {
            if self.value(p).len() != n {
                return Err(Error::shape(format!(
                    "layer_norm affine parameter has length {}, rows have width {n}",
                    self.value(p).len()
                )));
            }
        }
        let xs = self.value(x).data();
        let mut xhat = vec![0.0; m * n];
        let mut inv_std = vec![0.0; m];
        for r in 0..m {
            let row = &xs[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[r] = is;
            for (o, v) in xhat[r * n..(r + 1) * n].iter_mut().zip(row) {
                *o = (v - mean) * is;
            }
        }
        let mut out = xhat.clone();
        if let Some(g) = gain {
            let g = self.value(g).data();
            for row in out.chunks_mut(n) {
                for (o, gv) in row.iter_mut().zip(g) {
                    *o *= gv;
                }
            }
        }
        if let Some(b) = bias {
            let b = self.value(b).data();
            for row in out.chunks_mut(n) {
                for (o, bv) in row.iter_mut().zip(b) {
                    *o += bv;
                }
            }
        }
        let mut deps = vec![x];
        deps.extend(gain);
        deps.extend(bias);
        let rg = self.any_grad(&deps);
        Ok(self.push(
            Tensor::new(vec![m, n], out)?,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    // ----- convolution ---------------------------------------------------

    /// 2-D convolution of a `(C, H, W)` input with a `(Cout, C/groups, kh, kw)` kernel.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, spec: ConvSpec) -> Result<Var> {
        let dims = ConvDims::new(self.shape(input), self.shape(weight), spec)?;
        if let Some(b) = bias {
            if self.value(b).len() != dims.c_out {
                return Err(Error::shape(format!(
                    "conv2d bias has length {}, expected {}",
                    self.value(b).len(),
                    dims.c_out
                )));
            }
        }
        let out = dims.forward(
            self.value(input).data(),
            self.value(weight).data(),
            bias.map(|b| self.value(b).data()),
        );
        let mut deps = vec![input, weight];
        deps.extend(bias);
        let rg = self.any_grad(&deps);
        Ok(self.push(
            Tensor::new(dims.out_shape(), out)?,
            Op::Conv2d {
                input,
                weight,
                bias,
                dims,
            },
            rg,
        ))
    }

    // ----- reductions ----------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.any_grad(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        let rg = self.any_grad(&[a]);
        self.push(Tensor::scalar(s), Op::Mean(a), rg)
    }

    /// Mean over the row axis: `(m, n) -> (1, n)`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims2(a, "mean_rows")?;
        let mut out = vec![0.0; n];
        for row in self.value(a).data().chunks(n) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|o| *o /= m as f64);
        let rg = self.any_grad(&[a]);
        Ok(self.push(Tensor::new(vec![1, n], out)?, Op::MeanRows(a), rg))
    }

    /// Squared L2 norm of all entries.
    pub fn l2_sq(&mut self, a: Var) -> Var {
        let s = self.value(a).sq_norm();
        let rg = self.any_grad(&[a]);
        self.push(Tensor::scalar(s), Op::L2Sq(a), rg)
    }

    // ----- structure -----------------------------------------------------

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).reshape(shape)?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(t, Op::Reshape(a), rg))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims2(a, "slice_rows")?;
        if len == 0 || start + len > m {
            return Err(Error::shape(format!("row slice {start}..{} out of 0..{m}", start + len)));
        }
        let data = self.value(a).data()[start * n..(start + len) * n].to_vec();
        let rg = self.any_grad(&[a]);
        Ok(self.push(Tensor::new(vec![len, n], data)?, Op::SliceRows { x: a, start }, rg))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims2(a, "slice_cols")?;
        if len == 0 || start + len > n {
            return Err(Error::shape(format!("column slice {start}..{} out of 0..{n}", start + len)));
        }
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(m * len);
        for r in 0..m {
            data.extend_from_slice(&src[r * n + start..r * n + start + len]);
        }
        let rg = self.any_grad(&[a]);
        Ok(self.push(Tensor::new(vec![m, len], data)?, Op::SliceCols { x: a, start }, rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::shape("concat_rows of zero tensors"));
        };
        let (_, n) = self.dims2(first, "concat_rows")?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (m, c) = self.dims2(p, "concat_rows")?;
            if c != n {
                return Err(Error::shape(format!("concat_rows width mismatch: {c} vs {n}")));
            }
            rows += m;
            data.extend_from_slice(self.value(p).data());
        }
        let rg = self.any_grad(parts);
        Ok(self.push(Tensor::new(vec![rows, n], data)?, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::shape("concat_cols of zero tensors"));
        };
        let (m, _) = self.dims2(first, "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.dims2(p, "concat_cols")?;
            if r != m {
                return Err(Error::shape(format!("concat_cols height mismatch: {r} vs {m}")));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * total);
        for r in 0..m {
            for (&p, &c) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[r * c..(r + 1) * c]);
            }
        }
        let rg = self.any_grad(parts);
        Ok(self.push(Tensor::new(vec![m, total], data)?, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// `out[i] = a[idx[i]]`; repeated indices are allowed.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let (m, n) = self.dims2(a, "gather_rows")?;
        if idx.is_empty() {
            return Err(Error::shape("gather_rows with no indices"));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= m) {
            return Err(Error::shape(format!("gather_rows index {bad} out of 0..{m}")));
        }
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            data.extend_from_slice(&src[i * n..(i + 1) * n]);
        }
        let rg = self.any_grad(&[a]);
        Ok(self.push(
            Tensor::new(vec![idx.len(), n], data)?,
            Op::GatherRows {
                x: a,
                idx: idx.to_vec(),
            },
            rg,
        ))
    }

    /// Tiles a single row `(1, n)` into `(k, n)`.
    pub fn repeat_rows(&mut self, a: Var, k: usize) -> Result<Var> {
        let (m, n) = self.dims2(a, "repeat_rows")?;
        if m != 1 || k == 0 {
            return Err(Error::shape(format!("repeat_rows needs a (1, n) input and k > 0, got ({m}, {n}), k={k}")));
        }
        let data = self.value(a).data().repeat(k);
        let rg = self.any_grad(&[a]);
        Ok(self.push(Tensor::new(vec![k, n], data)?, Op::RepeatRows(a), rg))
    }

    // ----- losses ----------------------------------------------------------

    /// Mean softmax cross-entropy of `(B, C)` logits against class indices.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (b, c) = self.dims2(logits, "softmax_cross_entropy")?;
        if labels.len() != b {
            return Err(Error::shape(format!("{} labels for {b} rows of logits", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::invalid(format!("label {bad} out of range for {c} classes")));
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut loss = 0.0;
        for (row, &l) in probs.chunks_mut(c).zip(labels) {
            kernels::softmax_in_place(row)?;
            loss -= row[l].max(f64::MIN_POSITIVE).ln();
        }
        loss /= b as f64;
        let rg = self.any_grad(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Mean per-class sigmoid binary cross-entropy against `{0,1}` targets.
    pub fn sigmoid_bce(&mut self, logits: Var, targets: &Tensor) -> Result<Var> {
        self.value(logits).check_same_shape(targets, "sigmoid_bce")?;
        let x = self.value(logits).data();
        let n = x.len() as f64;
        let loss = x
            .iter()
            .zip(targets.data())
            .map(|(&z, &t)| z.max(0.0) - z * t + (-z.abs()).exp().ln_1p())
            .sum::<f64>()
            / n;
        let rg = self.any_grad(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SigmoidBce {
                logits,
                targets: targets.data().to_vec(),
            },
            rg,
        ))
    }

    // ----- backward --------------------------------------------------------

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let n = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (m, k) = self.value(a).dims2().unwrap();
                let n = self.value(b).shape()[1];
                if let Some(ga) = self.acc(grads, a) {
                    kernels::matmul_nt_acc(g, self.value(b).data(), ga, m, k, n);
                }
                if let Some(gb) = self.acc(grads, b) {
                    kernels::matmul_tn_acc(self.value(a).data(), g, gb, m, k, n);
                }
            }
            &Op::Transpose(a) => {
                let (r, c) = self.value(a).dims2().unwrap();
                if let Some(ga) = self.acc(grads, a) {
                    // g is (c, r)
                    for (o, v) in ga.iter_mut().zip(kernels::transpose(g, c, r)) {
                        *o += v;
                    }
                }
            }
            &Op::Add(a, b) => {
                for v in [a, b] {
                    if let Some(gv) = self.acc(grads, v) {
                        add_into(gv, g);
                    }
                }
            }
            &Op::Sub(a, b) => {
                if let Some(ga) = self.acc(grads, a) {
                    add_into(ga, g);
                }
                if let Some(gb) = self.acc(grads, b) {
                    gb.iter_mut().zip(g).for_each(|(o, x)| *o -= x);
                }
            }
            &Op::Mul(a, b) => {
                if let Some(ga) = self.acc(grads, a) {
                    let bv = self.value(b).data();
                    ga.iter_mut().zip(g).zip(bv).for_each(|((o, x), y)| *o += x * y);
                }
                if let Some(gb) = self.acc(grads, b) {
                    let av = self.value(a).data();
                    gb.iter_mut().zip(g).zip(av).for_each(|((o, x), y)| *o += x * y);
                }
            }
            &Op::Scale(a, s) => {
                if let Some(ga) = self.acc(grads, a) {
                    ga.iter_mut().zip(g).for_each(|(o, x)| *o += s * x);
                }
            }
            &Op::AddRowBias(x, b) => {
                if let Some(gx) = self.acc(grads, x) {
                    add_into(gx, g);
                }
                if let Some(gb) = self.acc(grads, b) {
                    let n = gb.len();
                    for row in g.chunks(n) {
                        add_into(gb, row);
                    }
                }
            }
            &Op::SoftmaxRows(a) => {
                if let Some(ga) = self.acc(grads, a) {
                    let c = node.value.shape()[1];
                    let y = node.value.data();
                    for ((gar, gr), yr) in ga.chunks_mut(c).zip(g.chunks(c)).zip(y.chunks(c)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for ((o, gv), yv) in gar.iter_mut().zip(gr).zip(yr) {
                            *o += yv * (gv - dot);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let n = node.value.shape()[1];
                if let Some(b) = *bias {
                    if let Some(gb) = self.acc(grads, b) {
                        for row in g.chunks(n) {
                            add_into(gb, row);
                        }
                    }
                }
                if let Some(gn) = *gain {
                    if let Some(gg) = self.acc(grads, gn) {
                        for (gr, xr) in g.chunks(n).zip(xhat.chunks(n)) {
                            for ((o, gv), xv) in gg.iter_mut().zip(gr).zip(xr) {
                                *o += gv * xv;
                            }
                        }
                    }
                }
                let gain_vals = gain.map(|gn| self.value(gn).data().to_vec());
                if let Some(gx) = self.acc(grads, *x) {
                    let mut dxhat = vec![0.0; n];
                    for r in 0..inv_std.len() {
                        let gr = &g[r * n..(r + 1) * n];
                        let xr = &xhat[r * n..(r + 1) * n];
                        for j in 0..n {
                            dxhat[j] = gr[j] * gain_vals.as_ref().map_or(1.0, |gv| gv[j]);
                        }
                        let mean_d = dxhat.iter().sum::<f64>() / n as f64;
                        let mean_dx = dxhat.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                        for j in 0..n {
                            gx[r * n + j] += inv_std[r] * (dxhat[j] - mean_d - xr[j] * mean_dx);
                        }
                    }
                }
            }
            &Op::Gelu(a) => {
                if let Some(ga) = self.acc(grads, a) {
                    let x = self.value(a).data();
                    for ((o, gv), xv) in ga.iter_mut().zip(g).zip(x) {
                        *o += gv * kernels::gelu_grad_scalar(*xv);
                    }
                }
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                dims,
            } => {
                if let Some(gi) = self.acc(grads, *input) {
                    dims.backward_input(g, self.value(*weight).data(), gi);
                }
                if let Some(gw) = self.acc(grads, *weight) {
                    dims.backward_weight(g, self.value(*input).data(), gw);
                }
                if let Some(b) = *bias {
                    if let Some(gb) = self.acc(grads, b) {
                        let plane = dims.h_out * dims.w_out;
                        for (o, chunk) in gb.iter_mut().zip(g.chunks(plane)) {
                            *o += chunk.iter().sum::<f64>();
                        }
                    }
                }
            }
            &Op::Sum(a) => {
                if let Some(ga) = self.acc(grads, a) {
                    ga.iter_mut().for_each(|o| *o += g[0]);
                }
            }
            &Op::Mean(a) => {
                if let Some(ga) = self.acc(grads, a) {
                    let s = g[0] / ga.len() as f64;
                    ga.iter_mut().for_each(|o| *o += s);
                }
            }
            &Op::MeanRows(a) => {
                if let Some(ga) = self.acc(grads, a) {
                    let n = g.len();
                    let m = ga.len() / n;
                    for row in ga.chunks_mut(n) {
                        row.iter_mut().zip(g).for_each(|(o, gv)| *o += gv / m as f64);
                    }
                }
            }
            &Op::L2Sq(a) => {
                if let Some(ga) = self.acc(grads, a) {
                    let x = self.value(a).data();
                    ga.iter_mut().zip(x).for_each(|(o, xv)| *o += 2.0 * xv * g[0]);
                }
            }
            &Op::Reshape(a) => {
                if let Some(ga) = self.acc(grads, a) {
                    add_into(ga, g);
                }
            }
            &Op::SliceRows { x, start } => {
                if let Some(gx) = self.acc(grads, x) {
                    let n = node.value.shape()[1];
                    add_into(&mut gx[start * n..start * n + g.len()], g);
                }
            }
            &Op::SliceCols { x, start } => {
                let n = self.value(x).shape()[1];
                if let Some(gx) = self.acc(grads, x) {
                    let len = node.value.shape()[1];
                    for (r, gr) in g.chunks(len).enumerate() {
                        add_into(&mut gx[r * n + start..r * n + start + len], gr);
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    if let Some(gp) = self.acc(grads, p) {
                        add_into(gp, &g[offset..offset + len]);
                    }
                    offset += len;
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.value.shape()[1];
                let mut col = 0;
                for &p in parts {
                    let c = self.value(p).shape()[1];
                    if let Some(gp) = self.acc(grads, p) {
                        for (r, gr) in gp.chunks_mut(c).enumerate() {
                            add_into(gr, &g[r * total + col..r * total + col + c]);
                        }
                    }
                    col += c;
                }
            }
            Op::GatherRows { x, idx } => {
                let n = node.value.shape()[1];
                if let Some(gx) = self.acc(grads, *x) {
                    for (r, &i) in idx.iter().enumerate() {
                        add_into(&mut gx[i * n..(i + 1) * n], &g[r * n..(r + 1) * n]);
                    }
                }
            }
            &Op::RepeatRows(a) => {
                if let Some(ga) = self.acc(grads, a) {
                    let n = ga.len();
                    for row in g.chunks(n) {
                        add_into(ga, row);
                    }
                }
            }
            Op::SoftmaxCrossEntropy { logits, labels, probs } => {
                if let Some(gl) = self.acc(grads, *logits) {
                    let b = labels.len();
                    let c = probs.len() / b;
                    let s = g[0] / b as f64;
                    for (r, &l) in labels.iter().enumerate() {
                        for j in 0..c {
                            let onehot = if j == l { 1.0 } else { 0.0 };
                            gl[r * c + j] += s * (probs[r * c + j] - onehot);
                        }
                    }
                }
            }
            Op::SigmoidBce { logits, targets } => {
                if let Some(gl) = self.acc(grads, *logits) {
                    let x = self.value(*logits).data();
                    let s = g[0] / x.len() as f64;
                    for ((o, &z), &t) in gl.iter_mut().zip(x).zip(targets) {
                        let sig = 1.0 / (1.0 + (-z).exp());
                        *o += s * (sig - t);
                    }
                }
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Result of a reverse sweep.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, or `None` when no gradient
    /// reached it (not tracked, or not upstream of the loss).
    pub fn get(&self, tape: &Tape, v: Var) -> Option<Tensor> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor::new(tape.shape(v).to_vec(), g.clone()).expect("gradient shape"))
    }

    /// Same as [`get`](Self::get) with missing gradients reported as zeros.
    pub fn get_or_zeros(&self, tape: &Tape, v: Var) -> Tensor {
        self.get(tape, v).unwrap_or_else(|| Tensor::zeros(tape.shape(v)))
    }

    /// Collects gradients for every parameter of `store`, in store order.
    /// Parameters not bound on the tape get zero gradients.
    pub fn for_store(&self, tape: &Tape, store: &ParamStore) -> ParamStore {
        let mut out = ParamStore::new();
        for (name, t) in store.iter() {
            let g = match tape.params.get(name) {
                Some(&v) => self.get_or_zeros(tape, v),
                None => Tensor::zeros(t.shape()),
            };
            out.insert(name, g);
        }
        out
    }
}
