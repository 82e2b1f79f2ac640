use super::tensor::{matmul_nt, matmul_raw, matmul_tn, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Pointwise nonlinearities with closed-form derivatives.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Unary {
    Tanh,
    Sin,
    Relu,
    LeakyRelu(f64),
    /// `scale * x + shift` with constant coefficients.
    ScaleShift(f64, f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Binary(Binary, Var, Var),
    Unary(Unary, Var),
    AddBias(Var, Var),
    RowScale(Var, Var),
    PairSum(Var, Var),
    SoftmaxMasked(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        normed: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Conv1d {
        x: Var,
        kernels: Var,
        bias: Var,
    },
    MeanRows(Var),
    Concat(Vec<Var>),
    Reshape(Var),
    SumAll(Var),
    MeanAll(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Records every operation of a forward pass so that [`Tape::backward`]
/// can replay them in reverse.
///
/// Node ids are handed out in creation order, so every input of a node has
/// a smaller id than the node itself.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `var`, or `None` if the loss
    /// does not depend on it.
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    /// Like [`get`](Self::get) but returns zeros shaped like `like` when
    /// the variable did not contribute to the loss.
    pub fn get_or_zeros(&self, var: Var, like: &Tensor) -> Tensor {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(like.shape()))
    }
}

fn broadcast_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<Vec<usize>> {
    if a.shape() == b.shape() || b.is_scalar() {
        Ok(a.shape().to_vec())
    } else if a.is_scalar() {
        Ok(b.shape().to_vec())
    } else {
        Err(Error::shape(op, a.shape(), b.shape()))
    }
}

impl Unary {
    fn apply(self, x: f64) -> f64 {
        match self {
            Unary::Tanh => x.tanh(),
            Unary::Sin => x.sin(),
            Unary::Relu => x.max(0.0),
            Unary::LeakyRelu(slope) => {
                if x > 0.0 {
                    x
                } else {
                    slope * x
                }
            }
            Unary::ScaleShift(s, c) => s * x + c,
        }
    }

    /// Derivative given the input `x` and output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Tanh => 1.0 - y * y,
            Unary::Sin => x.cos(),
            Unary::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Unary::LeakyRelu(slope) => {
                if x > 0.0 {
                    1.0
                } else {
                    slope
                }
            }
            Unary::ScaleShift(s, _) => s,
        }
    }
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

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, var: Var) -> bool {
        self.nodes[var.0].needs_grad
    }

    /// A trainable leaf; gradients flow into it.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A constant leaf; no gradient is tracked.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k) = av.dims2()?;
        let (k2, n) = bv.dims2()?;
        if k != k2 {
            return Err(Error::shape("matmul", av.shape(), bv.shape()));
        }
        let out = Tensor::matrix(m, n, matmul_raw(av.data(), bv.data(), m, k, n))?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::MatMul(a, b), ng))
    }

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let name = match kind {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
        };
        let (av, bv) = (self.value(a), self.value(b));
        let shape = broadcast_shape(name, av, bv)?;
        let len: usize = shape.iter().product();
        let pick = |t: &Tensor, i: usize| if t.len() == 1 { t.data()[0] } else { t.data()[i] };
        let data = (0..len)
            .map(|i| {
                let (x, y) = (pick(av, i), pick(bv, i));
                match kind {
                    Binary::Add => x + y,
                    Binary::Sub => x - y,
                    Binary::Mul => x * y,
                }
            })
            .collect();
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(shape, data)?, Op::Binary(kind, a, b), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn unary(&mut self, kind: Unary, x: Var) -> Var {
        let out = self.value(x).map(|v| kind.apply(v));
        let ng = self.needs(x);
        self.push(out, Op::Unary(kind, x), ng)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(Unary::Tanh, x)
    }

    pub fn sin(&mut self, x: Var) -> Var {
        self.unary(Unary::Sin, x)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(Unary::Relu, x)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        self.unary(Unary::LeakyRelu(slope), x)
    }

    pub fn scale_shift(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        self.unary(Unary::ScaleShift(scale, shift), x)
    }

    pub fn scale(&mut self, x: Var, scale: f64) -> Var {
        self.scale_shift(x, scale, 0.0)
    }

    /// `a + c·b`, the axpy step used by explicit integrators.
    pub fn axpy(&mut self, a: Var, c: f64, b: Var) -> Result<Var> {
        let scaled = self.scale(b, c);
        self.add(a, scaled)
    }

    /// Adds the length-`n` vector `bias` to every row of `x: [m × n]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        let (m, n) = xv.dims2()?;
        if bv.len() != n {
            return Err(Error::shape("add_bias", xv.shape(), bv.shape()));
        }
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(n) {
            for (o, b) in row.iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        let out = Tensor::matrix(m, n, data)?;
        debug_assert_eq!(out.shape()[0], m);
        let ng = self.needs(x) || self.needs(bias);
        Ok(self.push(out, Op::AddBias(x, bias), ng))
    }

    /// Multiplies row `i` of `x: [m × n]` by `scale[i]`.
    pub fn row_scale(&mut self, x: Var, scale: Var) -> Result<Var> {
        let (xv, sv) = (self.value(x), self.value(scale));
        let (m, n) = xv.dims2()?;
        if sv.len() != m {
            return Err(Error::shape("row_scale", xv.shape(), sv.shape()));
        }
        let mut data = xv.data().to_vec();
        for (row, s) in data.chunks_mut(n).zip(sv.data()) {
            for o in row.iter_mut() {
                *o *= s;
            }
        }
        let out = Tensor::matrix(m, n, data)?;
        let ng = self.needs(x) || self.needs(scale);
        Ok(self.push(out, Op::RowScale(x, scale), ng))
    }

    /// Outer sum: `out[i][j] = a[i] + b[j]`.
    pub fn pair_sum(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, n) = (av.len(), bv.len());
        let mut data = Vec::with_capacity(m * n);
        for &x in av.data() {
            data.extend(bv.data().iter().map(|&y| x + y));
        }
        let out = Tensor::matrix(m, n, data)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::PairSum(a, b), ng))
    }

    /// Row-wise softmax over the positions where `mask > 0`; masked
    /// positions come out as exactly zero.
    pub fn softmax_masked(&mut self, scores: Var, mask: &Tensor) -> Result<Var> {
        let sv = self.value(scores);
        let (m, n) = sv.dims2()?;
        if mask.shape() != sv.shape() {
            return Err(Error::shape("softmax_masked", sv.shape(), mask.shape()));
        }
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            let row = &sv.data()[i * n..(i + 1) * n];
            let mrow = &mask.data()[i * n..(i + 1) * n];
            let max = row
                .iter()
                .zip(mrow)
                .filter(|(_, &w)| w > 0.0)
                .map(|(&s, _)| s)
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(Error::DegenerateRow(i));
            }
            let out = &mut data[i * n..(i + 1) * n];
            let mut total = 0.0;
            for j in 0..n {
                if mrow[j] > 0.0 {
                    out[j] = (row[j] - max).exp();
                    total += out[j];
                }
            }
            for o in out.iter_mut() {
                *o /= total;
            }
        }
        let out = Tensor::matrix(m, n, data)?;
        let ng = self.needs(scores);
        Ok(self.push(out, Op::SoftmaxMasked(scores), ng))
    }

    /// Per-row layer normalisation with learned gain and bias (length `n`).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (xv, gv, bv) = (self.value(x), self.value(gain), self.value(bias));
        let (m, n) = xv.dims2()?;
        if gv.len() != n || bv.len() != n {
            return Err(Error::shape("layer_norm", xv.shape(), gv.shape()));
        }
        let mut normed = vec![0.0; m * n];
        let mut inv_std = vec![0.0; m];
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            let row = &xv.data()[i * n..(i + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
            let r = 1.0 / (var + eps).sqrt();
            inv_std[i] = r;
            for j in 0..n {
                let z = (row[j] - mean) * r;
                normed[i * n + j] = z;
                data[i * n + j] = gv.data()[j] * z + bv.data()[j];
            }
        }
        let out = Tensor::matrix(m, n, data)?;
        let ng = self.needs(x) || self.needs(gain) || self.needs(bias);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                normed,
                inv_std,
            },
            ng,
        ))
    }

    /// Width-5 "same" cross-correlation of a single-channel signal of
    /// length `L` against `F` filters, giving `[L × F]`.
    ///
    /// `out[t][f] = bias[f] + Σ_j kernels[j][f] · x[t + j − 2]`, with
    /// out-of-range samples read as zero. Kernels are not flipped.
    pub fn conv1d_same(&mut self, x: Var, kernels: Var, bias: Var) -> Result<Var> {
        let (xv, kv, bv) = (self.value(x), self.value(kernels), self.value(bias));
        let len = xv.len();
        if len == 0 {
            return Err(Error::EmptyInput("conv1d_same"));
        }
        let (width, filters) = kv.dims2()?;
        if width != CONV_WIDTH || bv.len() != filters {
            return Err(Error::shape("conv1d_same", kv.shape(), bv.shape()));
        }
        let (xs, ks) = (xv.data(), kv.data());
        let mut data = vec![0.0; len * filters];
        for t in 0..len {
            let out = &mut data[t * filters..(t + 1) * filters];
            out.copy_from_slice(bv.data());
            for j in 0..CONV_WIDTH {
                let Some(src) = (t + j).checked_sub(CONV_HALF).filter(|&s| s < len) else {
                    continue;
                };
                let xval = xs[src];
                for (f, o) in out.iter_mut().enumerate() {
                    *o += ks[j * filters + f] * xval;
                }
            }
        }
        let out = Tensor::matrix(len, filters, data)?;
        let ng = self.needs(x) || self.needs(kernels) || self.needs(bias);
        Ok(self.push(out, Op::Conv1d { x, kernels, bias }, ng))
    }

    /// Mean over the rows of `x: [m × n]`, giving `[1 × n]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (m, n) = xv.dims2()?;
        if m == 0 {
            return Err(Error::EmptyInput("mean_rows"));
        }
        let mut data = vec![0.0; n];
        for row in xv.data().chunks(n) {
            for (o, v) in data.iter_mut().zip(row) {
                *o += v;
            }
        }
        for o in data.iter_mut() {
            *o /= m as f64;
        }
        let ng = self.needs(x);
        Ok(self.push(Tensor::row(data), Op::MeanRows(x), ng))
    }

    /// Concatenates the flattened inputs into a single `[1 × Σn]` row.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::EmptyInput("concat"));
        }
        let mut data = Vec::new();
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(Tensor::row(data), Op::Concat(parts.to_vec()), ng))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        let ng = self.needs(x);
        Ok(self.push(out, Op::Reshape(x), ng))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        let ng = self.needs(x);
        self.push(out, Op::SumAll(x), ng)
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let out = Tensor::scalar(v.sum() / v.len() as f64);
        let ng = self.needs(x);
        self.push(out, Op::MeanAll(x), ng)
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, found shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(Tensor::filled(lv.shape(), 1.0));

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], var: Var, delta: Tensor) {
        if !self.needs(var) {
            return;
        }
        match &mut grads[var.0] {
            Some(existing) => existing.add_assign(&delta),
            slot @ None => *slot = Some(delta),
        }
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = av.dims2()?;
                let n = bv.dims2()?.1;
                if self.needs(*a) {
                    let da = matmul_nt(gd, bv.data(), m, n, k);
                    self.accumulate(grads, *a, Tensor::new(av.shape().to_vec(), da)?);
                }
                if self.needs(*b) {
                    let db = matmul_tn(av.data(), gd, m, k, n);
                    self.accumulate(grads, *b, Tensor::new(bv.shape().to_vec(), db)?);
                }
            }
            Op::Binary(kind, a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let pick = |t: &Tensor, i: usize| if t.len() == 1 { t.data()[0] } else { t.data()[i] };
                let reduce = |t: &Tensor, full: Vec<f64>| -> Result<Tensor> {
                    if t.len() == 1 && full.len() != 1 {
                        Tensor::new(t.shape().to_vec(), vec![full.iter().sum()])
                    } else {
                        Tensor::new(t.shape().to_vec(), full)
                    }
                };
                if self.needs(*a) {
                    let full: Vec<f64> = match kind {
                        Binary::Add | Binary::Sub => gd.to_vec(),
                        Binary::Mul => (0..gd.len()).map(|i| gd[i] * pick(bv, i)).collect(),
                    };
                    self.accumulate(grads, *a, reduce(av, full)?);
                }
                if self.needs(*b) {
                    let full: Vec<f64> = match kind {
                        Binary::Add => gd.to_vec(),
                        Binary::Sub => gd.iter().map(|v| -v).collect(),
                        Binary::Mul => (0..gd.len()).map(|i| gd[i] * pick(av, i)).collect(),
                    };
                    self.accumulate(grads, *b, reduce(bv, full)?);
                }
            }
            Op::Unary(kind, x) => {
                let xv = self.value(*x);
                let data = xv
                    .data()
                    .iter()
                    .zip(node.value.data())
                    .zip(gd)
                    .map(|((&xi, &yi), &gi)| gi * kind.derivative(xi, yi))
                    .collect();
                self.accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), data)?);
            }
            Op::AddBias(x, bias) => {
                self.accumulate(grads, *x, g.clone());
                let n = self.value(*bias).len();
                let mut db = vec![0.0; n];
                for row in gd.chunks(n) {
                    for (o, v) in db.iter_mut().zip(row) {
                        *o += v;
                    }
                }
                let shape = self.value(*bias).shape().to_vec();
                self.accumulate(grads, *bias, Tensor::new(shape, db)?);
            }
            Op::RowScale(x, scale) => {
                let (xv, sv) = (self.value(*x), self.value(*scale));
                let n = xv.dims2()?.1;
                if self.needs(*x) {
                    let mut dx = gd.to_vec();
                    for (row, s) in dx.chunks_mut(n).zip(sv.data()) {
                        for o in row.iter_mut() {
                            *o *= s;
                        }
                    }
                    self.accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), dx)?);
                }
                if self.needs(*scale) {
                    let ds = gd
                        .chunks(n)
                        .zip(xv.data().chunks(n))
                        .map(|(gr, xr)| gr.iter().zip(xr).map(|(a, b)| a * b).sum())
                        .collect();
                    self.accumulate(grads, *scale, Tensor::new(sv.shape().to_vec(), ds)?);
                }
            }
            Op::PairSum(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let n = bv.len();
                let da = gd.chunks(n).map(|r| r.iter().sum()).collect();
                let mut db = vec![0.0; n];
                for row in gd.chunks(n) {
                    for (o, v) in db.iter_mut().zip(row) {
                        *o += v;
                    }
                }
                self.accumulate(grads, *a, Tensor::new(av.shape().to_vec(), da)?);
                self.accumulate(grads, *b, Tensor::new(bv.shape().to_vec(), db)?);
            }
            Op::SoftmaxMasked(s) => {
                let alpha = node.value.data();
                let n = node.value.dims2()?.1;
                let mut ds = vec![0.0; alpha.len()];
                for ((dr, ar), gr) in ds.chunks_mut(n).zip(alpha.chunks(n)).zip(gd.chunks(n)) {
                    let dot: f64 = ar.iter().zip(gr).map(|(a, g)| a * g).sum();
                    for j in 0..n {
                        dr[j] = ar[j] * (gr[j] - dot);
                    }
                }
                let shape = self.value(*s).shape().to_vec();
                self.accumulate(grads, *s, Tensor::new(shape, ds)?);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                normed,
                inv_std,
            } => {
                let xv = self.value(*x);
                let (m, n) = xv.dims2()?;
                let gv = self.value(*gain).data();
                let mut dx = vec![0.0; m * n];
                let mut dgain = vec![0.0; n];
                let mut dbias = vec![0.0; n];
                for i in 0..m {
                    let gr = &gd[i * n..(i + 1) * n];
                    let zr = &normed[i * n..(i + 1) * n];
                    let mut mean_dz = 0.0;
                    let mut mean_dz_z = 0.0;
                    for j in 0..n {
                        let dz = gr[j] * gv[j];
                        mean_dz += dz;
                        mean_dz_z += dz * zr[j];
                        dgain[j] += gr[j] * zr[j];
                        dbias[j] += gr[j];
                    }
                    mean_dz /= n as f64;
                    mean_dz_z /= n as f64;
                    for j in 0..n {
                        let dz = gr[j] * gv[j];
                        dx[i * n + j] = inv_std[i] * (dz - mean_dz - zr[j] * mean_dz_z);
                    }
                }
                self.accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), dx)?);
                let gshape = self.value(*gain).shape().to_vec();
                let bshape = self.value(*bias).shape().to_vec();
                self.accumulate(grads, *gain, Tensor::new(gshape, dgain)?);
                self.accumulate(grads, *bias, Tensor::new(bshape, dbias)?);
            }
            Op::Conv1d { x, kernels, bias } => {
                let (xv, kv) = (self.value(*x), self.value(*kernels));
                let len = xv.len();
                let filters = kv.dims2()?.1;
                let (xs, ks) = (xv.data(), kv.data());
                let mut dx = vec![0.0; len];
                let mut dk = vec![0.0; CONV_WIDTH * filters];
                let mut db = vec![0.0; filters];
                for t in 0..len {
                    let gr = &gd[t * filters..(t + 1) * filters];
                    for (o, v) in db.iter_mut().zip(gr) {
                        *o += v;
                    }
                    for j in 0..CONV_WIDTH {
                        let Some(src) = (t + j).checked_sub(CONV_HALF).filter(|&s| s < len) else {
                            continue;
                        };
                        for f in 0..filters {
                            dx[src] += ks[j * filters + f] * gr[f];
                            dk[j * filters + f] += xs[src] * gr[f];
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), dx)?);
                self.accumulate(grads, *kernels, Tensor::new(kv.shape().to_vec(), dk)?);
                let bshape = self.value(*bias).shape().to_vec();
                self.accumulate(grads, *bias, Tensor::new(bshape, db)?);
            }
            Op::MeanRows(x) => {
                let xv = self.value(*x);
                let m = xv.dims2()?.0;
                let scaled: Vec<f64> = gd.iter().map(|v| v / m as f64).collect();
                let mut dx = Vec::with_capacity(xv.len());
                for _ in 0..m {
                    dx.extend_from_slice(&scaled);
                }
                self.accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), dx)?);
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let pv = self.value(p);
                    let slice = gd[offset..offset + pv.len()].to_vec();
                    offset += pv.len();
                    self.accumulate(grads, p, Tensor::new(pv.shape().to_vec(), slice)?);
                }
            }
            Op::Reshape(x) => {
                let shape = self.value(*x).shape().to_vec();
                self.accumulate(grads, *x, Tensor::new(shape, gd.to_vec())?);
            }
            Op::SumAll(x) => {
                let xv = self.value(*x);
                self.accumulate(grads, *x, Tensor::filled(xv.shape(), gd[0]));
            }
            Op::MeanAll(x) => {
                let xv = self.value(*x);
                let scale = gd[0] / xv.len() as f64;
                self.accumulate(grads, *x, Tensor::filled(xv.shape(), scale));
            }
        }
        Ok(())
    }
}

/// Convolution kernel width used by the wavelet-style path.
pub const CONV_WIDTH: usize = 5;
const CONV_HALF: usize = CONV_WIDTH / 2;
