use std::collections::HashMap;
use std::rc::Rc;

use super::{broadcast_index_map, broadcast_shape, Tensor};
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Boundaries of variable-length sequences packed along axis 0.
///
/// Temporal operators (convolution, cumulative sums, attention masks) never
/// mix rows from different segments, so a packed batch behaves exactly like
/// its utterances processed one at a time.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SeqLayout {
    lens: Vec<usize>,
    offsets: Vec<usize>,
}

impl SeqLayout {
    pub fn single(len: usize) -> Self {
        Self::from_lens(vec![len])
    }

    pub fn from_lens(lens: Vec<usize>) -> Self {
        let mut offsets = Vec::with_capacity(lens.len());
        let mut acc = 0;
        for &l in &lens {
            offsets.push(acc);
            acc += l;
        }
        Self { lens, offsets }
    }

    pub fn lens(&self) -> &[usize] {
        &self.lens
    }

    pub fn total(&self) -> usize {
        self.lens.iter().sum()
    }

    pub fn num_segments(&self) -> usize {
        self.lens.len()
    }

    /// `(start, len)` of every segment.
    pub fn segments(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.offsets.iter().copied().zip(self.lens.iter().copied())
    }

    /// Segment index and in-segment position of every packed row.
    pub fn positions(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(self.total());
        for (s, &len) in self.lens.iter().enumerate() {
            out.extend((0..len).map(|p| (s, p)));
        }
        out
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Powf(Var, f64),
    MatMul(Var, Var),
    Transpose(Var),
    Conv1d {
        x: Var,
        w: Var,
        groups: usize,
        pad_left: usize,
        layout: Rc<SeqLayout>,
    },
    Softmax(Var),
    LogSoftmax(Var),
    Exp(Var),
    Log(Var),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Swish(Var),
    SumAll(Var),
    MeanAll(Var),
    SumAxis(Var, usize),
    MeanAxis(Var, usize),
    CumSum(Var, Rc<SeqLayout>),
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Concat(Vec<Var>, usize),
    IndexRows(Var, Rc<Vec<usize>>),
    Reshape(Var),
    StopGradient,
    /// Scalar-valued function whose partial derivatives were computed alongside its value.
    ScalarFn(Vec<(Var, Tensor)>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Define-by-run computation record. Nodes are appended in topological
/// order; [`Graph::backward`] walks them in reverse.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<usize, Var>,
}

/// Gradients of a scalar with respect to every node of a graph.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
    params: Vec<(usize, Var)>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`; zero when `v` is not on any path to the loss.
    pub fn get(&self, v: Var) -> Tensor {
        self.grads[v.0]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(self.shapes[v.0].clone()))
    }

    /// Gradients of every registered parameter, keyed by parameter index, in registration order.
    pub fn params(&self) -> Vec<(usize, Tensor)> {
        self.params
            .iter()
            .map(|&(key, var)| (key, self.get(var)))
            .collect()
    }
}

fn zip_map(a: &Tensor, b: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    if a.shape() == b.shape() {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        return Tensor::new(a.shape().to_vec(), data);
    }
    let shape = broadcast_shape(op, a.shape(), b.shape())?;
    let ma = broadcast_index_map(a.shape(), &shape);
    let mb = broadcast_index_map(b.shape(), &shape);
    let data = ma
        .iter()
        .zip(&mb)
        .map(|(&i, &j)| f(a.data()[i], b.data()[j]))
        .collect();
    Tensor::new(shape, data)
}

/// Sums a gradient of the broadcast shape back down to `shape`.
fn unbroadcast(grad: &Tensor, shape: &[usize]) -> Tensor {
    if grad.shape() == shape {
        return grad.clone();
    }
    let map = broadcast_index_map(shape, grad.shape());
    let mut out = Tensor::zeros(shape.to_vec());
    for (g, &i) in grad.data().iter().zip(&map) {
        out.data_mut()[i] += g;
    }
    out
}

/// `(outer, n, inner)` decomposition of `shape` around `axis`.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

impl Graph {
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

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Constant input; gradients are tracked but never flow further.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Leaf that requires a gradient.
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Registers a trainable parameter under `key`. Registering the same key
    /// twice returns the same node so that gradients accumulate.
    pub fn param(&mut self, key: usize, value: impl FnOnce() -> Tensor) -> Var {
        if let Some(&v) = self.params.get(&key) {
            return v;
        }
        let v = self.variable(value());
        self.params.insert(key, v);
        v
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let value = self.value(x).map(f);
        let rg = self.rg(&[x]);
        self.push(value, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = zip_map(self.value(a), self.value(b), "add", |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = zip_map(self.value(a), self.value(b), "sub", |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = zip_map(self.value(a), self.value(b), "mul", |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = zip_map(self.value(a), self.value(b), "div", |x, y| x / y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Div(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, Op::Scale(x, c), |v| v * c)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, Op::AddScalar(x), |v| v + c)
    }

    pub fn powf(&mut self, x: Var, p: f64) -> Var {
        self.unary(x, Op::Powf(x, p), |v| v.powf(p))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Op::Exp(x), f64::exp)
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, Op::Log(x), f64::ln)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Op::Tanh(x), f64::tanh)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sigmoid(x), sigmoid)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Relu(x), |v| v.max(0.0))
    }

    /// `x * sigmoid(x)`.
    pub fn swish(&mut self, x: Var) -> Var {
        self.unary(x, Op::Swish(x), |v| v * sigmoid(v))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.rank() != 2 || vb.rank() != 2 || va.shape()[1] != vb.shape()[0] {
            return Err(Error::shape("matmul", va.shape(), vb.shape()));
        }
        let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
        let value = Tensor::matrix(m, n, matmul_raw(va.data(), vb.data(), m, k, n))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        if v.rank() != 2 {
            return Err(Error::arg("transpose", format!("expected rank 2, got {:?}", v.shape())));
        }
        let value = transpose_raw(v);
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Transpose(x), rg))
    }

    /// Temporal convolution over packed sequences `x: [N, C_in]` with kernel
    /// `w: [C_out, C_in / groups, k]`. Output row `t` reads input rows
    /// `t - pad_left .. t - pad_left + k` of its own segment; rows outside
    /// the segment are zero.
    pub fn conv1d(
        &mut self,
        x: Var,
        w: Var,
        groups: usize,
        pad_left: usize,
        layout: Rc<SeqLayout>,
    ) -> Result<Var> {
        let (vx, vw) = (self.value(x), self.value(w));
        if vx.rank() != 2 || vw.rank() != 3 || groups == 0 {
            return Err(Error::shape("conv1d", vx.shape(), vw.shape()));
        }
        let (n, c_in) = (vx.shape()[0], vx.shape()[1]);
        let (c_out, cpg, k) = (vw.shape()[0], vw.shape()[1], vw.shape()[2]);
        if c_in % groups != 0 || c_out % groups != 0 || cpg != c_in / groups {
            return Err(Error::shape("conv1d", vx.shape(), vw.shape()));
        }
        if layout.total() != n {
            return Err(Error::shape("conv1d", vx.shape(), &[layout.total()]));
        }
        let opg = c_out / groups;
        let (xd, wd) = (vx.data(), vw.data());
        let mut out = vec![0.0; n * c_out];
        for (start, len) in layout.segments() {
            for t in 0..len {
                let orow = &mut out[(start + t) * c_out..(start + t + 1) * c_out];
                for j in 0..k {
                    let src = t as isize + j as isize - pad_left as isize;
                    if src < 0 || src >= len as isize {
                        continue;
                    }
                    let irow = &xd[(start + src as usize) * c_in..(start + src as usize + 1) * c_in];
                    for co in 0..c_out {
                        let g = co / opg;
                        let mut acc = 0.0;
                        for cl in 0..cpg {
                            acc += wd[(co * cpg + cl) * k + j] * irow[g * cpg + cl];
                        }
                        orow[co] += acc;
                    }
                }
            }
        }
        let value = Tensor::matrix(n, c_out, out)?;
        let rg = self.rg(&[x, w]);
        Ok(self.push(
            value,
            Op::Conv1d {
                x,
                w,
                groups,
                pad_left,
                layout,
            },
            rg,
        ))
    }

    /// Softmax over the last axis. `mask`, when given, has one entry per
    /// element; masked-out entries get probability exactly zero. Every row
    /// must keep at least one entry.
    pub fn softmax(&mut self, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        let v = self.value(x);
        if let Some(m) = mask {
            if m.len() != v.numel() {
                return Err(Error::shape("softmax", v.shape(), &[m.len()]));
            }
        }
        let c = v.cols();
        let mut out = vec![0.0; v.numel()];
        for (r, (row, orow)) in v.data().chunks(c).zip(out.chunks_mut(c)).enumerate() {
            let keep = |i: usize| mask.is_none_or(|m| m[r * c + i]);
            let max = (0..c).filter(|&i| keep(i)).map(|i| row[i]).fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(Error::arg("softmax", format!("row {r} is fully masked")));
            }
            let mut sum = 0.0;
            for i in (0..c).filter(|&i| keep(i)) {
                orow[i] = (row[i] - max).exp();
                sum += orow[i];
            }
            for o in orow.iter_mut() {
                *o /= sum;
            }
        }
        let value = Tensor::new(v.shape().to_vec(), out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Softmax(x), rg))
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let c = v.cols();
        let mut out = Vec::with_capacity(v.numel());
        for row in v.data().chunks(c) {
            let lse = logsumexp(row);
            out.extend(row.iter().map(|&z| z - lse));
        }
        let value = Tensor::new(v.shape().to_vec(), out).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(value, Op::LogSoftmax(x), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(&[x]);
        self.push(value, Op::SumAll(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let value = Tensor::scalar(v.sum() / v.numel() as f64);
        let rg = self.rg(&[x]);
        self.push(value, Op::MeanAll(x), rg)
    }

    fn reduce_axis(&mut self, x: Var, axis: usize, mean: bool) -> Result<Var> {
        let v = self.value(x);
        if axis >= v.rank() {
            return Err(Error::arg("reduce", format!("axis {axis} out of range for {:?}", v.shape())));
        }
        let (outer, n, inner) = axis_split(v.shape(), axis);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..n {
                for j in 0..inner {
                    out[o * inner + j] += v.data()[(o * n + i) * inner + j];
                }
            }
        }
        if mean {
            out.iter_mut().for_each(|e| *e /= n as f64);
        }
        let mut shape = v.shape().to_vec();
        shape[axis] = 1;
        let value = Tensor::new(shape, out)?;
        let rg = self.rg(&[x]);
        let op = if mean { Op::MeanAxis(x, axis) } else { Op::SumAxis(x, axis) };
        Ok(self.push(value, op, rg))
    }

    /// Sum over `axis`, kept as a size-1 dimension.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(x, axis, false)
    }

    /// Mean over `axis`, kept as a size-1 dimension.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(x, axis, true)
    }

    /// Prefix sum along axis 0, restarting at every segment of `layout`.
    pub fn cumsum(&mut self, x: Var, layout: Rc<SeqLayout>) -> Result<Var> {
        let v = self.value(x);
        if v.rows() != layout.total() {
            return Err(Error::shape("cumulative_sum", v.shape(), &[layout.total()]));
        }
        let c = v.numel() / v.rows().max(1);
        let mut out = v.data().to_vec();
        for (start, len) in layout.segments() {
            for t in 1..len {
                for j in 0..c {
                    out[(start + t) * c + j] += out[(start + t - 1) * c + j];
                }
            }
        }
        let value = Tensor::new(v.shape().to_vec(), out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::CumSum(x, layout), rg))
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let v = self.value(x);
        if axis >= v.rank() || start > end || end > v.shape()[axis] {
            return Err(Error::arg(
                "slice",
                format!("range {start}..{end} on axis {axis} of {:?}", v.shape()),
            ));
        }
        let (outer, n, inner) = axis_split(v.shape(), axis);
        let width = end - start;
        let mut out = Vec::with_capacity(outer * width * inner);
        for o in 0..outer {
            out.extend_from_slice(&v.data()[(o * n + start) * inner..(o * n + end) * inner]);
        }
        let mut shape = v.shape().to_vec();
        shape[axis] = width;
        let value = Tensor::new(shape, out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Slice { x, axis, start }, rg))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs
            .first()
            .ok_or_else(|| Error::arg("concat", "no inputs"))?;
        let base = self.value(*first).shape().to_vec();
        if axis >= base.len() {
            return Err(Error::arg("concat", format!("axis {axis} out of range for {base:?}")));
        }
        let mut total = 0;
        for &x in xs {
            let s = self.shape(x);
            let same = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !same {
                return Err(Error::shape("concat", &base, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_split(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &x in xs {
                let v = self.value(x);
                let n = v.shape()[axis];
                out.extend_from_slice(&v.data()[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let value = Tensor::new(shape, out)?;
        let rg = self.rg(xs);
        Ok(self.push(value, Op::Concat(xs.to_vec(), axis), rg))
    }

    /// Gathers rows (axis 0) by index; indices may repeat.
    pub fn index_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let v = self.value(x);
        let rows = v.rows();
        let c = v.numel() / rows.max(1);
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= rows {
                return Err(Error::arg("index_rows", format!("row {i} out of range for {:?}", v.shape())));
            }
            out.extend_from_slice(&v.data()[i * c..(i + 1) * c]);
        }
        let mut shape = v.shape().to_vec();
        shape[0] = idx.len();
        let value = Tensor::new(shape, out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::IndexRows(x, Rc::new(idx.to_vec())), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape.to_vec())?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    /// Identity in the forward pass; blocks every gradient in the backward pass.
    pub fn stop_gradient(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.push(value, Op::StopGradient, false)
    }

    /// Records a scalar computed outside the graph together with its partial
    /// derivatives with respect to `inputs`.
    pub fn scalar_fn(&mut self, value: f64, partials: Vec<(Var, Tensor)>) -> Result<Var> {
        for (v, p) in &partials {
            if p.shape() != self.shape(*v) {
                return Err(Error::shape("scalar_fn", self.shape(*v), p.shape()));
            }
        }
        let rg = partials.iter().any(|(v, _)| self.nodes[v.0].requires_grad);
        Ok(self.push(Tensor::scalar(value), Op::ScalarFn(partials), rg))
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::arg("backward", format!("loss must be scalar, got shape {:?}", lv.shape())));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(lv.shape().to_vec(), 1.0));

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[id] = Some(g);
        }

        let mut params: Vec<(usize, Var)> = self.params.iter().map(|(&k, &v)| (k, v)).collect();
        params.sort_by_key(|&(_, v)| v.0);
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
            params,
        })
    }

    fn backprop_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let mut acc = |v: Var, t: Tensor| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&t),
                slot @ None => *slot = Some(t),
            }
        };
        let out = &node.value;
        match &node.op {
            Op::Leaf | Op::StopGradient => {}
            Op::Add(a, b) => {
                acc(*a, unbroadcast(g, self.shape(*a)));
                acc(*b, unbroadcast(g, self.shape(*b)));
            }
            Op::Sub(a, b) => {
                acc(*a, unbroadcast(g, self.shape(*a)));
                acc(*b, unbroadcast(&g.map(|v| -v), self.shape(*b)));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.requires_grad(*a) {
                    let ga = zip_map(g, vb, "mul", |x, y| x * y).expect("forward shapes");
                    acc(*a, unbroadcast(&ga, va.shape()));
                }
                if self.requires_grad(*b) {
                    let gb = zip_map(g, va, "mul", |x, y| x * y).expect("forward shapes");
                    acc(*b, unbroadcast(&gb, vb.shape()));
                }
            }
            Op::Div(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.requires_grad(*a) {
                    let ga = zip_map(g, vb, "div", |x, y| x / y).expect("forward shapes");
                    acc(*a, unbroadcast(&ga, va.shape()));
                }
                if self.requires_grad(*b) {
                    // d(a/b)/db = -out / b
                    let t = zip_map(g, out, "div", |x, o| x * o).expect("forward shapes");
                    let gb = zip_map(&t, vb, "div", |x, y| -x / y).expect("forward shapes");
                    acc(*b, unbroadcast(&gb, vb.shape()));
                }
            }
            Op::Scale(x, c) => acc(*x, g.map(|v| v * c)),
            Op::AddScalar(x) => acc(*x, g.clone()),
            Op::Powf(x, p) => {
                let vx = self.value(*x);
                let data = g
                    .data()
                    .iter()
                    .zip(vx.data())
                    .map(|(&gi, &xi)| gi * p * xi.powf(p - 1.0))
                    .collect();
                acc(*x, Tensor::new(vx.shape().to_vec(), data).expect("same shape"));
            }
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
                if self.requires_grad(*a) {
                    let bt = transpose_raw(vb);
                    let ga = matmul_raw(g.data(), bt.data(), m, n, k);
                    acc(*a, Tensor::matrix(m, k, ga).expect("shape"));
                }
                if self.requires_grad(*b) {
                    let at = transpose_raw(va);
                    let gb = matmul_raw(at.data(), g.data(), k, m, n);
                    acc(*b, Tensor::matrix(k, n, gb).expect("shape"));
                }
            }
            Op::Transpose(x) => acc(*x, transpose_raw(g)),
            Op::Conv1d {
                x,
                w,
                groups,
                pad_left,
                layout,
            } => {
                let (vx, vw) = (self.value(*x), self.value(*w));
                let (c_in, c_out) = (vx.shape()[1], vw.shape()[0]);
                let (cpg, k) = (vw.shape()[1], vw.shape()[2]);
                let opg = c_out / groups;
                let mut gx = vec![0.0; vx.numel()];
                let mut gw = vec![0.0; vw.numel()];
                let (xd, wd, gd) = (vx.data(), vw.data(), g.data());
                for (start, len) in layout.segments() {
                    for t in 0..len {
                        for j in 0..k {
                            let src = t as isize + j as isize - *pad_left as isize;
                            if src < 0 || src >= len as isize {
                                continue;
                            }
                            let srow = start + src as usize;
                            for co in 0..c_out {
                                let go = gd[(start + t) * c_out + co];
                                if go == 0.0 {
                                    continue;
                                }
                                let grp = co / opg;
                                for cl in 0..cpg {
                                    let ci = grp * cpg + cl;
                                    let wi = (co * cpg + cl) * k + j;
                                    gx[srow * c_in + ci] += wd[wi] * go;
                                    gw[wi] += xd[srow * c_in + ci] * go;
                                }
                            }
                        }
                    }
                }
                acc(*x, Tensor::new(vx.shape().to_vec(), gx).expect("shape"));
                acc(*w, Tensor::new(vw.shape().to_vec(), gw).expect("shape"));
            }
            Op::Softmax(x) => {
                let c = out.cols();
                let mut gx = Vec::with_capacity(out.numel());
                for (yr, gr) in out.data().chunks(c).zip(g.data().chunks(c)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(y, gi)| y * gi).sum();
                    gx.extend(yr.iter().zip(gr).map(|(y, gi)| y * (gi - dot)));
                }
                acc(*x, Tensor::new(out.shape().to_vec(), gx).expect("shape"));
            }
            Op::LogSoftmax(x) => {
                let c = out.cols();
                let mut gx = Vec::with_capacity(out.numel());
                for (yr, gr) in out.data().chunks(c).zip(g.data().chunks(c)) {
                    let gsum: f64 = gr.iter().sum();
                    gx.extend(yr.iter().zip(gr).map(|(y, gi)| gi - y.exp() * gsum));
                }
                acc(*x, Tensor::new(out.shape().to_vec(), gx).expect("shape"));
            }
            Op::Exp(x) => acc(*x, zip_map(g, out, "exp", |gi, y| gi * y).expect("shape")),
            Op::Log(x) => acc(*x, zip_map(g, self.value(*x), "log", |gi, v| gi / v).expect("shape")),
            Op::Tanh(x) => acc(*x, zip_map(g, out, "tanh", |gi, y| gi * (1.0 - y * y)).expect("shape")),
            Op::Sigmoid(x) => acc(*x, zip_map(g, out, "sigmoid", |gi, y| gi * y * (1.0 - y)).expect("shape")),
            Op::Relu(x) => acc(
                *x,
                zip_map(g, self.value(*x), "relu", |gi, v| if v > 0.0 { gi } else { 0.0 }).expect("shape"),
            ),
            Op::Swish(x) => acc(
                *x,
                zip_map(g, self.value(*x), "swish", |gi, v| {
                    let s = sigmoid(v);
                    gi * (s + v * s * (1.0 - s))
                })
                .expect("shape"),
            ),
            Op::SumAll(x) => acc(*x, Tensor::full(self.shape(*x).to_vec(), g.item())),
            Op::MeanAll(x) => {
                let n = self.value(*x).numel() as f64;
                acc(*x, Tensor::full(self.shape(*x).to_vec(), g.item() / n));
            }
            Op::SumAxis(x, axis) | Op::MeanAxis(x, axis) => {
                let shape = self.shape(*x);
                let (outer, n, inner) = axis_split(shape, *axis);
                let scale = if matches!(node.op, Op::MeanAxis(..)) { 1.0 / n as f64 } else { 1.0 };
                let mut gx = vec![0.0; outer * n * inner];
                for o in 0..outer {
                    for i in 0..n {
                        for j in 0..inner {
                            gx[(o * n + i) * inner + j] = g.data()[o * inner + j] * scale;
                        }
                    }
                }
                acc(*x, Tensor::new(shape.to_vec(), gx).expect("shape"));
            }
            Op::CumSum(x, layout) => {
                // Reverse cumulative sum within each segment.
                let c = g.numel() / g.rows().max(1);
                let mut gx = g.data().to_vec();
                for (start, len) in layout.segments() {
                    for t in (0..len.saturating_sub(1)).rev() {
                        for j in 0..c {
                            gx[(start + t) * c + j] += gx[(start + t + 1) * c + j];
                        }
                    }
                }
                acc(*x, Tensor::new(g.shape().to_vec(), gx).expect("shape"));
            }
            Op::Slice { x, axis, start } => {
                let shape = self.shape(*x);
                let (outer, n, inner) = axis_split(shape, *axis);
                let width = g.shape()[*axis];
                let mut gx = vec![0.0; outer * n * inner];
                for o in 0..outer {
                    let dst = (o * n + start) * inner;
                    gx[dst..dst + width * inner]
                        .copy_from_slice(&g.data()[o * width * inner..(o + 1) * width * inner]);
                }
                acc(*x, Tensor::new(shape.to_vec(), gx).expect("shape"));
            }
            Op::Concat(xs, axis) => {
                let (outer, total, inner) = axis_split(g.shape(), *axis);
                let mut offset = 0;
                for &x in xs {
                    let shape = self.shape(x);
                    let n = shape[*axis];
                    let mut gx = Vec::with_capacity(outer * n * inner);
                    for o in 0..outer {
                        let src = (o * total + offset) * inner;
                        gx.extend_from_slice(&g.data()[src..src + n * inner]);
                    }
                    offset += n;
                    acc(x, Tensor::new(shape.to_vec(), gx).expect("shape"));
                }
            }
            Op::IndexRows(x, idx) => {
                let shape = self.shape(*x);
                let c = g.numel() / idx.len().max(1);
                let mut gx = vec![0.0; shape.iter().product()];
                for (r, &i) in idx.iter().enumerate() {
                    for j in 0..c {
                        gx[i * c + j] += g.data()[r * c + j];
                    }
                }
                acc(*x, Tensor::new(shape.to_vec(), gx).expect("shape"));
            }
            Op::Reshape(x) => {
                acc(*x, g.clone().reshape(self.shape(*x).to_vec()).expect("shape"));
            }
            Op::ScalarFn(partials) => {
                let s = g.item();
                for (v, p) in partials {
                    acc(*v, p.map(|d| d * s));
                }
            }
        }
    }
}

pub fn logsumexp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

fn transpose_raw(t: &Tensor) -> Tensor {
    let (r, c) = (t.shape()[0], t.shape()[1]);
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = t.data()[i * c + j];
        }
    }
    Tensor::matrix(c, r, out).expect("shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vec_of(g: &Graph, v: Var) -> Vec<f64> {
        g.value(v).data().to_vec()
    }

    #[test]
    fn add_elementwise() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::vector(vec![1.0, 2.0]));
        let b = g.constant(Tensor::vector(vec![3.0, 4.0]));
        let c = g.add(a, b).unwrap();
        assert_eq!(vec_of(&g, c), vec![4.0, 6.0]);
    }

    #[test]
    fn shape_mismatch_names_op_and_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(vec![2, 3]));
        let b = g.constant(Tensor::zeros(vec![4, 2]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("matmul") && err.contains("[2, 3]") && err.contains("[4, 2]"), "{err}");
        let err = g.add(a, b).unwrap_err().to_string();
        assert!(err.contains("add"), "{err}");
    }

    #[test]
    fn cumulative_sum_prefix() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::matrix(3, 1, vec![2.0, 4.0, 6.0]).unwrap());
        let c = g.cumsum(x, Rc::new(SeqLayout::single(3))).unwrap();
        assert_eq!(vec_of(&g, c), vec![2.0, 6.0, 12.0]);
    }

    #[test]
    fn cumulative_sum_restarts_per_segment() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::matrix(5, 1, vec![1.0, 1.0, 1.0, 5.0, 5.0]).unwrap());
        let c = g.cumsum(x, Rc::new(SeqLayout::from_lens(vec![3, 2]))).unwrap();
        assert_eq!(vec_of(&g, c), vec![1.0, 2.0, 3.0, 5.0, 10.0]);
    }

    #[test]
    fn linear_map_gradient() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let w = g.variable(Tensor::vector(vec![0.5, -1.0, 2.0]));
        let p = g.mul(x, w).unwrap();
        let loss = g.sum(p);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(w).data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn square_gradient() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::scalar(3.0));
        let y = g.mul(x, x).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(x).item(), 6.0);
    }

    #[test]
    fn stop_gradient_blocks_edge() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::vector(vec![1.0, -2.0]));
        let s = g.stop_gradient(x);
        let y = g.mul(s, s).unwrap();
        let loss = g.sum(y);
        let grads = g.backward(loss).unwrap();
        assert!(grads.get(x).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn unreachable_node_has_zero_gradient() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::vector(vec![1.0, 2.0]));
        let unused = g.variable(Tensor::vector(vec![5.0]));
        let loss = g.sum(x);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(unused).data(), &[0.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::vector(vec![1.0, 2.0]));
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn masked_softmax_zeroes_excluded() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 1.0, 2.0, 3.0]).unwrap());
        let mask = [true, false, false, true, true, false];
        let y = g.softmax(x, Some(&mask)).unwrap();
        let v = vec_of(&g, y);
        assert_eq!(&v[..3], &[1.0, 0.0, 0.0]);
        assert_eq!(v[5], 0.0);
        assert!((v[3] + v[4] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn registering_a_param_twice_shares_the_node() {
        let mut g = Graph::new();
        let a = g.param(7, || Tensor::scalar(2.0));
        let b = g.param(7, || panic!("must not rebuild"));
        assert_eq!(a, b);
        let y = g.mul(a, b).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.params(), vec![(7, Tensor::scalar(4.0))]);
    }
}
