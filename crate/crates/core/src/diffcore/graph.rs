use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    Offset(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Relu(Var),
    Tanh(Var),
    Log(Var),
    Exp(Var),
    Sqrt(Var),
    Sum(Var),
    Mean(Var),
    SumFirst(Var),
    SumLast(Var),
    LogSumExp(Var),
    LogSoftmax(Var),
    GatherRows(Var, Vec<usize>),
    SelectLast(Var, Vec<usize>),
    SqNorm(Var),
    Slice(Var, usize),
    Concat(Vec<Var>),
    StopGrad,
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Define-by-run computation graph.
///
/// Values are computed eagerly as nodes are appended, so node order is a
/// topological order and [`Graph::backward`] is a single reverse sweep.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Result of a backward pass: one gradient slot per node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient w.r.t. `v`, zeros when no path reached it.
    pub fn wrt(&self, v: Var) -> Tensor {
        match self.get(v) {
            Some(t) => t.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }
}

fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a == b {
        return Ok(a.to_vec());
    }
    if a.len() >= b.len() && a.ends_with(b) {
        return Ok(a.to_vec());
    }
    if b.len() > a.len() && b.ends_with(a) {
        return Ok(b.to_vec());
    }
    Err(Error::shape(op, format!("cannot broadcast {a:?} with {b:?}")))
}

fn zip_broadcast(a: &Tensor, b: &Tensor, out: &[usize], f: impl Fn(f64, f64) -> f64) -> Tensor {
    let n: usize = out.iter().product();
    let (ad, bd) = (a.data(), b.data());
    let (na, nb) = (ad.len(), bd.len());
    let data = (0..n).map(|i| f(ad[i % na], bd[i % nb])).collect();
    Tensor::new(out.to_vec(), data).expect("broadcast shape")
}

/// Sum a broadcast gradient back down to an operand of `len` elements.
fn reduce_to(g: &[f64], shape: &[usize]) -> Tensor {
    let len: usize = shape.iter().product();
    if g.len() == len {
        return Tensor::new(shape.to_vec(), g.to_vec()).expect("same shape");
    }
    let mut out = vec![0.0; len];
    for (i, v) in g.iter().enumerate() {
        out[i % len] += v;
    }
    Tensor::new(shape.to_vec(), out).expect("reduced shape")
}

fn last_dim(op: &'static str, t: &Tensor) -> Result<usize> {
    match t.shape().last() {
        Some(&c) if c > 0 => Ok(c),
        _ => Err(Error::shape(op, format!("needs a non-empty last dim, got {:?}", t.shape()))),
    }
}

fn matmul_raw(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let row = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * m..(i + 1) * m];
        for (p, &av) in row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * m..(p + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

fn transpose_raw(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

fn log_softmax_rows(x: &[f64], c: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks(c) {
        let lse = logsumexp_slice(row);
        out.extend(row.iter().map(|v| v - lse));
    }
    out
}

fn logsumexp_slice(row: &[f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
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

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value, true)
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Value of `root`. Values are computed while the graph is built, so this
    /// only copies the cached result out.
    pub fn forward(&self, root: Var) -> Tensor {
        self.nodes[root.0].value.clone()
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let out = broadcast_shape(name, self.shape(a), self.shape(b))?;
        let value = zip_broadcast(self.value(a), self.value(b), &out, f);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(op, value, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    fn unary(&mut self, v: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.value(v).map(f);
        let rg = self.rg(v);
        self.push(op, value, rg)
    }

    pub fn neg(&mut self, v: Var) -> Var {
        self.unary(v, |x| -x, Op::Neg(v))
    }

    pub fn scale(&mut self, v: Var, c: f64) -> Var {
        self.unary(v, |x| c * x, Op::Scale(v, c))
    }

    pub fn offset(&mut self, v: Var, c: f64) -> Var {
        self.unary(v, |x| x + c, Op::Offset(v))
    }

    pub fn relu(&mut self, v: Var) -> Var {
        self.unary(v, |x| x.max(0.0), Op::Relu(v))
    }

    pub fn tanh(&mut self, v: Var) -> Var {
        self.unary(v, f64::tanh, Op::Tanh(v))
    }

    pub fn log(&mut self, v: Var) -> Var {
        self.unary(v, f64::ln, Op::Log(v))
    }

    pub fn exp(&mut self, v: Var) -> Var {
        self.unary(v, f64::exp, Op::Exp(v))
    }

    pub fn sqrt(&mut self, v: Var) -> Var {
        self.unary(v, f64::sqrt, Op::Sqrt(v))
    }

    /// Marks `v` as a constant for the backward pass. The value passes through
    /// unchanged; no gradient flows to anything upstream of this node.
    pub fn stop_grad(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.push(Op::StopGrad, value, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (n, k, m) = (sa[0], sa[1], sb[1]);
        let data = matmul_raw(self.value(a).data(), self.value(b).data(), n, k, m);
        let value = Tensor::new(vec![n, m], data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::MatMul(a, b), value, rg))
    }

    pub fn transpose(&mut self, v: Var) -> Result<Var> {
        let s = self.shape(v);
        if s.len() != 2 {
            return Err(Error::shape("transpose", format!("needs 2-D, got {s:?}")));
        }
        let (r, c) = (s[0], s[1]);
        let value = Tensor::new(vec![c, r], transpose_raw(self.value(v).data(), r, c))?;
        let rg = self.rg(v);
        Ok(self.push(Op::Transpose(v), value, rg))
    }

    pub fn reshape(&mut self, v: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(v).clone().reshaped(shape.to_vec())?;
        let rg = self.rg(v);
        Ok(self.push(Op::Reshape(v), value, rg))
    }

    pub fn sum(&mut self, v: Var) -> Var {
        let s = self.value(v).data().iter().sum();
        let rg = self.rg(v);
        self.push(Op::Sum(v), Tensor::scalar(s), rg)
    }

    pub fn mean(&mut self, v: Var) -> Result<Var> {
        let t = self.value(v);
        if t.is_empty() {
            return Err(Error::shape("mean", "empty tensor"));
        }
        let m = t.data().iter().sum::<f64>() / t.len() as f64;
        let rg = self.rg(v);
        Ok(self.push(Op::Mean(v), Tensor::scalar(m), rg))
    }

    /// Sum over the leading dimension: `[n, ...] -> [...]`.
    pub fn sum_first(&mut self, v: Var) -> Result<Var> {
        let t = self.value(v);
        if t.ndim() == 0 {
            return Err(Error::shape("sum_first", "scalar input"));
        }
        let w = t.row_len();
        let mut out = vec![0.0; w];
        for row in t.data().chunks(w.max(1)) {
            for (o, x) in out.iter_mut().zip(row) {
                *o += x;
            }
        }
        let value = Tensor::new(t.shape()[1..].to_vec(), out)?;
        let rg = self.rg(v);
        Ok(self.push(Op::SumFirst(v), value, rg))
    }

    /// Sum over the last dimension: `[..., c] -> [...]`.
    pub fn sum_last(&mut self, v: Var) -> Result<Var> {
        let t = self.value(v);
        let c = last_dim("sum_last", t)?;
        let data = t.data().chunks(c).map(|r| r.iter().sum()).collect();
        let value = Tensor::new(t.shape()[..t.ndim() - 1].to_vec(), data)?;
        let rg = self.rg(v);
        Ok(self.push(Op::SumLast(v), value, rg))
    }

    pub fn logsumexp(&mut self, v: Var) -> Result<Var> {
        let t = self.value(v);
        let c = last_dim("logsumexp", t)?;
        let data = t.data().chunks(c).map(logsumexp_slice).collect();
        let value = Tensor::new(t.shape()[..t.ndim() - 1].to_vec(), data)?;
        let rg = self.rg(v);
        Ok(self.push(Op::LogSumExp(v), value, rg))
    }

    pub fn log_softmax(&mut self, v: Var) -> Result<Var> {
        let t = self.value(v);
        let c = last_dim("log_softmax", t)?;
        let value = Tensor::new(t.shape().to_vec(), log_softmax_rows(t.data(), c))?;
        let rg = self.rg(v);
        Ok(self.push(Op::LogSoftmax(v), value, rg))
    }

    pub fn gather_rows(&mut self, v: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(v);
        let n = t.rows();
        if t.ndim() == 0 {
            return Err(Error::shape("gather_rows", "scalar input"));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::shape("gather_rows", format!("row {bad} out of {n}")));
        }
        let value = t.gather_rows(idx);
        let rg = self.rg(v);
        Ok(self.push(Op::GatherRows(v, idx.to_vec()), value, rg))
    }

    /// `out[i] = x[i, idx[i]]` for a 2-D `x`.
    pub fn select_last(&mut self, v: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(v);
        if t.ndim() != 2 || t.shape()[0] != idx.len() {
            return Err(Error::shape(
                "select_last",
                format!("{:?} with {} indices", t.shape(), idx.len()),
            ));
        }
        let c = t.shape()[1];
        if let Some(&bad) = idx.iter().find(|&&j| j >= c) {
            return Err(Error::shape("select_last", format!("class {bad} out of {c}")));
        }
        let data = idx.iter().enumerate().map(|(i, &j)| t.data()[i * c + j]).collect();
        let value = Tensor::vector(data);
        let rg = self.rg(v);
        Ok(self.push(Op::SelectLast(v, idx.to_vec()), value, rg))
    }

    pub fn sq_norm(&mut self, v: Var) -> Var {
        let s = self.value(v).data().iter().map(|x| x * x).sum();
        let rg = self.rg(v);
        self.push(Op::SqNorm(v), Tensor::scalar(s), rg)
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let p = self.mul(a, b)?;
        Ok(self.sum(p))
    }

    /// Contiguous sub-range of a 1-D tensor.
    pub fn slice(&mut self, v: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(v);
        if t.ndim() != 1 || start + len > t.len() {
            return Err(Error::shape(
                "slice",
                format!("[{start}..{}] of {:?}", start + len, t.shape()),
            ));
        }
        let value = Tensor::vector(t.data()[start..start + len].to_vec());
        let rg = self.rg(v);
        Ok(self.push(Op::Slice(v, start), value, rg))
    }

    /// Concatenate flattened inputs into one 1-D tensor.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let mut data = Vec::new();
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(Op::Concat(parts.to_vec()), Tensor::vector(data), rg)
    }

    /// Reverse sweep from a scalar `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let rv = &self.nodes[root.0].value;
        if rv.len() != 1 {
            return Err(Error::NotScalar(rv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Tensor::filled(rv.shape(), 1.0));

        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        grads.resize(self.nodes.len(), None);
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, delta: Tensor) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => {
                for (a, d) in acc.data_mut().iter_mut().zip(delta.data()) {
                    *a += d;
                }
            }
            slot @ None => *slot = Some(delta),
        }
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf | Op::StopGrad => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, reduce_to(gd, val(*a).shape()));
                self.accumulate(grads, *b, reduce_to(gd, val(*b).shape()));
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, reduce_to(gd, val(*a).shape()));
                let neg: Vec<f64> = gd.iter().map(|x| -x).collect();
                self.accumulate(grads, *b, reduce_to(&neg, val(*b).shape()));
            }
            Op::Mul(a, b) | Op::Div(a, b) => {
                let (av, bv) = (val(*a).data(), val(*b).data());
                let (na, nb) = (av.len(), bv.len());
                let is_div = matches!(node.op, Op::Div(..));
                if self.rg(*a) {
                    let ga: Vec<f64> = gd
                        .iter()
                        .enumerate()
                        .map(|(i, x)| if is_div { x / bv[i % nb] } else { x * bv[i % nb] })
                        .collect();
                    self.accumulate(grads, *a, reduce_to(&ga, val(*a).shape()));
                }
                if self.rg(*b) {
                    let gb: Vec<f64> = gd
                        .iter()
                        .enumerate()
                        .map(|(i, x)| {
                            let (ai, bi) = (av[i % na], bv[i % nb]);
                            if is_div {
                                -x * ai / (bi * bi)
                            } else {
                                x * ai
                            }
                        })
                        .collect();
                    self.accumulate(grads, *b, reduce_to(&gb, val(*b).shape()));
                }
            }
            Op::Neg(a) => self.accumulate(grads, *a, g.map(|x| -x)),
            Op::Scale(a, c) => self.accumulate(grads, *a, g.map(|x| c * x)),
            Op::Offset(a) | Op::Reshape(a) => {
                let t = Tensor::new(val(*a).shape().to_vec(), gd.to_vec()).expect("same size");
                self.accumulate(grads, *a, t);
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (val(*a).shape(), val(*b).shape());
                let (n, k, m) = (sa[0], sa[1], sb[1]);
                if self.rg(*a) {
                    let bt = transpose_raw(val(*b).data(), k, m);
                    let ga = matmul_raw(gd, &bt, n, m, k);
                    self.accumulate(grads, *a, Tensor::new(vec![n, k], ga).expect("shape"));
                }
                if self.rg(*b) {
                    let at = transpose_raw(val(*a).data(), n, k);
                    let gb = matmul_raw(&at, gd, k, n, m);
                    self.accumulate(grads, *b, Tensor::new(vec![k, m], gb).expect("shape"));
                }
            }
            Op::Transpose(a) => {
                let s = val(*a).shape();
                let t = transpose_raw(gd, s[1], s[0]);
                self.accumulate(grads, *a, Tensor::new(s.to_vec(), t).expect("shape"));
            }
            Op::Relu(a) => {
                let x = val(*a).data();
                let d = gd.iter().zip(x).map(|(g, &x)| if x > 0.0 { *g } else { 0.0 });
                self.accumulate(grads, *a, like(val(*a), d.collect()));
            }
            Op::Tanh(a) => {
                let y = node.value.data();
                let d = gd.iter().zip(y).map(|(g, y)| g * (1.0 - y * y));
                self.accumulate(grads, *a, like(val(*a), d.collect()));
            }
            Op::Log(a) => {
                let x = val(*a).data();
                let d = gd.iter().zip(x).map(|(g, x)| g / x);
                self.accumulate(grads, *a, like(val(*a), d.collect()));
            }
            Op::Exp(a) => {
                let y = node.value.data();
                let d = gd.iter().zip(y).map(|(g, y)| g * y);
                self.accumulate(grads, *a, like(val(*a), d.collect()));
            }
            Op::Sqrt(a) => {
                let y = node.value.data();
                let d = gd.iter().zip(y).map(|(g, y)| 0.5 * g / y);
                self.accumulate(grads, *a, like(val(*a), d.collect()));
            }
            Op::Sum(a) => {
                self.accumulate(grads, *a, Tensor::filled(val(*a).shape(), gd[0]));
            }
            Op::Mean(a) => {
                let n = val(*a).len() as f64;
                self.accumulate(grads, *a, Tensor::filled(val(*a).shape(), gd[0] / n));
            }
            Op::SumFirst(a) => {
                let n = val(*a).len();
                let w = gd.len().max(1);
                let d = (0..n).map(|i| gd[i % w]).collect();
                self.accumulate(grads, *a, like(val(*a), d));
            }
            Op::SumLast(a) => {
                let x = val(*a);
                let c = *x.shape().last().expect("last dim");
                let d = (0..x.len()).map(|i| gd[i / c]).collect();
                self.accumulate(grads, *a, like(x, d));
            }
            Op::LogSumExp(a) => {
                let x = val(*a);
                let c = *x.shape().last().expect("last dim");
                let y = node.value.data();
                let d = x
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, xi)| gd[i / c] * (xi - y[i / c]).exp())
                    .collect();
                self.accumulate(grads, *a, like(x, d));
            }
            Op::LogSoftmax(a) => {
                let x = val(*a);
                let c = *x.shape().last().expect("last dim");
                let y = node.value.data();
                let mut d = Vec::with_capacity(x.len());
                for (grow, yrow) in gd.chunks(c).zip(y.chunks(c)) {
                    let gs: f64 = grow.iter().sum();
                    d.extend(grow.iter().zip(yrow).map(|(g, y)| g - y.exp() * gs));
                }
                self.accumulate(grads, *a, like(x, d));
            }
            Op::GatherRows(a, idx) => {
                let x = val(*a);
                let w = x.row_len();
                let mut d = vec![0.0; x.len()];
                for (k, &i) in idx.iter().enumerate() {
                    for j in 0..w {
                        d[i * w + j] += gd[k * w + j];
                    }
                }
                self.accumulate(grads, *a, like(x, d));
            }
            Op::SelectLast(a, idx) => {
                let x = val(*a);
                let c = x.shape()[1];
                let mut d = vec![0.0; x.len()];
                for (i, &j) in idx.iter().enumerate() {
                    d[i * c + j] += gd[i];
                }
                self.accumulate(grads, *a, like(x, d));
            }
            Op::SqNorm(a) => {
                let x = val(*a);
                self.accumulate(grads, *a, x.map(|v| 2.0 * gd[0] * v));
            }
            Op::Slice(a, start) => {
                let x = val(*a);
                let mut d = vec![0.0; x.len()];
                d[*start..*start + gd.len()].copy_from_slice(gd);
                self.accumulate(grads, *a, like(x, d));
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for &p in parts {
                    let x = val(p);
                    let d = gd[off..off + x.len()].to_vec();
                    off += x.len();
                    self.accumulate(grads, p, like(x, d));
                }
            }
        }
    }
}

fn like(t: &Tensor, data: Vec<f64>) -> Tensor {
    Tensor::new(t.shape().to_vec(), data).expect("gradient matches operand shape")
}
