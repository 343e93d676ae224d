use std::collections::HashMap;

use super::{gelu, gelu_grad, invalid, ParamStore, Result, Tensor, TensorError, LAYER_NORM_EPS};

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Permute(Var, Vec<usize>),
    Reshape(Var),
    Concat(Vec<Var>, usize),
    Slice { x: Var, axis: usize, start: usize },
    Softmax(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Gelu(Var),
    GatherRows(Var, Vec<usize>),
    Expand(Var),
    Mean(Var, usize),
    Sum(Var),
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records every operation with its inputs and saved activations so that
/// [`Graph::backward`] can replay vector-Jacobian products in reverse order.
/// Nodes are appended in evaluation order, which is a topological order.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<usize, String>,
    consumed: bool,
}

/// Gradients of a backward pass, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        debug_assert!(value.is_finite(), "non-finite value produced by {op:?}");
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Constant input; receives no gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Differentiable leaf.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf bound to a named parameter of `store`; its gradient flows back
    /// through [`Graph::backward_into`].
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        let t = store.get(name).ok_or_else(|| TensorError::UnknownParam(name.to_string()))?.clone();
        let v = self.input(t);
        self.params.insert(v.0, name.to_string());
        Ok(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).mul(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).scale(s);
        let rg = self.rg(&[a]);
        self.push(out, Op::Scale(a, s), rg)
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let out = self.value(a).permute(axes)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Permute(a, axes.to_vec()), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let r = self.shape(a).len();
        if r < 2 {
            return Err(invalid("transpose", format!("rank {r} < 2")));
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 1, r - 2);
        self.permute(a, &axes)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).reshape(shape)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Reshape(a), rg))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let values: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Tensor::concat(&values, axis)?;
        let rg = self.rg(parts);
        Ok(self.push(out, Op::Concat(parts.to_vec(), axis), rg))
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let out = self.value(x).slice(axis, start, len)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Slice { x, axis, start }, rg))
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).softmax_last()?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Softmax(x), rg))
    }

    /// Normalize over the last axis, then apply `gamma * xhat + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.last_dim("layer_norm")?;
        for p in [gamma, beta] {
            if self.shape(p) != [d] {
                return Err(TensorError::ShapeMismatch {
                    op: "layer_norm",
                    lhs: xv.shape().to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let rows = xv.numel() / d;
        let mut xhat = Vec::with_capacity(xv.numel());
        let mut inv_std = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(xv.numel());
        for row in xv.data().chunks_exact(d) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let r = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std.push(r);
            for (k, &v) in row.iter().enumerate() {
                let n = (v - mean) * r;
                xhat.push(n);
                out.push(g[k] * n + b[k]);
            }
        }
        let out = Tensor::new(xv.shape(), out)?;
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(out, Op::LayerNorm { x, gamma, beta, xhat, inv_std }, rg))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(gelu);
        let rg = self.rg(&[x]);
        self.push(out, Op::Gelu(x), rg)
    }

    /// Embedding-style lookup: rows of the leading axis of `table`.
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let out = self.value(table).gather_rows(idx)?;
        let rg = self.rg(&[table]);
        Ok(self.push(out, Op::GatherRows(table, idx.to_vec()), rg))
    }

    /// Repeat along a new leading axis of length `n`.
    pub fn expand(&mut self, x: Var, n: usize) -> Var {
        let out = self.value(x).expand_leading(n);
        let rg = self.rg(&[x]);
        self.push(out, Op::Expand(x), rg)
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let out = self.value(x).mean_axis(axis)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Mean(x, axis), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(&[x]);
        self.push(out, Op::Sum(x), rg)
    }

    /// Mean softmax cross-entropy of `[batch, classes]` (or `[classes]`)
    /// logits against integer labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let classes = lv.last_dim("cross_entropy")?;
        let batch = lv.numel() / classes;
        if labels.len() != batch || lv.rank() > 2 {
            return Err(invalid(
                "cross_entropy",
                format!("{} labels for logits of shape {:?}", labels.len(), lv.shape()),
            ));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
            return Err(TensorError::LabelOutOfRange { label, classes });
        }
        let probs = lv.softmax_last()?.into_data();
        let mut loss = 0.0;
        for (b, &l) in labels.iter().enumerate() {
            let row = &lv.data()[b * classes..(b + 1) * classes];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            loss += lse - row[l];
        }
        let out = Tensor::scalar(loss / batch as f64);
        let rg = self.rg(&[logits]);
        Ok(self.push(out, Op::CrossEntropy { logits, labels: labels.to_vec(), probs }, rg))
    }

    /// Linear map on the last axis: `x [n, din] @ w [din, dout] + b [dout]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        let rows = self.shape(y)[0];
        let bb = self.expand(b, rows);
        self.add(y, bb)
    }

    /// Reverse pass from a scalar root. A graph can be differentiated once.
    pub fn backward(&mut self, root: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(TensorError::TapeConsumed);
        }
        let rv = self.value(root);
        if rv.numel() != 1 {
            return Err(TensorError::NotScalar(rv.shape().to_vec()));
        }
        let seed = Tensor::full(rv.shape(), 1.0);
        self.consumed = true;
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(seed);
        for i in (0..=root.0).rev() {
            let Some(gout) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, &gout, &mut grads)?;
            grads[i] = Some(gout);
        }
        Ok(Gradients { grads })
    }

    /// Run [`Graph::backward`] and add every named parameter's gradient into
    /// `store`. Parameters not reached keep their current gradient.
    pub fn backward_into(&mut self, root: Var, store: &mut ParamStore) -> Result<()> {
        for (name, g) in self.param_grads(root)? {
            store.accumulate_grad(&name, &g)?;
        }
        Ok(())
    }

    /// Run [`Graph::backward`] and return the gradient of every reached
    /// parameter leaf, in recording order. A parameter bound more than once
    /// appears once per binding.
    pub fn param_grads(&mut self, root: Var) -> Result<Vec<(String, Tensor)>> {
        let mut grads = self.backward(root)?;
        let mut ids: Vec<usize> = self.params.keys().copied().collect();
        ids.sort_unstable();
        Ok(ids
            .into_iter()
            .filter_map(|id| grads.grads[id].take().map(|g| (self.params[&id].clone(), g)))
            .collect())
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[i];
        let mut acc = |v: Var, t: Tensor| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&t),
                slot => *slot = Some(t),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                acc(*a, g.matmul(&bv.transpose_last()?)?);
                acc(*b, av.transpose_last()?.matmul(g)?);
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Mul(a, b) => {
                acc(*a, g.mul(self.value(*b))?);
                acc(*b, g.mul(self.value(*a))?);
            }
            Op::Scale(a, s) => acc(*a, g.scale(*s)),
            Op::Permute(a, axes) => {
                let mut inverse = vec![0; axes.len()];
                for (k, &ax) in axes.iter().enumerate() {
                    inverse[ax] = k;
                }
                acc(*a, g.permute(&inverse)?);
            }
            Op::Reshape(a) => acc(*a, g.reshape(self.shape(*a))?),
            Op::Concat(parts, axis) => {
                let mut start = 0;
                for p in parts {
                    let len = self.shape(*p)[*axis];
                    acc(*p, g.slice(*axis, start, len)?);
                    start += len;
                }
            }
            Op::Slice { x, axis, start } => {
                let xs = self.shape(*x);
                let outer: usize = xs[..*axis].iter().product();
                let inner: usize = xs[*axis + 1..].iter().product();
                let (n, len) = (xs[*axis], g.shape()[*axis]);
                let mut gx = Tensor::zeros(xs);
                for o in 0..outer {
                    let dst = o * n * inner + start * inner;
                    gx.data_mut()[dst..dst + len * inner]
                        .copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
                }
                acc(*x, gx);
            }
            Op::Softmax(x) => {
                let y = &node.value;
                let d = y.shape().last().copied().unwrap_or(1);
                let mut gx = Vec::with_capacity(y.numel());
                for (yr, gr) in y.data().chunks_exact(d).zip(g.data().chunks_exact(d)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    gx.extend(yr.iter().zip(gr).map(|(yv, gv)| yv * (gv - dot)));
                }
                acc(*x, Tensor::new(y.shape(), gx)?);
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let d = *self.shape(*gamma).first().unwrap_or(&1);
                let gam = self.value(*gamma).data();
                let mut dgamma = vec![0.0; d];
                let mut dbeta = vec![0.0; d];
                let mut dx = Vec::with_capacity(g.numel());
                for ((gr, xr), &r) in g.data().chunks_exact(d).zip(xhat.chunks_exact(d)).zip(inv_std) {
                    let mut mean_dxhat = 0.0;
                    let mut mean_dxhat_xhat = 0.0;
                    for k in 0..d {
                        dgamma[k] += gr[k] * xr[k];
                        dbeta[k] += gr[k];
                        let dxh = gr[k] * gam[k];
                        mean_dxhat += dxh;
                        mean_dxhat_xhat += dxh * xr[k];
                    }
                    mean_dxhat /= d as f64;
                    mean_dxhat_xhat /= d as f64;
                    for k in 0..d {
                        dx.push(r * (gr[k] * gam[k] - mean_dxhat - xr[k] * mean_dxhat_xhat));
                    }
                }
                acc(*x, Tensor::new(g.shape(), dx)?);
                acc(*gamma, Tensor::new(&[d], dgamma)?);
                acc(*beta, Tensor::new(&[d], dbeta)?);
            }
            Op::Gelu(x) => {
                let xv = self.value(*x);
                let data = xv.data().iter().zip(g.data()).map(|(&v, &gv)| gv * gelu_grad(v)).collect();
                acc(*x, Tensor::new(xv.shape(), data)?);
            }
            Op::GatherRows(t, idx) => {
                let ts = self.shape(*t);
                let inner: usize = ts[1..].iter().product();
                let mut gt = Tensor::zeros(ts);
                for (r, &src) in idx.iter().enumerate() {
                    let dst = &mut gt.data_mut()[src * inner..(src + 1) * inner];
                    dst.iter_mut().zip(&g.data()[r * inner..(r + 1) * inner]).for_each(|(a, b)| *a += b);
                }
                acc(*t, gt);
            }
            Op::Expand(x) => acc(*x, g.mean_axis(0)?.scale(g.shape()[0] as f64)),
            Op::Mean(x, axis) => {
                let xs = self.shape(*x);
                let outer: usize = xs[..*axis].iter().product();
                let inner: usize = xs[*axis + 1..].iter().product();
                let n = xs[*axis];
                let mut gx = Vec::with_capacity(outer * n * inner);
                for o in 0..outer {
                    let src = &g.data()[o * inner..(o + 1) * inner];
                    for _ in 0..n {
                        gx.extend(src.iter().map(|v| v / n as f64));
                    }
                }
                acc(*x, Tensor::new(xs, gx)?);
            }
            Op::Sum(x) => acc(*x, Tensor::full(self.shape(*x), g.item())),
            Op::CrossEntropy { logits, labels, probs } => {
                let classes = *self.shape(*logits).last().unwrap_or(&1);
                let scale = g.item() / labels.len() as f64;
                let mut gl = probs.clone();
                for (b, &l) in labels.iter().enumerate() {
                    gl[b * classes + l] -= 1.0;
                }
                gl.iter_mut().for_each(|v| *v *= scale);
                acc(*logits, Tensor::new(self.shape(*logits), gl)?);
            }
        }
        Ok(())
    }
}
