use std::collections::BTreeMap;

use super::kernels::{self, ConvGeom, PoolGeom};
use super::{ParamGroup, Tensor, TensorError};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Deliberate backward defects, used to prove the gradient checker can fail.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    /// Scales the conv2d weight gradient by 1.01.
    ConvWeightGrad,
}

#[derive(Debug)]
enum OpKind {
    Conv2d { geom: ConvGeom },
    MaxPool { argmax: Vec<usize> },
    Linear,
    Relu,
    Tanh,
    Scale(f64),
    Add,
    Sub,
    Concat,
    Slice { start: usize },
    Reshape,
    Mse,
    Sum,
    Mean,
    AffineGrid { h: usize, w: usize, clamped: [bool; 6] },
    GridSample { c: usize, h: usize, w: usize },
}

impl OpKind {
    fn name(&self) -> &'static str {
        match self {
            OpKind::Conv2d { .. } => "conv2d",
            OpKind::MaxPool { .. } => "maxpool2d",
            OpKind::Linear => "linear",
            OpKind::Relu => "relu",
            OpKind::Tanh => "tanh",
            OpKind::Scale(_) => "scale",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Concat => "concat",
            OpKind::Slice { .. } => "slice",
            OpKind::Reshape => "reshape",
            OpKind::Mse => "mse_loss",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::AffineGrid { .. } => "affine_grid",
            OpKind::GridSample { .. } => "grid_sample",
        }
    }
}

#[derive(Debug)]
struct Node {
    kind: OpKind,
    inputs: Vec<usize>,
    output: usize,
}

#[derive(Debug)]
struct Slot {
    value: Tensor,
    requires_grad: bool,
    is_leaf: bool,
}

/// Tape of executed operations. Values live in the graph; backward walks
/// the node list in exact reverse execution order.
#[derive(Debug, Default)]
pub struct Graph {
    slots: Vec<Slot>,
    nodes: Vec<Node>,
    fault: Option<Fault>,
}

/// Graph handles for the tensors of one [`ParamGroup`].
#[derive(Clone, Debug, Default)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<Var, TensorError> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| TensorError::Contract(format!("parameter `{name}` is not bound")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }

    /// Union of two bindings; names must not collide.
    pub fn merged(mut self, other: &Bound) -> Self {
        for (k, v) in &other.vars {
            let prev = self.vars.insert(k.clone(), *v);
            debug_assert!(prev.is_none(), "duplicate binding {k}");
        }
        self
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_fault(fault: Fault) -> Self {
        Self {
            fault: Some(fault),
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a constant (no gradient).
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push_leaf(t, false)
    }

    /// Records a leaf whose gradient is collected by [`Graph::backward`].
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push_leaf(t, true)
    }

    fn push_leaf(&mut self, mut t: Tensor, requires_grad: bool) -> Var {
        t.clear_grad();
        t.set_requires_grad(requires_grad);
        self.slots.push(Slot {
            value: t,
            requires_grad,
            is_leaf: true,
        });
        Var(self.slots.len() - 1)
    }

    /// Binds every tensor of `group` as a leaf; `trainable = false` binds them as constants.
    pub fn bind(&mut self, group: &ParamGroup, trainable: bool) -> Bound {
        let vars = group
            .iter()
            .map(|(name, t)| {
                let v = self.push_leaf(t.clone(), trainable);
                (name.to_string(), v)
            })
            .collect();
        Bound { vars }
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.slots[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.slots[v.0].value.shape()
    }

    pub fn data(&self, v: Var) -> &[f64] {
        self.slots[v.0].value.data()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.slots[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if backward reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.slots[v.0].value.grad()
    }

    pub fn zero_grad(&mut self) {
        for s in &mut self.slots {
            s.value.clear_grad();
        }
    }

    fn record(&mut self, kind: OpKind, inputs: Vec<usize>, value: Tensor) -> Var {
        let requires_grad = inputs.iter().any(|&i| self.slots[i].requires_grad);
        self.slots.push(Slot {
            value,
            requires_grad,
            is_leaf: false,
        });
        let output = self.slots.len() - 1;
        self.nodes.push(Node { kind, inputs, output });
        Var(output)
    }

    fn dims3(&self, op: &'static str, v: Var) -> Result<(usize, usize, usize), TensorError> {
        match self.shape(v) {
            &[c, h, w] => Ok((c, h, w)),
            s => Err(TensorError::Shape {
                op,
                msg: format!("expected a [C,H,W] map, got shape {s:?}"),
            }),
        }
    }

    pub fn conv2d(&mut self, x: Var, weight: Var, bias: Var, stride: usize) -> Result<Var, TensorError> {
        let op = "conv2d";
        let (c_in, h, w) = self.dims3(op, x)?;
        let &[c_out, wc_in, k, k2] = self.shape(weight) else {
            return Err(TensorError::Shape {
                op,
                msg: format!("weight must be [C_out,C_in,k,k], got {:?}", self.shape(weight)),
            });
        };
        dim_eq(op, "weight kernel width", k, k2)?;
        dim_eq(op, "input channels", wc_in, c_in)?;
        dim_eq(op, "bias length", c_out, self.value(bias).numel())?;
        if stride == 0 {
            return Err(TensorError::Contract("conv2d: stride must be >= 1".into()));
        }
        dim_at_least(op, "input height", h, k)?;
        dim_at_least(op, "input width", w, k)?;
        let geom = ConvGeom { c_in, h, w, c_out, k, stride };
        let out = kernels::conv2d_forward(self.data(x), self.data(weight), self.data(bias), &geom);
        let t = Tensor::new([c_out, geom.out_h(), geom.out_w()], out)?;
        Ok(self.record(OpKind::Conv2d { geom }, vec![x.0, weight.0, bias.0], t))
    }

    pub fn maxpool2d(&mut self, x: Var, kernel: usize, stride: usize) -> Result<Var, TensorError> {
        let op = "maxpool2d";
        let (c, h, w) = self.dims3(op, x)?;
        if kernel == 0 || stride == 0 {
            return Err(TensorError::Contract("maxpool2d: kernel and stride must be >= 1".into()));
        }
        dim_at_least(op, "input height", h, kernel)?;
        dim_at_least(op, "input width", w, kernel)?;
        let geom = PoolGeom { c, h, w, k: kernel, stride };
        let (out, argmax) = kernels::maxpool_forward(self.data(x), &geom);
        let t = Tensor::new([c, geom.out_h(), geom.out_w()], out)?;
        Ok(self.record(OpKind::MaxPool { argmax }, vec![x.0], t))
    }

    pub fn linear(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var, TensorError> {
        let op = "linear";
        let n = self.value(x).numel();
        let &[m, wn] = self.shape(weight) else {
            return Err(TensorError::Shape {
                op,
                msg: format!("weight must be [m,n], got {:?}", self.shape(weight)),
            });
        };
        dim_eq(op, "input length", wn, n)?;
        dim_eq(op, "bias length", m, self.value(bias).numel())?;
        let (xs, ws, bs) = (self.data(x), self.data(weight), self.data(bias));
        let out: Vec<f64> = (0..m)
            .map(|i| {
                let row = &ws[i * n..(i + 1) * n];
                let mut acc = bs[i];
                for (a, b) in row.iter().zip(xs) {
                    acc += a * b;
                }
                acc
            })
            .collect();
        let t = Tensor::new([m], out)?;
        Ok(self.record(OpKind::Linear, vec![x.0, weight.0, bias.0], t))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let t = Tensor::from_fn(v.shape().to_vec(), |i| v.data()[i].max(0.0));
        self.record(OpKind::Relu, vec![x.0], t)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let t = Tensor::from_fn(v.shape().to_vec(), |i| v.data()[i].tanh());
        self.record(OpKind::Tanh, vec![x.0], t)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let v = self.value(x);
        let t = Tensor::from_fn(v.shape().to_vec(), |i| v.data()[i] * factor);
        self.record(OpKind::Scale(factor), vec![x.0], t)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("add", a, b)?;
        let (va, vb) = (self.data(a), self.data(b));
        let t = Tensor::from_fn(self.shape(a).to_vec(), |i| va[i] + vb[i]);
        Ok(self.record(OpKind::Add, vec![a.0, b.0], t))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("sub", a, b)?;
        let (va, vb) = (self.data(a), self.data(b));
        let t = Tensor::from_fn(self.shape(a).to_vec(), |i| va[i] - vb[i]);
        Ok(self.record(OpKind::Sub, vec![a.0, b.0], t))
    }

    /// Concatenation along the leading axis; trailing dims must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let first = *parts
            .first()
            .ok_or_else(|| TensorError::Contract("concat of zero tensors".into()))?;
        let tail = self.shape(first)[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s[1..] != tail[..] {
                return Err(TensorError::Shape {
                    op: "concat",
                    msg: format!("trailing dims {:?} vs {:?}", &s[1..], tail),
                });
            }
            lead += s[0];
            data.extend_from_slice(self.data(p));
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        let t = Tensor::new(shape, data)?;
        Ok(self.record(OpKind::Concat, parts.iter().map(|v| v.0).collect(), t))
    }

    /// Rows `start..start+len` along the leading axis.
    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Result<Var, TensorError> {
        let s = self.shape(x).to_vec();
        if len == 0 || start + len > s[0] {
            return Err(TensorError::Dim {
                op: "slice",
                axis: "leading".into(),
                expected: s[0],
                got: start + len,
            });
        }
        let inner: usize = s[1..].iter().product();
        let data = self.data(x)[start * inner..(start + len) * inner].to_vec();
        let mut shape = s;
        shape[0] = len;
        let t = Tensor::new(shape, data)?;
        Ok(self.record(OpKind::Slice { start: start * inner }, vec![x.0], t))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let t = self.value(x).reshape(shape.to_vec())?;
        Ok(self.record(OpKind::Reshape, vec![x.0], t))
    }

    pub fn flatten(&mut self, x: Var) -> Result<Var, TensorError> {
        let n = self.value(x).numel();
        self.reshape(x, &[n])
    }

    /// Mean of squared elementwise differences.
    pub fn mse_loss(&mut self, pred: Var, target: Var) -> Result<Var, TensorError> {
        self.same_shape("mse_loss", pred, target)?;
        let (p, t) = (self.data(pred), self.data(target));
        let mut acc = 0.0;
        for (a, b) in p.iter().zip(t) {
            let d = a - b;
            acc += d * d;
        }
        let loss = acc / p.len() as f64;
        Ok(self.record(OpKind::Mse, vec![pred.0, target.0], Tensor::scalar(loss)))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().sum();
        self.record(OpKind::Sum, vec![x.0], Tensor::scalar(s))
    }

    /// Mean of a list of scalars.
    pub fn mean(&mut self, xs: &[Var]) -> Result<Var, TensorError> {
        if xs.is_empty() {
            return Err(TensorError::Contract("mean of zero scalars".into()));
        }
        let mut acc = 0.0;
        for &x in xs {
            if self.value(x).numel() != 1 {
                return Err(TensorError::Contract("mean expects scalar inputs".into()));
            }
            acc += self.value(x).item();
        }
        let t = Tensor::scalar(acc / xs.len() as f64);
        Ok(self.record(OpKind::Mean, xs.iter().map(|v| v.0).collect(), t))
    }

    /// Sampling grid `[H,W,2]` for the 6-vector `phi` (see [`crate::nn::grid`]).
    pub fn affine_grid(&mut self, phi: Var, h: usize, w: usize) -> Result<Var, TensorError> {
        let p = self.data(phi);
        if p.len() != 6 {
            return Err(TensorError::Dim {
                op: "affine_grid",
                axis: "phi".into(),
                expected: 6,
                got: p.len(),
            });
        }
        if p.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite {
                what: "affine_grid phi".into(),
            });
        }
        if h < 2 || w < 2 {
            return Err(TensorError::Contract(format!("affine_grid needs H,W >= 2, got {h}x{w}")));
        }
        let mut clamped = [false; 6];
        let mut phi_c = [0.0; 6];
        for k in 0..6 {
            phi_c[k] = p[k].clamp(-crate::nn::PHI_LIMIT, crate::nn::PHI_LIMIT);
            clamped[k] = phi_c[k] != p[k];
        }
        let grid = kernels::affine_grid_forward(&phi_c, h, w);
        let t = Tensor::new([h, w, 2], grid)?;
        Ok(self.record(OpKind::AffineGrid { h, w, clamped }, vec![phi.0], t))
    }

    /// Bilinear sampling with zeros outside the map.
    pub fn grid_sample(&mut self, x: Var, grid: Var) -> Result<Var, TensorError> {
        let op = "grid_sample";
        let (c, h, w) = self.dims3(op, x)?;
        let &[gh, gw, two] = self.shape(grid) else {
            return Err(TensorError::Shape {
                op,
                msg: format!("grid must be [H,W,2], got {:?}", self.shape(grid)),
            });
        };
        dim_eq(op, "grid height", h, gh)?;
        dim_eq(op, "grid width", w, gw)?;
        dim_eq(op, "grid last axis", 2, two)?;
        let out = kernels::grid_sample_forward(self.data(x), c, h, w, self.data(grid));
        let t = Tensor::new([c, h, w], out)?;
        Ok(self.record(OpKind::GridSample { c, h, w }, vec![x.0, grid.0], t))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::Shape {
                op,
                msg: format!("shapes {:?} and {:?} differ", self.shape(a), self.shape(b)),
            });
        }
        Ok(())
    }

    /// Reverse pass from a scalar loss. Leaf gradients accumulate across calls.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        if self.value(loss).numel() != 1 {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.slots.len()];
        grads[loss.0] = Some(vec![1.0]);
        for node in self.nodes.iter().rev() {
            if node.output > loss.0 {
                continue;
            }
            let Some(gout) = grads[node.output].take() else {
                continue;
            };
            let need: Vec<bool> = node.inputs.iter().map(|&i| self.slots[i].requires_grad).collect();
            if !need.iter().any(|&n| n) {
                continue;
            }
            let contribs = self.node_backward(node, &gout, &need);
            for (idx, g) in node.inputs.iter().zip(contribs) {
                if let Some(g) = g {
                    if !g.iter().fold(true, |ok, v| ok & v.is_finite()) {
                        return Err(TensorError::NonFinite {
                            what: format!("gradient through {}", node.kind.name()),
                        });
                    }
                    match &mut grads[*idx] {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                        slot @ None => *slot = Some(g),
                    }
                }
            }
        }
        for (slot, g) in self.slots.iter_mut().zip(grads) {
            if slot.is_leaf && slot.requires_grad {
                if let Some(g) = g {
                    slot.value.accumulate_grad(&g);
                }
            }
        }
        Ok(())
    }

    fn node_backward(&self, node: &Node, gout: &[f64], need: &[bool]) -> Vec<Option<Vec<f64>>> {
        let inp = |k: usize| self.slots[node.inputs[k]].value.data();
        let out = self.slots[node.output].value.data();
        match &node.kind {
            OpKind::Conv2d { geom } => {
                let g = kernels::conv2d_backward(inp(0), inp(1), gout, geom, [need[0], need[1], need[2]]);
                let dw = g.dweight.map(|mut dw| {
                    if self.fault == Some(Fault::ConvWeightGrad) {
                        dw.iter_mut().for_each(|v| *v *= 1.01);
                    }
                    dw
                });
                vec![g.dx, dw, g.dbias]
            }
            OpKind::MaxPool { argmax, .. } => {
                let mut dx = vec![0.0; inp(0).len()];
                for (&i, &g) in argmax.iter().zip(gout) {
                    dx[i] += g;
                }
                vec![Some(dx)]
            }
            OpKind::Linear => {
                let (x, w) = (inp(0), inp(1));
                let (m, n) = (gout.len(), x.len());
                let dx = need[0].then(|| {
                    let mut dx = vec![0.0; n];
                    for i in 0..m {
                        let row = &w[i * n..(i + 1) * n];
                        for (d, wv) in dx.iter_mut().zip(row) {
                            *d += gout[i] * wv;
                        }
                    }
                    dx
                });
                let dw = need[1].then(|| {
                    let mut dw = vec![0.0; m * n];
                    for i in 0..m {
                        for (d, xv) in dw[i * n..(i + 1) * n].iter_mut().zip(x) {
                            *d = gout[i] * xv;
                        }
                    }
                    dw
                });
                let db = need[2].then(|| gout.to_vec());
                vec![dx, dw, db]
            }
            OpKind::Relu => {
                let x = inp(0);
                vec![Some(gout.iter().zip(x).map(|(g, &v)| if v > 0.0 { *g } else { 0.0 }).collect())]
            }
            OpKind::Tanh => vec![Some(gout.iter().zip(out).map(|(g, y)| g * (1.0 - y * y)).collect())],
            OpKind::Scale(f) => vec![Some(gout.iter().map(|g| g * f).collect())],
            OpKind::Add => vec![
                need[0].then(|| gout.to_vec()),
                need[1].then(|| gout.to_vec()),
            ],
            OpKind::Sub => vec![
                need[0].then(|| gout.to_vec()),
                need[1].then(|| gout.iter().map(|g| -g).collect()),
            ],
            OpKind::Concat => {
                let mut off = 0;
                node.inputs
                    .iter()
                    .zip(need)
                    .map(|(&i, &n)| {
                        let len = self.slots[i].value.numel();
                        let part = n.then(|| gout[off..off + len].to_vec());
                        off += len;
                        part
                    })
                    .collect()
            }
            OpKind::Slice { start } => {
                let mut dx = vec![0.0; inp(0).len()];
                dx[*start..*start + gout.len()].copy_from_slice(gout);
                vec![Some(dx)]
            }
            OpKind::Reshape => vec![Some(gout.to_vec())],
            OpKind::Mse => {
                let (p, t) = (inp(0), inp(1));
                let scale = 2.0 * gout[0] / p.len() as f64;
                let diff: Vec<f64> = p.iter().zip(t).map(|(a, b)| scale * (a - b)).collect();
                let neg = need[1].then(|| diff.iter().map(|d| -d).collect());
                vec![need[0].then_some(diff), neg]
            }
            OpKind::Sum => vec![Some(vec![gout[0]; inp(0).len()])],
            OpKind::Mean => {
                let g = gout[0] / node.inputs.len() as f64;
                need.iter().map(|&n| n.then(|| vec![g])).collect()
            }
            OpKind::AffineGrid { h, w, clamped } => {
                let mut d = kernels::affine_grid_backward(gout, *h, *w);
                for k in 0..6 {
                    if clamped[k] {
                        d[k] = 0.0;
                    }
                }
                vec![Some(d.to_vec())]
            }
            OpKind::GridSample { c, h, w } => {
                let (dx, dgrid) = kernels::grid_sample_backward(inp(0), *c, *h, *w, inp(1), gout, [need[0], need[1]]);
                vec![dx, dgrid]
            }
        }
    }

    /// Names of the recorded operations in execution order.
    pub fn op_names(&self) -> Vec<&'static str> {
        self.nodes.iter().map(|n| n.kind.name()).collect()
    }
}

fn dim_eq(op: &'static str, axis: &str, expected: usize, got: usize) -> Result<(), TensorError> {
    if expected != got {
        return Err(TensorError::Dim {
            op,
            axis: axis.to_string(),
            expected,
            got,
        });
    }
    Ok(())
}

fn dim_at_least(op: &'static str, axis: &str, got: usize, min: usize) -> Result<(), TensorError> {
    if got < min {
        return Err(TensorError::Dim {
            op,
            axis: axis.to_string(),
            expected: min,
            got,
        });
    }
    Ok(())
}
