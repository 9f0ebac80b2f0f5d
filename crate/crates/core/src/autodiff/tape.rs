use std::fmt;

use super::tensor::{broadcast_shape, BroadcastMap};
use super::{AutodiffError, ParamId, ParameterStore, Tensor};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// The fixed primitive set. Used for error messages, gradient-check reports
/// and fault injection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Primitive {
    Leaf,
    Linear,
    MatMul,
    Add,
    Sub,
    Mul,
    Div,
    Affine,
    Sigmoid,
    Tanh,
    Relu,
    Exp,
    Log,
    Clamp,
    Softmax,
    Concat,
    Transpose,
    Sum,
    Mean,
    Reshape,
}

impl Primitive {
    pub const DIFFERENTIABLE: [Primitive; 19] = [
        Primitive::Linear,
        Primitive::MatMul,
        Primitive::Add,
        Primitive::Sub,
        Primitive::Mul,
        Primitive::Div,
        Primitive::Affine,
        Primitive::Sigmoid,
        Primitive::Tanh,
        Primitive::Relu,
        Primitive::Exp,
        Primitive::Log,
        Primitive::Clamp,
        Primitive::Softmax,
        Primitive::Concat,
        Primitive::Transpose,
        Primitive::Sum,
        Primitive::Mean,
        Primitive::Reshape,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Primitive::Leaf => "leaf",
            Primitive::Linear => "linear",
            Primitive::MatMul => "matmul",
            Primitive::Add => "add",
            Primitive::Sub => "sub",
            Primitive::Mul => "mul",
            Primitive::Div => "div",
            Primitive::Affine => "affine",
            Primitive::Sigmoid => "sigmoid",
            Primitive::Tanh => "tanh",
            Primitive::Relu => "relu",
            Primitive::Exp => "exp",
            Primitive::Log => "log",
            Primitive::Clamp => "clamp",
            Primitive::Softmax => "softmax",
            Primitive::Concat => "concat",
            Primitive::Transpose => "transpose",
            Primitive::Sum => "sum",
            Primitive::Mean => "mean",
            Primitive::Reshape => "reshape",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        std::iter::once(Primitive::Leaf)
            .chain(Self::DIFFERENTIABLE)
            .find(|p| p.name() == name)
    }
}

impl fmt::Display for Primitive {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Linear { x: Var, w: Var, b: Var },
    MatMul { a: Var, b: Var },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Affine { x: Var, scale: f64 },
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Clamp { x: Var, lo: f64, hi: f64 },
    Softmax { x: Var, axes: Vec<usize> },
    Concat { parts: Vec<Var>, axis: usize },
    Transpose(Var),
    Sum { x: Var },
    Mean { x: Var },
    Reshape(Var),
}

impl Op {
    fn primitive(&self) -> Primitive {
        match self {
            Op::Leaf => Primitive::Leaf,
            Op::Linear { .. } => Primitive::Linear,
            Op::MatMul { .. } => Primitive::MatMul,
            Op::Add(..) => Primitive::Add,
            Op::Sub(..) => Primitive::Sub,
            Op::Mul(..) => Primitive::Mul,
            Op::Div(..) => Primitive::Div,
            Op::Affine { .. } => Primitive::Affine,
            Op::Sigmoid(_) => Primitive::Sigmoid,
            Op::Tanh(_) => Primitive::Tanh,
            Op::Relu(_) => Primitive::Relu,
            Op::Exp(_) => Primitive::Exp,
            Op::Log(_) => Primitive::Log,
            Op::Clamp { .. } => Primitive::Clamp,
            Op::Softmax { .. } => Primitive::Softmax,
            Op::Concat { .. } => Primitive::Concat,
            Op::Transpose(_) => Primitive::Transpose,
            Op::Sum { .. } => Primitive::Sum,
            Op::Mean { .. } => Primitive::Mean,
            Op::Reshape(_) => Primitive::Reshape,
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    param: Option<ParamId>,
}

/// Ordered record of one forward pass. Operands always precede the nodes
/// that consume them, so the record is topologically sorted by construction.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    fault: Option<Primitive>,
}

/// Gradients of a scalar with respect to every node on a tape.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// `None` when the node does not influence the differentiated scalar.
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Flips the sign of one primitive's backward rule. Test fixture for
    /// checking that the gradient checker catches broken derivatives.
    #[doc(hidden)]
    pub fn inject_fault(&mut self, primitive: Primitive) {
        self.fault = Some(primitive);
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

    pub fn primitive(&self, var: Var) -> Primitive {
        self.nodes[var.0].op.primitive()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op, param: None });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.leaf(Tensor::scalar(value))
    }

    /// Records a parameter leaf. Its gradient flows back into `store` on
    /// [`Tape::backward`].
    pub fn param(&mut self, store: &ParameterStore, id: ParamId) -> Var {
        let var = self.leaf(store.get(id).value.clone());
        self.nodes[var.0].param = Some(id);
        var
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var, AutodiffError> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        let din = *xs.last().unwrap_or(&1);
        if xs.is_empty() || ws.len() != 2 || ws[0] != din || bs != [ws[1]] {
            return Err(AutodiffError::Shape {
                op: "linear",
                lhs: xs,
                rhs: ws,
            });
        }
        let dout = ws[1];
        let rows = self.value(x).len() / din;
        let mut out = vec![0.0; rows * dout];
        gemm(
            self.value(x).data(),
            self.value(w).data(),
            &mut out,
            rows,
            din,
            dout,
            false,
            false,
        );
        let bias = self.value(b).data();
        for row in out.chunks_mut(dout) {
            for (o, &bv) in row.iter_mut().zip(bias) {
                *o += bv;
            }
        }
        let mut shape = xs;
        *shape.last_mut().unwrap() = dout;
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::Linear { x, w, b }))
    }

    /// Matrix product: `[M,K]x[K,N]`, batched `[B,M,K]x[B,K,N]`, or
    /// `[B,M,K]x[K,N]` with the right operand shared across the batch.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let err = || AutodiffError::Shape {
            op: "matmul",
            lhs: sa.clone(),
            rhs: sb.clone(),
        };
        let (batch, m, k, n) = match (sa.len(), sb.len()) {
            (2, 2) if sa[1] == sb[0] => (1, sa[0], sa[1], sb[1]),
            (3, 3) if sa[0] == sb[0] && sa[2] == sb[1] => (sa[0], sa[1], sa[2], sb[2]),
            (3, 2) if sa[2] == sb[0] => (1, sa[0] * sa[1], sa[2], sb[1]),
            _ => return Err(err()),
        };
        let mut out = vec![0.0; batch * m * n];
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        for bi in 0..batch {
            gemm(
                &ad[bi * m * k..(bi + 1) * m * k],
                &bd[bi * k * n..(bi + 1) * k * n],
                &mut out[bi * m * n..(bi + 1) * m * n],
                m,
                k,
                n,
                false,
                false,
            );
        }
        let shape = match (sa.len(), sb.len()) {
            (2, 2) => vec![m, n],
            (3, 3) => vec![batch, m, n],
            _ => vec![sa[0], sa[1], n],
        };
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::MatMul { a, b }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let value = self.broadcast_binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(value, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let value = self.broadcast_binary("sub", a, b, |x, y| x - y)?;
        Ok(self.push(value, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let value = self.broadcast_binary("mul", a, b, |x, y| x * y)?;
        Ok(self.push(value, Op::Mul(a, b)))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        if self.value(b).data().contains(&0.0) {
            return Err(AutodiffError::Usage("division by zero".into()));
        }
        let value = self.broadcast_binary("div", a, b, |x, y| x / y)?;
        Ok(self.push(value, Op::Div(a, b)))
    }

    /// `scale * x + shift`, elementwise.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let value = self.value(x).map(|v| scale * v + shift);
        self.push(value, Op::Affine { x, scale })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(sigmoid);
        self.push(value, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let value = self.value(x).map(f64::tanh);
        self.push(value, Op::Tanh(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(0.0));
        self.push(value, Op::Relu(x))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let value = self.value(x).map(f64::exp);
        if !value.all_finite() {
            return Err(AutodiffError::Usage("exp overflow".into()));
        }
        Ok(self.push(value, Op::Exp(x)))
    }

    pub fn log(&mut self, x: Var) -> Result<Var, AutodiffError> {
        if self.value(x).data().iter().any(|&v| v <= 0.0) {
            return Err(AutodiffError::Usage("log of a nonpositive value".into()));
        }
        let value = self.value(x).map(f64::ln);
        Ok(self.push(value, Op::Log(x)))
    }

    /// Clamps into `[lo, hi]`; the gradient is passed through inside the
    /// interval and is zero outside.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let value = self.value(x).map(|v| v.clamp(lo, hi));
        self.push(value, Op::Clamp { x, lo, hi })
    }

    /// Softmax jointly over `axes`: entries sharing all other coordinates
    /// form one normalized group.
    pub fn softmax(&mut self, x: Var, axes: &[usize]) -> Result<Var, AutodiffError> {
        let shape = self.shape(x);
        let reduced = reduced_shape("softmax", &shape, axes)?;
        let map = BroadcastMap::new(&shape, &reduced).indices();
        let groups: usize = reduced.iter().product();
        let xd = self.value(x).data();
        let mut max = vec![f64::NEG_INFINITY; groups];
        for (&v, &g) in xd.iter().zip(&map) {
            max[g] = max[g].max(v);
        }
        let mut out: Vec<f64> = xd.iter().zip(&map).map(|(&v, &g)| (v - max[g]).exp()).collect();
        let mut sums = vec![0.0; groups];
        for (&v, &g) in out.iter().zip(&map) {
            sums[g] += v;
        }
        for (v, &g) in out.iter_mut().zip(&map) {
            *v /= sums[g];
        }
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::Softmax { x, axes: axes.to_vec() }))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var, AutodiffError> {
        let first = self.shape(
            *parts
                .first()
                .ok_or_else(|| AutodiffError::Usage("concat of zero tensors".into()))?,
        );
        if axis >= first.len() {
            return Err(AutodiffError::Usage(format!(
                "concat axis {axis} out of range for rank {}",
                first.len()
            )));
        }
        let mut out_shape = first.clone();
        out_shape[axis] = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible =
                s.len() == first.len() && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(AutodiffError::Shape {
                    op: "concat",
                    lhs: first,
                    rhs: s,
                });
            }
            out_shape[axis] += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(out_shape.iter().product());
        for o in 0..outer {
            for &p in parts {
                let chunk = self.value(p).shape()[axis] * inner;
                out.extend_from_slice(&self.value(p).data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let value = Tensor::new(out_shape, out)?;
        Ok(self.push(
            value,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
        ))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let shape = self.shape(x);
        if shape.len() < 2 {
            return Err(AutodiffError::Usage("transpose needs rank >= 2".into()));
        }
        let value = transpose_last(self.value(x));
        Ok(self.push(value, Op::Transpose(x)))
    }

    /// Sum over `axes`, keeping reduced axes with size one.
    pub fn sum(&mut self, x: Var, axes: &[usize]) -> Result<Var, AutodiffError> {
        let value = self.reduce("sum", x, axes)?;
        Ok(self.push(value, Op::Sum { x }))
    }

    pub fn mean(&mut self, x: Var, axes: &[usize]) -> Result<Var, AutodiffError> {
        let mut value = self.reduce("mean", x, axes)?;
        let count = (self.value(x).len() / value.len()) as f64;
        value.data_mut().iter_mut().for_each(|v| *v /= count);
        Ok(self.push(value, Op::Mean { x }))
    }

    /// Sum of every entry, as a scalar.
    pub fn sum_all(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let axes: Vec<usize> = (0..self.value(x).rank()).collect();
        let s = if axes.is_empty() { x } else { self.sum(x, &axes)? };
        self.reshape(s, &[])
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let axes: Vec<usize> = (0..self.value(x).rank()).collect();
        let s = if axes.is_empty() { x } else { self.mean(x, &axes)? };
        self.reshape(s, &[])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, AutodiffError> {
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape(x)))
    }

    fn shape(&self, var: Var) -> Vec<usize> {
        self.value(var).shape().to_vec()
    }

    fn broadcast_binary(
        &self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor, AutodiffError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() == tb.shape() {
            let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
            return Tensor::new(ta.shape().to_vec(), data);
        }
        let shape = broadcast_shape(op, ta.shape(), tb.shape())?;
        let ia = BroadcastMap::new(&shape, ta.shape()).indices();
        let ib = BroadcastMap::new(&shape, tb.shape()).indices();
        let data = ia
            .iter()
            .zip(&ib)
            .map(|(&i, &j)| f(ta.data()[i], tb.data()[j]))
            .collect();
        Tensor::new(shape, data)
    }

    fn reduce(&self, op: &'static str, x: Var, axes: &[usize]) -> Result<Tensor, AutodiffError> {
        let shape = self.shape(x);
        let reduced = reduced_shape(op, &shape, axes)?;
        let map = BroadcastMap::new(&shape, &reduced).indices();
        let mut out = Tensor::zeros(&reduced);
        let od = out.data_mut();
        for (&v, &g) in self.value(x).data().iter().zip(&map) {
            od[g] += v;
        }
        Ok(out)
    }

    /// Gradients of the one-element tensor `output` with respect to every
    /// recorded node. Leaves the parameter store untouched.
    pub fn gradients(&self, output: Var) -> Result<Gradients, AutodiffError> {
        if !self.value(output).is_scalar() {
            return Err(AutodiffError::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(output).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(Tensor::full(self.value(output).shape(), 1.0));
        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            let mut contributions = self.backward_rule(node, &g)?;
            if self.fault == Some(node.op.primitive()) {
                for (_, t) in &mut contributions {
                    t.data_mut().iter_mut().for_each(|v| *v = -*v);
                }
            }
            for (var, t) in contributions {
                match &mut grads[var.0] {
                    Some(acc) => acc.add_assign(&t),
                    slot @ None => *slot = Some(t),
                }
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Back-propagates `loss` and adds each parameter leaf's gradient into
    /// its buffer in `params`.
    pub fn backward(&self, loss: Var, params: &mut ParameterStore) -> Result<Gradients, AutodiffError> {
        let grads = self.gradients(loss)?;
        for (idx, node) in self.nodes.iter().enumerate() {
            if let (Some(id), Some(g)) = (node.param, grads.grads[idx].as_ref()) {
                params.accumulate(id, g);
            }
        }
        Ok(grads)
    }

    fn backward_rule(&self, node: &Node, g: &Tensor) -> Result<Vec<(Var, Tensor)>, AutodiffError> {
        let y = &node.value;
        let unary = |x: Var, f: &dyn Fn(usize) -> f64| -> Vec<(Var, Tensor)> {
            let data = (0..self.value(x).len()).map(f).collect();
            vec![(x, Tensor::new(self.shape(x), data).expect("shape preserved"))]
        };
        let out = match &node.op {
            Op::Leaf => Vec::new(),
            Op::Linear { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (din, dout) = (wv.shape()[0], wv.shape()[1]);
                let rows = xv.len() / din;
                let mut dx = vec![0.0; xv.len()];
                gemm(g.data(), wv.data(), &mut dx, rows, dout, din, false, true);
                let mut dw = vec![0.0; din * dout];
                gemm(xv.data(), g.data(), &mut dw, din, rows, dout, true, false);
                let mut db = vec![0.0; dout];
                for row in g.data().chunks(dout) {
                    for (d, &v) in db.iter_mut().zip(row) {
                        *d += v;
                    }
                }
                vec![
                    (*x, Tensor::new(xv.shape().to_vec(), dx)?),
                    (*w, Tensor::new(wv.shape().to_vec(), dw)?),
                    (*b, Tensor::new(vec![dout], db)?),
                ]
            }
            Op::MatMul { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (sa, sb) = (av.shape(), bv.shape());
                let mut da = vec![0.0; av.len()];
                let mut db = vec![0.0; bv.len()];
                match (sa.len(), sb.len()) {
                    (3, 3) => {
                        let (batch, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
                        for bi in 0..batch {
                            let gs = &g.data()[bi * m * n..(bi + 1) * m * n];
                            gemm(
                                gs,
                                &bv.data()[bi * k * n..(bi + 1) * k * n],
                                &mut da[bi * m * k..(bi + 1) * m * k],
                                m,
                                n,
                                k,
                                false,
                                true,
                            );
                            gemm(
                                &av.data()[bi * m * k..(bi + 1) * m * k],
                                gs,
                                &mut db[bi * k * n..(bi + 1) * k * n],
                                k,
                                m,
                                n,
                                true,
                                false,
                            );
                        }
                    }
                    _ => {
                        let k = sb[0];
                        let n = sb[1];
                        let m = av.len() / k;
                        gemm(g.data(), bv.data(), &mut da, m, n, k, false, true);
                        gemm(av.data(), g.data(), &mut db, k, m, n, true, false);
                    }
                }
                vec![(*a, Tensor::new(sa.to_vec(), da)?), (*b, Tensor::new(sb.to_vec(), db)?)]
            }
            Op::Add(a, b) => {
                vec![self.unbroadcast(*a, g, |_, gv| gv), self.unbroadcast(*b, g, |_, gv| gv)]
            }
            Op::Sub(a, b) => {
                vec![
                    self.unbroadcast(*a, g, |_, gv| gv),
                    self.unbroadcast(*b, g, |_, gv| -gv),
                ]
            }
            Op::Mul(a, b) => {
                let (pa, pb) = self.operand_maps(y.shape(), *a, *b);
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                vec![
                    self.unbroadcast(*a, g, |i, gv| gv * bv[pb[i]]),
                    self.unbroadcast(*b, g, |i, gv| gv * av[pa[i]]),
                ]
            }
            Op::Div(a, b) => {
                let (pa, pb) = self.operand_maps(y.shape(), *a, *b);
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                vec![
                    self.unbroadcast(*a, g, |i, gv| gv / bv[pb[i]]),
                    self.unbroadcast(*b, g, |i, gv| -gv * av[pa[i]] / (bv[pb[i]] * bv[pb[i]])),
                ]
            }
            Op::Affine { x, scale } => unary(*x, &|i| g.data()[i] * scale),
            Op::Sigmoid(x) => unary(*x, &|i| {
                let s = y.data()[i];
                g.data()[i] * s * (1.0 - s)
            }),
            Op::Tanh(x) => unary(*x, &|i| {
                let t = y.data()[i];
                g.data()[i] * (1.0 - t * t)
            }),
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                unary(*x, &|i| if xv[i] > 0.0 { g.data()[i] } else { 0.0 })
            }
            Op::Exp(x) => unary(*x, &|i| g.data()[i] * y.data()[i]),
            Op::Log(x) => {
                let xv = self.value(*x).data();
                unary(*x, &|i| g.data()[i] / xv[i])
            }
            Op::Clamp { x, lo, hi } => {
                let xv = self.value(*x).data();
                unary(*x, &|i| {
                    if xv[i] >= *lo && xv[i] <= *hi {
                        g.data()[i]
                    } else {
                        0.0
                    }
                })
            }
            Op::Softmax { x, axes } => {
                let shape = y.shape();
                let reduced = reduced_shape("softmax", shape, axes)?;
                let map = BroadcastMap::new(shape, &reduced).indices();
                let mut dots = vec![0.0; reduced.iter().product()];
                for ((&gv, &yv), &gi) in g.data().iter().zip(y.data()).zip(&map) {
                    dots[gi] += gv * yv;
                }
                unary(*x, &|i| y.data()[i] * (g.data()[i] - dots[map[i]]))
            }
            Op::Concat { parts, axis } => {
                let shape = y.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total = shape[*axis] * inner;
                let mut offset = 0;
                let mut res = Vec::with_capacity(parts.len());
                for &p in parts {
                    let ps = self.shape(p);
                    let chunk = ps[*axis] * inner;
                    let mut data = Vec::with_capacity(ps.iter().product());
                    for o in 0..outer {
                        let start = o * total + offset;
                        data.extend_from_slice(&g.data()[start..start + chunk]);
                    }
                    offset += chunk;
                    res.push((p, Tensor::new(ps, data)?));
                }
                res
            }
            Op::Transpose(x) => vec![(*x, transpose_last(g))],
            Op::Sum { x, .. } | Op::Mean { x, .. } => {
                let shape = self.shape(*x);
                let map = BroadcastMap::new(&shape, y.shape()).indices();
                let scale = match node.op {
                    Op::Mean { .. } => y.len() as f64 / self.value(*x).len() as f64,
                    _ => 1.0,
                };
                unary(*x, &|i| g.data()[map[i]] * scale)
            }
            Op::Reshape(x) => vec![(*x, g.clone().reshape(&self.shape(*x))?)],
        };
        Ok(out)
    }

    fn operand_maps(&self, out_shape: &[usize], a: Var, b: Var) -> (Vec<usize>, Vec<usize>) {
        (
            BroadcastMap::new(out_shape, self.value(a).shape()).indices(),
            BroadcastMap::new(out_shape, self.value(b).shape()).indices(),
        )
    }

    /// Reduces an output-shaped gradient onto operand `x`, summing over the
    /// axes along which `x` was broadcast. `f` receives the output flat index.
    fn unbroadcast(&self, x: Var, g: &Tensor, f: impl Fn(usize, f64) -> f64) -> (Var, Tensor) {
        let xs = self.shape(x);
        let mut out = Tensor::zeros(&xs);
        if xs == g.shape() {
            for (i, (o, &gv)) in out.data_mut().iter_mut().zip(g.data()).enumerate() {
                *o = f(i, gv);
            }
        } else {
            let map = BroadcastMap::new(g.shape(), &xs).indices();
            let od = out.data_mut();
            for (i, (&gv, &j)) in g.data().iter().zip(&map).enumerate() {
                od[j] += f(i, gv);
            }
        }
        (x, out)
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn reduced_shape(op: &'static str, shape: &[usize], axes: &[usize]) -> Result<Vec<usize>, AutodiffError> {
    if axes.is_empty() {
        return Err(AutodiffError::Usage(format!("{op} needs a nonempty axis set")));
    }
    let mut out = shape.to_vec();
    for &a in axes {
        if a >= shape.len() {
            return Err(AutodiffError::Usage(format!(
                "{op} axis {a} out of range for shape {shape:?}"
            )));
        }
        out[a] = 1;
    }
    Ok(out)
}

fn transpose_last(t: &Tensor) -> Tensor {
    let shape = t.shape();
    let r = shape.len();
    let (m, n) = (shape[r - 2], shape[r - 1]);
    let batch = t.len() / (m * n);
    let mut out = vec![0.0; t.len()];
    for b in 0..batch {
        let src = &t.data()[b * m * n..(b + 1) * m * n];
        let dst = &mut out[b * m * n..(b + 1) * m * n];
        for i in 0..m {
            for j in 0..n {
                dst[j * m + i] = src[i * n + j];
            }
        }
    }
    let mut new_shape = shape.to_vec();
    new_shape.swap(r - 2, r - 1);
    Tensor::new(new_shape, out).expect("transpose preserves size")
}

/// `c += op(a) * op(b)` where `op(a)` is `m x k` and `op(b)` is `k x n`.
/// With `ta`, `a` is stored `k x m`; with `tb`, `b` is stored `n x k`.
#[allow(clippy::too_many_arguments)]
fn gemm(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize, ta: bool, tb: bool) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = if ta { a[p * m + i] } else { a[i * k + p] };
            if av == 0.0 {
                continue;
            }
            if tb {
                for (j, cv) in crow.iter_mut().enumerate() {
                    *cv += av * b[j * k + p];
                }
            } else {
                let brow = &b[p * n..(p + 1) * n];
                for (cv, &bv) in crow.iter_mut().zip(brow) {
                    *cv += av * bv;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn linear_identity_and_hand_product() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1, 2], &[1.0, 2.0]));
        let w = tape.leaf(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let b = tape.leaf(t(&[2], &[0.0, 0.0]));
        let y = tape.linear(x, w, b).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0]);

        let x = tape.leaf(t(&[1, 2], &[1.0, 1.0]));
        let w = tape.leaf(t(&[2, 1], &[2.0, 3.0]));
        let b = tape.leaf(t(&[1], &[1.0]));
        let y = tape.linear(x, w, b).unwrap();
        assert_eq!(tape.value(y).data(), &[6.0]);
    }

    #[test]
    fn linear_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[4, 2]));
        let w = tape.leaf(Tensor::zeros(&[3, 5]));
        let b = tape.leaf(Tensor::zeros(&[5]));
        let err = tape.linear(x, w, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[4, 2]") && msg.contains("[3, 5]"), "{msg}");
    }

    #[test]
    fn sigmoid_values() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[3], &[0.0, 1.0, 40.0]));
        let y = tape.sigmoid(x);
        let v = tape.value(y).data();
        assert_eq!(v[0], 0.5);
        assert!((v[1] - 0.731_058_578_630_004_9).abs() < 1e-12);
        assert!(v[2] <= 1.0 && v[2] > 0.999_999);
        let mut prev = 0.0;
        for i in 0..50 {
            let s = sigmoid(i as f64 * 0.5);
            assert!(s >= prev);
            prev = s;
        }
    }

    #[test]
    fn softmax_examples() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1, 2], &[0.0, 3f64.ln()]));
        let y = tape.softmax(x, &[1]).unwrap();
        let v = tape.value(y).data();
        assert!((v[0] - 0.25).abs() < 1e-12 && (v[1] - 0.75).abs() < 1e-12);

        let x = tape.leaf(Tensor::full(&[2, 4], 1.3));
        let y = tape.softmax(x, &[1]).unwrap();
        assert!(tape.value(y).data().iter().all(|&p| (p - 0.25).abs() < 1e-12));

        let x = tape.leaf(t(&[4], &[0.0, 20.0, 0.0, 0.0]));
        let y = tape.softmax(x, &[0]).unwrap();
        assert!(tape.value(y).data()[1] > 0.999);

        assert!(tape.softmax(x, &[]).is_err());
    }

    #[test]
    fn joint_softmax_over_two_axes_sums_to_one() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_fn(&[2, 3, 4], |i| (i as f64 * 0.37).sin()));
        let y = tape.softmax(x, &[1, 2]).unwrap();
        let v = tape.value(y).data();
        let first: f64 = v[..12].iter().sum();
        let second: f64 = v[12..].iter().sum();
        assert!((first - 1.0).abs() < 1e-12 && (second - 1.0).abs() < 1e-12);
    }

    #[test]
    fn backward_of_sum_is_ones_and_of_half_square_is_identity() {
        let mut store = ParameterStore::new();
        let w = t(&[2, 3], &[0.5, -1.0, 2.0, 0.0, 3.0, -0.25]);
        let id = store.insert("w", super::super::Group::Shared, w.clone()).unwrap();

        let mut tape = Tape::new();
        let wv = tape.param(&store, id);
        let s = tape.sum_all(wv).unwrap();
        tape.backward(s, &mut store).unwrap();
        assert!(store.get(id).grad.data().iter().all(|&g| g == 1.0));

        store.zero_grads();
        let mut tape = Tape::new();
        let wv = tape.param(&store, id);
        let sq = tape.mul(wv, wv).unwrap();
        let s = tape.sum_all(sq).unwrap();
        let half = tape.affine(s, 0.5, 0.0);
        tape.backward(half, &mut store).unwrap();
        assert_eq!(store.get(id).grad, w);
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut store = ParameterStore::new();
        let id = store
            .insert("w", super::super::Group::Audio, Tensor::full(&[3], 2.0))
            .unwrap();
        let mut tape = Tape::new();
        let w = tape.param(&store, id);
        let s = tape.sum_all(w).unwrap();
        tape.backward(s, &mut store).unwrap();
        tape.backward(s, &mut store).unwrap();
        assert_eq!(store.get(id).grad.data(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut store = ParameterStore::new();
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2]));
        assert!(matches!(tape.backward(x, &mut store), Err(AutodiffError::Usage(_))));
    }

    #[test]
    fn concat_and_transpose_values() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[1, 2, 1], &[1.0, 2.0]));
        let b = tape.leaf(t(&[1, 1, 1], &[3.0]));
        let c = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(tape.value(c).shape(), &[1, 3, 1]);
        assert_eq!(tape.value(c).data(), &[1.0, 2.0, 3.0]);

        let m = tape.leaf(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let mt = tape.transpose(m).unwrap();
        assert_eq!(tape.value(mt).shape(), &[3, 2]);
        assert_eq!(tape.value(mt).data(), &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
    }

    #[test]
    fn primitive_names_round_trip() {
        for p in Primitive::DIFFERENTIABLE {
            assert_eq!(Primitive::from_name(p.name()), Some(p));
        }
    }
}
