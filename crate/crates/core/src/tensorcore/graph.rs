use super::kernels::{self, ConvGeom};
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpKind {
    Leaf,
    Conv2d,
    Upsample,
    Relu,
    Add,
    Mul,
    Softplus,
    Scale,
    SoftmaxChannels,
    Sum,
    Mean,
    L2Normalize,
    SliceChannels,
    Functional,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        geom: ConvGeom,
    },
    Upsample {
        input: Var,
        factor: usize,
    },
    Relu(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Softplus(Var),
    Scale(Var, T),
    SoftmaxChannels(Var),
    Sum(Var),
    Mean(Var),
    L2Normalize {
        input: Var,
        eps: T,
    },
    SliceChannels {
        input: Var,
        start: usize,
        len: usize,
    },
    /// Scalar function of its inputs whose gradient was computed eagerly.
    Functional(Vec<(Var, Tensor<T>)>),
}

impl<T> Op<T> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::Upsample { .. } => OpKind::Upsample,
            Op::Relu(_) => OpKind::Relu,
            Op::Add(..) => OpKind::Add,
            Op::Mul(..) => OpKind::Mul,
            Op::Softplus(_) => OpKind::Softplus,
            Op::Scale(..) => OpKind::Scale,
            Op::SoftmaxChannels(_) => OpKind::SoftmaxChannels,
            Op::Sum(_) => OpKind::Sum,
            Op::Mean(_) => OpKind::Mean,
            Op::L2Normalize { .. } => OpKind::L2Normalize,
            Op::SliceChannels { .. } => OpKind::SliceChannels,
            Op::Functional(_) => OpKind::Functional,
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Conv2d {
                input, weight, bias, ..
            } => vec![*input, *weight, *bias],
            Op::Upsample { input, .. } | Op::L2Normalize { input, .. } | Op::SliceChannels { input, .. } => {
                vec![*input]
            }
            Op::Relu(a) | Op::Softplus(a) | Op::Scale(a, _) | Op::SoftmaxChannels(a) | Op::Sum(a) | Op::Mean(a) => {
                vec![*a]
            }
            Op::Add(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Functional(parts) => parts.iter().map(|(v, _)| *v).collect(),
        }
    }
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Tape of recorded operations. Nodes are appended as ops run, so the node
/// list is always in topological order.
#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    /// Gradient for `var`, or zeros if the loss does not depend on it.
    pub fn wrt(&self, var: Var) -> Tensor<T> {
        match self.get(var) {
            Some(g) => g.clone(),
            None => Tensor::zeros(self.shapes[var.0].clone()),
        }
    }

    pub fn take(&mut self, var: Var) -> Tensor<T> {
        match self.grads[var.0].take() {
            Some(g) => g,
            None => Tensor::zeros(self.shapes[var.0].clone()),
        }
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Op kind and input ids of every record, in recording order.
    pub fn records(&self) -> Vec<(OpKind, Vec<Var>, Var)> {
        self.nodes
            .iter()
            .enumerate()
            .map(|(i, n)| (n.op.kind(), n.op.inputs(), Var(i)))
            .collect()
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn record(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(value, op, requires_grad)
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, stride: usize, padding: usize) -> Result<Var> {
        let (x, w, b) = (self.value(input), self.value(weight), self.value(bias));
        let geom = kernels::conv_geom(x, w, b, stride, padding)?;
        let out = kernels::conv2d_forward(&geom, x.data(), w.data(), b.data());
        let value = Tensor::new(vec![geom.n, geom.out_c, geom.out_h, geom.out_w], out)?;
        Ok(self.record(
            value,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            },
        ))
    }

    pub fn bilinear_upsample(&mut self, input: Var, factor: usize) -> Result<Var> {
        let value = kernels::upsample_forward(self.value(input), factor)?;
        Ok(self.record(value, Op::Upsample { input, factor }))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let value = self.value(input).map(|x| if x > T::zero() { x } else { T::zero() });
        self.record(value, Op::Relu(input))
    }

    pub fn softplus(&mut self, input: Var) -> Var {
        let value = self.value(input).map(softplus);
        self.record(value, Op::Softplus(input))
    }

    pub fn scale(&mut self, input: Var, factor: T) -> Var {
        let value = self.value(input).map(|x| x * factor);
        self.record(value, Op::Scale(input, factor))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.broadcast("add", a, b, |x, y| x + y)?;
        Ok(self.record(value, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.broadcast("mul", a, b, |x, y| x * y)?;
        Ok(self.record(value, Op::Mul(a, b)))
    }

    fn broadcast(&self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() == tb.shape() {
            let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::new(ta.shape().to_vec(), data)
        } else if tb.is_scalar() {
            let s = tb.data()[0];
            Ok(ta.map(|x| f(x, s)))
        } else if ta.is_scalar() {
            let s = ta.data()[0];
            Ok(tb.map(|y| f(s, y)))
        } else {
            Err(Error::shape(op, ta.shape(), tb.shape()))
        }
    }

    pub fn softmax_channels(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let [n, c, h, w] = x.dims4("softmax_channels")?;
        if c == 0 {
            return Err(Error::invalid("softmax over zero channels"));
        }
        let plane = h * w;
        let src = x.data();
        let mut out = vec![T::zero(); src.len()];
        for b in 0..n {
            let base = b * c * plane;
            for p in 0..plane {
                let mut max = T::neg_infinity();
                for k in 0..c {
                    max = max.max(src[base + k * plane + p]);
                }
                let mut total = T::zero();
                for k in 0..c {
                    let e = (src[base + k * plane + p] - max).exp();
                    out[base + k * plane + p] = e;
                    total = total + e;
                }
                for k in 0..c {
                    let o = &mut out[base + k * plane + p];
                    *o = *o / total;
                }
            }
        }
        let value = Tensor::new(x.shape().to_vec(), out)?;
        Ok(self.record(value, Op::SoftmaxChannels(input)))
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let s = self.value(input).data().iter().copied().sum();
        self.record(Tensor::scalar(s), Op::Sum(input))
    }

    pub fn mean(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let s: T = x.data().iter().copied().sum();
        let m = s / T::cast(x.numel() as f64);
        self.record(Tensor::scalar(m), Op::Mean(input))
    }

    /// Per-pixel L2 normalization across channels: `x / max(|x|, eps)`.
    pub fn l2_normalize_channels(&mut self, input: Var, eps: T) -> Result<Var> {
        let x = self.value(input);
        let [n, c, h, w] = x.dims4("l2_normalize")?;
        let plane = h * w;
        let src = x.data();
        let mut out = vec![T::zero(); src.len()];
        for b in 0..n {
            let base = b * c * plane;
            for p in 0..plane {
                let norm = channel_norm(src, base, c, plane, p).max(eps);
                for k in 0..c {
                    out[base + k * plane + p] = src[base + k * plane + p] / norm;
                }
            }
        }
        let value = Tensor::new(x.shape().to_vec(), out)?;
        Ok(self.record(value, Op::L2Normalize { input, eps }))
    }

    pub fn slice_channels(&mut self, input: Var, start: usize, len: usize) -> Result<Var> {
        let x = self.value(input);
        let [n, c, h, w] = x.dims4("slice_channels")?;
        if len == 0 || start + len > c {
            return Err(Error::invalid(format!(
                "channel slice {start}..{} out of range for {c} channels",
                start + len
            )));
        }
        let plane = h * w;
        let mut out = Vec::with_capacity(n * len * plane);
        for b in 0..n {
            out.extend_from_slice(&x.data()[(b * c + start) * plane..][..len * plane]);
        }
        let value = Tensor::new(vec![n, len, h, w], out)?;
        Ok(self.record(value, Op::SliceChannels { input, start, len }))
    }

    /// Records a scalar `value` computed outside the graph from the given
    /// inputs, together with its gradient with respect to each input.
    pub fn functional(&mut self, value: T, parts: Vec<(Var, Tensor<T>)>) -> Result<Var> {
        for (v, g) in &parts {
            if self.value(*v).shape() != g.shape() {
                return Err(Error::shape("functional", self.value(*v).shape(), g.shape()));
            }
        }
        Ok(self.record(Tensor::scalar(value), Op::Functional(parts)))
    }

    /// Reverse pass from a scalar `loss`. Gradients are summed over every
    /// path; leaves that do not reach the loss get no entry (see
    /// [`Gradients::wrt`]).
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::shape("backward (loss must be scalar)", lv.shape(), &[]));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(lv.shape().to_vec()));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(gout) = grads[idx].take() else {
                continue;
            };
            self.backprop_node(node, &gout, &mut grads)?;
            grads[idx] = Some(gout);
        }
        // Only leaves keep their gradients.
        for (g, n) in grads.iter_mut().zip(&self.nodes) {
            if !matches!(n.op, Op::Leaf) || !n.requires_grad {
                *g = None;
            }
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], var: Var, g: Tensor<T>) {
        if !self.nodes[var.0].requires_grad {
            return;
        }
        match &mut grads[var.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn backprop_node(&self, node: &Node<T>, gout: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let go = gout.data();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            } => {
                let want = [
                    self.requires_grad(*input),
                    self.requires_grad(*weight),
                    self.requires_grad(*bias),
                ];
                let cg =
                    kernels::conv2d_backward(geom, self.value(*input).data(), self.value(*weight).data(), go, want);
                if let Some(g) = cg.input {
                    self.accumulate(grads, *input, Tensor::new(self.value(*input).shape().to_vec(), g)?);
                }
                if let Some(g) = cg.weight {
                    self.accumulate(grads, *weight, Tensor::new(self.value(*weight).shape().to_vec(), g)?);
                }
                if let Some(g) = cg.bias {
                    self.accumulate(grads, *bias, Tensor::new(self.value(*bias).shape().to_vec(), g)?);
                }
            }
            Op::Upsample { input, factor } => {
                let shape = self.value(*input).shape().to_vec();
                let g = kernels::upsample_backward(&shape, *factor, go);
                self.accumulate(grads, *input, Tensor::new(shape, g)?);
            }
            Op::Relu(a) => {
                let x = self.value(*a);
                let g = x
                    .data()
                    .iter()
                    .zip(go)
                    .map(|(&x, &g)| if x > T::zero() { g } else { T::zero() })
                    .collect();
                self.accumulate(grads, *a, Tensor::new(x.shape().to_vec(), g)?);
            }
            Op::Softplus(a) => {
                let x = self.value(*a);
                let g = x.data().iter().zip(go).map(|(&x, &g)| g * sigmoid(x)).collect();
                self.accumulate(grads, *a, Tensor::new(x.shape().to_vec(), g)?);
            }
            Op::Scale(a, s) => {
                let g = gout.map(|g| g * *s);
                self.accumulate(grads, *a, g);
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    let g = reduce_broadcast(self.value(v), gout, |g, _| g);
                    self.accumulate(grads, v, g);
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let ga = reduce_broadcast(ta, gout, |g, i| g * pick(tb, i));
                let gb = reduce_broadcast(tb, gout, |g, i| g * pick(ta, i));
                self.accumulate(grads, *a, ga);
                self.accumulate(grads, *b, gb);
            }
            Op::SoftmaxChannels(a) => {
                let y = &node.value;
                let [n, c, h, w] = y.dims4("softmax_channels")?;
                let plane = h * w;
                let yd = y.data();
                let mut g = vec![T::zero(); yd.len()];
                for b in 0..n {
                    let base = b * c * plane;
                    for p in 0..plane {
                        let mut dot = T::zero();
                        for k in 0..c {
                            let i = base + k * plane + p;
                            dot = dot + yd[i] * go[i];
                        }
                        for k in 0..c {
                            let i = base + k * plane + p;
                            g[i] = yd[i] * (go[i] - dot);
                        }
                    }
                }
                self.accumulate(grads, *a, Tensor::new(y.shape().to_vec(), g)?);
            }
            Op::Sum(a) => {
                let shape = self.value(*a).shape().to_vec();
                self.accumulate(grads, *a, Tensor::full(shape, go[0]));
            }
            Op::Mean(a) => {
                let x = self.value(*a);
                let g = go[0] / T::cast(x.numel() as f64);
                self.accumulate(grads, *a, Tensor::full(x.shape().to_vec(), g));
            }
            Op::L2Normalize { input, eps } => {
                let x = self.value(*input);
                let y = &node.value;
                let [n, c, h, w] = x.dims4("l2_normalize")?;
                let plane = h * w;
                let (xd, yd) = (x.data(), y.data());
                let mut g = vec![T::zero(); xd.len()];
                for b in 0..n {
                    let base = b * c * plane;
                    for p in 0..plane {
                        let norm = channel_norm(xd, base, c, plane, p);
                        if norm > *eps {
                            let mut dot = T::zero();
                            for k in 0..c {
                                let i = base + k * plane + p;
                                dot = dot + yd[i] * go[i];
                            }
                            for k in 0..c {
                                let i = base + k * plane + p;
                                g[i] = (go[i] - yd[i] * dot) / norm;
                            }
                        } else {
                            for k in 0..c {
                                let i = base + k * plane + p;
                                g[i] = go[i] / *eps;
                            }
                        }
                    }
                }
                self.accumulate(grads, *input, Tensor::new(x.shape().to_vec(), g)?);
            }
            Op::SliceChannels { input, start, len } => {
                let x = self.value(*input);
                let [n, c, h, w] = x.dims4("slice_channels")?;
                let plane = h * w;
                let mut g = vec![T::zero(); x.numel()];
                for b in 0..n {
                    g[(b * c + start) * plane..][..len * plane].copy_from_slice(&go[b * len * plane..][..len * plane]);
                }
                self.accumulate(grads, *input, Tensor::new(x.shape().to_vec(), g)?);
            }
            Op::Functional(parts) => {
                for (v, g) in parts {
                    let s = go[0];
                    self.accumulate(grads, *v, g.map(|x| x * s));
                }
            }
        }
        Ok(())
    }
}

fn channel_norm<T: Real>(data: &[T], base: usize, c: usize, plane: usize, p: usize) -> T {
    let mut ss = T::zero();
    for k in 0..c {
        let v = data[base + k * plane + p];
        ss = ss + v * v;
    }
    ss.sqrt()
}

fn pick<T: Real>(t: &Tensor<T>, i: usize) -> T {
    if t.is_scalar() {
        t.data()[0]
    } else {
        t.data()[i]
    }
}

/// Maps the output gradient back onto an operand, summing when the operand
/// was a broadcast scalar.
fn reduce_broadcast<T: Real>(operand: &Tensor<T>, gout: &Tensor<T>, f: impl Fn(T, usize) -> T) -> Tensor<T> {
    if operand.shape() == gout.shape() {
        Tensor::from_fn(gout.shape().to_vec(), |i| f(gout.data()[i], i))
    } else {
        let s = gout.data().iter().enumerate().map(|(i, &g)| f(g, i)).sum();
        Tensor::full(operand.shape().to_vec(), s)
    }
}

pub(crate) fn softplus<T: Real>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}
