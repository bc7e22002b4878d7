use super::kernels::{self, ConvGeom};
use super::optim::{ParamId, ParamStore};
use super::{Element, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Elementwise operations.
#[derive(Clone, Copy, Debug)]
pub enum Pointwise {
    Relu,
    Sigmoid,
    /// Same shape, or a `[C]` / `[1, C, 1, 1]` per-channel operand.
    Add(Var),
    Mul(Var),
    Scale(f64),
}

enum Op<T> {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        geom: ConvGeom,
    },
    Deconv2d {
        input: Var,
        weight: Var,
        bias: Var,
        geom: ConvGeom,
    },
    Relu(Var),
    Sigmoid(Var),
    Add(Var, Var),
    AddChannel(Var, Var),
    Mul(Var, Var),
    MulChannel(Var, Var),
    Scale(Var, T),
    Sum(Var),
    /// Scalar function with its input gradients evaluated at forward time.
    Scalar {
        inputs: Vec<Var>,
        grads: Vec<Vec<T>>,
    },
}

impl<T> Op<T> {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => Vec::new(),
            Op::Conv2d { input, weight, bias, .. } | Op::Deconv2d { input, weight, bias, .. } => vec![*input, *weight, *bias],
            Op::Relu(x) | Op::Sigmoid(x) | Op::Scale(x, _) | Op::Sum(x) => vec![*x],
            Op::Add(a, b) | Op::AddChannel(a, b) | Op::Mul(a, b) | Op::MulChannel(a, b) => vec![*a, *b],
            Op::Scalar { inputs, .. } => inputs.clone(),
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    param: Option<ParamId>,
    /// Whether any parameter or differentiable input reaches this node.
    requires_grad: bool,
}

/// Wengert list of executed operations. Nodes are stored in execution order,
/// so a reverse sweep sees every consumer of a value before its producer.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    grad_enabled: bool,
    threads: usize,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Per-node gradients produced by [`Tape::gradients`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Element> Gradients<T> {
    /// Gradient of the loss with respect to `v`; zeros if `v` does not reach it.
    pub fn get(&self, v: Var, len: usize) -> Vec<T> {
        self.grads[v.0]
            .clone()
            .unwrap_or_else(|| vec![T::zero(); len])
    }

    pub fn try_get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grad_enabled: true,
            threads: 1,
        }
    }

    /// Tape that keeps values but records no backward information.
    pub fn inference() -> Self {
        Tape {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn with_threads(mut self, threads: usize) -> Self {
        self.threads = threads.max(1);
        self
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Leaf that takes no part in differentiation.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(value, None, false)
    }

    /// Differentiable leaf; its gradient is available from [`Tape::gradients`].
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(value, None, true)
    }

    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let value = store.get(id).value.clone();
        self.push_leaf(value, Some(id), true)
    }

    fn push_leaf(&mut self, mut value: Tensor<T>, param: Option<ParamId>, requires_grad: bool) -> Var {
        value.clear_grad();
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            param,
            requires_grad: requires_grad && self.grad_enabled,
        });
        Var(self.nodes.len() - 1)
    }

    fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push_checked(&mut self, mut value: Tensor<T>, op: Op<T>, what: &str) -> Result<Var> {
        value.ensure_finite(what)?;
        value.clear_grad();
        let requires_grad = self.grad_enabled && op.inputs().iter().any(|&v| self.requires_grad(v));
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            param: None,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn conv_geom(&self, input: Var, weight: Var, bias: Var, stride: usize, pad: usize) -> Result<ConvGeom> {
        let (n, cin, h, w) = self.value(input).dims4()?;
        let (cout, wcin, kh, kw) = self.value(weight).dims4()?;
        if wcin != cin {
            return Err(Error::shape(format!(
                "conv2d: input has {cin} channels, weight expects {wcin}"
            )));
        }
        check_bias(self.value(bias), cout)?;
        ConvGeom::forward(n, cin, h, w, cout, kh, kw, stride, pad)
    }

    /// Cross-correlation of `[N, Cin, H, W]` with `[Cout, Cin, kh, kw]` plus bias.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, stride: usize, padding: usize) -> Result<Var> {
        let geom = self.conv_geom(input, weight, bias, stride, padding)?;
        let out = kernels::conv_forward(
            self.value(input).data(),
            self.value(weight).data(),
            self.value(bias).data(),
            &geom,
            self.threads,
        );
        let value = Tensor::new(vec![geom.n, geom.cout, geom.oh, geom.ow], out)?;
        self.push_checked(
            value,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            },
            "conv2d",
        )
    }

    /// Transposed convolution with weight `[Cin, Cout, kh, kw]`; output spatial
    /// extent is `input · stride`. The op is the adjoint of `conv2d` run with the
    /// same weight, stride and padding.
    pub fn deconv2d(&mut self, input: Var, weight: Var, bias: Var, stride: usize, padding: usize) -> Result<Var> {
        let (n, cin, h, w) = self.value(input).dims4()?;
        let (wcin, cout, kh, kw) = self.value(weight).dims4()?;
        if wcin != cin {
            return Err(Error::shape(format!(
                "deconv2d: input has {cin} channels, weight expects {wcin}"
            )));
        }
        check_bias(self.value(bias), cout)?;
        let (oh, ow) = (h * stride, w * stride);
        // forward-conv view: [cout, oh, ow] -> [cin, h, w]
        let geom = ConvGeom::forward(n, cout, oh, ow, cin, kh, kw, stride, padding)?;
        if geom.oh != h || geom.ow != w {
            return Err(Error::shape(format!(
                "deconv2d: kernel {kh}x{kw}, stride {stride}, padding {padding} cannot map {h}x{w} to {oh}x{ow}"
            )));
        }
        let out = kernels::deconv_forward(
            self.value(input).data(),
            self.value(weight).data(),
            self.value(bias).data(),
            &geom,
            self.threads,
        );
        let value = Tensor::new(vec![n, cout, oh, ow], out)?;
        self.push_checked(
            value,
            Op::Deconv2d {
                input,
                weight,
                bias,
                geom,
            },
            "deconv2d",
        )
    }

    pub fn pointwise(&mut self, input: Var, kind: Pointwise) -> Result<Var> {
        match kind {
            Pointwise::Relu => self.relu(input),
            Pointwise::Sigmoid => self.sigmoid(input),
            Pointwise::Add(other) => self.add(input, other),
            Pointwise::Mul(other) => self.mul(input, other),
            Pointwise::Scale(c) => self.scale(input, c),
        }
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let data = x.data().iter().map(|&v| v.max(T::zero())).collect();
        let value = Tensor::new(x.shape().to_vec(), data)?;
        self.push_checked(value, Op::Relu(input), "relu")
    }

    pub fn sigmoid(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let data = x.data().iter().map(|&v| sigmoid(v)).collect();
        let value = Tensor::new(x.shape().to_vec(), data)?;
        self.push_checked(value, Op::Sigmoid(input), "sigmoid")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (xa, xb) = (self.value(a), self.value(b));
        if xa.shape() == xb.shape() {
            let data = xa.data().iter().zip(xb.data()).map(|(&p, &q)| p + q).collect();
            let value = Tensor::new(xa.shape().to_vec(), data)?;
            return self.push_checked(value, Op::Add(a, b), "add");
        }
        let (c, plane) = channel_layout(xa, xb)?;
        let mut data = xa.data().to_vec();
        let bias = xb.data();
        for (k, chunk) in data.chunks_mut(plane).enumerate() {
            let bv = bias[k % c];
            chunk.iter_mut().for_each(|v| *v = *v + bv);
        }
        let value = Tensor::new(xa.shape().to_vec(), data)?;
        self.push_checked(value, Op::AddChannel(a, b), "add")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (xa, xb) = (self.value(a), self.value(b));
        if xa.shape() == xb.shape() {
            let data = xa.data().iter().zip(xb.data()).map(|(&p, &q)| p * q).collect();
            let value = Tensor::new(xa.shape().to_vec(), data)?;
            return self.push_checked(value, Op::Mul(a, b), "mul");
        }
        let (c, plane) = channel_layout(xa, xb)?;
        let mut data = xa.data().to_vec();
        let scale = xb.data();
        for (k, chunk) in data.chunks_mut(plane).enumerate() {
            let sv = scale[k % c];
            chunk.iter_mut().for_each(|v| *v = *v * sv);
        }
        let value = Tensor::new(xa.shape().to_vec(), data)?;
        self.push_checked(value, Op::MulChannel(a, b), "mul")
    }

    pub fn scale(&mut self, input: Var, c: f64) -> Result<Var> {
        let c = T::of(c);
        let x = self.value(input);
        let data = x.data().iter().map(|&v| v * c).collect();
        let value = Tensor::new(x.shape().to_vec(), data)?;
        self.push_checked(value, Op::Scale(input, c), "scale")
    }

    pub fn sum(&mut self, input: Var) -> Result<Var> {
        let total = self
            .value(input)
            .data()
            .iter()
            .fold(T::zero(), |acc, &v| acc + v);
        self.push_checked(Tensor::scalar(total), Op::Sum(input), "sum")
    }

    /// Record a scalar-valued function of `inputs` whose gradients were
    /// computed in closed form by the caller.
    pub fn scalar_fn(&mut self, value: T, inputs: Vec<Var>, grads: Vec<Vec<T>>) -> Result<Var> {
        if inputs.len() != grads.len() {
            return Err(Error::contract("scalar_fn: one gradient per input required"));
        }
        for (v, g) in inputs.iter().zip(&grads) {
            if self.value(*v).numel() != g.len() {
                return Err(Error::shape(format!(
                    "scalar_fn: gradient length {} for input of {} elements",
                    g.len(),
                    self.value(*v).numel()
                )));
            }
        }
        self.push_checked(Tensor::scalar(value), Op::Scalar { inputs, grads }, "scalar_fn")
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn gradients(&self, loss: Var) -> Result<Gradients<T>> {
        if !self.grad_enabled {
            return Err(Error::contract("backward on an inference tape"));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let Some(dy) = grads[idx].take() else {
                continue;
            };
            self.backprop_node(idx, &dy, &mut grads)?;
            grads[idx] = Some(dy);
        }
        for (idx, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                if let Some(i) = g.iter().position(|v| !v.is_finite()) {
                    return Err(Error::numeric(format!(
                        "non-finite gradient at node {idx}, element {i}"
                    )));
                }
            }
        }
        Ok(Gradients { grads })
    }

    /// Reverse sweep from `loss` writing `∂loss/∂param` into every parameter of
    /// `store`. Parameters not reached by the loss receive zeros.
    pub fn backward(&self, loss: Var, store: &mut ParamStore<T>) -> Result<()> {
        let grads = self.gradients(loss)?;
        let mut acc: Vec<Vec<T>> = store
            .iter()
            .map(|p| vec![T::zero(); p.value.numel()])
            .collect();
        for (idx, node) in self.nodes.iter().enumerate() {
            if let (Some(id), Some(g)) = (node.param, grads.grads[idx].as_ref()) {
                let slot = &mut acc[id.index()];
                slot.iter_mut().zip(g).for_each(|(a, &v)| *a = *a + v);
            }
        }
        for (p, g) in store.iter_mut().zip(acc) {
            p.value.set_grad(g)?;
        }
        Ok(())
    }

    fn backprop_node(&self, idx: usize, dy: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            } => {
                let (dx, dw, db) = kernels::conv_backward(
                    self.value(*input).data(),
                    self.value(*weight).data(),
                    dy,
                    geom,
                    self.threads,
                    self.requires_grad(*input),
                );
                if let Some(dx) = dx {
                    accumulate(grads, *input, dx);
                }
                accumulate(grads, *weight, dw);
                accumulate(grads, *bias, db);
            }
            Op::Deconv2d {
                input,
                weight,
                bias,
                geom,
            } => {
                let (dx, dw, db) = kernels::deconv_backward(
                    self.value(*input).data(),
                    self.value(*weight).data(),
                    dy,
                    geom,
                    self.threads,
                    self.requires_grad(*input),
                );
                if let Some(dx) = dx {
                    accumulate(grads, *input, dx);
                }
                accumulate(grads, *weight, dw);
                accumulate(grads, *bias, db);
            }
            Op::Relu(x) => {
                let g = self
                    .value(*x)
                    .data()
                    .iter()
                    .zip(dy)
                    .map(|(&v, &d)| if v > T::zero() { d } else { T::zero() })
                    .collect();
                accumulate(grads, *x, g);
            }
            Op::Sigmoid(x) => {
                let g = node
                    .value
                    .data()
                    .iter()
                    .zip(dy)
                    .map(|(&s, &d)| d * s * (T::one() - s))
                    .collect();
                accumulate(grads, *x, g);
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, dy.to_vec());
                accumulate(grads, *b, dy.to_vec());
            }
            Op::AddChannel(a, b) => {
                let (c, plane) = channel_layout(self.value(*a), self.value(*b))?;
                let mut gb = vec![T::zero(); c];
                for (k, chunk) in dy.chunks(plane).enumerate() {
                    gb[k % c] = chunk.iter().fold(gb[k % c], |s, &v| s + v);
                }
                accumulate(grads, *a, dy.to_vec());
                accumulate(grads, *b, gb);
            }
            Op::Mul(a, b) => {
                let (xa, xb) = (self.value(*a).data(), self.value(*b).data());
                let ga = dy.iter().zip(xb).map(|(&d, &v)| d * v).collect();
                let gb = dy.iter().zip(xa).map(|(&d, &v)| d * v).collect();
                accumulate(grads, *a, ga);
                accumulate(grads, *b, gb);
            }
            Op::MulChannel(a, b) => {
                let (c, plane) = channel_layout(self.value(*a), self.value(*b))?;
                let (xa, xb) = (self.value(*a).data(), self.value(*b).data());
                let mut ga = vec![T::zero(); xa.len()];
                let mut gb = vec![T::zero(); c];
                for (k, (dchunk, achunk)) in dy.chunks(plane).zip(xa.chunks(plane)).enumerate() {
                    let s = xb[k % c];
                    let gchunk = &mut ga[k * plane..(k + 1) * plane];
                    let mut acc = gb[k % c];
                    for ((g, &d), &v) in gchunk.iter_mut().zip(dchunk).zip(achunk) {
                        *g = d * s;
                        acc = acc + d * v;
                    }
                    gb[k % c] = acc;
                }
                accumulate(grads, *a, ga);
                accumulate(grads, *b, gb);
            }
            Op::Scale(x, c) => {
                accumulate(grads, *x, dy.iter().map(|&d| d * *c).collect());
            }
            Op::Sum(x) => {
                let n = self.value(*x).numel();
                accumulate(grads, *x, vec![dy[0]; n]);
            }
            Op::Scalar { inputs, grads: saved } => {
                for (v, g) in inputs.iter().zip(saved) {
                    accumulate(grads, *v, g.iter().map(|&x| x * dy[0]).collect());
                }
            }
        }
        Ok(())
    }
}

/// Numerically stable logistic function, the same one the tape uses.
pub fn sigmoid<T: Element>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

fn accumulate<T: Element>(grads: &mut [Option<Vec<T>>], v: Var, g: Vec<T>) {
    match &mut grads[v.0] {
        Some(existing) => existing.iter_mut().zip(g).for_each(|(e, x)| *e = *e + x),
        slot @ None => *slot = Some(g),
    }
}

fn check_bias<T: Element>(bias: &Tensor<T>, channels: usize) -> Result<()> {
    if bias.shape() != [channels] {
        return Err(Error::shape(format!(
            "bias shape {:?}, expected [{channels}]",
            bias.shape()
        )));
    }
    Ok(())
}

/// `(channels, plane)` for a 4-D `a` and a per-channel `b`.
fn channel_layout<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<(usize, usize)> {
    let (_, c, h, w) = a.dims4()?;
    let ok = b.shape() == [c] || b.shape() == [1, c, 1, 1];
    if !ok {
        return Err(Error::shape(format!(
            "operands {:?} and {:?} are neither equal nor per-channel",
            a.shape(),
            b.shape()
        )));
    }
    Ok((c, h * w))
}
