//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] is an append-only tape: every operation evaluates eagerly and
//! records its inputs, so node order is already a topological order. The
//! backward rule of every operation is itself written with graph
//! operations. That makes gradients ordinary nodes, which is what the
//! gradient penalty needs: `‖∇ₓD(x)‖` is differentiated a second time with
//! respect to the discriminator weights.
//!
//! [`Graph::backward`] is the usual first-order pass. It stores plain
//! gradient tensors and drops the gradient sub-graph afterwards.
//! [`Graph::grad`] keeps the gradient nodes so they can be differentiated
//! again.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::{self, broadcast_shape, ConvGeom, Padding, Tensor};

/// Negative-side slope used by discriminators.
pub const LEAKY_SLOPE: f64 = 0.1;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
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
    Exp(Var),
    Ln(Var),
    Sqrt(Var),
    Square(Var),
    Tanh(Var),
    Sigmoid(Var),
    Softplus(Var),
    Relu(Var),
    LeakyRelu(Var, f64),
    BroadcastTo(Var),
    SumTo(Var),
    Reshape(Var),
    Transpose(Var),
    MatMul(Var, Var),
    Conv { x: Var, k: Var, geo: ConvGeom },
    ConvInputGrad { g: Var, k: Var, geo: ConvGeom },
    ConvKernelGrad { x: Var, g: Var, geo: ConvGeom },
    Upsample(Var, usize),
    SumPool(Var, usize),
    GatherRows(Var, Rc<[usize]>),
    ScatterRows(Var, Rc<[usize]>),
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Differentiation graph. Confined to one thread; independent graphs share
/// nothing.
#[derive(Default, Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
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

    /// A leaf that gradients flow into.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, true)
    }

    /// A leaf treated as a constant.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, false)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.constant(Tensor::scalar(v))
    }

    /// Constant copy of `v`'s current value; gradients stop here.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    fn push_leaf(&mut self, value: Tensor, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let needs_grad = self.inputs(&op).iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn inputs(&self, op: &Op) -> Vec<Var> {
        use Op::*;
        match *op {
            Leaf => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) | MatMul(a, b) => vec![a, b],
            Neg(a) | Scale(a, _) | Offset(a) | Exp(a) | Ln(a) | Sqrt(a) | Square(a) | Tanh(a)
            | Sigmoid(a) | Softplus(a) | Relu(a) | LeakyRelu(a, _) | BroadcastTo(a)
            | SumTo(a) | Reshape(a) | Transpose(a) | Upsample(a, _) | SumPool(a, _) => vec![a],
            GatherRows(a, _) | ScatterRows(a, _) => vec![a],
            Conv { x, k, .. } => vec![x, k],
            ConvInputGrad { g, k, .. } => vec![g, k],
            ConvKernelGrad { x, g, .. } => vec![x, g],
        }
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Gradient populated by the last [`Graph::backward`] call.
    pub fn gradient(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    // ----- elementwise -------------------------------------------------

    fn broadcast_pair(&mut self, op: &'static str, a: Var, b: Var) -> Result<(Var, Var)> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa == sb {
            return Ok((a, b));
        }
        let shape = broadcast_shape(&sa, &sb).ok_or_else(|| Error::dim(op, &sa, &sb))?;
        let a = if sa != shape { self.broadcast_to(a, &shape)? } else { a };
        let b = if sb != shape { self.broadcast_to(b, &shape)? } else { b };
        Ok((a, b))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        make: fn(Var, Var) -> Op,
        f: fn(f64, f64) -> f64,
    ) -> Result<Var> {
        let (a, b) = self.broadcast_pair(name, a, b)?;
        let value = self.value(a).zip_map(self.value(b), f)?;
        Ok(self.push(value, make(a, b)))
    }

    /// Elementwise sum with broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, Op::Add, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, Op::Sub, |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, Op::Mul, |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, Op::Div, |x, y| x / y)
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let value = self.value(a).map(f);
        self.push(value, op)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(a, Op::Neg(a), |x| -x)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::Scale(a, c), |x| c * x)
    }

    /// `a + c` for a constant scalar `c`.
    pub fn offset(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::Offset(a), |x| x + c)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(a, Op::Ln(a), f64::ln)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sqrt(a), f64::sqrt)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Op::Square(a), |x| x * x)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a), f64::tanh)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    /// `ln(1 + eˣ)`, evaluated without overflow.
    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, Op::Softplus(a), softplus)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |x| x.max(0.0))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        self.unary(a, Op::LeakyRelu(a, slope), |x| if x > 0.0 { x } else { slope * x })
    }

    // ----- shape -------------------------------------------------------

    pub fn broadcast_to(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if self.shape(a) == shape {
            return Ok(a);
        }
        let value = self.value(a).broadcast_to(shape)?;
        Ok(self.push(value, Op::BroadcastTo(a)))
    }

    pub fn sum_to(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if self.shape(a) == shape {
            return Ok(a);
        }
        let value = self.value(a).sum_to(shape)?;
        Ok(self.push(value, Op::SumTo(a)))
    }

    /// Sum of all elements as a rank-0 tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        self.push(value, Op::SumTo(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    fn reduced_shape(&self, a: Var, axes: &[usize]) -> Result<(Vec<usize>, usize)> {
        let shape = self.shape(a);
        if axes.is_empty() {
            return Err(Error::Argument("empty reduction".into()));
        }
        let mut keep = shape.to_vec();
        let mut count = 1;
        for &ax in axes {
            if ax >= shape.len() || keep[ax] == 0 {
                return Err(Error::Argument(format!(
                    "invalid reduction axes {axes:?} for shape {shape:?}"
                )));
            }
            count *= keep[ax];
            keep[ax] = 1;
        }
        Ok((keep, count))
    }

    /// Sum over `axes`, keeping them as extent-1 axes.
    pub fn sum_axes(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let (keep, _) = self.reduced_shape(a, axes)?;
        self.sum_to(a, &keep)
    }

    pub fn mean_axes(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let (keep, count) = self.reduced_shape(a, axes)?;
        let s = self.sum_to(a, &keep)?;
        Ok(self.scale(s, 1.0 / count as f64))
    }

    /// Per-feature mean and biased variance over `axes`. Both results keep
    /// the reduced axes with extent 1 so they broadcast back onto `a`.
    pub fn batch_moments(&mut self, a: Var, axes: &[usize]) -> Result<(Var, Var)> {
        let mean = self.mean_axes(a, axes)?;
        let centered = self.sub(a, mean)?;
        let sq = self.square(centered);
        let var = self.mean_axes(sq, axes)?;
        Ok((mean, var))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if self.shape(a) == shape {
            return Ok(a);
        }
        let value = self.value(a).reshape(shape.to_vec())?;
        Ok(self.push(value, Op::Reshape(a)))
    }

    /// Flattens everything after the leading (batch) axis.
    pub fn flatten(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a);
        let n = shape[0];
        let rest = shape[1..].iter().product();
        self.reshape(a, &[n, rest])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).transpose2d()?;
        Ok(self.push(value, Op::Transpose(a)))
    }

    // ----- linear algebra ----------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    pub fn conv2d(&mut self, x: Var, k: Var, stride: usize, padding: Padding) -> Result<Var> {
        let (xs, ks) = (self.shape(x), self.shape(k));
        if xs.len() != 4 || ks.len() != 4 {
            return Err(Error::dim("conv2d", xs, ks));
        }
        let pads = padding.resolve(xs[1], xs[2], ks[0], ks[1], stride);
        let geo = ConvGeom::new(xs, ks, stride, pads)?;
        let value = tensor::conv2d_geom(&geo, self.value(x), self.value(k));
        Ok(self.push(value, Op::Conv { x, k, geo }))
    }

    fn conv_input_grad(&mut self, g: Var, k: Var, geo: ConvGeom) -> Var {
        let value = tensor::conv2d_input_grad(&geo, self.value(g), self.value(k));
        self.push(value, Op::ConvInputGrad { g, k, geo })
    }

    fn conv_kernel_grad(&mut self, x: Var, g: Var, geo: ConvGeom) -> Var {
        let value = tensor::conv2d_kernel_grad(&geo, self.value(x), self.value(g));
        self.push(value, Op::ConvKernelGrad { x, g, geo })
    }

    fn conv_forward(&mut self, x: Var, k: Var, geo: ConvGeom) -> Var {
        let value = tensor::conv2d_geom(&geo, self.value(x), self.value(k));
        self.push(value, Op::Conv { x, k, geo })
    }

    pub fn upsample_nearest(&mut self, a: Var, factor: usize) -> Result<Var> {
        let value = tensor::upsample_nearest(self.value(a), factor)?;
        Ok(self.push(value, Op::Upsample(a, factor)))
    }

    pub fn sum_pool(&mut self, a: Var, factor: usize) -> Result<Var> {
        let value = tensor::sum_pool(self.value(a), factor)?;
        Ok(self.push(value, Op::SumPool(a, factor)))
    }

    pub fn avg_pool(&mut self, a: Var, factor: usize) -> Result<Var> {
        let s = self.sum_pool(a, factor)?;
        Ok(self.scale(s, 1.0 / (factor * factor) as f64))
    }

    /// Sum over the spatial axes of an `N×H×W×C` tensor, giving `N×C`.
    pub fn global_sum_pool(&mut self, a: Var) -> Result<Var> {
        let &[n, _, _, c] = self.shape(a) else {
            return Err(Error::dim("global_sum_pool", self.shape(a), &[0, 0, 0, 0]));
        };
        let s = self.sum_to(a, &[n, 1, 1, c])?;
        self.reshape(s, &[n, c])
    }

    /// Row lookup `table[idx[i]]`.
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let value = tensor::gather_rows(self.value(table), idx)?;
        Ok(self.push(value, Op::GatherRows(table, idx.into())))
    }

    fn scatter_rows(&mut self, src: Var, idx: Rc<[usize]>, rows: usize) -> Result<Var> {
        let value = tensor::scatter_add_rows(self.value(src), &idx, rows)?;
        Ok(self.push(value, Op::ScatterRows(src, idx)))
    }

    // ----- differentiation ---------------------------------------------

    fn check_scalar_root(&self, root: Var) -> Result<()> {
        if self.value(root).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar root, got shape {:?}",
                self.shape(root)
            )));
        }
        Ok(())
    }

    /// Builds gradient nodes for every node up to `root`.
    fn build_grads(&mut self, root: Var) -> Result<Vec<Option<Var>>> {
        self.check_scalar_root(root)?;
        let n = root.0 + 1;
        let mut grads: Vec<Option<Var>> = vec![None; n];
        let seed = Tensor::ones(self.shape(root).to_vec());
        grads[root.0] = Some(self.constant(seed));
        for i in (0..n).rev() {
            let Some(g) = grads[i] else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            for (input, contrib) in self.vjp(i, g)? {
                grads[input.0] = Some(match grads[input.0] {
                    None => contrib,
                    Some(prev) => self.add(prev, contrib)?,
                });
            }
        }
        Ok(grads)
    }

    /// First-order backward pass from a scalar `root`. Afterwards
    /// [`Graph::gradient`] returns the gradient of every node that requires
    /// one and is reachable from `root`. Calling again recomputes from
    /// scratch.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let base = self.nodes.len();
        self.grads.clear();
        let grads = self.build_grads(root)?;
        self.grads = grads
            .iter()
            .enumerate()
            .map(|(i, g)| match g {
                Some(g) if self.nodes[i].needs_grad => Some(self.nodes[g.0].value.clone()),
                _ => None,
            })
            .collect();
        self.nodes.truncate(base);
        Ok(())
    }

    /// Gradients of `root` with respect to `wrt`, kept as differentiable
    /// nodes. Unreached inputs get a constant zero.
    pub fn grad(&mut self, root: Var, wrt: &[Var]) -> Result<Vec<Var>> {
        let grads = self.build_grads(root)?;
        Ok(wrt
            .iter()
            .map(|&w| match grads.get(w.0).copied().flatten() {
                Some(g) => g,
                None => {
                    let z = Tensor::zeros(self.shape(w).to_vec());
                    self.constant(z)
                }
            })
            .collect())
    }

    fn vjp(&mut self, i: usize, g: Var) -> Result<Vec<(Var, Var)>> {
        use Op::*;
        let y = Var(i);
        let op = self.nodes[i].op.clone();
        let mut out = Vec::with_capacity(2);
        let want = |s: &Self, v: Var| s.nodes[v.0].needs_grad;
        match op {
            Leaf => {}
            Add(a, b) => {
                if want(self, a) {
                    out.push((a, g));
                }
                if want(self, b) {
                    out.push((b, g));
                }
            }
            Sub(a, b) => {
                if want(self, a) {
                    out.push((a, g));
                }
                if want(self, b) {
                    let ng = self.neg(g);
                    out.push((b, ng));
                }
            }
            Mul(a, b) => {
                if want(self, a) {
                    let d = self.mul(g, b)?;
                    out.push((a, d));
                }
                if want(self, b) {
                    let d = self.mul(g, a)?;
                    out.push((b, d));
                }
            }
            Div(a, b) => {
                if want(self, a) {
                    let d = self.div(g, b)?;
                    out.push((a, d));
                }
                if want(self, b) {
                    let gy = self.mul(g, y)?;
                    let q = self.div(gy, b)?;
                    let d = self.neg(q);
                    out.push((b, d));
                }
            }
            Neg(a) => {
                let d = self.neg(g);
                out.push((a, d));
            }
            Scale(a, c) => {
                let d = self.scale(g, c);
                out.push((a, d));
            }
            Offset(a) => out.push((a, g)),
            Exp(a) => {
                let d = self.mul(g, y)?;
                out.push((a, d));
            }
            Ln(a) => {
                let d = self.div(g, a)?;
                out.push((a, d));
            }
            Sqrt(a) => {
                let two_y = self.scale(y, 2.0);
                let d = self.div(g, two_y)?;
                out.push((a, d));
            }
            Square(a) => {
                let two_a = self.scale(a, 2.0);
                let d = self.mul(g, two_a)?;
                out.push((a, d));
            }
            Tanh(a) => {
                let y2 = self.square(y);
                let ny2 = self.neg(y2);
                let dy = self.offset(ny2, 1.0);
                let d = self.mul(g, dy)?;
                out.push((a, d));
            }
            Sigmoid(a) => {
                let ny = self.neg(y);
                let one_minus = self.offset(ny, 1.0);
                let dy = self.mul(y, one_minus)?;
                let d = self.mul(g, dy)?;
                out.push((a, d));
            }
            Softplus(a) => {
                let s = self.sigmoid(a);
                let d = self.mul(g, s)?;
                out.push((a, d));
            }
            Relu(a) => {
                let mask = self.value(a).map(|x| if x > 0.0 { 1.0 } else { 0.0 });
                let m = self.constant(mask);
                let d = self.mul(g, m)?;
                out.push((a, d));
            }
            LeakyRelu(a, slope) => {
                let mask = self.value(a).map(|x| if x > 0.0 { 1.0 } else { slope });
                let m = self.constant(mask);
                let d = self.mul(g, m)?;
                out.push((a, d));
            }
            BroadcastTo(a) => {
                let s = self.shape(a).to_vec();
                let d = self.sum_to(g, &s)?;
                out.push((a, d));
            }
            SumTo(a) => {
                let s = self.shape(a).to_vec();
                let d = self.broadcast_to(g, &s)?;
                out.push((a, d));
            }
            Reshape(a) => {
                let s = self.shape(a).to_vec();
                let d = self.reshape(g, &s)?;
                out.push((a, d));
            }
            Transpose(a) => {
                let d = self.transpose(g)?;
                out.push((a, d));
            }
            MatMul(a, b) => {
                if want(self, a) {
                    let bt = self.transpose(b)?;
                    let d = self.matmul(g, bt)?;
                    out.push((a, d));
                }
                if want(self, b) {
                    let at = self.transpose(a)?;
                    let d = self.matmul(at, g)?;
                    out.push((b, d));
                }
            }
            // The three convolution ops are the partial derivatives of the
            // trilinear form <conv(x,k), g>, so each one's adjoint is one of
            // the other two.
            Conv { x, k, geo } => {
                if want(self, x) {
                    let d = self.conv_input_grad(g, k, geo);
                    out.push((x, d));
                }
                if want(self, k) {
                    let d = self.conv_kernel_grad(x, g, geo);
                    out.push((k, d));
                }
            }
            ConvInputGrad { g: up, k, geo } => {
                if want(self, up) {
                    let d = self.conv_forward(g, k, geo);
                    out.push((up, d));
                }
                if want(self, k) {
                    let d = self.conv_kernel_grad(g, up, geo);
                    out.push((k, d));
                }
            }
            ConvKernelGrad { x, g: up, geo } => {
                if want(self, x) {
                    let d = self.conv_input_grad(up, g, geo);
                    out.push((x, d));
                }
                if want(self, up) {
                    let d = self.conv_forward(x, g, geo);
                    out.push((up, d));
                }
            }
            Upsample(a, f) => {
                let d = self.sum_pool(g, f)?;
                out.push((a, d));
            }
            SumPool(a, f) => {
                let d = self.upsample_nearest(g, f)?;
                out.push((a, d));
            }
            GatherRows(table, idx) => {
                let rows = self.shape(table)[0];
                let d = self.scatter_rows(g, idx, rows)?;
                out.push((table, d));
            }
            ScatterRows(src, idx) => {
                let d = self.gather_rows(g, &idx)?;
                out.push((src, d));
            }
        }
        Ok(out)
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Largest relative error between reverse-mode and central-difference
/// gradients of the scalar `f` with respect to each of `inputs`.
///
/// Each difference starts at `step`. Where the estimates at `h` and `h/2`
/// disagree the stencil is taken to cross a non-smooth point and `h` is
/// divided by ten, at most three times.
///
/// The error for one input is `‖a − n‖ / max(‖a‖, ‖n‖, floor)` over the
/// whole gradient tensor, with `floor = 1e-6 · max(1, |f|, ‖∇f‖)` and
/// `‖∇f‖` the norm over all inputs together. Without the floor a gradient
/// that is exactly zero (a bias feeding batch normalization, say) would be
/// compared against pure rounding noise.
pub fn gradcheck<F>(inputs: &[Tensor], step: f64, mut f: F) -> Result<f64>
where
    F: FnMut(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |f: &mut F, xs: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|x| g.param(x.clone())).collect();
        let out = f(&mut g, &vars)?;
        if g.shape(out).iter().product::<usize>() != 1 {
            return Err(Error::dim("gradcheck", g.shape(out), &[]));
        }
        Ok(g.value(out).data()[0])
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|x| g.param(x.clone())).collect();
    let out = f(&mut g, &vars)?;
    let f0 = g.value(out).data()[0].abs();
    g.backward(out)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(v, x)| g.gradient(*v).cloned().unwrap_or_else(|| Tensor::zeros(x.shape().to_vec())))
        .collect();
    let total = analytic.iter().map(|t| t.frobenius_norm().powi(2)).sum::<f64>().sqrt();
    let floor = 1e-6 * f0.max(total).max(1.0);
    let mut xs = inputs.to_vec();
    let mut worst = 0.0f64;
    for i in 0..xs.len() {
        let mut numeric = vec![0.0; xs[i].len()];
        for (k, slot) in numeric.iter_mut().enumerate() {
            let orig = xs[i].data()[k];
            let mut central = |h: f64| -> Result<f64> {
                xs[i].data_mut()[k] = orig + h;
                let up = eval(&mut f, &xs)?;
                xs[i].data_mut()[k] = orig - h;
                let down = eval(&mut f, &xs)?;
                xs[i].data_mut()[k] = orig;
                Ok((up - down) / (2.0 * h))
            };
            // A stencil that straddles a kink (relu, hinge) gives
            // estimates that change with the step; shrink until two
            // successive steps agree.
            let mut h = step;
            let mut coarse = central(h)?;
            let mut fine = central(h / 2.0)?;
            for _ in 0..3 {
                if (coarse - fine).abs() <= 1e-7 * coarse.abs().max(1.0) {
                    break;
                }
                h /= 10.0;
                coarse = central(h)?;
                fine = central(h / 2.0)?;
            }
            *slot = fine;
        }
        let a = analytic[i].data();
        let diff = a.iter().zip(&numeric).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nn = numeric.iter().map(|x| x * x).sum::<f64>().sqrt();
        worst = worst.max(diff / na.max(nn).max(floor));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_form_gradient_is_weight() {
        let mut g = Graph::new();
        let w = g.constant(Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap());
        let x = g.param(Tensor::new(vec![3], vec![4.0, 5.0, 6.0]).unwrap());
        let wx = g.mul(w, x).unwrap();
        let root = g.sum(wx);
        g.backward(root).unwrap();
        assert_eq!(g.gradient(x).unwrap().data(), &[1.0, -2.0, 0.5]);
        assert!(g.gradient(w).is_none());
    }

    #[test]
    fn sigmoid_at_zero_has_quarter_slope() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(0.0));
        let s = g.sigmoid(x);
        g.backward(s).unwrap();
        assert_eq!(g.gradient(x).unwrap().item(), 0.25);
    }

    #[test]
    fn gradcheck_accepts_correct_and_flags_wrong_gradients() {
        let x = Tensor::new(vec![3], vec![0.3, -1.2, 2.0]).unwrap();
        let ok = gradcheck(std::slice::from_ref(&x), 1e-5, |g, v| {
            let t = g.tanh(v[0]);
            Ok(g.sum(t))
        })
        .unwrap();
        assert!(ok < 1e-8, "{ok}");
        // `detach` hides the dependence from reverse mode but not from
        // finite differences.
        let bad = gradcheck(&[x], 1e-5, |g, v| {
            let d = g.detach(v[0]);
            let sq = g.square(d);
            Ok(g.sum(sq))
        })
        .unwrap();
        assert!(bad > 0.5);
    }

    #[test]
    fn non_scalar_root_is_rejected() {
        let mut g = Graph::new();
        let x = g.param(Tensor::zeros(vec![2]));
        let y = g.tanh(x);
        assert!(matches!(g.backward(y), Err(Error::Contract(_))));
    }

    #[test]
    fn repeated_backward_reproduces_gradients() {
        let mut g = Graph::new();
        let x = g.param(Tensor::new(vec![2], vec![0.3, -0.7]).unwrap());
        let t = g.tanh(x);
        let sq = g.square(t);
        let root = g.sum(sq);
        let len = g.len();
        g.backward(root).unwrap();
        let first = g.gradient(x).unwrap().clone();
        g.backward(root).unwrap();
        assert_eq!(g.gradient(x).unwrap(), &first);
        assert_eq!(g.len(), len);
    }

    #[test]
    fn second_derivative_through_grad() {
        // d/dx (d/dx x³) = 6x
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(1.5));
        let x2 = g.square(x);
        let x3 = g.mul(x2, x).unwrap();
        let [dx] = g.grad(x3, &[x]).unwrap()[..] else { panic!() };
        assert!((g.value(dx).item() - 3.0 * 1.5 * 1.5).abs() < 1e-12);
        g.backward(dx).unwrap();
        assert!((g.gradient(x).unwrap().item() - 9.0).abs() < 1e-12);
    }

    #[test]
    fn upsample_backward_counts_replicas() {
        let mut g = Graph::new();
        let x = g.param(Tensor::new(vec![1, 2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let up = g.upsample_nearest(x, 2).unwrap();
        assert_eq!(
            g.value(up).data(),
            &[1., 1., 2., 2., 1., 1., 2., 2., 3., 3., 4., 4., 3., 3., 4., 4.]
        );
        let s = g.sum(up);
        g.backward(s).unwrap();
        assert_eq!(g.gradient(x).unwrap().data(), &[4.0; 4]);
        let same = g.upsample_nearest(x, 1).unwrap();
        assert_eq!(g.value(same), g.value(x));
        assert!(g.upsample_nearest(x, 0).is_err());
    }

    #[test]
    fn batch_moments_hand_case() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![2, 1], vec![1.0, 3.0]).unwrap());
        let (m, v) = g.batch_moments(x, &[0]).unwrap();
        assert_eq!(g.value(m).data(), &[2.0]);
        assert_eq!(g.value(v).data(), &[1.0]);
        let c = g.constant(Tensor::full(vec![4, 3], 2.5));
        let (_, v) = g.batch_moments(c, &[0]).unwrap();
        assert_eq!(g.value(v).data(), &[0.0; 3]);
        assert!(g.batch_moments(c, &[]).is_err());
        assert!(g.batch_moments(c, &[2]).is_err());
    }

    #[test]
    fn stable_scalar_functions() {
        assert!(softplus(800.0).is_finite());
        assert_eq!(softplus(-800.0), 0.0);
        assert_eq!(sigmoid(-800.0), 0.0);
        assert!((softplus(0.0) - 2f64.ln()).abs() < 1e-15);
    }
}
