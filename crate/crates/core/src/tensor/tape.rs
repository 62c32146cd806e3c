use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

use super::kernels::{self, ConvGeom, Dims3};
use super::Tensor;
use crate::error::{Error, Result};

/// Position of a node on its tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    Matmul {
        a: NodeId,
        b: NodeId,
        m: usize,
        k: usize,
        n: usize,
    },
    Conv2d {
        x: NodeId,
        k: NodeId,
        bias: Option<NodeId>,
        xd: Dims3,
        od: Dims3,
        geom: ConvGeom,
    },
    TransposeConv2d {
        x: NodeId,
        k: NodeId,
        bias: Option<NodeId>,
        xd: Dims3,
        od: Dims3,
        geom: ConvGeom,
    },
    Relu(NodeId),
    LeakyRelu(NodeId, f64),
    Tanh(NodeId),
    Sigmoid(NodeId),
    Square(NodeId),
    Sqrt(NodeId),
    PowScalar(NodeId, f64),
    ClampMin(NodeId, f64),
    Reshape(NodeId),
    Pad {
        x: NodeId,
        in_shape: Vec<usize>,
        pads: Vec<(usize, usize)>,
    },
    Mean(NodeId),
    Sum(NodeId),
    GaussianBlur {
        x: NodeId,
        d: Dims3,
        window: Rc<[f64]>,
    },
    AvgPool2 {
        x: NodeId,
        d: Dims3,
    },
    StraightThrough(NodeId),
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Records operations for one forward pass. Not `Sync`; one tape per thread.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    check_finite: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape")
            .field("nodes", &self.nodes.borrow().len())
            .field("check_finite", &self.check_finite)
            .finish()
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: NodeId,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var").field("id", &self.id).finish()
    }
}

/// Gradients of a scalar loss keyed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.get_id(var.id)
    }

    pub fn get_id(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// Gradient for `var`, or zeros of its shape when the loss does not depend on it.
    pub fn wrt(&self, var: Var<'_>) -> Tensor {
        match self.get(var) {
            Some(g) => g.clone(),
            None => Tensor::zeros(var.value().shape().to_vec()),
        }
    }

    pub fn take(&mut self, var: Var<'_>) -> Option<Tensor> {
        self.grads.get_mut(var.id.0).and_then(Option::take)
    }
}

fn as_dims3(t: &Tensor, op: &'static str) -> Result<Dims3> {
    match *t.shape() {
        [c, h, w] => Ok(Dims3 { c, h, w }),
        ref s => Err(Error::shape(op, format!("expected [C, H, W], got {s:?}"))),
    }
}

fn same_shape(a: &Tensor, b: &Tensor, op: &'static str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            op,
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Tensor::new(a.shape().to_vec(), data).expect("shape preserved")
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::with_capacity(64)),
            check_finite: true,
        }
    }

    /// Tape that skips the per-operation finiteness check.
    pub fn unchecked() -> Self {
        Tape {
            check_finite: false,
            ..Tape::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Gradient-tracked leaf.
    pub fn var(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, false)
    }

    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op: Op::Leaf,
            requires_grad,
        });
        Var {
            tape: self,
            id: NodeId(nodes.len() - 1),
        }
    }

    fn value(&self, id: NodeId) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id.0].value)
    }

    fn tracked(&self, id: NodeId) -> bool {
        self.nodes.borrow()[id.0].requires_grad
    }

    fn push(
        &self,
        name: &'static str,
        value: Tensor,
        op: Op,
        parents: &[NodeId],
    ) -> Result<Var<'_>> {
        if self.check_finite && !value.is_finite() {
            return Err(Error::NonFinite(name));
        }
        let requires_grad = parents.iter().any(|&p| self.tracked(p));
        let op = if requires_grad { op } else { Op::Leaf };
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Ok(Var {
            tape: self,
            id: NodeId(nodes.len() - 1),
        })
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let root = self.value(loss.id);
        if !root.is_scalar() {
            return Err(Error::NonScalarLoss(root.shape().to_vec()));
        }
        if !self.tracked(loss.id) {
            return Err(Error::Detached);
        }
        let n = loss.id.0 + 1;
        let mut grads: Vec<Option<Tensor>> = (0..self.len()).map(|_| None).collect();
        grads[loss.id.0] = Some(Tensor::ones(root.shape().to_vec()));

        let nodes = self.nodes.borrow();
        for idx in (0..n).rev() {
            let node = &nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let out = &node.value;
            let val = |id: NodeId| Rc::clone(&nodes[id.0].value);
            let mut send = |id: NodeId, contrib: Tensor| {
                if !nodes[id.0].requires_grad {
                    return;
                }
                match &mut grads[id.0] {
                    Some(acc) => acc.add_assign(&contrib),
                    slot @ None => *slot = Some(contrib),
                }
            };
            match node.op {
                Op::Leaf => unreachable!(),
                Op::Add(a, b) => {
                    send(a, g.clone());
                    send(b, g);
                }
                Op::Sub(a, b) => {
                    send(b, g.map(|v| -v));
                    send(a, g);
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (val(a), val(b));
                    send(a, zip_map(&g, &bv, |g, y| g * y));
                    send(b, zip_map(&g, &av, |g, x| g * x));
                }
                Op::Div(a, b) => {
                    let (av, bv) = (val(a), val(b));
                    send(a, zip_map(&g, &bv, |g, y| g / y));
                    let ratio = zip_map(&av, &bv, |x, y| x / (y * y));
                    send(b, zip_map(&g, &ratio, |g, r| -g * r));
                }
                Op::Scale(a, c) => send(a, g.map(|v| v * c)),
                Op::AddScalar(a) => send(a, g),
                Op::Matmul { a, b, m, k, n } => {
                    let (av, bv) = (val(a), val(b));
                    if nodes[a.0].requires_grad {
                        let bt = kernels::transpose(bv.data(), k, n);
                        let ga = kernels::matmul(g.data(), &bt, m, n, k);
                        send(a, Tensor::new(av.shape().to_vec(), ga)?);
                    }
                    if nodes[b.0].requires_grad {
                        let at = kernels::transpose(av.data(), m, k);
                        let gb = kernels::matmul(&at, g.data(), k, m, n);
                        send(b, Tensor::new(bv.shape().to_vec(), gb)?);
                    }
                }
                Op::Conv2d {
                    x,
                    k,
                    bias,
                    xd,
                    od,
                    geom,
                } => {
                    let kv = val(k);
                    if nodes[x.0].requires_grad {
                        let gx = kernels::conv_backward_input(g.data(), od, kv.data(), geom, xd);
                        send(x, Tensor::new(vec![xd.c, xd.h, xd.w], gx)?);
                    }
                    if nodes[k.0].requires_grad {
                        let gk =
                            kernels::conv_backward_kernel(val(x).data(), xd, g.data(), od, geom);
                        send(k, Tensor::new(kv.shape().to_vec(), gk)?);
                    }
                    if let Some(b) = bias {
                        send(b, Tensor::from_vec(kernels::channel_sums(g.data(), od)));
                    }
                }
                Op::TransposeConv2d {
                    x,
                    k,
                    bias,
                    xd,
                    od,
                    geom,
                } => {
                    // Forward was the input-adjoint of a convolution mapping od -> xd.
                    let kv = val(k);
                    if nodes[x.0].requires_grad {
                        let gx = kernels::conv_forward(g.data(), od, kv.data(), geom, xd);
                        send(x, Tensor::new(vec![xd.c, xd.h, xd.w], gx)?);
                    }
                    if nodes[k.0].requires_grad {
                        let gk =
                            kernels::conv_backward_kernel(g.data(), od, val(x).data(), xd, geom);
                        send(k, Tensor::new(kv.shape().to_vec(), gk)?);
                    }
                    if let Some(b) = bias {
                        send(b, Tensor::from_vec(kernels::channel_sums(g.data(), od)));
                    }
                }
                Op::Relu(a) => {
                    let av = val(a);
                    send(a, zip_map(&g, &av, |g, x| if x > 0.0 { g } else { 0.0 }));
                }
                Op::LeakyRelu(a, slope) => {
                    let av = val(a);
                    send(
                        a,
                        zip_map(&g, &av, |g, x| if x > 0.0 { g } else { slope * g }),
                    );
                }
                Op::Tanh(a) => send(a, zip_map(&g, out, |g, y| g * (1.0 - y * y))),
                Op::Sigmoid(a) => send(a, zip_map(&g, out, |g, y| g * y * (1.0 - y))),
                Op::Square(a) => {
                    let av = val(a);
                    send(a, zip_map(&g, &av, |g, x| 2.0 * g * x));
                }
                Op::Sqrt(a) => send(a, zip_map(&g, out, |g, y| 0.5 * g / y)),
                Op::PowScalar(a, p) => {
                    let av = val(a);
                    send(a, zip_map(&g, &av, |g, x| g * p * x.powf(p - 1.0)));
                }
                Op::ClampMin(a, lo) => {
                    let av = val(a);
                    send(a, zip_map(&g, &av, |g, x| if x > lo { g } else { 0.0 }));
                }
                Op::Reshape(a) => {
                    let shape = nodes[a.0].value.shape().to_vec();
                    send(a, Tensor::new(shape, g.into_data())?);
                }
                Op::Pad {
                    x,
                    ref in_shape,
                    ref pads,
                } => {
                    let gx = unpad(&g, in_shape, pads);
                    send(x, gx);
                }
                Op::Mean(a) => {
                    let shape = nodes[a.0].value.shape().to_vec();
                    let n = nodes[a.0].value.len() as f64;
                    send(a, Tensor::full(shape, g.item() / n));
                }
                Op::Sum(a) => {
                    let shape = nodes[a.0].value.shape().to_vec();
                    send(a, Tensor::full(shape, g.item()));
                }
                Op::GaussianBlur { x, d, ref window } => {
                    let gx = kernels::blur_valid_adjoint(g.data(), d, window);
                    send(x, Tensor::new(vec![d.c, d.h, d.w], gx)?);
                }
                Op::AvgPool2 { x, d } => {
                    let gx = kernels::avg_pool2_adjoint(g.data(), d);
                    send(x, Tensor::new(vec![d.c, d.h, d.w], gx)?);
                }
                Op::StraightThrough(a) => send(a, g),
            }
        }
        Ok(Gradients { grads })
    }
}

fn unpad(g: &Tensor, in_shape: &[usize], pads: &[(usize, usize)]) -> Tensor {
    let out_shape = g.shape();
    let mut data = Vec::with_capacity(in_shape.iter().product());
    let rank = in_shape.len();
    let mut idx = vec![0usize; rank];
    let total: usize = in_shape.iter().product();
    for _ in 0..total {
        let mut flat = 0;
        for d in 0..rank {
            flat = flat * out_shape[d] + idx[d] + pads[d].0;
        }
        data.push(g.data()[flat]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < in_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    Tensor::new(in_shape.to_vec(), data).expect("unpad shape")
}

impl<'t> Var<'t> {
    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    /// Scalar value; panics on non-scalar.
    pub fn item(&self) -> f64 {
        self.value().item()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.tracked(self.id)
    }

    fn check_same_tape(&self, other: &Var<'t>) {
        assert!(
            std::ptr::eq(self.tape, other.tape),
            "vars belong to different tapes"
        );
    }

    fn binary(
        &self,
        other: Var<'t>,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var<'t>> {
        self.check_same_tape(&other);
        let (a, b) = (self.value(), other.value());
        same_shape(&a, &b, name)?;
        self.tape
            .push(name, zip_map(&a, &b, f), op, &[self.id, other.id])
    }

    fn unary(&self, name: &'static str, f: impl Fn(f64) -> f64, op: Op) -> Result<Var<'t>> {
        let v = self.value().map(f);
        self.tape.push(name, v, op, &[self.id])
    }

    pub fn add(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "add", |a, b| a + b, Op::Add(self.id, other.id))
    }

    pub fn sub(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "sub", |a, b| a - b, Op::Sub(self.id, other.id))
    }

    pub fn mul(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "mul", |a, b| a * b, Op::Mul(self.id, other.id))
    }

    pub fn div(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "div", |a, b| a / b, Op::Div(self.id, other.id))
    }

    pub fn scale(&self, c: f64) -> Result<Var<'t>> {
        self.unary("scale", |v| v * c, Op::Scale(self.id, c))
    }

    pub fn add_scalar(&self, c: f64) -> Result<Var<'t>> {
        self.unary("add_scalar", |v| v + c, Op::AddScalar(self.id))
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.check_same_tape(&other);
        let (a, b) = (self.value(), other.value());
        let (m, k, n) = match (a.shape(), b.shape()) {
            (&[m, k], &[k2, n]) if k == k2 => (m, k, n),
            (sa, sb) => return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}"))),
        };
        let out = Tensor::new(vec![m, n], kernels::matmul(a.data(), b.data(), m, k, n))?;
        self.tape.push(
            "matmul",
            out,
            Op::Matmul {
                a: self.id,
                b: other.id,
                m,
                k,
                n,
            },
            &[self.id, other.id],
        )
    }

    fn conv_geom(
        &self,
        kernel: &Tensor,
        bias: Option<Var<'t>>,
        stride: usize,
        pad: usize,
        transpose: bool,
        op: &'static str,
    ) -> Result<(Dims3, ConvGeom)> {
        let xv = self.value();
        let xd = as_dims3(&xv, op)?;
        let &[k0, k1, kh, kw] = kernel.shape() else {
            return Err(Error::shape(
                op,
                format!("kernel must be rank 4, got {:?}", kernel.shape()),
            ));
        };
        // Kernels are [C_out, C_in, KH, KW] for conv and [C_in, C_out, KH, KW] for
        // the transpose; either way the stored layout is that of the adjoint conv.
        let geom = ConvGeom {
            c_out: k0,
            c_in: k1,
            kh,
            kw,
            stride,
            pad,
        };
        let in_ch = if transpose { k0 } else { k1 };
        let out_ch = if transpose { k1 } else { k0 };
        if xd.c != in_ch {
            return Err(Error::shape(
                op,
                format!("input has {} channels, kernel expects {in_ch}", xd.c),
            ));
        }
        if stride == 0 {
            return Err(Error::shape(op, "stride must be positive"));
        }
        if let Some(b) = bias {
            if b.value().shape() != [out_ch] {
                return Err(Error::shape(
                    op,
                    format!("bias shape {:?}, expected [{out_ch}]", b.shape()),
                ));
            }
        }
        Ok((xd, geom))
    }

    /// Zero-padded strided cross-correlation; `kernel` is `[C_out, C_in, KH, KW]`.
    pub fn conv2d(
        &self,
        kernel: Var<'t>,
        bias: Option<Var<'t>>,
        stride: usize,
        pad: usize,
    ) -> Result<Var<'t>> {
        self.check_same_tape(&kernel);
        let kv = kernel.value();
        let (xd, geom) = self.conv_geom(&kv, bias, stride, pad, false, "conv2d")?;
        let (ho, wo) = geom.conv_out(xd.h, xd.w).ok_or_else(|| {
            Error::shape("conv2d", format!("kernel larger than padded input {xd:?}"))
        })?;
        let od = Dims3 {
            c: geom.c_out,
            h: ho,
            w: wo,
        };
        let mut out = kernels::conv_forward(self.value().data(), xd, kv.data(), geom, od);
        if let Some(b) = bias {
            kernels::add_channel_bias(&mut out, od, b.value().data());
        }
        let mut parents = vec![self.id, kernel.id];
        parents.extend(bias.map(|b| b.id));
        self.tape.push(
            "conv2d",
            Tensor::new(vec![od.c, od.h, od.w], out)?,
            Op::Conv2d {
                x: self.id,
                k: kernel.id,
                bias: bias.map(|b| b.id),
                xd,
                od,
                geom,
            },
            &parents,
        )
    }

    /// Adjoint of [`Var::conv2d`]; `kernel` is `[C_in, C_out, KH, KW]`.
    pub fn transpose_conv2d(
        &self,
        kernel: Var<'t>,
        bias: Option<Var<'t>>,
        stride: usize,
        pad: usize,
    ) -> Result<Var<'t>> {
        self.check_same_tape(&kernel);
        let kv = kernel.value();
        let (xd, geom) = self.conv_geom(&kv, bias, stride, pad, true, "transpose_conv2d")?;
        let (ho, wo) = geom
            .transpose_out(xd.h, xd.w)
            .ok_or_else(|| Error::shape("transpose_conv2d", "padding exceeds output"))?;
        let od = Dims3 {
            c: geom.c_in,
            h: ho,
            w: wo,
        };
        // Input plays the role of the conv output with c_out channels.
        let mut out = kernels::conv_backward_input(self.value().data(), xd, kv.data(), geom, od);
        if let Some(b) = bias {
            kernels::add_channel_bias(&mut out, od, b.value().data());
        }
        let mut parents = vec![self.id, kernel.id];
        parents.extend(bias.map(|b| b.id));
        self.tape.push(
            "transpose_conv2d",
            Tensor::new(vec![od.c, od.h, od.w], out)?,
            Op::TransposeConv2d {
                x: self.id,
                k: kernel.id,
                bias: bias.map(|b| b.id),
                xd,
                od,
                geom,
            },
            &parents,
        )
    }

    pub fn relu(&self) -> Result<Var<'t>> {
        self.unary("relu", |v| v.max(0.0), Op::Relu(self.id))
    }

    pub fn leaky_relu(&self, slope: f64) -> Result<Var<'t>> {
        self.unary(
            "leaky_relu",
            |v| if v > 0.0 { v } else { slope * v },
            Op::LeakyRelu(self.id, slope),
        )
    }

    pub fn tanh(&self) -> Result<Var<'t>> {
        self.unary("tanh", f64::tanh, Op::Tanh(self.id))
    }

    pub fn sigmoid(&self) -> Result<Var<'t>> {
        self.unary(
            "sigmoid",
            |v| 1.0 / (1.0 + (-v).exp()),
            Op::Sigmoid(self.id),
        )
    }

    pub fn square(&self) -> Result<Var<'t>> {
        self.unary("square", |v| v * v, Op::Square(self.id))
    }

    pub fn sqrt(&self) -> Result<Var<'t>> {
        self.unary("sqrt", f64::sqrt, Op::Sqrt(self.id))
    }

    pub fn powf(&self, p: f64) -> Result<Var<'t>> {
        self.unary("powf", |v| v.powf(p), Op::PowScalar(self.id, p))
    }

    pub fn clamp_min(&self, lo: f64) -> Result<Var<'t>> {
        self.unary("clamp_min", |v| v.max(lo), Op::ClampMin(self.id, lo))
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Var<'t>> {
        let v = self.value().reshape(shape)?;
        self.tape
            .push("reshape", v, Op::Reshape(self.id), &[self.id])
    }

    /// Zero padding; `pads[d] = (before, after)` for every dimension.
    pub fn pad(&self, pads: &[(usize, usize)]) -> Result<Var<'t>> {
        let xv = self.value();
        let in_shape = xv.shape().to_vec();
        if pads.len() != in_shape.len() {
            return Err(Error::shape(
                "pad",
                format!("{} pad pairs for rank {}", pads.len(), in_shape.len()),
            ));
        }
        let out_shape: Vec<usize> = in_shape
            .iter()
            .zip(pads)
            .map(|(d, (a, b))| d + a + b)
            .collect();
        let mut out = vec![0.0; out_shape.iter().product()];
        let rank = in_shape.len();
        let mut idx = vec![0usize; rank];
        for &v in xv.data() {
            let mut flat = 0;
            for d in 0..rank {
                flat = flat * out_shape[d] + idx[d] + pads[d].0;
            }
            out[flat] = v;
            for d in (0..rank).rev() {
                idx[d] += 1;
                if idx[d] < in_shape[d] {
                    break;
                }
                idx[d] = 0;
            }
        }
        self.tape.push(
            "pad",
            Tensor::new(out_shape, out)?,
            Op::Pad {
                x: self.id,
                in_shape,
                pads: pads.to_vec(),
            },
            &[self.id],
        )
    }

    pub fn mean(&self) -> Result<Var<'t>> {
        let v = self.value();
        let m = v.data().iter().sum::<f64>() / v.len() as f64;
        self.tape
            .push("mean", Tensor::scalar(m), Op::Mean(self.id), &[self.id])
    }

    pub fn sum(&self) -> Result<Var<'t>> {
        let s = self.value().data().iter().sum::<f64>();
        self.tape
            .push("sum", Tensor::scalar(s), Op::Sum(self.id), &[self.id])
    }

    /// Per-channel "valid" separable filtering with `window` along H and W.
    pub fn gaussian_blur(&self, window: Rc<[f64]>) -> Result<Var<'t>> {
        let xv = self.value();
        let d = as_dims3(&xv, "gaussian_blur")?;
        if d.h < window.len() || d.w < window.len() {
            return Err(Error::shape(
                "gaussian_blur",
                format!("{}x{} input smaller than window {}", d.h, d.w, window.len()),
            ));
        }
        let (out, od) = kernels::blur_valid(xv.data(), d, &window);
        self.tape.push(
            "gaussian_blur",
            Tensor::new(vec![od.c, od.h, od.w], out)?,
            Op::GaussianBlur {
                x: self.id,
                d,
                window,
            },
            &[self.id],
        )
    }

    /// 2x2 average pooling with stride 2; odd trailing rows/columns are dropped.
    pub fn avg_pool2(&self) -> Result<Var<'t>> {
        let xv = self.value();
        let d = as_dims3(&xv, "avg_pool2")?;
        if d.h < 2 || d.w < 2 {
            return Err(Error::shape("avg_pool2", format!("input {d:?} too small")));
        }
        let (out, od) = kernels::avg_pool2(xv.data(), d);
        self.tape.push(
            "avg_pool2",
            Tensor::new(vec![od.c, od.h, od.w], out)?,
            Op::AvgPool2 { x: self.id, d },
            &[self.id],
        )
    }

    /// Forward value `replacement`, backward identity into `self`.
    pub fn straight_through(&self, replacement: Tensor) -> Result<Var<'t>> {
        same_shape(&self.value(), &replacement, "straight_through")?;
        self.tape.push(
            "straight_through",
            replacement,
            Op::StraightThrough(self.id),
            &[self.id],
        )
    }
}
