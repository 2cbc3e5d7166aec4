//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation applied to its [`Var`] handles in an
//! append-only tape, so node inputs always precede the node. Calling
//! [`Graph::backward`] walks the tape once in reverse and returns the
//! accumulated gradient of every node that depends on a parameter leaf.
//!
//! A graph is built for one forward pass. Backward consumes it: a second
//! call is a contract error, so stale tapes cannot silently double-count.
//!
//! ```
//! use ccs_core::autodiff::Graph;
//! use ccs_core::tensor::Tensor;
//!
//! let g = Graph::new();
//! let x = g.param(Tensor::new(&[2], vec![1.0, 2.0]).unwrap());
//! let loss = x.mul(x).unwrap().sum().unwrap();
//! let grads = g.backward(loss).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0]);
//! ```

use std::cell::{Cell, RefCell};

use crate::error::{Error, Result};
use crate::tensor::{self, ConvGeometry, Tensor};

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Scale(usize, f64),
    AddScalar(usize),
    Exp(usize),
    Log(usize),
    Abs(usize),
    Relu(usize),
    Sigmoid(usize),
    Sqrt(usize),
    MatMul(usize, usize),
    Transpose(usize),
    Reshape(usize),
    Conv2d {
        input: usize,
        kernel: usize,
        geom: ConvGeometry,
    },
    AvgPool {
        input: usize,
        size: usize,
    },
    Sum(usize),
    SumAxis(usize),
    Softmax(usize, usize),
    LogSoftmax(usize, usize),
}

impl Op {
    fn inputs(&self) -> Vec<usize> {
        use Op::*;
        match *self {
            Leaf => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) | MatMul(a, b) => vec![a, b],
            Conv2d { input, kernel, .. } => vec![input, kernel],
            Neg(a) | Scale(a, _) | AddScalar(a) | Exp(a) | Log(a) | Abs(a) | Relu(a)
            | Sigmoid(a) | Sqrt(a) | Transpose(a) | Reshape(a) | Sum(a) | SumAxis(a)
            | Softmax(a, _) | LogSoftmax(a, _) | AvgPool { input: a, .. } => vec![a],
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// One forward pass worth of recorded operations.
#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    consumed: Cell<bool>,
}

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Gradients produced by [`Graph::backward`], indexed by node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for `var`, or `None` if it does not influence the loss
    /// through any parameter path.
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(Option::as_ref)
    }

    /// Like [`get`](Self::get) but yields zeros of the right shape for
    /// parameters that did not reach the loss.
    pub fn get_or_zeros(&self, var: Var<'_>) -> Tensor {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(&var.shape()))
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// A leaf whose gradient is tracked.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf treated as a constant.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    fn record(&self, value: Tensor, op: Op) -> Var<'_> {
        let requires_grad = {
            let nodes = self.nodes.borrow();
            op.inputs().iter().any(|&i| nodes[i].requires_grad)
        };
        self.push(value, op, requires_grad)
    }

    fn value_of(&self, id: usize) -> std::cell::Ref<'_, Tensor> {
        std::cell::Ref::map(self.nodes.borrow(), |n| &n[id].value)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        if !std::ptr::eq(loss.graph, self) {
            return Err(Error::contract("loss belongs to a different graph"));
        }
        if self.consumed.replace(true) {
            return Err(Error::contract(
                "backward already ran on this graph; build a new forward pass",
            ));
        }
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }

        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        grads[loss.id] = Some(Tensor::ones(root.value.shape()));

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            for (input, contribution) in local_gradients(&nodes, node, &g)? {
                if !nodes[input].requires_grad {
                    continue;
                }
                match &mut grads[input] {
                    Some(acc) => {
                        for (a, c) in acc.data_mut().iter_mut().zip(contribution.data()) {
                            *a += c;
                        }
                    }
                    slot @ None => *slot = Some(contribution),
                }
            }
            // Interior gradients are kept so callers can inspect them.
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

/// Vector-Jacobian products of `node` for upstream gradient `g`.
fn local_gradients(nodes: &[Node], node: &Node, g: &Tensor) -> Result<Vec<(usize, Tensor)>> {
    let val = |i: usize| &nodes[i].value;
    let y = &node.value;
    let unary = |a: usize, f: &dyn Fn(f64, f64, f64) -> f64| -> Result<Vec<(usize, Tensor)>> {
        let x = val(a);
        let data = g
            .data()
            .iter()
            .zip(x.data())
            .zip(y.data())
            .map(|((&g, &x), &y)| f(g, x, y))
            .collect();
        Ok(vec![(a, Tensor::new(x.shape(), data)?)])
    };
    use Op::*;
    Ok(match node.op {
        Leaf => vec![],
        Add(a, b) => vec![
            (a, tensor::reduce_to_shape(g, val(a).shape())),
            (b, tensor::reduce_to_shape(g, val(b).shape())),
        ],
        Sub(a, b) => vec![
            (a, tensor::reduce_to_shape(g, val(a).shape())),
            (b, tensor::reduce_to_shape(&g.map(|v| -v), val(b).shape())),
        ],
        Mul(a, b) => {
            let ga = tensor::zip_broadcast(g, val(b), |g, b| g * b)?;
            let gb = tensor::zip_broadcast(g, val(a), |g, a| g * a)?;
            vec![
                (a, tensor::reduce_to_shape(&ga, val(a).shape())),
                (b, tensor::reduce_to_shape(&gb, val(b).shape())),
            ]
        }
        Div(a, b) => {
            let ga = tensor::zip_broadcast(g, val(b), |g, b| g / b)?;
            // d(a/b)/db = -y/b, with y already broadcast to the output shape.
            let yb = tensor::zip_broadcast(y, val(b), |y, b| -y / b)?;
            let gb = tensor::zip_broadcast(g, &yb, |g, q| g * q)?;
            vec![
                (a, tensor::reduce_to_shape(&ga, val(a).shape())),
                (b, tensor::reduce_to_shape(&gb, val(b).shape())),
            ]
        }
        Neg(a) => vec![(a, g.map(|v| -v))],
        Scale(a, c) => vec![(a, g.map(|v| v * c))],
        AddScalar(a) => vec![(a, g.clone())],
        Exp(a) => unary(a, &|g, _, y| g * y)?,
        Log(a) => unary(a, &|g, x, _| g / x)?,
        Abs(a) => unary(a, &|g, x, _| {
            if x > 0.0 {
                g
            } else if x < 0.0 {
                -g
            } else {
                0.0
            }
        })?,
        Relu(a) => unary(a, &|g, x, _| if x > 0.0 { g } else { 0.0 })?,
        Sigmoid(a) => unary(a, &|g, _, y| g * y * (1.0 - y))?,
        Sqrt(a) => unary(a, &|g, _, y| g / (2.0 * y))?,
        MatMul(a, b) => {
            let (av, bv) = (val(a), val(b));
            let [m, k] = av.dims2()?;
            let [_, n] = bv.dims2()?;
            let mut ga = vec![0.0; m * k];
            tensor::gemm(m, n, k, g.data(), false, bv.data(), true, &mut ga, false);
            let mut gb = vec![0.0; k * n];
            tensor::gemm(k, m, n, av.data(), true, g.data(), false, &mut gb, false);
            vec![(a, Tensor::new(&[m, k], ga)?), (b, Tensor::new(&[k, n], gb)?)]
        }
        Transpose(a) => vec![(a, g.t()?)],
        Reshape(a) => vec![(a, g.reshape(val(a).shape())?)],
        Conv2d {
            input,
            kernel,
            geom,
        } => {
            let kv = val(kernel);
            let cout = kv.shape()[0];
            let patch = geom.patch_len();
            let p = geom.out_pixels();
            let cols = tensor::im2col(val(input).data(), &geom);
            let mut gk = vec![0.0; cout * patch];
            tensor::gemm(cout, p, patch, g.data(), false, &cols, true, &mut gk, false);
            let mut gcols = vec![0.0; patch * p];
            tensor::gemm(patch, cout, p, kv.data(), true, g.data(), false, &mut gcols, false);
            let gx = tensor::col2im(&gcols, &geom);
            vec![
                (input, Tensor::new(val(input).shape(), gx)?),
                (kernel, Tensor::new(kv.shape(), gk)?),
            ]
        }
        AvgPool { input, size } => {
            let [c, h, w] = val(input).dims3()?;
            let (ho, wo) = (h / size, w / size);
            let scale = 1.0 / (size * size) as f64;
            let mut gx = vec![0.0; c * h * w];
            for ch in 0..c {
                for y in 0..ho * size {
                    for x in 0..wo * size {
                        gx[(ch * h + y) * w + x] =
                            g.data()[(ch * ho + y / size) * wo + x / size] * scale;
                    }
                }
            }
            vec![(input, Tensor::new(&[c, h, w], gx)?)]
        }
        Sum(a) => {
            let gv = g.item()?;
            vec![(a, Tensor::full(val(a).shape(), gv))]
        }
        SumAxis(a) => {
            let expanded = tensor::zip_broadcast(&Tensor::zeros(val(a).shape()), g, |_, g| g)?;
            vec![(a, expanded)]
        }
        Softmax(a, axis) => {
            let gy = tensor::zip_broadcast(g, y, |g, y| g * y)?;
            let s = tensor::sum_axis(&gy, axis)?;
            let gx = tensor::zip_broadcast(&gy, &tensor::zip_broadcast(y, &s, |y, s| y * s)?, |a, b| a - b)?;
            vec![(a, gx)]
        }
        LogSoftmax(a, axis) => {
            let s = tensor::sum_axis(g, axis)?;
            let p = y.map(f64::exp);
            let ps = tensor::zip_broadcast(&p, &s, |p, s| p * s)?;
            vec![(a, tensor::zip_broadcast(g, &ps, |g, q| g - q)?)]
        }
    })
}

impl<'g> Var<'g> {
    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    /// Copy of the forward value.
    pub fn value(&self) -> Tensor {
        self.graph.value_of(self.id).clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.value_of(self.id).shape().to_vec()
    }

    /// Value of a one-element node.
    pub fn item(&self) -> Result<f64> {
        self.graph.value_of(self.id).item()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.nodes.borrow()[self.id].requires_grad
    }

    fn same_graph(&self, other: Var<'_>) -> Result<()> {
        if std::ptr::eq(self.graph, other.graph) {
            Ok(())
        } else {
            Err(Error::contract("operands live on different graphs"))
        }
    }

    fn binary(self, other: Var<'g>, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var<'g>> {
        self.same_graph(other)?;
        let out = {
            let a = self.graph.value_of(self.id);
            let b = self.graph.value_of(other.id);
            tensor::zip_broadcast(&a, &b, f)?
        };
        Ok(self.graph.record(out, op))
    }

    fn unary(self, op: Op, f: impl Fn(f64) -> f64) -> Var<'g> {
        let out = self.graph.value_of(self.id).map(f);
        self.graph.record(out, op)
    }

    pub fn add(self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(other, Op::Add(self.id, other.id), |a, b| a + b)
    }

    pub fn sub(self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(other, Op::Sub(self.id, other.id), |a, b| a - b)
    }

    pub fn mul(self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(other, Op::Mul(self.id, other.id), |a, b| a * b)
    }

    /// Elementwise division; every divisor must be nonzero.
    pub fn div(self, other: Var<'g>) -> Result<Var<'g>> {
        if self.graph.value_of(other.id).data().contains(&0.0) {
            return Err(Error::Domain("division by zero".into()));
        }
        self.binary(other, Op::Div(self.id, other.id), |a, b| a / b)
    }

    pub fn neg(self) -> Var<'g> {
        self.unary(Op::Neg(self.id), |v| -v)
    }

    pub fn scale(self, c: f64) -> Var<'g> {
        self.unary(Op::Scale(self.id, c), |v| v * c)
    }

    pub fn add_scalar(self, c: f64) -> Var<'g> {
        self.unary(Op::AddScalar(self.id), |v| v + c)
    }

    pub fn exp(self) -> Var<'g> {
        self.unary(Op::Exp(self.id), f64::exp)
    }

    /// Natural log; every input must be strictly positive.
    pub fn log(self) -> Result<Var<'g>> {
        if let Some(v) = self.graph.value_of(self.id).data().iter().find(|&&v| v <= 0.0 || v.is_nan()) {
            return Err(Error::Domain(format!("log of non-positive value {v}")));
        }
        Ok(self.unary(Op::Log(self.id), f64::ln))
    }

    /// Absolute value; the backward pass uses subgradient 0 at 0.
    pub fn abs(self) -> Var<'g> {
        self.unary(Op::Abs(self.id), f64::abs)
    }

    pub fn relu(self) -> Var<'g> {
        self.unary(Op::Relu(self.id), |v| v.max(0.0))
    }

    pub fn sigmoid(self) -> Var<'g> {
        self.unary(Op::Sigmoid(self.id), |v| {
            if v >= 0.0 {
                1.0 / (1.0 + (-v).exp())
            } else {
                let e = v.exp();
                e / (1.0 + e)
            }
        })
    }

    /// Square root; inputs must be non-negative and, for a finite
    /// gradient, nonzero.
    pub fn sqrt(self) -> Result<Var<'g>> {
        if let Some(v) = self.graph.value_of(self.id).data().iter().find(|&&v| v < 0.0) {
            return Err(Error::Domain(format!("sqrt of negative value {v}")));
        }
        Ok(self.unary(Op::Sqrt(self.id), f64::sqrt))
    }

    pub fn matmul(self, other: Var<'g>) -> Result<Var<'g>> {
        self.same_graph(other)?;
        let out = {
            let a = self.graph.value_of(self.id);
            let b = self.graph.value_of(other.id);
            a.matmul(&b)?
        };
        Ok(self.graph.record(out, Op::MatMul(self.id, other.id)))
    }

    pub fn t(self) -> Result<Var<'g>> {
        let out = self.graph.value_of(self.id).t()?;
        Ok(self.graph.record(out, Op::Transpose(self.id)))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'g>> {
        let out = self.graph.value_of(self.id).reshape(shape)?;
        Ok(self.graph.record(out, Op::Reshape(self.id)))
    }

    /// Cross-correlation of a `cin × h × w` input with a
    /// `cout × cin × k × k` kernel.
    pub fn conv2d(self, kernel: Var<'g>, stride: usize, pad: usize) -> Result<Var<'g>> {
        self.same_graph(kernel)?;
        let (out, geom) = {
            let x = self.graph.value_of(self.id);
            let kv = self.graph.value_of(kernel.id);
            let [cin, h, w] = x.dims3()?;
            let &[cout, kcin, k, k2] = kv.shape() else {
                return Err(Error::contract(format!(
                    "conv2d kernel must be rank 4, got {:?}",
                    kv.shape()
                )));
            };
            if kcin != cin || k != k2 {
                return Err(Error::contract(format!(
                    "conv2d kernel {:?} does not fit input {:?}",
                    kv.shape(),
                    x.shape()
                )));
            }
            let geom = ConvGeometry::new(cin, h, w, k, stride, pad)?;
            let cols = tensor::im2col(x.data(), &geom);
            let p = geom.out_pixels();
            let mut out = vec![0.0; cout * p];
            tensor::gemm(cout, geom.patch_len(), p, kv.data(), false, &cols, false, &mut out, false);
            (Tensor::new(&[cout, geom.ho, geom.wo], out)?, geom)
        };
        Ok(self.graph.record(
            out,
            Op::Conv2d {
                input: self.id,
                kernel: kernel.id,
                geom,
            },
        ))
    }

    /// Non-overlapping `size × size` mean pooling of a `c × h × w` input.
    pub fn avg_pool(self, size: usize) -> Result<Var<'g>> {
        let out = {
            let x = self.graph.value_of(self.id);
            let [c, h, w] = x.dims3()?;
            if size == 0 || h % size != 0 || w % size != 0 {
                return Err(Error::contract(format!(
                    "avg_pool size {size} does not divide {h}x{w}"
                )));
            }
            let (ho, wo) = (h / size, w / size);
            let scale = 1.0 / (size * size) as f64;
            let mut out = vec![0.0; c * ho * wo];
            for ch in 0..c {
                for y in 0..h {
                    for xx in 0..w {
                        out[(ch * ho + y / size) * wo + xx / size] += x.data()[(ch * h + y) * w + xx];
                    }
                }
            }
            out.iter_mut().for_each(|v| *v *= scale);
            Tensor::new(&[c, ho, wo], out)?
        };
        Ok(self.graph.record(out, Op::AvgPool { input: self.id, size }))
    }

    /// Sum of all elements as a scalar.
    pub fn sum(self) -> Result<Var<'g>> {
        let s = self.graph.value_of(self.id).sum();
        Ok(self.graph.record(Tensor::scalar(s), Op::Sum(self.id)))
    }

    pub fn mean(self) -> Result<Var<'g>> {
        let n = self.graph.value_of(self.id).numel();
        if n == 0 {
            return Err(Error::contract("mean of empty tensor"));
        }
        Ok(self.sum()?.scale(1.0 / n as f64))
    }

    /// Sum along `axis`, keeping it with extent 1.
    pub fn sum_axis(self, axis: usize) -> Result<Var<'g>> {
        let out = tensor::sum_axis(&self.graph.value_of(self.id), axis)?;
        Ok(self.graph.record(out, Op::SumAxis(self.id)))
    }

    pub fn softmax(self, axis: usize) -> Result<Var<'g>> {
        let out = tensor::softmax(&self.graph.value_of(self.id), axis)?;
        Ok(self.graph.record(out, Op::Softmax(self.id, axis)))
    }

    pub fn log_softmax(self, axis: usize) -> Result<Var<'g>> {
        let out = tensor::log_softmax(&self.graph.value_of(self.id), axis)?;
        Ok(self.graph.record(out, Op::LogSoftmax(self.id, axis)))
    }

    /// A constant copy of this node's value; gradients stop here.
    pub fn detach(self) -> Var<'g> {
        let v = self.value();
        self.graph.constant(v)
    }
}
