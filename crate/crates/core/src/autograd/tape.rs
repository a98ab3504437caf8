use std::cell::RefCell;
use std::rc::Rc;
use std::sync::atomic::{AtomicU32, Ordering};

use super::conv::{self, ConvGeom};
use super::gemm::{gemm, View};
use super::tensor::{broadcast_shape, broadcast_to, for_each_broadcast, sum_to_shape, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize, u32);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f32),
    AddScalar(Var),
    Neg(Var),
    Square(Var),
    Sqrt(Var),
    Sigmoid(Var),
    Relu(Var),
    LeakyRelu(Var, f32),
    SignedPow(Var, f32),
    SumAll(Var),
    SumToShape(Var),
    BroadcastTo(Var),
    Gather(Var, Rc<Vec<usize>>),
    ScatterAdd(Var, Rc<Vec<usize>>),
    ReduceMaxLast(Var, Rc<Vec<usize>>),
    Concat0(Vec<Var>),
    L2NormalizeCols(Var),
    Conv3d {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    },
    MeanTrailing(Var),
    Chamfer(Var, Var, Rc<ChamferMatch>),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Reshape(..) => "reshape",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Neg(..) => "neg",
            Op::Square(..) => "square",
            Op::Sqrt(..) => "sqrt",
            Op::Sigmoid(..) => "sigmoid",
            Op::Relu(..) => "relu",
            Op::LeakyRelu(..) => "leaky_relu",
            Op::SignedPow(..) => "signed_pow",
            Op::SumAll(..) => "sum",
            Op::SumToShape(..) => "sum_to_shape",
            Op::BroadcastTo(..) => "broadcast_to",
            Op::Gather(..) => "gather",
            Op::ScatterAdd(..) => "scatter_add",
            Op::ReduceMaxLast(..) => "reduce_max",
            Op::Concat0(..) => "concat",
            Op::L2NormalizeCols(..) => "l2_normalize",
            Op::Conv3d { .. } => "conv3d",
            Op::MeanTrailing(..) => "mean_pool",
            Op::Chamfer(..) => "chamfer",
        }
    }

    fn parents(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) => {
                vec![*a, *b]
            }
            Op::Chamfer(a, b, _) => vec![*a, *b],
            Op::Transpose(a)
            | Op::Reshape(a)
            | Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Neg(a)
            | Op::Square(a)
            | Op::Sqrt(a)
            | Op::Sigmoid(a)
            | Op::Relu(a)
            | Op::LeakyRelu(a, _)
            | Op::SignedPow(a, _)
            | Op::SumAll(a)
            | Op::SumToShape(a)
            | Op::BroadcastTo(a)
            | Op::Gather(a, _)
            | Op::ScatterAdd(a, _)
            | Op::ReduceMaxLast(a, _)
            | Op::L2NormalizeCols(a)
            | Op::MeanTrailing(a) => vec![*a],
            Op::Concat0(parts) => parts.clone(),
            Op::Conv3d {
                input,
                kernel,
                bias,
                ..
            } => {
                let mut p = vec![*input, *kernel];
                p.extend(bias);
                p
            }
        }
    }
}

/// Nearest-neighbour assignments saved by the Chamfer forward pass.
pub(crate) struct ChamferMatch {
    batch: usize,
    na: usize,
    nb: usize,
    a_to_b: Vec<usize>,
    b_to_a: Vec<usize>,
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    needs_grad: bool,
}

/// Guard value for [`Tape::l2_normalize`].
pub const L2_EPS: f32 = 1e-8;

/// Records tensor operations for reverse-mode differentiation.
///
/// Nodes are appended in evaluation order, so the node list is always a
/// topological order of the graph. A tape is single-threaded.
pub struct Tape {
    id: u32,
    nodes: RefCell<Vec<Node>>,
}

static NEXT_TAPE: AtomicU32 = AtomicU32::new(0);

impl Default for Tape {
    fn default() -> Self {
        Tape {
            id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed),
            nodes: RefCell::new(Vec::new()),
        }
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros shaped like `like` when `v` was not reached.
    pub fn get_or_zeros(&self, v: Var, like: &[usize]) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(like.to_vec()))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        let needs_grad = op.parents().iter().any(|p| nodes[p.0].needs_grad);
        nodes.push(Node {
            value: Rc::new(value),
            op,
            needs_grad,
        });
        Var(nodes.len() - 1, self.id)
    }

    /// A differentiable input.
    pub fn leaf(&self, value: Tensor) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(nodes.len() - 1, self.id)
    }

    /// A value that never receives gradients.
    pub fn constant(&self, value: Tensor) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(nodes.len() - 1, self.id)
    }

    pub fn value(&self, v: Var) -> Rc<Tensor> {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].needs_grad
    }

    /// A copy of `v`'s value as a new constant, cutting the graph.
    pub fn detach(&self, v: Var) -> Var {
        let t = (*self.value(v)).clone();
        self.constant(t)
    }

    // ---------------------------------------------------------------------
    // Linear algebra
    // ---------------------------------------------------------------------

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (&[m, k], &[k2, n]) = (ta.shape(), tb.shape()) else {
            return Err(Error::dim(format!(
                "matmul expects two matrices, got {:?} and {:?}",
                ta.shape(),
                tb.shape()
            )));
        };
        if k != k2 {
            return Err(Error::dim(format!(
                "matmul inner dimensions disagree: {:?} x {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let mut out = vec![0.0; m * n];
        gemm(View::rm(ta.data(), m, k), View::rm(tb.data(), k, n), 0.0, &mut out, n);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b)))
    }

    pub fn transpose(&self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let &[r, c] = ta.shape() else {
            return Err(Error::dim(format!("transpose expects a matrix, got {:?}", ta.shape())));
        };
        Ok(self.push(transpose_data(&ta, r, c), Op::Transpose(a)))
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = (*self.value(a)).clone().reshape(shape.to_vec())?;
        Ok(self.push(t, Op::Reshape(a)))
    }

    /// Kernel-size-1 convolution along the point axis: `weights[Cout, Cin] · input[Cin, N]`.
    ///
    /// Weights may also be given as `[Cout, Cin, 1]`.
    pub fn conv1d_pointwise(&self, input: Var, weights: Var) -> Result<Var> {
        let ws = self.shape(weights);
        let w = match ws.as_slice() {
            [_, _] => weights,
            [co, ci, 1] => self.reshape(weights, &[*co, *ci])?,
            _ => {
                return Err(Error::dim(format!(
                    "conv1d_pointwise weights must be [Cout,Cin] or [Cout,Cin,1], got {ws:?}"
                )))
            }
        };
        let is = self.shape(input);
        if is.len() != 2 || is[0] != self.shape(w)[1] {
            return Err(Error::dim(format!(
                "conv1d_pointwise channel mismatch: weights {ws:?}, input {is:?}"
            )));
        }
        self.matmul(w, input)
    }

    /// 3D cross-correlation. `input` is `[Cin, W, H, D]` or `[Cin, B, W, H, D]`,
    /// `kernel` is `[Cout, Cin, Kw, Kh, Kd]`, the optional `bias` is `[Cout]`.
    pub fn conv3d(
        &self,
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let (ti, tk) = (self.value(input), self.value(kernel));
        let geom = ConvGeom::new(ti.shape(), tk.shape(), stride, padding)?;
        let tb = bias.map(|b| self.value(b));
        if let Some(tb) = &tb {
            if tb.numel() != geom.cout {
                return Err(Error::dim(format!(
                    "conv3d bias has {} entries, expected {}",
                    tb.numel(),
                    geom.cout
                )));
            }
        }
        let out = conv::forward(&geom, ti.data(), tk.data(), tb.as_ref().map(|b| b.data()));
        let [w, h, d] = geom.output;
        let shape = if ti.rank() == 4 {
            vec![geom.cout, w, h, d]
        } else {
            vec![geom.cout, geom.batch, w, h, d]
        };
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Conv3d {
                input,
                kernel,
                bias,
                geom,
            },
        ))
    }

    /// Mean over every axis after the first two: `[C, B, ...] -> [C, B]`.
    pub fn mean_trailing(&self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.rank() < 2 {
            return Err(Error::dim("mean_trailing needs rank >= 2"));
        }
        let (c, b) = (t.shape()[0], t.shape()[1]);
        let s: usize = t.shape()[2..].iter().product();
        let out = t
            .data()
            .chunks(s.max(1))
            .map(|w| w.iter().sum::<f32>() / s as f32)
            .collect();
        Ok(self.push(Tensor::new(vec![c, b], out)?, Op::MeanTrailing(a)))
    }

    // ---------------------------------------------------------------------
    // Elementwise
    // ---------------------------------------------------------------------

    fn binary(&self, a: Var, b: Var, op: Op, f: impl Fn(f32, f32) -> f32) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let shape = broadcast_shape(ta.shape(), tb.shape())?;
        let mut out = Tensor::zeros(shape.clone());
        {
            let (da, db, dst) = (ta.data(), tb.data(), out.data_mut());
            for_each_broadcast(ta.shape(), tb.shape(), &shape, |o, i, j| dst[o] = f(da[i], db[j]));
        }
        Ok(self.push(out, op))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Div(a, b), |x, y| x / y)
    }

    fn unary(&self, a: Var, op: Op, f: impl Fn(f32) -> f32) -> Var {
        let t = self.value(a).map(f);
        self.push(t, op)
    }

    pub fn scale(&self, a: Var, c: f32) -> Var {
        self.unary(a, Op::Scale(a, c), |x| x * c)
    }

    pub fn add_scalar(&self, a: Var, c: f32) -> Var {
        self.unary(a, Op::AddScalar(a), |x| x + c)
    }

    pub fn neg(&self, a: Var) -> Var {
        self.unary(a, Op::Neg(a), |x| -x)
    }

    pub fn square(&self, a: Var) -> Var {
        self.unary(a, Op::Square(a), |x| x * x)
    }

    pub fn sqrt(&self, a: Var) -> Var {
        self.unary(a, Op::Sqrt(a), f32::sqrt)
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn relu(&self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |x| x.max(0.0))
    }

    pub fn leaky_relu(&self, a: Var, slope: f32) -> Var {
        self.unary(a, Op::LeakyRelu(a, slope), |x| if x > 0.0 { x } else { slope * x })
    }

    /// `sign(x)·|x|^p`, which equals `x^p` for odd integer `p`.
    pub fn signed_pow(&self, a: Var, p: f32) -> Var {
        self.unary(a, Op::SignedPow(a, p), |x| x.signum() * x.abs().powf(p))
    }

    // ---------------------------------------------------------------------
    // Reductions and indexing
    // ---------------------------------------------------------------------

    pub fn sum(&self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Tensor::scalar(s), Op::SumAll(a))
    }

    pub fn mean(&self, a: Var) -> Var {
        let n = self.value(a).numel().max(1);
        let s = self.sum(a);
        self.scale(s, 1.0 / n as f32)
    }

    pub fn sum_to_shape(&self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a);
        if broadcast_shape(shape, t.shape())? != t.shape() {
            return Err(Error::dim(format!("cannot sum {:?} down to {shape:?}", t.shape())));
        }
        Ok(self.push(sum_to_shape(&t, shape), Op::SumToShape(a)))
    }

    pub fn broadcast_to(&self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a);
        if broadcast_shape(t.shape(), shape)? != shape {
            return Err(Error::dim(format!("cannot broadcast {:?} to {shape:?}", t.shape())));
        }
        Ok(self.push(broadcast_to(&t, shape), Op::BroadcastTo(a)))
    }

    /// `out[i] = a.flat[index[i]]`, reshaped to `shape`.
    pub fn gather(&self, a: Var, index: Rc<Vec<usize>>, shape: &[usize]) -> Result<Var> {
        let t = self.value(a);
        if shape.iter().product::<usize>() != index.len() {
            return Err(Error::dim("gather index count does not match output shape"));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= t.numel()) {
            return Err(Error::dim(format!("gather index {bad} out of range {}", t.numel())));
        }
        let data = index.iter().map(|&i| t.data()[i]).collect();
        Ok(self.push(Tensor::new(shape.to_vec(), data)?, Op::Gather(a, index)))
    }

    /// `out.flat[index[i]] += a.flat[i]` into zeros of `shape`.
    pub fn scatter_add(&self, a: Var, index: Rc<Vec<usize>>, shape: &[usize]) -> Result<Var> {
        let t = self.value(a);
        let n: usize = shape.iter().product();
        if index.len() != t.numel() {
            return Err(Error::dim("scatter_add index count does not match input"));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= n) {
            return Err(Error::dim(format!("scatter_add index {bad} out of range {n}")));
        }
        let mut out = Tensor::zeros(shape.to_vec());
        for (&i, &v) in index.iter().zip(t.data()) {
            out.data_mut()[i] += v;
        }
        Ok(self.push(out, Op::ScatterAdd(a, index)))
    }

    /// Max over the last (point) axis. Ties resolve to the lowest index.
    pub fn reduce_max_over_points(&self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let Some((&n, lead)) = t.shape().split_last() else {
            return Err(Error::dim("reduce_max needs rank >= 1"));
        };
        if n == 0 {
            return Err(Error::dim("reduce_max over an empty point axis"));
        }
        let mut out = Vec::with_capacity(t.numel() / n);
        let mut arg = Vec::with_capacity(t.numel() / n);
        for (r, row) in t.data().chunks(n).enumerate() {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            out.push(row[best]);
            arg.push(r * n + best);
        }
        let shape = lead.to_vec();
        Ok(self.push(Tensor::new(shape, out)?, Op::ReduceMaxLast(a, Rc::new(arg))))
    }

    /// Concatenation along axis 0.
    pub fn concat(&self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::dim("concat of nothing"));
        };
        let tail = self.shape(first)[1..].to_vec();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if t.rank() == 0 || t.shape()[1..] != tail[..] {
                return Err(Error::dim(format!(
                    "concat shape mismatch: {:?} vs trailing {tail:?}",
                    t.shape()
                )));
            }
            rows += t.shape()[0];
            data.extend_from_slice(t.data());
        }
        let mut shape = vec![rows];
        shape.extend(tail);
        Ok(self.push(Tensor::new(shape, data)?, Op::Concat0(parts.to_vec())))
    }

    /// `v / max(|v|, eps)` for each column of `[F, M]` (or the single column of `[F]`).
    pub fn l2_normalize(&self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let (f, m) = col_layout(t.shape())?;
        let mut out = t.data().to_vec();
        for j in 0..m {
            let norm = (0..f).map(|i| t.data()[i * m + j].powi(2)).sum::<f32>().sqrt();
            let d = norm.max(L2_EPS);
            for i in 0..f {
                out[i * m + j] /= d;
            }
        }
        Ok(self.push(Tensor::new(t.shape().to_vec(), out)?, Op::L2NormalizeCols(a)))
    }

    /// Symmetric Chamfer distance between point sets `[Na,3]` and `[Nb,3]`,
    /// or per-item over batches `[B,Na,3]`, `[B,Nb,3]` (output `[B]`).
    pub fn chamfer(&self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (batch, na, nb, out_shape) = match (ta.shape(), tb.shape()) {
            (&[na, 3], &[nb, 3]) => (1, na, nb, vec![]),
            (&[ba, na, 3], &[bb, nb, 3]) if ba == bb => (ba, na, nb, vec![ba]),
            (sa, sb) => {
                return Err(Error::dim(format!("chamfer expects point sets, got {sa:?} and {sb:?}")))
            }
        };
        if na == 0 || nb == 0 {
            return Err(Error::Geometry("chamfer distance of an empty point set".into()));
        }
        let mut a_to_b = Vec::with_capacity(batch * na);
        let mut b_to_a = Vec::with_capacity(batch * nb);
        let mut out = Vec::with_capacity(batch);
        for k in 0..batch {
            let pa = &ta.data()[k * na * 3..(k + 1) * na * 3];
            let pb = &tb.data()[k * nb * 3..(k + 1) * nb * 3];
            let (sa, ia) = nearest_all(pa, pb);
            let (sb, ib) = nearest_all(pb, pa);
            out.push(sa / na as f32 + sb / nb as f32);
            a_to_b.extend(ia);
            b_to_a.extend(ib);
        }
        let m = ChamferMatch {
            batch,
            na,
            nb,
            a_to_b,
            b_to_a,
        };
        Ok(self.push(Tensor::new(out_shape, out)?, Op::Chamfer(a, b, Rc::new(m))))
    }

    // ---------------------------------------------------------------------
    // Differentiation
    // ---------------------------------------------------------------------

    /// Reverse pass from a one-element `loss`, producing numeric gradients
    /// for every node that needs them.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        if nodes[loss.0].value.numel() != 1 {
            return Err(Error::Graph(format!(
                "backward needs a scalar, got shape {:?}",
                nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::new(nodes[loss.0].value.shape().to_vec(), vec![1.0])?);
        for id in (0..=loss.0).rev() {
            let node = &nodes[id];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            for (p, gp) in vjp_numeric(&nodes, node, &g)? {
                if !nodes[p.0].needs_grad {
                    continue;
                }
                match &mut grads[p.0] {
                    Some(acc) => acc.add_assign(&gp),
                    slot => *slot = Some(gp),
                }
            }
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Gradient of the scalar `out` with respect to each of `wrt`.
    ///
    /// With `create_graph`, the gradients are recorded on this tape and can be
    /// differentiated again; only the operators a point-wise critic uses
    /// (matmul, broadcasting arithmetic, leaky_relu, reduce_max, reshapes,
    /// indexing) support this.
    pub fn grad(&self, out: Var, wrt: &[Var], create_graph: bool) -> Result<Vec<Var>> {
        if !create_graph {
            self.check_wrt(out, wrt)?;
            let g = self.backward(out)?;
            return Ok(wrt
                .iter()
                .map(|&w| self.constant(g.get_or_zeros(w, &self.shape(w))))
                .collect());
        }
        self.check_wrt(out, wrt)?;
        if self.value(out).numel() != 1 {
            return Err(Error::Graph("grad needs a scalar output".into()));
        }
        let mut grads: Vec<Option<Var>> = vec![None; out.0 + 1];
        let shape = self.shape(out);
        grads[out.0] = Some(self.constant(Tensor::ones(shape)));
        for id in (0..=out.0).rev() {
            let (op, needs) = {
                let nodes = self.nodes.borrow();
                (nodes[id].op.clone(), nodes[id].needs_grad)
            };
            if !needs || matches!(op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id] else { continue };
            for (p, gp) in self.vjp_graph(Var(id, self.id), &op, g)? {
                if !self.requires_grad(p) {
                    continue;
                }
                grads[p.0] = Some(match grads[p.0] {
                    Some(acc) => self.add(acc, gp)?,
                    None => gp,
                });
            }
        }
        Ok(wrt
            .iter()
            .map(|&w| {
                grads[w.0].unwrap_or_else(|| self.constant(Tensor::zeros(self.shape(w))))
            })
            .collect())
    }

    /// Every `wrt` must be a differentiable node recorded on this tape before `out`.
    fn check_wrt(&self, out: Var, wrt: &[Var]) -> Result<()> {
        for &w in wrt {
            if w.1 != self.id || out.1 != self.id || w.0 > out.0 || !self.requires_grad(w) {
                return Err(Error::Graph(format!(
                    "variable {} is not a differentiable input on this tape",
                    w.0
                )));
            }
        }
        Ok(())
    }

    fn vjp_graph(&self, node: Var, op: &Op, g: Var) -> Result<Vec<(Var, Var)>> {
        let out = match *op {
            Op::MatMul(a, b) => {
                let bt = self.transpose(b)?;
                let at = self.transpose(a)?;
                vec![(a, self.matmul(g, bt)?), (b, self.matmul(at, g)?)]
            }
            Op::Transpose(a) => vec![(a, self.transpose(g)?)],
            Op::Reshape(a) => vec![(a, self.reshape(g, &self.shape(a))?)],
            Op::Add(a, b) => vec![
                (a, self.sum_to_shape(g, &self.shape(a))?),
                (b, self.sum_to_shape(g, &self.shape(b))?),
            ],
            Op::Sub(a, b) => {
                let gb = self.sum_to_shape(g, &self.shape(b))?;
                vec![(a, self.sum_to_shape(g, &self.shape(a))?), (b, self.neg(gb))]
            }
            Op::Mul(a, b) => {
                let ga = self.mul(g, b)?;
                let gb = self.mul(g, a)?;
                vec![
                    (a, self.sum_to_shape(ga, &self.shape(a))?),
                    (b, self.sum_to_shape(gb, &self.shape(b))?),
                ]
            }
            Op::Scale(a, c) => vec![(a, self.scale(g, c))],
            Op::AddScalar(a) => vec![(a, g)],
            Op::Neg(a) => vec![(a, self.neg(g))],
            Op::Square(a) => {
                let two_a = self.scale(a, 2.0);
                vec![(a, self.mul(g, two_a)?)]
            }
            Op::Sqrt(a) => {
                let two_y = self.scale(node, 2.0);
                vec![(a, self.div(g, two_y)?)]
            }
            Op::Sigmoid(a) => {
                let one_minus = self.add_scalar(self.neg(node), 1.0);
                let d = self.mul(node, one_minus)?;
                vec![(a, self.mul(g, d)?)]
            }
            Op::Relu(a) | Op::LeakyRelu(a, _) => {
                let slope = if let Op::LeakyRelu(_, s) = *op { s } else { 0.0 };
                // piecewise-linear: the local slope is constant almost everywhere
                let mask = self.value(a).map(|x| if x > 0.0 { 1.0 } else { slope });
                let mask = self.constant(mask);
                vec![(a, self.mul(g, mask)?)]
            }
            Op::SumAll(a) => vec![(a, self.broadcast_to(g, &self.shape(a))?)],
            Op::SumToShape(a) => vec![(a, self.broadcast_to(g, &self.shape(a))?)],
            Op::BroadcastTo(a) => vec![(a, self.sum_to_shape(g, &self.shape(a))?)],
            Op::Gather(a, ref idx) => {
                vec![(a, self.scatter_add(g, idx.clone(), &self.shape(a))?)]
            }
            Op::ScatterAdd(a, ref idx) => vec![(a, self.gather(g, idx.clone(), &self.shape(a))?)],
            Op::ReduceMaxLast(a, ref arg) => {
                let flat = self.reshape(g, &[arg.len()])?;
                vec![(a, self.scatter_add(flat, arg.clone(), &self.shape(a))?)]
            }
            _ => {
                return Err(Error::Graph(format!(
                    "second-order gradients are not supported through '{}'",
                    op.name()
                )))
            }
        };
        Ok(out)
    }
}

pub(crate) fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn transpose_data(t: &Tensor, r: usize, c: usize) -> Tensor {
    let mut out = vec![0.0; r * c];
    let d = t.data();
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = d[i * c + j];
        }
    }
    Tensor::new(vec![c, r], out).expect("transpose shape")
}

fn col_layout(shape: &[usize]) -> Result<(usize, usize)> {
    match *shape {
        [f] => Ok((f, 1)),
        [f, m] => Ok((f, m)),
        _ => Err(Error::dim(format!("l2_normalize expects [F] or [F,M], got {shape:?}"))),
    }
}

/// Sum of squared nearest distances from each point of `from` to `to`, and the argmins.
fn nearest_all(from: &[f32], to: &[f32]) -> (f32, Vec<usize>) {
    let mut total = 0.0;
    let mut idx = Vec::with_capacity(from.len() / 3);
    for p in from.chunks_exact(3) {
        let mut best = f32::INFINITY;
        let mut arg = 0;
        for (j, q) in to.chunks_exact(3).enumerate() {
            let d = (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2);
            if d < best {
                best = d;
                arg = j;
            }
        }
        total += best;
        idx.push(arg);
    }
    (total, idx)
}

fn vjp_numeric(nodes: &[Node], node: &Node, g: &Tensor) -> Result<Vec<(Var, Tensor)>> {
    let val = |v: Var| -> &Tensor { &nodes[v.0].value };
    let needs = |v: Var| nodes[v.0].needs_grad;
    let y = &node.value;
    let elementwise = |a: Var, f: &dyn Fn(f32, f32) -> f32| -> Result<Tensor> {
        let x = val(a);
        let data = x.data().iter().zip(g.data()).zip(y.data()).map(|((&x, &g), &y)| f(x, y) * g);
        Tensor::new(x.shape().to_vec(), data.collect())
    };
    let out = match node.op {
        Op::Leaf => vec![],
        Op::MatMul(a, b) => {
            let (ta, tb) = (val(a), val(b));
            let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
            let mut res = Vec::new();
            if needs(a) {
                let mut ga = vec![0.0; m * k];
                gemm(View::rm(g.data(), m, n), View::rm(tb.data(), k, n).t(), 0.0, &mut ga, k);
                res.push((a, Tensor::new(vec![m, k], ga)?));
            }
            if needs(b) {
                let mut gb = vec![0.0; k * n];
                gemm(View::rm(ta.data(), m, k).t(), View::rm(g.data(), m, n), 0.0, &mut gb, n);
                res.push((b, Tensor::new(vec![k, n], gb)?));
            }
            res
        }
        Op::Transpose(a) => vec![(a, transpose_data(g, g.shape()[0], g.shape()[1]))],
        Op::Reshape(a) => vec![(a, g.clone().reshape(val(a).shape().to_vec())?)],
        Op::Add(a, b) | Op::Sub(a, b) => {
            let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
            let gb = sum_to_shape(g, val(b).shape()).map(|x| sign * x);
            vec![(a, sum_to_shape(g, val(a).shape())), (b, gb)]
        }
        Op::Mul(a, b) | Op::Div(a, b) => {
            let (ta, tb) = (val(a), val(b));
            let mut ga = Tensor::zeros(ta.shape().to_vec());
            let mut gb = Tensor::zeros(tb.shape().to_vec());
            let is_div = matches!(node.op, Op::Div(..));
            {
                let (da, db, gd) = (ta.data(), tb.data(), g.data());
                let (pa, pb) = (ga.data_mut(), gb.data_mut());
                for_each_broadcast(ta.shape(), tb.shape(), y.shape(), |o, i, j| {
                    if is_div {
                        pa[i] += gd[o] / db[j];
                        pb[j] -= gd[o] * da[i] / (db[j] * db[j]);
                    } else {
                        pa[i] += gd[o] * db[j];
                        pb[j] += gd[o] * da[i];
                    }
                });
            }
            vec![(a, ga), (b, gb)]
        }
        Op::Scale(a, c) => vec![(a, g.map(|x| x * c))],
        Op::AddScalar(a) => vec![(a, g.clone())],
        Op::Neg(a) => vec![(a, g.map(|x| -x))],
        Op::Square(a) => vec![(a, elementwise(a, &|x, _| 2.0 * x)?)],
        Op::Sqrt(a) => vec![(a, elementwise(a, &|_, y| 0.5 / y)?)],
        Op::Sigmoid(a) => vec![(a, elementwise(a, &|_, y| y * (1.0 - y))?)],
        Op::Relu(a) => vec![(a, elementwise(a, &|x, _| if x > 0.0 { 1.0 } else { 0.0 })?)],
        Op::LeakyRelu(a, s) => vec![(a, elementwise(a, &|x, _| if x > 0.0 { 1.0 } else { s })?)],
        Op::SignedPow(a, p) => {
            let d = move |x: f32, _| {
                if x == 0.0 {
                    if p == 1.0 {
                        1.0
                    } else {
                        0.0
                    }
                } else {
                    p * x.abs().powf(p - 1.0)
                }
            };
            vec![(a, elementwise(a, &d)?)]
        }
        Op::SumAll(a) => vec![(a, Tensor::full(val(a).shape().to_vec(), g.item()?))],
        Op::SumToShape(a) => vec![(a, broadcast_to(g, val(a).shape()))],
        Op::BroadcastTo(a) => vec![(a, sum_to_shape(g, val(a).shape()))],
        Op::Gather(a, ref idx) => {
            let mut ga = Tensor::zeros(val(a).shape().to_vec());
            for (&i, &v) in idx.iter().zip(g.data()) {
                ga.data_mut()[i] += v;
            }
            vec![(a, ga)]
        }
        Op::ScatterAdd(a, ref idx) => {
            let data = idx.iter().map(|&i| g.data()[i]).collect();
            vec![(a, Tensor::new(val(a).shape().to_vec(), data)?)]
        }
        Op::ReduceMaxLast(a, ref arg) => {
            let mut ga = Tensor::zeros(val(a).shape().to_vec());
            for (&i, &v) in arg.iter().zip(g.data()) {
                ga.data_mut()[i] += v;
            }
            vec![(a, ga)]
        }
        Op::Concat0(ref parts) => {
            let mut off = 0;
            let mut res = Vec::with_capacity(parts.len());
            for &p in parts {
                let t = val(p);
                let n = t.numel();
                res.push((p, Tensor::new(t.shape().to_vec(), g.data()[off..off + n].to_vec())?));
                off += n;
            }
            res
        }
        Op::L2NormalizeCols(a) => {
            let x = val(a);
            let (f, m) = col_layout(x.shape())?;
            let mut gx = vec![0.0; x.numel()];
            for j in 0..m {
                let col = |t: &[f32], i: usize| t[i * m + j];
                let norm = (0..f).map(|i| col(x.data(), i).powi(2)).sum::<f32>().sqrt();
                if norm > L2_EPS {
                    let dot: f32 = (0..f).map(|i| col(y.data(), i) * col(g.data(), i)).sum();
                    for i in 0..f {
                        gx[i * m + j] = (col(g.data(), i) - col(y.data(), i) * dot) / norm;
                    }
                } else {
                    for i in 0..f {
                        gx[i * m + j] = col(g.data(), i) / L2_EPS;
                    }
                }
            }
            vec![(a, Tensor::new(x.shape().to_vec(), gx)?)]
        }
        Op::Conv3d {
            input,
            kernel,
            bias,
            ref geom,
        } => {
            let grads = conv::backward(geom, val(input).data(), val(kernel).data(), g.data(), needs(input));
            let mut res = vec![(kernel, Tensor::new(val(kernel).shape().to_vec(), grads.kernel)?)];
            if let Some(gi) = grads.input {
                res.push((input, Tensor::new(val(input).shape().to_vec(), gi)?));
            }
            if let Some(b) = bias {
                res.push((b, Tensor::new(val(b).shape().to_vec(), grads.bias)?));
            }
            res
        }
        Op::MeanTrailing(a) => {
            let x = val(a);
            let s: usize = x.shape()[2..].iter().product::<usize>().max(1);
            let data = g.data().iter().flat_map(|&v| std::iter::repeat_n(v / s as f32, s)).collect();
            vec![(a, Tensor::new(x.shape().to_vec(), data)?)]
        }
        Op::Chamfer(a, b, ref m) => {
            let (ta, tb) = (val(a), val(b));
            let mut ga = vec![0.0; ta.numel()];
            let mut gb = vec![0.0; tb.numel()];
            for k in 0..m.batch {
                let gk = g.data()[k];
                let (oa, ob) = (k * m.na * 3, k * m.nb * 3);
                let wa = 2.0 * gk / m.na as f32;
                for i in 0..m.na {
                    let j = m.a_to_b[k * m.na + i];
                    for d in 0..3 {
                        let diff = ta.data()[oa + i * 3 + d] - tb.data()[ob + j * 3 + d];
                        ga[oa + i * 3 + d] += wa * diff;
                        gb[ob + j * 3 + d] -= wa * diff;
                    }
                }
                let wb = 2.0 * gk / m.nb as f32;
                for j in 0..m.nb {
                    let i = m.b_to_a[k * m.nb + j];
                    for d in 0..3 {
                        let diff = tb.data()[ob + j * 3 + d] - ta.data()[oa + i * 3 + d];
                        gb[ob + j * 3 + d] += wb * diff;
                        ga[oa + i * 3 + d] -= wb * diff;
                    }
                }
            }
            vec![
                (a, Tensor::new(ta.shape().to_vec(), ga)?),
                (b, Tensor::new(tb.shape().to_vec(), gb)?),
            ]
        }
    };
    Ok(out)
}
