//! Computation graph: eager forward kernels plus recorded adjoints.

use std::collections::HashMap;

use super::{Real, Tensor, TensorError, TensorResult};
use crate::rng::RngStream;

/// Index of a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

/// Stable identifier of a parameter tensor (see `nn::ParamStore`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub u32);

enum Op<T> {
    Leaf,
    Add,
    Sub,
    Mul,
    MatMul,
    Sin,
    Relu,
    LeakyRelu { slope: T },
    Exp,
    Log,
    Square,
    Softplus,
    Mean,
    Sum,
    Softmax,
    LayerNorm { mean: Vec<T>, inv: Vec<T> },
    Concat,
    Slice { offset: usize, len: usize },
    Reshape,
    Transpose { a: usize, b: usize },
    Dropout { mask: Vec<T> },
    GaussianNoise,
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::MatMul => "matmul",
            Op::Sin => "sin",
            Op::Relu => "relu",
            Op::LeakyRelu { .. } => "leaky-relu",
            Op::Exp => "exp",
            Op::Log => "log",
            Op::Square => "square",
            Op::Softplus => "softplus",
            Op::Mean => "mean",
            Op::Sum => "sum",
            Op::Softmax => "softmax-lastdim",
            Op::LayerNorm { .. } => "layer-norm",
            Op::Concat => "concat-lastdim",
            Op::Slice { .. } => "slice-lastdim",
            Op::Reshape => "reshape",
            Op::Transpose { .. } => "transpose",
            Op::Dropout { .. } => "dropout",
            Op::GaussianNoise => "gaussian-noise",
        }
    }
}

struct Node<T> {
    op: Op<T>,
    inputs: Vec<NodeId>,
    value: Tensor<T>,
    requires_grad: bool,
}

/// Which operand of a binary op is tiled over the other's leading dims.
#[derive(Clone, Copy, PartialEq)]
enum BcSide {
    None,
    Lhs,
    Rhs,
}

fn suffix_of(small: &[usize], big: &[usize]) -> bool {
    small.len() <= big.len() && &big[big.len() - small.len()..] == small
}

fn broadcast_side(op: &'static str, lhs: &[usize], rhs: &[usize]) -> TensorResult<BcSide> {
    if lhs == rhs {
        Ok(BcSide::None)
    } else if suffix_of(rhs, lhs) {
        Ok(BcSide::Rhs)
    } else if suffix_of(lhs, rhs) {
        Ok(BcSide::Lhs)
    } else {
        Err(TensorError::ShapeMismatch {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        })
    }
}

/// A recorded forward pass. Nodes are stored in application order, so the
/// insertion order is already a topological order.
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
    param_binds: Vec<(ParamId, NodeId)>,
    backward_done: bool,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            param_binds: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Insert a leaf; it participates in backward iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor<T>) -> NodeId {
        let rg = t.requires_grad();
        self.push(Op::Leaf, vec![], t, rg)
    }

    /// Insert a non-differentiable constant.
    pub fn constant(&mut self, t: Tensor<T>) -> NodeId {
        self.push(Op::Leaf, vec![], t, false)
    }

    /// Insert a differentiable leaf bound to a parameter id; its gradient is
    /// reported under that id by [`Gradients::param`].
    pub fn param(&mut self, t: Tensor<T>, pid: ParamId) -> NodeId {
        let id = self.push(Op::Leaf, vec![], t, true);
        self.param_binds.push((pid, id));
        id
    }

    pub fn scalar(&mut self, v: f64) -> NodeId {
        self.constant(Tensor::scalar(T::from_f64(v)))
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    /// Value of a one-element node.
    pub fn scalar_value(&self, id: NodeId) -> TensorResult<T> {
        self.nodes[id.0].value.item()
    }

    fn push(&mut self, op: Op<T>, inputs: Vec<NodeId>, value: Tensor<T>, rg: bool) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            op,
            inputs,
            value,
            requires_grad: rg,
        });
        id
    }

    fn any_grad(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    fn finish(
        &mut self,
        op: Op<T>,
        inputs: Vec<NodeId>,
        shape: Vec<usize>,
        data: Vec<T>,
    ) -> TensorResult<NodeId> {
        if !data.iter().all(|v| v.is_finite_val()) {
            return Err(TensorError::NonFinite { op: op.name() });
        }
        let rg = self.any_grad(&inputs);
        Ok(self.push(op, inputs, Tensor::from_vec_unchecked(shape, data), rg))
    }

    // ---- element-wise binary ------------------------------------------------

    fn binary(
        &mut self,
        op: Op<T>,
        a: NodeId,
        b: NodeId,
        f: impl Fn(T, T) -> T,
    ) -> TensorResult<NodeId> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let side = broadcast_side(op.name(), av.shape(), bv.shape())?;
        let (out_shape, data) = match side {
            BcSide::None => (
                av.shape().to_vec(),
                av.data()
                    .iter()
                    .zip(bv.data())
                    .map(|(&x, &y)| f(x, y))
                    .collect(),
            ),
            BcSide::Rhs => {
                let bl = bv.len();
                let mut out = Vec::with_capacity(av.len());
                for chunk in av.data().chunks_exact(bl) {
                    out.extend(chunk.iter().zip(bv.data()).map(|(&x, &y)| f(x, y)));
                }
                (av.shape().to_vec(), out)
            }
            BcSide::Lhs => {
                let al = av.len();
                let mut out = Vec::with_capacity(bv.len());
                for chunk in bv.data().chunks_exact(al) {
                    out.extend(av.data().iter().zip(chunk).map(|(&x, &y)| f(x, y)));
                }
                (bv.shape().to_vec(), out)
            }
        };
        self.finish(op, vec![a, b], out_shape, data)
    }

    /// Element-wise sum; the smaller operand's shape must be a suffix of the
    /// larger's and is tiled over the leading (batch) dimensions.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> TensorResult<NodeId> {
        self.binary(Op::Add, a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> TensorResult<NodeId> {
        self.binary(Op::Sub, a, b, |x, y| x - y)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> TensorResult<NodeId> {
        self.binary(Op::Mul, a, b, |x, y| x * y)
    }

    /// Multiply by a compile-time constant.
    pub fn scale(&mut self, x: NodeId, c: f64) -> TensorResult<NodeId> {
        let s = self.scalar(c);
        self.mul(x, s)
    }

    pub fn add_scalar(&mut self, x: NodeId, c: f64) -> TensorResult<NodeId> {
        let s = self.scalar(c);
        self.add(x, s)
    }

    pub fn neg(&mut self, x: NodeId) -> TensorResult<NodeId> {
        self.scale(x, -1.0)
    }

    // ---- element-wise unary -------------------------------------------------

    fn unary(&mut self, op: Op<T>, x: NodeId, f: impl Fn(T) -> T) -> TensorResult<NodeId> {
        let xv = &self.nodes[x.0].value;
        let shape = xv.shape().to_vec();
        let data = xv.data().iter().map(|&v| f(v)).collect();
        self.finish(op, vec![x], shape, data)
    }

    pub fn sin(&mut self, x: NodeId) -> TensorResult<NodeId> {
        self.unary(Op::Sin, x, |v| v.sin_val())
    }

    pub fn relu(&mut self, x: NodeId) -> TensorResult<NodeId> {
        self.unary(Op::Relu, x, |v| v.max_val(T::zero()))
    }

    pub fn leaky_relu(&mut self, x: NodeId, slope: f64) -> TensorResult<NodeId> {
        let s = T::from_f64(slope);
        self.unary(Op::LeakyRelu { slope: s }, x, |v| {
            if v > T::zero() {
                v
            } else {
                s * v
            }
        })
    }

    pub fn exp(&mut self, x: NodeId) -> TensorResult<NodeId> {
        self.unary(Op::Exp, x, |v| v.exp_val())
    }

    pub fn log(&mut self, x: NodeId) -> TensorResult<NodeId> {
        self.unary(Op::Log, x, |v| v.ln_val())
    }

    pub fn square(&mut self, x: NodeId) -> TensorResult<NodeId> {
        self.unary(Op::Square, x, |v| v * v)
    }

    /// `ln(1 + e^x)`, computed in the overflow-safe branch form.
    pub fn softplus(&mut self, x: NodeId) -> TensorResult<NodeId> {
        self.unary(Op::Softplus, x, softplus_val)
    }

    // ---- reductions ---------------------------------------------------------

    pub fn sum(&mut self, x: NodeId) -> TensorResult<NodeId> {
        let mut acc = T::zero();
        for &v in self.nodes[x.0].value.data() {
            acc += v;
        }
        self.finish(Op::Sum, vec![x], vec![], vec![acc])
    }

    pub fn mean(&mut self, x: NodeId) -> TensorResult<NodeId> {
        let n = self.nodes[x.0].value.len();
        let mut acc = T::zero();
        for &v in self.nodes[x.0].value.data() {
            acc += v;
        }
        let m = acc / T::from_f64(n as f64);
        self.finish(Op::Mean, vec![x], vec![], vec![m])
    }

    // ---- last-dim structure ops ----------------------------------------------

    /// Numerically stable softmax over the last dimension.
    pub fn softmax(&mut self, x: NodeId) -> TensorResult<NodeId> {
        let xv = &self.nodes[x.0].value;
        let d = *xv.shape().last().ok_or(TensorError::InvalidShape {
            op: "softmax-lastdim",
            shape: vec![],
            reason: "rank-0 input".into(),
        })?;
        let mut data = Vec::with_capacity(xv.len());
        for row in xv.data().chunks_exact(d) {
            let mx = row.iter().fold(row[0], |m, &v| m.max_val(v));
            let mut denom = T::zero();
            let start = data.len();
            for &v in row {
                let e = (v - mx).exp_val();
                denom += e;
                data.push(e);
            }
            for v in &mut data[start..] {
                *v = *v / denom;
            }
        }
        let shape = xv.shape().to_vec();
        self.finish(Op::Softmax, vec![x], shape, data)
    }

    /// Normalize the last dimension to zero mean and unit population
    /// variance. Affine scale/shift, when wanted, is applied by the caller
    /// with `mul`/`add`.
    pub fn layer_norm(&mut self, x: NodeId, eps: f64) -> TensorResult<NodeId> {
        let xv = &self.nodes[x.0].value;
        let d = *xv.shape().last().ok_or(TensorError::InvalidShape {
            op: "layer-norm",
            shape: vec![],
            reason: "rank-0 input".into(),
        })?;
        let rows = xv.len() / d;
        let dn = T::from_f64(d as f64);
        let epsv = T::from_f64(eps);
        let mut data = Vec::with_capacity(xv.len());
        let mut means = Vec::with_capacity(rows);
        let mut invs = Vec::with_capacity(rows);
        for row in xv.data().chunks_exact(d) {
            let mut mu = T::zero();
            for &v in row {
                mu += v;
            }
            mu = mu / dn;
            let mut var = T::zero();
            for &v in row {
                let c = v - mu;
                var += c * c;
            }
            var = var / dn;
            let inv = T::one() / (var + epsv).sqrt_val();
            means.push(mu);
            invs.push(inv);
            for &v in row {
                data.push((v - mu) * inv);
            }
        }
        let shape = xv.shape().to_vec();
        self.finish(
            Op::LayerNorm {
                mean: means,
                inv: invs,
            },
            vec![x],
            shape,
            data,
        )
    }

    /// Concatenate along the last dimension; all other dims must agree.
    pub fn concat(&mut self, xs: &[NodeId]) -> TensorResult<NodeId> {
        assert!(!xs.is_empty(), "concat of zero tensors");
        let first = self.nodes[xs[0].0].value.shape().to_vec();
        let lead = &first[..first.len() - 1];
        let mut total_last = 0usize;
        let mut lasts = Vec::with_capacity(xs.len());
        for &x in xs {
            let sh = self.nodes[x.0].value.shape();
            if sh.len() != first.len() || &sh[..sh.len() - 1] != lead {
                return Err(TensorError::ShapeMismatch {
                    op: "concat-lastdim",
                    lhs: first.clone(),
                    rhs: sh.to_vec(),
                });
            }
            lasts.push(sh[sh.len() - 1]);
            total_last += sh[sh.len() - 1];
        }
        let rows: usize = lead.iter().product();
        let mut data = Vec::with_capacity(rows * total_last);
        for r in 0..rows {
            for (i, &x) in xs.iter().enumerate() {
                let d = lasts[i];
                let src = self.nodes[x.0].value.data();
                data.extend_from_slice(&src[r * d..(r + 1) * d]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total_last);
        self.finish(Op::Concat, xs.to_vec(), shape, data)
    }

    /// Contiguous range of the last dimension.
    pub fn slice_last(&mut self, x: NodeId, offset: usize, len: usize) -> TensorResult<NodeId> {
        let xv = &self.nodes[x.0].value;
        let sh = xv.shape().to_vec();
        let d = *sh.last().ok_or(TensorError::InvalidShape {
            op: "slice-lastdim",
            shape: sh.clone(),
            reason: "rank-0 input".into(),
        })?;
        if len == 0 || offset + len > d {
            return Err(TensorError::InvalidShape {
                op: "slice-lastdim",
                shape: sh,
                reason: format!("slice [{offset}, {}) out of last dim {d}", offset + len),
            });
        }
        let rows = xv.len() / d;
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&xv.data()[r * d + offset..r * d + offset + len]);
        }
        let mut shape = sh;
        *shape.last_mut().unwrap() = len;
        self.finish(Op::Slice { offset, len }, vec![x], shape, data)
    }

    // ---- layout ops ----------------------------------------------------------

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> TensorResult<NodeId> {
        let v = self.nodes[x.0].value.reshaped(shape)?;
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(Op::Reshape, vec![x], v, rg))
    }

    /// Swap two axes.
    pub fn transpose(&mut self, x: NodeId, a: usize, b: usize) -> TensorResult<NodeId> {
        let xv = &self.nodes[x.0].value;
        let sh = xv.shape();
        if a >= sh.len() || b >= sh.len() {
            return Err(TensorError::InvalidShape {
                op: "transpose",
                shape: sh.to_vec(),
                reason: format!("axes ({a}, {b}) out of range"),
            });
        }
        if a == b {
            let rg = self.nodes[x.0].requires_grad;
            let v = self.nodes[x.0].value.clone();
            return Ok(self.push(Op::Transpose { a, b }, vec![x], v, rg));
        }
        let mut out_shape = sh.to_vec();
        out_shape.swap(a, b);
        let mut data = vec![T::zero(); xv.len()];
        permuted_axes_copy(xv.data(), sh, a, b, &mut data, false);
        self.finish(Op::Transpose { a, b }, vec![x], out_shape, data)
    }

    /// Swap the last two axes.
    pub fn transpose_last(&mut self, x: NodeId) -> TensorResult<NodeId> {
        let n = self.nodes[x.0].value.ndim();
        assert!(n >= 2, "transpose_last needs rank >= 2");
        self.transpose(x, n - 2, n - 1)
    }

    // ---- stochastic ops --------------------------------------------------------

    /// Inverted dropout. With `train == false` or `p == 0` this is the
    /// identity and returns `x` itself (bit-exact, nothing recorded).
    pub fn dropout(
        &mut self,
        x: NodeId,
        p: f64,
        train: bool,
        stream: &mut RngStream,
    ) -> TensorResult<NodeId> {
        if !train || p == 0.0 {
            return Ok(x);
        }
        assert!((0.0..1.0).contains(&p), "dropout p must be in [0, 1)");
        let keep = T::from_f64(1.0 / (1.0 - p));
        let xv = &self.nodes[x.0].value;
        let mask: Vec<T> = (0..xv.len())
            .map(|_| {
                if stream.uniform() < p {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect();
        let shape = xv.shape().to_vec();
        let data = xv
            .data()
            .iter()
            .zip(&mask)
            .map(|(&v, &m)| v * m)
            .collect();
        self.finish(Op::Dropout { mask }, vec![x], shape, data)
    }

    /// Additive i.i.d. Gaussian noise with the given standard deviation.
    /// Identity (returns `x` itself) when `train == false` or `std == 0`.
    pub fn gaussian_noise(
        &mut self,
        x: NodeId,
        std: f64,
        train: bool,
        stream: &mut RngStream,
    ) -> TensorResult<NodeId> {
        if !train || std == 0.0 {
            return Ok(x);
        }
        let xv = &self.nodes[x.0].value;
        let shape = xv.shape().to_vec();
        let data = xv
            .data()
            .iter()
            .map(|&v| v + T::from_f64(std * stream.normal()))
            .collect();
        self.finish(Op::GaussianNoise, vec![x], shape, data)
    }

    // ---- matmul ---------------------------------------------------------------

    /// Batched matrix product. Both operands are stacks of row-major
    /// matrices over their leading dims; the leading dims must be equal, or
    /// one side may have none and is then shared across the other's batches.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> TensorResult<NodeId> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (ash, bsh) = (av.shape(), bv.shape());
        let mismatch = || TensorError::ShapeMismatch {
            op: "matmul",
            lhs: ash.to_vec(),
            rhs: bsh.to_vec(),
        };
        if ash.len() < 2 || bsh.len() < 2 {
            return Err(mismatch());
        }
        let (m, k) = (ash[ash.len() - 2], ash[ash.len() - 1]);
        let (k2, n) = (bsh[bsh.len() - 2], bsh[bsh.len() - 1]);
        let lead_a = &ash[..ash.len() - 2];
        let lead_b = &bsh[..bsh.len() - 2];
        if k != k2 {
            return Err(mismatch());
        }
        let (lead, bc_a, bc_b) = if lead_a == lead_b {
            (lead_a, false, false)
        } else if lead_b.is_empty() {
            (lead_a, false, true)
        } else if lead_a.is_empty() {
            (lead_b, true, false)
        } else {
            return Err(mismatch());
        };
        let batches: usize = lead.iter().product();
        let mut out = vec![T::zero(); batches * m * n];
        let ap = av.data().as_ptr();
        let bp = bv.data().as_ptr();
        let cp = out.as_mut_ptr();
        for i in 0..batches {
            let ao = if bc_a { 0 } else { i * m * k };
            let bo = if bc_b { 0 } else { i * k * n };
            unsafe {
                T::gemm(
                    m,
                    k,
                    n,
                    T::one(),
                    ap.add(ao),
                    k as isize,
                    1,
                    bp.add(bo),
                    n as isize,
                    1,
                    T::zero(),
                    cp.add(i * m * n),
                    n as isize,
                    1,
                );
            }
        }
        let mut shape = lead.to_vec();
        shape.push(m);
        shape.push(n);
        self.finish(Op::MatMul, vec![a, b], shape, out)
    }

    // ---- backward ---------------------------------------------------------------

    /// Reverse-mode sweep from a scalar loss. Returns gradients for every
    /// `requires_grad` leaf (zero when unreached). Errors if called twice on
    /// the same graph or if `loss` is not scalar.
    pub fn backward(&mut self, loss: NodeId) -> TensorResult<Gradients<T>> {
        if self.backward_done {
            return Err(TensorError::BackwardTwice);
        }
        let lv = &self.nodes[loss.0].value;
        if !lv.is_scalar() {
            return Err(TensorError::NonScalarLoss {
                shape: lv.shape().to_vec(),
            });
        }
        self.backward_done = true;

        let mut adj: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        adj[loss.0] = Some(vec![T::one()]);
        let mut leaf_grads: HashMap<usize, Tensor<T>> = HashMap::new();

        for id in (0..=loss.0).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let Some(g) = adj[id].take() else { continue };
            if matches!(self.nodes[id].op, Op::Leaf) {
                let shape = self.nodes[id].value.shape().to_vec();
                leaf_grads.insert(id, Tensor::from_vec_unchecked(shape, g));
                continue;
            }
            self.propagate(id, &g, &mut adj);
        }

        // Unreached requires_grad leaves get explicit zeros.
        let mut params: HashMap<u32, Tensor<T>> = HashMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.requires_grad && !leaf_grads.contains_key(&i) {
                leaf_grads.insert(i, Tensor::zeros(node.value.shape()));
            }
        }
        for &(pid, nid) in &self.param_binds {
            if let Some(g) = leaf_grads.get(&nid.0) {
                params
                    .entry(pid.0)
                    .and_modify(|acc| {
                        let sum: Vec<T> = acc
                            .data()
                            .iter()
                            .zip(g.data())
                            .map(|(&x, &y)| x + y)
                            .collect();
                        *acc = Tensor::from_vec_unchecked(acc.shape().to_vec(), sum);
                    })
                    .or_insert_with(|| g.clone());
            }
        }
        Ok(Gradients {
            leaves: leaf_grads,
            params,
        })
    }

    fn propagate(&self, id: usize, g: &[T], adj: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[id];
        let ins = &node.inputs;
        let in_val = |i: usize| &self.nodes[ins[i].0].value;
        let in_grad = |i: usize| self.nodes[ins[i].0].requires_grad;
        macro_rules! acc {
            ($i:expr, $f:expr) => {{
                if in_grad($i) {
                    let len = in_val($i).len();
                    let buf = adj[ins[$i].0].get_or_insert_with(|| vec![T::zero(); len]);
                    #[allow(clippy::redundant_closure_call)]
                    ($f)(&mut buf[..]);
                }
            }};
        }

        match &node.op {
            Op::Leaf => unreachable!("leaf handled by caller"),
            Op::Add | Op::Sub => {
                let negate = matches!(node.op, Op::Sub);
                let (ls, rs) = (in_val(0).shape(), in_val(1).shape());
                let side = broadcast_side("", ls, rs).expect("checked at forward");
                acc!(0, |buf: &mut [T]| accumulate_bc(
                    buf,
                    g,
                    side == BcSide::Lhs,
                    |_, gv| gv
                ));
                if negate {
                    acc!(1, |buf: &mut [T]| accumulate_bc(
                        buf,
                        g,
                        side == BcSide::Rhs,
                        |_, gv| -gv
                    ));
                } else {
                    acc!(1, |buf: &mut [T]| accumulate_bc(
                        buf,
                        g,
                        side == BcSide::Rhs,
                        |_, gv| gv
                    ));
                }
            }
            Op::Mul => {
                let (ls, rs) = (in_val(0).shape(), in_val(1).shape());
                let side = broadcast_side("", ls, rs).expect("checked at forward");
                let (a, b) = (in_val(0).data(), in_val(1).data());
                // d/da (a*b) = g*b, tiled to match a's extent; symmetric for b.
                acc!(0, |buf: &mut [T]| accumulate_factor(
                    buf,
                    g,
                    b,
                    side == BcSide::Lhs
                ));
                acc!(1, |buf: &mut [T]| accumulate_factor(
                    buf,
                    g,
                    a,
                    side == BcSide::Rhs
                ));
            }
            Op::MatMul => self.matmul_backward(id, g, adj),
            Op::Sin => {
                let x = in_val(0).data();
                acc!(0, |buf: &mut [T]| for i in 0..buf.len() {
                    buf[i] += g[i] * x[i].cos_val();
                });
            }
            Op::Relu => {
                let x = in_val(0).data();
                acc!(0, |buf: &mut [T]| for i in 0..buf.len() {
                    if x[i] > T::zero() {
                        buf[i] += g[i];
                    }
                });
            }
            Op::LeakyRelu { slope } => {
                let (x, s) = (in_val(0).data(), *slope);
                // Subgradient at exactly 0 is taken as 0.
                acc!(0, |buf: &mut [T]| for i in 0..buf.len() {
                    if x[i] > T::zero() {
                        buf[i] += g[i];
                    } else if x[i] < T::zero() {
                        buf[i] += g[i] * s;
                    }
                });
            }
            Op::Exp => {
                let y = node.value.data();
                acc!(0, |buf: &mut [T]| for i in 0..buf.len() {
                    buf[i] += g[i] * y[i];
                });
            }
            Op::Log => {
                let x = in_val(0).data();
                acc!(0, |buf: &mut [T]| for i in 0..buf.len() {
                    buf[i] += g[i] / x[i];
                });
            }
            Op::Square => {
                let x = in_val(0).data();
                let two = T::from_f64(2.0);
                acc!(0, |buf: &mut [T]| for i in 0..buf.len() {
                    buf[i] += g[i] * two * x[i];
                });
            }
            Op::Softplus => {
                let x = in_val(0).data();
                acc!(0, |buf: &mut [T]| for i in 0..buf.len() {
                    buf[i] += g[i] * sigmoid_val(x[i]);
                });
            }
            Op::Sum => {
                let gv = g[0];
                acc!(0, |buf: &mut [T]| for v in buf.iter_mut() {
                    *v += gv;
                });
            }
            Op::Mean => {
                let n = in_val(0).len();
                let gv = g[0] / T::from_f64(n as f64);
                acc!(0, |buf: &mut [T]| for v in buf.iter_mut() {
                    *v += gv;
                });
            }
            Op::Softmax => {
                let y = node.value.data();
                let d = *node.value.shape().last().unwrap();
                acc!(0, |buf: &mut [T]| {
                    for (r, (yrow, grow)) in y.chunks_exact(d).zip(g.chunks_exact(d)).enumerate() {
                        let mut dot = T::zero();
                        for j in 0..d {
                            dot += yrow[j] * grow[j];
                        }
                        let out = &mut buf[r * d..(r + 1) * d];
                        for j in 0..d {
                            out[j] += yrow[j] * (grow[j] - dot);
                        }
                    }
                });
            }
            Op::LayerNorm { mean, inv } => {
                let x = in_val(0).data();
                let d = *node.value.shape().last().unwrap();
                let dn = T::from_f64(d as f64);
                acc!(0, |buf: &mut [T]| {
                    for r in 0..mean.len() {
                        let (mu, iv) = (mean[r], inv[r]);
                        let xrow = &x[r * d..(r + 1) * d];
                        let grow = &g[r * d..(r + 1) * d];
                        let mut m1 = T::zero();
                        let mut m2 = T::zero();
                        for j in 0..d {
                            let xh = (xrow[j] - mu) * iv;
                            m1 += grow[j];
                            m2 += grow[j] * xh;
                        }
                        m1 = m1 / dn;
                        m2 = m2 / dn;
                        let out = &mut buf[r * d..(r + 1) * d];
                        for j in 0..d {
                            let xh = (xrow[j] - mu) * iv;
                            out[j] += iv * (grow[j] - m1 - xh * m2);
                        }
                    }
                });
            }
            Op::Concat => {
                let lasts: Vec<usize> = ins
                    .iter()
                    .map(|x| *self.nodes[x.0].value.shape().last().unwrap())
                    .collect();
                let total: usize = lasts.iter().sum();
                let rows = node.value.len() / total;
                let mut offset = 0usize;
                for (i, &d) in lasts.iter().enumerate() {
                    acc!(i, |buf: &mut [T]| for r in 0..rows {
                        let src = &g[r * total + offset..r * total + offset + d];
                        let dst = &mut buf[r * d..(r + 1) * d];
                        for j in 0..d {
                            dst[j] += src[j];
                        }
                    });
                    offset += d;
                }
            }
            Op::Slice { offset, len } => {
                let d = *in_val(0).shape().last().unwrap();
                let rows = in_val(0).len() / d;
                let (o, l) = (*offset, *len);
                acc!(0, |buf: &mut [T]| for r in 0..rows {
                    let src = &g[r * l..(r + 1) * l];
                    let dst = &mut buf[r * d + o..r * d + o + l];
                    for j in 0..l {
                        dst[j] += src[j];
                    }
                });
            }
            Op::Reshape => {
                acc!(0, |buf: &mut [T]| for i in 0..buf.len() {
                    buf[i] += g[i];
                });
            }
            Op::Transpose { a, b } => {
                let out_shape = node.value.shape();
                let (a, b) = (*a, *b);
                if a == b {
                    acc!(0, |buf: &mut [T]| for i in 0..buf.len() {
                        buf[i] += g[i];
                    });
                } else {
                    // The adjoint of an axis swap is the same swap on g.
                    acc!(0, |buf: &mut [T]| permuted_axes_copy(
                        g, out_shape, a, b, buf, true
                    ));
                }
            }
            Op::Dropout { mask } => {
                acc!(0, |buf: &mut [T]| for i in 0..buf.len() {
                    buf[i] += g[i] * mask[i];
                });
            }
            Op::GaussianNoise => {
                acc!(0, |buf: &mut [T]| for i in 0..buf.len() {
                    buf[i] += g[i];
                });
            }
        }
    }

    fn matmul_backward(&self, id: usize, g: &[T], adj: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[id];
        let (a, b) = (node.inputs[0], node.inputs[1]);
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (ash, bsh) = (av.shape(), bv.shape());
        let (m, k) = (ash[ash.len() - 2], ash[ash.len() - 1]);
        let n = bsh[bsh.len() - 1];
        let lead_a = &ash[..ash.len() - 2];
        let lead_b = &bsh[..bsh.len() - 2];
        let (bc_a, bc_b) = (
            lead_a.is_empty() && !lead_b.is_empty(),
            lead_b.is_empty() && !lead_a.is_empty(),
        );
        let batches: usize = if bc_a { lead_b } else { lead_a }.iter().product();

        if self.nodes[a.0].requires_grad {
            let buf = adj[a.0].get_or_insert_with(|| vec![T::zero(); av.len()]);
            let bp = bv.data().as_ptr();
            let gp = g.as_ptr();
            let dp = buf.as_mut_ptr();
            for i in 0..batches {
                let bo = if bc_b { 0 } else { i * k * n };
                let ao = if bc_a { 0 } else { i * m * k };
                // dA += g . B^T
                unsafe {
                    T::gemm(
                        m,
                        n,
                        k,
                        T::one(),
                        gp.add(i * m * n),
                        n as isize,
                        1,
                        bp.add(bo),
                        1,
                        n as isize,
                        T::one(),
                        dp.add(ao),
                        k as isize,
                        1,
                    );
                }
            }
        }
        if self.nodes[b.0].requires_grad {
            let buf = adj[b.0].get_or_insert_with(|| vec![T::zero(); bv.len()]);
            let ap = av.data().as_ptr();
            let gp = g.as_ptr();
            let dp = buf.as_mut_ptr();
            for i in 0..batches {
                let ao = if bc_a { 0 } else { i * m * k };
                let bo = if bc_b { 0 } else { i * k * n };
                // dB += A^T . g
                unsafe {
                    T::gemm(
                        k,
                        m,
                        n,
                        T::one(),
                        ap.add(ao),
                        1,
                        k as isize,
                        gp.add(i * m * n),
                        n as isize,
                        1,
                        T::one(),
                        dp.add(bo),
                        n as isize,
                        1,
                    );
                }
            }
        }
    }
}

fn softplus_val<T: Real>(x: T) -> T {
    if x > T::zero() {
        x + (-x).exp_val().ln_1p_val()
    } else {
        x.exp_val().ln_1p_val()
    }
}

fn sigmoid_val<T: Real>(x: T) -> T {
    if x > T::zero() {
        T::one() / (T::one() + (-x).exp_val())
    } else {
        let e = x.exp_val();
        e / (T::one() + e)
    }
}

/// `buf += f(tile index, g)` handling suffix broadcast: when `tiled` is set,
/// `buf` is the smaller operand and `g` is folded over it in tiles.
fn accumulate_bc<T: Real>(buf: &mut [T], g: &[T], tiled: bool, f: impl Fn(usize, T) -> T) {
    if tiled {
        let bl = buf.len();
        for chunk in g.chunks_exact(bl) {
            for j in 0..bl {
                buf[j] += f(j, chunk[j]);
            }
        }
    } else {
        for i in 0..buf.len() {
            buf[i] += f(i, g[i]);
        }
    }
}

/// For `mul`: `buf += g * other`, where the *output*-shaped product is folded
/// into `buf` when `buf` belongs to the broadcast (smaller) operand. `other`
/// may itself be the smaller operand and is then tiled.
fn accumulate_factor<T: Real>(buf: &mut [T], g: &[T], other: &[T], buf_is_tiled: bool) {
    let ol = other.len();
    if buf_is_tiled {
        let bl = buf.len();
        for (ci, chunk) in g.chunks_exact(bl).enumerate() {
            for j in 0..bl {
                let oi = if ol == g.len() { ci * bl + j } else { (ci * bl + j) % ol };
                buf[j] += chunk[j] * other[oi];
            }
        }
    } else if ol == buf.len() {
        for i in 0..buf.len() {
            buf[i] += g[i] * other[i];
        }
    } else {
        // other is the smaller operand, tiled over buf.
        for (ci, chunk) in buf.chunks_exact_mut(ol).enumerate() {
            for j in 0..ol {
                chunk[j] += g[ci * ol + j] * other[j];
            }
        }
    }
}

/// Copy `src` (of `shape`) into `dst` with axes `a` and `b` swapped.
/// With `add` set, accumulates instead of overwriting.
fn permuted_axes_copy<T: Real>(
    src: &[T],
    src_shape: &[usize],
    a: usize,
    b: usize,
    dst: &mut [T],
    add: bool,
) {
    let ndim = src_shape.len();
    let mut src_strides = vec![1usize; ndim];
    for i in (0..ndim.saturating_sub(1)).rev() {
        src_strides[i] = src_strides[i + 1] * src_shape[i + 1];
    }
    let mut out_shape = src_shape.to_vec();
    out_shape.swap(a, b);
    // Stride to take in src when advancing along each output axis.
    let mut walk = src_strides.clone();
    walk.swap(a, b);

    let mut idx = vec![0usize; ndim];
    let mut src_off = 0usize;
    for v in dst.iter_mut() {
        if add {
            *v += src[src_off];
        } else {
            *v = src[src_off];
        }
        // Odometer increment from the last output axis.
        for d in (0..ndim).rev() {
            idx[d] += 1;
            src_off += walk[d];
            if idx[d] < out_shape[d] {
                break;
            }
            src_off -= walk[d] * out_shape[d];
            idx[d] = 0;
        }
    }
}

/// Result of a backward sweep.
pub struct Gradients<T> {
    leaves: HashMap<usize, Tensor<T>>,
    params: HashMap<u32, Tensor<T>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of a `requires_grad` leaf, if `id` is one.
    pub fn leaf(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.leaves.get(&id.0)
    }

    /// Gradient of a bound parameter (summed over multiple bindings).
    pub fn param(&self, pid: ParamId) -> Option<&Tensor<T>> {
        self.params.get(&pid.0)
    }
}
