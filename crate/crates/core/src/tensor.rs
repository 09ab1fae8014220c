//! Dense tensors with tape-based reverse-mode differentiation.
//!
//! Every operation on tensors that require gradients records a node holding
//! its inputs and a backward closure. [`Tensor::backward`] replays the recorded
//! graph in reverse topological order and accumulates gradients into the leaf
//! tensors created with [`Tensor::param`].
//!
//! Recording is suppressed inside [`no_grad`], and an operation whose inputs
//! carry no gradient never allocates a node, so inference passes leave the
//! node counter ([`graph_nodes_created`]) untouched.
//!
//! Operations take shapes literally: the only broadcasting is a one-element
//! operand in the binary element-wise ops, plus the explicit trailing-axis
//! broadcast of [`Tensor::add_bias`].

use std::cell::Cell;
use std::collections::HashMap;
use std::fmt;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex, RwLock, RwLockReadGuard};

use crate::error::{dim_err, Result, StgcnError};
use crate::scalar::Scalar;
use crate::sparse::CsrMatrix;

static NEXT_ID: AtomicUsize = AtomicUsize::new(0);

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
    static NODES_CREATED: Cell<usize> = const { Cell::new(0) };
}

/// Number of graph nodes recorded on the current thread so far.
pub fn graph_nodes_created() -> usize {
    NODES_CREATED.with(|c| c.get())
}

fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|c| c.get())
}

/// Runs `f` with graph recording disabled on this thread.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    struct Restore(bool);
    impl Drop for Restore {
        fn drop(&mut self) {
            GRAD_ENABLED.with(|c| c.set(self.0));
        }
    }
    let _restore = Restore(GRAD_ENABLED.with(|c| c.replace(false)));
    f()
}

type BackwardFn<T> = Box<dyn Fn(&[T], &[bool]) -> Vec<Option<Vec<T>>> + Send + Sync>;

struct Node<T> {
    op: &'static str,
    inputs: Vec<Tensor<T>>,
    backward: BackwardFn<T>,
}

struct Inner<T> {
    id: usize,
    shape: Vec<usize>,
    data: RwLock<Vec<T>>,
    grad: Mutex<Option<Vec<T>>>,
    requires_grad: bool,
    node: Option<Node<T>>,
}

/// Row-major dense tensor, cheap to clone (shared storage).
#[derive(Clone)]
pub struct Tensor<T>(Arc<Inner<T>>);

impl<T> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let op = self.0.node.as_ref().map_or("leaf", |n| n.op);
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("op", &op)
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

/// Element-wise operations exposed through [`elementwise`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElementwiseOp {
    Add,
    Mul,
    Sigmoid,
    Relu,
}

/// Applies `op` to `a` (and `b` for the binary ops).
pub fn elementwise<T: Scalar>(
    op: ElementwiseOp,
    a: &Tensor<T>,
    b: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    let need_b = || {
        b.ok_or_else(|| StgcnError::Contract(format!("{op:?} needs a second operand")))
    };
    match op {
        ElementwiseOp::Add => a.add(need_b()?),
        ElementwiseOp::Mul => a.mul(need_b()?),
        ElementwiseOp::Sigmoid => Ok(a.sigmoid()),
        ElementwiseOp::Relu => Ok(a.relu()),
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

impl<T: Scalar> Tensor<T> {
    fn build(shape: Vec<usize>, data: Vec<T>, requires_grad: bool, node: Option<Node<T>>) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Tensor(Arc::new(Inner {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data: RwLock::new(data),
            grad: Mutex::new(None),
            requires_grad,
            node,
        }))
    }

    /// Constant tensor (no gradient tracking).
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        if numel(shape) != data.len() {
            return Err(dim_err!(
                "shape {shape:?} needs {} values, got {}",
                numel(shape),
                data.len()
            ));
        }
        Ok(Self::build(shape.to_vec(), data, false, None))
    }

    /// Trainable leaf tensor whose gradient is accumulated by [`Tensor::backward`].
    pub fn param(shape: &[usize], data: Vec<T>) -> Result<Self> {
        if numel(shape) != data.len() {
            return Err(dim_err!(
                "shape {shape:?} needs {} values, got {}",
                numel(shape),
                data.len()
            ));
        }
        Ok(Self::build(shape.to_vec(), data, true, None))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::build(shape.to_vec(), vec![T::zero(); numel(shape)], false, None)
    }

    pub fn scalar(v: T) -> Self {
        Self::build(Vec::new(), vec![v], false, None)
    }

    /// Records an op result, or returns a plain constant when nothing upstream
    /// needs gradients.
    fn from_op<F>(shape: Vec<usize>, data: Vec<T>, op: &'static str, inputs: &[&Tensor<T>], backward: F) -> Self
    where
        F: Fn(&[T], &[bool]) -> Vec<Option<Vec<T>>> + Send + Sync + 'static,
    {
        let track = grad_enabled() && inputs.iter().any(|t| t.requires_grad());
        if !track {
            return Self::build(shape, data, false, None);
        }
        NODES_CREATED.with(|c| c.set(c.get() + 1));
        let node = Node {
            op,
            inputs: inputs.iter().map(|t| (*t).clone()).collect(),
            backward: Box::new(backward),
        };
        Self::build(shape, data, true, Some(node))
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn len(&self) -> usize {
        numel(&self.0.shape)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.0.node.is_none()
    }

    pub fn data(&self) -> RwLockReadGuard<'_, Vec<T>> {
        self.0.data.read().expect("tensor data lock poisoned")
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.data().clone()
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> Result<T> {
        if self.len() != 1 {
            return Err(dim_err!("item() on tensor of shape {:?}", self.shape()));
        }
        Ok(self.data()[0])
    }

    pub fn grad(&self) -> Option<Vec<T>> {
        self.0.grad.lock().expect("grad lock poisoned").clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.lock().expect("grad lock poisoned") = None;
    }

    /// Mutates the values of a leaf tensor in place (optimizer updates).
    pub fn update_data(&self, f: impl FnOnce(&mut [T])) -> Result<()> {
        if !self.is_leaf() {
            return Err(StgcnError::Contract(
                "in-place update of a recorded intermediate".into(),
            ));
        }
        let mut data = self.0.data.write().expect("tensor data lock poisoned");
        f(&mut data);
        Ok(())
    }

    /// Same values, detached from any graph and without gradient tracking.
    pub fn detach(&self) -> Self {
        Self::build(self.shape().to_vec(), self.to_vec(), false, None)
    }

    /// Back-propagates from this one-element tensor into every reachable leaf
    /// that requires gradients. Gradients add onto whatever the leaves hold.
    pub fn backward(&self) -> Result<()> {
        if self.len() != 1 {
            return Err(StgcnError::Contract(format!(
                "backward on non-scalar of shape {:?}",
                self.shape()
            )));
        }
        if !self.requires_grad() {
            return Err(StgcnError::Contract(
                "backward on a tensor that does not depend on any parameter".into(),
            ));
        }

        // Iterative post-order DFS: each node enters `order` exactly once.
        let mut order: Vec<Tensor<T>> = Vec::new();
        let mut visited: HashMap<usize, ()> = HashMap::new();
        let mut stack: Vec<(Tensor<T>, bool)> = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if visited.insert(t.0.id, ()).is_some() {
                continue;
            }
            stack.push((t.clone(), true));
            if let Some(node) = &t.0.node {
                for input in &node.inputs {
                    if input.requires_grad() && !visited.contains_key(&input.0.id) {
                        stack.push((input.clone(), false));
                    }
                }
            }
        }

        let mut grads: HashMap<usize, Vec<T>> = HashMap::new();
        grads.insert(self.0.id, vec![T::one()]);
        for t in order.iter().rev() {
            let Some(g) = grads.remove(&t.0.id) else {
                continue;
            };
            match &t.0.node {
                Some(node) => {
                    let needs: Vec<bool> = node.inputs.iter().map(|i| i.requires_grad()).collect();
                    let contributions = (node.backward)(&g, &needs);
                    for (input, contrib) in node.inputs.iter().zip(contributions) {
                        let Some(contrib) = contrib else { continue };
                        debug_assert_eq!(contrib.len(), input.len(), "{} backward", node.op);
                        match grads.get_mut(&input.0.id) {
                            Some(acc) => add_into(acc, &contrib),
                            None => {
                                grads.insert(input.0.id, contrib);
                            }
                        }
                    }
                }
                None => {
                    let mut slot = t.0.grad.lock().expect("grad lock poisoned");
                    match slot.as_mut() {
                        Some(acc) => add_into(acc, &g),
                        None => *slot = Some(g),
                    }
                }
            }
        }
        Ok(())
    }

    // ---- shape manipulation -------------------------------------------------

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        if numel(shape) != self.len() {
            return Err(dim_err!(
                "cannot reshape {:?} into {shape:?}",
                self.shape()
            ));
        }
        Ok(Self::from_op(
            shape.to_vec(),
            self.to_vec(),
            "reshape",
            &[self],
            |g, _| vec![Some(g.to_vec())],
        ))
    }

    /// Contiguous slice `start..start+len` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Self> {
        let shape = self.shape();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(dim_err!(
                "narrow({axis}, {start}, {len}) out of range for shape {shape:?}"
            ));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let full = shape[axis];
        let data = self.data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            out.extend_from_slice(&data[base..base + len * inner]);
        }
        drop(data);
        let mut out_shape = shape.to_vec();
        out_shape[axis] = len;
        let total = self.len();
        Ok(Self::from_op(out_shape, out, "narrow", &[self], move |g, _| {
            let mut gx = vec![T::zero(); total];
            for o in 0..outer {
                let base = (o * full + start) * inner;
                gx[base..base + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
            }
            vec![Some(gx)]
        }))
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(parts: &[Tensor<T>], axis: usize) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| StgcnError::Contract("concat of zero tensors".into()))?;
        let rank = first.shape().len();
        if axis >= rank {
            return Err(dim_err!("concat axis {axis} for rank {rank}"));
        }
        for p in parts {
            let ok = p.shape().len() == rank
                && (0..rank).all(|d| d == axis || p.shape()[d] == first.shape()[d]);
            if !ok {
                return Err(dim_err!(
                    "concat along {axis}: shapes {:?} and {:?} incompatible",
                    first.shape(),
                    p.shape()
                ));
            }
        }
        let outer: usize = first.shape()[..axis].iter().product();
        let inner: usize = first.shape()[axis + 1..].iter().product();
        let widths: Vec<usize> = parts.iter().map(|p| p.shape()[axis] * inner).collect();
        let row: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(outer * row);
        let guards: Vec<_> = parts.iter().map(|p| p.data()).collect();
        for o in 0..outer {
            for (g, &w) in guards.iter().zip(&widths) {
                out.extend_from_slice(&g[o * w..(o + 1) * w]);
            }
        }
        drop(guards);
        let mut shape = first.shape().to_vec();
        shape[axis] = parts.iter().map(|p| p.shape()[axis]).sum();
        let refs: Vec<&Tensor<T>> = parts.iter().collect();
        Ok(Self::from_op(shape, out, "concat", &refs, move |g, needs| {
            let mut offset = 0;
            widths
                .iter()
                .zip(needs)
                .map(|(&w, &need)| {
                    let start = offset;
                    offset += w;
                    need.then(|| {
                        let mut gp = Vec::with_capacity(outer * w);
                        for o in 0..outer {
                            gp.extend_from_slice(&g[o * row + start..o * row + start + w]);
                        }
                        gp
                    })
                })
                .collect()
        }))
    }

    // ---- element-wise ---------------------------------------------------------

    fn binary(
        &self,
        other: &Self,
        op: &'static str,
        f: fn(T, T) -> T,
        // partial derivatives (d/da, d/db) at (a, b)
        df: fn(T, T) -> (T, T),
    ) -> Result<Self> {
        let (la, lb) = (self.len(), other.len());
        let shape = if self.shape() == other.shape() {
            self.shape().to_vec()
        } else if lb == 1 {
            self.shape().to_vec()
        } else if la == 1 {
            other.shape().to_vec()
        } else {
            return Err(dim_err!(
                "{op}: shapes {:?} and {:?} differ",
                self.shape(),
                other.shape()
            ));
        };
        let n = numel(&shape);
        let at = |v: &[T], i: usize| if v.len() == 1 { v[0] } else { v[i] };
        let out: Vec<T> = {
            let (a, b) = (self.data(), other.data());
            (0..n).map(|i| f(at(&a, i), at(&b, i))).collect()
        };
        let (a_t, b_t) = (self.clone(), other.clone());
        Ok(Self::from_op(shape, out, op, &[self, other], move |g, needs| {
            let (a, b) = (a_t.data(), b_t.data());
            let mut ga = vec![T::zero(); la];
            let mut gb = vec![T::zero(); lb];
            for i in 0..n {
                let (da, db) = df(at(&a, i), at(&b, i));
                ga[if la == 1 { 0 } else { i }] += g[i] * da;
                gb[if lb == 1 { 0 } else { i }] += g[i] * db;
            }
            vec![needs[0].then_some(ga), needs[1].then_some(gb)]
        }))
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.binary(other, "add", |a, b| a + b, |_, _| (T::one(), T::one()))
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.binary(other, "sub", |a, b| a - b, |_, _| (T::one(), -T::one()))
    }

    /// Hadamard product.
    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.binary(other, "mul", |a, b| a * b, |a, b| (b, a))
    }

    /// `df_from_out` gives the derivative in terms of the output value.
    fn unary(&self, op: &'static str, f: impl Fn(T) -> T, df_from_out: fn(T) -> T) -> Self {
        let y: Vec<T> = self.data().iter().map(|&v| f(v)).collect();
        let y_saved = y.clone();
        Self::from_op(self.shape().to_vec(), y, op, &[self], move |g, _| {
            let gx = g.iter().zip(&y_saved).map(|(&gi, &yi)| gi * df_from_out(yi)).collect();
            vec![Some(gx)]
        })
    }

    /// Logistic sigmoid, evaluated without overflow for large |x|.
    pub fn sigmoid(&self) -> Self {
        self.unary("sigmoid", sigmoid, |y| y * (T::one() - y))
    }

    /// `max(0, x)` with derivative 0 at the origin.
    pub fn relu(&self) -> Self {
        self.unary(
            "relu",
            |v| if v > T::zero() { v } else { T::zero() },
            |y| if y > T::zero() { T::one() } else { T::zero() },
        )
    }

    pub fn scale(&self, c: T) -> Self {
        let y: Vec<T> = self.data().iter().map(|&v| v * c).collect();
        Self::from_op(self.shape().to_vec(), y, "scale", &[self], move |g, _| {
            vec![Some(g.iter().map(|&gi| gi * c).collect())]
        })
    }

    pub fn sum(&self) -> Self {
        let s: T = self.data().iter().copied().sum();
        let n = self.len();
        Self::from_op(Vec::new(), vec![s], "sum", &[self], move |g, _| {
            vec![Some(vec![g[0]; n])]
        })
    }

    /// Adds `bias`, whose shape must equal the trailing axes of `self`.
    pub fn add_bias(&self, bias: &Self) -> Result<Self> {
        let rank = self.shape().len();
        let brank = bias.shape().len();
        if brank > rank || self.shape()[rank - brank..] != *bias.shape() {
            return Err(dim_err!(
                "bias shape {:?} does not match trailing axes of {:?}",
                bias.shape(),
                self.shape()
            ));
        }
        let width = bias.len();
        let b = bias.to_vec();
        let y: Vec<T> = self
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + b[i % width])
            .collect();
        Ok(Self::from_op(self.shape().to_vec(), y, "add_bias", &[self, bias], move |g, needs| {
            let gb = needs[1].then(|| {
                let mut gb = vec![T::zero(); width];
                for chunk in g.chunks(width) {
                    add_into(&mut gb, chunk);
                }
                gb
            });
            vec![needs[0].then(|| g.to_vec()), gb]
        }))
    }

    // ---- linear algebra ---------------------------------------------------------

    /// Matrix product of two rank-2 tensors.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        let (sa, sb) = (self.shape(), other.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(dim_err!("matmul of {sa:?} by {sb:?}"));
        }
        self.affine(other, None)
    }

    /// Applies `w` (shape `[c_in, c_out]`) to the last axis.
    pub fn linear(&self, w: &Self) -> Result<Self> {
        self.affine(w, None)
    }

    /// `x · w + bias` on the last axis, with `w: [c_in, c_out]` and an
    /// optional `bias: [c_out]`.
    pub fn affine(&self, w: &Self, bias: Option<&Self>) -> Result<Self> {
        let shape = self.shape();
        let c_in = *shape.last().ok_or_else(|| dim_err!("linear on a scalar"))?;
        if w.shape().len() != 2 || w.shape()[0] != c_in {
            return Err(dim_err!(
                "linear: weight {:?} does not accept {c_in} input channels",
                w.shape()
            ));
        }
        let c_out = w.shape()[1];
        if let Some(b) = bias {
            if b.shape() != [c_out] {
                return Err(dim_err!("linear: bias {:?} for {c_out} output channels", b.shape()));
            }
        }
        let rows = if c_in == 0 { 0 } else { self.len() / c_in };
        let (k, p) = (c_in as isize, c_out as isize);
        let (out, beta) = match bias {
            Some(b) => (b.data().repeat(rows), T::one()),
            None => (vec![T::zero(); rows * c_out], T::zero()),
        };
        let mut out = out;
        T::gemm(rows, c_in, c_out, T::one(), &self.data(), (k, 1), &w.data(), (p, 1), beta, &mut out, (p, 1));
        let mut out_shape = shape.to_vec();
        *out_shape.last_mut().expect("rank >= 1") = c_out;
        let (x_t, w_t) = (self.clone(), w.clone());
        let inputs: Vec<&Tensor<T>> = std::iter::once(self).chain(std::iter::once(w)).chain(bias).collect();
        Ok(Self::from_op(out_shape, out, "affine", &inputs, move |g, needs| {
            let gx = needs[0].then(|| {
                // g · wᵀ
                let mut gx = vec![T::zero(); rows * c_in];
                T::gemm(rows, c_out, c_in, T::one(), g, (p, 1), &w_t.data(), (1, p), T::zero(), &mut gx, (k, 1));
                gx
            });
            let gw = needs[1].then(|| {
                // xᵀ · g
                let mut gw = vec![T::zero(); c_in * c_out];
                T::gemm(c_in, rows, c_out, T::one(), &x_t.data(), (1, k), g, (p, 1), T::zero(), &mut gw, (p, 1));
                gw
            });
            let mut grads = vec![gx, gw];
            if needs.len() > 2 {
                grads.push(needs[2].then(|| {
                    let mut gb = vec![T::zero(); c_out];
                    for chunk in g.chunks(c_out) {
                        add_into(&mut gb, chunk);
                    }
                    gb
                }));
            }
            grads
        }))
    }

    /// Gated linear unit on the last axis. `self` holds `[P | Q]` of width
    /// `2C`; the result is `(P + r) ⊙ σ(Q)` with `r` of width `C` when given.
    pub fn glu(&self, residual: Option<&Self>) -> Result<Self> {
        let shape = self.shape();
        let width = *shape.last().ok_or_else(|| dim_err!("glu on a scalar"))?;
        if width % 2 != 0 {
            return Err(dim_err!("glu needs an even last axis, got {shape:?}"));
        }
        let c = width / 2;
        let mut out_shape = shape.to_vec();
        *out_shape.last_mut().expect("rank >= 1") = c;
        if let Some(r) = residual {
            if r.shape() != out_shape.as_slice() {
                return Err(dim_err!("glu residual {:?} does not match {out_shape:?}", r.shape()));
            }
        }
        let rows = if c == 0 { 0 } else { self.len() / width };
        let mut lin = Vec::with_capacity(rows * c);
        let mut gate = Vec::with_capacity(rows * c);
        {
            let x = self.data();
            let r = residual.map(|r| r.data());
            for row in 0..rows {
                let pq = &x[row * width..(row + 1) * width];
                for j in 0..c {
                    let res = r.as_ref().map_or(T::zero(), |r| r[row * c + j]);
                    lin.push(pq[j] + res);
                    gate.push(sigmoid(pq[c + j]));
                }
            }
        }
        let out: Vec<T> = lin.iter().zip(&gate).map(|(&l, &s)| l * s).collect();
        let inputs: Vec<&Tensor<T>> = std::iter::once(self).chain(residual).collect();
        Ok(Self::from_op(out_shape, out, "glu", &inputs, move |g, needs| {
            let gx = needs[0].then(|| {
                let mut gx = Vec::with_capacity(rows * width);
                for row in 0..rows {
                    let span = row * c..(row + 1) * c;
                    gx.extend(g[span.clone()].iter().zip(&gate[span.clone()]).map(|(&gi, &s)| gi * s));
                    gx.extend(
                        g[span.clone()]
                            .iter()
                            .zip(&gate[span.clone()])
                            .zip(&lin[span])
                            .map(|((&gi, &s), &l)| gi * l * s * (T::one() - s)),
                    );
                }
                gx
            });
            let mut grads = vec![gx];
            if needs.len() > 1 {
                grads.push(needs[1].then(|| g.iter().zip(&gate).map(|(&gi, &s)| gi * s).collect()));
            }
            grads
        }))
    }

    /// Mixes the node axis (second to last) with a sparse operator:
    /// `out[.., v, c] = Σ_u S[v, u] · x[.., u, c]`. `adjoint` must be `Sᵀ`.
    pub fn node_mix(&self, op: &Arc<CsrMatrix<T>>, adjoint: &Arc<CsrMatrix<T>>) -> Result<Self> {
        let shape = self.shape();
        let rank = shape.len();
        if rank < 2 || shape[rank - 2] != op.cols() || op.rows() != op.cols() {
            return Err(dim_err!(
                "node mixing of shape {shape:?} with a {}x{} operator",
                op.rows(),
                op.cols()
            ));
        }
        let n = shape[rank - 2];
        let width = shape[rank - 1];
        let frame = n * width;
        let x = self.data();
        let mut out = vec![T::zero(); x.len()];
        for (src, dst) in x.chunks(frame).zip(out.chunks_mut(frame)) {
            op.accumulate_rows(src, dst, width);
        }
        drop(x);
        let adjoint = Arc::clone(adjoint);
        Ok(Self::from_op(shape.to_vec(), out, "node_mix", &[self], move |g, _| {
            let mut gx = vec![T::zero(); g.len()];
            for (src, dst) in g.chunks(frame).zip(gx.chunks_mut(frame)) {
                adjoint.accumulate_rows(src, dst, width);
            }
            vec![Some(gx)]
        }))
    }

    /// Sliding temporal windows for a `[B, M, n, C]` tensor: the result has
    /// shape `[B, M-k+1, n, k·C]` with window offset `j` stored at channels
    /// `j·C..(j+1)·C`.
    pub fn unfold_time(&self, k: usize) -> Result<Self> {
        let s = self.shape();
        if s.len() != 4 {
            return Err(dim_err!("unfold_time expects [B, M, n, C], got {s:?}"));
        }
        let (b, m, n, c) = (s[0], s[1], s[2], s[3]);
        if k == 0 || m < k {
            return Err(dim_err!(
                "temporal length M={m} shorter than kernel width K_t={k}"
            ));
        }
        let t_out = m - k + 1;
        let x = self.data();
        let mut out = Vec::with_capacity(b * t_out * n * k * c);
        for bi in 0..b {
            for t in 0..t_out {
                for v in 0..n {
                    for j in 0..k {
                        let base = ((bi * m + t + j) * n + v) * c;
                        out.extend_from_slice(&x[base..base + c]);
                    }
                }
            }
        }
        drop(x);
        let total = self.len();
        Ok(Self::from_op(vec![b, t_out, n, k * c], out, "unfold_time", &[self], move |g, _| {
            let mut gx = vec![T::zero(); total];
            let mut src = 0;
            for bi in 0..b {
                for t in 0..t_out {
                    for v in 0..n {
                        for j in 0..k {
                            let base = ((bi * m + t + j) * n + v) * c;
                            add_into(&mut gx[base..base + c], &g[src..src + c]);
                            src += c;
                        }
                    }
                }
            }
            vec![Some(gx)]
        }))
    }

    /// Normalizes each trailing `[n, C]` frame to zero mean and unit variance
    /// over all of its entries, then applies `gain ⊙ · + bias`.
    pub fn layer_norm(&self, gain: &Self, bias: &Self, eps: T) -> Result<Self> {
        if eps <= T::zero() {
            return Err(StgcnError::Input(format!("layer norm eps must be > 0, got {eps}")));
        }
        let s = self.shape();
        if s.len() < 2 {
            return Err(dim_err!("layer norm expects [.., n, C], got {s:?}"));
        }
        let frame_shape = &s[s.len() - 2..];
        if gain.shape() != frame_shape || bias.shape() != frame_shape {
            return Err(dim_err!(
                "layer norm parameters {:?}/{:?} do not match frame {frame_shape:?}",
                gain.shape(),
                bias.shape()
            ));
        }
        let frame = numel(frame_shape);
        let count = T::from_usize(frame).expect("frame size fits scalar");
        let x = self.data();
        let gv = gain.to_vec();
        let bv = bias.to_vec();
        let mut xhat = Vec::with_capacity(x.len());
        let mut inv_std = Vec::with_capacity(x.len() / frame.max(1));
        for chunk in x.chunks(frame) {
            let mean = chunk.iter().copied().sum::<T>() / count;
            let var = chunk.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / count;
            let r = T::one() / (var + eps).sqrt();
            inv_std.push(r);
            xhat.extend(chunk.iter().map(|&v| (v - mean) * r));
        }
        drop(x);
        let out: Vec<T> = xhat
            .iter()
            .enumerate()
            .map(|(i, &h)| gv[i % frame] * h + bv[i % frame])
            .collect();
        Ok(Self::from_op(s.to_vec(), out, "layer_norm", &[self, gain, bias], move |g, needs| {
            let gx = needs[0].then(|| {
                let mut gx = Vec::with_capacity(g.len());
                for ((gc, hc), &r) in g.chunks(frame).zip(xhat.chunks(frame)).zip(&inv_std) {
                    let dh: Vec<T> = gc.iter().zip(&gv).map(|(&gi, &w)| gi * w).collect();
                    let mean_dh = dh.iter().copied().sum::<T>() / count;
                    let mean_dh_h = dh.iter().zip(hc).map(|(&d, &h)| d * h).sum::<T>() / count;
                    gx.extend(dh.iter().zip(hc).map(|(&d, &h)| r * (d - mean_dh - h * mean_dh_h)));
                }
                gx
            });
            let ggain = needs[1].then(|| {
                let mut acc = vec![T::zero(); frame];
                for (gc, hc) in g.chunks(frame).zip(xhat.chunks(frame)) {
                    for ((a, &gi), &h) in acc.iter_mut().zip(gc).zip(hc) {
                        *a += gi * h;
                    }
                }
                acc
            });
            let gbias = needs[2].then(|| {
                let mut acc = vec![T::zero(); frame];
                for gc in g.chunks(frame) {
                    add_into(&mut acc, gc);
                }
                acc
            });
            vec![gx, ggain, gbias]
        }))
    }
}

pub(crate) fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}
