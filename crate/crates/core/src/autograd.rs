//! Reverse-mode differentiation over [`Tensor`] values.
//!
//! Every op on a [`Var`] computes its value eagerly. When at least one input
//! requires a gradient the op also records its parents and a backward closure;
//! otherwise nothing is recorded, so inference runs through the same code
//! without building a graph. Node ids grow monotonically, which gives a
//! topological order for free.

use std::cell::RefCell;
use std::collections::{HashMap, HashSet};
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::nn::mask::Mask;
use crate::nn::rope::RopeTable;
use crate::tensor::{
    gelu_from_tanh, gelu_grad_from_tanh, gelu_tanh, gemm, layer_norm_rows, sigmoid, softmax_rows_inplace, MatMut,
    MatRef, Scalar, Tensor,
};

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Matmul,
    Add,
    Sub,
    Mul,
    Scale,
    Gelu,
    Silu,
    LayerNorm,
    SoftmaxLastDim,
    Reshape,
    Permute,
    Concat,
    Slice,
    EmbeddingLookup,
    Mean,
    Sum,
    SumSq,
    Attention,
    Rope,
}

impl OpKind {
    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::Matmul => "matmul",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Scale => "scale",
            OpKind::Gelu => "gelu",
            OpKind::Silu => "silu",
            OpKind::LayerNorm => "layer_norm",
            OpKind::SoftmaxLastDim => "softmax_lastdim",
            OpKind::Reshape => "reshape",
            OpKind::Permute => "permute",
            OpKind::Concat => "concat",
            OpKind::Slice => "slice",
            OpKind::EmbeddingLookup => "embedding_lookup",
            OpKind::Mean => "mean",
            OpKind::Sum => "sum",
            OpKind::SumSq => "sum_sq",
            OpKind::Attention => "attention",
            OpKind::Rope => "rope",
        }
    }
}

type BackwardFn<T> = Box<dyn Fn(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>>>;

struct Node<T: Scalar> {
    id: u64,
    op: OpKind,
    value: Tensor<T>,
    requires_grad: bool,
    grad: RefCell<Option<Tensor<T>>>,
    parents: Vec<Var<T>>,
    backward: Option<BackwardFn<T>>,
}

/// A value in the computation graph.
#[derive(Clone)]
pub struct Var<T: Scalar>(Rc<Node<T>>);

impl<T: Scalar> std::fmt::Debug for Var<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.0.id)
            .field("op", &self.0.op)
            .field("shape", &self.0.value.shape())
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

fn shape_err(op: OpKind, a: &[usize], b: &[usize]) -> Error {
    Error::Shape {
        op: op.name(),
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
}

impl<T: Scalar> Var<T> {
    fn node(
        op: OpKind,
        value: Tensor<T>,
        requires_grad: bool,
        parents: Vec<Var<T>>,
        backward: Option<BackwardFn<T>>,
    ) -> Self {
        Var(Rc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            op,
            value,
            requires_grad,
            grad: RefCell::new(None),
            parents,
            backward,
        }))
    }

    pub fn leaf(value: Tensor<T>, requires_grad: bool) -> Self {
        Self::node(OpKind::Leaf, value, requires_grad, Vec::new(), None)
    }

    pub fn constant(value: Tensor<T>) -> Self {
        Self::leaf(value, false)
    }

    fn record(
        op: OpKind,
        value: Tensor<T>,
        parents: Vec<Var<T>>,
        backward: impl Fn(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>> + 'static,
    ) -> Result<Self> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op.name() });
        }
        if parents.iter().any(|p| p.requires_grad()) {
            Ok(Self::node(op, value, true, parents, Some(Box::new(backward))))
        } else {
            Ok(Self::node(op, value, false, Vec::new(), None))
        }
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn op(&self) -> OpKind {
        self.0.op
    }

    pub fn value(&self) -> &Tensor<T> {
        &self.0.value
    }

    pub fn shape(&self) -> &[usize] {
        self.0.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.0.backward.is_none()
    }

    /// Accumulated gradient of a leaf (after [`Var::backward`]).
    pub fn grad(&self) -> Option<Tensor<T>> {
        self.0.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    /// Same value, cut from the graph.
    pub fn detach(&self) -> Self {
        Self::constant(self.0.value.clone())
    }

    /// Reverse pass from a scalar loss; leaf gradients accumulate across calls.
    pub fn backward(&self) -> Result<()> {
        self.backward_capture(&[]).map(|_| ())
    }

    /// Reverse pass that also returns the gradient reaching each `watch` node
    /// (interior or leaf). `None` when no gradient flows there.
    pub fn backward_capture(&self, watch: &[&Var<T>]) -> Result<Vec<Option<Tensor<T>>>> {
        if self.0.value.numel() != 1 {
            return Err(Error::NonScalarLoss(self.shape().to_vec()));
        }
        if !self.requires_grad() {
            return Err(Error::Detached);
        }
        let mut order: Vec<Var<T>> = Vec::new();
        let mut seen: HashSet<u64> = HashSet::new();
        let mut stack = vec![self.clone()];
        while let Some(v) = stack.pop() {
            if !seen.insert(v.id()) {
                continue;
            }
            for p in &v.0.parents {
                if p.requires_grad() && !seen.contains(&p.id()) {
                    stack.push(p.clone());
                }
            }
            order.push(v);
        }
        order.sort_by_key(|v| std::cmp::Reverse(v.id()));

        let watch_ids: HashMap<u64, usize> = watch.iter().enumerate().map(|(i, w)| (w.id(), i)).collect();
        let mut watched: Vec<Option<Tensor<T>>> = vec![None; watch.len()];
        let mut grads: HashMap<u64, Tensor<T>> = HashMap::new();
        grads.insert(self.id(), Tensor::full(self.shape(), T::one()));

        for v in order {
            let Some(g) = grads.remove(&v.id()) else {
                continue;
            };
            if let Some(&i) = watch_ids.get(&v.id()) {
                watched[i] = Some(g.clone());
            }
            match &v.0.backward {
                None => {
                    let mut slot = v.0.grad.borrow_mut();
                    match slot.as_mut() {
                        Some(acc) => acc.add_assign(&g)?,
                        None => *slot = Some(g),
                    }
                }
                Some(bw) => {
                    let needs: Vec<bool> = v.0.parents.iter().map(|p| p.requires_grad()).collect();
                    let pgrads = bw(&g, &needs);
                    for (p, pg) in v.0.parents.iter().zip(pgrads) {
                        let Some(pg) = pg else { continue };
                        if !p.requires_grad() {
                            continue;
                        }
                        debug_assert_eq!(pg.shape(), p.shape(), "grad shape for {:?}", v.op());
                        match grads.get_mut(&p.id()) {
                            Some(acc) => acc.add_assign(&pg)?,
                            None => {
                                grads.insert(p.id(), pg);
                            }
                        }
                    }
                }
            }
        }
        Ok(watched)
    }

    // ---- linear algebra -------------------------------------------------

    /// `[m, k] @ [k, n]`.
    pub fn matmul(&self, other: &Var<T>) -> Result<Var<T>> {
        let (a, b) = (self.value().clone(), other.value().clone());
        let (Ok((m, k)), Ok((k2, n))) = (a.dims2(), b.dims2()) else {
            return Err(shape_err(OpKind::Matmul, a.shape(), b.shape()));
        };
        if k != k2 {
            return Err(shape_err(OpKind::Matmul, a.shape(), b.shape()));
        }
        let mut out = vec![T::zero(); m * n];
        gemm(
            T::one(),
            MatRef::rm(a.data(), 0, m, k, k),
            MatRef::rm(b.data(), 0, k, n, n),
            T::zero(),
            MatMut::rm(&mut out, 0, m, n, n),
        );
        Self::record(
            OpKind::Matmul,
            Tensor::from_parts(vec![m, n], out),
            vec![self.clone(), other.clone()],
            move |g, needs| {
                let gd = g.data();
                let ga = needs[0].then(|| {
                    let mut ga = vec![T::zero(); m * k];
                    gemm(
                        T::one(),
                        MatRef::rm(gd, 0, m, n, n),
                        MatRef::rm(b.data(), 0, k, n, n).t(),
                        T::zero(),
                        MatMut::rm(&mut ga, 0, m, k, k),
                    );
                    Tensor::from_parts(vec![m, k], ga)
                });
                let gb = needs[1].then(|| {
                    let mut gb = vec![T::zero(); k * n];
                    gemm(
                        T::one(),
                        MatRef::rm(a.data(), 0, m, k, k).t(),
                        MatRef::rm(gd, 0, m, n, n),
                        T::zero(),
                        MatMut::rm(&mut gb, 0, k, n, n),
                    );
                    Tensor::from_parts(vec![k, n], gb)
                });
                vec![ga, gb]
            },
        )
    }

    /// `x @ w + b` for `x: [m, k]`, `w: [k, n]`, `b: [n]`.
    pub fn linear(&self, w: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        self.matmul(w)?.add(b)
    }

    // ---- elementwise ----------------------------------------------------

    /// Number of times `b` tiles `a` (1 for equal shapes), if `b`'s shape is a
    /// suffix of `a`'s.
    fn tiling(op: OpKind, a: &[usize], b: &[usize]) -> Result<usize> {
        if a == b {
            return Ok(1);
        }
        if b.len() <= a.len() && a[a.len() - b.len()..] == *b {
            let nb: usize = b.iter().product();
            let na: usize = a.iter().product();
            if let Some(q) = na.checked_div(nb) {
                return Ok(q);
            }
        }
        Err(shape_err(op, a, b))
    }

    /// `f(a[i], b[i % b.len()])` over all of `a`.
    fn tile_zip(a: &[T], b: &[T], f: impl Fn(T, T) -> T) -> Vec<T> {
        let mut out = Vec::with_capacity(a.len());
        for chunk in a.chunks(b.len()) {
            out.extend(chunk.iter().zip(b).map(|(&x, &y)| f(x, y)));
        }
        out
    }

    fn reduce_tiles(g: &[T], nb: usize, shape: &[usize]) -> Tensor<T> {
        let mut out = vec![T::zero(); nb];
        for chunk in g.chunks(nb) {
            for (o, &v) in out.iter_mut().zip(chunk) {
                *o = *o + v;
            }
        }
        Tensor::from_parts(shape.to_vec(), out)
    }

    /// Elementwise sum; `other` may broadcast over leading axes.
    pub fn add(&self, other: &Var<T>) -> Result<Var<T>> {
        self.add_sub(other, false)
    }

    /// Elementwise difference; `other` may broadcast over leading axes.
    pub fn sub(&self, other: &Var<T>) -> Result<Var<T>> {
        self.add_sub(other, true)
    }

    fn add_sub(&self, other: &Var<T>, negate: bool) -> Result<Var<T>> {
        let op = if negate { OpKind::Sub } else { OpKind::Add };
        let (a, b) = (self.value(), other.value());
        Self::tiling(op, a.shape(), b.shape())?;
        let nb = b.numel();
        let bd = b.data();
        let out = if negate {
            Self::tile_zip(a.data(), bd, |x, y| x - y)
        } else {
            Self::tile_zip(a.data(), bd, |x, y| x + y)
        };
        let b_shape = b.shape().to_vec();
        Self::record(
            op,
            Tensor::from_parts(a.shape().to_vec(), out),
            vec![self.clone(), other.clone()],
            move |g, needs| {
                let ga = needs[0].then(|| g.clone());
                let gb = needs[1].then(|| {
                    let r = Self::reduce_tiles(g.data(), nb, &b_shape);
                    if negate {
                        r.scale(-T::one())
                    } else {
                        r
                    }
                });
                vec![ga, gb]
            },
        )
    }

    /// Elementwise product; `other` may broadcast over leading axes.
    pub fn mul(&self, other: &Var<T>) -> Result<Var<T>> {
        let (a, b) = (self.value().clone(), other.value().clone());
        Self::tiling(OpKind::Mul, a.shape(), b.shape())?;
        let nb = b.numel();
        let out = Self::tile_zip(a.data(), b.data(), |x, y| x * y);
        Self::record(
            OpKind::Mul,
            Tensor::from_parts(a.shape().to_vec(), out),
            vec![self.clone(), other.clone()],
            move |g, needs| {
                let gd = g.data();
                let ga = needs[0]
                    .then(|| Tensor::from_parts(a.shape().to_vec(), Self::tile_zip(gd, b.data(), |x, y| x * y)));
                let gb = needs[1].then(|| {
                    let prod: Vec<T> = gd.iter().zip(a.data()).map(|(&v, &x)| v * x).collect();
                    Self::reduce_tiles(&prod, nb, b.shape())
                });
                vec![ga, gb]
            },
        )
    }

    pub fn scale(&self, c: f64) -> Result<Var<T>> {
        let c = T::from_f64(c);
        Self::record(OpKind::Scale, self.value().scale(c), vec![self.clone()], move |g, _| {
            vec![Some(g.scale(c))]
        })
    }

    fn unary(&self, op: OpKind, f: impl Fn(T) -> T, df: impl Fn(T) -> T + 'static) -> Result<Var<T>> {
        let x = self.value().clone();
        let y = x.map(f);
        Self::record(op, y, vec![self.clone()], move |g, _| {
            let gd: Vec<T> = g.data().iter().zip(x.data()).map(|(&gv, &xv)| gv * df(xv)).collect();
            vec![Some(Tensor::from_parts(x.shape().to_vec(), gd))]
        })
    }

    pub fn gelu(&self) -> Result<Var<T>> {
        let x = self.value().clone();
        let th: Vec<T> = x.data().iter().map(|&v| gelu_tanh(v)).collect();
        let y: Vec<T> = x.data().iter().zip(&th).map(|(&v, &t)| gelu_from_tanh(v, t)).collect();
        Self::record(
            OpKind::Gelu,
            Tensor::from_parts(x.shape().to_vec(), y),
            vec![self.clone()],
            move |g, _| {
                let gd: Vec<T> = g
                    .data()
                    .iter()
                    .zip(x.data())
                    .zip(&th)
                    .map(|((&gv, &xv), &t)| gv * gelu_grad_from_tanh(xv, t))
                    .collect();
                vec![Some(Tensor::from_parts(x.shape().to_vec(), gd))]
            },
        )
    }

    pub fn silu(&self) -> Result<Var<T>> {
        self.unary(
            OpKind::Silu,
            |x| x * sigmoid(x),
            |x| {
                let s = sigmoid(x);
                s * (T::one() + x * (T::one() - s))
            },
        )
    }

    // ---- normalization ----------------------------------------------------

    /// Layer norm over the last axis without affine parameters (eps = 1e-5).
    pub fn layer_norm(&self) -> Result<Var<T>> {
        let shape = self.shape().to_vec();
        let cols = *shape
            .last()
            .ok_or_else(|| Error::invalid("layer_norm", "scalar input"))?;
        let (y, rstd) = layer_norm_rows(self.value().data(), cols);
        let y = Tensor::from_parts(shape.clone(), y);
        let saved = y.clone();
        Self::record(OpKind::LayerNorm, y, vec![self.clone()], move |g, _| {
            let n = T::from_f64(cols as f64);
            let yd = saved.data();
            let gd = g.data();
            let mut dx = vec![T::zero(); gd.len()];
            for (r, &rs) in rstd.iter().enumerate() {
                let sl = r * cols..(r + 1) * cols;
                let (gr, yr) = (&gd[sl.clone()], &yd[sl.clone()]);
                let mg = gr.iter().copied().sum::<T>() / n;
                let mgy = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum::<T>() / n;
                for ((o, &gv), &yv) in dx[sl].iter_mut().zip(gr).zip(yr) {
                    *o = rs * (gv - mg - yv * mgy);
                }
            }
            vec![Some(Tensor::from_parts(shape.clone(), dx))]
        })
    }

    /// Max-subtracted softmax over the last axis.
    pub fn softmax_lastdim(&self) -> Result<Var<T>> {
        let shape = self.shape().to_vec();
        let cols = *shape
            .last()
            .ok_or_else(|| Error::invalid("softmax_lastdim", "scalar input"))?;
        if !self.value().is_finite() {
            return Err(Error::NonFinite { op: "softmax_lastdim" });
        }
        let mut y = self.value().to_vec();
        softmax_rows_inplace(&mut y, cols);
        let y = Tensor::from_parts(shape.clone(), y);
        let saved = y.clone();
        Self::record(OpKind::SoftmaxLastDim, y, vec![self.clone()], move |g, _| {
            let mut dx = vec![T::zero(); g.numel()];
            for ((o, gr), yr) in dx
                .chunks_mut(cols)
                .zip(g.data().chunks(cols))
                .zip(saved.data().chunks(cols))
            {
                let dot = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum::<T>();
                for ((ov, &gv), &yv) in o.iter_mut().zip(gr).zip(yr) {
                    *ov = yv * (gv - dot);
                }
            }
            vec![Some(Tensor::from_parts(shape.clone(), dx))]
        })
    }

    // ---- shape ops ------------------------------------------------------

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<T>> {
        let y = self.value().reshape(shape)?;
        let in_shape = self.shape().to_vec();
        Self::record(OpKind::Reshape, y, vec![self.clone()], move |g, _| {
            vec![Some(g.reshape(&in_shape).expect("reshape grad"))]
        })
    }

    /// Reorder axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&self, axes: &[usize]) -> Result<Var<T>> {
        let shape = self.shape().to_vec();
        let mut check: Vec<usize> = axes.to_vec();
        check.sort_unstable();
        if check != (0..shape.len()).collect::<Vec<_>>() {
            return Err(Error::invalid(
                "permute",
                format!("axes {axes:?} invalid for shape {shape:?}"),
            ));
        }
        let y = permute_tensor(self.value(), axes);
        let mut inverse = vec![0; axes.len()];
        for (i, &a) in axes.iter().enumerate() {
            inverse[a] = i;
        }
        Self::record(OpKind::Permute, y, vec![self.clone()], move |g, _| {
            vec![Some(permute_tensor(g, &inverse))]
        })
    }

    /// Concatenate along `axis`; all other extents must agree.
    pub fn concat(parts: &[Var<T>], axis: usize) -> Result<Var<T>> {
        let first = parts.first().ok_or_else(|| Error::invalid("concat", "no inputs"))?;
        let shape0 = first.shape().to_vec();
        if axis >= shape0.len() {
            return Err(Error::invalid("concat", format!("axis {axis} for {shape0:?}")));
        }
        for p in parts {
            let s = p.shape();
            if s.len() != shape0.len() || s.iter().zip(&shape0).enumerate().any(|(i, (a, b))| i != axis && a != b) {
                return Err(shape_err(OpKind::Concat, &shape0, s));
            }
        }
        let outer: usize = shape0[..axis].iter().product();
        let tail: usize = shape0[axis + 1..].iter().product();
        let chunks: Vec<usize> = parts.iter().map(|p| p.shape()[axis] * tail).collect();
        let total: usize = chunks.iter().sum();
        let mut out = Vec::with_capacity(outer * total);
        for o in 0..outer {
            for (p, &c) in parts.iter().zip(&chunks) {
                out.extend_from_slice(&p.value().data()[o * c..(o + 1) * c]);
            }
        }
        let mut shape = shape0.clone();
        shape[axis] = parts.iter().map(|p| p.shape()[axis]).sum();
        let shapes: Vec<Vec<usize>> = parts.iter().map(|p| p.shape().to_vec()).collect();
        Self::record(
            OpKind::Concat,
            Tensor::from_parts(shape, out),
            parts.to_vec(),
            move |g, needs| {
                let gd = g.data();
                let mut grads: Vec<Option<Vec<T>>> = needs
                    .iter()
                    .zip(&chunks)
                    .map(|(&n, &c)| n.then(|| Vec::with_capacity(outer * c)))
                    .collect();
                for o in 0..outer {
                    let mut off = o * total;
                    for (gslot, &c) in grads.iter_mut().zip(&chunks) {
                        if let Some(v) = gslot {
                            v.extend_from_slice(&gd[off..off + c]);
                        }
                        off += c;
                    }
                }
                grads
                    .into_iter()
                    .zip(&shapes)
                    .map(|(g, s)| g.map(|v| Tensor::from_parts(s.clone(), v)))
                    .collect()
            },
        )
    }

    pub fn concat_lastdim(parts: &[Var<T>]) -> Result<Var<T>> {
        let axis = parts.first().map(|p| p.shape().len().saturating_sub(1)).unwrap_or(0);
        Self::concat(parts, axis)
    }

    pub fn concat_seqdim(parts: &[Var<T>]) -> Result<Var<T>> {
        Self::concat(parts, 0)
    }

    /// `[start, start + len)` along `axis`.
    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Result<Var<T>> {
        let shape = self.shape().to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::invalid(
                "slice",
                format!("axis {axis} range {start}..{} of {shape:?}", start + len),
            ));
        }
        let outer: usize = shape[..axis].iter().product();
        let tail: usize = shape[axis + 1..].iter().product();
        let (full, part, off) = (shape[axis] * tail, len * tail, start * tail);
        let src = self.value().data();
        let mut out = Vec::with_capacity(outer * part);
        for o in 0..outer {
            out.extend_from_slice(&src[o * full + off..o * full + off + part]);
        }
        let mut oshape = shape.clone();
        oshape[axis] = len;
        Self::record(
            OpKind::Slice,
            Tensor::from_parts(oshape, out),
            vec![self.clone()],
            move |g, _| {
                let mut gx = vec![T::zero(); outer * full];
                for o in 0..outer {
                    gx[o * full + off..o * full + off + part].copy_from_slice(&g.data()[o * part..(o + 1) * part]);
                }
                vec![Some(Tensor::from_parts(shape.clone(), gx))]
            },
        )
    }

    /// Gather rows of a `[V, ...]` table: output row `i` is `table[indices[i]]`.
    pub fn embedding_lookup(&self, indices: &[usize]) -> Result<Var<T>> {
        let shape = self.shape().to_vec();
        let vocab = *shape
            .first()
            .ok_or_else(|| Error::invalid("embedding_lookup", "scalar table"))?;
        if let Some(&bad) = indices.iter().find(|&&i| i >= vocab) {
            return Err(Error::invalid(
                "embedding_lookup",
                format!("index {bad} out of {vocab} rows"),
            ));
        }
        let inner: usize = shape[1..].iter().product();
        let src = self.value().data();
        let mut out = Vec::with_capacity(indices.len() * inner);
        for &i in indices {
            out.extend_from_slice(&src[i * inner..(i + 1) * inner]);
        }
        let mut oshape = shape.clone();
        oshape[0] = indices.len();
        let idx = indices.to_vec();
        Self::record(
            OpKind::EmbeddingLookup,
            Tensor::from_parts(oshape, out),
            vec![self.clone()],
            move |g, _| {
                let mut gt = vec![T::zero(); vocab * inner];
                for (r, &i) in idx.iter().enumerate() {
                    let src = &g.data()[r * inner..(r + 1) * inner];
                    for (d, &s) in gt[i * inner..(i + 1) * inner].iter_mut().zip(src) {
                        *d = *d + s;
                    }
                }
                vec![Some(Tensor::from_parts(shape.clone(), gt))]
            },
        )
    }

    // ---- reductions -----------------------------------------------------

    pub fn mean(&self) -> Result<Var<T>> {
        let shape = self.shape().to_vec();
        let n = self.value().numel();
        let m = self.value().data().iter().copied().sum::<T>() / T::from_f64(n as f64);
        Self::record(OpKind::Mean, Tensor::scalar(m), vec![self.clone()], move |g, _| {
            vec![Some(Tensor::full(&shape, g.item() / T::from_f64(n as f64)))]
        })
    }

    pub fn sum(&self) -> Result<Var<T>> {
        let shape = self.shape().to_vec();
        let s = self.value().data().iter().copied().sum::<T>();
        Self::record(OpKind::Sum, Tensor::scalar(s), vec![self.clone()], move |g, _| {
            vec![Some(Tensor::full(&shape, g.item()))]
        })
    }

    pub fn sum_sq(&self) -> Result<Var<T>> {
        let x = self.value().clone();
        let s = x.data().iter().map(|&v| v * v).sum::<T>();
        Self::record(OpKind::SumSq, Tensor::scalar(s), vec![self.clone()], move |g, _| {
            let c = g.item() * T::from_f64(2.0);
            vec![Some(x.map(|v| v * c))]
        })
    }

    /// Mean of squared differences.
    pub fn mse(&self, target: &Var<T>) -> Result<Var<T>> {
        let n = self.value().numel();
        self.sub(target)?.sum_sq()?.scale(1.0 / n as f64)
    }

    // ---- transformer primitives -----------------------------------------

    /// Rotate each head of `[rows, width]` by the per-row angles in `table`,
    /// which repeats when `rows` is a multiple of its length.
    pub fn rope(&self, table: &RopeTable<T>) -> Result<Var<T>> {
        let (rows, width) = self.value().dims2()?;
        if table.rows() == 0 || rows % table.rows() != 0 || width % table.head_dim() != 0 {
            return Err(Error::invalid(
                "rope",
                format!(
                    "input {:?} vs table rows {} head_dim {}",
                    self.shape(),
                    table.rows(),
                    table.head_dim()
                ),
            ));
        }
        let y = table.apply(self.value().data(), width, false);
        let table = table.clone();
        Self::record(
            OpKind::Rope,
            Tensor::from_parts(vec![rows, width], y),
            vec![self.clone()],
            move |g, _| {
                vec![Some(Tensor::from_parts(
                    vec![rows, width],
                    table.apply(g.data(), width, true),
                ))]
            },
        )
    }

    /// Masked multi-head scaled dot-product attention.
    ///
    /// `q: [batch * Lq, D]`, `k, v: [batch * Lk, D]` with `mask` of size
    /// `Lq x Lk` shared by every batch item. Only allowed pairs are computed,
    /// so forbidden weights are exactly zero. With `capture`, also returns the
    /// dense weights `[batch, heads, Lq, Lk]`.
    pub fn attention(
        q: &Var<T>,
        k: &Var<T>,
        v: &Var<T>,
        mask: &Mask,
        heads: usize,
        batch: usize,
        capture: bool,
    ) -> Result<(Var<T>, Option<Tensor<T>>)> {
        let (rq, d) = q.value().dims2()?;
        let (rk, dk) = k.value().dims2()?;
        let (lq, lk) = (mask.q_len(), mask.k_len());
        if dk != d || v.shape() != k.shape() || rq != batch * lq || rk != batch * lk {
            return Err(Error::invalid(
                "attention",
                format!(
                    "q {:?} k {:?} v {:?} mask {lq}x{lk} batch {batch}",
                    q.shape(),
                    k.shape(),
                    v.shape()
                ),
            ));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::invalid(
                "attention",
                format!("width {d} not divisible by {heads} heads"),
            ));
        }
        if let Some(g) = mask.groups().iter().find(|g| g.keys.is_empty()) {
            return Err(Error::EmptyAttentionRow { row: g.q_start });
        }
        let dh = d / heads;
        let scale = T::from_f64(1.0 / (dh as f64).sqrt());
        let (qt, kt, vt) = (q.value().clone(), k.value().clone(), v.value().clone());
        let mut out = vec![T::zero(); rq * d];
        let mut probs: Vec<T> = Vec::new();
        let mut kbuf: Vec<T> = Vec::new();
        let mut vbuf: Vec<T> = Vec::new();
        for b in 0..batch {
            for h in 0..heads {
                for g in mask.groups() {
                    let (nq, nk) = (g.q_end - g.q_start, g.keys.len());
                    let qv = MatRef::rm(qt.data(), (b * lq + g.q_start) * d + h * dh, nq, dh, d);
                    let (kv, vv) = key_views(&kt, &vt, g, b, lk, d, h, dh, &mut kbuf, &mut vbuf);
                    let off = probs.len();
                    probs.resize(off + nq * nk, T::zero());
                    gemm(scale, qv, kv.t(), T::zero(), MatMut::rm(&mut probs, off, nq, nk, nk));
                    softmax_rows_inplace(&mut probs[off..], nk);
                    gemm(
                        T::one(),
                        MatRef::rm(&probs, off, nq, nk, nk),
                        vv,
                        T::zero(),
                        MatMut::rm(&mut out, (b * lq + g.q_start) * d + h * dh, nq, dh, d),
                    );
                }
            }
        }
        let weights = capture.then(|| {
            let mut dense = vec![T::zero(); batch * heads * lq * lk];
            let mut off = 0;
            for b in 0..batch {
                for h in 0..heads {
                    for g in mask.groups() {
                        let nk = g.keys.len();
                        for qi in g.q_start..g.q_end {
                            let row = ((b * heads + h) * lq + qi) * lk;
                            for (j, &key) in g.keys.iter().enumerate() {
                                dense[row + key] = probs[off + (qi - g.q_start) * nk + j];
                            }
                        }
                        off += (g.q_end - g.q_start) * nk;
                    }
                }
            }
            Tensor::from_parts(vec![batch, heads, lq, lk], dense)
        });
        let probs = Arc::new(probs);
        let mask = mask.clone();
        let var = Self::record(
            OpKind::Attention,
            Tensor::from_parts(vec![rq, d], out),
            vec![q.clone(), k.clone(), v.clone()],
            move |gout, needs| {
                let gd = gout.data();
                let mut gq = vec![T::zero(); rq * d];
                let mut gk = vec![T::zero(); rk * d];
                let mut gv = vec![T::zero(); rk * d];
                let (mut kbuf, mut vbuf) = (Vec::new(), Vec::new());
                let mut tmp: Vec<T> = Vec::new();
                let mut ds: Vec<T> = Vec::new();
                let mut off = 0;
                for b in 0..batch {
                    for h in 0..heads {
                        for g in mask.groups() {
                            let (nq, nk) = (g.q_end - g.q_start, g.keys.len());
                            let p = &probs[off..off + nq * nk];
                            off += nq * nk;
                            let qoff = (b * lq + g.q_start) * d + h * dh;
                            let dout = MatRef::rm(gd, qoff, nq, dh, d);
                            let (kv, vv) = key_views(&kt, &vt, g, b, lk, d, h, dh, &mut kbuf, &mut vbuf);
                            if needs[0] || needs[1] {
                                ds.clear();
                                ds.resize(nq * nk, T::zero());
                                gemm(T::one(), dout, vv.t(), T::zero(), MatMut::rm(&mut ds, 0, nq, nk, nk));
                                for (dr, pr) in ds.chunks_mut(nk).zip(p.chunks(nk)) {
                                    let dot = dr.iter().zip(pr).map(|(&a, &b)| a * b).sum::<T>();
                                    for (dv, &pv) in dr.iter_mut().zip(pr) {
                                        *dv = pv * (*dv - dot);
                                    }
                                }
                                if needs[0] {
                                    gemm(
                                        scale,
                                        MatRef::rm(&ds, 0, nq, nk, nk),
                                        kv,
                                        T::one(),
                                        MatMut::rm(&mut gq, qoff, nq, dh, d),
                                    );
                                }
                                if needs[1] {
                                    let qv = MatRef::rm(qt.data(), qoff, nq, dh, d);
                                    scatter_keys(
                                        &mut gk,
                                        g,
                                        b,
                                        lk,
                                        d,
                                        h,
                                        dh,
                                        &mut tmp,
                                        scale,
                                        MatRef::rm(&ds, 0, nq, nk, nk).t(),
                                        qv,
                                    );
                                }
                            }
                            if needs[2] {
                                scatter_keys(
                                    &mut gv,
                                    g,
                                    b,
                                    lk,
                                    d,
                                    h,
                                    dh,
                                    &mut tmp,
                                    T::one(),
                                    MatRef::rm(p, 0, nq, nk, nk).t(),
                                    dout,
                                );
                            }
                        }
                    }
                }
                vec![
                    needs[0].then(|| Tensor::from_parts(vec![rq, d], gq)),
                    needs[1].then(|| Tensor::from_parts(vec![rk, d], gk)),
                    needs[2].then(|| Tensor::from_parts(vec![rk, d], gv)),
                ]
            },
        )?;
        Ok((var, weights))
    }
}

/// Key/value views for one (batch, head, group): strided into the source when
/// the allowed keys are contiguous, gathered into scratch buffers otherwise.
#[allow(clippy::too_many_arguments)]
fn key_views<'a, T: Scalar>(
    kt: &'a Tensor<T>,
    vt: &'a Tensor<T>,
    g: &crate::nn::mask::KeyGroup,
    b: usize,
    lk: usize,
    d: usize,
    h: usize,
    dh: usize,
    kbuf: &'a mut Vec<T>,
    vbuf: &'a mut Vec<T>,
) -> (MatRef<'a, T>, MatRef<'a, T>) {
    let nk = g.keys.len();
    if let Some(s) = g.contiguous {
        let off = (b * lk + s) * d + h * dh;
        (
            MatRef::rm(kt.data(), off, nk, dh, d),
            MatRef::rm(vt.data(), off, nk, dh, d),
        )
    } else {
        kbuf.clear();
        vbuf.clear();
        for &key in &g.keys {
            let off = (b * lk + key) * d + h * dh;
            kbuf.extend_from_slice(&kt.data()[off..off + dh]);
            vbuf.extend_from_slice(&vt.data()[off..off + dh]);
        }
        (
            MatRef::rm(kbuf.as_slice(), 0, nk, dh, dh),
            MatRef::rm(vbuf.as_slice(), 0, nk, dh, dh),
        )
    }
}

/// `dst[keys] += alpha * lhs @ rhs` for a `[nk, dh]` product routed back to
/// the key rows of one head.
#[allow(clippy::too_many_arguments)]
fn scatter_keys<T: Scalar>(
    dst: &mut [T],
    g: &crate::nn::mask::KeyGroup,
    b: usize,
    lk: usize,
    d: usize,
    h: usize,
    dh: usize,
    tmp: &mut Vec<T>,
    alpha: T,
    lhs: MatRef<'_, T>,
    rhs: MatRef<'_, T>,
) {
    let nk = g.keys.len();
    if let Some(s) = g.contiguous {
        gemm(
            alpha,
            lhs,
            rhs,
            T::one(),
            MatMut::rm(dst, (b * lk + s) * d + h * dh, nk, dh, d),
        );
    } else {
        tmp.clear();
        tmp.resize(nk * dh, T::zero());
        gemm(alpha, lhs, rhs, T::zero(), MatMut::rm(tmp, 0, nk, dh, dh));
        for (i, &key) in g.keys.iter().enumerate() {
            let off = (b * lk + key) * d + h * dh;
            for (o, &v) in dst[off..off + dh].iter_mut().zip(&tmp[i * dh..(i + 1) * dh]) {
                *o = *o + v;
            }
        }
    }
}

fn permute_tensor<T: Scalar>(x: &Tensor<T>, axes: &[usize]) -> Tensor<T> {
    let shape = x.shape();
    let nd = shape.len();
    let mut in_strides = vec![1usize; nd];
    for i in (0..nd.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let n = x.numel();
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; nd];
    let src = x.data();
    for _ in 0..n {
        let off: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
        out.push(src[off]);
        for ax in (0..nd).rev() {
            idx[ax] += 1;
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    Tensor::from_parts(out_shape, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::mask::{build_mask, MaskKind};

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn quadratic_gradient() {
        let x = Var::leaf(t(&[3], &[1.0, 2.0, 3.0]), true);
        let loss = x.sum_sq().unwrap().scale(0.5).unwrap();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap().to_f64_vec(), vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn repeated_backward_accumulates() {
        let x = Var::leaf(t(&[2], &[1.0, -2.0]), true);
        let loss = x.sum_sq().unwrap();
        loss.backward().unwrap();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap().to_f64_vec(), vec![4.0, -8.0]);
        x.zero_grad();
        assert!(x.grad().is_none());
    }

    #[test]
    fn independent_leaf_gets_zero_grad() {
        let x = Var::leaf(t(&[2], &[1.0, 2.0]), true);
        let y = Var::leaf(t(&[2], &[3.0, 4.0]), true);
        let loss = x.sum_sq().unwrap().add(&y.scale(0.0).unwrap().sum().unwrap()).unwrap();
        loss.backward().unwrap();
        assert_eq!(y.grad().unwrap().to_f64_vec(), vec![0.0, 0.0]);
    }

    #[test]
    fn non_scalar_and_detached_losses_error() {
        let x = Var::leaf(t(&[2], &[1.0, 2.0]), true);
        assert!(matches!(x.backward(), Err(Error::NonScalarLoss(_))));
        let c = Var::constant(t(&[2], &[1.0, 2.0])).sum().unwrap();
        assert!(matches!(c.backward(), Err(Error::Detached)));
    }

    #[test]
    fn shape_errors_name_the_op() {
        let a = Var::constant(t(&[2, 3], &[0.0; 6]));
        let b = Var::constant(t(&[2, 3], &[0.0; 6]));
        let e = a.matmul(&b).unwrap_err().to_string();
        assert!(e.contains("matmul") && e.contains("[2, 3]"), "{e}");
    }

    #[test]
    fn non_finite_output_errors() {
        let a = Var::constant(t(&[1], &[1e300]));
        let e = a.mul(&a).unwrap_err();
        assert!(matches!(e, Error::NonFinite { op: "mul" }));
    }

    #[test]
    fn matmul_identity() {
        let eye = Var::constant(t(&[3, 3], &[1., 0., 0., 0., 1., 0., 0., 0., 1.]));
        let a = Var::constant(t(&[3, 3], &[1., 2., 3., 4., 5., 6., 7., 8., 9.]));
        assert!(eye.matmul(&a).unwrap().value().bitwise_eq(a.value()));
    }

    #[test]
    fn no_graph_without_grad() {
        let a = Var::constant(t(&[2], &[1.0, 2.0]));
        let y = a.mul(&a).unwrap();
        assert!(!y.requires_grad());
        assert!(y.is_leaf());
    }

    #[test]
    fn softmax_shift_invariant_bitwise() {
        let x = t(&[2, 4], &[0.1, -3.0, 2.5, 0.0, 7.0, 7.5, -1.0, 2.0]);
        let c = 3.0;
        let y0 = Var::constant(x.clone()).softmax_lastdim().unwrap();
        let y1 = Var::constant(x.map(|v| v + c)).softmax_lastdim().unwrap();
        for row in y0.value().data().chunks(4) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        // max-subtraction makes the shift cancel exactly when x + c is exact
        assert!(y0.value().max_abs_diff(y1.value()) < 1e-15);
    }

    #[test]
    fn permute_round_trip() {
        let x = Var::constant(Tensor::<f64>::from_fn(&[2, 3, 4], |i| i as f64));
        let y = x.permute(&[2, 0, 1]).unwrap();
        assert_eq!(y.shape(), &[4, 2, 3]);
        // y[k, i, j] = x[i, j, k]
        assert_eq!(y.value().data()[6 + 3 + 2], x.value().data()[12 + 8 + 1]);
        let back = y.permute(&[1, 2, 0]).unwrap();
        assert!(back.value().bitwise_eq(x.value()));
    }

    #[test]
    fn concat_and_slice_are_inverse() {
        let a = Var::constant(Tensor::<f64>::from_fn(&[2, 3], |i| i as f64));
        let b = Var::constant(Tensor::<f64>::from_fn(&[2, 2], |i| 10.0 + i as f64));
        let c = Var::concat_lastdim(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(c.shape(), &[2, 5]);
        assert!(c.slice(1, 0, 3).unwrap().value().bitwise_eq(a.value()));
        assert!(c.slice(1, 3, 2).unwrap().value().bitwise_eq(b.value()));
        let r = Var::concat_seqdim(&[a.clone(), a.clone()]).unwrap();
        assert_eq!(r.shape(), &[4, 3]);
    }

    #[test]
    fn attention_single_key_and_uniform() {
        let q = Var::constant(t(&[1, 2], &[0.3, -0.7]));
        let k = Var::constant(t(&[1, 2], &[1.0, 2.0]));
        let v = Var::constant(t(&[1, 2], &[5.0, 6.0]));
        let (o, w) = Var::attention(&q, &k, &v, &Mask::all(1, 1), 1, 1, true).unwrap();
        assert_eq!(o.value().to_f64_vec(), vec![5.0, 6.0]);
        assert_eq!(w.unwrap().to_f64_vec(), vec![1.0]);

        let k = Var::constant(t(&[3, 2], &[1.0, 1.0, 1.0, 1.0, 1.0, 1.0]));
        let v = Var::constant(t(&[3, 2], &[2.0; 6]));
        let (_, w) = Var::attention(&q, &k, &v, &Mask::all(1, 3), 1, 1, true).unwrap();
        for x in w.unwrap().to_f64_vec() {
            assert!((x - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn attention_respects_frame_diagonal() {
        let m = build_mask(2, 2, MaskKind::FrameDiagonal);
        let x = Var::constant(Tensor::<f64>::from_fn(&[4, 4], |i| (i as f64 * 0.37).sin()));
        let (_, w) = Var::attention(&x, &x, &x, &m, 2, 1, true).unwrap();
        let w = w.unwrap();
        for h in 0..2 {
            for q in 0..4 {
                let row = &w.data()[(h * 4 + q) * 4..(h * 4 + q + 1) * 4];
                for (k, &r) in row.iter().enumerate() {
                    if q / 2 != k / 2 {
                        assert_eq!(r, 0.0);
                    }
                }
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn fully_masked_row_errors() {
        let m = Mask::from_allowed(2, 2, vec![true, false, false, false]);
        let x = Var::constant(t(&[2, 2], &[1.0; 4]));
        assert!(matches!(
            Var::attention(&x, &x, &x, &m, 1, 1, false),
            Err(Error::EmptyAttentionRow { row: 1 })
        ));
    }

    #[test]
    fn backward_capture_reports_interior_grad() {
        let x = Var::leaf(t(&[2], &[1.0, 2.0]), true);
        let y = x.scale(3.0).unwrap();
        let loss = y.sum().unwrap();
        let g = loss.backward_capture(&[&y]).unwrap();
        assert_eq!(g[0].as_ref().unwrap().to_f64_vec(), vec![1.0, 1.0]);
        assert_eq!(x.grad().unwrap().to_f64_vec(), vec![3.0, 3.0]);
    }
}
