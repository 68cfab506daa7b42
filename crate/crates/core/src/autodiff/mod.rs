//! Reverse-mode differentiation over a per-forward-pass tape.
//!
//! A [`Graph`] records every operation of one forward pass. Values are
//! immutable once recorded. [`Graph::backward`] walks the tape in reverse and
//! returns gradients for the tracked leaves; parameter gradients can then be
//! accumulated into a [`ParamStore`]. The graph is dropped after use, so
//! data-dependent index patterns (argmax, argsort) are free to differ per call.

mod check;
mod params;
mod tensor;

pub use check::finite_diff_grad;
pub use params::{ParamId, ParamStore};
pub use tensor::Tensor;

use std::collections::HashMap;

use thiserror::Error;

use crate::scalar::Scalar;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("{op}: shape mismatch ({detail})")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("index {index} out of bounds for axis {axis} of length {len}")]
    IndexOutOfBounds {
        axis: usize,
        index: usize,
        len: usize,
    },
    #[error("axis {axis} out of range for rank {rank}")]
    BadAxis { axis: usize, rank: usize },
    #[error("duplicate parameter name `{0}`")]
    DuplicateParam(String),
    #[error("non-finite function value {0} during finite differencing")]
    NonFinite(f64),
    #[error("{0}")]
    Invalid(String),
}

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnaryKind {
    Gelu,
    Softplus,
    Sigmoid,
    Recip,
    Square,
    Tanh,
    Exp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Broadcast {
    Same,
    /// rhs repeats every `rhs.len()` elements of lhs
    Suffix,
    /// each rhs element covers `rep` consecutive lhs elements
    Prefix {
        rep: usize,
    },
}

#[derive(Debug)]
enum Op<S> {
    Leaf,
    Param,
    Take {
        src: usize,
        index: Vec<usize>,
    },
    Binary {
        a: usize,
        b: usize,
        kind: BinaryKind,
        bcast: Broadcast,
    },
    Affine {
        a: usize,
        scale: S,
    },
    Unary {
        a: usize,
        kind: UnaryKind,
    },
    MatMul {
        a: usize,
        w: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Bmm {
        a: usize,
        b: usize,
        g: usize,
        m: usize,
        k: usize,
        n: usize,
        trans_b: bool,
    },
    Softmax {
        a: usize,
        cols: usize,
    },
    LayerNorm {
        a: usize,
        cols: usize,
        rstd: Vec<S>,
    },
    Sum {
        a: usize,
    },
    Mean {
        a: usize,
    },
    Reshape {
        a: usize,
    },
}

#[derive(Debug)]
struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    tracked: bool,
}

/// Tape of one forward pass.
#[derive(Debug)]
pub struct Graph<S> {
    nodes: Vec<Node<S>>,
    params: HashMap<ParamId, usize>,
    detached: Vec<usize>,
    replay: Option<(Vec<Tensor<S>>, usize)>,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

// 1 - 2 / (e^{2u} + 1); one exp is much cheaper than libm tanh
fn tanh<S: Scalar>(u: S) -> S {
    let two = S::lit(2.0);
    S::one() - two / ((two * u).exp() + S::one())
}

fn gelu<S: Scalar>(x: S) -> S {
    let half = S::lit(0.5);
    let inner = S::lit(GELU_C) * (x + S::lit(GELU_A) * x * x * x);
    half * x * (S::one() + tanh(inner))
}

fn gelu_grad<S: Scalar>(x: S) -> S {
    let half = S::lit(0.5);
    let inner = S::lit(GELU_C) * (x + S::lit(GELU_A) * x * x * x);
    let t = tanh(inner);
    let dinner = S::lit(GELU_C) * (S::one() + S::lit(3.0 * GELU_A) * x * x);
    half * (S::one() + t) + half * x * (S::one() - t * t) * dinner
}

pub(crate) fn sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

pub(crate) fn softplus<S: Scalar>(x: S) -> S {
    x.max(S::zero()) + (-x.abs()).exp().ln_1p()
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            detached: Vec::new(),
            replay: None,
        }
    }

    /// Graph whose `detach` calls return `values` in order instead of their
    /// inputs. Evaluating a perturbed forward this way holds detached
    /// quantities at a reference point, which is the function reverse mode
    /// differentiates.
    pub fn replaying(values: Vec<Tensor<S>>) -> Self {
        Self {
            replay: Some((values, 0)),
            ..Self::new()
        }
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, v: usize) -> bool {
        self.nodes[v].tracked
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Approximate bytes held by recorded values and index tables.
    pub fn bytes(&self) -> usize {
        self.nodes
            .iter()
            .map(|n| {
                let idx = match &n.op {
                    Op::Take { index, .. } => index.len() * std::mem::size_of::<usize>(),
                    Op::LayerNorm { rstd, .. } => rstd.len() * std::mem::size_of::<S>(),
                    _ => 0,
                };
                n.value.len() * std::mem::size_of::<S>() + idx
            })
            .sum()
    }

    /// Untracked input value.
    pub fn constant(&mut self, t: Tensor<S>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Leaf whose gradient is reported by [`Graph::backward`].
    pub fn input(&mut self, t: Tensor<S>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Binds a stored parameter; repeated calls return the same handle.
    pub fn param(&mut self, store: &ParamStore<S>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return Var(v);
        }
        let v = self.push(store.value(id).clone(), Op::Param, true);
        self.params.insert(id, v.0);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    /// Same payload, cut from the gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let shape = self.nodes[v.0].value.shape().to_vec();
        let value = match &mut self.replay {
            Some((values, next))
                if *next < values.len() && values[*next].shape() == shape.as_slice() =>
            {
                *next += 1;
                values[*next - 1].clone()
            }
            _ => self.nodes[v.0].value.clone(),
        };
        let out = self.push(value, Op::Leaf, false);
        self.detached.push(out.0);
        out
    }

    /// Payloads of every `detach` output so far, in call order.
    pub fn detached_values(&self) -> Vec<Tensor<S>> {
        self.detached
            .iter()
            .map(|&i| self.nodes[i].value.clone())
            .collect()
    }

    /// `out[i] = x[index[i]]` over the flat payload; backward scatter-adds.
    pub fn take(
        &mut self,
        x: Var,
        index: Vec<usize>,
        shape: Vec<usize>,
    ) -> Result<Var, GraphError> {
        let src = &self.nodes[x.0].value;
        let expected: usize = shape.iter().product();
        if expected != index.len() {
            return Err(GraphError::ShapeMismatch {
                op: "take",
                detail: format!("shape {shape:?} for {} indices", index.len()),
            });
        }
        let len = src.len();
        let mut data = Vec::with_capacity(index.len());
        for &i in &index {
            if i >= len {
                return Err(GraphError::IndexOutOfBounds {
                    axis: 0,
                    index: i,
                    len,
                });
            }
            data.push(src.data()[i]);
        }
        let tracked = self.tracked(x.0);
        Ok(self.push(
            Tensor::new(shape, data)?,
            Op::Take { src: x.0, index },
            tracked,
        ))
    }

    /// Selects slices along `axis`, repeating the same index list for every
    /// position of the other axes.
    pub fn gather(&mut self, x: Var, indices: &[usize], axis: usize) -> Result<Var, GraphError> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(GraphError::BadAxis {
                axis,
                rank: shape.len(),
            });
        }
        let len = shape[axis];
        if let Some(&bad) = indices.iter().find(|&&i| i >= len) {
            return Err(GraphError::IndexOutOfBounds {
                axis,
                index: bad,
                len,
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut index = Vec::with_capacity(outer * indices.len() * inner);
        for o in 0..outer {
            for &i in indices {
                let base = (o * len + i) * inner;
                index.extend(base..base + inner);
            }
        }
        let mut out_shape = shape;
        out_shape[axis] = indices.len();
        self.take(x, index, out_shape)
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var, GraphError> {
        let shape = self.shape(x).to_vec();
        let rank = shape.len();
        let mut seen = vec![false; rank];
        if perm.len() != rank
            || perm
                .iter()
                .any(|&p| p >= rank || std::mem::replace(&mut seen[p], true))
        {
            return Err(GraphError::Invalid(format!(
                "bad permutation {perm:?} for rank {rank}"
            )));
        }
        let mut in_strides = vec![1usize; rank];
        for i in (0..rank.saturating_sub(1)).rev() {
            in_strides[i] = in_strides[i + 1] * shape[i + 1];
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let total: usize = shape.iter().product();
        let mut index = Vec::with_capacity(total);
        let mut counter = vec![0usize; rank];
        for _ in 0..total {
            index.push(
                counter
                    .iter()
                    .zip(perm)
                    .map(|(&c, &p)| c * in_strides[p])
                    .sum(),
            );
            for ax in (0..rank).rev() {
                counter[ax] += 1;
                if counter[ax] < out_shape[ax] {
                    break;
                }
                counter[ax] = 0;
            }
        }
        self.take(x, index, out_shape)
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var, GraphError> {
        let value = self.nodes[x.0].value.clone().reshape(shape)?;
        let tracked = self.tracked(x.0);
        Ok(self.push(value, Op::Reshape { a: x.0 }, tracked))
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        kind: BinaryKind,
        prefix: bool,
    ) -> Result<Var, GraphError> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let bcast = if av.shape() == bv.shape() {
            Broadcast::Same
        } else if !prefix && av.shape().ends_with(bv.shape()) && !bv.is_empty() {
            Broadcast::Suffix
        } else if prefix && av.shape().starts_with(bv.shape()) && !bv.is_empty() {
            Broadcast::Prefix {
                rep: av.len() / bv.len(),
            }
        } else {
            return Err(GraphError::ShapeMismatch {
                op: "binary",
                detail: format!("{:?} vs {:?}", av.shape(), bv.shape()),
            });
        };
        let (ad, bd) = (av.data(), bv.data());
        let blen = bd.len();
        let f = |x: S, y: S| match kind {
            BinaryKind::Add => x + y,
            BinaryKind::Sub => x - y,
            BinaryKind::Mul => x * y,
        };
        let mut data: Vec<S> = Vec::with_capacity(ad.len());
        match bcast {
            Broadcast::Same => data.extend(ad.iter().zip(bd).map(|(&x, &y)| f(x, y))),
            Broadcast::Suffix => {
                for chunk in ad.chunks_exact(blen) {
                    data.extend(chunk.iter().zip(bd).map(|(&x, &y)| f(x, y)));
                }
            }
            Broadcast::Prefix { rep } => {
                for (chunk, &y) in ad.chunks_exact(rep).zip(bd) {
                    data.extend(chunk.iter().map(|&x| f(x, y)));
                }
            }
        }
        let value = Tensor::new(av.shape().to_vec(), data)?;
        let tracked = self.tracked(a.0) || self.tracked(b.0);
        Ok(self.push(
            value,
            Op::Binary {
                a: a.0,
                b: b.0,
                kind,
                bcast,
            },
            tracked,
        ))
    }

    /// Elementwise sum; `b` may match `a` or a trailing block of `a`'s shape.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, GraphError> {
        self.binary(a, b, BinaryKind::Add, false)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, GraphError> {
        self.binary(a, b, BinaryKind::Sub, false)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, GraphError> {
        self.binary(a, b, BinaryKind::Mul, false)
    }

    /// Adds `b` whose shape is a leading block of `a`'s shape.
    pub fn add_prefix(&mut self, a: Var, b: Var) -> Result<Var, GraphError> {
        self.binary(a, b, BinaryKind::Add, true)
    }

    /// Multiplies by `b` whose shape is a leading block of `a`'s shape.
    pub fn mul_prefix(&mut self, a: Var, b: Var) -> Result<Var, GraphError> {
        self.binary(a, b, BinaryKind::Mul, true)
    }

    /// `scale * a + shift`
    pub fn affine(&mut self, a: Var, scale: S, shift: S) -> Var {
        let av = &self.nodes[a.0].value;
        let data = av.data().iter().map(|&x| scale * x + shift).collect();
        let value = Tensor::new(av.shape().to_vec(), data).expect("same shape");
        let tracked = self.tracked(a.0);
        self.push(value, Op::Affine { a: a.0, scale }, tracked)
    }

    pub fn unary(&mut self, a: Var, kind: UnaryKind) -> Var {
        let av = &self.nodes[a.0].value;
        let f: fn(S) -> S = match kind {
            UnaryKind::Gelu => gelu,
            UnaryKind::Softplus => softplus,
            UnaryKind::Sigmoid => sigmoid,
            UnaryKind::Recip => |x| S::one() / x,
            UnaryKind::Square => |x| x * x,
            UnaryKind::Tanh => |x| x.tanh(),
            UnaryKind::Exp => |x| x.exp(),
        };
        let data = av.data().iter().map(|&x| f(x)).collect();
        let value = Tensor::new(av.shape().to_vec(), data).expect("same shape");
        let tracked = self.tracked(a.0);
        self.push(value, Op::Unary { a: a.0, kind }, tracked)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, UnaryKind::Gelu)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, UnaryKind::Softplus)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, UnaryKind::Sigmoid)
    }

    pub fn recip(&mut self, a: Var) -> Var {
        self.unary(a, UnaryKind::Recip)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, UnaryKind::Square)
    }

    /// `a[..., k] x w[k, n] -> [..., n]`
    pub fn matmul(&mut self, a: Var, w: Var) -> Result<Var, GraphError> {
        let (av, wv) = (&self.nodes[a.0].value, &self.nodes[w.0].value);
        let ws = wv.shape();
        let k = *av.shape().last().unwrap_or(&0);
        if ws.len() != 2 || ws[0] != k || k == 0 {
            return Err(GraphError::ShapeMismatch {
                op: "matmul",
                detail: format!("{:?} x {:?}", av.shape(), ws),
            });
        }
        let n = ws[1];
        let m = av.len() / k;
        let mut out = vec![S::zero(); m * n];
        S::gemm(
            m,
            k,
            n,
            av.data(),
            (k as isize, 1),
            wv.data(),
            (n as isize, 1),
            &mut out,
            (n as isize, 1),
            false,
        );
        let mut shape = av.shape().to_vec();
        *shape.last_mut().expect("rank >= 1") = n;
        let tracked = self.tracked(a.0) || self.tracked(w.0);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::MatMul {
                a: a.0,
                w: w.0,
                m,
                k,
                n,
            },
            tracked,
        ))
    }

    /// Batched product over leading axes: `[.., m, k] x [.., k, n]`, or
    /// `[.., m, k] x [.., n, k]^T` when `trans_b`.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var, GraphError> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (sa, sb) = (av.shape(), bv.shape());
        let bad = || GraphError::ShapeMismatch {
            op: "bmm",
            detail: format!("{sa:?} x {sb:?} (trans_b={trans_b})"),
        };
        if sa.len() < 2 || sb.len() != sa.len() || sa[..sa.len() - 2] != sb[..sb.len() - 2] {
            return Err(bad());
        }
        let r = sa.len();
        let (m, k) = (sa[r - 2], sa[r - 1]);
        let (kb, n) = if trans_b {
            (sb[r - 1], sb[r - 2])
        } else {
            (sb[r - 2], sb[r - 1])
        };
        if kb != k {
            return Err(bad());
        }
        let g: usize = sa[..r - 2].iter().product();
        let mut out = vec![S::zero(); g * m * n];
        let b_strides = if trans_b {
            (1, k as isize)
        } else {
            (n as isize, 1)
        };
        for i in 0..g {
            S::gemm(
                m,
                k,
                n,
                &av.data()[i * m * k..(i + 1) * m * k],
                (k as isize, 1),
                &bv.data()[i * k * n..(i + 1) * k * n],
                b_strides,
                &mut out[i * m * n..(i + 1) * m * n],
                (n as isize, 1),
                false,
            );
        }
        let mut shape = sa.to_vec();
        shape[r - 1] = n;
        let tracked = self.tracked(a.0) || self.tracked(b.0);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Bmm {
                a: a.0,
                b: b.0,
                g,
                m,
                k,
                n,
                trans_b,
            },
            tracked,
        ))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let av = &self.nodes[a.0].value;
        let cols = *av.shape().last().unwrap_or(&1);
        let mut data = av.data().to_vec();
        for row in data.chunks_mut(cols.max(1)) {
            let max = row.iter().copied().fold(S::neg_infinity(), S::max);
            let mut total = S::zero();
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                total += *x;
            }
            for x in row.iter_mut() {
                *x /= total;
            }
        }
        let value = Tensor::new(av.shape().to_vec(), data).expect("same shape");
        let tracked = self.tracked(a.0);
        self.push(value, Op::Softmax { a: a.0, cols }, tracked)
    }

    /// Normalizes each last-axis row to zero mean and unit variance.
    pub fn layer_norm(&mut self, a: Var, eps: S) -> Var {
        let av = &self.nodes[a.0].value;
        let cols = *av.shape().last().unwrap_or(&1);
        let c = S::from_usize(cols).expect("cols");
        let mut data = av.data().to_vec();
        let mut rstd = Vec::with_capacity(data.len() / cols.max(1));
        for row in data.chunks_mut(cols.max(1)) {
            let mean = row.iter().copied().sum::<S>() / c;
            let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<S>() / c;
            let r = S::one() / (var + eps).sqrt();
            for x in row.iter_mut() {
                *x = (*x - mean) * r;
            }
            rstd.push(r);
        }
        let value = Tensor::new(av.shape().to_vec(), data).expect("same shape");
        let tracked = self.tracked(a.0);
        self.push(value, Op::LayerNorm { a: a.0, cols, rstd }, tracked)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.nodes[a.0].value.data().iter().copied().sum();
        let tracked = self.tracked(a.0);
        self.push(Tensor::scalar(total), Op::Sum { a: a.0 }, tracked)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let av = &self.nodes[a.0].value;
        let total: S = av.data().iter().copied().sum();
        let mean = total / S::from_usize(av.len().max(1)).expect("len");
        let tracked = self.tracked(a.0);
        self.push(Tensor::scalar(mean), Op::Mean { a: a.0 }, tracked)
    }

    /// Reverse sweep from a scalar `loss`, seeded with gradient one.
    pub fn backward(&self, loss: Var) -> Result<Gradients<S>, GraphError> {
        self.backward_retaining(loss, &[])
    }

    /// Like [`Graph::backward`], also keeping the gradients of the
    /// intermediate nodes in `retain`.
    pub fn backward_retaining(
        &self,
        loss: Var,
        retain: &[Var],
    ) -> Result<Gradients<S>, GraphError> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(GraphError::ShapeMismatch {
                op: "backward",
                detail: format!("loss must be scalar, got {:?}", self.shape(loss)),
            });
        }
        let mut grads: Vec<Option<Vec<S>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![S::one()]);
        let mut leaves: Vec<Option<Vec<S>>> = (0..=loss.0).map(|_| None).collect();
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if retain.iter().any(|v| v.0 == i) {
                leaves[i] = Some(g.clone());
            }
            let node = &self.nodes[i];
            if !node.tracked {
                continue;
            }
            self.propagate(i, g, &mut grads, &mut leaves);
        }
        let params = self.params.iter().map(|(&id, &v)| (id, v)).collect();
        Ok(Gradients { leaves, params })
    }

    fn propagate(
        &self,
        i: usize,
        g: Vec<S>,
        grads: &mut [Option<Vec<S>>],
        leaves: &mut [Option<Vec<S>>],
    ) {
        let nodes = &self.nodes;
        let val = |j: usize| nodes[j].value.data();
        // accumulate into the gradient slot of a tracked input, allocating on first use
        let with_grad = |grads: &mut [Option<Vec<S>>], j: usize, f: &mut dyn FnMut(&mut [S])| {
            if nodes[j].tracked {
                let len = nodes[j].value.len();
                f(grads[j].get_or_insert_with(|| vec![S::zero(); len]));
            }
        };
        match &nodes[i].op {
            Op::Leaf | Op::Param => {
                leaves[i] = Some(g);
            }
            Op::Take { src, index } => {
                with_grad(grads, *src, &mut |dst| {
                    for (&ix, &gv) in index.iter().zip(&g) {
                        dst[ix] += gv;
                    }
                });
            }
            Op::Reshape { a } => {
                with_grad(grads, *a, &mut |dst| {
                    dst.iter_mut().zip(&g).for_each(|(d, &gv)| *d += gv);
                });
            }
            Op::Binary { a, b, kind, bcast } => {
                let (a, b) = (*a, *b);
                let (ad, bd) = (val(a), val(b));
                // rows of `g` that pair with one element (prefix) or the whole of `b` (suffix)
                let (rows, width) = match bcast {
                    Broadcast::Same => (1, g.len()),
                    Broadcast::Suffix => (g.len() / bd.len().max(1), bd.len()),
                    Broadcast::Prefix { rep } => (g.len() / rep, *rep),
                };
                with_grad(grads, a, &mut |dst| match kind {
                    BinaryKind::Add | BinaryKind::Sub => {
                        dst.iter_mut().zip(&g).for_each(|(d, &gv)| *d += gv)
                    }
                    BinaryKind::Mul => match bcast {
                        Broadcast::Same => dst
                            .iter_mut()
                            .zip(&g)
                            .zip(bd)
                            .for_each(|((d, &gv), &y)| *d += gv * y),
                        Broadcast::Suffix => {
                            for (dc, gc) in dst.chunks_exact_mut(width).zip(g.chunks_exact(width)) {
                                dc.iter_mut()
                                    .zip(gc)
                                    .zip(bd)
                                    .for_each(|((d, &gv), &y)| *d += gv * y);
                            }
                        }
                        Broadcast::Prefix { .. } => {
                            for ((dc, gc), &y) in dst
                                .chunks_exact_mut(width)
                                .zip(g.chunks_exact(width))
                                .zip(bd)
                            {
                                dc.iter_mut().zip(gc).for_each(|(d, &gv)| *d += gv * y);
                            }
                        }
                    },
                });
                with_grad(grads, b, &mut |dst| {
                    let sign = if *kind == BinaryKind::Sub {
                        -S::one()
                    } else {
                        S::one()
                    };
                    for r in 0..rows {
                        let gc = &g[r * width..(r + 1) * width];
                        let ac = &ad[r * width..(r + 1) * width];
                        match (bcast, kind) {
                            (Broadcast::Prefix { .. }, BinaryKind::Mul) => {
                                dst[r] += gc.iter().zip(ac).map(|(&gv, &x)| gv * x).sum::<S>();
                            }
                            (Broadcast::Prefix { .. }, _) => {
                                dst[r] += sign * gc.iter().copied().sum::<S>()
                            }
                            (_, BinaryKind::Mul) => dst
                                .iter_mut()
                                .zip(gc)
                                .zip(ac)
                                .for_each(|((d, &gv), &x)| *d += gv * x),
                            _ => dst.iter_mut().zip(gc).for_each(|(d, &gv)| *d += sign * gv),
                        }
                    }
                });
            }
            Op::Affine { a, scale } => {
                with_grad(grads, *a, &mut |dst| {
                    dst.iter_mut()
                        .zip(&g)
                        .for_each(|(d, &gv)| *d += *scale * gv);
                });
            }
            Op::Unary { a, kind } => {
                with_grad(grads, *a, &mut |dst| {
                    let (x, y) = (val(*a), val(i));
                    for k in 0..g.len() {
                        let d = match kind {
                            UnaryKind::Gelu => gelu_grad(x[k]),
                            UnaryKind::Softplus => sigmoid(x[k]),
                            UnaryKind::Sigmoid => y[k] * (S::one() - y[k]),
                            UnaryKind::Recip => -(y[k] * y[k]),
                            UnaryKind::Square => S::lit(2.0) * x[k],
                            UnaryKind::Tanh => S::one() - y[k] * y[k],
                            UnaryKind::Exp => y[k],
                        };
                        dst[k] += g[k] * d;
                    }
                });
            }
            Op::MatMul { a, w, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                with_grad(grads, *a, &mut |dst| {
                    // dA = G W^T
                    S::gemm(
                        m,
                        n,
                        k,
                        &g,
                        (n as isize, 1),
                        val(*w),
                        (1, n as isize),
                        dst,
                        (k as isize, 1),
                        true,
                    );
                });
                with_grad(grads, *w, &mut |dst| {
                    // dW = A^T G
                    S::gemm(
                        k,
                        m,
                        n,
                        val(*a),
                        (1, k as isize),
                        &g,
                        (n as isize, 1),
                        dst,
                        (n as isize, 1),
                        true,
                    );
                });
            }
            Op::Bmm {
                a,
                b,
                g: groups,
                m,
                k,
                n,
                trans_b,
            } => {
                let (m, k, n) = (*m, *k, *n);
                let (ad, bd) = (val(*a), val(*b));
                with_grad(grads, *a, &mut |dst| {
                    for t in 0..*groups {
                        let gs = &g[t * m * n..(t + 1) * m * n];
                        let bs = &bd[t * k * n..(t + 1) * k * n];
                        // dA = G B^T, with B stored k x n (or n x k when transposed)
                        let b_strides = if *trans_b {
                            (k as isize, 1)
                        } else {
                            (1, n as isize)
                        };
                        S::gemm(
                            m,
                            n,
                            k,
                            gs,
                            (n as isize, 1),
                            bs,
                            b_strides,
                            &mut dst[t * m * k..(t + 1) * m * k],
                            (k as isize, 1),
                            true,
                        );
                    }
                });
                with_grad(grads, *b, &mut |dst| {
                    for t in 0..*groups {
                        let gs = &g[t * m * n..(t + 1) * m * n];
                        let as_ = &ad[t * m * k..(t + 1) * m * k];
                        let out = &mut dst[t * k * n..(t + 1) * k * n];
                        if *trans_b {
                            // dB (n x k) = G^T A
                            S::gemm(
                                n,
                                m,
                                k,
                                gs,
                                (1, n as isize),
                                as_,
                                (k as isize, 1),
                                out,
                                (k as isize, 1),
                                true,
                            );
                        } else {
                            // dB (k x n) = A^T G
                            S::gemm(
                                k,
                                m,
                                n,
                                as_,
                                (1, k as isize),
                                gs,
                                (n as isize, 1),
                                out,
                                (n as isize, 1),
                                true,
                            );
                        }
                    }
                });
            }
            Op::Softmax { a, cols } => {
                with_grad(grads, *a, &mut |dst| {
                    let y = val(i);
                    for ((drow, grow), yrow) in dst
                        .chunks_mut(*cols)
                        .zip(g.chunks(*cols))
                        .zip(y.chunks(*cols))
                    {
                        let dot: S = grow.iter().zip(yrow).map(|(&gv, &yv)| gv * yv).sum();
                        for ((d, &gv), &yv) in drow.iter_mut().zip(grow).zip(yrow) {
                            *d += yv * (gv - dot);
                        }
                    }
                });
            }
            Op::LayerNorm { a, cols, rstd } => {
                with_grad(grads, *a, &mut |dst| {
                    let xhat = val(i);
                    let c = S::from_usize(*cols).expect("cols");
                    for (r, ((drow, grow), xrow)) in dst
                        .chunks_mut(*cols)
                        .zip(g.chunks(*cols))
                        .zip(xhat.chunks(*cols))
                        .enumerate()
                    {
                        let sum_g: S = grow.iter().copied().sum();
                        let sum_gx: S = grow.iter().zip(xrow).map(|(&gv, &xv)| gv * xv).sum();
                        for ((d, &gv), &xv) in drow.iter_mut().zip(grow).zip(xrow) {
                            *d += rstd[r] / c * (c * gv - sum_g - xv * sum_gx);
                        }
                    }
                });
            }
            Op::Sum { a } => {
                with_grad(grads, *a, &mut |dst| {
                    dst.iter_mut().for_each(|d| *d += g[0]);
                });
            }
            Op::Mean { a } => {
                with_grad(grads, *a, &mut |dst| {
                    let scale = g[0] / S::from_usize(dst.len().max(1)).expect("len");
                    dst.iter_mut().for_each(|d| *d += scale);
                });
            }
        }
    }

    /// Adds parameter gradients from `grads` into `store`.
    pub fn accumulate(&self, grads: &Gradients<S>, store: &mut ParamStore<S>) {
        for &(id, node) in &grads.params {
            if let Some(Some(g)) = grads.leaves.get(node) {
                store
                    .grad_mut(id)
                    .iter_mut()
                    .zip(g)
                    .for_each(|(d, &gv)| *d += gv);
            }
        }
    }
}

/// Leaf gradients produced by one reverse sweep.
#[derive(Debug)]
pub struct Gradients<S> {
    leaves: Vec<Option<Vec<S>>>,
    params: Vec<(ParamId, usize)>,
}

impl<S: Scalar> Gradients<S> {
    /// Gradient of a tracked leaf (or retained node), `None` when no path reached it.
    pub fn wrt(&self, v: Var) -> Option<&[S]> {
        self.leaves.get(v.0).and_then(|g| g.as_deref())
    }
}
