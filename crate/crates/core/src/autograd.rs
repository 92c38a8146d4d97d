//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every operation eagerly as it is executed. Calling
//! [`Tape::backward`] on a scalar node walks the tape in reverse and returns the
//! gradient of that scalar with respect to every node that requires one.

use std::cell::RefCell;
use std::rc::Rc;

use crate::kernels::{self, AffineCoeffs};
use crate::tensor::{Scalar, Tensor};

enum Op<T> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    WeightedSum(Vec<(usize, T)>),
    LeakyRelu(usize, T),
    Tanh(usize),
    Abs(usize),
    Conv2d {
        x: usize,
        w: usize,
        b: Option<usize>,
        pad: usize,
    },
    AvgPool2(usize),
    Upsample2(usize),
    GlobalAvgPool(usize),
    ConcatChannels(Vec<usize>),
    SelectBatch(usize, Vec<usize>),
    Splice {
        a: usize,
        b: usize,
        mask: Rc<Vec<bool>>,
    },
    ZeroWhere {
        a: usize,
        mask: Rc<Vec<bool>>,
    },
    SpectralNorm {
        w: usize,
        u: Vec<T>,
        v: Vec<T>,
        sigma: T,
    },
    Mean(usize),
    BceWithLogits {
        x: usize,
        real: bool,
    },
    AffineSample {
        x: usize,
        coeffs: Vec<AffineCoeffs>,
    },
    FlipWidth {
        x: usize,
        flags: Vec<bool>,
    },
}

struct Node<T> {
    value: Rc<Tensor<T>>,
    op: Op<T>,
    needs_grad: bool,
}

/// Recording of one forward computation.
pub struct Tape<T> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}", self.id)
    }
}

/// Gradients produced by [`Tape::backward`], indexed by node.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, var: Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    /// Gradient, or zeros of the node's shape when nothing flowed into it.
    pub fn get_or_zeros(&self, var: Var<'_, T>) -> Tensor<T> {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(var.shape()))
    }

    pub fn take(&mut self, var: Var<'_, T>) -> Option<Tensor<T>> {
        self.grads.get_mut(var.id).and_then(Option::take)
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            needs_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn needs(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].needs_grad)
    }

    fn value_of(&self, id: usize) -> Rc<Tensor<T>> {
        self.nodes.borrow()[id].value.clone()
    }

    /// Leaf that gradients flow into.
    pub fn param(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf treated as a constant.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, false)
    }

    /// Gradients of the scalar `root` with respect to every node that needs one.
    pub fn backward(&self, root: Var<'_, T>) -> Gradients<T> {
        let nodes = self.nodes.borrow();
        assert_eq!(
            nodes[root.id].value.len(),
            1,
            "backward needs a scalar root"
        );
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[root.id] = Some(Tensor::full(nodes[root.id].value.shape(), T::one()));

        for id in (0..=root.id).rev() {
            let node = &nodes[id];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let need = |i: usize| nodes[i].needs_grad;
            let val = |i: usize| -> &Tensor<T> { &nodes[i].value };
            let mut contrib: Vec<(usize, Tensor<T>)> = Vec::new();
            match &node.op {
                Op::Leaf => {
                    grads[id] = Some(g);
                    continue;
                }
                Op::Add(a, b) => {
                    if need(*a) {
                        contrib.push((*a, g.clone()));
                    }
                    if need(*b) {
                        contrib.push((*b, g.clone()));
                    }
                }
                Op::Sub(a, b) => {
                    if need(*a) {
                        contrib.push((*a, g.clone()));
                    }
                    if need(*b) {
                        contrib.push((*b, g.map(|v| -v)));
                    }
                }
                Op::Mul(a, b) => {
                    if need(*a) {
                        contrib.push((*a, g.zip_map(val(*b), |x, y| x * y)));
                    }
                    if need(*b) {
                        contrib.push((*b, g.zip_map(val(*a), |x, y| x * y)));
                    }
                }
                Op::Scale(a, s) => {
                    if need(*a) {
                        let s = *s;
                        contrib.push((*a, g.map(|v| v * s)));
                    }
                }
                Op::WeightedSum(terms) => {
                    for &(a, s) in terms {
                        if need(a) {
                            contrib.push((a, g.map(|v| v * s)));
                        }
                    }
                }
                Op::LeakyRelu(a, slope) => {
                    let slope = *slope;
                    contrib.push((
                        *a,
                        g.zip_map(val(*a), |gv, x| if x > T::zero() { gv } else { gv * slope }),
                    ));
                }
                Op::Tanh(a) => {
                    contrib.push((*a, g.zip_map(&node.value, |gv, y| gv * (T::one() - y * y))));
                }
                Op::Abs(a) => {
                    // subgradient 0 at exactly zero (float signum(0) is 1)
                    let d = g.zip_map(val(*a), |gv, x| {
                        if x == T::zero() {
                            T::zero()
                        } else {
                            gv * x.signum()
                        }
                    });
                    contrib.push((*a, d));
                }
                Op::Conv2d { x, w, b, pad } => {
                    let (dx, dw, db) = kernels::conv2d_backward(
                        val(*x),
                        val(*w),
                        *pad,
                        &g,
                        need(*x),
                        need(*w),
                        b.is_some_and(need),
                    );
                    if let Some(dx) = dx {
                        contrib.push((*x, dx));
                    }
                    if let Some(dw) = dw {
                        contrib.push((*w, dw));
                    }
                    if let (Some(b), Some(db)) = (b, db) {
                        contrib.push((*b, db));
                    }
                }
                Op::AvgPool2(a) => {
                    contrib.push((*a, kernels::avg_pool2_backward(val(*a).shape(), &g)))
                }
                Op::Upsample2(a) => {
                    contrib.push((*a, kernels::upsample_nearest2_backward(val(*a).shape(), &g)))
                }
                Op::GlobalAvgPool(a) => {
                    contrib.push((*a, kernels::global_avg_pool_backward(val(*a).shape(), &g)))
                }
                Op::ConcatChannels(parts) => {
                    let [n, _, h, w] = g.shape();
                    let mut offset = 0;
                    for &p in parts {
                        let c = val(p).channels();
                        if need(p) {
                            let mut d = Tensor::zeros([n, c, h, w]);
                            for b in 0..n {
                                let src = &g.sample(b)[offset * h * w..(offset + c) * h * w];
                                d.sample_mut(b).copy_from_slice(src);
                            }
                            contrib.push((p, d));
                        }
                        offset += c;
                    }
                }
                Op::SelectBatch(a, indices) => {
                    let mut d = Tensor::zeros(val(*a).shape());
                    for (row, &i) in indices.iter().enumerate() {
                        let src = g.sample(row).to_vec();
                        for (dst, v) in d.sample_mut(i).iter_mut().zip(src) {
                            *dst = *dst + v;
                        }
                    }
                    contrib.push((*a, d));
                }
                Op::Splice { a, b, mask } => {
                    if need(*a) {
                        let mut d = g.clone();
                        for (v, &m) in d.data_mut().iter_mut().zip(mask.iter()) {
                            if m {
                                *v = T::zero();
                            }
                        }
                        contrib.push((*a, d));
                    }
                    if need(*b) {
                        let mut d = g.clone();
                        for (v, &m) in d.data_mut().iter_mut().zip(mask.iter()) {
                            if !m {
                                *v = T::zero();
                            }
                        }
                        contrib.push((*b, d));
                    }
                }
                Op::ZeroWhere { a, mask } => {
                    let mut d = g.clone();
                    for (v, &m) in d.data_mut().iter_mut().zip(mask.iter()) {
                        if m {
                            *v = T::zero();
                        }
                    }
                    contrib.push((*a, d));
                }
                Op::SpectralNorm { w, u, v, sigma } => {
                    let wt = val(*w);
                    let rows = wt.shape()[0];
                    let cols = wt.len() / rows;
                    let inner: T = g.data().iter().zip(wt.data()).map(|(&a, &b)| a * b).sum();
                    let coef = inner / (*sigma * *sigma);
                    let mut d = g.map(|x| x / *sigma);
                    for r in 0..rows {
                        for c in 0..cols {
                            let i = r * cols + c;
                            d.data_mut()[i] = d.data()[i] - coef * u[r] * v[c];
                        }
                    }
                    contrib.push((*w, d));
                }
                Op::Mean(a) => {
                    let n = T::from_usize(val(*a).len()).expect("size fits");
                    contrib.push((*a, Tensor::full(val(*a).shape(), g.data()[0] / n)));
                }
                Op::BceWithLogits { x, real } => {
                    let xs = val(*x);
                    let scale = g.data()[0] / T::from_usize(xs.len()).expect("size fits");
                    let real = *real;
                    contrib.push((
                        *x,
                        xs.map(|l| {
                            let s = sigmoid(l);
                            if real {
                                (s - T::one()) * scale
                            } else {
                                s * scale
                            }
                        }),
                    ));
                }
                Op::AffineSample { x, coeffs } => {
                    contrib.push((
                        *x,
                        kernels::affine_sample_backward(val(*x).shape(), coeffs, &g),
                    ));
                }
                Op::FlipWidth { x, flags } => contrib.push((*x, kernels::flip_width(&g, flags))),
            }
            for (p, d) in contrib {
                match &mut grads[p] {
                    Some(acc) => acc.add_assign(&d),
                    slot @ None => *slot = Some(d),
                }
            }
        }
        Gradients { grads }
    }
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Numerically stable `log(1 + exp(x))`.
pub fn softplus<T: Scalar>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor<T>> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> [usize; 4] {
        self.tape.nodes.borrow()[self.id].value.shape()
    }

    pub fn needs_grad(&self) -> bool {
        self.tape.needs(&[self.id])
    }

    /// Value of a scalar node.
    pub fn item(&self) -> T {
        let v = self.value();
        assert_eq!(v.len(), 1, "item() on a non-scalar");
        v.data()[0]
    }

    fn unary(&self, value: Tensor<T>, op: Op<T>) -> Self {
        let needs = self.needs_grad();
        self.tape.push(value, op, needs)
    }

    fn binary(&self, other: Var<'t, T>, value: Tensor<T>, op: Op<T>) -> Self {
        let needs = self.tape.needs(&[self.id, other.id]);
        self.tape.push(value, op, needs)
    }

    pub fn add(&self, other: Var<'t, T>) -> Self {
        let v = self.value().zip_map(&other.value(), |a, b| a + b);
        self.binary(other, v, Op::Add(self.id, other.id))
    }

    pub fn sub(&self, other: Var<'t, T>) -> Self {
        let v = self.value().zip_map(&other.value(), |a, b| a - b);
        self.binary(other, v, Op::Sub(self.id, other.id))
    }

    pub fn mul(&self, other: Var<'t, T>) -> Self {
        let v = self.value().zip_map(&other.value(), |a, b| a * b);
        self.binary(other, v, Op::Mul(self.id, other.id))
    }

    pub fn scale(&self, s: T) -> Self {
        let v = self.value().map(|a| a * s);
        self.unary(v, Op::Scale(self.id, s))
    }

    /// `sum_i w_i * x_i` over same-shaped nodes.
    pub fn weighted_sum(terms: &[(Var<'t, T>, T)]) -> Self {
        assert!(!terms.is_empty(), "weighted_sum of nothing");
        let tape = terms[0].0.tape;
        let mut acc = Tensor::zeros(terms[0].0.shape());
        for (v, w) in terms {
            let w = *w;
            acc = acc.zip_map(&v.value(), |a, b| a + w * b);
        }
        let ids: Vec<usize> = terms.iter().map(|(v, _)| v.id).collect();
        let needs = tape.needs(&ids);
        tape.push(
            acc,
            Op::WeightedSum(terms.iter().map(|(v, w)| (v.id, *w)).collect()),
            needs,
        )
    }

    pub fn leaky_relu(&self, slope: T) -> Self {
        let v = self
            .value()
            .map(|a| if a > T::zero() { a } else { a * slope });
        self.unary(v, Op::LeakyRelu(self.id, slope))
    }

    pub fn tanh(&self) -> Self {
        let v = self.value().map(|a| a.tanh());
        self.unary(v, Op::Tanh(self.id))
    }

    pub fn abs(&self) -> Self {
        let v = self.value().map(|a| a.abs());
        self.unary(v, Op::Abs(self.id))
    }

    /// Stride-1 convolution with zero padding `pad`.
    pub fn conv2d(&self, weight: Var<'t, T>, bias: Option<Var<'t, T>>, pad: usize) -> Self {
        let b_val = bias.map(|b| b.value());
        let v = kernels::conv2d(&self.value(), &weight.value(), b_val.as_deref(), pad);
        let mut ids = vec![self.id, weight.id];
        ids.extend(bias.map(|b| b.id));
        let needs = self.tape.needs(&ids);
        self.tape.push(
            v,
            Op::Conv2d {
                x: self.id,
                w: weight.id,
                b: bias.map(|b| b.id),
                pad,
            },
            needs,
        )
    }

    pub fn avg_pool2(&self) -> Self {
        let v = kernels::avg_pool2(&self.value());
        self.unary(v, Op::AvgPool2(self.id))
    }

    pub fn upsample2(&self) -> Self {
        let v = kernels::upsample_nearest2(&self.value());
        self.unary(v, Op::Upsample2(self.id))
    }

    pub fn global_avg_pool(&self) -> Self {
        let v = kernels::global_avg_pool(&self.value());
        self.unary(v, Op::GlobalAvgPool(self.id))
    }

    /// Channel-wise concatenation of same-batch, same-resolution nodes.
    pub fn concat_channels(parts: &[Var<'t, T>]) -> Self {
        assert!(!parts.is_empty(), "concat of nothing");
        let tape = parts[0].tape;
        let values: Vec<Rc<Tensor<T>>> = parts.iter().map(|p| p.value()).collect();
        let [n, _, h, w] = values[0].shape();
        let c_total: usize = values.iter().map(|v| v.channels()).sum();
        let mut out = Tensor::zeros([n, c_total, h, w]);
        for b in 0..n {
            let mut offset = 0;
            for v in &values {
                assert_eq!(
                    (v.batch(), v.height(), v.width()),
                    (n, h, w),
                    "concat shape mismatch"
                );
                let len = v.sample_len();
                out.sample_mut(b)[offset..offset + len].copy_from_slice(v.sample(b));
                offset += len;
            }
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let needs = tape.needs(&ids);
        tape.push(out, Op::ConcatChannels(ids), needs)
    }

    pub fn select_batch(&self, indices: &[usize]) -> Self {
        let v = self.value().select_batch(indices);
        self.unary(v, Op::SelectBatch(self.id, indices.to_vec()))
    }

    /// Elementwise: `other` where `mask` is set, `self` elsewhere.
    pub fn splice(&self, other: Var<'t, T>, mask: Vec<bool>) -> Self {
        let a = self.value();
        let b = other.value();
        assert_eq!(a.shape(), b.shape(), "splice shape mismatch");
        assert_eq!(mask.len(), a.len(), "mask length mismatch");
        let mut out = (*a).clone();
        for ((o, &bv), &m) in out.data_mut().iter_mut().zip(b.data()).zip(&mask) {
            if m {
                *o = bv;
            }
        }
        self.binary(
            other,
            out,
            Op::Splice {
                a: self.id,
                b: other.id,
                mask: Rc::new(mask),
            },
        )
    }

    /// Elementwise: zero where `mask` is set.
    pub fn zero_where(&self, mask: Vec<bool>) -> Self {
        let mut out = (*self.value()).clone();
        assert_eq!(mask.len(), out.len(), "mask length mismatch");
        for (o, &m) in out.data_mut().iter_mut().zip(&mask) {
            if m {
                *o = T::zero();
            }
        }
        self.unary(
            out,
            Op::ZeroWhere {
                a: self.id,
                mask: Rc::new(mask),
            },
        )
    }

    /// `W / (u^T W v)` with `u`, `v` held constant. `W` is viewed as `(out, rest)`.
    pub fn spectral_normalize(&self, u: &[T], v: &[T]) -> Self {
        let w = self.value();
        let rows = w.shape()[0];
        let cols = w.len() / rows;
        assert_eq!(
            (u.len(), v.len()),
            (rows, cols),
            "power-iteration vector sizes"
        );
        let mut sigma = T::zero();
        for r in 0..rows {
            let row = &w.data()[r * cols..(r + 1) * cols];
            let wv: T = row.iter().zip(v).map(|(&a, &b)| a * b).sum();
            sigma = sigma + u[r] * wv;
        }
        let sigma = sigma.max(T::from_f64_lossy(1e-12));
        let out = w.map(|x| x / sigma);
        self.unary(
            out,
            Op::SpectralNorm {
                w: self.id,
                u: u.to_vec(),
                v: v.to_vec(),
                sigma,
            },
        )
    }

    /// Mean of all elements, as a scalar node.
    pub fn mean(&self) -> Self {
        let v = self.value();
        let m = v.sum() / T::from_usize(v.len()).expect("size fits");
        self.unary(Tensor::scalar(m), Op::Mean(self.id))
    }

    /// Mean binary cross-entropy of logits against an all-real or all-fake target.
    pub fn bce_with_logits(&self, real: bool) -> Self {
        let v = self.value();
        let total: T = v
            .data()
            .iter()
            .map(|&l| if real { softplus(-l) } else { softplus(l) })
            .sum();
        let loss = total / T::from_usize(v.len()).expect("size fits");
        self.unary(Tensor::scalar(loss), Op::BceWithLogits { x: self.id, real })
    }

    pub fn affine_sample(&self, coeffs: Vec<AffineCoeffs>) -> Self {
        let v = kernels::affine_sample(&self.value(), &coeffs);
        self.unary(v, Op::AffineSample { x: self.id, coeffs })
    }

    pub fn flip_width(&self, flags: Vec<bool>) -> Self {
        let v = kernels::flip_width(&self.value(), &flags);
        self.unary(v, Op::FlipWidth { x: self.id, flags })
    }
}
