//! Reverse-mode automatic differentiation over a Wengert tape.
//!
//! A [`Tape`] records every operation applied to [`Var`] handles. Nodes are
//! appended in evaluation order, so walking them backwards is a valid
//! topological order for the gradient sweep. Operations whose inputs do not
//! require gradients store no backward closure.
//!
//! The tape also counts multiply-accumulate operations performed by the
//! matrix and convolution kernels, which backs the analytic FLOP oracle.

use std::cell::{Cell, RefCell};
use std::rc::Rc;

use crate::error::{dim_err, Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

type BackwardFn<T> = Box<dyn Fn(&[T], &[bool]) -> Vec<Option<Vec<T>>>>;

struct Node<T: Scalar> {
    value: Rc<Tensor<T>>,
    requires_grad: bool,
    parents: Vec<usize>,
    backward: Option<BackwardFn<T>>,
}

pub struct Tape<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
    grad_enabled: bool,
    macs: Cell<u64>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            grad_enabled: true,
            macs: Cell::new(0),
        }
    }

    /// A tape that never records backward closures (inference only).
    pub fn no_grad() -> Self {
        Tape {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Multiply-accumulates executed by matmul/conv kernels on this tape.
    pub fn macs(&self) -> u64 {
        self.macs.get()
    }

    fn count(&self, macs: u64) {
        self.macs.set(self.macs.get() + macs);
    }

    /// Binds a tensor as a leaf. It is differentiable iff
    /// `tensor.requires_grad` is set.
    pub fn leaf(&self, tensor: Tensor<T>) -> Var<'_, T> {
        let requires_grad = self.grad_enabled && tensor.requires_grad;
        self.push_node(tensor, requires_grad, Vec::new(), None)
    }

    /// Binds a tensor as a differentiable leaf regardless of its flag.
    pub fn var(&self, tensor: Tensor<T>) -> Var<'_, T> {
        self.leaf(tensor.with_requires_grad(true))
    }

    pub fn constant(&self, tensor: Tensor<T>) -> Var<'_, T> {
        self.push_node(tensor, false, Vec::new(), None)
    }

    fn push_node(
        &self,
        value: Tensor<T>,
        requires_grad: bool,
        parents: Vec<usize>,
        backward: Option<BackwardFn<T>>,
    ) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            requires_grad,
            parents,
            backward,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn push(
        &self,
        value: Tensor<T>,
        parents: &[usize],
        backward: impl Fn(&[T], &[bool]) -> Vec<Option<Vec<T>>> + 'static,
    ) -> Var<'_, T> {
        let requires_grad = self.grad_enabled && {
            let nodes = self.nodes.borrow();
            parents.iter().any(|&p| nodes[p].requires_grad)
        };
        let backward: Option<BackwardFn<T>> = if requires_grad {
            Some(Box::new(backward))
        } else {
            None
        };
        self.push_node(value, requires_grad, parents.to_vec(), backward)
    }

    fn value(&self, id: usize) -> Rc<Tensor<T>> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    /// Gradients of the scalar `loss` with respect to every node.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Grads<T>> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.numel() != 1 {
            return Err(Error::Evaluation(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        if !root.value.data()[0].is_finite() {
            return Err(Error::Evaluation(format!(
                "loss is not finite: {}",
                root.value.data()[0]
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(vec![T::one()]);
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            let Some(backward) = &node.backward else { continue };
            let Some(g) = grads[id].take() else { continue };
            let needs: Vec<bool> = node.parents.iter().map(|&p| nodes[p].requires_grad).collect();
            let parent_grads = backward(&g, &needs);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for ((&p, pg), &need) in node.parents.iter().zip(parent_grads).zip(&needs) {
                let (Some(pg), true) = (pg, need) else { continue };
                match &mut grads[p] {
                    Some(acc) => {
                        for (a, v) in acc.iter_mut().zip(pg) {
                            *a += v;
                        }
                    }
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        Ok(Grads { grads })
    }
}

/// Result of a backward sweep.
pub struct Grads<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Grads<T> {
    /// Gradient of a leaf, or `None` if it did not influence the loss or was
    /// not marked as requiring a gradient.
    pub fn get(&self, var: Var<'_, T>) -> Option<&[T]> {
        self.grads.get(var.id).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, var: Var<'_, T>) -> Option<Vec<T>> {
        self.grads.get_mut(var.id).and_then(|g| g.take())
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T: Scalar> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T: Scalar> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var").field("id", &self.id).field("shape", &self.shape()).finish()
    }
}

fn check_same_shape<T: Scalar>(op: &str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(dim_err!(
            "{op}: shape mismatch {:?} vs {:?}",
            a.shape(),
            b.shape()
        ));
    }
    Ok(())
}

fn check_suffix<T: Scalar>(op: &str, x: &Tensor<T>, y: &Tensor<T>) -> Result<usize> {
    let (xs, ys) = (x.shape(), y.shape());
    if ys.len() > xs.len() || xs[xs.len() - ys.len()..] != *ys {
        return Err(dim_err!(
            "{op}: shape {:?} does not broadcast onto {:?}",
            ys,
            xs
        ));
    }
    Ok(y.numel())
}

fn tensor<T: Scalar>(shape: &[usize], data: Vec<T>) -> Tensor<T> {
    Tensor::new(shape, data).expect("kernel produced consistent shape")
}

/// Train or eval behaviour for batch norm and stochastic depth.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Normalize with batch statistics; report them for the running update.
    Train,
    /// Normalize with frozen running statistics.
    Eval,
}

/// Batch statistics observed by a train-mode batch norm.
#[derive(Debug, Clone)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Unbiased variance, as used for running-statistics updates.
    pub var_unbiased: Vec<T>,
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Rc<Tensor<T>> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    /// 2-D matrix product.
    pub fn matmul(&self, rhs: &Var<'t, T>) -> Result<Var<'t, T>> {
        let (a, b) = (self.value(), rhs.value());
        if a.ndim() != 2 || b.ndim() != 2 || a.shape()[1] != b.shape()[0] {
            return Err(dim_err!(
                "matmul: cannot multiply {:?} by {:?}",
                a.shape(),
                b.shape()
            ));
        }
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        self.tape.count((m * k * n) as u64);
        let out = kernels::matmul(a.data(), b.data(), m, k, n);
        Ok(self.tape.push(tensor(&[m, n], out), &[self.id, rhs.id], move |g, needs| {
            vec![
                needs[0].then(|| kernels::matmul_nt(g, b.data(), m, n, k)),
                needs[1].then(|| kernels::matmul_tn(a.data(), g, m, k, n)),
            ]
        }))
    }

    /// Affine map over the last axis: `x[..., k] · w[k×n] + bias[n]`.
    pub fn linear(&self, w: &Var<'t, T>, bias: Option<&Var<'t, T>>) -> Result<Var<'t, T>> {
        let (x, wv) = (self.value(), w.value());
        let k = *x.shape().last().unwrap();
        if wv.ndim() != 2 || wv.shape()[0] != k {
            return Err(dim_err!(
                "linear: input {:?} incompatible with weight {:?}",
                x.shape(),
                wv.shape()
            ));
        }
        let n = wv.shape()[1];
        let rows = x.numel() / k;
        let mut out = kernels::matmul(x.data(), wv.data(), rows, k, n);
        let mut parents = vec![self.id, w.id];
        if let Some(b) = bias {
            let bv = b.value();
            if bv.shape() != [n] {
                return Err(dim_err!(
                    "linear: bias {:?} does not match output width {n}",
                    bv.shape()
                ));
            }
            for row in out.chunks_exact_mut(n) {
                for (o, &bb) in row.iter_mut().zip(bv.data()) {
                    *o += bb;
                }
            }
            parents.push(b.id);
        }
        self.tape.count((rows * k * n) as u64);
        let mut shape = x.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        Ok(self.tape.push(tensor(&shape, out), &parents, move |g, needs| {
            let mut grads = vec![
                needs[0].then(|| kernels::matmul_nt(g, wv.data(), rows, n, k)),
                needs[1].then(|| kernels::matmul_tn(x.data(), g, rows, k, n)),
            ];
            if needs.len() == 3 {
                grads.push(needs[2].then(|| {
                    let mut db = vec![T::zero(); n];
                    for row in g.chunks_exact(n) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    db
                }));
            }
            grads
        }))
    }

    /// Batched product `[B,m,k]·[B,k,n]`, or `[B,m,k]·[B,n,k]ᵀ` when
    /// `transpose_rhs` is set.
    pub fn bmm(&self, rhs: &Var<'t, T>, transpose_rhs: bool) -> Result<Var<'t, T>> {
        let (a, b) = (self.value(), rhs.value());
        let bad = || dim_err!("bmm: cannot multiply {:?} by {:?}", a.shape(), b.shape());
        if a.ndim() != 3 || b.ndim() != 3 || a.shape()[0] != b.shape()[0] {
            return Err(bad());
        }
        let (batch, m, k) = (a.shape()[0], a.shape()[1], a.shape()[2]);
        let n = if transpose_rhs {
            if b.shape()[2] != k {
                return Err(bad());
            }
            b.shape()[1]
        } else {
            if b.shape()[1] != k {
                return Err(bad());
            }
            b.shape()[2]
        };
        self.tape.count((batch * m * k * n) as u64);
        let mut out = Vec::with_capacity(batch * m * n);
        for i in 0..batch {
            let ai = &a.data()[i * m * k..(i + 1) * m * k];
            let bi = &b.data()[i * k * n..(i + 1) * k * n];
            if transpose_rhs {
                out.extend(kernels::matmul_nt(ai, bi, m, k, n));
            } else {
                out.extend(kernels::matmul(ai, bi, m, k, n));
            }
        }
        Ok(self.tape.push(tensor(&[batch, m, n], out), &[self.id, rhs.id], move |g, needs| {
            let mut da = needs[0].then(|| Vec::with_capacity(batch * m * k));
            let mut db = needs[1].then(|| Vec::with_capacity(batch * k * n));
            for i in 0..batch {
                let ai = &a.data()[i * m * k..(i + 1) * m * k];
                let bi = &b.data()[i * k * n..(i + 1) * k * n];
                let gi = &g[i * m * n..(i + 1) * m * n];
                if transpose_rhs {
                    // c = a·bᵀ: da = g·b, db = gᵀ·a
                    if let Some(da) = &mut da {
                        da.extend(kernels::matmul(gi, bi, m, n, k));
                    }
                    if let Some(db) = &mut db {
                        db.extend(kernels::matmul_tn(gi, ai, m, n, k));
                    }
                } else {
                    if let Some(da) = &mut da {
                        da.extend(kernels::matmul_nt(gi, bi, m, n, k));
                    }
                    if let Some(db) = &mut db {
                        db.extend(kernels::matmul_tn(ai, gi, m, k, n));
                    }
                }
            }
            vec![da, db]
        }))
    }

    pub fn add(&self, rhs: &Var<'t, T>) -> Result<Var<'t, T>> {
        let (a, b) = (self.value(), rhs.value());
        check_same_shape("add", &a, &b)?;
        let out: Vec<T> = a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect();
        Ok(self.tape.push(tensor(a.shape(), out), &[self.id, rhs.id], |g, needs| {
            vec![needs[0].then(|| g.to_vec()), needs[1].then(|| g.to_vec())]
        }))
    }

    pub fn sub(&self, rhs: &Var<'t, T>) -> Result<Var<'t, T>> {
        let (a, b) = (self.value(), rhs.value());
        check_same_shape("sub", &a, &b)?;
        let out: Vec<T> = a.data().iter().zip(b.data()).map(|(&x, &y)| x - y).collect();
        Ok(self.tape.push(tensor(a.shape(), out), &[self.id, rhs.id], |g, needs| {
            vec![
                needs[0].then(|| g.to_vec()),
                needs[1].then(|| g.iter().map(|&v| -v).collect()),
            ]
        }))
    }

    pub fn mul(&self, rhs: &Var<'t, T>) -> Result<Var<'t, T>> {
        let (a, b) = (self.value(), rhs.value());
        check_same_shape("mul", &a, &b)?;
        let out: Vec<T> = a.data().iter().zip(b.data()).map(|(&x, &y)| x * y).collect();
        Ok(self.tape.push(tensor(a.shape(), out), &[self.id, rhs.id], move |g, needs| {
            vec![
                needs[0].then(|| g.iter().zip(b.data()).map(|(&gv, &bv)| gv * bv).collect()),
                needs[1].then(|| g.iter().zip(a.data()).map(|(&gv, &av)| gv * av).collect()),
            ]
        }))
    }

    /// `x + y` where `y`'s shape is a trailing suffix of `x`'s.
    pub fn add_bcast(&self, rhs: &Var<'t, T>) -> Result<Var<'t, T>> {
        let (x, y) = (self.value(), rhs.value());
        let n = check_suffix("add_bcast", &x, &y)?;
        let mut out = x.data().to_vec();
        for chunk in out.chunks_exact_mut(n) {
            for (o, &v) in chunk.iter_mut().zip(y.data()) {
                *o += v;
            }
        }
        Ok(self.tape.push(tensor(x.shape(), out), &[self.id, rhs.id], move |g, needs| {
            vec![
                needs[0].then(|| g.to_vec()),
                needs[1].then(|| {
                    let mut dy = vec![T::zero(); n];
                    for chunk in g.chunks_exact(n) {
                        for (d, &v) in dy.iter_mut().zip(chunk) {
                            *d += v;
                        }
                    }
                    dy
                }),
            ]
        }))
    }

    /// `x ⊙ y` where `y`'s shape is a trailing suffix of `x`'s.
    pub fn mul_bcast(&self, rhs: &Var<'t, T>) -> Result<Var<'t, T>> {
        let (x, y) = (self.value(), rhs.value());
        let n = check_suffix("mul_bcast", &x, &y)?;
        let mut out = x.data().to_vec();
        for chunk in out.chunks_exact_mut(n) {
            for (o, &v) in chunk.iter_mut().zip(y.data()) {
                *o *= v;
            }
        }
        Ok(self.tape.push(tensor(x.shape(), out), &[self.id, rhs.id], move |g, needs| {
            vec![
                needs[0].then(|| {
                    let mut dx = g.to_vec();
                    for chunk in dx.chunks_exact_mut(n) {
                        for (d, &v) in chunk.iter_mut().zip(y.data()) {
                            *d *= v;
                        }
                    }
                    dx
                }),
                needs[1].then(|| {
                    let mut dy = vec![T::zero(); n];
                    for (gc, xc) in g.chunks_exact(n).zip(x.data().chunks_exact(n)) {
                        for ((d, &gv), &xv) in dy.iter_mut().zip(gc).zip(xc) {
                            *d += gv * xv;
                        }
                    }
                    dy
                }),
            ]
        }))
    }

    pub fn scale(&self, c: T) -> Var<'t, T> {
        let x = self.value();
        self.tape.push(x.map(|v| v * c), &[self.id], move |g, _| {
            vec![Some(g.iter().map(|&v| v * c).collect())]
        })
    }

    /// Elementwise product with a constant tensor of the same shape.
    pub fn mul_const(&self, c: &Tensor<T>) -> Result<Var<'t, T>> {
        let x = self.value();
        check_same_shape("mul_const", &x, c)?;
        let c = c.data().to_vec();
        let out: Vec<T> = x.data().iter().zip(&c).map(|(&a, &b)| a * b).collect();
        Ok(self.tape.push(tensor(x.shape(), out), &[self.id], move |g, _| {
            vec![Some(g.iter().zip(&c).map(|(&a, &b)| a * b).collect())]
        }))
    }

    /// Scales every sample (slice along axis 0) by a constant factor.
    pub fn scale_samples(&self, factors: &[T]) -> Result<Var<'t, T>> {
        let x = self.value();
        if x.shape()[0] != factors.len() {
            return Err(dim_err!(
                "scale_samples: {} factors for batch of {}",
                factors.len(),
                x.shape()[0]
            ));
        }
        let per = x.numel() / factors.len();
        let factors = factors.to_vec();
        let apply = move |src: &[T]| -> Vec<T> {
            src.chunks_exact(per)
                .zip(&factors)
                .flat_map(|(chunk, &f)| chunk.iter().map(move |&v| v * f))
                .collect()
        };
        let out = apply(x.data());
        Ok(self.tape.push(tensor(x.shape(), out), &[self.id], move |g, _| {
            vec![Some(apply(g))]
        }))
    }

    pub fn gelu(&self) -> Var<'t, T> {
        let x = self.value();
        let out = x.map(kernels::gelu);
        self.tape.push(out, &[self.id], move |g, _| {
            vec![Some(
                g.iter()
                    .zip(x.data())
                    .map(|(&gv, &xv)| gv * kernels::gelu_grad(xv))
                    .collect(),
            )]
        })
    }

    /// Softmax over the last axis.
    pub fn softmax(&self) -> Var<'t, T> {
        let x = self.value();
        let n = *x.shape().last().unwrap();
        let y = Rc::new(tensor(x.shape(), kernels::softmax_rows(x.data(), n)));
        let y2 = Rc::clone(&y);
        self.tape.push((*y).clone(), &[self.id], move |g, _| {
            let mut dx = vec![T::zero(); g.len()];
            for ((dr, gr), yr) in dx
                .chunks_exact_mut(n)
                .zip(g.chunks_exact(n))
                .zip(y2.data().chunks_exact(n))
            {
                let dot = gr.iter().zip(yr).fold(T::zero(), |s, (&a, &b)| s + a * b);
                for ((d, &gv), &yv) in dr.iter_mut().zip(gr).zip(yr) {
                    *d = yv * (gv - dot);
                }
            }
            vec![Some(dx)]
        })
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&self, gamma: &Var<'t, T>, beta: &Var<'t, T>, eps: T) -> Result<Var<'t, T>> {
        let (x, gv, bv) = (self.value(), gamma.value(), beta.value());
        let d = *x.shape().last().unwrap();
        if gv.shape() != [d] || bv.shape() != [d] {
            return Err(dim_err!(
                "layer_norm: input {:?} vs gamma {:?} / beta {:?}",
                x.shape(),
                gv.shape(),
                bv.shape()
            ));
        }
        let rows = x.numel() / d;
        let dn = T::of(d as f64);
        let mut xhat = vec![T::zero(); x.numel()];
        let mut inv_std = vec![T::zero(); rows];
        let mut out = vec![T::zero(); x.numel()];
        for r in 0..rows {
            let row = &x.data()[r * d..(r + 1) * d];
            let mean = row.iter().fold(T::zero(), |s, &v| s + v) / dn;
            let var = row.iter().fold(T::zero(), |s, &v| s + (v - mean) * (v - mean)) / dn;
            let is = T::one() / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = h * gv.data()[j] + bv.data()[j];
            }
        }
        Ok(self.tape.push(
            tensor(x.shape(), out),
            &[self.id, gamma.id, beta.id],
            move |g, needs| {
                let gamma = gv.data();
                let dx = needs[0].then(|| {
                    let mut dx = vec![T::zero(); g.len()];
                    for r in 0..rows {
                        let gr = &g[r * d..(r + 1) * d];
                        let hr = &xhat[r * d..(r + 1) * d];
                        let mut sum_dh = T::zero();
                        let mut sum_dh_h = T::zero();
                        for j in 0..d {
                            let dh = gr[j] * gamma[j];
                            sum_dh += dh;
                            sum_dh_h += dh * hr[j];
                        }
                        let (m1, m2) = (sum_dh / dn, sum_dh_h / dn);
                        for j in 0..d {
                            let dh = gr[j] * gamma[j];
                            dx[r * d + j] = inv_std[r] * (dh - m1 - hr[j] * m2);
                        }
                    }
                    dx
                });
                let mut dg = vec![T::zero(); d];
                let mut db = vec![T::zero(); d];
                for (gr, hr) in g.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                    for j in 0..d {
                        dg[j] += gr[j] * hr[j];
                        db[j] += gr[j];
                    }
                }
                vec![dx, needs[1].then_some(dg), needs[2].then_some(db)]
            },
        ))
    }

    /// Batch normalization of `[b, c, h, w]` per channel.
    ///
    /// In [`Mode::Train`] the batch statistics are used and returned so
    /// the caller can update running statistics; in [`Mode::Eval`] the
    /// given running statistics are used and nothing is returned.
    pub fn batch_norm_2d(
        &self,
        gamma: &Var<'t, T>,
        beta: &Var<'t, T>,
        running_mean: &[T],
        running_var: &[T],
        mode: Mode,
        eps: T,
    ) -> Result<(Var<'t, T>, Option<BatchStats<T>>)> {
        let (x, gv, bv) = (self.value(), gamma.value(), beta.value());
        if x.ndim() != 4 {
            return Err(dim_err!("batch_norm_2d: expected 4-D input, got {:?}", x.shape()));
        }
        let (b, c, hw) = (x.shape()[0], x.shape()[1], x.shape()[2] * x.shape()[3]);
        if gv.shape() != [c] || bv.shape() != [c] || running_mean.len() != c || running_var.len() != c
        {
            return Err(dim_err!(
                "batch_norm_2d: {} channels but gamma {:?}, beta {:?}, running stats {}/{}",
                c,
                gv.shape(),
                bv.shape(),
                running_mean.len(),
                running_var.len()
            ));
        }
        let m = b * hw;
        let mn = T::of(m as f64);
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        let stats = match mode {
            Mode::Train => {
                for ch in 0..c {
                    let mut s = T::zero();
                    for bi in 0..b {
                        for &v in &x.data()[(bi * c + ch) * hw..(bi * c + ch + 1) * hw] {
                            s += v;
                        }
                    }
                    mean[ch] = s / mn;
                    let mut s2 = T::zero();
                    for bi in 0..b {
                        for &v in &x.data()[(bi * c + ch) * hw..(bi * c + ch + 1) * hw] {
                            s2 += (v - mean[ch]) * (v - mean[ch]);
                        }
                    }
                    var[ch] = s2 / mn;
                }
                let unbiased = if m > 1 {
                    var.iter().map(|&v| v * mn / T::of((m - 1) as f64)).collect()
                } else {
                    var.clone()
                };
                Some(BatchStats {
                    mean: mean.clone(),
                    var_unbiased: unbiased,
                })
            }
            Mode::Eval => {
                mean.copy_from_slice(running_mean);
                var.copy_from_slice(running_var);
                None
            }
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut xhat = vec![T::zero(); x.numel()];
        let mut out = vec![T::zero(); x.numel()];
        for bi in 0..b {
            for ch in 0..c {
                let base = (bi * c + ch) * hw;
                for i in base..base + hw {
                    let h = (x.data()[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = h;
                    out[i] = h * gv.data()[ch] + bv.data()[ch];
                }
            }
        }
        let var = self.tape.push(
            tensor(x.shape(), out),
            &[self.id, gamma.id, beta.id],
            move |g, needs| {
                let gamma = gv.data();
                let mut dg = vec![T::zero(); c];
                let mut db = vec![T::zero(); c];
                for bi in 0..b {
                    for ch in 0..c {
                        let base = (bi * c + ch) * hw;
                        for i in base..base + hw {
                            dg[ch] += g[i] * xhat[i];
                            db[ch] += g[i];
                        }
                    }
                }
                let dx = needs[0].then(|| {
                    let mut dx = vec![T::zero(); g.len()];
                    for bi in 0..b {
                        for ch in 0..c {
                            let base = (bi * c + ch) * hw;
                            let scale = gamma[ch] * inv_std[ch];
                            for i in base..base + hw {
                                dx[i] = match mode {
                                    Mode::Eval => g[i] * scale,
                                    Mode::Train => {
                                        scale * (g[i] - db[ch] / mn - xhat[i] * dg[ch] / mn)
                                    }
                                };
                            }
                        }
                    }
                    dx
                });
                vec![dx, needs[1].then_some(dg), needs[2].then_some(db)]
            },
        );
        Ok((var, stats))
    }

    /// 2-D cross-correlation of `[b, cin, h, w]` with `[cout, cin, kh, kw]`.
    pub fn conv2d(
        &self,
        kernel: &Var<'t, T>,
        bias: Option<&Var<'t, T>>,
        stride: usize,
        pad: usize,
    ) -> Result<Var<'t, T>> {
        let (x, k) = (self.value(), kernel.value());
        if x.ndim() != 4 || k.ndim() != 4 || x.shape()[1] != k.shape()[1] {
            return Err(dim_err!(
                "conv2d: input {:?} incompatible with kernel {:?}",
                x.shape(),
                k.shape()
            ));
        }
        if stride == 0 {
            return Err(dim_err!("conv2d: stride must be positive"));
        }
        let g = ConvGeom {
            batch: x.shape()[0],
            cin: x.shape()[1],
            h: x.shape()[2],
            w: x.shape()[3],
            cout: k.shape()[0],
            kh: k.shape()[2],
            kw: k.shape()[3],
            stride,
            pad,
        };
        if g.kh > g.h + 2 * pad || g.kw > g.w + 2 * pad {
            return Err(dim_err!(
                "conv2d: kernel {}x{} larger than padded input {}x{}",
                g.kh,
                g.kw,
                g.h + 2 * pad,
                g.w + 2 * pad
            ));
        }
        let (oh, ow, plen, cout) = (g.out_h(), g.out_w(), g.patch_len(), g.cout);
        let rows = g.batch * oh * ow;
        let cols = kernels::im2col(x.data(), &g);
        // [rows, plen] · [cout, plen]ᵀ → [rows, cout]
        let mut y = kernels::matmul_nt(&cols, k.data(), rows, plen, cout);
        let mut parents = vec![self.id, kernel.id];
        if let Some(b) = bias {
            let bv = b.value();
            if bv.shape() != [cout] {
                return Err(dim_err!("conv2d: bias {:?} for {} output channels", bv.shape(), cout));
            }
            for row in y.chunks_exact_mut(cout) {
                for (o, &bb) in row.iter_mut().zip(bv.data()) {
                    *o += bb;
                }
            }
            parents.push(b.id);
        }
        self.tape.count(g.macs());
        let (out, _) = kernels::permute(&y, &[g.batch, oh * ow, cout], &[0, 2, 1]);
        let has_bias = bias.is_some();
        Ok(self.tape.push(
            tensor(&[g.batch, cout, oh, ow], out),
            &parents,
            move |grad, needs| {
                // back to [rows, cout]
                let (gy, _) = kernels::permute(grad, &[g.batch, cout, oh * ow], &[0, 2, 1]);
                let dx = needs[0].then(|| {
                    let dcols = kernels::matmul(&gy, k.data(), rows, cout, plen);
                    kernels::col2im(&dcols, &g)
                });
                let dk = needs[1].then(|| kernels::matmul_tn(&gy, &cols, rows, cout, plen));
                let mut grads = vec![dx, dk];
                if has_bias {
                    grads.push(needs[2].then(|| {
                        let mut db = vec![T::zero(); cout];
                        for row in gy.chunks_exact(cout) {
                            for (d, &v) in db.iter_mut().zip(row) {
                                *d += v;
                            }
                        }
                        db
                    }));
                }
                grads
            },
        ))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t, T>> {
        let x = self.value();
        let out = (*x).clone().reshape(shape)?;
        Ok(self.tape.push(out, &[self.id], |g, _| vec![Some(g.to_vec())]))
    }

    /// Reorders axes; output axis `i` is input axis `perm[i]`.
    pub fn permute(&self, perm: &[usize]) -> Result<Var<'t, T>> {
        let x = self.value();
        let mut seen = vec![false; x.ndim()];
        if perm.len() != x.ndim() || perm.iter().any(|&p| p >= x.ndim() || std::mem::replace(&mut seen[p], true)) {
            return Err(dim_err!("permute: {:?} is not a permutation of {:?}", perm, x.shape()));
        }
        let (out, shape) = kernels::permute(x.data(), x.shape(), perm);
        let inv = kernels::invert_perm(perm);
        let out_shape = shape.clone();
        Ok(self.tape.push(tensor(&shape, out), &[self.id], move |g, _| {
            vec![Some(kernels::permute(g, &out_shape, &inv).0)]
        }))
    }

    /// Slice `[start, start+len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Var<'t, T>> {
        let x = self.value();
        if axis >= x.ndim() || len == 0 || start + len > x.shape()[axis] {
            return Err(dim_err!(
                "narrow: [{start}, {}) out of range on axis {axis} of {:?}",
                start + len,
                x.shape()
            ));
        }
        let outer: usize = x.shape()[..axis].iter().product();
        let inner: usize = x.shape()[axis + 1..].iter().product();
        let full = x.shape()[axis];
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            out.extend_from_slice(&x.data()[base..base + len * inner]);
        }
        let mut shape = x.shape().to_vec();
        shape[axis] = len;
        let numel = x.numel();
        Ok(self.tape.push(tensor(&shape, out), &[self.id], move |g, _| {
            let mut dx = vec![T::zero(); numel];
            for o in 0..outer {
                let base = (o * full + start) * inner;
                dx[base..base + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
            }
            vec![Some(dx)]
        }))
    }

    /// Prepends a shared token to every sequence of `[b, T, d]`; `token` has
    /// `d` elements (any shape).
    pub fn prepend_token(&self, token: &Var<'t, T>) -> Result<Var<'t, T>> {
        let (x, tok) = (self.value(), token.value());
        if x.ndim() != 3 || tok.numel() != x.shape()[2] {
            return Err(dim_err!(
                "prepend_token: token {:?} for sequence {:?}",
                tok.shape(),
                x.shape()
            ));
        }
        let (b, t, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let mut out = Vec::with_capacity(b * (t + 1) * d);
        for bi in 0..b {
            out.extend_from_slice(tok.data());
            out.extend_from_slice(&x.data()[bi * t * d..(bi + 1) * t * d]);
        }
        Ok(self.tape.push(tensor(&[b, t + 1, d], out), &[self.id, token.id], move |g, needs| {
            let dx = needs[0].then(|| {
                let mut dx = Vec::with_capacity(b * t * d);
                for bi in 0..b {
                    let base = bi * (t + 1) * d;
                    dx.extend_from_slice(&g[base + d..base + (t + 1) * d]);
                }
                dx
            });
            let dt = needs[1].then(|| {
                let mut dt = vec![T::zero(); d];
                for bi in 0..b {
                    let base = bi * (t + 1) * d;
                    for (a, &v) in dt.iter_mut().zip(&g[base..base + d]) {
                        *a += v;
                    }
                }
                dt
            });
            vec![dx, dt]
        }))
    }

    /// Replaces rows `i` of every `[b, T, d]` sequence where `mask[i]` is set
    /// with `token` (`d` elements).
    pub fn replace_rows(&self, mask: &[bool], token: &Var<'t, T>) -> Result<Var<'t, T>> {
        let (x, tok) = (self.value(), token.value());
        if x.ndim() != 3 || x.shape()[1] != mask.len() || tok.numel() != x.shape()[2] {
            return Err(dim_err!(
                "replace_rows: mask of length {} / token {:?} for tokens {:?}",
                mask.len(),
                tok.shape(),
                x.shape()
            ));
        }
        let (b, t, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let mut out = x.data().to_vec();
        for bi in 0..b {
            for (ti, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
                let base = (bi * t + ti) * d;
                out[base..base + d].copy_from_slice(tok.data());
            }
        }
        let mask = mask.to_vec();
        Ok(self.tape.push(tensor(x.shape(), out), &[self.id, token.id], move |g, needs| {
            let mut dx = needs[0].then(|| g.to_vec());
            let mut dt = needs[1].then(|| vec![T::zero(); d]);
            for bi in 0..b {
                for (ti, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
                    let base = (bi * t + ti) * d;
                    if let Some(dx) = &mut dx {
                        dx[base..base + d].iter_mut().for_each(|v| *v = T::zero());
                    }
                    if let Some(dt) = &mut dt {
                        for (a, &v) in dt.iter_mut().zip(&g[base..base + d]) {
                            *a += v;
                        }
                    }
                }
            }
            vec![dx, dt]
        }))
    }

    /// Splits `[b, c, H, W]` into flattened non-overlapping `p×p` patches,
    /// giving `[b, (H/p)·(W/p), c·p·p]`.
    pub fn patchify(&self, p: usize) -> Result<Var<'t, T>> {
        let x = self.value();
        if x.ndim() != 4 || p == 0 || x.shape()[2] % p != 0 || x.shape()[3] % p != 0 {
            return Err(dim_err!(
                "patchify: image {:?} not divisible into {p}x{p} patches",
                x.shape()
            ));
        }
        let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let out = kernels::patchify(x.data(), b, c, h, w, p);
        let shape = [b, (h / p) * (w / p), c * p * p];
        Ok(self.tape.push(tensor(&shape, out), &[self.id], move |g, _| {
            vec![Some(kernels::unpatchify(g, b, c, h, w, p))]
        }))
    }

    pub fn sum(&self) -> Var<'t, T> {
        let x = self.value();
        let s = x.data().iter().fold(T::zero(), |a, &v| a + v);
        let n = x.numel();
        self.tape.push(Tensor::scalar(s), &[self.id], move |g, _| vec![Some(vec![g[0]; n])])
    }

    pub fn mean(&self) -> Var<'t, T> {
        let n = self.value().numel();
        self.sum().scale(T::one() / T::of(n as f64))
    }

    /// Mean cross-entropy of `[b, classes]` logits against integer labels.
    pub fn cross_entropy(&self, labels: &[usize]) -> Result<Var<'t, T>> {
        let x = self.value();
        if x.ndim() != 2 || x.shape()[0] != labels.len() {
            return Err(dim_err!(
                "cross_entropy: logits {:?} for {} labels",
                x.shape(),
                labels.len()
            ));
        }
        let (b, c) = (x.shape()[0], x.shape()[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(dim_err!("cross_entropy: label {bad} out of range for {c} classes"));
        }
        let probs = kernels::softmax_rows(x.data(), c);
        let mut loss = T::zero();
        for (i, &l) in labels.iter().enumerate() {
            let row = &x.data()[i * c..(i + 1) * c];
            let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let lse = row.iter().fold(T::zero(), |s, &v| s + (v - max).exp()).ln() + max;
            loss += lse - row[l];
        }
        let bn = T::of(b as f64);
        let labels = labels.to_vec();
        Ok(self.tape.push(Tensor::scalar(loss / bn), &[self.id], move |g, _| {
            let mut dx = probs.clone();
            for (i, &l) in labels.iter().enumerate() {
                dx[i * c + l] -= T::one();
            }
            let s = g[0] / bn;
            dx.iter_mut().for_each(|v| *v *= s);
            vec![Some(dx)]
        }))
    }

    /// Mean squared error against a constant target over the rows of
    /// `[b, T, e]` selected by `mask` (length `T`).
    pub fn masked_mse(&self, target: &Tensor<T>, mask: &[bool]) -> Result<Var<'t, T>> {
        let x = self.value();
        check_same_shape("masked_mse", &x, target)?;
        if x.ndim() != 3 || x.shape()[1] != mask.len() {
            return Err(dim_err!(
                "masked_mse: mask of length {} for predictions {:?}",
                mask.len(),
                x.shape()
            ));
        }
        let (b, t, e) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let selected = mask.iter().filter(|&&m| m).count();
        if selected == 0 {
            return Err(Error::Config("masked_mse: mask selects no rows".into()));
        }
        let count = T::of((b * selected * e) as f64);
        let mut diff = vec![T::zero(); x.numel()];
        let mut loss = T::zero();
        for bi in 0..b {
            for (ti, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
                let base = (bi * t + ti) * e;
                for i in base..base + e {
                    let d = x.data()[i] - target.data()[i];
                    diff[i] = d;
                    loss += d * d;
                }
            }
        }
        Ok(self.tape.push(Tensor::scalar(loss / count), &[self.id], move |g, _| {
            let s = T::of(2.0) * g[0] / count;
            vec![Some(diff.iter().map(|&d| d * s).collect())]
        }))
    }
}
