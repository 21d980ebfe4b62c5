//! Reverse-mode autodiff tape.
//!
//! A [`Tape`] records the forward computation as a flat list of nodes
//! (define-by-run). [`Tape::backward`] walks the list in reverse and
//! accumulates gradients for every leaf that requires them. All kernels are
//! single-threaded with a fixed summation order, so identical inputs and
//! parameters produce bitwise identical outputs and gradients.

use std::sync::Arc;

use ndarray::{ArrayD, IxDyn};

use crate::elem::Elem;
use crate::ops::conv::ConvCtx;
use crate::ops::norm::BnCtx;
use crate::ops::pool::PoolCtx;
use crate::ops::reduce::BceCtx;
use crate::ops::resample::{LinTable, NearTable};
use crate::params::ParamStore;

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

pub(crate) enum Op<T: Elem> {
    Leaf,
    Conv2d(ConvCtx),
    BatchNorm(BnCtx<T>),
    Relu { x: Var },
    Sigmoid { x: Var },
    Add { a: Var, b: Var },
    ConcatChannels { parts: Vec<Var> },
    Bilinear { x: Var, rows: LinTable<T>, cols: LinTable<T> },
    Nearest { x: Var, table: NearTable },
    MaxPool(PoolCtx),
    Bce(BceCtx<T>),
    Sum { x: Var },
    DotSum { x: Var, w: Arc<ArrayD<T>> },
}

pub(crate) struct Node<T: Elem> {
    pub value: Arc<ArrayD<T>>,
    pub op: Op<T>,
    pub needs_grad: bool,
}

pub struct Tape<T: Elem> {
    pub(crate) nodes: Vec<Node<T>>,
    /// Parameter leaves staged this pass, in forward order: (name, var).
    pub(crate) staged: Vec<(String, Var)>,
    grad_enabled: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Grads<T: Elem> {
    g: Vec<Option<ArrayD<T>>>,
}

impl<T: Elem> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&ArrayD<T>> {
        self.g[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<ArrayD<T>> {
        self.g[v.0].take()
    }
}

impl<T: Elem> Tape<T> {
    /// Tape that records backward context (training / gradient checks).
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), staged: Vec::new(), grad_enabled: true }
    }

    /// Tape for forward-only use; no backward context is kept and
    /// `backward` must not be called.
    pub fn inference() -> Self {
        Tape { nodes: Vec::new(), staged: Vec::new(), grad_enabled: false }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub(crate) fn push(&mut self, value: ArrayD<T>, op: Op<T>, parents: &[Var]) -> Var {
        let needs_grad = self.grad_enabled && parents.iter().any(|p| self.nodes[p.0].needs_grad);
        let op = if self.grad_enabled { op } else { Op::Leaf };
        self.nodes.push(Node { value: Arc::new(value), op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// Insert an input tensor as a leaf.
    pub fn leaf(&mut self, value: ArrayD<T>, requires_grad: bool) -> Var {
        let needs_grad = self.grad_enabled && requires_grad;
        self.nodes.push(Node { value: Arc::new(value), op: Op::Leaf, needs_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: ArrayD<T>) -> Var {
        self.leaf(value, false)
    }

    /// Stage a named parameter from the store as a trainable leaf.
    pub fn param(&mut self, store: &ParamStore<T>, name: &str) -> Var {
        let entry = store.entry(name);
        let needs_grad = self.grad_enabled && entry.trainable;
        self.nodes.push(Node { value: Arc::clone(&entry.value), op: Op::Leaf, needs_grad });
        let var = Var(self.nodes.len() - 1);
        self.staged.push((name.to_string(), var));
        var
    }

    pub fn value(&self, v: Var) -> &ArrayD<T> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> T {
        debug_assert_eq!(self.nodes[v.0].value.len(), 1);
        self.nodes[v.0].value.iter().copied().next().unwrap()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// (N, C, H, W) of a 4-axis node.
    pub fn dims4(&self, v: Var) -> (usize, usize, usize, usize) {
        let s = self.shape(v);
        debug_assert_eq!(s.len(), 4);
        (s[0], s[1], s[2], s[3])
    }

    /// Parameter leaves staged during the forward pass, in order.
    pub fn staged_params(&self) -> &[(String, Var)] {
        &self.staged
    }

    pub(crate) fn needs_grad_of(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub(crate) fn scalar_node(&mut self, v: T, op: Op<T>, parents: &[Var]) -> Var {
        self.push(ArrayD::from_elem(IxDyn(&[]), v), op, parents)
    }

    /// Reverse pass from a scalar root. Gradients are retained for leaves
    /// only; intermediate gradients are freed as soon as they are consumed.
    pub fn backward(&self, root: Var) -> Grads<T> {
        assert!(self.grad_enabled, "backward on an inference tape");
        assert_eq!(self.nodes[root.0].value.len(), 1, "backward root must be scalar");
        let mut g: Vec<Option<ArrayD<T>>> = Vec::with_capacity(self.nodes.len());
        g.resize_with(self.nodes.len(), || None);
        g[root.0] = Some(ArrayD::from_elem(self.nodes[root.0].value.raw_dim(), T::one()));

        for i in (0..=root.0).rev() {
            if !self.nodes[i].needs_grad || matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(gy) = g[i].take() else { continue };
            self.propagate(i, &gy, &mut g);
        }
        Grads { g }
    }

    fn accumulate(&self, g: &mut [Option<ArrayD<T>>], p: Var, delta: ArrayD<T>) {
        if !self.nodes[p.0].needs_grad {
            return;
        }
        match &mut g[p.0] {
            Some(acc) => acc.zip_mut_with(&delta, |a, &d| *a = *a + d),
            slot @ None => *slot = Some(delta),
        }
    }

    fn propagate(&self, i: usize, gy: &ArrayD<T>, g: &mut [Option<ArrayD<T>>]) {
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Conv2d(ctx) => {
                let (dx, dw, db) = crate::ops::conv::backward(self, ctx, gy);
                if let Some(dx) = dx {
                    self.accumulate(g, ctx.x, dx);
                }
                if let Some(dw) = dw {
                    self.accumulate(g, ctx.w, dw);
                }
                if let (Some(b), Some(db)) = (ctx.b, db) {
                    self.accumulate(g, b, db);
                }
            }
            Op::BatchNorm(ctx) => {
                let (dx, dgamma, dbeta) = crate::ops::norm::backward(self, ctx, gy);
                if let Some(dx) = dx {
                    self.accumulate(g, ctx.x, dx);
                }
                if let Some(dgamma) = dgamma {
                    self.accumulate(g, ctx.gamma, dgamma);
                }
                if let Some(dbeta) = dbeta {
                    self.accumulate(g, ctx.beta, dbeta);
                }
            }
            Op::Relu { x } => {
                let xs = self.value(*x);
                let mut dx = gy.clone();
                dx.zip_mut_with(xs, |d, &v| {
                    if v <= T::zero() {
                        *d = T::zero();
                    }
                });
                self.accumulate(g, *x, dx);
            }
            Op::Sigmoid { x } => {
                let y = &self.nodes[i].value;
                let mut dx = gy.clone();
                dx.zip_mut_with(y, |d, &yv| *d = *d * yv * (T::one() - yv));
                self.accumulate(g, *x, dx);
            }
            Op::Add { a, b } => {
                self.accumulate(g, *a, gy.clone());
                self.accumulate(g, *b, gy.clone());
            }
            Op::ConcatChannels { parts } => {
                let mut offset = 0;
                for p in parts {
                    let c = self.shape(*p)[1];
                    let slice = gy
                        .slice_axis(ndarray::Axis(1), ndarray::Slice::from(offset..offset + c));
                    self.accumulate(g, *p, slice.to_owned());
                    offset += c;
                }
            }
            Op::Bilinear { x, rows, cols } => {
                let dx = crate::ops::resample::bilinear_backward(self, *x, rows, cols, gy);
                self.accumulate(g, *x, dx);
            }
            Op::Nearest { x, table } => {
                let dx = crate::ops::resample::nearest_backward(self, *x, table, gy);
                self.accumulate(g, *x, dx);
            }
            Op::MaxPool(ctx) => {
                let dx = crate::ops::pool::backward(self, ctx, gy);
                self.accumulate(g, ctx.x, dx);
            }
            Op::Bce(ctx) => {
                let dpred = crate::ops::reduce::bce_backward(self, ctx, gy);
                self.accumulate(g, ctx.pred, dpred);
            }
            Op::Sum { x } => {
                let gs = gy.iter().copied().next().unwrap();
                let dx = ArrayD::from_elem(self.value(*x).raw_dim(), gs);
                self.accumulate(g, *x, dx);
            }
            Op::DotSum { x, w } => {
                let gs = gy.iter().copied().next().unwrap();
                let dx = w.mapv(|wv| wv * gs);
                self.accumulate(g, *x, dx);
            }
        }
    }
}

impl<T: Elem> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}
