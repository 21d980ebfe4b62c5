//! Elementwise ops and channel concatenation.

use ndarray::Axis;

use super::ShapeError;
use crate::elem::Elem;
use crate::tape::{Op, Tape, Var};

/// Sigmoid outputs are pinned strictly inside (0, 1); the bare function
/// saturates to exact 0/1 in finite precision.
pub const SIGMOID_CLAMP: f64 = 1e-7;

impl<T: Elem> Tape<T> {
    pub fn relu(&mut self, x: Var) -> Var {
        let y = self.value(x).mapv(|v| if v > T::zero() { v } else { T::zero() });
        self.push(y, Op::Relu { x }, &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let lo = T::from_f64(SIGMOID_CLAMP);
        let hi = T::one() - lo;
        let y = self.value(x).mapv(|v| {
            let s = T::one() / (T::one() + (-v).exp());
            if s < lo {
                lo
            } else if s > hi {
                hi
            } else {
                s
            }
        });
        self.push(y, Op::Sigmoid { x }, &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, ShapeError> {
        if self.shape(a) != self.shape(b) {
            return Err(ShapeError::Mismatch {
                context: "add".into(),
                a: self.shape(a).to_vec(),
                b: self.shape(b).to_vec(),
            });
        }
        let y = self.value(a) + self.value(b);
        Ok(self.push(y, Op::Add { a, b }, &[a, b]))
    }

    /// Concatenate 4-axis features along the channel axis.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var, ShapeError> {
        assert!(!parts.is_empty());
        let first = self.shape(parts[0]).to_vec();
        for &p in &parts[1..] {
            let s = self.shape(p);
            if s[0] != first[0] || s[2] != first[2] || s[3] != first[3] {
                return Err(ShapeError::Mismatch {
                    context: "concat_channels".into(),
                    a: first.clone(),
                    b: s.to_vec(),
                });
            }
        }
        let total_c: usize = parts.iter().map(|&p| self.shape(p)[1]).sum();
        // Assemble by slice assignment; ndarray's concatenate does not
        // guarantee standard layout along interior axes.
        let mut y = ndarray::ArrayD::<T>::zeros(ndarray::IxDyn(&[
            first[0], total_c, first[2], first[3],
        ]));
        let mut offset = 0;
        for &p in parts {
            let c = self.shape(p)[1];
            y.slice_axis_mut(Axis(1), ndarray::Slice::from(offset..offset + c))
                .assign(self.value(p));
            offset += c;
        }
        Ok(self.push(y, Op::ConcatChannels { parts: parts.to_vec() }, parts))
    }

    /// Scalar sum of all entries.
    pub fn sum(&mut self, x: Var) -> Var {
        let mut acc = T::zero();
        for &v in self.value(x).iter() {
            acc = acc + v;
        }
        self.scalar_node(acc, Op::Sum { x }, &[x])
    }

    /// Scalar projection `sum(x * w)` against a fixed weight tensor.
    /// Used to turn tensors into scalars for gradient checks.
    pub fn dot_sum(&mut self, x: Var, w: ndarray::ArrayD<T>) -> Result<Var, ShapeError> {
        if self.shape(x) != w.shape() {
            return Err(ShapeError::Mismatch {
                context: "dot_sum".into(),
                a: self.shape(x).to_vec(),
                b: w.shape().to_vec(),
            });
        }
        let mut acc = T::zero();
        for (&a, &b) in self.value(x).iter().zip(w.iter()) {
            acc = acc + a * b;
        }
        let w = std::sync::Arc::new(w);
        Ok(self.scalar_node(acc, Op::DotSum { x, w }, &[x]))
    }
}
