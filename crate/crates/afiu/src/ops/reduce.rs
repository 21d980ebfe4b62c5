//! Binary cross-entropy over prediction maps.

use std::sync::Arc;

use ndarray::ArrayD;

use super::ShapeError;
use crate::elem::Elem;
use crate::tape::{Op, Tape, Var};

/// Clamp applied inside the logarithms; the loss is undefined at exact 0/1.
pub const BCE_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    Sum,
    Mean,
}

pub struct BceCtx<T: Elem> {
    pub pred: Var,
    pub target: Arc<ArrayD<T>>,
    pub reduction: Reduction,
}

impl<T: Elem> Tape<T> {
    /// `-sum(g*ln(p) + (1-g)*ln(1-p))` with p clamped to [eps, 1-eps];
    /// `Mean` divides by the element count. Targets must be exactly 0 or 1.
    pub fn bce(&mut self, pred: Var, target: &ArrayD<T>, reduction: Reduction) -> Result<Var, ShapeError> {
        if self.shape(pred) != target.shape() {
            return Err(ShapeError::Mismatch {
                context: "bce".into(),
                a: self.shape(pred).to_vec(),
                b: target.shape().to_vec(),
            });
        }
        for &g in target.iter() {
            if g != T::zero() && g != T::one() {
                return Err(ShapeError::NotBinary { context: "bce target".into(), value: g.to_f64() });
            }
        }
        let eps = T::from_f64(BCE_EPS);
        let hi = T::one() - eps;
        let mut acc = T::zero();
        for (&p, &g) in self.value(pred).iter().zip(target.iter()) {
            let pc = if p < eps {
                eps
            } else if p > hi {
                hi
            } else {
                p
            };
            acc = acc + g * pc.ln() + (T::one() - g) * (T::one() - pc).ln();
        }
        let mut loss = -acc;
        if reduction == Reduction::Mean {
            loss = loss / T::from_f64(target.len() as f64);
        }
        let target = Arc::new(target.clone());
        Ok(self.scalar_node(loss, Op::Bce(BceCtx { pred, target, reduction }), &[pred]))
    }
}

pub(crate) fn bce_backward<T: Elem>(tape: &Tape<T>, ctx: &BceCtx<T>, gy: &ArrayD<T>) -> ArrayD<T> {
    let gs = gy.iter().copied().next().unwrap();
    let eps = T::from_f64(BCE_EPS);
    let hi = T::one() - eps;
    let scale = match ctx.reduction {
        Reduction::Sum => gs,
        Reduction::Mean => gs / T::from_f64(ctx.target.len() as f64),
    };
    let pv = tape.value(ctx.pred);
    let mut dx = ArrayD::<T>::zeros(pv.raw_dim());
    for ((d, &p), &g) in dx.iter_mut().zip(pv.iter()).zip(ctx.target.iter()) {
        // Flat outside the clamp range.
        if p < eps || p > hi {
            *d = T::zero();
        } else {
            *d = scale * (p - g) / (p * (T::one() - p));
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use ndarray::{ArrayD, IxDyn};

    use super::Reduction;
    use crate::gradcheck::{central_diff_entry, grads_close};
    use crate::rngutil::{stream_rng, Purpose};
    use crate::tape::Tape;
    use crate::testsupport::rand_uniform;
    use rand::Rng;

    #[test]
    fn bce_sum_on_uniform_half_is_count_times_ln2() {
        let pred = ArrayD::from_elem(IxDyn(&[1, 1, 2, 2]), 0.5);
        let gt = ArrayD::from_shape_vec(IxDyn(&[1, 1, 2, 2]), vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let mut tape = Tape::<f64>::new();
        let pv = tape.leaf(pred, false);
        let loss = tape.bce(pv, &gt, Reduction::Sum).unwrap();
        let got = tape.scalar(loss);
        assert!((got - 4.0 * std::f64::consts::LN_2).abs() < 1e-9, "{got}");
    }

    #[test]
    fn bce_perfect_prediction_is_effectively_zero() {
        let gt = ArrayD::from_shape_vec(IxDyn(&[1, 1, 2, 2]), vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let mut tape = Tape::<f64>::new();
        let pv = tape.leaf(gt.clone(), false);
        let loss = tape.bce(pv, &gt, Reduction::Sum).unwrap();
        assert!(tape.scalar(loss) <= 4.0 * -(1.0f64 - 1e-7).ln() + 1e-12);
    }

    #[test]
    fn bce_mean_gradient_matches_finite_differences_within_1e6() {
        let mut rng = stream_rng(13, Purpose::Test, 0);
        let pred = rand_uniform(&mut rng, &[1, 1, 4, 4], 0.05, 0.95);
        let gt = {
            let mut g = ArrayD::zeros(IxDyn(&[1, 1, 4, 4]));
            for v in g.iter_mut() {
                *v = if rng.gen_bool(0.5) { 1.0 } else { 0.0 };
            }
            g
        };
        let mut tape = Tape::new();
        let pv = tape.leaf(pred.clone(), true);
        let loss = tape.bce(pv, &gt, Reduction::Mean).unwrap();
        let grads = tape.backward(loss);
        let gp = grads.get(pv).unwrap();
        for flat in 0..pred.len() {
            let num = central_diff_entry(&pred, flat, 1e-6, |pp| {
                let mut t = Tape::new();
                let v = t.leaf(pp.clone(), true);
                let l = t.bce(v, &gt, Reduction::Mean).unwrap();
                t.scalar(l)
            });
            let ana = gp.as_slice().unwrap()[flat];
            assert!((ana - num).abs() < 1e-6, "dpred[{flat}]: {ana} vs {num}");
            assert!(grads_close(ana, num, 1e-5, 1e-8));
        }
    }

    #[test]
    fn bce_rejects_non_binary_targets_and_shape_mismatch() {
        let pred = ArrayD::from_elem(IxDyn(&[1, 1, 2, 2]), 0.5);
        let bad = ArrayD::from_elem(IxDyn(&[1, 1, 2, 2]), 0.25);
        let mut tape = Tape::<f64>::new();
        let pv = tape.leaf(pred, false);
        assert!(tape.bce(pv, &bad, Reduction::Sum).is_err());
        let wrong_shape = ArrayD::zeros(IxDyn(&[1, 1, 2, 3]));
        assert!(tape.bce(pv, &wrong_shape, Reduction::Sum).is_err());
    }
}
