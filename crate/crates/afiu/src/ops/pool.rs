//! Max pooling with saved argmax indices for the backward pass.

use ndarray::{Array4, Ix4};

use super::conv::out_len;
use super::ShapeError;
use crate::elem::Elem;
use crate::tape::{Op, Tape, Var};

pub struct PoolCtx {
    pub x: Var,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    /// Flat (h*w) index of the chosen input cell, per output element.
    pub argmax: Vec<u32>,
}

impl<T: Elem> Tape<T> {
    pub fn max_pool2d(&mut self, x: Var, k: usize, stride: usize, pad: usize) -> Result<Var, ShapeError> {
        let (n, c, h, w) = self.dims4(x);
        let (oh, ow) = match (out_len(h, k, stride, pad, 1), out_len(w, k, stride, pad, 1)) {
            (Some(oh), Some(ow)) if oh > 0 && ow > 0 => (oh, ow),
            _ => {
                return Err(ShapeError::NotDivisible {
                    context: "max_pool2d output size".into(),
                    h,
                    w,
                    divisor: stride,
                })
            }
        };
        let xv = self.value(x).view().into_dimensionality::<Ix4>().unwrap();
        let mut out = Array4::<T>::zeros((n, c, oh, ow));
        let mut argmax = vec![u32::MAX; n * c * oh * ow];
        let mut flat = 0usize;
        for ni in 0..n {
            for ci in 0..c {
                let plane = xv.slice(ndarray::s![ni, ci, .., ..]);
                let ps = plane.to_slice().expect("standard layout");
                for ohi in 0..oh {
                    for owj in 0..ow {
                        let mut best = T::neg_infinity();
                        let mut best_idx = u32::MAX;
                        for ki in 0..k {
                            let ih = (ohi * stride + ki) as isize - pad as isize;
                            if ih < 0 || ih >= h as isize {
                                continue;
                            }
                            for kj in 0..k {
                                let iw = (owj * stride + kj) as isize - pad as isize;
                                if iw < 0 || iw >= w as isize {
                                    continue;
                                }
                                let idx = ih as usize * w + iw as usize;
                                let v = ps[idx];
                                if v > best {
                                    best = v;
                                    best_idx = idx as u32;
                                }
                            }
                        }
                        debug_assert_ne!(best_idx, u32::MAX, "window fully in padding");
                        out[[ni, ci, ohi, owj]] = best;
                        argmax[flat] = best_idx;
                        flat += 1;
                    }
                }
            }
        }
        Ok(self.push(out.into_dyn(), Op::MaxPool(PoolCtx { x, k, stride, pad, argmax }), &[x]))
    }
}

pub(crate) fn backward<T: Elem>(tape: &Tape<T>, ctx: &PoolCtx, gy: &ndarray::ArrayD<T>) -> ndarray::ArrayD<T> {
    let (n, c, h, w) = tape.dims4(ctx.x);
    let gyv = gy.view().into_dimensionality::<Ix4>().unwrap();
    let (oh, ow) = (gyv.shape()[2], gyv.shape()[3]);
    let mut dx = Array4::<T>::zeros((n, c, h, w));
    let mut flat = 0usize;
    for ni in 0..n {
        for ci in 0..c {
            let gp = gyv.slice(ndarray::s![ni, ci, .., ..]);
            let gs = gp.to_slice().expect("standard layout");
            let mut dp = dx.slice_mut(ndarray::s![ni, ci, .., ..]);
            let ds = dp.as_slice_mut().expect("standard layout");
            for &ge in gs.iter().take(oh * ow) {
                let idx = ctx.argmax[flat] as usize;
                ds[idx] = ds[idx] + ge;
                flat += 1;
            }
        }
    }
    dx.into_dyn()
}
