//! 2-D convolution via im2col + GEMM.
//!
//! The im2col buffer is tiled over output rows so a single layer never
//! materializes more than ~16 MB of patch data at once.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, Array4, ArrayView2, ArrayView3, ArrayViewMut3, Ix1, Ix4};

use super::ShapeError;
use crate::elem::Elem;
use crate::tape::{Op, Tape, Var};

pub struct ConvCtx {
    pub x: Var,
    pub w: Var,
    pub b: Option<Var>,
    pub stride: usize,
    pub pad: usize,
    pub dilation: usize,
}

/// Target element count per im2col tile.
const TILE_ELEMS: usize = 1 << 22;

pub fn out_len(in_len: usize, k: usize, stride: usize, pad: usize, dilation: usize) -> Option<usize> {
    let span = dilation * (k - 1) + 1;
    let padded = in_len + 2 * pad;
    if padded < span {
        return None;
    }
    Some((padded - span) / stride + 1)
}

impl<T: Elem> Tape<T> {
    /// `x` is (N, Cin, H, W); `w` is (Cout, Cin, Kh, Kw); `b` is (Cout,).
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        dilation: usize,
    ) -> Result<Var, ShapeError> {
        let (n, cin, h, win) = self.dims4(x);
        let (cout, wcin, kh, kw) = self.dims4(w);
        if cin != wcin {
            return Err(ShapeError::ChannelMismatch {
                context: "conv2d input".into(),
                expected: wcin,
                got: cin,
            });
        }
        let (oh, ow) = match (out_len(h, kh, stride, pad, dilation), out_len(win, kw, stride, pad, dilation)) {
            (Some(oh), Some(ow)) if oh > 0 && ow > 0 => (oh, ow),
            _ => {
                return Err(ShapeError::NotDivisible {
                    context: "conv2d output size".into(),
                    h,
                    w: win,
                    divisor: stride,
                })
            }
        };

        let xv = self.value(x).view().into_dimensionality::<Ix4>().unwrap();
        let wv = self.value(w).view().into_dimensionality::<Ix4>().unwrap();
        let ckk = cin * kh * kw;
        let w_mat = wv.into_shape_with_order((cout, ckk)).unwrap();
        let bias = b.map(|bv| {
            self.value(bv)
                .view()
                .into_dimensionality::<Ix1>()
                .unwrap()
                .to_owned()
        });

        let mut out = Array4::<T>::zeros((n, cout, oh, ow));
        let geom = Geometry { cin, h, w: win, kh, kw, stride, pad, dilation, ow };

        if kh == 1 && kw == 1 && stride == 1 && pad == 0 {
            // Pointwise convolution: GEMM straight on the feature matrix.
            for ni in 0..n {
                let x_n = xv.index_axis(ndarray::Axis(0), ni);
                let x_mat = x_n.into_shape_with_order((cin, h * win)).unwrap();
                let mut o_n = out.index_axis_mut(ndarray::Axis(0), ni);
                let mut o_mat = o_n.view_mut().into_shape_with_order((cout, oh * ow)).unwrap();
                general_mat_mul(T::one(), &w_mat, &x_mat, T::zero(), &mut o_mat);
            }
        } else {
            let rows_per_tile = tile_rows(ckk, ow, oh);
            let mut col_buf = vec![T::zero(); ckk * rows_per_tile * ow];
            for ni in 0..n {
                let x_n = xv.index_axis(ndarray::Axis(0), ni);
                let mut o_n = out.index_axis_mut(ndarray::Axis(0), ni);
                let mut o_mat = o_n.view_mut().into_shape_with_order((cout, oh * ow)).unwrap();
                let mut row0 = 0;
                while row0 < oh {
                    let row1 = (row0 + rows_per_tile).min(oh);
                    let cols_in_tile = (row1 - row0) * ow;
                    let mut col_tile = ndarray::ArrayViewMut2::from_shape(
                        (ckk, cols_in_tile),
                        &mut col_buf[..ckk * cols_in_tile],
                    )
                    .unwrap();
                    im2col(&x_n, &geom, row0, row1, &mut col_tile);
                    let mut o_tile = o_mat.slice_mut(ndarray::s![.., row0 * ow..row1 * ow]);
                    general_mat_mul(T::one(), &w_mat, &col_tile.view(), T::zero(), &mut o_tile);
                    row0 = row1;
                }
            }
        }

        if let Some(bias) = &bias {
            for ni in 0..n {
                for co in 0..cout {
                    let bv = bias[co];
                    let mut plane = out.slice_mut(ndarray::s![ni, co, .., ..]);
                    plane.mapv_inplace(|v| v + bv);
                }
            }
        }

        let mut parents = vec![x, w];
        if let Some(bv) = b {
            parents.push(bv);
        }
        Ok(self.push(
            out.into_dyn(),
            Op::Conv2d(ConvCtx { x, w, b, stride, pad, dilation }),
            &parents,
        ))
    }
}

struct Geometry {
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    dilation: usize,
    ow: usize,
}

fn tile_rows(ckk: usize, ow: usize, oh: usize) -> usize {
    (TILE_ELEMS / (ckk * ow).max(1)).clamp(1, oh.max(1))
}

/// Valid output-column range [lo, hi) for a kernel column offset, plus the
/// input-column of the first valid output column.
fn col_bounds(geom: &Geometry, kj: usize) -> (usize, usize, isize) {
    let off = (kj * geom.dilation) as isize - geom.pad as isize;
    let lo = if off >= 0 {
        0
    } else {
        ((-off) as usize + geom.stride - 1) / geom.stride
    };
    let wi = geom.w as isize - off;
    let hi = if wi <= 0 {
        0
    } else {
        (((wi - 1) / geom.stride as isize) + 1).min(geom.ow as isize) as usize
    };
    let lo = lo.min(geom.ow);
    (lo, hi.max(lo), off)
}

fn im2col<T: Elem>(
    x: &ArrayView3<'_, T>,
    geom: &Geometry,
    row0: usize,
    row1: usize,
    col: &mut ndarray::ArrayViewMut2<'_, T>,
) {
    let xs = x.as_slice().expect("input must be standard layout");
    let tile_cols = (row1 - row0) * geom.ow;
    let cs = col.as_slice_mut().expect("col buffer is standard layout");
    for c in 0..geom.cin {
        for ki in 0..geom.kh {
            for kj in 0..geom.kw {
                let row = (c * geom.kh + ki) * geom.kw + kj;
                let (lo, hi, off) = col_bounds(geom, kj);
                for ohi in row0..row1 {
                    let dst_off = row * tile_cols + (ohi - row0) * geom.ow;
                    let dst = &mut cs[dst_off..dst_off + geom.ow];
                    let ih = (ohi * geom.stride + ki * geom.dilation) as isize - geom.pad as isize;
                    if ih < 0 || ih >= geom.h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src_off = (c * geom.h + ih as usize) * geom.w;
                    let src = &xs[src_off..src_off + geom.w];
                    dst[..lo].fill(T::zero());
                    dst[hi..].fill(T::zero());
                    if hi > lo {
                        let s0 = (lo as isize * geom.stride as isize + off) as usize;
                        if geom.stride == 1 {
                            dst[lo..hi].copy_from_slice(&src[s0..s0 + (hi - lo)]);
                        } else {
                            let mut si = s0;
                            for d in dst[lo..hi].iter_mut() {
                                *d = src[si];
                                si += geom.stride;
                            }
                        }
                    }
                }
            }
        }
    }
}

fn col2im_add<T: Elem>(
    dcol: &ArrayView2<'_, T>,
    geom: &Geometry,
    row0: usize,
    row1: usize,
    dx: &mut ArrayViewMut3<'_, T>,
) {
    let ds = dx.as_slice_mut().expect("grad buffer is standard layout");
    let tile_cols = (row1 - row0) * geom.ow;
    let cs = dcol.as_slice().expect("col buffer is standard layout");
    for c in 0..geom.cin {
        for ki in 0..geom.kh {
            for kj in 0..geom.kw {
                let row = (c * geom.kh + ki) * geom.kw + kj;
                let (lo, hi, off) = col_bounds(geom, kj);
                for ohi in row0..row1 {
                    let ih = (ohi * geom.stride + ki * geom.dilation) as isize - geom.pad as isize;
                    if ih < 0 || ih >= geom.h as isize {
                        continue;
                    }
                    let src_off = row * tile_cols + (ohi - row0) * geom.ow;
                    let src = &cs[src_off..src_off + geom.ow];
                    let dst_off = (c * geom.h + ih as usize) * geom.w;
                    let dst = &mut ds[dst_off..dst_off + geom.w];
                    if hi > lo {
                        let mut si = (lo as isize * geom.stride as isize + off) as usize;
                        for &v in src[lo..hi].iter() {
                            dst[si] = dst[si] + v;
                            si += geom.stride;
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn backward<T: Elem>(
    tape: &Tape<T>,
    ctx: &ConvCtx,
    gy: &ndarray::ArrayD<T>,
) -> (Option<ndarray::ArrayD<T>>, Option<ndarray::ArrayD<T>>, Option<ndarray::ArrayD<T>>) {
    let (n, cin, h, win) = tape.dims4(ctx.x);
    let (cout, _, kh, kw) = tape.dims4(ctx.w);
    let gyv = gy.view().into_dimensionality::<Ix4>().unwrap();
    let (_, _, oh, ow) = {
        let s = gyv.shape();
        (s[0], s[1], s[2], s[3])
    };
    let ckk = cin * kh * kw;
    let geom = Geometry {
        cin,
        h,
        w: win,
        kh,
        kw,
        stride: ctx.stride,
        pad: ctx.pad,
        dilation: ctx.dilation,
        ow,
    };

    let xv = tape.value(ctx.x).view().into_dimensionality::<Ix4>().unwrap();
    let wv = tape.value(ctx.w).view().into_dimensionality::<Ix4>().unwrap();
    let w_mat = wv.into_shape_with_order((cout, ckk)).unwrap();

    let need_dx = tape.needs_grad_of(ctx.x);
    let need_dw = tape.needs_grad_of(ctx.w);
    let need_db = ctx.b.map(|b| tape.needs_grad_of(b)).unwrap_or(false);

    let mut dx = if need_dx { Some(Array4::<T>::zeros((n, cin, h, win))) } else { None };
    let mut dw_mat = if need_dw { Some(Array2::<T>::zeros((cout, ckk))) } else { None };

    let pointwise = kh == 1 && kw == 1 && ctx.stride == 1 && ctx.pad == 0;
    let rows_per_tile = tile_rows(ckk, ow, oh);
    let mut col_buf = if need_dw && !pointwise {
        Some(vec![T::zero(); ckk * rows_per_tile * ow])
    } else {
        None
    };
    let mut dcol_buf = if need_dx && !pointwise {
        Some(vec![T::zero(); ckk * rows_per_tile * ow])
    } else {
        None
    };

    for ni in 0..n {
        let gy_n = gyv.index_axis(ndarray::Axis(0), ni);
        let gy_mat = gy_n.into_shape_with_order((cout, oh * ow)).unwrap();
        if pointwise {
            let x_n = xv.index_axis(ndarray::Axis(0), ni);
            let x_mat = x_n.into_shape_with_order((cin, h * win)).unwrap();
            if let Some(dw_mat) = dw_mat.as_mut() {
                general_mat_mul(T::one(), &gy_mat, &x_mat.t(), T::one(), dw_mat);
            }
            if let Some(dx) = dx.as_mut() {
                let mut dx_n = dx.index_axis_mut(ndarray::Axis(0), ni);
                let mut dx_mat = dx_n.view_mut().into_shape_with_order((cin, h * win)).unwrap();
                general_mat_mul(T::one(), &w_mat.t(), &gy_mat, T::one(), &mut dx_mat);
            }
            continue;
        }
        let x_n = xv.index_axis(ndarray::Axis(0), ni);
        let mut row0 = 0;
        while row0 < oh {
            let row1 = (row0 + rows_per_tile).min(oh);
            let cols_in_tile = (row1 - row0) * ow;
            let gy_tile = gy_mat.slice(ndarray::s![.., row0 * ow..row1 * ow]);
            if let (Some(buf), Some(dw_mat)) = (col_buf.as_mut(), dw_mat.as_mut()) {
                let mut col_tile = ndarray::ArrayViewMut2::from_shape(
                    (ckk, cols_in_tile),
                    &mut buf[..ckk * cols_in_tile],
                )
                .unwrap();
                im2col(&x_n, &geom, row0, row1, &mut col_tile);
                general_mat_mul(T::one(), &gy_tile, &col_tile.view().t(), T::one(), dw_mat);
            }
            if let (Some(buf), Some(dx)) = (dcol_buf.as_mut(), dx.as_mut()) {
                let mut dcol_tile = ndarray::ArrayViewMut2::from_shape(
                    (ckk, cols_in_tile),
                    &mut buf[..ckk * cols_in_tile],
                )
                .unwrap();
                general_mat_mul(T::one(), &w_mat.t(), &gy_tile, T::zero(), &mut dcol_tile);
                let mut dx_n = dx.index_axis_mut(ndarray::Axis(0), ni);
                col2im_add(&dcol_tile.view(), &geom, row0, row1, &mut dx_n);
            }
            row0 = row1;
        }
    }

    let db = if need_db {
        let mut db = ndarray::Array1::<T>::zeros(cout);
        for ni in 0..n {
            for co in 0..cout {
                let mut acc = T::zero();
                for &v in gyv.slice(ndarray::s![ni, co, .., ..]).iter() {
                    acc = acc + v;
                }
                db[co] = db[co] + acc;
            }
        }
        Some(db.into_dyn())
    } else {
        None
    };

    let dw = dw_mat.map(|m| m.into_shape_with_order((cout, cin, kh, kw)).unwrap().into_dyn());
    (dx.map(|a| a.into_dyn()), dw, db)
}

#[cfg(test)]
mod tests {
    use ndarray::ArrayD;

    use crate::gradcheck::{central_diff_entry, grads_close};
    use crate::rngutil::{stream_rng, Purpose};
    use crate::tape::Tape;
    use crate::testsupport::randn;

    fn eval(
        x: &ArrayD<f64>,
        w: &ArrayD<f64>,
        b: &ArrayD<f64>,
        proj: &ArrayD<f64>,
        stride: usize,
        pad: usize,
        dilation: usize,
    ) -> f64 {
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone(), true);
        let wv = tape.leaf(w.clone(), true);
        let bv = tape.leaf(b.clone(), true);
        let y = tape.conv2d(xv, wv, Some(bv), stride, pad, dilation).unwrap();
        let s = tape.dot_sum(y, proj.clone()).unwrap();
        tape.scalar(s)
    }

    #[test]
    fn conv2d_gradients_match_finite_differences() {
        let mut rng = stream_rng(7, Purpose::Test, 0);
        for &(k, stride, pad, dilation) in &[(3, 1, 1, 1), (3, 2, 1, 1), (3, 1, 2, 2), (1, 1, 0, 1), (1, 2, 0, 1), (7, 2, 3, 1)] {
            let (n, cin, cout, h, w) = (2, 3, 4, 8, 8);
            let x = randn(&mut rng, &[n, cin, h, w]);
            let wt = randn(&mut rng, &[cout, cin, k, k]);
            let b = randn(&mut rng, &[cout]);

            let mut tape = Tape::new();
            let xv = tape.leaf(x.clone(), true);
            let wv = tape.leaf(wt.clone(), true);
            let bv = tape.leaf(b.clone(), true);
            let y = tape.conv2d(xv, wv, Some(bv), stride, pad, dilation).unwrap();
            let proj = randn(&mut rng, tape.shape(y));
            let s = tape.dot_sum(y, proj.clone()).unwrap();
            let grads = tape.backward(s);

            let gx = grads.get(xv).unwrap();
            let gw = grads.get(wv).unwrap();
            let gb = grads.get(bv).unwrap();
            let h_fd = 1e-5;
            for flat in (0..x.len()).step_by(17) {
                let num = central_diff_entry(&x, flat, h_fd, |xp| eval(xp, &wt, &b, &proj, stride, pad, dilation));
                let ana = gx.as_slice().unwrap()[flat];
                assert!(grads_close(ana, num, 1e-6, 1e-9), "dx[{flat}] k{k}s{stride}: {ana} vs {num}");
            }
            for flat in (0..wt.len()).step_by(11) {
                let num = central_diff_entry(&wt, flat, h_fd, |wp| eval(&x, wp, &b, &proj, stride, pad, dilation));
                let ana = gw.as_slice().unwrap()[flat];
                assert!(grads_close(ana, num, 1e-6, 1e-9), "dw[{flat}] k{k}s{stride}: {ana} vs {num}");
            }
            for flat in 0..b.len() {
                let num = central_diff_entry(&b, flat, h_fd, |bp| eval(&x, &wt, bp, &proj, stride, pad, dilation));
                let ana = gb.as_slice().unwrap()[flat];
                assert!(grads_close(ana, num, 1e-6, 1e-9), "db[{flat}]: {ana} vs {num}");
            }
        }
    }

    #[test]
    fn conv2d_rejects_channel_mismatch() {
        let mut rng = stream_rng(7, Purpose::Test, 1);
        let x = randn(&mut rng, &[1, 3, 4, 4]);
        let wt = randn(&mut rng, &[2, 4, 3, 3]);
        let mut tape = Tape::<f64>::new();
        let xv = tape.leaf(x, false);
        let wv = tape.leaf(wt, false);
        assert!(tape.conv2d(xv, wv, None, 1, 1, 1).is_err());
    }
}
