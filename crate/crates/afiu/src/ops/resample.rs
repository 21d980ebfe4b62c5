//! Differentiable spatial resampling.
//!
//! Bilinear uses the corner-aligned-off convention (source coordinate
//! `(i + 0.5) * in/out - 0.5`), applied separably along rows then columns.
//! Nearest maps output index `i` to source index `floor(i * in / out)`,
//! which anchors exact-factor downsampling at the top-left cell.

use ndarray::{Array4, Ix4};

use crate::elem::Elem;
use crate::tape::{Op, Tape, Var};

/// Per-axis linear interpolation table: out index -> two source indices
/// with weights.
pub struct LinTable<T: Elem> {
    pub i0: Vec<usize>,
    pub i1: Vec<usize>,
    pub w0: Vec<T>,
    pub w1: Vec<T>,
    pub in_len: usize,
}

pub struct NearTable {
    pub rows: Vec<usize>,
    pub cols: Vec<usize>,
    pub in_hw: (usize, usize),
}

pub fn bilinear_table<T: Elem>(in_len: usize, out_len: usize) -> LinTable<T> {
    let mut t = LinTable {
        i0: Vec::with_capacity(out_len),
        i1: Vec::with_capacity(out_len),
        w0: Vec::with_capacity(out_len),
        w1: Vec::with_capacity(out_len),
        in_len,
    };
    let scale = in_len as f64 / out_len as f64;
    for i in 0..out_len {
        let src = (i as f64 + 0.5) * scale - 0.5;
        if src <= 0.0 || in_len == 1 {
            t.i0.push(0);
            t.i1.push(0);
            t.w0.push(T::one());
            t.w1.push(T::zero());
        } else if src >= (in_len - 1) as f64 {
            t.i0.push(in_len - 1);
            t.i1.push(in_len - 1);
            t.w0.push(T::one());
            t.w1.push(T::zero());
        } else {
            let i0 = src.floor() as usize;
            let f = src - i0 as f64;
            t.i0.push(i0);
            t.i1.push(i0 + 1);
            t.w0.push(T::from_f64(1.0 - f));
            t.w1.push(T::from_f64(f));
        }
    }
    t
}

pub fn nearest_index(in_len: usize, out_len: usize) -> Vec<usize> {
    (0..out_len).map(|i| (i * in_len / out_len).min(in_len - 1)).collect()
}

impl<T: Elem> Tape<T> {
    pub fn resize_bilinear(&mut self, x: Var, out_h: usize, out_w: usize) -> Var {
        let (n, c, h, w) = self.dims4(x);
        let rows = bilinear_table::<T>(h, out_h);
        let cols = bilinear_table::<T>(w, out_w);
        let xv = self.value(x).view().into_dimensionality::<Ix4>().unwrap();

        // Row pass to (n, c, out_h, w), then column pass to (n, c, out_h, out_w).
        let mut tmp = Array4::<T>::zeros((n, c, out_h, w));
        for ni in 0..n {
            for ci in 0..c {
                let src = xv.slice(ndarray::s![ni, ci, .., ..]);
                let ss = src.to_slice().expect("standard layout");
                let mut dst = tmp.slice_mut(ndarray::s![ni, ci, .., ..]);
                let ds = dst.as_slice_mut().expect("standard layout");
                for oi in 0..out_h {
                    let (r0, r1) = (rows.i0[oi], rows.i1[oi]);
                    let (w0, w1) = (rows.w0[oi], rows.w1[oi]);
                    let a = &ss[r0 * w..(r0 + 1) * w];
                    let b = &ss[r1 * w..(r1 + 1) * w];
                    let out_row = &mut ds[oi * w..(oi + 1) * w];
                    for j in 0..w {
                        out_row[j] = w0 * a[j] + w1 * b[j];
                    }
                }
            }
        }
        let mut out = Array4::<T>::zeros((n, c, out_h, out_w));
        for ni in 0..n {
            for ci in 0..c {
                let src = tmp.slice(ndarray::s![ni, ci, .., ..]);
                let ss = src.to_slice().expect("standard layout");
                let mut dst = out.slice_mut(ndarray::s![ni, ci, .., ..]);
                let ds = dst.as_slice_mut().expect("standard layout");
                for i in 0..out_h {
                    let in_row = &ss[i * w..(i + 1) * w];
                    let out_row = &mut ds[i * out_w..(i + 1) * out_w];
                    for oj in 0..out_w {
                        out_row[oj] =
                            cols.w0[oj] * in_row[cols.i0[oj]] + cols.w1[oj] * in_row[cols.i1[oj]];
                    }
                }
            }
        }
        self.push(out.into_dyn(), Op::Bilinear { x, rows, cols }, &[x])
    }

    pub fn resize_nearest(&mut self, x: Var, out_h: usize, out_w: usize) -> Var {
        let (n, c, h, w) = self.dims4(x);
        let table = NearTable {
            rows: nearest_index(h, out_h),
            cols: nearest_index(w, out_w),
            in_hw: (h, w),
        };
        let xv = self.value(x).view().into_dimensionality::<Ix4>().unwrap();
        let mut out = Array4::<T>::zeros((n, c, out_h, out_w));
        for ni in 0..n {
            for ci in 0..c {
                let src = xv.slice(ndarray::s![ni, ci, .., ..]);
                let ss = src.to_slice().expect("standard layout");
                let mut dst = out.slice_mut(ndarray::s![ni, ci, .., ..]);
                let ds = dst.as_slice_mut().expect("standard layout");
                for oi in 0..out_h {
                    let in_row = &ss[table.rows[oi] * w..(table.rows[oi] + 1) * w];
                    let out_row = &mut ds[oi * out_w..(oi + 1) * out_w];
                    for oj in 0..out_w {
                        out_row[oj] = in_row[table.cols[oj]];
                    }
                }
            }
        }
        self.push(out.into_dyn(), Op::Nearest { x, table }, &[x])
    }
}

pub(crate) fn bilinear_backward<T: Elem>(
    tape: &Tape<T>,
    x: Var,
    rows: &LinTable<T>,
    cols: &LinTable<T>,
    gy: &ndarray::ArrayD<T>,
) -> ndarray::ArrayD<T> {
    let (n, c, h, w) = tape.dims4(x);
    let gyv = gy.view().into_dimensionality::<Ix4>().unwrap();
    let (out_h, out_w) = (gyv.shape()[2], gyv.shape()[3]);

    // Transpose of the column pass: (n, c, out_h, out_w) -> (n, c, out_h, w).
    let mut dtmp = Array4::<T>::zeros((n, c, out_h, w));
    for ni in 0..n {
        for ci in 0..c {
            let gsrc = gyv.slice(ndarray::s![ni, ci, .., ..]);
            let gs = gsrc.to_slice().expect("standard layout");
            let mut dst = dtmp.slice_mut(ndarray::s![ni, ci, .., ..]);
            let ds = dst.as_slice_mut().expect("standard layout");
            for i in 0..out_h {
                let g_row = &gs[i * out_w..(i + 1) * out_w];
                let d_row = &mut ds[i * w..(i + 1) * w];
                for oj in 0..out_w {
                    let ge = g_row[oj];
                    d_row[cols.i0[oj]] = d_row[cols.i0[oj]] + cols.w0[oj] * ge;
                    d_row[cols.i1[oj]] = d_row[cols.i1[oj]] + cols.w1[oj] * ge;
                }
            }
        }
    }
    // Transpose of the row pass: (n, c, out_h, w) -> (n, c, h, w).
    let mut dx = Array4::<T>::zeros((n, c, h, w));
    for ni in 0..n {
        for ci in 0..c {
            let gsrc = dtmp.slice(ndarray::s![ni, ci, .., ..]);
            let gs = gsrc.to_slice().expect("standard layout");
            let mut dst = dx.slice_mut(ndarray::s![ni, ci, .., ..]);
            let ds = dst.as_slice_mut().expect("standard layout");
            for oi in 0..out_h {
                let g_row = &gs[oi * w..(oi + 1) * w];
                let (r0, r1) = (rows.i0[oi], rows.i1[oi]);
                let (w0, w1) = (rows.w0[oi], rows.w1[oi]);
                {
                    let d0 = &mut ds[r0 * w..(r0 + 1) * w];
                    for j in 0..w {
                        d0[j] = d0[j] + w0 * g_row[j];
                    }
                }
                let d1 = &mut ds[r1 * w..(r1 + 1) * w];
                for j in 0..w {
                    d1[j] = d1[j] + w1 * g_row[j];
                }
            }
        }
    }
    dx.into_dyn()
}

pub(crate) fn nearest_backward<T: Elem>(
    tape: &Tape<T>,
    x: Var,
    table: &NearTable,
    gy: &ndarray::ArrayD<T>,
) -> ndarray::ArrayD<T> {
    let (n, c, h, w) = tape.dims4(x);
    let gyv = gy.view().into_dimensionality::<Ix4>().unwrap();
    let (out_h, out_w) = (gyv.shape()[2], gyv.shape()[3]);
    let mut dx = Array4::<T>::zeros((n, c, h, w));
    for ni in 0..n {
        for ci in 0..c {
            let gsrc = gyv.slice(ndarray::s![ni, ci, .., ..]);
            let gs = gsrc.to_slice().expect("standard layout");
            let mut dst = dx.slice_mut(ndarray::s![ni, ci, .., ..]);
            let ds = dst.as_slice_mut().expect("standard layout");
            for oi in 0..out_h {
                let g_row = &gs[oi * out_w..(oi + 1) * out_w];
                let d_row = &mut ds[table.rows[oi] * w..(table.rows[oi] + 1) * w];
                for oj in 0..out_w {
                    d_row[table.cols[oj]] = d_row[table.cols[oj]] + g_row[oj];
                }
            }
        }
    }
    dx.into_dyn()
}
