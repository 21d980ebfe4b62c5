//! Plain (non-differentiable) image processing on (C, H, W) f32 planes:
//! resizing, Gaussian blur, color jitter, flips. Shares the resampling
//! tables with the differentiable ops so both paths use identical anchors.

use ndarray::Array3;

use crate::ops::resample::{bilinear_table, nearest_index};

/// ImageNet-convention per-channel normalization; documented here because
/// pretrained backbones expect it.
pub const NORM_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
pub const NORM_STD: [f32; 3] = [0.229, 0.224, 0.225];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResizeFilter {
    Bilinear,
    Nearest,
}

/// Resize every channel of a (C, H, W) array.
pub fn resize_chw(src: &Array3<f32>, out_h: usize, out_w: usize, filter: ResizeFilter) -> Array3<f32> {
    let (c, h, w) = src.dim();
    let mut out = Array3::<f32>::zeros((c, out_h, out_w));
    match filter {
        ResizeFilter::Bilinear => {
            let rows = bilinear_table::<f32>(h, out_h);
            let cols = bilinear_table::<f32>(w, out_w);
            let mut tmp = vec![0f32; out_h * w];
            for ci in 0..c {
                let plane = src.index_axis(ndarray::Axis(0), ci);
                let ps = plane.to_slice().expect("standard layout");
                for oi in 0..out_h {
                    let a = &ps[rows.i0[oi] * w..rows.i0[oi] * w + w];
                    let b = &ps[rows.i1[oi] * w..rows.i1[oi] * w + w];
                    let (w0, w1) = (rows.w0[oi], rows.w1[oi]);
                    let dst = &mut tmp[oi * w..(oi + 1) * w];
                    for j in 0..w {
                        dst[j] = w0 * a[j] + w1 * b[j];
                    }
                }
                let mut outp = out.index_axis_mut(ndarray::Axis(0), ci);
                let os = outp.as_slice_mut().expect("standard layout");
                for i in 0..out_h {
                    let row = &tmp[i * w..(i + 1) * w];
                    let dst = &mut os[i * out_w..(i + 1) * out_w];
                    for oj in 0..out_w {
                        dst[oj] = cols.w0[oj] * row[cols.i0[oj]] + cols.w1[oj] * row[cols.i1[oj]];
                    }
                }
            }
        }
        ResizeFilter::Nearest => {
            let rows = nearest_index(h, out_h);
            let cols = nearest_index(w, out_w);
            for ci in 0..c {
                let plane = src.index_axis(ndarray::Axis(0), ci);
                let ps = plane.to_slice().expect("standard layout");
                let mut outp = out.index_axis_mut(ndarray::Axis(0), ci);
                let os = outp.as_slice_mut().expect("standard layout");
                for oi in 0..out_h {
                    let row = &ps[rows[oi] * w..rows[oi] * w + w];
                    let dst = &mut os[oi * out_w..(oi + 1) * out_w];
                    for oj in 0..out_w {
                        dst[oj] = row[cols[oj]];
                    }
                }
            }
        }
    }
    out
}

/// Separable Gaussian blur with clamp-to-edge padding; kernel radius is
/// ceil(3 sigma).
pub fn gaussian_blur_chw(src: &Array3<f32>, sigma: f32) -> Array3<f32> {
    if sigma <= 0.0 {
        return src.clone();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel = Vec::with_capacity((2 * radius + 1) as usize);
    let s2 = 2.0 * sigma * sigma;
    for i in -radius..=radius {
        kernel.push((-(i * i) as f32 / s2).exp());
    }
    let norm: f32 = kernel.iter().sum();
    for k in kernel.iter_mut() {
        *k /= norm;
    }

    let (c, h, w) = src.dim();
    let mut tmp = Array3::<f32>::zeros((c, h, w));
    for ci in 0..c {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (ki, &kv) in kernel.iter().enumerate() {
                    let sx = (x as isize + ki as isize - radius).clamp(0, w as isize - 1) as usize;
                    acc += kv * src[[ci, y, sx]];
                }
                tmp[[ci, y, x]] = acc;
            }
        }
    }
    let mut out = Array3::<f32>::zeros((c, h, w));
    for ci in 0..c {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (ki, &kv) in kernel.iter().enumerate() {
                    let sy = (y as isize + ki as isize - radius).clamp(0, h as isize - 1) as usize;
                    acc += kv * tmp[[ci, sy, x]];
                }
                out[[ci, y, x]] = acc;
            }
        }
    }
    out
}

/// Rec. 601 luma.
pub fn luma(r: f32, g: f32, b: f32) -> f32 {
    0.299 * r + 0.587 * g + 0.114 * b
}

fn clamp01(v: f32) -> f32 {
    v.clamp(0.0, 1.0)
}

/// Multiply by a brightness factor, clamping to [0, 1].
pub fn adjust_brightness(img: &mut Array3<f32>, factor: f32) {
    img.mapv_inplace(|v| clamp01(v * factor));
}

/// Blend with the image's mean luma: factor 1 is the identity, 0 is a
/// flat gray image.
pub fn adjust_contrast(img: &mut Array3<f32>, factor: f32) {
    let (_, h, w) = img.dim();
    let mut mean = 0.0f32;
    for y in 0..h {
        for x in 0..w {
            mean += luma(img[[0, y, x]], img[[1, y, x]], img[[2, y, x]]);
        }
    }
    mean /= (h * w) as f32;
    img.mapv_inplace(|v| clamp01(mean + (v - mean) * factor));
}

/// Blend each pixel with its own luma: factor 1 is the identity, 0 is
/// grayscale.
pub fn adjust_saturation(img: &mut Array3<f32>, factor: f32) {
    let (_, h, w) = img.dim();
    for y in 0..h {
        for x in 0..w {
            let g = luma(img[[0, y, x]], img[[1, y, x]], img[[2, y, x]]);
            for c in 0..3 {
                img[[c, y, x]] = clamp01(g + (img[[c, y, x]] - g) * factor);
            }
        }
    }
}

/// Reverse the vertical (H) or horizontal (W) axis in place.
pub fn flip_chw(img: &mut Array3<f32>, vertical: bool) {
    let axis = if vertical { ndarray::Axis(1) } else { ndarray::Axis(2) };
    img.invert_axis(axis);
    // Re-materialize in standard layout; downstream kernels assume it.
    *img = img.as_standard_layout().to_owned();
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resize_matches_the_graph_op_anchors() {
        let src = Array3::from_shape_vec((1, 2, 2), vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let down = resize_chw(&src, 1, 1, ResizeFilter::Bilinear);
        assert_eq!(down[[0, 0, 0]], 0.5);
        let nn = resize_chw(&src, 1, 1, ResizeFilter::Nearest);
        assert_eq!(nn[[0, 0, 0]], 0.0);
    }

    #[test]
    fn blur_preserves_constants_and_smooths_impulses() {
        let mut src = Array3::from_elem((1, 9, 9), 0.25f32);
        let out = gaussian_blur_chw(&src, 1.5);
        assert!(out.iter().all(|v| (v - 0.25).abs() < 1e-5));
        src.fill(0.0);
        src[[0, 4, 4]] = 1.0;
        let out = gaussian_blur_chw(&src, 1.5);
        assert!(out[[0, 4, 4]] < 0.1);
        let total: f32 = out.iter().sum();
        assert!((total - 1.0).abs() < 1e-4);
    }

    #[test]
    fn jitter_with_unit_factors_is_the_identity() {
        let src = Array3::from_shape_fn((3, 4, 4), |(c, y, x)| (c + y + x) as f32 / 12.0);
        let mut img = src.clone();
        adjust_brightness(&mut img, 1.0);
        adjust_contrast(&mut img, 1.0);
        adjust_saturation(&mut img, 1.0);
        assert_eq!(img, src);
    }

    #[test]
    fn vertical_flip_reverses_rows() {
        let mut img = Array3::from_shape_vec((1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        flip_chw(&mut img, true);
        assert_eq!(img.as_slice().unwrap(), &[3.0, 4.0, 1.0, 2.0]);
    }
}
