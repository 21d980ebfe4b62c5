//! Per-channel batch normalization over the (N, H, W) axes.

use ndarray::{Array1, Array4, Ix1, Ix4};

use super::ShapeError;
use crate::elem::Elem;
use crate::tape::{Op, Tape, Var};

pub struct BnCtx<T: Elem> {
    pub x: Var,
    pub gamma: Var,
    pub beta: Var,
    pub mean: Array1<T>,
    pub invstd: Array1<T>,
    pub train: bool,
}

/// Batch statistics of a training-mode forward pass, used by the layer to
/// update its running estimates. `var_unbiased` carries the n/(n-1)
/// correction (biased value when only one element per channel).
pub struct BatchStats<T: Elem> {
    pub mean: Array1<T>,
    pub var_unbiased: Array1<T>,
}

impl<T: Elem> Tape<T> {
    /// Training-mode batch norm: normalizes with the current batch
    /// statistics and returns them for running-average updates.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, BatchStats<T>), ShapeError> {
        let (n, c, h, w) = self.dims4(x);
        check_affine(self, x, gamma, beta)?;
        let m = n * h * w;
        let mf = T::from_f64(m as f64);
        let xv = self.value(x).view().into_dimensionality::<Ix4>().unwrap();

        let mut mean = Array1::<T>::zeros(c);
        for ni in 0..n {
            for ci in 0..c {
                let mut acc = T::zero();
                for &v in xv.slice(ndarray::s![ni, ci, .., ..]).iter() {
                    acc = acc + v;
                }
                mean[ci] = mean[ci] + acc;
            }
        }
        mean.mapv_inplace(|v| v / mf);

        let mut var = Array1::<T>::zeros(c);
        for ni in 0..n {
            for ci in 0..c {
                let mu = mean[ci];
                let mut acc = T::zero();
                for &v in xv.slice(ndarray::s![ni, ci, .., ..]).iter() {
                    let d = v - mu;
                    acc = acc + d * d;
                }
                var[ci] = var[ci] + acc;
            }
        }
        var.mapv_inplace(|v| v / mf);

        let epst = T::from_f64(eps);
        let invstd = var.mapv(|v| T::one() / (v + epst).sqrt());

        let y = affine(self, x, &mean, &invstd, gamma, beta);
        let corr = if m > 1 { T::from_f64(m as f64 / (m as f64 - 1.0)) } else { T::one() };
        let stats = BatchStats { mean: mean.clone(), var_unbiased: var.mapv(|v| v * corr) };
        let out = self.push(
            y.into_dyn(),
            Op::BatchNorm(BnCtx { x, gamma, beta, mean, invstd, train: true }),
            &[x, gamma, beta],
        );
        Ok((out, stats))
    }

    /// Inference-mode batch norm using stored running statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &Array1<T>,
        running_var: &Array1<T>,
        eps: f64,
    ) -> Result<Var, ShapeError> {
        check_affine(self, x, gamma, beta)?;
        let epst = T::from_f64(eps);
        let invstd = running_var.mapv(|v| T::one() / (v + epst).sqrt());
        let y = affine(self, x, running_mean, &invstd, gamma, beta);
        Ok(self.push(
            y.into_dyn(),
            Op::BatchNorm(BnCtx {
                x,
                gamma,
                beta,
                mean: running_mean.clone(),
                invstd,
                train: false,
            }),
            &[x, gamma, beta],
        ))
    }
}

fn check_affine<T: Elem>(tape: &Tape<T>, x: Var, gamma: Var, beta: Var) -> Result<(), ShapeError> {
    let c = tape.shape(x)[1];
    for (name, v) in [("gamma", gamma), ("beta", beta)] {
        let s = tape.shape(v);
        if s.len() != 1 || s[0] != c {
            return Err(ShapeError::ChannelMismatch {
                context: format!("batch_norm {name}"),
                expected: c,
                got: s.first().copied().unwrap_or(0),
            });
        }
    }
    Ok(())
}

fn affine<T: Elem>(
    tape: &Tape<T>,
    x: Var,
    mean: &Array1<T>,
    invstd: &Array1<T>,
    gamma: Var,
    beta: Var,
) -> Array4<T> {
    let (n, c, h, w) = tape.dims4(x);
    let xv = tape.value(x).view().into_dimensionality::<Ix4>().unwrap();
    let gv = tape.value(gamma).view().into_dimensionality::<Ix1>().unwrap();
    let bv = tape.value(beta).view().into_dimensionality::<Ix1>().unwrap();
    let mut y = Array4::<T>::zeros((n, c, h, w));
    for ni in 0..n {
        for ci in 0..c {
            let scale = gv[ci] * invstd[ci];
            let shift = bv[ci] - mean[ci] * scale;
            let xp = xv.slice(ndarray::s![ni, ci, .., ..]);
            let mut yp = y.slice_mut(ndarray::s![ni, ci, .., ..]);
            yp.zip_mut_with(&xp, |o, &v| *o = v * scale + shift);
        }
    }
    y
}

pub(crate) fn backward<T: Elem>(
    tape: &Tape<T>,
    ctx: &BnCtx<T>,
    gy: &ndarray::ArrayD<T>,
) -> (Option<ndarray::ArrayD<T>>, Option<ndarray::ArrayD<T>>, Option<ndarray::ArrayD<T>>) {
    let (n, c, h, w) = tape.dims4(ctx.x);
    let m = T::from_f64((n * h * w) as f64);
    let xv = tape.value(ctx.x).view().into_dimensionality::<Ix4>().unwrap();
    let gv = tape.value(ctx.gamma).view().into_dimensionality::<Ix1>().unwrap();
    let gyv = gy.view().into_dimensionality::<Ix4>().unwrap();

    // Per-channel sums: s1 = sum(gy), s2 = sum(gy * xhat).
    let mut s1 = Array1::<T>::zeros(c);
    let mut s2 = Array1::<T>::zeros(c);
    for ni in 0..n {
        for ci in 0..c {
            let mu = ctx.mean[ci];
            let istd = ctx.invstd[ci];
            let xp = xv.slice(ndarray::s![ni, ci, .., ..]);
            let gp = gyv.slice(ndarray::s![ni, ci, .., ..]);
            let mut a1 = T::zero();
            let mut a2 = T::zero();
            for (&xe, &ge) in xp.iter().zip(gp.iter()) {
                a1 = a1 + ge;
                a2 = a2 + ge * (xe - mu) * istd;
            }
            s1[ci] = s1[ci] + a1;
            s2[ci] = s2[ci] + a2;
        }
    }

    let need_dx = tape.needs_grad_of(ctx.x);
    let dx = if need_dx {
        let mut dx = Array4::<T>::zeros((n, c, h, w));
        for ni in 0..n {
            for ci in 0..c {
                let mu = ctx.mean[ci];
                let istd = ctx.invstd[ci];
                let scale = gv[ci] * istd;
                let xp = xv.slice(ndarray::s![ni, ci, .., ..]);
                let gp = gyv.slice(ndarray::s![ni, ci, .., ..]);
                let mut dp = dx.slice_mut(ndarray::s![ni, ci, .., ..]);
                if ctx.train {
                    let c1 = s1[ci] / m;
                    let c2 = s2[ci] / m;
                    for ((de, &xe), &ge) in dp.iter_mut().zip(xp.iter()).zip(gp.iter()) {
                        let xhat = (xe - mu) * istd;
                        *de = scale * (ge - c1 - xhat * c2);
                    }
                } else {
                    for (de, &ge) in dp.iter_mut().zip(gp.iter()) {
                        *de = scale * ge;
                    }
                }
            }
        }
        Some(dx.into_dyn())
    } else {
        None
    };

    let dgamma = tape.needs_grad_of(ctx.gamma).then(|| s2.into_dyn());
    let dbeta = tape.needs_grad_of(ctx.beta).then(|| s1.into_dyn());
    (dx, dgamma, dbeta)
}

#[cfg(test)]
mod tests {
    use ndarray::ArrayD;

    use crate::gradcheck::{central_diff_entry, grads_close};
    use crate::rngutil::{stream_rng, Purpose};
    use crate::tape::Tape;
    use crate::testsupport::randn;

    fn eval(x: &ArrayD<f64>, gamma: &ArrayD<f64>, beta: &ArrayD<f64>, proj: &ArrayD<f64>) -> f64 {
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone(), true);
        let gv = tape.leaf(gamma.clone(), true);
        let bv = tape.leaf(beta.clone(), true);
        let (y, _) = tape.batch_norm_train(xv, gv, bv, 1e-5).unwrap();
        let s = tape.dot_sum(y, proj.clone()).unwrap();
        tape.scalar(s)
    }

    #[test]
    fn batch_norm_train_gradients_match_finite_differences() {
        let mut rng = stream_rng(9, Purpose::Test, 0);
        let x = randn(&mut rng, &[2, 3, 5, 4]);
        let gamma = randn(&mut rng, &[3]).mapv(|v| 1.0 + 0.1 * v);
        let beta = randn(&mut rng, &[3]);

        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone(), true);
        let gv = tape.leaf(gamma.clone(), true);
        let bv = tape.leaf(beta.clone(), true);
        let (y, _) = tape.batch_norm_train(xv, gv, bv, 1e-5).unwrap();
        let proj = randn(&mut rng, tape.shape(y));
        let s = tape.dot_sum(y, proj.clone()).unwrap();
        let grads = tape.backward(s);

        let h = 1e-6;
        let gx = grads.get(xv).unwrap();
        for flat in (0..x.len()).step_by(7) {
            let num = central_diff_entry(&x, flat, h, |xp| eval(xp, &gamma, &beta, &proj));
            let ana = gx.as_slice().unwrap()[flat];
            assert!(grads_close(ana, num, 1e-4, 1e-8), "dx[{flat}]: {ana} vs {num}");
        }
        let gg = grads.get(gv).unwrap();
        for flat in 0..gamma.len() {
            let num = central_diff_entry(&gamma, flat, h, |gp| eval(&x, gp, &beta, &proj));
            let ana = gg.as_slice().unwrap()[flat];
            assert!(grads_close(ana, num, 1e-5, 1e-8), "dgamma[{flat}]: {ana} vs {num}");
        }
        let gb = grads.get(bv).unwrap();
        for flat in 0..beta.len() {
            let num = central_diff_entry(&beta, flat, h, |bp| eval(&x, &gamma, bp, &proj));
            let ana = gb.as_slice().unwrap()[flat];
            assert!(grads_close(ana, num, 1e-5, 1e-8), "dbeta[{flat}]: {ana} vs {num}");
        }
    }

    #[test]
    fn eval_mode_uses_running_statistics() {
        let mut rng = stream_rng(9, Purpose::Test, 1);
        let x = randn(&mut rng, &[1, 2, 3, 3]);
        let rm = ndarray::Array1::from(vec![0.5, -0.25]);
        let rv = ndarray::Array1::from(vec![4.0, 0.25]);
        let mut tape = Tape::<f64>::new();
        let xv = tape.leaf(x.clone(), false);
        let gv = tape.leaf(ArrayD::from_elem(ndarray::IxDyn(&[2]), 1.0), false);
        let bv = tape.leaf(ArrayD::zeros(ndarray::IxDyn(&[2])), false);
        let y = tape.batch_norm_eval(xv, gv, bv, &rm, &rv, 0.0).unwrap();
        let got = tape.value(y)[[0, 0, 0, 0]];
        let want = (x[[0, 0, 0, 0]] - 0.5) / 2.0;
        assert!((got - want).abs() < 1e-12);
    }
}
