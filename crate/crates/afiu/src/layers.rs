//! Parameterized layers: convolution and batch norm, plus the
//! conv + batch-norm + relu unit the blocks are assembled from.

use ndarray::{Array1, ArrayD, IxDyn};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::elem::Elem;
use crate::ops::ShapeError;
use crate::params::ParamStore;
use crate::tape::{Tape, Var};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Fan-in-scaled normal initialization for convolution weights.
fn he_normal<T: Elem, R: Rng>(rng: &mut R, shape: &[usize]) -> ArrayD<T> {
    let fan_in: usize = shape[1..].iter().product();
    let std = (2.0 / fan_in as f64).sqrt();
    let mut out = ArrayD::<T>::zeros(IxDyn(shape));
    for v in out.iter_mut() {
        let z: f64 = rng.sample(StandardNormal);
        *v = T::from_f64(z * std);
    }
    out
}

pub struct Conv2d {
    pub weight: String,
    pub bias: Option<String>,
    pub stride: usize,
    pub pad: usize,
    pub dilation: usize,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Elem, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        dilation: usize,
        bias: bool,
    ) -> Self {
        let weight = format!("{name}.weight");
        store.register(&weight, he_normal(rng, &[out_channels, in_channels, kernel, kernel]), true);
        let bias = bias.then(|| {
            let b = format!("{name}.bias");
            store.register(&b, ArrayD::zeros(IxDyn(&[out_channels])), true);
            b
        });
        Conv2d { weight, bias, stride, pad, dilation, in_channels, out_channels }
    }

    pub fn forward<T: Elem>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
    ) -> Result<Var, ShapeError> {
        let w = tape.param(store, &self.weight);
        let b = self.bias.as_ref().map(|n| tape.param(store, n));
        tape.conv2d(x, w, b, self.stride, self.pad, self.dilation)
    }
}

pub struct BatchNorm2d {
    pub gamma: String,
    pub beta: String,
    pub running_mean: String,
    pub running_var: String,
}

impl BatchNorm2d {
    pub fn new<T: Elem>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        let gamma = format!("{name}.gamma");
        let beta = format!("{name}.beta");
        let running_mean = format!("{name}.running_mean");
        let running_var = format!("{name}.running_var");
        store.register(&gamma, ArrayD::from_elem(IxDyn(&[channels]), T::one()), true);
        store.register(&beta, ArrayD::zeros(IxDyn(&[channels])), true);
        store.register(&running_mean, ArrayD::zeros(IxDyn(&[channels])), false);
        store.register(&running_var, ArrayD::from_elem(IxDyn(&[channels]), T::one()), false);
        BatchNorm2d { gamma, beta, running_mean, running_var }
    }

    pub fn forward<T: Elem>(
        &self,
        tape: &mut Tape<T>,
        store: &mut ParamStore<T>,
        x: Var,
        mode: Mode,
    ) -> Result<Var, ShapeError> {
        let gamma = tape.param(store, &self.gamma);
        let beta = tape.param(store, &self.beta);
        match mode {
            Mode::Train => {
                let (y, stats) = tape.batch_norm_train(x, gamma, beta, BN_EPS)?;
                let mom = T::from_f64(BN_MOMENTUM);
                let keep = T::one() - mom;
                store.update(&self.running_mean, |rm| {
                    for (v, &m) in rm.iter_mut().zip(stats.mean.iter()) {
                        *v = *v * keep + m * mom;
                    }
                });
                store.update(&self.running_var, |rv| {
                    for (v, &s) in rv.iter_mut().zip(stats.var_unbiased.iter()) {
                        *v = *v * keep + s * mom;
                    }
                });
                Ok(y)
            }
            Mode::Eval => {
                let rm: Array1<T> = store.vector(&self.running_mean);
                let rv: Array1<T> = store.vector(&self.running_var);
                tape.batch_norm_eval(x, gamma, beta, &rm, &rv, BN_EPS)
            }
        }
    }
}

/// 3x3 (or arbitrary) convolution, batch norm, rectifier.
pub struct ConvBnRelu {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
}

impl ConvBnRelu {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Elem, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        dilation: usize,
    ) -> Self {
        let conv = Conv2d::new(
            store,
            rng,
            &format!("{name}.conv"),
            in_channels,
            out_channels,
            kernel,
            stride,
            pad,
            dilation,
            false,
        );
        let bn = BatchNorm2d::new(store, &format!("{name}.bn"), out_channels);
        ConvBnRelu { conv, bn }
    }

    pub fn forward<T: Elem>(
        &self,
        tape: &mut Tape<T>,
        store: &mut ParamStore<T>,
        x: Var,
        mode: Mode,
    ) -> Result<Var, ShapeError> {
        let y = self.conv.forward(tape, store, x)?;
        let y = self.bn.forward(tape, store, y, mode)?;
        Ok(tape.relu(y))
    }
}
