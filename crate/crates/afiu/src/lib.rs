//! Defocus blur detection with an adaptive feature-integration U-Net and a
//! salient-object-detection pretraining stage.
//!
//! The crate bundles the network blocks and full model, dataset ingestion
//! and a synthetic bokeh corpus generator, the training loop with the
//! two-stage transfer procedure, and the binary-segmentation evaluation
//! protocol (MAE, PR curves, F-measure). Everything runs on the CPU in
//! either f32 or f64 and is deterministic for a fixed seed.

pub mod backbone;
pub mod blocks;
pub mod checkpoint;
pub mod elem;
pub mod gradcheck;
pub mod layers;
pub mod network;
pub mod ops;
pub mod params;
pub mod rngutil;
pub mod tape;

pub use elem::Elem;
pub use layers::Mode;
pub use params::ParamStore;
pub use tape::{Grads, Tape, Var};

#[cfg(test)]
pub(crate) mod testsupport {
    use ndarray::{ArrayD, IxDyn};
    use rand::Rng;
    use rand_distr::StandardNormal;

    pub fn randn(rng: &mut impl Rng, shape: &[usize]) -> ArrayD<f64> {
        let mut a = ArrayD::zeros(IxDyn(shape));
        for v in a.iter_mut() {
            *v = rng.sample::<f64, _>(StandardNormal);
        }
        a
    }

    pub fn rand_uniform(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> ArrayD<f64> {
        let mut a = ArrayD::zeros(IxDyn(shape));
        for v in a.iter_mut() {
            *v = rng.gen_range(lo..hi);
        }
        a
    }
}
