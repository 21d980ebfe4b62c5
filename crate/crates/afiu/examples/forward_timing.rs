//! Rough forward-pass timing for the standard profile.

use afiu::network::{build_model, AfiuConfig};
use afiu::rngutil::{stream_rng, Purpose};
use afiu::{Mode, Tape};
use ndarray::{ArrayD, IxDyn};
use rand::Rng;

fn main() {
    let (model, mut store) = build_model::<f32>(AfiuConfig::standard(), 1).unwrap();
    eprintln!("params: {} tensors, {} elements", store.len(), store.num_elements());
    let mut rng = stream_rng(1, Purpose::Test, 0);
    for &(n, s) in &[(1usize, 64usize), (1, 320), (3, 320)] {
        let mut img = ArrayD::<f32>::zeros(IxDyn(&[n, 3, s, s]));
        for v in img.iter_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        let t0 = std::time::Instant::now();
        let mut tape = Tape::inference();
        let iv = tape.leaf(img, false);
        let y = model.forward(&mut tape, &mut store, iv, Mode::Eval).unwrap();
        eprintln!("{n}x3x{s}x{s} -> {:?} in {:.2?}", tape.shape(y), t0.elapsed());
    }
}
