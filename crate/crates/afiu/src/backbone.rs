//! Width-scalable 50-layer residual backbone producing the five-level
//! feature pyramid E1..E5 at strides 2, 4, 8, 16, 32.
//!
//! At the default width (64) the levels carry 64 / 256 / 512 / 1024 / 2048
//! channels with bottleneck counts [3, 4, 6, 3]. The tiny profile shrinks
//! the width and block counts but keeps the stride/expansion contract.

use rand::Rng;

use crate::elem::Elem;
use crate::layers::{BatchNorm2d, Conv2d, Mode};
use crate::ops::ShapeError;
use crate::params::ParamStore;
use crate::tape::{Tape, Var};

const EXPANSION: usize = 4;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BackboneConfig {
    /// Stem width; level widths follow as base * [1, 4, 8, 16, 32].
    pub base_width: usize,
    /// Bottleneck blocks per stage.
    pub blocks: [usize; 4],
}

impl BackboneConfig {
    pub fn standard() -> Self {
        BackboneConfig { base_width: 64, blocks: [3, 4, 6, 3] }
    }

    pub fn tiny() -> Self {
        BackboneConfig { base_width: 8, blocks: [1, 1, 1, 1] }
    }

    /// Channel widths of E1..E5.
    pub fn level_widths(&self) -> [usize; 5] {
        let w = self.base_width;
        [w, 4 * w, 8 * w, 16 * w, 32 * w]
    }
}

struct Bottleneck {
    conv1: Conv2d,
    bn1: BatchNorm2d,
    conv2: Conv2d,
    bn2: BatchNorm2d,
    conv3: Conv2d,
    bn3: BatchNorm2d,
    shortcut: Option<(Conv2d, BatchNorm2d)>,
}

impl Bottleneck {
    fn new<T: Elem, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        cin: usize,
        mid: usize,
        stride: usize,
    ) -> Self {
        let cout = mid * EXPANSION;
        let conv1 = Conv2d::new(store, rng, &format!("{name}.conv1"), cin, mid, 1, 1, 0, 1, false);
        let bn1 = BatchNorm2d::new(store, &format!("{name}.bn1"), mid);
        let conv2 = Conv2d::new(store, rng, &format!("{name}.conv2"), mid, mid, 3, stride, 1, 1, false);
        let bn2 = BatchNorm2d::new(store, &format!("{name}.bn2"), mid);
        let conv3 = Conv2d::new(store, rng, &format!("{name}.conv3"), mid, cout, 1, 1, 0, 1, false);
        let bn3 = BatchNorm2d::new(store, &format!("{name}.bn3"), cout);
        let shortcut = (stride != 1 || cin != cout).then(|| {
            let c = Conv2d::new(
                store,
                rng,
                &format!("{name}.shortcut.conv"),
                cin,
                cout,
                1,
                stride,
                0,
                1,
                false,
            );
            let b = BatchNorm2d::new(store, &format!("{name}.shortcut.bn"), cout);
            (c, b)
        });
        Bottleneck { conv1, bn1, conv2, bn2, conv3, bn3, shortcut }
    }

    fn forward<T: Elem>(
        &self,
        tape: &mut Tape<T>,
        store: &mut ParamStore<T>,
        x: Var,
        mode: Mode,
    ) -> Result<Var, ShapeError> {
        let y = self.conv1.forward(tape, store, x)?;
        let y = self.bn1.forward(tape, store, y, mode)?;
        let y = tape.relu(y);
        let y = self.conv2.forward(tape, store, y)?;
        let y = self.bn2.forward(tape, store, y, mode)?;
        let y = tape.relu(y);
        let y = self.conv3.forward(tape, store, y)?;
        let y = self.bn3.forward(tape, store, y, mode)?;
        let skip = match &self.shortcut {
            Some((conv, bn)) => {
                let s = conv.forward(tape, store, x)?;
                bn.forward(tape, store, s, mode)?
            }
            None => x,
        };
        let y = tape.add(y, skip)?;
        Ok(tape.relu(y))
    }
}

pub struct Backbone {
    pub config: BackboneConfig,
    stem_conv: Conv2d,
    stem_bn: BatchNorm2d,
    stages: Vec<Vec<Bottleneck>>,
}

impl Backbone {
    pub fn new<T: Elem, R: Rng>(store: &mut ParamStore<T>, rng: &mut R, config: BackboneConfig) -> Self {
        let w = config.base_width;
        let stem_conv = Conv2d::new(store, rng, "backbone.stem.conv", 3, w, 7, 2, 3, 1, false);
        let stem_bn = BatchNorm2d::new(store, "backbone.stem.bn", w);
        let mut stages = Vec::with_capacity(4);
        let mut cin = w;
        for (si, &count) in config.blocks.iter().enumerate() {
            let mid = w << si;
            let mut blocks = Vec::with_capacity(count);
            for bi in 0..count {
                let stride = if si > 0 && bi == 0 { 2 } else { 1 };
                blocks.push(Bottleneck::new(
                    store,
                    rng,
                    &format!("backbone.layer{}.block{}", si + 1, bi),
                    cin,
                    mid,
                    stride,
                ));
                cin = mid * EXPANSION;
            }
            stages.push(blocks);
        }
        Backbone { config, stem_conv, stem_bn, stages }
    }

    /// E1..E5 for an image batch (N, 3, H, W); H and W must be divisible
    /// by 32.
    pub fn extract<T: Elem>(
        &self,
        tape: &mut Tape<T>,
        store: &mut ParamStore<T>,
        image: Var,
        mode: Mode,
    ) -> Result<[Var; 5], ShapeError> {
        let (_, c, h, w) = tape.dims4(image);
        if c != 3 {
            return Err(ShapeError::ChannelMismatch { context: "backbone input".into(), expected: 3, got: c });
        }
        if h % 32 != 0 || w % 32 != 0 {
            return Err(ShapeError::NotDivisible { context: "backbone input".into(), h, w, divisor: 32 });
        }
        let y = self.stem_conv.forward(tape, store, image)?;
        let y = self.stem_bn.forward(tape, store, y, mode)?;
        let e1 = tape.relu(y);
        let mut cur = tape.max_pool2d(e1, 3, 2, 1)?;
        let mut levels = [e1; 5];
        for (si, stage) in self.stages.iter().enumerate() {
            for block in stage {
                cur = block.forward(tape, store, cur, mode)?;
            }
            levels[si + 1] = cur;
        }
        Ok(levels)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rngutil::{stream_rng, Purpose};
    use crate::testsupport::randn;

    #[test]
    fn tiny_backbone_follows_the_stride_and_width_contract() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = stream_rng(42, Purpose::Init, 0);
        let bb = Backbone::new(&mut store, &mut rng, BackboneConfig::tiny());
        let mut tape = Tape::new();
        let img = tape.leaf(randn(&mut rng, &[2, 3, 64, 64]), false);
        let levels = bb.extract(&mut tape, &mut store, img, Mode::Train).unwrap();
        let want = [
            (2, 8, 32, 32),
            (2, 32, 16, 16),
            (2, 64, 8, 8),
            (2, 128, 4, 4),
            (2, 256, 2, 2),
        ];
        for (lvl, want) in levels.iter().zip(want) {
            assert_eq!(tape.dims4(*lvl), want);
        }
    }

    #[test]
    fn rejects_sizes_not_divisible_by_32() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = stream_rng(42, Purpose::Init, 1);
        let bb = Backbone::new(&mut store, &mut rng, BackboneConfig::tiny());
        let mut tape = Tape::new();
        let img = tape.leaf(randn(&mut rng, &[1, 3, 300, 300]), false);
        assert!(matches!(
            bb.extract(&mut tape, &mut store, img, Mode::Train),
            Err(ShapeError::NotDivisible { divisor: 32, .. })
        ));
    }

    #[test]
    fn standard_widths_match_the_published_table() {
        assert_eq!(BackboneConfig::standard().level_widths(), [64, 256, 512, 1024, 2048]);
    }
}
