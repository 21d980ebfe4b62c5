//! The full detection network: backbone pyramid, AIM + SIM + fuse encoder,
//! stacked residual-U decoder, and the 1x1 prediction head.

use std::path::PathBuf;

use thiserror::Error;

use crate::backbone::{Backbone, BackboneConfig};
use crate::blocks::{resample, AimBlock, BlockSpec, FuseBlock, ResampleMode, RsuBlock, SimBlock};
use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::elem::Elem;
use crate::layers::{Conv2d, Mode};
use crate::ops::ShapeError;
use crate::params::ParamStore;
use crate::rngutil::{stream_rng, Purpose};
use crate::tape::{Tape, Var};

/// Features at or below this edge length run their decoder block in
/// dilated mode to avoid degenerate inner bottlenecks.
pub const DILATE_AT_OR_BELOW: usize = 16;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DilatedLevels {
    /// Derive from the configured input size: a level dilates when its
    /// feature is small (<= 16 px) or cannot be halved depth-1 times.
    Auto,
    Explicit(Vec<usize>),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BackboneInit {
    Random,
    /// Checkpoint file containing exactly the `backbone.*` tensors.
    Pretrained(PathBuf),
}

#[derive(Debug, Error)]
pub enum NetworkError {
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("invalid config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AfiuConfig {
    /// (H, W); both divisible by 32. Preprocessing resizes inputs to this.
    pub input_size: (usize, usize),
    /// Uniform channel width of every EC_x and D_x.
    pub interaction_width: usize,
    /// Inner depth of the decoder block at levels 1..=5.
    pub rsu_depths: [usize; 5],
    pub dilated_levels: DilatedLevels,
    pub backbone: BackboneConfig,
    pub backbone_init: BackboneInit,
}

impl AfiuConfig {
    /// Full-size profile used for real training runs.
    pub fn standard() -> Self {
        AfiuConfig {
            input_size: (320, 320),
            interaction_width: 64,
            rsu_depths: [2, 2, 3, 4, 5],
            dilated_levels: DilatedLevels::Auto,
            backbone: BackboneConfig::standard(),
            backbone_init: BackboneInit::Random,
        }
    }

    /// Reduced profile for desk-scale verification: width 8, depths capped
    /// at 3, 64x64 inputs, 1-block backbone stages.
    pub fn tiny() -> Self {
        AfiuConfig {
            input_size: (64, 64),
            interaction_width: 8,
            rsu_depths: [2, 2, 3, 3, 3],
            dilated_levels: DilatedLevels::Auto,
            backbone: BackboneConfig::tiny(),
            backbone_init: BackboneInit::Random,
        }
    }

    pub fn validate(&self) -> Result<(), NetworkError> {
        let (h, w) = self.input_size;
        if h == 0 || w == 0 || h % 32 != 0 || w % 32 != 0 {
            return Err(NetworkError::Config(format!(
                "input_size {h}x{w} must be a positive multiple of 32"
            )));
        }
        if self.interaction_width == 0 {
            return Err(NetworkError::Config("interaction_width must be positive".into()));
        }
        for (i, &d) in self.rsu_depths.iter().enumerate() {
            if d < 2 {
                return Err(NetworkError::Config(format!(
                    "rsu_depths[{}] = {d}, must be >= 2",
                    i + 1
                )));
            }
        }
        if let DilatedLevels::Explicit(levels) = &self.dilated_levels {
            if levels.iter().any(|&l| !(1..=5).contains(&l)) {
                return Err(NetworkError::Config("dilated level outside 1..=5".into()));
            }
        }
        Ok(())
    }

    /// Feature size of pyramid level x (1-based) for the configured input.
    pub fn level_size(&self, level: usize) -> (usize, usize) {
        (self.input_size.0 >> level, self.input_size.1 >> level)
    }

    /// Whether the decoder block at `level` runs dilated.
    pub fn level_dilated(&self, level: usize) -> bool {
        match &self.dilated_levels {
            DilatedLevels::Explicit(levels) => levels.contains(&level),
            DilatedLevels::Auto => {
                let (h, w) = self.level_size(level);
                let depth = self.rsu_depths[level - 1];
                let div = 1usize << (depth - 1);
                h.min(w) <= DILATE_AT_OR_BELOW || h % div != 0 || w % div != 0
            }
        }
    }
}

pub struct Afiu {
    pub config: AfiuConfig,
    backbone: Backbone,
    aims: Vec<AimBlock>,
    sims: Vec<SimBlock>,
    fuses: Vec<FuseBlock>,
    rsus: Vec<RsuBlock>,
    head: Conv2d,
}

impl Afiu {
    /// Build the model and register freshly initialized parameters; the
    /// initialization stream is derived from `seed` alone.
    pub fn new<T: Elem>(
        config: AfiuConfig,
        store: &mut ParamStore<T>,
        seed: u64,
    ) -> Result<Self, NetworkError> {
        config.validate()?;
        let mut rng = stream_rng(seed, Purpose::Init, 0);
        let backbone = Backbone::new(store, &mut rng, config.backbone.clone());
        let widths = config.backbone.level_widths();
        let w = config.interaction_width;

        let mut aims = Vec::with_capacity(5);
        let mut sims = Vec::with_capacity(5);
        let mut fuses = Vec::with_capacity(5);
        for level in 1..=5usize {
            let in_channels = match level {
                1 => vec![widths[0], widths[1]],
                5 => vec![widths[3], widths[4]],
                x => vec![widths[x - 2], widths[x - 1], widths[x]],
            };
            let spec = BlockSpec { in_channels, out_channels: w, level, rsu_depth: None, dilated: false };
            aims.push(AimBlock::new(store, &mut rng, &format!("encoder.aim{level}"), spec)?);
            sims.push(SimBlock::new(
                store,
                &mut rng,
                &format!("encoder.sim{level}"),
                BlockSpec::single(w, w, level),
            )?);
            fuses.push(FuseBlock::new(
                store,
                &mut rng,
                &format!("encoder.fuse{level}"),
                BlockSpec::single(w, w, level),
            )?);
        }

        let mut rsus = Vec::with_capacity(5);
        for level in 1..=5usize {
            let cin = if level == 5 { w } else { 2 * w };
            let spec = BlockSpec::rsu(
                cin,
                w,
                level,
                config.rsu_depths[level - 1],
                config.level_dilated(level),
            );
            rsus.push(RsuBlock::new(store, &mut rng, &format!("decoder.rsu{level}"), spec)?);
        }
        let head = Conv2d::new(store, &mut rng, "head", w, 1, 1, 1, 0, 1, true);

        if let BackboneInit::Pretrained(path) = &config.backbone_init {
            let ckpt = Checkpoint::load(path)?;
            ckpt.apply_prefix(store, "backbone.")?;
        }
        Ok(Afiu { config, backbone, aims, sims, fuses, rsus, head })
    }

    /// Backbone pyramid E1..E5.
    pub fn backbone_extract<T: Elem>(
        &self,
        tape: &mut Tape<T>,
        store: &mut ParamStore<T>,
        image: Var,
        mode: Mode,
    ) -> Result<[Var; 5], ShapeError> {
        self.backbone.extract(tape, store, image, mode)
    }

    /// EC1..EC5: each level aggregates its neighbors (AIM), self-interacts
    /// (SIM) and is fused to the interaction width.
    pub fn encode<T: Elem>(
        &self,
        tape: &mut Tape<T>,
        store: &mut ParamStore<T>,
        pyramid: &[Var; 5],
        mode: Mode,
    ) -> Result<[Var; 5], ShapeError> {
        let mut out = [pyramid[0]; 5];
        for level in 1..=5usize {
            let neighbors: Vec<Var> = match level {
                1 => vec![pyramid[0], pyramid[1]],
                5 => vec![pyramid[3], pyramid[4]],
                x => vec![pyramid[x - 2], pyramid[x - 1], pyramid[x]],
            };
            let a = self.aims[level - 1].forward(tape, store, &neighbors, mode)?;
            let s = self.sims[level - 1].forward(tape, store, a, mode)?;
            out[level - 1] = self.fuses[level - 1].forward(tape, store, s, mode)?;
        }
        Ok(out)
    }

    /// D1: decode from the deepest level upward, concatenating each level's
    /// encoded feature with the upsampled deeper decode.
    pub fn decode<T: Elem>(
        &self,
        tape: &mut Tape<T>,
        store: &mut ParamStore<T>,
        encoded: &[Var; 5],
        mode: Mode,
    ) -> Result<Var, ShapeError> {
        let mut deeper = self.rsus[4].forward(tape, store, encoded[4], mode)?;
        for level in (1..=4usize).rev() {
            let up = resample(tape, deeper, 1, ResampleMode::Image)?;
            let cat = tape.concat_channels(&[encoded[level - 1], up])?;
            deeper = self.rsus[level - 1].forward(tape, store, cat, mode)?;
        }
        Ok(deeper)
    }

    /// Full forward pass: (N, 3, H, W) image batch to an (N, 1, H, W)
    /// prediction map with every value strictly inside (0, 1).
    pub fn forward<T: Elem>(
        &self,
        tape: &mut Tape<T>,
        store: &mut ParamStore<T>,
        image: Var,
        mode: Mode,
    ) -> Result<Var, ShapeError> {
        let pyramid = self.backbone_extract(tape, store, image, mode)?;
        let encoded = self.encode(tape, store, &pyramid, mode)?;
        let d1 = self.decode(tape, store, &encoded, mode)?;
        let logits = self.head.forward(tape, store, d1)?;
        let prob = tape.sigmoid(logits);
        resample(tape, prob, 1, ResampleMode::Image)
    }
}

/// Convenience wrapper building a model plus its store from a seed.
pub fn build_model<T: Elem>(config: AfiuConfig, seed: u64) -> Result<(Afiu, ParamStore<T>), NetworkError> {
    let mut store = ParamStore::new();
    let model = Afiu::new(config, &mut store, seed)?;
    Ok((model, store))
}

#[cfg(test)]
mod tests {
    use ndarray::{ArrayD, IxDyn};

    use super::*;
    use crate::testsupport::randn;

    #[test]
    fn tiny_forward_preserves_size_and_stays_in_unit_interval() {
        let (model, mut store) = build_model::<f32>(AfiuConfig::tiny(), 3).unwrap();
        let mut rng = stream_rng(3, Purpose::Test, 0);
        let mut tape = Tape::inference();
        let img = tape.leaf(randn(&mut rng, &[2, 3, 64, 64]).mapv(|v| v as f32), false);
        let y = model.forward(&mut tape, &mut store, img, Mode::Eval).unwrap();
        assert_eq!(tape.shape(y), &[2, 1, 64, 64]);
        assert!(tape.value(y).iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn encoder_levels_have_interaction_width_at_pyramid_resolution() {
        let (model, mut store) = build_model::<f32>(AfiuConfig::tiny(), 4).unwrap();
        let mut rng = stream_rng(4, Purpose::Test, 0);
        let mut tape = Tape::inference();
        let img = tape.leaf(randn(&mut rng, &[1, 3, 64, 64]).mapv(|v| v as f32), false);
        let pyr = model.backbone_extract(&mut tape, &mut store, img, Mode::Eval).unwrap();
        let ec = model.encode(&mut tape, &mut store, &pyr, Mode::Eval).unwrap();
        for (level, v) in ec.iter().enumerate() {
            let (_, c, h, w) = tape.dims4(*v);
            assert_eq!(c, 8);
            assert_eq!((h, w), (64 >> (level + 1), 64 >> (level + 1)));
        }
        let d1 = model.decode(&mut tape, &mut store, &ec, Mode::Eval).unwrap();
        assert_eq!(tape.dims4(d1), (1, 8, 32, 32));
    }

    #[test]
    fn zeroed_head_gives_exactly_one_half_everywhere() {
        let (model, mut store) = build_model::<f32>(AfiuConfig::tiny(), 5).unwrap();
        store.zero_matching(|n| n.starts_with("head."));
        let mut rng = stream_rng(5, Purpose::Test, 0);
        let mut tape = Tape::inference();
        let img = tape.leaf(randn(&mut rng, &[1, 3, 64, 64]).mapv(|v| v as f32), false);
        let y = model.forward(&mut tape, &mut store, img, Mode::Eval).unwrap();
        assert!(tape.value(y).iter().all(|&v| v == 0.5));
    }

    #[test]
    fn standard_config_dilates_the_deep_levels_only() {
        let cfg = AfiuConfig::standard();
        // 320 input: 160/80/40 resample cleanly; 20 cannot be halved three
        // times for a depth-4 block; 10 is at or below the dilation floor.
        assert_eq!(
            (1..=5).filter(|&l| cfg.level_dilated(l)).collect::<Vec<_>>(),
            vec![4, 5]
        );
        let tiny = AfiuConfig::tiny();
        assert_eq!(
            (1..=5).filter(|&l| tiny.level_dilated(l)).collect::<Vec<_>>(),
            vec![2, 3, 4, 5]
        );
    }

    #[test]
    fn rejects_invalid_configs_and_inputs() {
        let mut bad = AfiuConfig::tiny();
        bad.input_size = (300, 300);
        assert!(matches!(
            build_model::<f32>(bad, 0),
            Err(NetworkError::Config(_))
        ));
        let (model, mut store) = build_model::<f32>(AfiuConfig::tiny(), 0).unwrap();
        let mut tape = Tape::inference();
        let img = tape.leaf(ArrayD::<f32>::zeros(IxDyn(&[1, 3, 300, 300])), false);
        assert!(model.forward(&mut tape, &mut store, img, Mode::Eval).is_err());
    }

    #[test]
    fn gradients_reach_the_input_from_every_encoder_level() {
        let (model, mut store) = build_model::<f64>(AfiuConfig::tiny(), 6).unwrap();
        let mut rng = stream_rng(6, Purpose::Test, 0);
        for level in 0..5 {
            let mut tape = Tape::new();
            let img = tape.leaf(randn(&mut rng, &[1, 3, 64, 64]), true);
            let pyr = model.backbone_extract(&mut tape, &mut store, img, Mode::Train).unwrap();
            let ec = model.encode(&mut tape, &mut store, &pyr, Mode::Train).unwrap();
            let s = tape.sum(ec[level]);
            let grads = tape.backward(s);
            let g = grads.get(img).expect("input gradient missing");
            let norm: f64 = g.iter().map(|v| v * v).sum();
            assert!(norm > 0.0, "level {level} has zero input gradient");
        }
    }
}
