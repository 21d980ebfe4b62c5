//! Encoder/decoder building blocks.
//!
//! * [`AimBlock`] — aggregate interaction: pulls 2–3 adjacent pyramid
//!   levels onto the current level's resolution and merges them.
//! * [`SimBlock`] — self-interaction: a full-resolution and a
//!   half-resolution branch exchange information by mutual resampling and
//!   element-wise addition.
//! * [`RsuBlock`] — residual U-block: an input transform plus an inner
//!   encoder-decoder whose output is added back onto the transform.
//! * [`FuseBlock`] — convolutional fusion applied after the SIM.
//!
//! All blocks are pure functions of (input, parameters) and reentrant on
//! disjoint tapes.

use rand::Rng;

use crate::elem::Elem;
use crate::layers::{Conv2d, ConvBnRelu, Mode};
use crate::ops::ShapeError;
use crate::params::ParamStore;
use crate::tape::{Tape, Var};

/// Static configuration shared by the block constructors.
#[derive(Debug, Clone)]
pub struct BlockSpec {
    /// Channel count of each input, in input order.
    pub in_channels: Vec<usize>,
    pub out_channels: usize,
    /// Pyramid level in 1..=5.
    pub level: usize,
    /// Inner encoder-decoder depth (RSU only).
    pub rsu_depth: Option<usize>,
    /// When set the RSU widens by dilation instead of resampling.
    pub dilated: bool,
}

impl BlockSpec {
    pub fn single(in_channels: usize, out_channels: usize, level: usize) -> Self {
        BlockSpec { in_channels: vec![in_channels], out_channels, level, rsu_depth: None, dilated: false }
    }

    pub fn rsu(in_channels: usize, out_channels: usize, level: usize, depth: usize, dilated: bool) -> Self {
        BlockSpec {
            in_channels: vec![in_channels],
            out_channels,
            level,
            rsu_depth: Some(depth),
            dilated,
        }
    }

    fn check_level(&self) -> Result<(), ShapeError> {
        if !(1..=5).contains(&self.level) {
            return Err(ShapeError::Level { got: self.level });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResampleMode {
    /// Bilinear, for images and feature maps.
    Image,
    /// Nearest-neighbor, for label masks.
    Mask,
}

/// Rescale by a power of two: `pow2` = +k doubles k times, -k halves k
/// times. Halving requires even sizes at every step. Bilinear resampling
/// is used for `Image`, top-left-anchored nearest for `Mask`.
pub fn resample<T: Elem>(
    tape: &mut Tape<T>,
    x: Var,
    pow2: i32,
    mode: ResampleMode,
) -> Result<Var, ShapeError> {
    let mut cur = x;
    for _ in 0..pow2.unsigned_abs() {
        let (_, _, h, w) = tape.dims4(cur);
        let (oh, ow) = if pow2 > 0 {
            (h * 2, w * 2)
        } else {
            if h % 2 != 0 || w % 2 != 0 {
                return Err(ShapeError::NotDivisible { context: "resample".into(), h, w, divisor: 2 });
            }
            (h / 2, w / 2)
        };
        cur = match mode {
            ResampleMode::Image => tape.resize_bilinear(cur, oh, ow),
            ResampleMode::Mask => tape.resize_nearest(cur, oh, ow),
        };
    }
    Ok(cur)
}

fn check_channels<T: Elem>(
    tape: &Tape<T>,
    x: Var,
    expected: usize,
    context: &str,
) -> Result<(), ShapeError> {
    let got = tape.shape(x)[1];
    if got != expected {
        return Err(ShapeError::ChannelMismatch { context: context.into(), expected, got });
    }
    Ok(())
}

/// Aggregate interaction module. Each neighbor is brought to the current
/// level's resolution, reduced to `out_channels` by a 3x3 convolution, and
/// the branches are merged by addition followed by a 3x3 conv + norm +
/// rectifier.
pub struct AimBlock {
    pub spec: BlockSpec,
    branches: Vec<Conv2d>,
    merge: ConvBnRelu,
    /// Index of the current level inside the neighbor list.
    current: usize,
}

impl AimBlock {
    pub fn new<T: Elem, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        spec: BlockSpec,
    ) -> Result<Self, ShapeError> {
        spec.check_level()?;
        let count = spec.in_channels.len();
        let current = match (count, spec.level) {
            (2, 1) => 0,
            (2, 5) => 1,
            (3, 2..=4) => 1,
            (2 | 3, _) => return Err(ShapeError::NeighborLevel { neighbors: count, level: spec.level }),
            _ => return Err(ShapeError::NeighborCount { got: count }),
        };
        let branches = spec
            .in_channels
            .iter()
            .enumerate()
            .map(|(i, &cin)| {
                Conv2d::new(
                    store,
                    rng,
                    &format!("{name}.branch{i}"),
                    cin,
                    spec.out_channels,
                    3,
                    1,
                    1,
                    1,
                    true,
                )
            })
            .collect();
        let merge = ConvBnRelu::new(
            store,
            rng,
            &format!("{name}.merge"),
            spec.out_channels,
            spec.out_channels,
            3,
            1,
            1,
            1,
        );
        Ok(AimBlock { spec, branches, merge, current })
    }

    /// `neighbors` are ordered shallow to deep; consecutive entries must
    /// differ in spatial size by exactly a factor of two.
    pub fn forward<T: Elem>(
        &self,
        tape: &mut Tape<T>,
        store: &mut ParamStore<T>,
        neighbors: &[Var],
        mode: Mode,
    ) -> Result<Var, ShapeError> {
        if neighbors.len() != self.spec.in_channels.len() {
            return Err(ShapeError::NeighborCount { got: neighbors.len() });
        }
        for (i, (&v, &cin)) in neighbors.iter().zip(&self.spec.in_channels).enumerate() {
            check_channels(tape, v, cin, &format!("aim neighbor {i}"))?;
        }
        for pair in neighbors.windows(2) {
            let (_, _, ha, wa) = tape.dims4(pair[0]);
            let (_, _, hb, wb) = tape.dims4(pair[1]);
            if ha != hb * 2 || wa != wb * 2 {
                return Err(ShapeError::NeighborScale { a: (ha, wa), b: (hb, wb) });
            }
        }
        let mut merged: Option<Var> = None;
        for (i, (&v, conv)) in neighbors.iter().zip(&self.branches).enumerate() {
            // Deeper neighbors come up, shallower neighbors go down.
            let steps = i as i32 - self.current as i32;
            let aligned = resample(tape, v, steps, ResampleMode::Image)?;
            let reduced = conv.forward(tape, store, aligned)?;
            merged = Some(match merged {
                None => reduced,
                Some(acc) => tape.add(acc, reduced)?,
            });
        }
        self.merge.forward(tape, store, merged.unwrap(), mode)
    }
}

/// Self-interaction module.
pub struct SimBlock {
    pub spec: BlockSpec,
    high: ConvBnRelu,
    low: ConvBnRelu,
    high_post: ConvBnRelu,
    low_post: ConvBnRelu,
}

impl SimBlock {
    pub fn new<T: Elem, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        spec: BlockSpec,
    ) -> Result<Self, ShapeError> {
        spec.check_level()?;
        let cin = spec.in_channels[0];
        let cout = spec.out_channels;
        Ok(SimBlock {
            high: ConvBnRelu::new(store, rng, &format!("{name}.high"), cin, cout, 3, 1, 1, 1),
            low: ConvBnRelu::new(store, rng, &format!("{name}.low"), cin, cout, 3, 1, 1, 1),
            high_post: ConvBnRelu::new(store, rng, &format!("{name}.high_post"), cout, cout, 3, 1, 1, 1),
            low_post: ConvBnRelu::new(store, rng, &format!("{name}.low_post"), cout, cout, 3, 1, 1, 1),
            spec,
        })
    }

    pub fn forward<T: Elem>(
        &self,
        tape: &mut Tape<T>,
        store: &mut ParamStore<T>,
        x: Var,
        mode: Mode,
    ) -> Result<Var, ShapeError> {
        check_channels(tape, x, self.spec.in_channels[0], "sim input")?;
        let (_, _, h, w) = tape.dims4(x);
        if h % 2 != 0 || w % 2 != 0 {
            return Err(ShapeError::OddSpatial { context: "sim input".into(), h, w });
        }
        let high0 = self.high.forward(tape, store, x, mode)?;
        let down_in = resample(tape, x, -1, ResampleMode::Image)?;
        let low0 = self.low.forward(tape, store, down_in, mode)?;

        // Mutual exchange between resolutions.
        let low_up = resample(tape, low0, 1, ResampleMode::Image)?;
        let high1 = tape.add(high0, low_up)?;
        let high_down = resample(tape, high0, -1, ResampleMode::Image)?;
        let low1 = tape.add(low0, high_down)?;

        let high2 = self.high_post.forward(tape, store, high1, mode)?;
        let low2 = self.low_post.forward(tape, store, low1, mode)?;
        let low2_up = resample(tape, low2, 1, ResampleMode::Image)?;
        tape.add(high2, low2_up)
    }

    /// The full-resolution branch evaluated on its own (no exchange).
    /// Equals `forward` when every half-resolution parameter is zero.
    pub fn high_branch_only<T: Elem>(
        &self,
        tape: &mut Tape<T>,
        store: &mut ParamStore<T>,
        x: Var,
        mode: Mode,
    ) -> Result<Var, ShapeError> {
        let high0 = self.high.forward(tape, store, x, mode)?;
        self.high_post.forward(tape, store, high0, mode)
    }

    /// Prefix filter matching every parameter of the half-resolution branch.
    pub fn is_low_branch_param(name: &str) -> bool {
        name.contains(".low.") || name.contains(".low_post.")
    }
}

/// Residual U-block: `T(x) + U(T(x))`.
pub struct RsuBlock {
    pub spec: BlockSpec,
    transform: ConvBnRelu,
    enc: Vec<ConvBnRelu>,
    btm: ConvBnRelu,
    dec: Vec<ConvBnRelu>,
    depth: usize,
}

impl RsuBlock {
    pub fn new<T: Elem, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        spec: BlockSpec,
    ) -> Result<Self, ShapeError> {
        spec.check_level()?;
        let depth = spec.rsu_depth.unwrap_or(0);
        if depth < 2 {
            return Err(ShapeError::RsuDepth { got: depth });
        }
        let cin = spec.in_channels[0];
        let cout = spec.out_channels;
        let mid = (cout / 2).max(1);
        let dil = |i: usize| if spec.dilated { 1usize << i } else { 1 };

        let transform = ConvBnRelu::new(store, rng, &format!("{name}.t"), cin, cout, 3, 1, 1, 1);
        let mut enc = Vec::with_capacity(depth);
        for i in 0..depth {
            let c_in = if i == 0 { cout } else { mid };
            enc.push(ConvBnRelu::new(
                store,
                rng,
                &format!("{name}.enc{i}"),
                c_in,
                mid,
                3,
                1,
                dil(i),
                dil(i),
            ));
        }
        let btm_dil = if spec.dilated { 1 << depth } else { 2 };
        let btm = ConvBnRelu::new(store, rng, &format!("{name}.btm"), mid, mid, 3, 1, btm_dil, btm_dil);
        // dec[i] combines the upward path with enc[i]; dec[0] restores the
        // output width.
        let mut dec = Vec::with_capacity(depth);
        for i in 0..depth {
            let c_out = if i == 0 { cout } else { mid };
            dec.push(ConvBnRelu::new(
                store,
                rng,
                &format!("{name}.dec{i}"),
                2 * mid,
                c_out,
                3,
                1,
                dil(i),
                dil(i),
            ));
        }
        Ok(RsuBlock { spec, transform, enc, btm, dec, depth })
    }

    /// The input transform `T` alone; `forward` adds the inner-U output
    /// on top of this.
    pub fn input_transform<T: Elem>(
        &self,
        tape: &mut Tape<T>,
        store: &mut ParamStore<T>,
        x: Var,
        mode: Mode,
    ) -> Result<Var, ShapeError> {
        self.transform.forward(tape, store, x, mode)
    }

    /// Prefix filter matching every inner-U parameter (everything but `T`).
    pub fn is_inner_param(name: &str) -> bool {
        name.contains(".enc") || name.contains(".btm.") || name.contains(".dec")
    }

    /// Spatial sizes visited by the inner encoder, outermost first.
    pub fn inner_resolutions(&self, h: usize, w: usize) -> Vec<(usize, usize)> {
        (0..self.depth)
            .map(|i| {
                if self.spec.dilated {
                    (h, w)
                } else {
                    (h >> i, w >> i)
                }
            })
            .collect()
    }

    pub fn forward<T: Elem>(
        &self,
        tape: &mut Tape<T>,
        store: &mut ParamStore<T>,
        x: Var,
        mode: Mode,
    ) -> Result<Var, ShapeError> {
        check_channels(tape, x, self.spec.in_channels[0], "rsu input")?;
        let (_, _, h, w) = tape.dims4(x);
        if !self.spec.dilated {
            let div = 1usize << (self.depth - 1);
            if h % div != 0 || w % div != 0 {
                return Err(ShapeError::NotDivisible { context: "rsu input".into(), h, w, divisor: div });
            }
        }
        let t = self.input_transform(tape, store, x, mode)?;

        let mut skips = Vec::with_capacity(self.depth);
        let mut cur = self.enc[0].forward(tape, store, t, mode)?;
        skips.push(cur);
        for level in self.enc.iter().skip(1) {
            if !self.spec.dilated {
                cur = resample(tape, cur, -1, ResampleMode::Image)?;
            }
            cur = level.forward(tape, store, cur, mode)?;
            skips.push(cur);
        }

        let mut up = self.btm.forward(tape, store, cur, mode)?;
        for i in (0..self.depth).rev() {
            let cat = tape.concat_channels(&[up, skips[i]])?;
            up = self.dec[i].forward(tape, store, cat, mode)?;
            if !self.spec.dilated && i > 0 {
                up = resample(tape, up, 1, ResampleMode::Image)?;
            }
        }
        tape.add(t, up)
    }
}

/// Convolutional fusion applied to the SIM output before decoding.
pub struct FuseBlock {
    pub spec: BlockSpec,
    conv: ConvBnRelu,
}

impl FuseBlock {
    pub fn new<T: Elem, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        spec: BlockSpec,
    ) -> Result<Self, ShapeError> {
        spec.check_level()?;
        let conv = ConvBnRelu::new(
            store,
            rng,
            name,
            spec.in_channels[0],
            spec.out_channels,
            3,
            1,
            1,
            1,
        );
        Ok(FuseBlock { spec, conv })
    }

    pub fn forward<T: Elem>(
        &self,
        tape: &mut Tape<T>,
        store: &mut ParamStore<T>,
        x: Var,
        mode: Mode,
    ) -> Result<Var, ShapeError> {
        check_channels(tape, x, self.spec.in_channels[0], "fuse input")?;
        self.conv.forward(tape, store, x, mode)
    }
}
