//! Network building blocks: convolutions, NAF-style blocks, simplified channel
//! attention, the Fourier branch, the fuse block and resampling layers.
//!
//! Blocks hold only [`ParamId`]s, so a block is independent of the element type
//! and can run against any [`ParamStore`](crate::params::ParamStore) with matching
//! names.

use rand::Rng;

use crate::autodiff::{ConvSpec, Tape, Var};
use crate::error::{Error, Result};
use crate::params::{ParamBuilder, ParamId};
use crate::tensor::Real;

pub const LN_EPS: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub spec: ConvSpec,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real, R: Rng>(
        pb: &mut ParamBuilder<'_, T, R>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        groups: usize,
        bias: bool,
    ) -> Self {
        pb.scope(name, |pb| {
            let fan_in = cin / groups * kernel * kernel;
            let weight = pb.fan_in_uniform("weight", [cout, cin / groups, kernel, kernel], fan_in);
            let bias = bias.then(|| pb.fan_in_uniform("bias", [1, cout, 1, 1], fan_in));
            Conv2d {
                weight,
                bias,
                spec: ConvSpec {
                    stride,
                    pad,
                    groups,
                },
            }
        })
    }

    pub fn pointwise<T: Real, R: Rng>(
        pb: &mut ParamBuilder<'_, T, R>,
        name: &str,
        cin: usize,
        cout: usize,
        bias: bool,
    ) -> Self {
        Self::new(pb, name, cin, cout, 1, 1, 0, 1, bias)
    }

    /// 3×3, stride 1, same padding.
    pub fn same3<T: Real, R: Rng>(
        pb: &mut ParamBuilder<'_, T, R>,
        name: &str,
        cin: usize,
        cout: usize,
    ) -> Self {
        Self::new(pb, name, cin, cout, 3, 1, 1, 1, true)
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        let w = tape.param(self.weight);
        let b = self.bias.map(|b| tape.param(b));
        tape.conv2d(x, w, b, self.spec)
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut v = vec![self.weight];
        v.extend(self.bias);
        v
    }
}

/// Channel layer norm with per-channel affine (weight 1, bias 0 at init).
#[derive(Clone, Debug)]
pub struct LayerNorm2d {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl LayerNorm2d {
    pub fn new<T: Real, R: Rng>(pb: &mut ParamBuilder<'_, T, R>, name: &str, c: usize) -> Self {
        pb.scope(name, |pb| LayerNorm2d {
            weight: pb.constant("weight", [1, c, 1, 1], 1.0),
            bias: pb.constant("bias", [1, c, 1, 1], 0.0),
        })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        let w = tape.param(self.weight);
        let b = tape.param(self.bias);
        tape.layer_norm(x, w, b, LN_EPS)
    }
}

/// Simplified channel attention: `x * conv1x1(gap(x))`.
#[derive(Clone, Debug)]
pub struct Sca {
    pub conv: Conv2d,
}

impl Sca {
    pub fn new<T: Real, R: Rng>(pb: &mut ParamBuilder<'_, T, R>, name: &str, c: usize) -> Self {
        Sca {
            conv: pb.scope(name, |pb| Conv2d::pointwise(pb, "conv", c, c, true)),
        }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        let pooled = tape.global_avg_pool(x)?;
        let s = self.conv.forward(tape, pooled)?;
        tape.mul_bcast(x, s)
    }
}

/// Frequency branch: rfft2 → 1×1 → GELU → 1×1 → irfft2 on stacked real/imaginary channels.
#[derive(Clone, Debug)]
pub struct FourierConv {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
    /// Skip the GELU (used to test the transform pair in isolation).
    pub linear: bool,
}

impl FourierConv {
    pub fn new<T: Real, R: Rng>(pb: &mut ParamBuilder<'_, T, R>, name: &str, c: usize) -> Self {
        pb.scope(name, |pb| FourierConv {
            conv1: Conv2d::pointwise(pb, "conv1", 2 * c, 2 * c, true),
            conv2: Conv2d::pointwise(pb, "conv2", 2 * c, 2 * c, true),
            linear: false,
        })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        let width = tape.shape(x)[3];
        let f = tape.rfft2(x)?;
        let mut y = self.conv1.forward(tape, f)?;
        if !self.linear {
            y = tape.gelu(y)?;
        }
        let y = self.conv2.forward(tape, y)?;
        tape.irfft2(y, width)
    }
}

/// NAF block: a gated depthwise spatial path and a gated FFN, each added back with a
/// learnable per-channel scale (zero at init, so a fresh block is the identity).
#[derive(Clone, Debug)]
pub struct NafBlock {
    pub channels: usize,
    pub norm1: LayerNorm2d,
    pub conv1: Conv2d,
    pub conv2: Conv2d,
    pub sca: Sca,
    pub conv3: Conv2d,
    pub beta: ParamId,
    pub norm2: LayerNorm2d,
    pub conv4: Conv2d,
    pub conv5: Conv2d,
    pub gamma: ParamId,
}

impl NafBlock {
    pub fn new<T: Real, R: Rng>(pb: &mut ParamBuilder<'_, T, R>, name: &str, c: usize) -> Self {
        let dw = 2 * c;
        pb.scope(name, |pb| NafBlock {
            channels: c,
            norm1: LayerNorm2d::new(pb, "norm1", c),
            conv1: Conv2d::pointwise(pb, "conv1", c, dw, true),
            conv2: Conv2d::new(pb, "conv2", dw, dw, 3, 1, 1, dw, true),
            sca: Sca::new(pb, "sca", dw / 2),
            conv3: Conv2d::pointwise(pb, "conv3", dw / 2, c, true),
            beta: pb.constant("beta", [1, c, 1, 1], 0.0),
            norm2: LayerNorm2d::new(pb, "norm2", c),
            conv4: Conv2d::pointwise(pb, "conv4", c, 2 * c, true),
            conv5: Conv2d::pointwise(pb, "conv5", c, c, true),
            gamma: pb.constant("gamma", [1, c, 1, 1], 0.0),
        })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        self.forward_with(tape, x, None)
    }

    /// With `branch`, its output on the normalized input is added before `conv3`.
    pub fn forward_with<T: Real>(
        &self,
        tape: &mut Tape<'_, T>,
        inp: Var,
        branch: Option<&FourierConv>,
    ) -> Result<Var> {
        let c = tape.shape(inp)[1];
        if c != self.channels {
            return Err(Error::shape(
                "naf_block",
                format!("{c} channels into a {}-channel block", self.channels),
            ));
        }
        let n = self.norm1.forward(tape, inp)?;
        let x = self.conv1.forward(tape, n)?;
        let x = self.conv2.forward(tape, x)?;
        let x = tape.simple_gate(x)?;
        let mut x = self.sca.forward(tape, x)?;
        if let Some(f) = branch {
            let fx = f.forward(tape, n)?;
            x = tape.add(x, fx)?;
        }
        let x = self.conv3.forward(tape, x)?;
        let beta = tape.param(self.beta);
        let x = tape.mul_bcast(x, beta)?;
        let y = tape.add(inp, x)?;

        let x = self.norm2.forward(tape, y)?;
        let x = self.conv4.forward(tape, x)?;
        let x = tape.simple_gate(x)?;
        let x = self.conv5.forward(tape, x)?;
        let gamma = tape.param(self.gamma);
        let x = tape.mul_bcast(x, gamma)?;
        tape.add(y, x)
    }
}

/// NAF block with a parallel Fourier branch.
#[derive(Clone, Debug)]
pub struct FourierBlock {
    pub naf: NafBlock,
    pub fourier: Option<FourierConv>,
}

impl FourierBlock {
    pub fn new<T: Real, R: Rng>(
        pb: &mut ParamBuilder<'_, T, R>,
        name: &str,
        c: usize,
        with_fourier: bool,
    ) -> Self {
        pb.scope(name, |pb| FourierBlock {
            naf: NafBlock::new(pb, "naf", c),
            fourier: with_fourier.then(|| FourierConv::new(pb, "fft", c)),
        })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        self.naf.forward_with(tape, x, self.fourier.as_ref())
    }
}

/// Merges the coarser same-column feature (upsampled) with the finer previous-column
/// feature (downsampled): concat → SCA → 1×1 projection to `channels`.
#[derive(Clone, Debug)]
pub struct FuseBlock {
    pub channels: usize,
    pub up: Conv2d,
    pub down: Option<Conv2d>,
    pub sca: Sca,
    pub proj: Conv2d,
}

impl FuseBlock {
    pub fn new<T: Real, R: Rng>(
        pb: &mut ParamBuilder<'_, T, R>,
        name: &str,
        c: usize,
        with_down: bool,
    ) -> Self {
        let parts = if with_down { 2 } else { 1 };
        pb.scope(name, |pb| FuseBlock {
            channels: c,
            up: Conv2d::pointwise(pb, "up", 2 * c, 4 * c, false),
            down: with_down.then(|| Conv2d::new(pb, "down", c / 2, c, 2, 2, 0, 1, true)),
            sca: Sca::new(pb, "sca", parts * c),
            proj: Conv2d::pointwise(pb, "proj", parts * c, c, true),
        })
    }

    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<'_, T>,
        neighbor_up: Var,
        neighbor_down: Option<Var>,
    ) -> Result<Var> {
        let up = self.up.forward(tape, neighbor_up)?;
        let up = tape.pixel_shuffle(up, 2)?;
        let x = match (&self.down, neighbor_down) {
            (Some(conv), Some(d)) => {
                let d = conv.forward(tape, d)?;
                tape.concat(&[up, d])?
            }
            (None, None) => up,
            (Some(_), None) => {
                return Err(Error::shape("fuse_block", "missing finer neighbor"));
            }
            (None, Some(_)) => {
                return Err(Error::shape("fuse_block", "block has no downsampling path"));
            }
        };
        let x = self.sca.forward(tape, x)?;
        self.proj.forward(tape, x)
    }
}

/// Stride-2 2×2 convolution doubling the channels.
#[derive(Clone, Debug)]
pub struct Downsample {
    pub conv: Conv2d,
}

impl Downsample {
    pub fn new<T: Real, R: Rng>(pb: &mut ParamBuilder<'_, T, R>, name: &str, c: usize) -> Self {
        Downsample {
            conv: Conv2d::new(pb, name, c, 2 * c, 2, 2, 0, 1, true),
        }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        let [_, _, h, w] = tape.shape(x);
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::shape("downsample", format!("odd spatial size {h}x{w}")));
        }
        self.conv.forward(tape, x)
    }
}

/// 1×1 convolution to twice the channels followed by a ×2 pixel shuffle.
#[derive(Clone, Debug)]
pub struct Upsample {
    pub conv: Conv2d,
}

impl Upsample {
    pub fn new<T: Real, R: Rng>(pb: &mut ParamBuilder<'_, T, R>, name: &str, c: usize) -> Self {
        Upsample {
            conv: Conv2d::pointwise(pb, name, c, 2 * c, false),
        }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        let y = self.conv.forward(tape, x)?;
        tape.pixel_shuffle(y, 2)
    }
}

/// Decoder level module: fuse block followed by a Fourier block.
#[derive(Clone, Debug)]
pub struct Level {
    pub fuse: FuseBlock,
    pub block: FourierBlock,
}

impl Level {
    pub fn new<T: Real, R: Rng>(
        pb: &mut ParamBuilder<'_, T, R>,
        name: &str,
        c: usize,
        with_down: bool,
        with_fourier: bool,
    ) -> Self {
        pb.scope(name, |pb| Level {
            fuse: FuseBlock::new(pb, "fuse", c, with_down),
            block: FourierBlock::new(pb, "fourier", c, with_fourier),
        })
    }

    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<'_, T>,
        neighbor_up: Var,
        neighbor_down: Option<Var>,
    ) -> Result<Var> {
        let x = self.fuse.forward(tape, neighbor_up, neighbor_down)?;
        self.block.forward(tape, x)
    }
}
