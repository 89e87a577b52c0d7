//! Head, encoder and per-column tails.

use rand::Rng;

use crate::autodiff::{ConvSpec, Tape, Var};
use crate::blocks::{Conv2d, Downsample, NafBlock};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::params::ParamBuilder;
use crate::tensor::Real;

#[derive(Clone, Debug)]
pub struct Backbone {
    pub channels: usize,
    pub head: Conv2d,
    pub enc: Vec<Vec<NafBlock>>,
    pub downs: Vec<Downsample>,
    pub tails: Vec<Conv2d>,
}

/// Channel count of encoder level `i` (1-based).
pub fn level_channels(base: usize, i: usize) -> usize {
    base << (i - 1)
}

impl Backbone {
    pub fn new<T: Real, R: Rng>(pb: &mut ParamBuilder<'_, T, R>, cfg: &ModelConfig) -> Self {
        let c = cfg.channels;
        let head = Conv2d::same3(pb, "head", 3, c);
        let mut enc = Vec::with_capacity(cfg.levels);
        let mut downs = Vec::with_capacity(cfg.levels - 1);
        pb.scope("enc", |pb| {
            for i in 1..=cfg.levels {
                let ci = level_channels(c, i);
                let blocks = pb.scope(&format!("level{i}"), |pb| {
                    (0..cfg.enc_blocks[i - 1])
                        .map(|k| NafBlock::new(pb, &format!("block{k}"), ci))
                        .collect()
                });
                enc.push(blocks);
                if i < cfg.levels {
                    downs.push(Downsample::new(pb, &format!("down{i}"), ci));
                }
            }
        });
        let tails = (1..=cfg.columns)
            .map(|j| {
                pb.scope(&format!("tail{j}"), |pb| Conv2d {
                    weight: pb.constant("weight", [3, c, 3, 3], 0.0),
                    bias: Some(pb.constant("bias", [1, 3, 1, 1], 0.0)),
                    spec: ConvSpec {
                        stride: 1,
                        pad: 1,
                        groups: 1,
                    },
                })
            })
            .collect();
        Backbone {
            channels: c,
            head,
            enc,
            downs,
            tails,
        }
    }

    pub fn levels(&self) -> usize {
        self.enc.len()
    }

    pub fn head<T: Real>(&self, tape: &mut Tape<'_, T>, blur: Var) -> Result<Var> {
        let c = tape.shape(blur)[1];
        if c != 3 {
            return Err(Error::shape("head", format!("expected RGB input, got {c} channels")));
        }
        self.head.forward(tape, blur)
    }

    /// Encoder features e_1..e_N.
    pub fn encode<T: Real>(&self, tape: &mut Tape<'_, T>, h: Var) -> Result<Vec<Var>> {
        let [_, _, hh, ww] = tape.shape(h);
        let m = 1 << (self.levels() - 1);
        if hh % m != 0 || ww % m != 0 {
            return Err(Error::shape(
                "encode",
                format!("spatial size {hh}x{ww} is not a multiple of {m}"),
            ));
        }
        let mut feats = Vec::with_capacity(self.levels());
        let mut x = h;
        for (i, blocks) in self.enc.iter().enumerate() {
            for b in blocks {
                x = b.forward(tape, x)?;
            }
            feats.push(x);
            if let Some(d) = self.downs.get(i) {
                x = d.forward(tape, x)?;
            }
        }
        Ok(feats)
    }

    /// Ŝ^j = B + T^j(d_1^j) for 1-based column `j`.
    pub fn tail<T: Real>(&self, tape: &mut Tape<'_, T>, j: usize, d1: Var, blur: Var) -> Result<Var> {
        let t = self.residual(tape, j, d1)?;
        if tape.shape(t) != tape.shape(blur) {
            return Err(Error::shape(
                "tail",
                format!("{:?} vs input {:?}", tape.shape(t), tape.shape(blur)),
            ));
        }
        tape.add(blur, t)
    }

    /// Blur-pattern estimate T^j(d_1^j).
    pub fn residual<T: Real>(&self, tape: &mut Tape<'_, T>, j: usize, d1: Var) -> Result<Var> {
        let conv = self
            .tails
            .get(j.wrapping_sub(1))
            .ok_or_else(|| Error::Invalid(format!("no tail for column {j}")))?;
        conv.forward(tape, d1)
    }
}
