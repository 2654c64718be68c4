//! The two-stage generator: a structure generator that uncovers a smooth
//! structure map, and a content generator (encoder + decoder) that turns the
//! canvas, filling map, and generated structure into the final image.
//!
//! Both encoders downsample 8x over three stride-2 stages (64/128/256
//! channels), run a 7x7 filling convolution at the bottleneck, and decode
//! through residual blocks and three nearest-neighbor upsampling stages.
//! Inputs live in [-1, 1]; both output heads are tanh.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::filling::{FillingConv, SkipMode};
use crate::graph::{Graph, Var};
use crate::layers::{Conv2dLayer, ResidualBlock};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Channel plan of the encoder stages.
const ENC_CHANNELS: [usize; 3] = [64, 128, 256];
/// Canvas (3) + filling map (1) + structure (3).
pub const INPUT_CHANNELS: usize = 7;
const BOTTLENECK_KERNEL: usize = 7;

/// The encoder bottleneck: the filling convolution normally, a plain 7x7
/// convolution when ablated.
#[derive(Clone, Debug)]
pub enum Bottleneck<T> {
    Filling(FillingConv<T>),
    Standard(Conv2dLayer<T>),
}

impl<T: Scalar> Bottleneck<T> {
    fn init(use_filling: bool, skip: SkipMode, rng: &mut ChaCha8Rng) -> Result<Self> {
        let ch = ENC_CHANNELS[2];
        Ok(if use_filling {
            Bottleneck::Filling(FillingConv::init(ch, BOTTLENECK_KERNEL, skip, rng)?)
        } else {
            Bottleneck::Standard(Conv2dLayer::init(ch, ch, BOTTLENECK_KERNEL, 1, 3, false, rng))
        })
    }

    fn forward(&self, g: &mut Graph<T>, x: Var, prefix: &str) -> Result<Var> {
        match self {
            Bottleneck::Filling(fc) => Ok(fc.forward(g, x, prefix)?.y),
            Bottleneck::Standard(conv) => conv.forward(g, x, prefix),
        }
    }

    fn for_each_param(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        match self {
            Bottleneck::Filling(fc) => fc.for_each_param(prefix, f),
            Bottleneck::Standard(conv) => conv.for_each_param(prefix, f),
        }
    }

    fn for_each_param_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        match self {
            Bottleneck::Filling(fc) => fc.for_each_param_mut(prefix, f),
            Bottleneck::Standard(conv) => conv.for_each_param_mut(prefix, f),
        }
    }
}

/// Shared encoder topology: 7x7 stride-2 stem (reflect padded), two 4x4
/// stride-2 stages, bottleneck. Leaky-relu (0.2) and instance norm
/// throughout.
#[derive(Clone, Debug)]
struct Encoder<T> {
    stem: Conv2dLayer<T>,
    down1: Conv2dLayer<T>,
    down2: Conv2dLayer<T>,
    bottleneck: Bottleneck<T>,
}

impl<T: Scalar> Encoder<T> {
    fn init(use_filling: bool, skip: SkipMode, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(Encoder {
            stem: Conv2dLayer::init(INPUT_CHANNELS, ENC_CHANNELS[0], 7, 2, 0, false, rng),
            down1: Conv2dLayer::init(ENC_CHANNELS[0], ENC_CHANNELS[1], 4, 2, 1, false, rng),
            down2: Conv2dLayer::init(ENC_CHANNELS[1], ENC_CHANNELS[2], 4, 2, 1, false, rng),
            bottleneck: Bottleneck::init(use_filling, skip, rng)?,
        })
    }

    fn forward(&self, g: &mut Graph<T>, x: Var, prefix: &str) -> Result<Var> {
        let s = g.shape(x);
        if s.c != INPUT_CHANNELS {
            return Err(Error::BadShape {
                op: "generator",
                shape: s,
                reason: format!("expected {INPUT_CHANNELS} input channels"),
            });
        }
        if s.h % 8 != 0 || s.w % 8 != 0 || s.h < 8 || s.w < 8 {
            return Err(Error::BadShape {
                op: "generator",
                shape: s,
                reason: "spatial size must be a positive multiple of 8".into(),
            });
        }
        let h = g.reflect_pad(x, 3)?;
        let h = self.stem.forward(g, h, &format!("{prefix}.stem"))?;
        let h = g.instance_norm(h)?;
        let h = g.leaky_relu(h)?;
        let h = self.down1.forward(g, h, &format!("{prefix}.down1"))?;
        let h = g.instance_norm(h)?;
        let h = g.leaky_relu(h)?;
        let h = self.down2.forward(g, h, &format!("{prefix}.down2"))?;
        let h = g.instance_norm(h)?;
        let h = g.leaky_relu(h)?;
        let h = self.bottleneck.forward(g, h, &format!("{prefix}.fill"))?;
        let h = g.instance_norm(h)?;
        g.leaky_relu(h)
    }

    fn for_each_param(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        self.stem.for_each_param(&format!("{prefix}.stem"), f);
        self.down1.for_each_param(&format!("{prefix}.down1"), f);
        self.down2.for_each_param(&format!("{prefix}.down2"), f);
        self.bottleneck.for_each_param(&format!("{prefix}.fill"), f);
    }

    fn for_each_param_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        self.stem.for_each_param_mut(&format!("{prefix}.stem"), f);
        self.down1.for_each_param_mut(&format!("{prefix}.down1"), f);
        self.down2.for_each_param_mut(&format!("{prefix}.down2"), f);
        self.bottleneck.for_each_param_mut(&format!("{prefix}.fill"), f);
    }
}

/// One decoder stage: nearest x2 upsample then 3x3 conv.
#[derive(Clone, Debug)]
struct UpStage<T> {
    conv: Conv2dLayer<T>,
}

impl<T: Scalar> UpStage<T> {
    fn init(in_ch: usize, out_ch: usize, head: bool, rng: &mut ChaCha8Rng) -> Self {
        UpStage { conv: Conv2dLayer::init(in_ch, out_ch, 3, 1, 1, head, rng) }
    }

    fn forward(&self, g: &mut Graph<T>, x: Var, prefix: &str) -> Result<Var> {
        let h = g.upsample_nearest(x, 2)?;
        self.conv.forward(g, h, prefix)
    }
}

pub struct StructureOutput {
    /// Generated structure map, (B, 3, H, W) in [-1, 1].
    pub s_gen: Var,
    /// Encoder bottleneck activation, (B, 256, H/8, W/8).
    pub bottleneck: Var,
}

pub struct ContentOutput {
    /// Generated image, (B, 3, H, W) in [-1, 1].
    pub y_hat: Var,
    /// Encoder bottleneck activation, (B, 256, H/8, W/8); the feature
    /// compared by the siamese loss.
    pub feature: Var,
}

pub struct StructureGenerator<T> {
    encoder: Encoder<T>,
    res: Vec<ResidualBlock<T>>,
    up1: UpStage<T>,
    up2: UpStage<T>,
    head: UpStage<T>,
}

impl<T: Scalar> StructureGenerator<T> {
    pub fn init(use_filling: bool, skip: SkipMode, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(StructureGenerator {
            encoder: Encoder::init(use_filling, skip, rng)?,
            res: vec![ResidualBlock::init(ENC_CHANNELS[2], rng), ResidualBlock::init(ENC_CHANNELS[2], rng)],
            up1: UpStage::init(ENC_CHANNELS[2], ENC_CHANNELS[1], false, rng),
            up2: UpStage::init(ENC_CHANNELS[1], ENC_CHANNELS[0], false, rng),
            head: UpStage::init(ENC_CHANNELS[0], 3, true, rng),
        })
    }

    /// `input` is the 7-channel concat of canvas, filling map, structure.
    pub fn forward(&self, g: &mut Graph<T>, input: Var, prefix: &str) -> Result<StructureOutput> {
        let bottleneck = self.encoder.forward(g, input, &format!("{prefix}.enc"))?;
        let mut h = bottleneck;
        for (i, block) in self.res.iter().enumerate() {
            h = block.forward(g, h, &format!("{prefix}.res{i}"))?;
        }
        let h = self.up1.forward(g, h, &format!("{prefix}.up1"))?;
        let h = g.instance_norm(h)?;
        let h = g.relu(h)?;
        let h = self.up2.forward(g, h, &format!("{prefix}.up2"))?;
        let h = g.instance_norm(h)?;
        let h = g.relu(h)?;
        let h = self.head.forward(g, h, &format!("{prefix}.head"))?;
        let s_gen = g.tanh(h)?;
        Ok(StructureOutput { s_gen, bottleneck })
    }

    pub fn for_each_param(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        self.encoder.for_each_param(&format!("{prefix}.enc"), f);
        for (i, block) in self.res.iter().enumerate() {
            block.for_each_param(&format!("{prefix}.res{i}"), f);
        }
        self.up1.conv.for_each_param(&format!("{prefix}.up1"), f);
        self.up2.conv.for_each_param(&format!("{prefix}.up2"), f);
        self.head.conv.for_each_param(&format!("{prefix}.head"), f);
    }

    pub fn for_each_param_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        self.encoder.for_each_param_mut(&format!("{prefix}.enc"), f);
        for (i, block) in self.res.iter_mut().enumerate() {
            block.for_each_param_mut(&format!("{prefix}.res{i}"), f);
        }
        self.up1.conv.for_each_param_mut(&format!("{prefix}.up1"), f);
        self.up2.conv.for_each_param_mut(&format!("{prefix}.up2"), f);
        self.head.conv.for_each_param_mut(&format!("{prefix}.head"), f);
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.for_each_param("g", &mut |_, t| n += t.numel());
        n
    }
}

/// Same topology as the structure generator plus one extra residual block
/// before each of the last two upsampling stages.
pub struct ContentGenerator<T> {
    encoder: Encoder<T>,
    res: Vec<ResidualBlock<T>>,
    up1: UpStage<T>,
    dec_res1: ResidualBlock<T>,
    up2: UpStage<T>,
    dec_res2: ResidualBlock<T>,
    head: UpStage<T>,
}

impl<T: Scalar> ContentGenerator<T> {
    pub fn init(use_filling: bool, skip: SkipMode, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(ContentGenerator {
            encoder: Encoder::init(use_filling, skip, rng)?,
            res: vec![ResidualBlock::init(ENC_CHANNELS[2], rng), ResidualBlock::init(ENC_CHANNELS[2], rng)],
            up1: UpStage::init(ENC_CHANNELS[2], ENC_CHANNELS[1], false, rng),
            dec_res1: ResidualBlock::init(ENC_CHANNELS[1], rng),
            up2: UpStage::init(ENC_CHANNELS[1], ENC_CHANNELS[0], false, rng),
            dec_res2: ResidualBlock::init(ENC_CHANNELS[0], rng),
            head: UpStage::init(ENC_CHANNELS[0], 3, true, rng),
        })
    }

    /// Encoder only: the long-range feature used by the siamese loss.
    pub fn encode(&self, g: &mut Graph<T>, x: Var, m: Var, s_gen: Var, prefix: &str) -> Result<Var> {
        let input = self.concat_input(g, x, m, s_gen)?;
        self.encoder.forward(g, input, &format!("{prefix}.enc"))
    }

    pub fn forward(&self, g: &mut Graph<T>, x: Var, m: Var, s_gen: Var, prefix: &str) -> Result<ContentOutput> {
        let feature = self.encode(g, x, m, s_gen, prefix)?;
        let mut h = feature;
        for (i, block) in self.res.iter().enumerate() {
            h = block.forward(g, h, &format!("{prefix}.res{i}"))?;
        }
        let h = self.up1.forward(g, h, &format!("{prefix}.up1"))?;
        let h = g.instance_norm(h)?;
        let h = g.relu(h)?;
        let h = self.dec_res1.forward(g, h, &format!("{prefix}.dres1"))?;
        let h = self.up2.forward(g, h, &format!("{prefix}.up2"))?;
        let h = g.instance_norm(h)?;
        let h = g.relu(h)?;
        let h = self.dec_res2.forward(g, h, &format!("{prefix}.dres2"))?;
        let h = self.head.forward(g, h, &format!("{prefix}.head"))?;
        let y_hat = g.tanh(h)?;
        Ok(ContentOutput { y_hat, feature })
    }

    fn concat_input(&self, g: &mut Graph<T>, x: Var, m: Var, s_gen: Var) -> Result<Var> {
        let (xs, ss) = (g.shape(x), g.shape(s_gen));
        if (xs.h, xs.w) != (ss.h, ss.w) {
            return Err(Error::ShapeMismatch { op: "content_forward", lhs: xs, rhs: ss });
        }
        g.concat_channels(&[x, m, s_gen])
    }

    pub fn for_each_param(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        self.encoder.for_each_param(&format!("{prefix}.enc"), f);
        for (i, block) in self.res.iter().enumerate() {
            block.for_each_param(&format!("{prefix}.res{i}"), f);
        }
        self.up1.conv.for_each_param(&format!("{prefix}.up1"), f);
        self.dec_res1.for_each_param(&format!("{prefix}.dres1"), f);
        self.up2.conv.for_each_param(&format!("{prefix}.up2"), f);
        self.dec_res2.for_each_param(&format!("{prefix}.dres2"), f);
        self.head.conv.for_each_param(&format!("{prefix}.head"), f);
    }

    pub fn for_each_param_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        self.encoder.for_each_param_mut(&format!("{prefix}.enc"), f);
        for (i, block) in self.res.iter_mut().enumerate() {
            block.for_each_param_mut(&format!("{prefix}.res{i}"), f);
        }
        self.up1.conv.for_each_param_mut(&format!("{prefix}.up1"), f);
        self.dec_res1.for_each_param_mut(&format!("{prefix}.dres1"), f);
        self.up2.conv.for_each_param_mut(&format!("{prefix}.up2"), f);
        self.dec_res2.for_each_param_mut(&format!("{prefix}.dres2"), f);
        self.head.conv.for_each_param_mut(&format!("{prefix}.head"), f);
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.for_each_param("g", &mut |_, t| n += t.numel());
        n
    }
}

/// Paste the known pixels back: out = m * y_hat + (1 - m) * x.
/// `m` is (B, 1, H, W) and broadcasts over the color channels.
pub fn compose_output<T: Scalar>(y_hat: &Tensor<T>, x: &Tensor<T>, m: &Tensor<T>) -> Result<Tensor<T>> {
    let (ys, xs, ms) = (y_hat.shape(), x.shape(), m.shape());
    if ys != xs {
        return Err(Error::ShapeMismatch { op: "compose_output", lhs: ys, rhs: xs });
    }
    if !ms.broadcasts_with(&ys) {
        return Err(Error::ShapeMismatch { op: "compose_output", lhs: ms, rhs: ys });
    }
    let n = ys.plane();
    let mut out = vec![T::zero(); ys.numel()];
    for b in 0..ys.b {
        for c in 0..ys.c {
            let mp = (b * ms.c + c.min(ms.c - 1)) * n;
            let yp = (b * ys.c + c) * n;
            for i in 0..n {
                let mv = m.data()[mp + i];
                out[yp + i] = mv * y_hat.data()[yp + i] + (T::one() - mv) * x.data()[yp + i];
            }
        }
    }
    Tensor::from_vec(ys, out)
}
