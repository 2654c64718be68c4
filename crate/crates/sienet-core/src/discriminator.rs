//! Patch-level critic: four 4x4 stride-2 convolutions (64/128/256/512
//! channels, leaky-relu 0.2, instance norm after the first), then a 3x3
//! convolution to a single-channel logit map. A 256x256 image yields a
//! 16x16 grid of logits, each judging a ~78-pixel receptive field.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::layers::Conv2dLayer;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const CHANNELS: [usize; 4] = [64, 128, 256, 512];

pub struct PatchDiscriminator<T> {
    convs: Vec<Conv2dLayer<T>>,
    head: Conv2dLayer<T>,
}

impl<T: Scalar> PatchDiscriminator<T> {
    pub fn init(rng: &mut ChaCha8Rng) -> Self {
        let mut convs = Vec::with_capacity(4);
        let mut in_ch = 3;
        for (i, &out_ch) in CHANNELS.iter().enumerate() {
            // first layer keeps its bias (no norm there)
            convs.push(Conv2dLayer::init(in_ch, out_ch, 4, 2, 1, i == 0, rng));
            in_ch = out_ch;
        }
        PatchDiscriminator { convs, head: Conv2dLayer::init(in_ch, 1, 3, 1, 1, true, rng) }
    }

    /// Raw logit map, (B, 1, H/16, W/16). Sigmoid is applied by the loss
    /// where probabilities are needed.
    pub fn forward(&self, g: &mut Graph<T>, image: Var, prefix: &str) -> Result<Var> {
        let s = g.shape(image);
        if s.c != 3 {
            return Err(Error::BadShape {
                op: "discriminate",
                shape: s,
                reason: "expected a 3-channel image".into(),
            });
        }
        if s.h % 16 != 0 || s.w % 16 != 0 || s.h < 16 || s.w < 16 {
            return Err(Error::BadShape {
                op: "discriminate",
                shape: s,
                reason: "spatial size must be a positive multiple of 16".into(),
            });
        }
        let mut h = image;
        for (i, conv) in self.convs.iter().enumerate() {
            h = conv.forward(g, h, &format!("{prefix}.conv{i}"))?;
            if i > 0 {
                h = g.instance_norm(h)?;
            }
            h = g.leaky_relu(h)?;
        }
        self.head.forward(g, h, &format!("{prefix}.head"))
    }

    pub fn for_each_param(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        for (i, conv) in self.convs.iter().enumerate() {
            conv.for_each_param(&format!("{prefix}.conv{i}"), f);
        }
        self.head.for_each_param(&format!("{prefix}.head"), f);
    }

    pub fn for_each_param_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        for (i, conv) in self.convs.iter_mut().enumerate() {
            conv.for_each_param_mut(&format!("{prefix}.conv{i}"), f);
        }
        self.head.for_each_param_mut(&format!("{prefix}.head"), f);
    }
}
