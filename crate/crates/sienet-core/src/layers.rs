//! Building blocks shared by the generators, discriminators, and the
//! feature extractor.

use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::scalar::Scalar;
use crate::shape::Shape;
use crate::tensor::Tensor;

/// Standard deviation of the Gaussian used for conv weight init.
pub const WEIGHT_INIT_STD: f64 = 0.02;

#[derive(Clone, Debug)]
pub struct Conv2dLayer<T> {
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
    pub stride: usize,
    pub pad: usize,
}

impl<T: Scalar> Conv2dLayer<T> {
    /// Layers followed by instance norm carry no bias (the norm removes it).
    pub fn init(
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Conv2dLayer {
            weight: Tensor::randn(Shape::new(out_ch, in_ch, kernel, kernel), WEIGHT_INIT_STD, rng),
            bias: bias.then(|| Tensor::zeros(Shape::new(1, out_ch, 1, 1))),
            stride,
            pad,
        }
    }

    pub fn forward(&self, g: &mut Graph<T>, x: Var, prefix: &str) -> Result<Var> {
        let w = g.param(&format!("{prefix}.weight"), &self.weight, true)?;
        let b = match &self.bias {
            Some(bias) => Some(g.param(&format!("{prefix}.bias"), bias, true)?),
            None => None,
        };
        g.conv2d(x, w, b, self.stride, self.pad)
    }

    pub fn for_each_param(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        f(format!("{prefix}.weight"), &self.weight);
        if let Some(b) = &self.bias {
            f(format!("{prefix}.bias"), b);
        }
    }

    pub fn for_each_param_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        f(format!("{prefix}.weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(format!("{prefix}.bias"), b);
        }
    }
}

/// conv-norm-relu-conv-norm plus the identity.
#[derive(Clone, Debug)]
pub struct ResidualBlock<T> {
    pub conv1: Conv2dLayer<T>,
    pub conv2: Conv2dLayer<T>,
}

impl<T: Scalar> ResidualBlock<T> {
    pub fn init(channels: usize, rng: &mut ChaCha8Rng) -> Self {
        ResidualBlock {
            conv1: Conv2dLayer::init(channels, channels, 3, 1, 1, false, rng),
            conv2: Conv2dLayer::init(channels, channels, 3, 1, 1, false, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph<T>, x: Var, prefix: &str) -> Result<Var> {
        let h = self.conv1.forward(g, x, &format!("{prefix}.conv1"))?;
        let h = g.instance_norm(h)?;
        let h = g.relu(h)?;
        let h = self.conv2.forward(g, h, &format!("{prefix}.conv2"))?;
        let h = g.instance_norm(h)?;
        g.add(x, h)
    }

    pub fn for_each_param(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        self.conv1.for_each_param(&format!("{prefix}.conv1"), f);
        self.conv2.for_each_param(&format!("{prefix}.conv2"), f);
    }

    pub fn for_each_param_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        self.conv1.for_each_param_mut(&format!("{prefix}.conv1"), f);
        self.conv2.for_each_param_mut(&format!("{prefix}.conv2"), f);
    }
}
