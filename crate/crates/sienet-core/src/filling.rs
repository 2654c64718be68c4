//! Adaptive filling convolution: a boundary-sensitive operator that blends a
//! learned padding convolution with a per-channel neighborhood pass-through
//! under a learned, per-location mask modulation.
//!
//! For a K-position kernel (K = k*k sampling locations) the output at p0 is
//!
//!   y(p0) = m(p0) * (sum_k w_k . x(p0 + p_k) + bias) + (1 - m(p0)) * skip(p0)
//!
//! where m = sigmoid(conv(x; mask_weights) + mask_bias) is one scalar per
//! output location, broadcast over kernel positions and channels, and
//! `skip` is either the K-position per-channel box sum (default) or the
//! center pixel alone. With m forced to 1 the operator reduces exactly to a
//! standard convolution; with m forced to 0 and a 1x1 kernel it is the
//! identity. A fresh initialization (zero mask weights, bias +6) starts with
//! m ~ 1 everywhere, i.e. as a plain convolution.
//!
//! The operator is channel-preserving (out_ch == in_ch): the pass-through
//! branch adds the input's own channels, which only typechecks when the
//! channel count does not change. That matches its role at the encoder
//! bottleneck. Out-of-bounds samples are zero: the operator exists to
//! predict values where context is absent, and zero marks absence.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::scalar::Scalar;
use crate::shape::Shape;
use crate::tensor::Tensor;

/// Which form the (1 - m) pass-through branch takes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum SkipMode {
    /// K-position per-channel box sum (the literal blending formula).
    #[default]
    Box,
    /// Center pixel only.
    Center,
}

impl SkipMode {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "box" => Some(SkipMode::Box),
            "center" => Some(SkipMode::Center),
            _ => None,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            SkipMode::Box => "box",
            SkipMode::Center => "center",
        }
    }
}

/// Test/ablation override for the mask branch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum MaskOverride<T> {
    /// m computed from the input by the mask convolution (normal path).
    Learned,
    /// m clamped to a constant everywhere.
    Forced(T),
}

/// Bias that makes a fresh mask start at sigmoid(6) ~ 0.9975, i.e. m ~ 1.
pub const MASK_BIAS_INIT: f64 = 6.0;

#[derive(Clone, Debug)]
pub struct FillingConv<T> {
    pub padding_weights: Tensor<T>,
    pub padding_bias: Tensor<T>,
    pub mask_weights: Tensor<T>,
    pub mask_bias: Tensor<T>,
    pub skip: SkipMode,
    channels: usize,
    kernel: usize,
}

pub struct FillingOutput {
    pub y: Var,
    /// The modulation map m, (B, 1, H, W).
    pub mask: Var,
}

impl<T: Scalar> FillingConv<T> {
    /// `kernel` must be odd; the operator preserves the channel count.
    pub fn init(channels: usize, kernel: usize, skip: SkipMode, rng: &mut ChaCha8Rng) -> Result<Self> {
        if kernel % 2 == 0 || kernel == 0 {
            return Err(Error::BadArg {
                op: "filling_conv",
                reason: format!("kernel {kernel} must be odd and square"),
            });
        }
        Ok(FillingConv {
            padding_weights: Tensor::randn(Shape::new(channels, channels, kernel, kernel), 0.02, rng),
            padding_bias: Tensor::zeros(Shape::new(1, channels, 1, 1)),
            mask_weights: Tensor::zeros(Shape::new(1, channels, kernel, kernel)),
            mask_bias: Tensor::full(Shape::new(1, 1, 1, 1), T::from_f64(MASK_BIAS_INIT)),
            skip,
            channels,
            kernel,
        })
    }

    /// Construct from explicit parameter tensors (tests, checkpoint load).
    pub fn from_parts(
        padding_weights: Tensor<T>,
        padding_bias: Tensor<T>,
        mask_weights: Tensor<T>,
        mask_bias: Tensor<T>,
        skip: SkipMode,
    ) -> Result<Self> {
        let ws = padding_weights.shape();
        if ws.b != ws.c {
            return Err(Error::BadShape {
                op: "filling_conv",
                shape: ws,
                reason: "operator is channel-preserving (out_ch must equal in_ch)".into(),
            });
        }
        if ws.h != ws.w || ws.h % 2 == 0 {
            return Err(Error::BadShape {
                op: "filling_conv",
                shape: ws,
                reason: "kernel must be odd and square".into(),
            });
        }
        let ms = mask_weights.shape();
        if ms != Shape::new(1, ws.c, ws.h, ws.w) {
            return Err(Error::BadShape {
                op: "filling_conv",
                shape: ms,
                reason: format!("mask weights must be (1, {}, {}, {})", ws.c, ws.h, ws.w),
            });
        }
        Ok(FillingConv {
            channels: ws.c,
            kernel: ws.h,
            padding_weights,
            padding_bias,
            mask_weights,
            mask_bias,
            skip,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn kernel(&self) -> usize {
        self.kernel
    }

    fn pad(&self) -> usize {
        (self.kernel - 1) / 2
    }

    /// The modulation map alone: m = sigmoid(conv(x; mask_weights) + mask_bias).
    pub fn mask_branch(&self, g: &mut Graph<T>, x: Var, prefix: &str) -> Result<Var> {
        let xs = g.shape(x);
        if xs.c != self.channels {
            return Err(Error::BadShape {
                op: "filling_conv",
                shape: xs,
                reason: format!("expected {} channels", self.channels),
            });
        }
        let mw = g.param(&format!("{prefix}.mask_weight"), &self.mask_weights, true)?;
        let mb = g.param(&format!("{prefix}.mask_bias"), &self.mask_bias, true)?;
        let logits = g.conv2d(x, mw, Some(mb), 1, self.pad())?;
        g.sigmoid(logits)
    }

    pub fn forward(&self, g: &mut Graph<T>, x: Var, prefix: &str) -> Result<FillingOutput> {
        self.forward_with_mask(g, x, prefix, MaskOverride::Learned)
    }

    /// Forward with the mask optionally clamped (reduction/ablation probes).
    pub fn forward_with_mask(
        &self,
        g: &mut Graph<T>,
        x: Var,
        prefix: &str,
        mask: MaskOverride<T>,
    ) -> Result<FillingOutput> {
        let xs = g.shape(x);
        if xs.c != self.channels {
            return Err(Error::BadShape {
                op: "filling_conv",
                shape: xs,
                reason: format!("expected {} channels", self.channels),
            });
        }
        let w = g.param(&format!("{prefix}.weight"), &self.padding_weights, true)?;
        let b = g.param(&format!("{prefix}.bias"), &self.padding_bias, true)?;
        let mw = g.param(&format!("{prefix}.mask_weight"), &self.mask_weights, true)?;
        let mb = g.param(&format!("{prefix}.mask_bias"), &self.mask_bias, true)?;
        filling_conv_graph(g, x, w, b, mw, mb, self.skip, mask)
    }

    pub fn for_each_param(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        f(format!("{prefix}.weight"), &self.padding_weights);
        f(format!("{prefix}.bias"), &self.padding_bias);
        f(format!("{prefix}.mask_weight"), &self.mask_weights);
        f(format!("{prefix}.mask_bias"), &self.mask_bias);
    }

    pub fn for_each_param_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        f(format!("{prefix}.weight"), &mut self.padding_weights);
        f(format!("{prefix}.bias"), &mut self.padding_bias);
        f(format!("{prefix}.mask_weight"), &mut self.mask_weights);
        f(format!("{prefix}.mask_bias"), &mut self.mask_bias);
    }
}

/// The blending composite over already-recorded graph vars:
///   y = m * (conv(x; w) + b) + (1 - m) * skip(x)
/// with m = sigmoid(conv(x; mask_w) + mask_b) unless overridden.
/// Gradient-check suites drive this directly with their own leaves.
#[allow(clippy::too_many_arguments)]
pub fn filling_conv_graph<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    w: Var,
    b: Var,
    mask_w: Var,
    mask_b: Var,
    skip_mode: SkipMode,
    mask: MaskOverride<T>,
) -> Result<FillingOutput> {
    let ws = g.shape(w);
    if ws.b != ws.c {
        return Err(Error::BadShape {
            op: "filling_conv",
            shape: ws,
            reason: "operator is channel-preserving (out_ch must equal in_ch)".into(),
        });
    }
    if ws.h != ws.w || ws.h % 2 == 0 {
        return Err(Error::BadShape {
            op: "filling_conv",
            shape: ws,
            reason: "kernel must be odd and square".into(),
        });
    }
    let kernel = ws.h;
    let pad = (kernel - 1) / 2;
    let xs = g.shape(x);

    let m = match mask {
        MaskOverride::Learned => {
            let logits = g.conv2d(x, mask_w, Some(mask_b), 1, pad)?;
            g.sigmoid(logits)?
        }
        MaskOverride::Forced(value) => {
            let shape = Shape::new(xs.b, 1, xs.h, xs.w);
            g.input(&Tensor::full(shape, value))?
        }
    };

    let padded = g.conv2d(x, w, Some(b), 1, pad)?;
    let skip = match skip_mode {
        SkipMode::Box => g.box_sum(x, kernel)?,
        SkipMode::Center => x,
    };

    let gated = g.mul(m, padded)?;
    let inv_m = g.scale_shift(m, -T::one(), T::one())?;
    let pass = g.mul(inv_m, skip)?;
    let y = g.add(gated, pass)?;
    Ok(FillingOutput { y, mask: m })
}
