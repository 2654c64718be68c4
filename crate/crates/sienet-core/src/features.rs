//! Frozen five-stage convolutional pyramid supplying the activation maps
//! behind the perceptual and style losses.
//!
//! Stage i (1-based) has channels 64/128/256/512/512 and spatial size
//! input/2^(i-1); taps are taken after each stage's relu. Weights come from
//! a deterministic orthogonal initialization of a fixed seed, or from a
//! weights file in the checkpoint container format. They are never trained:
//! gradients flow through the stages into the image, not into the weights.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Container;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::scalar::Scalar;
use crate::shape::Shape;
use crate::tensor::{orthogonal_init, Tensor};

pub const STAGE_CHANNELS: [usize; 5] = [64, 128, 256, 512, 512];

/// Where the frozen weights came from; recorded in checkpoints.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum FeatureSource {
    Seed(u64),
    File(String),
}

impl FeatureSource {
    pub fn describe(&self) -> String {
        match self {
            FeatureSource::Seed(s) => format!("seed:{s}"),
            FeatureSource::File(p) => format!("file:{p}"),
        }
    }
}

pub struct FeatureExtractor<T> {
    weights: Vec<Tensor<T>>,
    biases: Vec<Tensor<T>>,
    pub source: FeatureSource,
}

impl<T: Scalar> FeatureExtractor<T> {
    /// Deterministic orthogonal weights (gain sqrt(2) for the relu stages).
    pub fn from_seed(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gain = 2.0f64.sqrt();
        let mut weights = Vec::with_capacity(5);
        let mut biases = Vec::with_capacity(5);
        let mut in_ch = 3;
        for &out_ch in &STAGE_CHANNELS {
            weights.push(orthogonal_init(Shape::new(out_ch, in_ch, 3, 3), gain, &mut rng));
            biases.push(Tensor::zeros(Shape::new(1, out_ch, 1, 1)));
            in_ch = out_ch;
        }
        FeatureExtractor { weights, biases, source: FeatureSource::Seed(seed) }
    }

    /// Load substitute weights (e.g. converted pretrained ones) from a
    /// named-tensor container with records `stage{i}.weight` / `stage{i}.bias`.
    pub fn load(path: &Path) -> Result<Self> {
        let container = Container::<T>::load(path)?;
        let mut weights = Vec::with_capacity(5);
        let mut biases = Vec::with_capacity(5);
        let mut in_ch = 3;
        for (i, &out_ch) in STAGE_CHANNELS.iter().enumerate() {
            let w = container
                .get(&format!("stage{i}.weight"))
                .ok_or_else(|| Error::Checkpoint(format!("missing stage{i}.weight")))?;
            let expect = Shape::new(out_ch, in_ch, 3, 3);
            if w.shape() != expect {
                return Err(Error::Checkpoint(format!(
                    "stage{i}.weight has shape {}, expected {expect}",
                    w.shape()
                )));
            }
            let b = container
                .get(&format!("stage{i}.bias"))
                .ok_or_else(|| Error::Checkpoint(format!("missing stage{i}.bias")))?;
            if b.shape() != Shape::new(1, out_ch, 1, 1) {
                return Err(Error::Checkpoint(format!("stage{i}.bias has wrong shape")));
            }
            weights.push(w.clone());
            biases.push(b.clone());
            in_ch = out_ch;
        }
        Ok(FeatureExtractor {
            weights,
            biases,
            source: FeatureSource::File(path.display().to_string()),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut container = Container::<T>::new();
        container.meta.push(("kind".into(), "feature_extractor".into()));
        container.meta.push(("source".into(), self.source.describe()));
        for i in 0..5 {
            container.tensors.push((format!("stage{i}.weight"), self.weights[i].clone()));
            container.tensors.push((format!("stage{i}.bias"), self.biases[i].clone()));
        }
        container.save(path)
    }

    /// Activation maps of the five stages, outermost first. The weights are
    /// registered without gradients; the image may carry them.
    pub fn forward(&self, g: &mut Graph<T>, image: Var, prefix: &str) -> Result<Vec<Var>> {
        let s = g.shape(image);
        if s.c != 3 {
            return Err(Error::BadShape {
                op: "extract_features",
                shape: s,
                reason: "expected a 3-channel image".into(),
            });
        }
        if s.h % 16 != 0 || s.w % 16 != 0 || s.h < 16 || s.w < 16 {
            return Err(Error::BadShape {
                op: "extract_features",
                shape: s,
                reason: "spatial size must be a positive multiple of 16".into(),
            });
        }
        let mut taps = Vec::with_capacity(5);
        let mut h = image;
        for i in 0..5 {
            let w = g.param(&format!("{prefix}.stage{i}.weight"), &self.weights[i], false)?;
            let b = g.param(&format!("{prefix}.stage{i}.bias"), &self.biases[i], false)?;
            // stage 1 keeps resolution; later stages halve it
            let stride = if i == 0 { 1 } else { 2 };
            h = g.conv2d(h, w, Some(b), stride, 1)?;
            h = g.relu(h)?;
            taps.push(h);
        }
        Ok(taps)
    }
}
