//! Joint two-stage adversarial training with the siamese mechanism.
//!
//! One iteration:
//!   (a) the covered input runs through the structure generator and the
//!       content generator;
//!   (b) when the siamese branch is on, the uncovered ground-truth input
//!       runs through the same weights up to the content bottleneck; by
//!       default its feature acts as a fixed target (gradient stopped), so
//!       only the covered branch is pulled toward it;
//!   (c) structure distance, perceptual, style, siamese, and the
//!       non-saturating generator adversarial terms combine into the
//!       weighted total, and the generators take one Adam step;
//!   (d) the discriminators take one Adam step on their own objective,
//!       judging the just-generated (detached) outputs against the targets.
//!
//! Everything is driven by the run seed: initialization, the shuffled batch
//! stream, and flip decisions. Two runs with the same config produce
//! bit-identical weights, and a resumed run replays the exact trajectory of
//! an uninterrupted one.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::adam::Adam;
use crate::checkpoint::{fnv1a, Container};
use crate::config::TrainConfig;
use crate::data::{Batch, Dataset, FillingMode, SmoothMethod};
use crate::discriminator::PatchDiscriminator;
use crate::error::{Error, Result};
use crate::features::FeatureExtractor;
use crate::generator::{compose_output, ContentGenerator, StructureGenerator};
use crate::graph::Graph;
use crate::losses::{
    adversarial_losses, distance_loss, generator_adversarial_loss, perceptual_from_features,
    siamese_loss, style_from_features, total_loss, LossTerms,
};
use crate::metrics::masked_l1_255;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const PREFIX_G_STRUCT: &str = "g_struct";
const PREFIX_G_CONTENT: &str = "g_content";
const PREFIX_D_STRUCT: &str = "d_struct";
const PREFIX_D_CONTENT: &str = "d_content";

pub struct Models<T> {
    pub g_struct: StructureGenerator<T>,
    pub g_content: ContentGenerator<T>,
    pub d_struct: Option<PatchDiscriminator<T>>,
    pub d_content: PatchDiscriminator<T>,
    pub features: FeatureExtractor<T>,
}

impl<T: Scalar> Models<T> {
    pub fn init(cfg: &TrainConfig) -> Result<Self> {
        let seed = |tag: u64| ChaCha8Rng::seed_from_u64(crate::data::mix64(cfg.seed, tag));
        let features = match &cfg.feature_weights {
            Some(path) => FeatureExtractor::load(path)?,
            None => FeatureExtractor::from_seed(cfg.fe_seed),
        };
        Ok(Models {
            g_struct: StructureGenerator::init(cfg.use_filling_conv, cfg.skip, &mut seed(1))?,
            g_content: ContentGenerator::init(cfg.use_filling_conv, cfg.skip, &mut seed(2))?,
            d_struct: cfg.use_stage1_adv.then(|| PatchDiscriminator::init(&mut seed(3))),
            d_content: PatchDiscriminator::init(&mut seed(4)),
            features,
        })
    }

    pub fn for_each_param(&self, f: &mut dyn FnMut(String, &Tensor<T>)) {
        self.g_struct.for_each_param(PREFIX_G_STRUCT, f);
        self.g_content.for_each_param(PREFIX_G_CONTENT, f);
        if let Some(d) = &self.d_struct {
            d.for_each_param(PREFIX_D_STRUCT, f);
        }
        self.d_content.for_each_param(PREFIX_D_CONTENT, f);
    }

    pub fn for_each_param_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        self.g_struct.for_each_param_mut(PREFIX_G_STRUCT, f);
        self.g_content.for_each_param_mut(PREFIX_G_CONTENT, f);
        if let Some(d) = &mut self.d_struct {
            d.for_each_param_mut(PREFIX_D_STRUCT, f);
        }
        self.d_content.for_each_param_mut(PREFIX_D_CONTENT, f);
    }
}

/// Scalar loss components of one iteration.
#[derive(Clone, Copy, Debug, Default)]
pub struct LossReport {
    pub iteration: u64,
    pub distance: f64,
    pub adversarial: f64,
    pub perceptual: f64,
    pub style: f64,
    pub siamese: f64,
    pub total: f64,
    pub d_struct: f64,
    pub d_content: f64,
}

impl LossReport {
    pub const CSV_HEADER: &'static str = "iteration,distance,adv,perceptual,style,siamese,total";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.iteration, self.distance, self.adversarial, self.perceptual, self.style, self.siamese, self.total
        )
    }
}

/// Inference outputs of the two stages on one covered batch.
pub struct ForwardOutputs<T> {
    pub s_gen: Tensor<T>,
    pub y_hat: Tensor<T>,
    pub composed: Tensor<T>,
}

pub struct Trainer<T> {
    pub cfg: TrainConfig,
    pub models: Models<T>,
    pub gen_opt: Adam<T>,
    pub disc_opt: Adam<T>,
    pub iteration: u64,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let models = Models::init(&cfg)?;
        Ok(Trainer { models, gen_opt: Adam::default(), disc_opt: Adam::default(), iteration: 0, cfg })
    }

    /// One optimization iteration on a stacked batch.
    pub fn train_step(&mut self, batch: &Batch<T>) -> Result<LossReport> {
        let (report, fakes) = self.generator_step(batch)?;
        let (d_struct, d_content) = self.discriminator_step(batch, &fakes)?;
        self.iteration += 1;
        Ok(LossReport { iteration: self.iteration, d_struct, d_content, ..report })
    }

    fn generator_step(&mut self, batch: &Batch<T>) -> Result<(LossReport, (Tensor<T>, Tensor<T>))> {
        let cfg = &self.cfg;
        let mut g = Graph::new();
        let x = g.input(&batch.x)?;
        let m = g.input(&batch.m)?;
        let s = g.input(&batch.s)?;
        let y = g.input(&batch.y)?;
        let s_gt = g.input(&batch.s_gt)?;

        // covered branch through both stages
        let covered = g.concat_channels(&[x, m, s])?;
        let so = self.models.g_struct.forward(&mut g, covered, PREFIX_G_STRUCT)?;
        let co = self.models.g_content.forward(&mut g, x, m, so.s_gen, PREFIX_G_CONTENT)?;

        let dist = distance_loss(&mut g, so.s_gen, s_gt)?;

        // siamese branch: ground-truth input through the same weights
        let siamese = if cfg.use_siamese {
            let uncovered = g.concat_channels(&[y, m, s_gt])?;
            let so_gt = self.models.g_struct.forward(&mut g, uncovered, PREFIX_G_STRUCT)?;
            let f_gt = self.models.g_content.encode(&mut g, y, m, so_gt.s_gen, PREFIX_G_CONTENT)?;
            let f_gt = if cfg.siamese_symmetric { f_gt } else { g.detach(f_gt) };
            siamese_loss(&mut g, co.feature, f_gt, cfg.siamese_norm)?
        } else {
            g.input(&Tensor::scalar(T::zero()))?
        };

        // adversarial terms with frozen discriminators
        let mut adv = {
            let logits = self.models.d_content.forward(&mut g, co.y_hat, PREFIX_D_CONTENT)?;
            generator_adversarial_loss(&mut g, logits)?
        };
        if let Some(d1) = &self.models.d_struct {
            let logits = d1.forward(&mut g, so.s_gen, PREFIX_D_STRUCT)?;
            let stage1 = generator_adversarial_loss(&mut g, logits)?;
            adv = g.add(adv, stage1)?;
        }

        // perceptual and style on the content output
        let taps_y = self.models.features.forward(&mut g, y, "fe")?;
        let taps_hat = self.models.features.forward(&mut g, co.y_hat, "fe")?;
        let perceptual = perceptual_from_features(&mut g, &taps_y, &taps_hat)?;
        let style = style_from_features(&mut g, &taps_y, &taps_hat)?;

        let terms = LossTerms { distance: dist, adversarial: adv, perceptual, style, siamese };
        let total = total_loss(&mut g, &cfg.weights, &terms)?;

        let report = LossReport {
            iteration: self.iteration,
            distance: g.value(dist).item().as_f64(),
            adversarial: g.value(adv).item().as_f64(),
            perceptual: g.value(perceptual).item().as_f64(),
            style: g.value(style).item().as_f64(),
            siamese: g.value(siamese).item().as_f64(),
            total: g.value(total).item().as_f64(),
            ..Default::default()
        };
        if !report.total.is_finite() {
            return Err(Error::NonFiniteLoss { breakdown: breakdown(&report) });
        }

        let fakes = (g.value(so.s_gen).clone(), g.value(co.y_hat).clone());

        g.backward(total)?;
        let grads: HashMap<String, Vec<T>> = g.take_named_grads().into_iter().collect();
        drop(g);

        self.gen_opt.begin_step();
        let opt = &mut self.gen_opt;
        let mut failure = None;
        let mut apply = |name: String, tensor: &mut Tensor<T>| {
            if failure.is_some() {
                return;
            }
            if let Some(grad) = grads.get(&name) {
                if let Err(e) = opt.update(&name, tensor, grad) {
                    failure = Some(e);
                }
            }
        };
        self.models.g_struct.for_each_param_mut(PREFIX_G_STRUCT, &mut apply);
        self.models.g_content.for_each_param_mut(PREFIX_G_CONTENT, &mut apply);
        if let Some(e) = failure {
            return Err(e);
        }

        Ok((report, fakes))
    }

    fn discriminator_step(&mut self, batch: &Batch<T>, fakes: &(Tensor<T>, Tensor<T>)) -> Result<(f64, f64)> {
        let (fake_s, fake_y) = fakes;
        let mut g = Graph::new();

        let real_y = g.input(&batch.y)?;
        let fake_y = g.input(fake_y)?;
        let real_logits = self.models.d_content.forward(&mut g, real_y, PREFIX_D_CONTENT)?;
        let fake_logits = self.models.d_content.forward(&mut g, fake_y, PREFIX_D_CONTENT)?;
        let (d_content_loss, _) = adversarial_losses(&mut g, real_logits, fake_logits)?;
        let d_content_val = g.value(d_content_loss).item().as_f64();

        let (objective, d_struct_val) = match &self.models.d_struct {
            Some(d1) => {
                let real_s = g.input(&batch.s_gt)?;
                let fake_s = g.input(fake_s)?;
                let real_logits = d1.forward(&mut g, real_s, PREFIX_D_STRUCT)?;
                let fake_logits = d1.forward(&mut g, fake_s, PREFIX_D_STRUCT)?;
                let (d_struct_loss, _) = adversarial_losses(&mut g, real_logits, fake_logits)?;
                let val = g.value(d_struct_loss).item().as_f64();
                (g.add(d_content_loss, d_struct_loss)?, val)
            }
            None => (d_content_loss, 0.0),
        };

        if !d_content_val.is_finite() || !d_struct_val.is_finite() {
            return Err(Error::NonFiniteLoss {
                breakdown: format!("d_content={d_content_val} d_struct={d_struct_val}"),
            });
        }

        g.backward(objective)?;
        let grads: HashMap<String, Vec<T>> = g.take_named_grads().into_iter().collect();
        drop(g);

        self.disc_opt.begin_step();
        let opt = &mut self.disc_opt;
        let mut failure = None;
        let mut apply = |name: String, tensor: &mut Tensor<T>| {
            if failure.is_some() {
                return;
            }
            if let Some(grad) = grads.get(&name) {
                if let Err(e) = opt.update(&name, tensor, grad) {
                    failure = Some(e);
                }
            }
        };
        if let Some(d1) = &mut self.models.d_struct {
            d1.for_each_param_mut(PREFIX_D_STRUCT, &mut apply);
        }
        self.models.d_content.for_each_param_mut(PREFIX_D_CONTENT, &mut apply);
        if let Some(e) = failure {
            return Err(e);
        }

        Ok((d_struct_val, d_content_val))
    }

    /// Gradient-free forward of both stages; returns raw and composed outputs.
    pub fn infer(&self, batch: &Batch<T>) -> Result<ForwardOutputs<T>> {
        let mut g = Graph::new();
        let x = g.input(&batch.x)?;
        let m = g.input(&batch.m)?;
        let s = g.input(&batch.s)?;
        let covered = g.concat_channels(&[x, m, s])?;
        let so = self.models.g_struct.forward(&mut g, covered, PREFIX_G_STRUCT)?;
        let co = self.models.g_content.forward(&mut g, x, m, so.s_gen, PREFIX_G_CONTENT)?;
        let s_gen = g.value(so.s_gen).clone();
        let y_hat = g.value(co.y_hat).clone();
        let composed = compose_output(&y_hat, &batch.x, &batch.m)?;
        Ok(ForwardOutputs { s_gen, y_hat, composed })
    }

    /// Mean absolute error (0..255 scale) inside the filling bands.
    pub fn masked_error(&self, batch: &Batch<T>) -> Result<f64> {
        let out = self.infer(batch)?;
        masked_l1_255(&out.composed, &batch.y, &batch.m)
    }

    // ── Checkpointing ───────────────────────────────────────────────────

    pub fn to_container(&self) -> Container<T> {
        let mut c = Container::new();
        let config_text = self.cfg.canonical_text();
        c.meta.push(("iteration".into(), self.iteration.to_string()));
        c.meta.push(("config_hash".into(), format!("{:016x}", fnv1a(&config_text))));
        c.meta.push(("fe_source".into(), self.models.features.source.describe()));
        for line in config_text.lines() {
            let (k, v) = line.split_once('=').expect("canonical config line");
            c.meta.push((format!("config.{k}"), v.to_string()));
        }
        self.models.for_each_param(&mut |name, t| c.tensors.push((name, t.clone())));
        self.gen_opt.save_into(&mut c, "adam_gen");
        self.disc_opt.save_into(&mut c, "adam_disc");
        c
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn from_container(c: &Container<T>) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        for (key, value) in &c.meta {
            if let Some(k) = key.strip_prefix("config.") {
                cfg.set(k, value)?;
            }
        }
        let stored_hash = c
            .meta_value("config_hash")
            .ok_or_else(|| Error::Checkpoint("missing config_hash".into()))?;
        let recomputed = format!("{:016x}", fnv1a(&cfg.canonical_text()));
        if stored_hash != recomputed {
            return Err(Error::Checkpoint(format!(
                "config hash mismatch: stored {stored_hash}, recomputed {recomputed}"
            )));
        }
        let iteration: u64 = c
            .meta_value("iteration")
            .ok_or_else(|| Error::Checkpoint("missing iteration".into()))?
            .parse()
            .map_err(|_| Error::Checkpoint("bad iteration".into()))?;

        let mut trainer = Trainer::new(cfg)?;
        trainer.iteration = iteration;
        let mut failure: Option<Error> = None;
        trainer.models.for_each_param_mut(&mut |name, tensor| {
            if failure.is_some() {
                return;
            }
            match c.get(&name) {
                Some(stored) if stored.shape() == tensor.shape() => *tensor = stored.clone(),
                Some(stored) => {
                    failure = Some(Error::Checkpoint(format!(
                        "parameter `{name}`: shape {} != expected {}",
                        stored.shape(),
                        tensor.shape()
                    )))
                }
                None => failure = Some(Error::Checkpoint(format!("missing parameter `{name}`"))),
            }
        });
        if let Some(e) = failure {
            return Err(e);
        }
        trainer.gen_opt = Adam::load_from(c, "adam_gen")?;
        trainer.disc_opt = Adam::load_from(c, "adam_disc")?;
        Ok(trainer)
    }

    pub fn load_checkpoint(path: &Path) -> Result<Self> {
        Self::from_container(&Container::load(path)?)
    }
}

fn breakdown(r: &LossReport) -> String {
    format!(
        "distance={} adv={} perceptual={} style={} siamese={} total={}",
        r.distance, r.adversarial, r.perceptual, r.style, r.siamese, r.total
    )
}

/// Checkpoint file name at a given iteration.
pub fn checkpoint_path(out_dir: &Path, iteration: u64) -> PathBuf {
    out_dir.join(format!("ckpt_{iteration:07}.sien"))
}

pub fn final_checkpoint_path(out_dir: &Path) -> PathBuf {
    out_dir.join("ckpt_final.sien")
}

/// Run `trainer` against `dataset` until `cfg.iterations`, checkpointing at
/// the configured cadence and reporting every iteration through `on_iter`.
/// On an iteration failure the last state is saved as `ckpt_abort.sien`
/// before the error propagates.
pub fn train_joint<T: Scalar>(
    trainer: &mut Trainer<T>,
    dataset: &Dataset<T>,
    on_iter: &mut dyn FnMut(&LossReport),
) -> Result<()> {
    if dataset.is_empty() {
        return Err(Error::Dataset("dataset is empty".into()));
    }
    let cfg = trainer.cfg.clone();
    while trainer.iteration < cfg.iterations {
        let batch = dataset.batch(
            cfg.seed,
            cfg.batch_size,
            trainer.iteration,
            cfg.mode,
            cfg.ratio,
            cfg.hflip,
        )?;
        let report = match trainer.train_step(&batch) {
            Ok(r) => r,
            Err(e) => {
                let _ = trainer.save_checkpoint(&cfg.out_dir.join("ckpt_abort.sien"));
                return Err(e);
            }
        };
        on_iter(&report);
        if trainer.iteration % cfg.checkpoint_every == 0 && trainer.iteration < cfg.iterations {
            trainer.save_checkpoint(&checkpoint_path(&cfg.out_dir, trainer.iteration))?;
        }
    }
    trainer.save_checkpoint(&final_checkpoint_path(&cfg.out_dir))?;
    Ok(())
}

/// The smoothing method a config implies for structure-map fallback.
pub fn smooth_method(cfg: &TrainConfig) -> SmoothMethod {
    SmoothMethod::Gaussian { sigma: cfg.smooth_sigma }
}

/// Convenience: build the dataset a config points at.
pub fn load_dataset<T: Scalar>(cfg: &TrainConfig) -> Result<Dataset<T>> {
    let dir = cfg
        .data_dir
        .as_ref()
        .ok_or_else(|| Error::Config("missing config key `data_dir`".into()))?;
    Dataset::load(dir, cfg.structure_dir.as_deref(), cfg.resolution, &smooth_method(cfg))
}

/// Single covered batch for one image tensor (inference path).
pub fn batch_for_image<T: Scalar>(
    image: &Tensor<T>,
    mode: FillingMode,
    ratio: f64,
    size: usize,
    smooth: &SmoothMethod,
) -> Result<Batch<T>> {
    let task = crate::data::make_filling_task(image, mode, ratio, size, smooth)?;
    Ok(Batch { x: task.x, m: task.m, s: task.s, y: task.y, s_gt: task.s_gt })
}
