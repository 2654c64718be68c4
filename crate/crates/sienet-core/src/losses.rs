//! Training objectives: siamese feature loss, adversarial losses, structure
//! distance, perceptual and style losses, and their weighted total.
//!
//! Norm conventions: the siamese L2 is a mean squared error and the L1
//! losses are mean absolute errors, so the default weights are scale-free
//! across resolutions. Adversarial terms are evaluated in logit space with
//! softplus, never by exponentiating large logits.

use crate::error::{Error, Result};
use crate::features::FeatureExtractor;
use crate::graph::{Graph, Var};
use crate::scalar::Scalar;

/// Weights of the total objective, in the order distance, adversarial,
/// perceptual, style, siamese. Defaults (5, 1, 0.1, 250, 1).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub dist: f64,
    pub adv: f64,
    pub perceptual: f64,
    pub style: f64,
    pub siamese: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { dist: 5.0, adv: 1.0, perceptual: 0.1, style: 250.0, siamese: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_dist", self.dist),
            ("lambda_adv", self.adv),
            ("lambda_p", self.perceptual),
            ("lambda_s", self.style),
            ("lambda_sie", self.siamese),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::BadArg {
                    op: "loss_weights",
                    reason: format!("{name} must be a nonnegative finite number, got {v}"),
                });
            }
        }
        Ok(())
    }
}

/// How the siamese feature gap is reduced to a scalar.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum SiameseNorm {
    /// Mean squared error (default).
    #[default]
    Mse,
    /// Root of the mean squared error.
    Rmse,
}

impl SiameseNorm {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "mse" => Some(SiameseNorm::Mse),
            "rmse" => Some(SiameseNorm::Rmse),
            _ => None,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            SiameseNorm::Mse => "mse",
            SiameseNorm::Rmse => "rmse",
        }
    }
}

fn same_shape<T: Scalar>(op: &'static str, g: &Graph<T>, a: Var, b: Var) -> Result<()> {
    if g.shape(a) != g.shape(b) {
        return Err(Error::ShapeMismatch { op, lhs: g.shape(a), rhs: g.shape(b) });
    }
    Ok(())
}

/// Mean squared gap between the covered-input and ground-truth-input
/// bottleneck features of the shared encoder.
pub fn siamese_loss<T: Scalar>(g: &mut Graph<T>, f_prime: Var, f_gt: Var, norm: SiameseNorm) -> Result<Var> {
    same_shape("siamese_loss", g, f_prime, f_gt)?;
    let diff = g.sub(f_prime, f_gt)?;
    let sq = g.mul(diff, diff)?;
    let mse = g.mean_all(sq)?;
    match norm {
        SiameseNorm::Mse => Ok(mse),
        SiameseNorm::Rmse => g.sqrt(mse),
    }
}

/// Mean absolute difference.
pub fn l1_mean<T: Scalar>(g: &mut Graph<T>, a: Var, b: Var) -> Result<Var> {
    same_shape("l1_mean", g, a, b)?;
    let diff = g.sub(a, b)?;
    let abs = g.abs(diff)?;
    g.mean_all(abs)
}

/// Structure distance: mean absolute gap between generated and ground-truth
/// structure maps, over the full image.
pub fn distance_loss<T: Scalar>(g: &mut Graph<T>, s_gen: Var, s_gt: Var) -> Result<Var> {
    same_shape("distance_loss", g, s_gen, s_gt)?;
    l1_mean(g, s_gen, s_gt)
}

/// Discriminator and generator objectives from patch logit maps.
///
/// d_loss = -mean log sig(D(real)) - mean log(1 - sig(D(fake)))
/// g_loss = -mean log sig(D(fake))   (non-saturating)
pub fn adversarial_losses<T: Scalar>(g: &mut Graph<T>, real_logits: Var, fake_logits: Var) -> Result<(Var, Var)> {
    same_shape("adversarial_losses", g, real_logits, fake_logits)?;
    let d_loss = {
        let neg_real = g.scale_shift(real_logits, -T::one(), T::zero())?;
        let real_term = g.softplus(neg_real)?; // -log sig(x) = softplus(-x)
        let real_mean = g.mean_all(real_term)?;
        let fake_term = g.softplus(fake_logits)?; // -log(1 - sig(x)) = softplus(x)
        let fake_mean = g.mean_all(fake_term)?;
        g.add(real_mean, fake_mean)?
    };
    let g_loss = generator_adversarial_loss(g, fake_logits)?;
    Ok((d_loss, g_loss))
}

pub fn generator_adversarial_loss<T: Scalar>(g: &mut Graph<T>, fake_logits: Var) -> Result<Var> {
    let neg_fake = g.scale_shift(fake_logits, -T::one(), T::zero())?;
    let term = g.softplus(neg_fake)?;
    g.mean_all(term)
}

/// Sum over stages of the per-element mean absolute activation gap. With
/// N_i elements per stage, (1/N_i)*||.||_1 is exactly that mean.
pub fn perceptual_from_features<T: Scalar>(g: &mut Graph<T>, taps_a: &[Var], taps_b: &[Var]) -> Result<Var> {
    if taps_a.len() != taps_b.len() || taps_a.is_empty() {
        return Err(Error::BadArg { op: "perceptual_loss", reason: "mismatched feature stacks".into() });
    }
    let mut total = None;
    for (&a, &b) in taps_a.iter().zip(taps_b) {
        let term = l1_mean(g, a, b)?;
        total = Some(match total {
            None => term,
            Some(acc) => g.add(acc, term)?,
        });
    }
    Ok(total.expect("nonempty"))
}

/// Sum over stages of the mean absolute gap between channel Gram matrices.
pub fn style_from_features<T: Scalar>(g: &mut Graph<T>, taps_a: &[Var], taps_b: &[Var]) -> Result<Var> {
    if taps_a.len() != taps_b.len() || taps_a.is_empty() {
        return Err(Error::BadArg { op: "style_loss", reason: "mismatched feature stacks".into() });
    }
    let mut total = None;
    for (&a, &b) in taps_a.iter().zip(taps_b) {
        let ga = g.gram(a)?;
        let gb = g.gram(b)?;
        let term = l1_mean(g, ga, gb)?;
        total = Some(match total {
            None => term,
            Some(acc) => g.add(acc, term)?,
        });
    }
    Ok(total.expect("nonempty"))
}

pub fn perceptual_loss<T: Scalar>(
    g: &mut Graph<T>,
    fe: &FeatureExtractor<T>,
    y: Var,
    y_hat: Var,
    prefix: &str,
) -> Result<Var> {
    same_shape("perceptual_loss", g, y, y_hat)?;
    let taps_y = fe.forward(g, y, prefix)?;
    let taps_hat = fe.forward(g, y_hat, prefix)?;
    perceptual_from_features(g, &taps_y, &taps_hat)
}

pub fn style_loss<T: Scalar>(
    g: &mut Graph<T>,
    fe: &FeatureExtractor<T>,
    y: Var,
    y_hat: Var,
    prefix: &str,
) -> Result<Var> {
    same_shape("style_loss", g, y, y_hat)?;
    let taps_y = fe.forward(g, y, prefix)?;
    let taps_hat = fe.forward(g, y_hat, prefix)?;
    style_from_features(g, &taps_y, &taps_hat)
}

/// Scalar components entering the weighted total.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub distance: Var,
    pub adversarial: Var,
    pub perceptual: Var,
    pub style: Var,
    pub siamese: Var,
}

/// total = w.dist*distance + w.adv*adversarial + w.perceptual*perceptual
///       + w.style*style + w.siamese*siamese
pub fn total_loss<T: Scalar>(g: &mut Graph<T>, weights: &LossWeights, terms: &LossTerms) -> Result<Var> {
    weights.validate()?;
    let pairs = [
        (weights.dist, terms.distance),
        (weights.adv, terms.adversarial),
        (weights.perceptual, terms.perceptual),
        (weights.style, terms.style),
        (weights.siamese, terms.siamese),
    ];
    let mut total = None;
    for (w, term) in pairs {
        let weighted = g.scale_shift(term, T::from_f64(w), T::zero())?;
        total = Some(match total {
            None => weighted,
            Some(acc) => g.add(acc, weighted)?,
        });
    }
    Ok(total.expect("five terms"))
}
