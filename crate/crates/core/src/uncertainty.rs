//! Feature jittering, the contrastive objectives and the coarse/fine balance
//! schedule.
//!
//! The jitter augmenter perturbs whitened features with reparameterized
//! Gaussian noise built from the batch's own statistics:
//!
//! ```text
//! f_hat = alpha * (f - mu) / sigma + beta
//! alpha = 1  + w1 * sigma * eps1
//! beta  = mu + w2 * sigma * eps2,          eps1, eps2 ~ N(0, 1)
//! ```
//!
//! The uncertainty loss scales InfoNCE on jittered features by `1 / (2 s^2)`
//! and adds `log(s^2) / 2`, where `s` is the scalar feature spread. The
//! training objective mixes it with plain InfoNCE using a weight `gamma`
//! that is annealed from 1 towards 0 over training.
//!
//! Every operation comes in two forms: a plain function over
//! [`FeatureMatrix`] values and a `*_node` builder that records the same
//! computation on a [`Tape`] for differentiation.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::grad::{Tape, Var};
use crate::numeric::{cosine_sim, log_softmax_row, whiten, BatchStats, FeatureMatrix, SIGMA_FLOOR};

/// Which feature the augmenter jitters.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentTarget {
    /// The target image feature `f_t` (the default).
    #[default]
    TargetFeature,
    /// The source image feature before it enters the compositor.
    SourceImageFeature,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseConfig {
    /// Scale on the standard deviation of the multiplicative noise.
    pub w1: f64,
    /// Scale on the standard deviation of the additive noise.
    pub w2: f64,
    pub target: AugmentTarget,
    pub seed: u64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            w1: 1.0,
            w2: 1.0,
            target: AugmentTarget::TargetFeature,
            seed: 0,
        }
    }
}

impl NoiseConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in [("w1", self.w1), ("w2", self.w2)] {
            if !(w.is_finite() && w >= 0.0) {
                return Err(Error::invalid(
                    name,
                    format!("must be finite and >= 0, got {w}"),
                ));
            }
        }
        Ok(())
    }
}

/// Weight between the uncertainty term and plain InfoNCE, per epoch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum GammaSchedule {
    /// `gamma(e) = exp(-gamma0 * e / E)`. `gamma0 = +inf` is the pure
    /// InfoNCE baseline (`gamma = 0` everywhere).
    Exponential { gamma0: f64 },
    /// Constant weight in `[0, 1]`.
    Fixed { value: f64 },
}

impl Default for GammaSchedule {
    fn default() -> Self {
        GammaSchedule::Exponential { gamma0: 1.0 }
    }
}

impl GammaSchedule {
    pub fn baseline() -> Self {
        GammaSchedule::Exponential {
            gamma0: f64::INFINITY,
        }
    }

    pub fn exponential(gamma0: f64) -> Result<Self> {
        if gamma0.is_nan() || gamma0 <= 0.0 {
            return Err(Error::invalid(
                "gamma0",
                format!("must be > 0 or +inf, got {gamma0}"),
            ));
        }
        Ok(GammaSchedule::Exponential { gamma0 })
    }

    pub fn fixed(value: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&value) {
            return Err(Error::invalid(
                "gamma",
                format!("must lie in [0, 1], got {value}"),
            ));
        }
        Ok(GammaSchedule::Fixed { value })
    }

    pub fn is_baseline(&self) -> bool {
        matches!(self, GammaSchedule::Exponential { gamma0 } if gamma0.is_infinite())
    }

    /// `"baseline"`, `"exponential"` or `"fixed"`.
    pub fn mode_name(&self) -> &'static str {
        match self {
            _ if self.is_baseline() => "baseline",
            GammaSchedule::Exponential { .. } => "exponential",
            GammaSchedule::Fixed { .. } => "fixed",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            GammaSchedule::Exponential { gamma0 } => Self::exponential(gamma0).map(|_| ()),
            GammaSchedule::Fixed { value } => Self::fixed(value).map(|_| ()),
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
enum ScheduleRepr {
    Baseline,
    Exponential {
        #[serde(deserialize_with = "number_or_inf")]
        gamma0: f64,
    },
    Fixed {
        value: f64,
    },
}

/// JSON has no infinity literal, so `"inf"` is accepted for gamma0.
fn number_or_inf<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Raw {
        Num(f64),
        Text(String),
    }
    match Raw::deserialize(d)? {
        Raw::Num(x) => Ok(x),
        Raw::Text(t) => match t.trim().to_ascii_lowercase().as_str() {
            "inf" | "+inf" | "infinity" | "+infinity" => Ok(f64::INFINITY),
            other => Err(serde::de::Error::custom(format!(
                "expected a number or \"inf\", got \"{other}\""
            ))),
        },
    }
}

impl Serialize for GammaSchedule {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let repr = match *self {
            _ if self.is_baseline() => ScheduleRepr::Baseline,
            GammaSchedule::Exponential { gamma0 } => ScheduleRepr::Exponential { gamma0 },
            GammaSchedule::Fixed { value } => ScheduleRepr::Fixed { value },
        };
        repr.serialize(s)
    }
}

impl<'de> Deserialize<'de> for GammaSchedule {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let sched = match ScheduleRepr::deserialize(d)? {
            ScheduleRepr::Baseline => GammaSchedule::baseline(),
            ScheduleRepr::Exponential { gamma0 } => GammaSchedule::Exponential { gamma0 },
            ScheduleRepr::Fixed { value } => GammaSchedule::Fixed { value },
        };
        sched.validate().map_err(serde::de::Error::custom)?;
        Ok(sched)
    }
}

/// Balance weight for `epoch` out of `total_epochs`.
pub fn gamma_at(schedule: &GammaSchedule, epoch: usize, total_epochs: usize) -> f64 {
    match *schedule {
        GammaSchedule::Exponential { gamma0 } if gamma0.is_infinite() => 0.0,
        GammaSchedule::Exponential { gamma0 } => {
            (-gamma0 * epoch as f64 / total_epochs.max(1) as f64).exp()
        }
        GammaSchedule::Fixed { value } => value,
    }
}

/// Loss values for one step (or averaged over an epoch).
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    /// InfoNCE on clean features.
    pub info: f64,
    /// Uncertainty-regularized loss on jittered features.
    pub u: f64,
    /// `gamma * u + (1 - gamma) * info`.
    pub total: f64,
    pub gamma: f64,
    pub sigma_scalar: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [self.info, self.u, self.total, self.gamma, self.sigma_scalar]
            .iter()
            .all(|v| v.is_finite())
    }

    /// Field-wise mean.
    pub fn mean(items: &[LossBreakdown]) -> LossBreakdown {
        let n = items.len().max(1) as f64;
        let mut out = LossBreakdown::default();
        for it in items {
            out.info += it.info;
            out.u += it.u;
            out.total += it.total;
            out.gamma += it.gamma;
            out.sigma_scalar += it.sigma_scalar;
        }
        out.info /= n;
        out.u /= n;
        out.total /= n;
        out.gamma /= n;
        out.sigma_scalar /= n;
        out
    }
}

/// Standard-normal draws for one jitter application.
#[derive(Clone, Debug, PartialEq)]
pub struct JitterNoise {
    pub alpha: FeatureMatrix,
    pub beta: FeatureMatrix,
}

impl JitterNoise {
    pub fn sample<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Self {
        let alpha = FeatureMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng));
        let beta = FeatureMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng));
        Self { alpha, beta }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            alpha: FeatureMatrix::zeros(rows, cols),
            beta: FeatureMatrix::zeros(rows, cols),
        }
    }
}

/// Jitters `features` with the given noise draws (see the module docs).
pub fn apply_jitter(
    features: &FeatureMatrix,
    stats: &BatchStats,
    w1: f64,
    w2: f64,
    noise: &JitterNoise,
) -> Result<FeatureMatrix> {
    let white = whiten(features, stats)?;
    white.expect_same_shape(&noise.alpha, "jitter noise")?;
    white.expect_same_shape(&noise.beta, "jitter noise")?;
    let d = features.cols();
    let mut out = white;
    for (i, v) in out.as_mut_slice().iter_mut().enumerate() {
        let c = i % d;
        let s = stats.sigma[c];
        let alpha = 1.0 + w1 * s * noise.alpha.as_slice()[i];
        let beta = stats.mu[c] + w2 * s * noise.beta.as_slice()[i];
        *v = alpha * *v + beta;
    }
    Ok(out)
}

/// Draws fresh noise and jitters `features`.
pub fn augment<R: Rng + ?Sized>(
    features: &FeatureMatrix,
    stats: &BatchStats,
    cfg: &NoiseConfig,
    rng: &mut R,
) -> Result<FeatureMatrix> {
    if stats.dim() != features.cols() {
        return Err(Error::mismatch(
            "augment",
            format!("statistics over {} dims", features.cols()),
            format!("{} dims", stats.dim()),
        ));
    }
    let noise = JitterNoise::sample(features.rows(), features.cols(), rng);
    apply_jitter(features, stats, cfg.w1, cfg.w2, &noise)
}

/// InfoNCE with cosine similarity and unit temperature.
pub fn info_nce(f_s: &FeatureMatrix, f_t: &FeatureMatrix) -> Result<f64> {
    info_nce_with_temperature(f_s, f_t, 1.0)
}

/// InfoNCE where similarities are divided by `temperature` before the
/// softmax.
pub fn info_nce_with_temperature(
    f_s: &FeatureMatrix,
    f_t: &FeatureMatrix,
    temperature: f64,
) -> Result<f64> {
    f_s.expect_same_shape(f_t, "InfoNCE inputs")?;
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::invalid(
            "temperature",
            format!("must be > 0, got {temperature}"),
        ));
    }
    let b = f_s.rows();
    let mut total = 0.0;
    for i in 0..b {
        let scores = (0..b)
            .map(|j| cosine_sim(f_s.row(i), f_t.row(j)).map(|k| k / temperature))
            .collect::<Result<Vec<_>>>()?;
        total -= log_softmax_row(&scores)?[i];
    }
    Ok(total / b as f64)
}

fn check_sigma(sigma: f64) -> Result<()> {
    if sigma > 0.0 && sigma.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(
            "sigma",
            format!("must be finite and > 0, got {sigma}"),
        ))
    }
}

/// `info / (2 sigma^2) + log(sigma^2) / 2` for an already computed InfoNCE
/// value.
pub fn uncertainty_from_info(info: f64, sigma: f64) -> Result<f64> {
    check_sigma(sigma)?;
    let s2 = sigma * sigma;
    Ok(info / (2.0 * s2) + 0.5 * s2.ln())
}

pub fn uncertainty_loss(f_s: &FeatureMatrix, f_t_hat: &FeatureMatrix, sigma: f64) -> Result<f64> {
    check_sigma(sigma)?;
    uncertainty_from_info(info_nce(f_s, f_t_hat)?, sigma)
}

fn check_gamma(gamma: f64) -> Result<()> {
    if (0.0..=1.0).contains(&gamma) {
        Ok(())
    } else {
        Err(Error::invalid(
            "gamma",
            format!("must lie in [0, 1], got {gamma}"),
        ))
    }
}

/// `gamma * L_u(f_s, f_t_hat, sigma_t) + (1 - gamma) * L_info(f_s, f_t)`.
pub fn total_loss(
    f_s: &FeatureMatrix,
    f_t: &FeatureMatrix,
    f_t_hat: &FeatureMatrix,
    sigma_t: f64,
    gamma: f64,
) -> Result<LossBreakdown> {
    check_gamma(gamma)?;
    let info = info_nce(f_s, f_t)?;
    let u = uncertainty_loss(f_s, f_t_hat, sigma_t)?;
    Ok(LossBreakdown {
        info,
        u,
        total: gamma * u + (1.0 - gamma) * info,
        gamma,
        sigma_scalar: sigma_t,
    })
}

/// The same objective with the clean term also written as an uncertainty
/// loss at `sigma = 1/sqrt(2)`. Differs from [`total_loss`] by the constant
/// `(1 - gamma) * ln(1/2) / 2`.
pub fn unified_loss(
    f_s: &FeatureMatrix,
    f_t: &FeatureMatrix,
    f_t_hat: &FeatureMatrix,
    sigma_t: f64,
    gamma: f64,
) -> Result<f64> {
    check_gamma(gamma)?;
    let coarse = uncertainty_loss(f_s, f_t_hat, sigma_t)?;
    let fine = uncertainty_loss(f_s, f_t, std::f64::consts::FRAC_1_SQRT_2)?;
    Ok(gamma * coarse + (1.0 - gamma) * fine)
}

fn check_rate(rate: f64) -> Result<()> {
    if (0.0..1.0).contains(&rate) {
        Ok(())
    } else {
        Err(Error::invalid(
            "dropout rate",
            format!("must lie in [0, 1), got {rate}"),
        ))
    }
}

/// Inverted-dropout mask: entries are `0` with probability `rate`, else
/// `1 / (1 - rate)`.
pub fn sample_dropout_mask<R: Rng + ?Sized>(
    rows: usize,
    cols: usize,
    rate: f64,
    rng: &mut R,
) -> Result<FeatureMatrix> {
    check_rate(rate)?;
    let keep = 1.0 / (1.0 - rate);
    Ok(FeatureMatrix::from_fn(rows, cols, |_, _| {
        if rate > 0.0 && rng.random::<f64>() < rate {
            0.0
        } else {
            keep
        }
    }))
}

/// Applies inverted dropout at training time.
pub fn dropout_mask<R: Rng + ?Sized>(
    features: &FeatureMatrix,
    rate: f64,
    rng: &mut R,
) -> Result<FeatureMatrix> {
    let mask = sample_dropout_mask(features.rows(), features.cols(), rate, rng)?;
    features.zip_map(&mask, |x, m| x * m)
}

/// Tape handles for the statistics of a batch.
#[derive(Clone, Copy, Debug)]
pub struct StatsVars {
    pub mu: Var,
    pub sigma: Var,
    pub sigma_scalar: Var,
}

/// Records batch statistics. With `stop_grad` the statistics are treated
/// as constants by the backward pass.
pub fn stats_node(tape: &mut Tape, features: Var, stop_grad: bool) -> Result<StatsVars> {
    let mut mu = tape.col_mean(features)?;
    let mut sigma = tape.col_std(features, SIGMA_FLOOR)?;
    if stop_grad {
        mu = tape.stop_grad(mu)?;
        sigma = tape.stop_grad(sigma)?;
    }
    let sigma_scalar = tape.mean_all(sigma)?;
    Ok(StatsVars {
        mu,
        sigma,
        sigma_scalar,
    })
}

pub fn whiten_node(tape: &mut Tape, features: Var, stats: &StatsVars) -> Result<Var> {
    let centered = tape.sub_row(features, stats.mu)?;
    tape.div_row(centered, stats.sigma)
}

/// Differentiable jitter with fixed noise draws.
pub fn jitter_node(
    tape: &mut Tape,
    features: Var,
    stats: &StatsVars,
    w1: f64,
    w2: f64,
    noise: &JitterNoise,
) -> Result<Var> {
    let white = whiten_node(tape, features, stats)?;
    let eps1 = tape.constant(noise.alpha.clone());
    let eps2 = tape.constant(noise.beta.clone());

    let spread1 = tape.mul_row(eps1, stats.sigma)?;
    let spread1 = tape.scale(spread1, w1)?;
    let alpha = tape.offset(spread1, 1.0)?;

    let spread2 = tape.mul_row(eps2, stats.sigma)?;
    let spread2 = tape.scale(spread2, w2)?;
    let beta = tape.add_row(spread2, stats.mu)?;

    let scaled = tape.mul(alpha, white)?;
    tape.add(scaled, beta)
}

/// Differentiable InfoNCE: row-normalize, similarity matrix, row
/// log-softmax, mean of the negated diagonal.
pub fn info_nce_node(tape: &mut Tape, f_s: Var, f_t: Var, temperature: f64) -> Result<Var> {
    tape.value(f_s)
        .expect_same_shape(tape.value(f_t), "InfoNCE inputs")?;
    let qs = tape.row_normalize(f_s)?;
    let ks = tape.row_normalize(f_t)?;
    let kt = tape.transpose(ks)?;
    let mut sim = tape.matmul(qs, kt)?;
    if temperature != 1.0 {
        sim = tape.scale(sim, 1.0 / temperature)?;
    }
    let logp = tape.log_softmax_rows(sim)?;
    tape.mean_neg_diag(logp)
}

/// `info / (2 sigma^2) + log(sigma^2) / 2` on scalar nodes.
pub fn uncertainty_node(tape: &mut Tape, info: Var, sigma: Var) -> Result<Var> {
    let s2 = tape.square(sigma)?;
    let denom = tape.scale(s2, 2.0)?;
    let weighted = tape.div(info, denom)?;
    let log_s2 = tape.ln(s2)?;
    let half_log = tape.scale(log_s2, 0.5)?;
    tape.add(weighted, half_log)
}

/// `gamma * u + (1 - gamma) * info` on scalar nodes.
pub fn total_node(tape: &mut Tape, u: Var, info: Var, gamma: f64) -> Result<Var> {
    check_gamma(gamma)?;
    let a = tape.scale(u, gamma)?;
    let b = tape.scale(info, 1.0 - gamma)?;
    tape.add(a, b)
}
