use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    build_loss, Activation, LossOptions, ModelParams, ParamVars, TripletBatch, PARAM_NAMES,
};
use crate::error::{Error, Result};
use crate::eval::{evaluate, RecallReport, Stratum, DEFAULT_KS};
use crate::grad::Tape;
use crate::numeric::FeatureMatrix;
use crate::synthdata::{Dataset, Triplet};
use crate::uncertainty::{
    gamma_at, sample_dropout_mask, GammaSchedule, JitterNoise, LossBreakdown, NoiseConfig,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// First epoch (0-based) trained at `lr / lr_decay_factor`.
    pub lr_decay_epoch: usize,
    pub lr_decay_factor: f64,
    pub momentum: f64,
    pub noise: NoiseConfig,
    pub schedule: GammaSchedule,
    pub stop_grad_sigma: bool,
    /// Inverted dropout on the text features during training.
    pub dropout_rate: Option<f64>,
    pub temperature: f64,
    pub embed_dim: usize,
    pub activation: Activation,
    pub seed: u64,
    pub eval_ks: Vec<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 32,
            lr: 2e-2,
            lr_decay_epoch: 45,
            lr_decay_factor: 10.0,
            momentum: 0.0,
            noise: NoiseConfig::default(),
            schedule: GammaSchedule::default(),
            stop_grad_sigma: false,
            dropout_rate: None,
            temperature: 1.0,
            embed_dim: 16,
            activation: Activation::Tanh,
            seed: 0,
            eval_ks: DEFAULT_KS.to_vec(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::invalid("epochs", "must be >= 1"));
        }
        if self.batch_size < 2 {
            return Err(Error::invalid("batch_size", "must be >= 2"));
        }
        if self.embed_dim == 0 {
            return Err(Error::invalid("embed_dim", "must be >= 1"));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::invalid("lr", "must be finite and >= 0"));
        }
        if !(self.lr_decay_factor.is_finite() && self.lr_decay_factor > 0.0) {
            return Err(Error::invalid("lr_decay_factor", "must be > 0"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid("momentum", "must lie in [0, 1)"));
        }
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(Error::invalid("temperature", "must be > 0"));
        }
        if let Some(r) = self.dropout_rate {
            if !(0.0..1.0).contains(&r) {
                return Err(Error::invalid("dropout_rate", "must lie in [0, 1)"));
            }
        }
        self.noise.validate()?;
        self.schedule.validate()
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        if epoch >= self.lr_decay_epoch {
            self.lr / self.lr_decay_factor
        } else {
            self.lr
        }
    }

    pub fn gamma_at(&self, epoch: usize) -> f64 {
        gamma_at(&self.schedule, epoch, self.epochs)
    }

    fn loss_options(&self, gamma: f64) -> LossOptions {
        LossOptions {
            gamma,
            w1: self.noise.w1,
            w2: self.noise.w2,
            target: self.noise.target,
            stop_grad_sigma: self.stop_grad_sigma,
            temperature: self.temperature,
            activation: self.activation,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochTrace {
    pub epoch: usize,
    pub gamma: f64,
    pub lr: f64,
    /// Mean over the epoch's steps.
    pub loss: LossBreakdown,
    /// Held-out Recall@K after the epoch.
    pub recall_at: BTreeMap<usize, f64>,
}

/// State dumped when a step produces a non-finite value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepDiagnostic {
    pub epoch: usize,
    pub step: usize,
    /// What went non-finite: `loss`, a parameter gradient or a parameter.
    pub offending: String,
    pub loss: LossBreakdown,
    pub lr: f64,
    pub gamma: f64,
    pub grad_max_abs: BTreeMap<String, f64>,
}

/// Noise used by one training step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepNoise {
    pub jitter: JitterNoise,
    pub dropout: Option<FeatureMatrix>,
}

impl StepNoise {
    pub fn sample(batch_rows: usize, cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let jitter = JitterNoise::sample(batch_rows, cfg.embed_dim, rng);
        let dropout = match cfg.dropout_rate {
            Some(rate) => Some(sample_dropout_mask(batch_rows, cfg.embed_dim, rate, rng)?),
            None => None,
        };
        Ok(Self { jitter, dropout })
    }
}

/// SGD momentum buffers.
#[derive(Clone, Debug, Default)]
pub struct OptimizerState {
    velocity: Option<Vec<FeatureMatrix>>,
}

/// Loss breakdown for fixed noise, without touching parameters.
pub fn loss_with_noise(
    params: &ModelParams,
    batch: &TripletBatch,
    cfg: &TrainConfig,
    gamma: f64,
    noise: &StepNoise,
) -> Result<LossBreakdown> {
    let mut tape = Tape::new();
    let vars = ParamVars::record(&mut tape, params);
    let lv = build_loss(
        &mut tape,
        &vars,
        batch,
        &noise.jitter,
        noise.dropout.as_ref(),
        &cfg.loss_options(gamma),
    )?;
    Ok(LossBreakdown {
        info: tape.scalar(lv.info)?,
        u: tape.scalar(lv.u)?,
        total: tape.scalar(lv.total)?,
        gamma,
        sigma_scalar: tape.scalar(lv.sigma_scalar)?,
    })
}

/// One SGD step on `batch`. Noise is drawn from `rng`.
pub fn train_step(
    params: &ModelParams,
    state: &mut OptimizerState,
    batch: &TripletBatch,
    cfg: &TrainConfig,
    epoch: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(ModelParams, LossBreakdown)> {
    let gamma = cfg.gamma_at(epoch);
    let lr = cfg.lr_at(epoch);
    let noise = StepNoise::sample(batch.len(), cfg, rng)?;

    let diagnostic = |offending: String, loss: LossBreakdown, grads: BTreeMap<String, f64>| {
        Error::NumericFailure(Box::new(StepDiagnostic {
            epoch,
            step: 0,
            offending,
            loss,
            lr,
            gamma,
            grad_max_abs: grads,
        }))
    };

    let mut tape = Tape::new();
    let vars = ParamVars::record(&mut tape, params);
    let lv = build_loss(
        &mut tape,
        &vars,
        batch,
        &noise.jitter,
        noise.dropout.as_ref(),
        &cfg.loss_options(gamma),
    )
    .map_err(|e| match e {
        Error::NonFinite { context } => {
            let nan = LossBreakdown {
                info: f64::NAN,
                u: f64::NAN,
                total: f64::NAN,
                gamma,
                sigma_scalar: f64::NAN,
            };
            diagnostic(format!("forward pass ({context})"), nan, BTreeMap::new())
        }
        other => other,
    })?;
    let loss = LossBreakdown {
        info: tape.scalar(lv.info)?,
        u: tape.scalar(lv.u)?,
        total: tape.scalar(lv.total)?,
        gamma,
        sigma_scalar: tape.scalar(lv.sigma_scalar)?,
    };
    let fail = |offending: String, grads| diagnostic(offending, loss, grads);
    if !loss.is_finite() {
        return Err(fail("loss".into(), BTreeMap::new()));
    }

    let grads = tape.backward(lv.total)?;
    let grad_list: Vec<FeatureMatrix> = vars
        .all()
        .iter()
        .zip(params.tensors())
        .map(|(&v, p)| {
            grads
                .get(v)
                .cloned()
                .unwrap_or_else(|| FeatureMatrix::zeros(p.rows(), p.cols()))
        })
        .collect();
    let summary: BTreeMap<String, f64> = PARAM_NAMES
        .iter()
        .zip(&grad_list)
        .map(|(n, g)| (n.to_string(), g.max_abs()))
        .collect();
    if let Some((name, _)) = PARAM_NAMES
        .iter()
        .zip(&grad_list)
        .find(|(_, g)| !g.is_finite())
    {
        return Err(fail(format!("gradient of {name}"), summary));
    }

    let steps = match (&mut state.velocity, cfg.momentum) {
        (_, 0.0) => grad_list,
        (Some(vel), m) => {
            for (v, g) in vel.iter_mut().zip(&grad_list) {
                *v = v.zip_map(g, |v, g| m * v + g)?;
            }
            vel.clone()
        }
        (slot @ None, _) => {
            *slot = Some(grad_list.clone());
            grad_list
        }
    };

    let mut next = params.clone();
    for (p, s) in next.tensors_mut().into_iter().zip(&steps) {
        p.axpy(-lr, s)?;
    }
    if let Some((name, _)) = PARAM_NAMES
        .iter()
        .zip(next.tensors())
        .find(|(_, t)| !t.is_finite())
    {
        return Err(fail(format!("parameter {name} after update"), summary));
    }
    Ok((next, loss))
}

/// Recall of `params` on the dataset's held-out queries.
pub fn evaluate_model(
    params: &ModelParams,
    data: &Dataset,
    stratum: Stratum,
    ks: &[usize],
) -> Result<RecallReport> {
    if params.image_dim() != data.spec.image_dim || params.text_dim() != data.spec.text_dim {
        return Err(Error::mismatch(
            "model inputs vs dataset",
            format!(
                "image dim {}, text dim {}",
                params.image_dim(),
                params.text_dim()
            ),
            format!(
                "image dim {}, text dim {}",
                data.spec.image_dim, data.spec.text_dim
            ),
        ));
    }
    let queries: Vec<Triplet> = data
        .eval
        .iter()
        .filter(|q| stratum.admits(q.granularity))
        .cloned()
        .collect();
    let gallery = params.encode_image(&data.gallery)?;
    if queries.is_empty() {
        return evaluate(&FeatureMatrix::zeros(1, 1), &gallery, &[], stratum, ks).or_else(|_| {
            Ok(RecallReport {
                stratum,
                n_queries: 0,
                per_k: BTreeMap::new(),
                any_valid_per_k: (stratum == Stratum::CoarseOnly).then(BTreeMap::new),
            })
        });
    }
    let qf = params.query_features(&queries)?;
    evaluate(&qf, &gallery, &queries, stratum, ks)
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub trace: Vec<EpochTrace>,
}

pub fn train(cfg: &TrainConfig, data: &Dataset) -> Result<TrainOutcome> {
    train_with(cfg, data, |_| {})
}

/// Full training run; `on_epoch` sees each trace record as it is produced.
pub fn train_with(
    cfg: &TrainConfig,
    data: &Dataset,
    mut on_epoch: impl FnMut(&EpochTrace),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut shuffle_rng = init_rng.clone();
    shuffle_rng.set_stream(1);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    noise_rng.set_stream(2 | cfg.noise.seed.wrapping_shl(2));

    let mut params = ModelParams::init(
        data.spec.image_dim,
        data.spec.text_dim,
        cfg.embed_dim,
        &mut init_rng,
    );
    params.activation = cfg.activation;
    let mut state = OptimizerState::default();
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut trace = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut losses = Vec::new();
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            if chunk.len() < 2 {
                continue;
            }
            let triplets: Vec<&Triplet> = chunk.iter().map(|&i| &data.train[i]).collect();
            let batch = TripletBatch::from_triplets(data, &triplets)?;
            let (next, loss) = train_step(&params, &mut state, &batch, cfg, epoch, &mut noise_rng)
                .map_err(|e| match e {
                    Error::NumericFailure(mut d) => {
                        d.step = step;
                        Error::NumericFailure(d)
                    }
                    other => other,
                })?;
            params = next;
            losses.push(loss);
        }
        let report = evaluate_model(&params, data, Stratum::All, &cfg.eval_ks)?;
        let record = EpochTrace {
            epoch,
            gamma: cfg.gamma_at(epoch),
            lr: cfg.lr_at(epoch),
            loss: LossBreakdown::mean(&losses),
            recall_at: report.per_k,
        };
        on_epoch(&record);
        trace.push(record);
    }
    Ok(TrainOutcome { params, trace })
}
