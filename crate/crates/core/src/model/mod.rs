//! Toy composed-retrieval model and its trainer.
//!
//! ```text
//! f_s^I = act(src  W_img + b_img)
//! f_s^T = act(text W_txt + b_txt)          (optionally dropped out)
//! f_s   = act([f_s^I | f_s^T] W_comp + b_comp)
//! f_t   = act(tgt  W_img + b_img)          (same image encoder)
//! ```

mod checkpoint;
mod train;

pub use checkpoint::CHECKPOINT_FORMAT_VERSION;
pub use train::{
    evaluate_model, loss_with_noise, train, train_step, train_with, EpochTrace, OptimizerState,
    StepDiagnostic, StepNoise, TrainConfig, TrainOutcome,
};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grad::{Tape, Var};
use crate::numeric::FeatureMatrix;
use crate::synthdata::{Dataset, Triplet};
use crate::uncertainty::{
    info_nce_node, jitter_node, stats_node, total_node, uncertainty_node, AugmentTarget,
    JitterNoise,
};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Tanh,
    Identity,
}

impl Activation {
    fn apply(self, x: &FeatureMatrix) -> FeatureMatrix {
        match self {
            Activation::Tanh => x.map(f64::tanh),
            Activation::Identity => x.clone(),
        }
    }

    fn node(self, tape: &mut Tape, x: Var) -> Result<Var> {
        match self {
            Activation::Tanh => tape.tanh(x),
            Activation::Identity => Ok(x),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
            Activation::Identity => "identity",
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tanh" => Ok(Activation::Tanh),
            "identity" => Ok(Activation::Identity),
            other => Err(Error::invalid(
                "activation",
                format!("unknown activation `{other}`"),
            )),
        }
    }
}

/// Affine map `x W + b` with `W: in x out`, `b: 1 x out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: FeatureMatrix,
    pub bias: FeatureMatrix,
}

impl Linear {
    /// Uniform in `(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn init<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let weight =
            FeatureMatrix::from_fn(fan_in, fan_out, |_, _| rng.random_range(-bound..bound));
        let bias = FeatureMatrix::from_fn(1, fan_out, |_, _| rng.random_range(-bound..bound));
        Self { weight, bias }
    }

    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: FeatureMatrix::zeros(fan_in, fan_out),
            bias: FeatureMatrix::zeros(1, fan_out),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.rows()
    }

    pub fn fan_out(&self) -> usize {
        self.weight.cols()
    }

    fn apply(&self, x: &FeatureMatrix, context: &str) -> Result<FeatureMatrix> {
        if x.cols() != self.fan_in() {
            return Err(Error::mismatch(
                context,
                format!("{} input columns", self.fan_in()),
                x.shape_str(),
            ));
        }
        x.matmul(&self.weight)?.zip_row(&self.bias, |a, b| a + b)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub img: Linear,
    pub txt: Linear,
    pub comp: Linear,
    pub activation: Activation,
}

pub const PARAM_NAMES: [&str; 6] = [
    "img.weight",
    "img.bias",
    "txt.weight",
    "txt.bias",
    "comp.weight",
    "comp.bias",
];

impl ModelParams {
    pub fn init<R: Rng + ?Sized>(
        image_dim: usize,
        text_dim: usize,
        embed_dim: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            img: Linear::init(image_dim, embed_dim, rng),
            txt: Linear::init(text_dim, embed_dim, rng),
            comp: Linear::init(2 * embed_dim, embed_dim, rng),
            activation: Activation::Tanh,
        }
    }

    pub fn image_dim(&self) -> usize {
        self.img.fan_in()
    }

    pub fn text_dim(&self) -> usize {
        self.txt.fan_in()
    }

    pub fn embed_dim(&self) -> usize {
        self.img.fan_out()
    }

    pub fn tensors(&self) -> [&FeatureMatrix; 6] {
        [
            &self.img.weight,
            &self.img.bias,
            &self.txt.weight,
            &self.txt.bias,
            &self.comp.weight,
            &self.comp.bias,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut FeatureMatrix; 6] {
        [
            &mut self.img.weight,
            &mut self.img.bias,
            &mut self.txt.weight,
            &mut self.txt.bias,
            &mut self.comp.weight,
            &mut self.comp.bias,
        ]
    }

    /// `(name, tensor)` pairs in [`PARAM_NAMES`] order.
    pub fn named(&self) -> Vec<(String, FeatureMatrix)> {
        PARAM_NAMES
            .iter()
            .zip(self.tensors())
            .map(|(n, t)| (n.to_string(), t.clone()))
            .collect()
    }

    /// Rebuilds parameters from tensors in [`PARAM_NAMES`] order.
    pub fn from_tensors(tensors: Vec<FeatureMatrix>, activation: Activation) -> Result<Self> {
        let [iw, ib, tw, tb, cw, cb]: [FeatureMatrix; 6] = tensors
            .try_into()
            .map_err(|v: Vec<_>| Error::Format(format!("expected 6 tensors, got {}", v.len())))?;
        let p = Self {
            img: Linear {
                weight: iw,
                bias: ib,
            },
            txt: Linear {
                weight: tw,
                bias: tb,
            },
            comp: Linear {
                weight: cw,
                bias: cb,
            },
            activation,
        };
        p.check_shapes()?;
        Ok(p)
    }

    fn check_shapes(&self) -> Result<()> {
        let d = self.embed_dim();
        let expect = [
            (&self.img.bias, 1, d, "img.bias"),
            (&self.txt.weight, self.text_dim(), d, "txt.weight"),
            (&self.txt.bias, 1, d, "txt.bias"),
            (&self.comp.weight, 2 * d, d, "comp.weight"),
            (&self.comp.bias, 1, d, "comp.bias"),
        ];
        for (m, r, c, name) in expect {
            if m.shape() != (r, c) {
                return Err(Error::mismatch(name, format!("{r}x{c}"), m.shape_str()));
            }
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.is_finite())
    }

    pub fn encode_image(&self, x: &FeatureMatrix) -> Result<FeatureMatrix> {
        Ok(self.activation.apply(&self.img.apply(x, "image encoder")?))
    }

    pub fn encode_text(&self, x: &FeatureMatrix) -> Result<FeatureMatrix> {
        Ok(self.activation.apply(&self.txt.apply(x, "text encoder")?))
    }

    pub fn compose(&self, img: &FeatureMatrix, txt: &FeatureMatrix) -> Result<FeatureMatrix> {
        let joint = img.concat_cols(txt)?;
        Ok(self
            .activation
            .apply(&self.comp.apply(&joint, "compositor")?))
    }

    /// Composed query features and target features, without dropout or
    /// jitter.
    pub fn forward(&self, batch: &TripletBatch) -> Result<(FeatureMatrix, FeatureMatrix)> {
        let f_s = self.compose(
            &self.encode_image(&batch.source)?,
            &self.encode_text(&batch.text)?,
        )?;
        let f_t = self.encode_image(&batch.target)?;
        Ok((f_s, f_t))
    }

    /// Query features for triplets (no target needed).
    pub fn query_features(&self, queries: &[Triplet]) -> Result<FeatureMatrix> {
        let rows: Vec<&[f64]> = queries.iter().map(|q| q.source_vec.as_slice()).collect();
        let src = FeatureMatrix::from_rows(&rows)?;
        let rows: Vec<&[f64]> = queries.iter().map(|q| q.text_vec.as_slice()).collect();
        let txt = FeatureMatrix::from_rows(&rows)?;
        self.compose(&self.encode_image(&src)?, &self.encode_text(&txt)?)
    }
}

/// Dense inputs for a batch of triplets.
#[derive(Clone, Debug, PartialEq)]
pub struct TripletBatch {
    pub source: FeatureMatrix,
    pub text: FeatureMatrix,
    pub target: FeatureMatrix,
}

impl TripletBatch {
    pub fn new(source: FeatureMatrix, text: FeatureMatrix, target: FeatureMatrix) -> Result<Self> {
        if source.rows() != text.rows() || source.rows() != target.rows() {
            return Err(Error::mismatch(
                "triplet batch",
                format!("{} rows everywhere", source.rows()),
                format!("text {} target {}", text.shape_str(), target.shape_str()),
            ));
        }
        Ok(Self {
            source,
            text,
            target,
        })
    }

    pub fn from_triplets(data: &Dataset, triplets: &[&Triplet]) -> Result<Self> {
        let src: Vec<&[f64]> = triplets.iter().map(|t| t.source_vec.as_slice()).collect();
        let txt: Vec<&[f64]> = triplets.iter().map(|t| t.text_vec.as_slice()).collect();
        let ids: Vec<usize> = triplets.iter().map(|t| t.target_id).collect();
        Self::new(
            FeatureMatrix::from_rows(&src)?,
            FeatureMatrix::from_rows(&txt)?,
            data.gallery.select_rows(&ids),
        )
    }

    pub fn len(&self) -> usize {
        self.source.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Tape handles for the six parameter tensors.
#[derive(Clone, Copy, Debug)]
pub struct ParamVars {
    pub img_w: Var,
    pub img_b: Var,
    pub txt_w: Var,
    pub txt_b: Var,
    pub comp_w: Var,
    pub comp_b: Var,
}

impl ParamVars {
    pub fn from_slice(v: &[Var]) -> Self {
        Self {
            img_w: v[0],
            img_b: v[1],
            txt_w: v[2],
            txt_b: v[3],
            comp_w: v[4],
            comp_b: v[5],
        }
    }

    pub fn record(tape: &mut Tape, params: &ModelParams) -> Self {
        let v: Vec<Var> = params
            .tensors()
            .iter()
            .map(|t| tape.param((*t).clone()))
            .collect();
        Self::from_slice(&v)
    }

    pub fn all(&self) -> [Var; 6] {
        [
            self.img_w,
            self.img_b,
            self.txt_w,
            self.txt_b,
            self.comp_w,
            self.comp_b,
        ]
    }
}

/// Everything besides parameters and data that shapes one loss evaluation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossOptions {
    pub gamma: f64,
    pub w1: f64,
    pub w2: f64,
    pub target: AugmentTarget,
    pub stop_grad_sigma: bool,
    pub temperature: f64,
    pub activation: Activation,
}

#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub info: Var,
    pub u: Var,
    pub total: Var,
    pub sigma_scalar: Var,
}

fn affine(tape: &mut Tape, x: Var, w: Var, b: Var, act: Activation) -> Result<Var> {
    let xw = tape.matmul(x, w)?;
    let pre = tape.add_row(xw, b)?;
    act.node(tape, pre)
}

/// Records the full training objective for one batch.
///
/// `dropout` is an optional inverted-dropout mask for the text features.
pub fn build_loss(
    tape: &mut Tape,
    p: &ParamVars,
    batch: &TripletBatch,
    jitter: &JitterNoise,
    dropout: Option<&FeatureMatrix>,
    opts: &LossOptions,
) -> Result<LossVars> {
    let act = opts.activation;
    let src = tape.constant(batch.source.clone());
    let txt = tape.constant(batch.text.clone());
    let tgt = tape.constant(batch.target.clone());

    let f_si = affine(tape, src, p.img_w, p.img_b, act)?;
    let mut f_st = affine(tape, txt, p.txt_w, p.txt_b, act)?;
    if let Some(mask) = dropout {
        let m = tape.constant(mask.clone());
        f_st = tape.mul(f_st, m)?;
    }
    let joint = tape.concat_cols(f_si, f_st)?;
    let f_s = affine(tape, joint, p.comp_w, p.comp_b, act)?;
    let f_t = affine(tape, tgt, p.img_w, p.img_b, act)?;

    let info = info_nce_node(tape, f_s, f_t, opts.temperature)?;
    let (info_hat, sigma_scalar) = match opts.target {
        AugmentTarget::TargetFeature => {
            let stats = stats_node(tape, f_t, opts.stop_grad_sigma)?;
            let f_hat = jitter_node(tape, f_t, &stats, opts.w1, opts.w2, jitter)?;
            (
                info_nce_node(tape, f_s, f_hat, opts.temperature)?,
                stats.sigma_scalar,
            )
        }
        AugmentTarget::SourceImageFeature => {
            let stats = stats_node(tape, f_si, opts.stop_grad_sigma)?;
            let si_hat = jitter_node(tape, f_si, &stats, opts.w1, opts.w2, jitter)?;
            let joint_hat = tape.concat_cols(si_hat, f_st)?;
            let f_s_hat = affine(tape, joint_hat, p.comp_w, p.comp_b, act)?;
            (
                info_nce_node(tape, f_s_hat, f_t, opts.temperature)?,
                stats.sigma_scalar,
            )
        }
    };
    let u = uncertainty_node(tape, info_hat, sigma_scalar)?;
    let total = total_node(tape, u, info, opts.gamma)?;
    Ok(LossVars {
        info,
        u,
        total,
        sigma_scalar,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grad::{grad_check, DEFAULT_STEP};
    use crate::uncertainty::info_nce;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> FeatureMatrix {
        FeatureMatrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    fn random_batch(b: usize, rng: &mut ChaCha8Rng) -> TripletBatch {
        TripletBatch::new(random(b, 6, rng), random(b, 5, rng), random(b, 6, rng)).unwrap()
    }

    #[test]
    fn zero_parameters_give_zero_norm_downstream() {
        let p = ModelParams {
            img: Linear::zeros(6, 4),
            txt: Linear::zeros(5, 4),
            comp: Linear::zeros(8, 4),
            activation: Activation::Tanh,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (f_s, f_t) = p.forward(&random_batch(3, &mut rng)).unwrap();
        assert!(f_s.as_slice().iter().all(|&v| v == 0.0));
        assert!(matches!(info_nce(&f_s, &f_t), Err(Error::ZeroNorm { .. })));
    }

    #[test]
    fn identity_image_path() {
        let d = 4;
        let eye = FeatureMatrix::from_fn(d, d, |r, c| if r == c { 1.0 } else { 0.0 });
        let p = ModelParams {
            img: Linear {
                weight: eye,
                bias: FeatureMatrix::zeros(1, d),
            },
            txt: Linear::zeros(3, d),
            comp: Linear::zeros(2 * d, d),
            activation: Activation::Identity,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let batch = TripletBatch::new(
            random(5, d, &mut rng),
            random(5, 3, &mut rng),
            random(5, d, &mut rng),
        )
        .unwrap();
        let (_, f_t) = p.forward(&batch).unwrap();
        assert_eq!(f_t, batch.target);
    }

    #[test]
    fn random_init_shapes_and_finiteness() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = ModelParams::init(6, 5, 4, &mut rng);
        let (f_s, f_t) = p.forward(&random_batch(7, &mut rng)).unwrap();
        assert_eq!(f_s.shape(), (7, 4));
        assert_eq!(f_t.shape(), (7, 4));
        assert!(f_s.is_finite() && f_t.is_finite());
    }

    #[test]
    fn dimension_mismatch() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = ModelParams::init(6, 5, 4, &mut rng);
        let bad = TripletBatch::new(
            random(3, 7, &mut rng),
            random(3, 5, &mut rng),
            random(3, 6, &mut rng),
        )
        .unwrap();
        assert!(matches!(
            p.forward(&bad),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn tape_forward_matches_plain_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = ModelParams::init(6, 5, 4, &mut rng);
        let batch = random_batch(6, &mut rng);
        let (f_s, f_t) = p.forward(&batch).unwrap();
        let noise = JitterNoise::sample(6, 4, &mut rng);
        let mut tape = Tape::new();
        let vars = ParamVars::record(&mut tape, &p);
        let opts = LossOptions {
            gamma: 0.3,
            w1: 1.0,
            w2: 1.0,
            target: AugmentTarget::TargetFeature,
            stop_grad_sigma: false,
            temperature: 1.0,
            activation: Activation::Tanh,
        };
        let lv = build_loss(&mut tape, &vars, &batch, &noise, None, &opts).unwrap();
        let stats = crate::numeric::compute_stats(&f_t).unwrap();
        let f_hat = crate::uncertainty::apply_jitter(&f_t, &stats, 1.0, 1.0, &noise).unwrap();
        let expected =
            crate::uncertainty::total_loss(&f_s, &f_t, &f_hat, stats.sigma_scalar, 0.3).unwrap();
        assert!((tape.scalar(lv.total).unwrap() - expected.total).abs() < 1e-12);
        assert!((tape.scalar(lv.info).unwrap() - expected.info).abs() < 1e-12);
    }

    #[test]
    fn small_model_gradients_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let p = ModelParams::init(6, 5, 4, &mut rng);
        let batch = random_batch(5, &mut rng);
        let noise = JitterNoise::sample(5, 4, &mut rng);
        let mask = crate::uncertainty::sample_dropout_mask(5, 4, 0.3, &mut rng).unwrap();
        for target in [
            AugmentTarget::TargetFeature,
            AugmentTarget::SourceImageFeature,
        ] {
            for stop in [false, true] {
                let opts = LossOptions {
                    gamma: 0.6,
                    w1: 1.0,
                    w2: 1.0,
                    target,
                    stop_grad_sigma: stop,
                    temperature: 1.0,
                    activation: Activation::Tanh,
                };
                let report = grad_check(
                    &p.named(),
                    |t, v| {
                        let pv = ParamVars::from_slice(v);
                        Ok(build_loss(t, &pv, &batch, &noise, Some(&mask), &opts)?.total)
                    },
                    DEFAULT_STEP,
                )
                .unwrap();
                assert!(report.max_rel_err < 1e-4, "{target:?} {stop}: {report:?}");
            }
        }
    }
}
