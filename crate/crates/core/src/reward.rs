//! Siamese caption reward model trained with a Bradley–Terry pairwise loss.
//!
//! One MLP scores `concat(audio, text)`; the winner and loser of a pair go
//! through the same weights, so only the reward difference drives the
//! preference term.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numkit::ops::{log_sigmoid_scalar, relu_scalar, sigmoid_scalar};
use crate::numkit::{
    adam_step, affine_rows, glorot_uniform, AdamConfig, AdamState, Matrix, NumError, ParamSet, Tape, Var,
};
use crate::prefdata::ResolvedPair;
use crate::rng::{child, seeded};
use crate::synthworld::TextEncoder;
use crate::{Embedding, EMBED_DIM};

pub const INPUT_DIM: usize = 2 * EMBED_DIM;
pub const HIDDEN1: usize = 512;
pub const HIDDEN2: usize = 128;

const INIT_STREAM: u64 = 0;
const SHUFFLE_STREAM: u64 = 1;

#[derive(Debug, Error)]
pub enum RewardError {
    #[error("embedding has dimension {got}, expected {expected}")]
    Dim { expected: usize, got: usize },
    #[error("non-finite value in {0} embedding")]
    NonFiniteInput(&'static str),
    #[error("non-finite loss (bt {bt}, reg {reg}, total {total})")]
    NonFiniteLoss { bt: f64, reg: f64, total: f64 },
    #[error("invalid reward config: {}", .0.join("; "))]
    InvalidConfig(Vec<String>),
    #[error("no training pairs")]
    EmptyTrainingSet,
    #[error("no audio embedding for sample {0}")]
    MissingAudio(String),
    #[error("text encoder failed: {0}")]
    Encode(String),
    #[error(transparent)]
    Num(#[from] NumError),
}

/// Weights of the three affine layers, stored `out × in` with `1 × out` biases.
#[derive(Debug, Clone, PartialEq)]
pub struct RewardParams {
    pub l1_w: Matrix,
    pub l1_b: Matrix,
    pub l2_w: Matrix,
    pub l2_b: Matrix,
    pub head_w: Matrix,
    pub head_b: Matrix,
}

impl ParamSet for RewardParams {
    fn tensors(&self) -> Vec<(&str, &Matrix)> {
        vec![
            ("l1_w", &self.l1_w),
            ("l1_b", &self.l1_b),
            ("l2_w", &self.l2_w),
            ("l2_b", &self.l2_b),
            ("head_w", &self.head_w),
            ("head_b", &self.head_b),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<(&str, &mut Matrix)> {
        vec![
            ("l1_w", &mut self.l1_w),
            ("l1_b", &mut self.l1_b),
            ("l2_w", &mut self.l2_w),
            ("l2_b", &mut self.l2_b),
            ("head_w", &mut self.head_w),
            ("head_b", &mut self.head_b),
        ]
    }
}

impl RewardParams {
    /// Standard `1024 → 512 → 128 → 1` network with Glorot-uniform weights
    /// and zero biases.
    pub fn init(rng: &mut impl rand::Rng) -> Self {
        Self::init_with_dims(INPUT_DIM, HIDDEN1, HIDDEN2, rng)
    }

    /// Same architecture with custom widths. Used for small-scale tests.
    pub fn init_with_dims(input: usize, h1: usize, h2: usize, rng: &mut impl rand::Rng) -> Self {
        Self {
            l1_w: glorot_uniform(h1, input, rng),
            l1_b: Matrix::zeros(1, h1),
            l2_w: glorot_uniform(h2, h1, rng),
            l2_b: Matrix::zeros(1, h2),
            head_w: glorot_uniform(1, h2, rng),
            head_b: Matrix::zeros(1, 1),
        }
    }

    pub fn zeros() -> Self {
        Self::zeros_with_dims(INPUT_DIM, HIDDEN1, HIDDEN2)
    }

    pub fn zeros_with_dims(input: usize, h1: usize, h2: usize) -> Self {
        Self {
            l1_w: Matrix::zeros(h1, input),
            l1_b: Matrix::zeros(1, h1),
            l2_w: Matrix::zeros(h2, h1),
            l2_b: Matrix::zeros(1, h2),
            head_w: Matrix::zeros(1, h2),
            head_b: Matrix::zeros(1, 1),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.l1_w.cols()
    }

    /// True when the layer shapes are exactly `1024 → 512 → 128 → 1`.
    pub fn has_standard_shape(&self) -> bool {
        let expected = Self::zeros_with_dims(INPUT_DIM, HIDDEN1, HIDDEN2);
        self.tensors().iter().zip(expected.tensors()).all(|((_, a), (_, b))| a.shape() == b.shape())
    }

    fn record(&self, tape: &mut Tape) -> [Var; 6] {
        [
            tape.param(self.l1_w.clone()),
            tape.param(self.l1_b.clone()),
            tape.param(self.l2_w.clone()),
            tape.param(self.l2_b.clone()),
            tape.param(self.head_w.clone()),
            tape.param(self.head_b.clone()),
        ]
    }

    fn from_grads(grads: &mut crate::numkit::Gradients, vars: &[Var; 6], like: &Self) -> Self {
        let mut out = like.clone();
        for ((_, dst), v) in out.tensors_mut().into_iter().zip(vars) {
            match grads.take(*v) {
                Some(g) => *dst = g,
                None => dst.fill(0.0),
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardTrainConfig {
    pub beta: f64,
    pub lambda: f64,
    pub clamp_lo: f64,
    pub clamp_hi: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for RewardTrainConfig {
    fn default() -> Self {
        Self { beta: 5.0, lambda: 0.1, clamp_lo: 0.01, clamp_hi: 0.99, epochs: 70, batch_size: 64, lr: 1e-4, seed: 0 }
    }
}

impl RewardTrainConfig {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if !(self.clamp_lo > 0.0 && self.clamp_lo < self.clamp_hi && self.clamp_hi < 1.0) {
            v.push(format!("need 0 < clamp_lo < clamp_hi < 1, got {} and {}", self.clamp_lo, self.clamp_hi));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            v.push(format!("beta must be positive, got {}", self.beta));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            v.push(format!("lambda must be non-negative, got {}", self.lambda));
        }
        if self.epochs == 0 {
            v.push("epochs must be at least 1".into());
        }
        if self.batch_size == 0 {
            v.push("batch_size must be at least 1".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            v.push(format!("lr must be positive, got {}", self.lr));
        }
        v
    }

    pub fn validate(&self) -> Result<(), RewardError> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(RewardError::InvalidConfig(v))
        }
    }

    pub fn clamp(&self) -> Clamp {
        Clamp { lo: self.clamp_lo, hi: self.clamp_hi }
    }
}

/// Output band of the reward model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Clamp {
    pub lo: f64,
    pub hi: f64,
}

impl Default for Clamp {
    fn default() -> Self {
        Self { lo: 0.01, hi: 0.99 }
    }
}

fn check_embedding(e: &Embedding, what: &'static str) -> Result<(), RewardError> {
    if e.dim() != EMBED_DIM {
        return Err(RewardError::Dim { expected: EMBED_DIM, got: e.dim() });
    }
    if !e.is_finite() {
        return Err(RewardError::NonFiniteInput(what));
    }
    Ok(())
}

/// `concat(audio, text)` as `f64`.
pub fn input_row(audio: &Embedding, text: &Embedding) -> Vec<f64> {
    audio.as_slice().iter().chain(text.as_slice()).map(|&v| v as f64).collect()
}

/// Rewards for every row of `x` (`n × input_dim`).
pub fn score_rows(params: &RewardParams, x: &Matrix, clamp: Clamp) -> Result<Vec<f64>, RewardError> {
    let h1 = affine_rows(x, &params.l1_w, &params.l1_b)?.map(relu_scalar);
    let h2 = affine_rows(&h1, &params.l2_w, &params.l2_b)?.map(relu_scalar);
    let out = affine_rows(&h2, &params.head_w, &params.head_b)?;
    Ok(out.as_slice().iter().map(|&z| sigmoid_scalar(z).clamp(clamp.lo, clamp.hi)).collect())
}

/// Reward of `text` as a caption for `audio`, always inside `[clamp.lo, clamp.hi]`.
pub fn score(params: &RewardParams, audio: &Embedding, text: &Embedding, clamp: Clamp) -> Result<f64, RewardError> {
    check_embedding(audio, "audio")?;
    check_embedding(text, "text")?;
    let x = Matrix::row_vector(input_row(audio, text));
    Ok(score_rows(params, &x, clamp)?[0])
}

fn forward(tape: &mut Tape, vars: &[Var; 6], x: Var, clamp: Clamp) -> Result<Var, NumError> {
    let a1 = tape.affine(x, vars[0], vars[1])?;
    let h1 = tape.relu(a1);
    let a2 = tape.affine(h1, vars[2], vars[3])?;
    let h2 = tape.relu(a2);
    let z = tape.affine(h2, vars[4], vars[5])?;
    let s = tape.sigmoid(z);
    Ok(tape.clamp(s, clamp.lo, clamp.hi))
}

/// Probability that the caption with reward `r_1` is preferred over the one
/// with reward `r_2`: `σ(r_1 - r_2)`.
pub fn preference_probability(r_1: f64, r_2: f64) -> f64 {
    sigmoid_scalar(r_1 - r_2)
}

/// Loss terms for given rewards: `(bt, reg, total)` with
/// `bt = -log σ(β (r_w - r_l))` and `reg = λ (r_w² + r_l²)`.
pub fn loss_terms(r_w: f64, r_l: f64, beta: f64, lambda: f64) -> (f64, f64, f64) {
    let bt = -log_sigmoid_scalar(beta * (r_w - r_l));
    let reg = lambda * (r_w * r_w + r_l * r_l);
    (bt, reg, bt + reg)
}

#[derive(Debug, Clone)]
pub struct BtLoss {
    /// Batch mean of `bt + reg`.
    pub total: f64,
    pub bt: f64,
    pub reg: f64,
    pub r_w: Vec<f64>,
    pub r_l: Vec<f64>,
    pub grads: RewardParams,
}

impl BtLoss {
    /// Number of pairs with `r_w > r_l`.
    pub fn correct(&self) -> usize {
        self.r_w.iter().zip(&self.r_l).filter(|(w, l)| w > l).count()
    }
}

/// Mean loss and gradients over a batch of winner rows `xw` and loser rows
/// `xl` (same audio embedding in each row pair).
pub fn bt_loss_rows(
    params: &RewardParams,
    xw: &Matrix,
    xl: &Matrix,
    cfg: &RewardTrainConfig,
) -> Result<BtLoss, RewardError> {
    if xw.shape() != xl.shape() {
        return Err(NumError::Shape { op: "bt_loss", left: xw.shape(), right: xl.shape() }.into());
    }
    let n = xw.rows();
    let mut stacked = Vec::with_capacity(2 * xw.len());
    stacked.extend_from_slice(xw.as_slice());
    stacked.extend_from_slice(xl.as_slice());
    let x = Matrix::from_vec(2 * n, xw.cols(), stacked)?;

    let mut tape = Tape::new();
    let vars = params.record(&mut tape);
    let xv = tape.constant(x);
    let r = forward(&mut tape, &vars, xv, cfg.clamp())?;
    let rw = tape.slice_rows(r, 0, n)?;
    let rl = tape.slice_rows(r, n, n)?;
    let diff = tape.sub(rw, rl)?;
    let scaled = tape.scale(diff, cfg.beta);
    let ls = tape.log_sigmoid(scaled);
    let mean_ls = tape.mean(ls);
    let bt = tape.scale(mean_ls, -1.0);
    let rw2 = tape.square(rw);
    let rl2 = tape.square(rl);
    let sq = tape.add(rw2, rl2)?;
    let mean_sq = tape.mean(sq);
    let reg = tape.scale(mean_sq, cfg.lambda);
    let total = tape.add(bt, reg)?;

    let (bt_v, reg_v, total_v) = (tape.scalar(bt), tape.scalar(reg), tape.scalar(total));
    if !total_v.is_finite() {
        return Err(RewardError::NonFiniteLoss { bt: bt_v, reg: reg_v, total: total_v });
    }
    let r_w = tape.value(rw).as_slice().to_vec();
    let r_l = tape.value(rl).as_slice().to_vec();
    let mut g = tape.backward(total);
    let grads = RewardParams::from_grads(&mut g, &vars, params);
    Ok(BtLoss { total: total_v, bt: bt_v, reg: reg_v, r_w, r_l, grads })
}

/// Loss and gradients for one resolved pair.
pub fn bt_loss(
    params: &RewardParams,
    audio: &Embedding,
    winner: &Embedding,
    loser: &Embedding,
    cfg: &RewardTrainConfig,
) -> Result<BtLoss, RewardError> {
    cfg.validate()?;
    check_embedding(audio, "audio")?;
    check_embedding(winner, "winner")?;
    check_embedding(loser, "loser")?;
    let xw = Matrix::row_vector(input_row(audio, winner));
    let xl = Matrix::row_vector(input_row(audio, loser));
    bt_loss_rows(params, &xw, &xl, cfg)
}

/// One training example: audio plus the preferred and rejected caption embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct PreferenceTriple {
    pub audio: Embedding,
    pub winner: Embedding,
    pub loser: Embedding,
}

/// Embeds resolved caption pairs against their samples' audio.
pub fn triples_from_resolved<'a>(
    pairs: &[ResolvedPair],
    audio: impl Fn(&str) -> Option<&'a Embedding>,
    encoder: &dyn TextEncoder,
) -> Result<Vec<PreferenceTriple>, RewardError> {
    let encode = |c: &str| encoder.encode(c).map_err(|e| RewardError::Encode(e.to_string()));
    pairs
        .iter()
        .map(|p| {
            let a = audio(&p.sample_id).ok_or_else(|| RewardError::MissingAudio(p.sample_id.clone()))?;
            Ok(PreferenceTriple { audio: a.clone(), winner: encode(&p.winner)?, loser: encode(&p.loser)? })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardEpoch {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_loss: Option<f64>,
    pub val_accuracy: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct RewardTrainOutput {
    pub params: RewardParams,
    pub curve: Vec<RewardEpoch>,
}

/// Loss and pairwise accuracy of `params` on a fixed set, without gradients.
pub fn evaluate_pairs(
    params: &RewardParams,
    pairs: &[PreferenceTriple],
    cfg: &RewardTrainConfig,
) -> Result<(f64, f64), RewardError> {
    let (xw, xl) = pair_rows(pairs)?;
    let rw = score_rows(params, &xw, cfg.clamp())?;
    let rl = score_rows(params, &xl, cfg.clamp())?;
    let n = pairs.len().max(1) as f64;
    let loss = rw.iter().zip(&rl).map(|(&w, &l)| loss_terms(w, l, cfg.beta, cfg.lambda).2).sum::<f64>() / n;
    let acc = rw.iter().zip(&rl).filter(|(w, l)| w > l).count() as f64 / n;
    Ok((loss, acc))
}

fn pair_rows(pairs: &[PreferenceTriple]) -> Result<(Matrix, Matrix), RewardError> {
    let mut w = Vec::with_capacity(pairs.len() * INPUT_DIM);
    let mut l = Vec::with_capacity(pairs.len() * INPUT_DIM);
    for p in pairs {
        check_embedding(&p.audio, "audio")?;
        check_embedding(&p.winner, "winner")?;
        check_embedding(&p.loser, "loser")?;
        w.extend(input_row(&p.audio, &p.winner));
        l.extend(input_row(&p.audio, &p.loser));
    }
    Ok((Matrix::from_vec(pairs.len(), INPUT_DIM, w)?, Matrix::from_vec(pairs.len(), INPUT_DIM, l)?))
}

/// Trains a freshly initialised standard-size model.
pub fn train_reward(
    train: &[PreferenceTriple],
    val: &[PreferenceTriple],
    cfg: &RewardTrainConfig,
) -> Result<RewardTrainOutput, RewardError> {
    let init = RewardParams::init(&mut child(cfg.seed, INIT_STREAM));
    train_reward_from(init, train, val, cfg)
}

/// Adam training from `init`. Pairs are reshuffled every epoch from a
/// stream derived from `cfg.seed`; the run is bit-reproducible.
pub fn train_reward_from(
    init: RewardParams,
    train: &[PreferenceTriple],
    val: &[PreferenceTriple],
    cfg: &RewardTrainConfig,
) -> Result<RewardTrainOutput, RewardError> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(RewardError::EmptyTrainingSet);
    }
    let (xw_all, xl_all) = pair_rows(train)?;
    let mut params = init;
    let mut state = AdamState::new(&params);
    let adam = AdamConfig { lr: cfg.lr, ..AdamConfig::default() };
    let mut rng = seeded(crate::rng::derive_seed(cfg.seed, SHUFFLE_STREAM));
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut curve = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let xw = gather(&xw_all, chunk);
            let xl = gather(&xl_all, chunk);
            let out = bt_loss_rows(&params, &xw, &xl, cfg)?;
            loss_sum += out.total * chunk.len() as f64;
            correct += out.correct();
            adam_step(&mut params, &out.grads, &mut state, &adam)?;
        }
        let (val_loss, val_accuracy) = if val.is_empty() {
            (None, None)
        } else {
            let (l, a) = evaluate_pairs(&params, val, cfg)?;
            (Some(l), Some(a))
        };
        curve.push(RewardEpoch {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            train_accuracy: correct as f64 / train.len() as f64,
            val_loss,
            val_accuracy,
        });
    }
    Ok(RewardTrainOutput { params, curve })
}

fn gather(x: &Matrix, idx: &[usize]) -> Matrix {
    let mut data = Vec::with_capacity(idx.len() * x.cols());
    for &i in idx {
        data.extend_from_slice(x.row(i));
    }
    Matrix::from_vec(idx.len(), x.cols(), data).expect("rows gathered")
}
