//! Self-critical policy-gradient fine-tuning against a frozen reward.
//!
//! For each audio clip one caption `w^s` is sampled and one `w^g` decoded
//! greedily. Both rewards pass through the length penalty, and the sampled
//! sequence's log-probability is pushed up or down by the advantage
//! `r̃(w^s) - r̃(w^g)`.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numkit::{adam_step, AdamConfig, AdamState, Matrix, NumError, ParamSet};
use crate::policy::{decode_with_rng, weighted_log_prob_grad, DecodeConfig, Decoded, PolicyError, PolicyParams};
use crate::reward::{input_row, score_rows, Clamp, RewardError, RewardParams, INPUT_DIM};
use crate::rng::{child, derive_seed};
use crate::synthworld::{event_f1, TextEncoder, TokenId, Vocab, World};
use crate::Embedding;

const SHUFFLE_STREAM: u64 = 1;
const STEP_STREAM: u64 = 2;

#[derive(Debug, Error)]
pub enum ScstError {
    #[error("empty audio set")]
    EmptyAudioSet,
    #[error("empty batch")]
    EmptyBatch,
    #[error("invalid rlhf config: {}", .0.join("; "))]
    InvalidConfig(Vec<String>),
    #[error(
        "non-finite loss at sample {sample_id}: sampled reward {sampled}, greedy reward {greedy}, log-prob {log_prob}"
    )]
    NonFinite { sample_id: String, sampled: f64, greedy: f64, log_prob: f64 },
    #[error("unknown sample {0}")]
    UnknownSample(String),
    #[error("reward: {0}")]
    Reward(#[from] RewardError),
    #[error("policy: {0}")]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Num(#[from] NumError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ShapingConfig {
    pub alpha: f64,
    pub expected_len: usize,
}

impl Default for ShapingConfig {
    fn default() -> Self {
        Self { alpha: 1.0, expected_len: 13 }
    }
}

impl ShapingConfig {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            v.push(format!("alpha must be non-negative, got {}", self.alpha));
        }
        if self.expected_len == 0 {
            v.push("expected_len must be at least 1".into());
        }
        v
    }
}

/// `α (1 - L_e/L_c) max(0, L_c - L_e)`; zero whenever `L_c ≤ L_e`.
pub fn length_penalty(len: usize, cfg: &ShapingConfig) -> f64 {
    if len <= cfg.expected_len {
        return 0.0;
    }
    let (lc, le) = (len as f64, cfg.expected_len as f64);
    cfg.alpha * (1.0 - le / lc) * (lc - le)
}

pub fn shape_reward(r_old: f64, len: usize, cfg: &ShapingConfig) -> f64 {
    r_old - length_penalty(len, cfg)
}

/// An audio clip to caption during fine-tuning. No reference caption is needed.
#[derive(Debug, Clone, PartialEq)]
pub struct RlSample {
    pub sample_id: String,
    pub audio: Embedding,
}

/// Frozen caption reward. Implementations take `&self`, so fine-tuning
/// cannot modify them.
pub trait CaptionReward {
    fn score(&self, sample: &RlSample, tokens: &[TokenId]) -> Result<f64, ScstError>;

    fn score_batch(&self, items: &[(&RlSample, &[TokenId])]) -> Result<Vec<f64>, ScstError> {
        items.iter().map(|(s, t)| self.score(s, t)).collect()
    }
}

/// The trained reward model over text embeddings of decoded captions.
pub struct RewardModelScorer<'a> {
    pub params: &'a RewardParams,
    pub clamp: Clamp,
    pub encoder: &'a dyn TextEncoder,
    pub vocab: &'a Vocab,
}

impl CaptionReward for RewardModelScorer<'_> {
    fn score(&self, sample: &RlSample, tokens: &[TokenId]) -> Result<f64, ScstError> {
        Ok(self.score_batch(&[(sample, tokens)])?[0])
    }

    fn score_batch(&self, items: &[(&RlSample, &[TokenId])]) -> Result<Vec<f64>, ScstError> {
        let mut data = Vec::with_capacity(items.len() * INPUT_DIM);
        for (s, t) in items {
            let text = self
                .encoder
                .encode(&self.vocab.decode(t))
                .map_err(|e| ScstError::Reward(RewardError::Encode(e.to_string())))?;
            data.extend(input_row(&s.audio, &text));
        }
        let x = Matrix::from_vec(items.len(), INPUT_DIM, data)?;
        Ok(score_rows(self.params, &x, self.clamp)?)
    }
}

/// Ground-truth reward from the synthetic world: event-F1 of the caption
/// against the clip's true events, plus `length_bonus` per emitted token.
pub struct OracleReward<'a> {
    pub world: &'a World,
    pub length_bonus: f64,
}

impl CaptionReward for OracleReward<'_> {
    fn score(&self, sample: &RlSample, tokens: &[TokenId]) -> Result<f64, ScstError> {
        let s =
            self.world.sample(&sample.sample_id).ok_or_else(|| ScstError::UnknownSample(sample.sample_id.clone()))?;
        Ok(event_f1(&s.true_events, tokens, &self.world.vocab) + self.length_bonus * tokens.len() as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BatchStats {
    pub mean_shaped_sampled: f64,
    pub mean_shaped_greedy: f64,
    pub mean_raw_sampled: f64,
    pub mean_raw_greedy: f64,
    pub mean_len_sampled: f64,
    pub mean_len_greedy: f64,
    pub mean_advantage: f64,
}

#[derive(Debug, Clone)]
pub struct ScstStep {
    /// `-(1/B) Σ_i (r̃(w^s_i) - r̃(w^g_i)) log p(w^s_i)`.
    pub loss: f64,
    pub grads: PolicyParams,
    pub stats: BatchStats,
    pub sampled: Vec<Decoded>,
    pub advantages: Vec<f64>,
}

/// One self-critical step on `batch`. Sample `i` decodes with the stream
/// `child(step_seed, i)`, so results do not depend on batch order.
pub fn scst_step(
    policy: &PolicyParams,
    reward: &dyn CaptionReward,
    batch: &[RlSample],
    shaping: &ShapingConfig,
    max_len: usize,
    step_seed: u64,
) -> Result<ScstStep, ScstError> {
    if batch.is_empty() {
        return Err(ScstError::EmptyBatch);
    }
    let greedy_cfg = DecodeConfig::greedy(max_len);
    let sample_cfg = DecodeConfig::multinomial(max_len, 0);
    let mut sampled = Vec::with_capacity(batch.len());
    let mut greedy = Vec::with_capacity(batch.len());
    for (i, s) in batch.iter().enumerate() {
        let mut rng = child(step_seed, i as u64);
        sampled.push(decode_with_rng(policy, &s.audio, &sample_cfg, &mut rng)?);
        greedy.push(decode_with_rng(policy, &s.audio, &greedy_cfg, &mut rng)?);
    }
    let mut items: Vec<(&RlSample, &[TokenId])> = Vec::with_capacity(2 * batch.len());
    items.extend(batch.iter().zip(&sampled).map(|(s, d)| (s, d.tokens.as_slice())));
    items.extend(batch.iter().zip(&greedy).map(|(s, d)| (s, d.tokens.as_slice())));
    let raw = reward.score_batch(&items)?;
    let (raw_s, raw_g) = raw.split_at(batch.len());

    let n = batch.len() as f64;
    let mut stats = BatchStats::default();
    let mut advantages = Vec::with_capacity(batch.len());
    for i in 0..batch.len() {
        let rs = shape_reward(raw_s[i], sampled[i].len(), shaping);
        let rg = shape_reward(raw_g[i], greedy[i].len(), shaping);
        let adv = rs - rg;
        if !(adv * sampled[i].total_log_prob).is_finite() {
            return Err(ScstError::NonFinite {
                sample_id: batch[i].sample_id.clone(),
                sampled: rs,
                greedy: rg,
                log_prob: sampled[i].total_log_prob,
            });
        }
        stats.mean_shaped_sampled += rs / n;
        stats.mean_shaped_greedy += rg / n;
        stats.mean_raw_sampled += raw_s[i] / n;
        stats.mean_raw_greedy += raw_g[i] / n;
        stats.mean_len_sampled += sampled[i].len() as f64 / n;
        stats.mean_len_greedy += greedy[i].len() as f64 / n;
        stats.mean_advantage += adv / n;
        advantages.push(adv);
    }

    // Samples with zero advantage contribute exactly nothing, so only the
    // rest go through the recorded forward pass.
    let active: Vec<usize> = (0..batch.len()).filter(|&i| advantages[i] != 0.0).collect();
    let (loss, grads) = if active.is_empty() {
        let mut g = policy.clone();
        g.zero();
        (0.0, g)
    } else {
        let audio: Vec<&Embedding> = active.iter().map(|&i| &batch[i].audio).collect();
        let targets: Vec<Vec<TokenId>> = active.iter().map(|&i| sampled[i].scored_tokens()).collect();
        let weights: Vec<f64> = active.iter().map(|&i| -advantages[i] / n).collect();
        let (obj, _, grads) = weighted_log_prob_grad(policy, &audio, &targets, &weights)?;
        (obj, grads)
    };
    Ok(ScstStep { loss, grads, stats, sampled, advantages })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RlhfConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_epochs: usize,
    pub warmup_multiplier: f64,
    pub decay_factor: f64,
    pub decay_every: usize,
    pub max_len: usize,
    pub seed: u64,
    pub shaping: ShapingConfig,
}

impl Default for RlhfConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 128,
            lr: 1e-6,
            weight_decay: 1e-6,
            warmup_epochs: 2,
            warmup_multiplier: 1.1,
            decay_factor: 10.0,
            decay_every: 10,
            max_len: 30,
            seed: 0,
            shaping: ShapingConfig::default(),
        }
    }
}

impl RlhfConfig {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        for (name, value) in [
            ("epochs", self.epochs),
            ("batch_size", self.batch_size),
            ("decay_every", self.decay_every),
            ("max_len", self.max_len),
        ] {
            if value == 0 {
                v.push(format!("{name} must be at least 1"));
            }
        }
        for (name, value) in
            [("lr", self.lr), ("warmup_multiplier", self.warmup_multiplier), ("decay_factor", self.decay_factor)]
        {
            if !(value > 0.0 && value.is_finite()) {
                v.push(format!("{name} must be positive, got {value}"));
            }
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            v.push(format!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        if self.warmup_epochs >= self.epochs {
            v.push(format!("warmup_epochs ({}) must be below epochs ({})", self.warmup_epochs, self.epochs));
        }
        v.extend(self.shaping.violations());
        v
    }

    /// Learning rate at fractional position `epoch + progress` (0-based,
    /// `progress ∈ [0, 1)`): a linear ramp from `lr` to
    /// `warmup_multiplier · lr` over the warmup epochs, then division by
    /// `decay_factor` at every multiple of `decay_every` epochs.
    pub fn lr_at(&self, epoch: usize, progress: f64) -> f64 {
        let t = epoch as f64 + progress;
        let ramp = if self.warmup_epochs == 0 { 1.0 } else { (t / self.warmup_epochs as f64).min(1.0) };
        let peak = self.lr * (1.0 + (self.warmup_multiplier - 1.0) * ramp);
        peak / self.decay_factor.powi((epoch / self.decay_every) as i32)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RlhfEpoch {
    pub epoch: usize,
    pub lr: f64,
    pub mean_shaped_reward: f64,
    pub mean_raw_reward: f64,
    pub mean_greedy_shaped_reward: f64,
    pub mean_len_sampled: f64,
    pub mean_len_greedy: f64,
}

pub fn rlhf_train(
    policy: PolicyParams,
    reward: &dyn CaptionReward,
    audio_set: &[RlSample],
    cfg: &RlhfConfig,
) -> Result<(PolicyParams, Vec<RlhfEpoch>), ScstError> {
    rlhf_train_with(policy, reward, audio_set, cfg, |_, _| {})
}

/// Fine-tunes `policy`, calling `on_epoch` after every epoch with the
/// epoch's statistics and current weights.
pub fn rlhf_train_with(
    mut policy: PolicyParams,
    reward: &dyn CaptionReward,
    audio_set: &[RlSample],
    cfg: &RlhfConfig,
    mut on_epoch: impl FnMut(&RlhfEpoch, &PolicyParams),
) -> Result<(PolicyParams, Vec<RlhfEpoch>), ScstError> {
    let bad = cfg.violations();
    if !bad.is_empty() {
        return Err(ScstError::InvalidConfig(bad));
    }
    if audio_set.is_empty() {
        return Err(ScstError::EmptyAudioSet);
    }
    let mut state = AdamState::new(&policy);
    let mut shuffle = child(cfg.seed, SHUFFLE_STREAM);
    let mut order: Vec<usize> = (0..audio_set.len()).collect();
    let steps_per_epoch = audio_set.len().div_ceil(cfg.batch_size);
    let mut curve = Vec::with_capacity(cfg.epochs);
    let mut step_counter = 0u64;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle);
        let mut acc = [0.0f64; 5];
        for (k, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<RlSample> = chunk.iter().map(|&i| audio_set[i].clone()).collect();
            let step_seed = derive_seed(derive_seed(cfg.seed, STEP_STREAM), step_counter);
            step_counter += 1;
            let out = scst_step(&policy, reward, &batch, &cfg.shaping, cfg.max_len, step_seed)?;
            let lr = cfg.lr_at(epoch, k as f64 / steps_per_epoch as f64);
            let adam = AdamConfig { lr, weight_decay: cfg.weight_decay, ..AdamConfig::default() };
            adam_step(&mut policy, &out.grads, &mut state, &adam)?;
            let w = batch.len() as f64 / audio_set.len() as f64;
            let s = out.stats;
            for (a, v) in acc.iter_mut().zip([
                s.mean_shaped_sampled,
                s.mean_raw_sampled,
                s.mean_shaped_greedy,
                s.mean_len_sampled,
                s.mean_len_greedy,
            ]) {
                *a += w * v;
            }
        }
        let record = RlhfEpoch {
            epoch: epoch + 1,
            lr: cfg.lr_at(epoch, 0.0),
            mean_shaped_reward: acc[0],
            mean_raw_reward: acc[1],
            mean_greedy_shaped_reward: acc[2],
            mean_len_sampled: acc[3],
            mean_len_greedy: acc[4],
        };
        on_epoch(&record, &policy);
        curve.push(record);
    }
    Ok((policy, curve))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GreedyEval {
    pub mean_shaped_reward: f64,
    pub mean_raw_reward: f64,
    pub mean_len: f64,
}

/// Greedy captions for every clip, scored and shaped.
pub fn evaluate_greedy(
    policy: &PolicyParams,
    reward: &dyn CaptionReward,
    set: &[RlSample],
    shaping: &ShapingConfig,
    max_len: usize,
) -> Result<(GreedyEval, Vec<Decoded>), ScstError> {
    if set.is_empty() {
        return Err(ScstError::EmptyAudioSet);
    }
    let cfg = DecodeConfig::greedy(max_len);
    let decoded: Vec<Decoded> =
        set.iter().map(|s| crate::policy::decode(policy, &s.audio, &cfg)).collect::<Result<_, _>>()?;
    let items: Vec<(&RlSample, &[TokenId])> = set.iter().zip(&decoded).map(|(s, d)| (s, d.tokens.as_slice())).collect();
    let raw = reward.score_batch(&items)?;
    let n = set.len() as f64;
    let mut e = GreedyEval { mean_shaped_reward: 0.0, mean_raw_reward: 0.0, mean_len: 0.0 };
    for (r, d) in raw.iter().zip(&decoded) {
        e.mean_shaped_reward += shape_reward(*r, d.len(), shaping) / n;
        e.mean_raw_reward += r / n;
        e.mean_len += d.len() as f64 / n;
    }
    Ok((e, decoded))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn penalty_fixtures() {
        let standard = ShapingConfig { alpha: 1.0, expected_len: 13 };
        assert_eq!(length_penalty(13, &standard), 0.0);
        assert!((length_penalty(26, &standard) - 6.5).abs() < 1e-12);
        let mild = ShapingConfig { alpha: 0.4, expected_len: 13 };
        assert!((length_penalty(15, &mild) - 0.4 * (2.0 / 15.0) * 2.0).abs() < 1e-15);
        assert_eq!(shape_reward(0.7, 0, &standard), 0.7);
    }

    #[test]
    fn schedule_ramps_then_decays() {
        let cfg = RlhfConfig::default();
        assert_eq!(cfg.lr_at(0, 0.0), 1e-6);
        assert!((cfg.lr_at(1, 0.0) - 1.05e-6).abs() < 1e-18);
        assert!((cfg.lr_at(2, 0.0) - 1.1e-6).abs() < 1e-18);
        assert!((cfg.lr_at(9, 0.5) - 1.1e-6).abs() < 1e-18);
        assert!((cfg.lr_at(10, 0.0) - 1.1e-7).abs() < 1e-19);
        assert!((cfg.lr_at(25, 0.0) - 1.1e-8).abs() < 1e-20);
    }

    #[test]
    fn config_violations() {
        let cfg = RlhfConfig { epochs: 2, warmup_epochs: 2, lr: 0.0, ..Default::default() };
        assert_eq!(cfg.violations().len(), 2);
        assert!(RlhfConfig::default().violations().is_empty());
    }
}
