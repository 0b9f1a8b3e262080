//! GRU caption policy conditioned on an audio embedding.
//!
//! The initial hidden state is `tanh(P a + p)` for audio embedding `a`; each
//! step embeds the previous token, applies a GRU cell and projects the new
//! state to vocabulary logits. `<pad>` and `<bos>` are masked out of every
//! output distribution, so they are never generated and carry no mass.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numkit::ops::{affine, log_softmax, sigmoid_scalar};
use crate::numkit::{adam_step, glorot_uniform, AdamConfig, AdamState, Matrix, NumError, ParamSet, Tape, Var};
use crate::rng::{child, seeded};
use crate::synthworld::{TokenId, BOS, EOS, PAD};
use crate::{Embedding, EMBED_DIM};

/// Added to the logits of tokens that may never be emitted.
pub const MASKED_LOGIT: f64 = -1e9;

const INIT_STREAM: u64 = 0;
const SHUFFLE_STREAM: u64 = 1;

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("token {token} outside vocabulary of {vocab}")]
    Token { token: TokenId, vocab: usize },
    #[error("audio embedding has dimension {0}, expected {EMBED_DIM}")]
    AudioDim(usize),
    #[error("invalid decode config: {}", .0.join("; "))]
    InvalidDecode(Vec<String>),
    #[error("invalid training config: {}", .0.join("; "))]
    InvalidTrain(Vec<String>),
    #[error("empty training corpus")]
    EmptyCorpus,
    #[error("non-finite training loss at epoch {epoch}")]
    NonFiniteLoss { epoch: usize },
    #[error(transparent)]
    Num(#[from] NumError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyDims {
    pub vocab: usize,
    pub embed: usize,
    pub hidden: usize,
}

impl Default for PolicyDims {
    fn default() -> Self {
        Self { vocab: 64, embed: 64, hidden: 128 }
    }
}

/// Policy weights. Affine maps are stored `out × in` with `1 × out` biases;
/// the GRU follows the reset-gate-inside-candidate convention.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    pub embed: Matrix,
    pub proj_w: Matrix,
    pub proj_b: Matrix,
    pub w_ir: Matrix,
    pub w_iz: Matrix,
    pub w_in: Matrix,
    pub b_ir: Matrix,
    pub b_iz: Matrix,
    pub b_in: Matrix,
    pub w_hr: Matrix,
    pub w_hz: Matrix,
    pub w_hn: Matrix,
    pub b_hr: Matrix,
    pub b_hz: Matrix,
    pub b_hn: Matrix,
    pub out_w: Matrix,
    pub out_b: Matrix,
}

const N_TENSORS: usize = 17;

impl ParamSet for PolicyParams {
    fn tensors(&self) -> Vec<(&str, &Matrix)> {
        vec![
            ("embed", &self.embed),
            ("proj_w", &self.proj_w),
            ("proj_b", &self.proj_b),
            ("w_ir", &self.w_ir),
            ("w_iz", &self.w_iz),
            ("w_in", &self.w_in),
            ("b_ir", &self.b_ir),
            ("b_iz", &self.b_iz),
            ("b_in", &self.b_in),
            ("w_hr", &self.w_hr),
            ("w_hz", &self.w_hz),
            ("w_hn", &self.w_hn),
            ("b_hr", &self.b_hr),
            ("b_hz", &self.b_hz),
            ("b_hn", &self.b_hn),
            ("out_w", &self.out_w),
            ("out_b", &self.out_b),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<(&str, &mut Matrix)> {
        vec![
            ("embed", &mut self.embed),
            ("proj_w", &mut self.proj_w),
            ("proj_b", &mut self.proj_b),
            ("w_ir", &mut self.w_ir),
            ("w_iz", &mut self.w_iz),
            ("w_in", &mut self.w_in),
            ("b_ir", &mut self.b_ir),
            ("b_iz", &mut self.b_iz),
            ("b_in", &mut self.b_in),
            ("w_hr", &mut self.w_hr),
            ("w_hz", &mut self.w_hz),
            ("w_hn", &mut self.w_hn),
            ("b_hr", &mut self.b_hr),
            ("b_hz", &mut self.b_hz),
            ("b_hn", &mut self.b_hn),
            ("out_w", &mut self.out_w),
            ("out_b", &mut self.out_b),
        ]
    }
}

impl PolicyParams {
    pub fn zeros(dims: PolicyDims) -> Self {
        let PolicyDims { vocab: v, embed: e, hidden: h } = dims;
        Self {
            embed: Matrix::zeros(v, e),
            proj_w: Matrix::zeros(h, EMBED_DIM),
            proj_b: Matrix::zeros(1, h),
            w_ir: Matrix::zeros(h, e),
            w_iz: Matrix::zeros(h, e),
            w_in: Matrix::zeros(h, e),
            b_ir: Matrix::zeros(1, h),
            b_iz: Matrix::zeros(1, h),
            b_in: Matrix::zeros(1, h),
            w_hr: Matrix::zeros(h, h),
            w_hz: Matrix::zeros(h, h),
            w_hn: Matrix::zeros(h, h),
            b_hr: Matrix::zeros(1, h),
            b_hz: Matrix::zeros(1, h),
            b_hn: Matrix::zeros(1, h),
            out_w: Matrix::zeros(v, h),
            out_b: Matrix::zeros(1, v),
        }
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init(dims: PolicyDims, rng: &mut impl Rng) -> Self {
        let PolicyDims { vocab: v, embed: e, hidden: h } = dims;
        let mut p = Self::zeros(dims);
        p.embed = glorot_uniform(v, e, rng);
        p.proj_w = glorot_uniform(h, EMBED_DIM, rng);
        p.w_ir = glorot_uniform(h, e, rng);
        p.w_iz = glorot_uniform(h, e, rng);
        p.w_in = glorot_uniform(h, e, rng);
        p.w_hr = glorot_uniform(h, h, rng);
        p.w_hz = glorot_uniform(h, h, rng);
        p.w_hn = glorot_uniform(h, h, rng);
        p.out_w = glorot_uniform(v, h, rng);
        p
    }

    pub fn dims(&self) -> PolicyDims {
        PolicyDims { vocab: self.embed.rows(), embed: self.embed.cols(), hidden: self.proj_w.rows() }
    }

    pub fn vocab_size(&self) -> usize {
        self.embed.rows()
    }

    /// Initial hidden state for an audio embedding.
    pub fn initial_state(&self, audio: &Embedding) -> Result<Vec<f64>, PolicyError> {
        if audio.dim() != EMBED_DIM {
            return Err(PolicyError::AudioDim(audio.dim()));
        }
        let h = affine(&self.proj_w, self.proj_b.as_slice(), &audio.to_f64())?;
        Ok(h.into_iter().map(f64::tanh).collect())
    }

    fn record(&self, tape: &mut Tape) -> Vec<Var> {
        self.tensors().into_iter().map(|(_, m)| tape.param(m.clone())).collect()
    }

    fn take_grads(&self, grads: &mut crate::numkit::Gradients, vars: &[Var]) -> Self {
        let mut out = self.clone();
        for ((_, dst), v) in out.tensors_mut().into_iter().zip(vars) {
            match grads.take(*v) {
                Some(g) => *dst = g,
                None => dst.fill(0.0),
            }
        }
        out
    }
}

/// One GRU step from hidden state `h` after reading `token`. Returns the raw
/// (unmasked) logits over the vocabulary and the next hidden state.
pub fn step(params: &PolicyParams, h: &[f64], token: TokenId) -> Result<(Vec<f64>, Vec<f64>), PolicyError> {
    let v = params.vocab_size();
    if token >= v {
        return Err(PolicyError::Token { token, vocab: v });
    }
    let x = params.embed.row(token);
    let gate = |w_i: &Matrix, b_i: &Matrix, w_h: &Matrix, b_h: &Matrix| -> Result<(Vec<f64>, Vec<f64>), NumError> {
        Ok((affine(w_i, b_i.as_slice(), x)?, affine(w_h, b_h.as_slice(), h)?))
    };
    let (xr, hr) = gate(&params.w_ir, &params.b_ir, &params.w_hr, &params.b_hr)?;
    let (xz, hz) = gate(&params.w_iz, &params.b_iz, &params.w_hz, &params.b_hz)?;
    let (xn, hn) = gate(&params.w_in, &params.b_in, &params.w_hn, &params.b_hn)?;
    let next: Vec<f64> = (0..h.len())
        .map(|i| {
            let r = sigmoid_scalar(xr[i] + hr[i]);
            let z = sigmoid_scalar(xz[i] + hz[i]);
            let n = (xn[i] + r * hn[i]).tanh();
            (1.0 - z) * n + z * h[i]
        })
        .collect();
    let logits = affine(&params.out_w, params.out_b.as_slice(), &next)?;
    Ok((logits, next))
}

/// Logits with `<pad>` and `<bos>` suppressed.
pub fn mask_logits(logits: &mut [f64]) {
    for t in [PAD, BOS] {
        if let Some(l) = logits.get_mut(t) {
            *l += MASKED_LOGIT;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecodeMode {
    Greedy,
    Multinomial,
    Topk,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeConfig {
    pub mode: DecodeMode,
    pub k: usize,
    pub temperature: f64,
    pub max_len: usize,
    pub seed: u64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self { mode: DecodeMode::Greedy, k: 5, temperature: 1.0, max_len: 30, seed: 0 }
    }
}

impl DecodeConfig {
    pub fn greedy(max_len: usize) -> Self {
        Self { mode: DecodeMode::Greedy, max_len, ..Self::default() }
    }

    pub fn multinomial(max_len: usize, seed: u64) -> Self {
        Self { mode: DecodeMode::Multinomial, max_len, seed, ..Self::default() }
    }

    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.k == 0 {
            v.push("k must be at least 1".into());
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            v.push(format!("temperature must be positive, got {}", self.temperature));
        }
        if self.max_len == 0 {
            v.push("max_len must be at least 1".into());
        }
        v
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decoded {
    /// Emitted tokens, without `<bos>` or the terminating `<eos>`.
    pub tokens: Vec<TokenId>,
    /// Log-probability of every emitted token under the model, including
    /// the `<eos>` step when the sequence terminated.
    pub step_log_probs: Vec<f64>,
    pub total_log_prob: f64,
    pub ended: bool,
}

impl Decoded {
    /// Caption length: emitted tokens excluding `<bos>`/`<eos>`.
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// The target sequence for re-scoring: tokens plus `<eos>` if emitted.
    pub fn scored_tokens(&self) -> Vec<TokenId> {
        let mut t = self.tokens.clone();
        if self.ended {
            t.push(EOS);
        }
        t
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(x: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in x.iter().enumerate().skip(1) {
        if v > x[best] {
            best = i;
        }
    }
    best
}

/// Draws an index from `probs` by walking the cumulative sum against one
/// uniform variate.
pub fn sample_index(probs: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            acc += p;
            last = i;
            if u < acc {
                return i;
            }
        }
    }
    last
}

/// Sampling distribution for one step: masked logits divided by the
/// temperature, with all but the `k` best allowed tokens removed in top-k
/// mode (ties at the cut resolved towards lower ids).
pub fn sampling_probs(masked_logits: &[f64], mode: DecodeMode, k: usize, temperature: f64) -> Vec<f64> {
    let mut scaled: Vec<f64> = masked_logits.iter().map(|l| l / temperature).collect();
    if mode == DecodeMode::Topk {
        let mut order: Vec<usize> = (0..scaled.len()).filter(|&t| t != PAD && t != BOS).collect();
        order.sort_by(|&a, &b| masked_logits[b].total_cmp(&masked_logits[a]).then(a.cmp(&b)));
        for &t in order.iter().skip(k) {
            scaled[t] = f64::NEG_INFINITY;
        }
    }
    let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scaled.iter().map(|&s| if s == f64::NEG_INFINITY { 0.0 } else { (s - max).exp() }).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// Decodes with the RNG seeded from `cfg.seed`.
pub fn decode(params: &PolicyParams, audio: &Embedding, cfg: &DecodeConfig) -> Result<Decoded, PolicyError> {
    decode_with_rng(params, audio, cfg, &mut seeded(cfg.seed))
}

/// Decodes from `<bos>` until `<eos>` or `cfg.max_len` tokens. Reported
/// log-probabilities are under the model's own distribution (masked logits,
/// temperature 1) whatever the sampling temperature or top-k cut.
pub fn decode_with_rng(
    params: &PolicyParams,
    audio: &Embedding,
    cfg: &DecodeConfig,
    rng: &mut impl Rng,
) -> Result<Decoded, PolicyError> {
    let bad = cfg.violations();
    if !bad.is_empty() {
        return Err(PolicyError::InvalidDecode(bad));
    }
    let mut h = params.initial_state(audio)?;
    let mut prev = BOS;
    let mut out = Decoded { tokens: Vec::new(), step_log_probs: Vec::new(), total_log_prob: 0.0, ended: false };
    while out.tokens.len() < cfg.max_len {
        let (mut logits, next) = step(params, &h, prev)?;
        h = next;
        mask_logits(&mut logits);
        let token = match cfg.mode {
            DecodeMode::Greedy => argmax(&logits),
            mode => sample_index(&sampling_probs(&logits, mode, cfg.k, cfg.temperature), rng),
        };
        let lp = log_softmax(&logits)[token];
        out.step_log_probs.push(lp);
        out.total_log_prob += lp;
        if token == EOS {
            out.ended = true;
            break;
        }
        out.tokens.push(token);
        prev = token;
    }
    Ok(out)
}

/// `log p(tokens | audio)` by a fresh forward pass, where `tokens` is the
/// full target sequence (include `<eos>` to score termination).
pub fn sequence_log_prob(params: &PolicyParams, audio: &Embedding, tokens: &[TokenId]) -> Result<f64, PolicyError> {
    let mut h = params.initial_state(audio)?;
    let mut prev = BOS;
    let mut total = 0.0;
    for &t in tokens {
        if t >= params.vocab_size() {
            return Err(PolicyError::Token { token: t, vocab: params.vocab_size() });
        }
        let (mut logits, next) = step(params, &h, prev)?;
        h = next;
        mask_logits(&mut logits);
        total += log_softmax(&logits)[t];
        prev = t;
    }
    Ok(total)
}

/// Records a teacher-forced pass over a batch and returns the `B × 1`
/// column of per-sequence log-probabilities. `targets[i]` is the full
/// target sequence for row `i`; inputs are `<bos>` followed by the targets.
pub(crate) fn record_sequence_log_probs(
    tape: &mut Tape,
    params: &PolicyParams,
    vars: &[Var],
    audio: &Matrix,
    targets: &[Vec<TokenId>],
) -> Result<Var, PolicyError> {
    let v = params.vocab_size();
    let b = targets.len();
    for &t in targets.iter().flatten() {
        if t >= v {
            return Err(PolicyError::Token { token: t, vocab: v });
        }
    }
    let vars: [Var; N_TENSORS] = vars.try_into().expect("policy tensor count");
    let [embed, proj_w, proj_b, w_ir, w_iz, w_in, b_ir, b_iz, b_in, w_hr, w_hz, w_hn, b_hr, b_hz, b_hn, out_w, out_b] =
        vars;
    let mut mask_row = vec![0.0; v];
    mask_logits(&mut mask_row);
    let mask = tape.constant(Matrix::row_vector(mask_row));

    let a = tape.constant(audio.clone());
    let pre = tape.affine(a, proj_w, proj_b)?;
    let mut h = tape.tanh(pre);
    let steps = targets.iter().map(Vec::len).max().unwrap_or(0);
    let mut total: Option<Var> = None;
    let mut prev: Vec<TokenId> = vec![BOS; b];
    for t in 0..steps {
        let x = tape.embed(embed, &prev)?;
        let xr = tape.affine(x, w_ir, b_ir)?;
        let hr = tape.affine(h, w_hr, b_hr)?;
        let sr = tape.add(xr, hr)?;
        let r = tape.sigmoid(sr);
        let xz = tape.affine(x, w_iz, b_iz)?;
        let hz = tape.affine(h, w_hz, b_hz)?;
        let sz = tape.add(xz, hz)?;
        let z = tape.sigmoid(sz);
        let xn = tape.affine(x, w_in, b_in)?;
        let hn = tape.affine(h, w_hn, b_hn)?;
        let rhn = tape.mul(r, hn)?;
        let sn = tape.add(xn, rhn)?;
        let n = tape.tanh(sn);
        let keep = tape.one_minus(z);
        let fresh = tape.mul(keep, n)?;
        let carried = tape.mul(z, h)?;
        h = tape.add(fresh, carried)?;

        let raw = tape.affine(h, out_w, out_b)?;
        let logits = tape.add_row(raw, mask)?;
        let lp = tape.log_softmax_rows(logits);
        let target: Vec<TokenId> = targets.iter().map(|s| s.get(t).copied().unwrap_or(PAD)).collect();
        let picked = tape.pick(lp, &target)?;
        let live = Matrix::col_vector(targets.iter().map(|s| if t < s.len() { 1.0 } else { 0.0 }).collect());
        let live = tape.constant(live);
        let contrib = tape.mul(picked, live)?;
        total = Some(match total {
            None => contrib,
            Some(acc) => tape.add(acc, contrib)?,
        });
        prev = target;
    }
    Ok(match total {
        Some(t) => t,
        None => tape.constant(Matrix::zeros(b, 1)),
    })
}

/// `Σ_i weights[i] · log p(targets[i])` and its gradient.
pub fn weighted_log_prob_grad(
    params: &PolicyParams,
    audio: &[&Embedding],
    targets: &[Vec<TokenId>],
    weights: &[f64],
) -> Result<(f64, Vec<f64>, PolicyParams), PolicyError> {
    let x = audio_rows(audio)?;
    let mut tape = Tape::new();
    let vars = params.record(&mut tape);
    let lp = record_sequence_log_probs(&mut tape, params, &vars, &x, targets)?;
    let w = tape.constant(Matrix::col_vector(weights.to_vec()));
    let weighted = tape.mul(lp, w)?;
    let obj = tape.sum(weighted);
    let value = tape.scalar(obj);
    let per_seq = tape.value(lp).as_slice().to_vec();
    let mut g = tape.backward(obj);
    Ok((value, per_seq, params.take_grads(&mut g, &vars)))
}

pub(crate) fn audio_rows(audio: &[&Embedding]) -> Result<Matrix, PolicyError> {
    let mut data = Vec::with_capacity(audio.len() * EMBED_DIM);
    for a in audio {
        if a.dim() != EMBED_DIM {
            return Err(PolicyError::AudioDim(a.dim()));
        }
        data.extend(a.to_f64());
    }
    Ok(Matrix::from_vec(audio.len(), EMBED_DIM, data)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MleConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for MleConfig {
    fn default() -> Self {
        Self { epochs: 40, batch_size: 16, lr: 3e-3, weight_decay: 0.0, seed: 0 }
    }
}

impl MleConfig {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.epochs == 0 {
            v.push("epochs must be at least 1".into());
        }
        if self.batch_size == 0 {
            v.push("batch_size must be at least 1".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            v.push(format!("lr must be positive, got {}", self.lr));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            v.push(format!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        v
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MleEpoch {
    pub epoch: usize,
    /// Mean negative log-likelihood per target token (including `<eos>`).
    pub loss: f64,
}

/// A fresh policy with weights drawn from a stream of `seed`.
pub fn init_policy(dims: PolicyDims, seed: u64) -> PolicyParams {
    PolicyParams::init(dims, &mut child(seed, INIT_STREAM))
}

/// Teacher-forced cross-entropy training on `(audio, reference)` pairs.
/// Each target is the reference followed by `<eos>`.
pub fn mle_pretrain(
    mut params: PolicyParams,
    corpus: &[(Embedding, Vec<TokenId>)],
    cfg: &MleConfig,
) -> Result<(PolicyParams, Vec<MleEpoch>), PolicyError> {
    let bad = cfg.violations();
    if !bad.is_empty() {
        return Err(PolicyError::InvalidTrain(bad));
    }
    if corpus.is_empty() {
        return Err(PolicyError::EmptyCorpus);
    }
    let targets: Vec<Vec<TokenId>> = corpus
        .iter()
        .map(|(_, r)| {
            let mut t = r.clone();
            t.push(EOS);
            t
        })
        .collect();
    let mut state = AdamState::new(&params);
    let adam = AdamConfig { lr: cfg.lr, weight_decay: cfg.weight_decay, ..AdamConfig::default() };
    let mut rng = child(cfg.seed, SHUFFLE_STREAM);
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut curve = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let (mut nll, mut tokens) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let audio: Vec<&Embedding> = chunk.iter().map(|&i| &corpus[i].0).collect();
            let tgt: Vec<Vec<TokenId>> = chunk.iter().map(|&i| targets[i].clone()).collect();
            let n_tok: usize = tgt.iter().map(Vec::len).sum();
            let weights = vec![-1.0 / n_tok as f64; chunk.len()];
            let (loss, _, grads) = weighted_log_prob_grad(&params, &audio, &tgt, &weights)?;
            if !loss.is_finite() {
                return Err(PolicyError::NonFiniteLoss { epoch });
            }
            nll += loss * n_tok as f64;
            tokens += n_tok;
            adam_step(&mut params, &grads, &mut state, &adam)?;
        }
        curve.push(MleEpoch { epoch, loss: nll / tokens as f64 });
    }
    Ok((params, curve))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dims() -> PolicyDims {
        PolicyDims { vocab: 10, embed: 4, hidden: 6 }
    }

    #[test]
    fn zero_params_give_uniform_distribution() {
        let p = PolicyParams::zeros(PolicyDims::default());
        let (logits, h) = step(&p, &vec![0.0; 128], BOS).unwrap();
        assert!(logits.iter().all(|&l| l == 0.0));
        assert!(h.iter().all(|&x| x == 0.0));
        let probs = crate::numkit::softmax(&logits);
        assert!(probs.iter().all(|&q| (q - 1.0 / 64.0).abs() < 1e-15));
    }

    #[test]
    fn step_is_deterministic_and_checks_token() {
        let p = PolicyParams::init(dims(), &mut seeded(1));
        let h = vec![0.1; 6];
        assert_eq!(step(&p, &h, 5).unwrap(), step(&p, &h, 5).unwrap());
        assert!(matches!(step(&p, &h, 10), Err(PolicyError::Token { token: 10, .. })));
    }

    #[test]
    fn argmax_prefers_lowest_id_on_ties() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0, 2.0]), 1);
    }

    #[test]
    fn topk_keeps_exactly_k() {
        let logits = [MASKED_LOGIT, MASKED_LOGIT, 1.0, 5.0, 5.0, 0.0];
        let p = sampling_probs(&logits, DecodeMode::Topk, 2, 1.0);
        assert_eq!(p.iter().filter(|&&q| q > 0.0).count(), 2);
        assert!(p[3] > 0.0 && p[4] > 0.0);
    }

    #[test]
    fn eos_dominant_params_give_empty_caption() {
        let mut p = PolicyParams::zeros(dims());
        p.out_b.set(0, EOS, 100.0);
        let audio = Embedding::new(vec![0.0; EMBED_DIM]);
        let d = decode(&p, &audio, &DecodeConfig::default()).unwrap();
        assert!(d.is_empty() && d.ended);
    }

    #[test]
    fn rejects_bad_decode_config() {
        let p = PolicyParams::zeros(dims());
        let audio = Embedding::new(vec![0.0; EMBED_DIM]);
        let cfg = DecodeConfig { k: 0, temperature: 0.0, max_len: 0, ..Default::default() };
        match decode(&p, &audio, &cfg) {
            Err(PolicyError::InvalidDecode(v)) => assert_eq!(v.len(), 3),
            other => panic!("{other:?}"),
        }
    }
}
