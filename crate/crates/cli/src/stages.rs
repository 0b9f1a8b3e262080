//! One function per subcommand. Every stage reads and writes files in the
//! run directory and finishes by writing its resolved config and manifest.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use anyhow::{bail, ensure, Context, Result};
use prefcap_annosvc::{load_pairs, AnnotationState, PairSpec, ServeConfig};
use prefcap_core::checkpoint;
use prefcap_core::embedstore::{
    read_captions, read_embeddings, write_captions, write_embeddings, CaptionRecord, CaptionSource, EmbeddingFile,
    EmbeddingRecord, Modality,
};
use prefcap_core::evalmetrics::{
    bleu4, caption_stats, fleiss_kappa, format_table, win_rate, MetricRow, Outcome, VoteMatrix,
};
use prefcap_core::jsonl::{read_jsonl, to_jsonl_string, write_jsonl};
use prefcap_core::policy::{decode, init_policy, mle_pretrain, DecodeConfig, DecodeMode, PolicyParams};
use prefcap_core::prefdata::{
    filter_unanimous, mismatch_augment, oracle_records, resolve, select_challenging, simulated_votes, split_80_20,
    CaptionedSample, Origin, PreferenceRecord,
};
use prefcap_core::reward::{train_reward, triples_from_resolved, RewardParams};
use prefcap_core::rng::{child, derive_seed, seeded};
use prefcap_core::scst::{rlhf_train_with, shape_reward, CaptionReward, RewardModelScorer, RlSample};
use prefcap_core::synthworld::{
    event_f1, generate_world, oracle_preference, Preference, Sample, TokenId, World, WorldSpec,
};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::manifest::StageRecord;

pub const AUDIO_FILE: &str = "audio.emb";
pub const EVENTS_FILE: &str = "events.jsonl";
pub const REFERENCES_FILE: &str = "references.jsonl";
pub const WORLD_FILE: &str = "world.json";
pub const POLICY_PRETRAINED: &str = "policy_pretrained.parm";
pub const MLE_CURVE: &str = "mle_curve.jsonl";
pub const CANDIDATES_FILE: &str = "candidates.jsonl";
pub const CORRECTIONS_FILE: &str = "corrections.jsonl";
pub const PREFS_UNANIMOUS: &str = "prefs_unanimous.jsonl";
pub const PREFS_TRAIN: &str = "prefs_train.jsonl";
pub const PREFS_VAL: &str = "prefs_val.jsonl";
pub const PREFS_TRAIN_AUGMENTED: &str = "prefs_train_augmented.jsonl";
pub const AGREEMENT_FILE: &str = "agreement.json";
pub const REWARD_MODEL: &str = "reward.parm";
pub const REWARD_CURVE: &str = "reward_curve.jsonl";
pub const CHALLENGING_FILE: &str = "challenging.jsonl";
pub const RLHF_CURVE: &str = "rlhf_curve.jsonl";
pub const POLICY_RLHF: &str = "policy_rlhf.parm";
pub const EVAL_FILE: &str = "eval.jsonl";
pub const EVAL_TABLE: &str = "eval.txt";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct WorldInfo {
    spec: WorldSpec,
    samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct EventsRecord {
    sample_id: String,
    true_events: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChallengingRecord {
    pub sample_id: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Agreement {
    pub records: usize,
    pub unanimous: usize,
    pub train: usize,
    pub val: usize,
    /// Fleiss' kappa over records carrying the most common vote count, if
    /// that count is at least two.
    pub fleiss_kappa: Option<f64>,
    pub kappa_items: usize,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn prepare_run_dir(cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(&cfg.io.run_dir).with_context(|| format!("creating {}", cfg.io.run_dir.display()))
}

fn load_world(cfg: &RunConfig, rec: &mut StageRecord) -> Result<World> {
    let info: WorldInfo = read_json(&rec.input(&cfg.io.path(WORLD_FILE)))?;
    if info.spec != cfg.world || info.samples != cfg.data.samples {
        bail!(
            "{} was generated from a different [world] section or data.samples; rerun synth-gen",
            cfg.io.path(WORLD_FILE).display()
        );
    }
    let audio = read_embeddings(&rec.input(&cfg.io.path(AUDIO_FILE)))?;
    let events: Vec<EventsRecord> = read_jsonl(&rec.input(&cfg.io.path(EVENTS_FILE)))?;
    let vocab = prefcap_core::synthworld::Vocab::new(cfg.world.event_vocab_size);
    let refs = read_captions(&rec.input(&cfg.io.path(REFERENCES_FILE)), Some(&vocab))?;
    let refs: HashMap<&str, &CaptionRecord> = refs.iter().map(|r| (r.sample_id.as_str(), r)).collect();
    let audio_index: HashMap<&str, usize> = audio.records.iter().enumerate().map(|(i, r)| (r.id.as_str(), i)).collect();
    let samples = events
        .into_iter()
        .map(|e| {
            let r = refs.get(e.sample_id.as_str()).with_context(|| format!("no reference for {}", e.sample_id))?;
            let tokens = match &r.token_ids {
                Some(t) => t.clone(),
                None => vocab.encode(&r.caption_text)?,
            };
            let a = audio_index.get(e.sample_id.as_str()).with_context(|| format!("no audio for {}", e.sample_id))?;
            Ok(Sample {
                sample_id: e.sample_id,
                true_events: e.true_events,
                reference: tokens,
                audio_embedding: audio.records[*a].embedding.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    ensure!(samples.len() == cfg.data.samples, "expected {} samples, found {}", cfg.data.samples, samples.len());
    Ok(World::from_samples(cfg.world.clone(), samples)?)
}

fn load_policy(cfg: &RunConfig, path: &Path) -> Result<PolicyParams> {
    let mut p = PolicyParams::zeros(cfg.policy);
    checkpoint::load_into(&checkpoint::read(path)?, &mut p).with_context(|| format!("loading {}", path.display()))?;
    Ok(p)
}

fn load_reward(path: &Path) -> Result<RewardParams> {
    let mut r = RewardParams::zeros();
    checkpoint::load_into(&checkpoint::read(path)?, &mut r).with_context(|| format!("loading {}", path.display()))?;
    Ok(r)
}

fn rl_samples(world: &World, range: std::ops::Range<usize>) -> Vec<RlSample> {
    world.samples[range]
        .iter()
        .map(|s| RlSample { sample_id: s.sample_id.clone(), audio: s.audio_embedding.clone() })
        .collect()
}

fn sub_world(world: &World, range: std::ops::Range<usize>) -> Result<World> {
    Ok(World::from_samples(world.spec.clone(), world.samples[range].to_vec())?)
}

pub fn synth_gen(cfg: &RunConfig) -> Result<()> {
    prepare_run_dir(cfg)?;
    let mut rec = StageRecord::new(cfg, "synth-gen");
    let world = generate_world(&cfg.world, cfg.data.samples)?;
    let audio = EmbeddingFile::new(
        Modality::Audio,
        world
            .samples
            .iter()
            .map(|s| EmbeddingRecord { id: s.sample_id.clone(), embedding: s.audio_embedding.clone() })
            .collect(),
    );
    write_embeddings(&rec.output(&cfg.io.path(AUDIO_FILE)), &audio)?;
    let events: Vec<EventsRecord> = world
        .samples
        .iter()
        .map(|s| EventsRecord { sample_id: s.sample_id.clone(), true_events: s.true_events.clone() })
        .collect();
    write_jsonl(&rec.output(&cfg.io.path(EVENTS_FILE)), &events)?;
    let refs: Vec<CaptionRecord> = world
        .samples
        .iter()
        .map(|s| CaptionRecord::from_tokens(&s.sample_id, &s.reference, &world.vocab, CaptionSource::Reference))
        .collect();
    write_captions(&rec.output(&cfg.io.path(REFERENCES_FILE)), &refs)?;
    write_json(
        &rec.output(&cfg.io.path(WORLD_FILE)),
        &WorldInfo { spec: cfg.world.clone(), samples: cfg.data.samples },
    )?;
    tracing::info!(samples = world.samples.len(), "world written");
    rec.finish()?;
    Ok(())
}

pub fn policy_pretrain(cfg: &RunConfig) -> Result<()> {
    let mut rec = StageRecord::new(cfg, "policy-pretrain");
    let world = load_world(cfg, &mut rec)?;
    let corpus: Vec<_> =
        world.samples[cfg.data.pretrain()].iter().map(|s| (s.audio_embedding.clone(), s.reference.clone())).collect();
    let (params, curve) = mle_pretrain(init_policy(cfg.policy, cfg.mle.seed), &corpus, &cfg.mle)?;
    if let Some(last) = curve.last() {
        tracing::info!(epoch = last.epoch, loss = last.loss, "pretraining done");
    }
    checkpoint::save(&rec.output(&cfg.io.path(POLICY_PRETRAINED)), &params)?;
    write_jsonl(&rec.output(&cfg.io.path(MLE_CURVE)), &curve)?;
    rec.finish()?;
    Ok(())
}

/// Oracle-labelled preference data in two parts: edit pairs built from the
/// references, and candidate pairs decoded from the pretrained policy
/// (greedy against each top-k sample). For clips where every candidate
/// fails, the reference is recorded in `corrections.jsonl` as the caption an
/// annotator would have written instead; it does not become a preference.
pub fn prefs_oracle(cfg: &RunConfig) -> Result<()> {
    let mut rec = StageRecord::new(cfg, "prefs-oracle");
    let world = load_world(cfg, &mut rec)?;
    let policy = load_policy(cfg, &rec.input(&cfg.io.path(POLICY_PRETRAINED)))?;
    let pool = sub_world(&world, cfg.data.prefs())?;
    let mut records = oracle_records(&pool, &cfg.oracle)?;
    let mut candidates = Vec::new();
    let mut corrections = Vec::new();
    let c = &cfg.candidates;
    for (i, s) in pool.samples.iter().enumerate() {
        let greedy = decode(&policy, &s.audio_embedding, &DecodeConfig::greedy(cfg.decode.max_len))?.tokens;
        let mut topk = Vec::with_capacity(c.topk_samples);
        for j in 0..c.topk_samples {
            let dc = DecodeConfig {
                mode: DecodeMode::Topk,
                k: c.k,
                temperature: 1.0,
                max_len: cfg.decode.max_len,
                seed: derive_seed(c.seed, (i * c.topk_samples + j) as u64),
            };
            topk.push(decode(&policy, &s.audio_embedding, &dc)?.tokens);
        }
        candidates.push(CaptionRecord::from_tokens(&s.sample_id, &greedy, &world.vocab, CaptionSource::Greedy));
        for t in &topk {
            candidates.push(CaptionRecord::from_tokens(&s.sample_id, t, &world.vocab, CaptionSource::Topk));
        }
        let mut rng = child(derive_seed(c.seed, 1 << 40), i as u64);
        let mut push = |id: String, a: &[TokenId], b: &[TokenId], rng: &mut prefcap_core::rng::SeededRng| {
            let truth = oracle_preference(s, a, b, &world.vocab);
            if truth == Preference::Tie || a == b {
                return;
            }
            records.push(PreferenceRecord {
                pair_id: id,
                sample_id: s.sample_id.clone(),
                caption_a: world.vocab.decode(a),
                caption_b: world.vocab.decode(b),
                votes: simulated_votes(truth, &cfg.oracle, rng),
                origin: Origin::Oracle,
                mismatch_source: None,
            });
        };
        for (j, t) in topk.iter().enumerate() {
            push(format!("c{i:06}_{j}"), &greedy, t, &mut rng);
        }
        let all_fail =
            std::iter::once(&greedy).chain(&topk).all(|t| event_f1(&s.true_events, t, &world.vocab) < c.fail_below);
        if all_fail {
            corrections.push(CaptionRecord::from_tokens(
                &s.sample_id,
                &s.reference,
                &world.vocab,
                CaptionSource::Reference,
            ));
        }
    }
    write_captions(&rec.output(&cfg.io.path(CANDIDATES_FILE)), &candidates)?;
    write_captions(&rec.output(&cfg.io.path(CORRECTIONS_FILE)), &corrections)?;
    write_jsonl(&rec.output(&cfg.io.path(&cfg.io.prefs_input)), &records)?;
    tracing::info!(
        records = records.len(),
        candidates = candidates.len(),
        corrections = corrections.len(),
        "oracle preferences written"
    );
    rec.finish()?;
    Ok(())
}

fn kappa_of(records: &[PreferenceRecord]) -> (Option<f64>, usize) {
    let mut by_count: BTreeMap<usize, usize> = BTreeMap::new();
    for r in records {
        *by_count.entry(r.votes.len()).or_insert(0) += 1;
    }
    let Some((&raters, _)) = by_count.iter().max_by_key(|(n, c)| (**c, std::cmp::Reverse(**n))) else {
        return (None, 0);
    };
    if raters < 2 {
        return (None, 0);
    }
    let labels: Vec<Vec<usize>> = records
        .iter()
        .filter(|r| r.votes.len() == raters)
        .map(|r| {
            r.votes
                .iter()
                .map(|v| match v.choice {
                    Preference::A => 0,
                    Preference::B => 1,
                    Preference::Tie => 2,
                })
                .collect()
        })
        .collect();
    let n = labels.len();
    (VoteMatrix::from_labels(&labels, 3).ok().map(|m| fleiss_kappa(&m)), n)
}

pub fn prefs_filter(cfg: &RunConfig) -> Result<()> {
    let mut rec = StageRecord::new(cfg, "prefs-filter");
    let records: Vec<PreferenceRecord> = read_jsonl(&rec.input(&cfg.io.path(&cfg.io.prefs_input)))?;
    for r in &records {
        r.validate()?;
    }
    let unanimous = filter_unanimous(&records);
    let (train, val) = split_80_20(&unanimous, cfg.data.split_seed)?;
    write_jsonl(&rec.output(&cfg.io.path(PREFS_UNANIMOUS)), &unanimous)?;
    write_jsonl(&rec.output(&cfg.io.path(PREFS_TRAIN)), &train)?;
    write_jsonl(&rec.output(&cfg.io.path(PREFS_VAL)), &val)?;
    let (kappa, kappa_items) = kappa_of(&records);
    let agreement = Agreement {
        records: records.len(),
        unanimous: unanimous.len(),
        train: train.len(),
        val: val.len(),
        fleiss_kappa: kappa,
        kappa_items,
    };
    write_json(&rec.output(&cfg.io.path(AGREEMENT_FILE)), &agreement)?;
    println!("{}", serde_json::to_string(&agreement)?);
    rec.finish()?;
    Ok(())
}

pub fn prefs_augment(cfg: &RunConfig) -> Result<()> {
    let mut rec = StageRecord::new(cfg, "prefs-augment");
    let world = load_world(cfg, &mut rec)?;
    let mut train: Vec<PreferenceRecord> = read_jsonl(&rec.input(&cfg.io.path(PREFS_TRAIN)))?;
    let samples: Vec<CaptionedSample> = world.samples[cfg.data.prefs()]
        .iter()
        .map(|s| CaptionedSample { sample_id: s.sample_id.clone(), caption: world.vocab.decode(&s.reference) })
        .collect();
    let added = mismatch_augment(&samples, &mut seeded(cfg.augment.seed), cfg.augment.count)?;
    tracing::info!(train = train.len(), mismatch = added.len(), "augmented");
    train.extend(added);
    write_jsonl(&rec.output(&cfg.io.path(PREFS_TRAIN_AUGMENTED)), &train)?;
    rec.finish()?;
    Ok(())
}

pub fn reward_train(cfg: &RunConfig) -> Result<()> {
    let mut rec = StageRecord::new(cfg, "reward-train");
    let world = load_world(cfg, &mut rec)?;
    let encoder = world.text_encoder();
    let lookup = |id: &str| world.sample(id).map(|s| &s.audio_embedding);
    let train: Vec<PreferenceRecord> = read_jsonl(&rec.input(&cfg.io.path(PREFS_TRAIN_AUGMENTED)))?;
    let val: Vec<PreferenceRecord> = read_jsonl(&rec.input(&cfg.io.path(PREFS_VAL)))?;
    let train = triples_from_resolved(&resolve(&train)?, lookup, &encoder)?;
    let val = triples_from_resolved(&resolve(&val)?, lookup, &encoder)?;
    let out = train_reward(&train, &val, &cfg.reward)?;
    if let Some(last) = out.curve.last() {
        tracing::info!(epoch = last.epoch, train_loss = last.train_loss, val_accuracy = ?last.val_accuracy, "reward model trained");
        println!("{}", serde_json::to_string(last)?);
    }
    checkpoint::save(&rec.output(&cfg.io.path(REWARD_MODEL)), &out.params)?;
    write_jsonl(&rec.output(&cfg.io.path(REWARD_CURVE)), &out.curve)?;
    rec.finish()?;
    Ok(())
}

/// Bottom-k held-out clips by reward-model score of the pretrained
/// policy's greedy caption.
pub fn prefs_challenging(cfg: &RunConfig) -> Result<()> {
    let mut rec = StageRecord::new(cfg, "prefs-challenging");
    let world = load_world(cfg, &mut rec)?;
    let policy = load_policy(cfg, &rec.input(&cfg.io.path(POLICY_PRETRAINED)))?;
    let reward = load_reward(&rec.input(&cfg.io.path(REWARD_MODEL)))?;
    let encoder = world.text_encoder();
    let scorer =
        RewardModelScorer { params: &reward, clamp: cfg.reward.clamp(), encoder: &encoder, vocab: &world.vocab };
    let clips = rl_samples(&world, cfg.data.heldout());
    let decoded = clips
        .iter()
        .map(|c| Ok(decode(&policy, &c.audio, &DecodeConfig::greedy(cfg.decode.max_len))?.tokens))
        .collect::<Result<Vec<_>>>()?;
    let items: Vec<(&RlSample, &[TokenId])> = clips.iter().zip(&decoded).map(|(c, t)| (c, t.as_slice())).collect();
    let scores: Vec<(String, f64)> =
        clips.iter().map(|c| c.sample_id.clone()).zip(scorer.score_batch(&items)?).collect();
    let ids: Vec<String> = clips.iter().map(|c| c.sample_id.clone()).collect();
    let picked = select_challenging(&ids, &scores, cfg.challenging.k)?;
    let score_of: HashMap<&str, f64> = scores.iter().map(|(id, s)| (id.as_str(), *s)).collect();
    let out: Vec<ChallengingRecord> =
        picked.iter().map(|id| ChallengingRecord { sample_id: id.clone(), score: score_of[id.as_str()] }).collect();
    write_jsonl(&rec.output(&cfg.io.path(CHALLENGING_FILE)), &out)?;
    rec.finish()?;
    Ok(())
}

pub fn rlhf_train(cfg: &RunConfig) -> Result<()> {
    let mut rec = StageRecord::new(cfg, "rlhf-train");
    let world = load_world(cfg, &mut rec)?;
    let policy = load_policy(cfg, &rec.input(&cfg.io.path(POLICY_PRETRAINED)))?;
    let reward = load_reward(&rec.input(&cfg.io.path(REWARD_MODEL)))?;
    let encoder = world.text_encoder();
    let scorer =
        RewardModelScorer { params: &reward, clamp: cfg.reward.clamp(), encoder: &encoder, vocab: &world.vocab };
    let clips = rl_samples(&world, cfg.data.rl());
    let (params, curve) = rlhf_train_with(policy, &scorer, &clips, &cfg.rlhf, |e, _| {
        tracing::info!(
            epoch = e.epoch,
            lr = e.lr,
            shaped = e.mean_shaped_reward,
            greedy_shaped = e.mean_greedy_shaped_reward,
            len = e.mean_len_sampled,
            "rlhf epoch"
        );
    })?;
    checkpoint::save(&rec.output(&cfg.io.path(POLICY_RLHF)), &params)?;
    write_jsonl(&rec.output(&cfg.io.path(RLHF_CURVE)), &curve)?;
    rec.finish()?;
    Ok(())
}

/// Captions for the held-out clips. Sampling modes draw clip `i` from seed
/// stream `i` of `decode.seed`.
pub fn decode_captions(cfg: &RunConfig) -> Result<()> {
    let mut rec = StageRecord::new(cfg, "decode");
    let world = load_world(cfg, &mut rec)?;
    let policy = load_policy(cfg, &rec.input(&cfg.io.path(&cfg.io.decode_policy)))?;
    let source = match cfg.decode.mode {
        DecodeMode::Greedy => CaptionSource::Greedy,
        DecodeMode::Topk => CaptionSource::Topk,
        DecodeMode::Multinomial => CaptionSource::Sampled,
    };
    let captions = world.samples[cfg.data.heldout()]
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let dc = DecodeConfig { seed: derive_seed(cfg.decode.seed, i as u64), ..cfg.decode.clone() };
            let d = decode(&policy, &s.audio_embedding, &dc)?;
            Ok(CaptionRecord::from_tokens(&s.sample_id, &d.tokens, &world.vocab, source))
        })
        .collect::<Result<Vec<_>>>()?;
    write_captions(&rec.output(&cfg.io.path(&cfg.io.decode_output)), &captions)?;
    rec.finish()?;
    Ok(())
}

fn system_name(path: &Path) -> String {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    stem.strip_prefix("captions_").map(str::to_string).unwrap_or(stem)
}

/// Compares two caption files over the clips they share: oracle win rate of
/// the first over the second (ties excluded), BLEU-4 against the reference,
/// event-F1, reward-model scores and length statistics. Repeats the table on
/// the challenging subset when `challenging.jsonl` exists. Also writes the
/// differing pairs as an annotation pool.
pub fn evaluate(cfg: &RunConfig) -> Result<()> {
    let mut rec = StageRecord::new(cfg, "evaluate");
    let world = load_world(cfg, &mut rec)?;
    let reward = load_reward(&rec.input(&cfg.io.path(REWARD_MODEL)))?;
    let sys_path = rec.input(&cfg.io.path(&cfg.io.eval_system));
    let base_path = rec.input(&cfg.io.path(&cfg.io.eval_baseline));
    let system = read_captions(&sys_path, Some(&world.vocab))?;
    let baseline = read_captions(&base_path, Some(&world.vocab))?;
    let (sys_name, base_name) = (system_name(&sys_path), system_name(&base_path));
    let base_index: HashMap<&str, &CaptionRecord> = baseline.iter().map(|c| (c.sample_id.as_str(), c)).collect();
    let mut joined = Vec::new();
    for s in &system {
        let b =
            base_index.get(s.sample_id.as_str()).with_context(|| format!("{} has no baseline caption", s.sample_id))?;
        let sample = world.sample(&s.sample_id).with_context(|| format!("unknown sample {}", s.sample_id))?;
        joined.push((sample, s, *b));
    }
    ensure!(!joined.is_empty(), "no captions to compare");
    ensure!(joined.len() == baseline.len(), "caption files cover different clips");

    let challenging_path = cfg.io.path(CHALLENGING_FILE);
    let mut subsets: Vec<(&str, Vec<usize>)> = vec![("all", (0..joined.len()).collect())];
    if challenging_path.exists() {
        let picked: Vec<ChallengingRecord> = read_jsonl(&rec.input(&challenging_path))?;
        let ids: std::collections::HashSet<&str> = picked.iter().map(|c| c.sample_id.as_str()).collect();
        let idx: Vec<usize> = (0..joined.len()).filter(|&i| ids.contains(joined[i].0.sample_id.as_str())).collect();
        if !idx.is_empty() {
            subsets.push(("challenging", idx));
        }
    }

    let encoder = world.text_encoder();
    let scorer =
        RewardModelScorer { params: &reward, clamp: cfg.reward.clamp(), encoder: &encoder, vocab: &world.vocab };
    let tokens = |c: &CaptionRecord| -> Result<Vec<TokenId>> {
        Ok(match &c.token_ids {
            Some(t) => t.clone(),
            None => world.vocab.encode(&c.caption_text)?,
        })
    };
    let clips: Vec<RlSample> = joined
        .iter()
        .map(|(s, _, _)| RlSample { sample_id: s.sample_id.clone(), audio: s.audio_embedding.clone() })
        .collect();
    let sys_tokens = joined.iter().map(|(_, s, _)| tokens(s)).collect::<Result<Vec<_>>>()?;
    let base_tokens = joined.iter().map(|(_, _, b)| tokens(b)).collect::<Result<Vec<_>>>()?;
    let score_all = |toks: &[Vec<TokenId>]| -> Result<Vec<f64>> {
        let items: Vec<(&RlSample, &[TokenId])> = clips.iter().zip(toks).map(|(c, t)| (c, t.as_slice())).collect();
        Ok(scorer.score_batch(&items)?)
    };
    let sys_reward = score_all(&sys_tokens)?;
    let base_reward = score_all(&base_tokens)?;

    let mut rows = Vec::new();
    let mut tables = String::new();
    for (subset, idx) in &subsets {
        let outcomes: Vec<Outcome> = idx
            .iter()
            .map(|&i| match oracle_preference(joined[i].0, &sys_tokens[i], &base_tokens[i], &world.vocab) {
                Preference::A => Outcome::Win,
                Preference::B => Outcome::Loss,
                Preference::Tie => Outcome::Tie,
            })
            .collect();
        let wr = win_rate(&outcomes).with_context(|| format!("oracle win rate on the {subset} subset"))?;
        let count = |o: Outcome| outcomes.iter().filter(|&&x| x == o).count() as f64;
        let mut subset_rows = Vec::new();
        for (name, toks, rewards) in [(&sys_name, &sys_tokens, &sys_reward), (&base_name, &base_tokens, &base_reward)] {
            let label = format!("{subset}:{name}");
            let n = idx.len() as f64;
            let mean = |f: &dyn Fn(usize) -> f64| idx.iter().map(|&i| f(i)).sum::<f64>() / n;
            let texts: Vec<Vec<String>> =
                idx.iter().map(|&i| toks[i].iter().map(|&t| world.vocab.token(t).to_string()).collect()).collect();
            let stats = caption_stats(&texts)?;
            let mut bleu = 0.0;
            for (k, &i) in idx.iter().enumerate() {
                let reference: Vec<String> =
                    joined[i].0.reference.iter().map(|&t| world.vocab.token(t).to_string()).collect();
                bleu += bleu4(&texts[k], &[reference])?;
            }
            let metrics = [
                ("oracle_win_rate", if name == &sys_name { wr } else { 100.0 - wr }),
                ("oracle_wins", count(if name == &sys_name { Outcome::Win } else { Outcome::Loss })),
                ("oracle_losses", count(if name == &sys_name { Outcome::Loss } else { Outcome::Win })),
                ("oracle_ties", count(Outcome::Tie)),
                ("event_f1", mean(&|i| event_f1(&joined[i].0.true_events, &toks[i], &world.vocab))),
                ("bleu4", bleu / n),
                ("reward", mean(&|i| rewards[i])),
                ("shaped_reward", mean(&|i| shape_reward(rewards[i], toks[i].len(), &cfg.rlhf.shaping))),
                ("mean_len", stats.mean_len),
                ("distinct_ratio", stats.distinct_ratio),
            ];
            for (metric, value) in metrics {
                subset_rows.push(MetricRow { system: label.clone(), metric: metric.to_string(), value });
            }
        }
        tables.push_str(&format_table(&subset_rows));
        tables.push('\n');
        rows.extend(subset_rows);
    }
    fs::write(rec.output(&cfg.io.path(EVAL_FILE)), to_jsonl_string(&rows))?;
    fs::write(rec.output(&cfg.io.path(EVAL_TABLE)), &tables)?;
    let pairs: Vec<PairSpec> = joined
        .iter()
        .zip(sys_tokens.iter().zip(&base_tokens))
        .filter(|(_, (a, b))| a != b)
        .map(|((s, a, b), _)| PairSpec {
            pair_id: format!("eval-{}", s.sample_id),
            sample_id: s.sample_id.clone(),
            caption_a: a.caption_text.clone(),
            caption_b: b.caption_text.clone(),
            audio: None,
        })
        .collect();
    write_jsonl(&rec.output(&cfg.io.path(&cfg.io.annotation_pairs)), &pairs)?;
    print!("{tables}");
    rec.finish()?;
    Ok(())
}

pub fn annotate_serve(cfg: &RunConfig) -> Result<()> {
    let addr = format!("{}:{}", cfg.annotate.host, cfg.annotate.port)
        .parse()
        .with_context(|| format!("invalid listen address {}:{}", cfg.annotate.host, cfg.annotate.port))?;
    let serve_cfg = ServeConfig {
        pairs: cfg.io.path(&cfg.io.annotation_pairs),
        log: cfg.io.path(&cfg.io.vote_log),
        addr,
        order_seed: cfg.annotate.order_seed,
        static_dir: cfg.annotate.static_dir.clone(),
        audio_dir: cfg.annotate.audio_dir.clone(),
    };
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(prefcap_annosvc::serve(serve_cfg))?;
    Ok(())
}

/// Offline export of the vote log; the log file is never modified.
pub fn export_prefs(cfg: &RunConfig) -> Result<()> {
    let mut rec = StageRecord::new(cfg, "export-prefs");
    let pairs = load_pairs(&rec.input(&cfg.io.path(&cfg.io.annotation_pairs)))?;
    let log = cfg.io.path(&cfg.io.vote_log);
    let state = AnnotationState::from_log(pairs, &log, cfg.annotate.order_seed)?;
    if log.exists() {
        rec.input(&log);
    }
    let records = state.export();
    write_jsonl(&rec.output(&cfg.io.path(&cfg.io.export_output)), &records)?;
    println!("{}", serde_json::to_string(&state.progress())?);
    rec.finish()?;
    Ok(())
}
