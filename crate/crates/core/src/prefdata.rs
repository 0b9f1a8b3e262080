//! Preference-dataset curation: filtering, splitting, mismatch augmentation,
//! challenging-subset selection and winner/loser resolution.

use std::cmp::Ordering;
use std::collections::{BTreeSet, HashMap};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{child, seeded};
use crate::synthworld::{corrupt_caption, oracle_preference, CorruptMode, Preference, TokenId, World};

#[derive(Debug, Error, PartialEq)]
pub enum PrefError {
    #[error("need at least 5 records to split, got {0}")]
    TooFewRecords(usize),
    #[error("need at least 2 samples with captions, got {0}")]
    TooFewSamples(usize),
    #[error("sample {0} has no other sample with a different caption to pair against")]
    NoMismatchCandidate(String),
    #[error("no score for sample {0}")]
    MissingScore(String),
    #[error("asked for {k} samples but only {n} are available")]
    KTooLarge { k: usize, n: usize },
    #[error("record {0} has mixed votes and cannot be resolved")]
    Unresolved(String),
    #[error("record {pair_id} is invalid: {reason}")]
    Invalid { pair_id: String, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Human,
    Oracle,
    SyntheticMismatch,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vote {
    pub annotator_id: String,
    pub choice: Preference,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferenceRecord {
    pub pair_id: String,
    pub sample_id: String,
    pub caption_a: String,
    pub caption_b: String,
    pub votes: Vec<Vote>,
    pub origin: Origin,
    /// Sample the losing caption was borrowed from, for mismatch records.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mismatch_source: Option<String>,
}

impl PreferenceRecord {
    /// Checks that the captions differ, there is at least one vote and no
    /// annotator votes twice.
    pub fn validate(&self) -> Result<(), PrefError> {
        let invalid = |reason: &str| Err(PrefError::Invalid { pair_id: self.pair_id.clone(), reason: reason.into() });
        if self.caption_a == self.caption_b {
            return invalid("caption_a equals caption_b");
        }
        if self.votes.is_empty() {
            return invalid("no votes");
        }
        let ids: BTreeSet<&str> = self.votes.iter().map(|v| v.annotator_id.as_str()).collect();
        if ids.len() != self.votes.len() {
            return invalid("duplicate annotator");
        }
        Ok(())
    }

    /// The common choice when every vote agrees.
    pub fn unanimous_choice(&self) -> Option<Preference> {
        let first = self.votes.first()?.choice;
        self.votes.iter().all(|v| v.choice == first).then_some(first)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResolvedPair {
    pub sample_id: String,
    pub winner: String,
    pub loser: String,
}

/// Keeps records whose votes all agree on A or on B. Order is preserved.
pub fn filter_unanimous(records: &[PreferenceRecord]) -> Vec<PreferenceRecord> {
    records.iter().filter(|r| matches!(r.unanimous_choice(), Some(Preference::A | Preference::B))).cloned().collect()
}

/// Seeded shuffle, then the first `⌊0.8 n⌋` items train and the rest validate.
pub fn split_80_20<T: Clone>(records: &[T], seed: u64) -> Result<(Vec<T>, Vec<T>), PrefError> {
    if records.len() < 5 {
        return Err(PrefError::TooFewRecords(records.len()));
    }
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.shuffle(&mut seeded(seed));
    let cut = records.len() * 8 / 10;
    let pick = |idx: &[usize]| idx.iter().map(|&i| records[i].clone()).collect::<Vec<_>>();
    Ok((pick(&order[..cut]), pick(&order[cut..])))
}

/// A sample id with its reference caption text.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptionedSample {
    pub sample_id: String,
    pub caption: String,
}

/// `count` records pairing a random sample's own caption (winner, as
/// `caption_a`) with the caption of a uniformly chosen different sample.
///
/// Candidates whose caption text equals the winner's are skipped so the two
/// captions always differ.
pub fn mismatch_augment(
    samples: &[CaptionedSample],
    rng: &mut impl Rng,
    count: usize,
) -> Result<Vec<PreferenceRecord>, PrefError> {
    if samples.len() < 2 {
        return Err(PrefError::TooFewSamples(samples.len()));
    }
    let mut out = Vec::with_capacity(count);
    for n in 0..count {
        let i = rng.random_range(0..samples.len());
        let own = &samples[i];
        let others: Vec<&CaptionedSample> =
            samples.iter().filter(|s| s.sample_id != own.sample_id && s.caption != own.caption).collect();
        let Some(other) = others.get(rng.random_range(0..others.len().max(1))).filter(|_| !others.is_empty()) else {
            return Err(PrefError::NoMismatchCandidate(own.sample_id.clone()));
        };
        out.push(PreferenceRecord {
            pair_id: format!("mm{n:06}"),
            sample_id: own.sample_id.clone(),
            caption_a: own.caption.clone(),
            caption_b: other.caption.clone(),
            votes: vec![Vote { annotator_id: "mismatch".into(), choice: Preference::A }],
            origin: Origin::SyntheticMismatch,
            mismatch_source: Some(other.sample_id.clone()),
        });
    }
    Ok(out)
}

/// Ids of the `k` lowest-scored candidates, lowest first, ties broken by id.
pub fn select_challenging(candidates: &[String], scores: &[(String, f64)], k: usize) -> Result<Vec<String>, PrefError> {
    if k > candidates.len() {
        return Err(PrefError::KTooLarge { k, n: candidates.len() });
    }
    let lookup: HashMap<&str, f64> = scores.iter().map(|(id, s)| (id.as_str(), *s)).collect();
    let mut scored = Vec::with_capacity(candidates.len());
    for id in candidates {
        let s = lookup.get(id.as_str()).ok_or_else(|| PrefError::MissingScore(id.clone()))?;
        scored.push((*s, id));
    }
    scored.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(b.1)));
    Ok(scored.into_iter().take(k).map(|(_, id)| id.clone()).collect())
}

/// Winner/loser pairs from unanimous records. Ties are dropped; a record
/// with mixed votes is an error.
pub fn resolve(records: &[PreferenceRecord]) -> Result<Vec<ResolvedPair>, PrefError> {
    let mut out = Vec::with_capacity(records.len());
    for r in records {
        r.validate()?;
        let pair =
            |w: &str, l: &str| ResolvedPair { sample_id: r.sample_id.clone(), winner: w.into(), loser: l.into() };
        match r.unanimous_choice() {
            Some(Preference::A) => out.push(pair(&r.caption_a, &r.caption_b)),
            Some(Preference::B) => out.push(pair(&r.caption_b, &r.caption_a)),
            Some(Preference::Tie) => {}
            None => return Err(PrefError::Unresolved(r.pair_id.clone())),
        }
    }
    Ok(out)
}

/// Simulated annotation of oracle-labelled caption pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleAnnotation {
    pub pairs: usize,
    pub annotators: usize,
    /// Probability that an individual annotator reports the opposite of the oracle.
    pub flip_prob: f64,
    pub seed: u64,
}

impl Default for OracleAnnotation {
    fn default() -> Self {
        Self { pairs: 2500, annotators: 4, flip_prob: 0.0, seed: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Candidate {
    Reference,
    Corrupt(CorruptMode),
    Mismatch,
}

const CANDIDATES: [Candidate; 5] = [
    Candidate::Reference,
    Candidate::Corrupt(CorruptMode::DropEvent),
    Candidate::Corrupt(CorruptMode::AddSpurious),
    Candidate::Corrupt(CorruptMode::Truncate),
    Candidate::Mismatch,
];

const MAX_PAIR_ATTEMPTS: usize = 64;

/// Oracle-labelled records over the world's samples (pair `i` uses sample
/// `i mod n`). Each pair draws two different candidate captions from the
/// reference, three corruptions and another sample's reference; pairs the
/// oracle calls a tie are redrawn. Presentation order is randomised.
pub fn oracle_records(world: &World, cfg: &OracleAnnotation) -> Result<Vec<PreferenceRecord>, PrefError> {
    let n = world.samples.len();
    if n < 2 {
        return Err(PrefError::TooFewSamples(n));
    }
    let mut out = Vec::with_capacity(cfg.pairs);
    for i in 0..cfg.pairs {
        let sample = &world.samples[i % n];
        let mut rng = child(cfg.seed, i as u64);
        let draw = |c: Candidate, rng: &mut crate::rng::SeededRng| -> Vec<TokenId> {
            match c {
                Candidate::Reference => sample.reference.clone(),
                Candidate::Corrupt(mode) => corrupt_caption(sample, mode, &world.vocab, rng),
                Candidate::Mismatch => {
                    let j = (i % n + rng.random_range(1..n)) % n;
                    world.samples[j].reference.clone()
                }
            }
        };
        let mut found = None;
        for _ in 0..MAX_PAIR_ATTEMPTS {
            let picks: Vec<&Candidate> = CANDIDATES.choose_multiple(&mut rng, 2).collect();
            let a = draw(*picks[0], &mut rng);
            let b = draw(*picks[1], &mut rng);
            let pref = oracle_preference(sample, &a, &b, &world.vocab);
            if pref != Preference::Tie && a != b {
                found = Some((a, b, pref));
                break;
            }
        }
        let Some((a, b, pref)) = found else { continue };
        let votes = simulated_votes(pref, cfg, &mut rng);
        out.push(PreferenceRecord {
            pair_id: format!("p{i:06}"),
            sample_id: sample.sample_id.clone(),
            caption_a: world.vocab.decode(&a),
            caption_b: world.vocab.decode(&b),
            votes,
            origin: Origin::Oracle,
            mismatch_source: None,
        });
    }
    Ok(out)
}

/// Votes of `cfg.annotators` simulated annotators who each report `truth`
/// but flip it with probability `cfg.flip_prob`.
pub fn simulated_votes(truth: Preference, cfg: &OracleAnnotation, rng: &mut impl Rng) -> Vec<Vote> {
    (0..cfg.annotators)
        .map(|k| {
            let flip = cfg.flip_prob > 0.0 && rng.random_bool(cfg.flip_prob.min(1.0));
            Vote { annotator_id: format!("oracle{k}"), choice: if flip { truth.swapped() } else { truth } }
        })
        .collect()
}

/// Total order used when a deterministic record order is needed.
pub fn record_order(a: &PreferenceRecord, b: &PreferenceRecord) -> Ordering {
    a.sample_id.cmp(&b.sample_id).then_with(|| a.pair_id.cmp(&b.pair_id))
}
