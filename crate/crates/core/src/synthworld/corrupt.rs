use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{caption_for_events, event_phrase, Sample, TokenId, Vocab};

/// Ways to degrade a reference caption.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum CorruptMode {
    /// Remove one true event.
    DropEvent,
    /// Mention one event the sample does not contain.
    AddSpurious,
    /// Permute the tokens.
    Shuffle,
    /// Cut the caption before its last event token.
    Truncate,
    /// Append repeated event phrases until the caption is at least `target_len` long.
    PadRepeat { target_len: usize },
}

impl CorruptMode {
    pub const BASIC: [CorruptMode; 4] =
        [CorruptMode::DropEvent, CorruptMode::AddSpurious, CorruptMode::Shuffle, CorruptMode::Truncate];
}

/// Degrades the sample's reference caption according to `mode`.
pub fn corrupt_caption(sample: &Sample, mode: CorruptMode, vocab: &Vocab, rng: &mut impl Rng) -> Vec<TokenId> {
    let events = &sample.true_events;
    match mode {
        CorruptMode::DropEvent => {
            let mut kept = events.clone();
            if !kept.is_empty() {
                let i = rng.random_range(0..kept.len());
                kept.remove(i);
            }
            caption_for_events(vocab, &kept)
        }
        CorruptMode::AddSpurious => {
            let absent: Vec<usize> = (0..vocab.n_events()).filter(|e| !events.contains(e)).collect();
            let mut with = events.clone();
            if let Some(&extra) = absent.get(rng.random_range(0..absent.len().max(1))) {
                with.push(extra);
                with.sort_unstable();
            }
            caption_for_events(vocab, &with)
        }
        CorruptMode::Shuffle => {
            let mut tokens = sample.reference.clone();
            tokens.shuffle(rng);
            tokens
        }
        CorruptMode::Truncate => {
            let last_event = sample.reference.iter().rposition(|&t| vocab.event_of(t).is_some());
            match last_event {
                Some(p) => sample.reference[..rng.random_range(0..p)].to_vec(),
                None => Vec::new(),
            }
        }
        CorruptMode::PadRepeat { target_len } => {
            let mut tokens = sample.reference.clone();
            let unit: Vec<TokenId> = if events.is_empty() {
                vec![vocab.connector("and"), vocab.connector("again")]
            } else {
                events
                    .iter()
                    .flat_map(|&e| {
                        let mut u = vec![vocab.connector("and")];
                        u.extend(event_phrase(vocab, e));
                        u
                    })
                    .collect()
            };
            let mut i = 0;
            while tokens.len() < target_len {
                tokens.push(unit[i % unit.len()]);
                i += 1;
            }
            tokens
        }
    }
}
