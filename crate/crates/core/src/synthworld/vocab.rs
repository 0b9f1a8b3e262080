use std::collections::HashMap;

use super::WorldError;

pub type TokenId = usize;

pub const PAD: TokenId = 0;
pub const BOS: TokenId = 1;
pub const EOS: TokenId = 2;

const SPECIALS: [&str; 3] = ["<pad>", "<bos>", "<eos>"];

const EVENT_NAMES: [&str; 32] = [
    "dog",
    "cat",
    "bird",
    "car",
    "truck",
    "train",
    "siren",
    "horn",
    "engine",
    "rain",
    "wind",
    "thunder",
    "water",
    "door",
    "bell",
    "clock",
    "phone",
    "music",
    "drum",
    "guitar",
    "piano",
    "baby",
    "crowd",
    "man",
    "woman",
    "child",
    "footsteps",
    "typing",
    "applause",
    "laughter",
    "whistle",
    "hammer",
];

/// Connector (non-event) tokens. The first twelve are used by the caption
/// template; the rest only appear in corrupted or generated captions.
pub(crate) const CONNECTORS: [&str; 29] = [
    "we",
    "hear",
    "a",
    "the",
    "some",
    "and",
    "nearby",
    "loudly",
    "softly",
    "repeatedly",
    "briefly",
    "continuously",
    "while",
    "then",
    "with",
    "in",
    "background",
    "distant",
    "followed",
    "by",
    "sound",
    "of",
    "faint",
    "sharp",
    "steady",
    "again",
    "outside",
    "inside",
    "close",
];

pub(crate) const DETERMINERS: [&str; 3] = ["a", "the", "some"];
pub(crate) const MODIFIERS: [&str; 6] = ["nearby", "loudly", "softly", "repeatedly", "briefly", "continuously"];

/// Caption vocabulary: `<pad> <bos> <eos>`, then one token per event, then
/// the connectors.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
    n_events: usize,
}

impl Vocab {
    pub fn new(n_events: usize) -> Self {
        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        for e in 0..n_events {
            tokens.push(match EVENT_NAMES.get(e) {
                Some(name) => name.to_string(),
                None => format!("event{e}"),
            });
        }
        tokens.extend(CONNECTORS.iter().map(|s| s.to_string()));
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens, index, n_events }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn n_events(&self) -> usize {
        self.n_events
    }

    pub fn token(&self, id: TokenId) -> &str {
        &self.tokens[id]
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    /// Token id of a template connector. Panics on a non-connector.
    pub(crate) fn connector(&self, word: &str) -> TokenId {
        self.index[word]
    }

    pub fn event_token(&self, event: usize) -> TokenId {
        debug_assert!(event < self.n_events);
        3 + event
    }

    /// The event index a token names, if it is an event token.
    pub fn event_of(&self, id: TokenId) -> Option<usize> {
        (id >= 3 && id < 3 + self.n_events).then(|| id - 3)
    }

    pub fn is_special(&self, id: TokenId) -> bool {
        id < 3
    }

    pub fn is_connector(&self, id: TokenId) -> bool {
        id >= 3 + self.n_events && id < self.tokens.len()
    }

    /// Whitespace tokenisation; every word must be in the vocabulary.
    pub fn encode(&self, text: &str) -> Result<Vec<TokenId>, WorldError> {
        text.split_whitespace().map(|w| self.id(w).ok_or_else(|| WorldError::UnknownToken(w.to_string()))).collect()
    }

    /// Space-joined surface form. Special tokens are skipped.
    pub fn decode(&self, ids: &[TokenId]) -> String {
        ids.iter().filter(|&&id| !self.is_special(id)).map(|&id| self.tokens[id].as_str()).collect::<Vec<_>>().join(" ")
    }

    pub fn check_ids(&self, ids: &[TokenId]) -> Result<(), WorldError> {
        match ids.iter().find(|&&id| id >= self.tokens.len()) {
            Some(id) => Err(WorldError::UnknownToken(format!("#{id}"))),
            None => Ok(()),
        }
    }
}
