//! Task pool, append-only vote log and the state folded from it.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use prefcap_core::prefdata::{Origin, PreferenceRecord, Vote};
use prefcap_core::synthworld::Preference;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::order::{presentation, Presentation};

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}:{line}: unreadable log entry: {message}")]
    CorruptLog { path: PathBuf, line: usize, message: String },
    #[error("{path}:{line}: log refers to unknown pair {pair_id:?}")]
    LogPairMissing { path: PathBuf, line: usize, pair_id: String },
    #[error("invalid pair pool: {0}")]
    InvalidPairs(String),
    #[error("unknown pair {0:?}")]
    UnknownPair(String),
    #[error("invalid vote: {0}")]
    InvalidVote(String),
}

/// One caption pair offered for annotation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairSpec {
    pub pair_id: String,
    pub sample_id: String,
    pub caption_a: String,
    pub caption_b: String,
    /// Audio file path (relative to the served audio directory) or URL.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub audio: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DisplayedChoice {
    First,
    Second,
    Tie,
}

/// Vote as submitted by the client, in display terms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VoteEvent {
    pub pair_id: String,
    pub annotator_id: String,
    pub displayed_choice: DisplayedChoice,
    /// Client time in milliseconds since the Unix epoch; the server clock is
    /// used when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timestamp_ms: Option<u64>,
}

/// One line of the vote log. `choice` is already de-randomized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub pair_id: String,
    pub annotator_id: String,
    pub displayed_choice: DisplayedChoice,
    pub choice: Preference,
    pub timestamp_ms: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotatorProgress {
    pub done: usize,
    pub total: usize,
}

/// What the client sees. Only display order is exposed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "lowercase")]
pub enum NextTask {
    Task {
        pair_id: String,
        #[serde(skip_serializing_if = "Option::is_none")]
        audio_url: Option<String>,
        caption_first: String,
        caption_second: String,
        progress: AnnotatorProgress,
    },
    Done {
        progress: AnnotatorProgress,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VoteAck {
    pub duplicate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Progress {
    pub pairs: usize,
    pub votes: usize,
    pub annotators: usize,
    /// Pairs with at least one vote.
    pub pairs_with_votes: usize,
    pub per_annotator: BTreeMap<String, usize>,
}

pub fn to_choice(displayed: DisplayedChoice, order: Presentation) -> Preference {
    match (displayed, order) {
        (DisplayedChoice::Tie, _) => Preference::Tie,
        (DisplayedChoice::First, Presentation::AFirst) | (DisplayedChoice::Second, Presentation::BFirst) => {
            Preference::A
        }
        (DisplayedChoice::First, Presentation::BFirst) | (DisplayedChoice::Second, Presentation::AFirst) => {
            Preference::B
        }
    }
}

fn audio_url(audio: &str) -> String {
    if audio.starts_with("http://") || audio.starts_with("https://") || audio.starts_with('/') {
        audio.to_string()
    } else {
        format!("/audio/{audio}")
    }
}

/// Service state: the pair pool plus the current vote per (pair, annotator).
#[derive(Debug, Clone)]
pub struct AnnotationState {
    pairs: Vec<PairSpec>,
    index: HashMap<String, usize>,
    order_seed: u64,
    votes: Vec<BTreeMap<String, LogEntry>>,
}

impl AnnotationState {
    pub fn new(pairs: Vec<PairSpec>, order_seed: u64) -> Result<Self, StoreError> {
        let mut index = HashMap::new();
        for (i, p) in pairs.iter().enumerate() {
            if p.pair_id.is_empty() {
                return Err(StoreError::InvalidPairs(format!("pair {i} has an empty id")));
            }
            if p.caption_a == p.caption_b {
                return Err(StoreError::InvalidPairs(format!("pair {} shows the same caption twice", p.pair_id)));
            }
            if index.insert(p.pair_id.clone(), i).is_some() {
                return Err(StoreError::InvalidPairs(format!("duplicate pair id {}", p.pair_id)));
            }
        }
        let votes = vec![BTreeMap::new(); pairs.len()];
        Ok(Self { pairs, index, order_seed, votes })
    }

    pub fn pairs(&self) -> &[PairSpec] {
        &self.pairs
    }

    pub fn presentation(&self, pair_id: &str, annotator_id: &str) -> Presentation {
        presentation(self.order_seed, pair_id, annotator_id)
    }

    pub fn current_vote(&self, pair_id: &str, annotator_id: &str) -> Option<&LogEntry> {
        self.votes[*self.index.get(pair_id)?].get(annotator_id)
    }

    /// Folds one log entry into the state; later entries for the same
    /// (pair, annotator) replace earlier ones.
    pub fn apply(&mut self, entry: LogEntry) -> Result<(), StoreError> {
        let i = *self.index.get(&entry.pair_id).ok_or_else(|| StoreError::UnknownPair(entry.pair_id.clone()))?;
        self.votes[i].insert(entry.annotator_id.clone(), entry);
        Ok(())
    }

    fn progress_for(&self, annotator_id: &str) -> AnnotatorProgress {
        let done = self.votes.iter().filter(|v| v.contains_key(annotator_id)).count();
        AnnotatorProgress { done, total: self.pairs.len() }
    }

    /// First pair in pool order this annotator has not voted on.
    pub fn next_task(&self, annotator_id: &str) -> NextTask {
        let progress = self.progress_for(annotator_id);
        let open = self.pairs.iter().zip(&self.votes).find(|(_, v)| !v.contains_key(annotator_id));
        match open {
            None => NextTask::Done { progress },
            Some((p, _)) => {
                let (first, second) = match self.presentation(&p.pair_id, annotator_id) {
                    Presentation::AFirst => (&p.caption_a, &p.caption_b),
                    Presentation::BFirst => (&p.caption_b, &p.caption_a),
                };
                NextTask::Task {
                    pair_id: p.pair_id.clone(),
                    audio_url: p.audio.as_deref().map(audio_url),
                    caption_first: first.clone(),
                    caption_second: second.clone(),
                    progress,
                }
            }
        }
    }

    /// The log entry a submission would append, or `None` when it repeats
    /// the annotator's current vote.
    pub fn entry_for(&self, event: &VoteEvent, now_ms: u64) -> Result<Option<LogEntry>, StoreError> {
        if event.annotator_id.trim().is_empty() {
            return Err(StoreError::InvalidVote("annotator_id is empty".into()));
        }
        if !self.index.contains_key(&event.pair_id) {
            return Err(StoreError::UnknownPair(event.pair_id.clone()));
        }
        if let Some(prev) = self.current_vote(&event.pair_id, &event.annotator_id) {
            if prev.displayed_choice == event.displayed_choice {
                return Ok(None);
            }
        }
        let order = self.presentation(&event.pair_id, &event.annotator_id);
        Ok(Some(LogEntry {
            pair_id: event.pair_id.clone(),
            annotator_id: event.annotator_id.clone(),
            displayed_choice: event.displayed_choice,
            choice: to_choice(event.displayed_choice, order),
            timestamp_ms: event.timestamp_ms.unwrap_or(now_ms),
        }))
    }

    /// One record per voted pair, in pool order, votes sorted by annotator.
    pub fn export(&self) -> Vec<PreferenceRecord> {
        self.pairs
            .iter()
            .zip(&self.votes)
            .filter(|(_, v)| !v.is_empty())
            .map(|(p, v)| PreferenceRecord {
                pair_id: p.pair_id.clone(),
                sample_id: p.sample_id.clone(),
                caption_a: p.caption_a.clone(),
                caption_b: p.caption_b.clone(),
                votes: v.values().map(|e| Vote { annotator_id: e.annotator_id.clone(), choice: e.choice }).collect(),
                origin: Origin::Human,
                mismatch_source: None,
            })
            .collect()
    }

    pub fn progress(&self) -> Progress {
        let mut per_annotator = BTreeMap::new();
        for v in &self.votes {
            for id in v.keys() {
                *per_annotator.entry(id.clone()).or_insert(0) += 1;
            }
        }
        Progress {
            pairs: self.pairs.len(),
            votes: self.votes.iter().map(BTreeMap::len).sum(),
            annotators: per_annotator.len(),
            pairs_with_votes: self.votes.iter().filter(|v| !v.is_empty()).count(),
            per_annotator,
        }
    }
}

/// State plus its durable log. Every accepted vote is written and synced
/// before the call returns.
#[derive(Debug)]
pub struct Store {
    state: AnnotationState,
    log: File,
    path: PathBuf,
}

impl Store {
    /// Replays an existing log (or starts a new one). A final line without
    /// a newline is an interrupted append; it is dropped and the file is
    /// truncated back to the last complete entry.
    pub fn open(pairs: Vec<PairSpec>, log_path: &Path, order_seed: u64) -> Result<Self, StoreError> {
        let io = |source| StoreError::Io { path: log_path.to_path_buf(), source };
        if let Some(dir) = log_path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(io)?;
        }
        let (state, complete, total) = replay(pairs, log_path, order_seed)?;
        let log = OpenOptions::new().create(true).append(true).open(log_path).map_err(io)?;
        if complete < total {
            tracing::warn!(path = %log_path.display(), bytes = total - complete, "dropping interrupted log tail");
            log.set_len(complete as u64).map_err(io)?;
        }
        Ok(Self { state, log, path: log_path.to_path_buf() })
    }

    pub fn state(&self) -> &AnnotationState {
        &self.state
    }

    pub fn log_path(&self) -> &Path {
        &self.path
    }

    pub fn next_task(&self, annotator_id: &str) -> Result<NextTask, StoreError> {
        if annotator_id.trim().is_empty() {
            return Err(StoreError::InvalidVote("annotator is empty".into()));
        }
        if !self.state.votes.iter().any(|v| v.contains_key(annotator_id)) {
            tracing::info!(annotator = annotator_id, "serving annotator with no recorded votes");
        }
        Ok(self.state.next_task(annotator_id))
    }

    pub fn submit(&mut self, event: &VoteEvent) -> Result<VoteAck, StoreError> {
        let now = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis() as u64);
        let Some(entry) = self.state.entry_for(event, now)? else {
            return Ok(VoteAck { duplicate: true });
        };
        let mut line = serde_json::to_vec(&entry).expect("log entry serialises");
        line.push(b'\n');
        let io = |source| StoreError::Io { path: self.path.clone(), source };
        self.log.write_all(&line).map_err(io)?;
        self.log.sync_data().map_err(io)?;
        self.state.apply(entry)?;
        Ok(VoteAck { duplicate: false })
    }

    pub fn export(&self) -> Vec<PreferenceRecord> {
        self.state.export()
    }

    pub fn progress(&self) -> Progress {
        self.state.progress()
    }
}

/// Folds a log into a fresh state without modifying the file. Returns the
/// state, the length of the complete-line prefix and the file length.
fn replay(
    pairs: Vec<PairSpec>,
    log_path: &Path,
    order_seed: u64,
) -> Result<(AnnotationState, usize, usize), StoreError> {
    let mut state = AnnotationState::new(pairs, order_seed)?;
    let text = match fs::read(log_path) {
        Ok(bytes) => bytes,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Vec::new(),
        Err(source) => return Err(StoreError::Io { path: log_path.to_path_buf(), source }),
    };
    let complete = text.iter().rposition(|&b| b == b'\n').map_or(0, |i| i + 1);
    for (n, line) in text[..complete].split(|&b| b == b'\n').enumerate() {
        if line.iter().all(u8::is_ascii_whitespace) {
            continue;
        }
        let corrupt = |message: String| StoreError::CorruptLog { path: log_path.to_path_buf(), line: n + 1, message };
        let entry: LogEntry = serde_json::from_slice(line).map_err(|e| corrupt(e.to_string()))?;
        let pair_id = entry.pair_id.clone();
        state.apply(entry).map_err(|_| StoreError::LogPairMissing {
            path: log_path.to_path_buf(),
            line: n + 1,
            pair_id,
        })?;
    }
    Ok((state, complete, text.len()))
}

impl AnnotationState {
    /// Read-only replay of a vote log; an interrupted final line is ignored.
    pub fn from_log(pairs: Vec<PairSpec>, log_path: &Path, order_seed: u64) -> Result<Self, StoreError> {
        Ok(replay(pairs, log_path, order_seed)?.0)
    }
}

/// Reads a pair pool from JSONL, rejecting duplicate ids.
pub fn load_pairs(path: &Path) -> Result<Vec<PairSpec>, StoreError> {
    let pairs: Vec<PairSpec> =
        prefcap_core::jsonl::read_jsonl(path).map_err(|e| StoreError::InvalidPairs(e.to_string()))?;
    let mut seen = HashSet::new();
    if let Some(p) = pairs.iter().find(|p| !seen.insert(p.pair_id.as_str())) {
        return Err(StoreError::InvalidPairs(format!("duplicate pair id {}", p.pair_id)));
    }
    Ok(pairs)
}
