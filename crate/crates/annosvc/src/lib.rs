//! Pairwise caption annotation service.
//!
//! Annotators fetch one caption pair at a time, shown in an order fixed per
//! (pair, annotator) by a seeded hash, and vote first/second/tie. Votes are
//! translated back to the stored A/B captions on the server, appended to a
//! JSONL log and exported as `PreferenceRecord`s.

pub mod api;
pub mod order;
pub mod store;

pub use api::{router, serve, ServeConfig, ServeError, SharedStore};
pub use order::{presentation, Presentation};
pub use store::{
    load_pairs, AnnotationState, AnnotatorProgress, DisplayedChoice, LogEntry, NextTask, PairSpec, Progress, Store,
    StoreError, VoteAck, VoteEvent,
};
