//! Preference-aligned caption fine-tuning at desk scale.
//!
//! The crate covers the whole loop: a synthetic audio/caption world with a
//! ground-truth preference oracle, embedding and caption storage, a siamese
//! Bradley–Terry reward model, a small GRU caption policy, self-critical
//! policy-gradient fine-tuning with length-penalty reward shaping,
//! preference-dataset curation and the evaluation metrics.

pub mod embedding;
pub mod numkit;
pub mod rng;
pub mod synthworld;

pub use embedding::{Embedding, EMBED_DIM};
pub mod checkpoint;
pub mod embedstore;
pub mod evalmetrics;
pub mod jsonl;
pub mod policy;
pub mod prefdata;
pub mod reward;
pub mod scst;
