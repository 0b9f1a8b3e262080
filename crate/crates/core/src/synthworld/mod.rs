//! A deterministic synthetic audio/caption universe.
//!
//! Each sample is a set of sound events. Its "audio" embedding is the
//! normalised sum of per-event basis vectors plus Gaussian noise, and its
//! reference caption names every event once, in ascending id order. Text
//! embeddings come from [`MockTextEncoder`], which shares the event basis, and
//! caption quality is judged by the event-F1 [`oracle_preference`].

mod corrupt;
mod encoder;
mod oracle;
mod vocab;

pub use corrupt::{corrupt_caption, CorruptMode};
pub use encoder::{MockTextEncoder, TextEncoder};
pub use oracle::{event_f1, event_f1_ratio, oracle_preference, Preference};
pub use vocab::{TokenId, Vocab, BOS, EOS, PAD};

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::{Embedding, EMBED_DIM};
use crate::rng::child;

use vocab::{DETERMINERS, MODIFIERS};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WorldError {
    #[error("invalid world spec: {}", .0.join("; "))]
    InvalidSpec(Vec<String>),
    #[error("unknown token `{0}`")]
    UnknownToken(String),
    #[error("need at least one sample")]
    NoSamples,
}

/// Parameters of a synthetic world.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldSpec {
    pub event_vocab_size: usize,
    pub events_min: usize,
    pub events_max: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for WorldSpec {
    fn default() -> Self {
        Self { event_vocab_size: 32, events_min: 1, events_max: 4, noise_sigma: 0.05, seed: 0 }
    }
}

impl WorldSpec {
    /// Every violated constraint, not just the first.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.event_vocab_size == 0 || self.event_vocab_size > EMBED_DIM {
            v.push(format!("event_vocab_size must be in 1..={EMBED_DIM}, got {}", self.event_vocab_size));
        }
        if self.events_min == 0 {
            v.push("events_min must be at least 1".into());
        }
        if self.events_min > self.events_max {
            v.push(format!("events_min {} exceeds events_max {}", self.events_min, self.events_max));
        }
        if self.events_max > self.event_vocab_size {
            v.push(format!("events_max {} exceeds event_vocab_size {}", self.events_max, self.event_vocab_size));
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            v.push(format!("noise_sigma must be finite and >= 0, got {}", self.noise_sigma));
        }
        v
    }

    pub fn validate(&self) -> Result<(), WorldError> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(WorldError::InvalidSpec(v))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub sample_id: String,
    /// Sorted, distinct event ids.
    pub true_events: Vec<usize>,
    pub reference: Vec<TokenId>,
    pub audio_embedding: Embedding,
}

/// A generated world: spec, vocabulary, frozen event basis and samples.
#[derive(Debug, Clone)]
pub struct World {
    pub spec: WorldSpec,
    pub vocab: Vocab,
    pub basis: Vec<Vec<f64>>,
    pub samples: Vec<Sample>,
}

// Stream ids for the child RNGs derived from the world seed.
const BASIS_STREAM: u64 = 0;
pub(crate) const CONNECTOR_STREAM: u64 = 1 << 32;
const FALLBACK_STREAM: u64 = 2 << 32;
const SAMPLE_STREAM: u64 = 3 << 32;

fn gaussian_vector(rng: &mut impl Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| StandardNormal.sample(rng)).collect()
}

pub(crate) fn unit_gaussian(seed: u64, stream: u64) -> Vec<f64> {
    let mut rng = child(seed, stream);
    let v = gaussian_vector(&mut rng, EMBED_DIM);
    let n = crate::numkit::ops::l2_norm(&v);
    v.into_iter().map(|x| x / n).collect()
}

/// Seeded random unit vectors, orthonormalised with modified Gram–Schmidt.
pub fn event_basis(spec: &WorldSpec) -> Vec<Vec<f64>> {
    let mut rng = child(spec.seed, BASIS_STREAM);
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(spec.event_vocab_size);
    while basis.len() < spec.event_vocab_size {
        let mut v = gaussian_vector(&mut rng, EMBED_DIM);
        for b in &basis {
            let p = crate::numkit::ops::dot(&v, b);
            v.iter_mut().zip(b).for_each(|(x, bi)| *x -= p * bi);
        }
        let n = crate::numkit::ops::l2_norm(&v);
        // A (practically impossible) degenerate draw is simply redrawn.
        if n > 1e-6 {
            basis.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    basis
}

/// The reference-caption template for a sorted event set:
/// `we hear <det e1> <e1> <mod e1> and <det e2> <e2> <mod e2> ...`.
pub fn caption_for_events(vocab: &Vocab, events: &[usize]) -> Vec<TokenId> {
    let mut out = vec![vocab.connector("we"), vocab.connector("hear")];
    for (i, &e) in events.iter().enumerate() {
        if i > 0 {
            out.push(vocab.connector("and"));
        }
        out.extend(event_phrase(vocab, e));
    }
    out
}

pub(crate) fn event_phrase(vocab: &Vocab, e: usize) -> [TokenId; 3] {
    [
        vocab.connector(DETERMINERS[e % DETERMINERS.len()]),
        vocab.event_token(e),
        vocab.connector(MODIFIERS[e % MODIFIERS.len()]),
    ]
}

/// Audio embedding for an event set: `normalize(Σ basis[e] + σ·noise)`.
fn audio_embedding(basis: &[Vec<f64>], events: &[usize], sigma: f64, rng: &mut impl Rng) -> Embedding {
    let mut v = vec![0.0; EMBED_DIM];
    for &e in events {
        v.iter_mut().zip(&basis[e]).for_each(|(x, b)| *x += b);
    }
    if sigma > 0.0 {
        for x in &mut v {
            let z: f64 = StandardNormal.sample(rng);
            *x += sigma * z;
        }
    }
    Embedding::normalized(&v)
}

pub fn sample_id(index: usize) -> String {
    format!("s{index:05}")
}

/// Generates `n_samples` samples. Sample `i` depends only on `(spec, i)`, so
/// a smaller world is a prefix of a larger one with the same spec.
pub fn generate_world(spec: &WorldSpec, n_samples: usize) -> Result<World, WorldError> {
    spec.validate()?;
    if n_samples == 0 {
        return Err(WorldError::NoSamples);
    }
    let vocab = Vocab::new(spec.event_vocab_size);
    let basis = event_basis(spec);
    let samples = (0..n_samples)
        .map(|i| {
            let mut rng = child(spec.seed, SAMPLE_STREAM + i as u64);
            let k = rng.random_range(spec.events_min..=spec.events_max);
            let mut events = sample_indices(&mut rng, spec.event_vocab_size, k).into_vec();
            events.sort_unstable();
            let audio = audio_embedding(&basis, &events, spec.noise_sigma, &mut rng);
            Sample {
                sample_id: sample_id(i),
                reference: caption_for_events(&vocab, &events),
                true_events: events,
                audio_embedding: audio,
            }
        })
        .collect();
    Ok(World { spec: spec.clone(), vocab, basis, samples })
}

impl World {
    /// Rebuilds a world around externally loaded samples (for example ones
    /// read back from disk). The basis and vocabulary are regenerated from
    /// the spec.
    pub fn from_samples(spec: WorldSpec, samples: Vec<Sample>) -> Result<Self, WorldError> {
        spec.validate()?;
        Ok(Self { vocab: Vocab::new(spec.event_vocab_size), basis: event_basis(&spec), spec, samples })
    }

    pub fn text_encoder(&self) -> MockTextEncoder {
        MockTextEncoder::new(self)
    }

    pub fn sample(&self, id: &str) -> Option<&Sample> {
        self.samples.iter().find(|s| s.sample_id == id)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_spec_same_world() {
        let spec = WorldSpec { seed: 11, ..WorldSpec::default() };
        let a = generate_world(&spec, 20).unwrap();
        let b = generate_world(&spec, 20).unwrap();
        assert_eq!(a.samples, b.samples);
        assert_eq!(a.basis, b.basis);
        let c = generate_world(&spec, 5).unwrap();
        assert_eq!(&a.samples[..5], &c.samples[..]);
    }

    #[test]
    fn basis_is_orthonormal() {
        let basis = event_basis(&WorldSpec::default());
        for i in 0..basis.len() {
            for j in 0..basis.len() {
                let d = crate::numkit::ops::dot(&basis[i], &basis[j]);
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((d - want).abs() < 1e-12, "({i},{j}) = {d}");
            }
        }
    }

    #[test]
    fn noiseless_single_event_embedding_is_its_basis_vector() {
        let spec = WorldSpec { noise_sigma: 0.0, events_min: 1, events_max: 1, ..WorldSpec::default() };
        let w = generate_world(&spec, 10).unwrap();
        for s in &w.samples {
            let e = s.true_events[0];
            for (a, b) in s.audio_embedding.as_slice().iter().zip(&w.basis[e]) {
                assert!((f64::from(*a) - b).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn samples_satisfy_invariants() {
        let w = generate_world(&WorldSpec::default(), 200).unwrap();
        for s in &w.samples {
            assert!(s.true_events.windows(2).all(|p| p[0] < p[1]));
            assert!((1..=4).contains(&s.true_events.len()));
            let mentioned: Vec<usize> = s.reference.iter().filter_map(|&t| w.vocab.event_of(t)).collect();
            assert_eq!(mentioned, s.true_events);
            let norm: f64 = s.audio_embedding.to_f64().iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-6);
            assert_eq!(s.audio_embedding.dim(), EMBED_DIM);
        }
    }

    #[test]
    fn spec_violations_are_enumerated() {
        let spec = WorldSpec { event_vocab_size: 3, events_min: 5, events_max: 4, noise_sigma: -1.0, seed: 0 };
        let v = spec.violations();
        assert_eq!(v.len(), 3, "{v:?}");
        assert!(matches!(generate_world(&spec, 1), Err(WorldError::InvalidSpec(_))));
        let too_many = WorldSpec { events_max: 40, ..WorldSpec::default() };
        assert!(generate_world(&too_many, 1).is_err());
        assert_eq!(generate_world(&WorldSpec::default(), 0).unwrap_err(), WorldError::NoSamples);
    }

    #[test]
    fn reference_lengths() {
        let v = Vocab::new(32);
        assert_eq!(caption_for_events(&v, &[3]).len(), 5);
        assert_eq!(caption_for_events(&v, &[1, 2, 3, 4]).len(), 17);
        assert_eq!(v.decode(&caption_for_events(&v, &[0, 2])), "we hear a dog nearby and some bird softly");
    }
}
