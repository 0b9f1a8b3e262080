use std::cmp::Ordering;
use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::{Sample, TokenId, Vocab};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preference {
    A,
    B,
    Tie,
}

impl Preference {
    /// The same judgement with the two captions swapped.
    pub fn swapped(self) -> Self {
        match self {
            Preference::A => Preference::B,
            Preference::B => Preference::A,
            Preference::Tie => Preference::Tie,
        }
    }
}

/// Event-F1 of a caption as the exact ratio `(numerator, denominator)`.
///
/// Precision counts every event-token occurrence (repeating an event lowers
/// it); recall counts distinct true events mentioned. With `tp` distinct true
/// events mentioned, `u` event-token occurrences and `t` true events,
/// `F1 = 2·tp / (u + t)`.
pub fn event_f1_ratio(true_events: &[usize], caption: &[TokenId], vocab: &Vocab) -> (usize, usize) {
    let truth: BTreeSet<usize> = true_events.iter().copied().collect();
    let uttered: Vec<usize> = caption.iter().filter_map(|&t| vocab.event_of(t)).collect();
    let hits = uttered.iter().filter(|e| truth.contains(e)).collect::<BTreeSet<_>>().len();
    (2 * hits, uttered.len() + truth.len())
}

pub fn event_f1(true_events: &[usize], caption: &[TokenId], vocab: &Vocab) -> f64 {
    let (num, den) = event_f1_ratio(true_events, caption, vocab);
    if den == 0 {
        // No true events and nothing uttered: vacuously perfect.
        1.0
    } else {
        num as f64 / den as f64
    }
}

/// Ground-truth preference: the caption with higher event-F1 wins; equal
/// F1 is a tie. Ratios are compared exactly.
pub fn oracle_preference(sample: &Sample, caption_a: &[TokenId], caption_b: &[TokenId], vocab: &Vocab) -> Preference {
    let ratio = |c: &[TokenId]| {
        let (n, d) = event_f1_ratio(&sample.true_events, c, vocab);
        if d == 0 {
            (1, 1)
        } else {
            (n, d)
        }
    };
    let (na, da) = ratio(caption_a);
    let (nb, db) = ratio(caption_b);
    match (na * db).cmp(&(nb * da)) {
        Ordering::Greater => Preference::A,
        Ordering::Less => Preference::B,
        Ordering::Equal => Preference::Tie,
    }
}

#[cfg(test)]
mod tests {
    use super::super::{caption_for_events, generate_world, WorldSpec};
    use super::*;

    #[test]
    fn reference_beats_empty_and_identical_ties() {
        let w = generate_world(&WorldSpec::default(), 5).unwrap();
        for s in &w.samples {
            assert_eq!(oracle_preference(s, &s.reference, &[], &w.vocab), Preference::A);
            assert_eq!(oracle_preference(s, &[], &s.reference, &w.vocab), Preference::B);
            assert_eq!(oracle_preference(s, &s.reference, &s.reference, &w.vocab), Preference::Tie);
            assert_eq!(event_f1(&s.true_events, &s.reference, &w.vocab), 1.0);
        }
    }

    #[test]
    fn hand_computed_f1() {
        let w = generate_world(&WorldSpec::default(), 1).unwrap();
        let v = &w.vocab;
        let mut s = w.samples[0].clone();
        s.true_events = vec![1, 5];
        // Two of two true events plus one spurious: P = 2/3, R = 1, F1 = 0.8.
        let a = caption_for_events(v, &[1, 5, 9]);
        // One of two, nothing spurious: P = 1, R = 1/2, F1 = 2/3.
        let b = caption_for_events(v, &[5]);
        assert!((event_f1(&s.true_events, &a, v) - 0.8).abs() < 1e-15);
        assert!((event_f1(&s.true_events, &b, v) - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(oracle_preference(&s, &a, &b, v), Preference::A);
    }

    #[test]
    fn repeats_lower_precision() {
        let w = generate_world(&WorldSpec::default(), 1).unwrap();
        let v = &w.vocab;
        let dog = v.event_token(0);
        assert!((event_f1(&[0], &[dog, dog], v) - 2.0 / 3.0).abs() < 1e-15);
    }
}
