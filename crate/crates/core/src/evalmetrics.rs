//! Evaluation metrics: pairwise win rate, Fleiss' kappa, BLEU-4 and
//! caption-length statistics.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("no comparisons")]
    Empty,
    #[error("every comparison is a tie; win rate is undefined")]
    AllTies,
    #[error("need at least 2 raters per item, got {0}")]
    TooFewRaters(usize),
    #[error("row {row} sums to {sum}, expected {expected}")]
    RowSum { row: usize, sum: usize, expected: usize },
    #[error("vote matrix has no categories")]
    NoCategories,
    #[error("no reference captions")]
    NoReferences,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Outcome {
    Win,
    Loss,
    Tie,
}

impl Outcome {
    pub fn swapped(self) -> Self {
        match self {
            Outcome::Win => Outcome::Loss,
            Outcome::Loss => Outcome::Win,
            Outcome::Tie => Outcome::Tie,
        }
    }
}

/// `100 · wins / (wins + losses)`; ties are excluded from the denominator.
pub fn win_rate(outcomes: &[Outcome]) -> Result<f64, MetricError> {
    if outcomes.is_empty() {
        return Err(MetricError::Empty);
    }
    let wins = outcomes.iter().filter(|&&o| o == Outcome::Win).count();
    let losses = outcomes.iter().filter(|&&o| o == Outcome::Loss).count();
    if wins + losses == 0 {
        return Err(MetricError::AllTies);
    }
    Ok(100.0 * wins as f64 / (wins + losses) as f64)
}

/// Per-item category counts with a constant number of raters per item.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoteMatrix {
    counts: Vec<Vec<usize>>,
    raters: usize,
}

impl VoteMatrix {
    pub fn new(counts: Vec<Vec<usize>>) -> Result<Self, MetricError> {
        let first = counts.first().ok_or(MetricError::Empty)?;
        if first.is_empty() {
            return Err(MetricError::NoCategories);
        }
        let raters: usize = first.iter().sum();
        if raters < 2 {
            return Err(MetricError::TooFewRaters(raters));
        }
        for (row, c) in counts.iter().enumerate() {
            let sum: usize = c.iter().sum();
            if sum != raters || c.len() != first.len() {
                return Err(MetricError::RowSum { row, sum, expected: raters });
            }
        }
        Ok(Self { counts, raters })
    }

    /// Builds counts from per-item category labels (`labels[i][r]` is the
    /// category index chosen by rater `r` on item `i`).
    pub fn from_labels(labels: &[Vec<usize>], categories: usize) -> Result<Self, MetricError> {
        let counts = labels
            .iter()
            .map(|row| {
                let mut c = vec![0; categories];
                for &l in row {
                    c[l] += 1;
                }
                c
            })
            .collect();
        Self::new(counts)
    }

    pub fn items(&self) -> usize {
        self.counts.len()
    }

    pub fn raters(&self) -> usize {
        self.raters
    }
}

/// Fleiss' kappa `(P̄ - P̄_e) / (1 - P̄_e)`. When every vote falls in one
/// category (`P̄_e = 1`) agreement is perfect and kappa is 1.
pub fn fleiss_kappa(m: &VoteMatrix) -> f64 {
    let n = m.raters as f64;
    let items = m.items() as f64;
    let k = m.counts[0].len();
    let p_bar = m
        .counts
        .iter()
        .map(|row| (row.iter().map(|&c| (c * c) as f64).sum::<f64>() - n) / (n * (n - 1.0)))
        .sum::<f64>()
        / items;
    let p_e: f64 = (0..k)
        .map(|j| {
            let pj = m.counts.iter().map(|row| row[j] as f64).sum::<f64>() / (items * n);
            pj * pj
        })
        .sum();
    if p_e >= 1.0 {
        return 1.0;
    }
    (p_bar - p_e) / (1.0 - p_e)
}

fn ngram_counts<T: AsRef<str>>(tokens: &[T], n: usize) -> HashMap<Vec<&str>, usize> {
    let mut out = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *out.entry(w.iter().map(AsRef::as_ref).collect()).or_insert(0) += 1;
        }
    }
    out
}

/// Unsmoothed corpus-free BLEU-4 of one candidate against its references.
///
/// Clipped n-gram precisions for n = 1..4 are combined by geometric mean;
/// any zero precision gives 0. The brevity penalty uses the reference
/// length closest to the candidate's (shorter on ties).
pub fn bleu4<T: AsRef<str>, R: AsRef<str>>(candidate: &[T], references: &[Vec<R>]) -> Result<f64, MetricError> {
    if references.is_empty() {
        return Err(MetricError::NoReferences);
    }
    let c = candidate.len();
    if c == 0 {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    for n in 1..=4 {
        let cand = ngram_counts(candidate, n);
        let total: usize = cand.values().sum();
        if total == 0 {
            return Ok(0.0);
        }
        let refs: Vec<_> = references.iter().map(|r| ngram_counts(r, n)).collect();
        let clipped: usize = cand
            .iter()
            .map(|(g, &cnt)| cnt.min(refs.iter().map(|r| r.get(g).copied().unwrap_or(0)).max().unwrap_or(0)))
            .sum();
        if clipped == 0 {
            return Ok(0.0);
        }
        log_sum += (clipped as f64 / total as f64).ln();
    }
    let r = references.iter().map(Vec::len).min_by_key(|&len| (len.abs_diff(c), len)).expect("non-empty references");
    let bp = if c < r { (1.0 - r as f64 / c as f64).exp() } else { 1.0 };
    Ok(bp * (log_sum / 4.0).exp())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CaptionStats {
    pub count: usize,
    pub mean_len: f64,
    pub median_len: f64,
    pub max_len: usize,
    /// Distinct tokens over total tokens across all captions.
    pub distinct_ratio: f64,
}

pub fn caption_stats<T: AsRef<str>>(captions: &[Vec<T>]) -> Result<CaptionStats, MetricError> {
    if captions.is_empty() {
        return Err(MetricError::Empty);
    }
    let mut lens: Vec<usize> = captions.iter().map(Vec::len).collect();
    lens.sort_unstable();
    let n = lens.len();
    let median = if n % 2 == 1 { lens[n / 2] as f64 } else { (lens[n / 2 - 1] + lens[n / 2]) as f64 / 2.0 };
    let total: usize = lens.iter().sum();
    let distinct: BTreeSet<&str> = captions.iter().flatten().map(AsRef::as_ref).collect();
    Ok(CaptionStats {
        count: n,
        mean_len: total as f64 / n as f64,
        median_len: median,
        max_len: *lens.last().expect("non-empty"),
        distinct_ratio: if total == 0 { 0.0 } else { distinct.len() as f64 / total as f64 },
    })
}

/// One line of a metric report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub system: String,
    pub metric: String,
    pub value: f64,
}

/// Fixed-width table with one row per system and one column per metric,
/// in first-seen order.
pub fn format_table(rows: &[MetricRow]) -> String {
    let mut systems: Vec<&str> = Vec::new();
    let mut metrics: Vec<&str> = Vec::new();
    for r in rows {
        if !systems.contains(&r.system.as_str()) {
            systems.push(&r.system);
        }
        if !metrics.contains(&r.metric.as_str()) {
            metrics.push(&r.metric);
        }
    }
    let sys_w = systems.iter().map(|s| s.len()).max().unwrap_or(0).max("system".len());
    let col_w: Vec<usize> = metrics.iter().map(|m| m.len().max(10)).collect();
    let mut out = String::new();
    let _ = write!(out, "{:<sys_w$}", "system");
    for (m, w) in metrics.iter().zip(&col_w) {
        let _ = write!(out, "  {m:>w$}");
    }
    out.push('\n');
    for s in &systems {
        let _ = write!(out, "{s:<sys_w$}");
        for (m, w) in metrics.iter().zip(&col_w) {
            match rows.iter().find(|r| r.system == *s && r.metric == *m) {
                Some(r) => {
                    let _ = write!(out, "  {:>w$.4}", r.value);
                }
                None => {
                    let _ = write!(out, "  {:>w$}", "-");
                }
            }
        }
        out.push('\n');
    }
    out
}
