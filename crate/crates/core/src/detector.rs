//! Watermark detection: green counting, the z-statistic, diversity
//! statistics, and the input-adaptive Type I threshold.
//!
//! Detection needs only the suspect tokens and the key. It never sees the
//! prompt or the model.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::certificates::{certified_edit_budget, PenaltyBound};
use crate::error::{Error, Result};
use crate::partition::{partition, BigramLists, GreenList, Scheme, WatermarkKey};

/// Threshold used when none is given.
pub const DEFAULT_TAU: f64 = 6.0;

/// Below this vocabulary size the z-statistic uses `⌊γN⌋/N` in place of γ.
pub const EXACT_GAMMA_BELOW: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiversityStats {
    /// Largest multiplicity of any single token.
    pub c_max: usize,
    /// `(1/n) Σ_i count_i^2`.
    pub v: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    pub scheme: Scheme,
    /// Number of scored positions (`m - 1` for the bigram baseline).
    pub n: usize,
    pub green_count: usize,
    /// The γ used in the statistic.
    pub gamma: f64,
    pub z: f64,
    pub tau: f64,
    /// Set when `tau` came from the adaptive rule at this level.
    pub alpha: Option<f64>,
    pub decision: u8,
    pub stats: DiversityStats,
    pub certified_eta: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Threshold {
    Fixed(f64),
    /// Input-adaptive τ guaranteeing false-positive rate at most `alpha`.
    Adaptive { alpha: f64 },
}

/// γ as used by the z-statistic for this key.
pub fn effective_gamma(key: &WatermarkKey) -> f64 {
    if key.vocab_size < EXACT_GAMMA_BELOW {
        key.green_size() as f64 / key.vocab_size as f64
    } else {
        key.gamma
    }
}

pub fn count_green(seq: &[u32], green: &GreenList) -> Result<usize> {
    let mut count = 0;
    for &t in seq {
        if t as usize >= green.vocab_size() {
            return Err(Error::param(format!(
                "token {t} outside vocabulary of size {}",
                green.vocab_size()
            )));
        }
        count += green.contains(t) as usize;
    }
    Ok(count)
}

/// `(green - γn) / √(nγ(1-γ))`.
pub fn z_score(green_count: usize, n: usize, gamma: f64) -> Result<f64> {
    if n == 0 {
        return Err(Error::Undefined("z-score of an empty sequence".into()));
    }
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(Error::param(format!("gamma must lie in (0, 1), got {gamma}")));
    }
    let n = n as f64;
    Ok((green_count as f64 - gamma * n) / (n * gamma * (1.0 - gamma)).sqrt())
}

pub fn diversity_stats(seq: &[u32]) -> Result<DiversityStats> {
    if seq.is_empty() {
        return Err(Error::Undefined("diversity statistics of an empty sequence".into()));
    }
    let mut counts: HashMap<u32, usize> = HashMap::new();
    for &t in seq {
        *counts.entry(t).or_default() += 1;
    }
    let n = seq.len();
    let c_max = counts.values().copied().max().unwrap_or(0);
    let sum_sq: usize = counts.values().map(|c| c * c).sum();
    Ok(DiversityStats {
        c_max,
        v: sum_sq as f64 / n as f64,
        n,
    })
}

/// `√(64 V log(9/α) / (γ(1-γ))) + C_max log(9/α) / √(nγ(1-γ))`.
///
/// For a fixed sequence and a uniformly random green list, `P[z ≥ τ] ≤ α`.
pub fn adaptive_threshold(stats: &DiversityStats, gamma: f64, alpha: f64) -> Result<f64> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::param(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    if stats.n == 0 {
        return Err(Error::Undefined("adaptive threshold for an empty sequence".into()));
    }
    let log_term = (9.0 / alpha).ln();
    let spread = gamma * (1.0 - gamma);
    Ok((64.0 * stats.v * log_term / spread).sqrt() + stats.c_max as f64 * log_term / (stats.n as f64 * spread).sqrt())
}

fn resolve_tau(stats: &DiversityStats, gamma: f64, threshold: Threshold) -> Result<(f64, Option<f64>)> {
    match threshold {
        Threshold::Fixed(tau) => Ok((tau, None)),
        Threshold::Adaptive { alpha } => Ok((adaptive_threshold(stats, gamma, alpha)?, Some(alpha))),
    }
}

fn assemble(
    scheme: Scheme,
    scored: usize,
    green_count: usize,
    gamma: f64,
    stats: DiversityStats,
    threshold: Threshold,
) -> Result<DetectionReport> {
    let z = z_score(green_count, scored, gamma)?;
    let (tau, alpha) = resolve_tau(&stats, gamma, threshold)?;
    let cert = certified_edit_budget(z, scored, gamma, tau, scheme, PenaltyBound::Normalized)?;
    Ok(DetectionReport {
        scheme,
        n: scored,
        green_count,
        gamma,
        z,
        tau,
        alpha,
        decision: (z > tau) as u8,
        stats,
        certified_eta: Some(cert.certified_eta),
    })
}

/// Fixed-split detection with a fixed threshold.
pub fn detect(seq: &[u32], key: &WatermarkKey, tau: f64) -> Result<DetectionReport> {
    detect_with(seq, key, Threshold::Fixed(tau))
}

/// Fixed-split detection.
pub fn detect_with(seq: &[u32], key: &WatermarkKey, threshold: Threshold) -> Result<DetectionReport> {
    let green = partition(key)?;
    detect_with_list(seq, &green, effective_gamma(key), threshold)
}

/// Fixed-split detection against an already derived green list.
pub fn detect_with_list(seq: &[u32], green: &GreenList, gamma: f64, threshold: Threshold) -> Result<DetectionReport> {
    if seq.is_empty() {
        return Err(Error::Undefined("cannot detect on an empty sequence".into()));
    }
    let green_count = count_green(seq, green)?;
    let stats = diversity_stats(seq)?;
    assemble(Scheme::FixedSplit, seq.len(), green_count, gamma, stats, threshold)
}

/// Number of positions `t ≥ 2` whose token is green under the list seeded by
/// the token at `t - 1`.
pub fn count_green_bigram(seq: &[u32], lists: &mut BigramLists) -> Result<usize> {
    let vocab = lists.key().vocab_size;
    if let Some(&bad) = seq.iter().find(|&&t| t as usize >= vocab) {
        return Err(Error::param(format!("token {bad} outside vocabulary of size {vocab}")));
    }
    let mut count = 0;
    for pair in seq.windows(2) {
        count += lists.get(pair[0])?.contains(pair[1]) as usize;
    }
    Ok(count)
}

/// Bigram-hash baseline detection with a fixed threshold.
pub fn detect_bigram(seq: &[u32], key: &WatermarkKey, tau: f64) -> Result<DetectionReport> {
    let mut lists = BigramLists::new(key)?;
    detect_bigram_with(seq, &mut lists, Threshold::Fixed(tau))
}

/// Bigram-hash baseline detection reusing a list cache.
pub fn detect_bigram_with(seq: &[u32], lists: &mut BigramLists, threshold: Threshold) -> Result<DetectionReport> {
    if seq.len() < 2 {
        return Err(Error::Undefined(format!(
            "bigram detection needs at least 2 tokens, got {}",
            seq.len()
        )));
    }
    let green_count = count_green_bigram(seq, lists)?;
    let gamma = effective_gamma(lists.key());
    let stats = diversity_stats(&seq[1..])?;
    assemble(Scheme::BigramHash, seq.len() - 1, green_count, gamma, stats, threshold)
}

/// Dispatches on the key's scheme.
pub fn detect_any(seq: &[u32], key: &WatermarkKey, threshold: Threshold) -> Result<DetectionReport> {
    match key.scheme {
        Scheme::FixedSplit => detect_with(seq, key, threshold),
        Scheme::BigramHash => detect_bigram_with(seq, &mut BigramLists::new(key)?, threshold),
    }
}

/// A key with its derived green list(s), for repeated detection.
#[derive(Debug, Clone)]
pub enum Detector {
    Fixed { green: GreenList, gamma: f64 },
    Bigram(BigramLists),
}

impl Detector {
    pub fn new(key: &WatermarkKey) -> Result<Self> {
        Ok(match key.scheme {
            Scheme::FixedSplit => Detector::Fixed {
                green: partition(key)?,
                gamma: effective_gamma(key),
            },
            Scheme::BigramHash => Detector::Bigram(BigramLists::new(key)?),
        })
    }

    pub fn detect(&mut self, seq: &[u32], threshold: Threshold) -> Result<DetectionReport> {
        match self {
            Detector::Fixed { green, gamma } => detect_with_list(seq, green, *gamma, threshold),
            Detector::Bigram(lists) => detect_bigram_with(seq, lists, threshold),
        }
    }

    /// Green count and number of scored positions.
    pub fn score(&mut self, seq: &[u32]) -> Result<(usize, usize)> {
        match self {
            Detector::Fixed { green, .. } => Ok((count_green(seq, green)?, seq.len())),
            Detector::Bigram(lists) => Ok((count_green_bigram(seq, lists)?, seq.len().saturating_sub(1))),
        }
    }

    pub fn gamma(&self) -> f64 {
        match self {
            Detector::Fixed { gamma, .. } => *gamma,
            Detector::Bigram(lists) => effective_gamma(lists.key()),
        }
    }

    /// z-statistic of `seq`, or `None` when it has too few scored positions.
    pub fn z(&mut self, seq: &[u32]) -> Result<Option<f64>> {
        let (green, scored) = self.score(seq)?;
        if scored == 0 {
            return Ok(None);
        }
        z_score(green, scored, self.gamma()).map(Some)
    }
}
