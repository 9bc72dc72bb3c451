//! Synthetic next-token distribution sources and entropy diagnostics.

use std::collections::HashMap;

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par::{self, Execution};
use crate::rng;
use crate::TokenSeq;

/// Probabilities are clipped to this floor before any logarithm.
pub const PROB_FLOOR: f64 = 1e-30;

/// Anything that maps a history to next-token logits.
///
/// Implementations must be deterministic and return `vocab_size()` finite
/// values.
pub trait NextTokenModel: Send + Sync {
    fn vocab_size(&self) -> usize;

    fn logits(&self, prompt: &[u32], prefix: &[u32]) -> Vec<f64>;
}

impl<M: NextTokenModel + ?Sized> NextTokenModel for Box<M> {
    fn vocab_size(&self) -> usize {
        (**self).vocab_size()
    }

    fn logits(&self, prompt: &[u32], prefix: &[u32]) -> Vec<f64> {
        (**self).logits(prompt, prefix)
    }
}

/// A validated probability vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::param("probability vector is empty"));
        }
        if values.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
            return Err(Error::param("probabilities must be finite and nonnegative"));
        }
        let total: f64 = values.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::param(format!("probabilities sum to {total}, not 1")));
        }
        Ok(ProbVector(values))
    }

    pub fn from_logits(logits: &[f64]) -> Self {
        ProbVector(softmax(logits))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

/// Max-subtracted softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let total: f64 = out.iter().sum();
    for p in &mut out {
        *p /= total;
    }
    out
}

pub fn l2_squared(p: &[f64]) -> f64 {
    p.iter().map(|x| x * x).sum()
}

pub fn linf(p: &[f64]) -> f64 {
    p.iter().copied().fold(0.0, f64::max)
}

/// Draws an index from `probs` with one uniform variate.
pub(crate) fn sample_index<R: RngCore + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u = rng::unit_f64(rng);
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            last_positive = i;
            acc += p;
            if u < acc {
                return i;
            }
        }
    }
    last_positive
}

/// Every token equally likely at every step.
#[derive(Debug, Clone)]
pub struct UniformLm {
    vocab_size: usize,
}

pub fn uniform_lm(vocab_size: usize) -> Result<UniformLm> {
    if vocab_size < 2 {
        return Err(Error::param(format!("uniform model needs N >= 2, got {vocab_size}")));
    }
    Ok(UniformLm { vocab_size })
}

impl NextTokenModel for UniformLm {
    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn logits(&self, _prompt: &[u32], _prefix: &[u32]) -> Vec<f64> {
        vec![0.0; self.vocab_size]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum DegenerateKind {
    /// Always the same token.
    RepeatToken(u32),
    /// `0, 1, ..., len-1, 0, 1, ...` continuing from the last history token.
    CycleAlphabet(u32),
}

/// Near-deterministic model: mass `1 - eps` on one token, the rest spread
/// evenly. `eps = 0` is allowed; the point mass is then clipped to
/// [`PROB_FLOOR`] so logits stay finite.
#[derive(Debug, Clone)]
pub struct DegenerateLm {
    kind: DegenerateKind,
    vocab_size: usize,
    eps: f64,
}

pub const DEFAULT_DEGENERATE_EPS: f64 = 1e-6;

pub fn degenerate_lm(kind: DegenerateKind, vocab_size: usize, eps: f64) -> Result<DegenerateLm> {
    if vocab_size < 2 {
        return Err(Error::param(format!("degenerate model needs N >= 2, got {vocab_size}")));
    }
    if !(0.0..1.0).contains(&eps) {
        return Err(Error::param(format!("eps must lie in [0, 1), got {eps}")));
    }
    match kind {
        DegenerateKind::RepeatToken(t) if t as usize >= vocab_size => {
            return Err(Error::param(format!("repeat token {t} outside vocabulary")))
        }
        DegenerateKind::CycleAlphabet(len) if len == 0 || len as usize > vocab_size => {
            return Err(Error::param(format!("cycle length {len} must be in [1, N]")))
        }
        _ => {}
    }
    Ok(DegenerateLm {
        kind,
        vocab_size,
        eps,
    })
}

impl DegenerateLm {
    /// True when `eps = 0`: likelihoods of every other token are clipped.
    pub fn is_exact_point_mass(&self) -> bool {
        self.eps == 0.0
    }

    fn target(&self, history_last: Option<u32>) -> u32 {
        match self.kind {
            DegenerateKind::RepeatToken(t) => t,
            DegenerateKind::CycleAlphabet(len) => match history_last {
                Some(last) => (last + 1) % len,
                None => 0,
            },
        }
    }
}

impl NextTokenModel for DegenerateLm {
    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn logits(&self, prompt: &[u32], prefix: &[u32]) -> Vec<f64> {
        let last = prefix.last().or(prompt.last()).copied();
        let target = self.target(last) as usize;
        let rest = (self.eps / (self.vocab_size - 1) as f64).max(PROB_FLOOR).ln();
        let mut out = vec![rest; self.vocab_size];
        out[target] = (1.0 - self.eps).max(PROB_FLOOR).ln();
        out
    }
}

#[derive(Debug, Clone, Default)]
struct ContextCounts {
    total: u64,
    next: HashMap<u32, u64>,
}

/// Add-alpha smoothed n-gram model conditioned on the last `order` tokens.
///
/// Conditional probabilities are `(count(ctx, v) + alpha) / (count(ctx) +
/// alpha * N)` on the longest suffix of the history that occurred in the
/// training corpus.
#[derive(Debug, Clone)]
pub struct NgramLm {
    order: usize,
    alpha: f64,
    vocab_size: usize,
    contexts: HashMap<Vec<u32>, ContextCounts>,
}

pub fn ngram_fit(corpus: &[TokenSeq], order: usize, alpha: f64, vocab_size: usize) -> Result<NgramLm> {
    if order == 0 {
        return Err(Error::param("n-gram order must be >= 1"));
    }
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::param(format!("smoothing alpha must be > 0, got {alpha}")));
    }
    if vocab_size < 2 {
        return Err(Error::param(format!("n-gram model needs N >= 2, got {vocab_size}")));
    }
    if corpus.iter().all(|s| s.is_empty()) {
        return Err(Error::Data("n-gram corpus is empty".into()));
    }
    let mut contexts: HashMap<Vec<u32>, ContextCounts> = HashMap::new();
    for seq in corpus {
        if let Some(&bad) = seq.iter().find(|&&t| t as usize >= vocab_size) {
            return Err(Error::Data(format!("corpus token {bad} outside vocabulary of size {vocab_size}")));
        }
        for (i, &tok) in seq.iter().enumerate() {
            for len in 0..=order.min(i) {
                let entry = contexts.entry(seq[i - len..i].to_vec()).or_default();
                entry.total += 1;
                *entry.next.entry(tok).or_default() += 1;
            }
        }
    }
    Ok(NgramLm {
        order,
        alpha,
        vocab_size,
        contexts,
    })
}

impl NgramLm {
    pub fn order(&self) -> usize {
        self.order
    }

    fn context_for<'a>(&'a self, history: &[u32]) -> &'a ContextCounts {
        let max_len = self.order.min(history.len());
        (0..=max_len)
            .rev()
            .find_map(|len| self.contexts.get(&history[history.len() - len..]))
            .expect("the empty context is always observed")
    }
}

impl NextTokenModel for NgramLm {
    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn logits(&self, prompt: &[u32], prefix: &[u32]) -> Vec<f64> {
        let mut history: Vec<u32> = Vec::with_capacity(self.order);
        let tail = prefix.len().min(self.order);
        let from_prompt = self.order - tail;
        history.extend_from_slice(&prompt[prompt.len().saturating_sub(from_prompt)..]);
        history.extend_from_slice(&prefix[prefix.len() - tail..]);

        let ctx = self.context_for(&history);
        let log_denom = (ctx.total as f64 + self.alpha * self.vocab_size as f64).ln();
        let unseen = self.alpha.ln() - log_denom;
        let mut out = vec![unseen; self.vocab_size];
        for (&tok, &count) in &ctx.next {
            out[tok as usize] = (count as f64 + self.alpha).ln() - log_denom;
        }
        out
    }
}

/// Corpus from a fixed random second-order source: each context prefers a
/// handful of hashed successors with Zipf weights, mixed with a Zipf
/// unigram background. Used to fit the trigram surrogate.
pub fn synthetic_corpus(vocab_size: usize, tokens: usize, doc_len: usize, seed: u64) -> Result<Vec<TokenSeq>> {
    if vocab_size < 2 || doc_len < 1 {
        return Err(Error::param("synthetic corpus needs N >= 2 and doc_len >= 1"));
    }
    const SUCCESSORS: usize = 12;
    const BACKGROUND: f64 = 0.2;
    let zipf = |k: usize| -> Vec<f64> {
        let w: Vec<f64> = (1..=k).map(|i| 1.0 / i as f64).collect();
        let s: f64 = w.iter().sum();
        w.into_iter().map(|x| x / s).collect()
    };
    let succ_weights = zipf(SUCCESSORS);
    let unigram = zipf(vocab_size);
    let mut stream = rng::from_u64(seed);
    let mut docs = Vec::new();
    let mut remaining = tokens;
    while remaining > 0 {
        let len = remaining.min(doc_len);
        let mut doc: TokenSeq = Vec::with_capacity(len);
        for _ in 0..len {
            let tok = if doc.len() < 2 || rng::unit_f64(&mut stream) < BACKGROUND {
                sample_index(&unigram, &mut stream) as u32
            } else {
                let a = doc[doc.len() - 2];
                let b = doc[doc.len() - 1];
                let slot = sample_index(&succ_weights, &mut stream);
                let h = rng::derive_seed(&[
                    &seed.to_le_bytes(),
                    &a.to_le_bytes(),
                    &b.to_le_bytes(),
                    &(slot as u32).to_le_bytes(),
                ]);
                (u64::from_le_bytes(h[..8].try_into().unwrap()) % vocab_size as u64) as u32
            };
            doc.push(tok);
        }
        remaining -= len;
        docs.push(doc);
    }
    Ok(docs)
}

/// Rollout statistics of `||p_t||^2` and `||p_t||_inf` under the
/// un-watermarked model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntropyReport {
    /// Mean over rollouts of `(1/n) sum_t ||p_t||^2`.
    pub xi_hat: f64,
    pub xi_se: f64,
    /// Largest `||p_t||^2` seen at any step of any rollout.
    pub max_l2: f64,
    /// Mean over all steps of `||p_t||_inf`.
    pub mean_linf: f64,
    pub mean_linf_se: f64,
    pub rollouts: usize,
    pub horizon: usize,
}

struct Rollout {
    tokens: TokenSeq,
    mean_l2: f64,
    max_l2: f64,
    mean_linf: f64,
}

fn rollout<M: NextTokenModel + ?Sized>(model: &M, prompt: &[u32], horizon: usize, seed: u64, index: usize) -> Rollout {
    let mut stream = rng::trial_rng(seed, "entropy-rollout", index as u64);
    let mut tokens = Vec::with_capacity(horizon);
    let (mut sum_l2, mut max_l2, mut sum_linf) = (0.0, 0.0f64, 0.0);
    for _ in 0..horizon {
        let p = softmax(&model.logits(prompt, &tokens));
        let l2 = l2_squared(&p);
        sum_l2 += l2;
        max_l2 = max_l2.max(l2);
        sum_linf += linf(&p);
        tokens.push(sample_index(&p, &mut stream) as u32);
    }
    Rollout {
        tokens,
        mean_l2: sum_l2 / horizon as f64,
        max_l2,
        mean_linf: sum_linf / horizon as f64,
    }
}

fn mean_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Estimates the on-average entropy parameter by rolling out `model`.
pub fn entropy_diagnostics<M: NextTokenModel + ?Sized>(
    model: &M,
    prompt: &[u32],
    horizon: usize,
    rollouts: usize,
    seed: u64,
) -> Result<EntropyReport> {
    entropy_diagnostics_with_rollouts(model, prompt, horizon, rollouts, seed, Execution::default())
        .map(|(report, _)| report)
}

/// As [`entropy_diagnostics`], also returning the sampled rollouts.
pub fn entropy_diagnostics_with_rollouts<M: NextTokenModel + ?Sized>(
    model: &M,
    prompt: &[u32],
    horizon: usize,
    rollouts: usize,
    seed: u64,
    exec: Execution,
) -> Result<(EntropyReport, Vec<TokenSeq>)> {
    if horizon == 0 || rollouts == 0 {
        return Err(Error::param("entropy diagnostics need horizon >= 1 and rollouts >= 1"));
    }
    let runs = par::map_trials(exec, rollouts, |i| rollout(model, prompt, horizon, seed, i));
    let per_l2: Vec<f64> = runs.iter().map(|r| r.mean_l2).collect();
    let per_linf: Vec<f64> = runs.iter().map(|r| r.mean_linf).collect();
    let (xi_hat, xi_se) = mean_se(&per_l2);
    let (mean_linf, mean_linf_se) = mean_se(&per_linf);
    let report = EntropyReport {
        xi_hat,
        xi_se,
        max_l2: runs.iter().map(|r| r.max_l2).fold(0.0, f64::max),
        mean_linf,
        mean_linf_se,
        rollouts,
        horizon,
    };
    Ok((report, runs.into_iter().map(|r| r.tokens).collect()))
}
