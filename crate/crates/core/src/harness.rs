//! Monte Carlo experiment driver.
//!
//! Three experiments share one config format:
//! `type1` runs un-watermarked text through random keys, `type2` measures
//! detection power on watermarked text, and `robustness` attacks
//! watermarked text at several edit rates and reports ROC/AUC together with
//! tallies of robustness-bound violations.
//!
//! Trial `i` of every arm draws its key, generation seed and attack stream
//! from `(seed, purpose, i)`, so reports do not depend on thread count.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::attacks::{
    edit_distance, greenaware_attack, greenaware_bigram_attack, random_edit_attack, random_swap_attack, rate_to_budget,
    AttackResult, EditMix,
};
use crate::certificates::{
    certified_edit_budget, expected_green_lower_bound, expected_z_lower_bound, implied_kappa, scheme_penalty,
    PenaltyBound,
};
use crate::detector::{adaptive_threshold, diversity_stats, z_score, Detector, DEFAULT_TAU};
use crate::error::{Error, Result};
use crate::io;
use crate::lm::{
    degenerate_lm, l2_squared, ngram_fit, softmax, synthetic_corpus, uniform_lm, DegenerateKind, NextTokenModel,
    DEFAULT_DEGENERATE_EPS,
};
use crate::par::{self, Execution};
use crate::partition::{keygen, Scheme, WatermarkKey};
use crate::rng::trial_rng;
use crate::watermarker::{generate, Decoding, GenerationConfig};
use crate::{TokenSeq, VERSION};

/// Serde through `Display`/`FromStr`.
mod as_string {
    use serde::{de, Deserialize, Deserializer, Serializer};
    use std::fmt::Display;
    use std::str::FromStr;

    pub fn serialize<T: Display, S: Serializer>(value: &T, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(value)
    }

    pub fn deserialize<'de, T, D>(d: D) -> Result<T, D::Error>
    where
        T: FromStr,
        T::Err: Display,
        D: Deserializer<'de>,
    {
        String::deserialize(d)?.parse().map_err(de::Error::custom)
    }
}

/// Which synthetic model to sample from.
#[derive(Debug, Clone, PartialEq)]
pub enum ModelSpec {
    Uniform { vocab: usize },
    Repeat { vocab: usize, token: u32, eps: f64 },
    Cycle { vocab: usize, len: u32, eps: f64 },
    /// Fitted on a corpus file (blank-line separated documents).
    Ngram { path: PathBuf, order: usize, alpha: f64, vocab: usize },
    /// Fitted on [`synthetic_corpus`] output.
    Surrogate { vocab: usize, order: usize, alpha: f64, tokens: usize, seed: u64 },
}

const SURROGATE_DOC_LEN: usize = 500;

impl ModelSpec {
    pub fn vocab_size(&self) -> usize {
        match *self {
            ModelSpec::Uniform { vocab }
            | ModelSpec::Repeat { vocab, .. }
            | ModelSpec::Cycle { vocab, .. }
            | ModelSpec::Ngram { vocab, .. }
            | ModelSpec::Surrogate { vocab, .. } => vocab,
        }
    }

    pub fn build(&self) -> Result<Box<dyn NextTokenModel>> {
        Ok(match self {
            ModelSpec::Uniform { vocab } => Box::new(uniform_lm(*vocab)?),
            ModelSpec::Repeat { vocab, token, eps } => {
                Box::new(degenerate_lm(DegenerateKind::RepeatToken(*token), *vocab, *eps)?)
            }
            ModelSpec::Cycle { vocab, len, eps } => {
                Box::new(degenerate_lm(DegenerateKind::CycleAlphabet(*len), *vocab, *eps)?)
            }
            ModelSpec::Ngram { path, order, alpha, vocab } => {
                let corpus = io::read_corpus(path)?;
                Box::new(ngram_fit(&corpus, *order, *alpha, *vocab)?)
            }
            ModelSpec::Surrogate { vocab, order, alpha, tokens, seed } => {
                let corpus = synthetic_corpus(*vocab, *tokens, SURROGATE_DOC_LEN, *seed)?;
                Box::new(ngram_fit(&corpus, *order, *alpha, *vocab)?)
            }
        })
    }
}

impl fmt::Display for ModelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModelSpec::Uniform { vocab } => write!(f, "uniform:{vocab}"),
            ModelSpec::Repeat { vocab, token, eps } => write!(f, "repeat:{vocab}:{token}:{eps:e}"),
            ModelSpec::Cycle { vocab, len, eps } => write!(f, "cycle:{vocab}:{len}:{eps:e}"),
            ModelSpec::Ngram { path, order, alpha, vocab } => {
                write!(f, "ngram:{}:order={order}:alpha={alpha}:vocab={vocab}", path.display())
            }
            ModelSpec::Surrogate { vocab, order, alpha, tokens, seed } => {
                write!(f, "surrogate:{vocab}:order={order}:alpha={alpha}:tokens={tokens}:seed={seed}")
            }
        }
    }
}

fn parse_field<T: FromStr>(what: &str, value: &str) -> Result<T>
where
    T::Err: fmt::Display,
{
    value
        .parse()
        .map_err(|e| Error::parse("model spec", format!("{what}={value:?}: {e}")))
}

impl FromStr for ModelSpec {
    type Err = Error;

    /// `uniform:N`, `repeat:N:TOKEN[:EPS]`, `cycle:N:LEN[:EPS]`,
    /// `ngram:PATH[:order=O][:alpha=A]:vocab=N`,
    /// `surrogate:N[:order=O][:alpha=A][:tokens=T][:seed=S]`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(':').collect();
        let positional = |i: usize, what: &str| -> Result<&str> {
            parts
                .get(i)
                .copied()
                .ok_or_else(|| Error::parse("model spec", format!("{s:?} is missing {what}")))
        };
        let options = |from: usize| -> Result<Vec<(&str, &str)>> {
            parts[from.min(parts.len())..]
                .iter()
                .map(|p| {
                    p.split_once('=')
                        .ok_or_else(|| Error::parse("model spec", format!("expected key=value, got {p:?}")))
                })
                .collect()
        };
        let eps_at = |i: usize| -> Result<f64> {
            parts.get(i).map_or(Ok(DEFAULT_DEGENERATE_EPS), |v| parse_field("eps", v))
        };
        match parts[0] {
            "uniform" if parts.len() == 2 => Ok(ModelSpec::Uniform {
                vocab: parse_field("vocab", positional(1, "N")?)?,
            }),
            "repeat" if (3..=4).contains(&parts.len()) => Ok(ModelSpec::Repeat {
                vocab: parse_field("vocab", positional(1, "N")?)?,
                token: parse_field("token", positional(2, "token")?)?,
                eps: eps_at(3)?,
            }),
            "cycle" if (3..=4).contains(&parts.len()) => Ok(ModelSpec::Cycle {
                vocab: parse_field("vocab", positional(1, "N")?)?,
                len: parse_field("len", positional(2, "cycle length")?)?,
                eps: eps_at(3)?,
            }),
            "ngram" => {
                let path = PathBuf::from(positional(1, "corpus path")?);
                let (mut order, mut alpha, mut vocab) = (2, 0.01, None);
                for (k, v) in options(2)? {
                    match k {
                        "order" => order = parse_field(k, v)?,
                        "alpha" => alpha = parse_field(k, v)?,
                        "vocab" => vocab = Some(parse_field(k, v)?),
                        _ => return Err(Error::parse("model spec", format!("unknown ngram option {k:?}"))),
                    }
                }
                let vocab = vocab.ok_or_else(|| Error::parse("model spec", "ngram needs vocab=N"))?;
                Ok(ModelSpec::Ngram { path, order, alpha, vocab })
            }
            "surrogate" => {
                let vocab = parse_field("vocab", positional(1, "N")?)?;
                let (mut order, mut alpha, mut tokens, mut seed) = (2, 0.01, 200_000, 7);
                for (k, v) in options(2)? {
                    match k {
                        "order" => order = parse_field(k, v)?,
                        "alpha" => alpha = parse_field(k, v)?,
                        "tokens" => tokens = parse_field(k, v)?,
                        "seed" => seed = parse_field(k, v)?,
                        _ => return Err(Error::parse("model spec", format!("unknown surrogate option {k:?}"))),
                    }
                }
                Ok(ModelSpec::Surrogate { vocab, order, alpha, tokens, seed })
            }
            _ => Err(Error::parse("model spec", format!("unrecognized model {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Experiment {
    Type1,
    Type2,
    Robustness,
}

impl fmt::Display for Experiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Experiment::Type1 => "type1",
            Experiment::Type2 => "type2",
            Experiment::Robustness => "robustness",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttackKind {
    /// Random atomic edits drawn from the mix.
    #[default]
    Random,
    /// Random swaps, two edits each.
    Swap,
    /// Green tokens replaced by red ones, with the key known.
    GreenAware,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackSpec {
    #[serde(default)]
    pub kind: AttackKind,
    #[serde(default, with = "as_string")]
    pub mix: EditMix,
    /// Edit counts are `round(rate * n)`.
    #[serde(default = "default_rates")]
    pub rates: Vec<f64>,
}

fn default_rates() -> Vec<f64> {
    vec![0.0, 0.1, 0.3, 0.5]
}

impl Default for AttackSpec {
    fn default() -> Self {
        AttackSpec {
            kind: AttackKind::Random,
            mix: EditMix::REPLACE,
            rates: default_rates(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: Experiment,
    #[serde(with = "as_string")]
    pub model: ModelSpec,
    #[serde(default = "default_schemes")]
    pub schemes: Vec<Scheme>,
    pub gamma: f64,
    pub delta: f64,
    /// Generated tokens per sequence.
    pub n: usize,
    #[serde(default = "default_tau")]
    pub tau: f64,
    /// Levels for the input-adaptive threshold.
    #[serde(default)]
    pub alphas: Vec<f64>,
    /// Sequences per arm.
    pub trials: usize,
    #[serde(default = "default_decoding", with = "as_string")]
    pub decoding: Decoding,
    #[serde(default)]
    pub prompt: TokenSeq,
    #[serde(default)]
    pub attack: AttackSpec,
    /// False-positive rates at which TPR is read off the ROC.
    #[serde(default = "default_fpr_points")]
    pub fpr_points: Vec<f64>,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub csv: Option<PathBuf>,
}

fn default_schemes() -> Vec<Scheme> {
    vec![Scheme::FixedSplit, Scheme::BigramHash]
}

fn default_tau() -> f64 {
    DEFAULT_TAU
}

fn default_decoding() -> Decoding {
    Decoding::Multinomial
}

fn default_fpr_points() -> Vec<f64> {
    vec![0.01, 0.05, 0.1]
}

impl ExperimentConfig {
    /// Desk-scale defaults: N = 1000, n = 200, 500 sequences per arm.
    pub fn desk_scale(experiment: Experiment, model: ModelSpec, seed: u64) -> Self {
        ExperimentConfig {
            experiment,
            model,
            schemes: default_schemes(),
            gamma: 0.5,
            delta: 2.0,
            n: 200,
            tau: DEFAULT_TAU,
            alphas: vec![0.1, 0.01],
            trials: 500,
            decoding: Decoding::Multinomial,
            prompt: Vec::new(),
            attack: AttackSpec::default(),
            fpr_points: default_fpr_points(),
            seed,
            output: None,
            csv: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 || self.n == 0 {
            return Err(Error::param("trials and n must be >= 1"));
        }
        if self.schemes.is_empty() {
            return Err(Error::param("at least one scheme is required"));
        }
        if self.experiment == Experiment::Robustness && self.attack.rates.is_empty() {
            return Err(Error::param("robustness sweep needs at least one attack rate"));
        }
        if self.attack.rates.iter().any(|r| !(r.is_finite() && *r >= 0.0)) {
            return Err(Error::param("attack rates must be >= 0"));
        }
        if self.alphas.iter().any(|a| !(*a > 0.0 && *a < 1.0)) {
            return Err(Error::param("adaptive alphas must lie in (0, 1)"));
        }
        if self.fpr_points.iter().any(|f| !(0.0..=1.0).contains(f)) {
            return Err(Error::param("fpr points must lie in [0, 1]"));
        }
        self.attack.mix.validate()?;
        self.decoding.validate()?;
        io::check_vocab(&self.prompt, self.model.vocab_size())?;
        // surface bad gamma/delta/vocab before any work
        for &scheme in &self.schemes {
            WatermarkKey::new(scheme, self.model.vocab_size(), self.gamma, self.delta, [0; 32])?;
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let config: ExperimentConfig = toml::from_str(&text).map_err(|e| Error::parse("experiment config", e))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

/// An empirical rate with the counts behind it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rate {
    pub value: f64,
    pub count: usize,
    pub trials: usize,
}

impl Rate {
    pub fn new(count: usize, trials: usize) -> Self {
        Rate {
            value: if trials == 0 { 0.0 } else { count as f64 / trials as f64 },
            count,
            trials,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    /// Standard error of the mean.
    pub se: f64,
    pub min: f64,
    pub q05: f64,
    pub q25: f64,
    pub median: f64,
    pub q75: f64,
    pub q95: f64,
    pub max: f64,
}

/// Linear-interpolated quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

impl Summary {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let se = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0) / n).sqrt()
        } else {
            0.0
        };
        Some(Summary {
            mean,
            se,
            min: sorted[0],
            q05: quantile(&sorted, 0.05),
            q25: quantile(&sorted, 0.25),
            median: quantile(&sorted, 0.5),
            q75: quantile(&sorted, 0.75),
            q95: quantile(&sorted, 0.95),
            max: sorted[sorted.len() - 1],
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    /// Detect when `z >= threshold`.
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

/// ROC from pooled scores by a descending threshold sweep. Tied scores are
/// stepped together, so the curve starts at (0, 0) and ends at (1, 1).
pub fn roc_curve(positives: &[f64], negatives: &[f64]) -> Result<Vec<RocPoint>> {
    if positives.is_empty() || negatives.is_empty() {
        return Err(Error::Undefined("ROC needs both positive and negative scores".into()));
    }
    let mut pooled: Vec<(f64, bool)> = positives
        .iter()
        .map(|&z| (z, true))
        .chain(negatives.iter().map(|&z| (z, false)))
        .collect();
    pooled.sort_by(|a, b| b.0.total_cmp(&a.0));
    let (np, nn) = (positives.len() as f64, negatives.len() as f64);
    let mut points = vec![RocPoint {
        threshold: f64::INFINITY,
        fpr: 0.0,
        tpr: 0.0,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < pooled.len() {
        let threshold = pooled[i].0;
        while i < pooled.len() && pooled[i].0 == threshold {
            if pooled[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(RocPoint {
            threshold,
            fpr: fp as f64 / nn,
            tpr: tp as f64 / np,
        });
    }
    Ok(points)
}

/// Trapezoid-rule area under a ROC curve.
pub fn auc(points: &[RocPoint]) -> f64 {
    points
        .windows(2)
        .map(|w| (w[1].fpr - w[0].fpr) * (w[1].tpr + w[0].tpr) / 2.0)
        .sum()
}

/// Best TPR among thresholds whose FPR does not exceed `fpr`.
pub fn tpr_at_fpr(points: &[RocPoint], fpr: f64) -> f64 {
    points
        .iter()
        .filter(|p| p.fpr <= fpr + 1e-12)
        .map(|p| p.tpr)
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OperatingPoint {
    pub fpr: f64,
    pub tpr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocReport {
    pub auc: f64,
    pub positives: usize,
    pub negatives: usize,
    pub tpr_at_fpr: Vec<OperatingPoint>,
    pub points: Vec<RocPoint>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdaptiveRate {
    pub alpha: f64,
    pub rate: Rate,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiversitySummary {
    pub mean_v: f64,
    pub mean_c_max: f64,
    /// Mean `V` is at least half the sequence length: text is so repetitive
    /// that the Type I tail bound says nothing.
    pub low_diversity: bool,
}

/// Type II checks against the expected-detection lower bounds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerCheck {
    /// Mean `||p_t||^2` of the un-watermarked model along the sampled text.
    pub xi_hat: f64,
    pub kappa_implied: f64,
    pub expected_green_lower_bound: f64,
    pub green_mean: f64,
    pub green_se: f64,
    /// `green_mean >= bound - 3 se`.
    pub green_pass: bool,
    pub expected_z_lower_bound: f64,
    pub z_mean: f64,
    pub z_se: f64,
    /// `z_mean >= bound - 3 se`.
    pub z_pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmReport {
    pub name: String,
    pub scheme: Scheme,
    pub watermarked: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub attack_rate: Option<f64>,
    pub attacked_eta: usize,
    pub trials: usize,
    /// Trials with no scored position after the attack.
    pub undefined: usize,
    pub z: Option<Summary>,
    pub green_count: Option<Summary>,
    /// FPR for un-watermarked arms, TPR for watermarked ones.
    pub detected_at_tau: Rate,
    pub adaptive: Vec<AdaptiveRate>,
    pub diversity: DiversitySummary,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub roc: Option<RocReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub power: Option<PowerCheck>,
}

/// Robustness-bound tallies over attacked watermarked sequences.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct BoundTally {
    /// Pairs `(y, u)` where the bound applies (`edit_distance < n`).
    pub checked: usize,
    pub skipped: usize,
    /// `z_u < z_y - penalty` under the published penalty.
    pub stated_violations: usize,
    /// Same with the penalty in z units.
    pub normalized_violations: usize,
    /// Pairs with `edit_distance <= certified_eta` and `y` detected.
    pub stated_certified: usize,
    pub stated_flips: usize,
    pub normalized_certified: usize,
    pub normalized_flips: usize,
}

impl BoundTally {
    fn add(&mut self, other: &BoundTally) {
        self.checked += other.checked;
        self.skipped += other.skipped;
        self.stated_violations += other.stated_violations;
        self.normalized_violations += other.normalized_violations;
        self.stated_certified += other.stated_certified;
        self.stated_flips += other.stated_flips;
        self.normalized_certified += other.normalized_certified;
        self.normalized_flips += other.normalized_flips;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub arm: String,
    pub trial: usize,
    pub scheme: Scheme,
    pub n: usize,
    pub green_count: usize,
    pub z: Option<f64>,
    pub attacked_eta: usize,
    pub decision: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub version: String,
    pub experiment: Experiment,
    pub seed: u64,
    pub config: ExperimentConfig,
    pub arms: Vec<ArmReport>,
    pub bound_checks: BoundTally,
    /// Per-trial rows for the CSV; not part of the report file.
    #[serde(skip)]
    pub trials: Vec<TrialRecord>,
}

impl EvalReport {
    pub fn arm(&self, name: &str) -> Option<&ArmReport> {
        self.arms.iter().find(|a| a.name == name)
    }

    pub fn to_json(&self) -> String {
        let mut text = serde_json::to_string_pretty(self).expect("report serializes");
        text.push('\n');
        text
    }

    pub fn trials_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["arm", "trial", "scheme", "n", "green_count", "z", "attacked_eta", "decision"])
            .map_err(|e| Error::parse("csv", e))?;
        for r in &self.trials {
            w.write_record([
                r.arm.clone(),
                r.trial.to_string(),
                r.scheme.to_string(),
                r.n.to_string(),
                r.green_count.to_string(),
                r.z.map_or_else(String::new, |z| z.to_string()),
                r.attacked_eta.to_string(),
                r.decision.to_string(),
            ])
            .map_err(|e| Error::parse("csv", e))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::parse("csv", e))?;
        Ok(String::from_utf8(bytes).expect("csv is utf-8"))
    }
}

/// Writes the report as pretty JSON.
pub fn emit_report(report: &EvalReport, path: impl AsRef<Path>) -> Result<()> {
    io::write_text(path, &report.to_json())
}

pub fn emit_trials_csv(report: &EvalReport, path: impl AsRef<Path>) -> Result<()> {
    io::write_text(path, &report.trials_csv()?)
}

/// Score of one sequence under one key.
#[derive(Debug, Clone, Copy)]
struct Scored {
    n: usize,
    green: usize,
    z: Option<f64>,
    /// Adaptive decisions, one per configured alpha.
    adaptive: [bool; MAX_ALPHAS],
    v: f64,
    c_max: usize,
}

const MAX_ALPHAS: usize = 8;

fn score(detector: &mut Detector, seq: &[u32], alphas: &[f64]) -> Result<Scored> {
    let (green, n) = detector.score(seq)?;
    let gamma = detector.gamma();
    let mut out = Scored {
        n,
        green,
        z: None,
        adaptive: [false; MAX_ALPHAS],
        v: 0.0,
        c_max: 0,
    };
    if n == 0 {
        return Ok(out);
    }
    let z = z_score(green, n, gamma)?;
    out.z = Some(z);
    let scored = match detector {
        Detector::Fixed { .. } => seq,
        Detector::Bigram(_) => &seq[1..],
    };
    let stats = diversity_stats(scored)?;
    out.v = stats.v;
    out.c_max = stats.c_max;
    for (i, &alpha) in alphas.iter().enumerate() {
        out.adaptive[i] = z > adaptive_threshold(&stats, gamma, alpha)?;
    }
    Ok(out)
}

fn detected(s: &Scored, tau: f64) -> bool {
    s.z.is_some_and(|z| z > tau)
}

struct Context<'a> {
    config: &'a ExperimentConfig,
    model: &'a dyn NextTokenModel,
    exec: Execution,
}

impl Context<'_> {
    fn key(&self, scheme: Scheme, trial: usize) -> Result<WatermarkKey> {
        let c = self.config;
        let mut r = trial_rng(c.seed, &format!("key/{scheme}"), trial as u64);
        keygen(c.gamma, c.delta, scheme, self.model.vocab_size(), &mut r)
    }

    fn generate(&self, key: Option<&WatermarkKey>, stream: &str, trial: usize) -> Result<TokenSeq> {
        let c = self.config;
        let seed = trial_rng(c.seed, stream, trial as u64).next_u64();
        let gen = GenerationConfig::new(c.n, c.decoding, seed)?;
        generate(self.model, &c.prompt, key, &gen)
    }

    fn null_sequence(&self, trial: usize) -> Result<TokenSeq> {
        self.generate(None, "generate/null", trial)
    }

    fn watermarked_sequence(&self, key: &WatermarkKey, trial: usize) -> Result<TokenSeq> {
        self.generate(Some(key), &format!("generate/{}", key.scheme), trial)
    }

    /// Mean `||p_t||^2` of the un-watermarked model along `seq`.
    fn xi_along(&self, seq: &[u32]) -> f64 {
        let total: f64 = (0..seq.len())
            .map(|t| l2_squared(&softmax(&self.model.logits(&self.config.prompt, &seq[..t]))))
            .sum();
        total / seq.len() as f64
    }
}

fn collect<T>(results: Vec<Result<T>>) -> Result<Vec<T>> {
    results.into_iter().collect()
}

fn summarize_arm(
    config: &ExperimentConfig,
    name: String,
    scheme: Scheme,
    watermarked: bool,
    attack: Option<(f64, usize)>,
    scores: &[Scored],
    records: &mut Vec<TrialRecord>,
) -> ArmReport {
    let zs: Vec<f64> = scores.iter().filter_map(|s| s.z).collect();
    let greens: Vec<f64> = scores.iter().map(|s| s.green as f64).collect();
    let eta = attack.map_or(0, |a| a.1);
    for (trial, s) in scores.iter().enumerate() {
        records.push(TrialRecord {
            arm: name.clone(),
            trial,
            scheme,
            n: s.n,
            green_count: s.green,
            z: s.z,
            attacked_eta: eta,
            decision: detected(s, config.tau) as u8,
        });
    }
    let trials = scores.len();
    let mean_v = scores.iter().map(|s| s.v).sum::<f64>() / trials as f64;
    let mean_n = scores.iter().map(|s| s.n as f64).sum::<f64>() / trials as f64;
    ArmReport {
        name,
        scheme,
        watermarked,
        attack_rate: attack.map(|a| a.0),
        attacked_eta: eta,
        trials,
        undefined: trials - zs.len(),
        z: Summary::of(&zs),
        green_count: Summary::of(&greens),
        detected_at_tau: Rate::new(scores.iter().filter(|s| detected(s, config.tau)).count(), trials),
        adaptive: config
            .alphas
            .iter()
            .enumerate()
            .map(|(i, &alpha)| AdaptiveRate {
                alpha,
                rate: Rate::new(scores.iter().filter(|s| s.adaptive[i]).count(), trials),
            })
            .collect(),
        diversity: DiversitySummary {
            mean_v,
            mean_c_max: scores.iter().map(|s| s.c_max as f64).sum::<f64>() / trials as f64,
            low_diversity: mean_v >= 0.5 * mean_n,
        },
        roc: None,
        power: None,
    }
}

fn check_alphas(config: &ExperimentConfig) -> Result<()> {
    if config.alphas.len() > MAX_ALPHAS {
        return Err(Error::param(format!("at most {MAX_ALPHAS} adaptive alphas are supported")));
    }
    Ok(())
}

fn finish(config: &ExperimentConfig, arms: Vec<ArmReport>, bound_checks: BoundTally, trials: Vec<TrialRecord>) -> EvalReport {
    EvalReport {
        version: VERSION.to_string(),
        experiment: config.experiment,
        seed: config.seed,
        config: config.clone(),
        arms,
        bound_checks,
        trials,
    }
}

/// Null sequences scored under fresh random keys.
pub fn run_type1(config: &ExperimentConfig, exec: Execution) -> Result<EvalReport> {
    config.validate()?;
    check_alphas(config)?;
    let model = config.model.build()?;
    let cx = Context {
        config,
        model: model.as_ref(),
        exec,
    };
    let mut arms = Vec::new();
    let mut records = Vec::new();
    for &scheme in &config.schemes {
        let scores = collect(par::map_trials(cx.exec, config.trials, |i| {
            let key = cx.key(scheme, i)?;
            let seq = cx.null_sequence(i)?;
            score(&mut Detector::new(&key)?, &seq, &config.alphas)
        }))?;
        arms.push(summarize_arm(config, format!("null/{scheme}"), scheme, false, None, &scores, &mut records));
    }
    Ok(finish(config, arms, BoundTally::default(), records))
}

/// Watermarked sequences, with the detection rate and the expected-score
/// lower bounds.
pub fn run_type2(config: &ExperimentConfig, exec: Execution) -> Result<EvalReport> {
    config.validate()?;
    check_alphas(config)?;
    let model = config.model.build()?;
    let cx = Context {
        config,
        model: model.as_ref(),
        exec,
    };
    let mut arms = Vec::new();
    let mut records = Vec::new();
    for &scheme in &config.schemes {
        let runs = collect(par::map_trials(cx.exec, config.trials, |i| {
            let key = cx.key(scheme, i)?;
            let seq = cx.watermarked_sequence(&key, i)?;
            let xi = cx.xi_along(&seq);
            Ok((score(&mut Detector::new(&key)?, &seq, &config.alphas)?, xi))
        }))?;
        let scores: Vec<Scored> = runs.iter().map(|r| r.0).collect();
        let mut arm = summarize_arm(config, format!("watermarked/{scheme}"), scheme, true, None, &scores, &mut records);
        arm.power = power_check(config, &runs, scheme)?;
        arms.push(arm);
    }
    Ok(finish(config, arms, BoundTally::default(), records))
}

fn power_check(config: &ExperimentConfig, runs: &[(Scored, f64)], scheme: Scheme) -> Result<Option<PowerCheck>> {
    let zs: Vec<f64> = runs.iter().filter_map(|r| r.0.z).collect();
    if zs.len() != runs.len() || runs.is_empty() {
        return Ok(None);
    }
    let n = match scheme {
        Scheme::FixedSplit => config.n,
        Scheme::BigramHash => config.n - 1,
    };
    let gamma = crate::detector::effective_gamma(&WatermarkKey::new(
        scheme,
        config.model.vocab_size(),
        config.gamma,
        config.delta,
        [0; 32],
    )?);
    let xi_hat = runs.iter().map(|r| r.1).sum::<f64>() / runs.len() as f64;
    let greens: Vec<f64> = runs.iter().map(|r| r.0.green as f64).collect();
    let g = Summary::of(&greens).expect("non-empty");
    let z = Summary::of(&zs).expect("non-empty");
    let green_bound = expected_green_lower_bound(n, gamma, config.delta, xi_hat);
    let kappa = implied_kappa(gamma, config.delta, xi_hat);
    let z_bound = expected_z_lower_bound(n, gamma, config.delta, kappa);
    Ok(Some(PowerCheck {
        xi_hat,
        kappa_implied: kappa,
        expected_green_lower_bound: green_bound,
        green_mean: g.mean,
        green_se: g.se,
        green_pass: g.mean >= green_bound - 3.0 * g.se,
        expected_z_lower_bound: z_bound,
        z_mean: z.mean,
        z_se: z.se,
        z_pass: z.mean >= z_bound - 3.0 * z.se,
    }))
}

fn apply_attack<R: RngCore + ?Sized>(
    spec: &AttackSpec,
    seq: &[u32],
    eta: usize,
    detector: &mut Detector,
    vocab_size: usize,
    rng: &mut R,
) -> Result<AttackResult> {
    match spec.kind {
        AttackKind::Random => random_edit_attack(seq, eta, spec.mix, vocab_size, rng),
        AttackKind::Swap => Ok(random_swap_attack(seq, eta, rng)),
        AttackKind::GreenAware => match detector {
            Detector::Fixed { green, .. } => greenaware_attack(seq, green, eta, rng),
            Detector::Bigram(lists) => greenaware_bigram_attack(seq, lists, eta, rng),
        },
    }
}

/// Checks the robustness penalty and certificate for one attacked pair.
fn check_pair(
    scheme: Scheme,
    gamma: f64,
    tau: f64,
    original: &Scored,
    attacked: &Scored,
    distance: usize,
) -> Result<BoundTally> {
    let mut t = BoundTally::default();
    let (Some(z_y), Some(z_u)) = (original.z, attacked.z) else {
        t.skipped = 1;
        return Ok(t);
    };
    if distance >= original.n {
        t.skipped = 1;
        return Ok(t);
    }
    t.checked = 1;
    let slack = 1e-9;
    for bound in [PenaltyBound::Stated, PenaltyBound::Normalized] {
        let penalty = scheme_penalty(scheme, bound, original.n, gamma, distance)?;
        let violated = z_u < z_y - penalty - slack;
        let cert = certified_edit_budget(z_y, original.n, gamma, tau, scheme, bound)?;
        let certified = z_y > tau && distance <= cert.certified_eta;
        let flipped = certified && z_u <= tau;
        match bound {
            PenaltyBound::Stated => {
                t.stated_violations += violated as usize;
                t.stated_certified += certified as usize;
                t.stated_flips += flipped as usize;
            }
            PenaltyBound::Normalized => {
                t.normalized_violations += violated as usize;
                t.normalized_certified += certified as usize;
                t.normalized_flips += flipped as usize;
            }
        }
    }
    Ok(t)
}

/// Attacks watermarked text at every configured rate and compares it with
/// null text through ROC curves; tallies robustness-bound checks.
pub fn run_robustness_sweep(config: &ExperimentConfig, exec: Execution) -> Result<EvalReport> {
    config.validate()?;
    check_alphas(config)?;
    let model = config.model.build()?;
    let cx = Context {
        config,
        model: model.as_ref(),
        exec,
    };
    let vocab = model.vocab_size();
    let nulls = collect(par::map_trials(cx.exec, config.trials, |i| cx.null_sequence(i)))?;
    let mut arms = Vec::new();
    let mut records = Vec::new();
    let mut tally = BoundTally::default();
    for &scheme in &config.schemes {
        let null_scores = collect(par::map_trials(cx.exec, config.trials, |i| {
            score(&mut Detector::new(&cx.key(scheme, i)?)?, &nulls[i], &config.alphas)
        }))?;
        let null_z: Vec<f64> = null_scores.iter().filter_map(|s| s.z).collect();
        arms.push(summarize_arm(config, format!("null/{scheme}"), scheme, false, None, &null_scores, &mut records));

        let marked = collect(par::map_trials(cx.exec, config.trials, |i| {
            let key = cx.key(scheme, i)?;
            let seq = cx.watermarked_sequence(&key, i)?;
            Ok((key, seq))
        }))?;
        for &rate in &config.attack.rates {
            let eta = rate_to_budget(rate, config.n)?;
            let results = collect(par::map_trials(cx.exec, config.trials, |i| {
                let (key, seq) = &marked[i];
                let mut detector = Detector::new(key)?;
                let gamma = detector.gamma();
                let original = score(&mut detector, seq, &config.alphas)?;
                let mut r = trial_rng(config.seed, &format!("attack/{scheme}/{rate}"), i as u64);
                let attacked = apply_attack(&config.attack, seq, eta, &mut detector, vocab, &mut r)?;
                let after = score(&mut detector, &attacked.tokens, &config.alphas)?;
                let distance = edit_distance(seq, &attacked.tokens);
                let checks = check_pair(scheme, gamma, config.tau, &original, &after, distance)?;
                Ok((after, checks))
            }))?;
            let scores: Vec<Scored> = results.iter().map(|r| r.0).collect();
            for r in &results {
                tally.add(&r.1);
            }
            let mut arm = summarize_arm(
                config,
                format!("watermarked/{scheme}/rate={rate}"),
                scheme,
                true,
                Some((rate, eta)),
                &scores,
                &mut records,
            );
            // sequences the attack left unscorable count as misses
            let positives: Vec<f64> = scores.iter().map(|s| s.z.unwrap_or(f64::NEG_INFINITY)).collect();
            if !null_z.is_empty() {
                let points = roc_curve(&positives, &null_z)?;
                arm.roc = Some(RocReport {
                    auc: auc(&points),
                    positives: positives.len(),
                    negatives: null_z.len(),
                    tpr_at_fpr: config
                        .fpr_points
                        .iter()
                        .map(|&fpr| OperatingPoint {
                            fpr,
                            tpr: tpr_at_fpr(&points, fpr),
                        })
                        .collect(),
                    points,
                });
            }
            arms.push(arm);
        }
    }
    Ok(finish(config, arms, tally, records))
}

/// Runs the experiment named in the config.
pub fn run(config: &ExperimentConfig, exec: Execution) -> Result<EvalReport> {
    match config.experiment {
        Experiment::Type1 => run_type1(config, exec),
        Experiment::Type2 => run_type2(config, exec),
        Experiment::Robustness => run_robustness_sweep(config, exec),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    /// Mann-Whitney form of the AUC: P[pos > neg] + P[pos = neg] / 2.
    fn pairwise_auc(pos: &[f64], neg: &[f64]) -> f64 {
        let mut wins = 0.0;
        for &p in pos {
            for &q in neg {
                wins += if p > q {
                    1.0
                } else if p == q {
                    0.5
                } else {
                    0.0
                };
            }
        }
        wins / (pos.len() * neg.len()) as f64
    }

    #[test]
    fn auc_matches_pairwise_oracle() {
        let mut r = rng::from_u64(8);
        for trial in 0..200 {
            let np = 1 + trial % 17;
            let nn = 1 + trial % 13;
            // coarse values force ties
            let pos: Vec<f64> = (0..np).map(|_| (rng::bounded(&mut r, 8) as f64) + 1.0).collect();
            let neg: Vec<f64> = (0..nn).map(|_| rng::bounded(&mut r, 8) as f64).collect();
            let points = roc_curve(&pos, &neg).unwrap();
            assert!((auc(&points) - pairwise_auc(&pos, &neg)).abs() < 1e-12);
            let last = points.last().unwrap();
            assert_eq!((last.fpr, last.tpr), (1.0, 1.0));
        }
    }

    #[test]
    fn separable_scores_have_unit_auc() {
        let points = roc_curve(&[5.0, 6.0, 7.0], &[0.0, 1.0]).unwrap();
        assert_eq!(auc(&points), 1.0);
        assert_eq!(tpr_at_fpr(&points, 0.0), 1.0);
        let flipped = roc_curve(&[0.0, 1.0], &[5.0, 6.0]).unwrap();
        assert_eq!(auc(&flipped), 0.0);
        assert!(roc_curve(&[], &[1.0]).is_err());
    }

    #[test]
    fn quantiles_interpolate() {
        let s = Summary::of(&[4.0, 1.0, 3.0, 2.0, 5.0]).unwrap();
        assert_eq!((s.min, s.median, s.max, s.mean), (1.0, 3.0, 5.0, 3.0));
        assert_eq!(s.q25, 2.0);
        assert!((s.q05 - 1.2).abs() < 1e-12);
        assert!(Summary::of(&[]).is_none());
    }

    #[test]
    fn model_spec_round_trip() {
        for text in [
            "uniform:1000",
            "repeat:50:3",
            "cycle:50:10:0.001",
            "ngram:corpus.txt:order=3:alpha=0.5:vocab=100",
            "surrogate:1000:order=2:alpha=0.01:tokens=200000:seed=7",
        ] {
            let spec: ModelSpec = text.parse().unwrap();
            let again: ModelSpec = spec.to_string().parse().unwrap();
            assert_eq!(spec, again, "{text}");
        }
        assert_eq!(
            "surrogate:10".parse::<ModelSpec>().unwrap(),
            ModelSpec::Surrogate {
                vocab: 10,
                order: 2,
                alpha: 0.01,
                tokens: 200_000,
                seed: 7
            }
        );
        for bad in ["", "uniform", "uniform:x", "repeat:5", "ngram:f", "surrogate:10:foo=1", "zipf:3"] {
            assert!(bad.parse::<ModelSpec>().is_err(), "{bad}");
        }
    }

    #[test]
    fn config_toml_round_trip() {
        let mut c = ExperimentConfig::desk_scale(Experiment::Robustness, "uniform:100".parse().unwrap(), 3);
        c.attack.kind = AttackKind::GreenAware;
        c.decoding = Decoding::TopP(0.9);
        let text = c.to_toml();
        let back: ExperimentConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, c);

        let minimal = r#"
            experiment = "type1"
            model = "uniform:100"
            gamma = 0.5
            delta = 2.0
            n = 50
            trials = 10
            seed = 1
        "#;
        let m: ExperimentConfig = toml::from_str(minimal).unwrap();
        m.validate().unwrap();
        assert_eq!(m.schemes, default_schemes());
        assert!(toml::from_str::<ExperimentConfig>(&format!("{minimal}\nbogus = 1")).is_err());
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let base = ExperimentConfig::desk_scale(Experiment::Type1, "uniform:100".parse().unwrap(), 1);
        let mut c = base.clone();
        c.trials = 0;
        assert!(c.validate().is_err());
        let mut c = base.clone();
        c.gamma = 1.5;
        assert!(c.validate().is_err());
        let mut c = base.clone();
        c.alphas = vec![0.0];
        assert!(c.validate().is_err());
        let mut c = base;
        c.prompt = vec![100];
        assert!(c.validate().is_err());
    }

    fn small(experiment: Experiment) -> ExperimentConfig {
        let mut c = ExperimentConfig::desk_scale(experiment, "uniform:200".parse().unwrap(), 11);
        c.n = 60;
        c.trials = 40;
        c.attack.rates = vec![0.0, 0.2];
        c
    }

    #[test]
    fn sequential_and_parallel_runs_agree() {
        for e in [Experiment::Type1, Experiment::Type2, Experiment::Robustness] {
            let c = small(e);
            let a = run(&c, Execution::Sequential).unwrap();
            let b = run(&c, Execution::Parallel).unwrap();
            assert_eq!(a.to_json(), b.to_json());
            assert_eq!(a.trials_csv().unwrap(), b.trials_csv().unwrap());
        }
    }

    #[test]
    fn rates_carry_counts() {
        let r = run(&small(Experiment::Type2), Execution::default()).unwrap();
        for arm in &r.arms {
            assert_eq!(arm.detected_at_tau.trials, arm.trials);
            assert!((0.0..=1.0).contains(&arm.detected_at_tau.value));
            assert!(arm.power.is_some());
        }
        assert_eq!(r.trials.len(), 2 * 40);
        let csv = r.trials_csv().unwrap();
        assert!(csv.starts_with("arm,trial,scheme,n,green_count,z,attacked_eta,decision\n"));
        assert_eq!(csv.lines().count(), 81);
    }

    #[test]
    fn zero_rate_leaves_scores_unchanged() {
        let r = run(&small(Experiment::Robustness), Execution::default()).unwrap();
        for scheme in [Scheme::FixedSplit, Scheme::BigramHash] {
            let arm = r.arm(&format!("watermarked/{scheme}/rate=0")).unwrap();
            assert_eq!(arm.attacked_eta, 0);
            assert!(arm.roc.as_ref().unwrap().auc > 0.99);
        }
        assert_eq!(r.bound_checks.normalized_violations, 0);
        assert_eq!(r.bound_checks.normalized_flips, 0);
    }

    #[test]
    fn repetitive_null_text_is_flagged() {
        let mut c = small(Experiment::Type1);
        c.model = "repeat:200:7".parse().unwrap();
        let r = run(&c, Execution::default()).unwrap();
        for arm in &r.arms {
            assert!(arm.diversity.low_diversity, "{}", arm.name);
        }
        let r = run(&small(Experiment::Type1), Execution::default()).unwrap();
        assert!(r.arms.iter().all(|a| !a.diversity.low_diversity));
    }
}
