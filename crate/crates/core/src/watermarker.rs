//! Watermarked generation: logit biasing and decoding.

use std::fmt;
use std::str::FromStr;

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lm::{sample_index, softmax, NextTokenModel};
use crate::partition::{partition, BigramLists, GreenList, Scheme, WatermarkKey};
use crate::rng;
use crate::TokenSeq;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Decoding {
    Multinomial,
    Greedy,
    /// Nucleus sampling with cumulative mass `p`.
    TopP(f64),
}

impl Decoding {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Decoding::TopP(p) if !(p > 0.0 && p <= 1.0) => {
                Err(Error::param(format!("top-p mass must lie in (0, 1], got {p}")))
            }
            _ => Ok(()),
        }
    }
}

impl fmt::Display for Decoding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Decoding::Multinomial => f.write_str("multinomial"),
            Decoding::Greedy => f.write_str("greedy"),
            Decoding::TopP(p) => write!(f, "topp:{p}"),
        }
    }
}

impl FromStr for Decoding {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let d = match s {
            "multinomial" => Decoding::Multinomial,
            "greedy" => Decoding::Greedy,
            other => match other.strip_prefix("topp:") {
                Some(p) => Decoding::TopP(p.parse().map_err(|e| Error::parse("top-p mass", e))?),
                None => return Err(Error::parse("decoding", format!("unknown decoding `{other}`"))),
            },
        };
        d.validate()?;
        Ok(d)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenerationConfig {
    pub horizon: usize,
    pub decoding: Decoding,
    pub seed: u64,
}

impl GenerationConfig {
    pub fn new(horizon: usize, decoding: Decoding, seed: u64) -> Result<Self> {
        let config = GenerationConfig {
            horizon,
            decoding,
            seed,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::param("generation horizon must be >= 1"));
        }
        self.decoding.validate()
    }
}

/// Adds `delta` to the logit of every green token.
pub fn bias_logits(logits: &[f64], green: &GreenList, delta: f64) -> Result<Vec<f64>> {
    if logits.len() != green.vocab_size() {
        return Err(Error::param(format!(
            "logit vector has length {} but the green list covers {} tokens",
            logits.len(),
            green.vocab_size()
        )));
    }
    Ok(logits
        .iter()
        .enumerate()
        .map(|(v, &l)| if green.contains(v as u32) { l + delta } else { l })
        .collect())
}

fn argmax_lowest(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate().skip(1) {
        if v > p[best] {
            best = i;
        }
    }
    best
}

/// Draws the next token. Every decoding consumes exactly one uniform
/// variate, so streams stay aligned across decodings.
pub fn sample_next<R: RngCore + ?Sized>(logits: &[f64], decoding: Decoding, rng: &mut R) -> u32 {
    let probs = softmax(logits);
    match decoding {
        Decoding::Multinomial => sample_index(&probs, rng) as u32,
        Decoding::Greedy => {
            let _ = rng::unit_f64(rng);
            argmax_lowest(&probs) as u32
        }
        Decoding::TopP(mass) => {
            let mut order: Vec<usize> = (0..probs.len()).collect();
            order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
            let mut acc = 0.0;
            let mut keep = order.len();
            for (i, &tok) in order.iter().enumerate() {
                acc += probs[tok];
                if acc >= mass {
                    keep = i + 1;
                    break;
                }
            }
            let nucleus = &order[..keep];
            let weights: Vec<f64> = nucleus.iter().map(|&t| probs[t] / acc).collect();
            nucleus[sample_index(&weights, rng)] as u32
        }
    }
}

enum Bias {
    None,
    Fixed(GreenList),
    Bigram(BigramLists),
}

/// Samples `config.horizon` tokens after `prompt`, watermarked with `key`
/// when one is given.
///
/// The fixed-split scheme biases every position with the key's green list.
/// The bigram baseline leaves the first generated position unbiased and
/// biases later positions with the list seeded by the previous generated
/// token.
pub fn generate<M: NextTokenModel + ?Sized>(
    model: &M,
    prompt: &[u32],
    key: Option<&WatermarkKey>,
    config: &GenerationConfig,
) -> Result<TokenSeq> {
    config.validate()?;
    let mut bias = match key {
        None => Bias::None,
        Some(k) => {
            if k.vocab_size != model.vocab_size() {
                return Err(Error::param(format!(
                    "key vocabulary {} does not match model vocabulary {}",
                    k.vocab_size,
                    model.vocab_size()
                )));
            }
            match k.scheme {
                Scheme::FixedSplit => Bias::Fixed(partition(k)?),
                Scheme::BigramHash => Bias::Bigram(BigramLists::new(k)?),
            }
        }
    };
    let delta = key.map_or(0.0, |k| k.delta);
    let mut stream = rng::from_u64(config.seed);
    let mut out: TokenSeq = Vec::with_capacity(config.horizon);
    for _ in 0..config.horizon {
        let raw = model.logits(prompt, &out);
        let logits = match (&mut bias, out.last()) {
            (Bias::None, _) | (Bias::Bigram(_), None) => raw,
            (Bias::Fixed(g), _) => bias_logits(&raw, g, delta)?,
            (Bias::Bigram(lists), Some(&prev)) => bias_logits(&raw, lists.get(prev)?, delta)?,
        };
        out.push(sample_next(&logits, config.decoding, &mut stream));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::certificates::green_prob_boost;
    use crate::lm::{degenerate_lm, uniform_lm, DegenerateKind};
    use crate::partition::keygen;
    use proptest::prelude::*;

    fn two_token_green() -> GreenList {
        GreenList::from_members(2, &[0]).unwrap()
    }

    #[test]
    fn zero_delta_is_identity() {
        let logits = vec![0.3, -1.0, 2.5];
        let g = GreenList::from_members(3, &[0, 2]).unwrap();
        assert_eq!(bias_logits(&logits, &g, 0.0).unwrap(), logits);
    }

    #[test]
    fn bias_adds_delta_to_green_only() {
        let out = bias_logits(&[0.0, 0.0], &two_token_green(), 2.0).unwrap();
        assert_eq!(out, vec![2.0, 0.0]);
        let p = softmax(&out);
        let e2 = 2f64.exp();
        assert!((p[0] - e2 / (e2 + 1.0)).abs() < 1e-15);
        assert!((p[0] - 0.8808).abs() < 1e-4 && (p[1] - 0.1192).abs() < 1e-4);
    }

    #[test]
    fn bias_length_mismatch() {
        assert!(matches!(
            bias_logits(&[0.0; 3], &two_token_green(), 1.0),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn greedy_takes_lowest_argmax() {
        let mut r = rng::from_u64(0);
        assert_eq!(sample_next(&[1.0, 3.0, 2.0], Decoding::Greedy, &mut r), 1);
        assert_eq!(sample_next(&[3.0, 1.0, 3.0], Decoding::Greedy, &mut r), 0);
    }

    #[test]
    fn multinomial_frequencies_on_uniform() {
        // binomial sd for p = 0.25 over 10^5 draws is ~0.00137; 0.005 is ~3.6 sd
        let mut r = rng::from_u64(99);
        let mut hist = [0u32; 4];
        let draws = 100_000;
        for _ in 0..draws {
            hist[sample_next(&[0.0; 4], Decoding::Multinomial, &mut r) as usize] += 1;
        }
        for h in hist {
            assert!((h as f64 / draws as f64 - 0.25).abs() < 0.005, "{hist:?}");
        }
    }

    #[test]
    fn top_p_nucleus_selection() {
        let logits: Vec<f64> = [0.6f64, 0.3, 0.1].iter().map(|p| p.ln()).collect();
        let mut r = rng::from_u64(1);
        for _ in 0..2000 {
            assert_eq!(sample_next(&logits, Decoding::TopP(0.5), &mut r), 0);
        }
        // p = 0.8 crosses at the second token: nucleus {0, 1}
        let mut seen = [false; 3];
        for _ in 0..2000 {
            seen[sample_next(&logits, Decoding::TopP(0.8), &mut r) as usize] = true;
        }
        assert_eq!(seen, [true, true, false]);
        let mut seen = [false; 3];
        for _ in 0..5000 {
            seen[sample_next(&logits, Decoding::TopP(1.0), &mut r) as usize] = true;
        }
        assert_eq!(seen, [true; 3]);
    }

    #[test]
    fn decoding_parse() {
        assert_eq!("topp:0.9".parse::<Decoding>().unwrap(), Decoding::TopP(0.9));
        assert_eq!("greedy".parse::<Decoding>().unwrap(), Decoding::Greedy);
        assert!("topp:1.5".parse::<Decoding>().is_err());
        assert!("beam".parse::<Decoding>().is_err());
    }

    #[test]
    fn zero_delta_key_matches_unwatermarked() {
        let m = uniform_lm(500).unwrap();
        let mut r = rng::from_u64(4);
        for scheme in [Scheme::FixedSplit, Scheme::BigramHash] {
            let key = keygen(0.5, 0.0, scheme, 500, &mut r).unwrap();
            for decoding in [Decoding::Multinomial, Decoding::TopP(0.7)] {
                let cfg = GenerationConfig::new(100, decoding, 12).unwrap();
                assert_eq!(
                    generate(&m, &[], Some(&key), &cfg).unwrap(),
                    generate(&m, &[], None, &cfg).unwrap()
                );
            }
        }
    }

    #[test]
    fn generation_is_reproducible() {
        let m = uniform_lm(300).unwrap();
        let key = keygen(0.5, 2.0, Scheme::BigramHash, 300, &mut rng::from_u64(6)).unwrap();
        let cfg = GenerationConfig::new(64, Decoding::Multinomial, 5).unwrap();
        assert_eq!(
            generate(&m, &[1, 2], Some(&key), &cfg).unwrap(),
            generate(&m, &[1, 2], Some(&key), &cfg).unwrap()
        );
    }

    #[test]
    fn vocab_mismatch_rejected() {
        let m = uniform_lm(300).unwrap();
        let key = keygen(0.5, 2.0, Scheme::FixedSplit, 301, &mut rng::from_u64(6)).unwrap();
        let cfg = GenerationConfig::new(4, Decoding::Multinomial, 5).unwrap();
        assert!(matches!(generate(&m, &[], Some(&key), &cfg), Err(Error::Parameter(_))));
        assert!(GenerationConfig::new(0, Decoding::Greedy, 0).is_err());
    }

    #[test]
    fn point_mass_ignores_watermark() {
        let m = degenerate_lm(DegenerateKind::RepeatToken(7), 100, 0.0).unwrap();
        let mut r = rng::from_u64(3);
        for delta in [0.0, 2.0, 10.0] {
            let key = keygen(0.5, delta, Scheme::FixedSplit, 100, &mut r).unwrap();
            let cfg = GenerationConfig::new(200, Decoding::Multinomial, 9).unwrap();
            let out = generate(&m, &[], Some(&key), &cfg).unwrap();
            assert!(out.iter().all(|&t| t == 7));
        }
    }

    #[test]
    fn green_fraction_on_uniform_model() {
        // 500 sequences of 200 tokens, N = 1000, gamma = 0.5, delta = 2:
        // each token is green with probability e^2 / (1 + e^2) = 0.8808.
        let m = uniform_lm(1000).unwrap();
        let key = keygen(0.5, 2.0, Scheme::FixedSplit, 1000, &mut rng::from_u64(21)).unwrap();
        let g = partition(&key).unwrap();
        let mut green = 0usize;
        for s in 0..500 {
            let cfg = GenerationConfig::new(200, Decoding::Multinomial, s).unwrap();
            let out = generate(&m, &[], Some(&key), &cfg).unwrap();
            green += out.iter().filter(|&&t| g.contains(t)).count();
        }
        let frac = green as f64 / 100_000.0;
        let expect = green_prob_boost(0.5, 2.0);
        // sd of the pooled fraction ~ sqrt(0.88 * 0.12 / 1e5) ~ 0.001
        assert!((frac - expect).abs() < 0.004, "{frac} vs {expect}");
    }

    proptest! {
        #[test]
        fn watermarked_green_mass_matches_closed_form(
            logits in proptest::collection::vec(-8.0f64..8.0, 2..40),
            mask in proptest::collection::vec(any::<bool>(), 40),
            delta in 0.0f64..8.0,
        ) {
            let n = logits.len();
            let members: Vec<u32> = (0..n as u32).filter(|&i| mask[i as usize]).collect();
            let g = GreenList::from_members(n, &members).unwrap();
            let p = softmax(&logits);
            let q_green: f64 = members.iter().map(|&i| p[i as usize]).sum();
            let hat = softmax(&bias_logits(&logits, &g, delta).unwrap());
            let hat_green: f64 = members.iter().map(|&i| hat[i as usize]).sum();
            prop_assert!((hat_green - green_prob_boost(q_green, delta)).abs() < 1e-12);
            prop_assert!(hat_green >= q_green - 1e-12);
            // nondecreasing on a delta grid
            let mut prev = q_green;
            for step in 1..=10 {
                let d = delta * step as f64 / 10.0;
                let h: f64 = {
                    let s = softmax(&bias_logits(&logits, &g, d).unwrap());
                    members.iter().map(|&i| s[i as usize]).sum()
                };
                prop_assert!(h >= prev - 1e-12);
                prev = h;
            }
        }
    }
}
