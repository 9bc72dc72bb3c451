//! Keyed vocabulary partitioning.
//!
//! The fixed-split scheme derives one green list per key. The bigram-hash
//! baseline derives a fresh green list for every preceding token by hashing
//! the key seed together with that token.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::RngCore;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scheme {
    /// One global green list per key.
    FixedSplit,
    /// Green list at position t seeded by the token at t-1.
    BigramHash,
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scheme::FixedSplit => "fixed-split",
            Scheme::BigramHash => "bigram-hash",
        })
    }
}

impl FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fixed-split" | "fixed" => Ok(Scheme::FixedSplit),
            "bigram-hash" | "bigram" => Ok(Scheme::BigramHash),
            other => Err(Error::parse("scheme", format!("unknown scheme `{other}`"))),
        }
    }
}

/// Seed material plus the scheme parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WatermarkKey {
    pub scheme: Scheme,
    pub vocab_size: usize,
    pub gamma: f64,
    pub delta: f64,
    #[serde(serialize_with = "seed_to_hex", deserialize_with = "seed_from_hex")]
    pub seed: [u8; 32],
}

fn seed_to_hex<S: Serializer>(seed: &[u8; 32], s: S) -> std::result::Result<S::Ok, S::Error> {
    s.serialize_str(&hex::encode(seed))
}

fn seed_from_hex<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<[u8; 32], D::Error> {
    let text = String::deserialize(d)?;
    let bytes = hex::decode(&text).map_err(serde::de::Error::custom)?;
    bytes
        .try_into()
        .map_err(|_| serde::de::Error::custom("seed must be 64 hex characters"))
}

/// Draws a fresh key from `entropy`.
pub fn keygen<R: RngCore + ?Sized>(
    gamma: f64,
    delta: f64,
    scheme: Scheme,
    vocab_size: usize,
    entropy: &mut R,
) -> Result<WatermarkKey> {
    let mut seed = [0u8; 32];
    entropy.fill_bytes(&mut seed);
    WatermarkKey::new(scheme, vocab_size, gamma, delta, seed)
}

impl WatermarkKey {
    pub fn new(
        scheme: Scheme,
        vocab_size: usize,
        gamma: f64,
        delta: f64,
        seed: [u8; 32],
    ) -> Result<Self> {
        let key = WatermarkKey {
            scheme,
            vocab_size,
            gamma,
            delta,
            seed,
        };
        key.validate()?;
        Ok(key)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::param(format!("gamma must lie in (0, 1), got {}", self.gamma)));
        }
        if !(self.delta >= 0.0 && self.delta.is_finite()) {
            return Err(Error::param(format!("delta must be finite and >= 0, got {}", self.delta)));
        }
        if self.vocab_size < 2 {
            return Err(Error::param(format!("vocab_size must be >= 2, got {}", self.vocab_size)));
        }
        if self.vocab_size > u32::MAX as usize {
            return Err(Error::param("vocab_size exceeds the u32 token range"));
        }
        let size = self.green_size();
        if size == 0 || size >= self.vocab_size {
            return Err(Error::param(format!(
                "floor(gamma * N) = {size} leaves an empty green or red list (gamma={}, N={})",
                self.gamma, self.vocab_size
            )));
        }
        Ok(())
    }

    /// `floor(gamma * N)`.
    pub fn green_size(&self) -> usize {
        green_size(self.gamma, self.vocab_size)
    }

    pub fn with_delta(&self, delta: f64) -> Result<Self> {
        WatermarkKey::new(self.scheme, self.vocab_size, self.gamma, delta, self.seed)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let key: WatermarkKey = toml::from_str(&text).map_err(|e| Error::parse("key file", e))?;
        key.validate()?;
        Ok(key)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("key serializes")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_toml()).map_err(|e| Error::io(path, e))
    }
}

/// `floor(gamma * n)`, tolerant of products like `0.29 * 100 = 28.999...`.
pub fn green_size(gamma: f64, vocab_size: usize) -> usize {
    let exact = gamma * vocab_size as f64;
    (exact + 1e-12 * exact.max(1.0)).floor() as usize
}

/// Membership bitset over `[0, vocab_size)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GreenList {
    words: Vec<u64>,
    vocab_size: usize,
    len: usize,
}

impl GreenList {
    pub fn from_members(vocab_size: usize, members: &[u32]) -> Result<Self> {
        let mut words = vec![0u64; vocab_size.div_ceil(64)];
        let mut len = 0;
        for &m in members {
            let m = m as usize;
            if m >= vocab_size {
                return Err(Error::param(format!("token {m} outside vocabulary of size {vocab_size}")));
            }
            let (w, b) = (m / 64, m % 64);
            if words[w] & (1 << b) == 0 {
                words[w] |= 1 << b;
                len += 1;
            }
        }
        Ok(GreenList { words, vocab_size, len })
    }

    #[inline]
    pub fn contains(&self, token: u32) -> bool {
        let t = token as usize;
        t < self.vocab_size && self.words[t / 64] & (1 << (t % 64)) != 0
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn members(&self) -> impl Iterator<Item = u32> + '_ {
        (0..self.vocab_size as u32).filter(|&t| self.contains(t))
    }

    pub fn red_members(&self) -> impl Iterator<Item = u32> + '_ {
        (0..self.vocab_size as u32).filter(|&t| !self.contains(t))
    }
}

/// Uniform random size-`size` subset of `[0, vocab_size)`: Fisher–Yates over
/// the identity permutation driven by the seed's ChaCha20 stream, keeping
/// the first `size` entries.
fn shuffled_prefix(seed: [u8; 32], vocab_size: usize, size: usize) -> GreenList {
    let mut perm: Vec<u32> = (0..vocab_size as u32).collect();
    let mut stream = rng::from_seed(seed);
    for i in (1..vocab_size).rev() {
        let j = rng::bounded(&mut stream, i as u64 + 1) as usize;
        perm.swap(i, j);
    }
    GreenList::from_members(vocab_size, &perm[..size]).expect("permutation stays in range")
}

/// The fixed-split green list for `key`.
pub fn partition(key: &WatermarkKey) -> Result<GreenList> {
    if key.scheme != Scheme::FixedSplit {
        return Err(Error::Usage(format!(
            "partition needs a fixed-split key, got {}",
            key.scheme
        )));
    }
    key.validate()?;
    Ok(shuffled_prefix(key.seed, key.vocab_size, key.green_size()))
}

fn bigram_seed(key: &WatermarkKey, prev_token: u32) -> [u8; 32] {
    rng::derive_seed(&[b"bigram-green", &key.seed, &prev_token.to_le_bytes()])
}

/// The baseline's green list for the position following `prev_token`.
pub fn bigram_green_list(key: &WatermarkKey, prev_token: u32) -> Result<GreenList> {
    if key.scheme != Scheme::BigramHash {
        return Err(Error::Usage(format!(
            "bigram_green_list needs a bigram-hash key, got {}",
            key.scheme
        )));
    }
    key.validate()?;
    if prev_token as usize >= key.vocab_size {
        return Err(Error::param(format!(
            "token {prev_token} outside vocabulary of size {}",
            key.vocab_size
        )));
    }
    Ok(shuffled_prefix(
        bigram_seed(key, prev_token),
        key.vocab_size,
        key.green_size(),
    ))
}

/// Memoizing lookup of bigram green lists, built lazily per preceding token.
#[derive(Debug, Clone)]
pub struct BigramLists {
    key: WatermarkKey,
    cache: HashMap<u32, GreenList>,
}

impl BigramLists {
    pub fn new(key: &WatermarkKey) -> Result<Self> {
        if key.scheme != Scheme::BigramHash {
            return Err(Error::Usage(format!("bigram lists need a bigram-hash key, got {}", key.scheme)));
        }
        key.validate()?;
        Ok(BigramLists {
            key: key.clone(),
            cache: HashMap::new(),
        })
    }

    pub fn get(&mut self, prev_token: u32) -> Result<&GreenList> {
        if prev_token as usize >= self.key.vocab_size {
            return Err(Error::param(format!(
                "token {prev_token} outside vocabulary of size {}",
                self.key.vocab_size
            )));
        }
        let key = &self.key;
        Ok(self.cache.entry(prev_token).or_insert_with(|| {
            shuffled_prefix(bigram_seed(key, prev_token), key.vocab_size, key.green_size())
        }))
    }

    pub fn key(&self) -> &WatermarkKey {
        &self.key
    }
}
