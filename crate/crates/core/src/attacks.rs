//! Bounded-edit adversaries and token-level edit distance.
//!
//! Every attack spends at most `eta` atomic edits (insert, delete or
//! replace one token), so `edit_distance(input, output) <= eta` always.
//! A swap has no atomic form and costs two edits (delete, then insert).

use std::fmt;
use std::str::FromStr;

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::partition::{BigramLists, GreenList};
use crate::rng::{bounded, unit_f64};
use crate::TokenSeq;

/// Levenshtein distance over tokens.
pub fn edit_distance(a: &[u32], b: &[u32]) -> usize {
    if a.len() < b.len() {
        return edit_distance(b, a);
    }
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, &x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, &y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Probabilities of each atomic operation in a random attack.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EditMix {
    pub insert: f64,
    pub delete: f64,
    pub replace: f64,
}

impl EditMix {
    pub const REPLACE: EditMix = EditMix {
        insert: 0.0,
        delete: 0.0,
        replace: 1.0,
    };

    pub fn new(insert: f64, delete: f64, replace: f64) -> Result<Self> {
        let mix = EditMix { insert, delete, replace };
        mix.validate()?;
        Ok(mix)
    }

    pub fn validate(&self) -> Result<()> {
        let parts = [self.insert, self.delete, self.replace];
        if parts.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
            return Err(Error::param(format!("edit mix weights must be >= 0: {self}")));
        }
        let total: f64 = parts.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::param(format!("edit mix must sum to 1, got {total}")));
        }
        Ok(())
    }
}

impl Default for EditMix {
    fn default() -> Self {
        EditMix::REPLACE
    }
}

impl fmt::Display for EditMix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ins:{},del:{},rep:{}", self.insert, self.delete, self.replace)
    }
}

impl FromStr for EditMix {
    type Err = Error;

    /// Parses `ins:I,del:D,rep:R`; omitted parts are 0.
    fn from_str(s: &str) -> Result<Self> {
        let (mut ins, mut del, mut rep) = (0.0, 0.0, 0.0);
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (name, value) = part
                .split_once(':')
                .ok_or_else(|| Error::parse("edit mix", format!("expected name:value, got {part:?}")))?;
            let value: f64 = value.trim().parse().map_err(|e| Error::parse("edit mix", e))?;
            match name.trim() {
                "ins" | "insert" => ins = value,
                "del" | "delete" => del = value,
                "rep" | "replace" => rep = value,
                other => return Err(Error::parse("edit mix", format!("unknown operation {other:?}"))),
            }
        }
        EditMix::new(ins, del, rep)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttackResult {
    pub tokens: TokenSeq,
    /// Edits actually spent.
    pub applied: usize,
    /// The output ran empty before the budget was spent.
    pub emptied: bool,
}

/// Exact edit count for an attack expressed as a rate.
pub fn rate_to_budget(rate: f64, n: usize) -> Result<usize> {
    if !(rate.is_finite() && rate >= 0.0) {
        return Err(Error::param(format!("attack rate must be >= 0, got {rate}")));
    }
    Ok((rate * n as f64).round() as usize)
}

fn uniform_token<R: RngCore + ?Sized>(rng: &mut R, vocab_size: usize) -> u32 {
    bounded(rng, vocab_size as u64) as u32
}

/// Applies `eta` random atomic edits at uniform positions.
///
/// Deletions on an empty sequence are skipped and the result is flagged as
/// emptied.
pub fn random_edit_attack<R: RngCore + ?Sized>(
    seq: &[u32],
    eta: usize,
    mix: EditMix,
    vocab_size: usize,
    rng: &mut R,
) -> Result<AttackResult> {
    mix.validate()?;
    if vocab_size == 0 {
        return Err(Error::param("vocab_size must be > 0"));
    }
    let mut out = seq.to_vec();
    let mut applied = 0;
    let mut emptied = false;
    for _ in 0..eta {
        let u = unit_f64(rng);
        if u < mix.insert {
            let pos = bounded(rng, out.len() as u64 + 1) as usize;
            out.insert(pos, uniform_token(rng, vocab_size));
            applied += 1;
        } else if out.is_empty() {
            emptied = true;
        } else if u < mix.insert + mix.delete {
            let pos = bounded(rng, out.len() as u64) as usize;
            out.remove(pos);
            applied += 1;
            emptied |= out.is_empty();
        } else {
            let pos = bounded(rng, out.len() as u64) as usize;
            out[pos] = uniform_token(rng, vocab_size);
            applied += 1;
        }
    }
    Ok(AttackResult {
        tokens: out,
        applied,
        emptied,
    })
}

/// Random swaps of two tokens, each realized as a delete plus an insert and
/// charged two edits. Spends `eta / 2` swaps.
pub fn random_swap_attack<R: RngCore + ?Sized>(seq: &[u32], eta: usize, rng: &mut R) -> AttackResult {
    let mut out = seq.to_vec();
    let mut applied = 0;
    if out.len() >= 2 {
        for _ in 0..eta / 2 {
            let from = bounded(rng, out.len() as u64) as usize;
            let tok = out.remove(from);
            let to = bounded(rng, out.len() as u64 + 1) as usize;
            out.insert(to, tok);
            applied += 2;
        }
    }
    AttackResult {
        tokens: out,
        applied,
        emptied: false,
    }
}

/// Replaces up to `eta` green tokens, chosen uniformly among the green
/// positions, with uniform red tokens.
pub fn greenaware_attack<R: RngCore + ?Sized>(
    seq: &[u32],
    green: &GreenList,
    eta: usize,
    rng: &mut R,
) -> Result<AttackResult> {
    let red: Vec<u32> = green.red_members().collect();
    if red.is_empty() {
        return Err(Error::param("green list covers the whole vocabulary"));
    }
    let mut out = seq.to_vec();
    let mut positions: Vec<usize> = (0..out.len()).filter(|&i| green.contains(out[i])).collect();
    let k = eta.min(positions.len());
    // partial Fisher-Yates: the first k entries become a uniform k-subset
    for i in 0..k {
        let j = i + bounded(rng, (positions.len() - i) as u64) as usize;
        positions.swap(i, j);
        let pos = positions[i];
        out[pos] = red[bounded(rng, red.len() as u64) as usize];
    }
    Ok(AttackResult {
        tokens: out,
        applied: k,
        emptied: false,
    })
}

/// Green-aware adversary for the bigram baseline: repeatedly picks a
/// uniformly random position that is currently green under its
/// predecessor's list and replaces it with a token red under that list.
/// Replacing a token also re-keys the next position, so green positions are
/// recomputed after every edit.
pub fn greenaware_bigram_attack<R: RngCore + ?Sized>(
    seq: &[u32],
    lists: &mut BigramLists,
    eta: usize,
    rng: &mut R,
) -> Result<AttackResult> {
    let mut out = seq.to_vec();
    let mut applied = 0;
    while applied < eta {
        let mut positions = Vec::new();
        for t in 1..out.len() {
            if lists.get(out[t - 1])?.contains(out[t]) {
                positions.push(t);
            }
        }
        if positions.is_empty() {
            break;
        }
        let pos = positions[bounded(rng, positions.len() as u64) as usize];
        let list = lists.get(out[pos - 1])?;
        let red_count = list.vocab_size() - list.len();
        if red_count == 0 {
            return Err(Error::param("green list covers the whole vocabulary"));
        }
        let pick = bounded(rng, red_count as u64) as usize;
        out[pos] = list.red_members().nth(pick).expect("index below red count");
        applied += 1;
    }
    Ok(AttackResult {
        tokens: out,
        applied,
        emptied: false,
    })
}
