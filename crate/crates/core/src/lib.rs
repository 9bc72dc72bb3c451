//! Fixed green/red-list watermarking for token streams.
//!
//! A [`WatermarkKey`] deterministically splits the vocabulary into a green
//! list and a red list. Generation adds a constant bonus `delta` to the
//! logits of green tokens; detection counts green tokens in a suspect
//! sequence and thresholds the resulting z-statistic. The remaining modules
//! compute and check the guarantees that come with the scheme: edit-distance
//! robustness certificates, Rényi-divergence quality bounds, and Type I/II
//! error behaviour, using small synthetic language models.
//!
//! The keyed-hash baseline (green list re-derived from the previous token)
//! is implemented alongside for comparison.

pub mod attacks;
pub mod certificates;
pub mod detector;
pub mod divergence;
pub mod error;
pub mod harness;
pub mod io;
pub mod lm;
pub mod par;
pub mod partition;
pub mod rng;
pub mod watermarker;

pub use error::{Error, Result};
pub use partition::{GreenList, Scheme, WatermarkKey};

/// Ordered token ids, each in `[0, vocab_size)`.
pub type TokenSeq = Vec<u32>;

/// Version string embedded in reports.
pub const VERSION: &str = env!("GREENLIST_VERSION");
