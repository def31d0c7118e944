//! Distinct-state identification with MinHash signatures.
//!
//! A summary is flattened into a set of 64-bit item keys. Its signature holds,
//! for each of `k` keyed hash functions, the smallest hash over the set; the
//! fraction of positions where two signatures agree estimates the Jaccard
//! similarity of the underlying sets.

use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::abstraction::{EventHistory, HistoryItem};
use crate::events::mix64;

pub const DEFAULT_K: usize = 128;
pub const DEFAULT_EPSILON: f64 = 0.70;
pub const DEFAULT_HASH_SEED: u64 = 0x5eed_0f_c0ffee;
/// Fewer steady summaries than this cannot calibrate ε.
pub const MIN_CALIBRATION_SAMPLES: usize = 20;
pub const COINCIDE_TARGET: f64 = 0.90;

pub type StateId = u32;

#[derive(Debug, Error, PartialEq)]
pub enum NoveltyError {
    #[error("signatures are not comparable: k {0} vs {1}, seed {2:#x} vs {3:#x}")]
    Mismatch(usize, usize, u64, u64),
    #[error("k must be at least 1")]
    ZeroK,
    #[error("epsilon {0} outside (0, 1]")]
    Epsilon(f64),
    #[error("calibration needs at least {MIN_CALIBRATION_SAMPLES} summaries, got {0}")]
    TooFewSamples(usize),
    #[error("registry export failed: {0}")]
    Export(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StateSignature {
    pub minima: Vec<u64>,
    pub hash_seed: u64,
}

impl StateSignature {
    pub fn k(&self) -> usize {
        self.minima.len()
    }

    /// The signature of the empty set.
    pub fn empty(k: usize, hash_seed: u64) -> Self {
        StateSignature { minima: vec![u64::MAX; k], hash_seed }
    }

    pub fn is_empty(&self) -> bool {
        self.minima.iter().all(|m| *m == u64::MAX)
    }
}

fn fold_bytes(mut h: u64, bytes: &[u8]) -> u64 {
    for chunk in bytes.chunks(8) {
        let mut word = [0u8; 8];
        word[..chunk.len()].copy_from_slice(chunk);
        h = mix64(h ^ u64::from_le_bytes(word)).wrapping_add(chunk.len() as u64);
    }
    h
}

/// Stable key of a history item, derived from its textual form so it does
/// not depend on enum layout.
pub fn item_key(item: &HistoryItem) -> u64 {
    match item {
        HistoryItem::Kind(n, k) => {
            fold_bytes(mix64(0x6b ^ ((n.0 as u64) << 8)), k.to_string().as_bytes())
        }
        HistoryItem::Pair(n, a, b) => {
            let h = fold_bytes(mix64(0x70 ^ ((n.0 as u64) << 8)), a.to_string().as_bytes());
            fold_bytes(mix64(h ^ 0x7c), b.to_string().as_bytes())
        }
    }
}

fn hash_keys(k: usize, hash_seed: u64) -> Vec<u64> {
    (0..k as u64).map(|i| mix64(hash_seed ^ mix64(i.wrapping_add(0x9e37_79b9_7f4a_7c15)))).collect()
}

/// MinHash over arbitrary item keys.
pub fn signature_of_keys(
    keys: impl IntoIterator<Item = u64>,
    k: usize,
    hash_seed: u64,
) -> Result<StateSignature, NoveltyError> {
    if k == 0 {
        return Err(NoveltyError::ZeroK);
    }
    let family = hash_keys(k, hash_seed);
    let mut sig = StateSignature::empty(k, hash_seed);
    for x in keys {
        for (m, key) in sig.minima.iter_mut().zip(&family) {
            let h = mix64(x ^ key);
            if h < *m {
                *m = h;
            }
        }
    }
    Ok(sig)
}

pub fn signature(h: &EventHistory, k: usize, hash_seed: u64) -> Result<StateSignature, NoveltyError> {
    signature_of_keys(h.items().map(|i| item_key(&i)), k, hash_seed)
}

/// Fraction of positions with equal minima.
pub fn similarity(a: &StateSignature, b: &StateSignature) -> Result<f64, NoveltyError> {
    if a.k() != b.k() || a.hash_seed != b.hash_seed {
        return Err(NoveltyError::Mismatch(a.k(), b.k(), a.hash_seed, b.hash_seed));
    }
    let same = a.minima.iter().zip(&b.minima).filter(|(x, y)| x == y).count();
    Ok(same as f64 / a.k() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegistryEntry {
    pub id: StateId,
    pub signature: StateSignature,
    pub first_seen_step: u64,
    pub item_count: usize,
}

/// Representatives of every distinct state seen so far.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StateRegistry {
    entries: Vec<RegistryEntry>,
}

impl StateRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[RegistryEntry] {
        &self.entries
    }

    /// Returns the most similar representative and its similarity, ties
    /// going to the lowest id.
    pub fn nearest(&self, sig: &StateSignature) -> Result<Option<(StateId, f64)>, NoveltyError> {
        let mut best: Option<(StateId, f64)> = None;
        for e in &self.entries {
            let s = similarity(sig, &e.signature)?;
            if best.is_none_or(|(_, b)| s > b) {
                best = Some((e.id, s));
            }
        }
        Ok(best)
    }

    /// Assigns `sig` to an existing state, or registers it as a new one when
    /// nothing is at least `epsilon` similar.
    pub fn classify(
        &mut self,
        sig: &StateSignature,
        epsilon: f64,
        step: u64,
        item_count: usize,
    ) -> Result<(StateId, bool), NoveltyError> {
        if !(epsilon > 0.0 && epsilon <= 1.0) {
            return Err(NoveltyError::Epsilon(epsilon));
        }
        match self.nearest(sig)? {
            Some((id, s)) if s >= epsilon => Ok((id, false)),
            _ => {
                let id = self.entries.len() as StateId;
                self.entries.push(RegistryEntry {
                    id,
                    signature: sig.clone(),
                    first_seen_step: step,
                    item_count,
                });
                Ok((id, true))
            }
        }
    }

    /// CSV with one row per state: id, step first seen, item-set size.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), NoveltyError> {
        let mut out = csv::Writer::from_writer(w);
        let err = |e: csv::Error| NoveltyError::Export(e.to_string());
        out.write_record(["state_id", "first_seen_step", "item_count"]).map_err(err)?;
        for e in &self.entries {
            out.write_record([e.id.to_string(), e.first_seen_step.to_string(), e.item_count.to_string()])
                .map_err(err)?;
        }
        out.flush().map_err(|e| NoveltyError::Export(e.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub epsilon: f64,
    /// Fraction of the steady summaries that coincided at `epsilon`.
    pub coincide_fraction: f64,
    /// No grid value reached the target and the grid minimum was returned.
    pub degenerate: bool,
}

/// Fraction of summaries that land on an existing state when classified in
/// order against a fresh registry.
pub fn coincide_fraction(sigs: &[StateSignature], epsilon: f64) -> Result<f64, NoveltyError> {
    let mut reg = StateRegistry::new();
    let mut hits = 0usize;
    for (i, s) in sigs.iter().enumerate() {
        if !reg.classify(s, epsilon, i as u64, 0)?.1 {
            hits += 1;
        }
    }
    Ok(hits as f64 / sigs.len().max(1) as f64)
}

/// The largest ε on a 0.01 grid that makes at least 90% of steady
/// signatures coincide under sequential classification.
pub fn calibrate_signatures(sigs: &[StateSignature]) -> Result<Calibration, NoveltyError> {
    if sigs.len() < MIN_CALIBRATION_SAMPLES {
        return Err(NoveltyError::TooFewSamples(sigs.len()));
    }
    for step in (1..=100).rev() {
        let epsilon = step as f64 / 100.0;
        let frac = coincide_fraction(sigs, epsilon)?;
        if frac >= COINCIDE_TARGET {
            return Ok(Calibration { epsilon, coincide_fraction: frac, degenerate: false });
        }
    }
    let frac = coincide_fraction(sigs, 0.01)?;
    log::warn!("no threshold makes {:.0}% of steady states coincide; using 0.01", COINCIDE_TARGET * 100.0);
    Ok(Calibration { epsilon: 0.01, coincide_fraction: frac, degenerate: true })
}

pub fn calibrate(
    steady: &[EventHistory],
    k: usize,
    hash_seed: u64,
) -> Result<Calibration, NoveltyError> {
    if steady.len() < MIN_CALIBRATION_SAMPLES {
        return Err(NoveltyError::TooFewSamples(steady.len()));
    }
    let sigs = steady.iter().map(|h| signature(h, k, hash_seed)).collect::<Result<Vec<_>, _>>()?;
    calibrate_signatures(&sigs)
}
