//! Tabular Q-learning over abstract states with softmax action selection.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::novelty::StateId;

pub const DEFAULT_ALPHA: f64 = 0.1;
pub const DEFAULT_GAMMA: f64 = 0.6;
pub const CHECKPOINT_VERSION: u32 = 1;

/// Reward for reaching a state already observed.
pub const KNOWN_STATE_REWARD: f64 = -1.0;
/// Reward for reaching a state never observed before.
pub const NEW_STATE_REWARD: f64 = 0.0;

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("{0} must lie in (0, 1], got {1}")]
    Parameter(&'static str, f64),
    #[error("action {0} out of range for {1} actions")]
    Action(usize, usize),
    #[error("every action is masked out")]
    EmptyMask,
    #[error("mask has {0} entries for {1} actions")]
    MaskLength(usize, usize),
    #[error("Q({0}, {1}) = {2} left the bound [{3}, 0]")]
    Bound(StateId, usize, f64, f64),
    #[error("reward {0} is not one of -1 or 0")]
    Reward(f64),
    #[error("checkpoint version {0} is not supported (expected {CHECKPOINT_VERSION})")]
    Version(u32),
    #[error("checkpoint does not match the action alphabet: {0}")]
    Alphabet(String),
    #[error("checkpoint I/O: {0}")]
    Io(String),
}

pub fn reward(was_new: bool) -> f64 {
    if was_new {
        NEW_STATE_REWARD
    } else {
        KNOWN_STATE_REWARD
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QTable {
    actions: Vec<String>,
    alpha: f64,
    gamma: f64,
    rows: BTreeMap<StateId, Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    version: u32,
    actions: Vec<String>,
    alpha: f64,
    gamma: f64,
    rows: Vec<(StateId, Vec<f64>)>,
}

impl QTable {
    pub fn new(actions: Vec<String>, alpha: f64, gamma: f64) -> Result<Self, PolicyError> {
        for (name, v) in [("alpha", alpha), ("gamma", gamma)] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(PolicyError::Parameter(name, v));
            }
        }
        Ok(QTable { actions, alpha, gamma, rows: BTreeMap::new() })
    }

    pub fn action_count(&self) -> usize {
        self.actions.len()
    }

    pub fn actions(&self) -> &[String] {
        &self.actions
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn state_count(&self) -> usize {
        self.rows.len()
    }

    /// Creates an all-zero row for `s` if it has none yet.
    pub fn ensure_row(&mut self, s: StateId) -> &mut Vec<f64> {
        let n = self.actions.len();
        self.rows.entry(s).or_insert_with(|| vec![0.0; n])
    }

    pub fn row(&self, s: StateId) -> Option<&[f64]> {
        self.rows.get(&s).map(Vec::as_slice)
    }

    pub fn q(&self, s: StateId, a: usize) -> f64 {
        self.rows.get(&s).map_or(0.0, |r| r[a])
    }

    /// Smallest value a Q entry can take with rewards in {-1, 0}.
    pub fn lower_bound(&self) -> f64 {
        KNOWN_STATE_REWARD / (1.0 - self.gamma)
    }

    /// Q(s,a) ← (1−α)·Q(s,a) + α·(r + γ·max Q(s′,·)). Returns the new value.
    pub fn update(&mut self, s: StateId, a: usize, r: f64, s_next: StateId) -> Result<f64, PolicyError> {
        if a >= self.actions.len() {
            return Err(PolicyError::Action(a, self.actions.len()));
        }
        if r != KNOWN_STATE_REWARD && r != NEW_STATE_REWARD {
            return Err(PolicyError::Reward(r));
        }
        let best_next = self.ensure_row(s_next).iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let (alpha, gamma) = (self.alpha, self.gamma);
        let lower = self.lower_bound();
        let q = &mut self.ensure_row(s)[a];
        *q = (1.0 - alpha) * *q + alpha * (r + gamma * best_next);
        if *q > 0.0 || *q < lower - 1e-9 {
            return Err(PolicyError::Bound(s, a, *q, lower));
        }
        Ok(*q)
    }

    /// Softmax probabilities for state `s`. Masked-out actions get 0 and the
    /// rest are renormalised.
    pub fn distribution(&self, s: StateId, mask: Option<&[bool]>) -> Result<Vec<f64>, PolicyError> {
        let n = self.actions.len();
        if let Some(m) = mask {
            if m.len() != n {
                return Err(PolicyError::MaskLength(m.len(), n));
            }
        }
        let allowed = |i: usize| mask.is_none_or(|m| m[i]);
        let zeros = vec![0.0; n];
        let row = self.rows.get(&s).unwrap_or(&zeros);
        let max = (0..n).filter(|&i| allowed(i)).map(|i| row[i]).fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            return Err(PolicyError::EmptyMask);
        }
        let weights: Vec<f64> =
            (0..n).map(|i| if allowed(i) { (row[i] - max).exp() } else { 0.0 }).collect();
        let total: f64 = weights.iter().sum();
        Ok(weights.into_iter().map(|w| w / total).collect())
    }

    /// Samples an action: the first whose cumulative probability exceeds a
    /// uniform draw.
    pub fn select(&self, s: StateId, mask: Option<&[bool]>, rng: &mut impl Rng) -> Result<usize, PolicyError> {
        let d = self.distribution(s, mask)?;
        let p: f64 = rng.gen();
        Ok(sample_cumulative(&d, p))
    }

    /// CSV grid: one row per state, one column per action.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), PolicyError> {
        let mut out = csv::Writer::from_writer(w);
        let io = |e: csv::Error| PolicyError::Io(e.to_string());
        let mut header = vec!["state_id".to_owned()];
        header.extend(self.actions.iter().cloned());
        out.write_record(&header).map_err(io)?;
        for (s, row) in &self.rows {
            let mut rec = vec![s.to_string()];
            rec.extend(row.iter().map(|q| format!("{q:.6}")));
            out.write_record(&rec).map_err(io)?;
        }
        out.flush().map_err(|e| PolicyError::Io(e.to_string()))
    }

    pub fn save_checkpoint<W: Write>(&self, w: W) -> Result<(), PolicyError> {
        let cp = Checkpoint {
            version: CHECKPOINT_VERSION,
            actions: self.actions.clone(),
            alpha: self.alpha,
            gamma: self.gamma,
            rows: self.rows.iter().map(|(s, r)| (*s, r.clone())).collect(),
        };
        serde_json::to_writer_pretty(w, &cp).map_err(|e| PolicyError::Io(e.to_string()))
    }

    /// Loads a checkpoint written for the same action alphabet.
    pub fn load_checkpoint<R: Read>(r: R, actions: &[String]) -> Result<Self, PolicyError> {
        let v: serde_json::Value = serde_json::from_reader(r).map_err(|e| PolicyError::Io(e.to_string()))?;
        let version = v.get("version").and_then(serde_json::Value::as_u64).unwrap_or(0) as u32;
        if version != CHECKPOINT_VERSION {
            return Err(PolicyError::Version(version));
        }
        let cp: Checkpoint = serde_json::from_value(v).map_err(|e| PolicyError::Io(e.to_string()))?;
        if cp.actions != actions {
            return Err(PolicyError::Alphabet(format!("{:?} vs {:?}", cp.actions, actions)));
        }
        if let Some((s, row)) = cp.rows.iter().find(|(_, r)| r.len() != actions.len()) {
            return Err(PolicyError::Alphabet(format!("row {s} has {} entries", row.len())));
        }
        let mut t = QTable::new(cp.actions, cp.alpha, cp.gamma)?;
        t.rows = cp.rows.into_iter().collect();
        Ok(t)
    }
}

fn sample_cumulative(d: &[f64], p: f64) -> usize {
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &w) in d.iter().enumerate() {
        if w == 0.0 {
            continue;
        }
        acc += w;
        last = i;
        if acc > p {
            return i;
        }
    }
    last
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn table(n: usize) -> QTable {
        QTable::new((0..n).map(|i| format!("a{i}")).collect(), DEFAULT_ALPHA, DEFAULT_GAMMA).unwrap()
    }

    #[test]
    fn reward_values() {
        assert_eq!(reward(false), -1.0);
        assert_eq!(reward(true), 0.0);
    }

    #[test]
    fn update_hand_computed() {
        let mut q = table(4);
        assert!((q.update(0, 1, -1.0, 1).unwrap() - (-0.1)).abs() < 1e-12);
        q.ensure_row(2).copy_from_slice(&[-0.05, -0.2, -0.3, -0.4]);
        let v = q.update(0, 1, 0.0, 2).unwrap();
        assert!((v - (-0.093)).abs() < 1e-12, "{v}");
        let before = q.q(3, 0);
        assert_eq!(q.update(3, 0, 0.0, 4).unwrap(), before);
    }

    #[test]
    fn rejects_bad_inputs() {
        let mut q = table(2);
        assert!(matches!(q.update(0, 2, -1.0, 0), Err(PolicyError::Action(2, 2))));
        assert!(matches!(q.update(0, 0, 1.0, 0), Err(PolicyError::Reward(_))));
        assert!(QTable::new(vec![], 0.0, 0.6).is_err());
        assert!(QTable::new(vec![], 0.1, 1.5).is_err());
        assert!(matches!(q.distribution(0, Some(&[false, false])), Err(PolicyError::EmptyMask)));
        assert!(matches!(q.distribution(0, Some(&[true])), Err(PolicyError::MaskLength(1, 2))));
    }

    #[test]
    fn softmax_examples() {
        let d = table(4).distribution(7, None).unwrap();
        for p in d {
            assert!((p - 0.25).abs() < 1e-12);
        }
        let mut q = table(2);
        q.ensure_row(0).copy_from_slice(&[0.0, 2f64.ln()]);
        let d = q.distribution(0, None).unwrap();
        assert!((d[0] - 1.0 / 3.0).abs() < 1e-12 && (d[1] - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_is_shift_invariant_and_stable() {
        let mut q = table(3);
        q.ensure_row(0).copy_from_slice(&[-1.0, -2.0, -0.5]);
        q.ensure_row(1).copy_from_slice(&[-1001.0, -1002.0, -1000.5]);
        let (a, b) = (q.distribution(0, None).unwrap(), q.distribution(1, None).unwrap());
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn mask_renormalises() {
        let q = table(4);
        let d = q.distribution(0, Some(&[true, false, true, false])).unwrap();
        assert_eq!(d, vec![0.5, 0.0, 0.5, 0.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let a = q.select(0, Some(&[false, false, true, false]), &mut rng).unwrap();
            assert_eq!(a, 2);
        }
    }

    #[test]
    fn sampling_matches_distribution() {
        let mut q = table(3);
        q.ensure_row(0).copy_from_slice(&[0.0, -0.7, -1.9]);
        let d = q.distribution(0, None).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut counts = [0usize; 3];
        let n = 100_000;
        for _ in 0..n {
            counts[q.select(0, None, &mut rng).unwrap()] += 1;
        }
        for i in 0..3 {
            assert!((counts[i] as f64 / n as f64 - d[i]).abs() < 0.01);
        }
    }

    #[test]
    fn learns_to_prefer_novelty() {
        // Action 0 always reaches a fresh state, action 1 always returns to
        // the start state.
        let mut q = table(2);
        let mut next_fresh = 1;
        for i in 0..200 {
            if i % 2 == 0 {
                q.update(0, 0, 0.0, next_fresh).unwrap();
                next_fresh += 1;
            } else {
                q.update(0, 1, -1.0, 0).unwrap();
            }
        }
        let d = q.distribution(0, None).unwrap();
        assert!(d[0] > d[1]);
    }

    #[test]
    fn values_stay_bounded_under_punishment() {
        let mut q = table(2);
        for i in 0..5000 {
            let v = q.update(0, i % 2, -1.0, 0).unwrap();
            assert!((-2.5 - 1e-9..=0.0).contains(&v));
        }
        assert!((q.q(0, 0) + 2.5).abs() < 1e-6);
    }

    #[test]
    fn checkpoint_round_trip_and_csv() {
        let mut q = table(2);
        q.update(0, 1, -1.0, 3).unwrap();
        let mut buf = Vec::new();
        q.save_checkpoint(&mut buf).unwrap();
        let back = QTable::load_checkpoint(buf.as_slice(), q.actions()).unwrap();
        assert_eq!(back, q);
        let other: Vec<String> = vec!["x".into(), "y".into()];
        assert!(matches!(QTable::load_checkpoint(buf.as_slice(), &other), Err(PolicyError::Alphabet(_))));
        let bumped = String::from_utf8(buf).unwrap().replace("\"version\": 1", "\"version\": 9");
        assert!(matches!(
            QTable::load_checkpoint(bumped.as_bytes(), q.actions()),
            Err(PolicyError::Version(9))
        ));
        let mut csv = Vec::new();
        q.write_csv(&mut csv).unwrap();
        assert_eq!(
            String::from_utf8(csv).unwrap(),
            "state_id,a0,a1\n0,0.000000,-0.100000\n3,0.000000,0.000000\n"
        );
    }
}
