//! Temperature sampling and logit constraints.

use super::ModelError;
use crate::tokenizer::{
    Token, DURATION_BASE, DURATION_BINS, ONSET_BASE, ONSET_BINS, PITCH_VELOCITY_BASE, TIME_STEP_MS, VELOCITY_LEVELS,
};

/// Masks logits before sampling. `apply` sets disallowed ids to `-inf`;
/// `observe` is told every token actually emitted.
pub trait LogitConstraint {
    fn apply(&self, logits: &mut [f32]);
    fn observe(&mut self, id: usize);
}

/// Closure-driven constraint; the closure receives the decoding step.
pub struct FnConstraint<F> {
    f: F,
    step: usize,
}

impl<F: Fn(usize, &mut [f32])> FnConstraint<F> {
    pub fn new(f: F) -> Self {
        Self { f, step: 0 }
    }
}

impl<F: Fn(usize, &mut [f32])> LogitConstraint for FnConstraint<F> {
    fn apply(&self, logits: &mut [f32]) {
        (self.f)(self.step, logits)
    }

    fn observe(&mut self, _id: usize) {
        self.step += 1;
    }
}

/// Sets everything outside `allowed` ranges to `-inf`.
pub(crate) fn keep_only(logits: &mut [f32], allowed: &[std::ops::Range<usize>]) {
    let mut next = 0;
    let mut sorted = allowed.to_vec();
    sorted.sort_by_key(|r| r.start);
    for r in sorted {
        for x in &mut logits[next.min(r.start)..r.start] {
            *x = f32::NEG_INFINITY;
        }
        next = next.max(r.end);
    }
    let n = logits.len();
    for x in &mut logits[next.min(n)..] {
        *x = f32::NEG_INFINITY;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Expect {
    OnsetOrEnd,
    Duration,
    PitchVelocity,
}

/// Keeps generated segments well formed: complete Onset, Duration,
/// PitchVelocity triples with non-decreasing onsets, closed by End. When the
/// remaining budget cannot fit another triple, only End is allowed.
#[derive(Debug, Clone)]
pub struct GrammarConstraint {
    expect: Expect,
    min_onset_bin: usize,
    remaining: usize,
}

impl GrammarConstraint {
    /// `budget` counts every token the decoder may still emit, End included.
    pub fn new(budget: usize) -> Self {
        Self { expect: Expect::OnsetOrEnd, min_onset_bin: 0, remaining: budget }
    }

    pub fn at_triple_boundary(&self) -> bool {
        self.expect == Expect::OnsetOrEnd
    }

    pub fn onset_range(&self) -> std::ops::Range<usize> {
        let base = ONSET_BASE as usize;
        base + self.min_onset_bin..base + ONSET_BINS
    }
}

pub(crate) fn end_id() -> usize {
    Token::End.id() as usize
}

impl LogitConstraint for GrammarConstraint {
    fn apply(&self, logits: &mut [f32]) {
        let end = end_id();
        match self.expect {
            Expect::OnsetOrEnd if self.remaining < 4 => keep_only(logits, &[end..end + 1]),
            Expect::OnsetOrEnd => keep_only(logits, &[end..end + 1, self.onset_range()]),
            Expect::Duration => {
                let b = DURATION_BASE as usize;
                keep_only(logits, &[b..b + DURATION_BINS])
            }
            Expect::PitchVelocity => {
                let b = PITCH_VELOCITY_BASE as usize;
                keep_only(logits, &[b..b + 128 * VELOCITY_LEVELS])
            }
        }
    }

    fn observe(&mut self, id: usize) {
        self.remaining = self.remaining.saturating_sub(1);
        self.expect = match self.expect {
            Expect::OnsetOrEnd => {
                if let Some(Token::Onset(t)) = Token::from_id(id as u32) {
                    self.min_onset_bin = (t / TIME_STEP_MS) as usize;
                }
                Expect::Duration
            }
            Expect::Duration => Expect::PitchVelocity,
            Expect::PitchVelocity => Expect::OnsetOrEnd,
        };
    }
}

/// `softmax(z / tau)` computed in double precision. Entries at `-inf` get
/// exactly zero probability.
pub fn softmax_with_temperature(logits: &[f32], tau: f64) -> Result<Vec<f64>, ModelError> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(ModelError::BadTemperature(tau));
    }
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    if max == f32::NEG_INFINITY {
        return Ok(vec![0.0; logits.len()]);
    }
    let max = f64::from(max);
    let mut probs: Vec<f64> = logits
        .iter()
        .map(|&z| if z == f32::NEG_INFINITY { 0.0 } else { ((f64::from(z) - max) / tau).exp() })
        .collect();
    let sum: f64 = probs.iter().sum();
    probs.iter_mut().for_each(|p| *p /= sum);
    Ok(probs)
}

/// Inverse-CDF draw with `u` in `[0, 1)`. Returns `None` when every
/// probability is zero. Zero-probability entries are never returned.
pub fn sample_index(probs: &[f64], u: f64) -> Option<usize> {
    let mut acc = 0.0;
    let mut last = None;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            acc += p;
            last = Some(i);
            if u < acc {
                return Some(i);
            }
        }
    }
    last
}
