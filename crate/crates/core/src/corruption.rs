//! The nine segment corruption functions and the `<sep> <G> payload <sep>` frame.
//!
//! Every function is a pure transform of a [`Segment`] given a seed. The
//! note-level functions return a corrupted `Segment`; the mask functions
//! produce token payloads directly.

use std::fmt;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::midi::Genre;
use crate::tokenizer::{quantize_time, Segment, SegmentNote, Token, MAX_ONSET_MS};

/// Notes whose onsets fall within this window are treated as one chord.
pub const CHORD_WINDOW_MS: u32 = 50;
const SKYLINE_VELOCITY: u8 = 90;
const TRANSPOSE_RANGE: i32 = 5;
const NOTE_MOD_MIN_GAP_MS: u32 = 50;
const NOTE_MOD_LONG_NOTE_MS: u32 = 500;
const INSERTED_VELOCITIES: [u8; 5] = [45, 60, 75, 90, 105];

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CorruptionError {
    #[error("unknown corruption kind id {0} (valid ids are 1..=9)")]
    UnknownId(u8),
    #[error("unknown corruption kind `{0}`; valid kinds: {valid}", valid = CorruptionKind::names().join(", "))]
    UnknownName(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CorruptionKind {
    PitchVelocityMask,
    OnsetDurationMask,
    WholeMask,
    PermutePitch,
    PermutePitchVelocity,
    Fragmentation,
    IncorrectTransposition,
    NoteModification,
    Skyline,
}

impl CorruptionKind {
    pub const ALL: [CorruptionKind; 9] = [
        CorruptionKind::PitchVelocityMask,
        CorruptionKind::OnsetDurationMask,
        CorruptionKind::WholeMask,
        CorruptionKind::PermutePitch,
        CorruptionKind::PermutePitchVelocity,
        CorruptionKind::Fragmentation,
        CorruptionKind::IncorrectTransposition,
        CorruptionKind::NoteModification,
        CorruptionKind::Skyline,
    ];

    /// 1-based id.
    pub fn id(self) -> u8 {
        Self::ALL.iter().position(|&k| k == self).expect("listed") as u8 + 1
    }

    pub fn from_id(id: u8) -> Result<Self, CorruptionError> {
        id.checked_sub(1)
            .and_then(|i| Self::ALL.get(usize::from(i)).copied())
            .ok_or(CorruptionError::UnknownId(id))
    }

    pub fn name(self) -> &'static str {
        match self {
            CorruptionKind::PitchVelocityMask => "pitch-velocity-mask",
            CorruptionKind::OnsetDurationMask => "onset-duration-mask",
            CorruptionKind::WholeMask => "whole-mask",
            CorruptionKind::PermutePitch => "permute-pitch",
            CorruptionKind::PermutePitchVelocity => "permute-pitch-velocity",
            CorruptionKind::Fragmentation => "fragmentation",
            CorruptionKind::IncorrectTransposition => "incorrect-transposition",
            CorruptionKind::NoteModification => "note-modification",
            CorruptionKind::Skyline => "skyline",
        }
    }

    pub fn names() -> Vec<&'static str> {
        Self::ALL.iter().map(|k| k.name()).collect()
    }

    /// True if the payload contains mask tokens and cannot be decoded to notes.
    pub fn uses_masks(self) -> bool {
        matches!(
            self,
            CorruptionKind::PitchVelocityMask | CorruptionKind::OnsetDurationMask | CorruptionKind::WholeMask
        )
    }
}

impl fmt::Display for CorruptionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for CorruptionKind {
    type Err = CorruptionError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if let Ok(id) = s.parse::<u8>() {
            return Self::from_id(id);
        }
        let norm = s.to_ascii_lowercase().replace('_', "-");
        Self::ALL
            .iter()
            .copied()
            .find(|k| k.name() == norm)
            .ok_or_else(|| CorruptionError::UnknownName(s.to_string()))
    }
}

/// A framed corrupted segment: `<sep>, <G>, payload..., <sep>`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorruptedSegment {
    pub tokens: Vec<Token>,
    pub kind: CorruptionKind,
    pub seed: u64,
}

impl CorruptedSegment {
    fn framed(payload: Vec<Token>, genre: Genre, kind: CorruptionKind, seed: u64) -> Self {
        let mut tokens = Vec::with_capacity(payload.len() + 3);
        tokens.push(Token::Sep);
        tokens.push(Token::Genre(genre));
        tokens.extend(payload);
        tokens.push(Token::Sep);
        Self { tokens, kind, seed }
    }

    /// Tokens between the genre token and the closing `<sep>`.
    pub fn payload(&self) -> &[Token] {
        &self.tokens[2..self.tokens.len() - 1]
    }

    pub fn genre(&self) -> Genre {
        match self.tokens[1] {
            Token::Genre(g) => g,
            other => unreachable!("frame always carries a genre token, found {other}"),
        }
    }
}

fn rng_for(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn pitch_velocity_mask(s: &Segment) -> Vec<Token> {
    s.notes
        .iter()
        .flat_map(|n| [Token::Onset(n.onset), Token::Duration(n.duration), Token::PitchVelocityMask])
        .collect()
}

pub fn onset_duration_mask(s: &Segment) -> Vec<Token> {
    s.notes
        .iter()
        .flat_map(|n| {
            [
                Token::OnsetDurationMask,
                Token::OnsetDurationMask,
                Token::PitchVelocity { pitch: n.pitch, velocity: n.velocity },
            ]
        })
        .collect()
}

pub fn whole_mask(_s: &Segment) -> Vec<Token> {
    vec![Token::WholeMask]
}

/// Shuffles pitches across note slots; timing and velocities stay put.
/// Slot order is the input's `(onset, pitch)` order and is not re-sorted.
pub fn permute_pitch(s: &Segment, seed: u64) -> Segment {
    let mut rng = rng_for(seed);
    let mut pitches: Vec<u8> = s.notes.iter().map(|n| n.pitch).collect();
    pitches.shuffle(&mut rng);
    let notes = s.notes.iter().zip(pitches).map(|(n, pitch)| SegmentNote { pitch, ..*n }).collect();
    Segment { index: s.index, notes }
}

/// Shuffles `(pitch, velocity)` pairs jointly across note slots.
pub fn permute_pitch_velocity(s: &Segment, seed: u64) -> Segment {
    let mut rng = rng_for(seed);
    let mut pairs: Vec<(u8, u8)> = s.notes.iter().map(|n| (n.pitch, n.velocity)).collect();
    pairs.shuffle(&mut rng);
    let notes = s
        .notes
        .iter()
        .zip(pairs)
        .map(|(n, (pitch, velocity))| SegmentNote { pitch, velocity, ..*n })
        .collect();
    Segment { index: s.index, notes }
}

/// Number of notes fragmentation keeps out of `n` for keep ratio `ratio`.
pub fn fragment_keep_count(n: usize, ratio: f64) -> usize {
    if n == 0 {
        return 0;
    }
    ((ratio * n as f64).round() as usize).clamp(1, n)
}

/// Keeps the first 20-50% of notes in onset order.
pub fn fragmentation(s: &Segment, seed: u64) -> Segment {
    let mut rng = rng_for(seed);
    let ratio: f64 = rng.random_range(0.2..=0.5);
    let k = fragment_keep_count(s.notes.len(), ratio);
    Segment { index: s.index, notes: s.notes[..k].to_vec() }
}

/// Shifts exactly `n / 2` randomly chosen notes by a nonzero offset in
/// `[-5, 5]` semitones (clamped to the MIDI range).
pub fn incorrect_transposition(s: &Segment, seed: u64) -> Segment {
    let mut rng = rng_for(seed);
    let n = s.notes.len();
    let mut notes = s.notes.clone();
    for idx in rand::seq::index::sample(&mut rng, n, n / 2) {
        let mut offset = rng.random_range(-TRANSPOSE_RANGE..TRANSPOSE_RANGE);
        if offset >= 0 {
            offset += 1;
        }
        notes[idx].pitch = (i32::from(notes[idx].pitch) + offset).clamp(0, 127) as u8;
    }
    Segment { index: s.index, notes }
}

/// Two-phase note modification.
///
/// Phase one scans left to right and omits each eligible note (onset at least
/// 50 ms after the previous kept note) with probability `p1 ~ U[0.1, 0.4]`,
/// adding its duration to the previous kept note. Phase two follows every
/// note longer than 500 ms with a new note with probability `p2 ~ U[0.1, 0.4]`
/// (drawn once per segment): placed at the long note's midpoint, pitch within
/// five semitones, velocity from {45, 60, .., 105}.
pub fn note_modification(s: &Segment, seed: u64) -> Segment {
    let mut rng = rng_for(seed);
    let p_omit: f64 = rng.random_range(0.1..=0.4);
    let p_insert: f64 = rng.random_range(0.1..=0.4);

    let mut kept: Vec<SegmentNote> = Vec::with_capacity(s.notes.len());
    for &note in &s.notes {
        match kept.last_mut() {
            Some(prev) if note.onset >= prev.onset + NOTE_MOD_MIN_GAP_MS && rng.random_bool(p_omit) => {
                prev.duration += note.duration;
            }
            _ => kept.push(note),
        }
    }

    let mut out = Vec::with_capacity(kept.len() * 2);
    for note in kept {
        out.push(note);
        if note.duration > NOTE_MOD_LONG_NOTE_MS && rng.random_bool(p_insert) {
            let mut offset = rng.random_range(-TRANSPOSE_RANGE..TRANSPOSE_RANGE);
            if offset >= 0 {
                offset += 1;
            }
            let half = note.duration / 2;
            let onset = quantize_time(note.onset + half).min(MAX_ONSET_MS);
            out.push(SegmentNote {
                onset,
                duration: quantize_time(note.duration - half).max(10),
                pitch: (i32::from(note.pitch) + offset).clamp(0, 127) as u8,
                velocity: *INSERTED_VELOCITIES.choose(&mut rng).expect("non-empty"),
            });
        }
    }
    Segment::new(s.index, out)
}

/// Groups notes into chords: a group starts at its earliest note and takes
/// every later note whose onset is less than 50 ms after that start.
pub fn chord_groups(notes: &[SegmentNote]) -> Vec<&[SegmentNote]> {
    let mut groups = Vec::new();
    let mut start = 0;
    for i in 1..=notes.len() {
        if i == notes.len() || notes[i].onset >= notes[start].onset + CHORD_WINDOW_MS {
            groups.push(&notes[start..i]);
            start = i;
        }
    }
    groups
}

/// Keeps the highest pitch of each chord group (the earliest such note on
/// ties) at the group's earliest onset, with velocity fixed to 90.
pub fn skyline(s: &Segment) -> Segment {
    let notes = chord_groups(&s.notes)
        .into_iter()
        .map(|group| {
            let top = group.iter().rev().max_by_key(|n| n.pitch).expect("groups are non-empty");
            SegmentNote { onset: group[0].onset, velocity: SKYLINE_VELOCITY, ..*top }
        })
        .collect();
    Segment::new(s.index, notes)
}

/// Corrupted payload tokens for `kind`.
pub fn payload(s: &Segment, kind: CorruptionKind, seed: u64) -> Vec<Token> {
    match kind {
        CorruptionKind::PitchVelocityMask => pitch_velocity_mask(s),
        CorruptionKind::OnsetDurationMask => onset_duration_mask(s),
        CorruptionKind::WholeMask => whole_mask(s),
        _ => corrupt_notes(s, kind, seed).expect("note-level kind").tokens(),
    }
}

/// Note-level result for the mask-free kinds, `None` for mask kinds.
pub fn corrupt_notes(s: &Segment, kind: CorruptionKind, seed: u64) -> Option<Segment> {
    Some(match kind {
        CorruptionKind::PermutePitch => permute_pitch(s, seed),
        CorruptionKind::PermutePitchVelocity => permute_pitch_velocity(s, seed),
        CorruptionKind::Fragmentation => fragmentation(s, seed),
        CorruptionKind::IncorrectTransposition => incorrect_transposition(s, seed),
        CorruptionKind::NoteModification => note_modification(s, seed),
        CorruptionKind::Skyline => skyline(s),
        _ => return None,
    })
}

/// Corrupts `s` with `kind` and wraps the payload in the genre frame.
pub fn corrupt(s: &Segment, kind: CorruptionKind, genre: Genre, seed: u64) -> CorruptedSegment {
    CorruptedSegment::framed(payload(s, kind, seed), genre, kind, seed)
}

/// [`corrupt`] addressed by numeric kind id.
pub fn corrupt_by_id(s: &Segment, kind_id: u8, genre: Genre, seed: u64) -> Result<CorruptedSegment, CorruptionError> {
    Ok(corrupt(s, CorruptionKind::from_id(kind_id)?, genre, seed))
}
