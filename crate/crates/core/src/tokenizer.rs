//! Chunked absolute-onset tokenization.
//!
//! A piece is cut into 5000 ms segments. Inside a segment every note becomes
//! the triple `Onset, Duration, PitchVelocity`, with onsets measured from the
//! segment start. Segments are joined by [`Token::SegmentSep`]. Onsets and
//! durations are quantized to 10 ms and velocities to steps of 15.

use std::fmt;
use std::io::{self, BufRead, Write};
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corruption::CorruptionKind;
use crate::midi::{Genre, NoteEvent, Piece};

pub const SEGMENT_MS: u32 = 5000;
pub const TIME_STEP_MS: u32 = 10;
pub const MAX_ONSET_MS: u32 = SEGMENT_MS - TIME_STEP_MS;
pub const MIN_DURATION_MS: u32 = TIME_STEP_MS;
pub const MAX_DURATION_MS: u32 = 30_000;
pub const VELOCITY_STEP: u8 = 15;
pub const MAX_VELOCITY: u8 = 120;
pub const VELOCITY_LEVELS: usize = 9;
pub const ONSET_BINS: usize = (MAX_ONSET_MS / TIME_STEP_MS) as usize + 1;
pub const DURATION_BINS: usize = (MAX_DURATION_MS / TIME_STEP_MS) as usize;
pub const VOCAB_VERSION: &str = "cadenza-chunked-onset-v1";

/// Magic bytes of the packed binary token format.
pub const BINARY_MAGIC: [u8; 4] = *b"CDZT";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Token {
    Pad,
    Start,
    End,
    /// `<T>`: boundary between two 5000 ms segments.
    SegmentSep,
    /// `<sep>`: delimits a corrupted segment frame.
    Sep,
    WholeMask,
    PitchVelocityMask,
    OnsetDurationMask,
    Genre(Genre),
    Corruption(CorruptionKind),
    /// Onset in ms from the segment start, a multiple of 10 in `0..=4990`.
    Onset(u32),
    /// Duration in ms, a multiple of 10 in `10..=30000`.
    Duration(u32),
    PitchVelocity { pitch: u8, velocity: u8 },
}

const SPECIALS: [Token; 8] = [
    Token::Pad,
    Token::Start,
    Token::End,
    Token::SegmentSep,
    Token::Sep,
    Token::WholeMask,
    Token::PitchVelocityMask,
    Token::OnsetDurationMask,
];
const GENRE_BASE: u32 = SPECIALS.len() as u32;
const KIND_BASE: u32 = GENRE_BASE + Genre::ALL.len() as u32;
pub const ONSET_BASE: u32 = KIND_BASE + CorruptionKind::ALL.len() as u32;
pub const DURATION_BASE: u32 = ONSET_BASE + ONSET_BINS as u32;
pub const PITCH_VELOCITY_BASE: u32 = DURATION_BASE + DURATION_BINS as u32;
/// Total number of token ids.
pub const VOCAB_SIZE: usize = PITCH_VELOCITY_BASE as usize + 128 * VELOCITY_LEVELS;

impl Token {
    pub fn id(self) -> u32 {
        match self {
            Token::Genre(g) => GENRE_BASE + g.index() as u32,
            Token::Corruption(k) => KIND_BASE + u32::from(k.id()) - 1,
            Token::Onset(t) => ONSET_BASE + t / TIME_STEP_MS,
            Token::Duration(d) => DURATION_BASE + d / TIME_STEP_MS - 1,
            Token::PitchVelocity { pitch, velocity } => {
                PITCH_VELOCITY_BASE + u32::from(pitch) * VELOCITY_LEVELS as u32 + u32::from(velocity / VELOCITY_STEP)
            }
            special => SPECIALS.iter().position(|&s| s == special).expect("special token") as u32,
        }
    }

    pub fn from_id(id: u32) -> Option<Token> {
        if id < GENRE_BASE {
            return Some(SPECIALS[id as usize]);
        }
        if id < KIND_BASE {
            return Genre::from_index((id - GENRE_BASE) as usize).map(Token::Genre);
        }
        if id < ONSET_BASE {
            return CorruptionKind::from_id((id - KIND_BASE + 1) as u8).ok().map(Token::Corruption);
        }
        if id < DURATION_BASE {
            return Some(Token::Onset((id - ONSET_BASE) * TIME_STEP_MS));
        }
        if id < PITCH_VELOCITY_BASE {
            return Some(Token::Duration((id - DURATION_BASE + 1) * TIME_STEP_MS));
        }
        if (id as usize) < VOCAB_SIZE {
            let rel = id - PITCH_VELOCITY_BASE;
            let pitch = (rel / VELOCITY_LEVELS as u32) as u8;
            let velocity = (rel % VELOCITY_LEVELS as u32) as u8 * VELOCITY_STEP;
            return Some(Token::PitchVelocity { pitch, velocity });
        }
        None
    }

    /// True if the token's values lie on the quantization grid.
    pub fn is_valid(self) -> bool {
        match self {
            Token::Onset(t) => t <= MAX_ONSET_MS && t % TIME_STEP_MS == 0,
            Token::Duration(d) => (MIN_DURATION_MS..=MAX_DURATION_MS).contains(&d) && d % TIME_STEP_MS == 0,
            Token::PitchVelocity { pitch, velocity } => {
                pitch <= 127 && velocity <= MAX_VELOCITY && velocity % VELOCITY_STEP == 0
            }
            _ => true,
        }
    }

    pub fn is_onset(self) -> bool {
        matches!(self, Token::Onset(_))
    }
}

impl fmt::Display for Token {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Token::Pad => f.write_str("PAD"),
            Token::Start => f.write_str("START"),
            Token::End => f.write_str("END"),
            Token::SegmentSep => f.write_str("SEGMENT"),
            Token::Sep => f.write_str("SEP"),
            Token::WholeMask => f.write_str("MASK_WHOLE"),
            Token::PitchVelocityMask => f.write_str("MASK_PITCH_VELOCITY"),
            Token::OnsetDurationMask => f.write_str("MASK_ONSET_DURATION"),
            Token::Genre(g) => write!(f, "GENRE {g}"),
            Token::Corruption(k) => write!(f, "CORRUPTION {}", k.name()),
            Token::Onset(t) => write!(f, "ONSET {t}"),
            Token::Duration(d) => write!(f, "DURATION {d}"),
            Token::PitchVelocity { pitch, velocity } => write!(f, "PITCH_VELOCITY {pitch} {velocity}"),
        }
    }
}

impl std::str::FromStr for Token {
    type Err = String;

    fn from_str(line: &str) -> Result<Self, Self::Err> {
        let mut parts = line.split_whitespace();
        let kind = parts.next().ok_or("empty token line")?;
        let mut num = |what: &str| -> Result<u32, String> {
            parts
                .next()
                .ok_or_else(|| format!("{kind}: missing {what}"))?
                .parse::<u32>()
                .map_err(|e| format!("{kind}: bad {what}: {e}"))
        };
        let token = match kind {
            "PAD" => Token::Pad,
            "START" => Token::Start,
            "END" => Token::End,
            "SEGMENT" => Token::SegmentSep,
            "SEP" => Token::Sep,
            "MASK_WHOLE" => Token::WholeMask,
            "MASK_PITCH_VELOCITY" => Token::PitchVelocityMask,
            "MASK_ONSET_DURATION" => Token::OnsetDurationMask,
            "ONSET" => Token::Onset(num("onset")?),
            "DURATION" => Token::Duration(num("duration")?),
            "PITCH_VELOCITY" => {
                let pitch = num("pitch")?;
                let velocity = num("velocity")?;
                if pitch > 127 || velocity > 127 {
                    return Err(format!("PITCH_VELOCITY {pitch} {velocity}: out of range"));
                }
                Token::PitchVelocity { pitch: pitch as u8, velocity: velocity as u8 }
            }
            "GENRE" => Token::Genre(parts.next().ok_or("GENRE: missing name")?.parse()?),
            "CORRUPTION" => {
                Token::Corruption(
                    parts
                        .next()
                        .ok_or("CORRUPTION: missing kind")?
                        .parse::<CorruptionKind>()
                        .map_err(|e| e.to_string())?,
                )
            }
            other => return Err(format!("unknown token kind `{other}`")),
        };
        if !token.is_valid() {
            return Err(format!("`{line}` is off the quantization grid"));
        }
        Ok(token)
    }
}

/// Every token with its id, in id order. Id 0 is [`Token::Pad`].
pub fn vocab() -> &'static [(Token, u32)] {
    static VOCAB: OnceLock<Vec<(Token, u32)>> = OnceLock::new();
    VOCAB.get_or_init(|| {
        (0..VOCAB_SIZE as u32)
            .map(|id| (Token::from_id(id).expect("dense id space"), id))
            .collect()
    })
}

/// Stable 64-bit FNV-1a hash of the vocabulary version string.
pub fn vocab_hash() -> u64 {
    fnv1a(VOCAB_VERSION.as_bytes())
}

pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3))
}

/// A quantized note inside a segment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SegmentNote {
    /// Onset relative to the segment start, multiple of 10 in `0..=4990`.
    pub onset: u32,
    pub duration: u32,
    pub pitch: u8,
    pub velocity: u8,
}

impl SegmentNote {
    pub fn new(onset: u32, duration: u32, pitch: u8, velocity: u8) -> Self {
        Self { onset, duration, pitch, velocity }
    }

    pub fn tokens(&self) -> [Token; 3] {
        [
            Token::Onset(self.onset),
            Token::Duration(self.duration),
            Token::PitchVelocity { pitch: self.pitch, velocity: self.velocity },
        ]
    }

    /// Snaps every field onto the token grid.
    pub fn quantized(self) -> SegmentNote {
        SegmentNote {
            onset: quantize_time(self.onset).min(MAX_ONSET_MS),
            duration: quantize_duration(self.duration),
            pitch: self.pitch.min(127),
            velocity: quantize_velocity(self.velocity),
        }
    }
}

/// One 5000 ms window. `index` is 1-based.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Segment {
    pub index: usize,
    pub notes: Vec<SegmentNote>,
}

impl Segment {
    pub fn new(index: usize, notes: Vec<SegmentNote>) -> Self {
        let mut s = Segment { index, notes };
        s.normalize();
        s
    }

    pub fn empty(index: usize) -> Self {
        Segment { index, notes: Vec::new() }
    }

    pub fn is_empty(&self) -> bool {
        self.notes.is_empty()
    }

    pub fn len(&self) -> usize {
        self.notes.len()
    }

    /// Sorts by `(onset, pitch)` and drops repeated `(onset, pitch)` pairs.
    pub fn normalize(&mut self) {
        self.notes.sort_by_key(|n| (n.onset, n.pitch, std::cmp::Reverse(n.duration)));
        self.notes.dedup_by_key(|n| (n.onset, n.pitch));
    }

    /// Token payload of this segment (no separators).
    pub fn tokens(&self) -> Vec<Token> {
        self.notes.iter().flat_map(SegmentNote::tokens).collect()
    }
}

/// Rounds to the nearest 10 ms, ties up.
pub fn quantize_time(ms: u32) -> u32 {
    (ms + TIME_STEP_MS / 2) / TIME_STEP_MS * TIME_STEP_MS
}

pub fn quantize_duration(ms: u32) -> u32 {
    let q = quantize_time(ms).clamp(MIN_DURATION_MS, MAX_DURATION_MS);
    if ms > MAX_DURATION_MS + TIME_STEP_MS / 2 {
        log::warn!("duration {ms} ms clamped to {MAX_DURATION_MS} ms");
    }
    q
}

/// Rounds to the nearest multiple of 15 (ties up), capped at 120.
pub fn quantize_velocity(v: u8) -> u8 {
    let v = u32::from(v);
    let step = u32::from(VELOCITY_STEP);
    (((v + step / 2) / step * step) as u8).min(MAX_VELOCITY)
}

/// Splits a piece into quantized 5000 ms segments.
///
/// A note lands in segment `onset / 5000 + 1` (1-based); its relative onset
/// is rounded to 10 ms and clamped to 4990 so it never leaves the segment.
/// Empty segments between notes are kept so indices stay contiguous.
pub fn segment(piece: &Piece) -> Vec<Segment> {
    let Some(last) = piece.events.iter().map(|e| e.onset_ms).max() else {
        return Vec::new();
    };
    let count = (last / SEGMENT_MS) as usize + 1;
    let mut segments: Vec<Segment> = (1..=count).map(Segment::empty).collect();
    for e in &piece.events {
        let idx = (e.onset_ms / SEGMENT_MS) as usize;
        let note = SegmentNote::new(e.onset_ms % SEGMENT_MS, e.duration_ms, e.pitch, e.velocity).quantized();
        segments[idx].notes.push(note);
    }
    for s in &mut segments {
        s.normalize();
    }
    segments
}

/// Inverse of [`segment`] for already-quantized segments.
pub fn desegment(segments: &[Segment], genre: Option<Genre>, source_id: impl Into<String>) -> Piece {
    let events = segments
        .iter()
        .enumerate()
        .flat_map(|(pos, s)| {
            let base = pos as u32 * SEGMENT_MS;
            s.notes.iter().map(move |n| NoteEvent::new(n.pitch, n.velocity, base + n.onset, n.duration))
        })
        .collect();
    Piece::new(events, genre, source_id)
}

/// A flat token stream.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub tokens: Vec<Token>,
    pub vocab_version: String,
}

impl TokenSequence {
    pub fn new(tokens: Vec<Token>) -> Self {
        Self { tokens, vocab_version: VOCAB_VERSION.to_string() }
    }

    pub fn ids(&self) -> Vec<u32> {
        self.tokens.iter().map(|t| t.id()).collect()
    }

    pub fn from_ids(ids: &[u32]) -> Result<Self, TokenizerError> {
        ids.iter()
            .enumerate()
            .map(|(i, &id)| Token::from_id(id).ok_or(TokenizerError::UnknownId { index: i, id }))
            .collect::<Result<Vec<_>, _>>()
            .map(TokenSequence::new)
    }

    /// Writes one `KIND value [value]` line per token, preceded by a
    /// `# vocab <version>` comment.
    pub fn write_text<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "# vocab {}", self.vocab_version)?;
        for t in &self.tokens {
            writeln!(w, "{t}")?;
        }
        Ok(())
    }

    pub fn read_text<R: BufRead>(r: R) -> Result<Self, TokenizerError> {
        let mut tokens = Vec::new();
        let mut version = VOCAB_VERSION.to_string();
        for (lineno, line) in r.lines().enumerate() {
            let line = line.map_err(|e| TokenizerError::Format(e.to_string()))?;
            let trimmed = line.trim();
            if let Some(comment) = trimmed.strip_prefix('#') {
                if let Some(v) = comment.trim().strip_prefix("vocab ") {
                    version = v.trim().to_string();
                }
                continue;
            }
            if trimmed.is_empty() {
                continue;
            }
            let token = trimmed
                .parse()
                .map_err(|e: String| TokenizerError::Format(format!("line {}: {e}", lineno + 1)))?;
            tokens.push(token);
        }
        if version != VOCAB_VERSION {
            return Err(TokenizerError::VocabMismatch { found: version });
        }
        Ok(TokenSequence { tokens, vocab_version: version })
    }

    /// Packed format: 16-byte header (magic, vocab hash as u64 LE, token
    /// count as u32 LE) followed by one u16 LE id per token.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 2 * self.tokens.len());
        out.extend_from_slice(&BINARY_MAGIC);
        out.extend_from_slice(&fnv1a(self.vocab_version.as_bytes()).to_le_bytes());
        out.extend_from_slice(&(self.tokens.len() as u32).to_le_bytes());
        for t in &self.tokens {
            out.extend_from_slice(&(t.id() as u16).to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, TokenizerError> {
        if bytes.len() < 16 || bytes[..4] != BINARY_MAGIC {
            return Err(TokenizerError::Format("missing token file header".into()));
        }
        let hash = u64::from_le_bytes(bytes[4..12].try_into().expect("8 bytes"));
        if hash != vocab_hash() {
            return Err(TokenizerError::VocabMismatch { found: format!("hash {hash:016x}") });
        }
        let count = u32::from_le_bytes(bytes[12..16].try_into().expect("4 bytes")) as usize;
        let body = &bytes[16..];
        if body.len() != count * 2 {
            return Err(TokenizerError::Format(format!("expected {count} ids, found {} bytes", body.len())));
        }
        let ids: Vec<u32> = body.chunks_exact(2).map(|c| u32::from(u16::from_le_bytes([c[0], c[1]]))).collect();
        Self::from_ids(&ids)
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TokenizerError {
    #[error("token {index}: {found} where {expected} was expected")]
    Structure { index: usize, found: String, expected: &'static str },
    #[error("token {index}: unknown id {id}")]
    UnknownId { index: usize, id: u32 },
    #[error("vocabulary mismatch: {found}")]
    VocabMismatch { found: String },
    #[error("token format: {0}")]
    Format(String),
}

/// Encodes segments as note triples joined by `<T>`.
pub fn encode(segments: &[Segment]) -> TokenSequence {
    let mut tokens = Vec::new();
    for (i, s) in segments.iter().enumerate() {
        if i > 0 {
            tokens.push(Token::SegmentSep);
        }
        tokens.extend(s.tokens());
    }
    TokenSequence::new(tokens)
}

/// Result of decoding a token stream.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Decoded {
    pub segments: Vec<Segment>,
    /// Incomplete triples dropped (and, for lossy decoding, stray tokens skipped).
    pub repairs: usize,
}

#[derive(Clone, Copy, PartialEq)]
enum Expect {
    Onset,
    Duration(u32),
    PitchVelocity(u32, u32),
}

/// Decodes a note stream back into segments.
///
/// A triple cut short by `<T>`, `End` or the end of the stream is dropped and
/// counted as a repair. Tokens arriving out of triple order, or tokens that
/// do not belong in a note stream (frames, masks, genre), are errors.
/// An empty stream decodes to no segments.
pub fn decode(tokens: &[Token]) -> Result<Decoded, TokenizerError> {
    decode_impl(tokens, false)
}

/// Like [`decode`] but skips offending tokens instead of failing. Used for
/// free-running model output.
pub fn decode_lossy(tokens: &[Token]) -> Decoded {
    decode_impl(tokens, true).expect("lossy decoding never fails")
}

fn decode_impl(tokens: &[Token], lossy: bool) -> Result<Decoded, TokenizerError> {
    let body: &[Token] = match tokens.first() {
        Some(Token::Start) => &tokens[1..],
        _ => tokens,
    };
    if body.is_empty() || body.first() == Some(&Token::End) {
        return Ok(Decoded { segments: Vec::new(), repairs: 0 });
    }
    let mut segments = vec![Segment::empty(1)];
    let mut expect = Expect::Onset;
    let mut repairs = 0;
    let fail = |index: usize, found: Token, expected: &'static str| TokenizerError::Structure {
        index,
        found: found.to_string(),
        expected,
    };
    let offset = tokens.len() - body.len();
    for (i, &tok) in body.iter().enumerate() {
        let index = i + offset;
        match (tok, expect) {
            (Token::Pad, _) => continue,
            (Token::End, e) => {
                if e != Expect::Onset {
                    repairs += 1;
                }
                expect = Expect::Onset;
                break;
            }
            (Token::SegmentSep, e) => {
                if e != Expect::Onset {
                    repairs += 1;
                }
                expect = Expect::Onset;
                let next = segments.len() + 1;
                segments.push(Segment::empty(next));
            }
            (Token::Onset(t), Expect::Onset) if tok.is_valid() => expect = Expect::Duration(t),
            (Token::Duration(d), Expect::Duration(t)) if tok.is_valid() => expect = Expect::PitchVelocity(t, d),
            (Token::PitchVelocity { pitch, velocity }, Expect::PitchVelocity(t, d)) if tok.is_valid() => {
                segments.last_mut().expect("non-empty").notes.push(SegmentNote::new(t, d, pitch, velocity));
                expect = Expect::Onset;
            }
            (Token::Onset(t), _) if lossy && tok.is_valid() => {
                // Restart the triple at the new onset.
                repairs += 1;
                expect = Expect::Duration(t);
            }
            (_, e) if lossy => {
                let _ = e;
                repairs += 1;
            }
            (_, e) => {
                let expected = match e {
                    Expect::Onset => "an onset, <T> or END",
                    Expect::Duration(_) => "a duration",
                    Expect::PitchVelocity(..) => "a pitch-velocity",
                };
                return Err(fail(index, tok, expected));
            }
        }
    }
    if expect != Expect::Onset {
        repairs += 1;
    }
    for s in &mut segments {
        s.normalize();
    }
    Ok(Decoded { segments, repairs })
}
