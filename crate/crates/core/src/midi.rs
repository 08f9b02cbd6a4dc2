//! Standard MIDI File reading and writing for solo piano.
//!
//! Parsing flattens every piano-program channel of an SMF type 0 or 1 file
//! into one sorted stream of [`NoteEvent`]s with millisecond timing. Sustain
//! pedal (CC64) is folded into note durations. Writing uses a fixed grid of
//! 500 ticks per quarter at 120 BPM, so one tick is exactly one millisecond
//! and `parse_midi(write_midi(p))` reproduces `p` field for field.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Ticks per quarter note used by [`write_midi`].
pub const WRITE_TICKS_PER_QUARTER: u16 = 500;
/// Microseconds per quarter note used by [`write_midi`] (120 BPM).
pub const WRITE_TEMPO_US: u32 = 500_000;

const DEFAULT_TEMPO_US: u32 = 500_000;
const SUSTAIN_CC: u8 = 64;
const DRUM_CHANNEL: u8 = 9;
/// Manufacturer id reserved for non-commercial use; tags our zero-velocity marker.
const NON_COMMERCIAL_ID: u8 = 0x7D;
const ZERO_VELOCITY_TAG: [u8; 2] = [b'V', b'0'];
const GENRE_TEXT_PREFIX: &str = "genre:";

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MidiError {
    #[error("malformed MIDI at byte {offset}: {reason}")]
    Malformed { offset: usize, reason: String },
    #[error("unsupported MIDI at byte {offset}: {reason}")]
    Unsupported { offset: usize, reason: String },
}

impl MidiError {
    pub fn offset(&self) -> usize {
        match self {
            MidiError::Malformed { offset, .. } | MidiError::Unsupported { offset, .. } => *offset,
        }
    }
}

/// Genre label attached to a piece.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Genre {
    Classical,
    Jazz,
}

impl Genre {
    pub const ALL: [Genre; 2] = [Genre::Classical, Genre::Jazz];

    pub fn name(self) -> &'static str {
        match self {
            Genre::Classical => "classical",
            Genre::Jazz => "jazz",
        }
    }

    pub fn index(self) -> usize {
        match self {
            Genre::Classical => 0,
            Genre::Jazz => 1,
        }
    }

    pub fn from_index(i: usize) -> Option<Genre> {
        Genre::ALL.get(i).copied()
    }

    pub fn other(self) -> Genre {
        match self {
            Genre::Classical => Genre::Jazz,
            Genre::Jazz => Genre::Classical,
        }
    }
}

impl fmt::Display for Genre {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Genre {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "classical" => Ok(Genre::Classical),
            "jazz" => Ok(Genre::Jazz),
            other => Err(format!("unknown genre `{other}` (expected classical or jazz)")),
        }
    }
}

/// One piano note with absolute millisecond timing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct NoteEvent {
    pub pitch: u8,
    pub velocity: u8,
    pub onset_ms: u32,
    pub duration_ms: u32,
}

impl NoteEvent {
    pub fn new(pitch: u8, velocity: u8, onset_ms: u32, duration_ms: u32) -> Self {
        Self { pitch, velocity, onset_ms, duration_ms }
    }

    pub fn offset_ms(&self) -> u32 {
        self.onset_ms + self.duration_ms
    }

    fn sort_key(&self) -> (u32, u8) {
        (self.onset_ms, self.pitch)
    }
}

/// A solo piano piece: sorted note events plus labels.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Piece {
    pub events: Vec<NoteEvent>,
    pub genre: Option<Genre>,
    pub source_id: String,
}

impl Piece {
    /// Builds a piece, restoring the sort order and dropping duplicate
    /// `(onset, pitch)` pairs (the longest duration wins).
    pub fn new(mut events: Vec<NoteEvent>, genre: Option<Genre>, source_id: impl Into<String>) -> Self {
        normalize_events(&mut events);
        Self { events, genre, source_id: source_id.into() }
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// End of the last sounding note.
    pub fn end_ms(&self) -> u32 {
        self.events.iter().map(NoteEvent::offset_ms).max().unwrap_or(0)
    }

    /// Checks the sorted/unique/range invariants.
    pub fn validate(&self) -> Result<(), String> {
        for (i, e) in self.events.iter().enumerate() {
            if e.pitch > 127 || e.velocity > 127 {
                return Err(format!("event {i}: pitch/velocity out of range"));
            }
            if e.duration_ms == 0 {
                return Err(format!("event {i}: zero duration"));
            }
            if i > 0 && self.events[i - 1].sort_key() >= e.sort_key() {
                return Err(format!("event {i}: not strictly sorted by (onset, pitch)"));
            }
        }
        Ok(())
    }
}

/// Sorts by `(onset, pitch)` and merges duplicates, keeping the longer note.
pub fn normalize_events(events: &mut Vec<NoteEvent>) {
    events.sort_by_key(|e| (e.onset_ms, e.pitch, std::cmp::Reverse(e.duration_ms)));
    events.dedup_by_key(|e| (e.onset_ms, e.pitch));
}

/// Non-fatal issues found while parsing.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ParseWarnings {
    /// Note-ons with no matching note-off; closed at the end of their track.
    pub unclosed_notes: usize,
    /// Notes cut short because the same key was struck again.
    pub restruck_notes: usize,
    /// Notes dropped because they belonged to drum or non-piano channels.
    pub skipped_non_piano: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParsedMidi {
    pub piece: Piece,
    pub warnings: ParseWarnings,
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(data: &'a [u8]) -> Self {
        Self { data, pos: 0 }
    }

    fn malformed(&self, reason: impl Into<String>) -> MidiError {
        MidiError::Malformed { offset: self.pos, reason: reason.into() }
    }

    fn remaining(&self) -> usize {
        self.data.len() - self.pos
    }

    fn u8(&mut self) -> Result<u8, MidiError> {
        let b = *self.data.get(self.pos).ok_or_else(|| self.malformed("unexpected end of data"))?;
        self.pos += 1;
        Ok(b)
    }

    fn bytes(&mut self, n: usize) -> Result<&'a [u8], MidiError> {
        if self.remaining() < n {
            return Err(self.malformed(format!("need {n} bytes, {} left", self.remaining())));
        }
        let out = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u16(&mut self) -> Result<u16, MidiError> {
        let b = self.bytes(2)?;
        Ok(u16::from_be_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32, MidiError> {
        let b = self.bytes(4)?;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn vlq(&mut self) -> Result<u32, MidiError> {
        let start = self.pos;
        let mut value: u32 = 0;
        for _ in 0..4 {
            let b = self.u8()?;
            value = (value << 7) | u32::from(b & 0x7F);
            if b & 0x80 == 0 {
                return Ok(value);
            }
        }
        Err(MidiError::Malformed { offset: start, reason: "variable-length quantity longer than 4 bytes".into() })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum RawKind {
    // Ordering here is the processing order for events sharing a tick.
    NoteOff,
    Pedal { down: bool },
    Program(u8),
    ZeroVelocityMark,
    NoteOn { velocity: u8 },
}

#[derive(Debug, Clone, Copy)]
struct RawEvent {
    tick: u64,
    track: usize,
    seq: usize,
    channel: u8,
    key: u8,
    kind: RawKind,
}

enum Division {
    Metrical(u16),
    /// Ticks per second for SMPTE timing.
    Timecode(f64),
}

struct TempoMap {
    division: Division,
    /// (tick, microseconds per quarter), sorted by tick.
    changes: Vec<(u64, u32)>,
}

impl TempoMap {
    fn to_ms(&self, tick: u64) -> f64 {
        match self.division {
            Division::Timecode(ticks_per_sec) => tick as f64 * 1000.0 / ticks_per_sec,
            Division::Metrical(tpq) => {
                let tpq = f64::from(tpq);
                let mut ms = 0.0;
                let mut last_tick = 0u64;
                let mut tempo = DEFAULT_TEMPO_US;
                for &(t, us) in &self.changes {
                    if t >= tick {
                        break;
                    }
                    ms += (t - last_tick) as f64 * f64::from(tempo) / (tpq * 1000.0);
                    last_tick = t;
                    tempo = us;
                }
                ms + (tick - last_tick) as f64 * f64::from(tempo) / (tpq * 1000.0)
            }
        }
    }
}

fn is_piano_program(program: u8) -> bool {
    program < 8
}

/// Parses an SMF type 0 or 1 file into a solo-piano [`Piece`].
///
/// Re-striking a key that is still sounding (held or pedal-sustained)
/// truncates the earlier note at the new onset.
pub fn parse_midi(bytes: &[u8]) -> Result<ParsedMidi, MidiError> {
    let mut r = Reader::new(bytes);
    if r.remaining() == 0 {
        return Err(r.malformed("empty file"));
    }
    let magic = r.bytes(4)?;
    if magic != b"MThd" {
        return Err(MidiError::Malformed { offset: 0, reason: "missing MThd header".into() });
    }
    let header_len = r.u32()? as usize;
    if header_len < 6 {
        return Err(MidiError::Malformed { offset: 4, reason: format!("header length {header_len} < 6") });
    }
    let format_offset = r.pos;
    let format = r.u16()?;
    let ntracks = r.u16()?;
    let division_word = r.u16()?;
    r.bytes(header_len - 6)?;
    if format > 1 {
        return Err(MidiError::Unsupported { offset: format_offset, reason: format!("SMF format {format}") });
    }
    let division = if division_word & 0x8000 == 0 {
        if division_word == 0 {
            return Err(MidiError::Malformed { offset: format_offset + 4, reason: "zero ticks per quarter".into() });
        }
        Division::Metrical(division_word)
    } else {
        let fps = -((division_word >> 8) as i8) as f64;
        let sub = f64::from(division_word & 0xFF);
        let fps = if fps == 29.0 { 29.97 } else { fps };
        if fps <= 0.0 || sub == 0.0 {
            return Err(MidiError::Malformed { offset: format_offset + 4, reason: "invalid SMPTE division".into() });
        }
        Division::Timecode(fps * sub)
    };

    let mut raw = Vec::new();
    let mut tempo_changes = Vec::new();
    let mut source_id = String::new();
    let mut genre = None;
    let mut tracks_seen = 0usize;
    let mut track_ends = Vec::new();
    while r.remaining() > 0 && tracks_seen < usize::from(ntracks) {
        let chunk_start = r.pos;
        let id = r.bytes(4)?;
        let len = r.u32()? as usize;
        if r.remaining() < len {
            return Err(MidiError::Malformed {
                offset: chunk_start,
                reason: format!("chunk length {len} exceeds remaining {} bytes", r.remaining()),
            });
        }
        if id != b"MTrk" {
            r.bytes(len)?;
            continue;
        }
        let end = r.pos + len;
        let mut t = Reader { data: &bytes[..end], pos: r.pos };
        track_ends.push(read_track(&mut t, tracks_seen, &mut raw, &mut tempo_changes, &mut source_id, &mut genre)?);
        r.pos = end;
        tracks_seen += 1;
    }
    if tracks_seen < usize::from(ntracks) {
        return Err(r.malformed(format!("header declares {ntracks} tracks, found {tracks_seen}")));
    }

    tempo_changes.sort_by_key(|&(t, _)| t);
    let tempo = TempoMap { division, changes: tempo_changes };
    let (events, warnings) = assemble_notes(raw, &track_ends, &tempo);
    Ok(ParsedMidi { piece: Piece::new(events, genre, source_id), warnings })
}

fn read_track(
    t: &mut Reader<'_>,
    track: usize,
    raw: &mut Vec<RawEvent>,
    tempo: &mut Vec<(u64, u32)>,
    source_id: &mut String,
    genre: &mut Option<Genre>,
) -> Result<u64, MidiError> {
    let mut tick = 0u64;
    let mut running: Option<u8> = None;
    let mut seq = 0usize;
    let mut push = |tick: u64, channel: u8, key: u8, kind: RawKind, seq: &mut usize| {
        raw.push(RawEvent { tick, track, seq: *seq, channel, key, kind });
        *seq += 1;
    };
    while t.remaining() > 0 {
        tick += u64::from(t.vlq()?);
        let status_offset = t.pos;
        let first = t.u8()?;
        let status = if first & 0x80 != 0 {
            first
        } else {
            t.pos -= 1;
            running.ok_or_else(|| MidiError::Malformed {
                offset: status_offset,
                reason: "data byte without running status".into(),
            })?
        };
        match status {
            0xFF => {
                let meta_type = t.u8()?;
                let len = t.vlq()? as usize;
                let data = t.bytes(len)?;
                match meta_type {
                    0x2F => break,
                    0x51 if len == 3 => {
                        let us = u32::from(data[0]) << 16 | u32::from(data[1]) << 8 | u32::from(data[2]);
                        if us > 0 {
                            tempo.push((tick, us));
                        }
                    }
                    0x03 if source_id.is_empty() => {
                        *source_id = String::from_utf8_lossy(data).into_owned();
                    }
                    0x01 => {
                        let text = String::from_utf8_lossy(data);
                        if let Some(g) = text.strip_prefix(GENRE_TEXT_PREFIX) {
                            *genre = g.parse().ok();
                        }
                    }
                    0x7F if len == 4 && data[0] == NON_COMMERCIAL_ID && data[1..3] == ZERO_VELOCITY_TAG => {
                        push(tick, 0xFF, data[3] & 0x7F, RawKind::ZeroVelocityMark, &mut seq);
                    }
                    _ => {}
                }
                running = None;
            }
            0xF0 | 0xF7 => {
                let len = t.vlq()? as usize;
                t.bytes(len)?;
                running = None;
            }
            0x80..=0xEF => {
                running = Some(status);
                let channel = status & 0x0F;
                let d1 = t.u8()?;
                let needs_two = !matches!(status & 0xF0, 0xC0 | 0xD0);
                let d2 = if needs_two { t.u8()? } else { 0 };
                if d1 & 0x80 != 0 || d2 & 0x80 != 0 {
                    return Err(MidiError::Malformed { offset: status_offset, reason: "data byte with high bit set".into() });
                }
                match status & 0xF0 {
                    0x80 => push(tick, channel, d1, RawKind::NoteOff, &mut seq),
                    0x90 if d2 == 0 => push(tick, channel, d1, RawKind::NoteOff, &mut seq),
                    0x90 => push(tick, channel, d1, RawKind::NoteOn { velocity: d2 }, &mut seq),
                    0xB0 if d1 == SUSTAIN_CC => push(tick, channel, 0, RawKind::Pedal { down: d2 >= 64 }, &mut seq),
                    0xC0 => push(tick, channel, 0, RawKind::Program(d1), &mut seq),
                    _ => {}
                }
            }
            _ => {
                return Err(MidiError::Malformed {
                    offset: status_offset,
                    reason: format!("unexpected status byte 0x{status:02X}"),
                })
            }
        }
    }
    Ok(tick)
}

#[derive(Debug, Clone, Copy)]
struct Sounding {
    track: usize,
    start_tick: u64,
    velocity: u8,
    /// Key released while the pedal was down.
    released: bool,
}

fn assemble_notes(mut raw: Vec<RawEvent>, track_ends: &[u64], tempo: &TempoMap) -> (Vec<NoteEvent>, ParseWarnings) {
    let mut warnings = ParseWarnings::default();
    // Zero-velocity markers apply to the note-on at the same tick in the same track.
    let mut zero_marks: BTreeMap<(usize, u64, u8), usize> = BTreeMap::new();
    for e in raw.iter().filter(|e| e.kind == RawKind::ZeroVelocityMark) {
        *zero_marks.entry((e.track, e.tick, e.key)).or_default() += 1;
    }
    raw.retain(|e| e.kind != RawKind::ZeroVelocityMark);
    // Programs and pedal are per channel; tracks are interleaved by tick.
    raw.sort_by_key(|e| (e.tick, e.kind_rank(), e.track, e.seq));

    let mut program = [0u8; 16];
    let mut pedal_down = [false; 16];
    let mut sounding: BTreeMap<(u8, u8), Sounding> = BTreeMap::new();
    let mut notes: Vec<(u64, u64, u8, u8)> = Vec::new();

    for e in &raw {
        let ch = usize::from(e.channel & 0x0F);
        match e.kind {
            RawKind::Program(p) => program[ch] = p,
            RawKind::Pedal { down } => {
                pedal_down[ch] = down;
                if !down {
                    let released: Vec<(u8, u8)> = sounding
                        .iter()
                        .filter(|(&(c, _), s)| c == e.channel && s.released)
                        .map(|(&k, _)| k)
                        .collect();
                    for k in released {
                        let s = sounding.remove(&k).expect("present");
                        notes.push((s.start_tick, e.tick, k.1, s.velocity));
                    }
                }
            }
            RawKind::NoteOff => {
                if let Some(s) = sounding.get_mut(&(e.channel, e.key)) {
                    if pedal_down[ch] {
                        s.released = true;
                    } else {
                        let s = sounding.remove(&(e.channel, e.key)).expect("present");
                        notes.push((s.start_tick, e.tick, e.key, s.velocity));
                    }
                }
            }
            RawKind::NoteOn { velocity } => {
                if e.channel == DRUM_CHANNEL || !is_piano_program(program[ch]) {
                    warnings.skipped_non_piano += 1;
                    continue;
                }
                let velocity = match zero_marks.get_mut(&(e.track, e.tick, e.key)) {
                    Some(n) if *n > 0 => {
                        *n -= 1;
                        0
                    }
                    _ => velocity,
                };
                if let Some(old) = sounding.remove(&(e.channel, e.key)) {
                    warnings.restruck_notes += 1;
                    notes.push((old.start_tick, e.tick, e.key, old.velocity));
                }
                sounding.insert((e.channel, e.key), Sounding { track: e.track, start_tick: e.tick, velocity, released: false });
            }
            RawKind::ZeroVelocityMark => unreachable!("filtered above"),
        }
    }
    for ((_, key), s) in sounding {
        if !s.released {
            warnings.unclosed_notes += 1;
        }
        let end = track_ends.get(s.track).copied().unwrap_or(s.start_tick);
        notes.push((s.start_tick, end.max(s.start_tick), key, s.velocity));
    }

    let events = notes
        .into_iter()
        .map(|(start, end, key, velocity)| {
            let onset = tempo.to_ms(start).round() as u32;
            let offset = tempo.to_ms(end).round() as u32;
            NoteEvent::new(key, velocity, onset, offset.saturating_sub(onset).max(1))
        })
        .collect();
    (events, warnings)
}

impl RawEvent {
    fn kind_rank(&self) -> u8 {
        match self.kind {
            RawKind::NoteOff => 0,
            RawKind::Pedal { .. } => 1,
            RawKind::Program(_) => 2,
            RawKind::ZeroVelocityMark => 3,
            RawKind::NoteOn { .. } => 4,
        }
    }
}

fn write_vlq(out: &mut Vec<u8>, mut value: u32) {
    let mut buf = [0u8; 5];
    let mut i = buf.len() - 1;
    buf[i] = (value & 0x7F) as u8;
    value >>= 7;
    while value > 0 {
        i -= 1;
        buf[i] = (value & 0x7F) as u8 | 0x80;
        value >>= 7;
    }
    out.extend_from_slice(&buf[i..]);
}

fn write_meta(track: &mut Vec<u8>, delta: u32, meta_type: u8, data: &[u8]) {
    write_vlq(track, delta);
    track.push(0xFF);
    track.push(meta_type);
    write_vlq(track, data.len() as u32);
    track.extend_from_slice(data);
}

/// Lowest channel (drums excluded) on which each note's pitch is silent at
/// its onset. Falls back to channel 0 when all fifteen are busy.
fn assign_channels(events: &[NoteEvent]) -> Vec<u8> {
    let mut free_at = [[0u32; 128]; 16];
    events
        .iter()
        .map(|e| {
            let key = usize::from(e.pitch.min(127));
            let ch = (0..16u8)
                .filter(|&c| c != DRUM_CHANNEL)
                .find(|&c| free_at[usize::from(c)][key] <= e.onset_ms)
                .unwrap_or(0);
            let slot = &mut free_at[usize::from(ch)][key];
            *slot = (*slot).max(e.offset_ms());
            ch
        })
        .collect()
}

/// Serializes a piece as a single-track SMF (type 0) on the fixed 1 tick = 1 ms grid.
///
/// MIDI cannot express a note-on with velocity 0, so such notes are written
/// with velocity 1 and preceded by a sequencer-specific meta event that
/// [`parse_midi`] understands. Other readers simply see a very quiet note.
///
/// A note that starts while another note of the same pitch is still
/// sounding goes to the next free channel, so both survive a re-read.
pub fn write_midi(piece: &Piece) -> Vec<u8> {
    let channels = assign_channels(&piece.events);
    // (tick, order, bytes): offs sort before ons at the same tick.
    let mut timeline: Vec<(u32, u8, u8, Vec<u8>)> = Vec::with_capacity(piece.events.len() * 2);
    for (e, &ch) in piece.events.iter().zip(&channels) {
        let on_velocity = if e.velocity == 0 { 1 } else { e.velocity.min(127) };
        timeline.push((e.offset_ms(), 0, e.pitch, vec![0x80 | ch, e.pitch, 0]));
        if e.velocity == 0 {
            timeline.push((e.onset_ms, 1, e.pitch, vec![0xFF, 0x7F, 4, NON_COMMERCIAL_ID, ZERO_VELOCITY_TAG[0], ZERO_VELOCITY_TAG[1], e.pitch]));
        }
        timeline.push((e.onset_ms, 2, e.pitch, vec![0x90 | ch, e.pitch, on_velocity]));
    }
    timeline.sort_by(|a, b| (a.0, a.1, a.2).cmp(&(b.0, b.1, b.2)));

    let mut track = Vec::new();
    write_meta(&mut track, 0, 0x03, piece.source_id.as_bytes());
    if let Some(g) = piece.genre {
        write_meta(&mut track, 0, 0x01, format!("{GENRE_TEXT_PREFIX}{g}").as_bytes());
    }
    let t = WRITE_TEMPO_US;
    write_meta(&mut track, 0, 0x51, &[(t >> 16) as u8, (t >> 8) as u8, t as u8]);
    // Program change: acoustic grand on every channel in use.
    let mut used: BTreeSet<u8> = channels.iter().copied().collect();
    used.insert(0);
    for ch in used {
        write_vlq(&mut track, 0);
        track.extend_from_slice(&[0xC0 | ch, 0]);
    }

    let mut now = 0u32;
    for (tick, _, _, bytes) in timeline {
        write_vlq(&mut track, tick - now);
        now = tick;
        track.extend_from_slice(&bytes);
    }
    write_meta(&mut track, 0, 0x2F, &[]);

    let mut out = Vec::with_capacity(track.len() + 22);
    out.extend_from_slice(b"MThd");
    out.extend_from_slice(&6u32.to_be_bytes());
    out.extend_from_slice(&0u16.to_be_bytes());
    out.extend_from_slice(&1u16.to_be_bytes());
    out.extend_from_slice(&WRITE_TICKS_PER_QUARTER.to_be_bytes());
    out.extend_from_slice(b"MTrk");
    out.extend_from_slice(&(track.len() as u32).to_be_bytes());
    out.extend_from_slice(&track);
    out
}
