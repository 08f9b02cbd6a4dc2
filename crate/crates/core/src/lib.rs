//! Corruption-refinement toolkit for expressive solo-piano MIDI.

pub mod corpus;
pub mod corruption;
pub mod engine;
pub mod metrics;
pub mod midi;
pub mod model;
pub mod nn;
pub mod tokenizer;

pub use corruption::{corrupt, CorruptedSegment, CorruptionKind};
pub use midi::{parse_midi, write_midi, Genre, NoteEvent, Piece};
pub use tokenizer::{decode, encode, segment, Segment, SegmentNote, Token, TokenSequence};
