//! Python bindings: MIDI I/O, tokenization, corruption, metrics, synthetic
//! data and generation with a trained refiner.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::BufReader;

use cadenza::corpus::{generate_synthetic, SyntheticGenreSpec};
use cadenza::engine::{self, KindChoice, PassSchedule, PassSpec, PreservationMask};
use cadenza::metrics::{MetricOptions, MetricsReport};
use cadenza::model::{read_checkpoint, Refiner};
use cadenza::tokenizer::{decode, desegment, encode, segment, TokenSequence, VOCAB_SIZE};
use cadenza::{CorruptionKind, Genre, NoteEvent, Piece};
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyBytes;

fn value_error(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn parse_genre(s: &str) -> PyResult<Genre> {
    s.parse().map_err(|_| value_error(format!("unknown genre `{s}`")))
}

/// A piano performance: notes as `(pitch, velocity, onset_ms, duration_ms)`.
#[pyclass(name = "Piece", skip_from_py_object)]
#[derive(Clone)]
pub struct PyPiece {
    inner: Piece,
}

#[pymethods]
impl PyPiece {
    #[new]
    #[pyo3(signature = (notes, genre=None, source_id=String::new()))]
    fn new(notes: Vec<(u8, u8, u32, u32)>, genre: Option<&str>, source_id: String) -> PyResult<Self> {
        let genre = genre.map(parse_genre).transpose()?;
        let events = notes.into_iter().map(|(p, v, o, d)| NoteEvent::new(p, v, o, d)).collect();
        let inner = Piece::new(events, genre, source_id);
        inner.validate().map_err(value_error)?;
        Ok(Self { inner })
    }

    #[getter]
    fn notes(&self) -> Vec<(u8, u8, u32, u32)> {
        self.inner.events.iter().map(|e| (e.pitch, e.velocity, e.onset_ms, e.duration_ms)).collect()
    }

    #[getter]
    fn genre(&self) -> Option<&'static str> {
        self.inner.genre.map(Genre::name)
    }

    #[getter]
    fn source_id(&self) -> &str {
        &self.inner.source_id
    }

    #[getter]
    fn duration_ms(&self) -> u32 {
        self.inner.end_ms()
    }

    fn __len__(&self) -> usize {
        self.inner.events.len()
    }

    fn __repr__(&self) -> String {
        format!("Piece({} notes, {} ms, genre={:?})", self.inner.events.len(), self.inner.end_ms(), self.genre())
    }
}

#[pyfunction]
fn parse_midi(data: &[u8]) -> PyResult<PyPiece> {
    Ok(PyPiece { inner: cadenza::parse_midi(data).map_err(value_error)?.piece })
}

#[pyfunction]
fn write_midi<'py>(py: Python<'py>, piece: &PyPiece) -> Bound<'py, PyBytes> {
    PyBytes::new(py, &cadenza::write_midi(&piece.inner))
}

/// Token ids of the quantized, segmented piece.
#[pyfunction]
fn tokenize(piece: &PyPiece) -> Vec<u32> {
    encode(&segment(&piece.inner)).ids()
}

#[pyfunction]
fn detokenize(ids: Vec<u32>) -> PyResult<PyPiece> {
    let seq = TokenSequence::from_ids(&ids).map_err(value_error)?;
    let decoded = decode(&seq.tokens).map_err(value_error)?;
    Ok(PyPiece { inner: desegment(&decoded.segments, None, "") })
}

/// Token text of a vocabulary id.
#[pyfunction]
fn token_name(id: u32) -> PyResult<String> {
    cadenza::Token::from_id(id).map(|t| t.to_string()).ok_or_else(|| value_error(format!("id {id} is outside the vocabulary")))
}

#[pyfunction]
fn corruption_kinds() -> Vec<&'static str> {
    CorruptionKind::names()
}

/// Corrupts every segment; returns one list of frame token ids per segment.
#[pyfunction]
#[pyo3(signature = (piece, kind, seed=0, genre="classical"))]
fn corrupt(piece: &PyPiece, kind: &str, seed: u64, genre: &str) -> PyResult<Vec<Vec<u32>>> {
    let kind: CorruptionKind = kind.parse().map_err(value_error)?;
    let genre = parse_genre(genre)?;
    Ok(segment(&piece.inner)
        .iter()
        .map(|s| cadenza::corrupt(s, kind, genre, seed.wrapping_add(s.index as u64)).tokens.iter().map(|t| t.id()).collect())
        .collect())
}

/// Every applicable metric of `generated` against `original`.
#[pyfunction]
fn evaluate(original: &PyPiece, generated: &PyPiece) -> BTreeMap<String, Option<f64>> {
    let r = MetricsReport::compute(&original.inner, &generated.inner, &MetricOptions::default());
    let as_f = |x: Option<usize>| x.map(|v| v as f64);
    BTreeMap::from([
        ("pitch_class_kl".into(), r.pitch_class_kl),
        ("pctm_cosine".into(), r.pctm_cosine),
        ("note_density".into(), r.note_density),
        ("avg_ioi_s".into(), r.avg_ioi_s),
        ("unique_pitches".into(), as_f(r.unique_pitches)),
        ("polyphony_rate".into(), r.polyphony_rate),
        ("tonal_tension_diameter".into(), r.tonal_tension_diameter),
        ("chord_diversity".into(), as_f(r.chord_diversity)),
        ("pitch_in_scale_rate".into(), r.pitch_in_scale_rate),
        ("ssm_correlation".into(), r.ssm_correlation),
    ])
}

/// Synthetic classical-proxy and jazz-proxy pieces.
#[pyfunction]
#[pyo3(signature = (pieces_per_genre, seed=0))]
fn synthetic_corpus(pieces_per_genre: usize, seed: u64) -> PyResult<Vec<PyPiece>> {
    let pieces = generate_synthetic(&SyntheticGenreSpec::classical(), &SyntheticGenreSpec::jazz(), pieces_per_genre, seed)
        .map_err(value_error)?;
    Ok(pieces.into_iter().map(|inner| PyPiece { inner }).collect())
}

/// A trained refinement model.
#[pyclass(name = "Refiner", skip_from_py_object)]
pub struct PyRefiner {
    inner: Refiner,
}

#[pymethods]
impl PyRefiner {
    /// Untrained model of a named preset (micro, tiny, desk, full).
    #[staticmethod]
    #[pyo3(signature = (preset="micro", seed=0))]
    fn untrained(preset: &str, seed: u64) -> PyResult<Self> {
        let preset: cadenza::model::Preset = preset.parse().map_err(value_error)?;
        Ok(Self { inner: Refiner::new(preset.refiner(), seed) })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let f = File::open(path).map_err(value_error)?;
        let ck = read_checkpoint(BufReader::new(f)).map_err(value_error)?;
        Ok(Self { inner: ck.into_refiner().map_err(value_error)? })
    }

    #[getter]
    fn vocab_size(&self) -> usize {
        debug_assert_eq!(self.inner.config().vocab_size, VOCAB_SIZE);
        self.inner.config().vocab_size
    }

    /// Multi-pass improvisation towards `genre`; the first and last segments
    /// are kept.
    #[pyo3(signature = (piece, genre, kind="whole-mask", alpha=1.0, passes=1, left=2, right=2, temperature=1.0, seed=0))]
    #[allow(clippy::too_many_arguments)]
    fn improvise(
        &self,
        piece: &PyPiece,
        genre: &str,
        kind: &str,
        alpha: f64,
        passes: usize,
        left: usize,
        right: usize,
        temperature: f64,
        seed: u64,
    ) -> PyResult<PyPiece> {
        let kind: KindChoice = kind.parse().map_err(value_error)?;
        let target_genre = parse_genre(genre)?;
        let spec = PassSpec { kind, alpha, left, right, target_genre, temperature, seed };
        let segments = segment(&piece.inner);
        let mask = PreservationMask::endpoints(segments.len());
        let state = engine::improvise(&segments, &self.inner, &PassSchedule::repeated(spec, passes), &mask)
            .map_err(value_error)?;
        Ok(PyPiece { inner: desegment(&state.segments, Some(target_genre), piece.inner.source_id.clone()) })
    }
}

#[pymodule(name = "cadenza")]
fn cadenza_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyPiece>()?;
    m.add_class::<PyRefiner>()?;
    m.add_function(wrap_pyfunction!(parse_midi, m)?)?;
    m.add_function(wrap_pyfunction!(write_midi, m)?)?;
    m.add_function(wrap_pyfunction!(tokenize, m)?)?;
    m.add_function(wrap_pyfunction!(detokenize, m)?)?;
    m.add_function(wrap_pyfunction!(token_name, m)?)?;
    m.add_function(wrap_pyfunction!(corruption_kinds, m)?)?;
    m.add_function(wrap_pyfunction!(corrupt, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(synthetic_corpus, m)?)?;
    m.add("VOCAB_SIZE", VOCAB_SIZE)?;
    Ok(())
}
