//! Objective evaluation: pitch statistics, rhythm, harmony, key adherence and
//! structural similarity between an original and a generated piece.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::midi::{Genre, NoteEvent, Piece};

/// Smoothing mass added to every pitch-class bin before the KL divergence.
pub const KL_EPSILON: f64 = 1e-6;
pub const CHORD_WINDOW_MS: u32 = crate::corruption::CHORD_WINDOW_MS;
pub const POLYPHONY_STEP_MS: u32 = 50;
pub const DENSITY_WINDOW_MS: u32 = 5000;
pub const CHROMA_FRAME_MS: u32 = 500;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MetricsError {
    #[error("{0} piece has no notes")]
    EmptyPiece(&'static str),
    #[error("{which} piece needs at least {needed} notes, found {found}")]
    TooFewNotes { which: &'static str, needed: usize, found: usize },
    #[error("{which} piece spans {frames} chroma frame(s); at least 2 are needed")]
    TooShort { which: &'static str, frames: usize },
}

fn pc(p: u8) -> usize {
    usize::from(p % 12)
}

pub fn pitch_class_histogram(p: &Piece) -> [f64; 12] {
    let mut h = [0.0; 12];
    for e in &p.events {
        h[pc(e.pitch)] += 1.0;
    }
    h
}

fn smoothed_distribution(h: &[f64; 12]) -> [f64; 12] {
    let total: f64 = h.iter().sum();
    let mut d = h.map(|c| c / total + KL_EPSILON);
    let z: f64 = d.iter().sum();
    d.iter_mut().for_each(|x| *x /= z);
    d
}

/// `KL(reference || candidate)` between smoothed pitch-class distributions.
pub fn pitch_class_kl(reference: &Piece, candidate: &Piece) -> Result<f64, MetricsError> {
    if reference.is_empty() {
        return Err(MetricsError::EmptyPiece("reference"));
    }
    if candidate.is_empty() {
        return Err(MetricsError::EmptyPiece("candidate"));
    }
    let p = smoothed_distribution(&pitch_class_histogram(reference));
    let q = smoothed_distribution(&pitch_class_histogram(candidate));
    Ok(p.iter().zip(&q).map(|(&a, &b)| a * (a / b).ln()).sum::<f64>().max(0.0))
}

/// 12x12 counts of pitch-class transitions between consecutive notes.
pub fn pitch_class_transitions(p: &Piece) -> [[f64; 12]; 12] {
    let mut m = [[0.0; 12]; 12];
    for w in p.events.windows(2) {
        m[pc(w[0].pitch)][pc(w[1].pitch)] += 1.0;
    }
    m
}

/// Cosine similarity of `a` and `b`; `sqrt(sa * sb)` (rather than
/// `sqrt(sa) * sqrt(sb)`) makes self-similarity exactly one.
fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let sa: f64 = a.iter().map(|x| x * x).sum();
    let sb: f64 = b.iter().map(|x| x * x).sum();
    if sa == 0.0 || sb == 0.0 {
        return 0.0;
    }
    (dot / (sa * sb).sqrt()).clamp(-1.0, 1.0)
}

pub fn pctm_cosine(reference: &Piece, candidate: &Piece) -> Result<f64, MetricsError> {
    for (which, p) in [("reference", reference), ("candidate", candidate)] {
        if p.events.len() < 2 {
            return Err(MetricsError::TooFewNotes { which, needed: 2, found: p.events.len() });
        }
    }
    let a = pitch_class_transitions(reference).concat();
    let b = pitch_class_transitions(candidate).concat();
    Ok(cosine(&a, &b))
}

/// Mean note count per 5 s window, windows anchored at the first onset.
pub fn note_density(p: &Piece) -> f64 {
    let (Some(first), Some(last)) = (p.events.first(), p.events.iter().map(|e| e.onset_ms).max()) else {
        return 0.0;
    };
    let windows = (last - first.onset_ms) / DENSITY_WINDOW_MS + 1;
    p.events.len() as f64 / f64::from(windows)
}

/// Mean inter-onset interval in seconds. With `distinct_only`, notes sharing
/// an onset count once; otherwise every consecutive pair contributes, zero
/// gaps included. Fewer than two onsets gives 0.
pub fn avg_ioi(p: &Piece, distinct_only: bool) -> f64 {
    let mut onsets: Vec<u32> = p.events.iter().map(|e| e.onset_ms).collect();
    if distinct_only {
        onsets.dedup();
    }
    if onsets.len() < 2 {
        return 0.0;
    }
    let span = f64::from(onsets[onsets.len() - 1] - onsets[0]);
    span / (onsets.len() - 1) as f64 / 1000.0
}

pub fn unique_pitches(p: &Piece) -> usize {
    p.events.iter().map(|e| e.pitch).collect::<BTreeSet<_>>().len()
}

fn sounding_at(events: &[NoteEvent], t: u32) -> usize {
    events.iter().filter(|e| e.onset_ms <= t && t < e.onset_ms + e.duration_ms).count()
}

/// On a 50 ms grid from the first onset to the last offset: steps with two
/// or more sounding notes over steps with at least one.
pub fn polyphony_rate(p: &Piece) -> f64 {
    let Some(first) = p.events.first().map(|e| e.onset_ms) else {
        return 0.0;
    };
    let end = p.end_ms();
    let (mut any, mut poly) = (0usize, 0usize);
    // Notes sorted by onset: only those started by `t` can sound at `t`.
    let mut t = first;
    while t < end {
        let started = p.events.partition_point(|e| e.onset_ms <= t);
        let n = sounding_at(&p.events[..started], t);
        any += usize::from(n >= 1);
        poly += usize::from(n >= 2);
        t += POLYPHONY_STEP_MS;
    }
    if any == 0 {
        0.0
    } else {
        poly as f64 / any as f64
    }
}

/// Chord groups: each group starts at its earliest note and takes every later
/// note whose onset is less than 50 ms after that start.
pub fn chord_groups(p: &Piece) -> Vec<&[NoteEvent]> {
    let ev = &p.events;
    let mut groups = Vec::new();
    let mut start = 0;
    for i in 1..=ev.len() {
        if i == ev.len() || ev[i].onset_ms >= ev[start].onset_ms + CHORD_WINDOW_MS {
            groups.push(&ev[start..i]);
            start = i;
        }
    }
    groups
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TensionDistance {
    /// Distance between positions on the circle of fifths.
    #[default]
    CircleOfFifths,
    /// Shortest pitch-class distance in semitones.
    Semitone,
}

fn circular_distance(a: usize, b: usize) -> usize {
    let d = a.abs_diff(b);
    d.min(12 - d)
}

/// Mean over chord groups (two or more notes) of the largest pairwise
/// pitch-class distance, normalized by 6. `None` when the piece has no chords.
pub fn tonal_tension_diameter(p: &Piece, distance: TensionDistance) -> Option<f64> {
    let position = |pitch: u8| match distance {
        TensionDistance::CircleOfFifths => pc(pitch) * 7 % 12,
        TensionDistance::Semitone => pc(pitch),
    };
    let diameters: Vec<f64> = chord_groups(p)
        .into_iter()
        .filter(|g| g.len() >= 2)
        .map(|g| {
            let mut best = 0;
            for (i, a) in g.iter().enumerate() {
                for b in &g[i + 1..] {
                    best = best.max(circular_distance(position(a.pitch), position(b.pitch)));
                }
            }
            best as f64 / 6.0
        })
        .collect();
    (!diameters.is_empty()).then(|| diameters.iter().sum::<f64>() / diameters.len() as f64)
}

/// Number of distinct pitch-class sets among chord groups of two or more notes.
pub fn chord_diversity(p: &Piece) -> usize {
    chord_groups(p)
        .into_iter()
        .filter(|g| g.len() >= 2)
        .map(|g| g.iter().map(|e| pc(e.pitch)).collect::<BTreeSet<_>>())
        .collect::<BTreeSet<_>>()
        .len()
}

const MAJOR_PROFILE: [f64; 12] = [6.35, 2.23, 3.48, 2.33, 4.38, 4.09, 2.52, 5.19, 2.39, 3.66, 2.29, 2.88];
const MINOR_PROFILE: [f64; 12] = [6.33, 2.68, 3.52, 5.38, 2.60, 3.53, 2.54, 4.75, 3.98, 2.69, 3.34, 3.17];
const MAJOR_SCALE: [usize; 7] = [0, 2, 4, 5, 7, 9, 11];
const NATURAL_MINOR_SCALE: [usize; 7] = [0, 2, 3, 5, 7, 8, 10];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Key {
    pub tonic: u8,
    pub minor: bool,
}

impl Key {
    pub fn scale(self) -> [usize; 7] {
        let steps = if self.minor { NATURAL_MINOR_SCALE } else { MAJOR_SCALE };
        steps.map(|s| (s + usize::from(self.tonic)) % 12)
    }
}

/// Pearson correlation; zero when either side has no variance.
pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    if a.is_empty() {
        return 0.0;
    }
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        return 0.0;
    }
    (cov / (va * vb).sqrt()).clamp(-1.0, 1.0)
}

/// Krumhansl-Schmuckler key finding over duration-weighted pitch classes.
/// Keys are scanned C major .. B major, then C minor .. B minor; the first
/// best correlation wins.
pub fn estimate_key(p: &Piece) -> Option<Key> {
    if p.is_empty() {
        return None;
    }
    let mut dur = [0.0; 12];
    for e in &p.events {
        dur[pc(e.pitch)] += f64::from(e.duration_ms);
    }
    let mut best: Option<(f64, Key)> = None;
    for minor in [false, true] {
        let profile = if minor { MINOR_PROFILE } else { MAJOR_PROFILE };
        for tonic in 0..12 {
            let rotated: Vec<f64> = (0..12).map(|i| profile[(i + 12 - tonic) % 12]).collect();
            let r = pearson(&dur, &rotated);
            if best.is_none_or(|(b, _)| r > b) {
                best = Some((r, Key { tonic: tonic as u8, minor }));
            }
        }
    }
    best.map(|(_, k)| k)
}

/// Percentage of notes inside the estimated key's diatonic scale.
pub fn pitch_in_scale_rate(p: &Piece) -> Option<f64> {
    let scale = estimate_key(p)?.scale();
    let inside = p.events.iter().filter(|e| scale.contains(&pc(e.pitch))).count();
    Some(100.0 * inside as f64 / p.events.len() as f64)
}

/// Duration-weighted chroma per 500 ms frame, frames anchored at the first
/// onset and running to the last offset.
pub fn chroma_frames(p: &Piece) -> Vec<[f64; 12]> {
    let Some(start) = p.events.first().map(|e| e.onset_ms) else {
        return Vec::new();
    };
    let frames = (p.end_ms() - start).div_ceil(CHROMA_FRAME_MS) as usize;
    let mut out = vec![[0.0; 12]; frames];
    for e in &p.events {
        let (a, b) = (e.onset_ms - start, e.offset_ms() - start);
        let mut f = (a / CHROMA_FRAME_MS) as usize;
        while f < frames {
            let (lo, hi) = (f as u32 * CHROMA_FRAME_MS, (f as u32 + 1) * CHROMA_FRAME_MS);
            if lo >= b {
                break;
            }
            out[f][pc(e.pitch)] += f64::from(b.min(hi) - a.max(lo));
            f += 1;
        }
    }
    out
}

/// Cosine self-similarity; two silent frames are fully similar, a silent and
/// a sounding frame not at all.
pub fn self_similarity(frames: &[[f64; 12]]) -> Vec<Vec<f64>> {
    frames
        .iter()
        .map(|a| {
            frames
                .iter()
                .map(|b| {
                    let (za, zb) = (a.iter().all(|&x| x == 0.0), b.iter().all(|&x| x == 0.0));
                    match (za, zb) {
                        (true, true) => 1.0,
                        (true, false) | (false, true) => 0.0,
                        _ => cosine(a, b),
                    }
                })
                .collect()
        })
        .collect()
}

/// Pearson correlation between the strict upper triangles of the two
/// pieces' chroma self-similarity matrices, cropped to the shorter piece.
pub fn ssm_correlation(original: &Piece, generated: &Piece) -> Result<f64, MetricsError> {
    let fa = chroma_frames(original);
    let fb = chroma_frames(generated);
    for (which, f) in [("original", &fa), ("generated", &fb)] {
        if f.len() < 2 {
            return Err(MetricsError::TooShort { which, frames: f.len() });
        }
    }
    let n = fa.len().min(fb.len());
    let (sa, sb) = (self_similarity(&fa[..n]), self_similarity(&fb[..n]));
    let mut xa = Vec::with_capacity(n * (n - 1) / 2);
    let mut xb = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            xa.push(sa[i][j]);
            xb.push(sb[i][j]);
        }
    }
    Ok(pearson(&xa, &xb))
}

/// All metrics for one (original, generated) pair. Pairwise metrics compare
/// `generated` against `original`; single-piece metrics describe `generated`.
/// Entries are `None` where a metric does not apply.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub pitch_class_kl: Option<f64>,
    pub pctm_cosine: Option<f64>,
    pub note_density: Option<f64>,
    pub avg_ioi_s: Option<f64>,
    pub unique_pitches: Option<usize>,
    pub polyphony_rate: Option<f64>,
    pub tonal_tension_diameter: Option<f64>,
    pub chord_diversity: Option<usize>,
    pub pitch_in_scale_rate: Option<f64>,
    pub ssm_correlation: Option<f64>,
    pub genre_probability: Option<f64>,
}

impl MetricsReport {
    pub const COLUMNS: [&'static str; 11] = [
        "pitch_class_kl",
        "pctm_cosine",
        "note_density",
        "avg_ioi_s",
        "unique_pitches",
        "polyphony_rate",
        "tonal_tension_diameter",
        "chord_diversity",
        "pitch_in_scale_rate",
        "ssm_correlation",
        "genre_probability",
    ];

    pub fn compute(original: &Piece, generated: &Piece, options: &MetricOptions) -> Self {
        let want = |name: &str| options.selected.as_ref().is_none_or(|s| s.iter().any(|m| m == name));
        let mut r = MetricsReport::default();
        if want("pitch_class_kl") {
            r.pitch_class_kl = pitch_class_kl(original, generated).ok();
        }
        if want("pctm_cosine") {
            r.pctm_cosine = pctm_cosine(original, generated).ok();
        }
        if want("note_density") {
            r.note_density = Some(note_density(generated));
        }
        if want("avg_ioi_s") {
            r.avg_ioi_s = Some(avg_ioi(generated, !options.ioi_include_simultaneous));
        }
        if want("unique_pitches") {
            r.unique_pitches = Some(unique_pitches(generated));
        }
        if want("polyphony_rate") {
            r.polyphony_rate = Some(polyphony_rate(generated));
        }
        if want("tonal_tension_diameter") {
            r.tonal_tension_diameter = tonal_tension_diameter(generated, options.tension_distance);
        }
        if want("chord_diversity") {
            r.chord_diversity = Some(chord_diversity(generated));
        }
        if want("pitch_in_scale_rate") {
            r.pitch_in_scale_rate = pitch_in_scale_rate(generated);
        }
        if want("ssm_correlation") {
            r.ssm_correlation = ssm_correlation(original, generated).ok();
        }
        r
    }

    fn cells(&self) -> [Option<String>; 11] {
        let f = |x: Option<f64>| x.map(|v| format!("{v}"));
        let u = |x: Option<usize>| x.map(|v| v.to_string());
        [
            f(self.pitch_class_kl),
            f(self.pctm_cosine),
            f(self.note_density),
            f(self.avg_ioi_s),
            u(self.unique_pitches),
            f(self.polyphony_rate),
            f(self.tonal_tension_diameter),
            u(self.chord_diversity),
            f(self.pitch_in_scale_rate),
            f(self.ssm_correlation),
            f(self.genre_probability),
        ]
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricOptions {
    /// Metric names to compute; `None` computes all of them.
    pub selected: Option<Vec<String>>,
    pub tension_distance: TensionDistance,
    pub ioi_include_simultaneous: bool,
    /// Genre whose probability is reported when a classifier is supplied.
    pub target_genre: Option<Genre>,
}

/// CSV with `original,generated` followed by every metric column; missing
/// values are left empty.
pub fn reports_to_csv(rows: &[(String, String, MetricsReport)]) -> String {
    let mut out = String::from("original,generated");
    for c in MetricsReport::COLUMNS {
        out.push(',');
        out.push_str(c);
    }
    out.push('\n');
    for (a, b, r) in rows {
        let _ = write!(out, "{},{}", csv_field(a), csv_field(b));
        for cell in r.cells() {
            out.push(',');
            out.push_str(cell.as_deref().unwrap_or(""));
        }
        out.push('\n');
    }
    out
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}
