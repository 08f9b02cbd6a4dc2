//! Command-line arguments. Every command is serde-serializable so a run can
//! be saved with `--save-config` and replayed with `cadenza run`.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

#[derive(Debug, Parser)]
#[command(name = "cadenza", version, about = "Iterative corruption-refinement for expressive piano improvisation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,

    /// Write the parsed command as JSON to this path before running it.
    #[arg(long, global = true)]
    pub save_config: Option<PathBuf>,
}

#[derive(Debug, Clone, Subcommand, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "kebab-case")]
pub enum Command {
    /// Convert a MIDI file into a token file.
    Tokenize(TokenizeArgs),
    /// Convert a token file back into MIDI.
    Detokenize(DetokenizeArgs),
    /// Apply a corruption function to every segment of a MIDI file.
    Corrupt(CorruptArgs),
    /// Write a synthetic two-genre MIDI corpus.
    Synth(SynthArgs),
    /// Index the MIDI files below a directory.
    Scan(ScanArgs),
    /// Assign a deterministic train/test split to a corpus index.
    Split(SplitArgs),
    /// Train the refinement model.
    Train(TrainArgs),
    /// Train the genre classifier.
    TrainClassifier(TrainClassifierArgs),
    /// Multi-pass improvisation of a piece towards a target genre.
    Improvise(ImproviseArgs),
    /// Continue a short prompt by a few segments.
    Continue(ContinueArgs),
    /// Generate segments between two pieces.
    Infill(InfillArgs),
    /// Harmonize a monophonic melody.
    Harmonize(HarmonizeArgs),
    /// Compare generated pieces with their originals.
    Evaluate(EvaluateArgs),
    /// Re-run a command saved with --save-config.
    #[serde(skip)]
    Run { config: PathBuf },
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct TokenizeArgs {
    pub input: PathBuf,
    /// Output token file; `.bin` writes the packed binary format.
    pub output: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct DetokenizeArgs {
    /// Token file, text or packed binary.
    pub input: PathBuf,
    pub output: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct CorruptArgs {
    pub input: PathBuf,
    /// Output: `.mid` for note-level kinds, anything else for tokens.
    pub output: PathBuf,
    /// Corruption kind name or id (1-9).
    #[arg(long)]
    pub kind: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Genre token written into token frames; defaults to the file's label.
    #[arg(long)]
    pub genre: Option<String>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct SynthArgs {
    /// Output directory; pieces go to `classical/` and `jazz/` inside it.
    pub output: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub pieces_per_genre: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Single-line melodies without chords.
    #[arg(long)]
    pub melody_only: bool,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct ScanArgs {
    pub root: PathBuf,
    /// Index file to write.
    #[arg(long, short)]
    pub output: PathBuf,
    /// Labeling rule `genre=directory`; repeatable. Without rules the parent
    /// directory name is used when it names a genre.
    #[arg(long = "label")]
    pub labels: Vec<String>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct SplitArgs {
    pub index: PathBuf,
    #[arg(long, short)]
    pub output: PathBuf,
    #[arg(long)]
    pub test_count: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PresetArg {
    Micro,
    Tiny,
    Desk,
    Full,
}

/// Where training pieces come from.
#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct CorpusArgs {
    /// Corpus index written by `scan` (its train split is used when split).
    #[arg(long, conflicts_with = "corpus")]
    pub index: Option<PathBuf>,
    /// Directory to scan directly, labeling by parent directory name.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct TrainArgs {
    #[command(flatten)]
    pub corpus: CorpusArgs,
    #[arg(long, value_enum, default_value = "desk")]
    pub preset: PresetArg,
    #[arg(long, default_value_t = 1000)]
    pub steps: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 8)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub learning_rate: f64,
    /// Largest context drawn per side (1-5).
    #[arg(long, default_value_t = 5)]
    pub max_context: usize,
    /// Probability of taking an example's context from another genre.
    #[arg(long, default_value_t = 0.0)]
    pub cross_genre_context: f64,
    /// Restrict training to these corruption kinds (comma separated).
    #[arg(long, value_delimiter = ',')]
    pub kinds: Vec<String>,
    /// Checkpoint to write.
    #[arg(long, short)]
    pub output: PathBuf,
    /// Loss curve CSV (`step,loss`).
    #[arg(long)]
    pub loss_csv: Option<PathBuf>,
    /// Also write the checkpoint every this many steps.
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
    /// Continue from a checkpoint written by this command.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct TrainClassifierArgs {
    #[command(flatten)]
    pub corpus: CorpusArgs,
    #[arg(long, value_enum, default_value = "desk")]
    pub preset: PresetArg,
    #[arg(long, default_value_t = 300)]
    pub steps: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 8)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub learning_rate: f64,
    #[arg(long, short)]
    pub output: PathBuf,
}

/// Model location and output files shared by the generation commands.
#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct GenerationArgs {
    /// Refiner checkpoint; defaults to `refiner.ckpt` in $CADENZA_MODEL_DIR.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Output MIDI file.
    #[arg(long, short)]
    pub output: PathBuf,
    /// JSON-lines log of every corrupt/refine decision.
    #[arg(long)]
    pub provenance: Option<PathBuf>,
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub left: Option<usize>,
    #[arg(long)]
    pub right: Option<usize>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct ImproviseArgs {
    pub input: PathBuf,
    #[command(flatten)]
    pub gen: GenerationArgs,
    /// Schedule file (JSON, or TOML by extension). Flags override its fields.
    #[arg(long)]
    pub schedule: Option<PathBuf>,
    /// Corruption kind, or `random`.
    #[arg(long)]
    pub kind: Option<String>,
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Number of passes when no schedule file is given.
    #[arg(long, default_value_t = 1)]
    pub passes: usize,
    /// Target genre.
    #[arg(long)]
    pub genre: Option<String>,
    /// Fraction of structurally novel segments to keep untouched.
    #[arg(long, default_value_t = 0.0)]
    pub preserve: f64,
    /// Draw the corrupt-or-keep decision once per pass instead of per segment.
    #[arg(long)]
    pub per_pass_draw: bool,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct ContinueArgs {
    /// Prompt MIDI file.
    pub input: PathBuf,
    #[command(flatten)]
    pub gen: GenerationArgs,
    /// Segments (5 s each) to add.
    #[arg(long, default_value_t = 3)]
    pub segments: usize,
    #[arg(long)]
    pub genre: Option<String>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct InfillArgs {
    /// Music before the gap.
    pub before: PathBuf,
    /// Music after the gap.
    pub after: PathBuf,
    #[command(flatten)]
    pub gen: GenerationArgs,
    #[arg(long, default_value_t = 1)]
    pub segments: usize,
    #[arg(long)]
    pub genre: Option<String>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct HarmonizeArgs {
    /// Monophonic melody.
    pub input: PathBuf,
    #[command(flatten)]
    pub gen: GenerationArgs,
    #[arg(long)]
    pub genre: Option<String>,
    /// Notes forced into the opening chord of each segment.
    #[arg(long, default_value_t = 3)]
    pub chord_notes: usize,
    /// Unconstrained skyline passes after the constrained one.
    #[arg(long, default_value_t = 0)]
    pub extra_passes: usize,
    /// Constraint-satisfaction report (JSON).
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TensionArg {
    Fifths,
    Semitone,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct EvaluateArgs {
    /// Original MIDI file, or a directory for batch mode.
    pub original: PathBuf,
    /// Generated MIDI file, or a directory whose files are paired by name.
    pub generated: PathBuf,
    /// `all` or a comma-separated list of metric names.
    #[arg(long, default_value = "all")]
    pub metrics: String,
    /// Report path: JSON for a single pair, CSV in batch mode. Defaults to stdout.
    #[arg(long, short)]
    pub output: Option<PathBuf>,
    /// Genre classifier checkpoint for genre probability; defaults to
    /// `classifier.ckpt` in $CADENZA_MODEL_DIR when present.
    #[arg(long)]
    pub classifier: Option<PathBuf>,
    #[arg(long)]
    pub target_genre: Option<String>,
    #[arg(long, value_enum, default_value = "fifths")]
    pub tension: TensionArg,
    /// Count simultaneous onsets as zero-length inter-onset intervals.
    #[arg(long)]
    pub ioi_include_simultaneous: bool,
}
