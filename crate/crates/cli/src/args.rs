use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

#[derive(Debug, Parser)]
#[command(
    name = "ragaseq",
    version,
    about = "Raga recognition and melodic retrieval pipelines"
)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct GlobalArgs {
    /// Seed for every random choice the stage makes.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Threads for per-recording work (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    pub jobs: usize,
    /// Output directory; created if missing.
    #[arg(long, global = true, default_value = ".")]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic corpus of Markov-chain ragas.
    Synth(SynthArgs),
    /// Track the pitch of a WAV file and write its contour.
    Pitch(PitchCmd),
    /// Quantize a contour into a token file, or tokenize an audio manifest.
    Tokenize(TokenizeArgs),
    /// Draw training subsequence start offsets for a manifest.
    Sample(SampleArgs),
    /// Train a classifier.
    Train(TrainCmd),
    /// Classify whole recordings by voting over subsequences.
    Infer(InferArgs),
    /// Adapt a classifier into a ranker and fine-tune it on triplets.
    RankTrain(RankTrainArgs),
    /// Embed every inference window of a manifest into a retrieval index.
    Index(IndexArgs),
    /// Retrieve the nearest indexed subsequences for a query.
    Query(QueryArgs),
    /// Cross-validated classification accuracy.
    Eval(EvalArgs),
    /// Epochs to reach a loss threshold across subsequence lengths.
    LengthStudy(LengthStudyArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Synth(_) => "synth",
            Command::Pitch(_) => "pitch",
            Command::Tokenize(_) => "tokenize",
            Command::Sample(_) => "sample",
            Command::Train(_) => "train",
            Command::Infer(_) => "infer",
            Command::RankTrain(_) => "rank-train",
            Command::Index(_) => "index",
            Command::Query(_) => "query",
            Command::Eval(_) => "eval",
            Command::LengthStudy(_) => "length-study",
        }
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 5)]
    pub ragas: usize,
    #[arg(long, default_value_t = 12)]
    pub per_raga: usize,
    /// Notes per recording.
    #[arg(long, default_value_t = 6000)]
    pub length: usize,
    /// Probability of replacing a note with a random semitone.
    #[arg(long, default_value_t = 0.0)]
    pub noise: f64,
    #[arg(long, default_value_t = 5)]
    pub k: u32,
    /// Render WAV audio instead of writing token files.
    #[arg(long)]
    pub audio: bool,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct PitchArgs {
    #[arg(long, default_value_t = 75.0)]
    pub fmin: f64,
    #[arg(long, default_value_t = 600.0)]
    pub fmax: f64,
    /// Frame hop in seconds.
    #[arg(long, default_value_t = 0.010)]
    pub hop: f64,
    /// Analysis frame length in seconds.
    #[arg(long, default_value_t = 0.040)]
    pub frame: f64,
    #[arg(long, default_value_t = 0.45)]
    pub voicing_threshold: f64,
    #[arg(long, default_value_t = 0.01)]
    pub octave_cost: f64,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct QuantArgs {
    /// Quantization levels per half step.
    #[arg(long, default_value_t = 5)]
    pub k: u32,
    /// Octaves above and below the tonic kept in the vocabulary.
    #[arg(long, default_value_t = 2)]
    pub clamp_octaves: u32,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct PitchCmd {
    /// WAV file (mono, 16-bit).
    #[arg(long = "in")]
    pub input: PathBuf,
    #[command(flatten)]
    pub pitch: PitchArgs,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct TokenizeArgs {
    /// Contour CSV (`t,f0`, -1 for unvoiced).
    #[arg(
        long = "in",
        conflicts_with = "manifest",
        required_unless_present = "manifest"
    )]
    pub input: Option<PathBuf>,
    /// Tonic of the contour in Hz.
    #[arg(long, required_unless_present = "manifest")]
    pub tonic: Option<f64>,
    /// Manifest whose audio entries are pitch-tracked and tokenized.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[command(flatten)]
    pub quant: QuantArgs,
    #[command(flatten)]
    pub pitch: PitchArgs,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct CorpusArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[command(flatten)]
    pub pitch: PitchArgs,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SamplerArgs {
    /// Subsequence length in tokens.
    #[arg(long, default_value_t = 5000)]
    pub subseq_len: usize,
    /// Samples per recording; derived from the longest recording if unset.
    #[arg(long)]
    pub num_samples: Option<usize>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SampleArgs {
    #[command(flatten)]
    pub corpus: CorpusArgs,
    #[command(flatten)]
    pub quant: QuantArgs,
    #[command(flatten)]
    pub sampler: SamplerArgs,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ModelArgs {
    #[arg(long, default_value_t = 128)]
    pub embed_dim: usize,
    #[arg(long, default_value_t = 768)]
    pub hidden: usize,
    #[arg(long, default_value_t = 384)]
    pub dense: usize,
    #[arg(long, default_value_t = 0.3)]
    pub dropout: f64,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct OptimArgs {
    #[arg(long, default_value_t = 40)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub lr: f64,
    #[arg(long, default_value_t = 50)]
    pub epochs: usize,
    /// More than one selects the asynchronous trainer.
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
    /// Updates a gradient may lag behind before it is discarded.
    #[arg(long, default_value_t = 8)]
    pub staleness_bound: u64,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct TrainCmd {
    #[command(flatten)]
    pub corpus: CorpusArgs,
    #[command(flatten)]
    pub quant: QuantArgs,
    #[command(flatten)]
    pub sampler: SamplerArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub optim: OptimArgs,
    /// Record the first epoch whose loss reaches this value.
    #[arg(long)]
    pub loss_threshold: Option<f64>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct InferArgs {
    /// Classifier checkpoint; repeat to ensemble.
    #[arg(long, required = true)]
    pub model: Vec<PathBuf>,
    /// Class names, one per line; defaults to `classes.txt` beside the first model.
    #[arg(long)]
    pub classes: Option<PathBuf>,
    #[command(flatten)]
    pub corpus: CorpusArgs,
    /// Window length; defaults to the model's training length.
    #[arg(long)]
    pub subseq_len: Option<usize>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct RankTrainArgs {
    /// Trained classifier checkpoint.
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub corpus: CorpusArgs,
    #[command(flatten)]
    pub sampler: SamplerArgs,
    #[arg(long, default_value_t = 600)]
    pub embed_out_dim: usize,
    #[arg(long, default_value_t = 1.0)]
    pub margin: f64,
    #[arg(long, default_value_t = 40)]
    pub triplets_per_step: usize,
    #[arg(long, default_value_t = 500)]
    pub steps: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub lr: f64,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct IndexArgs {
    /// Ranker checkpoint.
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub corpus: CorpusArgs,
    /// Also report mean precision at these k (self-matches excluded).
    #[arg(long, value_delimiter = ',')]
    pub precision_at: Vec<usize>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct QueryArgs {
    /// Index written by `index`.
    #[arg(long)]
    pub index: PathBuf,
    /// Ranker checkpoint used to build the index.
    #[arg(long)]
    pub model: PathBuf,
    /// Token file holding the query melody.
    #[arg(long = "in")]
    pub input: PathBuf,
    /// First token of the query window.
    #[arg(long, default_value_t = 0)]
    pub start: usize,
    #[arg(long, default_value_t = 10)]
    pub k: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
pub enum Protocol {
    Loocv,
    Kfold,
    Holdout,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct EvalArgs {
    #[command(flatten)]
    pub corpus: CorpusArgs,
    #[command(flatten)]
    pub quant: QuantArgs,
    #[arg(long, value_enum, default_value_t = Protocol::Loocv)]
    pub protocol: Protocol,
    /// Fold count for `kfold`.
    #[arg(long, default_value_t = 12)]
    pub folds: usize,
    /// Test recordings per class for `holdout`.
    #[arg(long, default_value_t = 5)]
    pub holdout: usize,
    #[command(flatten)]
    pub sampler: SamplerArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub optim: OptimArgs,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct LengthStudyArgs {
    #[command(flatten)]
    pub corpus: CorpusArgs,
    #[command(flatten)]
    pub quant: QuantArgs,
    #[arg(long, value_delimiter = ',', default_values_t = [500, 1500, 3000])]
    pub lengths: Vec<usize>,
    #[arg(long, default_value_t = 0.02)]
    pub loss_threshold: f64,
    /// Test recordings per class.
    #[arg(long, default_value_t = 5)]
    pub holdout: usize,
    /// Samples per recording; derived per length if unset.
    #[arg(long)]
    pub num_samples: Option<usize>,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub optim: OptimArgs,
}
