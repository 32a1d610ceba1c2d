use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use declab::alignment::Indexing;
use declab::blocks::ModuleTag;
use declab::data::ReorderRule;
use declab::model::{DecoderVariant, Preset};

/// Toy-scale Transformer NMT lab: decoder variants, probing, alignment and
/// throughput.
#[derive(Debug, Parser)]
#[command(name = "declab", version, propagate_version = true)]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// TOML settings file with [data], [model], [train], [probe] and [bench] sections.
    #[arg(long, short = 'c', global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Override one setting, e.g. `--set train.steps=200`. Repeatable.
    #[arg(long = "set", global = true, value_name = "SECTION.KEY=VALUE")]
    pub sets: Vec<String>,
    /// Output directory [default: <DECLAB_OUT_ROOT or `runs`>/<command>].
    #[arg(long, short = 'o', global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic parallel corpus with gold alignments.
    GenData(GenDataArgs),
    /// Train an NMT model on a data directory.
    Train(TrainArgs),
    /// Translate a whitespace-tokenized source file.
    Translate(TranslateArgs),
    /// Token accuracy and BLEU of greedy decoding.
    Eval(EvalArgs),
    /// Forced-decoding probes on captured decoder representations.
    Probe(ProbeArgs),
    /// Alignment error rate of cross-attention per decoder layer.
    Align(AlignArgs),
    /// Cumulative source coverage per decoder layer.
    Coverage(CorpusArgs),
    /// Parameter breakdown of a decoder configuration.
    Params(ParamsArgs),
    /// Training or inference throughput.
    Bench(BenchArgs),
    /// Re-read exported reports, validate them and write them again.
    Export(ExportArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::GenData(_) => "gen-data",
            Command::Train(_) => "train",
            Command::Translate(_) => "translate",
            Command::Eval(_) => "eval",
            Command::Probe(_) => "probe",
            Command::Align(_) => "align",
            Command::Coverage(_) => "coverage",
            Command::Params(_) => "params",
            Command::Bench(_) => "bench",
            Command::Export(_) => "export",
        }
    }
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub vocab: Option<usize>,
    #[arg(long)]
    pub min_len: Option<usize>,
    #[arg(long)]
    pub max_len: Option<usize>,
    #[arg(long)]
    pub rule: Option<ReorderRule>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub pairs: Option<usize>,
    #[arg(long)]
    pub heldout: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ModelFlags {
    #[arg(long)]
    pub preset: Option<Preset>,
    #[arg(long)]
    pub variant: Option<DecoderVariant>,
    #[arg(long)]
    pub enc_layers: Option<usize>,
    #[arg(long)]
    pub dec_layers: Option<usize>,
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long)]
    pub model_seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Directory written by `gen-data` (or any directory with train/heldout files and vocabularies).
    #[arg(long, value_name = "DIR")]
    pub data: PathBuf,
    #[command(flatten)]
    pub model: ModelFlags,
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub batch_tokens: Option<usize>,
    #[arg(long)]
    pub warmup: Option<usize>,
    #[arg(long)]
    pub lr_scale: Option<f64>,
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    /// Checkpoint written by `train`.
    #[arg(long, value_name = "FILE")]
    pub model: PathBuf,
    /// Accept a checkpoint that has never been trained.
    #[arg(long)]
    pub allow_untrained: bool,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SplitArg {
    Train,
    Heldout,
}

impl SplitArg {
    pub fn stem(self) -> &'static str {
        match self {
            SplitArg::Train => "train",
            SplitArg::Heldout => "heldout",
        }
    }
}

#[derive(Debug, Args)]
pub struct CorpusArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, value_name = "DIR")]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value = "heldout")]
    pub split: SplitArg,
}

#[derive(Debug, Args)]
pub struct TranslateArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Directory holding `vocab.src` and `vocab.tgt`.
    #[arg(long, value_name = "DIR")]
    pub data: PathBuf,
    /// One sentence per line.
    #[arg(long, value_name = "FILE")]
    pub input: PathBuf,
    /// Beam size; greedy decoding when absent.
    #[arg(long)]
    pub beam: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub corpus: CorpusArgs,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SideArg {
    Source,
    Target,
    Both,
}

#[derive(Debug, Args)]
pub struct ProbeArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, value_name = "DIR")]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value = "both")]
    pub side: SideArg,
    /// Probe one decoder layer (1-based); all layers when absent.
    #[arg(long)]
    pub layer: Option<usize>,
    /// Probe one module output; every captured tag when absent.
    #[arg(long)]
    pub tag: Option<ModuleTag>,
    #[arg(long)]
    pub steps: Option<u64>,
}

#[derive(Debug, Args)]
pub struct AlignArgs {
    #[command(flatten)]
    pub corpus: CorpusArgs,
    /// Gold alignments in Pharaoh format [default: <data>/<split>.aln].
    #[arg(long, value_name = "FILE")]
    pub gold: Option<PathBuf>,
    /// Index base of the gold file.
    #[arg(long, default_value = "zero-based")]
    pub indexing: Indexing,
}

#[derive(Debug, Args)]
pub struct ParamsArgs {
    #[arg(long)]
    pub preset: Option<Preset>,
    #[arg(long)]
    pub variant: Option<DecoderVariant>,
    #[arg(long)]
    pub dec_layers: Option<usize>,
    #[arg(long, default_value_t = 32000)]
    pub src_vocab: usize,
    #[arg(long, default_value_t = 32000)]
    pub tgt_vocab: usize,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum BenchKind {
    Train,
    Infer,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long, value_name = "DIR")]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value = "train")]
    pub kind: BenchKind,
    /// Variants to time in training; repeatable [default: the configured variant].
    #[arg(long)]
    pub variant: Vec<DecoderVariant>,
    /// Checkpoints to time in inference; repeatable.
    #[arg(long, value_name = "FILE")]
    pub model: Vec<PathBuf>,
    #[arg(long)]
    pub allow_untrained: bool,
    /// Beam size for inference; greedy when absent.
    #[arg(long)]
    pub beam: Option<usize>,
    #[arg(long)]
    pub reps: Option<usize>,
    #[arg(long)]
    pub steps: Option<u64>,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    /// Directory holding previously exported `<report>.csv` files.
    #[arg(long, value_name = "DIR")]
    pub from: PathBuf,
}
