use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

/// Default for every `--seed` flag when neither the flag nor `HYBRID_ATTN_SEED` is set.
pub const DEFAULT_SEED: u64 = 0;

#[derive(Debug, Parser)]
#[command(
    name = "hybrid-attn",
    version,
    about = "Attention-pattern analysis, NMI-guided attention distillation, dense probing and corpus curation",
    after_help = "Every --seed flag reads HYBRID_ATTN_SEED when not given and defaults to 0.\nExit codes: 0 success, 1 I/O failure, 2 usage or configuration error, 3 malformed input file, 4 numeric failure."
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Per-layer NMI, pattern classes and the selected target layer from attention dumps.
    Nmi(NmiArgs),
    /// Target-layer selection from a precomputed per-layer NMI vector.
    SelectLayer(SelectArgs),
    /// Linear CKA between the layers of two models seen on the same images.
    Cka(CkaArgs),
    /// Distill a teacher's target-layer attention into a student.
    Distill(DistillArgs),
    /// Train a linear segmentation probe on frozen backbone features.
    Probe(ProbeArgs),
    /// Corpus curation steps.
    Curate {
        #[command(subcommand)]
        step: CurateStep,
    },
    /// Summarize a dump, checkpoint, manifest or distillation log.
    Report(ReportArgs),
    /// Write a labeled synthetic-shapes corpus.
    Synth(SynthArgs),
    /// Pretrain a segmenting teacher on a labeled corpus.
    Pretrain(PretrainArgs),
    /// Run a checkpoint over a corpus and write attention and feature dumps.
    Dump(DumpArgs),
}

#[derive(Debug, Args)]
pub struct SelectionFlags {
    /// Target NMI of the hybrid pattern ("we set it to 0.09").
    #[arg(long, default_value_t = 0.09)]
    pub s: f64,
    /// Restrict candidates to layers L/2+1..L ("only the latter half of the layers").
    #[arg(long)]
    pub half_only: bool,
    /// Lower NMI bound of the hybrid pattern; below it a layer is global.
    #[arg(long, default_value_t = 0.06)]
    pub hybrid_low: f64,
    /// Upper NMI bound of the hybrid pattern; above it a layer is local.
    #[arg(long, default_value_t = 0.12)]
    pub hybrid_high: f64,
}

#[derive(Debug, Args)]
pub struct NmiArgs {
    /// Attention dumps (ATND0001), one per image.
    #[arg(long, required = true, num_args = 1..)]
    pub input: Vec<PathBuf>,
    #[command(flatten)]
    pub selection: SelectionFlags,
    /// Token grid as ROWSxCOLS for the attention distance; defaults to a square grid.
    #[arg(long)]
    pub grid: Option<String>,
    /// Report path; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SelectArgs {
    /// File holding the per-layer NMI values: a JSON array or whitespace/comma separated numbers.
    #[arg(long, required_unless_present = "values")]
    pub nmi: Option<PathBuf>,
    /// Per-layer NMI values inline, comma separated.
    #[arg(long, value_delimiter = ',', conflicts_with = "nmi")]
    pub values: Option<Vec<f64>>,
    #[command(flatten)]
    pub selection: SelectionFlags,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum PoolingArg {
    /// Tokens of all images pooled into one CKA per layer pair.
    Pooled,
    /// One CKA per image, averaged.
    PerImage,
}

#[derive(Debug, Args)]
pub struct CkaArgs {
    /// Feature dumps (FETD0001) of model A, one per image.
    #[arg(long, required = true, num_args = 1..)]
    pub a: Vec<PathBuf>,
    /// Feature dumps of model B, paired with `--a` by position.
    #[arg(long, required = true, num_args = 1..)]
    pub b: Vec<PathBuf>,
    #[arg(long, value_enum, default_value_t = PoolingArg::Pooled)]
    pub pooling: PoolingArg,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DistillArgs {
    /// TOML plan with `heldout`, `[student]` and `[distill]` tables.
    #[arg(long)]
    pub plan: PathBuf,
    /// Image manifest; the last `heldout` records are held out.
    #[arg(long)]
    pub corpus: PathBuf,
    /// Teacher checkpoint.
    #[arg(long)]
    pub teacher: PathBuf,
    /// Student checkpoint to start from instead of the seeded initialization.
    #[arg(long)]
    pub init: Option<PathBuf>,
    /// Output student checkpoint.
    #[arg(long)]
    pub out: PathBuf,
    /// Training log (JSON lines).
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    /// Pyramid from the last layer.
    LlFpn,
    /// Pyramid from four layers (`--layers`, default L/3, L/2, 2L/3, L).
    MultiLayer,
    /// Concatenation of `--layers` (default all layers).
    Lp,
    /// Single layer `--layer`.
    Layerwise,
}

#[derive(Debug, Args)]
pub struct ProbeArgs {
    /// Backbone checkpoint.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Labeled manifest; the last `--heldout` records are the evaluation split.
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long, value_enum)]
    pub mode: ModeArg,
    /// 1-based layer for the layerwise mode.
    #[arg(long)]
    pub layer: Option<usize>,
    /// 1-based layers for the multi-layer and lp modes.
    #[arg(long, value_delimiter = ',')]
    pub layers: Option<Vec<usize>>,
    #[arg(long, default_value_t = 8)]
    pub heldout: usize,
    #[arg(long, default_value_t = 10)]
    pub epochs: usize,
    #[arg(long, default_value_t = 8)]
    pub batch_size: usize,
    /// Base rate, scaled by batch_size/256.
    #[arg(long, default_value_t = 1.0)]
    pub base_lr: f64,
    #[arg(long, default_value_t = 4)]
    pub classes: usize,
    #[arg(long, env = "HYBRID_ATTN_SEED", default_value_t = DEFAULT_SEED)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum CurateStep {
    /// Keep every k-th frame of each sequence.
    Interval {
        #[arg(long)]
        manifest: PathBuf,
        /// Sampling interval in frames.
        #[arg(long)]
        k: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Greedy similarity deduplication in manifest order.
    Dedup {
        #[arg(long)]
        manifest: PathBuf,
        /// Embeddings (FETD0001, one layer) with one row per manifest record.
        #[arg(long)]
        embeddings: PathBuf,
        /// Discard records at least this similar to a kept one ("Similarity / 0.95").
        #[arg(long, default_value_t = 0.95)]
        threshold: f64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Convert RGB records to three identical luma channels.
    Grayscale {
        #[arg(long)]
        manifest: PathBuf,
        /// Directory receiving converted images and the new manifest.jsonl.
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Class-balanced subsample.
    Balance {
        #[arg(long)]
        manifest: PathBuf,
        /// Total records to draw.
        #[arg(long)]
        n: usize,
        #[arg(long, env = "HYBRID_ATTN_SEED", default_value_t = DEFAULT_SEED)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Concatenate disjoint manifests.
    Mix {
        /// Source manifest; append `:grayscale` to record a grayscale transform.
        #[arg(long = "source", required = true, num_args = 1..)]
        sources: Vec<String>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Mean cosine similarity between embedding sets.
    Similarity {
        /// Reference embeddings as NAME=PATH.
        #[arg(long)]
        reference: String,
        /// Compared embeddings as NAME=PATH, one row of the table each.
        #[arg(long = "against", required = true, num_args = 1..)]
        against: Vec<String>,
        /// Exact below this many pairs, sampled above.
        #[arg(long, default_value_t = 1_000_000)]
        pair_cap: u64,
        #[arg(long, env = "HYBRID_ATTN_SEED", default_value_t = DEFAULT_SEED)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Dump, checkpoint, manifest (.jsonl) or distillation log.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub count: usize,
    /// Square image side in pixels.
    #[arg(long, default_value_t = 32)]
    pub size: usize,
    #[arg(long, env = "HYBRID_ATTN_SEED", default_value_t = DEFAULT_SEED)]
    pub seed: u64,
    #[arg(long, default_value = "shapes")]
    pub source: String,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    /// TOML with `[model]` and `[train]` tables.
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DumpArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    /// Directory for per-image `.atn` and `.fetd` dumps.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// Single-layer feature dump of mean-pooled final features, one row per image.
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
}
