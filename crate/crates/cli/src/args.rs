use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

use mer_core::corpus::Split;
use mer_core::train::{AudioSource, BenchMode, EmbeddingKind};

#[derive(Debug, Parser)]
#[command(name = "mer", version, about = "Multi-microphone audiovisual emotion recognition pipeline")]
pub struct Cli {
    /// TOML pipeline configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Global seed; overrides `seed` in the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for simulation, synthesis and feature extraction.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// Validate the configuration and inputs, print the plan, write nothing.
    #[arg(long, global = true)]
    pub dry_run: bool,
    /// Config override, e.g. `--set train.lr=0.0005`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub set: Vec<String>,
    /// Only log warnings and errors.
    #[arg(long, short, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Room impulse responses.
    Rir {
        #[command(subcommand)]
        cmd: RirCmd,
    },
    /// Corpus generation.
    Dataset {
        #[command(subcommand)]
        cmd: DatasetCmd,
    },
    /// Log-mel feature caching.
    Features {
        #[command(subcommand)]
        cmd: FeaturesCmd,
    },
    /// Train a classifier and write an EMCK checkpoint.
    Train(TrainCmd),
    /// Accuracy, bootstrap interval and confusion matrix of a checkpoint.
    Evaluate(EvalCmd),
    /// Evaluate checkpoints on the test split reverberated by each room.
    Benchmark(BenchCmd),
    /// Write per-utterance embeddings to CSV.
    ExportEmbeddings(EmbedCmd),
}

#[derive(Debug, Subcommand)]
pub enum RirCmd {
    /// Sample rooms and write `<out>/roomNNN.wav` plus JSON sidecars.
    Simulate(RirSimulate),
}

#[derive(Debug, Args)]
pub struct RirSimulate {
    #[arg(long, default_value_t = 10)]
    pub count: usize,
    /// Microphones per room; overrides `synthesis.mics`.
    #[arg(long)]
    pub mics: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum DatasetCmd {
    /// Reverberate and add noise to every clean utterance of a manifest.
    Synthesize(Synthesize),
    /// Generate the synthetic audiovisual toy corpus.
    Toy(Toy),
}

#[derive(Debug, Args)]
pub struct Synthesize {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Microphones per utterance; overrides `synthesis.mics`.
    #[arg(long)]
    pub mics: Option<usize>,
    /// Overrides `synthesis.snr_db`.
    #[arg(long)]
    pub snr_db: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct Toy {
    /// Overrides `toy.n_per_class`.
    #[arg(long)]
    pub n_per_class: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum FeaturesCmd {
    /// Write `<out>/<utterance_id>.melt` for every manifest entry.
    Extract(Extract),
}

#[derive(Debug, Args)]
pub struct Extract {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, value_enum, default_value_t = AudioArg::Multichannel)]
    pub audio: AudioArg,
    #[arg(long)]
    pub out: PathBuf,
}

/// Which waveform feeds the audio encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AudioArg {
    Clean,
    Multichannel,
}

impl AudioArg {
    pub fn source(self) -> AudioSource<'static> {
        match self {
            AudioArg::Clean => AudioSource::Clean,
            AudioArg::Multichannel => AudioSource::Multichannel,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum KindArg {
    Audio,
    Video,
    Fused,
}

impl From<KindArg> for EmbeddingKind {
    fn from(k: KindArg) -> Self {
        match k {
            KindArg::Audio => EmbeddingKind::Audio,
            KindArg::Video => EmbeddingKind::Video,
            KindArg::Fused => EmbeddingKind::Fused,
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainCmd {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, value_enum, default_value_t = AudioArg::Multichannel)]
    pub audio: AudioArg,
    /// Read cached log-mels from this directory instead of decoding audio.
    #[arg(long)]
    pub features: Option<PathBuf>,
    /// Copy encoder weights from these checkpoints before training. Repeatable.
    #[arg(long)]
    pub init_from: Vec<PathBuf>,
    /// Per-epoch losses and accuracy as CSV.
    #[arg(long)]
    pub history: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalCmd {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    pub split: SplitArg,
    #[arg(long, value_enum, default_value_t = AudioArg::Multichannel)]
    pub audio: AudioArg,
    #[arg(long)]
    pub features: Option<PathBuf>,
    /// Full report with per-utterance predictions as JSON.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Row-normalized confusion matrix as CSV.
    #[arg(long)]
    pub confusion: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BenchCmd {
    /// Directory of room WAVs (one channel per microphone).
    #[arg(long)]
    pub rooms: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    /// Directory holding `<mode>.emck` per benchmark mode.
    #[arg(long)]
    pub checkpoints: PathBuf,
    /// `all`, or a comma-separated list such as `mer_avg_mel,audio_sum_pe`.
    #[arg(long, default_value = "all")]
    pub modes: String,
    /// One row per (room, mode).
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub json: Option<PathBuf>,
}

impl BenchCmd {
    pub fn mode_list(&self) -> mer_core::Result<Vec<BenchMode>> {
        if self.modes == "all" {
            return Ok(BenchMode::ALL.to_vec());
        }
        self.modes.split(',').map(|m| m.trim().parse()).collect()
    }
}

#[derive(Debug, Args)]
pub struct EmbedCmd {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    pub split: SplitArg,
    #[arg(long, value_enum, default_value_t = KindArg::Fused)]
    pub kind: KindArg,
    #[arg(long, value_enum, default_value_t = AudioArg::Multichannel)]
    pub audio: AudioArg,
    #[arg(long)]
    pub features: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

/// What a command reads and writes, for `--dry-run` and input checks.
pub struct Plan {
    pub name: &'static str,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
}

impl Command {
    /// Config overrides implied by command flags.
    pub fn overrides(&self) -> Vec<String> {
        let mut o = Vec::new();
        match self {
            Command::Rir { cmd: RirCmd::Simulate(a) } => o.extend(a.mics.map(|m| format!("synthesis.mics={m}"))),
            Command::Dataset { cmd: DatasetCmd::Synthesize(a) } => {
                o.extend(a.mics.map(|m| format!("synthesis.mics={m}")));
                o.extend(a.snr_db.map(|s| format!("synthesis.snr_db={s:?}")));
            }
            Command::Dataset { cmd: DatasetCmd::Toy(a) } => o.extend(a.n_per_class.map(|n| format!("toy.n_per_class={n}"))),
            _ => {}
        }
        o
    }

    pub fn plan(&self) -> Plan {
        let opt = |p: &Option<PathBuf>| p.iter().cloned().collect::<Vec<_>>();
        let (name, inputs, outputs) = match self {
            Command::Rir { cmd: RirCmd::Simulate(a) } => ("rir simulate", vec![], vec![a.out.clone()]),
            Command::Dataset { cmd: DatasetCmd::Synthesize(a) } => ("dataset synthesize", vec![a.manifest.clone()], vec![a.out.clone()]),
            Command::Dataset { cmd: DatasetCmd::Toy(a) } => ("dataset toy", vec![], vec![a.out.clone()]),
            Command::Features { cmd: FeaturesCmd::Extract(a) } => ("features extract", vec![a.manifest.clone()], vec![a.out.clone()]),
            Command::Train(a) => {
                let mut i = vec![a.manifest.clone()];
                i.extend(opt(&a.features));
                i.extend(a.init_from.iter().cloned());
                let mut w = vec![a.out.clone()];
                w.extend(opt(&a.history));
                ("train", i, w)
            }
            Command::Evaluate(a) => {
                let mut i = vec![a.checkpoint.clone(), a.manifest.clone()];
                i.extend(opt(&a.features));
                let mut w = opt(&a.out);
                w.extend(opt(&a.confusion));
                ("evaluate", i, w)
            }
            Command::Benchmark(a) => {
                let mut w = vec![a.out.clone()];
                w.extend(opt(&a.json));
                ("benchmark", vec![a.rooms.clone(), a.manifest.clone(), a.checkpoints.clone()], w)
            }
            Command::ExportEmbeddings(a) => {
                let mut i = vec![a.checkpoint.clone(), a.manifest.clone()];
                i.extend(opt(&a.features));
                ("export-embeddings", i, vec![a.out.clone()])
            }
        };
        Plan { name, inputs, outputs }
    }
}
