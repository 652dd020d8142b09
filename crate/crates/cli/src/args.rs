use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use cyclecap::config::Config;
use cyclecap::eval::Scaling;
use cyclecap::models::Variant;
use serde::{Deserialize, Serialize};

#[derive(Debug, Parser)]
#[command(name = "cyclecap", version, about = "Two-stage image captioning with cycle-consistent attention")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

/// Flags shared by every subcommand. Each overrides the matching value from
/// the configuration file.
#[derive(Debug, Clone, Default, Args)]
pub struct Common {
    /// TOML configuration file.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Cycle loss weight.
    #[arg(long, global = true)]
    pub lambda: Option<f64>,
    /// Keep the English side fixed while training the German side.
    #[arg(long, global = true)]
    pub freeze_part1: bool,
    /// Beam width for both decoders [default: 3].
    #[arg(long, global = true)]
    pub beam_size: Option<usize>,
    /// Caption length cap in words [default: 50].
    #[arg(long, global = true)]
    pub max_len: Option<usize>,
    /// Minimum token count for the vocabulary [default: 5].
    #[arg(long, global = true)]
    pub min_freq: Option<usize>,
    /// Decoding worker threads [default: 1].
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Output directory [default: out/<subcommand>].
    #[arg(long, global = true, value_name = "DIR")]
    pub out_dir: Option<PathBuf>,
}

impl Common {
    pub fn apply(&self, cfg: &mut Config) {
        if let Some(v) = self.seed {
            cfg.seed = v;
            cfg.synth.seed = v;
        }
        if let Some(v) = self.lambda {
            cfg.train.lambda = v;
        }
        if self.freeze_part1 {
            cfg.train.freeze_part1 = true;
        }
        if let Some(v) = self.beam_size {
            cfg.infer.beam_size = v;
        }
        if let Some(v) = self.max_len {
            cfg.infer.max_len = v;
            cfg.data.max_len = v;
        }
        if let Some(v) = self.min_freq {
            cfg.data.min_freq = v;
        }
        if let Some(v) = self.threads {
            cfg.threads = v;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Subcommand)]
#[serde(tag = "name", rename_all = "kebab-case")]
pub enum Command {
    /// Generate a seeded synthetic corpus with ground-truth alignments.
    SynthData(SynthArgs),
    /// Pretrain the image encoder and English decoder.
    Pretrain(PretrainArgs),
    /// Train the caption encoder and German decoder.
    Train(TrainArgs),
    /// Caption images with both decoders.
    Infer(ModelInput),
    /// Caption images and score the German output against references.
    Eval(ModelInput),
    /// Write attention heatmaps and matrix dumps for one image.
    AttnExport(AttnArgs),
    /// Compare analytic and finite-difference gradients of the full loss.
    Gradcheck(GradArgs),
    /// Check the indirect-attention toy case and the chain-rule identity.
    OracleCheck,
    /// Repeat a run from its manifest.
    Rerun(RerunArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::SynthData(_) => "synth-data",
            Command::Pretrain(_) => "pretrain",
            Command::Train(_) => "train",
            Command::Infer(_) => "infer",
            Command::Eval(_) => "eval",
            Command::AttnExport(_) => "attn-export",
            Command::Gradcheck(_) => "gradcheck",
            Command::OracleCheck => "oracle-check",
            Command::Rerun(_) => "rerun",
        }
    }

    /// Applies subcommand-specific overrides.
    pub fn apply(&self, cfg: &mut Config) {
        match self {
            Command::SynthData(a) => a.apply(cfg),
            Command::Pretrain(a) => a.schedule.apply(&mut cfg.pretrain),
            Command::Train(a) => {
                a.schedule.apply(&mut cfg.train);
                if let Some(v) = a.variant {
                    cfg.model.variant = v.into();
                }
                if a.squared_cycle {
                    cfg.train.squared_cycle = true;
                }
            }
            _ => {}
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub images: Option<usize>,
    #[arg(long)]
    pub regions: Option<usize>,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub objects: Option<usize>,
    #[arg(long)]
    pub captions_per_image: Option<usize>,
    #[arg(long)]
    pub noise: Option<f64>,
    /// Images held out into val.jsonl.
    #[arg(long, default_value_t = 0)]
    pub val_images: usize,
}

impl SynthArgs {
    fn apply(&self, cfg: &mut Config) {
        let s = &mut cfg.synth;
        let pairs = [
            (&mut s.images, self.images),
            (&mut s.regions, self.regions),
            (&mut s.dim, self.dim),
            (&mut s.classes, self.classes),
            (&mut s.objects_per_image, self.objects),
            (&mut s.captions_per_image, self.captions_per_image),
        ];
        for (slot, v) in pairs {
            if let Some(v) = v {
                *slot = v;
            }
        }
        if let Some(v) = self.noise {
            s.noise = v;
        }
    }
}

/// Optimizer schedule overrides.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Args)]
pub struct Schedule {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long)]
    pub patience: Option<usize>,
}

impl Schedule {
    fn apply(&self, t: &mut cyclecap::train::TrainConfig) {
        if let Some(v) = self.epochs {
            t.max_epochs = v;
            t.patience = t.patience.min(v);
        }
        if let Some(v) = self.batch_size {
            t.batch_size = v;
        }
        if let Some(v) = self.lr {
            t.learning_rate = v;
        }
        if let Some(v) = self.dropout {
            t.dropout = v;
        }
        if let Some(v) = self.patience {
            t.patience = v;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Args)]
pub struct PretrainArgs {
    /// Corpus directory with pairs.jsonl (and optionally val.jsonl).
    #[arg(long, value_name = "DIR")]
    pub data: PathBuf,
    #[command(flatten)]
    pub schedule: Schedule,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum VariantArg {
    SoftAttn,
    DualAttn,
    CycleAttn,
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::SoftAttn => Variant::SoftAttn,
            VariantArg::DualAttn => Variant::DualAttn,
            VariantArg::CycleAttn => Variant::CycleAttn,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Args)]
pub struct TrainArgs {
    /// Corpus directory with triples.jsonl (and optionally val.jsonl).
    #[arg(long, value_name = "DIR")]
    pub data: PathBuf,
    /// Output directory of a pretrain run.
    #[arg(long, value_name = "DIR")]
    pub part1: PathBuf,
    #[arg(long, value_enum)]
    pub variant: Option<VariantArg>,
    /// Penalize the squared distance instead of the distance.
    #[arg(long)]
    pub squared_cycle: bool,
    #[command(flatten)]
    pub schedule: Schedule,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Args)]
pub struct ModelInput {
    /// Output directory of a train run.
    #[arg(long, value_name = "DIR")]
    pub model: PathBuf,
    /// JSONL manifest listing the images (and references, for eval).
    #[arg(long, value_name = "FILE")]
    pub manifest: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum ScaleArg {
    Absolute,
    RowMax,
}

impl From<ScaleArg> for Scaling {
    fn from(s: ScaleArg) -> Self {
        match s {
            ScaleArg::Absolute => Scaling::Absolute,
            ScaleArg::RowMax => Scaling::RowMax,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Args)]
pub struct AttnArgs {
    #[command(flatten)]
    pub input: ModelInput,
    #[arg(long)]
    pub image_id: String,
    /// Region grid as ROWSxCOLS [default: square if possible, else 1xL].
    #[arg(long)]
    pub grid: Option<String>,
    /// Pixels per grid cell.
    #[arg(long, default_value_t = 16)]
    pub cell: usize,
    #[arg(long, value_enum, default_value_t = ScaleArg::RowMax)]
    pub scale: ScaleArg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum DimsArg {
    Tiny,
    Small,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Args)]
pub struct GradArgs {
    #[arg(long, value_enum, default_value_t = DimsArg::Tiny)]
    pub dims: DimsArg,
    /// Fraction of parameter entries to probe.
    #[arg(long, default_value_t = 1.0)]
    pub fraction: f64,
    /// Largest acceptable relative error.
    #[arg(long, default_value_t = 1e-3)]
    pub tolerance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Args)]
pub struct RerunArgs {
    /// run_manifest.json written by an earlier run.
    #[arg(long, value_name = "FILE")]
    pub manifest: PathBuf,
}
