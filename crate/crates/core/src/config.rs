//! Run configuration, read from TOML. Command-line flags are applied on top
//! by the caller.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::SynthSpec;
use crate::error::{Error, Result};
use crate::infer::BeamConfig;
use crate::models::{ModelDims, Variant};
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub variant: Variant,
    pub proj: usize,
    pub embed: usize,
    pub hidden: usize,
    pub attn: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            variant: Variant::CycleAttn,
            proj: 64,
            embed: 64,
            hidden: 64,
            attn: 64,
        }
    }
}

impl ModelConfig {
    pub fn dims(&self, feat_dim: usize, en_vocab: usize, de_vocab: usize) -> ModelDims {
        ModelDims {
            feat_dim,
            proj: self.proj,
            embed: self.embed,
            hidden: self.hidden,
            attn: self.attn,
            en_vocab,
            de_vocab,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Tokens seen fewer times become `<unk>`.
    pub min_freq: usize,
    /// Training captions with more words are dropped.
    pub max_len: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { min_freq: 5, max_len: 50 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    /// Worker threads for decoding; 1 keeps runs easy to compare.
    pub threads: usize,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub pretrain: TrainConfig,
    pub train: TrainConfig,
    pub infer: BeamConfig,
    pub synth: SynthSpec,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            seed: 1,
            threads: 1,
            model: ModelConfig::default(),
            data: DataConfig::default(),
            pretrain: TrainConfig::default(),
            train: TrainConfig::default(),
            infer: BeamConfig::default(),
            synth: SynthSpec::default(),
        }
    }
}

const TEMPLATE: &str = r#"# cyclecap run configuration. Every key is optional; omitted keys take the
# values shown here. Values marked "published" follow the original
# experiments; the rest are desk-scale choices.

seed = 1
threads = 1                # decoding workers; results do not depend on it

[model]
variant = "cycle-attn"     # soft-attn | dual-attn | cycle-attn
proj = 64                  # projected region width
embed = 64
hidden = 64
attn = 64                  # attention MLP width

[data]
min_freq = 5               # published: rarer words map to <unk>
max_len = 50               # published: longer training captions are dropped

[pretrain]
learning_rate = 0.0004     # published
batch_size = 32            # published
max_epochs = 50            # published
patience = 20              # published: early stop on validation CIDEr
dropout = 0.5              # published
lambda = 1.0               # unused while pretraining
squared_cycle = false
freeze_part1 = false
beta1 = 0.9
beta2 = 0.999
epsilon = 1e-8

[train]
learning_rate = 0.0004     # published
batch_size = 32            # published
max_epochs = 50            # published
patience = 20              # published
dropout = 0.5              # published
lambda = 1.0               # cycle loss weight; 0 gives the dual-attention baseline
squared_cycle = false      # true penalizes the squared Frobenius distance
freeze_part1 = false       # true keeps the English side fixed
beta1 = 0.9
beta2 = 0.999
epsilon = 1e-8

[infer]
beam_size = 3              # published, used for both decoders
max_len = 50               # published: words per generated caption

[synth]
seed = 7
images = 16
regions = 16
dim = 32
classes = 8
objects_per_image = 1
modifiers = [0, 2]
modifier_pool = 6
captions_per_image = 1
noise = 0.3
"#;

impl Config {
    /// Commented TOML with every default filled in.
    pub fn template() -> &'static str {
        TEMPLATE
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Config::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.threads == 0 {
            return Err(Error::Config("threads must be at least 1".into()));
        }
        let m = &self.model;
        if [m.proj, m.embed, m.hidden, m.attn].contains(&0) {
            return Err(Error::Config("model widths must be positive".into()));
        }
        if self.data.min_freq == 0 || self.data.max_len == 0 {
            return Err(Error::Config("min_freq and max_len must be positive".into()));
        }
        self.pretrain.validate()?;
        self.train.validate()?;
        self.infer.validate()?;
        self.synth.validate().map_err(|e| Error::Config(e.to_string()))
    }
}
