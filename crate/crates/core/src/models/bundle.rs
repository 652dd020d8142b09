use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{CaptionEncoder, Checkpoint, Dropout, EnglishDecoder, GermanDecoder, ImageEncoder};
use crate::attention::PreparedKeys;
use crate::data::{FeatureGrid, TokenId};
use crate::error::{Error, Result};
use crate::tensor::{Axis, ParamId, ParamStore, Tape, Var};

/// Model family. `DualAttn` and `CycleAttn` share one architecture and
/// differ only in the training objective; `SoftAttn` drops the caption
/// encoder and German→English attention.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    SoftAttn,
    DualAttn,
    CycleAttn,
}

impl Variant {
    pub fn attends_caption(self) -> bool {
        !matches!(self, Variant::SoftAttn)
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::SoftAttn => "Soft-Attn",
            Variant::DualAttn => "Dual-Attn",
            Variant::CycleAttn => "Cycle-Attn",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    /// Width of the input region features.
    pub feat_dim: usize,
    /// Width of projected region keys.
    pub proj: usize,
    pub embed: usize,
    pub hidden: usize,
    /// Hidden width of the attention scorers.
    pub attn: usize,
    pub en_vocab: usize,
    pub de_vocab: usize,
}

impl ModelDims {
    pub fn validate(&self) -> Result<()> {
        let all = [self.feat_dim, self.proj, self.embed, self.hidden, self.attn, self.en_vocab, self.de_vocab];
        if all.contains(&0) {
            return Err(Error::Config(format!("model dimensions must be positive: {self:?}")));
        }
        if self.en_vocab < 5 || self.de_vocab < 5 {
            return Err(Error::Config("vocabularies need at least one non-reserved token".into()));
        }
        Ok(())
    }
}

pub const PART1_PREFIXES: [&str; 2] = ["img.", "en."];

pub fn is_part1(name: &str) -> bool {
    PART1_PREFIXES.iter().any(|p| name.starts_with(p))
}

/// All parameters of the captioning system under hierarchical names:
/// `img.*` and `en.*` form the English side, `enc.*` and `de.*` the German.
#[derive(Debug, Clone)]
pub struct ModelBundle {
    pub variant: Variant,
    pub dims: ModelDims,
    pub store: ParamStore,
    pub image: ImageEncoder,
    pub english: EnglishDecoder,
    pub encoder: Option<CaptionEncoder>,
    pub german: GermanDecoder,
}

/// Teacher-forced English unroll: one row per predicted token.
#[derive(Debug, Clone)]
pub struct EnglishPass {
    /// `T × V_en`.
    pub log_probs: Var,
    /// `T × L`.
    pub alpha: Var,
    pub targets: Vec<TokenId>,
}

/// Teacher-forced German unroll.
#[derive(Debug, Clone)]
pub struct GermanPass {
    /// `M × V_de`.
    pub log_probs: Var,
    /// `M × L`.
    pub alpha: Var,
    /// `M × N`, absent for the image-only variant.
    pub beta: Option<Var>,
    pub targets: Vec<TokenId>,
}

impl ModelBundle {
    pub fn new(variant: Variant, dims: ModelDims, seed: u64) -> Result<Self> {
        dims.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let image = ImageEncoder::new(&mut store, "img", dims.feat_dim, dims.proj, &mut rng)?;
        let english = EnglishDecoder::new(
            &mut store,
            "en",
            dims.en_vocab,
            dims.proj,
            dims.embed,
            dims.hidden,
            dims.attn,
            &mut rng,
        )?;
        let encoder = if variant.attends_caption() {
            Some(CaptionEncoder::new(&mut store, "enc", dims.en_vocab, dims.embed, dims.hidden, &mut rng)?)
        } else {
            None
        };
        let german = GermanDecoder::new(
            &mut store,
            "de",
            dims.de_vocab,
            dims.proj,
            encoder.as_ref().map(CaptionEncoder::output_dim),
            dims.embed,
            dims.hidden,
            dims.attn,
            &mut rng,
        )?;
        Ok(ModelBundle {
            variant,
            dims,
            store,
            image,
            english,
            encoder,
            german,
        })
    }

    pub fn part1_ids(&self) -> Vec<ParamId> {
        self.store.iter().filter(|(_, n, _)| is_part1(n)).map(|(id, _, _)| id).collect()
    }

    pub fn part2_ids(&self) -> Vec<ParamId> {
        self.store.iter().filter(|(_, n, _)| !is_part1(n)).map(|(id, _, _)| id).collect()
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::from_store(&self.store, |_| true)
    }

    pub fn part1_checkpoint(&self) -> Checkpoint {
        Checkpoint::from_store(&self.store, is_part1)
    }

    /// Loads a full checkpoint; every parameter must be present.
    pub fn load_checkpoint(&mut self, ckpt: &Checkpoint) -> Result<()> {
        ckpt.apply_to(&mut self.store, |_| true)
    }

    /// Loads the English side only; every `img.*`/`en.*` parameter must be
    /// present and nothing else may be.
    pub fn load_part1(&mut self, ckpt: &Checkpoint) -> Result<()> {
        if let Some((name, _)) = ckpt.entries.iter().find(|(n, _)| !is_part1(n)) {
            return Err(Error::input(format!("English-side checkpoint contains {name}")));
        }
        ckpt.apply_to(&mut self.store, is_part1)
    }

    /// Projected region keys, `L × proj`.
    pub fn encode_image(&self, tape: &mut Tape, grid: &FeatureGrid) -> Result<Var> {
        self.image.encode(tape, &self.store, &grid.to_tensor())
    }

    pub fn english_pass(
        &self,
        tape: &mut Tape,
        regions: Var,
        tokens: &[TokenId],
        dropout: &mut Dropout,
    ) -> Result<EnglishPass> {
        if tokens.len() < 2 {
            return Err(Error::input("teacher forcing needs at least BOS and one target"));
        }
        let store = &self.store;
        let keys = self.english.attention.prepare(tape, store, regions)?;
        let mut state = self.english.init_state(tape, store, regions)?;
        let mut lps = Vec::with_capacity(tokens.len() - 1);
        let mut alphas = Vec::with_capacity(tokens.len() - 1);
        for &prev in &tokens[..tokens.len() - 1] {
            let step = self.english.step(tape, store, &keys, state, prev, dropout)?;
            lps.push(step.log_probs);
            alphas.push(step.alpha);
            state = step.state;
        }
        Ok(EnglishPass {
            log_probs: tape.concat(&lps, Axis::Rows)?,
            alpha: tape.concat(&alphas, Axis::Rows)?,
            targets: tokens[1..].to_vec(),
        })
    }

    /// Encodes an English token sequence (without BOS) into `G`.
    pub fn encode_caption(&self, tape: &mut Tape, tokens: &[TokenId], dropout: &mut Dropout) -> Result<Option<Var>> {
        self.encoder
            .as_ref()
            .map(|enc| enc.encode(tape, &self.store, tokens, dropout))
            .transpose()
    }

    /// Prepared keys and initial state for German decoding.
    pub fn german_context(
        &self,
        tape: &mut Tape,
        regions: Var,
        caption: Option<Var>,
    ) -> Result<(PreparedKeys, Option<PreparedKeys>, super::DecoderState)> {
        let store = &self.store;
        let region_keys = self.german.region_attention.prepare(tape, store, regions)?;
        let caption_keys = match (&self.german.caption_attention, caption) {
            (Some(layer), Some(g)) => Some(layer.prepare(tape, store, g)?),
            (None, _) => None,
            (Some(_), None) => return Err(Error::input("dual-attention decoder needs an encoded caption")),
        };
        let state = self.german.init_state(tape, store, caption.unwrap_or(regions))?;
        Ok((region_keys, caption_keys, state))
    }

    /// Teacher-forced German unroll. `en_tokens` is the full English
    /// sequence `[BOS, ..., EOS]`; the encoder reads it without BOS, so
    /// column `j` of `beta` lines up with row `j` of the English attention.
    pub fn german_pass(
        &self,
        tape: &mut Tape,
        regions: Var,
        en_tokens: &[TokenId],
        de_tokens: &[TokenId],
        dropout: &mut Dropout,
    ) -> Result<GermanPass> {
        if de_tokens.len() < 2 || en_tokens.len() < 2 {
            return Err(Error::input("teacher forcing needs at least BOS and one target"));
        }
        let caption = self.encode_caption(tape, &en_tokens[1..], dropout)?;
        let (region_keys, caption_keys, mut state) = self.german_context(tape, regions, caption)?;
        let store = &self.store;
        let steps = de_tokens.len() - 1;
        let (mut lps, mut alphas, mut betas) = (Vec::with_capacity(steps), Vec::with_capacity(steps), Vec::new());
        for &prev in &de_tokens[..steps] {
            let step = self
                .german
                .step(tape, store, &region_keys, caption_keys.as_ref(), state, prev, dropout)?;
            lps.push(step.log_probs);
            alphas.push(step.alpha);
            betas.extend(step.beta);
            state = step.state;
        }
        let beta = if betas.is_empty() {
            None
        } else {
            Some(tape.concat(&betas, Axis::Rows)?)
        };
        Ok(GermanPass {
            log_probs: tape.concat(&lps, Axis::Rows)?,
            alpha: tape.concat(&alphas, Axis::Rows)?,
            beta,
            targets: de_tokens[1..].to_vec(),
        })
    }
}
