use rand::Rng;

use super::Dropout;
use crate::attention::{AttentionLayer, PreparedKeys};
use crate::data::TokenId;
use crate::error::{Error, Result};
use crate::tensor::{Axis, LstmCell, ParamId, ParamStore, Tape, Var};

/// `tanh(mean(rows) · W + b)`.
#[derive(Debug, Clone)]
pub struct StateInit {
    pub w: ParamId,
    pub b: ParamId,
}

impl StateInit {
    pub fn new<R: Rng>(store: &mut ParamStore, prefix: &str, source_dim: usize, out: usize, rng: &mut R) -> Result<Self> {
        Ok(StateInit {
            w: store.weight(format!("{prefix}.w"), source_dim, out, rng)?,
            b: store.bias(format!("{prefix}.b"), out)?,
        })
    }

    pub fn apply(&self, tape: &mut Tape, store: &ParamStore, source: Var) -> Result<Var> {
        let mean = tape.mean_rows(source)?;
        let w = tape.param(store, self.w)?;
        let b = tape.param(store, self.b)?;
        let p = tape.matmul(mean, w)?;
        let p = tape.add(p, b)?;
        tape.tanh(p)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct DecoderState {
    pub h: Var,
    pub c: Var,
}

/// Word embedding, output projection and log-softmax shared by both decoders.
#[derive(Debug, Clone)]
struct WordIo {
    embed: ParamId,
    out_w: ParamId,
    out_b: ParamId,
    vocab: usize,
}

impl WordIo {
    fn new<R: Rng>(store: &mut ParamStore, prefix: &str, vocab: usize, embed: usize, hidden: usize, rng: &mut R) -> Result<Self> {
        Ok(WordIo {
            embed: store.weight(format!("{prefix}.embed"), vocab, embed, rng)?,
            out_w: store.weight(format!("{prefix}.out.w"), hidden, vocab, rng)?,
            out_b: store.bias(format!("{prefix}.out.b"), vocab)?,
            vocab,
        })
    }

    fn embed(&self, tape: &mut Tape, store: &ParamStore, token: TokenId, dropout: &mut Dropout) -> Result<Var> {
        if token >= self.vocab {
            return Err(Error::input(format!("token id {token} outside vocabulary of {}", self.vocab)));
        }
        let table = tape.param(store, self.embed)?;
        let e = tape.embedding(table, &[token])?;
        dropout.apply(tape, e)
    }

    fn log_probs(&self, tape: &mut Tape, store: &ParamStore, h: Var, dropout: &mut Dropout) -> Result<Var> {
        let h = dropout.apply(tape, h)?;
        let w = tape.param(store, self.out_w)?;
        let b = tape.param(store, self.out_b)?;
        let logits = tape.matmul(h, w)?;
        let logits = tape.add(logits, b)?;
        tape.log_softmax(logits)
    }
}

/// LSTM decoder with soft attention over image regions.
#[derive(Debug, Clone)]
pub struct EnglishDecoder {
    io: WordIo,
    pub lstm: LstmCell,
    pub attention: AttentionLayer,
    pub init_h: StateInit,
    pub init_c: StateInit,
}

#[derive(Debug, Clone, Copy)]
pub struct EnglishStep {
    /// `1 × V` log-probabilities of the next word.
    pub log_probs: Var,
    pub state: DecoderState,
    /// `1 × L` attention over regions.
    pub alpha: Var,
}

impl EnglishDecoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        vocab: usize,
        key_dim: usize,
        embed: usize,
        hidden: usize,
        attn: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(EnglishDecoder {
            io: WordIo::new(store, prefix, vocab, embed, hidden, rng)?,
            lstm: LstmCell::new(store, &format!("{prefix}.lstm"), key_dim + embed, hidden, rng)?,
            attention: AttentionLayer::new(store, &format!("{prefix}.att"), key_dim, hidden, attn, rng)?,
            init_h: StateInit::new(store, &format!("{prefix}.init_h"), key_dim, hidden, rng)?,
            init_c: StateInit::new(store, &format!("{prefix}.init_c"), key_dim, hidden, rng)?,
        })
    }

    pub fn vocab(&self) -> usize {
        self.io.vocab
    }

    pub fn init_state(&self, tape: &mut Tape, store: &ParamStore, regions: Var) -> Result<DecoderState> {
        Ok(DecoderState {
            h: self.init_h.apply(tape, store, regions)?,
            c: self.init_c.apply(tape, store, regions)?,
        })
    }

    pub fn step(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        regions: &PreparedKeys,
        state: DecoderState,
        prev: TokenId,
        dropout: &mut Dropout,
    ) -> Result<EnglishStep> {
        let att = self.attention.attend_prepared(tape, store, regions, state.h)?;
        let emb = self.io.embed(tape, store, prev, dropout)?;
        let x = tape.concat(&[att.context, emb], Axis::Cols)?;
        let (h, c) = self.lstm.step(tape, store, x, state.h, state.c)?;
        let log_probs = self.io.log_probs(tape, store, h, dropout)?;
        Ok(EnglishStep {
            log_probs,
            state: DecoderState { h, c },
            alpha: att.weights,
        })
    }
}

/// LSTM decoder attending over image regions and, when present, over the
/// encoded English caption. The step input is `[c_img ; z_cap ; y_prev]`.
#[derive(Debug, Clone)]
pub struct GermanDecoder {
    io: WordIo,
    pub lstm: LstmCell,
    pub region_attention: AttentionLayer,
    pub caption_attention: Option<AttentionLayer>,
    pub init_h: StateInit,
    pub init_c: StateInit,
}

#[derive(Debug, Clone, Copy)]
pub struct GermanStep {
    pub log_probs: Var,
    pub state: DecoderState,
    /// `1 × L` attention over regions.
    pub alpha: Var,
    /// `1 × N` attention over English positions (absent without a caption encoder).
    pub beta: Option<Var>,
}

impl GermanDecoder {
    /// `caption_dim` is the width of the encoder states, or `None` for an
    /// image-only decoder. The initial state is projected from the mean
    /// encoder state when a caption is attended, otherwise from the regions.
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        vocab: usize,
        key_dim: usize,
        caption_dim: Option<usize>,
        embed: usize,
        hidden: usize,
        attn: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let io = WordIo::new(store, prefix, vocab, embed, hidden, rng)?;
        let input = key_dim + caption_dim.unwrap_or(0) + embed;
        let lstm = LstmCell::new(store, &format!("{prefix}.lstm"), input, hidden, rng)?;
        let region_attention = AttentionLayer::new(store, &format!("{prefix}.att_img"), key_dim, hidden, attn, rng)?;
        let caption_attention = caption_dim
            .map(|d| AttentionLayer::new(store, &format!("{prefix}.att_cap"), d, hidden, attn, rng))
            .transpose()?;
        let source = caption_dim.unwrap_or(key_dim);
        Ok(GermanDecoder {
            io,
            lstm,
            region_attention,
            caption_attention,
            init_h: StateInit::new(store, &format!("{prefix}.init_h"), source, hidden, rng)?,
            init_c: StateInit::new(store, &format!("{prefix}.init_c"), source, hidden, rng)?,
        })
    }

    pub fn vocab(&self) -> usize {
        self.io.vocab
    }

    pub fn init_state(&self, tape: &mut Tape, store: &ParamStore, source: Var) -> Result<DecoderState> {
        Ok(DecoderState {
            h: self.init_h.apply(tape, store, source)?,
            c: self.init_c.apply(tape, store, source)?,
        })
    }

    #[allow(clippy::too_many_arguments)]
    pub fn step(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        regions: &PreparedKeys,
        caption: Option<&PreparedKeys>,
        state: DecoderState,
        prev: TokenId,
        dropout: &mut Dropout,
    ) -> Result<GermanStep> {
        let img = self.region_attention.attend_prepared(tape, store, regions, state.h)?;
        let cap = match (&self.caption_attention, caption) {
            (Some(layer), Some(keys)) => Some(layer.attend_prepared(tape, store, keys, state.h)?),
            (None, None) => None,
            _ => return Err(Error::input("caption keys must be given exactly when the decoder attends a caption")),
        };
        let emb = self.io.embed(tape, store, prev, dropout)?;
        let x = match cap {
            Some(z) => tape.concat(&[img.context, z.context, emb], Axis::Cols)?,
            None => tape.concat(&[img.context, emb], Axis::Cols)?,
        };
        let (h, c) = self.lstm.step(tape, store, x, state.h, state.c)?;
        let log_probs = self.io.log_probs(tape, store, h, dropout)?;
        Ok(GermanStep {
            log_probs,
            state: DecoderState { h, c },
            alpha: img.weights,
            beta: cap.map(|z| z.weights),
        })
    }
}
