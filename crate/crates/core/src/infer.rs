//! Length-capped beam search and two-stage captioning.

use std::cell::RefCell;
use std::cmp::Ordering;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cycle::AttentionRecord;
use crate::data::{FeatureGrid, TokenId, BOS, EOS, PAD};
use crate::error::{Error, Result};
use crate::models::{DecoderState, Dropout, ModelBundle};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BeamConfig {
    pub beam_size: usize,
    /// Maximum number of word tokens; EOS does not count.
    pub max_len: usize,
}

impl Default for BeamConfig {
    fn default() -> Self {
        BeamConfig {
            beam_size: 3,
            max_len: 50,
        }
    }
}

impl BeamConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam_size == 0 || self.max_len == 0 {
            return Err(Error::Config(format!(
                "beam size and max length must be positive (got {} and {})",
                self.beam_size, self.max_len
            )));
        }
        Ok(())
    }
}

/// What the model returns for one expansion.
pub struct Expansion<S, A> {
    /// Log-probabilities over the full vocabulary. `-inf` entries are never
    /// expanded.
    pub log_probs: Vec<f64>,
    pub state: S,
    /// Per-step payload kept with the hypothesis, e.g. attention rows.
    pub extra: A,
}

#[derive(Debug, Clone)]
struct Hypothesis<S, A> {
    /// Starts with BOS.
    tokens: Vec<TokenId>,
    score: f64,
    state: S,
    extras: Vec<A>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Decoded<A> {
    /// Word tokens, without BOS or EOS.
    pub tokens: Vec<TokenId>,
    pub log_prob: f64,
    /// True if the sequence hit the length cap without producing EOS.
    pub truncated: bool,
    /// One payload per generated token, EOS included when present.
    pub extras: Vec<A>,
}

fn rank(a: (f64, &[TokenId]), b: (f64, &[TokenId])) -> Ordering {
    b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1))
}

/// Final ordering among finished hypotheses: score, then earlier EOS,
/// then token ids.
fn final_rank(a: (f64, &[TokenId]), b: (f64, &[TokenId])) -> Ordering {
    b.0.total_cmp(&a.0)
        .then_with(|| a.1.len().cmp(&b.1.len()))
        .then_with(|| a.1.cmp(b.1))
}

fn finish<S, A>(h: Hypothesis<S, A>, truncated: bool) -> Decoded<A> {
    let mut tokens = h.tokens;
    tokens.remove(0);
    if tokens.last() == Some(&EOS) {
        tokens.pop();
    }
    Decoded {
        tokens,
        log_prob: h.score,
        truncated,
        extras: h.extras,
    }
}

/// Beam search over summed log-probabilities without length normalization.
///
/// At each step every active hypothesis is expanded over the vocabulary.
/// Candidates are ranked by score, ties by token ids; EOS candidates among
/// the top `beam_size` retire, and the best non-EOS candidates (at most
/// `beam_size`) stay active. A hypothesis that reaches `max_len` words
/// without EOS is dropped; if nothing ever finishes, the best such
/// hypothesis is returned flagged as truncated.
pub fn beam_decode<S, A, F>(init: S, cfg: BeamConfig, mut step: F) -> Result<Decoded<A>>
where
    S: Clone,
    A: Clone,
    F: FnMut(&S, TokenId) -> Result<Expansion<S, A>>,
{
    cfg.validate()?;
    let mut active = vec![Hypothesis {
        tokens: vec![BOS],
        score: 0.0,
        state: init,
        extras: Vec::new(),
    }];
    let mut finished: Vec<Hypothesis<S, A>> = Vec::new();
    for t in 0..=cfg.max_len {
        let mut cands: Vec<(f64, Vec<TokenId>, usize, TokenId)> = Vec::new();
        let mut expanded = Vec::with_capacity(active.len());
        for (i, h) in active.iter().enumerate() {
            let prev = *h.tokens.last().expect("hypotheses start with BOS");
            let e = step(&h.state, prev)?;
            for (tok, lp) in e.log_probs.iter().enumerate() {
                if *lp == f64::NEG_INFINITY {
                    continue;
                }
                if !lp.is_finite() {
                    return Err(Error::numeric(format!("non-finite log-probability {lp} for token {tok}")));
                }
                let mut seq = h.tokens.clone();
                seq.push(tok);
                cands.push((h.score + lp, seq, i, tok));
            }
            expanded.push(e);
        }
        cands.sort_by(|a, b| rank((a.0, &a.1), (b.0, &b.1)));
        let last = t == cfg.max_len;
        let mut next = Vec::new();
        for (pos, (score, tokens, parent, tok)) in cands.into_iter().enumerate() {
            let is_eos = tok == EOS;
            if is_eos && pos >= cfg.beam_size {
                continue;
            }
            if !is_eos && (last || next.len() >= cfg.beam_size) {
                continue;
            }
            let e = &expanded[parent];
            let mut extras = active[parent].extras.clone();
            extras.push(e.extra.clone());
            let h = Hypothesis {
                tokens,
                score,
                state: e.state.clone(),
                extras,
            };
            if is_eos {
                finished.push(h);
            } else {
                next.push(h);
            }
        }
        if last {
            break;
        }
        let best_finished = finished.iter().map(|h| h.score).fold(f64::NEG_INFINITY, f64::max);
        let best_active = next.iter().map(|h| h.score).fold(f64::NEG_INFINITY, f64::max);
        active = next;
        if active.is_empty() || (!finished.is_empty() && best_finished >= best_active) {
            break;
        }
    }
    if !finished.is_empty() {
        finished.sort_by(|a, b| final_rank((a.score, &a.tokens), (b.score, &b.tokens)));
        return Ok(finish(finished.swap_remove(0), false));
    }
    active.sort_by(|a, b| rank((a.score, &a.tokens), (b.score, &b.tokens)));
    active
        .into_iter()
        .next()
        .map(|h| finish(h, true))
        .ok_or_else(|| Error::numeric("every continuation had zero probability"))
}

/// Argmax decoding, ties to the lowest token id.
pub fn greedy_decode<S, A, F>(init: S, max_len: usize, mut step: F) -> Result<Decoded<A>>
where
    F: FnMut(&S, TokenId) -> Result<Expansion<S, A>>,
{
    if max_len == 0 {
        return Err(Error::Config("max length must be positive".into()));
    }
    let (mut state, mut prev) = (init, BOS);
    let mut out = Decoded {
        tokens: Vec::new(),
        log_prob: 0.0,
        truncated: false,
        extras: Vec::new(),
    };
    loop {
        let e = step(&state, prev)?;
        let (tok, lp) = e
            .log_probs
            .iter()
            .copied()
            .enumerate()
            .fold(None, |best: Option<(usize, f64)>, (t, lp)| match best {
                Some((_, b)) if b >= lp => best,
                _ => Some((t, lp)),
            })
            .ok_or_else(|| Error::numeric("empty distribution"))?;
        if tok != EOS && out.tokens.len() == max_len {
            out.truncated = true;
            return Ok(out);
        }
        out.log_prob += lp;
        out.extras.push(e.extra);
        if tok == EOS {
            return Ok(out);
        }
        out.tokens.push(tok);
        state = e.state;
        prev = tok;
    }
}

/// Result of running both decoders on one image.
#[derive(Debug, Clone, PartialEq)]
pub struct CaptionOutput {
    pub en: Vec<TokenId>,
    pub de: Vec<TokenId>,
    pub en_truncated: bool,
    pub de_truncated: bool,
    /// The English decoder produced no words; the German decoder then saw
    /// only the EOS position, so its caption attention is trivially `[1]`.
    pub pseudo_empty: bool,
    /// `N × L`, `M × L`, `M × N`; absent for the image-only variant.
    pub record: Option<AttentionRecord>,
    /// `M × L` region attention of the German decoder.
    pub alpha_de: Tensor,
}

/// Decoder log-probabilities with PAD and BOS ruled out, since neither can
/// be generated.
pub fn generable_log_probs(tape: &Tape, log_probs: Var) -> Vec<f64> {
    let mut out = tape.value(log_probs).data().to_vec();
    for id in [PAD, BOS] {
        if let Some(v) = out.get_mut(id) {
            *v = f64::NEG_INFINITY;
        }
    }
    out
}

fn rows_to_tensor(rows: &[Vec<f64>], cols: usize) -> Result<Tensor> {
    Tensor::matrix(rows.len(), cols, rows.concat())
}

/// English beam search on an existing tape; extras are attention rows.
pub fn decode_english(bundle: &ModelBundle, tape: &mut Tape, regions: Var, cfg: BeamConfig) -> Result<Decoded<Vec<f64>>> {
    let store = &bundle.store;
    let keys = bundle.english.attention.prepare(tape, store, regions)?;
    let init = bundle.english.init_state(tape, store, regions)?;
    let tape = RefCell::new(tape);
    beam_decode(init, cfg, |s: &DecoderState, prev| {
        let mut tape = tape.borrow_mut();
        let st = bundle.english.step(&mut tape, store, &keys, *s, prev, &mut Dropout::eval())?;
        Ok(Expansion {
            log_probs: generable_log_probs(&tape, st.log_probs),
            state: st.state,
            extra: tape.value(st.alpha).data().to_vec(),
        })
    })
}

/// English caption only, for validating the pretrained English side.
pub fn caption_english(bundle: &ModelBundle, grid: &FeatureGrid, cfg: BeamConfig) -> Result<Decoded<Vec<f64>>> {
    cfg.validate()?;
    let mut tape = Tape::new();
    let regions = bundle.encode_image(&mut tape, grid)?;
    decode_english(bundle, &mut tape, regions, cfg)
}

/// Pseudo English caption by beam search, then the German caption by beam
/// search over the regions and the encoded pseudo caption.
pub fn caption_image(bundle: &ModelBundle, grid: &FeatureGrid, cfg: BeamConfig) -> Result<CaptionOutput> {
    cfg.validate()?;
    let store = &bundle.store;
    let mut tape = Tape::new();
    let regions = bundle.encode_image(&mut tape, grid)?;
    let l = grid.regions();

    let en = decode_english(bundle, &mut tape, regions, cfg)?;

    let mut en_seq = en.tokens.clone();
    if !en.truncated {
        en_seq.push(EOS);
    }
    let caption = bundle.encode_caption(&mut tape, &en_seq, &mut Dropout::eval())?;
    let (rkeys, ckeys, init) = bundle.german_context(&mut tape, regions, caption)?;
    let tape_cell = RefCell::new(tape);
    let de = beam_decode(init, cfg, |s: &DecoderState, prev| {
        let mut tape = tape_cell.borrow_mut();
        let st = bundle
            .german
            .step(&mut tape, store, &rkeys, ckeys.as_ref(), *s, prev, &mut Dropout::eval())?;
        let beta = st.beta.map(|b| tape.value(b).data().to_vec());
        Ok(Expansion {
            log_probs: generable_log_probs(&tape, st.log_probs),
            state: st.state,
            extra: (tape.value(st.alpha).data().to_vec(), beta),
        })
    })?;

    let alpha_de = rows_to_tensor(&de.extras.iter().map(|e| e.0.clone()).collect::<Vec<_>>(), l)?;
    let record = if bundle.variant.attends_caption() {
        let a_en = rows_to_tensor(&en.extras, l)?;
        let betas: Vec<Vec<f64>> = de.extras.iter().map(|e| e.1.clone().unwrap_or_default()).collect();
        let b = rows_to_tensor(&betas, en_seq.len())?;
        Some(AttentionRecord::new(a_en, alpha_de.clone(), b)?)
    } else {
        None
    };
    Ok(CaptionOutput {
        pseudo_empty: en.tokens.is_empty(),
        en: en.tokens,
        de: de.tokens,
        en_truncated: en.truncated,
        de_truncated: de.truncated,
        record,
        alpha_de,
    })
}

/// Captions many images in parallel on the current rayon pool. Output
/// order matches input order.
pub fn caption_all(
    bundle: &ModelBundle,
    images: &[(String, Arc<FeatureGrid>)],
    cfg: BeamConfig,
) -> Result<Vec<(String, CaptionOutput)>> {
    images
        .par_iter()
        .map(|(id, grid)| caption_image(bundle, grid, cfg).map(|c| (id.clone(), c)))
        .collect()
}
