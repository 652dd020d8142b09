//! Manifests, raw captions and encoded training records.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use log::warn;
use serde::{Deserialize, Serialize};

use super::features::FeatureGrid;
use super::vocab::{tokenize, TokenId, Vocabulary, BOS, EOS};
use crate::error::{Error, Result};

/// One manifest line. `features` is resolved relative to the manifest's
/// directory; `de` is absent for English-only pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub image_id: String,
    pub features: String,
    pub en: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub de: Option<String>,
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map_err(|e| Error::input(format!("{}:{}: {e}", path.display(), i + 1)))
        })
        .collect()
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r).map_err(|e| Error::input(e.to_string()))?;
        out.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
    f.write_all(&out)
        .map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

/// Tokenized caption(s) attached to a loaded feature grid.
#[derive(Debug, Clone)]
pub struct RawCaption {
    pub image_id: String,
    pub features: Arc<FeatureGrid>,
    pub en: Vec<String>,
    pub de: Option<Vec<String>>,
}

/// Loads a manifest and every feature file it references. Grids shared by
/// several lines are loaded once.
pub fn load_corpus(manifest: &Path) -> Result<Vec<RawCaption>> {
    let base = manifest.parent().map(Path::to_path_buf).unwrap_or_default();
    let records = read_manifest(manifest)?;
    let mut cache: HashMap<PathBuf, Arc<FeatureGrid>> = HashMap::new();
    let mut out = Vec::with_capacity(records.len());
    for r in records {
        let path = base.join(&r.features);
        let grid = match cache.get(&path) {
            Some(g) => g.clone(),
            None => {
                let g = Arc::new(FeatureGrid::load(&path)?);
                cache.insert(path, g.clone());
                g
            }
        };
        out.push(RawCaption {
            image_id: r.image_id,
            features: grid,
            en: tokenize(&r.en),
            de: r.de.as_deref().map(tokenize),
        });
    }
    Ok(out)
}

/// Encoded Image–English–German example. Both sequences are
/// `[BOS, ..., EOS]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TripleRecord {
    pub image_id: String,
    pub features: Arc<FeatureGrid>,
    pub en: Vec<TokenId>,
    pub de: Vec<TokenId>,
}

/// Encoded Image–English example for pretraining the English side.
#[derive(Debug, Clone, PartialEq)]
pub struct PairRecord {
    pub image_id: String,
    pub features: Arc<FeatureGrid>,
    pub en: Vec<TokenId>,
}

fn valid_sequence(seq: &[TokenId], max_len: usize) -> bool {
    seq.len() >= 3 && seq[0] == BOS && seq[seq.len() - 1] == EOS && seq.len() - 2 <= max_len
}

impl TripleRecord {
    /// Checks the record invariants for a caption length cap.
    pub fn validate(&self, max_len: usize) -> Result<()> {
        for (name, seq) in [("en", &self.en), ("de", &self.de)] {
            if !valid_sequence(seq, max_len) {
                return Err(Error::input(format!(
                    "{}: {name} caption violates BOS/EOS framing or length cap {max_len}",
                    self.image_id
                )));
            }
        }
        Ok(())
    }
}

/// Encodes the captions that carry German text. Captions that are empty
/// after preprocessing or exceed `max_len` words are skipped with a warning.
pub fn encode_triples(
    corpus: &[RawCaption],
    en_vocab: &Vocabulary,
    de_vocab: &Vocabulary,
    max_len: usize,
) -> Vec<TripleRecord> {
    corpus
        .iter()
        .filter_map(|c| {
            let de = c.de.as_ref()?;
            if c.en.is_empty() || de.is_empty() {
                warn!("skipping {}: empty caption", c.image_id);
                return None;
            }
            if c.en.len() > max_len || de.len() > max_len {
                warn!("skipping {}: caption longer than {max_len} tokens", c.image_id);
                return None;
            }
            Some(TripleRecord {
                image_id: c.image_id.clone(),
                features: c.features.clone(),
                en: en_vocab.encode(&c.en),
                de: de_vocab.encode(de),
            })
        })
        .collect()
}

pub fn encode_pairs(corpus: &[RawCaption], en_vocab: &Vocabulary, max_len: usize) -> Vec<PairRecord> {
    corpus
        .iter()
        .filter_map(|c| {
            if c.en.is_empty() {
                warn!("skipping {}: empty caption", c.image_id);
                return None;
            }
            if c.en.len() > max_len {
                warn!("skipping {}: caption longer than {max_len} tokens", c.image_id);
                return None;
            }
            Some(PairRecord {
                image_id: c.image_id.clone(),
                features: c.features.clone(),
                en: en_vocab.encode(&c.en),
            })
        })
        .collect()
}

pub fn english_sentences(corpus: &[RawCaption]) -> Vec<Vec<String>> {
    corpus.iter().map(|c| c.en.clone()).collect()
}

pub fn german_sentences(corpus: &[RawCaption]) -> Vec<Vec<String>> {
    corpus.iter().filter_map(|c| c.de.clone()).collect()
}

/// Groups reference captions by image id, in first-appearance order.
pub fn references_by_image(corpus: &[RawCaption], german: bool) -> Vec<(String, Vec<Vec<String>>)> {
    let mut order: Vec<String> = Vec::new();
    let mut refs: HashMap<String, Vec<Vec<String>>> = HashMap::new();
    for c in corpus {
        let caption = if german { c.de.clone() } else { Some(c.en.clone()) };
        let Some(caption) = caption else { continue };
        if !refs.contains_key(&c.image_id) {
            order.push(c.image_id.clone());
        }
        refs.entry(c.image_id.clone()).or_default().push(caption);
    }
    order
        .into_iter()
        .map(|id| {
            let r = refs.remove(&id).unwrap_or_default();
            (id, r)
        })
        .collect()
}
