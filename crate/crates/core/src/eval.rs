//! Corpus metrics and attention heatmap export.
//!
//! BLEU4 and CIDEr-D follow the conventions of the coco-caption toolkit:
//! corpus-level BLEU with the closest reference length, and CIDEr-D with
//! document frequencies taken from the evaluated reference set itself.
//! METEOR is not provided.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cycle::AttentionRecord;
use crate::data::{AlignmentRecord, TripleRecord};
use crate::error::{Error, Result};
use crate::models::{Dropout, ModelBundle};
use crate::tensor::Tape;

const MAX_N: usize = 4;
const CIDER_SIGMA: f64 = 6.0;

pub const CIDER_VARIANT: &str = "CIDEr-D (sigma 6, idf over the reference set, x10 scale)";
pub const BLEU_VARIANT: &str = "BLEU4 (corpus, closest reference length, no smoothing)";

type Counts<'a> = HashMap<&'a [String], usize>;

fn ngrams<'a>(tokens: &'a [String], n: usize) -> Counts<'a> {
    let mut out = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *out.entry(w).or_insert(0) += 1;
        }
    }
    out
}

fn check_inputs(cands: &[Vec<String>], refs: &[Vec<Vec<String>>]) -> Result<()> {
    if cands.is_empty() {
        return Err(Error::input("no candidates to score"));
    }
    if cands.len() != refs.len() {
        return Err(Error::dim("metric inputs", &[cands.len()], &[refs.len()]));
    }
    if let Some(i) = refs.iter().position(Vec::is_empty) {
        return Err(Error::input(format!("candidate {i} has no references")));
    }
    Ok(())
}

/// Corpus BLEU4, scaled to 0..100.
pub fn bleu4(cands: &[Vec<String>], refs: &[Vec<Vec<String>>]) -> Result<f64> {
    check_inputs(cands, refs)?;
    let mut guess = [0usize; MAX_N];
    let mut correct = [0usize; MAX_N];
    let (mut cand_len, mut ref_len) = (0usize, 0usize);
    for (cand, rs) in cands.iter().zip(refs) {
        cand_len += cand.len();
        ref_len += rs
            .iter()
            .map(|r| r.len())
            .min_by_key(|&l| (l.abs_diff(cand.len()), l))
            .unwrap_or(0);
        for n in 1..=MAX_N {
            let mut max_ref: Counts = HashMap::new();
            for r in rs {
                for (g, c) in ngrams(r, n) {
                    let e = max_ref.entry(g).or_insert(0);
                    *e = (*e).max(c);
                }
            }
            let counts = ngrams(cand, n);
            guess[n - 1] += counts.values().sum::<usize>();
            correct[n - 1] += counts
                .iter()
                .map(|(g, c)| (*c).min(max_ref.get(g).copied().unwrap_or(0)))
                .sum::<usize>();
        }
    }
    if correct.contains(&0) {
        return Ok(0.0);
    }
    let log_p: f64 = (0..MAX_N)
        .map(|k| (correct[k] as f64 / guess[k] as f64).ln())
        .sum::<f64>()
        / MAX_N as f64;
    let bp = if cand_len < ref_len {
        (1.0 - ref_len as f64 / cand_len as f64).exp()
    } else {
        1.0
    };
    Ok(100.0 * bp * log_p.exp())
}

struct TfIdf<'a> {
    vecs: [HashMap<&'a [String], f64>; MAX_N],
    norms: [f64; MAX_N],
    /// Bigram count, the length the reference implementation compares.
    length: f64,
}

fn tfidf<'a>(tokens: &'a [String], df: &HashMap<&'a [String], usize>, log_docs: f64) -> TfIdf<'a> {
    let mut out = TfIdf {
        vecs: Default::default(),
        norms: [0.0; MAX_N],
        length: 0.0,
    };
    for n in 1..=MAX_N {
        for (g, tf) in ngrams(tokens, n) {
            let d = df.get(g).copied().unwrap_or(0).max(1) as f64;
            let w = tf as f64 * (log_docs - d.ln());
            out.norms[n - 1] += w * w;
            out.vecs[n - 1].insert(g, w);
            if n == 2 {
                out.length += tf as f64;
            }
        }
    }
    for v in &mut out.norms {
        *v = v.sqrt();
    }
    out
}

fn similarity(hyp: &TfIdf, r: &TfIdf) -> f64 {
    let delta = hyp.length - r.length;
    let penalty = (-(delta * delta) / (2.0 * CIDER_SIGMA * CIDER_SIGMA)).exp();
    let mut total = 0.0;
    for n in 0..MAX_N {
        let mut val: f64 = hyp.vecs[n]
            .iter()
            .map(|(g, w)| {
                let rw = r.vecs[n].get(g).copied().unwrap_or(0.0);
                w.min(rw) * rw
            })
            .sum();
        if hyp.norms[n] != 0.0 && r.norms[n] != 0.0 {
            val /= hyp.norms[n] * r.norms[n];
        }
        total += val * penalty;
    }
    total / MAX_N as f64
}

/// Per-candidate CIDEr-D scores on the reference implementation's scale
/// (a perfect match scores up to 10).
pub fn cider_d_scores(cands: &[Vec<String>], refs: &[Vec<Vec<String>>]) -> Result<Vec<f64>> {
    check_inputs(cands, refs)?;
    let mut df: HashMap<&[String], usize> = HashMap::new();
    for rs in refs {
        let mut seen: HashMap<&[String], ()> = HashMap::new();
        for r in rs {
            for n in 1..=MAX_N {
                for g in ngrams(r, n).into_keys() {
                    seen.insert(g, ());
                }
            }
        }
        for g in seen.into_keys() {
            *df.entry(g).or_insert(0) += 1;
        }
    }
    let log_docs = (refs.len() as f64).ln();
    Ok(cands
        .iter()
        .zip(refs)
        .map(|(c, rs)| {
            let hyp = tfidf(c, &df, log_docs);
            let sum: f64 = rs.iter().map(|r| similarity(&hyp, &tfidf(r, &df, log_docs))).sum();
            sum / rs.len() as f64 * 10.0
        })
        .collect())
}

/// Corpus CIDEr-D: mean per-candidate score, ×100 as reported in tables.
pub fn cider_d(cands: &[Vec<String>], refs: &[Vec<Vec<String>>]) -> Result<f64> {
    let scores = cider_d_scores(cands, refs)?;
    Ok(100.0 * scores.iter().sum::<f64>() / scores.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub model: String,
    pub cider: f64,
    pub bleu4: f64,
    pub records: usize,
}

impl MetricReport {
    pub fn compute(model: &str, cands: &[Vec<String>], refs: &[Vec<Vec<String>>]) -> Result<Self> {
        Ok(MetricReport {
            model: model.to_string(),
            cider: cider_d(cands, refs)?,
            bleu4: bleu4(cands, refs)?,
            records: cands.len(),
        })
    }
}

/// Renders reports as a fixed-width table with the metric variants named
/// in the header.
pub fn render_table(reports: &[MetricReport]) -> String {
    let mut out = format!("# CIDEr: {CIDER_VARIANT}\n# BLEU4: {BLEU_VARIANT}\n");
    let width = reports.iter().map(|r| r.model.len()).max().unwrap_or(0).max(5);
    let _ = writeln!(out, "{:<width$}  {:>8}  {:>8}  {:>7}", "model", "CIDEr", "BLEU4", "records");
    for r in reports {
        let _ = writeln!(out, "{:<width$}  {:>8.2}  {:>8.2}  {:>7}", r.model, r.cider, r.bleu4, r.records);
    }
    out
}

/// How attention weights become gray levels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scaling {
    /// `255 · α`.
    Absolute,
    /// `255 · α / max(α)`, so the most attended cell is white.
    #[default]
    RowMax,
}

/// Renders one attention row over a `rows × cols` region grid as a binary
/// PGM, each cell drawn as a `cell × cell` block.
pub fn heatmap_pgm(weights: &[f64], rows: usize, cols: usize, cell: usize, scaling: Scaling) -> Result<Vec<u8>> {
    if rows * cols != weights.len() {
        return Err(Error::input(format!(
            "grid {rows}x{cols} does not match {} attention weights",
            weights.len()
        )));
    }
    if cell == 0 {
        return Err(Error::input("cell size must be positive"));
    }
    let max = weights.iter().cloned().fold(0.0f64, f64::max);
    let level = |w: f64| -> u8 {
        let v = match scaling {
            Scaling::Absolute => w,
            Scaling::RowMax if max > 0.0 => w / max,
            Scaling::RowMax => 0.0,
        };
        (v.clamp(0.0, 1.0) * 255.0).round() as u8
    };
    let (w, h) = (cols * cell, rows * cell);
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    for y in 0..h {
        for x in 0..w {
            out.push(level(weights[(y / cell) * cols + x / cell]));
        }
    }
    Ok(out)
}

fn file_safe(token: &str) -> String {
    token
        .chars()
        .map(|c| if c.is_alphanumeric() { c } else { '_' })
        .collect()
}

/// Writes `attention.txt` with all three matrices, plus one PGM per German
/// token. Returns the written paths.
#[allow(clippy::too_many_arguments)]
pub fn export_attention(
    dir: &Path,
    record: &AttentionRecord,
    en_tokens: &[String],
    de_tokens: &[String],
    grid: (usize, usize),
    cell: usize,
    scaling: Scaling,
) -> Result<Vec<PathBuf>> {
    if en_tokens.len() != record.english_len() || de_tokens.len() != record.german_len() {
        return Err(Error::input(format!(
            "token counts ({}, {}) do not match record shapes ({}, {})",
            en_tokens.len(),
            de_tokens.len(),
            record.english_len(),
            record.german_len()
        )));
    }
    if grid.0 * grid.1 != record.regions() {
        return Err(Error::input(format!(
            "grid {}x{} does not cover {} regions",
            grid.0,
            grid.1,
            record.regions()
        )));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let mut written = Vec::new();
    let text = format!(
        "# en: {}\n# de: {}\n{}",
        en_tokens.join(" "),
        de_tokens.join(" "),
        record.to_text()
    );
    let path = dir.join("attention.txt");
    fs::write(&path, text).map_err(|e| Error::io(path.display().to_string(), e))?;
    written.push(path);
    for (m, tok) in de_tokens.iter().enumerate() {
        let img = heatmap_pgm(record.a_de.row_slice(m), grid.0, grid.1, cell, scaling)?;
        let path = dir.join(format!("de_{m:02}_{}.pgm", file_safe(tok)));
        fs::write(&path, img).map_err(|e| Error::io(path.display().to_string(), e))?;
        written.push(path);
    }
    Ok(written)
}

/// Reads the matrices back from an `attention.txt` written by
/// [`export_attention`].
pub fn read_attention_text(text: &str) -> Result<AttentionRecord> {
    let body: String = text
        .lines()
        .filter(|l| !l.starts_with('#'))
        .map(|l| format!("{l}\n"))
        .collect();
    AttentionRecord::from_text(&body)
}

/// Mean region attention that German object words place on their
/// ground-truth region, under teacher forcing and without dropout. Images
/// missing from `alignment` are ignored.
pub fn alignment_mass(bundle: &ModelBundle, triples: &[TripleRecord], alignment: &[AlignmentRecord]) -> Result<f64> {
    let by_id: HashMap<&str, &AlignmentRecord> = alignment.iter().map(|a| (a.image_id.as_str(), a)).collect();
    let (mut total, mut count) = (0.0, 0usize);
    for t in triples {
        let Some(rec) = by_id.get(t.image_id.as_str()) else {
            continue;
        };
        let mut tape = Tape::new();
        let regions = bundle.encode_image(&mut tape, &t.features)?;
        let pass = bundle.german_pass(&mut tape, regions, &t.en, &t.de, &mut Dropout::eval())?;
        let alpha = tape.value(pass.alpha);
        for o in &rec.objects {
            if o.de_pos >= alpha.rows() || o.region >= alpha.cols() {
                return Err(Error::input(format!("alignment for {} is outside the caption or grid", t.image_id)));
            }
            total += alpha.get(o.de_pos, o.region);
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::input("no aligned objects among the given triples"));
    }
    Ok(total / count as f64)
}
