//! Independent oracles shared by the integration and acceptance tests.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use cyclecap::data::{TokenId, BOS, EOS, PAD};
use cyclecap::infer::Expansion;
use cyclecap::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn grams(tokens: &[String], n: usize) -> BTreeMap<String, usize> {
    let mut out = BTreeMap::new();
    if n == 0 || tokens.len() < n {
        return out;
    }
    for i in 0..=tokens.len() - n {
        *out.entry(tokens[i..i + n].join(" ")).or_insert(0) += 1;
    }
    out
}

/// Corpus BLEU4 written straight from the textbook definition.
pub fn brute_bleu4(cands: &[Vec<String>], refs: &[Vec<Vec<String>>]) -> f64 {
    let mut log_sum = 0.0;
    for n in 1..=4 {
        let (mut clipped, mut total) = (0usize, 0usize);
        for (c, rs) in cands.iter().zip(refs) {
            for (g, count) in grams(c, n) {
                let best = rs.iter().map(|r| grams(r, n).get(&g).copied().unwrap_or(0)).max().unwrap_or(0);
                clipped += count.min(best);
                total += count;
            }
        }
        if clipped == 0 {
            return 0.0;
        }
        log_sum += (clipped as f64 / total as f64).ln() / 4.0;
    }
    let c: usize = cands.iter().map(Vec::len).sum();
    let mut r = 0usize;
    for (cand, rs) in cands.iter().zip(refs) {
        let mut lens: Vec<usize> = rs.iter().map(Vec::len).collect();
        lens.sort_unstable();
        let mut best = lens[0];
        for &l in &lens {
            if l.abs_diff(cand.len()) < best.abs_diff(cand.len()) {
                best = l;
            }
        }
        r += best;
    }
    let bp = if c >= r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
    100.0 * bp * log_sum.exp()
}

/// Per-candidate CIDEr-D by direct summation over n-gram strings.
pub fn brute_cider_d(cands: &[Vec<String>], refs: &[Vec<Vec<String>>]) -> Vec<f64> {
    let images = refs.len() as f64;
    let df = |g: &str, n: usize| -> f64 {
        refs.iter()
            .filter(|rs| rs.iter().any(|r| grams(r, n).contains_key(g)))
            .count() as f64
    };
    let vector = |tokens: &[String], n: usize| -> BTreeMap<String, f64> {
        grams(tokens, n)
            .into_iter()
            .map(|(g, tf)| {
                let w = tf as f64 * (images.ln() - df(&g, n).max(1.0).ln());
                (g, w)
            })
            .collect()
    };
    let norm = |v: &BTreeMap<String, f64>| v.values().map(|w| w * w).sum::<f64>().sqrt();
    let bigrams = |t: &[String]| t.len().saturating_sub(1) as f64;
    cands
        .iter()
        .zip(refs)
        .map(|(c, rs)| {
            let mut per_ref = 0.0;
            for r in rs {
                let delta = bigrams(c) - bigrams(r);
                let penalty = (-delta * delta / 72.0).exp();
                let mut s = 0.0;
                for n in 1..=4 {
                    let (vc, vr) = (vector(c, n), vector(r, n));
                    let keys: BTreeSet<&String> = vc.keys().collect();
                    let mut dot = 0.0;
                    for k in keys {
                        let rw = vr.get(k).copied().unwrap_or(0.0);
                        dot += vc[k].min(rw) * rw;
                    }
                    let (nc, nr) = (norm(&vc), norm(&vr));
                    if nc != 0.0 && nr != 0.0 {
                        dot /= nc * nr;
                    }
                    s += dot * penalty;
                }
                per_ref += s / 4.0;
            }
            10.0 * per_ref / rs.len() as f64
        })
        .collect()
}

/// Ten captions with 1-4 references each over a five-letter alphabet, so
/// that n-gram overlaps are common.
pub fn random_corpus(seed: u64) -> (Vec<Vec<String>>, Vec<Vec<Vec<String>>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sentence = |rng: &mut ChaCha8Rng, min: usize| -> Vec<String> {
        let len = rng.random_range(min..=9);
        (0..len).map(|_| ((b'a' + rng.random_range(0..5u8)) as char).to_string()).collect()
    };
    let mut cands = Vec::new();
    let mut refs = Vec::new();
    for _ in 0..10 {
        cands.push(sentence(&mut rng, 1));
        let k = rng.random_range(1..=4);
        refs.push((0..k).map(|_| sentence(&mut rng, 1)).collect());
    }
    (cands, refs)
}

pub fn words(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_string).collect()
}

/// A toy decoder whose next-token distribution is a seeded function of the
/// whole prefix. Generable tokens are EOS and `words` word ids after it.
pub struct PrefixModel {
    pub seed: u64,
    pub words: usize,
}

impl PrefixModel {
    pub fn vocab(&self) -> usize {
        EOS + 1 + self.words
    }

    pub fn probs(&self, prefix: &[TokenId]) -> Vec<f64> {
        let mut h = self.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15);
        for &t in prefix {
            h = (h ^ t as u64).wrapping_mul(0x0100_0000_01B3).rotate_left(17);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(h);
        let raw: Vec<f64> = (0..self.vocab())
            .map(|t| if t == PAD || t == BOS { 0.0 } else { rng.random_range(0.02..1.0) })
            .collect();
        let s: f64 = raw.iter().sum();
        raw.into_iter().map(|p| p / s).collect()
    }

    pub fn step(&self, prefix: &[TokenId], prev: TokenId) -> Result<Expansion<Vec<TokenId>, ()>> {
        let mut next = prefix.to_vec();
        next.push(prev);
        Ok(Expansion {
            log_probs: self.probs(&next).iter().map(|p| p.ln()).collect(),
            state: next,
            extra: (),
        })
    }

    /// Best finished sequence with at most `max_len` words, by enumeration.
    pub fn exhaustive(&self, max_len: usize) -> (Vec<TokenId>, f64) {
        let mut best: Option<(Vec<TokenId>, f64)> = None;
        let mut frontier = vec![(vec![BOS], 0.0)];
        while let Some((seq, score)) = frontier.pop() {
            for (tok, p) in self.probs(&seq).into_iter().enumerate() {
                if p == 0.0 {
                    continue;
                }
                let s = score + p.ln();
                if tok == EOS {
                    if best.as_ref().is_none_or(|b| s > b.1) {
                        best = Some((seq[1..].to_vec(), s));
                    }
                } else if seq.len() <= max_len {
                    let mut next = seq.clone();
                    next.push(tok);
                    frontier.push((next, s));
                }
            }
        }
        best.expect("EOS always has mass")
    }
}

pub mod grads {
    use cyclecap::cycle::cycle_loss_var;
    use cyclecap::data::{encode_triples, english_sentences, generate, german_sentences, SynthSpec, TripleRecord, Vocabulary};
    use cyclecap::models::{Dropout, ModelBundle, ModelDims, Variant};
    use cyclecap::tensor::gradcheck::{check_params, GradCheckReport, Selection};
    use cyclecap::tensor::{Axis, GruCell, LstmCell, ParamStore, Tape, Tensor, Var};
    use cyclecap::train::{composed_loss, nll_loss};
    use cyclecap::Result;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub const TOLERANCE: f64 = 1e-3;

    /// Uneven weighted sum plus a cubic term, so each output entry pulls on
    /// the loss differently.
    fn readout(t: &mut Tape, out: Var) -> Result<Var> {
        let (r, c) = t.value(out).dims();
        let pos: Vec<(usize, usize)> = (0..r).flat_map(|i| (0..c).map(move |j| (i, j))).collect();
        let flat = t.select(out, &pos)?;
        let w = t.leaf(Tensor::row((0..r * c).map(|k| ((k * 7 % 5) as f64 - 2.0) * 0.37).collect()))?;
        let cube = t.mul(flat, flat)?;
        let cube = t.mul(cube, flat)?;
        let a = t.mul(flat, w)?;
        let a = t.sum(a)?;
        let b = t.sum(cube)?;
        let b = t.scale(b, 0.1)?;
        t.add(a, b)
    }

    pub const PRIMITIVES: [&str; 22] = [
        "matmul", "add", "add_row", "sub", "mul", "affine", "concat", "stack", "slice", "transpose",
        "softmax_rows", "softmax_cols", "log_softmax", "tanh", "sigmoid", "embedding", "dropout",
        "mean_rows", "select", "sum_squares", "norm", "sum",
    ];

    pub fn primitive(name: &str) -> GradCheckReport {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let a = store.weight("a", 3, 4, &mut rng).unwrap();
        let b = store.weight("b", 4, 2, &mut rng).unwrap();
        let c = store.weight("c", 3, 4, &mut rng).unwrap();
        let r = store.weight("r", 1, 4, &mut rng).unwrap();
        for id in [a, b, c, r] {
            store.get_mut(id).data_mut().iter_mut().for_each(|x| *x *= 8.0);
        }
        check_params(&mut store, &Selection::All, |s| {
            let mut t = Tape::new();
            let (av, bv, cv, rv) = (t.param(s, a)?, t.param(s, b)?, t.param(s, c)?, t.param(s, r)?);
            let out = match name {
                "matmul" => t.matmul(av, bv)?,
                "add" => t.add(av, cv)?,
                "add_row" => t.add(av, rv)?,
                "sub" => t.sub(av, cv)?,
                "mul" => t.mul(av, cv)?,
                "affine" => t.affine(av, 0.7, -0.3)?,
                "concat" => t.concat(&[av, cv], Axis::Cols)?,
                "stack" => t.concat(&[cv, rv, av], Axis::Rows)?,
                "slice" => t.slice_cols(av, 1, 3)?,
                "transpose" => t.transpose(av)?,
                "softmax_rows" => t.softmax(av, Axis::Rows)?,
                "softmax_cols" => t.softmax(av, Axis::Cols)?,
                "log_softmax" => t.log_softmax(av)?,
                "tanh" => t.tanh(av)?,
                "sigmoid" => t.sigmoid(av)?,
                "embedding" => t.embedding(av, &[1, 1, 0, 2])?,
                "dropout" => t.dropout(av, 0.3, &mut ChaCha8Rng::seed_from_u64(3))?,
                "mean_rows" => t.mean_rows(av)?,
                "select" => t.select(av, &[(1, 1), (2, 0), (1, 1)])?,
                "sum_squares" => t.sum_squares(av)?,
                "norm" => t.norm(av)?,
                "sum" => t.sum(av)?,
                other => panic!("no primitive {other}"),
            };
            let loss = readout(&mut t, out)?;
            Ok((t, loss))
        })
        .unwrap()
    }

    pub fn lstm() -> GradCheckReport {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut store = ParamStore::new();
        let cell = LstmCell::new(&mut store, "lstm", 3, 4, &mut rng).unwrap();
        let x = store.weight("x", 2, 3, &mut rng).unwrap();
        let h0 = store.weight("h0", 1, 4, &mut rng).unwrap();
        let c0 = store.weight("c0", 1, 4, &mut rng).unwrap();
        check_params(&mut store, &Selection::All, |s| {
            let mut t = Tape::new();
            let xs = t.param(s, x)?;
            let (mut h, mut c) = (t.param(s, h0)?, t.param(s, c0)?);
            for step in 0..2 {
                let xt = t.select(xs, &[(step, 0), (step, 1), (step, 2)])?;
                (h, c) = cell.step(&mut t, s, xt, h, c)?;
            }
            let both = t.concat(&[h, c], Axis::Cols)?;
            let loss = readout(&mut t, both)?;
            Ok((t, loss))
        })
        .unwrap()
    }

    pub fn gru() -> GradCheckReport {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut store = ParamStore::new();
        let cell = GruCell::new(&mut store, "gru", 3, 4, &mut rng).unwrap();
        let x = store.weight("x", 2, 3, &mut rng).unwrap();
        let h0 = store.weight("h0", 1, 4, &mut rng).unwrap();
        check_params(&mut store, &Selection::All, |s| {
            let mut t = Tape::new();
            let xs = t.param(s, x)?;
            let mut h = t.param(s, h0)?;
            for step in 0..2 {
                let xt = t.select(xs, &[(step, 0), (step, 1), (step, 2)])?;
                h = cell.step(&mut t, s, xt, h)?;
            }
            let loss = readout(&mut t, h)?;
            Ok((t, loss))
        })
        .unwrap()
    }

    pub fn cycle(squared: bool) -> GradCheckReport {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut store = ParamStore::new();
        let en = store.weight("en", 3, 4, &mut rng).unwrap();
        let de = store.weight("de", 2, 4, &mut rng).unwrap();
        let b = store.weight("b", 2, 3, &mut rng).unwrap();
        for id in [en, de, b] {
            store.get_mut(id).data_mut().iter_mut().for_each(|x| *x *= 10.0);
        }
        check_params(&mut store, &Selection::All, |s| {
            let mut t = Tape::new();
            let rows = |t: &mut Tape, id| -> Result<Var> {
                let v = t.param(s, id)?;
                t.softmax(v, Axis::Rows)
            };
            let (a_en, a_de, bb) = (rows(&mut t, en)?, rows(&mut t, de)?, rows(&mut t, b)?);
            let loss = cycle_loss_var(&mut t, a_de, bb, a_en, squared)?;
            Ok((t, loss))
        })
        .unwrap()
    }

    pub fn tiny_setup(variant: Variant, seed: u64) -> (ModelBundle, Vec<TripleRecord>) {
        let spec = SynthSpec {
            seed,
            images: 2,
            regions: 4,
            dim: 5,
            classes: 3,
            modifier_pool: 2,
            ..SynthSpec::default()
        };
        let corpus = generate(&spec).unwrap();
        let en = Vocabulary::build(&english_sentences(&corpus.pairs), 1).unwrap();
        let de = Vocabulary::build(&german_sentences(&corpus.triples), 1).unwrap();
        let triples = encode_triples(&corpus.triples, &en, &de, 50);
        let dims = ModelDims {
            feat_dim: 5,
            proj: 6,
            embed: 5,
            hidden: 6,
            attn: 4,
            en_vocab: en.len(),
            de_vocab: de.len(),
        };
        (ModelBundle::new(variant, dims, seed).unwrap(), triples)
    }

    fn params_with_prefix(bundle: &ModelBundle, prefixes: &[&str]) -> Selection {
        Selection::Params(
            bundle
                .store
                .iter()
                .filter(|(_, name, _)| prefixes.iter().any(|p| name.starts_with(p)))
                .map(|(id, _, _)| id)
                .collect(),
        )
    }

    /// English decoding loss through region attention; checks the image
    /// encoder and the English attention layer.
    pub fn region_attention_path() -> GradCheckReport {
        let (bundle, triples) = tiny_setup(Variant::CycleAttn, 21);
        let sel = params_with_prefix(&bundle, &["img.", "en.att."]);
        let mut store = bundle.store.clone();
        check_params(&mut store, &sel, |s| {
            let mut b = bundle.clone();
            b.store = s.clone();
            let mut t = Tape::new();
            let r = b.encode_image(&mut t, &triples[0].features)?;
            let pass = b.english_pass(&mut t, r, &triples[0].en, &mut Dropout::eval())?;
            let (loss, _) = nll_loss(&mut t, pass.log_probs, &pass.targets)?;
            Ok((t, loss))
        })
        .unwrap()
    }

    /// German decoding loss through caption attention; checks the caption
    /// encoder and the caption attention layer.
    pub fn caption_attention_path() -> GradCheckReport {
        let (bundle, triples) = tiny_setup(Variant::CycleAttn, 22);
        let sel = params_with_prefix(&bundle, &["enc.", "de.att_cap."]);
        let mut store = bundle.store.clone();
        check_params(&mut store, &sel, |s| {
            let mut b = bundle.clone();
            b.store = s.clone();
            let mut t = Tape::new();
            let r = b.encode_image(&mut t, &triples[0].features)?;
            let pass = b.german_pass(&mut t, r, &triples[0].en, &triples[0].de, &mut Dropout::eval())?;
            let (loss, _) = nll_loss(&mut t, pass.log_probs, &pass.targets)?;
            Ok((t, loss))
        })
        .unwrap()
    }

    /// The full training objective over every parameter.
    pub fn composed(lambda: f64, squared: bool) -> GradCheckReport {
        let (bundle, triples) = tiny_setup(Variant::CycleAttn, 23);
        let mut store = bundle.store.clone();
        check_params(&mut store, &Selection::All, |s| {
            let mut b = bundle.clone();
            b.store = s.clone();
            composed_loss(&b, &triples[..1], lambda, squared)
        })
        .unwrap()
    }

    /// Every check in the suite with its report.
    pub fn suite() -> Vec<(String, GradCheckReport)> {
        let mut out: Vec<(String, GradCheckReport)> =
            PRIMITIVES.iter().map(|p| (p.to_string(), primitive(p))).collect();
        out.push(("lstm".into(), lstm()));
        out.push(("gru".into(), gru()));
        out.push(("region attention".into(), region_attention_path()));
        out.push(("caption attention".into(), caption_attention_path()));
        out.push(("cycle".into(), cycle(false)));
        out.push(("cycle squared".into(), cycle(true)));
        out.push(("composed".into(), composed(1.0, false)));
        out
    }
}

pub mod rows {
    use cyclecap::cycle::{indirect_attention, AttentionRecord};
    use cyclecap::data::{FeatureGrid, BOS, EOS};
    use cyclecap::models::{Dropout, ModelBundle, ModelDims, Variant};
    use cyclecap::tensor::{Tape, Tensor};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Largest row-sum error and most negative entry of a matrix.
    pub fn row_defect(t: &Tensor) -> (f64, f64) {
        let mut worst = 0.0f64;
        let mut min = f64::INFINITY;
        for r in 0..t.rows() {
            let row = t.row_slice(r);
            worst = worst.max((row.iter().sum::<f64>() - 1.0).abs());
            min = row.iter().copied().fold(min, f64::min);
        }
        (worst, min)
    }

    /// One randomly sized, randomly initialized teacher-forced pass of a
    /// dual-attention model, returned unvalidated as (A_en, A_de, B).
    pub fn random_pass(seed: u64) -> (Tensor, Tensor, Tensor) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let regions = rng.random_range(1..=12);
        let feat = rng.random_range(1..=6);
        let dims = ModelDims {
            feat_dim: feat,
            proj: rng.random_range(1..=6),
            embed: rng.random_range(1..=5),
            hidden: rng.random_range(1..=6),
            attn: rng.random_range(1..=5),
            en_vocab: rng.random_range(5..=9),
            de_vocab: rng.random_range(5..=9),
        };
        let variant = if rng.random_bool(0.5) { Variant::DualAttn } else { Variant::CycleAttn };
        let mut bundle = ModelBundle::new(variant, dims, rng.random()).unwrap();
        let scale = rng.random_range(0.1..20.0);
        for id in bundle.store.ids().collect::<Vec<_>>() {
            bundle.store.get_mut(id).data_mut().iter_mut().for_each(|x| *x *= scale);
        }
        let values: Vec<f64> = (0..regions * feat).map(|_| rng.random_range(-3.0..3.0)).collect();
        let grid = FeatureGrid::new(regions, feat, values).unwrap();
        let sentence = |vocab: usize, rng: &mut ChaCha8Rng| {
            let n = rng.random_range(0..=7);
            let mut s = vec![BOS];
            s.extend((0..n).map(|_| rng.random_range(3..vocab)));
            s.push(EOS);
            s
        };
        let en = sentence(dims.en_vocab, &mut rng);
        let de = sentence(dims.de_vocab, &mut rng);
        let mut tape = Tape::new();
        let r = bundle.encode_image(&mut tape, &grid).unwrap();
        let e = bundle.english_pass(&mut tape, r, &en, &mut Dropout::eval()).unwrap();
        let g = bundle.german_pass(&mut tape, r, &en, &de, &mut Dropout::eval()).unwrap();
        (
            tape.value(e.alpha).clone(),
            tape.value(g.alpha).clone(),
            tape.value(g.beta.expect("dual attention")).clone(),
        )
    }

    /// Worst row-sum error and smallest entry over A_en, A_de, B and B·A_en.
    pub fn check(seed: u64) -> (f64, f64) {
        let (a_en, a_de, b) = random_pass(seed);
        let rec = AttentionRecord::new(a_en.clone(), a_de.clone(), b.clone()).unwrap();
        let ind = indirect_attention(&rec).unwrap();
        [a_en, a_de, b, ind].iter().map(row_defect).fold((0.0, f64::INFINITY), |acc, d| (acc.0.max(d.0), acc.1.min(d.1)))
    }
}
