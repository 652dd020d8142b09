//! English pretraining and German training with the cycle constraint.

use std::sync::Arc;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cycle::cycle_loss_var;
use crate::data::{FeatureGrid, PairRecord, TokenId, TripleRecord, Vocabulary, PAD};
use crate::error::{Error, Result};
use crate::eval::cider_d;
use crate::infer::{caption_all, caption_english, BeamConfig};
use crate::models::{Checkpoint, Dropout, ModelBundle};
use crate::tensor::{Adam, AdamConfig, ParamId, Tape, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Stop once validation CIDEr has not improved for more than this many
    /// consecutive epochs.
    pub patience: usize,
    pub dropout: f64,
    /// Weight of the cycle loss.
    pub lambda: f64,
    /// Use `‖·‖²` instead of `‖·‖` for the cycle loss.
    pub squared_cycle: bool,
    /// Keep the English side fixed while training the German side.
    pub freeze_part1: bool,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 4e-4,
            batch_size: 32,
            max_epochs: 50,
            patience: 20,
            dropout: 0.5,
            lambda: 1.0,
            squared_cycle: false,
            freeze_part1: false,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !self.learning_rate.is_finite() || self.learning_rate <= 0.0 {
            return bad(format!("learning rate must be positive, got {}", self.learning_rate));
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return bad("batch size and max epochs must be positive".into());
        }
        if self.patience > self.max_epochs {
            return bad(format!("patience {} exceeds max epochs {}", self.patience, self.max_epochs));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        if !self.lambda.is_finite() || self.lambda < 0.0 {
            return bad(format!("cycle weight must be non-negative, got {}", self.lambda));
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Per-token NLL averaged over the epoch's batches, with dropout.
    pub train_nll: f64,
    /// Per-token NLL on the training set after the epoch, without dropout.
    pub nll: f64,
    /// Mean per-caption cycle loss after the epoch, without dropout.
    pub cyc: Option<f64>,
    pub val_cider: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub stage: String,
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose parameters were kept.
    pub best_epoch: usize,
    pub stopped_early: bool,
}

impl TrainReport {
    /// One JSON object per epoch followed by a summary line.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.epochs {
            out.push_str(&serde_json::to_string(e).expect("plain data serializes"));
            out.push('\n');
        }
        let summary = serde_json::json!({
            "stage": self.stage,
            "best_epoch": self.best_epoch,
            "stopped_early": self.stopped_early,
            "epochs": self.epochs.len(),
        });
        out.push_str(&summary.to_string());
        out.push('\n');
        out
    }
}

/// Held-out images with reference captions for model selection.
pub struct Validation<'a> {
    pub images: Vec<(String, Arc<FeatureGrid>)>,
    pub references: Vec<Vec<Vec<String>>>,
    pub vocab: &'a Vocabulary,
}

/// Summed negative log-likelihood of `targets` under `T × V` log-probs,
/// skipping PAD. Returns the loss and the number of counted tokens.
pub fn nll_loss(tape: &mut Tape, log_probs: Var, targets: &[TokenId]) -> Result<(Var, usize)> {
    let (t, v) = tape.value(log_probs).dims();
    if t != targets.len() {
        return Err(Error::dim("nll loss", &[t, v], &[targets.len()]));
    }
    let picks: Vec<(usize, usize)> = targets
        .iter()
        .enumerate()
        .filter(|(_, &y)| y != PAD)
        .map(|(i, &y)| (i, y))
        .collect();
    if let Some((_, y)) = picks.iter().find(|(_, y)| *y >= v) {
        return Err(Error::input(format!("target token {y} outside vocabulary of {v}")));
    }
    if picks.is_empty() {
        let zero = tape.scalar(0.0)?;
        return Ok((zero, 0));
    }
    let sel = tape.select(log_probs, &picks)?;
    let total = tape.sum(sel)?;
    Ok((tape.scale(total, -1.0)?, picks.len()))
}

/// Loss terms of one triple on a shared tape.
pub struct ExampleLoss {
    pub nll: Var,
    pub tokens: usize,
    pub cyc: Option<Var>,
}

/// Teacher-forced German NLL and, for models that attend the caption, the
/// cycle loss against the English attention of the same image. The English
/// pass never uses dropout.
pub fn example_loss(
    bundle: &ModelBundle,
    tape: &mut Tape,
    triple: &TripleRecord,
    squared: bool,
    dropout: &mut Dropout,
) -> Result<ExampleLoss> {
    let regions = bundle.encode_image(tape, &triple.features)?;
    let de = bundle.german_pass(tape, regions, &triple.en, &triple.de, dropout)?;
    let (nll, tokens) = nll_loss(tape, de.log_probs, &de.targets)?;
    let cyc = match de.beta {
        Some(beta) => {
            let en = bundle.english_pass(tape, regions, &triple.en, &mut Dropout::eval())?;
            Some(cycle_loss_var(tape, de.alpha, beta, en.alpha, squared)?)
        }
        None => None,
    };
    Ok(ExampleLoss { nll, tokens, cyc })
}

/// Total objective `Σ (L_nll + λ·L_cyc)` for a set of triples on one tape.
/// The cycle term is left out entirely when `λ = 0`.
pub fn composed_loss(bundle: &ModelBundle, triples: &[TripleRecord], lambda: f64, squared: bool) -> Result<(Tape, Var)> {
    let mut tape = Tape::new();
    let mut terms = Vec::new();
    for t in triples {
        let ex = example_loss(bundle, &mut tape, t, squared, &mut Dropout::eval())?;
        terms.push(ex.nll);
        if let (Some(c), true) = (ex.cyc, lambda != 0.0) {
            terms.push(tape.scale(c, lambda)?);
        }
    }
    let loss = sum_terms(&mut tape, &terms)?;
    Ok((tape, loss))
}

fn sum_terms(tape: &mut Tape, terms: &[Var]) -> Result<Var> {
    let mut it = terms.iter();
    let mut acc = *it.next().ok_or_else(|| Error::input("nothing to sum"))?;
    for &t in it {
        acc = tape.add(acc, t)?;
    }
    Ok(acc)
}

/// Stream id for dropout masks, so each example of each batch gets its own
/// reproducible generator.
fn stream_seed(seed: u64, epoch: usize, batch: usize, example: usize) -> u64 {
    let mut h = seed ^ 0x9e37_79b9_7f4a_7c15;
    for v in [epoch as u64, batch as u64, example as u64] {
        h = (h ^ v).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        h ^= h >> 31;
    }
    h
}

/// Batches of indices grouped by `len`, in a seeded order that changes
/// every epoch.
fn batches(lens: &[usize], batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..lens.len()).collect();
    idx.shuffle(rng);
    idx.sort_by_key(|&i| lens[i]);
    let mut out: Vec<Vec<usize>> = idx.chunks(batch_size).map(<[usize]>::to_vec).collect();
    out.shuffle(rng);
    out
}

struct EarlyStop {
    patience: usize,
    best: Option<(f64, usize, Checkpoint)>,
    since: usize,
}

impl EarlyStop {
    /// Records an epoch's score; returns true when training should stop.
    fn observe(&mut self, epoch: usize, score: f64, bundle: &ModelBundle) -> bool {
        match &self.best {
            Some((b, _, _)) if score <= *b => {
                self.since += 1;
            }
            _ => {
                self.best = Some((score, epoch, bundle.checkpoint()));
                self.since = 0;
            }
        }
        self.since > self.patience
    }
}

fn finish_training(
    bundle: &mut ModelBundle,
    stage: &str,
    epochs: Vec<EpochRecord>,
    stop: EarlyStop,
    stopped_early: bool,
) -> Result<(Checkpoint, TrainReport)> {
    let best_epoch = match stop.best {
        Some((score, epoch, ckpt)) => {
            bundle.load_checkpoint(&ckpt)?;
            info!("{stage}: keeping epoch {epoch} (validation CIDEr {score:.3})");
            epoch
        }
        None => epochs.len(),
    };
    let report = TrainReport {
        stage: stage.to_string(),
        epochs,
        best_epoch,
        stopped_early,
    };
    Ok((bundle.checkpoint(), report))
}

fn check_loss(value: f64, stage: &str, epoch: usize, ids: &[&str]) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::numeric(format!(
            "{stage}: loss became {value} in epoch {epoch} on images {}",
            ids.join(", ")
        )))
    }
}

fn greedy() -> BeamConfig {
    BeamConfig {
        beam_size: 1,
        max_len: 50,
    }
}

fn english_nll(bundle: &ModelBundle, pairs: &[PairRecord]) -> Result<f64> {
    let (mut total, mut count) = (0.0, 0usize);
    for p in pairs {
        let mut tape = Tape::new();
        let regions = bundle.encode_image(&mut tape, &p.features)?;
        let pass = bundle.english_pass(&mut tape, regions, &p.en, &mut Dropout::eval())?;
        let (loss, n) = nll_loss(&mut tape, pass.log_probs, &pass.targets)?;
        total += tape.value(loss).item();
        count += n;
    }
    Ok(total / count.max(1) as f64)
}

/// Per-token German NLL and mean cycle loss on `triples`, without dropout.
pub fn evaluate_part2(bundle: &ModelBundle, triples: &[TripleRecord], squared: bool) -> Result<(f64, Option<f64>)> {
    let (mut nll, mut tokens, mut cyc, mut n_cyc) = (0.0, 0usize, 0.0, 0usize);
    for t in triples {
        let mut tape = Tape::new();
        let ex = example_loss(bundle, &mut tape, t, squared, &mut Dropout::eval())?;
        nll += tape.value(ex.nll).item();
        tokens += ex.tokens;
        if let Some(c) = ex.cyc {
            cyc += tape.value(c).item();
            n_cyc += 1;
        }
    }
    let cyc = (n_cyc > 0).then(|| cyc / n_cyc as f64);
    Ok((nll / tokens.max(1) as f64, cyc))
}

fn validate_english(bundle: &ModelBundle, val: &Validation) -> Result<f64> {
    use rayon::prelude::*;
    let cands: Vec<Vec<String>> = val
        .images
        .par_iter()
        .map(|(_, g)| caption_english(bundle, g, greedy()).map(|d| val.vocab.decode(&d.tokens)))
        .collect::<Result<_>>()?;
    cider_d(&cands, &val.references)
}

fn validate_german(bundle: &ModelBundle, val: &Validation) -> Result<f64> {
    let cands: Vec<Vec<String>> = caption_all(bundle, &val.images, greedy())?
        .into_iter()
        .map(|(_, c)| val.vocab.decode(&c.de))
        .collect();
    cider_d(&cands, &val.references)
}

/// Trains the image encoder and English decoder on image-English pairs with
/// teacher forcing. With validation data the best-CIDEr epoch is kept.
pub fn pretrain_part1(
    bundle: &mut ModelBundle,
    pairs: &[PairRecord],
    val: Option<&Validation>,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(Checkpoint, TrainReport)> {
    cfg.validate()?;
    let pairs: Vec<&PairRecord> = pairs
        .iter()
        .filter(|p| {
            let ok = p.en.len() > 2;
            if !ok {
                warn!("skipping {}: empty English caption", p.image_id);
            }
            ok
        })
        .collect();
    if pairs.is_empty() {
        return Err(Error::input("no image-English pairs to pretrain on"));
    }
    let ids = bundle.part1_ids();
    let mut adam = Adam::new(cfg.adam(), &bundle.store);
    let mut order_rng = ChaCha8Rng::seed_from_u64(seed);
    let lens: Vec<usize> = pairs.iter().map(|p| p.en.len()).collect();
    let owned: Vec<PairRecord> = pairs.iter().map(|p| (*p).clone()).collect();
    let mut epochs = Vec::new();
    let mut stop = EarlyStop {
        patience: cfg.patience,
        best: None,
        since: 0,
    };
    let mut stopped_early = false;
    for epoch in 1..=cfg.max_epochs {
        let (mut nll_sum, mut tok_sum) = (0.0, 0usize);
        for (bi, batch) in batches(&lens, cfg.batch_size, &mut order_rng).into_iter().enumerate() {
            let mut tape = Tape::new();
            let mut terms = Vec::with_capacity(batch.len());
            let mut tokens = 0;
            for (k, &i) in batch.iter().enumerate() {
                let p = pairs[i];
                let mut dropout = Dropout::train(cfg.dropout, stream_seed(seed, epoch, bi, k));
                let regions = bundle.encode_image(&mut tape, &p.features)?;
                let pass = bundle.english_pass(&mut tape, regions, &p.en, &mut dropout)?;
                let (loss, n) = nll_loss(&mut tape, pass.log_probs, &pass.targets)?;
                terms.push(loss);
                tokens += n;
            }
            let total = sum_terms(&mut tape, &terms)?;
            let value = tape.value(total).item();
            let names: Vec<&str> = batch.iter().map(|&i| pairs[i].image_id.as_str()).collect();
            check_loss(value, "pretrain", epoch, &names)?;
            let loss = tape.scale(total, 1.0 / batch.len() as f64)?;
            tape.backward(loss)?;
            let grads = tape.param_grads(&bundle.store);
            adam.step(&mut bundle.store, &grads, &ids)?;
            nll_sum += value;
            tok_sum += tokens;
        }
        let val_cider = val.map(|v| validate_english(bundle, v)).transpose()?;
        let rec = EpochRecord {
            epoch,
            train_nll: nll_sum / tok_sum.max(1) as f64,
            nll: english_nll(bundle, &owned)?,
            cyc: None,
            val_cider,
        };
        info!("pretrain epoch {epoch}: nll {:.4} val {:?}", rec.nll, rec.val_cider);
        epochs.push(rec);
        if let Some(score) = val_cider {
            if stop.observe(epoch, score, bundle) {
                stopped_early = epoch < cfg.max_epochs;
                break;
            }
        }
    }
    finish_training(bundle, "pretrain", epochs, stop, stopped_early)
}

/// Trains the caption encoder and German decoder (and, unless frozen, fine
/// tunes the English side) on `L_nll + λ·L_cyc`.
pub fn train_part2(
    bundle: &mut ModelBundle,
    triples: &[TripleRecord],
    val: Option<&Validation>,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(Checkpoint, TrainReport)> {
    cfg.validate()?;
    let triples: Vec<TripleRecord> = triples
        .iter()
        .filter(|t| {
            let ok = t.en.len() > 2 && t.de.len() > 2;
            if !ok {
                warn!("skipping {}: empty caption", t.image_id);
            }
            ok
        })
        .cloned()
        .collect();
    if triples.is_empty() {
        return Err(Error::input("no image-English-German triples to train on"));
    }
    let ids: Vec<ParamId> = if cfg.freeze_part1 {
        bundle.part2_ids()
    } else {
        bundle.store.ids().collect()
    };
    let mut adam = Adam::new(cfg.adam(), &bundle.store);
    let mut order_rng = ChaCha8Rng::seed_from_u64(seed);
    let lens: Vec<usize> = triples.iter().map(|t| t.de.len()).collect();
    let mut epochs = Vec::new();
    let mut stop = EarlyStop {
        patience: cfg.patience,
        best: None,
        since: 0,
    };
    let mut stopped_early = false;
    for epoch in 1..=cfg.max_epochs {
        let (mut nll_sum, mut tok_sum) = (0.0, 0usize);
        for (bi, batch) in batches(&lens, cfg.batch_size, &mut order_rng).into_iter().enumerate() {
            let mut tape = Tape::new();
            let mut terms = Vec::with_capacity(batch.len() * 2);
            let (mut nll_value, mut tokens) = (0.0, 0);
            for (k, &i) in batch.iter().enumerate() {
                let mut dropout = Dropout::train(cfg.dropout, stream_seed(seed, epoch, bi, k));
                let ex = example_loss(bundle, &mut tape, &triples[i], cfg.squared_cycle, &mut dropout)?;
                nll_value += tape.value(ex.nll).item();
                tokens += ex.tokens;
                terms.push(ex.nll);
                if let (Some(c), true) = (ex.cyc, cfg.lambda != 0.0) {
                    terms.push(tape.scale(c, cfg.lambda)?);
                }
            }
            let total = sum_terms(&mut tape, &terms)?;
            let names: Vec<&str> = batch.iter().map(|&i| triples[i].image_id.as_str()).collect();
            check_loss(tape.value(total).item(), "train", epoch, &names)?;
            let loss = tape.scale(total, 1.0 / batch.len() as f64)?;
            tape.backward(loss)?;
            let grads = tape.param_grads(&bundle.store);
            adam.step(&mut bundle.store, &grads, &ids)?;
            nll_sum += nll_value;
            tok_sum += tokens;
        }
        let (nll, cyc) = evaluate_part2(bundle, &triples, cfg.squared_cycle)?;
        let val_cider = val.map(|v| validate_german(bundle, v)).transpose()?;
        let rec = EpochRecord {
            epoch,
            train_nll: nll_sum / tok_sum.max(1) as f64,
            nll,
            cyc,
            val_cider,
        };
        info!("train epoch {epoch}: nll {:.4} cyc {:?} val {:?}", rec.nll, rec.cyc, rec.val_cider);
        epochs.push(rec);
        if let Some(score) = val_cider {
            if stop.observe(epoch, score, bundle) {
                stopped_early = epoch < cfg.max_epochs;
                break;
            }
        }
    }
    finish_training(bundle, "train", epochs, stop, stopped_early)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{encode_pairs, encode_triples, generate, references_by_image, SynthSpec, BOS, EOS};
    use crate::models::{ModelDims, Variant};
    use crate::tensor::gradcheck::{check_params, Selection};
    use crate::tensor::Tensor;
    use rand::Rng;

    #[test]
    fn nll_examples() {
        let mut t = Tape::new();
        // probability 1 on every target
        let lp = t
            .leaf(Tensor::from_rows(&[vec![f64::MIN, 0.0, f64::MIN], vec![f64::MIN, f64::MIN, 0.0]]).unwrap())
            .unwrap();
        let (l, n) = nll_loss(&mut t, lp, &[1, 2]).unwrap();
        assert_eq!((t.value(l).item(), n), (0.0, 2));

        let k = 5usize;
        let uniform = t.leaf(Tensor::matrix(3, k, vec![-(k as f64).ln(); 3 * k]).unwrap()).unwrap();
        let (l, _) = nll_loss(&mut t, uniform, &[4, 3, 1]).unwrap();
        assert!((t.value(l).item() - 3.0 * (k as f64).ln()).abs() < 1e-12);

        let (l, n) = nll_loss(&mut t, uniform, &[4, PAD, 1]).unwrap();
        assert_eq!(n, 2);
        assert!((t.value(l).item() - 2.0 * (k as f64).ln()).abs() < 1e-12);
        assert!(matches!(nll_loss(&mut t, uniform, &[1, 2]), Err(Error::Dimension { .. })));
    }

    #[test]
    fn nll_matches_independent_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let rows: Vec<Vec<f64>> = (0..6).map(|_| (0..7).map(|_| rng.random_range(-3.0..0.0)).collect()).collect();
        let targets: Vec<usize> = (0..6).map(|_| rng.random_range(1..7)).collect();
        let expect: f64 = -targets.iter().enumerate().map(|(i, &y)| rows[i][y]).sum::<f64>();
        let mut t = Tape::new();
        let lp = t.leaf(Tensor::from_rows(&rows).unwrap()).unwrap();
        let (l, _) = nll_loss(&mut t, lp, &targets).unwrap();
        assert!((t.value(l).item() - expect).abs() < 1e-12);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        for bad in [
            TrainConfig { learning_rate: 0.0, ..Default::default() },
            TrainConfig { batch_size: 0, ..Default::default() },
            TrainConfig { patience: 60, ..Default::default() },
            TrainConfig { dropout: 1.0, ..Default::default() },
            TrainConfig { lambda: -1.0, ..Default::default() },
        ] {
            assert!(matches!(bad.validate(), Err(Error::Config(_))));
        }
    }

    struct Fixture {
        triples: Vec<TripleRecord>,
        pairs: Vec<PairRecord>,
        en_vocab: Vocabulary,
        de_vocab: Vocabulary,
        dims: ModelDims,
        refs: Vec<Vec<Vec<String>>>,
    }

    fn fixture(images: usize) -> Fixture {
        let spec = SynthSpec {
            images,
            regions: 4,
            dim: 5,
            classes: 3,
            modifier_pool: 2,
            ..SynthSpec::default()
        };
        let corpus = generate(&spec).unwrap();
        let en_vocab = Vocabulary::build(&crate::data::english_sentences(&corpus.pairs), 1).unwrap();
        let de_vocab = Vocabulary::build(&crate::data::german_sentences(&corpus.triples), 1).unwrap();
        let triples = encode_triples(&corpus.triples, &en_vocab, &de_vocab, 50);
        let pairs = encode_pairs(&corpus.pairs, &en_vocab, 50);
        let refs = references_by_image(&corpus.triples, true).into_iter().map(|(_, r)| r).collect();
        let dims = ModelDims {
            feat_dim: 5,
            proj: 6,
            embed: 5,
            hidden: 6,
            attn: 4,
            en_vocab: en_vocab.len(),
            de_vocab: de_vocab.len(),
        };
        Fixture { triples, pairs, en_vocab, de_vocab, dims, refs }
    }

    #[test]
    fn composed_objective_gradients() {
        let f = fixture(2);
        let bundle = ModelBundle::new(Variant::CycleAttn, f.dims, 3).unwrap();
        let template = bundle.clone();
        let mut store = bundle.store.clone();
        let triples = f.triples[..1].to_vec();
        let rep = check_params(&mut store, &Selection::Fraction { fraction: 0.05, seed: 1 }, |s| {
            let mut b = template.clone();
            b.store = s.clone();
            composed_loss(&b, &triples, 1.0, false)
        })
        .unwrap();
        assert!(rep.max_rel_error < 1e-3, "{rep:?}");
        assert!(rep.checked > 10);
    }

    fn quick_cfg() -> TrainConfig {
        TrainConfig {
            learning_rate: 1e-2,
            batch_size: 2,
            max_epochs: 3,
            patience: 3,
            dropout: 0.2,
            ..Default::default()
        }
    }

    #[test]
    fn same_seed_same_curves() {
        let f = fixture(4);
        let run = || {
            let mut b = ModelBundle::new(Variant::CycleAttn, f.dims, 1).unwrap();
            let (_, r1) = pretrain_part1(&mut b, &f.pairs, None, &quick_cfg(), 5).unwrap();
            let (c, r2) = train_part2(&mut b, &f.triples, None, &quick_cfg(), 5).unwrap();
            (r1, r2, c)
        };
        let a = run();
        let b = run();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
        assert_eq!(a.2.to_bytes(), b.2.to_bytes());
        assert_eq!(a.1.epochs.iter().map(|e| e.epoch).collect::<Vec<_>>(), vec![1, 2, 3]);
        assert!(a.1.epochs.iter().all(|e| e.nll.is_finite() && e.cyc.unwrap().is_finite()));
    }

    #[test]
    fn zero_lambda_matches_dual_attention() {
        let f = fixture(4);
        let cfg = TrainConfig { lambda: 0.0, ..quick_cfg() };
        let run = |variant| {
            let mut b = ModelBundle::new(variant, f.dims, 1).unwrap();
            train_part2(&mut b, &f.triples, None, &cfg, 5).unwrap().0.to_bytes()
        };
        assert_eq!(run(Variant::CycleAttn), run(Variant::DualAttn));
    }

    #[test]
    fn frozen_english_side_is_untouched() {
        let f = fixture(4);
        let mut b = ModelBundle::new(Variant::CycleAttn, f.dims, 1).unwrap();
        let before = b.part1_checkpoint();
        let cfg = TrainConfig { freeze_part1: true, ..quick_cfg() };
        train_part2(&mut b, &f.triples, None, &cfg, 5).unwrap();
        assert_eq!(b.part1_checkpoint(), before);
        assert_ne!(b.checkpoint(), ModelBundle::new(Variant::CycleAttn, f.dims, 1).unwrap().checkpoint());
    }

    #[test]
    fn patience_zero_stops_after_first_non_improving_epoch() {
        let f = fixture(4);
        let images: Vec<_> = f.triples.iter().map(|t| (t.image_id.clone(), t.features.clone())).collect();
        let val = Validation { images, references: f.refs.clone(), vocab: &f.de_vocab };
        let cfg = TrainConfig { patience: 0, max_epochs: 30, learning_rate: 1e-6, ..quick_cfg() };
        let mut b = ModelBundle::new(Variant::DualAttn, f.dims, 1).unwrap();
        let (_, rep) = train_part2(&mut b, &f.triples, Some(&val), &cfg, 5).unwrap();
        let scores: Vec<f64> = rep.epochs.iter().map(|e| e.val_cider.unwrap()).collect();
        // the last epoch is the first that failed to improve on the best
        let last = *scores.last().unwrap();
        let best_before = scores[..scores.len() - 1].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert!(scores.len() >= 2 && last <= best_before, "{scores:?}");
        assert!(scores[..scores.len() - 1].windows(2).all(|w| w[1] > w[0]));
        assert!(rep.stopped_early);
        let _ = f.en_vocab.len();
    }

    #[test]
    fn empty_inputs_rejected_and_empty_captions_skipped() {
        let f = fixture(2);
        let mut b = ModelBundle::new(Variant::CycleAttn, f.dims, 1).unwrap();
        assert!(matches!(pretrain_part1(&mut b, &[], None, &quick_cfg(), 1), Err(Error::Input(_))));
        let mut t = f.triples.clone();
        t[0].de = vec![BOS, EOS];
        let (_, rep) = train_part2(&mut b, &t, None, &quick_cfg(), 1).unwrap();
        assert_eq!(rep.epochs.len(), 3);
        t[1].de = vec![BOS, EOS];
        assert!(train_part2(&mut b, &t, None, &quick_cfg(), 1).is_err());
    }

    #[test]
    fn report_jsonl_has_one_line_per_epoch_plus_summary() {
        let rep = TrainReport {
            stage: "train".into(),
            epochs: vec![EpochRecord { epoch: 1, train_nll: 1.0, nll: 0.5, cyc: Some(0.2), val_cider: None }],
            best_epoch: 1,
            stopped_early: false,
        };
        let text = rep.to_jsonl();
        assert_eq!(text.lines().count(), 2);
        let back: EpochRecord = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        assert_eq!(back, rep.epochs[0]);
    }
}
