use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use cyclecap::config::Config;
use cyclecap::cycle::{check_chain, cycle_loss, indirect_attention, toy_record, Joint};
use cyclecap::data::{
    encode_pairs, encode_triples, english_sentences, generate, german_sentences, load_corpus, read_manifest,
    references_by_image, FeatureGrid, RawCaption, Vocabulary,
};
use cyclecap::eval::{export_attention, render_table, MetricReport};
use cyclecap::infer::{caption_all, caption_image, CaptionOutput};
use cyclecap::models::{Checkpoint, ModelBundle, ModelDims, Variant};
use cyclecap::tensor::gradcheck::{check_params, Selection};
use cyclecap::train::{composed_loss, pretrain_part1, train_part2, Validation};
use cyclecap::{Error, Result};
use log::info;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::args::{AttnArgs, Command, DimsArg, GradArgs, ModelInput, PretrainArgs, SynthArgs, TrainArgs};

/// Files a run wrote and the inputs it read, for the manifest.
#[derive(Default)]
pub struct Outcome {
    pub inputs: Vec<PathBuf>,
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))
}

fn to_json<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("plain data serializes") + "\n"
}

fn from_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    serde_json::from_str(&read(path)?).map_err(|e| Error::input(format!("{}: {e}", path.display())))
}

/// The manifest file plus every feature file it references.
fn corpus_inputs(manifest: &Path) -> Result<Vec<PathBuf>> {
    let base = manifest.parent().unwrap_or(Path::new("."));
    let mut out = vec![manifest.to_path_buf()];
    let mut seen = HashSet::new();
    for r in read_manifest(manifest)? {
        if seen.insert(r.features.clone()) {
            out.push(base.join(&r.features));
        }
    }
    Ok(out)
}

fn unique_images(corpus: &[RawCaption]) -> Vec<(String, Arc<FeatureGrid>)> {
    let mut seen = HashSet::new();
    corpus
        .iter()
        .filter(|c| seen.insert(c.image_id.clone()))
        .map(|c| (c.image_id.clone(), c.features.clone()))
        .collect()
}

pub fn synth_data(_args: &SynthArgs, val_images: usize, cfg: &Config, out: &Path) -> Result<Outcome> {
    let corpus = generate(&cfg.synth)?;
    if val_images >= corpus.triples.len() {
        return Err(Error::Config(format!(
            "{val_images} validation images leave nothing to train on"
        )));
    }
    corpus.write(out, val_images)?;
    println!(
        "wrote {} images ({} held out) to {}",
        corpus.triples.len(),
        val_images,
        out.display()
    );
    Ok(Outcome::default())
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    variant: Variant,
    dims: ModelDims,
}

const PART1_FILE: &str = "part1.json";
const MODEL_FILE: &str = "model.json";

fn optional(path: PathBuf) -> Option<PathBuf> {
    path.exists().then_some(path)
}

pub fn pretrain(args: &PretrainArgs, cfg: &Config, out: &Path) -> Result<Outcome> {
    let pairs_path = args.data.join("pairs.jsonl");
    let val_path = optional(args.data.join("val.jsonl"));
    let corpus = load_corpus(&pairs_path)?;
    let vocab = Vocabulary::build(&english_sentences(&corpus), cfg.data.min_freq)?;
    let pairs = encode_pairs(&corpus, &vocab, cfg.data.max_len);
    let feat_dim = corpus.first().map(|c| c.features.dim()).unwrap_or(0);
    // the German side is discarded; it only needs a valid shape
    let dims = cfg.model.dims(feat_dim, vocab.len(), 5);
    let mut bundle = ModelBundle::new(Variant::SoftAttn, dims, cfg.seed)?;

    let mut inputs = corpus_inputs(&pairs_path)?;
    let val_data = match &val_path {
        Some(p) => {
            inputs.extend(corpus_inputs(p)?);
            let val = load_corpus(p)?;
            let refs = references_by_image(&val, false);
            Some((unique_images(&val), refs.into_iter().map(|r| r.1).collect::<Vec<_>>()))
        }
        None => None,
    };
    let val = val_data.map(|(images, references)| Validation {
        images,
        references,
        vocab: &vocab,
    });
    let (_, report) = pretrain_part1(&mut bundle, &pairs, val.as_ref(), &cfg.pretrain, cfg.seed)?;

    fs::create_dir_all(out).map_err(|e| Error::io(format!("creating {}", out.display()), e))?;
    bundle.part1_checkpoint().save(&out.join("part1.ckpt"))?;
    vocab.save(&out.join("vocab.en"))?;
    write(&out.join(PART1_FILE), to_json(&dims))?;
    write(&out.join("pretrain_report.jsonl"), report.to_jsonl())?;
    let last = report.epochs.last().map(|e| e.nll).unwrap_or(f64::NAN);
    println!(
        "pretrained {} epochs (kept epoch {}), per-token nll {last:.4}",
        report.epochs.len(),
        report.best_epoch
    );
    Ok(Outcome { inputs })
}

pub fn train(args: &TrainArgs, cfg: &Config, out: &Path) -> Result<Outcome> {
    let part1_dims: ModelDims = from_json(&args.part1.join(PART1_FILE))?;
    let en_vocab = Vocabulary::load(&args.part1.join("vocab.en"))?;
    let part1 = Checkpoint::load(&args.part1.join("part1.ckpt"))?;
    let triples_path = args.data.join("triples.jsonl");
    let val_path = optional(args.data.join("val.jsonl"));
    let corpus = load_corpus(&triples_path)?;
    let de_vocab = Vocabulary::build(&german_sentences(&corpus), cfg.data.min_freq)?;
    if en_vocab.len() != part1_dims.en_vocab {
        return Err(Error::input("English vocabulary does not match the pretrained model"));
    }
    let dims = ModelDims {
        de_vocab: de_vocab.len(),
        ..part1_dims
    };
    let mut bundle = ModelBundle::new(cfg.model.variant, dims, cfg.seed)?;
    bundle.load_part1(&part1)?;
    let triples = encode_triples(&corpus, &en_vocab, &de_vocab, cfg.data.max_len);

    let mut inputs = corpus_inputs(&triples_path)?;
    inputs.extend(["part1.json", "vocab.en", "part1.ckpt"].map(|f| args.part1.join(f)));
    let val_data = match &val_path {
        Some(p) => {
            inputs.extend(corpus_inputs(p)?);
            let val = load_corpus(p)?;
            let refs = references_by_image(&val, true);
            Some((unique_images(&val), refs.into_iter().map(|r| r.1).collect::<Vec<_>>()))
        }
        None => None,
    };
    let val = val_data.map(|(images, references)| Validation {
        images,
        references,
        vocab: &de_vocab,
    });
    let (ckpt, report) = train_part2(&mut bundle, &triples, val.as_ref(), &cfg.train, cfg.seed)?;

    fs::create_dir_all(out).map_err(|e| Error::io(format!("creating {}", out.display()), e))?;
    ckpt.save(&out.join("model.ckpt"))?;
    en_vocab.save(&out.join("vocab.en"))?;
    de_vocab.save(&out.join("vocab.de"))?;
    let file = ModelFile {
        variant: cfg.model.variant,
        dims,
    };
    write(&out.join(MODEL_FILE), to_json(&file))?;
    write(&out.join("train_report.jsonl"), report.to_jsonl())?;
    if let Some(e) = report.epochs.last() {
        println!(
            "trained {} epochs (kept epoch {}), per-token nll {:.4}, cycle {}",
            report.epochs.len(),
            report.best_epoch,
            e.nll,
            e.cyc.map_or("n/a".to_string(), |c| format!("{c:.4}"))
        );
    }
    Ok(Outcome { inputs })
}

struct LoadedModel {
    bundle: ModelBundle,
    en: Vocabulary,
    de: Vocabulary,
    inputs: Vec<PathBuf>,
}

fn load_model(dir: &Path) -> Result<LoadedModel> {
    let file: ModelFile = from_json(&dir.join(MODEL_FILE))?;
    let mut bundle = ModelBundle::new(file.variant, file.dims, 0)?;
    bundle.load_checkpoint(&Checkpoint::load(&dir.join("model.ckpt"))?)?;
    let en = Vocabulary::load(&dir.join("vocab.en"))?;
    let de = Vocabulary::load(&dir.join("vocab.de"))?;
    if en.len() != file.dims.en_vocab || de.len() != file.dims.de_vocab {
        return Err(Error::input(format!("{}: vocabularies do not match the model", dir.display())));
    }
    let inputs = [MODEL_FILE, "model.ckpt", "vocab.en", "vocab.de"].map(|f| dir.join(f)).to_vec();
    Ok(LoadedModel { bundle, en, de, inputs })
}

#[derive(Serialize)]
struct CaptionLine<'a> {
    image_id: &'a str,
    en: Vec<String>,
    de: Vec<String>,
    en_truncated: bool,
    de_truncated: bool,
    pseudo_empty: bool,
}

fn caption_lines(model: &LoadedModel, outputs: &[(String, CaptionOutput)]) -> String {
    outputs
        .iter()
        .map(|(id, c)| {
            let line = CaptionLine {
                image_id: id,
                en: model.en.decode(&c.en),
                de: model.de.decode(&c.de),
                en_truncated: c.en_truncated,
                de_truncated: c.de_truncated,
                pseudo_empty: c.pseudo_empty,
            };
            serde_json::to_string(&line).expect("plain data serializes") + "\n"
        })
        .collect()
}

struct Captioned {
    model: LoadedModel,
    corpus: Vec<RawCaption>,
    outputs: Vec<(String, CaptionOutput)>,
    inputs: Vec<PathBuf>,
}

fn run_captions(input: &ModelInput, cfg: &Config, out: &Path) -> Result<Captioned> {
    let model = load_model(&input.model)?;
    let corpus = load_corpus(&input.manifest)?;
    let images = unique_images(&corpus);
    let outputs = caption_all(&model.bundle, &images, cfg.infer)?;
    fs::create_dir_all(out).map_err(|e| Error::io(format!("creating {}", out.display()), e))?;
    write(&out.join("captions.jsonl"), caption_lines(&model, &outputs))?;
    let mut inputs = model.inputs.clone();
    inputs.extend(corpus_inputs(&input.manifest)?);
    Ok(Captioned { model, corpus, outputs, inputs })
}

pub fn infer(input: &ModelInput, cfg: &Config, out: &Path) -> Result<Outcome> {
    let Captioned { outputs, inputs, .. } = run_captions(input, cfg, out)?;
    let att_dir = out.join("attention");
    for (id, c) in &outputs {
        if let Some(rec) = &c.record {
            fs::create_dir_all(&att_dir).map_err(|e| Error::io(format!("creating {}", att_dir.display()), e))?;
            write(&att_dir.join(format!("{id}.txt")), rec.to_text())?;
        }
    }
    let truncated = outputs.iter().filter(|(_, c)| c.de_truncated || c.en_truncated).count();
    println!("captioned {} images ({truncated} truncated)", outputs.len());
    Ok(Outcome { inputs })
}

pub fn eval(input: &ModelInput, cfg: &Config, out: &Path) -> Result<Outcome> {
    let Captioned { model, corpus, outputs, inputs } = run_captions(input, cfg, out)?;
    let refs = references_by_image(&corpus, true);
    let mut cands = Vec::new();
    let mut references = Vec::new();
    for ((id, c), (rid, r)) in outputs.iter().zip(&refs) {
        debug_assert_eq!(id, rid);
        cands.push(model.de.decode(&c.de));
        references.push(r.clone());
    }
    if references.len() != outputs.len() || references.iter().any(Vec::is_empty) {
        return Err(Error::input("every evaluated image needs a German reference"));
    }
    let report = MetricReport::compute(model.bundle.variant.name(), &cands, &references)?;
    let table = render_table(std::slice::from_ref(&report));
    write(&out.join("metrics.txt"), &table)?;
    write(&out.join("metrics.json"), to_json(&report))?;
    print!("{table}");
    Ok(Outcome { inputs })
}

fn parse_grid(spec: Option<&str>, regions: usize) -> Result<(usize, usize)> {
    match spec {
        Some(s) => {
            let (r, c) = s
                .split_once('x')
                .ok_or_else(|| Error::Config(format!("grid '{s}' is not ROWSxCOLS")))?;
            let parse = |v: &str| v.trim().parse::<usize>().map_err(|_| Error::Config(format!("grid '{s}' is not ROWSxCOLS")));
            Ok((parse(r)?, parse(c)?))
        }
        None => {
            let side = (regions as f64).sqrt().round() as usize;
            Ok(if side * side == regions { (side, side) } else { (1, regions) })
        }
    }
}

pub fn attn_export(args: &AttnArgs, cfg: &Config, out: &Path) -> Result<Outcome> {
    let model = load_model(&args.input.model)?;
    let corpus = load_corpus(&args.input.manifest)?;
    let image = corpus
        .iter()
        .find(|c| c.image_id == args.image_id)
        .ok_or_else(|| Error::input(format!("image {} is not in the manifest", args.image_id)))?;
    let c = caption_image(&model.bundle, &image.features, cfg.infer)?;
    let rec = c
        .record
        .ok_or_else(|| Error::input("this model variant has no caption attention to export"))?;
    let with_eos = |mut words: Vec<String>, truncated: bool| {
        if !truncated {
            words.push("<eos>".to_string());
        }
        words
    };
    let en = with_eos(model.en.decode(&c.en), c.en_truncated);
    let de = with_eos(model.de.decode(&c.de), c.de_truncated);
    let grid = parse_grid(args.grid.as_deref(), image.features.regions())?;
    let written = export_attention(out, &rec, &en, &de, grid, args.cell, args.scale.into())?;
    println!("wrote {} files for {}: {}", written.len(), args.image_id, de.join(" "));
    let mut inputs = model.inputs;
    inputs.extend(corpus_inputs(&args.input.manifest)?);
    Ok(Outcome { inputs })
}

#[derive(Serialize)]
struct GradReport {
    dims: String,
    variant: String,
    lambda: f64,
    checked: usize,
    max_rel_error: f64,
    worst: Option<(String, usize, f64, f64)>,
    tolerance: f64,
    passed: bool,
}

pub fn gradcheck(args: &GradArgs, cfg: &Config, out: &Path) -> Result<Outcome> {
    if !(args.fraction > 0.0 && args.fraction <= 1.0) {
        return Err(Error::Config(format!("fraction must lie in (0, 1], got {}", args.fraction)));
    }
    let (spec, widths) = match args.dims {
        DimsArg::Tiny => (
            cyclecap::data::SynthSpec { images: 2, regions: 4, dim: 5, classes: 3, modifier_pool: 2, seed: cfg.seed, ..Default::default() },
            (6, 5, 6, 4),
        ),
        DimsArg::Small => (
            cyclecap::data::SynthSpec { images: 2, regions: 9, dim: 12, classes: 4, seed: cfg.seed, ..Default::default() },
            (12, 10, 12, 8),
        ),
    };
    let corpus = generate(&spec)?;
    let en = Vocabulary::build(&english_sentences(&corpus.pairs), 1)?;
    let de = Vocabulary::build(&german_sentences(&corpus.triples), 1)?;
    let triples = encode_triples(&corpus.triples[..1], &en, &de, 50);
    let dims = ModelDims {
        feat_dim: spec.dim,
        proj: widths.0,
        embed: widths.1,
        hidden: widths.2,
        attn: widths.3,
        en_vocab: en.len(),
        de_vocab: de.len(),
    };
    let bundle = ModelBundle::new(cfg.model.variant, dims, cfg.seed)?;
    let mut store = bundle.store.clone();
    let selection = if args.fraction >= 1.0 {
        Selection::All
    } else {
        Selection::Fraction { fraction: args.fraction, seed: cfg.seed }
    };
    let (lambda, squared) = (cfg.train.lambda, cfg.train.squared_cycle);
    let rep = check_params(&mut store, &selection, |s| {
        let mut b = bundle.clone();
        b.store = s.clone();
        composed_loss(&b, &triples, lambda, squared)
    })?;
    let passed = rep.max_rel_error < args.tolerance;
    let report = GradReport {
        dims: format!("{:?}", args.dims).to_lowercase(),
        variant: cfg.model.variant.name().to_string(),
        lambda,
        checked: rep.checked,
        max_rel_error: rep.max_rel_error,
        worst: rep.worst.clone(),
        tolerance: args.tolerance,
        passed,
    };
    fs::create_dir_all(out).map_err(|e| Error::io(format!("creating {}", out.display()), e))?;
    write(&out.join("gradcheck.json"), to_json(&report))?;
    println!(
        "checked {} of {} entries: max relative error {:.3e} ({})",
        rep.checked,
        store.num_scalars(),
        rep.max_rel_error,
        if passed { "ok" } else { "FAILED" }
    );
    if !passed {
        return Err(Error::numeric(format!(
            "gradient check failed: {:.3e} >= {:.1e} at {:?}",
            rep.max_rel_error, args.tolerance, rep.worst
        )));
    }
    Ok(Outcome::default())
}

pub fn oracle_check(cfg: &Config, out: &Path) -> Result<Outcome> {
    let mut lines = Vec::new();
    let toy = toy_record();
    let value = indirect_attention(&toy)?.get(0, 1);
    let toy_ok = (value - 0.75).abs() < 1e-12;
    lines.push(format!("indirect attention (Hund, R2) = {value}"));
    lines.push(format!("toy cycle loss = {}", cycle_loss(&toy, false)?));

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (mut worst, mut flagged, trials) = (0.0f64, 0usize, 100usize);
    for _ in 0..trials {
        let (nx, ny, nz) = (rng.random_range(2..=6), rng.random_range(1..=5), rng.random_range(2..=4));
        let joint = Joint::random_factorized(&mut rng, nx, ny, nz);
        worst = worst.max(check_chain(&joint, 1e-12)?.max_discrepancy);
        let y = rng.random_range(0..ny);
        if !check_chain(&joint.perturbed(y, 0.01)?, 1e-12)?.holds {
            flagged += 1;
        }
    }
    let chain_ok = worst < 1e-12 && flagged == trials;
    lines.push(format!("chain identity max discrepancy over {trials} factorized joints = {worst:e}"));
    lines.push(format!("perturbed joints flagged = {flagged}/{trials}"));
    let text = lines.join("\n") + "\n";
    fs::create_dir_all(out).map_err(|e| Error::io(format!("creating {}", out.display()), e))?;
    write(&out.join("oracle.txt"), &text)?;
    print!("{text}");
    if !(toy_ok && chain_ok) {
        return Err(Error::numeric("oracle check failed"));
    }
    Ok(Outcome::default())
}

pub fn run(cmd: &Command, cfg: &Config, out: &Path) -> Result<Outcome> {
    info!("running {} into {}", cmd.name(), out.display());
    match cmd {
        Command::SynthData(a) => synth_data(a, a.val_images, cfg, out),
        Command::Pretrain(a) => pretrain(a, cfg, out),
        Command::Train(a) => train(a, cfg, out),
        Command::Infer(a) => infer(a, cfg, out),
        Command::Eval(a) => eval(a, cfg, out),
        Command::AttnExport(a) => attn_export(a, cfg, out),
        Command::Gradcheck(a) => gradcheck(a, cfg, out),
        Command::OracleCheck => oracle_check(cfg, out),
        Command::Rerun(_) => Err(Error::Config("a rerun cannot be nested".into())),
    }
}
