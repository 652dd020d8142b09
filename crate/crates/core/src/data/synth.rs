//! Seeded synthetic stand-in for an Image–English–German corpus.
//!
//! Each image holds `objects_per_image` objects of distinct classes placed in
//! distinct regions. An object region carries its class prototype plus noise;
//! every other region is pure noise. Each class has a fixed modifier phrase,
//! so captions are a deterministic function of the image content (except the
//! object order in extra English captions). The region of every object word
//! is emitted as ground-truth alignment.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::dataset::{write_jsonl, ManifestRecord, RawCaption};
use super::features::FeatureGrid;
use crate::error::{Error, Result};

const EN_NOUNS: [&str; 16] = [
    "dog", "cat", "horse", "bird", "car", "ball", "tree", "boat", "child", "man", "woman", "bike",
    "house", "cup", "chair", "table",
];
const DE_NOUNS: [&str; 16] = [
    "hund", "katze", "pferd", "vogel", "auto", "ball", "baum", "boot", "kind", "mann", "frau",
    "fahrrad", "haus", "tasse", "stuhl", "tisch",
];
const EN_MODS: [&str; 12] = [
    "small", "big", "red", "blue", "old", "young", "happy", "black", "white", "green", "fast", "tall",
];
const DE_MODS: [&str; 12] = [
    "kleiner", "großer", "roter", "blauer", "alter", "junger", "fröhlicher", "schwarzer", "weißer",
    "grüner", "schneller", "hoher",
];

fn en_noun(c: usize) -> String {
    EN_NOUNS.get(c).map_or_else(|| format!("thing{c}"), |s| s.to_string())
}

fn de_noun(c: usize) -> String {
    DE_NOUNS.get(c).map_or_else(|| format!("ding{c}"), |s| s.to_string())
}

fn en_mod(m: usize) -> String {
    EN_MODS.get(m).map_or_else(|| format!("mod{m}"), |s| s.to_string())
}

fn de_mod(m: usize) -> String {
    DE_MODS.get(m).map_or_else(|| format!("merkmal{m}"), |s| s.to_string())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub seed: u64,
    pub images: usize,
    pub regions: usize,
    pub dim: usize,
    /// Number of object classes (one noun per language each).
    pub classes: usize,
    pub objects_per_image: usize,
    /// Inclusive range of modifier words in each class phrase.
    pub modifiers: (usize, usize),
    /// Number of distinct modifier words.
    pub modifier_pool: usize,
    /// English captions per image; the first one is paired with German.
    pub captions_per_image: usize,
    pub noise: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            seed: 7,
            images: 16,
            regions: 16,
            dim: 32,
            classes: 8,
            objects_per_image: 1,
            modifiers: (0, 2),
            modifier_pool: 6,
            captions_per_image: 1,
            noise: 0.3,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("images", self.images),
            ("regions", self.regions),
            ("dim", self.dim),
            ("classes", self.classes),
            ("objects_per_image", self.objects_per_image),
            ("modifier_pool", self.modifier_pool),
            ("captions_per_image", self.captions_per_image),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::input(format!("synthetic spec: {name} must be positive")));
            }
        }
        if self.objects_per_image > self.regions {
            return Err(Error::input(format!(
                "synthetic spec: {} objects do not fit in {} regions",
                self.objects_per_image, self.regions
            )));
        }
        if self.objects_per_image > self.classes {
            return Err(Error::input(format!(
                "synthetic spec: {} objects need as many distinct classes, only {} exist",
                self.objects_per_image, self.classes
            )));
        }
        if self.modifiers.0 > self.modifiers.1 {
            return Err(Error::input("synthetic spec: modifier range is inverted"));
        }
        if !(self.noise.is_finite() && self.noise >= 0.0) {
            return Err(Error::input("synthetic spec: noise must be a non-negative number"));
        }
        Ok(())
    }
}

/// Ground-truth placement of one object and its word positions (0-based,
/// counted over caption words without BOS/EOS).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObjectAlignment {
    pub class: usize,
    pub region: usize,
    pub en_word: String,
    pub de_word: String,
    pub en_pos: usize,
    pub de_pos: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlignmentRecord {
    pub image_id: String,
    pub objects: Vec<ObjectAlignment>,
}

#[derive(Debug, Clone)]
pub struct SynthCorpus {
    pub spec: SynthSpec,
    /// Image–English–German triples, one per image.
    pub triples: Vec<RawCaption>,
    /// English-only pairs, `captions_per_image` per image.
    pub pairs: Vec<RawCaption>,
    pub alignment: Vec<AlignmentRecord>,
}

struct ClassPhrase {
    mods: Vec<usize>,
}

fn phrase(class: usize, mods: &[usize], german: bool) -> Vec<String> {
    let mut out = vec![if german { "ein" } else { "a" }.to_string()];
    for &m in mods {
        out.push(if german { de_mod(m) } else { en_mod(m) });
    }
    out.push(if german { de_noun(class) } else { en_noun(class) });
    out
}

/// Builds a caption for objects in the given order, returning the words and
/// the position of each object's noun.
fn caption(objects: &[(usize, usize)], phrases: &[ClassPhrase], german: bool) -> (Vec<String>, Vec<usize>) {
    let mut words = Vec::new();
    let mut noun_pos = Vec::new();
    for (k, &(class, _)) in objects.iter().enumerate() {
        if k > 0 {
            words.push(if german { "und" } else { "and" }.to_string());
        }
        words.extend(phrase(class, &phrases[class].mods, german));
        noun_pos.push(words.len() - 1);
    }
    (words, noun_pos)
}

pub fn generate(spec: &SynthSpec) -> Result<SynthCorpus> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let prototypes: Vec<Vec<f64>> = (0..spec.classes)
        .map(|_| (0..spec.dim).map(|_| StandardNormal.sample(&mut rng)).collect())
        .collect();
    let phrases: Vec<ClassPhrase> = (0..spec.classes)
        .map(|_| {
            let n = rng.random_range(spec.modifiers.0..=spec.modifiers.1);
            ClassPhrase {
                mods: (0..n).map(|_| rng.random_range(0..spec.modifier_pool)).collect(),
            }
        })
        .collect();

    let width = spec.images.to_string().len().max(4);
    let mut triples = Vec::with_capacity(spec.images);
    let mut pairs = Vec::with_capacity(spec.images * spec.captions_per_image);
    let mut alignment = Vec::with_capacity(spec.images);
    for img in 0..spec.images {
        let image_id = format!("img{img:0width$}");
        let mut classes: Vec<usize> = (0..spec.classes).collect();
        classes.shuffle(&mut rng);
        let mut regions: Vec<usize> = (0..spec.regions).collect();
        regions.shuffle(&mut rng);
        let objects: Vec<(usize, usize)> = (0..spec.objects_per_image).map(|k| (classes[k], regions[k])).collect();

        let mut values = Vec::with_capacity(spec.regions * spec.dim);
        for r in 0..spec.regions {
            let proto = objects.iter().find(|o| o.1 == r).map(|o| &prototypes[o.0]);
            for d in 0..spec.dim {
                let n: f64 = StandardNormal.sample(&mut rng);
                values.push(proto.map_or(0.0, |p| p[d]) + spec.noise * n);
            }
        }
        let grid = Arc::new(FeatureGrid::new(spec.regions, spec.dim, values)?);

        let (en, en_pos) = caption(&objects, &phrases, false);
        let (de, de_pos) = caption(&objects, &phrases, true);
        alignment.push(AlignmentRecord {
            image_id: image_id.clone(),
            objects: objects
                .iter()
                .enumerate()
                .map(|(k, &(class, region))| ObjectAlignment {
                    class,
                    region,
                    en_word: en_noun(class),
                    de_word: de_noun(class),
                    en_pos: en_pos[k],
                    de_pos: de_pos[k],
                })
                .collect(),
        });
        triples.push(RawCaption {
            image_id: image_id.clone(),
            features: grid.clone(),
            en: en.clone(),
            de: Some(de),
        });
        pairs.push(RawCaption {
            image_id: image_id.clone(),
            features: grid.clone(),
            en,
            de: None,
        });
        for _ in 1..spec.captions_per_image {
            let mut order = objects.clone();
            order.shuffle(&mut rng);
            pairs.push(RawCaption {
                image_id: image_id.clone(),
                features: grid.clone(),
                en: caption(&order, &phrases, false).0,
                de: None,
            });
        }
    }
    Ok(SynthCorpus {
        spec: spec.clone(),
        triples,
        pairs,
        alignment,
    })
}

impl SynthCorpus {
    /// Writes `features/<id>.cycf`, `triples.jsonl`, `pairs.jsonl`,
    /// `alignment.jsonl` and `synth_spec.json` into `dir`. When `val_images`
    /// is positive the last images go to `val.jsonl` instead of `triples.jsonl`.
    pub fn write(&self, dir: &Path, val_images: usize) -> Result<()> {
        let feat_dir = dir.join("features");
        fs::create_dir_all(&feat_dir).map_err(|e| Error::io(format!("creating {}", feat_dir.display()), e))?;
        let mut written = std::collections::HashSet::new();
        for c in &self.triples {
            if written.insert(c.image_id.clone()) {
                c.features.save(&feat_dir.join(format!("{}.cycf", c.image_id)))?;
            }
        }
        let to_record = |c: &RawCaption| ManifestRecord {
            image_id: c.image_id.clone(),
            features: format!("features/{}.cycf", c.image_id),
            en: c.en.join(" "),
            de: c.de.as_ref().map(|d| d.join(" ")),
        };
        let split = self.triples.len().saturating_sub(val_images);
        let train: Vec<_> = self.triples[..split].iter().map(to_record).collect();
        write_jsonl(&dir.join("triples.jsonl"), &train)?;
        if val_images > 0 {
            let val: Vec<_> = self.triples[split..].iter().map(to_record).collect();
            write_jsonl(&dir.join("val.jsonl"), &val)?;
        }
        let train_ids: std::collections::HashSet<&str> =
            self.triples[..split].iter().map(|c| c.image_id.as_str()).collect();
        let pairs: Vec<_> = self
            .pairs
            .iter()
            .filter(|c| train_ids.contains(c.image_id.as_str()))
            .map(to_record)
            .collect();
        write_jsonl(&dir.join("pairs.jsonl"), &pairs)?;
        write_jsonl(&dir.join("alignment.jsonl"), &self.alignment)?;
        let spec = serde_json::to_string_pretty(&self.spec).map_err(|e| Error::input(e.to_string()))?;
        let p = dir.join("synth_spec.json");
        fs::write(&p, spec + "\n").map_err(|e| Error::io(format!("writing {}", p.display()), e))
    }
}
