//! Corpus handling: tokenization, vocabularies, feature files, manifests and
//! the synthetic corpus generator.

pub mod dataset;
pub mod features;
pub mod synth;
pub mod vocab;

pub use dataset::{
    encode_pairs, encode_triples, english_sentences, german_sentences, load_corpus, read_manifest,
    references_by_image, write_jsonl, ManifestRecord, PairRecord, RawCaption, TripleRecord,
};
pub use features::FeatureGrid;
pub use synth::{generate, AlignmentRecord, ObjectAlignment, SynthCorpus, SynthSpec};
pub use vocab::{tokenize, TokenId, Vocabulary, BOS, EOS, PAD, UNK};
