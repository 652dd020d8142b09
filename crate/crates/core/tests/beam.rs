mod common;

use common::PrefixModel;
use cyclecap::infer::{beam_decode, greedy_decode, BeamConfig};

#[test]
fn wide_beam_equals_exhaustive_search() {
    for seed in 0..30 {
        for words in 1..=3 {
            let m = PrefixModel { seed, words };
            for max_len in 1..=5 {
                let width = m.vocab().pow(max_len as u32 + 1);
                let cfg = BeamConfig { beam_size: width, max_len };
                let got = beam_decode(vec![], cfg, |s, p| m.step(s, p)).unwrap();
                let (best, score) = m.exhaustive(max_len);
                assert_eq!(got.tokens, best, "seed {seed} words {words} len {max_len}");
                assert!((got.log_prob - score).abs() < 1e-12);
                assert!(!got.truncated);
            }
        }
    }
}

#[test]
fn beam_of_one_is_greedy() {
    for seed in 0..100 {
        let m = PrefixModel { seed, words: 3 };
        for max_len in 1..=8 {
            let cfg = BeamConfig { beam_size: 1, max_len };
            let b = beam_decode(vec![], cfg, |s, p| m.step(s, p)).unwrap();
            let g = greedy_decode(vec![], max_len, |s, p| m.step(s, p)).unwrap();
            assert_eq!((&b.tokens, b.truncated), (&g.tokens, g.truncated), "seed {seed} len {max_len}");
            assert!((b.log_prob - g.log_prob).abs() < 1e-12);
        }
    }
}
