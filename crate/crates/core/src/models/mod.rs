//! The caption networks: image projection, English decoder, English caption
//! encoder and the doubly-attentive German decoder, plus the bundle that
//! owns their parameters.

mod bundle;
pub mod checkpoint;
mod decoders;
mod encoder;

pub use bundle::{ModelBundle, ModelDims, Variant};
pub use checkpoint::Checkpoint;
pub use decoders::{DecoderState, EnglishDecoder, EnglishStep, GermanDecoder, GermanStep, StateInit};
pub use encoder::{CaptionEncoder, ImageEncoder};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tensor::{Tape, Var};

/// Dropout applied inside the decoders. Evaluation mode is the identity.
#[derive(Debug, Clone)]
pub struct Dropout {
    rate: f64,
    rng: Option<ChaCha8Rng>,
}

impl Dropout {
    pub fn train(rate: f64, seed: u64) -> Self {
        Dropout {
            rate,
            rng: Some(ChaCha8Rng::seed_from_u64(seed)),
        }
    }

    pub fn eval() -> Self {
        Dropout { rate: 0.0, rng: None }
    }

    pub fn is_training(&self) -> bool {
        self.rng.is_some()
    }

    pub fn apply(&mut self, tape: &mut Tape, x: Var) -> Result<Var> {
        match &mut self.rng {
            Some(rng) if self.rate > 0.0 => tape.dropout(x, self.rate, rng),
            _ => Ok(x),
        }
    }
}
