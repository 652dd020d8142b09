use rand::Rng;

use super::Dropout;
use crate::data::TokenId;
use crate::error::{Error, Result};
use crate::tensor::{Axis, GruCell, ParamId, ParamStore, Tape, Tensor, Var};

/// Affine projection of region features; stands in for the CNN encoder.
#[derive(Debug, Clone)]
pub struct ImageEncoder {
    pub w: ParamId,
    pub b: ParamId,
    pub feat_dim: usize,
    pub out_dim: usize,
}

impl ImageEncoder {
    pub fn new<R: Rng>(store: &mut ParamStore, prefix: &str, feat_dim: usize, out_dim: usize, rng: &mut R) -> Result<Self> {
        Ok(ImageEncoder {
            w: store.weight(format!("{prefix}.w"), feat_dim, out_dim, rng)?,
            b: store.bias(format!("{prefix}.b"), out_dim)?,
            feat_dim,
            out_dim,
        })
    }

    /// `L × feat_dim` features to `L × out_dim` keys.
    pub fn encode(&self, tape: &mut Tape, store: &ParamStore, features: &Tensor) -> Result<Var> {
        if features.cols() != self.feat_dim {
            return Err(Error::dim("image features", features.shape(), &[features.rows(), self.feat_dim]));
        }
        let x = tape.leaf(features.clone())?;
        let w = tape.param(store, self.w)?;
        let b = tape.param(store, self.b)?;
        let p = tape.matmul(x, w)?;
        tape.add(p, b)
    }
}

/// Bidirectional GRU over English tokens. Row `j` of the output is
/// `[forward state after token j ; backward state after token j]`, where the
/// backward pass reads the sequence from the end.
#[derive(Debug, Clone)]
pub struct CaptionEncoder {
    pub embed: ParamId,
    pub forward: GruCell,
    pub backward: GruCell,
    pub hidden: usize,
}

impl CaptionEncoder {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        vocab: usize,
        embed: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(CaptionEncoder {
            embed: store.weight(format!("{prefix}.embed"), vocab, embed, rng)?,
            forward: GruCell::new(store, &format!("{prefix}.fwd"), embed, hidden, rng)?,
            backward: GruCell::new(store, &format!("{prefix}.bwd"), embed, hidden, rng)?,
            hidden,
        })
    }

    pub fn output_dim(&self) -> usize {
        2 * self.hidden
    }

    /// Returns `G`, an `N × 2·hidden` matrix.
    pub fn encode(&self, tape: &mut Tape, store: &ParamStore, tokens: &[TokenId], dropout: &mut Dropout) -> Result<Var> {
        if tokens.is_empty() {
            return Err(Error::input("cannot encode an empty caption"));
        }
        let table = tape.param(store, self.embed)?;
        let emb = tape.embedding(table, tokens)?;
        let emb = dropout.apply(tape, emb)?;
        let n = tokens.len();
        let rows: Vec<Var> = (0..n)
            .map(|j| {
                let pos: Vec<(usize, usize)> = (0..tape.value(emb).cols()).map(|c| (j, c)).collect();
                tape.select(emb, &pos)
            })
            .collect::<Result<_>>()?;
        let zero = tape.leaf(Tensor::zeros(vec![1, self.hidden]))?;
        let mut fwd = Vec::with_capacity(n);
        let mut h = zero;
        for &x in &rows {
            h = self.forward.step(tape, store, x, h)?;
            fwd.push(h);
        }
        let mut bwd = vec![zero; n];
        let mut h = zero;
        for j in (0..n).rev() {
            h = self.backward.step(tape, store, rows[j], h)?;
            bwd[j] = h;
        }
        let joined: Vec<Var> = fwd
            .iter()
            .zip(&bwd)
            .map(|(&f, &b)| tape.concat(&[f, b], Axis::Cols))
            .collect::<Result<_>>()?;
        tape.concat(&joined, Axis::Rows)
    }
}
