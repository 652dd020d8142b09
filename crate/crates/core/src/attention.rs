//! Additive (MLP) soft attention.
//!
//! `e_i = u · tanh(W_k k_i + W_q q)`, `a = softmax(e)`, `context = Σ a_i k_i`.
//! The same layer type serves English→regions, German→regions and
//! German→English-states, each with its own parameters.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Axis, ParamId, ParamStore, Tape, Var};

#[derive(Debug, Clone)]
pub struct AttentionLayer {
    pub key_dim: usize,
    pub query_dim: usize,
    pub hidden: usize,
    pub w_key: ParamId,
    pub w_query: ParamId,
    pub combine: ParamId,
}

/// Keys with their projection cached for reuse across decoding steps.
#[derive(Debug, Clone, Copy)]
pub struct PreparedKeys {
    pub keys: Var,
    pub projected: Var,
    pub count: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct AttentionOutput {
    /// `1 × K` distribution over keys.
    pub weights: Var,
    /// `1 × key_dim` weighted sum of keys.
    pub context: Var,
}

impl AttentionLayer {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        key_dim: usize,
        query_dim: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(AttentionLayer {
            key_dim,
            query_dim,
            hidden,
            w_key: store.weight(format!("{prefix}.w_key"), key_dim, hidden, rng)?,
            w_query: store.weight(format!("{prefix}.w_query"), query_dim, hidden, rng)?,
            combine: store.weight(format!("{prefix}.combine"), hidden, 1, rng)?,
        })
    }

    pub fn prepare(&self, tape: &mut Tape, store: &ParamStore, keys: Var) -> Result<PreparedKeys> {
        let (count, dim) = tape.value(keys).dims();
        if count == 0 {
            return Err(Error::input("attention over zero keys"));
        }
        if dim != self.key_dim {
            return Err(Error::dim("attention keys", tape.value(keys).shape(), &[count, self.key_dim]));
        }
        let wk = tape.param(store, self.w_key)?;
        let projected = tape.matmul(keys, wk)?;
        Ok(PreparedKeys { keys, projected, count })
    }

    pub fn attend_prepared(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        keys: &PreparedKeys,
        query: Var,
    ) -> Result<AttentionOutput> {
        if tape.value(query).dims() != (1, self.query_dim) {
            return Err(Error::dim("attention query", tape.value(query).shape(), &[1, self.query_dim]));
        }
        let wq = tape.param(store, self.w_query)?;
        let u = tape.param(store, self.combine)?;
        let q = tape.matmul(query, wq)?;
        let pre = tape.add(keys.projected, q)?;
        let act = tape.tanh(pre)?;
        let scores = tape.matmul(act, u)?;
        let scores = tape.transpose(scores)?;
        let weights = tape.softmax(scores, Axis::Rows)?;
        let context = tape.matmul(weights, keys.keys)?;
        Ok(AttentionOutput { weights, context })
    }

    pub fn attend(&self, tape: &mut Tape, store: &ParamStore, keys: Var, query: Var) -> Result<AttentionOutput> {
        let prepared = self.prepare(tape, store, keys)?;
        self.attend_prepared(tape, store, &prepared, query)
    }
}
