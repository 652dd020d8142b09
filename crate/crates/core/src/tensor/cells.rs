//! Recurrent cells composed from tape primitives.

use rand::Rng;

use super::{Axis, ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};

/// Standard LSTM cell. Gate layout in the fused weight is `[i, f, g, o]`;
/// the weight acts on the concatenation `[x ; h_prev]`.
#[derive(Debug, Clone)]
pub struct LstmCell {
    pub input: usize,
    pub hidden: usize,
    pub w: ParamId,
    pub b: ParamId,
}

impl LstmCell {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        input: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(LstmCell {
            input,
            hidden,
            w: store.weight(format!("{prefix}.w"), input + hidden, 4 * hidden, rng)?,
            b: store.bias(format!("{prefix}.b"), 4 * hidden)?,
        })
    }

    /// Returns `(h, c)`.
    pub fn step(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        h_prev: Var,
        c_prev: Var,
    ) -> Result<(Var, Var)> {
        let h = self.hidden;
        let dims = |t: &Tape, v: Var| t.value(v).shape().to_vec();
        if tape.value(x).dims() != (1, self.input) {
            return Err(Error::dim("lstm input", &dims(tape, x), &[1, self.input]));
        }
        for s in [h_prev, c_prev] {
            if tape.value(s).dims() != (1, h) {
                return Err(Error::dim("lstm state", &dims(tape, s), &[1, h]));
            }
        }
        let w = tape.param(store, self.w)?;
        let b = tape.param(store, self.b)?;
        let xh = tape.concat(&[x, h_prev], Axis::Cols)?;
        let pre = tape.matmul(xh, w)?;
        let gates = tape.add(pre, b)?;
        let i = tape.slice_cols(gates, 0, h)?;
        let i = tape.sigmoid(i)?;
        let f = tape.slice_cols(gates, h, h)?;
        let f = tape.sigmoid(f)?;
        let g = tape.slice_cols(gates, 2 * h, h)?;
        let g = tape.tanh(g)?;
        let o = tape.slice_cols(gates, 3 * h, h)?;
        let o = tape.sigmoid(o)?;
        let keep = tape.mul(f, c_prev)?;
        let write = tape.mul(i, g)?;
        let c = tape.add(keep, write)?;
        let tc = tape.tanh(c)?;
        let h_new = tape.mul(o, tc)?;
        Ok((h_new, c))
    }
}

/// GRU cell: `z` (update) and `r` (reset) gates share one fused weight over
/// `[x ; h_prev]`; the candidate uses `x·Wx + (r∘h_prev)·Wh + b`.
/// `h = (1 - z)∘n + z∘h_prev`, so `z → 1` keeps the previous state.
#[derive(Debug, Clone)]
pub struct GruCell {
    pub input: usize,
    pub hidden: usize,
    pub w_gates: ParamId,
    pub b_gates: ParamId,
    pub w_x: ParamId,
    pub w_h: ParamId,
    pub b: ParamId,
}

impl GruCell {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        input: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(GruCell {
            input,
            hidden,
            w_gates: store.weight(format!("{prefix}.w_gates"), input + hidden, 2 * hidden, rng)?,
            b_gates: store.bias(format!("{prefix}.b_gates"), 2 * hidden)?,
            w_x: store.weight(format!("{prefix}.w_x"), input, hidden, rng)?,
            w_h: store.weight(format!("{prefix}.w_h"), hidden, hidden, rng)?,
            b: store.bias(format!("{prefix}.b"), hidden)?,
        })
    }

    pub fn step(&self, tape: &mut Tape, store: &ParamStore, x: Var, h_prev: Var) -> Result<Var> {
        let h = self.hidden;
        if tape.value(x).dims() != (1, self.input) {
            return Err(Error::dim("gru input", tape.value(x).shape(), &[1, self.input]));
        }
        if tape.value(h_prev).dims() != (1, h) {
            return Err(Error::dim("gru state", tape.value(h_prev).shape(), &[1, h]));
        }
        let wg = tape.param(store, self.w_gates)?;
        let bg = tape.param(store, self.b_gates)?;
        let wx = tape.param(store, self.w_x)?;
        let wh = tape.param(store, self.w_h)?;
        let b = tape.param(store, self.b)?;
        let xh = tape.concat(&[x, h_prev], Axis::Cols)?;
        let pre = tape.matmul(xh, wg)?;
        let gates = tape.add(pre, bg)?;
        let z = tape.slice_cols(gates, 0, h)?;
        let z = tape.sigmoid(z)?;
        let r = tape.slice_cols(gates, h, h)?;
        let r = tape.sigmoid(r)?;
        let rh = tape.mul(r, h_prev)?;
        let a = tape.matmul(x, wx)?;
        let bb = tape.matmul(rh, wh)?;
        let n = tape.add(a, bb)?;
        let n = tape.add(n, b)?;
        let n = tape.tanh(n)?;
        let diff = tape.sub(h_prev, n)?;
        let gated = tape.mul(z, diff)?;
        tape.add(n, gated)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::{check_params, Selection};
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn fill(store: &mut ParamStore, id: ParamId, v: f64) {
        for x in store.get_mut(id).data_mut() {
            *x = v;
        }
    }

    fn lstm_fixture() -> (ParamStore, LstmCell, ParamId, ParamId, ParamId) {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::new();
        let cell = LstmCell::new(&mut store, "lstm", 3, 4, &mut rng).unwrap();
        let x = store.weight("x", 1, 3, &mut rng).unwrap();
        let h = store.weight("h", 1, 4, &mut rng).unwrap();
        let c = store.weight("c", 1, 4, &mut rng).unwrap();
        (store, cell, x, h, c)
    }

    #[test]
    fn lstm_zero_everything_is_zero() {
        let (mut store, cell, x, h, c) = lstm_fixture();
        for id in store.ids().collect::<Vec<_>>() {
            fill(&mut store, id, 0.0);
        }
        let mut t = Tape::new();
        let (xv, hv, cv) = (
            t.param(&store, x).unwrap(),
            t.param(&store, h).unwrap(),
            t.param(&store, c).unwrap(),
        );
        let (h1, c1) = cell.step(&mut t, &store, xv, hv, cv).unwrap();
        assert!(t.value(h1).data().iter().all(|&v| v == 0.0));
        assert!(t.value(c1).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn lstm_saturated_forget_keeps_cell() {
        // forget gate bias +50, input gate bias -50: c = sigma(50) c_prev + sigma(-50) g
        let (mut store, cell, x, h, c) = lstm_fixture();
        let hd = cell.hidden;
        let b = store.get_mut(cell.b).data_mut();
        for k in 0..hd {
            b[k] = -50.0;
            b[hd + k] = 50.0;
        }
        let mut t = Tape::new();
        let (xv, hv, cv) = (
            t.param(&store, x).unwrap(),
            t.param(&store, h).unwrap(),
            t.param(&store, c).unwrap(),
        );
        let (_, c1) = cell.step(&mut t, &store, xv, hv, cv).unwrap();
        for (a, b) in t.value(c1).data().iter().zip(store.get(c).data()) {
            assert!((a - b).abs() < 1e-20 + 1e-12 * b.abs());
        }
    }

    #[test]
    fn lstm_rejects_bad_state() {
        let (store, cell, x, _, _) = lstm_fixture();
        let mut t = Tape::new();
        let xv = t.param(&store, x).unwrap();
        let bad = t.leaf(Tensor::zeros(vec![1, 3])).unwrap();
        assert!(matches!(
            cell.step(&mut t, &store, xv, bad, bad),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn lstm_gradients_match_finite_differences() {
        let (mut store, cell, x, h, c) = lstm_fixture();
        let report = check_params(&mut store, &Selection::All, |s| {
            let mut t = Tape::new();
            let (xv, hv, cv) = (t.param(s, x)?, t.param(s, h)?, t.param(s, c)?);
            let (h1, c1) = cell.step(&mut t, s, xv, hv, cv)?;
            let both = t.concat(&[h1, c1], Axis::Cols)?;
            let w = t.leaf(Tensor::row((0..8).map(|k| 0.3 + 0.1 * k as f64).collect()))?;
            let prod = t.mul(both, w)?;
            let loss = t.sum(prod)?;
            Ok((t, loss))
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-3, "{report:?}");
    }

    fn gru_fixture() -> (ParamStore, GruCell, ParamId, ParamId) {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let cell = GruCell::new(&mut store, "gru", 3, 4, &mut rng).unwrap();
        let x = store.weight("x", 1, 3, &mut rng).unwrap();
        let h = store.weight("h", 1, 4, &mut rng).unwrap();
        (store, cell, x, h)
    }

    #[test]
    fn gru_zero_everything_is_zero() {
        let (mut store, cell, x, h) = gru_fixture();
        for id in store.ids().collect::<Vec<_>>() {
            fill(&mut store, id, 0.0);
        }
        let mut t = Tape::new();
        let (xv, hv) = (t.param(&store, x).unwrap(), t.param(&store, h).unwrap());
        let h1 = cell.step(&mut t, &store, xv, hv).unwrap();
        assert!(t.value(h1).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gru_saturated_update_keeps_state() {
        let (mut store, cell, x, h) = gru_fixture();
        let hd = cell.hidden;
        store.get_mut(cell.b_gates).data_mut()[..hd].fill(50.0);
        let mut t = Tape::new();
        let (xv, hv) = (t.param(&store, x).unwrap(), t.param(&store, h).unwrap());
        let h1 = cell.step(&mut t, &store, xv, hv).unwrap();
        for (a, b) in t.value(h1).data().iter().zip(store.get(h).data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn gru_gradients_match_finite_differences() {
        let (mut store, cell, x, h) = gru_fixture();
        let report = check_params(&mut store, &Selection::All, |s| {
            let mut t = Tape::new();
            let (xv, hv) = (t.param(s, x)?, t.param(s, h)?);
            let h1 = cell.step(&mut t, s, xv, hv)?;
            let h2 = cell.step(&mut t, s, xv, h1)?;
            let sq = t.sum_squares(h2)?;
            let lin = t.sum(h1)?;
            let loss = t.add(sq, lin)?;
            Ok((t, loss))
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-3, "{report:?}");
    }
}
