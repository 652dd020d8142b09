//! Central finite-difference verification of tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{ParamId, ParamStore, Tape, Var};
use crate::error::Result;

pub const STEP: f64 = 1e-5;
/// Magnitude floor in the relative-error denominator, so gradients that are
/// zero up to rounding do not produce spurious failures.
pub const MAGNITUDE_FLOOR: f64 = 1e-6;

/// Which scalar entries to probe.
#[derive(Debug, Clone)]
pub enum Selection {
    All,
    /// Only the listed parameters, every entry.
    Params(Vec<ParamId>),
    /// A seeded random fraction of all scalar entries (at least one).
    Fraction { fraction: f64, seed: u64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    /// `(parameter name, flat index, analytic, numeric)` of the worst entry.
    pub worst: Option<(String, usize, f64, f64)>,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(MAGNITUDE_FLOOR)
}

/// Compares reverse-mode gradients of `f` against central differences with
/// step [`STEP`]. `f` must build a fresh tape from the store each call and
/// be deterministic.
pub fn check_params<F>(store: &mut ParamStore, selection: &Selection, f: F) -> Result<GradCheckReport>
where
    F: Fn(&ParamStore) -> Result<(Tape, Var)>,
{
    let (mut tape, loss) = f(store)?;
    tape.backward(loss)?;
    let grads = tape.param_grads(store);
    drop(tape);

    let entries: Vec<(ParamId, usize)> = match selection {
        Selection::All => store
            .iter()
            .flat_map(|(id, _, t)| (0..t.len()).map(move |k| (id, k)))
            .collect(),
        Selection::Params(ids) => ids
            .iter()
            .flat_map(|&id| (0..store.get(id).len()).map(move |k| (id, k)))
            .collect(),
        Selection::Fraction { fraction, seed } => {
            let all: Vec<(ParamId, usize)> = store
                .iter()
                .flat_map(|(id, _, t)| (0..t.len()).map(move |k| (id, k)))
                .collect();
            let n = ((all.len() as f64 * fraction).ceil() as usize).clamp(1, all.len());
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            let mut picked: Vec<usize> = sample(&mut rng, all.len(), n).into_vec();
            picked.sort_unstable();
            picked.into_iter().map(|i| all[i]).collect()
        }
    };

    let eval = |s: &ParamStore| -> Result<f64> {
        let (t, l) = f(s)?;
        Ok(t.value(l).item())
    };

    let mut report = GradCheckReport {
        checked: 0,
        max_rel_error: 0.0,
        worst: None,
    };
    for (id, k) in entries {
        let orig = store.get(id).data()[k];
        store.get_mut(id).data_mut()[k] = orig + STEP;
        let plus = eval(store);
        store.get_mut(id).data_mut()[k] = orig - STEP;
        let minus = eval(store);
        store.get_mut(id).data_mut()[k] = orig;
        let numeric = (plus? - minus?) / (2.0 * STEP);
        let analytic = grads.get(id)[k];
        let err = relative_error(analytic, numeric);
        report.checked += 1;
        if report.worst.is_none() || err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst = Some((store.name(id).to_string(), k, analytic, numeric));
        }
    }
    Ok(report)
}
