//! Central finite-difference verification of tape gradients.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::tape::{Tape, Var};
use crate::error::Result;
use crate::numeric::FeatureMatrix;

/// Step used for central differences.
pub const DEFAULT_STEP: f64 = 1e-4;

/// Parameters with more entries than this are checked on a random subsample
/// of this many entries.
pub const MAX_CHECKED_ENTRIES: usize = 256;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub per_parameter: BTreeMap<String, f64>,
    pub entries_checked: usize,
}

/// `|a - n| / max(1e-8, |a| + |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Compares tape gradients of `build_loss` against central differences with
/// step `h` for every named parameter.
///
/// `build_loss` receives a fresh tape and one [`Var`] per parameter (in the
/// order given) and returns the scalar loss node. It must be deterministic:
/// any randomness has to be drawn outside the closure. Outputs of
/// `stop_grad` are held at their unperturbed values while differencing.
pub fn grad_check<F>(
    params: &[(String, FeatureMatrix)],
    build_loss: F,
    h: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|(_, v)| tape.param(v.clone())).collect();
    let loss = build_loss(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;
    let detached = tape.detached_values();

    let eval = |values: &[FeatureMatrix]| -> Result<f64> {
        let mut tape = Tape::with_pinned(detached.clone());
        let vars: Vec<Var> = values.iter().map(|v| tape.constant(v.clone())).collect();
        let loss = build_loss(&mut tape, &vars)?;
        tape.scalar(loss)
    };

    let mut values: Vec<FeatureMatrix> = params.iter().map(|(_, v)| v.clone()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(0x9c4e_11d7);
    let mut per_parameter = BTreeMap::new();
    let mut entries_checked = 0;

    for (p, (name, value)) in params.iter().enumerate() {
        let analytic = grads
            .get(vars[p])
            .cloned()
            .unwrap_or_else(|| FeatureMatrix::zeros(value.rows(), value.cols()));
        let n = value.len();
        let indices: Vec<usize> = if n > MAX_CHECKED_ENTRIES {
            let mut idx = sample(&mut rng, n, MAX_CHECKED_ENTRIES).into_vec();
            idx.sort_unstable();
            idx
        } else {
            (0..n).collect()
        };

        let mut worst: f64 = 0.0;
        for &i in &indices {
            let original = values[p].as_slice()[i];
            values[p].as_mut_slice()[i] = original + h;
            let plus = eval(&values)?;
            values[p].as_mut_slice()[i] = original - h;
            let minus = eval(&values)?;
            values[p].as_mut_slice()[i] = original;
            let numeric = (plus - minus) / (2.0 * h);
            worst = worst.max(relative_error(analytic.as_slice()[i], numeric));
        }
        entries_checked += indices.len();
        per_parameter.insert(name.clone(), worst);
    }

    let max_rel_err = per_parameter.values().copied().fold(0.0, f64::max);
    Ok(GradCheckReport {
        max_rel_err,
        per_parameter,
        entries_checked,
    })
}
