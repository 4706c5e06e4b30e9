use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, SalgError};

use super::{Graph, ParamStore, Value};

/// Which coordinates of each parameter get finite-differenced.
#[derive(Clone, Copy, Debug)]
pub enum CoordinateSample {
    /// Every coordinate of every parameter (small models only).
    All,
    /// A deterministic pseudo-random subset of up to `count` coordinates per
    /// parameter, drawn from a stream seeded by `seed` and the parameter
    /// index.
    PerParam { count: usize, seed: u64 },
}

/// Outcome of a gradient check.
#[derive(Clone, Debug)]
pub struct FdCheckReport {
    /// max over checked coordinates of |a - n| / max(1e-12, |a| + |n|).
    pub max_rel_err: f64,
    pub coords_checked: usize,
    pub worst_param: String,
    pub worst_coord: usize,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
}

pub(crate) fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-12)
}

fn eval_scalar<F>(build: &F, store: &ParamStore) -> Result<f64>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Value>,
{
    let mut g = Graph::new();
    let loss = build(&mut g, store)?;
    let t = g.data(loss);
    if !t.is_scalar() {
        return Err(SalgError::NonScalarLoss { shape: t.shape().to_vec() });
    }
    Ok(t.data()[0])
}

/// Central-difference gradient check of a scalar function of the parameters.
///
/// `build` records the loss on a fresh graph; the analytic gradient comes
/// from one backward pass, and every sampled coordinate is perturbed by
/// `+/- h` with the parameter restored bit-exactly afterwards. The function
/// is evaluated twice up front; a mismatch means it is not deterministic and
/// is reported as an error rather than a bogus gradient.
///
/// Setting the environment variable `SALG_GRADCHECK_CORRUPT=1` skews the
/// first analytic coordinate; this fault-injection hook exists so the CLI's
/// failure path can be exercised end to end.
pub fn finite_diff_check<F>(
    store: &mut ParamStore,
    build: F,
    h: f64,
    sample: CoordinateSample,
) -> Result<FdCheckReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Value>,
{
    if h <= 0.0 {
        return Err(SalgError::Usage(format!("finite_diff_check: h must be positive, got {h}")));
    }
    let first = eval_scalar(&build, store)?;
    let second = eval_scalar(&build, store)?;
    if first.to_bits() != second.to_bits() {
        return Err(SalgError::NonDeterministic { first, second });
    }

    let mut g = Graph::new();
    let loss = build(&mut g, store)?;
    let grads = g.backward(loss)?;
    let corrupt = std::env::var("SALG_GRADCHECK_CORRUPT").is_ok_and(|v| v == "1");

    let mut report = FdCheckReport {
        max_rel_err: 0.0,
        coords_checked: 0,
        worst_param: String::new(),
        worst_coord: 0,
        worst_analytic: 0.0,
        worst_numeric: 0.0,
    };
    let ids: Vec<_> = store.ids().collect();
    for (pi, id) in ids.iter().enumerate() {
        let node = match g.param_node(*id) {
            Some(v) => v,
            None => continue, // parameter not used by this loss
        };
        let analytic: Vec<f64> = match grads.of(node) {
            Some(a) => a.to_vec(),
            None => vec![0.0; store.value(*id).len()],
        };
        let n = analytic.len();
        let coords: Vec<usize> = match sample {
            CoordinateSample::All => (0..n).collect(),
            CoordinateSample::PerParam { count, seed } => {
                if count >= n {
                    (0..n).collect()
                } else {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (pi as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
                    let mut picked = std::collections::BTreeSet::new();
                    while picked.len() < count {
                        picked.insert(rng.random_range(0..n));
                    }
                    picked.into_iter().collect()
                }
            }
        };
        for coord in coords {
            let orig = store.value(*id)[coord];
            store.set_coord(*id, coord, orig + h);
            let plus = eval_scalar(&build, store)?;
            store.set_coord(*id, coord, orig - h);
            let minus = eval_scalar(&build, store)?;
            store.set_coord(*id, coord, orig);
            let numeric = (plus - minus) / (2.0 * h);
            let mut a = analytic[coord];
            if corrupt && report.coords_checked == 0 {
                a = 2.0 * a + 1.0;
            }
            let err = relative_error(a, numeric);
            if err > report.max_rel_err || report.coords_checked == 0 {
                report.max_rel_err = err;
                report.worst_param = store.name(*id).to_string();
                report.worst_coord = coord;
                report.worst_analytic = a;
                report.worst_numeric = numeric;
            }
            report.coords_checked += 1;
        }
    }
    Ok(report)
}
