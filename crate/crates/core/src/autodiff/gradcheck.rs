use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};

/// Gradients smaller than this are compared in absolute rather than relative terms.
pub const GRAD_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub coords_checked: usize,
    /// Parameter and flat index of the worst coordinate.
    pub worst: Option<(ParamId, usize)>,
}

/// Compare analytic gradients of `loss_fn` against central finite differences.
///
/// Every parameter in `params` must be trainable. At most `coords_per_param`
/// coordinates of each are checked, sampled with `seed` when the parameter is larger.
pub fn grad_check<F>(
    store: &mut ParamStore,
    params: &[ParamId],
    eps: f64,
    coords_per_param: usize,
    seed: u64,
    loss_fn: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::InvalidArgument(format!("grad_check eps {eps} outside [1e-7, 1e-3]")));
    }
    if let Some(&p) = params.iter().find(|&&p| !store.is_trainable(p)) {
        return Err(Error::InvalidArgument(format!("parameter `{}` is frozen", store.get(p).name())));
    }
    let eval = |store: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new();
        let loss = loss_fn(&mut tape, store)?;
        tape.value(loss).item()
    };

    store.zero_grads();
    let mut tape = Tape::new();
    let loss = loss_fn(&mut tape, store)?;
    tape.backward(loss, store)?;
    drop(tape);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheckReport { max_rel_error: 0.0, coords_checked: 0, worst: None };
    for &p in params {
        let n = store.value(p).len();
        let coords: Vec<usize> = if n <= coords_per_param {
            (0..n).collect()
        } else {
            let mut c = sample(&mut rng, n, coords_per_param).into_vec();
            c.sort_unstable();
            c
        };
        for i in coords {
            let analytic = store.grad(p).data()[i];
            let orig = store.value(p).data()[i];
            store.value_mut(p)[i] = orig + eps;
            let plus = eval(store)?;
            store.value_mut(p)[i] = orig - eps;
            let minus = eval(store)?;
            store.value_mut(p)[i] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let denom = analytic.abs().max(numeric.abs()).max(GRAD_FLOOR);
            let rel = (analytic - numeric).abs() / denom;
            report.coords_checked += 1;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(rel);
                report.worst = Some((p, i));
            }
        }
    }
    store.zero_grads();
    Ok(report)
}
