//! Central finite-difference check of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Gradients, ModelState};

/// Denominator floor for the relative error. Below it the comparison is in
/// effect absolute (1e-3 of the floor), since the difference quotient of a
/// loss of order ten carries roundoff near 1e-10 and would otherwise turn
/// near-zero coordinates into large ratios.
const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub checked: usize,
    /// `(tensor name, element, analytic, numeric)` of the worst coordinate.
    pub worst: Option<(String, usize, f64, f64)>,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares the gradient returned by `loss_fn` against central differences
/// on a random `fraction` of every tensor (at least one element each).
///
/// `loss_fn` must be a deterministic function of the state; anything that
/// depends on it discontinuously (proposal selection, target assignment)
/// should be fixed beforehand.
pub fn gradient_check<F>(state: &ModelState, loss_fn: F, epsilon: f64, fraction: f64, seed: u64) -> GradCheckReport
where
    F: Fn(&ModelState) -> (f64, Gradients),
{
    let (_, analytic) = loss_fn(state);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut probe = state.clone();
    let mut report = GradCheckReport { max_relative_error: 0.0, checked: 0, worst: None };
    for t in 0..state.params.len() {
        let n = state.params[t].data.len();
        let k = ((n as f64 * fraction).ceil() as usize).clamp(1, n);
        for i in sample(&mut rng, n, k).into_iter() {
            let orig = state.params[t].data[i];
            probe.params[t].data[i] = orig + epsilon;
            let plus = loss_fn(&probe).0;
            probe.params[t].data[i] = orig - epsilon;
            let minus = loss_fn(&probe).0;
            probe.params[t].data[i] = orig;
            let numeric = (plus - minus) / (2.0 * epsilon);
            let a = analytic.0[t][i];
            let err = relative_error(a, numeric);
            report.checked += 1;
            if err > report.max_relative_error || report.worst.is_none() {
                report.max_relative_error = report.max_relative_error.max(err);
                report.worst = Some((state.params[t].name.clone(), i, a, numeric));
            }
        }
    }
    report
}
