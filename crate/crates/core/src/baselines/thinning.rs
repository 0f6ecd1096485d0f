use rand::Rng as _;
use rand_distr::{Distribution, Exp};

use crate::error::{invalid, Error, Result};
use crate::rng::Rng;

/// Ogata thinning on `[0, horizon]`.
///
/// `intensity(t, history)` is the target rate at `t` given earlier events.
/// `bound(t, history)` returns `(m, until)`: an upper bound `m` on the rate
/// over `(t, until]`. A proposal whose rate exceeds its bound is an error.
pub fn thinning_sample(
    intensity: impl Fn(f64, &[f64]) -> f64,
    bound: impl Fn(f64, &[f64]) -> (f64, f64),
    horizon: f64,
    rng: &mut Rng,
) -> Result<Vec<f64>> {
    if !(horizon >= 0.0 && horizon.is_finite()) {
        return invalid(format!("horizon {horizon} must be finite and non-negative"));
    }
    let mut events = Vec::new();
    let mut t = 0.0;
    loop {
        let (m, until) = bound(t, &events);
        if !(m >= 0.0) || !m.is_finite() || !(until > t) {
            return invalid(format!("invalid intensity bound ({m}, {until}) at t = {t}"));
        }
        if m == 0.0 {
            if until >= horizon {
                break;
            }
            t = until;
            continue;
        }
        let cand = t + Exp::new(m).expect("positive rate").sample(rng);
        if cand > until {
            t = until;
            continue;
        }
        if cand > horizon {
            break;
        }
        t = cand;
        let lam = intensity(t, &events);
        if lam > m * (1.0 + 1e-12) {
            return Err(Error::BoundViolation { t, value: lam, bound: m });
        }
        if rng.gen::<f64>() * m < lam {
            events.push(t);
        }
    }
    Ok(events)
}
