//! Exponential-affine conditional intensity of the next visit.
//!
//! Given the state after visit `i`, the intensity at `t ≥ t_i` is
//! `λ*(t) = exp(c + w·(t − t_i))` with `c = a_h + a_s + a_v + b_t`. The
//! compensator, density and negative log likelihood all have closed forms;
//! only the expected next time needs quadrature.

use serde::{Deserialize, Serialize};

use crate::autodiff::EXP_CLAMP;
use crate::error::{Error, Result};
use crate::quadrature::integrate_adaptive;
use crate::scalar::Real;

/// Slopes below this magnitude use the constant-rate limit.
pub const FLAT_SLOPE: f64 = 1e-8;
/// Survival mass left beyond the integration horizon.
pub const TAIL_MASS: f64 = 1e-6;
/// Relative tolerance between successive quadrature refinements.
pub const QUAD_TOL: f64 = 1e-6;

/// The five scalar terms of the log intensity at one timestep.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntensityContext<T> {
    /// Encoder-state term `W_h·h_i`.
    pub history: T,
    /// Decoder-state term `W_s·s_i`.
    pub cascade: T,
    /// Current-marker term `W_u·v_i`.
    pub marker: T,
    /// Slope `W_t` per day.
    pub slope: T,
    pub bias: T,
    /// Time of the current visit, `t_i`.
    pub base_time: T,
}

impl<T: Real> IntensityContext<T> {
    /// Context with every term folded into the bias.
    pub fn from_parts(c: T, slope: T, base_time: T) -> Self {
        Self { history: T::zero(), cascade: T::zero(), marker: T::zero(), slope, bias: c, base_time }
    }

    /// `c`, clamped to at most `EXP_CLAMP`.
    pub fn offset(&self) -> T {
        (self.history + self.cascade + self.marker + self.bias).min(T::lit(EXP_CLAMP))
    }

    pub fn log_intensity(&self, t: T) -> Result<T> {
        if t < self.base_time {
            return Err(Error::Invalid(format!("intensity queried at {t} before base time {}", self.base_time)));
        }
        Ok(self.offset() + self.slope * (t - self.base_time))
    }

    pub fn intensity_at_gap(&self, gap: T) -> T {
        (self.offset() + self.slope * gap).exp()
    }

    /// `∫_{t_i}^{t_i+gap} λ*`.
    pub fn compensator(&self, gap: T) -> T {
        self.offset().exp() * growth(self.slope, gap).0
    }

    pub fn survival(&self, gap: T) -> T {
        (-self.compensator(gap)).exp()
    }

    pub fn density(&self, gap: T) -> T {
        self.intensity_at_gap(gap) * self.survival(gap)
    }

    /// `−ln f*(t_next)`.
    pub fn time_nll(&self, t_next: T) -> Result<T> {
        let gap = t_next - self.base_time;
        if gap < T::zero() {
            return Err(Error::Invalid(format!("next time {t_next} precedes base time {}", self.base_time)));
        }
        Ok(nll_with_partials(self.offset(), self.slope, gap).0)
    }

    /// Gap after which at most `TAIL_MASS` of the density remains.
    pub fn horizon(&self) -> T {
        let target = T::lit(TAIL_MASS).recip().ln();
        let rate0 = self.offset().exp();
        let w = self.slope;
        if w.abs() < T::lit(FLAT_SLOPE) {
            target / rate0
        } else if w > T::zero() {
            (target * w / rate0).ln_1p() / w
        } else {
            // Total compensator is finite; stop once the remaining
            // (non-defective) mass is below the tail threshold.
            let total = rate0 / -w;
            let r = (total + T::lit(TAIL_MASS).ln()).softplus() / total;
            if r < T::one() {
                r.ln() / w
            } else {
                target / -w
            }
        }
    }

    /// Expected next visit time `∫ t f*(t) dt`, truncated at the horizon
    /// with the leftover survival mass placed at the horizon.
    pub fn expected_next_time(&self) -> Result<T> {
        let horizon = self.horizon();
        if !horizon.is_finite() || horizon <= T::zero() {
            return Err(Error::NonFinite("expected_next_time horizon"));
        }
        let body = integrate_adaptive(|u: T| u * self.density(u), T::zero(), horizon, QUAD_TOL)?;
        Ok(self.base_time + body + horizon * self.survival(horizon))
    }
}

/// `(g, g')` with `g(w) = (e^{wΔ} − 1)/w`, using a series near `w = 0`.
fn growth<T: Real>(w: T, gap: T) -> (T, T) {
    if w.abs() < T::lit(FLAT_SLOPE) {
        return (gap, gap * gap / T::lit(2.0));
    }
    let q = w * gap;
    if q.abs() < T::lit(1e-3) {
        // g = Δ Σ q^k/(k+1)!, g' = Δ² Σ_{k≥1} k q^{k-1}/(k+1)!
        let mut g = T::zero();
        let mut dg = T::zero();
        let mut qk = T::one();
        let mut fact = T::one();
        for k in 0..8usize {
            fact = fact * T::from_usize_lossy(k + 1);
            g = g + qk / fact;
            if k + 1 < 8 {
                let kk = T::from_usize_lossy(k + 1);
                dg = dg + kk * qk / (fact * T::from_usize_lossy(k + 2));
            }
            qk = qk * q;
        }
        return (gap * g, gap * gap * dg);
    }
    let em1 = q.exp_m1();
    let g = em1 / w;
    let dg = (gap * q.exp() * w - em1) / (w * w);
    (g, dg)
}

/// Negative log density of a gap and its partials in `(c, w)`.
///
/// `−ln f* = −(c + wΔ) + e^c (e^{wΔ} − 1)/w`. A clamped `c` passes no
/// gradient.
pub fn nll_with_partials<T: Real>(c: T, w: T, gap: T) -> (T, T, T) {
    let lim = T::lit(EXP_CLAMP);
    let saturated = c > lim;
    let cc = c.min(lim);
    let a = cc.exp();
    let (g, dg) = growth(w, gap);
    let comp = a * g;
    let nll = -(cc + w * gap) + comp;
    let dc = if saturated { T::zero() } else { comp - T::one() };
    let dw = -gap + a * dg;
    (nll, dc, dw)
}
