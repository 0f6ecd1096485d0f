use serde::{Deserialize, Serialize};

use super::{EventSequence, HppModel};
use crate::error::{invalid, Error, Result};
use crate::quadrature::integrate_adaptive;
use crate::rng::Rng;
use crate::scalar::Real;

/// Stability margin: fitted models keep `a / b ≤ MAX_BRANCHING`.
pub const MAX_BRANCHING: f64 = 0.999;
const MAX_ITERS: usize = 4000;
const ARMIJO: f64 = 1e-4;

/// `λ*(t) = μ + a Σ_{t_k < t} exp(−b (t − t_k))`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HawkesModel<T> {
    pub mu: T,
    pub a: T,
    pub b: T,
}

/// Outcome of one multi-start run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StartOutcome {
    pub initial: HawkesModel<f64>,
    pub nll: f64,
    pub iterations: usize,
    pub diverged: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub model: HawkesModel<f64>,
    pub nll: f64,
    pub starts: Vec<StartOutcome>,
}

fn check_sorted<T: Real>(history: &[T]) -> Result<()> {
    if history.windows(2).any(|w| w[1] < w[0]) {
        return invalid("history times must be sorted");
    }
    Ok(())
}

impl<T: Real> HawkesModel<T> {
    pub fn new(mu: T, a: T, b: T) -> Result<Self> {
        if !(mu >= T::zero() && a >= T::zero() && b > T::zero()) || !(mu + a + b).is_finite() {
            return invalid(format!("Hawkes parameters need mu >= 0, a >= 0, b > 0 (got {mu}, {a}, {b})"));
        }
        Ok(Self { mu, a, b })
    }

    pub fn branching_ratio(&self) -> T {
        self.a / self.b
    }

    pub fn is_stable(&self) -> bool {
        self.branching_ratio() < T::one()
    }

    /// Stationary event rate `μ / (1 − a/b)`.
    pub fn stationary_rate(&self) -> Option<T> {
        self.is_stable().then(|| self.mu / (T::one() - self.branching_ratio()))
    }

    /// Sum of kernels `Σ_k exp(−b (t − t_k))` over `history` (all `< t`),
    /// by the usual one-pass recursion.
    pub fn excitation(&self, history: &[T], t: T) -> Result<T> {
        check_sorted(history)?;
        let Some(&last) = history.last() else { return Ok(T::zero()) };
        if last >= t {
            return invalid("history must precede the evaluation time");
        }
        let mut acc = T::zero();
        let mut prev = history[0];
        for &tk in &history[1..] {
            acc = (-self.b * (tk - prev)).exp() * (acc + T::one());
            prev = tk;
        }
        Ok((-self.b * (t - last)).exp() * (acc + T::one()))
    }

    pub fn intensity(&self, history: &[T], t: T) -> Result<T> {
        Ok(self.mu + self.a * self.excitation(history, t)?)
    }

    /// Direct O(n) sum, for checking the recursion.
    pub fn intensity_naive(&self, history: &[T], t: T) -> T {
        self.mu + self.a * history.iter().filter(|&&tk| tk < t).map(|&tk| (-self.b * (t - tk)).exp()).sum::<T>()
    }

    /// Negative log-likelihood and its gradient in `(μ, a, b)`.
    pub fn nll_and_grad(&self, seq: &EventSequence<T>) -> (T, [T; 3]) {
        let (mu, a, b) = (self.mu, self.a, self.b);
        let mut nll = mu * seq.duration();
        let mut g = [seq.duration(), T::zero(), T::zero()];
        // kernel sum A and its b-derivative B at the current event
        let mut big_a = T::zero();
        let mut big_b = T::zero();
        let mut prev: Option<T> = None;
        for &tk in &seq.times {
            if let Some(p) = prev {
                let d = tk - p;
                let e = (-b * d).exp();
                big_a = e * (big_a + T::one());
                big_b = e * big_b - d * big_a;
            }
            prev = Some(tk);
            if tk > seq.start {
                let lam = mu + a * big_a;
                nll = nll - lam.ln();
                g[0] = g[0] - lam.recip();
                g[1] = g[1] - big_a / lam;
                g[2] = g[2] - a * big_b / lam;
            }
            // compensator contribution of the kernel started at tk
            let from = if tk > seq.start { T::zero() } else { seq.start - tk };
            let to = seq.end - tk;
            let e0 = (-b * from).exp();
            let e1 = (-b * to).exp();
            let mass = (e0 - e1) / b;
            nll = nll + a * mass;
            g[1] = g[1] + mass;
            g[2] = g[2] + a * ((-from * e0 + to * e1) / b - mass / b);
        }
        (nll, g)
    }

    pub fn nll(&self, seq: &EventSequence<T>) -> T {
        self.nll_and_grad(seq).0
    }

    pub fn pooled_nll_and_grad(&self, seqs: &[EventSequence<T>]) -> (T, [T; 3]) {
        let mut total = T::zero();
        let mut g = [T::zero(); 3];
        for s in seqs {
            let (n, gs) = self.nll_and_grad(s);
            total = total + n;
            for k in 0..3 {
                g[k] = g[k] + gs[k];
            }
        }
        (total, g)
    }

    /// Survival of the next event, `u` days after the last history event.
    pub fn survival(&self, excitation_at_last: T, u: T) -> T {
        let kernel = self.a / self.b * excitation_at_last * (-(-self.b * u).exp_m1());
        (-(self.mu * u + kernel)).exp()
    }

    /// Expected time of the next event after `history`, by quadrature of the survival function.
    pub fn predict_next(&self, history: &[T]) -> Result<T> {
        check_sorted(history)?;
        let Some(&last) = history.last() else { return invalid("prediction needs a non-empty history") };
        if !(self.mu > T::zero()) {
            return invalid("expected gap is unbounded when mu = 0");
        }
        // excitation just after the last event, which counts itself
        let excite = if history.len() > 1 {
            self.excitation(&history[..history.len() - 1], last)? + T::one()
        } else {
            T::one()
        };
        let tail = T::lit(1e-6);
        let horizon = -tail.ln() / self.mu;
        let body = integrate_adaptive(|u| self.survival(excite, u), T::zero(), horizon, 1e-8)?;
        // beyond the horizon the kernel is spent; the remaining tail is Exp(μ)
        Ok(last + body + self.survival(excite, horizon) / self.mu)
    }

    /// Integrated intensity between consecutive events of `seq` (the first
    /// measured from the window start); for a well-specified model these are
    /// i.i.d. unit exponentials.
    pub fn rescaled_gaps(&self, seq: &EventSequence<T>) -> Vec<T> {
        let mut out = Vec::new();
        // excitation level just after the previous reference point
        let mut excite = T::zero();
        let mut prev = seq.start;
        for &tk in &seq.times {
            if tk <= seq.start {
                excite = excite + (-self.b * (seq.start - tk)).exp();
                continue;
            }
            let d = tk - prev;
            out.push(self.mu * d + self.a / self.b * excite * (-(-self.b * d).exp_m1()));
            excite = excite * (-self.b * d).exp() + T::one();
            prev = tk;
        }
        out
    }
}

impl HawkesModel<f64> {
    /// Maximum likelihood by gradient descent on softplus-reparameterised
    /// `(μ, a, b)` with Armijo backtracking, from four starts; best wins.
    pub fn fit(seqs: &[EventSequence<f64>]) -> Result<FitReport> {
        let base = HppModel::fit(seqs)?.rate;
        let starts = [
            (0.5 * base, 0.5, 1.0),
            (0.9 * base, 0.1, 1.0),
            (0.3 * base, 1.0, 2.0),
            (0.7 * base, 0.2, 0.5),
        ];
        let mut outcomes = Vec::new();
        let mut best: Option<(f64, HawkesModel<f64>)> = None;
        for &(mu, a, b) in &starts {
            let init = HawkesModel::new(mu, a, b)?;
            match descend(init, seqs) {
                Ok((model, nll, iterations)) => {
                    outcomes.push(StartOutcome { initial: init, nll, iterations, diverged: false });
                    if best.is_none_or(|(n, _)| nll < n) {
                        best = Some((nll, model));
                    }
                }
                Err(e) => {
                    log::warn!("Hawkes start {init:?} diverged: {e}");
                    outcomes.push(StartOutcome { initial: init, nll: f64::NAN, iterations: 0, diverged: true });
                }
            }
        }
        let (nll, model) = best.ok_or(Error::NonFinite("every Hawkes start diverged"))?;
        Ok(FitReport { model, nll, starts: outcomes })
    }

    /// Simulate on `[0, horizon]` by Ogata thinning.
    pub fn simulate(&self, horizon: f64, rng: &mut Rng) -> Result<Vec<f64>> {
        super::thinning_sample(
            |t, hist: &[f64]| self.intensity_naive_recent(hist, t),
            // between events the intensity only decays, so its right limit bounds it
            |t, hist: &[f64]| (self.intensity_naive_recent(hist, t), f64::INFINITY),
            horizon,
            rng,
        )
    }

    /// Intensity counting an event exactly at `t` (the right limit); stops
    /// summing once kernels are negligible.
    fn intensity_naive_recent(&self, history: &[f64], t: f64) -> f64 {
        let mut s = 0.0;
        for &tk in history.iter().rev() {
            let k = (-self.b * (t - tk)).exp();
            if k < 1e-17 {
                break;
            }
            s += k;
        }
        self.mu + self.a * s
    }
}

fn softplus_inv(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

fn from_theta(th: [f64; 3]) -> HawkesModel<f64> {
    let sp = |x: f64| x.softplus();
    let mu = sp(th[0]);
    let b = sp(th[2]);
    let a = sp(th[1]).min(MAX_BRANCHING * b);
    HawkesModel { mu, a, b }
}

fn project(th: &mut [f64; 3]) {
    let b = th[2].softplus();
    if th[1].softplus() > MAX_BRANCHING * b {
        th[1] = softplus_inv(MAX_BRANCHING * b);
    }
}

fn objective(th: [f64; 3], seqs: &[EventSequence<f64>]) -> (f64, [f64; 3]) {
    let m = from_theta(th);
    let (nll, g) = m.pooled_nll_and_grad(seqs);
    let chain = [th[0].sigmoid(), th[1].sigmoid(), th[2].sigmoid()];
    (nll, [g[0] * chain[0], g[1] * chain[1], g[2] * chain[2]])
}

fn descend(init: HawkesModel<f64>, seqs: &[EventSequence<f64>]) -> Result<(HawkesModel<f64>, f64, usize)> {
    let mut th = [softplus_inv(init.mu), softplus_inv(init.a), softplus_inv(init.b)];
    project(&mut th);
    let (mut f, mut g) = objective(th, seqs);
    if !f.is_finite() {
        return Err(Error::NonFinite("Hawkes likelihood at start"));
    }
    let scale = f.abs().max(1.0);
    let mut step = 1.0 / (g.iter().map(|x| x * x).sum::<f64>().sqrt() + 1e-12);
    let mut prev: Option<([f64; 3], [f64; 3])> = None;
    let mut iters = 0;
    while iters < MAX_ITERS {
        iters += 1;
        let gnorm2: f64 = g.iter().map(|x| x * x).sum();
        if gnorm2.sqrt() < 1e-9 * scale {
            break;
        }
        // Barzilai-Borwein trial step, safeguarded by Armijo backtracking
        if let Some((pth, pg)) = prev {
            let s: Vec<f64> = (0..3).map(|k| th[k] - pth[k]).collect();
            let y: Vec<f64> = (0..3).map(|k| g[k] - pg[k]).collect();
            let sy: f64 = s.iter().zip(&y).map(|(a, b)| a * b).sum();
            let ss: f64 = s.iter().map(|a| a * a).sum();
            if sy > 0.0 {
                step = (ss / sy).clamp(1e-12, 1e6);
            }
        }
        let mut accepted = None;
        let mut t = step;
        for _ in 0..60 {
            let mut cand = [th[0] - t * g[0], th[1] - t * g[1], th[2] - t * g[2]];
            project(&mut cand);
            let (fc, gc) = objective(cand, seqs);
            let decrease: f64 = (0..3).map(|k| g[k] * (th[k] - cand[k])).sum();
            if fc.is_finite() && fc <= f - ARMIJO * decrease {
                accepted = Some((cand, fc, gc));
                break;
            }
            t *= 0.5;
        }
        let Some((cand, fc, gc)) = accepted else { break };
        prev = Some((th, g));
        let improvement = f - fc;
        th = cand;
        f = fc;
        g = gc;
        if improvement <= 1e-13 * scale {
            break;
        }
    }
    Ok((from_theta(th), f, iters))
}
