//! Composite Gauss–Legendre quadrature with panel doubling.

use std::sync::OnceLock;

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Nodes per panel used by [`integrate_adaptive`].
pub const PANEL_NODES: usize = 256;
/// Maximum number of panel doublings before giving up.
pub const MAX_DOUBLINGS: usize = 20;

/// Gauss–Legendre rule on `[-1, 1]`.
#[derive(Debug, Clone)]
pub struct GaussLegendre {
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl GaussLegendre {
    /// Roots of `P_n` by Newton iteration from the Chebyshev-like initial guess.
    pub fn new(n: usize) -> Self {
        assert!(n >= 1);
        let mut nodes = vec![0.0; n];
        let mut weights = vec![0.0; n];
        let m = n.div_ceil(2);
        for i in 0..m {
            let mut z = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
            let mut dp = 0.0;
            for _ in 0..100 {
                let (mut p1, mut p2) = (1.0, 0.0);
                for j in 0..n {
                    let p3 = p2;
                    p2 = p1;
                    p1 = ((2 * j + 1) as f64 * z * p2 - j as f64 * p3) / (j + 1) as f64;
                }
                dp = n as f64 * (z * p1 - p2) / (z * z - 1.0);
                let z1 = z;
                z = z1 - p1 / dp;
                if (z - z1).abs() < 1e-15 {
                    break;
                }
            }
            nodes[i] = -z;
            nodes[n - 1 - i] = z;
            let w = 2.0 / ((1.0 - z * z) * dp * dp);
            weights[i] = w;
            weights[n - 1 - i] = w;
        }
        Self { nodes, weights }
    }

    /// Shared 256-node rule.
    pub fn standard() -> &'static GaussLegendre {
        static RULE: OnceLock<GaussLegendre> = OnceLock::new();
        RULE.get_or_init(|| GaussLegendre::new(PANEL_NODES))
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Composite rule over `panels` equal sub-intervals of `[a, b]`.
    pub fn integrate<T: Real>(&self, f: &impl Fn(T) -> T, a: T, b: T, panels: usize) -> T {
        let width = (b - a) / T::from_usize_lossy(panels);
        let half = width / T::lit(2.0);
        let mut total = T::zero();
        for p in 0..panels {
            let mid = a + width * T::from_usize_lossy(p) + half;
            let mut acc = T::zero();
            for (&x, &w) in self.nodes.iter().zip(&self.weights) {
                acc = acc + T::lit(w) * f(mid + half * T::lit(x));
            }
            total = total + acc * half;
        }
        total
    }
}

/// Integrate `f` over `[a, b]`, doubling the panel count until two
/// successive estimates agree to `rel_tol`.
pub fn integrate_adaptive<T: Real>(f: impl Fn(T) -> T, a: T, b: T, rel_tol: f64) -> Result<T> {
    let rule = GaussLegendre::standard();
    let mut prev = rule.integrate(&f, a, b, 1);
    if !prev.is_finite() {
        return Err(Error::NonFinite("quadrature"));
    }
    let mut panels = 1;
    for _ in 0..MAX_DOUBLINGS {
        panels *= 2;
        let next = rule.integrate(&f, a, b, panels);
        if !next.is_finite() {
            return Err(Error::NonFinite("quadrature"));
        }
        if (next - prev).abs() <= T::lit(rel_tol) * next.abs() {
            return Ok(next);
        }
        prev = next;
    }
    Err(Error::Quadrature(MAX_DOUBLINGS))
}
