use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Component switches for the ablation variants. All off is the full model.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AblationConfig {
    /// Attend only to the most recent encoder state.
    pub no_cascade: bool,
    /// Replace the bipartite marker and its structural loss by a plain learned projection.
    pub no_graph: bool,
    /// Feed the raw log gap instead of a time-context vector.
    pub scalar_time: bool,
    /// Draw positive edges from the whole corpus instead of the batch patients.
    pub random_edge_sampling: bool,
    /// Hard attention on the single best-scoring ancestor.
    pub single_parent: bool,
}

/// The full model and its five single-component ablations, in table order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    Full,
    NoCascade,
    NoGraph,
    ScalarTime,
    RandomEdges,
    SingleParent,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Full,
        Variant::NoCascade,
        Variant::NoGraph,
        Variant::ScalarTime,
        Variant::RandomEdges,
        Variant::SingleParent,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoCascade => "no_cascade",
            Variant::NoGraph => "no_graph",
            Variant::ScalarTime => "scalar_time",
            Variant::RandomEdges => "random_edges",
            Variant::SingleParent => "single_parent",
        }
    }

    /// Row number in the ablation table (0 for the full model).
    pub fn ordinal(self) -> usize {
        Self::ALL.iter().position(|v| *v == self).expect("listed")
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.iter().copied().find(|v| v.label() == s || v.ordinal().to_string() == s)
    }

    pub fn ablation(self) -> AblationConfig {
        let mut a = AblationConfig::default();
        match self {
            Variant::Full => {}
            Variant::NoCascade => a.no_cascade = true,
            Variant::NoGraph => a.no_graph = true,
            Variant::ScalarTime => a.scalar_time = true,
            Variant::RandomEdges => a.random_edge_sampling = true,
            Variant::SingleParent => a.single_parent = true,
        }
        a
    }
}

/// Architecture of one model instance.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_codes: usize,
    /// Marker (visit/code embedding) width.
    pub marker_dim: usize,
    /// Time-context vector width.
    pub time_dim: usize,
    /// Encoder and decoder GRU width.
    pub hidden_dim: usize,
    /// Longer histories keep only their most recent visits.
    pub max_seq_len: usize,
    pub ablation: AblationConfig,
}

impl ModelConfig {
    pub fn new(n_codes: usize) -> Self {
        Self { n_codes, marker_dim: 128, time_dim: 128, hidden_dim: 128, max_seq_len: 64, ablation: AblationConfig::default() }
    }

    pub fn with_dims(mut self, marker: usize, time: usize, hidden: usize) -> Self {
        self.marker_dim = marker;
        self.time_dim = time;
        self.hidden_dim = hidden;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_codes < 2 {
            return invalid("need at least two codes");
        }
        if self.marker_dim == 0 || self.time_dim == 0 || self.hidden_dim == 0 || self.max_seq_len < 2 {
            return invalid("model dimensions must be positive and max_seq_len >= 2");
        }
        Ok(())
    }
}

/// Loss weights of the time and structural terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { alpha: 0.01, beta: 100.0 }
    }
}
