//! Run configuration: every hyperparameter with its default, loadable from a
//! flat `key = value` file and overridable key by key.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::AdamConfig;
use crate::bipartite::{DEFAULT_NEGATIVES, MAX_POSITIVES_PER_PATIENT};
use crate::cascade::{AblationConfig, LossWeights, ModelConfig, TrainConfig, Variant};
use crate::error::{Error, Result};
use crate::eval::{Experiment, SweepGrid};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub marker_dim: usize,
    pub time_dim: usize,
    pub hidden_dim: usize,
    pub max_seq_len: usize,
    pub alpha: f64,
    pub beta: f64,
    pub negatives: usize,
    pub max_positives: usize,
    pub lr: f64,
    pub l2: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub ablation: AblationConfig,
    /// Seeds of the ablation suite and of sweeps.
    pub seeds: Vec<u64>,
    pub sweep_alpha: Vec<f64>,
    pub sweep_beta: Vec<f64>,
    pub sweep_marker_dim: Vec<usize>,
    pub sweep_time_dim: Vec<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        let w = LossWeights::default();
        Self {
            marker_dim: 128,
            time_dim: 128,
            hidden_dim: 128,
            max_seq_len: 64,
            alpha: w.alpha,
            beta: w.beta,
            negatives: DEFAULT_NEGATIVES,
            max_positives: MAX_POSITIVES_PER_PATIENT,
            lr: adam.lr,
            l2: adam.l2,
            epochs: 100,
            batch_size: 128,
            seed: 0,
            ablation: AblationConfig::default(),
            seeds: vec![0, 1, 2, 3, 4],
            sweep_alpha: vec![0.001, 0.01, 0.1, 1.0],
            sweep_beta: vec![1.0, 10.0, 100.0, 1000.0],
            sweep_marker_dim: vec![32, 64, 128, 256],
            sweep_time_dim: vec![128],
        }
    }
}

fn bad(key: &str, value: &str) -> Error {
    Error::Invalid(format!("bad value `{value}` for `{key}`"))
}

fn num<V: std::str::FromStr>(key: &str, value: &str) -> Result<V> {
    value.trim().parse().map_err(|_| bad(key, value))
}

fn list<V: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<V>> {
    value.split(',').filter(|s| !s.trim().is_empty()).map(|s| num(key, s)).collect()
}

fn flag(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(bad(key, value)),
    }
}

fn join<V: ToString>(xs: &[V]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Set one key. Unknown keys are errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let k = key.trim();
        match k {
            "marker_dim" => self.marker_dim = num(k, value)?,
            "time_dim" => self.time_dim = num(k, value)?,
            "hidden_dim" => self.hidden_dim = num(k, value)?,
            "max_seq_len" => self.max_seq_len = num(k, value)?,
            "alpha" => self.alpha = num(k, value)?,
            "beta" => self.beta = num(k, value)?,
            "negatives" => self.negatives = num(k, value)?,
            "max_positives" => self.max_positives = num(k, value)?,
            "lr" => self.lr = num(k, value)?,
            "l2" => self.l2 = num(k, value)?,
            "epochs" => self.epochs = num(k, value)?,
            "batch_size" => self.batch_size = num(k, value)?,
            "seed" => self.seed = num(k, value)?,
            "no_cascade" => self.ablation.no_cascade = flag(k, value)?,
            "no_graph" => self.ablation.no_graph = flag(k, value)?,
            "scalar_time" => self.ablation.scalar_time = flag(k, value)?,
            "random_edge_sampling" => self.ablation.random_edge_sampling = flag(k, value)?,
            "single_parent" => self.ablation.single_parent = flag(k, value)?,
            "variant" => {
                self.ablation = Variant::parse(value.trim()).ok_or_else(|| bad(k, value))?.ablation();
            }
            "seeds" => self.seeds = list(k, value)?,
            "sweep_alpha" => self.sweep_alpha = list(k, value)?,
            "sweep_beta" => self.sweep_beta = list(k, value)?,
            "sweep_marker_dim" => self.sweep_marker_dim = list(k, value)?,
            "sweep_time_dim" => self.sweep_time_dim = list(k, value)?,
            _ => return Err(Error::Invalid(format!("unknown configuration key `{k}`"))),
        }
        Ok(())
    }

    /// Apply a flat `key = value` text; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Parse { line: n + 1, msg: format!("expected `key = value`, got `{line}`") })?;
            self.set(k, v).map_err(|e| Error::Parse { line: n + 1, msg: e.to_string() })?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: impl AsRef<Path>) -> Result<()> {
        self.apply_text(&std::fs::read_to_string(path)?)
    }

    /// The flat text form; `apply_text` on defaults reproduces `self`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let a = self.ablation;
        let pairs: Vec<(&str, String)> = vec![
            ("marker_dim", self.marker_dim.to_string()),
            ("time_dim", self.time_dim.to_string()),
            ("hidden_dim", self.hidden_dim.to_string()),
            ("max_seq_len", self.max_seq_len.to_string()),
            ("alpha", self.alpha.to_string()),
            ("beta", self.beta.to_string()),
            ("negatives", self.negatives.to_string()),
            ("max_positives", self.max_positives.to_string()),
            ("lr", self.lr.to_string()),
            ("l2", self.l2.to_string()),
            ("epochs", self.epochs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("seed", self.seed.to_string()),
            ("no_cascade", a.no_cascade.to_string()),
            ("no_graph", a.no_graph.to_string()),
            ("scalar_time", a.scalar_time.to_string()),
            ("random_edge_sampling", a.random_edge_sampling.to_string()),
            ("single_parent", a.single_parent.to_string()),
            ("seeds", join(&self.seeds)),
            ("sweep_alpha", join(&self.sweep_alpha)),
            ("sweep_beta", join(&self.sweep_beta)),
            ("sweep_marker_dim", join(&self.sweep_marker_dim)),
            ("sweep_time_dim", join(&self.sweep_time_dim)),
        ];
        for (k, v) in pairs {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("config serialises")
    }

    pub fn model_config(&self, n_codes: usize) -> Result<ModelConfig> {
        let m = ModelConfig {
            n_codes,
            marker_dim: self.marker_dim,
            time_dim: self.time_dim,
            hidden_dim: self.hidden_dim,
            max_seq_len: self.max_seq_len,
            ablation: self.ablation,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let t = TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            seed: self.seed,
            weights: LossWeights { alpha: self.alpha, beta: self.beta },
            negatives: self.negatives,
            max_positives: self.max_positives,
            adam: AdamConfig { lr: self.lr, l2: self.l2, ..AdamConfig::default() },
        };
        t.validate()?;
        Ok(t)
    }

    pub fn experiment(&self, n_codes: usize) -> Result<Experiment> {
        Ok(Experiment::new(self.model_config(n_codes)?, self.train_config()?))
    }

    pub fn sweep_grid(&self) -> SweepGrid {
        SweepGrid {
            alpha: self.sweep_alpha.clone(),
            beta: self.sweep_beta.clone(),
            marker_dim: self.sweep_marker_dim.clone(),
            time_dim: self.sweep_time_dim.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut c = RunConfig::default();
        c.set("alpha", "0.5").unwrap();
        c.set("seeds", "3,4,5").unwrap();
        c.set("variant", "no_graph").unwrap();
        let mut d = RunConfig::default();
        d.apply_text(&c.to_text()).unwrap();
        assert_eq!(c, d);
    }

    #[test]
    fn errors_name_the_line() {
        let mut c = RunConfig::default();
        assert!(matches!(c.apply_text("alpha = 1\nbogus = 2\n"), Err(Error::Parse { line: 2, .. })));
        assert!(matches!(c.apply_text("epochs = many"), Err(Error::Parse { line: 1, .. })));
        assert!(c.apply_text("# comment only\n\n").is_ok());
    }

    #[test]
    fn defaults_match_published_settings() {
        let c = RunConfig::default();
        assert_eq!((c.marker_dim, c.time_dim, c.hidden_dim), (128, 128, 128));
        assert_eq!((c.alpha, c.beta, c.negatives), (0.01, 100.0, 2));
        assert_eq!((c.lr, c.l2, c.epochs, c.batch_size), (0.001, 0.001, 100, 128));
    }
}
