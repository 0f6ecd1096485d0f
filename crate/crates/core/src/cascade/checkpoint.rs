use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::model::CascadeModel;
use super::train::{TrainConfig, Trainer};
use crate::autodiff::{OptimizerState, ParamStore, Tensor};
use crate::data::CodeTaxonomy;
use crate::error::{invalid, Result};
use crate::scalar::Real;

pub const CHECKPOINT_VERSION: u32 = 1;
const FORMAT: &str = "visitcast-checkpoint";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SavedOptimizer {
    pub step: u64,
    pub first: Vec<Vec<f64>>,
    pub second: Vec<Vec<f64>>,
}

/// Everything needed to predict with, or resume training of, a model.
/// Values are stored as `f64` JSON numbers that round-trip exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub taxonomy: Vec<String>,
    pub taxonomy_hash: String,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub seed: u64,
    pub epochs_done: usize,
    pub params: Vec<NamedTensor>,
    pub optimizer: SavedOptimizer,
    /// Free-form run metadata (configuration, input hashes).
    #[serde(default)]
    pub meta: serde_json::Value,
}

fn to_f64<T: Real>(xs: &[T]) -> Vec<f64> {
    xs.iter().map(|x| x.as_f64()).collect()
}

fn from_f64<T: Real>(xs: &[f64]) -> Vec<T> {
    xs.iter().map(|&x| T::lit(x)).collect()
}

impl Checkpoint {
    pub fn from_trainer<T: Real>(trainer: &Trainer<T>, taxonomy: &CodeTaxonomy) -> Result<Self> {
        if taxonomy.len() != trainer.model.config.n_codes {
            return invalid(format!("taxonomy has {} codes, model expects {}", taxonomy.len(), trainer.model.config.n_codes));
        }
        let params = trainer
            .model
            .store
            .iter()
            .map(|(_, p)| NamedTensor { name: p.name.clone(), shape: p.value.shape().to_vec(), data: to_f64(p.value.data()) })
            .collect();
        let opt = &trainer.optimizer;
        Ok(Self {
            format: FORMAT.into(),
            version: CHECKPOINT_VERSION,
            taxonomy: taxonomy.codes().to_vec(),
            taxonomy_hash: taxonomy.hash(),
            model: trainer.model.config,
            train: trainer.config,
            seed: trainer.config.seed,
            epochs_done: trainer.epochs_done,
            params,
            optimizer: SavedOptimizer {
                step: opt.step,
                first: opt.first.iter().map(|m| to_f64(m)).collect(),
                second: opt.second.iter().map(|m| to_f64(m)).collect(),
            },
            meta: serde_json::Value::Null,
        })
    }

    pub fn taxonomy(&self) -> Result<CodeTaxonomy> {
        let tax = CodeTaxonomy::new(self.taxonomy.iter().cloned())?;
        if tax.hash() != self.taxonomy_hash {
            return invalid("checkpoint taxonomy hash does not match its code list");
        }
        Ok(tax)
    }

    pub fn model<T: Real>(&self) -> Result<CascadeModel<T>> {
        let mut store = ParamStore::new();
        for p in &self.params {
            store.insert(&p.name, Tensor::new(p.shape.clone(), from_f64(&p.data))?)?;
        }
        CascadeModel::from_store(self.model, store)
    }

    pub fn trainer<T: Real>(&self) -> Result<Trainer<T>> {
        let model = self.model::<T>()?;
        let o = &self.optimizer;
        if o.first.len() != model.store.len() || o.second.len() != model.store.len() {
            return invalid("optimizer state does not match the stored parameters");
        }
        let optimizer = OptimizerState {
            config: self.train.adam,
            step: o.step,
            first: o.first.iter().map(|m| from_f64(m)).collect(),
            second: o.second.iter().map(|m| from_f64(m)).collect(),
        };
        Ok(Trainer { model, optimizer, config: self.train, epochs_done: self.epochs_done })
    }

    pub fn to_writer(&self, w: impl Write) -> Result<()> {
        serde_json::to_writer(w, self)?;
        Ok(())
    }

    pub fn from_reader(r: impl Read) -> Result<Self> {
        let ck: Self = serde_json::from_reader(r)?;
        if ck.format != FORMAT {
            return invalid(format!("not a checkpoint (format `{}`)", ck.format));
        }
        if ck.version != CHECKPOINT_VERSION {
            return invalid(format!("unsupported checkpoint version {}", ck.version));
        }
        ck.taxonomy()?;
        Ok(ck)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.to_writer(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_reader(BufReader::new(File::open(path)?))
    }
}
