use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::config::{LossWeights, ModelConfig};
use super::model::CascadeModel;
use crate::autodiff::{AdamConfig, OptimizerState, Tape};
use crate::bipartite::{sample_edges, sample_random_edges, PositiveEdge, DEFAULT_NEGATIVES, MAX_POSITIVES_PER_PATIENT};
use crate::data::{Patient, Visit};
use crate::error::{invalid, Error, Result};
use crate::rng::{substream, Stream};
use crate::scalar::Real;

/// Optimisation settings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub weights: LossWeights,
    pub negatives: usize,
    pub max_positives: usize,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 128,
            seed: 0,
            weights: LossWeights::default(),
            negatives: DEFAULT_NEGATIVES,
            max_positives: MAX_POSITIVES_PER_PATIENT,
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return invalid("batch size must be positive");
        }
        if self.negatives == 0 {
            return invalid("need at least one negative code per positive edge");
        }
        if !(self.weights.alpha >= 0.0 && self.weights.beta >= 0.0) {
            return invalid("loss weights must be non-negative");
        }
        if !(self.adam.lr > 0.0 && self.adam.l2 >= 0.0) {
            return invalid("learning rate must be positive and L2 non-negative");
        }
        Ok(())
    }
}

/// One line of the training log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Optimizer steps taken so far.
    pub step: u64,
    /// Mean per-patient joint loss over the epoch's batches.
    pub loss: f64,
}

/// Model plus optimizer state and progress counters.
#[derive(Clone, Debug)]
pub struct Trainer<T> {
    pub model: CascadeModel<T>,
    pub optimizer: OptimizerState<T>,
    pub config: TrainConfig,
    pub epochs_done: usize,
}

/// Mean gap in days across the training visits, used to start the
/// intensity bias near the observed rate.
pub fn mean_gap(patients: &[Patient]) -> Option<f64> {
    let (sum, n) = patients
        .iter()
        .flat_map(|p| p.visits.windows(2))
        .fold((0.0, 0usize), |(s, n), w| (s + (w[1].time - w[0].time), n + 1));
    (n > 0 && sum > 0.0).then(|| sum / n as f64)
}

impl<T: Real> Trainer<T> {
    /// Fresh model initialised from the `Init` substream of the seed.
    pub fn new(model_config: ModelConfig, config: TrainConfig, train: &[Patient]) -> Result<Self> {
        config.validate()?;
        let mut rng = substream(config.seed, Stream::Init, 0);
        let mut model = CascadeModel::new(model_config, &mut rng)?;
        if let Some(gap) = mean_gap(train) {
            model.set_base_rate(1.0 / gap)?;
        }
        let optimizer = OptimizerState::new(config.adam, &model.store);
        Ok(Self { model, optimizer, config, epochs_done: 0 })
    }

    pub fn step(&self) -> u64 {
        self.optimizer.step
    }

    fn batch_loss(&mut self, batch: &[&[Visit]], corpus: &[&[Visit]]) -> Result<f64> {
        let cfg = self.config;
        let model_cfg = self.model.config;
        let mut rng = substream(cfg.seed, Stream::Sampling, self.optimizer.step);
        let use_graph = !model_cfg.ablation.no_graph && cfg.weights.beta != 0.0;
        let mut own: Vec<Vec<PositiveEdge>> = vec![Vec::new(); batch.len()];
        let mut foreign = false;
        if use_graph {
            if model_cfg.ablation.random_edge_sampling {
                let per = sample_random_edges(batch, corpus, model_cfg.n_codes, cfg.negatives, cfg.max_positives, &mut rng)?;
                for (slot, eb) in own.iter_mut().zip(per) {
                    *slot = eb.positives;
                }
                foreign = true;
            } else {
                let eb = sample_edges(batch, model_cfg.n_codes, cfg.negatives, cfg.max_positives, &mut rng)?;
                for e in eb.positives {
                    let p = e.patient;
                    own[p].push(e);
                }
            }
        }

        self.model.store.zero_grad();
        let scale = T::one() / T::from_usize_lossy(batch.len());
        let mut total = 0.0;
        for (visits, edges) in batch.iter().zip(&own) {
            let mut tape = Tape::new();
            let loss = self.model.patient_loss(&mut tape, visits, edges, foreign.then_some(corpus), cfg.weights)?;
            let s = tape.constant_scalar(scale)?;
            let scaled = tape.mul(loss, s)?;
            total += tape.scalar(loss).as_f64();
            let grads = tape.backward(scaled)?;
            grads.apply_to(&mut self.model.store);
        }
        self.optimizer.step(&mut self.model.store)?;
        Ok(total / batch.len() as f64)
    }

    /// Run one epoch over `train`; patients with fewer than two visits are skipped.
    pub fn epoch(&mut self, train: &[Patient]) -> Result<EpochLog> {
        let seqs: Vec<&[Visit]> = train.iter().filter(|p| p.len() >= 2).map(|p| self.model.truncate(&p.visits)).collect();
        if seqs.is_empty() {
            return invalid("training split has no patient with two or more visits");
        }
        let epoch = self.epochs_done;
        let mut order: Vec<usize> = (0..seqs.len()).collect();
        order.shuffle(&mut substream(self.config.seed, Stream::Sampling, (1u64 << 40) | epoch as u64));
        let mut losses = Vec::new();
        for chunk in order.chunks(self.config.batch_size) {
            let batch: Vec<&[Visit]> = chunk.iter().map(|&i| seqs[i]).collect();
            let loss = self.batch_loss(&batch, &seqs)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite("training loss"));
            }
            losses.push(loss);
        }
        self.epochs_done += 1;
        Ok(EpochLog { epoch: self.epochs_done, step: self.optimizer.step, loss: losses.iter().sum::<f64>() / losses.len() as f64 })
    }

    /// Train until `config.epochs` epochs are done, calling `on_epoch` after each.
    pub fn fit(&mut self, train: &[Patient], mut on_epoch: impl FnMut(&EpochLog)) -> Result<Vec<EpochLog>> {
        let mut logs = Vec::new();
        while self.epochs_done < self.config.epochs {
            let log = self.epoch(train)?;
            on_epoch(&log);
            logs.push(log);
        }
        Ok(logs)
    }

    /// Mean per-patient disease and time loss, structural term excluded;
    /// no parameter update.
    pub fn evaluate_loss(&self, patients: &[Patient]) -> Result<f64> {
        let seqs: Vec<&[Visit]> = patients.iter().filter(|p| p.len() >= 2).map(|p| self.model.truncate(&p.visits)).collect();
        if seqs.is_empty() {
            return invalid("no patient with two or more visits");
        }
        let mut total = 0.0;
        for visits in &seqs {
            let mut tape = Tape::inference();
            let loss = self.model.patient_loss(&mut tape, visits, &[], None, LossWeights { beta: 0.0, ..self.config.weights })?;
            total += tape.scalar(loss).as_f64();
        }
        Ok(total / seqs.len() as f64)
    }
}
