//! Per-fold training: Adam on mean cross-entropy over shuffled minibatches,
//! with validation-loss early stopping and best-epoch restore.

use std::rc::Rc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::graph::{FeatureGraph, FoldGraphs, GraphConfig};
use crate::metrics::{compute_metrics, Metrics};
use crate::model::{forward_tape, positive_probability, GraphBatch, ModelConfig, ModelParams};
use crate::optim::{Adam, AdamConfig};
use crate::record::Dataset;
use crate::tape::{log_softmax, Tape};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub folds: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub leaky_slope: f64,
    pub heads: usize,
    pub d_head: usize,
    pub state_size: usize,
    pub batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        let model = ModelConfig::default();
        TrainConfig {
            learning_rate: adam.lr,
            max_epochs: 200,
            patience: 50,
            folds: 5,
            beta1: adam.beta1,
            beta2: adam.beta2,
            eps: adam.eps,
            leaky_slope: model.leaky_slope,
            heads: model.heads,
            d_head: model.d_head,
            state_size: model.state_size,
            batch_size: 4,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive_f = [
            ("learning_rate", self.learning_rate),
            ("eps", self.eps),
            ("leaky_slope", self.leaky_slope),
        ];
        for (name, v) in positive_f {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::contract(format!("{name} must be positive, got {v}")));
            }
        }
        for (name, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::contract(format!("{name} must lie in [0, 1), got {v}")));
            }
        }
        let positive_n = [
            ("max_epochs", self.max_epochs),
            ("patience", self.patience),
            ("heads", self.heads),
            ("d_head", self.d_head),
            ("state_size", self.state_size),
            ("batch_size", self.batch_size),
        ];
        for (name, v) in positive_n {
            if v == 0 {
                return Err(Error::contract(format!("{name} must be positive")));
            }
        }
        if self.folds < 2 {
            return Err(Error::contract(format!("folds must be at least 2, got {}", self.folds)));
        }
        if self.patience > self.max_epochs {
            return Err(Error::contract(format!(
                "patience {} exceeds max_epochs {}",
                self.patience, self.max_epochs
            )));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }

    pub fn model(&self, use_mgf: bool) -> ModelConfig {
        ModelConfig {
            heads: self.heads,
            d_head: self.d_head,
            state_size: self.state_size,
            leaky_slope: self.leaky_slope,
            use_mgf,
        }
    }
}

/// Component switches. Both off is the full model.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablation {
    pub no_mi: bool,
    pub no_mgf: bool,
}

/// Independent sub-seed for one purpose within one fold.
pub fn derive_seed(seed: u64, fold: usize, purpose: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update((fold as u64).to_le_bytes());
    h.update(purpose.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes"))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopDecision {
    Improved,
    Continue,
    Stop,
}

/// Stops after `patience` epochs without a strictly lower monitored loss.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best_loss: f64,
    /// 1-based; 0 before the first observation.
    pub best_epoch: usize,
    stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            best_loss: f64::INFINITY,
            best_epoch: 0,
            stale: 0,
        }
    }

    pub fn observe(&mut self, epoch: usize, loss: f64) -> StopDecision {
        if loss < self.best_loss {
            self.best_loss = loss;
            self.best_epoch = epoch;
            self.stale = 0;
            StopDecision::Improved
        } else {
            self.stale += 1;
            if self.stale >= self.patience {
                StopDecision::Stop
            } else {
                StopDecision::Continue
            }
        }
    }
}

/// Train and validation indices into a dataset.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSplit {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
}

impl FoldSplit {
    pub fn validate(&self, n: usize) -> Result<()> {
        if self.train.is_empty() || self.val.is_empty() {
            return Err(Error::contract("fold split has an empty train or validation part"));
        }
        let mut seen = vec![false; n];
        for &i in self.train.iter().chain(&self.val) {
            if i >= n {
                return Err(Error::contract(format!("fold index {i} out of range for {n} records")));
            }
            if std::mem::replace(&mut seen[i], true) {
                return Err(Error::contract(format!("record {i} appears twice in the fold split")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Clone, Debug)]
pub struct FoldOutcome {
    pub params: ModelParams,
    pub metrics: Metrics,
    /// `(P(class 1), label)` per validation record at the best epoch.
    pub scores: Vec<(f64, u8)>,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub history: Vec<EpochLog>,
}

/// Mean cross-entropy and positive-class probabilities for a prepared batch.
pub fn evaluate(model: &ModelParams, cfg: &ModelConfig, batch: &GraphBatch, labels: &[u8]) -> Result<(f64, Vec<f64>)> {
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape, false);
    let logits = forward_tape(&mut tape, &vars, batch, cfg)?;
    let t = tape.value(logits);
    let mut loss = 0.0;
    let mut probs = Vec::with_capacity(labels.len());
    for (row, &y) in labels.iter().enumerate() {
        let r = t.row(row);
        loss -= log_softmax(r)[y as usize];
        probs.push(positive_probability(r));
    }
    Ok((loss / labels.len() as f64, probs))
}

/// One Adam step on a minibatch; returns the batch loss.
pub fn train_step(
    model: &mut ModelParams,
    cfg: &ModelConfig,
    adam: &mut Adam,
    batch: &GraphBatch,
    labels: Rc<[usize]>,
) -> Result<f64> {
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape, true);
    let logits = forward_tape(&mut tape, &vars, batch, cfg)?;
    let loss = tape.cross_entropy(logits, labels)?;
    tape.backward(loss)?;
    let handles = vars.all();
    let zero: Vec<_> = handles.iter().map(|&v| crate::Tensor::zeros(tape.value(v).shape())).collect();
    let grads: Vec<&crate::Tensor> = handles
        .iter()
        .zip(&zero)
        .map(|(&v, z)| tape.grad(v).unwrap_or(z))
        .collect();
    let value = tape.value(loss).item();
    if !value.is_finite() {
        return Err(Error::Invariant(format!("training loss became {value}")));
    }
    adam.step(&mut model.tensors_mut(), &grads)?;
    Ok(value)
}

/// Trains one fold from scratch. Stage-1 artifacts come from the fold's
/// training records only.
pub fn train_fold(
    dataset: &Dataset,
    split: &FoldSplit,
    train_cfg: &TrainConfig,
    graph_cfg: &GraphConfig,
    ablation: Ablation,
    seed: u64,
    fold: usize,
) -> Result<FoldOutcome> {
    train_cfg.validate()?;
    split.validate(dataset.len())?;
    let fold_graphs = FoldGraphs::build(
        dataset,
        &split.train,
        graph_cfg,
        ablation.no_mi,
        derive_seed(seed, fold, "topology"),
    )?;
    let graphs: Vec<FeatureGraph> = dataset
        .records
        .iter()
        .map(|r| fold_graphs.graph(r))
        .collect::<Result<_>>()?;
    let labels = dataset.labels();
    let model_cfg = train_cfg.model(!ablation.no_mgf);

    let mut model = ModelParams::init(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, fold, "init")), &model_cfg);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, fold, "shuffle"));
    let mut adam = Adam::new(train_cfg.adam());

    let val_graphs: Vec<&FeatureGraph> = split.val.iter().map(|&i| &graphs[i]).collect();
    let val_batch = GraphBatch::new(&val_graphs)?;
    let val_labels: Vec<u8> = split.val.iter().map(|&i| labels[i]).collect();

    let mut stopper = EarlyStopping::new(train_cfg.patience);
    let mut best = model.clone();
    let mut history = Vec::new();
    let mut order = split.train.clone();
    for epoch in 1..=train_cfg.max_epochs {
        order.shuffle(&mut shuffle_rng);
        let mut total = 0.0;
        for chunk in order.chunks(train_cfg.batch_size) {
            let refs: Vec<&FeatureGraph> = chunk.iter().map(|&i| &graphs[i]).collect();
            let batch = GraphBatch::new(&refs)?;
            let ys: Rc<[usize]> = chunk.iter().map(|&i| labels[i] as usize).collect();
            total += train_step(&mut model, &model_cfg, &mut adam, &batch, ys)? * chunk.len() as f64;
        }
        let (val_loss, _) = evaluate(&model, &model_cfg, &val_batch, &val_labels)?;
        history.push(EpochLog {
            epoch,
            train_loss: total / order.len() as f64,
            val_loss,
        });
        match stopper.observe(epoch, val_loss) {
            StopDecision::Improved => best = model.clone(),
            StopDecision::Continue => {}
            StopDecision::Stop => break,
        }
    }

    let (_, probs) = evaluate(&best, &model_cfg, &val_batch, &val_labels)?;
    let scores: Vec<(f64, u8)> = probs.into_iter().zip(val_labels).collect();
    Ok(FoldOutcome {
        metrics: compute_metrics(&scores)?,
        params: best,
        scores,
        best_epoch: stopper.best_epoch,
        epochs_run: history.len(),
        history,
    })
}
