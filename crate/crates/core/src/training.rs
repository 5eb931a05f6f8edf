//! Text-free training: sample image pairs, regress the style difference from
//! the embedding condition, update with Adam.

use std::fmt::Write as _;
use std::path::PathBuf;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mapper::{ConditionMode, MapperArch, MapperError, MapperParams, StyleLayout};
use crate::numerics::{cosine, cosine_sim, norm, AdamConfig, AdamState, Init, NumericsError};
use crate::store::{fnv1a64, Checkpoint, EmbeddingDataset, ValidationReport};

/// Stream used for the train/validation split, distinct from every step stream.
const SPLIT_STREAM: u64 = u64::MAX;
/// Stream used for drawing the fixed validation pairs.
const VALIDATION_STREAM: u64 = u64::MAX - 1;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("need at least 2 records to sample a pair, have {0}")]
    TooFewRecords(usize),
    #[error("invalid dataset:\n{0}")]
    InvalidDataset(ValidationReport),
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("dimension mismatch: {what} has {actual}, expected {expected}")]
    Dimension {
        what: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("degenerate pair: target style difference is zero")]
    DegeneratePair,
    #[error("empty effective batch: all {0} pairs were degenerate")]
    EmptyEffectiveBatch(usize),
    #[error("non-finite loss at step {step} (pairs {pairs:?})")]
    NonFiniteLoss { step: u64, pairs: Vec<(usize, usize)> },
    #[error("parameters became non-finite after step {0}")]
    Diverged(u64),
    #[error("checkpoint does not match this run: {0}")]
    CheckpointMismatch(String),
    #[error(transparent)]
    Mapper(#[from] MapperError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

pub type Result<T> = std::result::Result<T, TrainError>;

/// A preset name or an explicit layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LayoutChoice {
    Preset(String),
    Custom(StyleLayout),
}

impl Default for LayoutChoice {
    fn default() -> Self {
        LayoutChoice::Preset("tiny".into())
    }
}

impl LayoutChoice {
    pub fn resolve(&self) -> Result<StyleLayout> {
        match self {
            LayoutChoice::Preset(name) => StyleLayout::preset(name)
                .ok_or_else(|| TrainError::InvalidConfig(format!("unknown layout preset `{name}`"))),
            LayoutChoice::Custom(l) => {
                l.validate()?;
                Ok(*l)
            }
        }
    }
}

/// A named Adam preset (`desk` or `paper`) or explicit hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum OptimizerChoice {
    Preset(String),
    Custom(AdamConfig),
}

impl Default for OptimizerChoice {
    fn default() -> Self {
        OptimizerChoice::Preset("desk".into())
    }
}

impl OptimizerChoice {
    pub fn resolve(&self) -> Result<AdamConfig> {
        let o = match self {
            OptimizerChoice::Preset(name) => match name.as_str() {
                "desk" => AdamConfig::desk(),
                "paper" => AdamConfig::paper(),
                _ => return Err(TrainError::InvalidConfig(format!("unknown optimizer preset `{name}`"))),
            },
            OptimizerChoice::Custom(o) => *o,
        };
        if !(o.lr > 0.0 && (0.0..1.0).contains(&o.beta1) && (0.0..1.0).contains(&o.beta2) && o.eps > 0.0) {
            return Err(TrainError::InvalidConfig("optimizer hyperparameters out of range".into()));
        }
        Ok(o)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: ConditionMode,
    pub batch_size: usize,
    pub steps: u64,
    pub optimizer: OptimizerChoice,
    pub seed: u64,
    pub layout: LayoutChoice,
    /// Dataset files, concatenated in order.
    pub datasets: Vec<PathBuf>,
    /// Save a checkpoint every this many steps; 0 disables.
    pub checkpoint_every: u64,
    pub rec_weight: f64,
    pub sim_weight: f64,
    pub val_fraction: f64,
    /// Fixed held-out pairs scored at each epoch boundary.
    pub val_pairs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: ConditionMode::Delta,
            batch_size: 64,
            steps: 5000,
            optimizer: OptimizerChoice::default(),
            seed: 0,
            layout: LayoutChoice::default(),
            datasets: Vec::new(),
            checkpoint_every: 0,
            rec_weight: 1.0,
            sim_weight: 1.0,
            val_fraction: 0.05,
            val_pairs: 512,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.into()));
        if self.batch_size < 1 {
            return bad("batch_size must be at least 1");
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad("val_fraction must lie in [0, 1)");
        }
        if self.rec_weight < 0.0 || self.sim_weight < 0.0 {
            return bad("loss weights must be non-negative");
        }
        self.optimizer.resolve()?;
        self.layout.resolve()?;
        Ok(())
    }

    /// Digest of every field that shapes the trajectory. Step budget, cadence
    /// and input paths are excluded so a shorter run can be resumed into a
    /// longer one.
    pub fn trajectory_digest(&self) -> u64 {
        let mut c = self.clone();
        c.steps = 0;
        c.checkpoint_every = 0;
        c.datasets.clear();
        if let Ok(o) = self.optimizer.resolve() {
            c.optimizer = OptimizerChoice::Custom(o);
        }
        if let Ok(l) = self.layout.resolve() {
            c.layout = LayoutChoice::Custom(l);
        }
        fnv1a64(toml::to_string(&c).expect("config serializes").as_bytes())
    }
}

/// Draw an ordered pair of distinct indices below `n`, uniformly.
pub fn sample_pair<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Result<(usize, usize)> {
    if n < 2 {
        return Err(TrainError::TooFewRecords(n));
    }
    let j = rng.random_range(0..n);
    let mut k = rng.random_range(0..n - 1);
    if k >= j {
        k += 1;
    }
    Ok((j, k))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub rec: f64,
    pub sim: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { rec: 1.0, sim: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossTerms {
    pub total: f64,
    /// `‖Δs' - Δs‖₂`
    pub rec: f64,
    /// `1 - cos(Δs', Δs)`, or 0 when the prediction is exactly zero.
    pub sim: f64,
}

/// Per-pair loss `rec·‖Δs' - Δs‖₂ + sim·(1 - cos(Δs', Δs))` and its gradient
/// with respect to `Δs'`.
///
/// The distance is not squared; at `Δs' = Δs` its subgradient 0 is used.
/// When `Δs' = 0` the cosine term is undefined and is left out.
pub fn compute_loss(pred: &[f64], target: &[f64], w: LossWeights) -> Result<(LossTerms, Vec<f64>)> {
    if pred.len() != target.len() {
        return Err(TrainError::Dimension {
            what: "prediction",
            expected: target.len(),
            actual: pred.len(),
        });
    }
    if norm(target) == 0.0 {
        return Err(TrainError::DegeneratePair);
    }
    let diff: Vec<f64> = pred.iter().zip(target).map(|(p, t)| p - t).collect();
    let rec = norm(&diff);
    let mut grad: Vec<f64> = if rec > 0.0 {
        diff.iter().map(|d| w.rec * d / rec).collect()
    } else {
        vec![0.0; pred.len()]
    };
    let mut sim = 0.0;
    if norm(pred) > 0.0 {
        let c = cosine_sim(pred, target)?;
        sim = 1.0 - c.value;
        grad.iter_mut().zip(&c.grad_a).for_each(|(g, gc)| *g -= w.sim * gc);
    }
    Ok((
        LossTerms {
            total: w.rec * rec + w.sim * sim,
            rec,
            sim,
        },
        grad,
    ))
}

/// One batch of training pairs; row `b` of each matrix belongs to pair `b`.
#[derive(Debug, Clone)]
pub struct PairBatch {
    pub pairs: Vec<(usize, usize)>,
    pub s1: Array2<f64>,
    pub i1: Array2<f64>,
    pub s2: Array2<f64>,
    pub i2: Array2<f64>,
}

impl PairBatch {
    pub fn gather(images: &Array2<f64>, styles: &Array2<f64>, pairs: Vec<(usize, usize)>) -> Self {
        let (a, b): (Vec<usize>, Vec<usize>) = pairs.iter().copied().unzip();
        Self {
            s1: styles.select(Axis(0), &a),
            i1: images.select(Axis(0), &a),
            s2: styles.select(Axis(0), &b),
            i2: images.select(Axis(0), &b),
            pairs,
        }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Drop pairs whose style difference is exactly zero.
    fn effective(&self) -> (PairBatch, usize) {
        let keep: Vec<usize> = (0..self.len())
            .filter(|&b| self.s1.row(b).iter().zip(self.s2.row(b)).any(|(x, y)| x != y))
            .collect();
        let skipped = self.len() - keep.len();
        let batch = PairBatch {
            pairs: keep.iter().map(|&b| self.pairs[b]).collect(),
            s1: self.s1.select(Axis(0), &keep),
            i1: self.i1.select(Axis(0), &keep),
            s2: self.s2.select(Axis(0), &keep),
            i2: self.i2.select(Axis(0), &keep),
        };
        (batch, skipped)
    }

    fn condition(&self, mode: ConditionMode) -> Array2<f64> {
        match mode {
            ConditionMode::Delta => &self.i2 - &self.i1,
            ConditionMode::Naive => self.i2.clone(),
        }
    }
}

/// Batch-mean loss terms measured before the update.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StepStats {
    pub loss: LossTerms,
    pub effective: usize,
    pub skipped: usize,
}

/// Mean loss and gradient over a batch without updating anything.
pub fn batch_loss(
    params: &MapperParams,
    batch: &PairBatch,
    mode: ConditionMode,
    weights: LossWeights,
) -> Result<(StepStats, MapperParams)> {
    let (eff, skipped) = batch.effective();
    if eff.is_empty() {
        return Err(TrainError::EmptyEffectiveBatch(batch.len()));
    }
    let cond = eff.condition(mode);
    let (pred, acts) = params.forward(eff.s1.view(), eff.i1.view(), cond.view())?;
    let target = &eff.s2 - &eff.s1;
    let n = eff.len();
    let inv = 1.0 / n as f64;
    let mut d_out = Array2::zeros(pred.raw_dim());
    let mut sum = LossTerms::default();
    for b in 0..n {
        let p = pred.row(b).to_vec();
        let t = target.row(b).to_vec();
        let (terms, grad) = compute_loss(&p, &t, weights)?;
        sum.total += terms.total;
        sum.rec += terms.rec;
        sum.sim += terms.sim;
        d_out.row_mut(b).iter_mut().zip(grad).for_each(|(d, g)| *d = g * inv);
    }
    let grads = params.backward(&acts, d_out.view())?;
    let loss = LossTerms {
        total: sum.total * inv,
        rec: sum.rec * inv,
        sim: sum.sim * inv,
    };
    Ok((
        StepStats {
            loss,
            effective: n,
            skipped,
        },
        grads.params,
    ))
}

/// One optimizer step on `batch`. Nothing is modified on error.
pub fn train_step(
    params: &mut MapperParams,
    adam: &mut AdamState,
    batch: &PairBatch,
    mode: ConditionMode,
    weights: LossWeights,
) -> Result<StepStats> {
    let (stats, grads) = batch_loss(params, batch, mode, weights)?;
    if !stats.loss.total.is_finite() {
        return Err(TrainError::NonFiniteLoss {
            step: adam.step + 1,
            pairs: batch.pairs.clone(),
        });
    }
    adam.step(params, &grads)?;
    if !params.is_finite() {
        return Err(TrainError::Diverged(adam.step));
    }
    Ok(stats)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HistoryRow {
    pub step: u64,
    pub loss: LossTerms,
    pub skipped: usize,
    pub val_cosine: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainHistory {
    pub rows: Vec<HistoryRow>,
}

impl TrainHistory {
    pub fn losses(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.loss.total).collect()
    }

    pub fn validation(&self) -> Vec<(u64, f64)> {
        self.rows.iter().filter_map(|r| r.val_cosine.map(|v| (r.step, v))).collect()
    }

    /// `step,L,L_rec,L_sim,val_cosine`; the last column is empty except at
    /// epoch boundaries.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,L,L_rec,L_sim,val_cosine\n");
        for r in &self.rows {
            let val = r.val_cosine.map(|v| format!("{v:.9}")).unwrap_or_default();
            let _ = writeln!(
                out,
                "{},{:.9},{:.9},{:.9},{}",
                r.step, r.loss.total, r.loss.rec, r.loss.sim, val
            );
        }
        out
    }
}

/// Seeded split of `0..n` into training and held-out indices.
pub fn split_indices(n: usize, val_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(SPLIT_STREAM);
    idx.shuffle(&mut rng);
    let n_val = ((n as f64) * val_fraction).round() as usize;
    let n_val = if n - n_val < 2 { n.saturating_sub(2) } else { n_val };
    let val = idx.split_off(n - n_val);
    (idx, val)
}

/// Resumable training state over one in-memory dataset.
#[derive(Debug, Clone)]
pub struct Trainer {
    config: TrainConfig,
    arch: MapperArch,
    images: Array2<f64>,
    styles: Array2<f64>,
    train_idx: Vec<usize>,
    val_pairs: Vec<(usize, usize)>,
    steps_per_epoch: u64,
    params: MapperParams,
    adam: AdamState,
    history: TrainHistory,
}

impl Trainer {
    pub fn new(config: TrainConfig, dataset: &EmbeddingDataset) -> Result<Self> {
        config.validate()?;
        let report = dataset.validate();
        if !report.is_empty() {
            return Err(TrainError::InvalidDataset(report));
        }
        let layout = config.layout.resolve()?;
        if layout.total() != dataset.style_dim() {
            return Err(TrainError::Dimension {
                what: "dataset style width",
                expected: layout.total(),
                actual: dataset.style_dim(),
            });
        }
        let arch = MapperArch::new(layout, dataset.clip_dim());
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let params = MapperParams::new(arch, Init::KaimingUniform, &mut rng)?;
        let adam = AdamState::new(config.optimizer.resolve()?, &params);

        let (train_idx, val_idx) = split_indices(dataset.len(), config.val_fraction, config.seed);
        let val_pairs = if val_idx.len() >= 2 {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            rng.set_stream(VALIDATION_STREAM);
            (0..config.val_pairs)
                .map(|_| {
                    let (a, b) = sample_pair(val_idx.len(), &mut rng).expect("two held-out records");
                    (val_idx[a], val_idx[b])
                })
                .collect()
        } else {
            Vec::new()
        };
        let steps_per_epoch = (train_idx.len() as u64).div_ceil(config.batch_size as u64).max(1);
        Ok(Self {
            arch,
            images: dataset.images().mapv(f64::from),
            styles: dataset.styles().mapv(f64::from),
            train_idx,
            val_pairs,
            steps_per_epoch,
            params,
            adam,
            history: TrainHistory::default(),
            config,
        })
    }

    /// Continue from a checkpoint that carries optimizer state.
    pub fn resume(config: TrainConfig, dataset: &EmbeddingDataset, ck: &Checkpoint) -> Result<Self> {
        let mut t = Self::new(config, dataset)?;
        let adam = ck
            .trainer
            .clone()
            .ok_or_else(|| TrainError::CheckpointMismatch("no optimizer state".into()))?;
        if ck.params.arch != t.arch {
            return Err(TrainError::CheckpointMismatch("architecture differs".into()));
        }
        if ck.mode != t.config.mode || ck.seed != t.config.seed {
            return Err(TrainError::CheckpointMismatch("mode or seed differs".into()));
        }
        if ck.config_digest != t.config.trajectory_digest() {
            return Err(TrainError::CheckpointMismatch("training config differs".into()));
        }
        t.params = ck.params.clone();
        t.adam = adam;
        Ok(t)
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn params(&self) -> &MapperParams {
        &self.params
    }

    pub fn adam(&self) -> &AdamState {
        &self.adam
    }

    pub fn step(&self) -> u64 {
        self.adam.step
    }

    pub fn history(&self) -> &TrainHistory {
        &self.history
    }

    pub fn train_indices(&self) -> &[usize] {
        &self.train_idx
    }

    pub fn validation_pairs(&self) -> &[(usize, usize)] {
        &self.val_pairs
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            rec: self.config.rec_weight,
            sim: self.config.sim_weight,
        }
    }

    /// The pairs used at (1-based) step `step`. Each step has its own stream,
    /// so resuming needs no saved RNG state.
    pub fn step_pairs(&self, step: u64) -> Vec<(usize, usize)> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(step);
        let n = self.train_idx.len();
        (0..self.config.batch_size)
            .map(|_| {
                let (a, b) = sample_pair(n, &mut rng).expect("two training records");
                (self.train_idx[a], self.train_idx[b])
            })
            .collect()
    }

    pub fn step_once(&mut self) -> Result<StepStats> {
        let step = self.adam.step + 1;
        let batch = PairBatch::gather(&self.images, &self.styles, self.step_pairs(step));
        let mode = self.config.mode;
        let weights = self.weights();
        let stats = train_step(&mut self.params, &mut self.adam, &batch, mode, weights)?;
        let val_cosine = if step % self.steps_per_epoch == 0 {
            self.validation_cosine()
        } else {
            None
        };
        self.history.rows.push(HistoryRow {
            step,
            loss: stats.loss,
            skipped: stats.skipped,
            val_cosine,
        });
        Ok(stats)
    }

    /// Train until `steps` optimizer steps have been taken in total.
    /// `on_checkpoint` runs at the configured cadence.
    pub fn run_to<F>(&mut self, steps: u64, mut on_checkpoint: F) -> Result<()>
    where
        F: FnMut(&Trainer) -> Result<()>,
    {
        while self.adam.step < steps {
            self.step_once()?;
            let every = self.config.checkpoint_every;
            if every > 0 && self.adam.step % every == 0 {
                on_checkpoint(self)?;
            }
        }
        Ok(())
    }

    /// Mean `cos(Δs', Δs)` over the fixed held-out pairs.
    pub fn validation_cosine(&self) -> Option<f64> {
        if self.val_pairs.is_empty() {
            return None;
        }
        Some(pair_cosine(
            &self.params,
            self.config.mode,
            &self.images,
            &self.styles,
            &self.val_pairs,
        ))
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            params: self.params.clone(),
            mode: self.config.mode,
            seed: self.config.seed,
            config_digest: self.config.trajectory_digest(),
            trainer: Some(self.adam.clone()),
        }
    }
}

/// Mean `cos(Δs', Δs)` over explicit pairs, skipping degenerate ones.
pub fn pair_cosine(
    params: &MapperParams,
    mode: ConditionMode,
    images: &Array2<f64>,
    styles: &Array2<f64>,
    pairs: &[(usize, usize)],
) -> f64 {
    let (batch, _) = PairBatch::gather(images, styles, pairs.to_vec()).effective();
    if batch.is_empty() {
        return 0.0;
    }
    let cond = batch.condition(mode);
    let (pred, _) = params
        .forward(batch.s1.view(), batch.i1.view(), cond.view())
        .expect("batch shapes come from the dataset");
    let target = &batch.s2 - &batch.s1;
    let total: f64 = pred
        .rows()
        .into_iter()
        .zip(target.rows())
        .map(|(p, t)| cosine(&p.to_vec(), &t.to_vec()))
        .sum();
    total / batch.len() as f64
}

/// Train from scratch for `config.steps` steps.
pub fn train(config: TrainConfig, dataset: &EmbeddingDataset) -> Result<(Checkpoint, TrainHistory)> {
    let steps = config.steps;
    let mut t = Trainer::new(config, dataset)?;
    t.run_to(steps, |_| Ok(()))?;
    Ok((t.checkpoint(), t.history.clone()))
}
