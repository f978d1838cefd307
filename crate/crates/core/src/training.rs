//! Semi-supervised training: mixed labeled/unlabeled batching, linear KL
//! annealing, Adam, dev-accuracy early stopping, the alpha grid sweep, and
//! 5-fold cross-split evaluation.
//!
//! One optimizer step draws one labeled batch and one unlabeled batch; the
//! three objective terms are batch means, so they stay equally scaled no
//! matter the pool sizes. The annealing coefficient ramps `0 -> 1` linearly
//! over `anneal_steps` optimizer steps and stays at 1 afterwards.
//!
//! Runs are deterministic given the config seed: batch order, dropout, and
//! every latent draw derive from it.

use alloc::vec::Vec;

use crate::data::{Dataset, TokenSequence, N_SPLITS};
use crate::fm;
use crate::gradients::{grad, GradError, GradientEstimatorKind};
use crate::neural::NeuralModel;
use crate::objectives::{Flavor, ObjectiveSpec, VariationalModel};
use crate::rng::SplitMix64;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Optimizer steps over which the KL coefficient ramps 0 -> 1.
    pub anneal_steps: usize,
    /// Epochs without dev-accuracy improvement before halting.
    pub patience: usize,
    pub alpha_grid: Vec<f64>,
    /// Importance samples per datum.
    pub k: usize,
    pub max_epochs: usize,
    pub seed: u64,
    /// Labeled observations also feed the unsupervised term.
    pub labeled_reused_unlabeled: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            learning_rate: 4e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            anneal_steps: 3000,
            patience: 4,
            alpha_grid: alloc::vec![1.0, 10.0, 100.0, 1000.0],
            k: 5,
            max_epochs: 100,
            seed: 0,
            labeled_reused_unlabeled: true,
        }
    }
}

impl TrainConfig {
    /// Linear annealing coefficient at an optimizer step.
    pub fn beta_at(&self, step: usize) -> f64 {
        if self.anneal_steps == 0 {
            1.0
        } else {
            (step as f64 / self.anneal_steps as f64).min(1.0)
        }
    }
}

/// The paper's estimator pairing: STL for ELBO-style objectives, DReG for
/// importance-weighted ones.
pub fn default_estimator(flavor: Flavor) -> GradientEstimatorKind {
    match flavor {
        Flavor::None | Flavor::Vae => GradientEstimatorKind::Stl,
        _ => GradientEstimatorKind::Dreg,
    }
}

#[derive(Debug, Clone)]
pub struct RunResult {
    /// Dev accuracy per epoch.
    pub dev_accuracy: Vec<f64>,
    pub best_dev_accuracy: f64,
    pub best_epoch: usize,
    /// Test accuracy of the best-dev checkpoint, evaluated exactly once.
    pub test_accuracy: f64,
    /// Classification weight this run used.
    pub alpha: f64,
    /// Objective value per optimizer step.
    pub bound_trace: Vec<f64>,
    /// Annealing coefficient per optimizer step.
    pub beta_trace: Vec<f64>,
    /// Epoch-mean closed-form `KL[q(z|x)||p(z)]`.
    pub kl_z_trace: Vec<f64>,
    pub final_kl_z: f64,
    pub epochs_run: usize,
    /// Stamped by the caller; the trainer itself does not read clocks.
    pub wall_clock_secs: f64,
}

#[derive(Debug)]
pub enum TrainError {
    /// Objective or gradient turned non-finite; carries a diagnostic
    /// snapshot of the step, the offending batches, and the last finite
    /// objective value.
    NonFinite {
        step: usize,
        epoch: usize,
        labeled_batch: Vec<usize>,
        unlabeled_batch: Vec<usize>,
        last_finite: f64,
        value: f64,
    },
    /// Supervised-only flavor with `alpha = 0` has no learning signal.
    NoLearningSignal,
    /// The dev split is empty.
    EmptyDevSplit { dev_split: u8 },
    /// No labeled data outside the dev split.
    EmptyFitSet,
    Grad(GradError),
}

impl From<GradError> for TrainError {
    fn from(e: GradError) -> Self {
        TrainError::Grad(e)
    }
}

impl core::fmt::Display for TrainError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            TrainError::NonFinite {
                step,
                epoch,
                labeled_batch,
                unlabeled_batch,
                last_finite,
                value,
            } => write!(
                f,
                "non-finite objective {value} at step {step} (epoch {epoch}); labeled batch {labeled_batch:?}, unlabeled batch {unlabeled_batch:?}; last finite value {last_finite}"
            ),
            TrainError::NoLearningSignal => {
                write!(f, "supervised-only flavor with alpha = 0 has no learning signal")
            }
            TrainError::EmptyDevSplit { dev_split } => {
                write!(f, "dev split {dev_split} holds no labeled examples")
            }
            TrainError::EmptyFitSet => write!(f, "no labeled examples outside the dev split"),
            TrainError::Grad(e) => write!(f, "{e}"),
        }
    }
}

impl core::error::Error for TrainError {}

/// Adam with ascent steps (objectives are maximized).
pub struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
    lr: f64,
    b1: f64,
    b2: f64,
    eps: f64,
}

impl Adam {
    pub fn new(n: usize, cfg: &TrainConfig) -> Self {
        Self {
            m: alloc::vec![0.0; n],
            v: alloc::vec![0.0; n],
            t: 0,
            lr: cfg.learning_rate,
            b1: cfg.beta1,
            b2: cfg.beta2,
            eps: cfg.eps,
        }
    }

    pub fn ascent_step(&mut self, params: &mut [f64], grads: &[f64]) {
        self.t += 1;
        let bc1 = 1.0 - fm::powi(self.b1, self.t as i32);
        let bc2 = 1.0 - fm::powi(self.b2, self.t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.b1 * self.m[i] + (1.0 - self.b1) * g;
            self.v[i] = self.b2 * self.v[i] + (1.0 - self.b2) * g * g;
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            params[i] += self.lr * mhat / (fm::sqrt(vhat) + self.eps);
        }
    }
}

/// Early-stopping state: strict improvements reset the patience counter;
/// ties update the retained checkpoint to the later epoch but still count
/// against patience.
pub struct EarlyStopper {
    patience: usize,
    pub best: f64,
    pub best_epoch: usize,
    bad: usize,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: f64::NEG_INFINITY,
            best_epoch: 0,
            bad: 0,
        }
    }

    /// Feed one epoch's metric. Returns `(take_snapshot, stop)`.
    pub fn observe(&mut self, epoch: usize, metric: f64) -> (bool, bool) {
        if metric > self.best {
            self.best = metric;
            self.best_epoch = epoch;
            self.bad = 0;
            (true, false)
        } else if metric == self.best {
            self.best_epoch = epoch;
            self.bad += 1;
            (true, self.bad > self.patience)
        } else {
            self.bad += 1;
            (false, self.bad > self.patience)
        }
    }
}

fn accuracy(model: &NeuralModel, items: &[&(TokenSequence, usize)]) -> f64 {
    if items.is_empty() {
        return 0.0;
    }
    let hits = items
        .iter()
        .filter(|(x, y)| model.classify(x).0 == *y)
        .count();
    hits as f64 / items.len() as f64
}

fn accuracy_owned(model: &NeuralModel, items: &[(TokenSequence, usize)]) -> f64 {
    let refs: Vec<&(TokenSequence, usize)> = items.iter().collect();
    accuracy(model, &refs)
}

/// Cycling shuffled index stream over a pool.
struct IndexStream {
    order: Vec<usize>,
    pos: usize,
    seed: u64,
    wraps: u64,
}

impl IndexStream {
    fn new(n: usize, seed: u64) -> Self {
        let mut s = Self {
            order: (0..n).collect(),
            pos: 0,
            seed,
            wraps: 0,
        };
        s.reshuffle();
        s
    }

    fn reshuffle(&mut self) {
        let mut rng = SplitMix64::seed_from_u64(SplitMix64::derive(self.seed, self.wraps));
        rng.shuffle(&mut self.order);
        self.pos = 0;
    }

    fn take(&mut self, n: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(n);
        if self.order.is_empty() {
            return out;
        }
        for _ in 0..n {
            if self.pos == self.order.len() {
                self.wraps += 1;
                self.reshuffle();
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// Train one model on one dev-split rotation. Deterministic given
/// `(model init, dataset, spec, config)`.
pub fn train(
    model: &mut NeuralModel,
    dataset: &Dataset,
    dev_split: u8,
    spec: &ObjectiveSpec,
    cfg: &TrainConfig,
    kind: GradientEstimatorKind,
) -> Result<RunResult, TrainError> {
    if spec.flavor == Flavor::None && spec.alpha == 0.0 {
        return Err(TrainError::NoLearningSignal);
    }
    let dev = dataset.dev_items(dev_split);
    if dev.is_empty() {
        return Err(TrainError::EmptyDevSplit { dev_split });
    }
    let fit: Vec<(TokenSequence, usize)> = dataset
        .fit_items(dev_split)
        .into_iter()
        .cloned()
        .collect();
    if fit.is_empty() {
        return Err(TrainError::EmptyFitSet);
    }
    // Unsupervised pool; labeled observations join it when configured.
    let mut unsup_pool: Vec<TokenSequence> = dataset.train_unlabeled.clone();
    if cfg.labeled_reused_unlabeled {
        unsup_pool.extend(fit.iter().map(|(x, _)| x.clone()));
    }
    let use_unsup = spec.flavor != Flavor::None && !unsup_pool.is_empty();

    let steps_per_epoch = if use_unsup {
        unsup_pool.len().max(fit.len()).div_ceil(cfg.batch_size)
    } else {
        fit.len().div_ceil(cfg.batch_size)
    }
    .max(1);

    let mut lab_stream = IndexStream::new(fit.len(), SplitMix64::derive(cfg.seed, 0x1ab));
    let mut unsup_stream = IndexStream::new(unsup_pool.len(), SplitMix64::derive(cfg.seed, 0x0b5));

    let mut adam = Adam::new(model.params().len(), cfg);
    let mut stopper = EarlyStopper::new(cfg.patience);
    let mut snapshot: Vec<f64> = model.params().data().to_vec();

    let mut bound_trace = Vec::new();
    let mut beta_trace = Vec::new();
    let mut kl_z_trace = Vec::new();
    let mut dev_accuracy = Vec::new();
    let mut last_finite = f64::NAN;
    let mut global_step = 0usize;
    let mut epochs_run = 0usize;

    'epochs: for epoch in 0..cfg.max_epochs {
        let mut epoch_kl = 0.0;
        let mut epoch_kl_n = 0usize;
        for _ in 0..steps_per_epoch {
            let lab_idx = lab_stream.take(cfg.batch_size.min(fit.len()));
            let labeled: Vec<(&TokenSequence, usize)> =
                lab_idx.iter().map(|&i| (&fit[i].0, fit[i].1)).collect();
            let unsup_idx = if use_unsup {
                unsup_stream.take(cfg.batch_size)
            } else {
                Vec::new()
            };
            let unlabeled: Vec<&TokenSequence> =
                unsup_idx.iter().map(|&i| &unsup_pool[i]).collect();

            let beta = cfg.beta_at(global_step);
            let step_spec = ObjectiveSpec {
                k: cfg.k,
                ..spec.clone()
            }
            .with_beta(beta);
            let report = match grad(
                model,
                &labeled,
                &unlabeled,
                &step_spec,
                kind,
                SplitMix64::derive2(cfg.seed, 0x57e9, global_step as u64),
                true,
            ) {
                Ok(r) => r,
                Err(GradError::Objective(
                    crate::objectives::ObjectiveError::NonFiniteWeight { value, .. },
                )) => {
                    return Err(TrainError::NonFinite {
                        step: global_step,
                        epoch,
                        labeled_batch: lab_idx,
                        unlabeled_batch: unsup_idx,
                        last_finite,
                        value,
                    });
                }
                Err(e) => return Err(e.into()),
            };
            if !report.value.is_finite() || !report.grads.all_finite() {
                return Err(TrainError::NonFinite {
                    step: global_step,
                    epoch,
                    labeled_batch: lab_idx,
                    unlabeled_batch: unsup_idx,
                    last_finite,
                    value: report.value,
                });
            }
            last_finite = report.value;
            bound_trace.push(report.value);
            beta_trace.push(beta);
            if let Some(kl) = report.mean_kl_z {
                epoch_kl += kl;
                epoch_kl_n += 1;
            }
            adam.ascent_step(model.params_mut().data_mut(), report.grads.data());
            global_step += 1;
        }
        epochs_run = epoch + 1;
        kl_z_trace.push(if epoch_kl_n > 0 {
            epoch_kl / epoch_kl_n as f64
        } else {
            0.0
        });
        let acc = accuracy(model, &dev);
        dev_accuracy.push(acc);
        let (snap, stop) = stopper.observe(epoch, acc);
        if snap {
            snapshot.copy_from_slice(model.params().data());
        }
        if stop {
            break 'epochs;
        }
    }

    // Restore the best-epoch parameters before the single test evaluation.
    model.params_mut().data_mut().copy_from_slice(&snapshot);
    let test_accuracy = accuracy_owned(model, &dataset.test);
    let final_kl_z = kl_z_trace.last().copied().unwrap_or(0.0);

    Ok(RunResult {
        dev_accuracy,
        best_dev_accuracy: stopper.best,
        best_epoch: stopper.best_epoch,
        test_accuracy,
        alpha: spec.alpha,
        bound_trace,
        beta_trace,
        kl_z_trace,
        final_kl_z,
        epochs_run,
        wall_clock_secs: 0.0,
    })
}

/// One full training run per grid value; selection by best dev accuracy with
/// ties broken toward the smaller alpha.
pub fn alpha_sweep(
    model_factory: &dyn Fn(u64) -> NeuralModel,
    dataset: &Dataset,
    dev_split: u8,
    spec: &ObjectiveSpec,
    cfg: &TrainConfig,
    kind: GradientEstimatorKind,
) -> Result<(f64, Vec<(f64, RunResult)>), TrainError> {
    let mut runs = Vec::with_capacity(cfg.alpha_grid.len());
    let mut best_alpha = cfg.alpha_grid[0];
    let mut best_dev = f64::NEG_INFINITY;
    let mut grid = cfg.alpha_grid.clone();
    grid.sort_by(|a, b| a.partial_cmp(b).unwrap());
    for (i, &alpha) in grid.iter().enumerate() {
        let mut model = model_factory(SplitMix64::derive(cfg.seed, i as u64));
        let run_spec = spec.clone().with_alpha(alpha);
        let result = train(&mut model, dataset, dev_split, &run_spec, cfg, kind)?;
        if result.best_dev_accuracy > best_dev {
            best_dev = result.best_dev_accuracy;
            best_alpha = alpha;
        }
        runs.push((alpha, result));
    }
    Ok((best_alpha, runs))
}

/// Mean and sample standard deviation of the test accuracy over the five
/// dev-split rotations.
#[derive(Debug, Clone)]
pub struct CrossSplitResult {
    pub mean: f64,
    pub std: f64,
    pub runs: Vec<RunResult>,
}

pub fn cross_split_evaluate(
    model_factory: &dyn Fn(u64) -> NeuralModel,
    dataset: &Dataset,
    spec: &ObjectiveSpec,
    cfg: &TrainConfig,
    kind: GradientEstimatorKind,
) -> Result<CrossSplitResult, TrainError> {
    let mut runs = Vec::with_capacity(N_SPLITS);
    for split in 0..N_SPLITS as u8 {
        let mut model = model_factory(SplitMix64::derive(cfg.seed, 0x5917 + split as u64));
        let mut split_cfg = cfg.clone();
        split_cfg.seed = SplitMix64::derive(cfg.seed, 0xd5 + split as u64);
        runs.push(train(&mut model, dataset, split, spec, &split_cfg, kind)?);
    }
    let accs: Vec<f64> = runs.iter().map(|r| r.test_accuracy).collect();
    let (mean, std) = fm::mean_std(&accs);
    Ok(CrossSplitResult { mean, std, runs })
}
