//! Episodic training for the Neuralizer and for the task-specific baselines, with
//! validation, early stopping and checkpointing.

mod checkpoint;

pub use checkpoint::{
    encode_checkpoint, load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint,
    Checkpoint, CheckpointMeta, RngState, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};

use std::collections::BTreeMap;
use std::sync::{mpsc, Arc};

use rand::seq::IndexedRandom;
use serde::{Deserialize, Serialize};

use crate::augment::{apply_tree, augment_pair, AugTree};
use crate::datagen::{
    Batch, Sampler, SamplerConfig, SubjectPool, TaskKind, TaskPins, INPUT_CHANNELS,
};
use crate::error::{config_err, Error, Result};
use crate::losses::{task_loss, LossConfig};
use crate::model::{Model, ModelConfig, ModelKind};
use crate::rng;
use crate::tensor::{adam_step, AdamConfig, AdamState, Tape, Tensor};

const STREAM_MODEL: u64 = 1;
const STREAM_VAL: u64 = 2;
const STREAM_STEP: u64 = 3;
const STREAM_SUBSET: u64 = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps_max: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Steps between validations. One interval counts as one epoch for patience.
    pub val_interval: usize,
    pub val_episodes: usize,
    pub patience_epochs: usize,
    /// Bound on the global gradient norm; `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub loss: LossConfig,
    /// Batch-building threads. Batches depend only on `(seed, step)`.
    pub workers: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps_max: 5000,
            batch_size: 8,
            adam: AdamConfig::default(),
            val_interval: 100,
            val_episodes: 256,
            patience_epochs: 25,
            clip_norm: Some(1.0),
            loss: LossConfig::default(),
            workers: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("steps_max", self.steps_max),
            ("batch_size", self.batch_size),
            ("val_interval", self.val_interval),
            ("val_episodes", self.val_episodes),
            ("patience_epochs", self.patience_epochs),
            ("workers", self.workers),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return config_err(format!("train.{name} must be at least 1"));
        }
        let a = &self.adam;
        if !(a.lr > 0.0 && a.eps > 0.0 && (0.0..1.0).contains(&a.beta1))
            || !(0.0..1.0).contains(&a.beta2)
        {
            return config_err(format!("invalid Adam settings {a:?}"));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0 && c.is_finite()) {
                return config_err(format!("clip_norm must be positive, got {c}"));
            }
        }
        self.loss
            .validate()
            .map_err(|e| Error::Config(e.to_string()))
    }
}

/// Patience counter over validation losses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EarlyStop {
    pub best_val: Option<f64>,
    pub since_improve: usize,
    pub patience: usize,
}

impl EarlyStop {
    pub fn new(patience: usize) -> Self {
        Self {
            best_val: None,
            since_improve: 0,
            patience,
        }
    }

    /// Record one validation loss. Returns true once `patience` consecutive values
    /// have failed to beat the best.
    pub fn update(&mut self, val: f64) -> bool {
        match self.best_val {
            Some(best) if val >= best => self.since_improve += 1,
            _ => {
                self.best_val = Some(val);
                self.since_improve = 0;
            }
        }
        self.since_improve >= self.patience
    }

    pub fn improved(&self) -> bool {
        self.best_val.is_some() && self.since_improve == 0
    }
}

/// A task-specific baseline trained on a fixed set of `n_subjects` training subjects.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaselineSpec {
    pub task: TaskKind,
    pub n_subjects: usize,
    /// Fixes the task variant: segmentation needs classes, modality transfer needs
    /// input and target modalities.
    #[serde(default)]
    pub pins: TaskPins,
}

impl BaselineSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_subjects == 0 {
            return config_err("baseline needs at least one training subject");
        }
        let p = &self.pins;
        match self.task {
            TaskKind::Segmentation if p.classes.as_ref().is_none_or(|c| c.is_empty()) => {
                config_err("a segmentation baseline needs pinned classes")
            }
            TaskKind::ModalityTransfer if p.modalities.is_none() || p.target_modality.is_none() => {
                config_err("a modality-transfer baseline needs pinned input and target modalities")
            }
            _ => Ok(()),
        }
    }
}

/// Baselines trained per setting: three for one subject, two for two, else one.
pub fn baseline_replicates(n_subjects: usize) -> usize {
    match n_subjects {
        1 => 3,
        2 => 2,
        _ => 1,
    }
}

/// Everything that determines a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSetup {
    pub model: ModelConfig,
    pub sampler: SamplerConfig,
    pub train: TrainConfig,
    pub augment: AugTree,
    pub seed: u64,
    pub baseline: Option<BaselineSpec>,
}

impl Default for RunSetup {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            sampler: SamplerConfig::default(),
            train: TrainConfig::default(),
            augment: AugTree::default(),
            seed: 0,
            baseline: None,
        }
    }
}

impl RunSetup {
    pub fn kind(&self) -> ModelKind {
        match self.baseline {
            Some(_) => ModelKind::Baseline,
            None => ModelKind::Neuralizer,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        self.sampler.validate()?;
        self.train.validate()?;
        self.augment.validate()?;
        if self.model.image_size != self.sampler.phantom.image_size {
            return config_err(format!(
                "model image_size {} differs from phantom image_size {}",
                self.model.image_size, self.sampler.phantom.image_size
            ));
        }
        if self.model.in_channels != INPUT_CHANNELS || self.model.out_channels != 1 {
            return config_err(format!(
                "model must take {INPUT_CHANNELS} input channels and emit 1"
            ));
        }
        if let Some(b) = &self.baseline {
            b.validate()?;
            if b.n_subjects > self.sampler.train_subjects {
                return config_err(format!(
                    "baseline asks for {} subjects, the training pool has {}",
                    b.n_subjects, self.sampler.train_subjects
                ));
            }
        }
        Ok(())
    }
}

/// Mean training loss over an interval and the validation loss at its end.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HistoryRow {
    pub step: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub last: Checkpoint,
    /// Lowest validation loss seen by this trainer.
    pub best: Checkpoint,
    pub stopped_early: bool,
}

/// Training batches as a pure function of the step index.
struct Data {
    setup: RunSetup,
    sampler: Sampler,
}

impl Data {
    fn new(setup: &RunSetup) -> Result<Self> {
        let pool = setup.sampler.train_pool()?;
        let pool = match &setup.baseline {
            Some(b) => baseline_subset(&pool, b, &setup.sampler, setup.seed)?,
            None => pool,
        };
        Ok(Self {
            setup: setup.clone(),
            sampler: Sampler::new(Arc::new(pool), setup.sampler.clone())?,
        })
    }

    fn batch(&self, step: usize) -> Result<Batch<f32>> {
        let seed = rng::derive(self.setup.seed, &[STREAM_STEP, step as u64]);
        let mut r = rng::stream(seed, 0);
        let bs = self.setup.train.batch_size;
        match &self.setup.baseline {
            None => {
                let eps = self
                    .sampler
                    .sample_batch(bs, &mut r)?
                    .iter()
                    .enumerate()
                    .map(|(i, e)| {
                        apply_tree(e, &self.setup.augment, rng::derive(seed, &[i as u64]))
                    })
                    .collect::<Result<Vec<_>>>()?;
                Batch::from_episodes(&eps)
            }
            Some(b) => {
                let standard = AugTree::standard();
                let pairs = (0..bs)
                    .map(|i| {
                        let (p, info) = self.sampler.build_pair(b.task, &b.pins, &mut r)?;
                        augment_pair(&p, b.task, &info, &standard, rng::derive(seed, &[i as u64]))
                    })
                    .collect::<Result<Vec<_>>>()?;
                Batch::from_pairs(b.task, &pairs)
            }
        }
    }
}

/// The fixed training subjects of a baseline, drawn once from the run seed among
/// subjects that can host the task.
pub fn baseline_subset(
    pool: &SubjectPool,
    spec: &BaselineSpec,
    cfg: &SamplerConfig,
    seed: u64,
) -> Result<SubjectPool> {
    let eligible: Vec<_> = pool
        .subjects
        .iter()
        .filter(|s| {
            spec.task != TaskKind::SkullStripping
                || !cfg.phantom.skull_stripped.contains(&s.dataset_id)
        })
        .filter(|s| {
            spec.pins
                .classes
                .as_ref()
                .is_none_or(|c| c.iter().all(|&l| s.has_label(l)))
        })
        .collect();
    if eligible.len() < spec.n_subjects {
        return config_err(format!(
            "only {} training subjects can host the {} baseline, {} requested",
            eligible.len(),
            spec.task,
            spec.n_subjects
        ));
    }
    let mut r = rng::stream(rng::derive(seed, &[STREAM_SUBSET]), 0);
    let subjects = eligible
        .choose_multiple(&mut r, spec.n_subjects)
        .map(|s| (*s).clone())
        .collect();
    Ok(SubjectPool { subjects })
}

/// The fixed validation batches of a run, drawn from the validation subjects.
fn validation_batches(setup: &RunSetup) -> Result<Vec<Batch<f32>>> {
    let sampler = Sampler::new(Arc::new(setup.sampler.val_pool()?), setup.sampler.clone())?;
    let mut r = rng::stream(rng::derive(setup.seed, &[STREAM_VAL]), 0);
    let mut left = setup.train.val_episodes;
    let mut out = Vec::new();
    while left > 0 {
        let b = left.min(setup.train.batch_size);
        out.push(match &setup.baseline {
            None => Batch::from_episodes(&sampler.sample_batch(b, &mut r)?)?,
            Some(spec) => {
                let pairs = (0..b)
                    .map(|_| {
                        sampler
                            .build_pair(spec.task, &spec.pins, &mut r)
                            .map(|p| p.0)
                    })
                    .collect::<Result<Vec<_>>>()?;
                Batch::from_pairs(spec.task, &pairs)?
            }
        });
        left -= b;
    }
    Ok(out)
}

/// Mean loss of `model` over `batches`, weighted by batch size.
pub fn mean_loss(model: &Model<f32>, batches: &[Batch<f32>], cfg: &LossConfig) -> Result<f64> {
    let (mut total, mut n) = (0.0, 0usize);
    for b in batches {
        let pred = model.predict(&b.x, &b.ctx)?;
        let tape = Tape::new();
        let l = task_loss(&tape.constant(pred), &b.y, b.loss, cfg)?;
        let bs = b.x.shape()[0];
        total += l.value().item() as f64 * bs as f64;
        n += bs;
    }
    Ok(total / n.max(1) as f64)
}

struct State {
    model: Model<f32>,
    adam: AdamState<f32>,
    early: EarlyStop,
    history: Vec<HistoryRow>,
    task_counts: BTreeMap<TaskKind, u64>,
    step: usize,
    stopped_early: bool,
    best: Option<Checkpoint>,
}

/// Drives one run; can be checkpointed and resumed at any validation boundary.
pub struct Trainer {
    data: Data,
    val: Vec<Batch<f32>>,
    state: State,
}

impl Trainer {
    pub fn new(setup: RunSetup) -> Result<Self> {
        setup.validate()?;
        let model = Model::new(
            setup.kind(),
            &setup.model,
            rng::derive(setup.seed, &[STREAM_MODEL]),
        )?;
        let adam = AdamState::new(model.params().tensors(), setup.train.adam);
        Ok(Self {
            data: Data::new(&setup)?,
            val: validation_batches(&setup)?,
            state: State {
                model,
                adam,
                early: EarlyStop::new(setup.train.patience_epochs),
                history: Vec::new(),
                task_counts: BTreeMap::new(),
                step: 0,
                stopped_early: false,
                best: None,
            },
        })
    }

    /// Continue from the last checkpoint of a run. `best` is that run's best
    /// checkpoint, if kept.
    pub fn resume(last: Checkpoint, best: Option<Checkpoint>) -> Result<Self> {
        let setup = last.meta.setup.clone();
        setup.validate()?;
        if last.meta.kind != setup.kind() || last.meta.model != setup.model {
            return Err(Error::Checkpoint(
                "checkpoint model does not match its recorded setup".into(),
            ));
        }
        let m = last.meta.clone();
        Ok(Self {
            data: Data::new(&setup)?,
            val: validation_batches(&setup)?,
            state: State {
                model: last.model,
                adam: last.adam,
                early: m.early,
                history: m.history,
                task_counts: m.task_counts,
                step: m.rng.next_step,
                stopped_early: m.stopped_early,
                best,
            },
        })
    }

    pub fn setup(&self) -> &RunSetup {
        &self.data.setup
    }

    pub fn step(&self) -> usize {
        self.state.step
    }

    pub fn model(&self) -> &Model<f32> {
        &self.state.model
    }

    /// Extend or shorten the run.
    pub fn set_steps_max(&mut self, steps: usize) {
        self.data.setup.train.steps_max = steps;
    }

    /// The training batch used at `step`.
    pub fn batch(&self, step: usize) -> Result<Batch<f32>> {
        self.data.batch(step)
    }

    pub fn validation_loss(&self) -> Result<f64> {
        mean_loss(&self.state.model, &self.val, &self.data.setup.train.loss)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        snapshot(&self.state, &self.data.setup)
    }

    /// Train until `steps_max` or early stop. After each validation `on_validation`
    /// receives the current checkpoint and whether it is a new best.
    pub fn run(
        &mut self,
        mut on_validation: impl FnMut(&Checkpoint, bool) -> Result<()>,
    ) -> Result<TrainOutcome> {
        let cfg = self.data.setup.train.clone();
        let (start, end) = (self.state.step, cfg.steps_max);
        let data = &self.data;
        let val = &self.val;
        let state = &mut self.state;
        if !state.stopped_early && start < end {
            std::thread::scope(|sc| -> Result<()> {
                let k = cfg.workers;
                let queues: Vec<_> = (0..k.min(end - start))
                    .filter(|_| k > 1)
                    .map(|w| {
                        let (tx, rx) = mpsc::sync_channel(2);
                        sc.spawn(move || {
                            for s in (start + w..end).step_by(k) {
                                if tx.send(data.batch(s)).is_err() {
                                    break;
                                }
                            }
                        });
                        rx
                    })
                    .collect();
                let (mut acc, mut acc_n) = (0.0, 0usize);
                for step in start..end {
                    let batch = if queues.is_empty() {
                        data.batch(step)?
                    } else {
                        queues[(step - start) % k]
                            .recv()
                            .map_err(|_| Error::Data("batch worker exited".into()))??
                    };
                    let loss = train_step(&mut state.model, &mut state.adam, &batch, &cfg, step)?;
                    *state.task_counts.entry(batch.kind).or_default() += batch.x.shape()[0] as u64;
                    acc += loss;
                    acc_n += 1;
                    state.step = step + 1;
                    if state.step % cfg.val_interval != 0 && state.step != end {
                        continue;
                    }
                    let v = mean_loss(&state.model, val, &cfg.loss)?;
                    if !v.is_finite() {
                        return Err(Error::Diverged {
                            step,
                            detail: format!("validation loss is {v}"),
                        });
                    }
                    state.history.push(HistoryRow {
                        step: state.step,
                        train_loss: acc / acc_n as f64,
                        val_loss: v,
                    });
                    (acc, acc_n) = (0.0, 0);
                    let stop = state.early.update(v);
                    state.stopped_early = stop;
                    let ckpt = snapshot(state, &data.setup);
                    let improved = state.early.improved();
                    if improved {
                        state.best = Some(ckpt.clone());
                    }
                    on_validation(&ckpt, improved)?;
                    if stop {
                        break;
                    }
                }
                Ok(())
            })?;
        }
        let last = snapshot(&self.state, &self.data.setup);
        Ok(TrainOutcome {
            best: self.state.best.clone().unwrap_or_else(|| last.clone()),
            stopped_early: self.state.stopped_early,
            last,
        })
    }
}

/// Train a run from scratch without intermediate output.
pub fn train(setup: RunSetup) -> Result<TrainOutcome> {
    Trainer::new(setup)?.run(|_, _| Ok(()))
}

fn snapshot(state: &State, setup: &RunSetup) -> Checkpoint {
    Checkpoint {
        meta: CheckpointMeta {
            kind: state.model.kind(),
            model: state.model.config().clone(),
            step: state.step,
            best_val: state.early.best_val,
            early: state.early,
            stopped_early: state.stopped_early,
            adam: state.adam.config,
            adam_step: state.adam.step,
            rng: RngState {
                seed: setup.seed,
                next_step: state.step,
            },
            history: state.history.clone(),
            task_counts: state.task_counts.clone(),
            setup: setup.clone(),
        },
        model: state.model.clone(),
        adam: state.adam.clone(),
    }
}

/// One optimizer step; returns the batch loss.
fn train_step(
    model: &mut Model<f32>,
    adam: &mut AdamState<f32>,
    batch: &Batch<f32>,
    cfg: &TrainConfig,
    step: usize,
) -> Result<f64> {
    let tape = Tape::new();
    let p = model.params().bind(&tape, true);
    let x = tape.constant(batch.x.clone());
    let ctx = tape.constant(batch.ctx.clone());
    let pred = model.forward_on(&p, &x, &ctx)?;
    let loss = task_loss(&pred, &batch.y, batch.loss, &cfg.loss)?;
    let value = loss.value().item() as f64;
    if !value.is_finite() {
        return Err(Error::Diverged {
            step,
            detail: format!("{} loss is {value}", batch.kind),
        });
    }
    let mut g = tape.backward(&loss)?;
    let mut grads: Vec<Tensor<f32>> = p
        .iter()
        .map(|v| g.take(v).unwrap_or_else(|| Tensor::zeros(v.shape())))
        .collect();
    let norm = grads
        .iter()
        .flat_map(|t| t.data())
        .map(|&v| (v as f64) * (v as f64))
        .sum::<f64>()
        .sqrt();
    if !norm.is_finite() {
        return Err(Error::Diverged {
            step,
            detail: format!("{} gradient norm is {norm} at loss {value}", batch.kind),
        });
    }
    if let Some(max) = cfg.clip_norm {
        if norm > max {
            let s = (max / norm) as f32;
            grads
                .iter_mut()
                .for_each(|t| t.data_mut().iter_mut().for_each(|v| *v *= s));
        }
    }
    adam_step(model.params_mut().tensors_mut(), &grads, adam)?;
    Ok(value)
}
