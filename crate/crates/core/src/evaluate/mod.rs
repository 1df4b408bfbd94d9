//! Inference, context-set bootstrapping, and the evaluation protocols: metric
//! against context size, seen against held-out models, Neuralizer against baselines.

pub mod pgm;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::augment::spatial::{AffineParams, Warp};
use crate::datagen::{Batch, Episode, Holdout, Sampler, SamplerConfig, TaskKind, TaskPins};
use crate::error::{config_err, data_err, Error, Result};
use crate::losses::{dice_coefficient, psnr, threshold_logits, LossKind};
use crate::model::{Model, ModelKind};
use crate::rng;
use crate::tensor::Tensor;
use crate::train::Checkpoint;

/// A model output made ready for scoring.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    /// Probabilities for mask tasks, intensities otherwise. `[B, 1, H, W]`.
    pub soft: Tensor<f32>,
    /// `soft >= 0.5` for mask tasks.
    pub mask: Option<Tensor<f32>>,
}

impl Prediction {
    /// What the metric sees: the mask when there is one.
    pub fn output(&self) -> &Tensor<f32> {
        self.mask.as_ref().unwrap_or(&self.soft)
    }
}

fn sigmoid(z: f32) -> f32 {
    1.0 / (1.0 + (-z).exp())
}

fn check_context(model: &Model<f32>, ctx: &Tensor<f32>) -> Result<()> {
    if model.kind() == ModelKind::Neuralizer && ctx.shape().first().is_none_or(|&n| n == 0) {
        return data_err("inference needs a non-empty context set");
    }
    Ok(())
}

/// A single forward pass. `x` is `[B, 3, H, W]`, `ctx` is `[N, B, 4, H, W]`.
pub fn infer(
    model: &Model<f32>,
    x: &Tensor<f32>,
    ctx: &Tensor<f32>,
    loss: LossKind,
) -> Result<Prediction> {
    check_context(model, ctx)?;
    let out = model.predict(x, ctx)?;
    Ok(match loss {
        LossKind::Dice => Prediction {
            mask: Some(threshold_logits(&out)),
            soft: out.map(sigmoid),
        },
        LossKind::Mse => Prediction {
            soft: out,
            mask: None,
        },
    })
}

/// Range of the small affine perturbation applied to resampled context pairs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Jitter {
    pub max_rotation_deg: f64,
    pub max_shift: f64,
}

impl Default for Jitter {
    fn default() -> Self {
        Self {
            max_rotation_deg: 2.0,
            max_shift: 2.0,
        }
    }
}

/// One bootstrap draw: which context pairs to use, and the warp applied to each.
#[derive(Debug, Clone)]
pub struct Replicate {
    pub indices: Vec<usize>,
    pub warps: Vec<Warp>,
}

impl Replicate {
    /// The original context, unwarped.
    pub fn identity(n: usize, size: usize) -> Self {
        Self {
            indices: (0..n).collect(),
            warps: vec![Warp::identity(size, size); n],
        }
    }

    /// `n` draws with replacement from `0..n`, each jittered.
    pub fn sample(n: usize, size: usize, jitter: &Jitter, rng: &mut impl Rng) -> Self {
        let affine = AffineParams {
            max_rotation_deg: jitter.max_rotation_deg,
            max_translation: jitter.max_shift,
            scale_range: [1.0, 1.0],
        };
        let indices: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
        let warps = indices
            .iter()
            .map(|_| affine.sample(size, size, rng))
            .collect();
        Self { indices, warps }
    }

    /// The resampled, warped context. Mask targets keep nearest lookup.
    fn apply(&self, ctx: &Tensor<f32>, loss: LossKind) -> Result<Tensor<f32>> {
        let s = ctx.shape();
        let (n, b) = (s[0], s[1]);
        if self.indices.iter().any(|&i| i >= n) || self.warps.len() != self.indices.len() {
            return data_err(format!("bootstrap replicate does not fit a context of {n}"));
        }
        let pair_len: usize = s[2..].iter().product();
        let pair_shape = s[2..].to_vec();
        let target_channel = [s[2] - 1];
        let nearest: &[usize] = match loss {
            LossKind::Dice => &target_channel,
            LossKind::Mse => &[],
        };
        let mut out = Vec::with_capacity(self.indices.len() * b * pair_len);
        for (&i, warp) in self.indices.iter().zip(&self.warps) {
            for j in 0..b {
                let off = (i * b + j) * pair_len;
                let pair =
                    Tensor::new(pair_shape.clone(), ctx.data()[off..off + pair_len].to_vec())?;
                out.extend_from_slice(warp.apply_channels(&pair, nearest)?.data());
            }
        }
        let mut shape = s.to_vec();
        shape[0] = self.indices.len();
        Ok(Tensor::new(shape, out)?)
    }
}

/// Average the soft predictions of the given replicates; mask tasks threshold
/// after averaging.
pub fn bootstrap_average(
    model: &Model<f32>,
    x: &Tensor<f32>,
    ctx: &Tensor<f32>,
    loss: LossKind,
    replicates: &[Replicate],
) -> Result<Prediction> {
    if replicates.is_empty() {
        return data_err("bootstrap needs at least one replicate");
    }
    check_context(model, ctx)?;
    let mut sum: Option<Vec<f64>> = None;
    let mut shape = Vec::new();
    for rep in replicates {
        let p = infer(model, x, &rep.apply(ctx, loss)?, loss)?;
        shape = p.soft.shape().to_vec();
        let acc = sum.get_or_insert_with(|| vec![0.0; p.soft.numel()]);
        acc.iter_mut()
            .zip(p.soft.data())
            .for_each(|(a, &v)| *a += v as f64);
    }
    let k = replicates.len() as f64;
    let soft = Tensor::new(
        shape,
        sum.expect("non-empty")
            .iter()
            .map(|&v| (v / k) as f32)
            .collect(),
    )?;
    let mask = (loss == LossKind::Dice).then(|| soft.map(|v| if v >= 0.5 { 1.0 } else { 0.0 }));
    Ok(Prediction { soft, mask })
}

/// `b` forward passes over contexts resampled with replacement and jittered.
pub fn infer_bootstrap(
    model: &Model<f32>,
    x: &Tensor<f32>,
    ctx: &Tensor<f32>,
    loss: LossKind,
    b: usize,
    jitter: &Jitter,
    rng: &mut impl Rng,
) -> Result<Prediction> {
    if b == 0 {
        return data_err("bootstrap count must be at least 1");
    }
    check_context(model, ctx)?;
    let (n, size) = (ctx.shape()[0], x.shape()[3]);
    let reps: Vec<Replicate> = (0..b)
        .map(|_| Replicate::sample(n, size, jitter, rng))
        .collect();
    bootstrap_average(model, x, ctx, loss, &reps)
}

/// A task variant to evaluate. Unpinned choices vary per episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalTask {
    pub kind: TaskKind,
    #[serde(default)]
    pub pins: TaskPins,
}

impl EvalTask {
    pub fn new(kind: TaskKind) -> Self {
        Self {
            kind,
            pins: TaskPins::default(),
        }
    }

    pub fn with_classes(mut self, classes: Vec<u8>) -> Self {
        self.pins.classes = Some(classes);
        self
    }

    /// Report label, e.g. `segmentation[classes=3]`.
    pub fn label(&self) -> String {
        let p = &self.pins;
        let join = |v: &[usize]| {
            v.iter()
                .map(|x| x.to_string())
                .collect::<Vec<_>>()
                .join("+")
        };
        let mut parts = Vec::new();
        if let Some(c) = &p.classes {
            let c: Vec<usize> = c.iter().map(|&x| x as usize).collect();
            parts.push(format!("classes={}", join(&c)));
        }
        if let Some(m) = &p.modalities {
            parts.push(format!("modalities={}", join(m)));
        }
        if let Some(t) = p.target_modality {
            parts.push(format!("target={t}"));
        }
        if let Some(m) = p.mixing {
            parts.push(format!("mixing={}", serde_json::to_value(m).expect("enum")));
        }
        if let Some(s) = p.severity {
            parts.push(format!("severity={s}"));
        }
        if let Some(f) = p.sr_factor {
            parts.push(format!("factor={f}"));
        }
        if parts.is_empty() {
            self.kind.to_string()
        } else {
            format!("{}[{}]", self.kind, parts.join(";").replace('"', ""))
        }
    }

    pub fn metric(&self) -> MetricKind {
        match self.kind.loss_kind() {
            LossKind::Dice => MetricKind::Dice,
            LossKind::Mse => MetricKind::Psnr,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    Dice,
    Psnr,
}

impl MetricKind {
    pub fn name(self) -> &'static str {
        match self {
            MetricKind::Dice => "dice",
            MetricKind::Psnr => "psnr",
        }
    }

    pub fn score(self, pred: &Tensor<f32>, target: &Tensor<f32>) -> Result<f64> {
        Ok(match self {
            MetricKind::Dice => dice_coefficient(pred, target)?,
            MetricKind::Psnr => psnr(pred, target)?,
        })
    }
}

/// Evaluation protocol settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub sizes: Vec<usize>,
    pub episodes_per_cell: usize,
    pub seed: u64,
    /// Bootstrap replicates per prediction; 0 uses a single plain pass.
    pub bootstrap: usize,
    pub jitter: Jitter,
    pub tasks: Vec<EvalTask>,
    /// Episodes per task written as PGM montages.
    pub dump_episodes: usize,
    /// Models evaluated in parallel.
    pub workers: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            sizes: vec![1, 2, 4, 8],
            episodes_per_cell: 50,
            seed: 12345,
            bootstrap: 0,
            jitter: Jitter::default(),
            tasks: TaskKind::ALL.iter().map(|&k| EvalTask::new(k)).collect(),
            dump_episodes: 0,
            workers: 1,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sizes.is_empty() || self.sizes.contains(&0) {
            return config_err("eval.sizes must be non-empty and positive");
        }
        if self.episodes_per_cell < 20 {
            return config_err(format!(
                "eval.episodes_per_cell must be at least 20, got {}",
                self.episodes_per_cell
            ));
        }
        if self.tasks.is_empty() {
            return config_err("eval.tasks is empty");
        }
        if self.workers == 0 {
            return config_err("eval.workers must be at least 1");
        }
        Ok(())
    }

    fn max_size(&self) -> usize {
        self.sizes.iter().copied().max().unwrap_or(1)
    }
}

/// Evaluation episodes for `task`: `count` test-set episodes with `n_max` context
/// pairs each. Smaller context sizes use a prefix, so every size sees the same queries.
pub fn eval_episodes(
    sampler_cfg: &SamplerConfig,
    task: &EvalTask,
    n_max: usize,
    count: usize,
    seed: u64,
) -> Result<Vec<Episode>> {
    let cfg = SamplerConfig {
        holdout: Holdout::default(),
        ..sampler_cfg.clone()
    };
    let sampler = Sampler::new(Arc::new(cfg.test_pool()?), cfg)?;
    let mut r = rng::stream(rng::derive(seed, &[task.kind.index() as u64]), 0);
    (0..count)
        .map(|_| sampler.build_pinned(task.kind, n_max, &task.pins, &mut r))
        .collect()
}

/// A model entry in a report.
#[derive(Debug, Clone)]
pub enum Evaluated {
    /// Evaluated at each context size.
    Neuralizer {
        id: String,
        model: Model<f32>,
        holdout: Holdout,
    },
    /// Task-specific models keyed by training-set size; replicates are averaged.
    Baselines {
        id: String,
        task: EvalTask,
        by_n: BTreeMap<usize, Vec<Model<f32>>>,
    },
}

impl Evaluated {
    pub fn id(&self) -> &str {
        match self {
            Evaluated::Neuralizer { id, .. } | Evaluated::Baselines { id, .. } => id,
        }
    }

    pub fn neuralizer(id: impl Into<String>, ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.meta.kind != ModelKind::Neuralizer {
            return config_err("expected a Neuralizer checkpoint");
        }
        Ok(Evaluated::Neuralizer {
            id: id.into(),
            model: ckpt.model.clone(),
            holdout: ckpt.meta.setup.sampler.holdout.clone(),
        })
    }

    /// Group baseline checkpoints of one task variant by training-set size.
    pub fn baselines(id: impl Into<String>, ckpts: &[Checkpoint]) -> Result<Self> {
        let mut by_n: BTreeMap<usize, Vec<Model<f32>>> = BTreeMap::new();
        let mut task: Option<EvalTask> = None;
        for c in ckpts {
            let Some(spec) = &c.meta.setup.baseline else {
                return config_err("expected a baseline checkpoint");
            };
            let t = EvalTask {
                kind: spec.task,
                pins: spec.pins.clone(),
            };
            if task.as_ref().is_some_and(|prev| *prev != t) {
                return config_err("baseline checkpoints of one entry must share a task");
            }
            task = Some(t);
            by_n.entry(spec.n_subjects)
                .or_default()
                .push(c.model.clone());
        }
        let Some(task) = task else {
            return config_err("no baseline checkpoints given");
        };
        Ok(Evaluated::Baselines {
            id: id.into(),
            task,
            by_n,
        })
    }

    fn image_size(&self) -> Option<usize> {
        match self {
            Evaluated::Neuralizer { model, .. } => Some(model.config().image_size),
            Evaluated::Baselines { by_n, .. } => by_n
                .values()
                .flatten()
                .next()
                .map(|m| m.config().image_size),
        }
    }
}

/// One report cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub model: String,
    pub task: String,
    pub holdout: bool,
    /// Context size for the Neuralizer, training subjects for baselines.
    pub n: usize,
    pub metric: MetricKind,
    pub mean: f64,
    pub std: f64,
    pub n_episodes: usize,
    /// Per-episode scores, in episode order.
    #[serde(skip)]
    pub scores: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<ReportRow>,
}

impl EvalReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("model,task,holdout,n,metric,mean,std,n_episodes\n");
        for r in &self.rows {
            writeln!(
                s,
                "{},{},{},{},{},{:.6},{:.6},{}",
                r.model,
                r.task,
                r.holdout,
                r.n,
                r.metric.name(),
                r.mean,
                r.std,
                r.n_episodes
            )
            .expect("string write");
        }
        s
    }

    pub fn find(&self, model: &str, task: &str, n: usize) -> Option<&ReportRow> {
        self.rows
            .iter()
            .find(|r| r.model == model && r.task == task && r.n == n)
    }
}

/// Mean and sample standard deviation.
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, 0.0);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

const EVAL_BATCH: usize = 8;

/// Per-episode scores of one model on `eps`, truncated to context size `n`.
pub fn score_episodes(
    model: &Model<f32>,
    eps: &[Episode],
    n: usize,
    metric: MetricKind,
    bootstrap: usize,
    jitter: &Jitter,
    seed: u64,
) -> Result<Vec<f64>> {
    let mut scores = Vec::with_capacity(eps.len());
    for (ci, chunk) in eps.chunks(EVAL_BATCH).enumerate() {
        let cut = chunk
            .iter()
            .map(|e| e.truncated(n))
            .collect::<Result<Vec<_>>>()?;
        let batch = Batch::<f32>::from_episodes(&cut)?;
        let pred = predict_batch(
            model,
            &batch,
            bootstrap,
            jitter,
            rng::derive(seed, &[ci as u64]),
        )?;
        let preds = pred.output().unstack();
        for (p, t) in preds.iter().zip(batch.y.unstack()) {
            scores.push(metric.score(p, &t)?);
        }
    }
    Ok(scores)
}

/// Plain or bootstrapped prediction on a batch. Baselines always use one pass.
pub fn predict_batch(
    model: &Model<f32>,
    batch: &Batch<f32>,
    bootstrap: usize,
    jitter: &Jitter,
    seed: u64,
) -> Result<Prediction> {
    if bootstrap == 0 || model.kind() == ModelKind::Baseline {
        infer(model, &batch.x, &batch.ctx, batch.loss)
    } else {
        let mut r = rng::stream(seed, 0);
        infer_bootstrap(
            model, &batch.x, &batch.ctx, batch.loss, bootstrap, jitter, &mut r,
        )
    }
}

fn check_size(models: &[Evaluated], sampler_cfg: &SamplerConfig) -> Result<()> {
    let want = sampler_cfg.phantom.image_size;
    for m in models {
        if let Some(s) = m.image_size() {
            if s != want {
                return config_err(format!(
                    "model {} was built for {s}x{s} images, evaluation uses {want}x{want}",
                    m.id()
                ));
            }
        }
    }
    Ok(())
}

fn row(model: &str, task: &EvalTask, holdout: bool, n: usize, scores: Vec<f64>) -> ReportRow {
    let (mean, std) = mean_std(&scores);
    ReportRow {
        model: model.to_string(),
        task: task.label(),
        holdout,
        n,
        metric: task.metric(),
        mean,
        std,
        n_episodes: scores.len(),
        scores,
    }
}

fn eval_model(
    m: &Evaluated,
    cfg: &EvalConfig,
    episodes: &[(EvalTask, Vec<Episode>)],
) -> Result<Vec<ReportRow>> {
    let mut rows = Vec::new();
    for (task, eps) in episodes {
        let metric = task.metric();
        match m {
            Evaluated::Neuralizer { id, model, holdout } => {
                for &n in &cfg.sizes {
                    let s = score_episodes(
                        model,
                        eps,
                        n,
                        metric,
                        cfg.bootstrap,
                        &cfg.jitter,
                        cfg.seed,
                    )?;
                    rows.push(row(id, task, holdout.covers(task.kind, &task.pins), n, s));
                }
            }
            Evaluated::Baselines { id, task: bt, by_n } => {
                if bt != task {
                    continue;
                }
                for &n in &cfg.sizes {
                    let Some(reps) = by_n.get(&n) else {
                        return config_err(format!(
                            "baseline {id} has no checkpoint trained on {n} subjects"
                        ));
                    };
                    let mut avg = vec![0.0; eps.len()];
                    for model in reps {
                        let s = score_episodes(model, eps, 1, metric, 0, &cfg.jitter, cfg.seed)?;
                        avg.iter_mut().zip(s).for_each(|(a, v)| *a += v);
                    }
                    avg.iter_mut().for_each(|a| *a /= reps.len() as f64);
                    rows.push(row(id, task, false, n, avg));
                }
            }
        }
    }
    Ok(rows)
}

/// Metric against context size (or training-set size for baselines). All models
/// see the same episodes; rows are ordered by model, task, then size.
pub fn eval_curves(
    models: &[Evaluated],
    sampler_cfg: &SamplerConfig,
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    cfg.validate()?;
    check_size(models, sampler_cfg)?;
    let episodes = cfg
        .tasks
        .iter()
        .map(|t| {
            eval_episodes(
                sampler_cfg,
                t,
                cfg.max_size(),
                cfg.episodes_per_cell,
                cfg.seed,
            )
            .map(|e| (t.clone(), e))
        })
        .collect::<Result<Vec<_>>>()?;
    let per_model: Vec<Result<Vec<ReportRow>>> = if cfg.workers <= 1 {
        models
            .iter()
            .map(|m| eval_model(m, cfg, &episodes))
            .collect()
    } else {
        let next = std::sync::atomic::AtomicUsize::new(0);
        let slots: Vec<std::sync::Mutex<Option<Result<Vec<ReportRow>>>>> =
            models.iter().map(|_| Default::default()).collect();
        std::thread::scope(|sc| {
            for _ in 0..cfg.workers.min(models.len()) {
                sc.spawn(|| loop {
                    let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                    let Some(m) = models.get(i) else { break };
                    *slots[i].lock().expect("slot") = Some(eval_model(m, cfg, &episodes));
                });
            }
        });
        slots
            .into_iter()
            .map(|s| s.into_inner().expect("slot").expect("evaluated"))
            .collect()
    };
    let mut rows = Vec::new();
    for r in per_model {
        rows.extend(r?);
    }
    Ok(EvalReport { rows })
}

/// Seen against held-out performance on one task variant.
#[derive(Debug, Clone)]
pub struct HoldoutComparison {
    pub report: EvalReport,
    /// `(n, seen mean - unseen mean)` per context size.
    pub gaps: Vec<(usize, f64)>,
}

/// Compare a model trained with everything against one trained without `task`.
/// Both see identical episodes of the held-out task only.
pub fn holdout_compare(
    seen: &Checkpoint,
    unseen: &Checkpoint,
    task: &EvalTask,
    sampler_cfg: &SamplerConfig,
    cfg: &EvalConfig,
) -> Result<HoldoutComparison> {
    let seen_h = &seen.meta.setup.sampler.holdout;
    let unseen_h = &unseen.meta.setup.sampler.holdout;
    if seen_h.covers(task.kind, &task.pins) {
        return Err(Error::Config(format!(
            "the seen model was trained without {} (holdout {seen_h})",
            task.label()
        )));
    }
    if !unseen_h.is_empty() && !unseen_h.covers(task.kind, &task.pins) {
        return Err(Error::Config(format!(
            "the unseen model's holdout {unseen_h} does not cover {}",
            task.label()
        )));
    }
    let models = [
        Evaluated::neuralizer("seen", seen)?,
        Evaluated::neuralizer("unseen", unseen)?,
    ];
    let cfg = EvalConfig {
        tasks: vec![task.clone()],
        ..cfg.clone()
    };
    let report = eval_curves(&models, sampler_cfg, &cfg)?;
    let label = task.label();
    let gaps = cfg
        .sizes
        .iter()
        .map(|&n| {
            let s = report.find("seen", &label, n).expect("row").mean;
            let u = report.find("unseen", &label, n).expect("row").mean;
            (n, s - u)
        })
        .collect();
    Ok(HoldoutComparison { report, gaps })
}
