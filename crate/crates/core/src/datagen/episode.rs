use std::sync::Arc;

use rand::seq::IndexedRandom;
use rand::Rng;
use rand_distr::weighted::WeightedIndex;
use rand_distr::Distribution;
use serde::{Deserialize, Serialize};

use super::corrupt::{corrupt, CorruptKind};
use super::perlin::perlin_mask;
use super::phantom::{PhantomSubject, SubjectPool, N_MODALITIES, SEGMENTABLE};
use super::resample::{downsample_avg, upsample_bilinear};
use super::{sample_task_kind, ContextMode, SamplerConfig, TaskKind};
use crate::error::{data_err, Result};
use crate::losses::LossKind;
use crate::tensor::{Float, Tensor};

/// Number of input channels in the image encoding.
pub const INPUT_CHANNELS: usize = 3;

/// One (input, target) example together with the subject it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct Pair {
    /// `[3, H, W]`; unused channels are zero.
    pub input: Tensor<f32>,
    /// `[1, H, W]`.
    pub target: Tensor<f32>,
    pub subject_id: u64,
    pub dataset_id: usize,
    /// Modality shown in each leading input channel.
    pub modalities: Vec<usize>,
    /// Label map aligned with the images.
    pub seg_map: Vec<u8>,
}

/// Episode-level choices shared by the query and every context pair.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeInfo {
    pub mixing: ContextMode,
    /// Joined label classes of a segmentation target.
    pub classes: Vec<u8>,
    pub target_modality: Option<usize>,
    pub severity: Option<f64>,
    pub sr_factor: Option<usize>,
    /// Input channel holding the inpainting hole mask.
    pub mask_channel: Option<usize>,
}

/// A task instance: query pair plus the context set that defines the task.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub kind: TaskKind,
    pub loss: LossKind,
    pub query: Pair,
    pub context: Vec<Pair>,
    pub info: EpisodeInfo,
}

impl Episode {
    pub fn context_size(&self) -> usize {
        self.context.len()
    }

    pub fn image_size(&self) -> usize {
        self.query.input.shape()[1]
    }

    /// Keep the first `n` context pairs.
    pub fn truncated(&self, n: usize) -> Result<Episode> {
        if n == 0 || n > self.context.len() {
            return data_err(format!(
                "cannot truncate a context of {} to {n}",
                self.context.len()
            ));
        }
        let mut ep = self.clone();
        ep.context.truncate(n);
        Ok(ep)
    }

    pub fn pairs(&self) -> impl Iterator<Item = &Pair> {
        std::iter::once(&self.query).chain(&self.context)
    }

    pub fn pairs_mut(&mut self) -> impl Iterator<Item = &mut Pair> {
        std::iter::once(&mut self.query).chain(&mut self.context)
    }

    /// Shape and value checks: non-empty context, common size, binary mask targets.
    pub fn validate(&self) -> Result<()> {
        if self.context.is_empty() {
            return data_err("episode has an empty context");
        }
        let s = self.image_size();
        for p in self.pairs() {
            if p.input.shape() != [INPUT_CHANNELS, s, s]
                || p.target.shape() != [1, s, s]
                || p.seg_map.len() != s * s
            {
                return data_err(format!(
                    "pair shapes {:?} / {:?} do not match image size {s}",
                    p.input.shape(),
                    p.target.shape()
                ));
            }
            if self.loss == LossKind::Dice && p.target.data().iter().any(|&v| v != 0.0 && v != 1.0)
            {
                return data_err("mask target is not binary");
            }
        }
        Ok(())
    }
}

/// Network-ready tensors for a batch of episodes sharing task kind and context size.
#[derive(Debug, Clone)]
pub struct Batch<F> {
    pub kind: TaskKind,
    pub loss: LossKind,
    /// `[B, 3, H, W]`.
    pub x: Tensor<F>,
    /// `[N, B, 4, H, W]`: each context input with its target appended as a fourth channel.
    pub ctx: Tensor<F>,
    /// `[B, 1, H, W]`.
    pub y: Tensor<F>,
}

impl<F: Float> Batch<F> {
    pub fn from_episodes(eps: &[Episode]) -> Result<Self> {
        let Some(first) = eps.first() else {
            return data_err("empty batch");
        };
        let (n, s) = (first.context_size(), first.image_size());
        if eps
            .iter()
            .any(|e| e.kind != first.kind || e.context_size() != n || e.image_size() != s)
        {
            return data_err("batch episodes must share task kind, context size and image size");
        }
        let b = eps.len();
        let plane = s * s;
        let cast = |v: &[f32]| v.iter().map(|&x| F::c(x as f64)).collect::<Vec<F>>();
        let mut x = Vec::with_capacity(b * 3 * plane);
        let mut y = Vec::with_capacity(b * plane);
        for e in eps {
            x.extend(cast(e.query.input.data()));
            y.extend(cast(e.query.target.data()));
        }
        let mut ctx = Vec::with_capacity(n * b * 4 * plane);
        for j in 0..n {
            for e in eps {
                ctx.extend(cast(e.context[j].input.data()));
                ctx.extend(cast(e.context[j].target.data()));
            }
        }
        Ok(Self {
            kind: first.kind,
            loss: first.loss,
            x: Tensor::new(vec![b, 3, s, s], x)?,
            ctx: Tensor::new(vec![n, b, 4, s, s], ctx)?,
            y: Tensor::new(vec![b, 1, s, s], y)?,
        })
    }

    /// Context-free batch for the task-specific baselines; `ctx` has zero pairs.
    pub fn from_pairs(kind: TaskKind, pairs: &[Pair]) -> Result<Self> {
        let Some(first) = pairs.first() else {
            return data_err("empty batch");
        };
        let s = first.target.shape()[1];
        let inputs: Vec<Tensor<F>> = pairs.iter().map(|p| p.input.cast()).collect();
        let targets: Vec<Tensor<F>> = pairs.iter().map(|p| p.target.cast()).collect();
        Ok(Self {
            kind,
            loss: kind.loss_kind(),
            x: Tensor::stack(&inputs)?,
            ctx: Tensor::zeros(vec![0, pairs.len(), INPUT_CHANNELS + 1, s, s]),
            y: Tensor::stack(&targets)?,
        })
    }
}

/// Fixed episode-level choices, used to build evaluation episodes for a specific
/// class, modality or severity. Unset fields are sampled.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskPins {
    pub classes: Option<Vec<u8>>,
    /// Input modalities of the query (and of the context where those must match).
    pub modalities: Option<Vec<usize>>,
    pub target_modality: Option<usize>,
    pub mixing: Option<ContextMode>,
    pub severity: Option<f64>,
    pub sr_factor: Option<usize>,
}

/// Episode generator over a subject pool.
#[derive(Debug, Clone)]
pub struct Sampler {
    pool: Arc<SubjectPool>,
    cfg: SamplerConfig,
    by_dataset: Vec<Vec<usize>>,
}

impl Sampler {
    pub fn new(pool: Arc<SubjectPool>, cfg: SamplerConfig) -> Result<Self> {
        cfg.validate()?;
        let mut by_dataset = vec![Vec::new(); cfg.phantom.n_datasets];
        for (i, s) in pool.subjects.iter().enumerate() {
            if s.size != cfg.phantom.image_size || s.dataset_id >= by_dataset.len() {
                return data_err(format!(
                    "subject {} does not match the sampler's phantom config",
                    s.id
                ));
            }
            by_dataset[s.dataset_id].push(i);
        }
        Ok(Self {
            pool,
            cfg,
            by_dataset,
        })
    }

    pub fn config(&self) -> &SamplerConfig {
        &self.cfg
    }

    pub fn pool(&self) -> &SubjectPool {
        &self.pool
    }

    pub fn sample_kind(&self, rng: &mut impl Rng) -> Result<TaskKind> {
        sample_task_kind(&self.cfg.task_weights, &self.cfg.holdout, rng)
    }

    pub fn sample_context_size(&self, rng: &mut impl Rng) -> usize {
        rng.random_range(1..=self.cfg.context_max)
    }

    /// `batch_size` episodes sharing one sampled task kind and context size.
    pub fn sample_batch(&self, batch_size: usize, rng: &mut impl Rng) -> Result<Vec<Episode>> {
        let kind = self.sample_kind(rng)?;
        let n = self.sample_context_size(rng);
        (0..batch_size)
            .map(|_| self.build_episode(kind, n, rng))
            .collect()
    }

    pub fn build_episode(&self, kind: TaskKind, n: usize, rng: &mut impl Rng) -> Result<Episode> {
        self.build_pinned(kind, n, &TaskPins::default(), rng)
    }

    /// Datasets that can host `kind`: skull stripping needs images with a skull.
    fn valid_datasets(&self, kind: TaskKind) -> Vec<usize> {
        (0..self.by_dataset.len())
            .filter(|&d| !self.by_dataset[d].is_empty())
            .filter(|d| {
                kind != TaskKind::SkullStripping || !self.cfg.phantom.skull_stripped.contains(d)
            })
            .collect()
    }

    fn modalities(&self) -> Vec<usize> {
        (0..N_MODALITIES)
            .filter(|m| !self.cfg.holdout.modalities.contains(m))
            .collect()
    }

    /// Pick the input subject and `n` distinct context subjects, never reusing the input.
    fn pick_subjects(
        &self,
        kind: TaskKind,
        n: usize,
        mode: ContextMode,
        rng: &mut impl Rng,
    ) -> Result<(usize, Vec<usize>)> {
        let valid = self.valid_datasets(kind);
        let Some(&d0) = valid.choose(rng) else {
            return data_err(format!("no dataset can host {kind}"));
        };
        let q = *self.by_dataset[d0].choose(rng).expect("non-empty dataset");
        let sources: Vec<usize> = match mode {
            ContextMode::SameAsInput => vec![d0],
            ContextMode::Random => valid.clone(),
            ContextMode::ExcludeInput => valid.iter().copied().filter(|&d| d != d0).collect(),
        };
        let mut free: Vec<Vec<usize>> = sources
            .iter()
            .map(|&d| {
                self.by_dataset[d]
                    .iter()
                    .copied()
                    .filter(|&i| i != q)
                    .collect()
            })
            .collect();
        let available: usize = free.iter().map(Vec::len).sum();
        if available < n {
            return data_err(format!(
                "{kind} with {mode:?} context needs {n} subjects besides the input, pool offers {available}"
            ));
        }
        let mut ctx = Vec::with_capacity(n);
        while ctx.len() < n {
            let d = rng.random_range(0..free.len());
            if free[d].is_empty() {
                continue;
            }
            let j = rng.random_range(0..free[d].len());
            ctx.push(free[d].swap_remove(j));
        }
        Ok((q, ctx))
    }

    /// Build one episode; `pins` fix chosen episode-level parameters.
    pub fn build_pinned(
        &self,
        kind: TaskKind,
        n: usize,
        pins: &TaskPins,
        rng: &mut impl Rng,
    ) -> Result<Episode> {
        if n == 0 {
            return data_err("context size must be at least 1");
        }
        let mode = match pins.mixing {
            Some(m) => m,
            None => {
                let d = WeightedIndex::new(self.cfg.mixing_probs)
                    .expect("validated mixing probabilities");
                ContextMode::ALL[d.sample(rng)]
            }
        };
        let (q, ctx) = self.pick_subjects(kind, n, mode, rng)?;
        let (info, shared) = self.choices(kind, mode, pins, rng)?;
        let mut pairs = Vec::with_capacity(n + 1);
        for (j, &si) in std::iter::once(&q).chain(&ctx).enumerate() {
            let mods = self.pair_modalities(&shared, pins, j == 0, rng);
            pairs.push(self.make_pair(&self.pool.subjects[si], kind, &info, mods, rng)?);
        }
        let query = pairs.remove(0);
        let ep = Episode {
            kind,
            loss: kind.loss_kind(),
            query,
            context: pairs,
            info,
        };
        ep.validate()?;
        Ok(ep)
    }

    /// Episode-level choices: classes, transfer target, severity, resampling factor,
    /// and the input modalities shared by all pairs (empty when they vary per pair).
    fn choices(
        &self,
        kind: TaskKind,
        mode: ContextMode,
        pins: &TaskPins,
        rng: &mut impl Rng,
    ) -> Result<(EpisodeInfo, Vec<usize>)> {
        let mut info = EpisodeInfo {
            mixing: mode,
            classes: Vec::new(),
            target_modality: None,
            severity: None,
            sr_factor: None,
            mask_channel: None,
        };
        let avail = self.modalities();

        // Modalities shared across the episode (segmentation, modality transfer,
        // skull stripping); restoration tasks draw one modality per pair.
        let mut shared: Vec<usize> = Vec::new();
        match kind {
            TaskKind::Segmentation | TaskKind::SkullStripping | TaskKind::ModalityTransfer => {
                let mut pool = avail.clone();
                if kind == TaskKind::ModalityTransfer {
                    let t = match pins.target_modality {
                        Some(t) => t,
                        None => {
                            let choices: Vec<usize> = avail
                                .iter()
                                .copied()
                                .filter(|m| pins.modalities.as_ref().is_none_or(|p| !p.contains(m)))
                                .collect();
                            match choices.choose(rng) {
                                Some(&t) => t,
                                None => {
                                    return data_err("no modality left for the transfer target")
                                }
                            }
                        }
                    };
                    info.target_modality = Some(t);
                    pool.retain(|&m| m != t);
                }
                shared = match &pins.modalities {
                    Some(m) => m.clone(),
                    None => {
                        if pool.is_empty() {
                            return data_err(format!(
                                "holdout leaves no input modality for {kind}"
                            ));
                        }
                        let k = rng.random_range(1..=pool.len().min(INPUT_CHANNELS));
                        pool.choose_multiple(rng, k).copied().collect()
                    }
                };
                if shared.is_empty()
                    || shared.len() > INPUT_CHANNELS
                    || shared.iter().any(|&m| m >= N_MODALITIES)
                {
                    return data_err(format!("invalid input modalities {shared:?}"));
                }
                if info.target_modality.is_some_and(|t| shared.contains(&t)) {
                    return data_err("transfer target modality is also an input");
                }
            }
            _ => {
                if avail.is_empty() {
                    return data_err("holdout leaves no modality");
                }
                if let Some(m) = &pins.modalities {
                    if m.len() != 1 || m[0] >= N_MODALITIES {
                        return data_err(format!("{kind} takes one input modality, got {m:?}"));
                    }
                }
            }
        }
        if kind == TaskKind::Segmentation {
            info.classes = match &pins.classes {
                Some(c) => c.clone(),
                None => {
                    let classes: Vec<u8> = SEGMENTABLE
                        .iter()
                        .copied()
                        .filter(|c| !self.cfg.holdout.classes.contains(c))
                        .collect();
                    if classes.is_empty() {
                        return data_err("holdout removes every segmentation class");
                    }
                    let k = rng.random_range(1..=classes.len().min(3));
                    let mut c: Vec<u8> = classes.choose_multiple(rng, k).copied().collect();
                    c.sort_unstable();
                    c
                }
            };
            if info.classes.is_empty() {
                return data_err("segmentation needs at least one class");
            }
        }
        if kind.is_restoration() && kind != TaskKind::Inpainting {
            let [lo, hi] = self.cfg.severity_range;
            info.severity = Some(pins.severity.unwrap_or_else(|| {
                if lo < hi {
                    rng.random_range(lo..=hi)
                } else {
                    lo
                }
            }));
        }
        if kind == TaskKind::SuperResolution {
            info.sr_factor =
                Some(
                    pins.sr_factor
                        .unwrap_or_else(|| if rng.random_bool(0.5) { 2 } else { 4 }),
                );
        }
        if kind == TaskKind::Inpainting {
            info.mask_channel = Some(1);
        }

        Ok((info, shared))
    }

    fn pair_modalities(
        &self,
        shared: &[usize],
        pins: &TaskPins,
        query: bool,
        rng: &mut impl Rng,
    ) -> Vec<usize> {
        match (&pins.modalities, query) {
            _ if !shared.is_empty() => shared.to_vec(),
            (Some(m), true) => m.clone(),
            _ => vec![*self.modalities().choose(rng).expect("checked non-empty")],
        }
    }

    /// A single (input, target) pair from a random valid subject, for context-free
    /// models. Context mixing does not apply.
    pub fn build_pair(
        &self,
        kind: TaskKind,
        pins: &TaskPins,
        rng: &mut impl Rng,
    ) -> Result<(Pair, EpisodeInfo)> {
        let (info, shared) = self.choices(kind, ContextMode::SameAsInput, pins, rng)?;
        let valid = self.valid_datasets(kind);
        let Some(&d) = valid.choose(rng) else {
            return data_err(format!("no subject can host {kind}"));
        };
        let si = *self.by_dataset[d].choose(rng).expect("non-empty dataset");
        let mods = self.pair_modalities(&shared, pins, true, rng);
        let pair = self.make_pair(&self.pool.subjects[si], kind, &info, mods, rng)?;
        Ok((pair, info))
    }

    fn make_pair(
        &self,
        s: &PhantomSubject,
        kind: TaskKind,
        info: &EpisodeInfo,
        mods: Vec<usize>,
        rng: &mut impl Rng,
    ) -> Result<Pair> {
        let size = s.size;
        let plane = size * size;
        let mut input = vec![0.0f32; INPUT_CHANNELS * plane];
        let put = |input: &mut Vec<f32>, ch: usize, img: &[f32]| {
            input[ch * plane..(ch + 1) * plane].copy_from_slice(img)
        };
        let target: Vec<f32> = match kind {
            TaskKind::Segmentation | TaskKind::SkullStripping | TaskKind::ModalityTransfer => {
                for (ch, &m) in mods.iter().enumerate() {
                    put(&mut input, ch, s.modalities[m].data());
                }
                match kind {
                    TaskKind::Segmentation => s.label_mask(&info.classes).into_data(),
                    TaskKind::SkullStripping => s.brain_mask.data().to_vec(),
                    _ => s.modalities[info.target_modality.expect("set for transfer")]
                        .data()
                        .to_vec(),
                }
            }
            _ => {
                let clean = &s.modalities[mods[0]];
                let sev = info.severity.unwrap_or(0.0);
                let degraded: Vec<f32> = match kind {
                    TaskKind::SuperResolution => {
                        let f = info.sr_factor.expect("set for super-resolution");
                        let low = downsample_avg(clean.data(), size, size, f);
                        upsample_bilinear(&low, size / f, size / f, f)
                    }
                    TaskKind::MotionRecon => {
                        corrupt(clean, CorruptKind::Motion, sev, rng)?.into_data()
                    }
                    TaskKind::UndersampledRecon => {
                        corrupt(clean, CorruptKind::Undersample, sev, rng)?.into_data()
                    }
                    TaskKind::DenoiseBias => {
                        let biased = corrupt(clean, CorruptKind::Bias, sev, rng)?;
                        corrupt(&biased, CorruptKind::Noise, sev, rng)?.into_data()
                    }
                    TaskKind::Inpainting => {
                        let coverage = rng.random_range(0.1..=0.4);
                        let mask = perlin_mask(size, size, self.cfg.perlin_cell, coverage, rng)?;
                        put(&mut input, 1, mask.data());
                        clean
                            .data()
                            .iter()
                            .zip(mask.data())
                            .map(|(&v, &m)| v * (1.0 - m))
                            .collect()
                    }
                    _ => unreachable!("restoration kinds only"),
                };
                put(&mut input, 0, &degraded);
                clean.data().to_vec()
            }
        };
        Ok(Pair {
            input: Tensor::new(vec![INPUT_CHANNELS, size, size], input)?,
            target: Tensor::new(vec![1, size, size], target)?,
            subject_id: s.id,
            dataset_id: s.dataset_id,
            modalities: mods,
            seg_map: s.seg_map.clone(),
        })
    }
}
