//! Task and data augmentations, and the Compose/OneOf tree that applies them to
//! whole episodes.
//!
//! Every leaf keeps the episode coherent: mask augmentations change every target,
//! intensity and channel augmentations change every input with parameters shared
//! across the episode, and spatial augmentations warp each pair with its own
//! transform (input and target together).

pub mod ops;
pub mod spatial;

use rand::seq::SliceRandom;
use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::datagen::{Episode, EpisodeInfo, Pair, TaskKind};
use crate::error::{config_err, Result};
use crate::losses::LossKind;
use crate::rng;
use crate::tensor::Tensor;
use spatial::{warp_pair, AffineParams, ElasticParams, Warp};

/// A leaf augmentation with its parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aug {
    Sobel,
    IntensityMapping {
        #[serde(default = "default_bins")]
        n_bins: usize,
    },
    SyntheticModality,
    MaskContour,
    MaskDilate {
        #[serde(default = "one")]
        radius: usize,
    },
    MaskInvert,
    PermuteChannels,
    DuplicateChannels {
        #[serde(default = "half")]
        p: f64,
    },
    Affine(#[serde(default)] AffineParams),
    Elastic(#[serde(default)] ElasticParams),
    /// Each pair is mirrored left to right with probability `p`.
    Flip {
        #[serde(default = "half")]
        p: f64,
    },
}

fn default_bins() -> usize {
    8
}
fn one() -> usize {
    1
}
fn half() -> f64 {
    0.5
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AugGroup {
    Mask,
    Intensity,
    Channel,
    Spatial,
}

impl Aug {
    pub fn group(&self) -> AugGroup {
        match self {
            Aug::MaskContour | Aug::MaskDilate { .. } | Aug::MaskInvert => AugGroup::Mask,
            Aug::Sobel | Aug::IntensityMapping { .. } | Aug::SyntheticModality => {
                AugGroup::Intensity
            }
            Aug::PermuteChannels | Aug::DuplicateChannels { .. } => AugGroup::Channel,
            Aug::Affine(_) | Aug::Elastic(_) | Aug::Flip { .. } => AugGroup::Spatial,
        }
    }

    /// Whether this augmentation may run on episodes of `kind`.
    pub fn allowed_for(&self, kind: TaskKind) -> bool {
        match self {
            Aug::MaskContour | Aug::MaskDilate { .. } => kind != TaskKind::Inpainting,
            Aug::Sobel => kind != TaskKind::ModalityTransfer,
            Aug::SyntheticModality => kind != TaskKind::ModalityTransfer && !kind.is_restoration(),
            Aug::PermuteChannels | Aug::DuplicateChannels { .. } => kind != TaskKind::Inpainting,
            Aug::Flip { .. } => kind != TaskKind::Segmentation,
            _ => true,
        }
    }
}

/// Composition tree. `Compose` runs its children in order, `OneOf` runs one
/// uniformly chosen child; every node first passes its own gate `p`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum AugTree {
    Compose { p: f64, children: Vec<AugTree> },
    OneOf { p: f64, children: Vec<AugTree> },
    Leaf { p: f64, aug: Aug },
}

impl AugTree {
    pub fn leaf(p: f64, aug: Aug) -> Self {
        Self::Leaf { p, aug }
    }

    pub fn compose(p: f64, children: Vec<AugTree>) -> Self {
        Self::Compose { p, children }
    }

    pub fn one_of(p: f64, children: Vec<AugTree>) -> Self {
        Self::OneOf { p, children }
    }

    /// No-op tree.
    /// Spatial augmentations only: they change the data but never the input-output
    /// relation. Used for the task-specific baselines.
    pub fn standard() -> Self {
        Self::compose(
            1.0,
            vec![
                Self::leaf(0.5, Aug::Affine(AffineParams::default())),
                Self::leaf(0.5, Aug::Elastic(ElasticParams::default())),
                Self::leaf(0.5, Aug::Flip { p: 0.5 }),
            ],
        )
    }

    pub fn identity() -> Self {
        Self::compose(1.0, Vec::new())
    }

    pub fn p(&self) -> f64 {
        match self {
            Self::Compose { p, .. } | Self::OneOf { p, .. } | Self::Leaf { p, .. } => *p,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.p();
        if !(0.0..=1.0).contains(&p) {
            return config_err(format!("augmentation probability {p} outside [0, 1]"));
        }
        match self {
            Self::Compose { children, .. } | Self::OneOf { children, .. } => {
                children.iter().try_for_each(Self::validate)
            }
            Self::Leaf { aug, .. } => match aug {
                Aug::IntensityMapping { n_bins } if *n_bins < 2 => {
                    config_err("intensity_mapping needs n_bins >= 2")
                }
                Aug::DuplicateChannels { p } | Aug::Flip { p } if !(0.0..=1.0).contains(p) => {
                    config_err(format!("leaf probability {p} outside [0, 1]"))
                }
                Aug::Elastic(e) if e.grid < 2 => config_err("elastic grid must be at least 2"),
                Aug::Affine(a)
                    if !(a.scale_range[0] > 0.0 && a.scale_range[0] <= a.scale_range[1]) =>
                {
                    config_err(format!("bad affine scale range {:?}", a.scale_range))
                }
                _ => Ok(()),
            },
        }
    }

    /// Copy without the leaves `kind` does not allow. `OneOf` nodes choose among
    /// the surviving children only.
    pub fn pruned_for(&self, kind: TaskKind) -> Self {
        match self {
            Self::Compose { p, children } => Self::Compose {
                p: *p,
                children: prune_children(children, kind),
            },
            Self::OneOf { p, children } => Self::OneOf {
                p: *p,
                children: prune_children(children, kind),
            },
            Self::Leaf { aug, .. } if !aug.allowed_for(kind) => Self::identity(),
            leaf @ Self::Leaf { .. } => leaf.clone(),
        }
    }

    pub fn leaves(&self) -> Vec<&Aug> {
        match self {
            Self::Compose { children, .. } | Self::OneOf { children, .. } => {
                children.iter().flat_map(|c| c.leaves()).collect()
            }
            Self::Leaf { aug, .. } => vec![aug],
        }
    }
}

fn prune_children(children: &[AugTree], kind: TaskKind) -> Vec<AugTree> {
    children
        .iter()
        .filter(|c| !matches!(c, AugTree::Leaf { aug, .. } if !aug.allowed_for(kind)))
        .map(|c| c.pruned_for(kind))
        .collect()
}

impl Default for AugTree {
    /// Mask, intensity, channel and spatial groups, each optional.
    fn default() -> Self {
        use AugTree as T;
        T::compose(
            1.0,
            vec![
                T::compose(
                    0.5,
                    vec![
                        T::one_of(
                            0.5,
                            vec![
                                T::leaf(1.0, Aug::MaskContour),
                                T::leaf(1.0, Aug::MaskDilate { radius: 1 }),
                            ],
                        ),
                        T::leaf(0.5, Aug::MaskInvert),
                    ],
                ),
                T::one_of(
                    0.5,
                    vec![
                        T::leaf(1.0, Aug::Sobel),
                        T::leaf(1.0, Aug::IntensityMapping { n_bins: 8 }),
                        T::leaf(1.0, Aug::SyntheticModality),
                    ],
                ),
                T::compose(
                    0.5,
                    vec![
                        T::leaf(0.5, Aug::PermuteChannels),
                        T::leaf(0.5, Aug::DuplicateChannels { p: 0.5 }),
                    ],
                ),
                T::compose(
                    1.0,
                    vec![
                        T::leaf(0.5, Aug::Affine(AffineParams::default())),
                        T::leaf(0.5, Aug::Elastic(ElasticParams::default())),
                        T::leaf(0.5, Aug::Flip { p: 0.5 }),
                    ],
                ),
            ],
        )
    }
}

/// Interpret `tree` on `ep`, after pruning it for the episode's task. Deterministic
/// in `(ep, tree, seed)`. Returns the augmented episode and the applied leaves in order.
pub fn apply_tree_traced(ep: &Episode, tree: &AugTree, seed: u64) -> Result<(Episode, Vec<Aug>)> {
    tree.validate()?;
    let tree = tree.pruned_for(ep.kind);
    let mut r = rng::stream(seed, 0);
    let mut out = ep.clone();
    let mut trace = Vec::new();
    walk(&tree, &mut out, &mut r, &mut trace)?;
    out.validate()?;
    Ok((out, trace))
}

pub fn apply_tree(ep: &Episode, tree: &AugTree, seed: u64) -> Result<Episode> {
    apply_tree_traced(ep, tree, seed).map(|(e, _)| e)
}

/// Augment a lone pair as if it were the query of an episode.
pub fn augment_pair(
    pair: &Pair,
    kind: TaskKind,
    info: &EpisodeInfo,
    tree: &AugTree,
    seed: u64,
) -> Result<Pair> {
    let ep = Episode {
        kind,
        loss: kind.loss_kind(),
        query: pair.clone(),
        context: vec![pair.clone()],
        info: info.clone(),
    };
    Ok(apply_tree(&ep, tree, seed)?.query)
}

fn walk(node: &AugTree, ep: &mut Episode, r: &mut rng::Rng, trace: &mut Vec<Aug>) -> Result<()> {
    let fire = r.random::<f64>() < node.p();
    match node {
        AugTree::Compose { children, .. } => {
            if fire {
                for c in children {
                    walk(c, ep, r, trace)?;
                }
            }
        }
        AugTree::OneOf { children, .. } => {
            if fire && !children.is_empty() {
                let i = r.random_range(0..children.len());
                walk(&children[i], ep, r, trace)?;
            }
        }
        AugTree::Leaf { aug, .. } => {
            let leaf_seed = r.next_u64();
            if fire {
                apply_leaf(aug, ep, leaf_seed)?;
                trace.push(aug.clone());
            }
        }
    }
    Ok(())
}

/// Apply one augmentation to the whole episode.
pub fn apply_leaf(aug: &Aug, ep: &mut Episode, seed: u64) -> Result<()> {
    let mask_target = ep.loss == LossKind::Dice;
    let mask_channel = ep.info.mask_channel;
    let restoration = ep.kind.is_restoration();
    match aug.group() {
        AugGroup::Mask => {
            if !mask_target {
                return Ok(());
            }
            for p in ep.pairs_mut() {
                let t = p.target.clone().reshape(plane_shape(&p.target))?;
                let t = match aug {
                    Aug::MaskContour => ops::mask_contour(&t)?,
                    Aug::MaskDilate { radius } => ops::mask_dilate(&t, *radius)?,
                    _ => ops::mask_invert(&t)?,
                };
                p.target = t.reshape(p.target.shape().to_vec())?;
            }
        }
        AugGroup::Intensity => {
            // One parameter draw for the whole episode.
            let mut shared = rng::stream(seed, 0);
            let targets = match aug {
                Aug::IntensityMapping { n_bins } => ops::intensity_targets(*n_bins, &mut shared)?,
                _ => Vec::new(),
            };
            let stats = ops::synthetic_stats(&mut shared);
            let map = |img: &Tensor<f32>, seg: &[u8], r: &mut rng::Rng| -> Result<Tensor<f32>> {
                match aug {
                    Aug::Sobel => ops::sobel_filter(img),
                    Aug::IntensityMapping { .. } => ops::intensity_mapping_with(img, &targets),
                    _ => ops::synthetic_modality_with(seg, img, &stats, r),
                }
            };
            for (j, p) in ep.pairs_mut().enumerate() {
                let mut r = rng::stream(seed, 1 + j as u64);
                let s = p.input.shape()[1..].to_vec();
                let mut chans = p.input.unstack();
                let synthetic = matches!(aug, Aug::SyntheticModality);
                for (c, ch) in chans.iter_mut().enumerate() {
                    let skip = Some(c) == mask_channel
                        || ch.data().iter().all(|&v| v == 0.0)
                        || (synthetic && c > 0);
                    if !skip {
                        *ch = map(ch, &p.seg_map, &mut r)?;
                    }
                }
                p.input = Tensor::stack(&chans)?;
                if restoration {
                    let t = map(&p.target.clone().reshape(s)?, &p.seg_map, &mut r)?;
                    p.target = t.reshape(p.target.shape().to_vec())?;
                }
            }
        }
        AugGroup::Channel => {
            let mut shared = rng::stream(seed, 0);
            let mut perm: Vec<usize> = (0..ep.query.input.shape()[0]).collect();
            perm.shuffle(&mut shared);
            for p in ep.pairs_mut() {
                p.input = match aug {
                    Aug::PermuteChannels => ops::permute_channels(&p.input, &perm)?,
                    Aug::DuplicateChannels { p: prob } => {
                        let mut r = rng::stream(seed, 0);
                        ops::duplicate_channels(&p.input, *prob, &mut r)?
                    }
                    _ => unreachable!("channel group"),
                };
            }
        }
        AugGroup::Spatial => {
            let n = ep.image_size();
            for (j, p) in ep.pairs_mut().enumerate() {
                let mut r = rng::stream(seed, 1 + j as u64);
                let warp = match aug {
                    Aug::Affine(a) => a.sample(n, n, &mut r),
                    Aug::Elastic(e) => e.sample(n, n, &mut r)?,
                    Aug::Flip { p: prob } => {
                        if !r.random_bool(*prob) {
                            continue;
                        }
                        Warp::flip(n, n)
                    }
                    _ => unreachable!("spatial group"),
                };
                warp_pair(p, &warp, mask_target, mask_channel)?;
            }
        }
    }
    if let Some(c) = mask_channel {
        for p in ep.pairs_mut() {
            refill_holes(p, c)?;
        }
    }
    Ok(())
}

fn plane_shape(t: &Tensor<f32>) -> Vec<usize> {
    t.shape()[t.rank() - 2..].to_vec()
}

/// Inpainting input: channel 0 is the target with the holes of channel `c` blanked.
fn refill_holes(p: &mut Pair, c: usize) -> Result<()> {
    let plane = p.target.numel();
    let mut input = p.input.data().to_vec();
    for i in 0..plane {
        input[i] = p.target.data()[i] * (1.0 - input[c * plane + i]);
    }
    p.input = Tensor::new(p.input.shape().to_vec(), input)?;
    Ok(())
}
