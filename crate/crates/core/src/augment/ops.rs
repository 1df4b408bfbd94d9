//! Single-image augmentation operators on `[H, W]` tensors.

use rand::seq::IndexedRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::datagen::phantom::{N_LABELS, PARENCHYMA};
use crate::error::{data_err, Result};
use crate::tensor::Tensor;

fn dims(img: &Tensor<f32>, op: &str) -> Result<(usize, usize)> {
    match img.shape() {
        [h, w] if *h > 0 && *w > 0 => Ok((*h, *w)),
        s => data_err(format!("{op} expects a non-empty [H, W] image, got {s:?}")),
    }
}

fn ensure_binary(mask: &Tensor<f32>, op: &str) -> Result<()> {
    if mask.data().iter().all(|&v| v == 0.0 || v == 1.0) {
        Ok(())
    } else {
        data_err(format!("{op} needs a binary mask"))
    }
}

/// Mirror an index into `0..n` without repeating the edge (`-1 -> 1`).
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - m }) as usize
}

/// Sobel gradient magnitude with reflect padding, scaled to a maximum of 1.
pub fn sobel_filter(img: &Tensor<f32>) -> Result<Tensor<f32>> {
    let (h, w) = dims(img, "sobel_filter")?;
    let d = img.data();
    let at = |y: isize, x: isize| d[reflect(y, h) * w + reflect(x, w)] as f64;
    let mut out = vec![0.0f64; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let gx = (at(y - 1, x + 1) + 2.0 * at(y, x + 1) + at(y + 1, x + 1))
                - (at(y - 1, x - 1) + 2.0 * at(y, x - 1) + at(y + 1, x - 1));
            let gy = (at(y + 1, x - 1) + 2.0 * at(y + 1, x) + at(y + 1, x + 1))
                - (at(y - 1, x - 1) + 2.0 * at(y - 1, x) + at(y - 1, x + 1));
            out[y as usize * w + x as usize] = (gx * gx + gy * gy).sqrt();
        }
    }
    let max = out.iter().copied().fold(0.0, f64::max);
    let s = if max > 0.0 { 1.0 / max } else { 0.0 };
    Ok(Tensor::new(
        vec![h, w],
        out.into_iter().map(|v| (v * s) as f32).collect(),
    )?)
}

/// Random targets for the `n_bins` evenly spaced knots of [`intensity_mapping_with`].
pub fn intensity_targets(n_bins: usize, rng: &mut impl Rng) -> Result<Vec<f32>> {
    if n_bins < 2 {
        return data_err(format!(
            "intensity mapping needs at least 2 bins, got {n_bins}"
        ));
    }
    Ok((0..n_bins)
        .map(|_| rng.random_range(0.0f32..=1.0))
        .collect())
}

/// Piecewise-linear remap: knot `j` sits at `j / (n - 1)` and maps to `targets[j]`.
/// Inputs are clamped to `[0, 1]` first.
pub fn intensity_mapping_with(img: &Tensor<f32>, targets: &[f32]) -> Result<Tensor<f32>> {
    let n = targets.len();
    if n < 2 {
        return data_err(format!("intensity mapping needs at least 2 bins, got {n}"));
    }
    let last = (n - 1) as f32;
    Ok(img.map(|v| {
        let pos = v.clamp(0.0, 1.0) * last;
        let j = (pos.floor() as usize).min(n - 2);
        let t = pos - j as f32;
        targets[j] * (1.0 - t) + targets[j + 1] * t
    }))
}

pub fn intensity_mapping(
    img: &Tensor<f32>,
    n_bins: usize,
    rng: &mut impl Rng,
) -> Result<Tensor<f32>> {
    dims(img, "intensity_mapping")?;
    let targets = intensity_targets(n_bins, rng)?;
    intensity_mapping_with(img, &targets)
}

/// Per-label mean and standard deviation of a synthetic contrast.
pub fn synthetic_stats(rng: &mut impl Rng) -> Vec<(f64, f64)> {
    (0..N_LABELS)
        .map(|_| (rng.random_range(0.05..=0.95), rng.random_range(0.01..=0.1)))
        .collect()
}

/// Draw a new contrast from the label map. When `orig` shows tissue outside the
/// brain (a skull), that part is kept from `orig`.
pub fn synthetic_modality_with(
    seg_map: &[u8],
    orig: &Tensor<f32>,
    stats: &[(f64, f64)],
    rng: &mut impl Rng,
) -> Result<Tensor<f32>> {
    let (h, w) = dims(orig, "synthetic_modality")?;
    if seg_map.len() != h * w {
        return data_err(format!(
            "label map has {} pixels, image {}",
            seg_map.len(),
            h * w
        ));
    }
    if let Some(l) = seg_map.iter().find(|&&l| l as usize >= stats.len()) {
        return data_err(format!("label {l} has no synthetic intensity"));
    }
    let brain = |l: u8| l >= PARENCHYMA;
    let has_skull = seg_map
        .iter()
        .zip(orig.data())
        .any(|(&l, &v)| !brain(l) && v != 0.0);
    let out = seg_map
        .iter()
        .zip(orig.data())
        .map(|(&l, &o)| {
            if has_skull && !brain(l) {
                return o;
            }
            let (mu, s) = stats[l as usize];
            let v = Normal::new(mu, s).expect("finite std").sample(rng);
            v.clamp(0.0, 1.0) as f32
        })
        .collect();
    Ok(Tensor::new(vec![h, w], out)?)
}

pub fn synthetic_modality(
    seg_map: &[u8],
    orig: &Tensor<f32>,
    rng: &mut impl Rng,
) -> Result<Tensor<f32>> {
    let stats = synthetic_stats(rng);
    synthetic_modality_with(seg_map, orig, &stats, rng)
}

/// One 3x3 dilation step.
fn dilate_once(m: &[f32], h: usize, w: usize) -> Vec<f32> {
    let mut out = m.to_vec();
    for y in 0..h {
        for x in 0..w {
            if m[y * w + x] != 1.0 {
                continue;
            }
            for yy in y.saturating_sub(1)..(y + 2).min(h) {
                for xx in x.saturating_sub(1)..(x + 2).min(w) {
                    out[yy * w + xx] = 1.0;
                }
            }
        }
    }
    out
}

pub fn mask_dilate(mask: &Tensor<f32>, radius: usize) -> Result<Tensor<f32>> {
    let (h, w) = dims(mask, "mask_dilate")?;
    ensure_binary(mask, "mask_dilate")?;
    let mut m = mask.data().to_vec();
    for _ in 0..radius {
        m = dilate_once(&m, h, w);
    }
    Ok(Tensor::new(vec![h, w], m)?)
}

/// Mask pixels with a 4-neighbour inside the image that is background, dilated once.
pub fn mask_contour(mask: &Tensor<f32>) -> Result<Tensor<f32>> {
    let (h, w) = dims(mask, "mask_contour")?;
    ensure_binary(mask, "mask_contour")?;
    let m = mask.data();
    let mut edge = vec![0.0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            if m[y * w + x] != 1.0 {
                continue;
            }
            let bg = (y > 0 && m[(y - 1) * w + x] == 0.0)
                || (y + 1 < h && m[(y + 1) * w + x] == 0.0)
                || (x > 0 && m[y * w + x - 1] == 0.0)
                || (x + 1 < w && m[y * w + x + 1] == 0.0);
            if bg {
                edge[y * w + x] = 1.0;
            }
        }
    }
    Ok(Tensor::new(vec![h, w], dilate_once(&edge, h, w))?)
}

pub fn mask_invert(mask: &Tensor<f32>) -> Result<Tensor<f32>> {
    ensure_binary(mask, "mask_invert")?;
    Ok(mask.map(|v| 1.0 - v))
}

/// Reorder the channels of a `[C, H, W]` image: output channel `i` is input channel `perm[i]`.
pub fn permute_channels(x: &Tensor<f32>, perm: &[usize]) -> Result<Tensor<f32>> {
    let c = x.shape().first().copied().unwrap_or(0);
    let mut seen = vec![false; c];
    if x.rank() != 3
        || perm.len() != c
        || !perm
            .iter()
            .all(|&p| p < c && !std::mem::replace(&mut seen[p], true))
    {
        return data_err(format!(
            "{perm:?} is not a permutation of the channels of {:?}",
            x.shape()
        ));
    }
    let plane = x.numel() / c;
    let d = x.data();
    let out = perm
        .iter()
        .flat_map(|&p| d[p * plane..(p + 1) * plane].iter().copied())
        .collect();
    Ok(Tensor::new(x.shape().to_vec(), out)?)
}

/// Each all-zero channel of a `[C, H, W]` image is, with probability `p`, replaced
/// by a copy of a uniformly chosen non-zero channel.
pub fn duplicate_channels(x: &Tensor<f32>, p: f64, rng: &mut impl Rng) -> Result<Tensor<f32>> {
    if x.rank() != 3 {
        return data_err(format!(
            "duplicate_channels expects [C, H, W], got {:?}",
            x.shape()
        ));
    }
    let c = x.shape()[0];
    let plane = x.numel() / c.max(1);
    let mut out = x.data().to_vec();
    let empty: Vec<bool> = (0..c)
        .map(|i| out[i * plane..(i + 1) * plane].iter().all(|&v| v == 0.0))
        .collect();
    let sources: Vec<usize> = (0..c).filter(|&i| !empty[i]).collect();
    if sources.is_empty() {
        return Ok(x.clone());
    }
    for i in (0..c).filter(|&i| empty[i]) {
        if rng.random_bool(p.clamp(0.0, 1.0)) {
            let s = *sources.choose(rng).expect("non-empty");
            out.copy_within(s * plane..(s + 1) * plane, i * plane);
        }
    }
    Ok(Tensor::new(x.shape().to_vec(), out)?)
}
