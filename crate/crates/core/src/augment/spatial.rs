//! Geometric augmentations. A warp stores, for every output pixel, the source
//! coordinate it reads from.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::resample::{sample_bilinear, sample_nearest};
use crate::datagen::Pair;
use crate::error::{data_err, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Warp {
    pub h: usize,
    pub w: usize,
    /// `(x, y)` source coordinate per output pixel, row-major.
    pub src: Vec<(f64, f64)>,
}

impl Warp {
    pub fn identity(h: usize, w: usize) -> Self {
        let src = (0..h * w)
            .map(|i| ((i % w) as f64, (i / w) as f64))
            .collect();
        Self { h, w, src }
    }

    /// Rotation by `angle` radians and scaling about the image centre, then a shift by `(tx, ty)` pixels.
    pub fn affine(h: usize, w: usize, angle: f64, scale: f64, tx: f64, ty: f64) -> Self {
        let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
        let (c, s) = (angle.cos(), angle.sin());
        let src = (0..h * w)
            .map(|i| {
                let (x, y) = ((i % w) as f64 - cx - tx, (i / w) as f64 - cy - ty);
                ((c * x + s * y) / scale + cx, (-s * x + c * y) / scale + cy)
            })
            .collect();
        Self { h, w, src }
    }

    /// Smooth displacement field: a `g x g` grid of `(dx, dy)` spanning the image
    /// corners, bilinearly interpolated to every pixel.
    pub fn elastic(h: usize, w: usize, g: usize, grid: &[(f64, f64)]) -> Result<Self> {
        if g < 2 || grid.len() != g * g {
            return data_err(format!(
                "elastic grid needs g >= 2 and g*g offsets, got g={g}, {}",
                grid.len()
            ));
        }
        let gx: Vec<f32> = grid.iter().map(|d| d.0 as f32).collect();
        let gy: Vec<f32> = grid.iter().map(|d| d.1 as f32).collect();
        let fx = (g - 1) as f64 / (w.max(2) - 1) as f64;
        let fy = (g - 1) as f64 / (h.max(2) - 1) as f64;
        let src = (0..h * w)
            .map(|i| {
                let (x, y) = ((i % w) as f64, (i / w) as f64);
                let (u, v) = (x * fx, y * fy);
                (
                    x + sample_bilinear(&gx, g, g, u, v) as f64,
                    y + sample_bilinear(&gy, g, g, u, v) as f64,
                )
            })
            .collect();
        Ok(Self { h, w, src })
    }

    /// Mirror left to right.
    pub fn flip(h: usize, w: usize) -> Self {
        let src = (0..h * w)
            .map(|i| ((w - 1 - i % w) as f64, (i / w) as f64))
            .collect();
        Self { h, w, src }
    }

    pub fn apply_bilinear(&self, img: &[f32]) -> Vec<f32> {
        self.src
            .iter()
            .map(|&(x, y)| sample_bilinear(img, self.h, self.w, x, y))
            .collect()
    }

    pub fn apply_nearest<T: Copy>(&self, img: &[T]) -> Vec<T> {
        self.src
            .iter()
            .map(|&(x, y)| sample_nearest(img, self.h, self.w, x, y))
            .collect()
    }

    /// Warp every channel of a `[C, H, W]` tensor; channels in `nearest` use nearest lookup.
    pub fn apply_channels(&self, t: &Tensor<f32>, nearest: &[usize]) -> Result<Tensor<f32>> {
        let plane = self.h * self.w;
        if t.rank() != 3 || t.shape()[1] != self.h || t.shape()[2] != self.w {
            return data_err(format!(
                "warp of {}x{} cannot apply to {:?}",
                self.h,
                self.w,
                t.shape()
            ));
        }
        let mut out = Vec::with_capacity(t.numel());
        for (c, chunk) in t.data().chunks(plane).enumerate() {
            out.extend(if nearest.contains(&c) {
                self.apply_nearest(chunk)
            } else {
                self.apply_bilinear(chunk)
            });
        }
        Ok(Tensor::new(t.shape().to_vec(), out)?)
    }
}

/// Apply the same warp to a pair's input, target and label map. Mask targets and
/// the hole-mask channel use nearest lookup so they stay binary.
pub fn warp_pair(
    pair: &mut Pair,
    warp: &Warp,
    mask_target: bool,
    mask_channel: Option<usize>,
) -> Result<()> {
    let nearest: Vec<usize> = mask_channel.into_iter().collect();
    pair.input = warp.apply_channels(&pair.input, &nearest)?;
    pair.target = warp.apply_channels(&pair.target, if mask_target { &[0] } else { &[] })?;
    pair.seg_map = warp.apply_nearest(&pair.seg_map);
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AffineParams {
    pub max_rotation_deg: f64,
    pub max_translation: f64,
    pub scale_range: [f64; 2],
}

impl Default for AffineParams {
    fn default() -> Self {
        Self {
            max_rotation_deg: 10.0,
            max_translation: 3.0,
            scale_range: [0.9, 1.1],
        }
    }
}

impl AffineParams {
    pub fn sample(&self, h: usize, w: usize, rng: &mut impl Rng) -> Warp {
        let sym =
            |r: &mut dyn rand::RngCore, a: f64| if a > 0.0 { r.random_range(-a..=a) } else { 0.0 };
        let angle = sym(rng, self.max_rotation_deg).to_radians();
        let (tx, ty) = (
            sym(rng, self.max_translation),
            sym(rng, self.max_translation),
        );
        let [lo, hi] = self.scale_range;
        let scale = if hi > lo {
            rng.random_range(lo..=hi)
        } else {
            lo
        };
        Warp::affine(h, w, angle, scale, tx, ty)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ElasticParams {
    pub grid: usize,
    /// Maximum displacement in pixels per axis.
    pub amplitude: f64,
}

impl Default for ElasticParams {
    fn default() -> Self {
        Self {
            grid: 4,
            amplitude: 2.0,
        }
    }
}

impl ElasticParams {
    pub fn sample(&self, h: usize, w: usize, rng: &mut impl Rng) -> Result<Warp> {
        let a = self.amplitude.max(0.0);
        let grid: Vec<(f64, f64)> = (0..self.grid * self.grid)
            .map(|_| {
                if a > 0.0 {
                    (rng.random_range(-a..=a), rng.random_range(-a..=a))
                } else {
                    (0.0, 0.0)
                }
            })
            .collect();
        Warp::elastic(h, w, self.grid, &grid)
    }
}
