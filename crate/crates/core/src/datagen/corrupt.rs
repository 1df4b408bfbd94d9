//! Image corruptions: additive noise, smooth bias fields, and k-space motion and
//! undersampling artifacts.

use num_complex::Complex64;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::fft::{fft2_real, ifft2_abs, ifft2_real};
use crate::error::{data_err, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptKind {
    Noise,
    Bias,
    Motion,
    Undersample,
}

impl std::str::FromStr for CorruptKind {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "noise" => Ok(Self::Noise),
            "bias" => Ok(Self::Bias),
            "motion" => Ok(Self::Motion),
            "undersample" => Ok(Self::Undersample),
            other => data_err(format!("unknown corruption kind {other:?}")),
        }
    }
}

/// Noise standard deviation at severity 1.
pub const NOISE_SIGMA_MAX: f64 = 0.2;
/// Fraction of k-space rows dropped at severity 1.
pub const UNDERSAMPLE_MAX: f64 = 0.6;

/// Corrupt a `[H, W]` image in `[0, 1]`. Severity 0 returns the input unchanged.
pub fn corrupt(
    img: &Tensor<f32>,
    kind: CorruptKind,
    severity: f64,
    rng: &mut impl Rng,
) -> Result<Tensor<f32>> {
    if img.rank() != 2 {
        return data_err(format!(
            "corrupt expects a [H, W] image, got {:?}",
            img.shape()
        ));
    }
    if !(0.0..=1.0).contains(&severity) {
        return data_err(format!("severity {severity} outside [0, 1]"));
    }
    if severity == 0.0 {
        return Ok(img.clone());
    }
    let (h, w) = (img.shape()[0], img.shape()[1]);
    let data = match kind {
        CorruptKind::Noise => {
            let noise = gaussian_noise(h * w, NOISE_SIGMA_MAX * severity, rng);
            img.data()
                .iter()
                .zip(noise)
                .map(|(&v, n)| (v + n).clamp(0.0, 1.0))
                .collect()
        }
        CorruptKind::Bias => bias_field(img.data(), h, w, severity, rng),
        CorruptKind::Motion => motion(img.data(), h, w, severity, rng)?,
        CorruptKind::Undersample => undersample(img.data(), h, w, severity, rng)?,
    };
    Ok(Tensor::new(vec![h, w], data)?)
}

/// `n` samples of `N(0, sigma^2)`.
pub fn gaussian_noise(n: usize, sigma: f64, rng: &mut impl Rng) -> Vec<f32> {
    let d = Normal::new(0.0, sigma.max(0.0)).expect("finite sigma");
    (0..n).map(|_| d.sample(rng) as f32).collect()
}

/// Multiply by `exp(p(u, v))` for a random quadratic `p`, then rescale so the maximum is kept.
fn bias_field(img: &[f32], h: usize, w: usize, severity: f64, rng: &mut impl Rng) -> Vec<f32> {
    let c: [f64; 5] = std::array::from_fn(|_| rng.random_range(-0.4..0.4) * severity);
    let mut out = Vec::with_capacity(img.len());
    for y in 0..h {
        let v = (y as f64 + 0.5) / h as f64 * 2.0 - 1.0;
        for x in 0..w {
            let u = (x as f64 + 0.5) / w as f64 * 2.0 - 1.0;
            let p = c[0] * u + c[1] * v + c[2] * u * u + c[3] * v * v + c[4] * u * v;
            out.push(img[y * w + x] * p.exp() as f32);
        }
    }
    let (old_max, new_max) = (max(img), max(&out));
    if new_max > 0.0 {
        let s = old_max / new_max;
        out.iter_mut().for_each(|v| *v = (*v * s).clamp(0.0, 1.0));
    }
    out
}

fn max(v: &[f32]) -> f32 {
    v.iter().copied().fold(0.0, f32::max)
}

/// Signed frequency of row index `k` in an `n`-point transform.
fn freq(k: usize, n: usize) -> i64 {
    if k <= n / 2 {
        k as i64
    } else {
        k as i64 - n as i64
    }
}

/// The object shifts by a random sub-pixel offset while about half of the
/// phase-encode rows are acquired: those rows get the matching linear phase ramp.
fn motion(img: &[f32], h: usize, w: usize, severity: f64, rng: &mut impl Rng) -> Result<Vec<f32>> {
    let mut spec = fft2_real(img, h, w)?;
    let max_shift = 3.0 * severity;
    let (dx, dy) = (
        rng.random_range(-max_shift..=max_shift),
        rng.random_range(-max_shift..=max_shift),
    );
    for ky in 0..h {
        if !rng.random_bool(0.5) {
            continue;
        }
        let fy = freq(ky, h) as f64 / h as f64;
        for kx in 0..w {
            let fx = freq(kx, w) as f64 / w as f64;
            let phase = -std::f64::consts::TAU * (fx * dx + fy * dy);
            spec[ky * w + kx] *= Complex64::from_polar(1.0, phase);
        }
    }
    Ok(ifft2_abs(spec, h, w)?
        .into_iter()
        .map(|v| v.clamp(0.0, 1.0))
        .collect())
}

/// Rows with `|f| <= h / 16` (at least the central 12.5%) are always kept.
pub fn central_rows(h: usize) -> usize {
    2 * (h / 16) + 1
}

/// Drop `round(0.6 * severity * h)` non-central k-space rows. Rows go in conjugate
/// pairs `(f, -f)` so the image stays real; the drop order is a seeded permutation,
/// so higher severities drop supersets of the rows dropped at lower ones.
fn undersample(
    img: &[f32],
    h: usize,
    w: usize,
    severity: f64,
    rng: &mut impl Rng,
) -> Result<Vec<f32>> {
    let mut spec = fft2_real(img, h, w)?;
    let keep = (h / 16) as i64;
    let mut pairs: Vec<i64> = ((keep + 1)..=(h as i64 / 2)).collect();
    pairs.shuffle(rng);
    let target = (UNDERSAMPLE_MAX * severity * h as f64).round() as usize;
    let mut dropped = 0;
    for f in pairs {
        if dropped >= target {
            break;
        }
        let rows: Vec<usize> = if 2 * f == h as i64 {
            vec![f as usize]
        } else {
            vec![f as usize, h - f as usize]
        };
        for &r in &rows {
            spec[r * w..(r + 1) * w]
                .iter_mut()
                .for_each(|v| *v = Complex64::default());
        }
        dropped += rows.len();
    }
    Ok(ifft2_real(spec, h, w)?
        .into_iter()
        .map(|v| v.clamp(0.0, 1.0))
        .collect())
}
