//! Gradient noise and the inpainting hole masks built from it.

use rand::Rng;

use crate::error::{data_err, Result};
use crate::tensor::Tensor;

fn fade(t: f64) -> f64 {
    t * t * t * (t * (t * 6.0 - 15.0) + 10.0)
}

/// Classic Perlin noise on an `h x w` grid: random unit gradients on a lattice with
/// spacing `cell`, dot products with the offset vectors, blended with the quintic fade.
pub fn perlin_noise(h: usize, w: usize, cell: usize, rng: &mut impl Rng) -> Result<Vec<f64>> {
    if cell == 0 || h == 0 || w == 0 || h % cell != 0 || w % cell != 0 {
        return data_err(format!("cell {cell} must divide the {h}x{w} grid"));
    }
    let (gh, gw) = (h / cell + 1, w / cell + 1);
    let grads: Vec<(f64, f64)> = (0..gh * gw)
        .map(|_| {
            let a = rng.random_range(0.0..std::f64::consts::TAU);
            (a.cos(), a.sin())
        })
        .collect();
    let dot = |gy: usize, gx: usize, dy: f64, dx: f64| {
        let (cx, cy) = grads[gy * gw + gx];
        cx * dx + cy * dy
    };
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        let fy = (y as f64 + 0.5) / cell as f64;
        let (y0, ty) = (fy.floor() as usize, fy.fract());
        for x in 0..w {
            let fx = (x as f64 + 0.5) / cell as f64;
            let (x0, tx) = (fx.floor() as usize, fx.fract());
            let n00 = dot(y0, x0, ty, tx);
            let n01 = dot(y0, x0 + 1, ty, tx - 1.0);
            let n10 = dot(y0 + 1, x0, ty - 1.0, tx);
            let n11 = dot(y0 + 1, x0 + 1, ty - 1.0, tx - 1.0);
            let (u, v) = (fade(tx), fade(ty));
            let top = n00 + u * (n01 - n00);
            let bottom = n10 + u * (n11 - n10);
            out.push(top + v * (bottom - top));
        }
    }
    Ok(out)
}

/// Binary `[h, w]` mask marking the `round(coverage * h * w)` pixels with the
/// largest noise values.
pub fn perlin_mask(
    h: usize,
    w: usize,
    cell: usize,
    coverage: f64,
    rng: &mut impl Rng,
) -> Result<Tensor<f32>> {
    if !(0.0..=1.0).contains(&coverage) {
        return data_err(format!("coverage {coverage} outside [0, 1]"));
    }
    let noise = perlin_noise(h, w, cell, rng)?;
    let k = (coverage * (h * w) as f64).round() as usize;
    let mut order: Vec<usize> = (0..h * w).collect();
    order.sort_by(|&a, &b| noise[b].total_cmp(&noise[a]));
    let mut mask = vec![0.0f32; h * w];
    for &i in &order[..k] {
        mask[i] = 1.0;
    }
    Ok(Tensor::new(vec![h, w], mask)?)
}
