//! Resampling of single-channel row-major images.

/// Bilinear lookup at continuous pixel coordinates (pixel centres at integers),
/// clamping to the border.
pub fn sample_bilinear(img: &[f32], h: usize, w: usize, x: f64, y: f64) -> f32 {
    let x = x.clamp(0.0, (w - 1) as f64);
    let y = y.clamp(0.0, (h - 1) as f64);
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (tx, ty) = ((x - x0 as f64) as f32, (y - y0 as f64) as f32);
    let top = img[y0 * w + x0] * (1.0 - tx) + img[y0 * w + x1] * tx;
    let bottom = img[y1 * w + x0] * (1.0 - tx) + img[y1 * w + x1] * tx;
    top * (1.0 - ty) + bottom * ty
}

/// Nearest-neighbour lookup, clamping to the border.
pub fn sample_nearest<T: Copy>(img: &[T], h: usize, w: usize, x: f64, y: f64) -> T {
    let xi = x.round().clamp(0.0, (w - 1) as f64) as usize;
    let yi = y.round().clamp(0.0, (h - 1) as f64) as usize;
    img[yi * w + xi]
}

/// Mean over `f x f` blocks. `f` must divide both extents.
pub fn downsample_avg(img: &[f32], h: usize, w: usize, f: usize) -> Vec<f32> {
    assert!(
        f > 0 && h % f == 0 && w % f == 0,
        "factor {f} must divide {h}x{w}"
    );
    let (oh, ow) = (h / f, w / f);
    let mut out = vec![0.0f32; oh * ow];
    for y in 0..h {
        for x in 0..w {
            out[(y / f) * ow + x / f] += img[y * w + x];
        }
    }
    let s = 1.0 / (f * f) as f32;
    out.iter_mut().for_each(|v| *v *= s);
    out
}

/// Bilinear upsampling by `f` with aligned pixel centres.
pub fn upsample_bilinear(img: &[f32], h: usize, w: usize, f: usize) -> Vec<f32> {
    let (oh, ow) = (h * f, w * f);
    let mut out = Vec::with_capacity(oh * ow);
    for y in 0..oh {
        let sy = (y as f64 + 0.5) / f as f64 - 0.5;
        for x in 0..ow {
            let sx = (x as f64 + 0.5) / f as f64 - 0.5;
            out.push(sample_bilinear(img, h, w, sx, sy));
        }
    }
    out
}
