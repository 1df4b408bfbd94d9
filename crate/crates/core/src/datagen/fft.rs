//! 2D FFT over row-major complex images, backed by `rustfft`.

use num_complex::Complex64;
use rustfft::FftPlanner;

use crate::error::{data_err, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Forward,
    /// Normalised by `1 / (h w)`, so it inverts [`Direction::Forward`].
    Inverse,
}

/// In-place 2D transform of an `h x w` row-major image. Both extents must be powers of two.
pub fn fft2(data: &mut [Complex64], h: usize, w: usize, dir: Direction) -> Result<()> {
    if !h.is_power_of_two() || !w.is_power_of_two() {
        return data_err(format!("fft2 needs power-of-two extents, got {h}x{w}"));
    }
    if data.len() != h * w {
        return data_err(format!(
            "fft2 buffer holds {} values, expected {}",
            data.len(),
            h * w
        ));
    }
    let mut planner = FftPlanner::<f64>::new();
    let (row, col) = match dir {
        Direction::Forward => (planner.plan_fft_forward(w), planner.plan_fft_forward(h)),
        Direction::Inverse => (planner.plan_fft_inverse(w), planner.plan_fft_inverse(h)),
    };
    row.process(data);
    let mut column = vec![Complex64::default(); h];
    for x in 0..w {
        for y in 0..h {
            column[y] = data[y * w + x];
        }
        col.process(&mut column);
        for y in 0..h {
            data[y * w + x] = column[y];
        }
    }
    if dir == Direction::Inverse {
        let s = 1.0 / (h * w) as f64;
        data.iter_mut().for_each(|v| *v *= s);
    }
    Ok(())
}

/// Forward transform of a real image.
pub fn fft2_real(img: &[f32], h: usize, w: usize) -> Result<Vec<Complex64>> {
    let mut buf: Vec<Complex64> = img.iter().map(|&v| Complex64::new(v as f64, 0.0)).collect();
    fft2(&mut buf, h, w, Direction::Forward)?;
    Ok(buf)
}

/// Inverse transform, keeping the real part.
pub fn ifft2_real(mut spec: Vec<Complex64>, h: usize, w: usize) -> Result<Vec<f32>> {
    fft2(&mut spec, h, w, Direction::Inverse)?;
    Ok(spec.iter().map(|c| c.re as f32).collect())
}

/// Inverse transform, keeping the magnitude.
pub fn ifft2_abs(mut spec: Vec<Complex64>, h: usize, w: usize) -> Result<Vec<f32>> {
    fft2(&mut spec, h, w, Direction::Inverse)?;
    Ok(spec.iter().map(|c| c.norm() as f32).collect())
}
