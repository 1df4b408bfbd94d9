//! Grayscale PGM previews and episode montages.

use std::io::Write;
use std::path::Path;

use crate::datagen::Episode;
use crate::error::{data_err, Result};
use crate::tensor::Tensor;

/// A grayscale canvas with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub h: usize,
    pub w: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(h: usize, w: usize) -> Self {
        Self {
            h,
            w,
            data: vec![0.0; h * w],
        }
    }

    /// A `[H, W]` or `[1, H, W]` tensor as an image.
    pub fn from_tensor(t: &Tensor<f32>) -> Result<Self> {
        let s = t.shape();
        let (h, w) = match s {
            [h, w] | [1, h, w] => (*h, *w),
            _ => return data_err(format!("cannot view {s:?} as an image")),
        };
        Ok(Self {
            h,
            w,
            data: t.data().to_vec(),
        })
    }

    /// Copy `src` with its top-left corner at `(y, x)`.
    pub fn paste(&mut self, src: &Image, y: usize, x: usize) {
        for r in 0..src.h.min(self.h.saturating_sub(y)) {
            for c in 0..src.w.min(self.w.saturating_sub(x)) {
                self.data[(y + r) * self.w + x + c] = src.data[r * src.w + c];
            }
        }
    }

    /// Binary PGM (`P5`), values clamped to `[0, 1]` and scaled to 0..=255.
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.w, self.h).into_bytes();
        out.extend(
            self.data
                .iter()
                .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
        );
        out
    }

    pub fn write_pgm(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_pgm())?;
        Ok(())
    }
}

/// Parse a binary PGM with maxval 255.
pub fn read_pgm(bytes: &[u8]) -> Result<Image> {
    let mut fields = Vec::new();
    let mut i = 0;
    while fields.len() < 4 {
        while i < bytes.len() && bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return data_err("truncated PGM header");
        }
        fields.push(String::from_utf8_lossy(&bytes[start..i]).into_owned());
    }
    let num = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| crate::Error::Data(format!("bad PGM header field {s:?}")))
    };
    if fields[0] != "P5" || num(&fields[3])? != 255 {
        return data_err("only 8-bit binary PGM is supported");
    }
    let (w, h) = (num(&fields[1])?, num(&fields[2])?);
    let body = &bytes[i + 1..];
    if body.len() != h * w {
        return data_err(format!(
            "PGM body has {} bytes, expected {}",
            body.len(),
            h * w
        ));
    }
    Ok(Image {
        h,
        w,
        data: body.iter().map(|&b| b as f32 / 255.0).collect(),
    })
}

const GAP: usize = 2;

/// One row per pair (query first): the three input channels, the target, and for
/// the query row the prediction when given.
pub fn episode_montage(ep: &Episode, prediction: Option<&Tensor<f32>>) -> Result<Image> {
    let s = ep.image_size();
    let cols = 5;
    let rows = 1 + ep.context_size();
    let mut img = Image::new(rows * (s + GAP) - GAP, cols * (s + GAP) - GAP);
    for (r, pair) in ep.pairs().enumerate() {
        let y = r * (s + GAP);
        let mut tiles: Vec<Tensor<f32>> = pair.input.unstack();
        tiles.push(pair.target.clone());
        if r == 0 {
            if let Some(p) = prediction {
                tiles.push(p.clone());
            }
        }
        for (c, t) in tiles.iter().enumerate() {
            img.paste(&Image::from_tensor(t)?, y, c * (s + GAP));
        }
    }
    Ok(img)
}
