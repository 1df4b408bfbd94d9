//! Procedural 2D head phantoms standing in for imaging subjects.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};
use crate::rng;
use crate::tensor::Tensor;

pub const BACKGROUND: u8 = 0;
pub const SKULL: u8 = 1;
/// Brain tissue not covered by a named structure.
pub const PARENCHYMA: u8 = 2;
/// Number of labels including background and skull.
pub const N_LABELS: usize = 9;
/// Labels a segmentation task may target.
pub const SEGMENTABLE: [u8; 7] = [2, 3, 4, 5, 6, 7, 8];
pub const N_MODALITIES: usize = 4;

/// Mean intensity of each label (columns) in each modality (rows).
const CONTRAST: [[f32; N_LABELS]; N_MODALITIES] = [
    [0.0, 0.85, 0.60, 0.15, 0.72, 0.70, 0.42, 0.82, 0.33],
    [0.0, 0.30, 0.45, 0.95, 0.28, 0.36, 0.66, 0.22, 0.56],
    [0.0, 0.55, 0.50, 0.20, 0.86, 0.38, 0.76, 0.62, 0.24],
    [0.0, 0.70, 0.34, 0.80, 0.55, 0.92, 0.18, 0.46, 0.66],
];

/// Per-site gamma applied to every modality.
const SITE_GAMMA: [f32; 4] = [1.0, 0.85, 1.2, 1.05];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomConfig {
    pub image_size: usize,
    /// Number of simulated acquisition sites.
    pub n_datasets: usize,
    /// Sites whose images have the skull removed.
    pub skull_stripped: Vec<usize>,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            n_datasets: 4,
            skull_stripped: vec![3],
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 16 {
            return config_err(format!(
                "image_size {} is too small for the phantom anatomy (< 16)",
                self.image_size
            ));
        }
        if self.n_datasets == 0 {
            return config_err("n_datasets must be positive");
        }
        if self.skull_stripped.len() >= self.n_datasets {
            return config_err("at least one site must keep the skull");
        }
        Ok(())
    }
}

/// One synthetic subject: label map, modality images, and brain mask, all `size x size`.
#[derive(Debug, Clone, PartialEq)]
pub struct PhantomSubject {
    pub id: u64,
    pub dataset_id: usize,
    pub size: usize,
    pub seg_map: Vec<u8>,
    /// `[size, size]` images in `[0, 1]`, one per modality.
    pub modalities: Vec<Tensor<f32>>,
    /// `[size, size]` binary.
    pub brain_mask: Tensor<f32>,
    pub skull_stripped: bool,
}

impl PhantomSubject {
    /// Binary `[size, size]` mask of the union of `labels`.
    pub fn label_mask(&self, labels: &[u8]) -> Tensor<f32> {
        let data = self
            .seg_map
            .iter()
            .map(|l| if labels.contains(l) { 1.0 } else { 0.0 })
            .collect();
        Tensor::new(vec![self.size, self.size], data).expect("square map")
    }

    pub fn has_label(&self, label: u8) -> bool {
        self.seg_map.contains(&label)
    }
}

#[derive(Clone, Copy)]
struct Ellipse {
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
}

impl Ellipse {
    fn contains(&self, u: f64, v: f64) -> bool {
        ((u - self.cx) / self.rx).powi(2) + ((v - self.cy) / self.ry).powi(2) <= 1.0
    }
}

/// Deterministic subject for `(seed, dataset_id)`.
pub fn generate_phantom(
    seed: u64,
    dataset_id: usize,
    cfg: &PhantomConfig,
) -> Result<PhantomSubject> {
    cfg.validate()?;
    if dataset_id >= cfg.n_datasets {
        return config_err(format!(
            "dataset_id {dataset_id} >= n_datasets {}",
            cfg.n_datasets
        ));
    }
    let n = cfg.image_size;
    let mut r = rng::stream(seed, 0);
    let r = &mut r;
    let jit = |r: &mut rng::Rng, a: f64| r.random_range(-a..a);
    let scale = |r: &mut rng::Rng, s: f64| s * (1.0 + r.random_range(-0.15..0.15));

    // Head ellipse in normalised coordinates [-1, 1]^2, with a small rotation.
    let (hx, hy) = (jit(r, 0.05), jit(r, 0.05));
    let (ha, hb) = (0.78 + jit(r, 0.05), 0.88 + jit(r, 0.05));
    let rot = jit(r, 0.15);
    let brain_frac = 0.84;

    let vent_dx = 0.12 + jit(r, 0.02);
    let (vrx, vry, vcy) = (scale(r, 0.1), scale(r, 0.22), -0.05 + jit(r, 0.05));
    let blobs = [
        (
            3,
            Ellipse {
                cx: -vent_dx,
                cy: vcy,
                rx: vrx,
                ry: vry,
            },
        ),
        (
            3,
            Ellipse {
                cx: vent_dx,
                cy: vcy,
                rx: vrx,
                ry: vry,
            },
        ),
        (
            4,
            Ellipse {
                cx: -0.42 + jit(r, 0.05),
                cy: 0.05 + jit(r, 0.05),
                rx: scale(r, 0.16),
                ry: scale(r, 0.22),
            },
        ),
        (
            5,
            Ellipse {
                cx: 0.42 + jit(r, 0.05),
                cy: 0.05 + jit(r, 0.05),
                rx: scale(r, 0.16),
                ry: scale(r, 0.22),
            },
        ),
        (
            7,
            Ellipse {
                cx: jit(r, 0.05),
                cy: 0.6 + jit(r, 0.04),
                rx: scale(r, 0.3),
                ry: scale(r, 0.15),
            },
        ),
        (
            8,
            Ellipse {
                cx: jit(r, 0.04),
                cy: 0.27 + jit(r, 0.04),
                rx: scale(r, 0.13),
                ry: scale(r, 0.11),
            },
        ),
    ];
    // Cortex-like band along the top of the brain.
    let (cres_in, cres_out, cres_cut) = (
        0.62 + jit(r, 0.03),
        0.86 + jit(r, 0.03),
        -0.25 + jit(r, 0.05),
    );

    let (cos, sin) = (rot.cos(), rot.sin());
    let mut seg_map = vec![BACKGROUND; n * n];
    for y in 0..n {
        for x in 0..n {
            let px = (x as f64 + 0.5) / n as f64 * 2.0 - 1.0 - hx;
            let py = (y as f64 + 0.5) / n as f64 * 2.0 - 1.0 - hy;
            let (u, v) = (cos * px + sin * py, -sin * px + cos * py);
            let rh = ((u / ha).powi(2) + (v / hb).powi(2)).sqrt();
            if rh > 1.0 {
                continue;
            }
            if rh > brain_frac {
                seg_map[y * n + x] = SKULL;
                continue;
            }
            // Brain-local coordinates: the brain ellipse maps to the unit disc.
            let (bu, bv) = (u / (ha * brain_frac), v / (hb * brain_frac));
            let rb = (bu * bu + bv * bv).sqrt();
            let mut label = PARENCHYMA;
            if rb > cres_in && rb < cres_out && bv < cres_cut {
                label = 6;
            }
            for (l, e) in &blobs {
                if e.contains(bu, bv) {
                    label = *l;
                }
            }
            seg_map[y * n + x] = label;
        }
    }

    let skull_stripped = cfg.skull_stripped.contains(&dataset_id);
    let brain: Vec<f32> = seg_map
        .iter()
        .map(|&l| if l >= PARENCHYMA { 1.0 } else { 0.0 })
        .collect();
    let gamma = SITE_GAMMA[dataset_id % SITE_GAMMA.len()];

    let mut modalities = Vec::with_capacity(N_MODALITIES);
    for (m, table) in CONTRAST.iter().enumerate() {
        let mut r = rng::stream(seed, 1 + m as u64);
        let means: Vec<f32> = table
            .iter()
            .map(|&c| (c + r.random_range(-0.04f32..0.04)).clamp(0.02, 1.0))
            .collect();
        // Smooth low-frequency inhomogeneity plus white noise.
        let (fx, fy, ph) = (
            r.random_range(0.5..1.5),
            r.random_range(0.5..1.5),
            r.random_range(0.0..6.28),
        );
        let amp = 0.03f32;
        let noise = Normal::new(0.0f32, 0.01).expect("valid sigma");
        let mut img = vec![0.0f32; n * n];
        for y in 0..n {
            for x in 0..n {
                let l = seg_map[y * n + x];
                if l == BACKGROUND || (skull_stripped && l == SKULL) {
                    continue;
                }
                let (u, v) = (x as f32 / n as f32, y as f32 / n as f32);
                let field = amp * (std::f32::consts::TAU * (fx * u + fy * v) + ph).sin();
                let val = means[l as usize].powf(gamma) + field + noise.sample(&mut r);
                img[y * n + x] = val.clamp(0.0, 1.0);
            }
        }
        modalities.push(Tensor::new(vec![n, n], img).expect("square image"));
    }

    Ok(PhantomSubject {
        id: seed,
        dataset_id,
        size: n,
        seg_map,
        modalities,
        brain_mask: Tensor::new(vec![n, n], brain).expect("square mask"),
        skull_stripped,
    })
}

/// A set of subjects with disjoint ids, assigned to sites round-robin.
#[derive(Debug, Clone)]
pub struct SubjectPool {
    pub subjects: Vec<PhantomSubject>,
}

impl SubjectPool {
    /// Subjects with ids `first_id .. first_id + count`.
    pub fn generate(first_id: u64, count: usize, cfg: &PhantomConfig) -> Result<Self> {
        let subjects = (0..count as u64)
            .map(|i| {
                let id = first_id + i;
                generate_phantom(id, (id % cfg.n_datasets as u64) as usize, cfg)
            })
            .collect::<Result<_>>()?;
        Ok(Self { subjects })
    }

    pub fn len(&self) -> usize {
        self.subjects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subjects.is_empty()
    }

    pub fn ids(&self) -> Vec<u64> {
        self.subjects.iter().map(|s| s.id).collect()
    }
}
