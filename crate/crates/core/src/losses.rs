//! Training losses and evaluation metrics.

use serde::{Deserialize, Serialize};

use crate::tensor::{Float, Result, Tensor, TensorError, Var};

/// Which training loss an episode uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Soft Dice on logits; binary targets.
    Dice,
    /// `sigma2`-weighted squared error; intensity targets.
    Mse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub sigma2: f64,
    pub dice_eps: f64,
    pub psnr_peak: f64,
    /// Reported PSNR when the squared error vanishes.
    pub psnr_cap: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            sigma2: 0.05,
            dice_eps: 1.0,
            psnr_peak: 1.0,
            psnr_cap: 99.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma2 > 0.0 && self.dice_eps > 0.0 && self.psnr_peak > 0.0) {
            return Err(TensorError::Invalid {
                op: "LossConfig",
                detail: format!("sigma2, dice_eps and psnr_peak must be positive: {self:?}"),
            });
        }
        Ok(())
    }
}

/// Soft Dice loss on logits `[B, 1, H, W]`, averaged over the batch.
pub fn soft_dice_loss<'t, F: Float>(
    logits: &Var<'t, F>,
    target: &Tensor<F>,
    eps: f64,
) -> Result<Var<'t, F>> {
    logits.soft_dice_loss(target, F::c(eps))
}

/// `(1 / 2 sigma2) * sum_p (y_p - yhat_p)^2`, averaged over the batch.
pub fn weighted_mse_loss<'t, F: Float>(
    pred: &Var<'t, F>,
    target: &Tensor<F>,
    sigma2: f64,
) -> Result<Var<'t, F>> {
    pred.weighted_mse_loss(target, F::c(sigma2))
}

/// The loss selected by `kind`.
pub fn task_loss<'t, F: Float>(
    pred: &Var<'t, F>,
    target: &Tensor<F>,
    kind: LossKind,
    cfg: &LossConfig,
) -> Result<Var<'t, F>> {
    match kind {
        LossKind::Dice => soft_dice_loss(pred, target, cfg.dice_eps),
        LossKind::Mse => weighted_mse_loss(pred, target, cfg.sigma2),
    }
}

/// Hard mask from logits: `sigmoid(z) >= 0.5`, i.e. `z >= 0`.
pub fn threshold_logits<F: Float>(logits: &Tensor<F>) -> Tensor<F> {
    logits.map(|z| if z >= F::zero() { F::one() } else { F::zero() })
}

fn ensure_binary<F: Float>(values: &[F], op: &'static str) -> Result<()> {
    if values.iter().all(|&v| v == F::zero() || v == F::one()) {
        Ok(())
    } else {
        Err(TensorError::Invalid {
            op,
            detail: "mask is not binary".into(),
        })
    }
}

fn ensure_same_shape<F: Float>(a: &Tensor<F>, b: &Tensor<F>, op: &'static str) -> Result<()> {
    if a.shape() == b.shape() {
        Ok(())
    } else {
        Err(TensorError::Shape {
            op,
            detail: format!("{:?} vs {:?}", a.shape(), b.shape()),
        })
    }
}

/// `2 |A n B| / (|A| + |B|)` over all elements; 1 when both masks are empty.
pub fn dice_coefficient<F: Float>(pred: &Tensor<F>, target: &Tensor<F>) -> Result<f64> {
    ensure_same_shape(pred, target, "dice_coefficient")?;
    ensure_binary(pred.data(), "dice_coefficient")?;
    ensure_binary(target.data(), "dice_coefficient")?;
    let (mut inter, mut sa, mut sb) = (0u64, 0u64, 0u64);
    for (&a, &b) in pred.data().iter().zip(target.data()) {
        let (a, b) = (a == F::one(), b == F::one());
        inter += (a && b) as u64;
        sa += a as u64;
        sb += b as u64;
    }
    if sa + sb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (sa + sb) as f64)
}

/// PSNR in dB after clamping both images to `[0, 1]`; `cap` when the error vanishes.
pub fn psnr_with<F: Float>(
    pred: &Tensor<F>,
    target: &Tensor<F>,
    peak: f64,
    cap: f64,
) -> Result<f64> {
    ensure_same_shape(pred, target, "psnr")?;
    if pred.numel() == 0 {
        return Err(TensorError::Invalid {
            op: "psnr",
            detail: "empty image".into(),
        });
    }
    let clamp = |v: F| v.f64().clamp(0.0, 1.0);
    let se: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| (clamp(p) - clamp(t)).powi(2))
        .sum();
    let mse = se / pred.numel() as f64;
    if mse < 1e-12 {
        return Ok(cap);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

/// [`psnr_with`] at peak 1 and a 99 dB cap.
pub fn psnr<F: Float>(pred: &Tensor<F>, target: &Tensor<F>) -> Result<f64> {
    psnr_with(pred, target, 1.0, 99.0)
}

/// Per-image metric over the leading axis of two equally shaped batches.
pub fn per_image<F: Float>(
    pred: &Tensor<F>,
    target: &Tensor<F>,
    metric: impl Fn(&Tensor<F>, &Tensor<F>) -> Result<f64>,
) -> Result<Vec<f64>> {
    ensure_same_shape(pred, target, "per_image")?;
    pred.unstack()
        .iter()
        .zip(target.unstack().iter())
        .map(|(p, t)| metric(p, t))
        .collect()
}
