use super::{Result, Tape, Tensor, TensorError, Var};

/// Outcome of comparing analytic gradients against central differences.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub coordinates: usize,
}

/// [`grad_check_with`] at the default step `eps = 1e-5`.
pub fn grad_check<G>(f: G, inputs: &[Tensor<f64>]) -> Result<GradCheckReport>
where
    G: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    grad_check_with(f, inputs, 1e-5)
}

/// Max over all input coordinates of `|analytic - central| / max(1, |central|)`.
///
/// `f` must build a scalar from the given leaves on the given tape.
pub fn grad_check_with<G>(f: G, inputs: &[Tensor<f64>], eps: f64) -> Result<GradCheckReport>
where
    G: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let tape = Tape::new();
        let leaves: Vec<_> = xs.iter().map(|x| tape.constant(x.clone())).collect();
        let v = f(&tape, &leaves)?.value().item();
        if v.is_finite() {
            Ok(v)
        } else {
            Err(TensorError::NonFinite("grad_check objective"))
        }
    };

    let tape = Tape::new();
    let leaves: Vec<_> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
    let out = f(&tape, &leaves)?;
    let grads = tape.backward(&out)?;
    let analytic: Vec<Tensor<f64>> = leaves
        .iter()
        .zip(inputs)
        .map(|(l, x)| {
            grads
                .wrt(l)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(x.shape().to_vec()))
        })
        .collect();
    for a in &analytic {
        a.ensure_finite("grad_check analytic gradient")?;
    }

    let mut probe = inputs.to_vec();
    let mut max_rel_err = 0.0f64;
    let mut coordinates = 0;
    for (i, a) in analytic.iter().enumerate() {
        for j in 0..inputs[i].numel() {
            let orig = inputs[i].data()[j];
            probe[i].data_mut()[j] = orig + eps;
            let plus = eval(&probe)?;
            probe[i].data_mut()[j] = orig - eps;
            let minus = eval(&probe)?;
            probe[i].data_mut()[j] = orig;
            let central = (plus - minus) / (2.0 * eps);
            let err = (a.data()[j] - central).abs() / central.abs().max(1.0);
            max_rel_err = max_rel_err.max(err);
            coordinates += 1;
        }
    }
    Ok(GradCheckReport {
        max_rel_err,
        coordinates,
    })
}
