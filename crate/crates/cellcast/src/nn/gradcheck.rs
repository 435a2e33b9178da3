use super::{Differentiable, NdArray};
use crate::error::{Error, Result};

const FD_EPSILON: f64 = 1e-5;

/// Mean squared error over all elements.
pub fn mse(output: &NdArray, target: &NdArray) -> Result<f64> {
    if output.shape() != target.shape() {
        return Err(Error::Shape(format!(
            "mse: {:?} vs {:?}",
            output.shape(),
            target.shape()
        )));
    }
    if output.is_empty() {
        return Err(Error::Validation("mse over empty output".into()));
    }
    let n = output.len() as f64;
    Ok(output
        .data()
        .iter()
        .zip(target.data())
        .map(|(o, t)| (o - t) * (o - t))
        .sum::<f64>()
        / n)
}

/// d mse / d output.
pub fn mse_grad(output: &NdArray, target: &NdArray) -> Result<NdArray> {
    if output.shape() != target.shape() {
        return Err(Error::Shape(format!(
            "mse_grad: {:?} vs {:?}",
            output.shape(),
            target.shape()
        )));
    }
    let n = output.len() as f64;
    let data = output
        .data()
        .iter()
        .zip(target.data())
        .map(|(o, t)| 2.0 * (o - t) / n)
        .collect();
    NdArray::from_vec(output.shape(), data)
}

/// Verifies analytic gradients of an MSE loss against central finite
/// differences. Returns the worst relative error over all parameter
/// elements: |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
pub fn grad_check<D: Differentiable>(
    model: &mut D,
    input: &NdArray,
    target: &NdArray,
) -> Result<f64> {
    let output = model.forward(input)?;
    let loss = mse(&output, target)?;
    if !loss.is_finite() {
        return Err(Error::Numeric("grad_check: non-finite loss".into()));
    }
    model.zero_grad();
    model.backward(&mse_grad(&output, target)?)?;
    let analytic: Vec<Vec<f64>> = model
        .params()
        .iter()
        .map(|p| p.grad.data().to_vec())
        .collect();

    let mut max_rel: f64 = 0.0;
    for (pi, grads) in analytic.iter().enumerate() {
        for (j, &a) in grads.iter().enumerate() {
            let numeric = {
                let saved = model.params_mut()[pi].value.data()[j];
                let probe = |model: &mut D, delta: f64| -> Result<NdArray> {
                    model.params_mut()[pi].value.data_mut()[j] = saved + delta;
                    let out = model.forward(input);
                    model.params_mut()[pi].value.data_mut()[j] = saved;
                    out
                };
                let plus = probe(model, FD_EPSILON)?;
                let minus = probe(model, -FD_EPSILON)?;
                // loss(+) - loss(-) expanded elementwise as a difference of
                // squares; avoids catastrophic cancellation between two
                // nearly equal loss sums.
                let n = plus.len() as f64;
                let diff: f64 = plus
                    .data()
                    .iter()
                    .zip(minus.data())
                    .zip(target.data())
                    .map(|((op, om), t)| (op - om) * (op + om - 2.0 * t))
                    .sum::<f64>()
                    / n;
                diff / (2.0 * FD_EPSILON)
            };
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    Ok(max_rel)
}
