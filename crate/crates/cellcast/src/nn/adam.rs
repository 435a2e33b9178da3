use super::{NdArray, Param};
use crate::error::{Error, Result};

/// Bias-corrected Adam. Moment buffers are allocated lazily on the first
/// step so the state can be constructed before the model.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<NdArray>,
    v: Vec<NdArray>,
}

impl AdamState {
    pub fn new(lr: f64) -> Self {
        AdamState {
            step: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// One update over all parameters; gradients are read from each
    /// `Param::grad` buffer and left untouched.
    pub fn step(&mut self, params: &mut [&mut Param]) -> Result<()> {
        if self.lr <= 0.0 {
            return Err(Error::Validation("adam: lr must be > 0".into()));
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| NdArray::zeros(p.value.shape())).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != params.len() {
            return Err(Error::Shape(format!(
                "adam state tracks {} parameters, got {}",
                self.m.len(),
                params.len()
            )));
        }
        for (p, m) in params.iter().zip(&self.m) {
            if p.value.shape() != m.shape() {
                return Err(Error::Shape(format!(
                    "adam moment shape {:?} does not match parameter {} {:?}",
                    m.shape(),
                    p.name,
                    p.value.shape()
                )));
            }
        }
        for p in params.iter() {
            if !p.grad.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite gradient in parameter {}",
                    p.name
                )));
            }
        }

        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);

        for (pi, p) in params.iter_mut().enumerate() {
            let m = self.m[pi].data_mut();
            let v = self.v[pi].data_mut();
            let g = p.grad.data();
            let w = p.value.data_mut();
            for i in 0..g.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                w[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Scales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_global_norm(params: &mut [&mut Param], max_norm: f64) -> f64 {
    let sq: f64 = params
        .iter()
        .flat_map(|p| p.grad.data().iter())
        .map(|g| g * g)
        .sum();
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for p in params.iter_mut() {
            for g in p.grad.data_mut() {
                *g *= scale;
            }
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(values: &[f64]) -> Param {
        Param::new(
            "w",
            NdArray::from_vec(&[values.len()], values.to_vec()).unwrap(),
        )
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut p = param(&[1.0, -2.0]);
        let mut adam = AdamState::new(0.1);
        adam.step(&mut [&mut p]).unwrap();
        assert_eq!(p.value.data(), &[1.0, -2.0]);
        assert_eq!(adam.step, 1);
    }

    #[test]
    fn first_step_is_signed_lr() {
        // With constant gradient g the bias-corrected first step is
        // -lr * g / (|g| + eps') which is within eps of -lr * sign(g).
        let mut p = param(&[0.0, 0.0]);
        p.grad = NdArray::from_vec(&[2], vec![3.0, -0.25]).unwrap();
        let lr = 0.05;
        let mut adam = AdamState::new(lr);
        adam.step(&mut [&mut p]).unwrap();
        assert!((p.value.data()[0] - (-lr)).abs() < 1e-6);
        assert!((p.value.data()[1] - lr).abs() < 1e-6);
    }

    #[test]
    fn identical_runs_are_identical() {
        let run = || {
            let mut p = param(&[0.5, 0.5, 0.5]);
            let mut adam = AdamState::new(0.01);
            for step in 0..10 {
                for (i, g) in p.grad.data_mut().iter_mut().enumerate() {
                    *g = (step * 3 + i) as f64 * 0.1 - 0.7;
                }
                adam.step(&mut [&mut p]).unwrap();
            }
            p.value.data().to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut p = param(&[1.0]);
        p.grad = NdArray::from_vec(&[1], vec![f64::NAN]).unwrap();
        let mut adam = AdamState::new(0.1);
        let err = adam.step(&mut [&mut p]).unwrap_err();
        assert!(err.to_string().contains("w"));
        assert_eq!(err.category(), "numeric");
    }

    #[test]
    fn clip_rescales_to_max_norm() {
        let mut p = param(&[0.0; 2]);
        p.grad = NdArray::from_vec(&[2], vec![3.0, 4.0]).unwrap();
        let before = clip_global_norm(&mut [&mut p], 1.0);
        assert!((before - 5.0).abs() < 1e-12);
        let after: f64 = p.grad.data().iter().map(|g| g * g).sum::<f64>().sqrt();
        assert!((after - 1.0).abs() < 1e-12);
    }

    #[test]
    fn clip_leaves_small_gradients_alone() {
        let mut p = param(&[0.0; 2]);
        p.grad = NdArray::from_vec(&[2], vec![0.3, 0.4]).unwrap();
        clip_global_norm(&mut [&mut p], 5.0);
        assert_eq!(p.grad.data(), &[0.3, 0.4]);
    }
}
