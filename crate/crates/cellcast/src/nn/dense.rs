use rand_chacha::ChaCha8Rng;

use super::{backward_without_forward, xavier_uniform, Differentiable, NdArray, Param};
use crate::error::{Error, Result};

/// Affine map on a flat vector: y[j] = bias[j] + sum_i weight[i, j] * x[i].
pub struct Dense {
    weight: Param, // [in, out]
    bias: Param,   // [out]
    n_in: usize,
    n_out: usize,
    cached_input: Option<NdArray>,
}

impl Dense {
    pub fn new(prefix: &str, n_in: usize, n_out: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        if n_in < 1 || n_out < 1 {
            return Err(Error::Validation(format!(
                "{prefix}: dense sizes must be >= 1"
            )));
        }
        let weight = xavier_uniform(rng, &[n_in, n_out], n_in, n_out);
        Ok(Dense {
            weight: Param::new(format!("{prefix}.weight"), weight),
            bias: Param::new(format!("{prefix}.bias"), NdArray::zeros(&[n_out])),
            n_in,
            n_out,
            cached_input: None,
        })
    }

    pub fn input_size(&self) -> usize {
        self.n_in
    }
}

impl Differentiable for Dense {
    fn forward(&mut self, input: &NdArray) -> Result<NdArray> {
        if input.len() != self.n_in {
            return Err(Error::Shape(format!(
                "dense expects {} inputs, got shape {:?}",
                self.n_in,
                input.shape()
            )));
        }
        let x = input.data();
        let w = self.weight.value.data();
        let mut out = self.bias.value.clone();
        let o = out.data_mut();
        for (i, xv) in x.iter().enumerate() {
            let row = &w[i * self.n_out..(i + 1) * self.n_out];
            for j in 0..self.n_out {
                o[j] += row[j] * xv;
            }
        }
        self.cached_input = Some(input.clone());
        Ok(out)
    }

    fn backward(&mut self, grad_out: &NdArray) -> Result<NdArray> {
        let input = self
            .cached_input
            .as_ref()
            .ok_or_else(|| backward_without_forward("dense"))?;
        if grad_out.len() != self.n_out {
            return Err(Error::Shape(format!(
                "dense backward expects {} grads, got {:?}",
                self.n_out,
                grad_out.shape()
            )));
        }
        let x = input.data();
        let g = grad_out.data();
        let w = self.weight.value.data();
        let gw = self.weight.grad.data_mut();
        let gb = self.bias.grad.data_mut();
        for j in 0..self.n_out {
            gb[j] += g[j];
        }
        let mut grad_in = NdArray::zeros(&[self.n_in]);
        let gi = grad_in.data_mut();
        for i in 0..self.n_in {
            let w_row = &w[i * self.n_out..(i + 1) * self.n_out];
            let gw_row = &mut gw[i * self.n_out..(i + 1) * self.n_out];
            let mut acc = 0.0;
            for j in 0..self.n_out {
                gw_row[j] += g[j] * x[i];
                acc += g[j] * w_row[j];
            }
            gi[i] = acc;
        }
        Ok(grad_in)
    }

    fn params(&self) -> Vec<&Param> {
        vec![&self.weight, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.weight, &mut self.bias]
    }
}

/// Elementwise tanh; no parameters.
#[derive(Default)]
pub struct Tanh {
    cached_output: Option<NdArray>,
}

impl Tanh {
    pub fn new() -> Self {
        Tanh::default()
    }
}

impl Differentiable for Tanh {
    fn forward(&mut self, input: &NdArray) -> Result<NdArray> {
        let mut out = input.clone();
        for v in out.data_mut() {
            *v = v.tanh();
        }
        self.cached_output = Some(out.clone());
        Ok(out)
    }

    fn backward(&mut self, grad_out: &NdArray) -> Result<NdArray> {
        let y = self
            .cached_output
            .as_ref()
            .ok_or_else(|| backward_without_forward("tanh"))?;
        if grad_out.shape() != y.shape() {
            return Err(Error::Shape(format!(
                "tanh backward expects {:?}, got {:?}",
                y.shape(),
                grad_out.shape()
            )));
        }
        let data = grad_out
            .data()
            .iter()
            .zip(y.data())
            .map(|(g, yv)| g * (1.0 - yv * yv))
            .collect();
        NdArray::from_vec(y.shape(), data)
    }

    fn params(&self) -> Vec<&Param> {
        Vec::new()
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        Vec::new()
    }
}
