use rand_chacha::ChaCha8Rng;

use super::{backward_without_forward, xavier_uniform, Differentiable, NdArray, Param};
use crate::error::{Error, Result};

/// Dilated causal 1-D convolution over `[time, channels]` input.
///
/// Output at time t reads inputs at t, t-d, ..., t-(kernel-1)*d only;
/// positions before the sequence start count as zero (implicit left
/// padding), so output length equals input length.
pub struct CausalConv1d {
    weight: Param, // [kernel, c_in, c_out]
    bias: Param,   // [c_out]
    kernel: usize,
    c_in: usize,
    c_out: usize,
    dilation: usize,
    cached_input: Option<NdArray>,
}

impl CausalConv1d {
    pub fn new(
        prefix: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        dilation: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if kernel < 1 || dilation < 1 || c_in < 1 || c_out < 1 {
            return Err(Error::Validation(format!(
                "{prefix}: kernel, dilation and channel counts must be >= 1"
            )));
        }
        let weight = xavier_uniform(
            rng,
            &[kernel, c_in, c_out],
            kernel * c_in,
            kernel * c_out,
        );
        Ok(CausalConv1d {
            weight: Param::new(format!("{prefix}.weight"), weight),
            bias: Param::new(format!("{prefix}.bias"), NdArray::zeros(&[c_out])),
            kernel,
            c_in,
            c_out,
            dilation,
            cached_input: None,
        })
    }

    /// Length-1 convolution: a per-time-step linear map across channels.
    pub fn pointwise(
        prefix: &str,
        c_in: usize,
        c_out: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Self::new(prefix, c_in, c_out, 1, 1, rng)
    }

    pub fn receptive_field(&self) -> usize {
        (self.kernel - 1) * self.dilation + 1
    }

    pub fn output_channels(&self) -> usize {
        self.c_out
    }

    fn check_input(&self, input: &NdArray) -> Result<usize> {
        match input.shape() {
            [t, c] if *c == self.c_in => Ok(*t),
            other => Err(Error::Shape(format!(
                "conv expects [time, {}], got {:?}",
                self.c_in, other
            ))),
        }
    }
}

impl Differentiable for CausalConv1d {
    fn forward(&mut self, input: &NdArray) -> Result<NdArray> {
        let time = self.check_input(input)?;
        let (c_in, c_out) = (self.c_in, self.c_out);
        let w = self.weight.value.data();
        let x = input.data();

        let mut out = NdArray::zeros(&[time, c_out]);
        let o_data = out.data_mut();
        for t in 0..time {
            o_data[t * c_out..(t + 1) * c_out].copy_from_slice(self.bias.value.data());
        }
        for t in 0..time {
            for k in 0..self.kernel {
                let lag = (self.kernel - 1 - k) * self.dilation;
                let Some(src) = t.checked_sub(lag) else {
                    continue;
                };
                for i in 0..c_in {
                    let xv = x[src * c_in + i];
                    if xv == 0.0 {
                        continue;
                    }
                    let w_row = &w[(k * c_in + i) * c_out..(k * c_in + i + 1) * c_out];
                    let o_row = &mut o_data[t * c_out..(t + 1) * c_out];
                    for o in 0..c_out {
                        o_row[o] += w_row[o] * xv;
                    }
                }
            }
        }
        self.cached_input = Some(input.clone());
        Ok(out)
    }

    fn backward(&mut self, grad_out: &NdArray) -> Result<NdArray> {
        let input = self
            .cached_input
            .as_ref()
            .ok_or_else(|| backward_without_forward("conv"))?;
        let time = input.shape()[0];
        if grad_out.shape() != [time, self.c_out] {
            return Err(Error::Shape(format!(
                "conv backward expects [{}, {}], got {:?}",
                time,
                self.c_out,
                grad_out.shape()
            )));
        }
        let (c_in, c_out) = (self.c_in, self.c_out);
        let x = input.data();
        let w = self.weight.value.data();
        let g = grad_out.data();

        let mut grad_in = NdArray::zeros(&[time, c_in]);
        let gi = grad_in.data_mut();
        let gw = self.weight.grad.data_mut();
        let gb = self.bias.grad.data_mut();

        for t in 0..time {
            let g_row = &g[t * c_out..(t + 1) * c_out];
            for o in 0..c_out {
                gb[o] += g_row[o];
            }
            for k in 0..self.kernel {
                let lag = (self.kernel - 1 - k) * self.dilation;
                let Some(src) = t.checked_sub(lag) else {
                    continue;
                };
                for i in 0..c_in {
                    let xv = x[src * c_in + i];
                    let w_row = &w[(k * c_in + i) * c_out..(k * c_in + i + 1) * c_out];
                    let gw_row = &mut gw[(k * c_in + i) * c_out..(k * c_in + i + 1) * c_out];
                    let mut acc = 0.0;
                    for o in 0..c_out {
                        gw_row[o] += g_row[o] * xv;
                        acc += g_row[o] * w_row[o];
                    }
                    gi[src * c_in + i] += acc;
                }
            }
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

#[cfg(test)]
mod tests {
    use super::super::add;
    use super::*;
    use rand::SeedableRng;

    fn conv_with_weights(
        kernel: usize,
        dilation: usize,
        weights: Vec<f64>,
        bias: f64,
    ) -> CausalConv1d {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut conv = CausalConv1d::new("t", 1, 1, kernel, dilation, &mut rng).unwrap();
        conv.weight.value = NdArray::from_vec(&[kernel, 1, 1], weights).unwrap();
        conv.bias.value = NdArray::from_vec(&[1], vec![bias]).unwrap();
        conv
    }

    fn col(values: &[f64]) -> NdArray {
        NdArray::from_vec(&[values.len(), 1], values.to_vec()).unwrap()
    }

    #[test]
    fn dilation_one_sums_adjacent() {
        let mut conv = conv_with_weights(2, 1, vec![1.0, 1.0], 0.0);
        let out = conv.forward(&col(&[1.0, 2.0, 3.0, 4.0])).unwrap();
        assert_eq!(out.data(), &[1.0, 3.0, 5.0, 7.0]);
    }

    #[test]
    fn dilation_two_reaches_back() {
        let mut conv = conv_with_weights(2, 2, vec![1.0, 1.0], 0.0);
        let out = conv.forward(&col(&[1.0, 2.0, 3.0, 4.0])).unwrap();
        assert_eq!(out.data(), &[1.0, 2.0, 4.0, 6.0]);
    }

    #[test]
    fn zero_weights_zero_output() {
        let mut conv = conv_with_weights(3, 2, vec![0.0; 3], 0.0);
        let out = conv.forward(&col(&[5.0, -1.0, 2.0, 0.5])).unwrap();
        assert!(out.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn single_element_product_rule() {
        // in=[x], kernel=[w], loss=out[0]: grad_w = x, grad_x = w
        let mut conv = conv_with_weights(1, 1, vec![3.0], 0.0);
        conv.forward(&col(&[2.0])).unwrap();
        let grad_in = conv
            .backward(&NdArray::from_vec(&[1, 1], vec![1.0]).unwrap())
            .unwrap();
        assert_eq!(conv.weight.grad.data(), &[2.0]);
        assert_eq!(grad_in.data(), &[3.0]);
    }

    #[test]
    fn zero_grad_out_gives_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut conv = CausalConv1d::new("t", 2, 3, 3, 2, &mut rng).unwrap();
        let x = xavier_uniform(&mut rng, &[6, 2], 1, 1);
        conv.forward(&x).unwrap();
        let grad_in = conv.backward(&NdArray::zeros(&[6, 3])).unwrap();
        assert!(grad_in.data().iter().all(|v| *v == 0.0));
        assert!(conv.weight.grad.data().iter().all(|v| *v == 0.0));
        assert!(conv.bias.grad.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn backward_before_forward_is_an_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut conv = CausalConv1d::new("t", 1, 1, 2, 1, &mut rng).unwrap();
        assert!(conv.backward(&NdArray::zeros(&[4, 1])).is_err());
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut conv = CausalConv1d::new("t", 2, 1, 2, 1, &mut rng).unwrap();
        assert!(conv.forward(&NdArray::zeros(&[4, 3])).is_err());
    }

    #[test]
    fn superposition_in_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut conv = CausalConv1d::new("t", 1, 2, 3, 2, &mut rng).unwrap();
        let a = xavier_uniform(&mut rng, &[8, 1], 1, 1);
        let b = xavier_uniform(&mut rng, &[8, 1], 1, 1);
        let sum = add(&a, &b).unwrap();
        let fa = conv.forward(&a).unwrap();
        let fb = conv.forward(&b).unwrap();
        let fsum = conv.forward(&sum).unwrap();
        // Linearity up to the (doubly counted) bias.
        let bias_correction = conv.bias.value.data().to_vec();
        for (i, sum_v) in fsum.data().iter().enumerate() {
            let lhs = sum_v + bias_correction[i % 2];
            let rhs = fa.data()[i] + fb.data()[i];
            assert!((lhs - rhs).abs() < 1e-9);
        }
    }
}
