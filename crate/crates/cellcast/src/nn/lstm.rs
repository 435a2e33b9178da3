use rand_chacha::ChaCha8Rng;

use super::{backward_without_forward, xavier_uniform, Differentiable, NdArray, Param};
use crate::error::{Error, Result};

/// Standard gated LSTM over `[time, c_in]` input, returning the full hidden
/// sequence `[time, hidden]`. State starts at zero on every forward call;
/// nothing is carried across calls.
///
/// Gate layout in the stacked weight rows is (input, forget, cell, output).
/// The forget-gate slice of the bias is initialized to 1.
pub struct Lstm {
    w_ih: Param, // [4*hidden, c_in]
    w_hh: Param, // [4*hidden, hidden]
    bias: Param, // [4*hidden]
    c_in: usize,
    hidden: usize,
    cache: Option<Cache>,
}

/// Per-step activations saved by forward for backpropagation through time.
struct Cache {
    input: NdArray,
    h_prev: Vec<f64>, // [time * hidden], state entering each step
    c_prev: Vec<f64>,
    gate_i: Vec<f64>,
    gate_f: Vec<f64>,
    gate_g: Vec<f64>,
    gate_o: Vec<f64>,
    tanh_c: Vec<f64>,
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl Lstm {
    pub fn new(prefix: &str, c_in: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        if c_in < 1 || hidden < 1 {
            return Err(Error::Validation(format!(
                "{prefix}: input and hidden sizes must be >= 1"
            )));
        }
        let w_ih = xavier_uniform(rng, &[4 * hidden, c_in], c_in, 4 * hidden);
        let w_hh = xavier_uniform(rng, &[4 * hidden, hidden], hidden, 4 * hidden);
        let mut bias = NdArray::zeros(&[4 * hidden]);
        bias.data_mut()[hidden..2 * hidden].fill(1.0);
        Ok(Lstm {
            w_ih: Param::new(format!("{prefix}.w_ih"), w_ih),
            w_hh: Param::new(format!("{prefix}.w_hh"), w_hh),
            bias: Param::new(format!("{prefix}.bias"), bias),
            c_in,
            hidden,
            cache: None,
        })
    }

    pub fn hidden_size(&self) -> usize {
        self.hidden
    }

    /// Hidden state after the last time step of the most recent forward.
    pub fn final_hidden(&self) -> Result<Vec<f64>> {
        let cache = self
            .cache
            .as_ref()
            .ok_or_else(|| backward_without_forward("lstm"))?;
        let time = cache.input.shape()[0];
        if time == 0 {
            return Ok(vec![0.0; self.hidden]);
        }
        let h = self.hidden;
        let base = (time - 1) * h;
        // h_t of the last step is reconstructed as o * tanh(c).
        let out = cache.gate_o[base..base + h]
            .iter()
            .zip(&cache.tanh_c[base..base + h])
            .map(|(o, tc)| o * tc)
            .collect();
        Ok(out)
    }
}

impl Differentiable for Lstm {
    fn forward(&mut self, input: &NdArray) -> Result<NdArray> {
        let time = match input.shape() {
            [t, c] if *c == self.c_in => *t,
            other => {
                return Err(Error::Shape(format!(
                    "lstm expects [time, {}], got {:?}",
                    self.c_in, other
                )))
            }
        };
        let h = self.hidden;
        let x = input.data();
        let w_ih = self.w_ih.value.data();
        let w_hh = self.w_hh.value.data();
        let bias = self.bias.value.data();

        let mut cache = Cache {
            input: input.clone(),
            h_prev: vec![0.0; time * h],
            c_prev: vec![0.0; time * h],
            gate_i: vec![0.0; time * h],
            gate_f: vec![0.0; time * h],
            gate_g: vec![0.0; time * h],
            gate_o: vec![0.0; time * h],
            tanh_c: vec![0.0; time * h],
        };
        let mut out = NdArray::zeros(&[time, h]);
        let o_data = out.data_mut();

        let mut h_state = vec![0.0; h];
        let mut c_state = vec![0.0; h];
        let mut pre = vec![0.0; 4 * h];

        for t in 0..time {
            cache.h_prev[t * h..(t + 1) * h].copy_from_slice(&h_state);
            cache.c_prev[t * h..(t + 1) * h].copy_from_slice(&c_state);

            let x_row = &x[t * self.c_in..(t + 1) * self.c_in];
            for (g, p) in pre.iter_mut().enumerate() {
                let mut acc = bias[g];
                let ih_row = &w_ih[g * self.c_in..(g + 1) * self.c_in];
                for (i, xv) in x_row.iter().enumerate() {
                    acc += ih_row[i] * xv;
                }
                let hh_row = &w_hh[g * h..(g + 1) * h];
                for (j, hv) in h_state.iter().enumerate() {
                    acc += hh_row[j] * hv;
                }
                *p = acc;
            }

            for j in 0..h {
                let gi = sigmoid(pre[j]);
                let gf = sigmoid(pre[h + j]);
                let gg = pre[2 * h + j].tanh();
                let go = sigmoid(pre[3 * h + j]);
                let c_new = gf * c_state[j] + gi * gg;
                let tc = c_new.tanh();
                cache.gate_i[t * h + j] = gi;
                cache.gate_f[t * h + j] = gf;
                cache.gate_g[t * h + j] = gg;
                cache.gate_o[t * h + j] = go;
                cache.tanh_c[t * h + j] = tc;
                c_state[j] = c_new;
                h_state[j] = go * tc;
            }
            o_data[t * h..(t + 1) * h].copy_from_slice(&h_state);
        }

        self.cache = Some(cache);
        Ok(out)
    }

    fn backward(&mut self, grad_out: &NdArray) -> Result<NdArray> {
        let cache = self
            .cache
            .as_ref()
            .ok_or_else(|| backward_without_forward("lstm"))?;
        let time = cache.input.shape()[0];
        let h = self.hidden;
        if grad_out.shape() != [time, h] {
            return Err(Error::Shape(format!(
                "lstm backward expects [{time}, {h}], got {:?}",
                grad_out.shape()
            )));
        }
        let c_in = self.c_in;
        let x = cache.input.data();
        let g_out = grad_out.data();
        let w_ih = self.w_ih.value.data();
        let w_hh = self.w_hh.value.data();

        let mut grad_in = NdArray::zeros(&[time, c_in]);
        let gi_data = grad_in.data_mut();
        let g_w_ih = self.w_ih.grad.data_mut();
        let g_w_hh = self.w_hh.grad.data_mut();
        let g_bias = self.bias.grad.data_mut();

        let mut dh_next = vec![0.0; h];
        let mut dc_next = vec![0.0; h];
        let mut d_pre = vec![0.0; 4 * h];

        for t in (0..time).rev() {
            let base = t * h;
            for j in 0..h {
                let dh = g_out[base + j] + dh_next[j];
                let go = cache.gate_o[base + j];
                let tc = cache.tanh_c[base + j];
                let dc = dh * go * (1.0 - tc * tc) + dc_next[j];

                let gi = cache.gate_i[base + j];
                let gf = cache.gate_f[base + j];
                let gg = cache.gate_g[base + j];
                d_pre[j] = dc * gg * gi * (1.0 - gi);
                d_pre[h + j] = dc * cache.c_prev[base + j] * gf * (1.0 - gf);
                d_pre[2 * h + j] = dc * gi * (1.0 - gg * gg);
                d_pre[3 * h + j] = dh * tc * go * (1.0 - go);

                dc_next[j] = dc * gf;
            }

            let x_row = &x[t * c_in..(t + 1) * c_in];
            let h_row = &cache.h_prev[base..base + h];
            dh_next.fill(0.0);
            let dx_row = &mut gi_data[t * c_in..(t + 1) * c_in];
            for (g, dp) in d_pre.iter().enumerate() {
                let dp = *dp;
                g_bias[g] += dp;
                let ih_row = &w_ih[g * c_in..(g + 1) * c_in];
                let g_ih_row = &mut g_w_ih[g * c_in..(g + 1) * c_in];
                for i in 0..c_in {
                    g_ih_row[i] += dp * x_row[i];
                    dx_row[i] += dp * ih_row[i];
                }
                let hh_row = &w_hh[g * h..(g + 1) * h];
                let g_hh_row = &mut g_w_hh[g * h..(g + 1) * h];
                for j in 0..h {
                    g_hh_row[j] += dp * h_row[j];
                    dh_next[j] += dp * hh_row[j];
                }
            }
        }

        Ok(grad_in)
    }

    fn params(&self) -> Vec<&Param> {
        vec![&self.w_ih, &self.w_hh, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.w_ih, &mut self.w_hh, &mut self.bias]
    }
}
