//! Forecasting models assembled from the nn primitives: stacked TCN-LSTM
//! blocks linked by residual convolutional connections, plus LSTM-only
//! and MLP baselines sharing the same training and evaluation harness.
//!
//! Each block runs a dilated causal convolution into an LSTM; a pointwise
//! convolution projects the block input onto the block output width and
//! is added after the LSTM. A dense head reads the last time step.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{
    add, load_params_into, save_params, AdamState, CausalConv1d, Dense, Differentiable, Lstm,
    NdArray, Param, Tanh,
};

pub const DEFAULT_CHANNELS: [usize; 3] = [16, 32, 64];
pub const DEFAULT_DILATIONS: [usize; 3] = [1, 2, 4];
pub const DEFAULT_KERNEL: usize = 3;
pub const DEFAULT_WINDOW: usize = 24;
pub const DEFAULT_HORIZON: usize = 1;
pub const DEFAULT_BASELINE_LSTM_HIDDEN: usize = 64;
pub const DEFAULT_MLP_WIDTHS: [usize; 2] = [64, 64];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Variant {
    MultiTcnLstm,
    Lstm,
    Mlp,
}

impl Variant {
    pub fn as_str(&self) -> &'static str {
        match self {
            Variant::MultiTcnLstm => "multi-tcn-lstm",
            Variant::Lstm => "lstm",
            Variant::Mlp => "mlp",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "multi-tcn-lstm" => Ok(Variant::MultiTcnLstm),
            "lstm" => Ok(Variant::Lstm),
            "mlp" => Ok(Variant::Mlp),
            other => Err(Error::Usage(format!(
                "unknown variant {other:?} (expected multi-tcn-lstm, lstm or mlp)"
            ))),
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiTcnLstmConfig {
    pub channels: Vec<usize>,
    pub kernel: usize,
    pub dilations: Vec<usize>,
    /// Per-block LSTM width; defaults to the block's channel count.
    pub lstm_hidden: Vec<usize>,
    pub window: usize,
    pub horizon: usize,
    pub seed: u64,
}

impl Default for MultiTcnLstmConfig {
    fn default() -> Self {
        MultiTcnLstmConfig {
            channels: DEFAULT_CHANNELS.to_vec(),
            kernel: DEFAULT_KERNEL,
            dilations: DEFAULT_DILATIONS.to_vec(),
            lstm_hidden: DEFAULT_CHANNELS.to_vec(),
            window: DEFAULT_WINDOW,
            horizon: DEFAULT_HORIZON,
            seed: 0,
        }
    }
}

impl MultiTcnLstmConfig {
    /// Same architecture at a narrower width, keeping the dilation plan.
    pub fn with_channels(channels: &[usize], seed: u64) -> Self {
        MultiTcnLstmConfig {
            channels: channels.to_vec(),
            lstm_hidden: channels.to_vec(),
            dilations: DEFAULT_DILATIONS[..channels.len().min(3)].to_vec(),
            seed,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() {
            return Err(Error::Validation("channels must be non-empty".into()));
        }
        if self.dilations.len() != self.channels.len()
            || self.lstm_hidden.len() != self.channels.len()
        {
            return Err(Error::Validation(format!(
                "channels ({}), dilations ({}) and lstm_hidden ({}) must have equal length",
                self.channels.len(),
                self.dilations.len(),
                self.lstm_hidden.len()
            )));
        }
        if self.kernel < 1 || self.window < 1 || self.horizon < 1 {
            return Err(Error::Validation(
                "kernel, window and horizon must be >= 1".into(),
            ));
        }
        if self.channels.contains(&0)
            || self.dilations.contains(&0)
            || self.lstm_hidden.contains(&0)
        {
            return Err(Error::Validation(
                "channels, dilations and lstm_hidden entries must be >= 1".into(),
            ));
        }
        let max_dilation = self.dilations.iter().max().copied().unwrap_or(1);
        let receptive = (self.kernel - 1) * max_dilation + 1;
        if self.window < receptive {
            return Err(Error::Validation(format!(
                "window {} shorter than the {} hour receptive field",
                self.window, receptive
            )));
        }
        Ok(())
    }

    /// Exact number of scalar parameters the built model will have.
    pub fn param_count(&self) -> usize {
        let mut total = 0usize;
        let mut width = 1usize; // univariate input
        for i in 0..self.channels.len() {
            let (c, h) = (self.channels[i], self.lstm_hidden[i]);
            total += self.kernel * width * c + c; // conv
            total += 4 * h * c + 4 * h * h + 4 * h; // lstm
            total += width * h + h; // residual projection
            width = h;
        }
        total += width * self.horizon + self.horizon; // head
        total
    }
}

struct TcnLstmBlock {
    conv: CausalConv1d,
    lstm: Lstm,
    residual: CausalConv1d,
}

enum Arch {
    MultiTcnLstm {
        blocks: Vec<TcnLstmBlock>,
        head: Dense,
    },
    Lstm {
        lstm: Box<Lstm>,
        head: Dense,
    },
    Mlp {
        layers: Vec<Dense>,
        activations: Vec<Tanh>,
    },
}

/// A configured model with its parameters, gradient buffers and Adam
/// state. Forward is pure with respect to the weights; no hidden state is
/// carried across calls.
pub struct ModelGraph {
    pub spec: ModelSpec,
    arch: Arch,
    pub optimizer: AdamState,
    cached_time: usize,
    cached_width: usize,
}

impl ModelGraph {
    pub fn window(&self) -> usize {
        self.spec.window()
    }

    pub fn horizon(&self) -> usize {
        self.spec.horizon()
    }

    pub fn variant(&self) -> Variant {
        self.spec.variant()
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.value.len()).sum()
    }

    pub fn save_weights(&self, path: &Path) -> Result<()> {
        save_params(path, &self.params())
    }

    pub fn load_weights(&mut self, path: &Path) -> Result<()> {
        load_params_into(path, &mut self.params_mut())
    }

    fn check_window(&self, input: &NdArray) -> Result<()> {
        let window = self.window();
        if input.shape() != [window, 1] {
            return Err(Error::Shape(format!(
                "model expects a [{window}, 1] window, got {:?}",
                input.shape()
            )));
        }
        Ok(())
    }
}

impl Differentiable for ModelGraph {
    fn forward(&mut self, input: &NdArray) -> Result<NdArray> {
        self.check_window(input)?;
        match &mut self.arch {
            Arch::MultiTcnLstm { blocks, head } => {
                let mut x = input.clone();
                for (idx, block) in blocks.iter_mut().enumerate() {
                    let c = block.conv.forward(&x)?;
                    let h = block.lstm.forward(&c)?;
                    let r = block.residual.forward(&x)?;
                    let y = add(&h, &r)?;
                    if !y.is_finite() {
                        return Err(Error::Numeric(format!(
                            "block {idx} produced a non-finite activation"
                        )));
                    }
                    x = y;
                }
                let time = x.shape()[0];
                let width = x.shape()[1];
                self.cached_time = time;
                self.cached_width = width;
                let last = NdArray::from_vec(
                    &[width],
                    x.data()[(time - 1) * width..].to_vec(),
                )?;
                let out = head.forward(&last)?;
                if !out.is_finite() {
                    return Err(Error::Numeric("head produced a non-finite output".into()));
                }
                Ok(out)
            }
            Arch::Lstm { lstm, head } => {
                let h = lstm.forward(input)?;
                let time = h.shape()[0];
                let width = h.shape()[1];
                self.cached_time = time;
                self.cached_width = width;
                let last =
                    NdArray::from_vec(&[width], h.data()[(time - 1) * width..].to_vec())?;
                let out = head.forward(&last)?;
                if !out.is_finite() {
                    return Err(Error::Numeric("lstm baseline produced a non-finite output".into()));
                }
                Ok(out)
            }
            Arch::Mlp { layers, activations } => {
                let mut x = NdArray::from_vec(&[input.len()], input.data().to_vec())?;
                for (i, layer) in layers.iter_mut().enumerate() {
                    x = layer.forward(&x)?;
                    if i < activations.len() {
                        x = activations[i].forward(&x)?;
                    }
                }
                if !x.is_finite() {
                    return Err(Error::Numeric("mlp produced a non-finite output".into()));
                }
                Ok(x)
            }
        }
    }

    fn backward(&mut self, grad_out: &NdArray) -> Result<NdArray> {
        let horizon = self.horizon();
        if grad_out.len() != horizon {
            return Err(Error::Shape(format!(
                "model backward expects {horizon} output grads, got {:?}",
                grad_out.shape()
            )));
        }
        match &mut self.arch {
            Arch::MultiTcnLstm { blocks, head } => {
                let g_last = head.backward(grad_out)?;
                let (time, width) = (self.cached_time, self.cached_width);
                let mut g = NdArray::zeros(&[time, width]);
                g.data_mut()[(time - 1) * width..].copy_from_slice(g_last.data());
                for block in blocks.iter_mut().rev() {
                    let g_conv_out = block.lstm.backward(&g)?;
                    let g_from_conv = block.conv.backward(&g_conv_out)?;
                    let g_from_res = block.residual.backward(&g)?;
                    g = add(&g_from_conv, &g_from_res)?;
                }
                Ok(g)
            }
            Arch::Lstm { lstm, head } => {
                let g_last = head.backward(grad_out)?;
                let (time, width) = (self.cached_time, self.cached_width);
                let mut g = NdArray::zeros(&[time, width]);
                g.data_mut()[(time - 1) * width..].copy_from_slice(g_last.data());
                lstm.backward(&g)
            }
            Arch::Mlp { layers, activations } => {
                let mut g = grad_out.clone();
                for i in (0..layers.len()).rev() {
                    if i < activations.len() {
                        g = activations[i].backward(&g)?;
                    }
                    g = layers[i].backward(&g)?;
                }
                NdArray::from_vec(&[g.len(), 1], g.data().to_vec())
            }
        }
    }

    fn params(&self) -> Vec<&Param> {
        match &self.arch {
            Arch::MultiTcnLstm { blocks, head } => {
                let mut out = Vec::new();
                for b in blocks {
                    out.extend(b.conv.params());
                    out.extend(b.lstm.params());
                    out.extend(b.residual.params());
                }
                out.extend(head.params());
                out
            }
            Arch::Lstm { lstm, head } => {
                let mut out = lstm.params();
                out.extend(head.params());
                out
            }
            Arch::Mlp { layers, .. } => layers.iter().flat_map(|l| l.params()).collect(),
        }
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        match &mut self.arch {
            Arch::MultiTcnLstm { blocks, head } => {
                let mut out = Vec::new();
                for b in blocks.iter_mut() {
                    out.extend(b.conv.params_mut());
                    out.extend(b.lstm.params_mut());
                    out.extend(b.residual.params_mut());
                }
                out.extend(head.params_mut());
                out
            }
            Arch::Lstm { lstm, head } => {
                let mut out = lstm.params_mut();
                out.extend(head.params_mut());
                out
            }
            Arch::Mlp { layers, .. } => layers.iter_mut().flat_map(|l| l.params_mut()).collect(),
        }
    }
}

/// Builds the stacked TCN-LSTM model. Initialization is deterministic
/// under the config seed.
pub fn build(config: &MultiTcnLstmConfig) -> Result<ModelGraph> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut blocks = Vec::with_capacity(config.channels.len());
    let mut width = 1usize;
    for i in 0..config.channels.len() {
        let prefix = format!("block{i}");
        let conv = CausalConv1d::new(
            &format!("{prefix}.conv"),
            width,
            config.channels[i],
            config.kernel,
            config.dilations[i],
            &mut rng,
        )?;
        let lstm = Lstm::new(
            &format!("{prefix}.lstm"),
            config.channels[i],
            config.lstm_hidden[i],
            &mut rng,
        )?;
        let residual = CausalConv1d::pointwise(
            &format!("{prefix}.res"),
            width,
            config.lstm_hidden[i],
            &mut rng,
        )?;
        width = config.lstm_hidden[i];
        blocks.push(TcnLstmBlock {
            conv,
            lstm,
            residual,
        });
    }
    let head = Dense::new("head", width, config.horizon, &mut rng)?;
    Ok(ModelGraph {
        spec: ModelSpec::MultiTcnLstm(config.clone()),
        arch: Arch::MultiTcnLstm { blocks, head },
        optimizer: AdamState::new(1e-3),
        cached_time: 0,
        cached_width: 0,
    })
}

/// Single LSTM plus dense head.
pub fn build_baseline_lstm(
    hidden: usize,
    window: usize,
    horizon: usize,
    seed: u64,
) -> Result<ModelGraph> {
    if hidden < 1 || window < 1 || horizon < 1 {
        return Err(Error::Validation(
            "lstm baseline needs hidden, window, horizon >= 1".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lstm = Lstm::new("lstm", 1, hidden, &mut rng)?;
    let head = Dense::new("head", hidden, horizon, &mut rng)?;
    Ok(ModelGraph {
        spec: ModelSpec::Lstm {
            hidden,
            window,
            horizon,
            seed,
        },
        arch: Arch::Lstm {
            lstm: Box::new(lstm),
            head,
        },
        optimizer: AdamState::new(1e-3),
        cached_time: 0,
        cached_width: 0,
    })
}

/// Flattened window through tanh hidden layers; empty widths degenerate
/// to a plain linear map.
pub fn build_baseline_mlp(
    widths: &[usize],
    window: usize,
    horizon: usize,
    seed: u64,
) -> Result<ModelGraph> {
    if window < 1 || horizon < 1 || widths.contains(&0) {
        return Err(Error::Validation(
            "mlp baseline needs window, horizon and widths >= 1".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers = Vec::new();
    let mut activations = Vec::new();
    let mut n_in = window;
    for (i, w) in widths.iter().enumerate() {
        layers.push(Dense::new(&format!("fc{i}"), n_in, *w, &mut rng)?);
        activations.push(Tanh::new());
        n_in = *w;
    }
    layers.push(Dense::new("head", n_in, horizon, &mut rng)?);
    Ok(ModelGraph {
        spec: ModelSpec::Mlp {
            widths: widths.to_vec(),
            window,
            horizon,
            seed,
        },
        arch: Arch::Mlp {
            layers,
            activations,
        },
        optimizer: AdamState::new(1e-3),
        cached_time: 0,
        cached_width: 0,
    })
}

/// Serializable description of a model, enough to rebuild its graph and
/// reload weights.
#[derive(Debug, Clone, PartialEq)]
pub enum ModelSpec {
    MultiTcnLstm(MultiTcnLstmConfig),
    Lstm {
        hidden: usize,
        window: usize,
        horizon: usize,
        seed: u64,
    },
    Mlp {
        widths: Vec<usize>,
        window: usize,
        horizon: usize,
        seed: u64,
    },
}

impl ModelSpec {
    pub fn variant(&self) -> Variant {
        match self {
            ModelSpec::MultiTcnLstm(_) => Variant::MultiTcnLstm,
            ModelSpec::Lstm { .. } => Variant::Lstm,
            ModelSpec::Mlp { .. } => Variant::Mlp,
        }
    }

    pub fn window(&self) -> usize {
        match self {
            ModelSpec::MultiTcnLstm(c) => c.window,
            ModelSpec::Lstm { window, .. } | ModelSpec::Mlp { window, .. } => *window,
        }
    }

    pub fn horizon(&self) -> usize {
        match self {
            ModelSpec::MultiTcnLstm(c) => c.horizon,
            ModelSpec::Lstm { horizon, .. } | ModelSpec::Mlp { horizon, .. } => *horizon,
        }
    }

    pub fn build(&self) -> Result<ModelGraph> {
        match self {
            ModelSpec::MultiTcnLstm(c) => build(c),
            ModelSpec::Lstm {
                hidden,
                window,
                horizon,
                seed,
            } => build_baseline_lstm(*hidden, *window, *horizon, *seed),
            ModelSpec::Mlp {
                widths,
                window,
                horizon,
                seed,
            } => build_baseline_mlp(widths, *window, *horizon, *seed),
        }
    }

    /// key = value lines used in model meta files.
    pub fn to_kv(&self) -> Vec<(String, String)> {
        let join = |v: &[usize]| {
            v.iter()
                .map(|x| x.to_string())
                .collect::<Vec<_>>()
                .join(",")
        };
        match self {
            ModelSpec::MultiTcnLstm(c) => vec![
                ("variant".into(), self.variant().to_string()),
                ("channels".into(), join(&c.channels)),
                ("kernel".into(), c.kernel.to_string()),
                ("dilations".into(), join(&c.dilations)),
                ("lstm_hidden".into(), join(&c.lstm_hidden)),
                ("window".into(), c.window.to_string()),
                ("horizon".into(), c.horizon.to_string()),
                ("seed".into(), c.seed.to_string()),
            ],
            ModelSpec::Lstm {
                hidden,
                window,
                horizon,
                seed,
            } => vec![
                ("variant".into(), self.variant().to_string()),
                ("hidden".into(), hidden.to_string()),
                ("window".into(), window.to_string()),
                ("horizon".into(), horizon.to_string()),
                ("seed".into(), seed.to_string()),
            ],
            ModelSpec::Mlp {
                widths,
                window,
                horizon,
                seed,
            } => vec![
                ("variant".into(), self.variant().to_string()),
                ("widths".into(), join(widths)),
                ("window".into(), window.to_string()),
                ("horizon".into(), horizon.to_string()),
                ("seed".into(), seed.to_string()),
            ],
        }
    }

    pub fn from_kv(kv: &BTreeMap<String, String>) -> Result<Self> {
        let get = |key: &str| -> Result<&String> {
            kv.get(key)
                .ok_or_else(|| Error::Data(format!("model spec missing key {key}")))
        };
        let parse_usize = |key: &str| -> Result<usize> {
            get(key)?
                .parse()
                .map_err(|_| Error::Data(format!("model spec key {key} is not an integer")))
        };
        let parse_u64 = |key: &str| -> Result<u64> {
            get(key)?
                .parse()
                .map_err(|_| Error::Data(format!("model spec key {key} is not an integer")))
        };
        let parse_list = |key: &str| -> Result<Vec<usize>> {
            get(key)?
                .split(',')
                .map(|s| {
                    s.trim()
                        .parse()
                        .map_err(|_| Error::Data(format!("model spec key {key} has a bad entry")))
                })
                .collect()
        };
        let variant: Variant = get("variant")?.parse()?;
        match variant {
            Variant::MultiTcnLstm => Ok(ModelSpec::MultiTcnLstm(MultiTcnLstmConfig {
                channels: parse_list("channels")?,
                kernel: parse_usize("kernel")?,
                dilations: parse_list("dilations")?,
                lstm_hidden: parse_list("lstm_hidden")?,
                window: parse_usize("window")?,
                horizon: parse_usize("horizon")?,
                seed: parse_u64("seed")?,
            })),
            Variant::Lstm => Ok(ModelSpec::Lstm {
                hidden: parse_usize("hidden")?,
                window: parse_usize("window")?,
                horizon: parse_usize("horizon")?,
                seed: parse_u64("seed")?,
            }),
            Variant::Mlp => Ok(ModelSpec::Mlp {
                widths: parse_list("widths")?,
                window: parse_usize("window")?,
                horizon: parse_usize("horizon")?,
                seed: parse_u64("seed")?,
            }),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::grad_check;
    use rand::Rng;

    fn random_window(seed: u64, window: usize) -> NdArray {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = NdArray::zeros(&[window, 1]);
        for v in out.data_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
        out
    }

    #[test]
    fn minimal_model_parameter_count() {
        // channels [1], kernel 1, dilation [1], lstm_hidden [1], horizon 1:
        // conv 1*1*1+1, lstm 4*(1+1+1), residual 1*1+1, head 1*1+1 = 18.
        let config = MultiTcnLstmConfig {
            channels: vec![1],
            kernel: 1,
            dilations: vec![1],
            lstm_hidden: vec![1],
            window: 4,
            horizon: 1,
            seed: 0,
        };
        assert_eq!(config.param_count(), 18);
        let model = build(&config).unwrap();
        assert_eq!(model.param_count(), 18);
    }

    #[test]
    fn default_config_builds() {
        let config = MultiTcnLstmConfig::default();
        let model = build(&config).unwrap();
        assert_eq!(model.param_count(), config.param_count());
        assert_eq!(model.window(), 24);
        assert_eq!(model.horizon(), 1);
    }

    #[test]
    fn same_seed_same_weights() {
        let config = MultiTcnLstmConfig::with_channels(&[4, 8], 42);
        let a = build(&config).unwrap();
        let b = build(&config).unwrap();
        for (pa, pb) in a.params().iter().zip(b.params()) {
            assert_eq!(pa.value, pb.value);
            assert_eq!(pa.name, pb.name);
        }
    }

    #[test]
    fn window_receptive_field_validation() {
        // Receptive field of the default plan is (3-1)*4+1 = 9 hours.
        let config = MultiTcnLstmConfig {
            window: 8,
            ..Default::default()
        };
        assert!(config.validate().is_err());
    }

    #[test]
    fn zero_weights_forward_zero() {
        let config = MultiTcnLstmConfig::with_channels(&[2, 3], 1);
        let mut model = build(&config).unwrap();
        for p in model.params_mut() {
            p.value.fill(0.0);
        }
        let out = model.forward(&random_window(3, 24)).unwrap();
        assert!(out.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn residual_wiring_passes_input_through() {
        // One block, 1 channel everywhere: zero the conv, LSTM and head
        // contributions, set the residual projection to identity. Block
        // output must equal block input; the head picks the last value.
        let config = MultiTcnLstmConfig {
            channels: vec![1],
            kernel: 2,
            dilations: vec![1],
            lstm_hidden: vec![1],
            window: 6,
            horizon: 1,
            seed: 9,
        };
        let mut model = build(&config).unwrap();
        for p in model.params_mut() {
            match p.name.as_str() {
                "block0.res.weight" | "head.weight" => p.value.fill(1.0),
                _ => p.value.fill(0.0),
            }
        }
        let window = random_window(4, 6);
        let out = model.forward(&window).unwrap();
        assert!((out.data()[0] - window.data()[5]).abs() < 1e-15);
    }

    #[test]
    fn forward_is_pure_across_calls() {
        let config = MultiTcnLstmConfig::with_channels(&[3, 4], 5);
        let mut model = build(&config).unwrap();
        let w = random_window(1, 24);
        let a = model.forward(&w).unwrap();
        let _ = model.forward(&random_window(2, 24)).unwrap();
        let b = model.forward(&w).unwrap();
        assert_eq!(a, b);
    }

    /// Straight-line reference composition of the same layer primitives,
    /// wired independently of ModelGraph.
    #[test]
    fn forward_matches_independent_composition() {
        let config = MultiTcnLstmConfig {
            channels: vec![3, 5],
            kernel: 3,
            dilations: vec![1, 2],
            lstm_hidden: vec![3, 5],
            window: 12,
            horizon: 2,
            seed: 77,
        };
        let mut model = build(&config).unwrap();
        let window = random_window(8, 12);
        let expect = model.forward(&window).unwrap();

        // Rebuild raw layers with the same seed stream as `build`.
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut conv0 = CausalConv1d::new("c0", 1, 3, 3, 1, &mut rng).unwrap();
        let mut lstm0 = Lstm::new("l0", 3, 3, &mut rng).unwrap();
        let mut res0 = CausalConv1d::pointwise("r0", 1, 3, &mut rng).unwrap();
        let mut conv1 = CausalConv1d::new("c1", 3, 5, 3, 2, &mut rng).unwrap();
        let mut lstm1 = Lstm::new("l1", 5, 5, &mut rng).unwrap();
        let mut res1 = CausalConv1d::pointwise("r1", 3, 5, &mut rng).unwrap();
        let mut head = Dense::new("h", 5, 2, &mut rng).unwrap();

        let y0 = add(
            &lstm0.forward(&conv0.forward(&window).unwrap()).unwrap(),
            &res0.forward(&window).unwrap(),
        )
        .unwrap();
        let y1 = add(
            &lstm1.forward(&conv1.forward(&y0).unwrap()).unwrap(),
            &res1.forward(&y0).unwrap(),
        )
        .unwrap();
        let last = NdArray::from_vec(&[5], y1.data()[11 * 5..].to_vec()).unwrap();
        let reference = head.forward(&last).unwrap();

        for (a, b) in expect.data().iter().zip(reference.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn full_model_grad_check_at_reduced_width() {
        let config = MultiTcnLstmConfig::with_channels(&[2, 3], 13);
        let mut model = build(&config).unwrap();
        let window = random_window(21, 24);
        let target = NdArray::from_vec(&[1], vec![0.35]).unwrap();
        let err = grad_check(&mut model, &window, &target).unwrap();
        assert!(err <= 1e-4, "model grad check error {err}");
    }

    #[test]
    fn lstm_baseline_grad_check() {
        let mut model = build_baseline_lstm(6, 16, 1, 3).unwrap();
        let window = random_window(4, 16);
        let target = NdArray::from_vec(&[1], vec![-0.2]).unwrap();
        let err = grad_check(&mut model, &window, &target).unwrap();
        assert!(err <= 1e-4, "lstm baseline grad check error {err}");
    }

    #[test]
    fn mlp_zero_weights_zero_output() {
        let mut model = build_baseline_mlp(&[8, 8], 24, 1, 0).unwrap();
        for p in model.params_mut() {
            p.value.fill(0.0);
        }
        let out = model.forward(&random_window(5, 24)).unwrap();
        assert_eq!(out.data(), &[0.0]);
    }

    #[test]
    fn empty_widths_mlp_is_linear() {
        let mut model = build_baseline_mlp(&[], 4, 2, 1).unwrap();
        assert_eq!(model.param_count(), 4 * 2 + 2);
        // A linear map obeys superposition exactly (bias cancels in sums).
        let a = random_window(1, 4);
        let b = random_window(2, 4);
        let fa = model.forward(&a).unwrap();
        let fb = model.forward(&b).unwrap();
        let fsum = model.forward(&add(&a, &b).unwrap()).unwrap();
        let bias = model
            .params()
            .iter()
            .find(|p| p.name == "head.bias")
            .unwrap()
            .value
            .clone();
        for i in 0..2 {
            let lhs = fsum.data()[i] + bias.data()[i];
            let rhs = fa.data()[i] + fb.data()[i];
            assert!((lhs - rhs).abs() < 1e-12);
        }
    }

    #[test]
    fn mlp_grad_check() {
        let mut model = build_baseline_mlp(&[5], 8, 2, 7).unwrap();
        let window = random_window(6, 8);
        let target = NdArray::from_vec(&[2], vec![0.1, -0.4]).unwrap();
        let err = grad_check(&mut model, &window, &target).unwrap();
        assert!(err <= 1e-4, "mlp grad check error {err}");
    }

    #[test]
    fn model_spec_kv_round_trip() {
        let specs = vec![
            ModelSpec::MultiTcnLstm(MultiTcnLstmConfig::with_channels(&[4, 8, 16], 3)),
            ModelSpec::Lstm {
                hidden: 64,
                window: 24,
                horizon: 1,
                seed: 9,
            },
            ModelSpec::Mlp {
                widths: vec![64, 64],
                window: 24,
                horizon: 1,
                seed: 2,
            },
        ];
        for spec in specs {
            let kv: BTreeMap<String, String> = spec.to_kv().into_iter().collect();
            assert_eq!(ModelSpec::from_kv(&kv).unwrap(), spec);
        }
    }

    #[test]
    fn weights_round_trip_through_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.weights");
        let config = MultiTcnLstmConfig::with_channels(&[2, 2], 31);
        let model = build(&config).unwrap();
        model.save_weights(&path).unwrap();

        let mut other = build(&MultiTcnLstmConfig {
            seed: 99,
            ..config.clone()
        })
        .unwrap();
        other.load_weights(&path).unwrap();
        for (a, b) in model.params().iter().zip(other.params()) {
            for (x, y) in a.value.data().iter().zip(b.value.data()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }
}
