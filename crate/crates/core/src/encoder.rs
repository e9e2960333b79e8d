//! Temporal convolutional encoder.
//!
//! Stacked residual blocks of dilated causal convolutions (block `l` uses dilation `2^l`),
//! adaptive max pooling over time, a linear projection and L2 normalization. Because every
//! layer before pooling is causal, the features of a window's first `C` timesteps are exactly
//! the features of its context window on its own; [`Encoder::embed_pair`] pools both from a
//! single convolution pass.

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Graph, ParameterSet, Tensor, Var};
use crate::series::Window;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub input_channels: usize,
    pub num_blocks: usize,
    #[serde(default = "defaults::kernel_size")]
    pub kernel_size: usize,
    #[serde(default = "defaults::hidden_channels")]
    pub hidden_channels: usize,
    #[serde(default = "defaults::embedding_dim")]
    pub embedding_dim: usize,
    #[serde(default = "defaults::leaky_slope")]
    pub leaky_slope: f64,
}

mod defaults {
    pub fn kernel_size() -> usize {
        3
    }
    pub fn hidden_channels() -> usize {
        32
    }
    pub fn embedding_dim() -> usize {
        64
    }
    pub fn leaky_slope() -> f64 {
        0.01
    }
}

/// Convolutions per residual block.
pub const CONVS_PER_BLOCK: usize = 2;

/// `1 + convs_per_block * (k - 1) * (2^blocks - 1)`.
pub fn receptive_field(num_blocks: usize, kernel_size: usize) -> usize {
    1 + CONVS_PER_BLOCK * kernel_size.saturating_sub(1) * ((1usize << num_blocks) - 1)
}

impl EncoderConfig {
    /// Default layer sizes with the fewest blocks whose receptive field covers `window_length`.
    pub fn for_window(input_channels: usize, window_length: usize) -> Self {
        let kernel_size = defaults::kernel_size();
        let mut num_blocks = 1;
        while receptive_field(num_blocks, kernel_size) < window_length {
            num_blocks += 1;
        }
        Self {
            input_channels,
            num_blocks,
            kernel_size,
            hidden_channels: defaults::hidden_channels(),
            embedding_dim: defaults::embedding_dim(),
            leaky_slope: defaults::leaky_slope(),
        }
    }

    pub fn receptive_field(&self) -> usize {
        receptive_field(self.num_blocks, self.kernel_size)
    }

    pub fn validate(&self) -> Result<()> {
        let sizes = [
            ("input_channels", self.input_channels),
            ("num_blocks", self.num_blocks),
            ("hidden_channels", self.hidden_channels),
            ("embedding_dim", self.embedding_dim),
        ];
        if let Some((name, _)) = sizes.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("encoder {name} must be positive")));
        }
        if self.kernel_size < 2 {
            return Err(Error::Config(format!("encoder kernel_size must be >= 2, got {}", self.kernel_size)));
        }
        if self.num_blocks > 20 {
            return Err(Error::Config(format!("encoder num_blocks {} is unreasonably deep", self.num_blocks)));
        }
        if !self.leaky_slope.is_finite() {
            return Err(Error::Config("encoder leaky_slope must be finite".into()));
        }
        Ok(())
    }

    /// Logs a warning when the receptive field is shorter than the window.
    pub fn check_window(&self, window_length: usize) {
        if self.receptive_field() < window_length {
            log::warn!(
                "encoder receptive field {} is shorter than the window length {window_length}",
                self.receptive_field()
            );
        }
    }

    fn block_in(&self, block: usize) -> usize {
        if block == 0 {
            self.input_channels
        } else {
            self.hidden_channels
        }
    }
}

/// Unit-norm embedding vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding(Vec<f64>);

impl Embedding {
    /// Wraps raw values without normalizing them.
    pub fn new(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Parameters of one forward pass, keyed by name.
#[derive(Debug, Clone)]
pub struct BoundParams {
    vars: HashMap<String, Var>,
}

impl BoundParams {
    pub fn var(&self, name: &str) -> Var {
        self.vars[name]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    config: EncoderConfig,
}

impl Encoder {
    pub fn new(config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    /// Parameter names, shapes and fan-in (`None` for biases), in name order.
    fn layout(&self) -> Vec<(String, Vec<usize>, Option<usize>)> {
        let cfg = &self.config;
        let (h, k) = (cfg.hidden_channels, cfg.kernel_size);
        let mut out = Vec::new();
        let mut layer = |name: String, shape: Vec<usize>, fan_in: usize| {
            out.push((format!("{name}.bias"), vec![shape[0]], None));
            out.push((format!("{name}.weight"), shape, Some(fan_in)));
        };
        for b in 0..cfg.num_blocks {
            let cin = cfg.block_in(b);
            layer(format!("block{b}.conv1"), vec![h, cin, k], cin * k);
            layer(format!("block{b}.conv2"), vec![h, h, k], h * k);
            if cin != h {
                layer(format!("block{b}.skip"), vec![h, cin, 1], cin);
            }
        }
        layer("proj".into(), vec![cfg.embedding_dim, h], h);
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out
    }

    /// Fan-in uniform weights in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`, zero biases.
    pub fn init_parameters<R: Rng + ?Sized>(&self, rng: &mut R) -> ParameterSet {
        let mut params = ParameterSet::new();
        for (name, shape, fan_in) in self.layout() {
            let tensor = match fan_in {
                Some(fan) => {
                    let bound = 1.0 / (fan as f64).sqrt();
                    let n = shape.iter().product();
                    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-bound..bound)).collect())
                        .expect("layout shape")
                }
                None => Tensor::zeros(shape),
            };
            params.insert(name, tensor).expect("layout names are unique");
        }
        params
    }

    /// Checks that a parameter set has exactly the shapes this encoder expects.
    pub fn check_parameters(&self, params: &ParameterSet) -> Result<()> {
        let layout = self.layout();
        if layout.len() != params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter tensors, found {}",
                layout.len(),
                params.len()
            )));
        }
        for (name, shape, _) in layout {
            let got = params.require(&name)?;
            if got.shape() != shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{name}` has shape {:?}, expected {shape:?}",
                    got.shape()
                )));
            }
        }
        Ok(())
    }

    /// Registers parameters on a graph, trainable or frozen.
    pub fn bind(&self, g: &mut Graph, params: &ParameterSet, trainable: bool) -> Result<BoundParams> {
        let mut vars = HashMap::with_capacity(params.len());
        for (name, t) in params.iter() {
            let v = if trainable {
                g.parameter(t.clone())?
            } else {
                g.constant(t.clone())?
            };
            vars.insert(name.to_string(), v);
        }
        Ok(BoundParams { vars })
    }

    /// Pre-pooling features `[N, H, T]` for input `[N, D, T]`.
    pub fn features(&self, g: &mut Graph, p: &BoundParams, input: Var) -> Result<Var> {
        let shape = g.shape(input);
        if shape.len() != 3 || shape[1] != self.config.input_channels {
            return Err(Error::DimensionMismatch {
                expected: self.config.input_channels,
                got: shape.get(1).copied().unwrap_or(0),
            });
        }
        let slope = self.config.leaky_slope;
        let mut x = input;
        for b in 0..self.config.num_blocks {
            let dilation = 1 << b;
            let pre = format!("block{b}");
            let c1 = g.conv1d_causal(
                x,
                p.var(&format!("{pre}.conv1.weight")),
                Some(p.var(&format!("{pre}.conv1.bias"))),
                dilation,
            )?;
            let a1 = g.leaky_relu(c1, slope)?;
            let c2 = g.conv1d_causal(
                a1,
                p.var(&format!("{pre}.conv2.weight")),
                Some(p.var(&format!("{pre}.conv2.bias"))),
                dilation,
            )?;
            let a2 = g.leaky_relu(c2, slope)?;
            let skip = if self.config.block_in(b) != self.config.hidden_channels {
                g.conv1d_causal(
                    x,
                    p.var(&format!("{pre}.skip.weight")),
                    Some(p.var(&format!("{pre}.skip.bias"))),
                    1,
                )?
            } else {
                x
            };
            x = g.add(a2, skip)?;
        }
        Ok(x)
    }

    /// Embeddings `[N, E]` pooled from the first `len` timesteps of `features`.
    pub fn embed(&self, g: &mut Graph, p: &BoundParams, features: Var, len: usize) -> Result<Var> {
        let pooled = g.max_pool_time(features, len)?;
        let z = g.linear(pooled, p.var("proj.weight"), Some(p.var("proj.bias")))?;
        g.l2_normalize_rows(z)
    }

    /// Full-window and context embeddings of a batch of windows sharing one spec.
    pub fn embed_pair(&self, g: &mut Graph, p: &BoundParams, windows: &[Window]) -> Result<(Var, Var)> {
        let first = windows.first().ok_or_else(|| Error::Shape {
            op: "embed_pair",
            detail: "empty batch".into(),
        })?;
        let spec = first.spec();
        let input = g.constant(windows_to_tensor(windows)?)?;
        let feats = self.features(g, p, input)?;
        let z = self.embed(g, p, feats, spec.length())?;
        let zc = self.embed(g, p, feats, spec.context_length)?;
        Ok((z, zc))
    }

    /// Embeds `[N, D, T]` input in one pass with frozen parameters.
    pub fn encode_tensor(&self, params: &ParameterSet, input: Tensor) -> Result<Vec<Embedding>> {
        let mut g = Graph::new();
        let p = self.bind(&mut g, params, false)?;
        let t = input.shape().get(2).copied().unwrap_or(0);
        let x = g.constant(input)?;
        let feats = self.features(&mut g, &p, x)?;
        let z = self.embed(&mut g, &p, feats, t)?;
        Ok(rows(g.value(z)))
    }

    /// Embeds one row-major `T x D` sequence of any length `T >= 1`.
    pub fn encode(&self, params: &ParameterSet, values: &[f64]) -> Result<Embedding> {
        let d = self.config.input_channels;
        if values.is_empty() || values.len() % d != 0 {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: values.len(),
            });
        }
        let input = rows_to_channel_major(&[values], values.len() / d, d)?;
        Ok(self.encode_tensor(params, input)?.remove(0))
    }
}

/// Splits `[N, E]` into embeddings.
pub fn rows(t: &Tensor) -> Vec<Embedding> {
    let e = t.shape()[1];
    t.data().chunks(e).map(|r| Embedding(r.to_vec())).collect()
}

/// Stacks row-major `T x D` sequences into a channel-major `[N, D, T]` tensor.
pub fn rows_to_channel_major(seqs: &[&[f64]], len: usize, channels: usize) -> Result<Tensor> {
    let mut data = vec![0.0; seqs.len() * channels * len];
    for (n, seq) in seqs.iter().enumerate() {
        if seq.len() != len * channels {
            return Err(Error::Shape {
                op: "rows_to_channel_major",
                detail: format!("sequence of {} values, expected {}x{}", seq.len(), len, channels),
            });
        }
        for t in 0..len {
            for c in 0..channels {
                data[(n * channels + c) * len + t] = seq[t * channels + c];
            }
        }
    }
    Tensor::new(vec![seqs.len(), channels, len], data)
}

/// Channel-major batch tensor from windows with a common spec and channel count.
pub fn windows_to_tensor(windows: &[Window]) -> Result<Tensor> {
    let first = windows.first().ok_or_else(|| Error::Shape {
        op: "windows_to_tensor",
        detail: "empty batch".into(),
    })?;
    let (len, d) = (first.len(), first.channels());
    if let Some(w) = windows.iter().find(|w| w.len() != len || w.channels() != d) {
        return Err(Error::Shape {
            op: "windows_to_tensor",
            detail: format!("window {}x{} in a batch of {}x{}", w.len(), w.channels(), len, d),
        });
    }
    let seqs: Vec<&[f64]> = windows.iter().map(Window::values).collect();
    rows_to_channel_major(&seqs, len, d)
}
