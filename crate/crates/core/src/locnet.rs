//! Small convolutional backbones used as localization networks and as the
//! robustness classifier's feature extractor.
//!
//! Each stage is a 3×3 stride-2 convolution followed by ReLU, optionally with
//! a residual 3×3 stride-1 block. The final feature map is pooled (flattened
//! or globally averaged) and fed to one dense layer emitting `head_dim` raw
//! outputs.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Graph, Padding, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    /// Keep the spatial layout; the head sees every cell.
    #[default]
    Flatten,
    GlobalAverage,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub input_size: (usize, usize),
    pub in_channels: usize,
    /// Output channels of each stride-2 stage.
    pub widths: Vec<usize>,
    pub residual: bool,
    pub pooling: Pooling,
    pub head_dim: usize,
    /// Constant factor applied to the input before the first convolution.
    pub input_gain: f64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            input_size: (96, 96),
            in_channels: 1,
            widths: vec![8, 16, 16, 16],
            residual: false,
            pooling: Pooling::Flatten,
            head_dim: 2,
            input_gain: 10.0,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.widths.len() < 2 {
            return Err(Error::Config(
                "backbone needs at least 2 conv stages".into(),
            ));
        }
        if self.widths.contains(&0) || self.in_channels == 0 {
            return Err(Error::Config("backbone stage with zero channels".into()));
        }
        if self.head_dim == 0 {
            return Err(Error::Config("backbone head_dim must be positive".into()));
        }
        if self.input_size.0 == 0 || self.input_size.1 == 0 {
            return Err(Error::Config("backbone input size must be positive".into()));
        }
        if !self.input_gain.is_finite() {
            return Err(Error::Config("backbone input_gain must be finite".into()));
        }
        Ok(())
    }

    pub fn with_head(&self, head_dim: usize) -> Self {
        Self {
            head_dim,
            ..self.clone()
        }
    }

    fn final_extent(&self) -> (usize, usize) {
        self.widths
            .iter()
            .fold(self.input_size, |(h, w), _| (h.div_ceil(2), w.div_ceil(2)))
    }

    fn feature_dim(&self) -> usize {
        let c = *self.widths.last().expect("validated");
        match self.pooling {
            Pooling::Flatten => {
                let (h, w) = self.final_extent();
                c * h * w
            }
            Pooling::GlobalAverage => c,
        }
    }

    /// `(name, shape)` of every parameter in build order.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let mut cin = self.in_channels;
        for (i, &c) in self.widths.iter().enumerate() {
            out.push((format!("stage{i}.conv.w"), vec![c, cin, 3, 3]));
            out.push((format!("stage{i}.conv.b"), vec![c]));
            if self.residual {
                out.push((format!("stage{i}.res.w"), vec![c, c, 3, 3]));
                out.push((format!("stage{i}.res.b"), vec![c]));
            }
            cin = c;
        }
        out.push(("head.w".into(), vec![self.head_dim, self.feature_dim()]));
        out.push(("head.b".into(), vec![self.head_dim]));
        out
    }

    /// Parameter count from the configuration alone.
    pub fn param_count(&self) -> usize {
        let mut n = 0;
        let mut cin = self.in_channels;
        for &c in &self.widths {
            n += c * cin * 9 + c;
            if self.residual {
                n += c * c * 9 + c;
            }
            cin = c;
        }
        n + self.head_dim * self.feature_dim() + self.head_dim
    }
}

/// Named parameter tensors in build order.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub tensors: Vec<(String, Tensor)>,
}

impl ModelParams {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn count(&self) -> usize {
        self.tensors.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(|(_, t)| t.is_finite())
    }

    /// SHA-256 over names, shapes and little-endian values.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in &self.tensors {
            h.update(name.as_bytes());
            for d in t.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Registers every tensor on `g`, tracked iff `trainable`.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Vec<Var> {
        self.tensors
            .iter()
            .map(|(_, t)| {
                if trainable {
                    g.leaf(t.clone().requiring_grad())
                } else {
                    g.constant(t.clone())
                }
            })
            .collect()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            tensors: self
                .tensors
                .iter()
                .map(|(n, t)| (n.clone(), Tensor::zeros(t.shape())))
                .collect(),
        }
    }

    pub fn push_into(&self, prefix: &str, ck: &mut crate::checkpoint::Checkpoint) {
        for (n, t) in &self.tensors {
            ck.push(format!("{prefix}{n}"), t.clone());
        }
    }

    /// Reads tensors `prefix + name` for every entry of `layout`.
    pub fn from_checkpoint(
        ck: &crate::checkpoint::Checkpoint,
        prefix: &str,
        layout: &[(String, Vec<usize>)],
    ) -> Result<Self> {
        let mut tensors = Vec::with_capacity(layout.len());
        for (name, shape) in layout {
            let key = format!("{prefix}{name}");
            let t = ck
                .get(&key)
                .ok_or_else(|| Error::format("checkpoint", format!("missing tensor {key}")))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Shape {
                    op: "checkpoint tensor",
                    lhs: shape.clone(),
                    rhs: t.shape().to_vec(),
                });
            }
            tensors.push((name.clone(), t.clone()));
        }
        Ok(Self { tensors })
    }
}

/// He (fan-in) initialisation. Head weights are additionally scaled by 0.1
/// so that raw outputs start near zero.
pub fn build(config: &BackboneConfig, seed: u64) -> Result<ModelParams> {
    config.validate()?;
    let mut rng = rng::rng(seed);
    let tensors = config
        .layout()
        .into_iter()
        .map(|(name, shape)| {
            let t = if name.ends_with(".b") {
                Tensor::zeros(&shape)
            } else {
                let fan_in: usize = shape[1..].iter().product();
                let gain = if name.starts_with("head") { 0.1 } else { 1.0 };
                let normal =
                    Normal::new(0.0, gain * (2.0 / fan_in as f64).sqrt()).expect("positive std");
                let n = shape.iter().product();
                Tensor::new(shape, (0..n).map(|_| normal.sample(&mut rng)).collect())
                    .expect("layout shape")
            };
            (name, t)
        })
        .collect();
    Ok(ModelParams { tensors })
}

/// Records the backbone on `g` for an input of shape `[C, H, W]` (or
/// `[H, W]` when single-channel). Returns the `[head_dim]` raw outputs.
pub fn forward(config: &BackboneConfig, g: &mut Graph, params: &[Var], input: Var) -> Result<Var> {
    let shape = g.shape(input).to_vec();
    let (h, w) = config.input_size;
    let ok = match shape.as_slice() {
        [a, b] => config.in_channels == 1 && (*a, *b) == (h, w),
        [c, a, b] => *c == config.in_channels && (*a, *b) == (h, w),
        _ => false,
    };
    if !ok {
        return Err(Error::Shape {
            op: "backbone input",
            lhs: vec![config.in_channels, h, w],
            rhs: shape,
        });
    }
    let mut x = g.reshape(input, &[config.in_channels, h, w])?;
    if config.input_gain != 1.0 {
        x = g.scale(x, config.input_gain);
    }
    let mut p = params.iter().copied();
    let mut next = || p.next().expect("param layout");
    for _ in &config.widths {
        let (wt, b) = (next(), next());
        let y = g.conv2d(x, wt, Some(b), 2, Padding::Same)?;
        x = g.relu(y);
        if config.residual {
            let (wt, b) = (next(), next());
            let r = g.conv2d(x, wt, Some(b), 1, Padding::Same)?;
            let s = g.add(x, r)?;
            x = g.relu(s);
        }
    }
    let feat = match config.pooling {
        Pooling::Flatten => {
            let n = g.value(x).numel();
            g.reshape(x, &[n, 1])?
        }
        Pooling::GlobalAverage => {
            let v = g.global_avg_pool(x)?;
            let n = g.value(v).numel();
            g.reshape(v, &[n, 1])?
        }
    };
    let (wt, b) = (next(), next());
    let y = g.matmul(wt, feat)?;
    let y = g.reshape(y, &[config.head_dim])?;
    g.add(y, b)
}

/// Untracked forward pass returning the raw outputs.
pub fn predict(config: &BackboneConfig, params: &ModelParams, input: &Tensor) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let pv = params.bind(&mut g, false);
    let x = g.constant(input.clone());
    let y = forward(config, &mut g, &pv, x)?;
    Ok(g.data(y).to_vec())
}
