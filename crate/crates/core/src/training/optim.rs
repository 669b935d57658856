//! Adaptive-moment optimizer with coupled L2 regularization.

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::locnet::ModelParams;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok =
            (0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2) && self.eps > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(
                "adam betas must lie in [0, 1) and eps must be positive".into(),
            ))
        }
    }
}

/// First and second moment buffers shaped like the parameters they track.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(params: &ModelParams, config: AdamConfig) -> Self {
        let zeros: Vec<Vec<f64>> = params
            .tensors
            .iter()
            .map(|(_, t)| vec![0.0; t.numel()])
            .collect();
        Self {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One update from accumulated gradients. The regularizer adds
    /// `l2 · θ` to every gradient, i.e. it minimizes `l2/2 · ‖θ‖²`.
    pub fn update(&mut self, params: &mut ModelParams, grads: &[Vec<f64>], lr: f64, l2: f64) {
        assert_eq!(
            grads.len(),
            params.len(),
            "one gradient per parameter tensor"
        );
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for (k, (_, t)) in params.tensors.iter_mut().enumerate() {
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for (i, p) in t.data_mut().iter_mut().enumerate() {
                let g = grads[k][i] + l2 * *p;
                m[i] = beta1 * m[i] + (1.0 - beta1) * g;
                v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
                *p -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
            }
        }
    }

    pub fn push_into(&self, prefix: &str, names: &ModelParams, ck: &mut Checkpoint) {
        for (k, (n, t)) in names.tensors.iter().enumerate() {
            let shape = t.shape().to_vec();
            ck.push(
                format!("{prefix}m.{n}"),
                Tensor::new(shape.clone(), self.m[k].clone()).expect("moment shape"),
            );
            ck.push(
                format!("{prefix}v.{n}"),
                Tensor::new(shape, self.v[k].clone()).expect("moment shape"),
            );
        }
    }

    pub fn from_checkpoint(
        ck: &Checkpoint,
        prefix: &str,
        params: &ModelParams,
        config: AdamConfig,
        step: u64,
    ) -> Result<Self> {
        let mut s = Self::new(params, config);
        s.step = step;
        for (k, (n, t)) in params.tensors.iter().enumerate() {
            for (buf, tag) in [(&mut s.m[k], "m"), (&mut s.v[k], "v")] {
                let key = format!("{prefix}{tag}.{n}");
                let src = ck
                    .get(&key)
                    .ok_or_else(|| Error::format("checkpoint", format!("missing tensor {key}")))?;
                if src.shape() != t.shape() {
                    return Err(Error::Shape {
                        op: "optimizer state",
                        lhs: t.shape().to_vec(),
                        rhs: src.shape().to_vec(),
                    });
                }
                buf.copy_from_slice(src.data());
            }
        }
        Ok(s)
    }
}
