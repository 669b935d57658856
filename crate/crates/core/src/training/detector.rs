//! The cascade detector and the direct-regression baseline.
//!
//! The cascade runs three localization networks. The first sees the input
//! image and predicts a translation; the second sees the image translated
//! by it and predicts a rotation; the third sees the translated and rotated
//! image and predicts the scale and the normalized gripper height. Every
//! stage samples the original image through the accumulated matrix, so the
//! final 32×32 crop is a single bilinear resampling of the input.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::autodiff::{Graph, Tensor, Var};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::graspgeom::{grasp_from_cascade, Cascade, GraspConfig, CROP_SIZE};
use crate::image::{DepthImage, ImageMeta};
use crate::locnet::{self, BackboneConfig, ModelParams};
use crate::rng;
use crate::stn::{self, heads, AffineParams, DatasetStats, HeadOutputs, RotationMapping};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetectorKind {
    /// Three constrained spatial transformers.
    GqStn,
    /// One backbone regressing all six raw outputs.
    DirectGrasp,
}

impl DetectorKind {
    pub fn name(self) -> &'static str {
        match self {
            DetectorKind::GqStn => "gq-stn",
            DetectorKind::DirectGrasp => "direct-grasp",
        }
    }
}

/// Recorded head outputs of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Heads {
    pub w: [Var; 6],
    pub x: Var,
    pub y: Var,
    pub alpha: Var,
    pub beta: Var,
    pub theta: Var,
    pub s: Var,
    /// Gripper height in meters.
    pub z: Var,
}

impl Heads {
    pub fn w_s(&self) -> Var {
        self.w[4]
    }

    pub fn w_z(&self) -> Var {
        self.w[5]
    }
}

#[derive(Clone, Debug)]
pub struct ForwardPass {
    pub heads: Heads,
    /// Inputs of the rotation and scale stages (cascade only).
    pub stage_inputs: Vec<Var>,
    /// The 32×32 crop fed to the classifier (cascade only).
    pub crop: Option<Var>,
}

/// One detection in image coordinates.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Detection {
    pub grasp: GraspConfig,
    /// `(x, y, θ, s)`.
    pub cascade: [f64; 4],
    pub raw: HeadOutputs,
    #[serde(skip)]
    pub crop: Option<Tensor>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Detector {
    pub kind: DetectorKind,
    /// Shared backbone shape; the head width is set per network.
    pub backbone: BackboneConfig,
    pub rotation: RotationMapping,
    pub stats: DatasetStats,
    pub meta: ImageMeta,
    pub nets: Vec<ModelParams>,
}

impl Detector {
    pub fn new(
        kind: DetectorKind,
        backbone: &BackboneConfig,
        rotation: RotationMapping,
        stats: DatasetStats,
        meta: ImageMeta,
        seed: u64,
    ) -> Result<Self> {
        stats.validate()?;
        meta.require_square()?;
        if backbone.input_size != (meta.height, meta.width) || backbone.in_channels != 1 {
            return Err(Error::Config(format!(
                "detector backbone expects 1x{}x{} inputs, images are {}x{}",
                backbone.input_size.0, backbone.input_size.1, meta.height, meta.width
            )));
        }
        let mut d = Self {
            kind,
            backbone: backbone.clone(),
            rotation,
            stats,
            meta,
            nets: Vec::new(),
        };
        d.nets = d
            .net_configs()
            .iter()
            .enumerate()
            .map(|(i, c)| locnet::build(c, rng::derive(seed, i as u64)))
            .collect::<Result<_>>()?;
        Ok(d)
    }

    pub fn net_configs(&self) -> Vec<BackboneConfig> {
        match self.kind {
            DetectorKind::GqStn => vec![self.backbone.with_head(2); 3],
            DetectorKind::DirectGrasp => vec![self.backbone.with_head(6)],
        }
    }

    pub fn net_names(&self) -> &'static [&'static str] {
        match self.kind {
            DetectorKind::GqStn => &["trans", "rot", "scale"],
            DetectorKind::DirectGrasp => &["direct"],
        }
    }

    pub fn param_count(&self) -> usize {
        self.nets.iter().map(ModelParams::count).sum()
    }

    pub fn checksum(&self) -> String {
        let all = ModelParams {
            tensors: self
                .nets
                .iter()
                .flat_map(|n| n.tensors.iter().cloned())
                .collect(),
        };
        all.checksum()
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Vec<Vec<Var>> {
        self.nets.iter().map(|n| n.bind(g, trainable)).collect()
    }

    fn map_heads(&self, g: &mut Graph, w: [Var; 6]) -> Result<Heads> {
        let (x, y) = heads::translation(g, w[0], w[1]);
        let (alpha, beta, theta) = heads::rotation(g, w[2], w[3], self.rotation)?;
        let s = heads::scale(g, w[4], self.stats.gamma);
        let zs = g.scale(w[5], self.stats.z_std);
        let z = g.offset(zs, self.stats.z_mean);
        Ok(Heads {
            w,
            x,
            y,
            alpha,
            beta,
            theta,
            s,
            z,
        })
    }

    /// Records a forward pass on a normalized `[H, W]` image. With `forcing`
    /// the rotation and scale stages see the image transformed by the
    /// ground-truth translation and rotation instead of the predicted ones.
    pub fn forward(
        &self,
        g: &mut Graph,
        params: &[Vec<Var>],
        image: Var,
        forcing: Option<&Cascade>,
    ) -> Result<ForwardPass> {
        let cfgs = self.net_configs();
        let (h, w) = (self.meta.height, self.meta.width);
        match self.kind {
            DetectorKind::DirectGrasp => {
                let out = locnet::forward(&cfgs[0], g, &params[0], image)?;
                let mut ws = [out; 6];
                for (i, v) in ws.iter_mut().enumerate() {
                    *v = g.index(out, i)?;
                }
                Ok(ForwardPass {
                    heads: self.map_heads(g, ws)?,
                    stage_inputs: Vec::new(),
                    crop: None,
                })
            }
            DetectorKind::GqStn => {
                let out_t = locnet::forward(&cfgs[0], g, &params[0], image)?;
                let (w_x, w_y) = (g.index(out_t, 0)?, g.index(out_t, 1)?);
                let (x, y) = heads::translation(g, w_x, w_y);
                let t_pred = heads::translation_theta(g, x, y)?;
                let t_used = match forcing {
                    Some(c) => heads::constant_theta(g, &c.trans.normalized()),
                    None => t_pred,
                };
                let i_t = stn::sample_stage(g, image, t_used, h, w, 0.0)?;

                let out_r = locnet::forward(&cfgs[1], g, &params[1], i_t)?;
                let (w_a, w_b) = (g.index(out_r, 0)?, g.index(out_r, 1)?);
                let (_, _, theta) = heads::rotation(g, w_a, w_b, self.rotation)?;
                let tr = match forcing {
                    Some(c) => {
                        heads::constant_theta(g, &c.trans.normalized().compose(&c.rot.normalized()))
                    }
                    None => {
                        let r_pred = heads::rotation_theta(g, theta)?;
                        heads::compose(g, t_pred, r_pred)?
                    }
                };
                let i_r = stn::sample_stage(g, image, tr, h, w, 0.0)?;

                let out_s = locnet::forward(&cfgs[2], g, &params[2], i_r)?;
                let (w_s, w_z) = (g.index(out_s, 0)?, g.index(out_s, 1)?);
                let heads = self.map_heads(g, [w_x, w_y, w_a, w_b, w_s, w_z])?;
                let s_theta = heads::scale_theta(g, heads.s)?;
                let m = heads::compose(g, tr, s_theta)?;
                let crop = stn::sample_stage(g, image, m, CROP_SIZE, CROP_SIZE, 0.0)?;
                Ok(ForwardPass {
                    heads,
                    stage_inputs: vec![i_t, i_r],
                    crop: Some(crop),
                })
            }
        }
    }

    /// One-shot detection on a depth image.
    pub fn detect(&self, image: &DepthImage) -> Result<Detection> {
        self.detect_normalized(&image.normalized())
    }

    pub fn detect_normalized(&self, normalized: &Tensor) -> Result<Detection> {
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let im = g.constant(normalized.clone());
        let f = self.forward(&mut g, &p, im, None)?;
        let v = |v: Var| g.item(v);
        let hd = &f.heads;
        let raw = HeadOutputs {
            w_x: v(hd.w[0]),
            w_y: v(hd.w[1]),
            w_alpha: v(hd.w[2]),
            w_beta: v(hd.w[3]),
            w_s: v(hd.w[4]),
            w_z: v(hd.w[5]),
        };
        if !raw.is_finite() {
            return Err(Error::NonFinite {
                phase: 0,
                step: 0,
                tensor: "detector head outputs".into(),
            });
        }
        let cascade = [v(hd.x), v(hd.y), v(hd.theta), v(hd.s)];
        let t = AffineParams::translation(cascade[0], cascade[1])?;
        let r = AffineParams::rotation(crate::graspgeom::canonical_angle(cascade[2]))?;
        let c = AffineParams::scale(cascade[3])?;
        let grasp = grasp_from_cascade(&t, &r, &c, raw.w_z, &self.stats, &self.meta)?;
        Ok(Detection {
            grasp,
            cascade,
            raw,
            crop: f.crop.map(|c| g.value(c).clone()),
        })
    }

    pub fn to_checkpoint(&self, training: Value) -> Checkpoint {
        let mut ck = Checkpoint::new(json!({
            "kind": "detector",
            "detector": self.kind,
            "backbone": self.backbone,
            "rotation": self.rotation,
            "stats": self.stats,
            "meta": self.meta,
            "training": training,
        }));
        for (name, net) in self.net_names().iter().zip(&self.nets) {
            net.push_into(&format!("{name}."), &mut ck);
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let meta = &ck.metadata;
        if meta.get("kind").and_then(Value::as_str) != Some("detector") {
            return Err(Error::format("checkpoint", "not a detector checkpoint"));
        }
        fn field<T: serde::de::DeserializeOwned>(meta: &Value, k: &str) -> Result<T> {
            let v = meta
                .get(k)
                .cloned()
                .ok_or_else(|| Error::format("checkpoint", format!("missing {k}")))?;
            serde_json::from_value(v).map_err(|e| Error::format("checkpoint", format!("{k}: {e}")))
        }
        let mut d = Self {
            kind: field(meta, "detector")?,
            backbone: field(meta, "backbone")?,
            rotation: field(meta, "rotation")?,
            stats: field(meta, "stats")?,
            meta: field(meta, "meta")?,
            nets: Vec::new(),
        };
        d.backbone.validate()?;
        d.stats.validate()?;
        d.nets = d
            .net_names()
            .iter()
            .zip(d.net_configs())
            .map(|(name, c)| ModelParams::from_checkpoint(ck, &format!("{name}."), &c.layout()))
            .collect::<Result<_>>()?;
        Ok(d)
    }

    pub fn save(&self, path: &Path, training: Value) -> Result<()> {
        self.to_checkpoint(training).save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}
