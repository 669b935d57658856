//! The robustness classifier: a small backbone over an aligned 32×32 crop
//! plus a constant plane holding the gripper height. Once trained it is
//! frozen and serves both as the detector's supervisor and as the
//! evaluation metric.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::autodiff::{sigmoid, Graph, Tensor, Var};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::graspgeom::{crop_normalized, CROP_SIZE};
use crate::locnet::{self, BackboneConfig, ModelParams};
use crate::rng::{self, stream};
use crate::scenegen::{sample_mixed, Dataset, Split};
use crate::training::optim::{AdamConfig, OptimizerState};

pub const PARAM_PREFIX: &str = "quality.";

pub fn default_backbone() -> BackboneConfig {
    BackboneConfig {
        input_size: (CROP_SIZE, CROP_SIZE),
        in_channels: 2,
        widths: vec![16, 32, 32],
        head_dim: 1,
        ..Default::default()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QualityConfig {
    pub backbone: BackboneConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Per-epoch multiplicative learning-rate decay.
    pub lr_decay: f64,
    pub l2: f64,
    pub adam: AdamConfig,
    /// Labelled grasps drawn per scene when building crop sets.
    pub crops_per_scene: usize,
    /// Subsample the majority class so both labels are equally frequent.
    pub balance: bool,
    /// Random 180° rotations and mirror flips of training crops.
    pub augment: bool,
    pub threshold: f64,
}

impl Default for QualityConfig {
    fn default() -> Self {
        Self {
            backbone: default_backbone(),
            epochs: 12,
            batch_size: 16,
            learning_rate: 2e-3,
            lr_decay: 0.85,
            l2: 1e-7,
            adam: AdamConfig::default(),
            crops_per_scene: 32,
            balance: true,
            augment: true,
            threshold: 0.5,
        }
    }
}

impl QualityConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.adam.validate()?;
        let b = &self.backbone;
        if b.input_size != (CROP_SIZE, CROP_SIZE) || b.in_channels != 2 || b.head_dim != 1 {
            return Err(Error::Config(format!(
                "quality backbone must take 2x{CROP_SIZE}x{CROP_SIZE} inputs and emit one logit"
            )));
        }
        if self.batch_size == 0 || self.crops_per_scene == 0 {
            return Err(Error::Config(
                "batch_size and crops_per_scene must be positive".into(),
            ));
        }
        if !(self.learning_rate > 0.0) || !(self.lr_decay > 0.0) || !(self.l2 >= 0.0) {
            return Err(Error::Config(
                "learning rate, decay and l2 must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.threshold) {
            return Err(Error::Config("threshold must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Strict threshold rule: a tie is not robust.
pub fn is_robust(p: f64, threshold: f64) -> bool {
    p > threshold
}

#[derive(Clone, Debug, PartialEq)]
pub struct QualityModel {
    config: BackboneConfig,
    params: ModelParams,
    threshold: f64,
    /// Meters per normalized depth unit; the height plane holds `−z / z_scale`.
    z_scale: f64,
    frozen: bool,
}

impl QualityModel {
    pub fn new(config: BackboneConfig, z_scale: f64, threshold: f64, seed: u64) -> Result<Self> {
        if !(z_scale > 0.0) {
            return Err(Error::Config("z_scale must be positive".into()));
        }
        let params = locnet::build(&config, seed)?;
        Ok(Self {
            config,
            params,
            threshold,
            z_scale,
            frozen: false,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn params_mut(&mut self) -> Result<&mut ModelParams> {
        if self.frozen {
            Err(Error::Frozen)
        } else {
            Ok(&mut self.params)
        }
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    pub fn z_scale(&self) -> f64 {
        self.z_scale
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn checksum(&self) -> String {
        self.params.checksum()
    }

    /// Registers the parameters on `g`; frozen models are always constants.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Result<Vec<Var>> {
        if trainable && self.frozen {
            return Err(Error::Frozen);
        }
        Ok(self.params.bind(g, trainable))
    }

    /// Logit for a `[32, 32]` crop and a scalar height (meters).
    pub fn logit_var(&self, g: &mut Graph, params: &[Var], crop: Var, z: Var) -> Result<Var> {
        let shape = g.shape(crop).to_vec();
        if shape != [CROP_SIZE, CROP_SIZE] {
            return Err(Error::Shape {
                op: "classifier crop",
                lhs: vec![CROP_SIZE, CROP_SIZE],
                rhs: shape,
            });
        }
        let c = g.reshape(crop, &[1, CROP_SIZE, CROP_SIZE])?;
        let level = g.scale(z, -1.0 / self.z_scale);
        let zeros = g.constant(Tensor::zeros(&[1, CROP_SIZE, CROP_SIZE]));
        let plane = g.add(zeros, level)?;
        let x = g.concat(&[c, plane])?;
        let y = locnet::forward(&self.config, g, params, x)?;
        g.index(y, 0)
    }

    /// `(logit, p_robust)`.
    pub fn classify(&self, crop: &Tensor, z: f64) -> Result<(f64, f64)> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let c = g.constant(crop.clone());
        let z = g.scalar(z);
        let l = self.logit_var(&mut g, &p, c, z)?;
        let logit = g.item(l);
        Ok((logit, sigmoid(logit)))
    }

    pub fn robust_label(&self, crop: &Tensor, z: f64, threshold: f64) -> Result<bool> {
        Ok(is_robust(self.classify(crop, z)?.1, threshold))
    }

    pub fn to_checkpoint(&self, config: Value) -> Checkpoint {
        let mut ck = Checkpoint::new(json!({
            "kind": "quality",
            "backbone": self.config,
            "threshold": self.threshold,
            "z_scale": self.z_scale,
            "input": "channel 0: (depth - table) / camera_height crop; channel 1: constant -z / z_scale",
            "config": config,
        }));
        self.params.push_into(PARAM_PREFIX, &mut ck);
        ck
    }

    /// Loaded models are always frozen.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let meta = &ck.metadata;
        if meta.get("kind").and_then(Value::as_str) != Some("quality") {
            return Err(Error::format(
                "checkpoint",
                "not a quality-model checkpoint",
            ));
        }
        let field = |k: &str| {
            meta.get(k)
                .cloned()
                .ok_or_else(|| Error::format("checkpoint", format!("missing {k}")))
        };
        let config: BackboneConfig = serde_json::from_value(field("backbone")?)
            .map_err(|e| Error::format("checkpoint", e.to_string()))?;
        config.validate()?;
        let num = |k: &str| -> Result<f64> {
            field(k)?
                .as_f64()
                .ok_or_else(|| Error::format("checkpoint", format!("{k} is not a number")))
        };
        let params = ModelParams::from_checkpoint(ck, PARAM_PREFIX, &config.layout())?;
        Ok(Self {
            config,
            params,
            threshold: num("threshold")?,
            z_scale: num("z_scale")?,
            frozen: true,
        })
    }

    pub fn save(&self, path: &Path, config: Value) -> Result<()> {
        self.to_checkpoint(config).save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

/// Labelled classifier inputs.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CropSet {
    pub crops: Vec<Tensor>,
    pub z: Vec<f64>,
    pub labels: Vec<bool>,
}

impl CropSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn positives(&self) -> usize {
        self.labels.iter().filter(|&&l| l).count()
    }

    pub fn push(&mut self, crop: Tensor, z: f64, label: bool) {
        self.crops.push(crop);
        self.z.push(z);
        self.labels.push(label);
    }

    /// Keeps every minority example and an equal, seeded subsample of the
    /// majority class, preserving the original order.
    pub fn balanced(&self, seed: u64) -> Self {
        let pos = self.positives();
        let neg = self.len() - pos;
        let keep_label = pos > neg;
        let surplus: Vec<usize> = (0..self.len())
            .filter(|&i| self.labels[i] == keep_label)
            .collect();
        let mut chosen = surplus.clone();
        chosen.shuffle(&mut rng::rng(seed));
        chosen.truncate(pos.min(neg));
        let mut keep = vec![true; self.len()];
        for &i in &surplus {
            keep[i] = false;
        }
        for &i in &chosen {
            keep[i] = true;
        }
        let mut out = Self::default();
        for i in (0..self.len()).filter(|&i| keep[i]) {
            out.push(self.crops[i].clone(), self.z[i], self.labels[i]);
        }
        out
    }
}

/// Oracle-labelled crops from the scenes of one split. Grasps are drawn
/// with the mixed sampler on each regenerated shape, keeping every label.
pub fn crop_examples(ds: &Dataset, split: Split, per_scene: usize, seed: u64) -> Result<CropSet> {
    let records = ds.load(split)?;
    let start = ds.entry(split).start;
    let oracle = &ds.sidecar.spec.oracle;
    let mut out = CropSet::default();
    for (k, rec) in records.iter().enumerate() {
        let index = start + k;
        let shape = ds.shape(index)?;
        let img = rec.depth.normalized();
        let s = rng::derive_path(seed, &[stream::CROPS, index as u64]);
        for a in sample_mixed(&shape, &rec.depth.meta, per_scene, s, oracle)? {
            out.push(
                crop_normalized(&img, &rec.depth.meta, &a.grasp)?,
                a.grasp.z,
                a.robust,
            );
        }
    }
    Ok(out)
}

/// Accuracy, precision and recall of binary predictions.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BinaryMetrics {
    pub n: usize,
    pub positives: usize,
    pub accuracy: f64,
    /// Zero when nothing is predicted positive.
    pub precision: f64,
    pub recall: f64,
}

impl BinaryMetrics {
    pub fn from_predictions(pred: &[bool], labels: &[bool]) -> Self {
        let (mut tp, mut fp, mut tn, mut fn_) = (0usize, 0usize, 0usize, 0usize);
        for (&p, &l) in pred.iter().zip(labels) {
            match (p, l) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, false) => tn += 1,
                (false, true) => fn_ += 1,
            }
        }
        let n = tp + fp + tn + fn_;
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        Self {
            n,
            positives: tp + fn_,
            accuracy: ratio(tp + tn, n),
            precision: ratio(tp, tp + fp),
            recall: ratio(tp, tp + fn_),
        }
    }
}

/// True- and false-positive rates at each threshold.
pub fn threshold_sweep(probs: &[f64], labels: &[bool], thresholds: &[f64]) -> Vec<(f64, f64, f64)> {
    let pos = labels.iter().filter(|&&l| l).count().max(1) as f64;
    let neg = labels.iter().filter(|&&l| !l).count().max(1) as f64;
    thresholds
        .iter()
        .map(|&t| {
            let (mut tp, mut fp) = (0.0, 0.0);
            for (&p, &l) in probs.iter().zip(labels) {
                if is_robust(p, t) {
                    if l {
                        tp += 1.0;
                    } else {
                        fp += 1.0;
                    }
                }
            }
            (t, tp / pos, fp / neg)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub learning_rate: f64,
    pub loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QualityReport {
    pub train_examples: usize,
    pub train_positives: usize,
    pub heldout: BinaryMetrics,
    pub train: BinaryMetrics,
    pub history: Vec<EpochRecord>,
    pub checksum: String,
}

/// Mirror images of a crop that leave the oracle label unchanged.
fn augment(crop: &Tensor, mode: u8) -> Tensor {
    let n = CROP_SIZE;
    let d = crop.data();
    let data = (0..n * n)
        .map(|k| {
            let (i, j) = (k / n, k % n);
            let (si, sj) = match mode {
                1 => (n - 1 - i, n - 1 - j),
                2 => (n - 1 - i, j),
                3 => (i, n - 1 - j),
                _ => (i, j),
            };
            d[si * n + sj]
        })
        .collect();
    Tensor::new(vec![n, n], data).expect("crop shape")
}

/// Predicted probabilities for every example of a set.
pub fn predict_set(model: &QualityModel, set: &CropSet) -> Result<Vec<f64>> {
    set.crops
        .iter()
        .zip(&set.z)
        .map(|(c, &z)| model.classify(c, z).map(|(_, p)| p))
        .collect()
}

pub fn evaluate(model: &QualityModel, set: &CropSet) -> Result<BinaryMetrics> {
    let pred: Vec<bool> = predict_set(model, set)?
        .into_iter()
        .map(|p| is_robust(p, model.threshold))
        .collect();
    Ok(BinaryMetrics::from_predictions(&pred, &set.labels))
}

/// Oracle-labelled crops of the train and validation splits, balanced when
/// configured, and a classifier trained on them. The height plane is scaled
/// by the camera height.
pub fn train_on_dataset(
    ds: &Dataset,
    config: &QualityConfig,
    seed: u64,
) -> Result<(QualityModel, QualityReport)> {
    let mut train = crop_examples(ds, Split::Train, config.crops_per_scene, seed)?;
    let mut held = crop_examples(ds, Split::Val, config.crops_per_scene, seed)?;
    if config.balance {
        train = train.balanced(rng::derive(seed, 1));
        held = held.balanced(rng::derive(seed, 2));
    }
    train_classifier(
        &train,
        &held,
        config,
        ds.sidecar.spec.meta().camera_height,
        seed,
    )
}

/// Minimizes binary cross-entropy with Adam and returns the frozen model.
pub fn train_classifier(
    train: &CropSet,
    heldout: &CropSet,
    config: &QualityConfig,
    z_scale: f64,
    seed: u64,
) -> Result<(QualityModel, QualityReport)> {
    config.validate()?;
    let pos = train.positives();
    if pos == 0 || pos == train.len() {
        return Err(Error::Invalid(format!(
            "classifier training set needs both labels ({pos} of {} robust)",
            train.len()
        )));
    }
    let mut model = QualityModel::new(
        config.backbone.clone(),
        z_scale,
        config.threshold,
        rng::derive(seed, stream::INIT),
    )?;
    let mut opt = OptimizerState::new(&model.params, config.adam);
    let mut aug = rng::rng(rng::derive(seed, stream::AUGMENT));
    let mut history = Vec::new();
    let mut lr = config.learning_rate;
    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng::rng(rng::derive_path(
            seed,
            &[stream::ORDER, epoch as u64],
        )));
        let mut total = 0.0;
        for (step, batch) in order.chunks(config.batch_size).enumerate() {
            let mut g = Graph::new();
            let p = model.bind(&mut g, true)?;
            let mut logits = Vec::with_capacity(batch.len());
            let mut targets = Vec::with_capacity(batch.len());
            for &i in batch {
                let mode = if config.augment {
                    aug.random_range(0..4u8)
                } else {
                    0
                };
                let c = g.constant(augment(&train.crops[i], mode));
                let z = g.scalar(train.z[i]);
                logits.push(model.logit_var(&mut g, &p, c, z)?);
                targets.push(if train.labels[i] { 1.0 } else { 0.0 });
            }
            let l = g.stack(&logits)?;
            let loss = g.bce_with_logits(l, &targets)?;
            let value = g.item(loss);
            if !value.is_finite() {
                return Err(Error::NonFinite {
                    phase: epoch,
                    step,
                    tensor: "classifier loss".into(),
                });
            }
            g.backward(loss)?;
            let grads: Vec<Vec<f64>> = p
                .iter()
                .map(|&v| g.grad(v).expect("tracked").to_vec())
                .collect();
            opt.update(model.params_mut()?, &grads, lr, config.l2);
            total += value * batch.len() as f64;
        }
        history.push(EpochRecord {
            epoch,
            learning_rate: lr,
            loss: total / train.len() as f64,
        });
        lr *= config.lr_decay;
    }
    model.freeze();
    let report = QualityReport {
        train_examples: train.len(),
        train_positives: pos,
        heldout: evaluate(&model, heldout)?,
        train: evaluate(&model, train)?,
        history,
        checksum: model.checksum(),
    };
    Ok((model, report))
}
