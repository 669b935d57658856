//! The detector training regimen and the direct-regression baseline.
//!
//! Every step picks one random positive annotation per scene as the
//! geometric target. The localization loss compares the mapped head outputs
//! with that target; the robustness loss is the cross-entropy of the frozen
//! classifier's logit on the detector's own crop against a positive label.

pub mod detector;
pub mod optim;
pub mod schedule;

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

pub use detector::{Detection, Detector, DetectorKind, ForwardPass, Heads};
pub use optim::{AdamConfig, OptimizerState};
pub use schedule::{LossMix, Phase, Schedule};

use crate::autodiff::{Graph, Var};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::evalbench::{self, SplitTag};
use crate::graspgeom::{cascade_from_grasp, Cascade, GraspConfig};
use crate::image::ImageMeta;
use crate::locnet::BackboneConfig;
use crate::quality::QualityModel;
use crate::rng::{self, stream};
use crate::scenegen::SceneRecord;
use crate::stn::{DatasetStats, RotationMapping};

/// Geometric regression target of one ground-truth grasp.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LocTarget {
    pub cascade_raw: [f64; 4],
    pub x: f64,
    pub y: f64,
    pub sin2: f64,
    pub cos2: f64,
    /// `ln(s / γ)`, the target of the raw scale output.
    pub log_scale: f64,
    /// Normalized height, the target of the raw height output.
    pub z: f64,
}

impl LocTarget {
    pub fn encode(
        g: &GraspConfig,
        stats: &DatasetStats,
        meta: &ImageMeta,
    ) -> Result<(Self, Cascade)> {
        let (c, z) = cascade_from_grasp(g, stats, meta)?;
        let [x, y, theta, s] = c.raw();
        let t = Self {
            cascade_raw: c.raw(),
            x,
            y,
            sin2: (2.0 * theta).sin(),
            cos2: (2.0 * theta).cos(),
            log_scale: (s / stats.gamma).ln(),
            z,
        };
        Ok((t, c))
    }

    pub fn values(&self) -> [f64; 6] {
        [self.x, self.y, self.sin2, self.cos2, self.log_scale, self.z]
    }
}

/// Sum of squared errors between the mapped head outputs and the target.
pub fn loc_loss(g: &mut Graph, heads: &Heads, target: &LocTarget) -> Result<Var> {
    let pred = g.stack(&[
        heads.x,
        heads.y,
        heads.alpha,
        heads.beta,
        heads.w_s(),
        heads.w_z(),
    ])?;
    let t = g.constant(crate::autodiff::Tensor::vector(target.values().to_vec()));
    let d = g.sub(pred, t)?;
    let sq = g.square(d);
    Ok(g.sum(sq))
}

/// Cross-entropy of the frozen classifier's logit against a positive label.
pub fn rob_loss(
    g: &mut Graph,
    quality: &QualityModel,
    qparams: &[Var],
    crop: Var,
    z: Var,
) -> Result<Var> {
    let logit = quality.logit_var(g, qparams, crop, z)?;
    let l = g.stack(&[logit])?;
    g.bce_with_logits(l, &[1.0])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryRecord {
    /// `"step"` or `"epoch"`.
    pub kind: String,
    pub phase: usize,
    pub epoch: usize,
    pub step: usize,
    pub xi: f64,
    pub lr: f64,
    pub l_loc: f64,
    pub l_rob: f64,
    pub l_tot: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val_robust_rate: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val_rect_precision: Option<f64>,
}

pub fn history_jsonl(history: &[HistoryRecord]) -> String {
    history
        .iter()
        .map(|r| serde_json::to_string(r).expect("history serializes") + "\n")
        .collect()
}

pub fn history_checksum(history: &[HistoryRecord]) -> String {
    hex::encode(Sha256::digest(history_jsonl(history).as_bytes()))
}

/// Everything a training run needs.
#[derive(Clone, Copy)]
pub struct TrainRequest<'a> {
    pub kind: DetectorKind,
    pub backbone: &'a BackboneConfig,
    pub rotation: RotationMapping,
    pub schedule: &'a Schedule,
    pub train: &'a [SceneRecord],
    pub val: &'a [SceneRecord],
    /// Where `train` comes from; `start` is the global index of `train[0]`
    /// and keys the per-scene random streams.
    pub train_split: SplitTag,
    pub stats: DatasetStats,
    /// Required for the cascade; optional validation metric for the
    /// baseline.
    pub quality: Option<&'a QualityModel>,
    pub seed: u64,
    /// Phase checkpoints are written here when set.
    pub checkpoint_dir: Option<&'a Path>,
    /// Provenance echoed into checkpoints.
    pub config: &'a Value,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub detector: Detector,
    pub history: Vec<HistoryRecord>,
    pub checkpoints: Vec<PathBuf>,
    pub best_val: Option<f64>,
    /// Provenance for the final checkpoint; the history is summarized by
    /// its checksum.
    pub metadata: Value,
}

/// Training state carried across phases and stored at phase boundaries.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Progress {
    phases_done: usize,
    epoch: usize,
    step: usize,
    adam_steps: Vec<u64>,
    best_val: Option<f64>,
    history: Vec<HistoryRecord>,
}

/// The split a detector checkpoint was trained on, if recorded.
pub fn trained_split(ck: &Checkpoint) -> Option<SplitTag> {
    let v = ck.metadata.get("training")?.get("train_split")?.clone();
    serde_json::from_value(v).ok()
}

fn check_finite(value: f64, phase: usize, step: usize, tensor: &str) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite {
            phase,
            step,
            tensor: tensor.into(),
        })
    }
}

/// Validation robust-prediction rate (when a classifier is given) and
/// rectangle-metric precision.
pub fn validation_metrics(
    detector: &Detector,
    val: &[SceneRecord],
    quality: Option<&QualityModel>,
) -> Result<(Option<f64>, f64)> {
    if val.is_empty() {
        return Ok((quality.map(|_| 0.0), 0.0));
    }
    let (mut robust, mut rect) = (0usize, 0usize);
    for rec in val {
        let det = detector.detect(&rec.depth)?;
        let s = evalbench::score_detection(detector.kind, &det, rec, quality)?;
        rect += s.rect.positive as usize;
        robust += s.robust.unwrap_or(false) as usize;
    }
    let n = val.len() as f64;
    Ok((quality.map(|_| robust as f64 / n), rect as f64 / n))
}

fn training_metadata(req: &TrainRequest, progress: &Progress) -> Value {
    json!({
        "seed": req.seed,
        "schedule": req.schedule,
        "train_split": req.train_split,
        "quality_checksum": req.quality.map(QualityModel::checksum),
        "progress": progress,
        "config": req.config,
    })
}

fn save_phase(
    req: &TrainRequest,
    det: &Detector,
    opts: &[OptimizerState],
    progress: &Progress,
    path: &Path,
) -> Result<()> {
    let mut ck = det.to_checkpoint(training_metadata(req, progress));
    for (i, (o, net)) in opts.iter().zip(&det.nets).enumerate() {
        o.push_into(&format!("adam{i}."), net, &mut ck);
    }
    ck.save(path)
}

/// Trains a detector from scratch.
pub fn train_detector(req: &TrainRequest) -> Result<TrainOutcome> {
    run(req, None)
}

/// Continues a run from a phase checkpoint written by [`train_detector`]
/// with the same request.
pub fn resume_detector(req: &TrainRequest, ck: &Checkpoint) -> Result<TrainOutcome> {
    run(req, Some(ck))
}

pub fn train_gqstn(req: &TrainRequest) -> Result<TrainOutcome> {
    train_detector(&TrainRequest {
        kind: DetectorKind::GqStn,
        ..*req
    })
}

pub fn train_directgrasp(req: &TrainRequest) -> Result<TrainOutcome> {
    train_detector(&TrainRequest {
        kind: DetectorKind::DirectGrasp,
        ..*req
    })
}

fn run(req: &TrainRequest, resume: Option<&Checkpoint>) -> Result<TrainOutcome> {
    req.schedule.validate()?;
    let schedule = req.schedule;
    let first = req
        .train
        .first()
        .ok_or_else(|| Error::Invalid("training split is empty".into()))?;
    let meta = first.depth.meta;
    if req.train_split.end - req.train_split.start != req.train.len() {
        return Err(Error::Invalid(
            "training split range does not match the scene count".into(),
        ));
    }
    if req.train.iter().any(|r| r.positives().next().is_none()) {
        return Err(Error::Invalid(
            "every training scene needs a positive annotation".into(),
        ));
    }
    let quality = match (req.kind, req.quality) {
        (DetectorKind::GqStn, None) => {
            return Err(Error::Config(
                "the cascade detector needs a trained quality model".into(),
            ))
        }
        (_, Some(q)) if !q.is_frozen() => {
            return Err(Error::Config("the quality model must be frozen".into()))
        }
        (_, q) => q,
    };

    let (mut det, mut opts, mut progress) = match resume {
        None => {
            let det = Detector::new(
                req.kind,
                req.backbone,
                req.rotation,
                req.stats,
                meta,
                rng::derive(req.seed, stream::INIT),
            )?;
            let opts = det
                .nets
                .iter()
                .map(|n| OptimizerState::new(n, schedule.adam))
                .collect();
            let progress = Progress {
                phases_done: 0,
                epoch: 0,
                step: 0,
                adam_steps: vec![0; det.nets.len()],
                best_val: None,
                history: Vec::new(),
            };
            (det, opts, progress)
        }
        Some(ck) => {
            let det = Detector::from_checkpoint(ck)?;
            if det.kind != req.kind {
                return Err(Error::Config(
                    "checkpoint holds a different detector kind".into(),
                ));
            }
            let training = ck.metadata.get("training").cloned().unwrap_or(Value::Null);
            let progress: Progress =
                serde_json::from_value(training.get("progress").cloned().unwrap_or(Value::Null))
                    .map_err(|e| Error::format("checkpoint", format!("training progress: {e}")))?;
            let opts = det
                .nets
                .iter()
                .enumerate()
                .map(|(i, n)| {
                    OptimizerState::from_checkpoint(
                        ck,
                        &format!("adam{i}."),
                        n,
                        schedule.adam,
                        progress.adam_steps[i],
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            (det, opts, progress)
        }
    };

    let qparams = |g: &mut Graph| -> Result<Option<Vec<Var>>> {
        quality.map(|q| q.bind(g, false)).transpose()
    };
    let mut checkpoints = Vec::new();

    for pi in progress.phases_done..schedule.phases.len() {
        let phase = schedule.phases[pi];
        let mut best: Option<(f64, Vec<crate::locnet::ModelParams>)> = None;
        let mut stale = 0usize;
        for _ in 0..schedule.epochs(pi) {
            let epoch = progress.epoch;
            let mut order: Vec<usize> = (0..req.train.len()).collect();
            order.shuffle(&mut rng::rng(rng::derive_path(
                req.seed,
                &[stream::ORDER, epoch as u64],
            )));
            let (mut sum_loc, mut sum_rob) = (0.0, 0.0);
            for batch in order.chunks(schedule.batch_size) {
                let step = progress.step;
                let mut g = Graph::new();
                let params = det.bind(&mut g, true);
                let qp = qparams(&mut g)?;
                let (mut locs, mut robs) = (Vec::new(), Vec::new());
                for &i in batch {
                    let rec = &req.train[i];
                    let global = (req.train_split.start + i) as u64;
                    let mut pick = rng::rng(rng::derive_path(
                        req.seed,
                        &[stream::PICK, epoch as u64, global],
                    ));
                    let positives: Vec<_> = rec.positives().collect();
                    let gt = positives[pick.random_range(0..positives.len())];
                    let (target, cascade) =
                        LocTarget::encode(&gt.grasp, &req.stats, &rec.depth.meta)?;
                    let image = g.constant(rec.depth.normalized());
                    let forcing = phase.teacher_forcing.then_some(&cascade);
                    let f = det.forward(&mut g, &params, image, forcing)?;
                    locs.push(loc_loss(&mut g, &f.heads, &target)?);
                    if let (Some(q), Some(qp), Some(crop)) = (quality, qp.as_deref(), f.crop) {
                        robs.push(rob_loss(&mut g, q, qp, crop, f.heads.z)?);
                    }
                }
                let l_loc = {
                    let s = g.stack(&locs)?;
                    g.mean(s)
                };
                let l_rob = if robs.is_empty() {
                    g.scalar(0.0)
                } else {
                    let s = g.stack(&robs)?;
                    g.mean(s)
                };
                let a = g.scale(l_loc, phase.xi);
                let b = g.scale(l_rob, 1.0 - phase.xi);
                let l_tot = g.add(a, b)?;
                let mix = LossMix {
                    xi: phase.xi,
                    l_loc: g.item(l_loc),
                    l_rob: g.item(l_rob),
                    l_tot: g.item(l_tot),
                };
                debug_assert_eq!(
                    mix.l_tot,
                    LossMix::compose(mix.xi, mix.l_loc, mix.l_rob).l_tot
                );
                check_finite(mix.l_loc, pi, step, "L_loc")?;
                check_finite(mix.l_rob, pi, step, "L_rob")?;
                g.backward(l_tot)?;
                for (k, (net, vars)) in det.nets.iter_mut().zip(&params).enumerate() {
                    let grads: Vec<Vec<f64>> = vars
                        .iter()
                        .map(|&v| g.grad(v).expect("tracked").to_vec())
                        .collect();
                    for ((name, _), gr) in net.tensors.iter().zip(&grads) {
                        if gr.iter().any(|v| !v.is_finite()) {
                            let tensor = format!("{}.{name} gradient", det_name(req.kind, k));
                            return Err(Error::NonFinite {
                                phase: pi,
                                step,
                                tensor,
                            });
                        }
                    }
                    opts[k].update(net, &grads, phase.learning_rate, schedule.l2);
                }
                sum_loc += mix.l_loc * batch.len() as f64;
                sum_rob += mix.l_rob * batch.len() as f64;
                progress.history.push(HistoryRecord {
                    kind: "step".into(),
                    phase: pi,
                    epoch,
                    step,
                    xi: mix.xi,
                    lr: phase.learning_rate,
                    l_loc: mix.l_loc,
                    l_rob: mix.l_rob,
                    l_tot: mix.l_tot,
                    val_robust_rate: None,
                    val_rect_precision: None,
                });
                progress.step += 1;
            }
            let (val_robust, val_rect) = validation_metrics(&det, req.val, quality)?;
            let n = req.train.len() as f64;
            let epoch_mix = LossMix::compose(phase.xi, sum_loc / n, sum_rob / n);
            progress.history.push(HistoryRecord {
                kind: "epoch".into(),
                phase: pi,
                epoch,
                step: progress.step,
                xi: phase.xi,
                lr: phase.learning_rate,
                l_loc: epoch_mix.l_loc,
                l_rob: epoch_mix.l_rob,
                l_tot: epoch_mix.l_tot,
                val_robust_rate: val_robust,
                val_rect_precision: Some(val_rect),
            });
            progress.epoch += 1;
            if phase.early_stopping {
                let monitored = match req.kind {
                    DetectorKind::GqStn => val_robust.unwrap_or(0.0),
                    DetectorKind::DirectGrasp => val_rect,
                };
                if best.as_ref().is_none_or(|(b, _)| monitored > *b) {
                    best = Some((monitored, det.nets.clone()));
                    stale = 0;
                } else {
                    stale += 1;
                    if stale >= schedule.patience {
                        break;
                    }
                }
            }
        }
        if let Some((b, nets)) = best {
            det.nets = nets;
            progress.best_val = Some(b);
        }
        progress.phases_done = pi + 1;
        progress.adam_steps = opts.iter().map(|o| o.step).collect();
        if let Some(dir) = req.checkpoint_dir {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join(format!("phase{pi}.gqtn"));
            save_phase(req, &det, &opts, &progress, &path)?;
            checkpoints.push(path);
        }
    }
    let mut metadata = training_metadata(
        req,
        &Progress {
            history: Vec::new(),
            ..progress.clone()
        },
    );
    metadata["history_checksum"] = json!(history_checksum(&progress.history));
    Ok(TrainOutcome {
        metadata,
        detector: det,
        best_val: progress.best_val,
        history: progress.history,
        checkpoints,
    })
}

fn det_name(kind: DetectorKind, k: usize) -> &'static str {
    match kind {
        DetectorKind::GqStn => ["trans", "rot", "scale"][k],
        DetectorKind::DirectGrasp => "direct",
    }
}
