//! Evaluation: the robustness-classification and rectangle metrics, their
//! disagreement breakdown, the proposal+classification baseline and timing.

use std::path::Path;
use std::time::Instant;

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::graspgeom::{crop_normalized, rect_metric, GraspConfig, MetricResult, RectGrasp};
use crate::image::DepthImage;
use crate::quality::{is_robust, QualityModel};
use crate::rng::{self, stream};
use crate::scenegen::{oracle_eval, OracleConfig, PrimitiveShape, SceneRecord};
use crate::training::{Detector, DetectorKind};

/// Scenes of one dataset, identified by the dataset's root seed and a
/// half-open index range.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitTag {
    pub dataset_seed: u64,
    pub start: usize,
    pub end: usize,
}

impl SplitTag {
    pub fn overlap(&self, other: &SplitTag) -> usize {
        if self.dataset_seed != other.dataset_seed {
            return 0;
        }
        self.end
            .min(other.end)
            .saturating_sub(self.start.max(other.start))
    }
}

/// A detector output prepared for scoring.
#[derive(Clone, Debug, PartialEq)]
pub struct Proposal {
    pub grasp: GraspConfig,
    /// The detector's own classifier input, if it produces one.
    pub crop: Option<Tensor>,
}

/// Anything that maps a scene to one grasp.
pub trait GraspSource {
    fn name(&self) -> String;
    fn propose(&mut self, record: &SceneRecord, index: usize) -> Result<Proposal>;
}

impl GraspSource for Detector {
    fn name(&self) -> String {
        self.kind.name().into()
    }

    fn propose(&mut self, record: &SceneRecord, _index: usize) -> Result<Proposal> {
        let d = self.detect(&record.depth)?;
        Ok(Proposal {
            grasp: d.grasp,
            crop: d.crop,
        })
    }
}

/// Per-scene scores of one detection.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneScore {
    pub rect: MetricResult,
    pub p_robust: Option<f64>,
    pub robust: Option<bool>,
}

fn score(
    grasp: &GraspConfig,
    own_crop: Option<&Tensor>,
    record: &SceneRecord,
    quality: Option<&QualityModel>,
) -> Result<SceneScore> {
    let meta = &record.depth.meta;
    let gts: Vec<RectGrasp> = record.positives().map(|a| a.grasp.rect(meta)).collect();
    let rect = rect_metric(&grasp.rect(meta), &gts)?;
    let p_robust = match quality {
        None => None,
        Some(q) => {
            let crop = match own_crop {
                Some(c) => c.clone(),
                None => crop_normalized(&record.depth.normalized(), meta, grasp)?,
            };
            Some(q.classify(&crop, grasp.z)?.1)
        }
    };
    Ok(SceneScore {
        rect,
        p_robust,
        robust: p_robust
            .zip(quality)
            .map(|(p, q)| is_robust(p, q.threshold())),
    })
}

/// Scores a detection: the cascade is judged on its own crop, the baseline
/// on an aligned crop around its predicted grasp.
pub fn score_detection(
    kind: DetectorKind,
    det: &crate::training::Detection,
    record: &SceneRecord,
    quality: Option<&QualityModel>,
) -> Result<SceneScore> {
    let own = match kind {
        DetectorKind::GqStn => det.crop.as_ref(),
        DetectorKind::DirectGrasp => None,
    };
    score(&det.grasp, own, record, quality)
}

/// The four-way rectangle-versus-robustness breakdown, in percent.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Quad {
    pub rect_pos_robust_neg: f64,
    pub rect_pos_robust_pos: f64,
    pub rect_neg_robust_pos: f64,
    pub rect_neg_robust_neg: f64,
}

impl Quad {
    pub fn total(&self) -> f64 {
        self.rect_pos_robust_neg
            + self.rect_pos_robust_pos
            + self.rect_neg_robust_pos
            + self.rect_neg_robust_neg
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneEval {
    pub index: usize,
    pub grasp: GraspConfig,
    pub p_robust: f64,
    pub robust: bool,
    pub rect_positive: bool,
    pub best_iou: f64,
    pub angle_diff: f64,
    /// Oracle label of the detected grasp on the generating shape.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub oracle_robust: Option<bool>,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub detector: String,
    pub notes: Vec<String>,
    pub scenes: usize,
    pub rect_precision: f64,
    pub robust_precision: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub oracle_robust_precision: Option<f64>,
    pub quad: Quad,
    pub mean_detect_seconds: f64,
    pub per_scene: Vec<SceneEval>,
    #[serde(default)]
    pub config: Value,
}

pub const CROP_NOTE: &str =
    "detectors without their own crop are scored on an aligned crop around the \
predicted grasp, using the predicted opening w";

/// Inputs of [`eval_detector`] besides the detector itself.
pub struct EvalInputs<'a> {
    pub records: &'a [SceneRecord],
    pub split: SplitTag,
    /// Scenes the detector was trained on, if known.
    pub trained_on: Option<SplitTag>,
    pub allow_overlap: bool,
    pub quality: &'a QualityModel,
    /// Regenerates the shape of scene `index` for the oracle cross-check.
    pub shapes: Option<&'a dyn Fn(usize) -> Result<PrimitiveShape>>,
    pub oracle: OracleConfig,
    pub config: Value,
}

/// One detection per scene, scored by the rectangle metric and the frozen
/// classifier.
pub fn eval_detector(source: &mut dyn GraspSource, inputs: &EvalInputs) -> Result<EvalReport> {
    if let Some(t) = inputs.trained_on {
        let n = t.overlap(&inputs.split);
        if n > 0 && !inputs.allow_overlap {
            return Err(Error::SplitOverlap(n));
        }
    }
    if inputs.records.len() != inputs.split.end - inputs.split.start {
        return Err(Error::Invalid(
            "record count does not match the split range".into(),
        ));
    }
    let mut per_scene = Vec::with_capacity(inputs.records.len());
    for (k, rec) in inputs.records.iter().enumerate() {
        let index = inputs.split.start + k;
        let t = Instant::now();
        let p = source.propose(rec, index)?;
        let seconds = t.elapsed().as_secs_f64();
        let s = score(&p.grasp, p.crop.as_ref(), rec, Some(inputs.quality))?;
        let oracle_robust = match inputs.shapes {
            Some(f) => Some(oracle_eval(&f(index)?, &rec.depth.meta, &p.grasp, &inputs.oracle).0),
            None => None,
        };
        per_scene.push(SceneEval {
            index,
            grasp: p.grasp,
            p_robust: s.p_robust.expect("classifier given"),
            robust: s.robust.expect("classifier given"),
            rect_positive: s.rect.positive,
            best_iou: s.rect.best_iou,
            angle_diff: s.rect.angle_diff,
            oracle_robust,
            seconds,
        });
    }
    Ok(summarize(source.name(), per_scene, inputs.config.clone()))
}

pub fn summarize(detector: String, per_scene: Vec<SceneEval>, config: Value) -> EvalReport {
    let n = per_scene.len();
    let pct = |c: usize| {
        if n == 0 {
            0.0
        } else {
            100.0 * c as f64 / n as f64
        }
    };
    let count = |f: &dyn Fn(&SceneEval) -> bool| per_scene.iter().filter(|s| f(s)).count();
    let quad = Quad {
        rect_pos_robust_neg: pct(count(&|s| s.rect_positive && !s.robust)),
        rect_pos_robust_pos: pct(count(&|s| s.rect_positive && s.robust)),
        rect_neg_robust_pos: pct(count(&|s| !s.rect_positive && s.robust)),
        rect_neg_robust_neg: pct(count(&|s| !s.rect_positive && !s.robust)),
    };
    let oracle = per_scene
        .iter()
        .all(|s| s.oracle_robust.is_some())
        .then(|| pct(count(&|s| s.oracle_robust == Some(true))))
        .filter(|_| n > 0);
    EvalReport {
        detector,
        notes: vec![CROP_NOTE.into()],
        scenes: n,
        rect_precision: pct(count(&|s| s.rect_positive)),
        robust_precision: pct(count(&|s| s.robust)),
        oracle_robust_precision: oracle,
        quad,
        mean_detect_seconds: if n == 0 {
            0.0
        } else {
            per_scene.iter().map(|s| s.seconds).sum::<f64>() / n as f64
        },
        per_scene,
        config,
    }
}

/// Settings of the antipodal proposal sampler.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProposalConfig {
    pub candidates: usize,
    /// Largest angle between a contact normal and the closing axis.
    pub perpendicularity_deg: f64,
    /// Smallest normalized-depth gradient magnitude counted as an edge.
    pub edge_threshold: f64,
    /// Meters added to the contact separation on each side.
    pub jaw_margin: f64,
    pub max_opening: f64,
    /// Draws per requested candidate before giving up.
    pub attempts_per_candidate: usize,
}

impl Default for ProposalConfig {
    fn default() -> Self {
        Self {
            candidates: 1000,
            perpendicularity_deg: 20.0,
            edge_threshold: 0.004,
            jaw_margin: 0.003,
            max_opening: 0.05,
            attempts_per_candidate: 20,
        }
    }
}

struct EdgeMap {
    w: usize,
    h: usize,
    /// Pixels with their outward unit normal (pointing towards the table).
    edges: Vec<(usize, usize, f64, f64)>,
    is_edge: Vec<Option<(f64, f64)>>,
}

/// Sobel gradients of the normalized depth. Objects are negative, so the
/// gradient points from the object towards the table.
fn edge_map(img: &Tensor, threshold: f64) -> EdgeMap {
    let (h, w) = (img.shape()[0], img.shape()[1]);
    let d = img.data();
    let at = |r: isize, c: isize| {
        d[(r.clamp(0, h as isize - 1) as usize) * w + c.clamp(0, w as isize - 1) as usize]
    };
    let mut edges = Vec::new();
    let mut is_edge = vec![None; h * w];
    for r in 0..h as isize {
        for c in 0..w as isize {
            let gx = (at(r - 1, c + 1) + 2.0 * at(r, c + 1) + at(r + 1, c + 1))
                - (at(r - 1, c - 1) + 2.0 * at(r, c - 1) + at(r + 1, c - 1));
            let gy = (at(r + 1, c - 1) + 2.0 * at(r + 1, c) + at(r + 1, c + 1))
                - (at(r - 1, c - 1) + 2.0 * at(r - 1, c) + at(r - 1, c + 1));
            let m = gx.hypot(gy) / 8.0;
            // Only the object side of a step: the pixel itself is raised.
            if m > threshold && at(r, c) < 0.0 {
                let n = (gx / (8.0 * m), gy / (8.0 * m));
                edges.push((r as usize, c as usize, n.0, n.1));
                is_edge[r as usize * w + c as usize] = Some(n);
            }
        }
    }
    EdgeMap {
        w,
        h,
        edges,
        is_edge,
    }
}

/// Antipodal candidates from opposing depth edges: a random edge pixel is
/// paired with the first edge pixel met when marching inwards along its
/// normal whose own normal opposes the march direction.
pub fn propose_antipodal(
    image: &DepthImage,
    cfg: &ProposalConfig,
    count: usize,
    seed: u64,
) -> Result<Vec<GraspConfig>> {
    let meta = &image.meta;
    let img = image.normalized();
    let em = edge_map(&img, cfg.edge_threshold);
    if em.edges.is_empty() {
        return Err(Error::Invalid(
            "no depth edges to propose grasps from".into(),
        ));
    }
    let cos_tol = cfg.perpendicularity_deg.to_radians().cos();
    let max_px = cfg.max_opening / meta.pixel_scale;
    let mut r = rng::rng(seed);
    let mut out = Vec::with_capacity(count);
    for _ in 0..count * cfg.attempts_per_candidate {
        if out.len() == count {
            break;
        }
        let (r0, c0, nx, ny) = em.edges[r.random_range(0..em.edges.len())];
        let (x0, y0) = (c0 as f64, r0 as f64);
        let mut found = None;
        let mut t = 1.0;
        while t <= max_px {
            let (x, y) = (x0 - t * nx, y0 - t * ny);
            let (ri, ci) = (y.round(), x.round());
            if ri < 0.0 || ci < 0.0 || ri >= em.h as f64 || ci >= em.w as f64 {
                break;
            }
            if let Some((mx, my)) = em.is_edge[ri as usize * em.w + ci as usize] {
                // The far side's outward normal must point along the march.
                if -(mx * nx + my * ny) >= cos_tol && t > 1.5 {
                    found = Some((ci, ri));
                    break;
                }
            }
            t += 0.5;
        }
        let Some((x1, y1)) = found else { continue };
        let sep = (x1 - x0).hypot(y1 - y0) * meta.pixel_scale;
        let w = sep + 2.0 * cfg.jaw_margin;
        if w > cfg.max_opening {
            continue;
        }
        // Contact height from the raised side of each edge.
        let h = |x: f64, y: f64| -img.data()[y as usize * em.w + x as usize] * meta.camera_height;
        let top = h(x0, y0).min(h(x1, y1));
        let z = top * r.random_range(0.1..0.9);
        let theta = (y1 - y0).atan2(x1 - x0);
        if let Ok(g) = GraspConfig::new(0.5 * (x0 + x1), 0.5 * (y0 + y1), z, theta, w) {
            out.push(g);
        }
    }
    if out.is_empty() {
        return Err(Error::Invalid("no antipodal candidates found".into()));
    }
    Ok(out)
}

/// Index and probability of the best-ranked candidate; ties keep the first.
pub fn rank_candidates(
    image: &DepthImage,
    quality: &QualityModel,
    candidates: &[GraspConfig],
) -> Result<(usize, f64)> {
    let img = image.normalized();
    let mut best = (0, f64::NEG_INFINITY);
    for (i, g) in candidates.iter().enumerate() {
        let p = quality
            .classify(&crop_normalized(&img, &image.meta, g)?, g.z)?
            .1;
        if p > best.1 {
            best = (i, p);
        }
    }
    if candidates.is_empty() {
        return Err(Error::Invalid("no candidates to rank".into()));
    }
    Ok(best)
}

/// Samples antipodal candidates and returns the one the classifier ranks
/// highest, with its robustness probability.
pub fn prop_classify_baseline(
    image: &DepthImage,
    quality: &QualityModel,
    cfg: &ProposalConfig,
    seed: u64,
) -> Result<(GraspConfig, f64)> {
    if cfg.candidates == 0 {
        return Err(Error::Config(
            "proposal baseline needs at least one candidate".into(),
        ));
    }
    let cands = propose_antipodal(image, cfg, cfg.candidates, seed)?;
    let (i, p) = rank_candidates(image, quality, &cands)?;
    Ok((cands[i], p))
}

/// [`prop_classify_baseline`] as a grasp source, seeded per scene.
pub struct PropClassify<'a> {
    pub quality: &'a QualityModel,
    pub config: ProposalConfig,
    pub seed: u64,
}

impl GraspSource for PropClassify<'_> {
    fn name(&self) -> String {
        format!("prop+classify (K={})", self.config.candidates)
    }

    fn propose(&mut self, record: &SceneRecord, index: usize) -> Result<Proposal> {
        let seed = rng::derive_path(self.seed, &[stream::PROPOSAL, index as u64]);
        let (grasp, _) = prop_classify_baseline(&record.depth, self.quality, &self.config, seed)?;
        Ok(Proposal { grasp, crop: None })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingStats {
    pub samples: usize,
    pub median: f64,
    pub p95: f64,
    pub mean: f64,
}

impl TimingStats {
    pub fn from_samples(mut t: Vec<f64>) -> Self {
        t.sort_by(f64::total_cmp);
        let n = t.len();
        let q = |f: f64| t[((f * (n - 1) as f64).round() as usize).min(n - 1)];
        Self {
            samples: n,
            median: if n % 2 == 1 {
                t[n / 2]
            } else {
                0.5 * (t[n / 2 - 1] + t[n / 2])
            },
            p95: q(0.95),
            mean: t.iter().sum::<f64>() / n as f64,
        }
    }
}

/// Wall-clock seconds per call of `detect` over `reps` passes through
/// `images`, after `warmup` untimed calls. Runs on the calling thread.
pub fn timing_bench<F>(
    mut detect: F,
    images: &[DepthImage],
    warmup: usize,
    reps: usize,
) -> Result<TimingStats>
where
    F: FnMut(&DepthImage) -> Result<()>,
{
    if reps < 10 {
        return Err(Error::Config("timing needs at least 10 repetitions".into()));
    }
    if images.is_empty() {
        return Err(Error::Invalid("timing needs at least one image".into()));
    }
    for i in 0..warmup {
        detect(&images[i % images.len()])?;
    }
    let mut samples = Vec::with_capacity(reps);
    for i in 0..reps {
        let img = &images[i % images.len()];
        let t = Instant::now();
        detect(img)?;
        samples.push(t.elapsed().as_secs_f64());
    }
    Ok(TimingStats::from_samples(samples))
}

/// Least-squares line through `(x, y)` points: `(slope, intercept, R²)`.
pub fn linear_fit(points: &[(f64, f64)]) -> (f64, f64, f64) {
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let syy: f64 = points.iter().map(|p| (p.1 - my).powi(2)).sum();
    let slope = sxy / sxx;
    let r2 = if syy == 0.0 {
        1.0
    } else {
        sxy * sxy / (sxx * syy)
    };
    (slope, my - slope * mx, r2)
}

/// Writes the depth image as an 8-bit graymap with the grasp rectangle
/// drawn in white and the jaw ends in black.
pub fn write_overlay(path: &Path, image: &DepthImage, grasp: &GraspConfig) -> Result<()> {
    let meta = &image.meta;
    let img = image.normalized();
    let d = img.data();
    let lo = d.iter().copied().fold(0.0, f64::min);
    let mut px: Vec<u8> = d
        .iter()
        .map(|&v| {
            if lo < 0.0 {
                (40.0 + 180.0 * v / lo).round() as u8
            } else {
                40
            }
        })
        .collect();
    let rect = grasp.rect(meta);
    let corners = rect.corners();
    for k in 0..4 {
        let (a, b) = (corners[k], corners[(k + 1) % 4]);
        let value = if k % 2 == 1 { 0 } else { 255 };
        let steps = ((b.0 - a.0).hypot(b.1 - a.1) * 2.0).ceil().max(1.0) as usize;
        for s in 0..=steps {
            let f = s as f64 / steps as f64;
            let (x, y) = (
                (a.0 + f * (b.0 - a.0)).round(),
                (a.1 + f * (b.1 - a.1)).round(),
            );
            if x >= 0.0 && y >= 0.0 && (x as usize) < meta.width && (y as usize) < meta.height {
                px[y as usize * meta.width + x as usize] = value;
            }
        }
    }
    crate::image::write_pgm8(path, meta.width, meta.height, &px)
}
