//! Synthetic top-down depth scenes with sparse oracle-labelled grasp
//! annotations, and the on-disk dataset layout.

pub mod annotate;
pub mod gqsd;
pub mod oracle;
pub mod shapes;

use std::path::{Path, PathBuf};

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

pub use crate::image::{DepthImage, ImageMeta};
pub use annotate::{sample_annotations, sample_mixed, Annotation};
pub use oracle::{oracle_detail, oracle_eval, Margins, OracleConfig, OracleOutcome};
pub use shapes::{render_scene, PartKind, Pose, PrimitiveShape, ShapeMix};

use crate::error::{Error, Result};
use crate::graspgeom::OPENING_FRACTION;
use crate::rng::{self, stream};
use crate::stn::DatasetStats;

/// One example: a depth image and its annotations.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneRecord {
    pub depth: DepthImage,
    pub annotations: Vec<Annotation>,
}

impl SceneRecord {
    pub fn positives(&self) -> impl Iterator<Item = &Annotation> {
        self.annotations.iter().filter(|a| a.robust)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSpec {
    pub scenes: usize,
    pub image_size: usize,
    /// Meters per pixel.
    pub pixel_scale: f64,
    pub camera_height: f64,
    /// Train, validation and test fractions.
    pub splits: [f64; 3],
    pub shapes: ShapeMix,
    /// Inclusive range of robust annotations per scene.
    pub positives: (usize, usize),
    pub negatives: usize,
    pub noise_std: f64,
    /// Free pixels between the shape's bounding disk and the frame.
    pub frame_margin: f64,
    pub oracle: OracleConfig,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            scenes: 1000,
            image_size: 96,
            pixel_scale: 0.001,
            camera_height: 0.7,
            splits: [0.8, 0.1, 0.1],
            shapes: ShapeMix::default(),
            positives: (4, 12),
            negatives: 4,
            noise_std: 0.0,
            frame_margin: 4.0,
            oracle: OracleConfig::default(),
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.scenes == 0 {
            return Err(Error::Config("dataset needs at least one scene".into()));
        }
        if self.image_size < 16 || self.image_size > u16::MAX as usize {
            return Err(Error::Config(format!(
                "image_size {} out of range",
                self.image_size
            )));
        }
        if self.splits.iter().any(|f| !(*f >= 0.0))
            || (self.splits.iter().sum::<f64>() - 1.0).abs() > 1e-9
        {
            return Err(Error::Config(
                "split fractions must be non-negative and sum to 1".into(),
            ));
        }
        if self.positives.0 == 0 || self.positives.0 > self.positives.1 {
            return Err(Error::Config(
                "positives must be a range with a lower bound of at least 1".into(),
            ));
        }
        if !(self.noise_std >= 0.0) || !(self.frame_margin >= 0.0) {
            return Err(Error::Config(
                "noise_std and frame_margin must be non-negative".into(),
            ));
        }
        self.shapes.validate()?;
        self.oracle.validate()?;
        self.meta().validate()
    }

    /// Image metadata, rounded to the precision stored in shards.
    pub fn meta(&self) -> ImageMeta {
        ImageMeta {
            height: self.image_size,
            width: self.image_size,
            pixel_scale: self.pixel_scale as f32 as f64,
            camera_height: self.camera_height as f32 as f64,
        }
    }

    /// Scene counts per split.
    pub fn split_counts(&self) -> [usize; 3] {
        let n = self.scenes as f64;
        let train = (n * self.splits[0]).round() as usize;
        let val = ((n * self.splits[1]).round() as usize).min(self.scenes - train.min(self.scenes));
        let train = train.min(self.scenes);
        [train, val, self.scenes - train - val]
    }

    /// Half-open scene index ranges per split.
    pub fn split_ranges(&self) -> [(usize, usize); 3] {
        let [a, b, _] = self.split_counts();
        [(0, a), (a, a + b), (a + b, self.scenes)]
    }
}

pub fn scene_seed(root: u64, index: usize) -> u64 {
    rng::derive_path(root, &[stream::SCENE, index as u64])
}

/// Regenerates scene `index` of a dataset: the generating shape and its
/// record. Shapes that do not fit the frame or cannot host the requested
/// positives are redrawn.
pub fn generate_scene(
    spec: &DatasetSpec,
    root: u64,
    index: usize,
) -> Result<(PrimitiveShape, SceneRecord)> {
    let meta = spec.meta();
    let seed = scene_seed(root, index);
    let mut last = None;
    for attempt in 0..16u64 {
        let s = rng::derive(seed, attempt);
        let mut r = rng::rng(s);
        let shape = match shapes::random_shape(&mut r, &spec.shapes, &meta, spec.frame_margin) {
            Ok(s) => s,
            Err(e @ Error::OutOfFrame(_)) => {
                last = Some(e);
                continue;
            }
            Err(e) => return Err(e),
        };
        let n_pos = r.random_range(spec.positives.0..=spec.positives.1);
        match sample_annotations(
            &shape,
            &meta,
            n_pos,
            spec.negatives,
            rng::derive(s, 1),
            &spec.oracle,
        ) {
            Ok(annotations) => {
                let depth = render_scene(&shape, &meta, spec.noise_std, rng::derive(s, 2))?;
                return Ok((shape, SceneRecord { depth, annotations }));
            }
            Err(e @ Error::Sampling { .. }) => last = Some(e),
            Err(e) => return Err(e),
        }
    }
    Err(last.expect("at least one attempt"))
}

/// Crop scale `s` of a grasp opening `w` (meters).
pub fn scale_of(w: f64, meta: &ImageMeta) -> f64 {
    w / (meta.pixel_scale * meta.span() * OPENING_FRACTION)
}

/// γ, z mean and z standard deviation over positive annotations.
pub fn compute_stats(records: &[SceneRecord]) -> Result<DatasetStats> {
    let mut s_sum = 0.0;
    let (mut z_sum, mut z_sq) = (0.0, 0.0);
    let mut n = 0usize;
    for r in records {
        for a in r.positives() {
            s_sum += scale_of(a.grasp.w, &r.depth.meta);
            z_sum += a.grasp.z;
            z_sq += a.grasp.z * a.grasp.z;
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::Invalid(
            "no positive annotations to compute statistics".into(),
        ));
    }
    let nf = n as f64;
    let z_mean = z_sum / nf;
    let z_std = (z_sq / nf - z_mean * z_mean).max(0.0).sqrt().max(1e-6);
    DatasetStats::new(s_sum / nf, z_mean, z_std)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitEntry {
    pub file: String,
    /// Half-open scene index range.
    pub start: usize,
    pub end: usize,
    pub sha256: String,
}

/// JSON sidecar describing a generated dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sidecar {
    pub format: String,
    pub format_version: u32,
    pub generator: String,
    pub seed: u64,
    pub spec: DatasetSpec,
    pub stats: DatasetStats,
    pub normalization: String,
    pub train: SplitEntry,
    pub val: SplitEntry,
    pub test: SplitEntry,
    pub scene_seeds: Vec<u64>,
    /// Free-form provenance, e.g. the full run configuration.
    #[serde(default)]
    pub config: Value,
}

pub const SIDECAR: &str = "dataset.json";
pub const NORMALIZATION: &str = "(depth - table_depth) / camera_height";

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Generates every split and writes the shards and sidecar into `dir`.
pub fn build_dataset(spec: &DatasetSpec, seed: u64, dir: &Path, config: Value) -> Result<Sidecar> {
    spec.validate()?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let ranges = spec.split_ranges();
    let mut entries = Vec::new();
    let mut train_records = Vec::new();
    for (name, (start, end)) in ["train", "val", "test"].into_iter().zip(ranges) {
        let records = (start..end)
            .map(|i| generate_scene(spec, seed, i).map(|(_, r)| r))
            .collect::<Result<Vec<_>>>()?;
        let bytes = gqsd::encode(&records)?;
        let file = format!("{name}.gqsd");
        let path = dir.join(&file);
        std::fs::write(&path, &bytes).map_err(|e| Error::io(&path, e))?;
        entries.push(SplitEntry {
            file,
            start,
            end,
            sha256: sha256_hex(&bytes),
        });
        if name == "train" {
            train_records = records;
        }
    }
    let stats = compute_stats(&train_records)?;
    let [train, val, test]: [SplitEntry; 3] = entries.try_into().expect("three splits");
    let sidecar = Sidecar {
        format: "GQSD".into(),
        format_version: gqsd::VERSION,
        generator: rng::GENERATOR.into(),
        seed,
        spec: spec.clone(),
        stats,
        normalization: NORMALIZATION.into(),
        train,
        val,
        test,
        scene_seeds: (0..spec.scenes).map(|i| scene_seed(seed, i)).collect(),
        config,
    };
    let path = dir.join(SIDECAR);
    let json = serde_json::to_vec_pretty(&sidecar).expect("sidecar serializes");
    std::fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    Ok(sidecar)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// A dataset directory opened through its sidecar.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub dir: PathBuf,
    pub sidecar: Sidecar,
}

impl Dataset {
    pub fn open(dir: &Path) -> Result<Self> {
        let path = dir.join(SIDECAR);
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let sidecar: Sidecar = serde_json::from_slice(&bytes)
            .map_err(|e| Error::format("dataset sidecar", format!("{}: {e}", path.display())))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            sidecar,
        })
    }

    pub fn entry(&self, split: Split) -> &SplitEntry {
        match split {
            Split::Train => &self.sidecar.train,
            Split::Val => &self.sidecar.val,
            Split::Test => &self.sidecar.test,
        }
    }

    pub fn load(&self, split: Split) -> Result<Vec<SceneRecord>> {
        let e = self.entry(split);
        let path = self.dir.join(&e.file);
        let records = gqsd::read(&path)?;
        if records.len() != e.end - e.start {
            return Err(Error::format(
                "GQSD",
                format!(
                    "{}: {} records, sidecar says {}",
                    path.display(),
                    records.len(),
                    e.end - e.start
                ),
            ));
        }
        Ok(records)
    }

    pub fn stats(&self) -> DatasetStats {
        self.sidecar.stats
    }

    /// Regenerates the shape behind scene `index`.
    pub fn shape(&self, index: usize) -> Result<PrimitiveShape> {
        generate_scene(&self.sidecar.spec, self.sidecar.seed, index).map(|(s, _)| s)
    }
}
