use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use gqstn::checkpoint::Checkpoint;
use gqstn::config::RunConfig;
use gqstn::evalbench::{self, EvalInputs, GraspSource, PropClassify, SplitTag};
use gqstn::graspgeom::crop_normalized;
use gqstn::quality::{self, QualityModel};
use gqstn::scenegen::{self, gqsd, Dataset, SceneRecord, Split};
use gqstn::training::{self, Detector, DetectorKind, TrainRequest};
use gqstn::{DepthImage, Error};

#[derive(Parser)]
#[command(
    name = "gqstn",
    version,
    about = "One-shot grasp detection with a spatial transformer cascade"
)]
struct Cli {
    /// Root seed of the command. Overrides the matching entry of the
    /// config's `seeds` section.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Variant {
    Scheduled,
    RobustnessOnly,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset: three GQSD shards and a JSON sidecar.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the robustness classifier on oracle-labelled crops.
    TrainQuality {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the cascade detector against a frozen classifier.
    TrainDetector {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Checkpoint written by train-quality.
        #[arg(long)]
        quality: Option<PathBuf>,
        /// Continue from a phase checkpoint of an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// `robustness-only` keeps the learning-rate phases but sets the
        /// loss mix to zero and disables teacher forcing from the start.
        #[arg(long, value_enum, default_value = "scheduled")]
        variant: Variant,
    },
    /// Train the direct-regression baseline with the localization loss.
    TrainBaseline {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score a detector, or the proposal baseline, on one dataset split.
    Eval {
        #[arg(
            long,
            required_unless_present = "proposal",
            conflicts_with = "proposal"
        )]
        detector: Option<PathBuf>,
        /// Evaluate the antipodal proposal + classification baseline instead.
        #[arg(long)]
        proposal: bool,
        #[arg(long)]
        quality: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        /// Allow evaluating on scenes the detector was trained on.
        #[arg(long)]
        allow_overlap: bool,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Write the report here instead of standard output.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Directory for 8-bit graymap overlays of the detections.
        #[arg(long)]
        overlays: Option<PathBuf>,
    },
    /// Detect one grasp on a GQSD-single shard or a 16-bit graymap.
    Predict {
        #[arg(long)]
        detector: PathBuf,
        #[arg(long)]
        quality: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Meters per pixel of a graymap input (default: the detector's).
        #[arg(long)]
        pixel_scale: Option<f64>,
        /// Camera height of a graymap input (default: the detector's).
        #[arg(long)]
        camera_height: Option<f64>,
    },
    /// Time one-shot detection against the proposal baseline.
    Bench {
        #[arg(long)]
        detector: PathBuf,
        #[arg(long)]
        quality: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Test scenes cycled through by the timing loops.
        #[arg(long, default_value_t = 10)]
        scenes: usize,
    },
    /// Finite-difference check of every differentiable operation.
    GradCheck {
        #[arg(long, default_value_t = gqstn::gradsuite::DEFAULT_CASES)]
        cases: usize,
        #[arg(long, default_value_t = gqstn::gradsuite::DEFAULT_TOL)]
        tol: f64,
        /// Only op sets whose name starts with one of these.
        #[arg(long, value_delimiter = ',')]
        ops: Vec<String>,
    },
    /// Print the full configuration with every default filled in.
    PrintConfig {
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

enum Failure {
    Usage(String),
    Data(String),
    Numerical(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) => Failure::Usage(e.to_string()),
            Error::NonFinite { .. } => Failure::Numerical(e.to_string()),
            _ => Failure::Data(e.to_string()),
        }
    }
}

type Outcome = Result<(), Failure>;

fn load_config(path: Option<&Path>) -> Result<RunConfig, Failure> {
    Ok(match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    })
}

fn write_file(path: &Path, bytes: &[u8]) -> Outcome {
    std::fs::write(path, bytes).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))
}

fn create_dir(path: &Path) -> Outcome {
    std::fs::create_dir_all(path).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))
}

fn emit(v: &Value, out: Option<&Path>) -> Outcome {
    let text = serde_json::to_string_pretty(v).expect("json");
    match out {
        Some(p) => write_file(p, (text + "\n").as_bytes()),
        None => match writeln!(std::io::stdout().lock(), "{text}") {
            Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => {
                Err(Failure::Data(format!("stdout: {e}")))
            }
            _ => Ok(()),
        },
    }
}

fn provenance(cfg: &RunConfig, seed: u64) -> Value {
    json!({
        "config": cfg.to_value(),
        "seed": seed,
        "format_version": gqstn::checkpoint::VERSION,
    })
}

fn gen_data(cfg: &RunConfig, seed: u64, out: &Path) -> Outcome {
    let sidecar = scenegen::build_dataset(&cfg.dataset, seed, out, provenance(cfg, seed))?;
    let counts = cfg.dataset.split_counts();
    emit(
        &json!({
            "dir": out,
            "seed": seed,
            "stats": sidecar.stats,
            "scenes": {"train": counts[0], "val": counts[1], "test": counts[2]},
            "sha256": {
                "train": sidecar.train.sha256,
                "val": sidecar.val.sha256,
                "test": sidecar.test.sha256,
            },
        }),
        None,
    )
}

fn train_quality(cfg: &RunConfig, seed: u64, data: &Path, out: &Path) -> Outcome {
    let ds = Dataset::open(data)?;
    let (model, report) = quality::train_on_dataset(&ds, &cfg.quality, seed)?;
    create_dir(out)?;
    let mut meta = provenance(cfg, seed);
    meta["dataset_seed"] = json!(ds.sidecar.seed);
    model.save(&out.join("quality.gqtn"), meta.clone())?;
    let history: String = report
        .history
        .iter()
        .map(|r| serde_json::to_string(r).expect("json") + "\n")
        .collect();
    write_file(&out.join("history.jsonl"), history.as_bytes())?;
    let summary = json!({"report": report, "provenance": meta});
    emit(&summary, Some(&out.join("quality_report.json")))?;
    emit(
        &json!({
            "heldout_accuracy": report.heldout.accuracy,
            "heldout_precision": report.heldout.precision,
            "heldout_recall": report.heldout.recall,
            "train_examples": report.train_examples,
            "checksum": report.checksum,
        }),
        None,
    )
}

fn split_tag(ds: &Dataset, split: Split) -> SplitTag {
    let e = ds.entry(split);
    SplitTag {
        dataset_seed: ds.sidecar.seed,
        start: e.start,
        end: e.end,
    }
}

struct TrainArgs<'a> {
    cfg: &'a RunConfig,
    seed: u64,
    data: &'a Path,
    out: &'a Path,
    quality: Option<&'a Path>,
    resume: Option<&'a Path>,
    variant: Variant,
}

fn train(kind: DetectorKind, a: TrainArgs) -> Outcome {
    let ds = Dataset::open(a.data)?;
    let train = ds.load(Split::Train)?;
    let val = ds.load(Split::Val)?;
    let q = a.quality.map(QualityModel::load).transpose()?;
    let schedule = match kind {
        DetectorKind::GqStn => match a.variant {
            Variant::Scheduled => a.cfg.schedule.clone(),
            Variant::RobustnessOnly => a.cfg.schedule.robustness_only(),
        },
        DetectorKind::DirectGrasp => a.cfg.schedule.localization_only(),
    };
    let mut config = provenance(a.cfg, a.seed);
    config["variant"] = json!(format!("{:?}", a.variant));
    let ck_dir = a.out.join("checkpoints");
    let req = TrainRequest {
        kind,
        backbone: &a.cfg.backbone,
        rotation: a.cfg.detector.rotation,
        schedule: &schedule,
        train: &train,
        val: &val,
        train_split: split_tag(&ds, Split::Train),
        stats: ds.sidecar.stats,
        quality: q.as_ref(),
        seed: a.seed,
        checkpoint_dir: Some(&ck_dir),
        config: &config,
    };
    let outcome = match a.resume {
        Some(p) => training::resume_detector(&req, &Checkpoint::load(p)?)?,
        None => training::train_detector(&req)?,
    };
    let path = a.out.join(format!("{}.gqtn", kind.name()));
    outcome.detector.save(&path, outcome.metadata.clone())?;
    write_file(
        &a.out.join("history.jsonl"),
        training::history_jsonl(&outcome.history).as_bytes(),
    )?;
    let summary = json!({
        "detector": kind,
        "checkpoint": path,
        "phase_checkpoints": outcome.checkpoints,
        "history_checksum": training::history_checksum(&outcome.history),
        "detector_checksum": outcome.detector.checksum(),
        "best_val": outcome.best_val,
        "epochs": outcome.history.iter().filter(|r| r.kind == "epoch").count(),
        "final_epoch": outcome.history.iter().rev().find(|r| r.kind == "epoch"),
    });
    emit(&summary, Some(&a.out.join("summary.json")))?;
    emit(&summary, None)
}

struct EvalArgs<'a> {
    cfg: &'a RunConfig,
    seed: u64,
    detector: Option<&'a Path>,
    quality: &'a Path,
    data: &'a Path,
    split: Split,
    allow_overlap: bool,
    out: Option<&'a Path>,
    overlays: Option<&'a Path>,
}

fn eval(a: EvalArgs) -> Outcome {
    let q = QualityModel::load(a.quality)?;
    let ds = Dataset::open(a.data)?;
    let records = ds.load(a.split)?;
    let split = split_tag(&ds, a.split);
    let (mut source, trained_on): (Box<dyn GraspSource + '_>, _) = match a.detector {
        Some(p) => {
            let ck = Checkpoint::load(p)?;
            (
                Box::new(Detector::from_checkpoint(&ck)?),
                training::trained_split(&ck),
            )
        }
        None => (
            Box::new(PropClassify {
                quality: &q,
                config: a.cfg.eval.proposal.clone(),
                seed: a.seed,
            }),
            None,
        ),
    };
    let shapes = |i: usize| ds.shape(i);
    let mut meta = provenance(a.cfg, a.seed);
    meta["detector_checkpoint"] = json!(a.detector);
    meta["quality_checksum"] = json!(q.checksum());
    meta["split"] = json!(split);
    let inputs = EvalInputs {
        records: &records,
        split,
        trained_on,
        allow_overlap: a.allow_overlap,
        quality: &q,
        shapes: Some(&shapes),
        oracle: ds.sidecar.spec.oracle.clone(),
        config: meta,
    };
    let report = evalbench::eval_detector(source.as_mut(), &inputs)?;
    if let Some(dir) = a.overlays {
        create_dir(dir)?;
        let n = if a.cfg.eval.overlays == 0 {
            report.per_scene.len()
        } else {
            a.cfg.eval.overlays
        };
        for (s, rec) in report.per_scene.iter().zip(&records).take(n) {
            evalbench::write_overlay(
                &dir.join(format!("scene{:05}.pgm", s.index)),
                &rec.depth,
                &s.grasp,
            )?;
        }
    }
    emit(&serde_json::to_value(&report).expect("report"), a.out)
}

fn read_image(
    path: &Path,
    det: &Detector,
    pixel_scale: Option<f64>,
    camera_height: Option<f64>,
) -> Result<DepthImage, Failure> {
    let bytes =
        std::fs::read(path).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))?;
    let expected = "expected a GQSD-single shard (one record) or a binary 16-bit graymap (P5)";
    if bytes.starts_with(gqsd::MAGIC) {
        let mut recs = gqsd::decode(&bytes)
            .map_err(|e| Failure::Data(format!("{}: {e}; {expected}", path.display())))?;
        if recs.len() != 1 {
            return Err(Failure::Data(format!(
                "{}: shard holds {} records; {expected}",
                path.display(),
                recs.len()
            )));
        }
        Ok(recs.remove(0).depth)
    } else if bytes.starts_with(b"P5") {
        let ps = pixel_scale.unwrap_or(det.meta.pixel_scale);
        let ch = camera_height.unwrap_or(det.meta.camera_height);
        gqstn::image::read_depth_pgm(path, ps, ch)
            .map_err(|e| Failure::Data(format!("{e}; {expected}")))
    } else {
        Err(Failure::Data(format!(
            "{}: unrecognized image format; {expected}",
            path.display()
        )))
    }
}

fn predict(
    detector: &Path,
    quality: &Path,
    image: &Path,
    ps: Option<f64>,
    ch: Option<f64>,
) -> Outcome {
    let det = Detector::load(detector)?;
    let q = QualityModel::load(quality)?;
    let img = read_image(image, &det, ps, ch)?;
    if (img.meta.height, img.meta.width) != (det.meta.height, det.meta.width) {
        return Err(Failure::Data(format!(
            "image is {}x{}, the detector expects {}x{}",
            img.meta.height, img.meta.width, det.meta.height, det.meta.width
        )));
    }
    let d = det.detect(&img)?;
    let crop = match d.crop {
        Some(c) => c,
        None => crop_normalized(&img.normalized(), &img.meta, &d.grasp)?,
    };
    let (_, p) = q.classify(&crop, d.grasp.z)?;
    emit(
        &json!({
            "detector": det.kind,
            "grasp": d.grasp,
            "p_robust": p,
            "robust": quality::is_robust(p, q.threshold()),
        }),
        None,
    )
}

fn bench(
    cfg: &RunConfig,
    seed: u64,
    detector: &Path,
    quality: &Path,
    data: &Path,
    scenes: usize,
) -> Outcome {
    let det = Detector::load(detector)?;
    let q = QualityModel::load(quality)?;
    let ds = Dataset::open(data)?;
    let images: Vec<DepthImage> = ds
        .load(Split::Test)?
        .into_iter()
        .take(scenes.max(1))
        .map(|r: SceneRecord| r.depth)
        .collect();
    let (warm, reps) = (cfg.eval.timing_warmup, cfg.eval.timing_reps);
    let one_shot = evalbench::timing_bench(|im| det.detect(im).map(drop), &images, warm, reps)?;
    let net_cfg = det.net_configs()[0].clone();
    let backbone = evalbench::timing_bench(
        |im| gqstn::locnet::predict(&net_cfg, &det.nets[0], &im.normalized()).map(drop),
        &images,
        warm,
        reps,
    )?;
    let mut baseline = Vec::new();
    for &k in &cfg.eval.timing_candidates {
        let pc = evalbench::ProposalConfig {
            candidates: k,
            ..cfg.eval.proposal.clone()
        };
        let t = evalbench::timing_bench(
            |im| evalbench::prop_classify_baseline(im, &q, &pc, seed).map(drop),
            &images,
            warm,
            reps,
        )?;
        baseline.push((k, t));
    }
    let pts: Vec<(f64, f64)> = baseline
        .iter()
        .map(|(k, t)| (*k as f64, t.median))
        .collect();
    let (slope, intercept, r2) = evalbench::linear_fit(&pts);
    let largest = &baseline.last().expect("at least one candidate count").1;
    emit(
        &json!({
            "detector": det.kind,
            "one_shot": one_shot,
            "single_backbone": backbone,
            "stage_ratio": one_shot.median / backbone.median,
            "baseline": baseline.iter().map(|(k, t)| json!({"candidates": k, "timing": t})).collect::<Vec<_>>(),
            "baseline_fit": {"seconds_per_candidate": slope, "intercept": intercept, "r2": r2},
            "speedup": largest.median / one_shot.median,
            "provenance": provenance(cfg, seed),
        }),
        None,
    )
}

fn grad_check(cases: usize, tol: f64, seed: u64, ops: &[String]) -> Outcome {
    let results = gqstn::gradsuite::run(cases, seed, tol, ops)?;
    if results.is_empty() {
        return Err(Failure::Usage(format!("no op set matches {ops:?}")));
    }
    let failed: Vec<_> = results
        .iter()
        .filter(|r| !r.passed)
        .map(|r| r.op.clone())
        .collect();
    emit(
        &json!({"seed": seed, "tol": tol, "cases": cases, "results": results, "failed": failed}),
        None,
    )?;
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Numerical(format!(
            "gradient check failed for {}",
            failed.join(", ")
        )))
    }
}

fn run(cli: Cli) -> Outcome {
    let seeds = |cfg: &RunConfig| cfg.seeds.clone();
    match cli.command {
        Command::GenData { config, out } => {
            let cfg = load_config(config.as_deref())?;
            gen_data(&cfg, cli.seed.unwrap_or(seeds(&cfg).dataset), &out)
        }
        Command::TrainQuality { config, data, out } => {
            let cfg = load_config(config.as_deref())?;
            train_quality(&cfg, cli.seed.unwrap_or(seeds(&cfg).quality), &data, &out)
        }
        Command::TrainDetector {
            config,
            data,
            out,
            quality,
            resume,
            variant,
        } => {
            let quality = quality.ok_or_else(|| {
                Failure::Usage(
                    "train-detector needs a frozen quality model: pass --quality with a checkpoint from train-quality"
                        .into(),
                )
            })?;
            let cfg = load_config(config.as_deref())?;
            let args = TrainArgs {
                cfg: &cfg,
                seed: cli.seed.unwrap_or(seeds(&cfg).detector),
                data: &data,
                out: &out,
                quality: Some(&quality),
                resume: resume.as_deref(),
                variant,
            };
            train(DetectorKind::GqStn, args)
        }
        Command::TrainBaseline {
            config,
            data,
            out,
            resume,
        } => {
            let cfg = load_config(config.as_deref())?;
            let args = TrainArgs {
                cfg: &cfg,
                seed: cli.seed.unwrap_or(seeds(&cfg).baseline),
                data: &data,
                out: &out,
                quality: None,
                resume: resume.as_deref(),
                variant: Variant::Scheduled,
            };
            train(DetectorKind::DirectGrasp, args)
        }
        Command::Eval {
            detector,
            proposal: _,
            quality,
            data,
            split,
            allow_overlap,
            config,
            out,
            overlays,
        } => {
            let cfg = load_config(config.as_deref())?;
            eval(EvalArgs {
                cfg: &cfg,
                seed: cli.seed.unwrap_or(seeds(&cfg).eval),
                detector: detector.as_deref(),
                quality: &quality,
                data: &data,
                split: split.into(),
                allow_overlap,
                out: out.as_deref(),
                overlays: overlays.as_deref(),
            })
        }
        Command::Predict {
            detector,
            quality,
            image,
            pixel_scale,
            camera_height,
        } => predict(&detector, &quality, &image, pixel_scale, camera_height),
        Command::Bench {
            detector,
            quality,
            data,
            config,
            scenes,
        } => {
            let cfg = load_config(config.as_deref())?;
            bench(
                &cfg,
                cli.seed.unwrap_or(seeds(&cfg).eval),
                &detector,
                &quality,
                &data,
                scenes,
            )
        }
        Command::GradCheck { cases, tol, ops } => {
            grad_check(cases, tol, cli.seed.unwrap_or(2024), &ops)
        }
        Command::PrintConfig { config } => {
            let cfg = load_config(config.as_deref())?;
            emit(&cfg.to_value(), None)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return ExitCode::from(if usage { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let (code, kind, msg) = match f {
                Failure::Usage(m) => (1, "usage", m),
                Failure::Data(m) => (2, "data", m),
                Failure::Numerical(m) => (3, "numerical", m),
            };
            eprintln!("gqstn: {kind} error: {msg}");
            ExitCode::from(code)
        }
    }
}
