use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

fn gqstn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gqstn"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stdout_json(o: &Output) -> Value {
    assert_eq!(code(o), 0, "stderr: {}", String::from_utf8_lossy(&o.stderr));
    serde_json::from_slice(&o.stdout).expect("json on stdout")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn tiny_config() -> Value {
    json!({
        "dataset": {
            "scenes": 20, "image_size": 32, "pixel_scale": 0.003,
            "frame_margin": 1.0, "positives": [1, 2], "negatives": 1,
            "splits": [0.6, 0.2, 0.2],
        },
        "backbone": {"input_size": [32, 32], "widths": [4, 8]},
        "quality": {"epochs": 1, "crops_per_scene": 4, "backbone": {
            "input_size": [32, 32], "in_channels": 2, "widths": [4, 4], "head_dim": 1
        }},
        "schedule": {"batch_size": 4, "phases": [
            {"epochs": 1, "xi": 1.0, "learning_rate": 1e-3, "teacher_forcing": true},
            {"epochs": 1, "xi": 0.0, "learning_rate": 1e-4, "teacher_forcing": false}
        ]},
        "eval": {"timing_reps": 10, "timing_warmup": 1, "timing_candidates": [5, 10],
                 "proposal": {"candidates": 10}},
    })
}

struct Run {
    _dir: tempfile::TempDir,
    root: PathBuf,
    config: PathBuf,
}

impl Run {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let config = root.join("config.json");
        std::fs::write(&config, tiny_config().to_string()).unwrap();
        Run {
            _dir: dir,
            root,
            config,
        }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }
}

#[test]
fn help_succeeds_and_bad_usage_exits_one() {
    assert_eq!(code(&gqstn(&["--help"])), 0);
    assert_eq!(code(&gqstn(&["no-such-command"])), 1);
    assert_eq!(code(&gqstn(&["eval", "--data", "x"])), 1);
}

#[test]
fn print_config_round_trips() {
    let v = stdout_json(&gqstn(&["print-config"]));
    assert!(v["dataset"].get("oracle").is_none());
    assert!(v["oracle"]["friction_coeff"].is_number());
    let run = Run::new();
    std::fs::write(&run.config, v.to_string()).unwrap();
    assert_eq!(
        stdout_json(&gqstn(&["print-config", "--config", p(&run.config)])),
        v
    );
}

#[test]
fn unknown_config_keys_are_usage_errors() {
    let run = Run::new();
    std::fs::write(&run.config, r#"{"schedule": {"epochs": 3}}"#).unwrap();
    let o = gqstn(&[
        "gen-data",
        "--config",
        p(&run.config),
        "--out",
        p(&run.path("d")),
    ]);
    assert_eq!(code(&o), 1);
}

#[test]
fn detector_training_needs_a_classifier() {
    let run = Run::new();
    let o = gqstn(&[
        "train-detector",
        "--data",
        p(&run.root),
        "--out",
        p(&run.path("o")),
    ]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("--quality"));
}

#[test]
fn missing_dataset_is_a_data_error() {
    let run = Run::new();
    let o = gqstn(&[
        "train-quality",
        "--data",
        p(&run.path("none")),
        "--out",
        p(&run.path("q")),
    ]);
    assert_eq!(code(&o), 2);
}

#[test]
fn grad_check_reports_each_op_set() {
    let v = stdout_json(&gqstn(&[
        "grad-check",
        "--cases",
        "5",
        "--ops",
        "relu,sampler.theta",
    ]));
    let ops: Vec<_> = v["results"]
        .as_array()
        .unwrap()
        .iter()
        .map(|r| r["op"].as_str().unwrap().to_string())
        .collect();
    assert_eq!(ops, ["relu", "sampler.theta"]);
    assert!(v["failed"].as_array().unwrap().is_empty());
    assert_eq!(code(&gqstn(&["grad-check", "--ops", "nothing"])), 1);
}

#[test]
fn pipeline_end_to_end() {
    let run = Run::new();
    let cfg = p(&run.config);
    let data = run.path("data");
    let gen = stdout_json(&gqstn(&["gen-data", "--config", cfg, "--out", p(&data)]));
    assert_eq!(gen["scenes"]["train"], 12);
    let again = stdout_json(&gqstn(&[
        "gen-data",
        "--config",
        cfg,
        "--out",
        p(&run.path("data2")),
    ]));
    assert_eq!(gen["sha256"], again["sha256"]);

    let qdir = run.path("q");
    let q = stdout_json(&gqstn(&[
        "train-quality",
        "--config",
        cfg,
        "--data",
        p(&data),
        "--out",
        p(&qdir),
    ]));
    assert!(q["heldout_accuracy"].as_f64().unwrap() >= 0.0);
    let qck = qdir.join("quality.gqtn");
    assert!(qdir.join("history.jsonl").exists() && qdir.join("quality_report.json").exists());

    let ddir = run.path("det");
    let args = [
        "train-detector",
        "--config",
        cfg,
        "--data",
        p(&data),
        "--quality",
        p(&qck),
        "--out",
        p(&ddir),
    ];
    let t = stdout_json(&gqstn(&args));
    let det = PathBuf::from(t["checkpoint"].as_str().unwrap());
    assert!(det.exists(), "{t}");
    assert_eq!(t["phase_checkpoints"].as_array().unwrap().len(), 2);
    let history = std::fs::read_to_string(ddir.join("history.jsonl")).unwrap();
    assert!(history
        .lines()
        .all(|l| serde_json::from_str::<Value>(l).is_ok()));

    // Resuming from the first phase reproduces the run exactly.
    let rdir = run.path("resumed");
    let phase0 = t["phase_checkpoints"][0].as_str().unwrap();
    let mut rargs = args.to_vec();
    rargs[8] = p(&rdir);
    rargs.extend(["--resume", phase0]);
    let r = stdout_json(&gqstn(&rargs));
    assert_eq!(r["detector_checksum"], t["detector_checksum"]);
    assert_eq!(r["history_checksum"], t["history_checksum"]);

    let eval = |extra: &[&str]| {
        let mut a = vec![
            "eval",
            "--config",
            cfg,
            "--detector",
            p(&det),
            "--quality",
            p(&qck),
            "--data",
            p(&data),
        ];
        a.extend_from_slice(extra);
        gqstn(&a)
    };
    let e = stdout_json(&eval(&["--overlays", p(&run.path("ov"))]));
    assert_eq!(e["scenes"], 4);
    let quad = &e["quad"];
    let total: f64 = [
        "rect_pos_robust_neg",
        "rect_pos_robust_pos",
        "rect_neg_robust_pos",
        "rect_neg_robust_neg",
    ]
    .iter()
    .map(|k| quad[k].as_f64().unwrap())
    .sum();
    assert!((total - 100.0).abs() < 1e-9);
    assert_eq!(std::fs::read_dir(run.path("ov")).unwrap().count(), 4);

    assert_eq!(code(&eval(&["--split", "train"])), 2);
    assert_eq!(
        stdout_json(&eval(&["--split", "train", "--allow-overlap"]))["scenes"],
        12
    );

    let prop = gqstn(&[
        "eval",
        "--config",
        cfg,
        "--proposal",
        "--quality",
        p(&qck),
        "--data",
        p(&data),
    ]);
    assert_eq!(stdout_json(&prop)["scenes"], 4);

    // Predict on a graymap and on a one-record shard.
    let rec = gqstn::scenegen::gqsd::read(&data.join("test.gqsd"))
        .unwrap()
        .remove(0);
    let pgm = run.path("scene.pgm");
    gqstn::image::write_depth_pgm(&pgm, &rec.depth).unwrap();
    let single = run.path("scene.gqsd");
    gqstn::scenegen::gqsd::write(&single, std::slice::from_ref(&rec)).unwrap();
    for img in [&pgm, &single] {
        let v = stdout_json(&gqstn(&[
            "predict",
            "--detector",
            p(&det),
            "--quality",
            p(&qck),
            "--image",
            p(img),
        ]));
        let pr = v["p_robust"].as_f64().unwrap();
        assert!(pr > 0.0 && pr < 1.0);
        assert!(v["grasp"]["w"].as_f64().unwrap() > 0.0);
    }
    let junk = run.path("junk.txt");
    std::fs::write(&junk, "not an image").unwrap();
    let o = gqstn(&[
        "predict",
        "--detector",
        p(&det),
        "--quality",
        p(&qck),
        "--image",
        p(&junk),
    ]);
    assert_eq!(code(&o), 2);
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("GQSD") && err.contains("graymap"), "{err}");

    let b = stdout_json(&gqstn(&[
        "bench",
        "--config",
        cfg,
        "--detector",
        p(&det),
        "--quality",
        p(&qck),
        "--data",
        p(&data),
        "--scenes",
        "2",
    ]));
    assert_eq!(b["baseline"].as_array().unwrap().len(), 2);
    assert!(b["speedup"].as_f64().unwrap() > 0.0);
    assert_eq!(b["one_shot"]["samples"], 10);
}
