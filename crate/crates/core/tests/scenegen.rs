mod common;

use std::f64::consts::PI;

use gqstn::rng;
use gqstn::scenegen::{
    self, gqsd, oracle_eval, sample_annotations, sample_mixed, shapes, Dataset, DatasetSpec,
    PartKind, Pose, PrimitiveShape, Split,
};

#[test]
fn oracle_agrees_with_brute_force_contacts() {
    let spec = DatasetSpec::default();
    let meta = spec.meta();
    let mut r = rng::rng(2024);
    let (mut agree, mut total, mut robust) = (0, 0, 0);
    for i in 0..500 {
        let shape = shapes::random_shape(&mut r, &spec.shapes, &meta, 4.0).unwrap();
        let grasps = sample_mixed(&shape, &meta, 10, i, &spec.oracle).unwrap();
        for a in grasps {
            let bf = common::brute_force_robust(&shape, &meta, &a.grasp, &spec.oracle, 10_000);
            agree += (bf == a.robust) as usize;
            robust += a.robust as usize;
            total += 1;
        }
    }
    let rate = agree as f64 / total as f64;
    eprintln!("agreement {rate:.4} over {total}, {robust} robust");
    assert!(rate >= 0.99, "agreement {rate} over {total}");
    assert!(
        robust > total / 10 && robust < total * 9 / 10,
        "{robust}/{total} robust"
    );
}

#[test]
fn cylinder_angles_are_uniform() {
    let meta = DatasetSpec::default().meta();
    let shape = PrimitiveShape::single(
        Pose {
            x: 47.5,
            y: 47.5,
            theta: 0.0,
        },
        PartKind::Cylinder { radius: 0.015 },
        0.03,
    );
    let cfg = Default::default();
    let a = sample_annotations(&shape, &meta, 1200, 0, 77, &cfg).unwrap();
    const BINS: usize = 12;
    let mut hist = [0usize; BINS];
    for x in &a {
        let f = (x.grasp.theta + PI / 2.0) / PI;
        hist[((f * BINS as f64) as usize).min(BINS - 1)] += 1;
    }
    let e = a.len() as f64 / BINS as f64;
    let chi2: f64 = hist.iter().map(|&o| (o as f64 - e).powi(2) / e).sum();
    // 99th percentile of χ² with 11 degrees of freedom.
    assert!(chi2 < 24.725, "chi2 {chi2}, {hist:?}");
}

#[test]
fn dataset_is_reproducible_and_stats_recompute() {
    let spec = DatasetSpec {
        scenes: 20,
        ..Default::default()
    };
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let sa = scenegen::build_dataset(&spec, 99, a.path(), serde_json::Value::Null).unwrap();
    let sb = scenegen::build_dataset(&spec, 99, b.path(), serde_json::Value::Null).unwrap();
    assert_eq!(sa, sb);
    for f in ["train.gqsd", "val.gqsd", "test.gqsd", "dataset.json"] {
        assert_eq!(
            std::fs::read(a.path().join(f)).unwrap(),
            std::fs::read(b.path().join(f)).unwrap(),
            "{f}"
        );
    }
    assert_eq!(
        (
            sa.train.end,
            sa.val.end - sa.val.start,
            sa.test.end - sa.test.start
        ),
        (16, 2, 2)
    );

    let ds = Dataset::open(a.path()).unwrap();
    let train = ds.load(Split::Train).unwrap();
    // Independent pass over the shard: γ is the mean crop scale 3w/(px·(W−1)).
    let (mut s, mut n) = (0.0, 0);
    for r in &train {
        for x in r.annotations.iter().filter(|x| x.robust) {
            s += 3.0 * x.grasp.w / (r.depth.meta.pixel_scale * (r.depth.meta.width - 1) as f64);
            n += 1;
        }
    }
    assert!((s / n as f64 - ds.stats().gamma).abs() < 1e-9);

    // Stored labels agree with the oracle on the regenerated shapes.
    for (i, r) in train.iter().enumerate() {
        assert!(r.annotations.iter().any(|x| x.robust));
        assert!((4..=16).contains(&r.annotations.len()));
        let shape = ds.shape(i).unwrap();
        for x in &r.annotations {
            let (robust, q) = oracle_eval(&shape, &r.depth.meta, &x.grasp, &spec.oracle);
            assert_eq!(robust, x.robust);
            assert!((q - x.quality).abs() < 1e-6);
        }
    }

    let bytes = std::fs::read(a.path().join("val.gqsd")).unwrap();
    assert_eq!(gqsd::encode(&gqsd::decode(&bytes).unwrap()).unwrap(), bytes);

    let other = tempfile::tempdir().unwrap();
    let sc = scenegen::build_dataset(&spec, 100, other.path(), serde_json::Value::Null).unwrap();
    assert_ne!(sc.train.sha256, sa.train.sha256);
}

#[test]
fn io_errors_name_the_path() {
    let err = gqsd::read(std::path::Path::new("/nonexistent/x.gqsd")).unwrap_err();
    assert!(err.to_string().contains("/nonexistent/x.gqsd"));
}
