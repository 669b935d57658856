use gqstn::locnet::BackboneConfig;
use gqstn::quality::{self, crop_examples, train_classifier, CropSet, QualityConfig};
use gqstn::rng;
use gqstn::scenegen::{build_dataset, Dataset, DatasetSpec, Split};
use rand::seq::SliceRandom;

fn small_config() -> QualityConfig {
    QualityConfig {
        backbone: BackboneConfig {
            widths: vec![8, 16, 16],
            ..quality::default_backbone()
        },
        epochs: 6,
        crops_per_scene: 24,
        ..QualityConfig::default()
    }
}

fn sets() -> (CropSet, CropSet) {
    let dir = tempfile::tempdir().unwrap();
    let spec = DatasetSpec {
        scenes: 80,
        splits: [0.75, 0.25, 0.0],
        ..DatasetSpec::default()
    };
    build_dataset(&spec, 3, dir.path(), serde_json::Value::Null).unwrap();
    let ds = Dataset::open(dir.path()).unwrap();
    let cfg = small_config();
    let train = crop_examples(&ds, Split::Train, cfg.crops_per_scene, 4)
        .unwrap()
        .balanced(1);
    let held = crop_examples(&ds, Split::Val, cfg.crops_per_scene, 4)
        .unwrap()
        .balanced(2);
    (train, held)
}

#[test]
fn true_labels_beat_shuffled_labels() {
    let (train, held) = sets();
    let cfg = small_config();
    let (_, real) = train_classifier(&train, &held, &cfg, 0.7, 5).unwrap();

    // Crops from one scene are strongly correlated, so a single shuffle
    // lands anywhere in a wide band around one half. Compare against
    // several.
    let chance: Vec<f64> = (6..12)
        .map(|s| {
            let mut shuffled = train.clone();
            shuffled.labels.shuffle(&mut rng::rng(s));
            train_classifier(&shuffled, &held, &cfg, 0.7, 5)
                .unwrap()
                .1
                .heldout
                .accuracy
        })
        .collect();
    let mean = chance.iter().sum::<f64>() / chance.len() as f64;
    let best = chance.iter().copied().fold(0.0, f64::max);
    assert!((mean - 0.5).abs() < 0.15, "shuffled labels averaged {mean}");
    assert!(
        real.heldout.accuracy > 0.75,
        "true labels reached {}",
        real.heldout.accuracy
    );
    assert!(
        real.heldout.accuracy > best + 0.1,
        "true labels {} vs best shuffle {best}",
        real.heldout.accuracy
    );
}

#[test]
fn crop_examples_are_reproducible() {
    let (a, _) = sets();
    let (b, _) = sets();
    assert_eq!(a.labels, b.labels);
    assert_eq!(a.crops, b.crops);
    assert_eq!(a.positives() * 2, a.len());
}
