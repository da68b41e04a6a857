use timme_core::checkpoint::{read_checkpoint, write_checkpoint};
use timme_core::config::{ExperimentConfig, TrainConfig};
use timme_core::experiment::{build_model, evaluate, prepare, train, Dataset};
use timme_core::features::{FeatureMode, FeatureStore};
use timme_core::model::{ModeSpec, TaskMode};
use timme_core::synth::{generate, write_dataset, SynthConfig};

fn small() -> SynthConfig {
    SynthConfig {
        num_nodes: 90,
        intra_p: 0.12,
        inter_p: 0.01,
        label_fraction: 0.3,
        ..SynthConfig::default()
    }
}

fn quick(mode: &str, epochs: usize) -> TrainConfig {
    TrainConfig {
        mode: mode.parse::<ModeSpec>().unwrap(),
        epochs: Some(epochs),
        hidden_dim: 16,
        embed_dim: 8,
        task_dim: 4,
        ..TrainConfig::default()
    }
}

#[test]
fn checkpoint_reproduces_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let conf = write_dataset(&generate(&small()).unwrap(), dir.path(), 0).unwrap();
    let data = Dataset::load(&ExperimentConfig::load(&conf).unwrap().data).unwrap();
    let cfg = quick("timme", 8);
    let model = build_model(&data, &cfg).unwrap();
    let prep = prepare(&data, model.mode(), cfg.seed).unwrap();
    let outcome = train(&model, &data, &prep, &cfg, |_| Ok(())).unwrap();
    assert!((1..=8).contains(&outcome.best_epoch));
    let before = evaluate(&model, &data, &prep, &outcome.params).unwrap();

    let path = dir.path().join("model.ckpt");
    write_checkpoint(&path, &outcome.params).unwrap();
    let restored = read_checkpoint(&path).unwrap();
    model.check_params(&data.features, &restored).unwrap();
    assert_eq!(evaluate(&model, &data, &prep, &restored).unwrap(), before);

    // A model of another mode rejects these parameters.
    let other = build_model(&data, &quick("single_class", 1)).unwrap();
    assert!(other.check_params(&data.features, &restored).is_err());
}

#[test]
fn single_link_mode_has_no_classifier() {
    let data = {
        let s = generate(&small()).unwrap();
        let n = s.graph.num_nodes();
        Dataset {
            graph: s.graph,
            features: FeatureStore::one_hot(n).unwrap(),
            labels: vec![],
            regions: None,
        }
    };
    let cfg = quick("single_link(reply)", 4);
    let model = build_model(&data, &cfg).unwrap();
    assert_eq!(model.mode(), TaskMode::SingleLink(1));
    let prep = prepare(&data, model.mode(), 0).unwrap();
    let outcome = train(&model, &data, &prep, &cfg, |e| {
        assert!(e.steps.iter().all(|s| s.losses.len() == 1 && s.losses[0].task == "reply"));
        Ok(())
    })
    .unwrap();
    let report = evaluate(&model, &data, &prep, &outcome.params).unwrap();
    assert!(report.classification.is_none());
    assert_eq!(report.links.len(), 1);
    assert_eq!(report.mode, "single_link(reply)");

    // Classification without labels is a configuration error.
    assert!(prepare(&data, TaskMode::SingleClass, 0).is_err());
}

#[test]
fn mixed_features_train() {
    let s = generate(&small()).unwrap();
    let n = s.graph.num_nodes();
    let rows = (0..n)
        .map(|i| (i % 3 != 0).then(|| vec![s.blocks[i] as f64, 1.0, (i % 5) as f64 / 5.0]))
        .collect();
    let features = FeatureStore::from_rows(rows, 3).unwrap();
    assert_eq!(features.mode(), FeatureMode::Mixed);
    let data = Dataset {
        graph: s.graph,
        features,
        labels: s.labels,
        regions: None,
    };
    let cfg = quick("single_class", 20);
    let model = build_model(&data, &cfg).unwrap();
    let prep = prepare(&data, model.mode(), 0).unwrap();
    let outcome = train(&model, &data, &prep, &cfg, |_| Ok(())).unwrap();
    let first = outcome.log.first().unwrap().steps[0].joint;
    let last = outcome.log.last().unwrap().steps[0].joint;
    assert!(last < first, "loss went from {first} to {last}");
}

#[test]
fn patience_stops_early() {
    let s = generate(&small()).unwrap();
    let n = s.graph.num_nodes();
    let data = Dataset {
        graph: s.graph,
        features: FeatureStore::one_hot(n).unwrap(),
        labels: s.labels,
        regions: None,
    };
    let cfg = TrainConfig {
        patience: Some(3),
        schedule: timme_core::optim::LrSchedule {
            base: 0.5,
            ..Default::default()
        },
        ..quick("single_class", 200)
    };
    let model = build_model(&data, &cfg).unwrap();
    let prep = prepare(&data, model.mode(), 0).unwrap();
    let outcome = train(&model, &data, &prep, &cfg, |_| Ok(())).unwrap();
    assert_eq!(outcome.log.len(), (outcome.best_epoch + 3).min(200));
}
