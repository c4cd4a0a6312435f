use slimkws::checkpoint::Container;
use slimkws::data::{synth_dataset, Dataset, FeatureConfig, SynthConfig};
use slimkws::metrics::{FaSettings, NormSets, RunReport};
use slimkws::models::{Model, ModelSpec};
use slimkws::trainer::{load_training, train, OptimizerConfig, TrainConfig, TrainLog, TrainOptions};

fn data(classes: usize, per_class: usize, seed: u64) -> Dataset {
    let features = FeatureConfig::with_mel_bins(20);
    synth_dataset(&SynthConfig::new(classes, per_class, seed), &features, 76, 2).unwrap()
}

fn config(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 16,
        optimizer: OptimizerConfig::Adam {
            lr: 3e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        },
        ..TrainConfig::default()
    }
}

fn run(train_set: &Dataset, eval_set: &Dataset, epochs: usize, path: &std::path::Path) -> (Model<f32>, TrainLog) {
    let mut model = Model::<f32>::build(&ModelSpec::desk_cnn(train_set.num_classes()), 0).unwrap();
    let log = train(
        &mut model,
        train_set,
        &config(epochs),
        TrainOptions {
            eval_set: Some(eval_set),
            checkpoint: Some(path.to_path_buf()),
            ..TrainOptions::default()
        },
    )
    .unwrap();
    (model, log)
}

#[test]
fn identical_seeds_give_identical_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let (train_set, eval_set) = data(4, 8, 1).stratified_split(0.25, 0).unwrap();
    let (a, b) = (dir.path().join("a.slnk"), dir.path().join("b.slnk"));
    run(&train_set, &eval_set, 2, &a);
    run(&train_set, &eval_set, 2, &b);
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn slimmable_training_reduces_full_width_loss() {
    let dir = tempfile::tempdir().unwrap();
    let (train_set, eval_set) = data(4, 30, 2).stratified_split(0.25, 0).unwrap();
    let path = dir.path().join("m.slnk");
    let (model, log) = run(&train_set, &eval_set, 6, &path);
    let full_loss = |e: usize| log.epochs[e].mean_loss.iter().find(|p| p.0 == 1.0).unwrap().1;
    let best = log.best.as_ref().unwrap();
    assert!(full_loss(best.epoch) < full_loss(0), "{:?}", log.epochs);
    assert_eq!(log.evals.len(), 6 * 4);

    let best_model = load_training(&slimkws::trainer::suffixed(&path, ".best"), &Default::default())
        .unwrap()
        .model;
    let report_best = slimkws::trainer::evaluate(&best_model, &eval_set, 1.0, 64).unwrap();
    assert_eq!(report_best.accuracy, best.accuracy);

    let saved = load_training(&path, &Default::default()).unwrap();
    assert!(saved.model.store().bit_eq(model.store()));
    assert_eq!(saved.state.unwrap().step, log.final_step);
}

#[test]
fn binary_report_has_relative_false_accepts() {
    let dir = tempfile::tempdir().unwrap();
    let (train_set, eval_set) = data(2, 20, 3).stratified_split(0.5, 0).unwrap();
    let (model, _) = run(&train_set, &eval_set, 3, &dir.path().join("m.slnk"));
    let mut report = RunReport::new(model.spec(), 0, NormSets::Active).unwrap();
    let fa = FaSettings {
        positive_class: 1,
        target_miss: 0.1,
    };
    report.evaluate(&model, &eval_set, 32, Some(fa)).unwrap();
    assert_eq!(report.rows.len(), 4);
    assert!(report.rows.iter().all(|r| r.accuracy.is_some() && r.false_accepts.is_some()));
    assert_eq!(report.rows[0].relative_fa, Some(1.0));

    let out = dir.path().join("report.json");
    report.write(&out).unwrap();
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(v["rows"].as_array().unwrap().len(), 4);
    assert!(out.with_extension("txt").exists());
    let text = report.to_string();
    assert!(text.lines().count() >= 6, "{text}");
}

#[test]
fn truncated_checkpoint_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let (train_set, eval_set) = data(4, 4, 4).stratified_split(0.25, 0).unwrap();
    let path = dir.path().join("m.slnk");
    run(&train_set, &eval_set, 1, &path);
    let bytes = std::fs::read(&path).unwrap();
    for cut in [3, 16, bytes.len() / 2, bytes.len() - 1] {
        assert!(Container::from_bytes(&bytes[..cut]).is_err(), "cut {cut}");
    }
}
