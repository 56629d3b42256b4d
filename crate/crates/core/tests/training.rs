use demoret::eval::{generate_synthetic, SyntheticData, SyntheticSpec};
use demoret::model::{init_model, load_checkpoint, ModelConfig, RetrieverModel};
use demoret::nn::{AdamW, AdamWConfig};
use demoret::proxy::{build_label_set, AnchorLabels, LabelSet, ProxyConfig, ScoredId};
use demoret::train::{checkpoint_name, train_loop, train_step, TrainConfig, TrainingSet, FINAL_CHECKPOINT, TRAIN_LOG};
use demoret::Error;

fn setup() -> (SyntheticData, LabelSet, ModelConfig) {
    let spec = SyntheticSpec {
        clusters: 3,
        train_per_cluster: 10,
        dev_queries: 6,
        dim: 8,
        n_layers: 3,
        informative_layer: 1,
        ..SyntheticSpec::default()
    };
    let data = generate_synthetic(&spec).unwrap();
    let proxy = ProxyConfig {
        n_pos: 4,
        n_neg: 8,
        ..ProxyConfig::default()
    };
    let labels = build_label_set(&data.train, &proxy).unwrap();
    let mut cfg = ModelConfig::new(8, data.train.header().layer_ids.clone());
    cfg.hidden_dim = 16;
    cfg.embed_dim = 8;
    (data, labels, cfg)
}

fn train_config(steps: u64, lr: f64) -> TrainConfig {
    TrainConfig {
        batch_size: 8,
        total_steps: steps,
        checkpoint_every: 10,
        optimizer: AdamWConfig {
            lr,
            ..AdamWConfig::default()
        },
        ..TrainConfig::default()
    }
}

#[test]
fn zero_learning_rate_is_a_fixed_point() {
    let (data, labels, cfg) = setup();
    let model: RetrieverModel<f32> = init_model(&cfg, 3).unwrap();
    let (trained, report) = train_loop(model.clone(), &data.train, &labels, &train_config(5, 0.0), None).unwrap();
    assert_eq!(trained, model);
    assert_eq!(report.losses.len(), 5);
}

#[test]
fn loss_decreases() {
    let (data, labels, cfg) = setup();
    let model = init_model(&cfg, 3).unwrap();
    let (_, report) = train_loop(model, &data.train, &labels, &train_config(60, 1e-3), None).unwrap();
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    let (first, last) = (mean(&report.losses[..10]), mean(&report.losses[50..]));
    assert!(last < first, "first {first} last {last}");
}

#[test]
fn training_is_deterministic() {
    let (data, labels, cfg) = setup();
    let run = || {
        let model = init_model(&cfg, 9).unwrap();
        let (m, r) = train_loop(model, &data.train, &labels, &train_config(25, 1e-3), None).unwrap();
        (m.to_checkpoint_bytes(25).unwrap(), r.losses)
    };
    assert_eq!(run(), run());
}

#[test]
fn checkpoints_are_written_on_schedule() {
    let (data, labels, cfg) = setup();
    let dir = tempfile::tempdir().unwrap();
    let model = init_model(&cfg, 1).unwrap();
    let (trained, report) = train_loop(model, &data.train, &labels, &train_config(35, 1e-3), Some(dir.path())).unwrap();
    let steps: Vec<u64> = report.checkpoints.iter().map(|c| c.0).collect();
    assert_eq!(steps, [10, 20, 30, 35]);
    for s in [10, 20, 30] {
        assert!(dir.path().join(checkpoint_name(s)).exists());
    }
    let (last, step) = load_checkpoint(dir.path().join(FINAL_CHECKPOINT)).unwrap();
    assert_eq!((last, step), (trained, 35));
    let log = std::fs::read_to_string(dir.path().join(TRAIN_LOG)).unwrap();
    assert_eq!(log.lines().count(), 36);
}

#[test]
fn single_step_moves_only_with_gradient() {
    let (data, labels, cfg) = setup();
    let set = TrainingSet::new(&data.train);
    let mut model: RetrieverModel<f32> = init_model(&cfg, 2).unwrap();
    let before = model.clone();
    let mut opt = AdamW::new(AdamWConfig::default());
    let batch: Vec<&AnchorLabels> = labels.anchors.iter().take(4).collect();
    let loss = train_step(&mut model, &mut opt, &batch, &set, &train_config(1, 1e-3)).unwrap();
    assert!(loss.is_finite() && loss > 0.0);
    assert_ne!(model, before);
    assert_eq!(opt.step_count(), 1);
}

#[test]
fn unknown_label_ids_are_rejected() {
    let (data, mut labels, cfg) = setup();
    labels.anchors[0].negatives[0] = ScoredId {
        id: "ghost".into(),
        score: 0.0,
    };
    let model = init_model(&cfg, 1).unwrap();
    let err = train_loop(model, &data.train, &labels, &train_config(3, 1e-3), None).unwrap_err();
    assert!(matches!(err, Error::Data(ref m) if m.contains("ghost")), "{err:?}");
}

#[test]
fn oversized_batch_is_truncated() {
    let (data, labels, cfg) = setup();
    let model = init_model(&cfg, 1).unwrap();
    let config = TrainConfig {
        batch_size: 1000,
        ..train_config(2, 1e-3)
    };
    let (_, report) = train_loop(model, &data.train, &labels, &config, None).unwrap();
    assert_eq!(report.losses.len(), 2);
}

#[test]
fn incompatible_model_is_rejected() {
    let (data, labels, _) = setup();
    let model = init_model(&ModelConfig::new(8, vec![0, 1]), 1).unwrap();
    let err = train_loop(model, &data.train, &labels, &train_config(1, 1e-3), None).unwrap_err();
    assert!(matches!(err, Error::Compatibility(_)), "{err:?}");
}
