use std::path::Path;
use std::process::{Command, Output};

use demoret::container::{write_container, ExampleRecord, HiddenStateContainer, LayerStates, PooledStates, Split};
use demoret::model::{init_model, save_checkpoint, ModelConfig};
use demoret::nn::Similarity;

fn demoret(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_demoret"))
        .args(args)
        .env("DEMORET_OUTPUT_DIR", out)
        .env_remove("RUST_LOG")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const SMALL_SYNTH: &[&str] = &[
    "synth",
    "--clusters",
    "3",
    "--train-per-cluster",
    "6",
    "--dev-queries",
    "6",
    "--dim",
    "8",
    "--n-layers",
    "3",
    "--informative-layer",
    "1",
];

fn record(id: &str, schema: &str, rows: Vec<Vec<f32>>) -> ExampleRecord {
    ExampleRecord {
        id: id.into(),
        schema_id: schema.into(),
        split: Split::Train,
        problem_states: PooledStates {
            mean: None,
            eos: Some(LayerStates::from_rows(&rows).unwrap()),
        },
        target_states: None,
    }
}

#[test]
fn validate_prints_a_summary() {
    let dir = tempfile::tempdir().unwrap();
    let out = demoret(dir.path(), SMALL_SYNTH);
    assert!(out.status.success(), "{}", stderr(&out));
    let path = dir.path().join("train.dtrv");
    let out = demoret(dir.path(), &["validate", path.to_str().unwrap()]);
    assert!(out.status.success());
    let line = stdout(&out);
    assert!(line.starts_with("ok\t"), "{line}");
    for field in ["records=18", "layers=0,5,10", "dim=8", "pooling=mean,eos"] {
        assert!(line.contains(field), "{line}");
    }
}

#[test]
fn validate_reports_damage_on_one_line() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.dtrv");
    std::fs::write(&bad, b"NOTADTRVFILE").unwrap();
    let out = demoret(dir.path(), &["validate", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    let err = stderr(&out);
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.starts_with("error: unsupported-format: "), "{err}");
}

#[test]
fn retrieve_returns_the_argmax() {
    let dir = tempfile::tempdir().unwrap();
    let rows = |a: f32, b: f32| vec![vec![a, b, 0.5], vec![b, -a, 1.0]];
    let corpus = HiddenStateContainer::new(
        vec![3, 7],
        vec![record("near", "db1", rows(1.0, 0.2)), record("far", "db2", rows(-1.0, 0.7))],
    )
    .unwrap();
    let queries = HiddenStateContainer::new(vec![3, 7], vec![record("q", "db0", rows(0.9, 0.1))]).unwrap();
    let mut cfg = ModelConfig::new(3, vec![3, 7]);
    cfg.hidden_dim = 6;
    cfg.embed_dim = 4;
    let model = init_model(&cfg, 5).unwrap();
    let (corpus_p, queries_p, ckpt) = (dir.path().join("c.dtrv"), dir.path().join("q.dtrv"), dir.path().join("m.dtrm"));
    write_container(&corpus, &corpus_p).unwrap();
    write_container(&queries, &queries_p).unwrap();
    save_checkpoint(&model, 0, &ckpt).unwrap();

    let q = model.embed(&queries.records()[0]).unwrap();
    let (best, score) = corpus
        .records()
        .iter()
        .map(|r| (r.id.clone(), Similarity::Cosine.score(&q, &model.embed(r).unwrap())))
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .unwrap();

    let common = ["--checkpoint", ckpt.to_str().unwrap(), "--train", corpus_p.to_str().unwrap()];
    let out = demoret(dir.path(), &[&["index"][..], &common].concat());
    assert!(out.status.success(), "{}", stderr(&out));
    let out = demoret(
        dir.path(),
        &[&["retrieve", "-k", "1", "--filter", "none", "--queries", queries_p.to_str().unwrap()][..], &common].concat(),
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let text = stdout(&out);
    let fields: Vec<&str> = text.lines().nth(1).unwrap().split('\t').collect();
    assert_eq!(fields[..3], ["q", "1", best.as_str()]);
    assert_eq!(fields[3].parse::<f64>().unwrap(), score);
}

#[test]
fn missing_label_file_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    assert!(demoret(dir.path(), SMALL_SYNTH).status.success());
    let missing = dir.path().join("no-such-labels.json");
    let out = demoret(dir.path(), &["train", "--labels", missing.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    let err = stderr(&out);
    assert!(err.starts_with("error: io: "), "{err}");
    assert!(err.contains(missing.to_str().unwrap()), "{err}");
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(demoret(dir.path(), &["frobnicate"]).status.code(), Some(2));
    assert_eq!(demoret(dir.path(), &["label", "--no-such-flag"]).status.code(), Some(2));
    assert_eq!(demoret(dir.path(), &["eval", "--filter", "sideways"]).status.code(), Some(2));
}

#[test]
fn flags_override_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    assert!(demoret(dir.path(), SMALL_SYNTH).status.success());
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, "seed = 4\n[proxy]\nn_pos = 3\nn_neg = 5\n").unwrap();
    let out = demoret(dir.path(), &["label", "--config", cfg.to_str().unwrap(), "--n-pos", "2"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let labels = demoret::proxy::read_label_set(dir.path().join("labels.json")).unwrap();
    assert_eq!(labels.config.n_pos, 2);
    assert_eq!(labels.config.n_neg, 5);
    assert_eq!(labels.seed, 4);
    assert!(labels.anchors.iter().all(|a| a.positives.len() == 2));
    let echoed = std::fs::read_to_string(dir.path().join("label.config.toml")).unwrap();
    assert!(echoed.contains("n_pos = 2") && echoed.contains("seed = 4"), "{echoed}");

    std::fs::write(&cfg, "[proxy]\nnpos = 3\n").unwrap();
    let out = demoret(dir.path(), &["label", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).starts_with("error: config: "), "{}", stderr(&out));
}

fn pipeline(out: &Path) {
    let steps: [&[&str]; 4] = [
        SMALL_SYNTH,
        &["label", "--n-pos", "3", "--n-neg", "6"],
        &["train", "--hidden-dim", "8", "--embed-dim", "4", "--steps", "20", "--batch-size", "4", "--checkpoint-every", "10"],
        &["eval", "-k", "2", "--n-pos", "3", "--n-neg", "6"],
    ];
    for args in steps {
        let o = demoret(out, &[&["--seed", "11"][..], args].concat());
        assert!(o.status.success(), "{args:?}: {}", stderr(&o));
    }
}

#[test]
fn runs_are_byte_identical() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    pipeline(a.path());
    pipeline(b.path());
    for f in [
        "train.dtrv",
        "labels.json",
        "checkpoints/step-000010.dtrm",
        "checkpoints/final.dtrm",
        "metrics.tsv",
        "metrics.json",
    ] {
        let x = std::fs::read(a.path().join(f)).unwrap();
        let y = std::fs::read(b.path().join(f)).unwrap();
        assert!(x == y, "{f} differs");
    }
}
