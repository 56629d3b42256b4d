mod common;

use demoret::container::{
    merge_containers, read_container, write_container, ExampleRecord, HiddenStateContainer, PooledStates,
    Split, TargetStates,
};
use demoret::index::{build_index, load_index, save_index, RetrievalIndex};
use demoret::model::{init_model, load_checkpoint, save_checkpoint, ModelConfig, RetrieverModel};
use demoret::nn::Similarity;
use demoret::proxy::{build_label_set, label_set_from_str, label_set_to_string, ProxyConfig};
use demoret::Error;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use common::{random_container, random_states};

/// Containers with every combination of pooling and target presence.
fn build(seed: u64, n: usize, n_layers: usize, dim: usize, pool_mask: u8, target_mask: u8) -> HiddenStateContainer {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pooled = |rng: &mut ChaCha8Rng| PooledStates {
        mean: (pool_mask & 1 != 0).then(|| random_states(rng, n_layers, dim)),
        eos: (pool_mask & 2 != 0).then(|| random_states(rng, n_layers, dim)),
    };
    let records = (0..n)
        .map(|i| {
            let problem_states = pooled(&mut rng);
            let target_states = (target_mask != 0).then(|| TargetStates {
                problem_plus_query: (target_mask & 1 != 0).then(|| pooled(&mut rng)),
                query_only: (target_mask & 2 != 0).then(|| pooled(&mut rng)),
            });
            ExampleRecord {
                id: format!("r-{i}-é"),
                schema_id: format!("s{}", i % 3),
                split: [Split::Train, Split::Dev, Split::Test][i % 3],
                problem_states,
                target_states,
            }
        })
        .collect();
    let layer_ids = (0..n_layers as u16).map(|l| l * 3 + 1).collect();
    HiddenStateContainer::new(layer_ids, records).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn container_round_trip(seed: u64, n in 1usize..6, l in 1usize..4, d in 1usize..6, pm in 1u8..4, tm in 0u8..4) {
        let c = build(seed, n, l, d, pm, tm);
        let bytes = c.to_bytes().unwrap();
        prop_assert_eq!(bytes.len() as u64, c.encoded_len());
        let back = HiddenStateContainer::from_bytes(&bytes).unwrap();
        prop_assert_eq!(&back, &c);
        prop_assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn container_truncation_is_corruption(seed: u64, cut in 0.0f64..1.0) {
        let bytes = build(seed, 3, 2, 3, 3, 1).to_bytes().unwrap();
        let at = ((bytes.len() - 1) as f64 * cut) as usize;
        let err = HiddenStateContainer::from_bytes(&bytes[..at]).unwrap_err();
        // Cutting inside the magic reads as a foreign file, anything later as damage.
        prop_assert!(matches!(err, Error::Corruption(_) | Error::UnsupportedFormat(_)), "{err:?}");
        if at >= 8 {
            prop_assert!(matches!(err, Error::Corruption(_)), "{err:?}");
        }
    }

    #[test]
    fn checkpoint_round_trip(seed: u64, step: u64, h in 1usize..6, e in 1usize..5, l in 1usize..4) {
        let mut cfg = ModelConfig::new(3, (0..l as u16).collect());
        cfg.hidden_dim = h;
        cfg.embed_dim = e;
        let model: RetrieverModel<f32> = init_model(&cfg, seed).unwrap();
        let bytes = model.to_checkpoint_bytes(step).unwrap();
        let (back, s) = RetrieverModel::from_checkpoint_bytes(&bytes).unwrap();
        prop_assert_eq!(s, step);
        prop_assert_eq!(&back, &model);
        prop_assert_eq!(back.to_checkpoint_bytes(step).unwrap(), bytes);
    }

    #[test]
    fn index_round_trip(seed: u64, n in 1usize..20, d in 1usize..6, cosine: bool) {
        let c = random_container(seed, n, &[0, 1], d, 4);
        let mut cfg = ModelConfig::new(d, vec![0, 1]);
        cfg.hidden_dim = 4;
        cfg.embed_dim = 3;
        let model = init_model(&cfg, seed).unwrap();
        let sim = if cosine { Similarity::Cosine } else { Similarity::Dot };
        let index = build_index(&model, &c, sim).unwrap();
        let bytes = index.to_bytes().unwrap();
        let back = RetrievalIndex::from_bytes(&bytes).unwrap();
        prop_assert_eq!(&back, &index);
        prop_assert_eq!(back.model_digest(), &cfg.digest());
    }

    #[test]
    fn label_file_round_trip(seed: u64, n in 3usize..12, hard: bool) {
        let c = random_container(seed, n, &[2, 4, 6], 3, 2);
        let cfg = ProxyConfig {
            n_pos: 2,
            n_neg: 3,
            seed,
            allow_corpus_limited: true,
            negative_sampling: if hard {
                demoret::proxy::NegativeSampling::Hard
            } else {
                demoret::proxy::NegativeSampling::Uniform
            },
            ..ProxyConfig::default()
        };
        let labels = build_label_set(&c, &cfg).unwrap();
        let text = label_set_to_string(&labels).unwrap();
        let back = label_set_from_str(&text).unwrap();
        prop_assert_eq!(&back, &labels);
        prop_assert_eq!(label_set_to_string(&back).unwrap(), text);
    }
}

#[test]
fn files_round_trip_on_disk() {
    let dir = tempfile::tempdir().unwrap();
    let c = random_container(7, 10, &[0, 8, 16], 4, 3);
    write_container(&c, dir.path().join("a.dtrv")).unwrap();
    assert_eq!(read_container(dir.path().join("a.dtrv")).unwrap(), c);

    let cfg = ModelConfig::new(4, vec![0, 8, 16]);
    let model = init_model(&cfg, 1).unwrap();
    save_checkpoint(&model, 42, dir.path().join("m.dtrm")).unwrap();
    assert_eq!(load_checkpoint(dir.path().join("m.dtrm")).unwrap(), (model.clone(), 42));

    let index = build_index(&model, &c, Similarity::Cosine).unwrap();
    save_index(&index, dir.path().join("i.dtri")).unwrap();
    assert_eq!(load_index(dir.path().join("i.dtri")).unwrap(), index);
}

#[test]
fn error_classes() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.dtrv");
    match read_container(&missing).unwrap_err() {
        Error::Io { path, .. } => assert_eq!(path, missing),
        e => panic!("{e:?}"),
    }

    let c = random_container(3, 4, &[0, 1], 2, 2);
    let mut bytes = c.to_bytes().unwrap();
    bytes[..4].copy_from_slice(b"NOPE");
    assert!(matches!(HiddenStateContainer::from_bytes(&bytes), Err(Error::UnsupportedFormat(_))));

    let mut bytes = c.to_bytes().unwrap();
    bytes[4..8].copy_from_slice(&2u32.to_le_bytes());
    assert!(matches!(HiddenStateContainer::from_bytes(&bytes), Err(Error::UnsupportedFormat(_))));

    let mut bytes = c.to_bytes().unwrap();
    bytes.push(0);
    assert!(matches!(HiddenStateContainer::from_bytes(&bytes), Err(Error::Corruption(_))));

    // Checkpoint against a container with different kept layers.
    let cfg = ModelConfig::new(2, vec![0, 2]);
    assert!(matches!(cfg.check_container(c.header()), Err(Error::Compatibility(_))));
    let cfg = ModelConfig::new(3, vec![0, 1]);
    assert!(matches!(cfg.check_container(c.header()), Err(Error::Compatibility(_))));

    // Merging containers of different layouts.
    let other = random_container(4, 4, &[0, 1], 3, 2);
    write_container(&c, dir.path().join("a.dtrv")).unwrap();
    write_container(&other, dir.path().join("b.dtrv")).unwrap();
    assert!(matches!(
        merge_containers(&[dir.path().join("a.dtrv"), dir.path().join("b.dtrv")]),
        Err(Error::IncompatibleContainer(_))
    ));
    // Merging a container with itself duplicates ids.
    assert!(matches!(
        merge_containers(&[dir.path().join("a.dtrv"), dir.path().join("a.dtrv")]),
        Err(Error::Validation(_))
    ));
}

#[test]
fn merge_concatenates_in_order() {
    let dir = tempfile::tempdir().unwrap();
    let a = random_container(1, 3, &[0, 1], 2, 2);
    let b_records: Vec<_> = random_container(2, 2, &[0, 1], 2, 2)
        .into_records()
        .into_iter()
        .map(|mut r| {
            r.id = format!("b-{}", r.id);
            r
        })
        .collect();
    let b = HiddenStateContainer::new(vec![0, 1], b_records).unwrap();
    write_container(&a, dir.path().join("a.dtrv")).unwrap();
    write_container(&b, dir.path().join("b.dtrv")).unwrap();
    let merged = merge_containers(&[dir.path().join("a.dtrv"), dir.path().join("b.dtrv")]).unwrap();
    let ids: Vec<&str> = merged.records().iter().map(|r| r.id.as_str()).collect();
    assert_eq!(ids, ["ex0000", "ex0001", "ex0002", "b-ex0000", "b-ex0001"]);
}
