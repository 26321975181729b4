use cellqa::data::{Example, Table};
use cellqa::error::{CheckpointError, Error};
use cellqa::evaluation::{generate_synthetic, SynthConfig};
use cellqa::model::{forward, ModelConfig};
use cellqa::text::{build_vocab, Vocab};
use cellqa::training::{
    encode_dataset, load_checkpoint, make_batches, save_checkpoint, train, TrainConfig, TrainOptions, Trainer,
};

fn small_model(vocab: &Vocab) -> ModelConfig {
    ModelConfig {
        d_model: 16,
        n_layers: 2,
        n_heads: 2,
        d_ff: 32,
        max_len: 64,
        vocab_size: vocab.len(),
        use_position_embeddings: true,
        use_segment_embeddings: true,
    }
}

fn corpus(n: usize, rows: usize, cols: usize, seed: u64) -> Vec<Example> {
    generate_synthetic(&SynthConfig {
        n_tables: n,
        rows,
        cols,
        seed,
        ..SynthConfig::default()
    })
    .unwrap()
}

#[test]
fn initial_loss_is_uniform_pointer_entropy() {
    // Mixed shapes so the mean of ln(r*m) is not a single constant.
    let mut data = corpus(8, 2, 2, 1);
    data.extend(corpus(8, 4, 3, 2));
    data.extend(corpus(8, 5, 5, 3));
    let vocab = build_vocab(&data, 1);
    let train_config = TrainConfig {
        batch_size: data.len(),
        max_len: 128,
        ..TrainConfig::default()
    };
    let config = train_config.effective_model_config(&ModelConfig::desk(0), &vocab);
    let (items, skipped) = encode_dataset(&data, &vocab, 128);
    assert_eq!(skipped, 0);
    let mut trainer = Trainer::from_seed(config, train_config).unwrap();
    let batch: Vec<_> = items.iter().collect();
    let stats = trainer.step(&batch, 1, 0).unwrap();
    let want = data
        .iter()
        .map(|e| ((e.table.n_rows() * e.table.n_cols()) as f64).ln())
        .sum::<f64>()
        / data.len() as f64;
    let got = stats.loss_sum / stats.count as f64;
    assert!((got - want).abs() < 0.05, "initial loss {got} vs {want}");
}

#[test]
fn single_example_is_memorized() {
    let data = corpus(1, 4, 3, 9);
    let vocab = build_vocab(&data, 1);
    let train_config = TrainConfig {
        learning_rate: 1e-3,
        epochs: 60,
        batch_size: 1,
        max_len: 64,
        ..TrainConfig::default()
    };
    let outcome = train(&data, &vocab, &small_model(&vocab), &train_config, TrainOptions::default()).unwrap();
    assert_eq!(outcome.metrics.last().unwrap().train_accuracy, 1.0);
    let (items, _) = encode_dataset(&data, &vocab, 64);
    let fwd = forward(&items[0].encoded, &outcome.params, &outcome.model_config).unwrap();
    assert_eq!(fwd.pointer.argmax(), data[0].answer_index);
}

#[test]
fn early_loss_mostly_decreases() {
    let data = corpus(64, 4, 3, 0);
    let vocab = build_vocab(&data, 1);
    let train_config = TrainConfig {
        learning_rate: 1e-3,
        epochs: 5,
        max_len: 64,
        ..TrainConfig::default()
    };
    let outcome = train(&data, &vocab, &ModelConfig::desk(0), &train_config, TrainOptions::default()).unwrap();
    let losses: Vec<f64> = outcome.metrics.iter().map(|m| m.mean_loss).collect();
    let inversions: Vec<f64> = losses.windows(2).filter(|w| w[1] > w[0]).map(|w| w[1] / w[0] - 1.0).collect();
    assert!(inversions.len() <= 1, "losses {losses:?}");
    assert!(inversions.iter().all(|&r| r <= 0.05), "losses {losses:?}");
}

#[test]
fn skipped_examples_are_counted() {
    let mut data = corpus(10, 2, 2, 4);
    let long_question = vec!["w"; 80].join(" ");
    let table = Table::new("long", vec!["a".into(), "b".into()], vec![vec!["x".into(), "y".into()]]).unwrap();
    data.push(Example::new(table, long_question, 1).unwrap());
    let vocab = build_vocab(&data, 1);
    let train_config = TrainConfig {
        epochs: 2,
        max_len: 64,
        ..TrainConfig::default()
    };
    let outcome = train(&data, &vocab, &small_model(&vocab), &train_config, TrainOptions::default()).unwrap();
    assert_eq!(outcome.skipped, 1);
    assert!(outcome.metrics.iter().all(|m| m.skipped_examples == 1));

    let only_long = &data[10..];
    let err = train(only_long, &vocab, &small_model(&vocab), &train_config, TrainOptions::default()).unwrap_err();
    assert!(matches!(err, Error::Config(_)));
}

#[test]
fn frozen_groups_keep_their_bytes() {
    let data = corpus(32, 3, 3, 5);
    let vocab = build_vocab(&data, 1);
    let base = TrainConfig {
        learning_rate: 1e-3,
        epochs: 2,
        max_len: 64,
        freeze_first_k: 1,
        ..TrainConfig::default()
    };
    let config = base.effective_model_config(&small_model(&vocab), &vocab);
    let initial = Trainer::from_seed(config.clone(), base.clone()).unwrap().params;
    let outcome = train(&data, &vocab, &config, &base, TrainOptions::default()).unwrap();
    for ((name, before), (_, after)) in initial.groups().into_iter().zip(outcome.params.groups()) {
        let frozen = name.starts_with("embeddings.") || name.starts_with("layer.1.");
        assert_eq!(before == after, frozen, "group {name}");
    }
}

#[test]
fn batches_partition_indices() {
    for (n, bs, seed) in [(5, 2, 0), (100, 16, 3), (17, 17, 1), (3, 10, 9)] {
        let batches = make_batches(n, bs, seed);
        assert_eq!(batches, make_batches(n, bs, seed));
        assert!(batches.iter().all(|b| !b.is_empty() && b.len() <= bs));
        let mut all: Vec<usize> = batches.into_iter().flatten().collect();
        all.sort_unstable();
        assert_eq!(all, (0..n).collect::<Vec<_>>());
    }
    let sizes: Vec<usize> = make_batches(5, 2, 0).iter().map(Vec::len).collect();
    assert_eq!(sizes, vec![2, 2, 1]);
}

#[test]
fn checkpoint_files_round_trip_and_fail_cleanly() {
    let data = corpus(8, 3, 2, 6);
    let vocab = build_vocab(&data, 1);
    let train_config = TrainConfig {
        epochs: 1,
        max_len: 64,
        ..TrainConfig::default()
    };
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.bin");
    let options = TrainOptions {
        checkpoint_path: Some(&path),
        ..TrainOptions::default()
    };
    let outcome = train(&data, &vocab, &small_model(&vocab), &train_config, options).unwrap();

    let loaded = load_checkpoint(&path, Some(&vocab)).unwrap();
    assert_eq!(loaded.params, outcome.params);
    let (items, _) = encode_dataset(&data, &vocab, 64);
    for item in &items {
        let a = forward(&item.encoded, &outcome.params, &outcome.model_config).unwrap();
        let b = forward(&item.encoded, &loaded.params, &loaded.model_config).unwrap();
        assert_eq!(a.pointer.cell_logits, b.pointer.cell_logits);
    }

    let resaved = dir.path().join("again.bin");
    save_checkpoint(&resaved, &loaded.params, &loaded.model_config, &loaded.train_config, &loaded.vocab_digest)
        .unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&resaved).unwrap());

    let code = |p: &std::path::Path, v: Option<&Vocab>| match load_checkpoint(p, v) {
        Err(Error::Checkpoint { source, .. }) => source.code(),
        other => panic!("expected checkpoint error, got {other:?}"),
    };
    let bytes = std::fs::read(&path).unwrap();
    let bad = dir.path().join("bad.bin");

    let mut magic = bytes.clone();
    magic[..4].copy_from_slice(b"NOPE");
    std::fs::write(&bad, &magic).unwrap();
    let magic_code = code(&bad, None);

    let mut version = bytes.clone();
    version[4] = 2;
    std::fs::write(&bad, &version).unwrap();
    let version_code = code(&bad, None);

    std::fs::write(&bad, &bytes[..bytes.len() / 2]).unwrap();
    let truncated_code = code(&bad, None);

    let mut tokens = vocab.tokens().to_vec();
    tokens.push("zzz".into());
    let edited = Vocab::read(tokens.join("\n").as_bytes(), "edited").unwrap();
    let digest_code = code(&path, Some(&edited));

    let mut codes = vec![magic_code, version_code, truncated_code, digest_code];
    codes.sort_unstable();
    codes.dedup();
    assert_eq!(codes.len(), 4, "distinct error codes");
    assert_eq!(digest_code, CheckpointError::VocabDigestMismatch.code());

    assert!(matches!(
        load_checkpoint(&dir.path().join("missing.bin"), None),
        Err(Error::Io { .. })
    ));
}
