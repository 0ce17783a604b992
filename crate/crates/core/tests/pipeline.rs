use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sac_core::checkpoint::{bitwise_equal, Checkpoint, CheckpointError};
use sac_core::corpus::{LabelVocabulary, PatentRecord, SplitName};
use sac_core::encoder::EncoderKind;
use sac_core::model::Model;
use sac_core::needle::{self, NeedleConfig};
use sac_core::trainer::{
    self, evaluate, evaluate_records, prepare_examples, records_in_split, train_examples,
    EvalOptions, TextOptions, TrainConfig, TrainError,
};

fn small_config() -> TrainConfig {
    TrainConfig {
        h: 16,
        max_epochs: 60,
        patience: 60,
        ..needle::train_config()
    }
}

fn needle_records(docs: usize, sentences: usize) -> Vec<PatentRecord> {
    let docs = needle::generate(
        &NeedleConfig {
            docs,
            sentences,
            ..NeedleConfig::default()
        },
        small_config().v_buckets,
    );
    needle::to_records(&docs, &needle::label_codes(8))
}

fn write_corpus(dir: &std::path::Path, records: &[PatentRecord]) -> std::path::PathBuf {
    let path = dir.join("corpus.jsonl");
    let text: String = records
        .iter()
        .map(|r| serde_json::to_string(r).unwrap() + "\n")
        .collect();
    std::fs::write(&path, text).unwrap();
    path
}

#[test]
fn overfit_run_scores_perfectly_on_its_training_split() {
    let config = TrainConfig {
        max_epochs: 200,
        patience: 20,
        ..needle::train_config()
    };
    let records = needle_records(80, 4);
    let vocab = LabelVocabulary::from_codes(needle::label_codes(8));
    let options = TextOptions::from_config(&config);
    let (train, _) = prepare_examples(
        records_in_split(&records, SplitName::Train, config.seed),
        &vocab,
        &options,
    );
    let out = train_examples(&config, vocab.len(), &train, &train, |_| {}).unwrap();
    assert_eq!(out.meta.best_val_micro_f1, 1.0);
    let checkpoint = Checkpoint::new(config.dims(vocab.len()), vocab, out.model).unwrap();
    let eval = EvalOptions {
        seed: config.seed,
        ..EvalOptions::default()
    };
    let report = evaluate_records(&checkpoint, &records, SplitName::Train, &eval).unwrap();
    assert_eq!(report.micro_avg.f1, 1.0);
}

#[test]
fn report_has_one_row_per_checkpoint_label() {
    let config = TrainConfig {
        h: 8,
        ..TrainConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let model = Model::init(EncoderKind::MeanPool, config.dims(50), 0.1, &mut rng);
    let vocab = LabelVocabulary::from_codes(needle::label_codes(50));
    let checkpoint = Checkpoint::new(config.dims(50), vocab, model).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let corpus = write_corpus(dir.path(), &needle_records(60, 3));
    let report = evaluate(
        &checkpoint,
        &corpus,
        SplitName::Test,
        &EvalOptions::default(),
    )
    .unwrap();
    assert_eq!(report.per_class.len(), 50);
    assert_eq!(report.per_class[0].label, "G01A");
}

#[test]
fn empty_split_is_an_error() {
    let records: Vec<PatentRecord> = needle_records(60, 3)
        .into_iter()
        .filter(|r| SplitName::of(&r.id, 42) == SplitName::Train)
        .collect();
    let config = TrainConfig {
        h: 8,
        ..TrainConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let model = Model::init(EncoderKind::MeanPool, config.dims(8), 0.1, &mut rng);
    let checkpoint = Checkpoint::new(
        config.dims(8),
        LabelVocabulary::from_codes(needle::label_codes(8)),
        model,
    )
    .unwrap();
    let err = evaluate_records(
        &checkpoint,
        &records,
        SplitName::Test,
        &EvalOptions::default(),
    )
    .unwrap_err();
    assert!(matches!(err, TrainError::EmptySplit(SplitName::Test)));
}

#[test]
fn unparseable_labels_fail_with_no_labels() {
    let mut records = needle_records(20, 3);
    for r in &mut records {
        r.ipc_codes = vec!["Z99X 1/00".into(), "bogus".into()];
    }
    let dir = tempfile::tempdir().unwrap();
    let corpus = write_corpus(dir.path(), &records);
    let err = trainer::train(&small_config(), &corpus, |_| {})
        .err()
        .unwrap();
    assert!(matches!(err, TrainError::NoLabels));
}

#[test]
fn trained_checkpoint_survives_disk_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = write_corpus(dir.path(), &needle_records(60, 3));
    let config = TrainConfig {
        encoder: EncoderKind::MiniTransformer,
        f: 12,
        max_epochs: 2,
        patience: 2,
        ..small_config()
    };
    let mut epochs = 0;
    let run = trainer::train(&config, &corpus, |_| epochs += 1).unwrap();
    assert_eq!(epochs, 2);
    assert_eq!(run.outcome.log.len(), 2);
    let path = dir.path().join("m.satn");
    run.checkpoint.save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    assert_eq!(loaded.dims, run.checkpoint.dims);
    assert_eq!(loaded.vocab.codes, run.checkpoint.vocab.codes);
    assert!(bitwise_equal(&loaded.model, &run.checkpoint.model));

    let mut bytes = std::fs::read(&path).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x40;
    assert!(matches!(
        Checkpoint::from_bytes(&bytes),
        Err(CheckpointError::ChecksumMismatch { .. })
    ));
    bytes.truncate(mid);
    assert!(matches!(
        Checkpoint::from_bytes(&bytes),
        Err(CheckpointError::TruncatedFile)
    ));
}
