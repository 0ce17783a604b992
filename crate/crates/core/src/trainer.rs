//! Mini-batch training, validation-based early stopping, evaluation and
//! single-document prediction.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::corpus::{
    build_vocabulary, encode_labels, load_corpus, CorpusError, LabelEncoding, LabelVector,
    LabelVocabulary, PatentRecord, SplitName,
};
use crate::encoder::{EncoderKind, INIT_SCALE};
use crate::head::{predict, AttentionMode, DEFAULT_THRESHOLD};
use crate::metrics::{macro_scores, micro_scores, ConfusionCounts, MetricsReport};
use crate::model::{Model, ModelDims, ModelError, ModelGrads};
use crate::optim::{Adam, AdamConfig};
use crate::segmenter::{
    segment, tokenize, TokenSequence, DEFAULT_K_MAX, DEFAULT_T_MAX, DEFAULT_V_BUCKETS,
};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Corpus(CorpusError),
    #[error("no record carries a parseable IPC code")]
    NoLabels,
    #[error("the {0} split has no usable documents")]
    EmptySplit(SplitName),
    #[error("non-finite loss at epoch {epoch}, batch {batch} (documents: {})", ids.join(", "))]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        ids: Vec<String>,
    },
    #[error("document {0} has no text to segment")]
    EmptyText(String),
    #[error("dimension mismatch: {0}")]
    DimsMismatch(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

impl From<CorpusError> for TrainError {
    fn from(e: CorpusError) -> Self {
        match e {
            CorpusError::NoLabels => TrainError::NoLabels,
            other => TrainError::Corpus(other),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub h: usize,
    pub top_c: usize,
    pub v_buckets: usize,
    pub t_max: usize,
    pub k_max: usize,
    pub f: usize,
    pub encoder: EncoderKind,
    pub attention: AttentionMode,
    pub adam: AdamConfig,
    pub init_scale: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub use_description: bool,
    /// Also score the training split after every epoch.
    pub track_train_f1: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            h: 64,
            top_c: 50,
            v_buckets: DEFAULT_V_BUCKETS,
            t_max: DEFAULT_T_MAX,
            k_max: DEFAULT_K_MAX,
            f: 128,
            encoder: EncoderKind::MeanPool,
            attention: AttentionMode::Learned,
            adam: AdamConfig::default(),
            init_scale: INIT_SCALE,
            batch_size: 16,
            max_epochs: 200,
            patience: 10,
            seed: 42,
            use_description: false,
            track_train_f1: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let positive = [
            ("h", self.h),
            ("top_c", self.top_c),
            ("v_buckets", self.v_buckets),
            ("k_max", self.k_max),
            ("f", self.f),
            ("batch_size", self.batch_size),
            ("max_epochs", self.max_epochs),
            ("patience", self.patience),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(TrainError::Config(format!("{name} must be positive")));
        }
        if self.t_max < 3 {
            return Err(TrainError::Config("t_max must be at least 3".into()));
        }
        if self.v_buckets > u32::MAX as usize - 4 {
            return Err(TrainError::Config("v_buckets too large".into()));
        }
        if self.patience > self.max_epochs {
            return Err(TrainError::Config("patience exceeds max_epochs".into()));
        }
        let a = self.adam;
        let finite_pos = |v: f64| v.is_finite() && v > 0.0;
        if !finite_pos(a.lr) || !finite_pos(a.epsilon) || !finite_pos(self.init_scale) {
            return Err(TrainError::Config(
                "lr, epsilon and init_scale must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) {
            return Err(TrainError::Config(
                "moment decays must lie in [0, 1)".into(),
            ));
        }
        Ok(())
    }

    pub fn dims(&self, c: usize) -> ModelDims {
        ModelDims {
            h: self.h,
            c,
            v_buckets: self.v_buckets,
            t_max: self.t_max,
            f: self.f,
        }
    }
}

/// A document ready for the model: tokenized sentences plus its target.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub id: String,
    pub sentences: Vec<TokenSequence>,
    pub target: LabelVector,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TextOptions {
    pub k_max: usize,
    pub t_max: usize,
    pub v_buckets: usize,
    pub use_description: bool,
}

impl TextOptions {
    pub fn from_config(config: &TrainConfig) -> Self {
        Self {
            k_max: config.k_max,
            t_max: config.t_max,
            v_buckets: config.v_buckets,
            use_description: config.use_description,
        }
    }
}

pub fn tokenize_text(text: &str, options: &TextOptions) -> Option<Vec<TokenSequence>> {
    let sentences = segment(text, options.k_max).ok()?;
    Some(
        sentences
            .iter()
            .map(|s| tokenize(&s.text, options.t_max, options.v_buckets))
            .collect(),
    )
}

/// Converts records into examples, dropping those with no in-vocabulary
/// label or no segmentable text. Returns the examples and the drop count.
pub fn prepare_examples<'a>(
    records: impl IntoIterator<Item = &'a PatentRecord>,
    vocab: &LabelVocabulary,
    options: &TextOptions,
) -> (Vec<Example>, usize) {
    let mut dropped = 0;
    let mut examples = Vec::new();
    for record in records {
        let target = match encode_labels(record, vocab) {
            LabelEncoding::Retained(t) => t,
            LabelEncoding::Dropped => {
                dropped += 1;
                continue;
            }
        };
        match tokenize_text(&record.model_text(options.use_description), options) {
            Some(sentences) => examples.push(Example {
                id: record.id.clone(),
                sentences,
                target,
            }),
            None => dropped += 1,
        }
    }
    (examples, dropped)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_micro_f1: f64,
    pub val_macro_f1: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_micro_f1: Option<f64>,
}

/// Tracks the best validation score. The first observation is always best;
/// later ones must improve strictly.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EarlyStopping {
    pub patience: usize,
    best: Option<(usize, f64)>,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: None,
        }
    }

    /// Records an epoch's score and reports whether it is a new best.
    pub fn observe(&mut self, epoch: usize, score: f64) -> bool {
        let improved = self.best.is_none_or(|(_, best)| score > best);
        if improved {
            self.best = Some((epoch, score));
        }
        improved
    }

    pub fn best(&self) -> Option<(usize, f64)> {
        self.best
    }

    pub fn should_stop(&self, epoch: usize) -> bool {
        self.best
            .is_some_and(|(best_epoch, _)| epoch - best_epoch >= self.patience)
    }
}

pub fn confusion<'a>(
    model: &Model<f32>,
    examples: impl IntoIterator<Item = &'a Example>,
    mode: AttentionMode,
    threshold: f64,
) -> Result<ConfusionCounts, TrainError> {
    let mut counts = ConfusionCounts::new(model.head.c());
    for ex in examples {
        let fwd = model.forward(&ex.sentences, mode)?;
        let predicted = predict(&fwd.head.scores, threshold);
        counts
            .accumulate(&predicted, &ex.target)
            .map_err(|e| TrainError::DimsMismatch(e.to_string()))?;
    }
    Ok(counts)
}

/// Optimizer state and shuffling stream for one training run.
pub struct Trainer {
    pub config: TrainConfig,
    pub model: Model<f32>,
    adam: Adam<f32>,
    rng: ChaCha8Rng,
    epoch: usize,
}

impl Trainer {
    pub fn new(config: TrainConfig, c: usize) -> Result<Self, TrainError> {
        config.validate()?;
        if c == 0 {
            return Err(TrainError::NoLabels);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let model = Model::init(config.encoder, config.dims(c), config.init_scale, &mut rng);
        let adam = Adam::new(config.adam, &model);
        Ok(Self {
            config,
            model,
            adam,
            rng,
            epoch: 0,
        })
    }

    pub fn epochs_run(&self) -> usize {
        self.epoch
    }

    /// One pass over `train` in a freshly shuffled order. Returns the mean
    /// per-document loss.
    pub fn run_epoch(&mut self, train: &[Example]) -> Result<f64, TrainError> {
        if train.is_empty() {
            return Err(TrainError::EmptySplit(SplitName::Train));
        }
        self.epoch += 1;
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut self.rng);
        let mut total = 0.0f64;
        for (b, batch) in order.chunks(self.config.batch_size).enumerate() {
            let scale = 1.0 / batch.len() as f32;
            let mut grads = ModelGrads::zeros_like(&self.model);
            let mut batch_loss = 0.0f64;
            for &i in batch {
                let ex = &train[i];
                let loss = self.model.loss_and_grad(
                    &ex.sentences,
                    &ex.target,
                    self.config.attention,
                    scale,
                    &mut grads,
                )?;
                batch_loss += f64::from(loss);
            }
            if !batch_loss.is_finite() {
                return Err(TrainError::NonFiniteLoss {
                    epoch: self.epoch,
                    batch: b + 1,
                    ids: batch.iter().map(|&i| train[i].id.clone()).collect(),
                });
            }
            self.adam.step(&mut self.model, &grads);
            total += batch_loss;
        }
        Ok(total / train.len() as f64)
    }

    pub fn confusion(&self, examples: &[Example]) -> Result<ConfusionCounts, TrainError> {
        confusion(
            &self.model,
            examples,
            self.config.attention,
            DEFAULT_THRESHOLD,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TrainMeta {
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub best_val_micro_f1: f64,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters from the best validation epoch.
    pub model: Model<f32>,
    pub log: Vec<EpochLog>,
    pub meta: TrainMeta,
}

/// Trains until `patience` epochs pass without a validation micro-F1 gain or
/// `max_epochs` is reached. `on_epoch` sees each log line as it is produced.
pub fn train_examples(
    config: &TrainConfig,
    c: usize,
    train: &[Example],
    validation: &[Example],
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome, TrainError> {
    if train.is_empty() {
        return Err(TrainError::EmptySplit(SplitName::Train));
    }
    if validation.is_empty() {
        return Err(TrainError::EmptySplit(SplitName::Validation));
    }
    let mut trainer = Trainer::new(*config, c)?;
    let mut stopper = EarlyStopping::new(config.patience);
    let mut best_model = trainer.model.clone();
    let mut log = Vec::new();
    for epoch in 1..=config.max_epochs {
        let train_loss = trainer.run_epoch(train)?;
        let val = trainer.confusion(validation)?;
        let train_micro_f1 = if config.track_train_f1 {
            Some(micro_scores(&trainer.confusion(train)?).f1)
        } else {
            None
        };
        let entry = EpochLog {
            epoch,
            train_loss,
            val_micro_f1: micro_scores(&val).f1,
            val_macro_f1: macro_scores(&val).f1,
            train_micro_f1,
        };
        on_epoch(&entry);
        if stopper.observe(epoch, entry.val_micro_f1) {
            best_model = trainer.model.clone();
        }
        log.push(entry);
        if stopper.should_stop(epoch) {
            break;
        }
    }
    let (best_epoch, best_val_micro_f1) = stopper.best().expect("at least one epoch");
    Ok(TrainOutcome {
        model: best_model,
        meta: TrainMeta {
            epochs_run: trainer.epochs_run(),
            best_epoch,
            best_val_micro_f1,
            seed: config.seed,
        },
        log,
    })
}

pub fn records_in_split(
    records: &[PatentRecord],
    split: SplitName,
    seed: u64,
) -> impl Iterator<Item = &PatentRecord> {
    records
        .iter()
        .filter(move |r| SplitName::of(&r.id, seed) == split)
}

pub struct CorpusTraining {
    pub checkpoint: Checkpoint,
    pub outcome: TrainOutcome,
    pub dropped: usize,
}

/// Full pipeline: load, split, build the vocabulary on the training split,
/// train, and package the best model.
pub fn train(
    config: &TrainConfig,
    corpus: impl AsRef<Path>,
    on_epoch: impl FnMut(&EpochLog),
) -> Result<CorpusTraining, TrainError> {
    config.validate()?;
    let (records, _) = load_corpus(corpus)?;
    let vocab = build_vocabulary(
        records_in_split(&records, SplitName::Train, config.seed),
        config.top_c,
    )?;
    let options = TextOptions::from_config(config);
    let (train_set, d1) = prepare_examples(
        records_in_split(&records, SplitName::Train, config.seed),
        &vocab,
        &options,
    );
    let (val_set, d2) = prepare_examples(
        records_in_split(&records, SplitName::Validation, config.seed),
        &vocab,
        &options,
    );
    let c = vocab.len();
    let outcome = train_examples(config, c, &train_set, &val_set, on_epoch)?;
    let checkpoint = Checkpoint::new(config.dims(c), vocab, outcome.model.clone())?;
    Ok(CorpusTraining {
        checkpoint,
        outcome,
        dropped: d1 + d2,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalOptions {
    pub seed: u64,
    pub k_max: usize,
    pub use_description: bool,
    pub attention: AttentionMode,
    pub threshold: f64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            seed: 42,
            k_max: DEFAULT_K_MAX,
            use_description: false,
            attention: AttentionMode::Learned,
            threshold: DEFAULT_THRESHOLD,
        }
    }
}

fn text_options(checkpoint: &Checkpoint, options: &EvalOptions) -> TextOptions {
    TextOptions {
        k_max: options.k_max,
        t_max: checkpoint.dims.t_max,
        v_buckets: checkpoint.dims.v_buckets,
        use_description: options.use_description,
    }
}

/// Scores one split of a corpus against the checkpoint's own vocabulary.
pub fn evaluate_records(
    checkpoint: &Checkpoint,
    records: &[PatentRecord],
    split: SplitName,
    options: &EvalOptions,
) -> Result<MetricsReport, TrainError> {
    if checkpoint.vocab.len() != checkpoint.model.head.c() {
        return Err(TrainError::DimsMismatch(format!(
            "vocabulary has {} codes but the model scores {}",
            checkpoint.vocab.len(),
            checkpoint.model.head.c()
        )));
    }
    let (examples, _) = prepare_examples(
        records_in_split(records, split, options.seed),
        &checkpoint.vocab,
        &text_options(checkpoint, options),
    );
    if examples.is_empty() {
        return Err(TrainError::EmptySplit(split));
    }
    let counts = confusion(
        &checkpoint.model,
        &examples,
        options.attention,
        options.threshold,
    )?;
    Ok(MetricsReport::new(&counts, &checkpoint.vocab.codes))
}

pub fn evaluate(
    checkpoint: &Checkpoint,
    corpus: impl AsRef<Path>,
    split: SplitName,
    options: &EvalOptions,
) -> Result<MetricsReport, TrainError> {
    let (records, _) = load_corpus(corpus)?;
    evaluate_records(checkpoint, &records, split, options)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LabelScore {
    pub code: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Prediction {
    pub id: String,
    pub scores: Vec<LabelScore>,
    pub predicted: Vec<String>,
    /// Per-label weights over the document's sentences, `c` rows of `k`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub attention: Option<Vec<Vec<f64>>>,
}

/// Scores every label for one record.
pub fn predict_record(
    checkpoint: &Checkpoint,
    record: &PatentRecord,
    options: &EvalOptions,
    dump_attention: bool,
) -> Result<Prediction, TrainError> {
    let text = record.model_text(options.use_description);
    let tokens = tokenize_text(&text, &text_options(checkpoint, options))
        .ok_or_else(|| TrainError::EmptyText(record.id.clone()))?;
    let fwd = checkpoint.model.forward(&tokens, options.attention)?;
    let predicted = predict(&fwd.head.scores, options.threshold);
    let codes = &checkpoint.vocab.codes;
    Ok(Prediction {
        id: record.id.clone(),
        scores: codes
            .iter()
            .zip(&fwd.head.scores.probs)
            .map(|(code, &p)| LabelScore {
                code: code.clone(),
                score: f64::from(p),
            })
            .collect(),
        predicted: codes
            .iter()
            .zip(predicted.as_bools())
            .filter(|(_, &p)| p)
            .map(|(c, _)| c.clone())
            .collect(),
        attention: dump_attention.then(|| {
            fwd.head
                .alpha
                .to_rows()
                .into_iter()
                .map(|row| row.into_iter().map(f64::from).collect())
                .collect()
        }),
    })
}
