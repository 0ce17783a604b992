//! Synthetic needle-sentence corpus: every label's evidence token sits in one
//! sentence of a document otherwise made of filler. A model that pools all
//! sentences uniformly sees that evidence diluted by the filler.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::corpus::{LabelVector, PatentRecord};
use crate::head::AttentionMode;
use crate::metrics::micro_scores;
use crate::optim::AdamConfig;
use crate::segmenter::{token_id, word_pieces};
use crate::trainer::{tokenize_text, Example, TextOptions, TrainConfig, TrainError, Trainer};

const FILLER: &[&str] = &[
    "apparatus",
    "method",
    "system",
    "layer",
    "signal",
    "module",
    "surface",
    "member",
    "portion",
    "unit",
    "circuit",
    "housing",
    "frame",
    "channel",
    "element",
    "assembly",
    "device",
    "control",
    "base",
    "cover",
    "plate",
    "shaft",
    "sensor",
    "valve",
    "panel",
    "section",
    "body",
    "holder",
    "guide",
    "support",
    "terminal",
    "region",
    "coupled",
    "arranged",
    "formed",
    "provided",
    "disposed",
    "configured",
    "adjacent",
    "first",
    "second",
    "upper",
    "lower",
    "inner",
    "outer",
    "the",
    "a",
    "with",
    "from",
    "into",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct NeedleConfig {
    pub docs: usize,
    pub labels: usize,
    pub sentences: usize,
    pub words_per_sentence: usize,
    pub seed: u64,
}

impl Default for NeedleConfig {
    fn default() -> Self {
        Self {
            docs: 64,
            labels: 8,
            sentences: 32,
            words_per_sentence: 8,
            seed: 42,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NeedleDocument {
    pub id: String,
    pub text: String,
    pub labels: BTreeSet<usize>,
    /// Index of the sentence holding the evidence tokens.
    pub needle: usize,
}

/// One evidence word per label whose hashed id collides with neither the
/// filler nor another label's word.
pub fn evidence_words(labels: usize, v_buckets: usize) -> Vec<String> {
    let mut taken: BTreeSet<u32> = FILLER.iter().map(|w| token_id(w, v_buckets)).collect();
    let mut words = Vec::with_capacity(labels);
    let mut n = 0u32;
    while words.len() < labels {
        let word = format!("marker{n}");
        n += 1;
        if taken.insert(token_id(&word, v_buckets)) {
            words.push(word);
        }
    }
    words
}

fn capitalize(word: &str) -> String {
    let mut chars = word.chars();
    match chars.next() {
        Some(first) => first.to_uppercase().chain(chars).collect(),
        None => String::new(),
    }
}

fn sentence(words: &[String]) -> String {
    let mut out = capitalize(&words[0]);
    for w in &words[1..] {
        out.push(' ');
        out.push_str(w);
    }
    out.push('.');
    out
}

pub fn generate(config: &NeedleConfig, v_buckets: usize) -> Vec<NeedleDocument> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let evidence = evidence_words(config.labels, v_buckets);
    let filler = |rng: &mut ChaCha8Rng, n: usize| -> Vec<String> {
        (0..n)
            .map(|_| FILLER.choose(rng).expect("nonempty").to_string())
            .collect()
    };
    (0..config.docs)
        .map(|d| {
            let mut labels = BTreeSet::new();
            labels.insert(d % config.labels);
            if config.labels > 1 && rng.gen_bool(0.5) {
                labels.insert(rng.gen_range(0..config.labels));
            }
            let needle = rng.gen_range(0..config.sentences);
            let sentences: Vec<String> = (0..config.sentences)
                .map(|s| {
                    let mut words = filler(&mut rng, config.words_per_sentence);
                    if s == needle {
                        for &l in &labels {
                            let at = rng.gen_range(1..=words.len());
                            words.insert(at, evidence[l].clone());
                        }
                    }
                    sentence(&words)
                })
                .collect();
            NeedleDocument {
                id: format!("needle-{d:03}"),
                text: sentences.join(" "),
                labels,
                needle,
            }
        })
        .collect()
}

pub fn label_codes(labels: usize) -> Vec<String> {
    // Valid IPC subclasses so the corpus also runs through the file pipeline.
    (0..labels)
        .map(|l| format!("G{:02}{}", 1 + l / 26, (b'A' + (l % 26) as u8) as char))
        .collect()
}

pub fn to_records(docs: &[NeedleDocument], codes: &[String]) -> Vec<PatentRecord> {
    docs.iter()
        .map(|d| PatentRecord {
            id: d.id.clone(),
            title: String::new(),
            abstract_text: d.text.clone(),
            description: String::new(),
            ipc_codes: d.labels.iter().map(|&l| codes[l].clone()).collect(),
        })
        .collect()
}

pub fn to_examples(docs: &[NeedleDocument], labels: usize, options: &TextOptions) -> Vec<Example> {
    docs.iter()
        .map(|d| {
            let sentences = tokenize_text(&d.text, options).expect("generated text segments");
            let mut bits = vec![false; labels];
            for &l in &d.labels {
                bits[l] = true;
            }
            Example {
                id: d.id.clone(),
                sentences,
                target: LabelVector::new(bits),
            }
        })
        .collect()
}

/// Training settings for the paired runs: default dimensions with a larger
/// step and initialization than corpus training.
pub fn train_config() -> TrainConfig {
    TrainConfig {
        init_scale: 0.3,
        adam: AdamConfig {
            lr: 1e-2,
            ..AdamConfig::default()
        },
        ..TrainConfig::default()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NeedleReport {
    /// First epoch at which label-wise attention fits the training set.
    pub epochs_to_fit: Option<usize>,
    pub attention_curve: Vec<f64>,
    pub attention_losses: Vec<f64>,
    /// Uniform-pooling training micro-F1 after the same number of epochs.
    pub uniform_f1_at_fit: Option<f64>,
    pub uniform_curve: Vec<f64>,
}

fn run(
    config: &TrainConfig,
    labels: usize,
    train: &[Example],
    epochs: usize,
    stop_at_fit: bool,
) -> Result<(Vec<f64>, Vec<f64>), TrainError> {
    let mut trainer = Trainer::new(*config, labels)?;
    let mut curve = Vec::new();
    let mut losses = Vec::new();
    for _ in 0..epochs {
        losses.push(trainer.run_epoch(train)?);
        let f1 = micro_scores(&trainer.confusion(train)?).f1;
        curve.push(f1);
        if stop_at_fit && f1 == 1.0 {
            break;
        }
    }
    Ok((curve, losses))
}

/// Trains label-wise attention until it fits, then trains the uniform-pooling
/// ablation with the same seed for the same number of epochs.
pub fn run_experiment(
    needle: &NeedleConfig,
    config: &TrainConfig,
) -> Result<NeedleReport, TrainError> {
    let docs = generate(needle, config.v_buckets);
    let train = to_examples(&docs, needle.labels, &TextOptions::from_config(config));
    let learned = TrainConfig {
        attention: AttentionMode::Learned,
        ..*config
    };
    let (attention_curve, attention_losses) =
        run(&learned, needle.labels, &train, config.max_epochs, true)?;
    let epochs_to_fit = attention_curve
        .iter()
        .position(|&f| f == 1.0)
        .map(|e| e + 1);
    let uniform = TrainConfig {
        attention: AttentionMode::Uniform,
        ..*config
    };
    let budget = epochs_to_fit.unwrap_or(config.max_epochs);
    let (uniform_curve, _) = run(&uniform, needle.labels, &train, budget, false)?;
    Ok(NeedleReport {
        epochs_to_fit,
        uniform_f1_at_fit: epochs_to_fit.map(|e| uniform_curve[e - 1]),
        attention_curve,
        attention_losses,
        uniform_curve,
    })
}

/// Word pieces of the evidence sentence, used to check placement.
pub fn needle_pieces(doc: &NeedleDocument) -> Vec<String> {
    let sentences: Vec<&str> = doc.text.split_inclusive(". ").collect();
    word_pieces(sentences[doc.needle])
}
