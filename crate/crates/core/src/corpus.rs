//! Patent corpus ingestion, IPC subclass normalization, label vocabulary and
//! the id-hashed train/validation/test split.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hash::stable_hash64;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("cannot read corpus file {path}: {source}")]
    FileUnreadable {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("no record yielded a parseable IPC code")]
    NoLabels,
    #[error("cannot split an empty id set")]
    EmptyInput,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("malformed IPC code {raw:?}")]
pub struct MalformedIpc {
    pub raw: String,
}

/// A 3-depth IPC code (section, class, subclass), e.g. `B82Y`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct IpcCode([u8; 4]);

impl IpcCode {
    pub fn as_str(&self) -> &str {
        // Only ASCII bytes are ever stored.
        std::str::from_utf8(&self.0).expect("ascii")
    }

    pub fn section(&self) -> char {
        self.0[0] as char
    }
}

impl fmt::Display for IpcCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for IpcCode {
    type Err = MalformedIpc;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_ipc(s)
    }
}

/// Normalizes a raw IPC string to its subclass. Main group and subgroup are
/// dropped: `"B82Y 20/00"` becomes `B82Y`.
pub fn parse_ipc(raw: &str) -> Result<IpcCode, MalformedIpc> {
    let malformed = || MalformedIpc {
        raw: raw.to_string(),
    };
    let mut chars = raw.trim().chars().map(|c| c.to_ascii_uppercase());
    let mut code = [0u8; 4];
    for (slot, byte) in code.iter_mut().enumerate() {
        let c = chars.next().ok_or_else(malformed)?;
        let ok = match slot {
            0 => ('A'..='H').contains(&c),
            1 | 2 => c.is_ascii_digit(),
            _ => c.is_ascii_uppercase(),
        };
        if !ok {
            return Err(malformed());
        }
        *byte = c as u8;
    }
    Ok(IpcCode(code))
}

/// One corpus row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatentRecord {
    pub id: String,
    #[serde(default)]
    pub title: String,
    #[serde(default, rename = "abstract")]
    pub abstract_text: String,
    #[serde(default)]
    pub description: String,
    pub ipc_codes: Vec<String>,
}

impl PatentRecord {
    /// Distinct parseable subclasses of this record, sorted. Malformed codes
    /// are skipped; the second value counts them.
    pub fn subclasses(&self) -> (BTreeSet<IpcCode>, usize) {
        let mut malformed = 0;
        let mut out = BTreeSet::new();
        for raw in &self.ipc_codes {
            match parse_ipc(raw) {
                Ok(code) => {
                    out.insert(code);
                }
                Err(_) => malformed += 1,
            }
        }
        (out, malformed)
    }

    /// Model input text: title and abstract, plus the description when asked.
    pub fn model_text(&self, with_description: bool) -> String {
        let mut parts = vec![self.title.trim(), self.abstract_text.trim()];
        if with_description {
            parts.push(self.description.trim());
        }
        let mut text = String::new();
        for part in parts.into_iter().filter(|p| !p.is_empty()) {
            if !text.is_empty() {
                if text.ends_with(['.', '!', '?']) {
                    text.push(' ');
                } else {
                    text.push_str(". ");
                }
            }
            text.push_str(part);
        }
        text
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SkipReason {
    CorruptLine,
    EmptyId,
    NoText,
    DuplicateId,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct SkipCounts {
    pub corrupt_line: u64,
    pub empty_id: u64,
    pub no_text: u64,
    pub duplicate_id: u64,
}

impl SkipCounts {
    pub fn total(&self) -> u64 {
        self.corrupt_line + self.empty_id + self.no_text + self.duplicate_id
    }

    fn bump(&mut self, reason: SkipReason) {
        match reason {
            SkipReason::CorruptLine => self.corrupt_line += 1,
            SkipReason::EmptyId => self.empty_id += 1,
            SkipReason::NoText => self.no_text += 1,
            SkipReason::DuplicateId => self.duplicate_id += 1,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct IngestReport {
    pub read: u64,
    pub retained: u64,
    pub skipped: SkipCounts,
}

/// Streaming JSON-lines reader. Yields records in file order and skips
/// (while counting) any line that fails to parse or violates record
/// invariants. Blank lines are ignored entirely.
pub struct CorpusReader<R> {
    lines: std::io::Split<R>,
    seen: HashSet<String>,
    report: IngestReport,
    line_no: u64,
}

impl CorpusReader<BufReader<File>> {
    pub fn open(path: impl AsRef<Path>) -> Result<Self, CorpusError> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|source| CorpusError::FileUnreadable {
            path: path.display().to_string(),
            source,
        })?;
        Ok(Self::new(BufReader::new(file)))
    }
}

impl<R: BufRead> CorpusReader<R> {
    pub fn new(reader: R) -> Self {
        Self {
            lines: reader.split(b'\n'),
            seen: HashSet::new(),
            report: IngestReport::default(),
            line_no: 0,
        }
    }

    pub fn report(&self) -> &IngestReport {
        &self.report
    }

    fn check(&mut self, line: &str) -> Result<PatentRecord, SkipReason> {
        let record: PatentRecord =
            serde_json::from_str(line).map_err(|_| SkipReason::CorruptLine)?;
        if record.id.trim().is_empty() {
            return Err(SkipReason::EmptyId);
        }
        if record.title.trim().is_empty() && record.abstract_text.trim().is_empty() {
            return Err(SkipReason::NoText);
        }
        if !self.seen.insert(record.id.clone()) {
            return Err(SkipReason::DuplicateId);
        }
        Ok(record)
    }
}

/// A skipped line, reported with its 1-based line number.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Skipped {
    pub line: u64,
    pub reason: SkipReason,
}

impl<R: BufRead> Iterator for CorpusReader<R> {
    type Item = Result<PatentRecord, Skipped>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            let bytes = match self.lines.next()? {
                Ok(bytes) => bytes,
                Err(_) => return None,
            };
            self.line_no += 1;
            // Invalid UTF-8 fails JSON parsing below and is counted as corrupt.
            let line = String::from_utf8(bytes).unwrap_or_else(|_| String::from("\u{0}"));
            if line.trim().is_empty() {
                continue;
            }
            self.report.read += 1;
            let result = self.check(&line);
            return Some(match result {
                Ok(record) => {
                    self.report.retained += 1;
                    Ok(record)
                }
                Err(reason) => {
                    self.report.skipped.bump(reason);
                    Err(Skipped {
                        line: self.line_no,
                        reason,
                    })
                }
            });
        }
    }
}

/// Reads a whole corpus file, returning the retained records and the report.
pub fn load_corpus(
    path: impl AsRef<Path>,
) -> Result<(Vec<PatentRecord>, IngestReport), CorpusError> {
    let mut reader = CorpusReader::open(path)?;
    let records: Vec<PatentRecord> = reader.by_ref().filter_map(Result::ok).collect();
    Ok((records, reader.report().clone()))
}

/// Per-subclass document frequencies. Merging is a fieldwise sum, so shards
/// may be counted independently in any order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CodeCounts {
    counts: BTreeMap<IpcCode, u64>,
    pub malformed: u64,
}

impl CodeCounts {
    pub fn add_record(&mut self, record: &PatentRecord) {
        let (codes, malformed) = record.subclasses();
        self.malformed += malformed as u64;
        for code in codes {
            *self.counts.entry(code).or_default() += 1;
        }
    }

    pub fn merge(&mut self, other: &CodeCounts) {
        self.malformed += other.malformed;
        for (code, n) in &other.counts {
            *self.counts.entry(*code).or_default() += n;
        }
    }

    pub fn get(&self, code: &IpcCode) -> u64 {
        self.counts.get(code).copied().unwrap_or(0)
    }

    pub fn distinct(&self) -> usize {
        self.counts.len()
    }

    /// The `top_c` most frequent codes; ties go to the lexicographically
    /// smaller code.
    pub fn top(&self, top_c: usize) -> LabelVocabulary {
        let mut ranked: Vec<(IpcCode, u64)> = self.counts.iter().map(|(c, n)| (*c, *n)).collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        ranked.truncate(top_c);
        LabelVocabulary {
            codes: ranked.iter().map(|(c, _)| c.to_string()).collect(),
            counts: ranked.iter().map(|(_, n)| *n).collect(),
        }
    }
}

impl<'a> FromIterator<&'a PatentRecord> for CodeCounts {
    fn from_iter<I: IntoIterator<Item = &'a PatentRecord>>(iter: I) -> Self {
        let mut counts = CodeCounts::default();
        for record in iter {
            counts.add_record(record);
        }
        counts
    }
}

/// Ordered label space.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelVocabulary {
    pub codes: Vec<String>,
    pub counts: Vec<u64>,
}

impl LabelVocabulary {
    /// A vocabulary restored from a checkpoint carries no counts.
    pub fn from_codes(codes: Vec<String>) -> Self {
        let counts = vec![0; codes.len()];
        Self { codes, counts }
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    pub fn index_of(&self, code: &IpcCode) -> Option<usize> {
        self.codes.iter().position(|c| c == code.as_str())
    }
}

pub fn build_vocabulary<'a>(
    records: impl IntoIterator<Item = &'a PatentRecord>,
    top_c: usize,
) -> Result<LabelVocabulary, CorpusError> {
    let counts: CodeCounts = records.into_iter().collect();
    if counts.distinct() == 0 {
        return Err(CorpusError::NoLabels);
    }
    Ok(counts.top(top_c))
}

/// Multi-hot target aligned with a [`LabelVocabulary`].
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct LabelVector(Vec<bool>);

impl LabelVector {
    pub fn new(bits: Vec<bool>) -> Self {
        Self(bits)
    }

    pub fn zeros(len: usize) -> Self {
        Self(vec![false; len])
    }

    pub fn from_bits(bits: &[u8]) -> Self {
        Self(bits.iter().map(|&b| b != 0).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, i: usize) -> bool {
        self.0[i]
    }

    pub fn as_bools(&self) -> &[bool] {
        &self.0
    }

    pub fn count_ones(&self) -> usize {
        self.0.iter().filter(|&&b| b).count()
    }

    pub fn to_bits(&self) -> Vec<u8> {
        self.0.iter().map(|&b| u8::from(b)).collect()
    }
}

impl Serialize for LabelVector {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        self.to_bits().serialize(serializer)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LabelEncoding {
    Retained(LabelVector),
    /// None of the record's subclasses is in the vocabulary.
    Dropped,
}

pub fn encode_labels(record: &PatentRecord, vocab: &LabelVocabulary) -> LabelEncoding {
    let (codes, _) = record.subclasses();
    let mut bits = vec![false; vocab.len()];
    for code in &codes {
        if let Some(i) = vocab.index_of(code) {
            bits[i] = true;
        }
    }
    if bits.iter().any(|&b| b) {
        LabelEncoding::Retained(LabelVector::new(bits))
    } else {
        LabelEncoding::Dropped
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitName {
    Train,
    Validation,
    Test,
}

impl SplitName {
    pub fn of(id: &str, seed: u64) -> Self {
        match stable_hash64(seed, id) % 10 {
            0..=7 => SplitName::Train,
            8 => SplitName::Validation,
            _ => SplitName::Test,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            SplitName::Train => "train",
            SplitName::Validation => "validation",
            SplitName::Test => "test",
        }
    }
}

impl FromStr for SplitName {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(SplitName::Train),
            "validation" | "val" => Ok(SplitName::Validation),
            "test" => Ok(SplitName::Test),
            other => Err(format!(
                "unknown split {other:?} (expected train, validation or test)"
            )),
        }
    }
}

impl fmt::Display for SplitName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct DatasetSplit {
    pub train: BTreeSet<String>,
    pub validation: BTreeSet<String>,
    pub test: BTreeSet<String>,
}

impl DatasetSplit {
    pub fn get(&self, name: SplitName) -> &BTreeSet<String> {
        match name {
            SplitName::Train => &self.train,
            SplitName::Validation => &self.validation,
            SplitName::Test => &self.test,
        }
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.validation.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// 8:1:1 split by `stable_hash64(seed, id) mod 10`.
pub fn split_dataset<'a>(
    ids: impl IntoIterator<Item = &'a str>,
    seed: u64,
) -> Result<DatasetSplit, CorpusError> {
    let mut split = DatasetSplit::default();
    for id in ids {
        let set = match SplitName::of(id, seed) {
            SplitName::Train => &mut split.train,
            SplitName::Validation => &mut split.validation,
            SplitName::Test => &mut split.test,
        };
        set.insert(id.to_string());
    }
    if split.is_empty() {
        return Err(CorpusError::EmptyInput);
    }
    Ok(split)
}

/// Per-code document counts in vocabulary order.
pub fn label_stats<'a>(
    records: impl IntoIterator<Item = &'a PatentRecord>,
    vocab: &LabelVocabulary,
) -> Vec<(String, u64)> {
    let counts: CodeCounts = records.into_iter().collect();
    vocab
        .codes
        .iter()
        .map(|code| {
            let n = parse_ipc(code).map(|c| counts.get(&c)).unwrap_or(0);
            (code.clone(), n)
        })
        .collect()
}

/// The `stats` report: canonical code → count, then `dropped` and `skipped`.
pub fn stats_report(
    records: &[PatentRecord],
    vocab: &LabelVocabulary,
    ingest: &IngestReport,
) -> serde_json::Value {
    let mut map = serde_json::Map::new();
    for (code, n) in label_stats(records, vocab) {
        map.insert(code, n.into());
    }
    let dropped = records
        .iter()
        .filter(|r| encode_labels(r, vocab) == LabelEncoding::Dropped)
        .count();
    map.insert("dropped".into(), dropped.into());
    map.insert("skipped".into(), ingest.skipped.total().into());
    serde_json::Value::Object(map)
}
