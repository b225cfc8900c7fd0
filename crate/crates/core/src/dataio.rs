//! Conversation corpus model, the `hcan-corpus-v1` line format, corpus
//! statistics and the synthetic corpus generator.
//!
//! A corpus lives in a directory holding one file per split
//! (`train.jsonl`, `val.jsonl`, `test.jsonl`). Each file starts with a header
//! line
//!
//! ```text
//! {"format":"hcan-corpus-v1","feature_dim":4,"labels":["a","b"],"split":"train"}
//! ```
//!
//! followed by one conversation per line:
//!
//! ```text
//! {"id":"c0","speakers":[0,1],"labels":[1,0],"features":[[0.5,...],[...]]}
//! ```
//!
//! `labels` may be `null` for unlabeled conversations. Feature values are
//! held as `f32` and written with the shortest decimal that reads back to the
//! same `f32`, so a write/read cycle is bit-exact.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const FORMAT_TAG: &str = "hcan-corpus-v1";

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: parse error: {msg}")]
    Parse { path: PathBuf, line: usize, msg: String },
    #[error("{path}:{line}: schema error: {msg}")]
    Schema { path: PathBuf, line: usize, msg: String },
    #[error("{path}:{line}: conversation `{conversation}`: {msg}")]
    Consistency {
        path: PathBuf,
        line: usize,
        conversation: String,
        msg: String,
    },
    #[error("invalid corpus: {0}")]
    Invalid(String),
    #[error("invalid synthetic spec: {0}")]
    Spec(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn file_name(self) -> String {
        format!("{}.jsonl", self.name())
    }

    pub fn from_name(s: &str) -> Option<Split> {
        Split::ALL.into_iter().find(|sp| sp.name() == s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub speaker: usize,
    pub features: Vec<f32>,
    pub label: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conversation {
    pub id: String,
    pub utterances: Vec<Utterance>,
}

impl Conversation {
    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    pub fn speakers(&self) -> Vec<usize> {
        self.utterances.iter().map(|u| u.speaker).collect()
    }

    /// Gold labels, if every utterance carries one.
    pub fn labels(&self) -> Option<Vec<usize>> {
        self.utterances.iter().map(|u| u.label).collect()
    }

    pub fn is_labeled(&self) -> bool {
        self.utterances.iter().all(|u| u.label.is_some())
    }

    /// Features as a row-major n×d_u buffer of f64.
    pub fn feature_matrix(&self) -> Vec<f64> {
        self.utterances
            .iter()
            .flat_map(|u| u.features.iter().map(|&v| v as f64))
            .collect()
    }

    pub fn num_speakers(&self) -> usize {
        self.utterances.iter().map(|u| u.speaker).collect::<HashSet<_>>().len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub label_set: Vec<String>,
    pub feature_dim: usize,
    pub train: Vec<Conversation>,
    pub val: Vec<Conversation>,
    pub test: Vec<Conversation>,
}

impl Corpus {
    pub fn split(&self, split: Split) -> &[Conversation] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn split_mut(&mut self, split: Split) -> &mut Vec<Conversation> {
        match split {
            Split::Train => &mut self.train,
            Split::Val => &mut self.val,
            Split::Test => &mut self.test,
        }
    }

    pub fn num_emotions(&self) -> usize {
        self.label_set.len()
    }

    /// Re-runs every invariant check that the loader applies.
    pub fn validate(&self) -> Result<(), DataError> {
        if self.feature_dim == 0 {
            return Err(DataError::Invalid("feature_dim must be positive".into()));
        }
        if self.label_set.is_empty() {
            return Err(DataError::Invalid("label set is empty".into()));
        }
        for split in Split::ALL {
            let mut ids = HashSet::new();
            for conv in self.split(split) {
                check_conversation(conv, self.feature_dim, self.label_set.len())
                    .map_err(|msg| DataError::Invalid(format!("{} `{}`: {msg}", split.name(), conv.id)))?;
                if !ids.insert(conv.id.as_str()) {
                    return Err(DataError::Invalid(format!(
                        "{}: duplicate conversation id `{}`",
                        split.name(),
                        conv.id
                    )));
                }
            }
        }
        Ok(())
    }
}

fn check_conversation(conv: &Conversation, feature_dim: usize, num_labels: usize) -> Result<(), String> {
    if conv.utterances.is_empty() {
        return Err("conversation has no utterances".into());
    }
    let labeled = conv.utterances.iter().filter(|u| u.label.is_some()).count();
    if labeled != 0 && labeled != conv.len() {
        return Err("labels must be present for all utterances or none".into());
    }
    for (i, u) in conv.utterances.iter().enumerate() {
        if u.features.len() != feature_dim {
            return Err(format!(
                "utterance {i} has {} features, expected {feature_dim}",
                u.features.len()
            ));
        }
        if let Some(bad) = u.features.iter().find(|v| !v.is_finite()) {
            return Err(format!("utterance {i} has non-finite feature {bad}"));
        }
        if let Some(l) = u.label {
            if l >= num_labels {
                return Err(format!("utterance {i} label {l} out of range for {num_labels} labels"));
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
struct Header {
    format: String,
    feature_dim: usize,
    labels: Vec<String>,
    split: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct Record {
    id: String,
    speakers: Vec<usize>,
    labels: Option<Vec<usize>>,
    features: Vec<Vec<f32>>,
}

/// One split file: its declared label set, feature width, split and content.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitFile {
    pub split: Split,
    pub label_set: Vec<String>,
    pub feature_dim: usize,
    pub conversations: Vec<Conversation>,
}

fn json_error(path: &Path, line: usize, e: serde_json::Error) -> DataError {
    use serde_json::error::Category;
    match e.classify() {
        Category::Data => DataError::Schema {
            path: path.to_path_buf(),
            line,
            msg: e.to_string(),
        },
        _ => DataError::Parse {
            path: path.to_path_buf(),
            line,
            msg: e.to_string(),
        },
    }
}

/// Reads and validates a single split file.
pub fn load_split(path: &Path) -> Result<SplitFile, DataError> {
    let io = |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    };
    let reader = BufReader::new(fs::File::open(path).map_err(io)?);
    let mut lines = reader.lines().enumerate();
    let header_line = loop {
        match lines.next() {
            Some((_, line)) => {
                let line = line.map_err(io)?;
                if !line.trim().is_empty() {
                    break line;
                }
            }
            None => {
                return Err(DataError::Schema {
                    path: path.to_path_buf(),
                    line: 1,
                    msg: "missing header line".into(),
                })
            }
        }
    };
    let header: Header = serde_json::from_str(&header_line).map_err(|e| json_error(path, 1, e))?;
    let schema = |line: usize, msg: String| DataError::Schema {
        path: path.to_path_buf(),
        line,
        msg,
    };
    if header.format != FORMAT_TAG {
        return Err(schema(1, format!("unsupported format `{}`", header.format)));
    }
    let split = Split::from_name(&header.split)
        .ok_or_else(|| schema(1, format!("unknown split `{}`", header.split)))?;
    if header.feature_dim == 0 {
        return Err(schema(1, "feature_dim must be positive".into()));
    }
    if header.labels.is_empty() {
        return Err(schema(1, "label set is empty".into()));
    }
    let mut conversations = Vec::new();
    let mut ids = HashSet::new();
    for (idx, line) in lines {
        let line_no = idx + 1;
        let line = line.map_err(io)?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&line).map_err(|e| json_error(path, line_no, e))?;
        let consistency = |msg: String| DataError::Consistency {
            path: path.to_path_buf(),
            line: line_no,
            conversation: rec.id.clone(),
            msg,
        };
        let n = rec.features.len();
        if rec.speakers.len() != n {
            return Err(consistency(format!(
                "speakers has length {} but features has length {n}",
                rec.speakers.len()
            )));
        }
        if let Some(labels) = &rec.labels {
            if labels.len() != n {
                return Err(consistency(format!(
                    "labels has length {} but features has length {n}",
                    labels.len()
                )));
            }
        }
        let conv = Conversation {
            id: rec.id.clone(),
            utterances: (0..n)
                .map(|i| Utterance {
                    speaker: rec.speakers[i],
                    features: rec.features[i].clone(),
                    label: rec.labels.as_ref().map(|l| l[i]),
                })
                .collect(),
        };
        check_conversation(&conv, header.feature_dim, header.labels.len()).map_err(consistency)?;
        if !ids.insert(conv.id.clone()) {
            return Err(consistency("duplicate conversation id".into()));
        }
        conversations.push(conv);
    }
    Ok(SplitFile {
        split,
        label_set: header.labels,
        feature_dim: header.feature_dim,
        conversations,
    })
}

/// Loads a corpus directory. `train.jsonl` is required; absent `val.jsonl`
/// or `test.jsonl` yield empty splits.
pub fn load_corpus(dir: &Path) -> Result<Corpus, DataError> {
    let mut corpus: Option<Corpus> = None;
    for split in Split::ALL {
        let path = dir.join(split.file_name());
        if split != Split::Train && !path.exists() {
            continue;
        }
        let file = load_split(&path)?;
        if file.split != split {
            return Err(DataError::Schema {
                path,
                line: 1,
                msg: format!("header declares split `{}`", file.split.name()),
            });
        }
        let c = corpus.get_or_insert_with(|| Corpus {
            label_set: file.label_set.clone(),
            feature_dim: file.feature_dim,
            train: Vec::new(),
            val: Vec::new(),
            test: Vec::new(),
        });
        if c.label_set != file.label_set || c.feature_dim != file.feature_dim {
            return Err(DataError::Schema {
                path,
                line: 1,
                msg: "feature_dim or labels disagree with train split".into(),
            });
        }
        *c.split_mut(split) = file.conversations;
    }
    Ok(corpus.expect("train split is always read"))
}

/// Writes one split file.
pub fn write_split(path: &Path, corpus: &Corpus, split: Split) -> Result<(), DataError> {
    let io = |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    };
    let file = fs::File::create(path).map_err(io)?;
    let mut w = BufWriter::new(file);
    let header = Header {
        format: FORMAT_TAG.into(),
        feature_dim: corpus.feature_dim,
        labels: corpus.label_set.clone(),
        split: split.name().into(),
    };
    writeln!(w, "{}", json_line(&header)).map_err(io)?;
    for conv in corpus.split(split) {
        let labeled = conv.utterances.iter().filter(|u| u.label.is_some()).count();
        if labeled != 0 && labeled != conv.len() {
            return Err(DataError::Invalid(format!(
                "conversation `{}` mixes labeled and unlabeled utterances",
                conv.id
            )));
        }
        let rec = Record {
            id: conv.id.clone(),
            speakers: conv.speakers(),
            labels: conv.labels(),
            features: conv.utterances.iter().map(|u| u.features.clone()).collect(),
        };
        writeln!(w, "{}", json_line(&rec)).map_err(io)?;
    }
    w.flush().map_err(io)
}

fn json_line<T: Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("corpus records always serialize")
}

/// Writes `train.jsonl`, `val.jsonl` and `test.jsonl` into `dir`.
pub fn write_corpus(corpus: &Corpus, dir: &Path) -> Result<(), DataError> {
    corpus.validate()?;
    fs::create_dir_all(dir).map_err(|source| DataError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    for split in Split::ALL {
        write_split(&dir.join(split.file_name()), corpus, split)?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitStats {
    pub dialogues: usize,
    pub utterances: usize,
    pub labeled_utterances: usize,
    /// Count per emotion index.
    pub label_histogram: Vec<usize>,
    /// Conversations keyed by their number of distinct speakers.
    pub speaker_counts: BTreeMap<usize, usize>,
    /// Labeled conversations whose utterances all share one emotion.
    pub single_label_dialogues: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub labels: Vec<String>,
    pub feature_dim: usize,
    pub train: SplitStats,
    pub val: SplitStats,
    pub test: SplitStats,
}

impl CorpusStats {
    pub fn split(&self, split: Split) -> &SplitStats {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

pub fn corpus_stats(corpus: &Corpus) -> CorpusStats {
    let stats = |convs: &[Conversation]| {
        let mut s = SplitStats {
            dialogues: convs.len(),
            utterances: 0,
            labeled_utterances: 0,
            label_histogram: vec![0; corpus.label_set.len()],
            speaker_counts: BTreeMap::new(),
            single_label_dialogues: 0,
        };
        for c in convs {
            s.utterances += c.len();
            *s.speaker_counts.entry(c.num_speakers()).or_default() += 1;
            for u in &c.utterances {
                if let Some(l) = u.label {
                    s.labeled_utterances += 1;
                    s.label_histogram[l] += 1;
                }
            }
            if let Some(labels) = c.labels() {
                if labels.iter().all(|&l| l == labels[0]) {
                    s.single_label_dialogues += 1;
                }
            }
        }
        s
    };
    CorpusStats {
        labels: corpus.label_set.clone(),
        feature_dim: corpus.feature_dim,
        train: stats(&corpus.train),
        val: stats(&corpus.val),
        test: stats(&corpus.test),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SplitSizes {
    pub fn get(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::Val => self.val,
            Split::Test => self.test,
        }
    }
}

/// Parameters of the synthetic corpus generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub num_emotions: usize,
    pub num_speakers: usize,
    pub feature_dim: usize,
    pub conversations_per_split: SplitSizes,
    /// Inclusive (min, max) conversation length.
    pub length_range: (usize, usize),
    pub cluster_separation: f64,
    pub speaker_offset_scale: f64,
    pub emotion_transition_stickiness: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    /// The reference learnability corpus: 3 emotions, 2 speakers, d_u = 16.
    fn default() -> Self {
        SyntheticSpec {
            num_emotions: 3,
            num_speakers: 2,
            feature_dim: 16,
            conversations_per_split: SplitSizes {
                train: 200,
                val: 50,
                test: 50,
            },
            length_range: (6, 14),
            cluster_separation: 3.0,
            speaker_offset_scale: 1.0,
            emotion_transition_stickiness: 0.8,
            seed: 7,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: &str| Err(DataError::Spec(m.into()));
        if self.num_emotions == 0 || self.num_speakers == 0 || self.feature_dim == 0 {
            return bad("num_emotions, num_speakers and feature_dim must be positive");
        }
        let sizes = self.conversations_per_split;
        if sizes.train == 0 {
            return bad("the train split needs at least one conversation");
        }
        if self.length_range.0 == 0 || self.length_range.0 > self.length_range.1 {
            return bad("length_range must satisfy 1 <= min <= max");
        }
        if !(0.0..=1.0).contains(&self.emotion_transition_stickiness) {
            return bad("emotion_transition_stickiness must lie in [0, 1]");
        }
        if !(self.cluster_separation >= 0.0) || !(self.speaker_offset_scale >= 0.0) {
            return bad("cluster_separation and speaker_offset_scale must be non-negative");
        }
        Ok(())
    }
}

fn gaussian_vec(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Generates a corpus whose emotions follow a sticky Markov chain and whose
/// features are emotion center + speaker offset + unit Gaussian noise.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Corpus, DataError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let d = spec.feature_dim;
    let centers: Vec<Vec<f64>> = (0..spec.num_emotions)
        .map(|_| {
            let v = gaussian_vec(&mut rng, d);
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            v.into_iter().map(|x| x / norm * spec.cluster_separation).collect()
        })
        .collect();
    let offsets: Vec<Vec<f64>> = (0..spec.num_speakers)
        .map(|_| {
            gaussian_vec(&mut rng, d)
                .into_iter()
                .map(|x| x * spec.speaker_offset_scale)
                .collect()
        })
        .collect();
    let mut corpus = Corpus {
        label_set: (0..spec.num_emotions).map(|e| format!("emotion{e}")).collect(),
        feature_dim: d,
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for split in Split::ALL {
        for c in 0..spec.conversations_per_split.get(split) {
            let n = rng.random_range(spec.length_range.0..=spec.length_range.1);
            let mut emotion = rng.random_range(0..spec.num_emotions);
            let mut utterances = Vec::with_capacity(n);
            for i in 0..n {
                if i > 0 {
                    emotion = sticky_step(&mut rng, emotion, spec.num_emotions, spec.emotion_transition_stickiness);
                }
                let speaker = rng.random_range(0..spec.num_speakers);
                let noise = gaussian_vec(&mut rng, d);
                let features = (0..d)
                    .map(|k| (centers[emotion][k] + offsets[speaker][k] + noise[k]) as f32)
                    .collect();
                utterances.push(Utterance {
                    speaker,
                    features,
                    label: Some(emotion),
                });
            }
            corpus.split_mut(split).push(Conversation {
                id: format!("{}-{c:05}", split.name()),
                utterances,
            });
        }
    }
    Ok(corpus)
}

/// One step of the chain: stay with probability `stickiness`, otherwise move
/// to one of the other emotions uniformly.
fn sticky_step(rng: &mut ChaCha8Rng, current: usize, num: usize, stickiness: f64) -> usize {
    if num == 1 || rng.random::<f64>() < stickiness {
        return current;
    }
    let other = rng.random_range(0..num - 1);
    if other >= current {
        other + 1
    } else {
        other
    }
}

/// Dialogue/utterance counts of the three public benchmarks, for building
/// structure-only corpora with matching layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BenchmarkLayout {
    Iemocap,
    Meld,
    EmoryNlp,
}

impl BenchmarkLayout {
    pub fn from_name(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "iemocap" => Some(Self::Iemocap),
            "meld" => Some(Self::Meld),
            "emorynlp" => Some(Self::EmoryNlp),
            _ => None,
        }
    }

    /// Per-split (dialogues, utterances). IEMOCAP is distributed with train
    /// and validation merged.
    pub fn counts(self) -> [(usize, usize); 3] {
        match self {
            Self::Iemocap => [(120, 5810), (0, 0), (31, 1623)],
            Self::Meld => [(1039, 9989), (114, 1109), (280, 2610)],
            Self::EmoryNlp => [(659, 7551), (89, 954), (79, 984)],
        }
    }

    pub fn labels(self) -> Vec<String> {
        let names: &[&str] = match self {
            Self::Iemocap => &["happy", "sad", "neutral", "angry", "excited", "frustrated"],
            Self::Meld => &["neutral", "surprise", "fear", "sadness", "joy", "disgust", "anger"],
            Self::EmoryNlp => &["neutral", "joyful", "peaceful", "powerful", "scared", "mad", "sad"],
        };
        names.iter().map(|s| s.to_string()).collect()
    }

    pub fn max_speakers(self) -> usize {
        match self {
            Self::Iemocap => 2,
            Self::Meld | Self::EmoryNlp => 3,
        }
    }
}

/// Builds a random-content corpus with exactly the benchmark's split layout.
pub fn layout_corpus(layout: BenchmarkLayout, feature_dim: usize, seed: u64) -> Corpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels = layout.labels();
    let mut corpus = Corpus {
        label_set: labels.clone(),
        feature_dim,
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for (split, (dialogues, utterances)) in Split::ALL.into_iter().zip(layout.counts()) {
        for c in 0..dialogues {
            // spread the remainder over the first dialogues
            let n = utterances / dialogues + usize::from(c < utterances % dialogues);
            let utts = (0..n)
                .map(|_| Utterance {
                    speaker: rng.random_range(0..layout.max_speakers()),
                    features: (0..feature_dim).map(|_| rng.sample::<f32, _>(StandardNormal)).collect(),
                    label: Some(rng.random_range(0..labels.len())),
                })
                .collect();
            corpus.split_mut(split).push(Conversation {
                id: format!("{}-{c:05}", split.name()),
                utterances: utts,
            });
        }
    }
    corpus
}
