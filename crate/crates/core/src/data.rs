//! Task datasets, vocabularies, collection padding and Task Oriented
//! Sampling.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("empty dataset")]
    EmptyDataset,
    #[error("n0 must be at least 1, got {0}")]
    InvalidUpsampling(usize),
    #[error("oriented task {task} out of range for {tasks} tasks")]
    InvalidTask { task: usize, tasks: usize },
    #[error("unknown scenario preset {0:?}")]
    UnknownScenario(String),
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, DataError>;

/// Token vocabulary with `<pad>` at id 0 and `<unk>` at id 1.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Default for Vocab {
    fn default() -> Self {
        Self::from_tokens(Vec::<String>::new())
    }
}

impl Vocab {
    /// Vocabulary over `words` in the given order, after PAD and UNK.
    pub fn from_tokens<S: Into<String>>(words: impl IntoIterator<Item = S>) -> Self {
        let mut tokens = vec![PAD_TOKEN.to_string(), UNK_TOKEN.to_string()];
        let mut index: HashMap<String, usize> = tokens.iter().cloned().zip(0..).collect();
        for w in words {
            let w = w.into();
            if !index.contains_key(&w) {
                index.insert(w.clone(), tokens.len());
                tokens.push(w);
            }
        }
        Self { tokens, index }
    }

    /// Builds ids ordered by descending frequency, ties broken
    /// lexicographically.
    pub fn build<'a>(corpus: impl IntoIterator<Item = &'a str>) -> Self {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for tok in corpus {
            *counts.entry(tok).or_default() += 1;
        }
        let mut ranked: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|(t, _)| *t != PAD_TOKEN && *t != UNK_TOKEN)
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        Self::from_tokens(ranked.into_iter().map(|(t, _)| t))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Id of `token`, or UNK.
    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub tokens: Vec<usize>,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskDataset {
    pub name: String,
    pub samples: Vec<Sample>,
    pub class_count: usize,
    pub vocab: Vocab,
}

impl TaskDataset {
    pub fn new(name: impl Into<String>, samples: Vec<Sample>, class_count: usize, vocab: Vocab) -> Result<Self> {
        let ds = Self {
            name: name.into(),
            samples,
            class_count,
            vocab,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        if self.samples.is_empty() {
            return Err(DataError::EmptyDataset);
        }
        if self.class_count < 2 {
            return Err(DataError::Invalid(format!("{}: class_count must be >= 2", self.name)));
        }
        for (i, s) in self.samples.iter().enumerate() {
            if s.tokens.is_empty() {
                return Err(DataError::Invalid(format!("{}: sample {i} has no tokens", self.name)));
            }
            if s.label >= self.class_count {
                return Err(DataError::Invalid(format!(
                    "{}: sample {i} label {} >= class_count {}",
                    self.name, s.label, self.class_count
                )));
            }
            if let Some(t) = s.tokens.iter().find(|&&t| t >= self.vocab.len() || t == PAD) {
                return Err(DataError::Invalid(format!("{}: sample {i} has invalid token id {t}", self.name)));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// A dataset holding the samples at `indices`, sharing the vocabulary.
    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            name: self.name.clone(),
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
            class_count: self.class_count,
            vocab: self.vocab.clone(),
        }
    }

    /// Seeded train/validation/test split. Fractions are for train and
    /// validation; the test split takes the remainder.
    pub fn split(&self, train: f64, valid: f64, seed: u64) -> Split {
        let n = self.samples.len();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n_train = ((n as f64) * train).round() as usize;
        let n_valid = ((n as f64) * valid).round() as usize;
        let n_train = n_train.min(n);
        let n_valid = n_valid.min(n - n_train);
        Split {
            train: order[..n_train].to_vec(),
            valid: order[n_train..n_train + n_valid].to_vec(),
            test: order[n_train + n_valid..].to_vec(),
        }
    }

    /// Writes `label<TAB>tokens` lines using the vocabulary's strings.
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for s in &self.samples {
            let words: Vec<&str> = s.tokens.iter().map(|&t| self.vocab.token(t)).collect();
            out.push_str(&format!("{}\t{}\n", s.label, words.join(" ")));
        }
        fs::write(path, out).map_err(|source| DataError::Io {
            path: path.to_path_buf(),
            source,
        })
    }
}

/// Sample indices of one split of a dataset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub valid: Vec<usize>,
    pub test: Vec<usize>,
}

/// Declares how to read a dataset file.
#[derive(Debug, Clone)]
pub struct DatasetSchema {
    pub name: String,
    pub class_count: usize,
    /// Apply this vocabulary instead of building one from the file.
    pub vocab: Option<Vocab>,
}

/// Reads `label<TAB>space separated tokens` lines. Blank lines are skipped.
pub fn load_dataset(path: &Path, schema: &DatasetSchema) -> Result<TaskDataset> {
    let text = fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let parse_err = |line: usize, message: String| DataError::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut raw: Vec<(Vec<&str>, usize)> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let (label, body) = line
            .split_once('\t')
            .ok_or_else(|| parse_err(line_no, "expected label<TAB>tokens".into()))?;
        let label: usize = label
            .trim()
            .parse()
            .map_err(|_| parse_err(line_no, format!("invalid label {label:?}")))?;
        if label >= schema.class_count {
            return Err(parse_err(
                line_no,
                format!("label {label} out of range for {} classes", schema.class_count),
            ));
        }
        let tokens: Vec<&str> = body.split_whitespace().collect();
        if tokens.is_empty() {
            return Err(parse_err(line_no, "no tokens".into()));
        }
        raw.push((tokens, label));
    }
    if raw.is_empty() {
        return Err(DataError::EmptyDataset);
    }
    let vocab = match &schema.vocab {
        Some(v) => v.clone(),
        None => Vocab::build(raw.iter().flat_map(|(t, _)| t.iter().copied())),
    };
    let samples = raw
        .into_iter()
        .map(|(tokens, label)| Sample {
            tokens: tokens.iter().map(|t| vocab.id(t)).collect(),
            label,
        })
        .collect();
    TaskDataset::new(schema.name.clone(), samples, schema.class_count, vocab)
}

/// Re-encodes every dataset against one merged vocabulary (tokens ordered
/// by total frequency across datasets).
pub fn unify_vocab(datasets: &[TaskDataset]) -> Vec<TaskDataset> {
    let corpus = datasets
        .iter()
        .flat_map(|ds| ds.samples.iter().flat_map(move |s| s.tokens.iter().map(move |&t| ds.vocab.token(t))));
    let merged = Vocab::build(corpus);
    datasets
        .iter()
        .map(|ds| TaskDataset {
            name: ds.name.clone(),
            class_count: ds.class_count,
            samples: ds
                .samples
                .iter()
                .map(|s| Sample {
                    tokens: s.tokens.iter().map(|&t| merged.id(ds.vocab.token(t))).collect(),
                    label: s.label,
                })
                .collect(),
            vocab: merged.clone(),
        })
        .collect()
}

/// One aligned K-tuple of inputs and labels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleCollection {
    /// Right-padded token sequences, all of equal length.
    pub inputs: Vec<Vec<usize>>,
    /// Unpadded length of each sequence.
    pub lengths: Vec<usize>,
    pub labels: Vec<usize>,
    /// Index of the source sample within each task's pool, when known.
    pub sources: Vec<usize>,
}

impl SampleCollection {
    pub fn tasks(&self) -> usize {
        self.inputs.len()
    }

    pub fn padded_len(&self) -> usize {
        self.inputs.first().map_or(0, Vec::len)
    }

    /// The original variable-length sequences.
    pub fn unpadded(&self) -> Vec<Vec<usize>> {
        self.inputs
            .iter()
            .zip(&self.lengths)
            .map(|(seq, &len)| seq[..len].to_vec())
            .collect()
    }
}

/// Right-pads every sequence with PAD to the longest one.
pub fn pad_collection(raw: Vec<Vec<usize>>, labels: Vec<usize>) -> SampleCollection {
    let max = raw.iter().map(Vec::len).max().unwrap_or(0);
    let lengths = raw.iter().map(Vec::len).collect();
    let inputs = raw
        .into_iter()
        .map(|mut seq| {
            seq.resize(max, PAD);
            seq
        })
        .collect();
    SampleCollection {
        inputs,
        lengths,
        labels,
        sources: Vec::new(),
    }
}

/// Builds the aligned index lists of Task Oriented Sampling.
///
/// With `N = n0 * sizes[oriented]`, the oriented task's list repeats every
/// index `n0` times; any other task draws `N` indices without replacement
/// when it has at least `N` samples and with replacement otherwise. Each
/// list is then shuffled independently, so that position `j` across the
/// lists forms collection `j`.
pub fn tos_indices<R: Rng + ?Sized>(sizes: &[usize], oriented: usize, n0: usize, rng: &mut R) -> Result<Vec<Vec<usize>>> {
    if n0 < 1 {
        return Err(DataError::InvalidUpsampling(n0));
    }
    if oriented >= sizes.len() {
        return Err(DataError::InvalidTask {
            task: oriented,
            tasks: sizes.len(),
        });
    }
    if sizes.contains(&0) {
        return Err(DataError::EmptyDataset);
    }
    let total = n0 * sizes[oriented];
    let mut lists = Vec::with_capacity(sizes.len());
    for (i, &size) in sizes.iter().enumerate() {
        let list: Vec<usize> = if i == oriented {
            (0..size).flat_map(|s| std::iter::repeat_n(s, n0)).collect()
        } else if size >= total {
            index::sample(rng, size, total).into_vec()
        } else {
            (0..total).map(|_| rng.random_range(0..size)).collect()
        };
        lists.push(list);
    }
    for list in &mut lists {
        list.shuffle(rng);
    }
    Ok(lists)
}

/// Task Oriented Sampling: `n0 * N_k` padded collections biased toward
/// task `oriented` (zero-based).
pub fn tos_sample(datasets: &[TaskDataset], oriented: usize, n0: usize, seed: u64) -> Result<Vec<SampleCollection>> {
    let pools: Vec<&[Sample]> = datasets.iter().map(|d| d.samples.as_slice()).collect();
    tos_sample_pools(&pools, oriented, n0, seed)
}

/// [`tos_sample`] over borrowed sample pools (e.g. training splits).
pub fn tos_sample_pools(pools: &[&[Sample]], oriented: usize, n0: usize, seed: u64) -> Result<Vec<SampleCollection>> {
    let sizes: Vec<usize> = pools.iter().map(|p| p.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lists = tos_indices(&sizes, oriented, n0, &mut rng)?;
    let total = lists[oriented].len();
    Ok((0..total)
        .map(|j| {
            let picks: Vec<&Sample> = lists.iter().zip(pools).map(|(l, p)| &p[l[j]]).collect();
            let mut c = pad_collection(
                picks.iter().map(|s| s.tokens.clone()).collect(),
                picks.iter().map(|s| s.label).collect(),
            );
            c.sources = lists.iter().map(|l| l[j]).collect();
            c
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn dataset(name: &str, n: usize) -> TaskDataset {
        let vocab = Vocab::from_tokens((0..10).map(|i| format!("w{i}")));
        let samples = (0..n)
            .map(|i| Sample {
                tokens: vec![2 + i % 8, 3],
                label: i % 2,
            })
            .collect();
        TaskDataset::new(name, samples, 2, vocab).unwrap()
    }

    #[test]
    fn vocab_ordering_is_stable() {
        let corpus = "b a c a b a d".split(' ');
        let v = Vocab::build(corpus.clone());
        assert_eq!(v.tokens(), &["<pad>", "<unk>", "a", "b", "c", "d"]);
        assert_eq!(Vocab::build(corpus), v);
        assert_eq!(v.id("zzz"), UNK);
    }

    #[test]
    fn load_parses_lines() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, "1\thello world").unwrap();
        writeln!(f, "0\tworld").unwrap();
        let schema = DatasetSchema {
            name: "t".into(),
            class_count: 2,
            vocab: None,
        };
        let ds = load_dataset(f.path(), &schema).unwrap();
        assert_eq!(ds.samples[0].label, 1);
        assert_eq!(
            ds.samples[0].tokens,
            vec![ds.vocab.id("hello"), ds.vocab.id("world")]
        );
        assert_eq!(ds.vocab.id("world"), 2);

        let fixed = DatasetSchema {
            vocab: Some(Vocab::from_tokens(["hello"])),
            ..schema
        };
        let ds = load_dataset(f.path(), &fixed).unwrap();
        assert_eq!(ds.samples[1].tokens, vec![UNK]);
    }

    #[test]
    fn load_errors() {
        let schema = DatasetSchema {
            name: "t".into(),
            class_count: 2,
            vocab: None,
        };
        let empty = tempfile::NamedTempFile::new().unwrap();
        let err = load_dataset(empty.path(), &schema).unwrap_err();
        assert_eq!(err.to_string(), "empty dataset");

        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, "0\tok").unwrap();
        writeln!(f, "no tab here").unwrap();
        let err = load_dataset(f.path(), &schema).unwrap_err();
        assert!(matches!(err, DataError::Parse { line: 2, .. }), "{err}");

        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, "5\ttoo big").unwrap();
        let err = load_dataset(f.path(), &schema).unwrap_err();
        assert!(matches!(err, DataError::Parse { line: 1, .. }));

        let missing = load_dataset(Path::new("/nonexistent/data.tsv"), &schema);
        assert!(matches!(missing, Err(DataError::Io { .. })));
    }

    #[test]
    fn write_then_load_round_trips() {
        let ds = dataset("rt", 7);
        let f = tempfile::NamedTempFile::new().unwrap();
        ds.write(f.path()).unwrap();
        let back = load_dataset(
            f.path(),
            &DatasetSchema {
                name: "rt".into(),
                class_count: 2,
                vocab: Some(ds.vocab.clone()),
            },
        )
        .unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn padding() {
        let same = pad_collection(vec![vec![2, 3], vec![4, 5]], vec![0, 1]);
        assert_eq!(same.inputs, vec![vec![2, 3], vec![4, 5]]);
        let c = pad_collection(vec![vec![2, 3], vec![4, 5, 6, 7, 8]], vec![0, 1]);
        assert_eq!(c.inputs[0], vec![2, 3, PAD, PAD, PAD]);
        assert_eq!(c.lengths, vec![2, 5]);
        assert_eq!(c.unpadded(), vec![vec![2, 3], vec![4, 5, 6, 7, 8]]);
    }

    #[test]
    fn tos_trace_from_algorithm() {
        // K=2, N1=3, N2=5, oriented task 0, n0=2 -> N=6
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let lists = tos_indices(&[3, 5], 0, 2, &mut rng).unwrap();
        assert_eq!(lists[0].len(), 6);
        assert_eq!(lists[1].len(), 6);
        let mut s0 = lists[0].clone();
        s0.sort();
        assert_eq!(s0, vec![0, 0, 1, 1, 2, 2]);
        assert!(lists[1].iter().all(|&i| i < 5));
    }

    #[test]
    fn tos_boundary_is_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let lists = tos_indices(&[4, 4, 4], 1, 1, &mut rng).unwrap();
        for l in lists {
            let mut s = l.clone();
            s.sort();
            assert_eq!(s, vec![0, 1, 2, 3]);
        }
    }

    #[test]
    fn tos_errors() {
        let ds = vec![dataset("a", 3), dataset("b", 4)];
        assert!(matches!(tos_sample(&ds, 0, 0, 1), Err(DataError::InvalidUpsampling(0))));
        assert!(matches!(tos_sample(&ds, 2, 1, 1), Err(DataError::InvalidTask { .. })));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(tos_indices(&[3, 0], 0, 1, &mut rng), Err(DataError::EmptyDataset)));
    }

    #[test]
    fn tos_collections_carry_sources_and_labels() {
        let ds = vec![dataset("a", 3), dataset("b", 10)];
        let cs = tos_sample(&ds, 0, 2, 9).unwrap();
        assert_eq!(cs.len(), 6);
        for c in &cs {
            assert_eq!(c.tasks(), 2);
            for k in 0..2 {
                let s = &ds[k].samples[c.sources[k]];
                assert_eq!(c.labels[k], s.label);
                assert_eq!(c.unpadded()[k], s.tokens);
            }
        }
        assert_eq!(cs, tos_sample(&ds, 0, 2, 9).unwrap());
    }

    #[test]
    fn split_is_disjoint_and_complete() {
        let ds = dataset("s", 50);
        let sp = ds.split(0.8, 0.1, 3);
        assert_eq!((sp.train.len(), sp.valid.len(), sp.test.len()), (40, 5, 5));
        let mut all: Vec<usize> = sp.train.iter().chain(&sp.valid).chain(&sp.test).copied().collect();
        all.sort();
        assert_eq!(all, (0..50).collect::<Vec<_>>());
    }

    #[test]
    fn unify_maps_tokens_consistently() {
        let a = TaskDataset::new("a", vec![Sample { tokens: vec![2, 3], label: 0 }], 2, Vocab::from_tokens(["x", "y"])).unwrap();
        let b = TaskDataset::new("b", vec![Sample { tokens: vec![2], label: 1 }], 2, Vocab::from_tokens(["y"])).unwrap();
        let u = unify_vocab(&[a, b]);
        assert_eq!(u[0].vocab, u[1].vocab);
        assert_eq!(u[0].samples[0].tokens[1], u[1].samples[0].tokens[0]);
    }
}
