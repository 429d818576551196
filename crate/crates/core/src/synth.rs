//! Synthetic correlated text classification tasks.
//!
//! All tasks draw words from a shared latent cluster model: there are
//! [`CLUSTERS`] clusters of [`WORDS_PER_CLUSTER`] core words each, plus
//! per-domain noise words. A task's label is the index of the most frequent
//! cluster among the task's label clusters, so labels are an exact function
//! of latent cluster counts. Tasks that share label clusters are correlated;
//! tasks with disjoint label clusters are not.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{DataError, Result, Sample, TaskDataset, Vocab};

pub const CLUSTERS: usize = 8;
pub const WORDS_PER_CLUSTER: usize = 8;
pub const NOISE_WORDS: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scenario {
    /// Same objective and domain; lengths and class counts differ.
    MultiCardinality,
    /// Same objective, overlapping vocabularies with domain noise words.
    MultiDomain,
    /// Unrelated label functions.
    MultiObjective,
}

impl Scenario {
    pub const ALL: [Scenario; 3] = [Self::MultiCardinality, Self::MultiDomain, Self::MultiObjective];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::MultiCardinality => "multi-cardinality",
            Self::MultiDomain => "multi-domain",
            Self::MultiObjective => "multi-objective",
        }
    }

    /// Task generators of the preset.
    pub fn generators(self) -> Vec<TaskGenerator> {
        match self {
            Self::MultiCardinality => vec![
                TaskGenerator::new("fine", vec![0, 1, 2, 3, 4], (5, 9), "movie"),
                TaskGenerator::new("binary", vec![0, 1], (5, 9), "movie"),
                TaskGenerator::new("long", vec![0, 1], (14, 22), "movie"),
            ],
            Self::MultiDomain => vec![
                TaskGenerator::new("books", vec![0, 1], (8, 14), "books"),
                TaskGenerator::new("dvds", vec![0, 1], (8, 14), "dvds"),
                TaskGenerator::new("kitchen", vec![0, 1], (8, 14), "kitchen"),
            ],
            Self::MultiObjective => vec![
                TaskGenerator::new("sentiment", vec![0, 1], (8, 14), "reviews"),
                TaskGenerator::new("topic", vec![2, 3, 4], (14, 22), "news"),
                TaskGenerator::new("question", vec![5, 6], (4, 7), "questions"),
            ],
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Scenario {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| DataError::UnknownScenario(s.to_string()))
    }
}

/// Recipe for one synthetic task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskGenerator {
    pub name: String,
    /// The label is the position in this list of the most frequent cluster.
    pub label_clusters: Vec<usize>,
    /// Inclusive range of sequence lengths.
    pub length: (usize, usize),
    pub domain: String,
    /// Probability that a position holds a domain noise word.
    pub noise_rate: f64,
    /// Probability that a core word comes from the target label's cluster
    /// rather than a uniformly chosen cluster.
    pub signal: f64,
}

impl TaskGenerator {
    pub fn new(name: &str, label_clusters: Vec<usize>, length: (usize, usize), domain: &str) -> Self {
        Self {
            name: name.to_string(),
            label_clusters,
            length,
            domain: domain.to_string(),
            noise_rate: 0.3,
            signal: 0.12,
        }
    }

    pub fn class_count(&self) -> usize {
        self.label_clusters.len()
    }

    fn core_word(cluster: usize, i: usize) -> String {
        format!("c{cluster}w{i}")
    }

    fn noise_word(&self, i: usize) -> String {
        format!("{}_n{i}", self.domain)
    }

    /// Label of a word sequence, or `None` on a tie between label clusters.
    pub fn label_of(&self, clusters: &[Option<usize>]) -> Option<usize> {
        let counts: Vec<usize> = self
            .label_clusters
            .iter()
            .map(|&c| clusters.iter().filter(|&&x| x == Some(c)).count())
            .collect();
        let max = *counts.iter().max()?;
        let mut winners = counts.iter().enumerate().filter(|(_, &c)| c == max);
        let (first, _) = winners.next()?;
        winners.next().is_none().then_some(first)
    }

    fn draw<R: Rng + ?Sized>(&self, target: usize, rng: &mut R) -> (Vec<String>, Vec<Option<usize>>) {
        let len = rng.random_range(self.length.0..=self.length.1);
        let mut words = Vec::with_capacity(len);
        let mut clusters = Vec::with_capacity(len);
        for _ in 0..len {
            if rng.random::<f64>() < self.noise_rate {
                words.push(self.noise_word(rng.random_range(0..NOISE_WORDS)));
                clusters.push(None);
            } else {
                let cluster = if rng.random::<f64>() < self.signal {
                    self.label_clusters[target]
                } else {
                    rng.random_range(0..CLUSTERS)
                };
                words.push(Self::core_word(cluster, rng.random_range(0..WORDS_PER_CLUSTER)));
                clusters.push(Some(cluster));
            }
        }
        (words, clusters)
    }

    /// `n` samples with labels balanced across classes, in shuffled order.
    pub fn generate(&self, n: usize, seed: u64) -> Result<TaskDataset> {
        if n == 0 {
            return Err(DataError::EmptyDataset);
        }
        if self.class_count() < 2 || self.label_clusters.iter().any(|&c| c >= CLUSTERS) {
            return Err(DataError::Invalid(format!("{}: bad label clusters", self.name)));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut labels: Vec<usize> = (0..n).map(|i| i % self.class_count()).collect();
        labels.shuffle(&mut rng);
        let mut texts = Vec::with_capacity(n);
        for &target in &labels {
            let words = loop {
                let (words, clusters) = self.draw(target, &mut rng);
                if self.label_of(&clusters) == Some(target) {
                    break words;
                }
            };
            texts.push(words);
        }
        let vocab = Vocab::build(texts.iter().flatten().map(String::as_str));
        let samples = texts
            .iter()
            .zip(labels)
            .map(|(words, label)| Sample {
                tokens: words.iter().map(|w| vocab.id(w)).collect(),
                label,
            })
            .collect();
        TaskDataset::new(self.name.clone(), samples, self.class_count(), vocab)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthOptions {
    pub samples_per_task: usize,
}

impl Default for SynthOptions {
    fn default() -> Self {
        Self { samples_per_task: 500 }
    }
}

/// Generates the preset's tasks with default options.
pub fn synth_generate(scenario: Scenario, seed: u64) -> Result<Vec<TaskDataset>> {
    synth_generate_with(scenario, &SynthOptions::default(), seed)
}

pub fn synth_generate_with(scenario: Scenario, options: &SynthOptions, seed: u64) -> Result<Vec<TaskDataset>> {
    scenario
        .generators()
        .iter()
        .enumerate()
        .map(|(k, g)| g.generate(options.samples_per_task, task_seed(seed, k)))
        .collect()
}

/// Per-task seed derived from a master seed.
pub fn task_seed(seed: u64, task: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(task as u64 + 1)
}

/// Jaccard overlap of the word types actually used by two datasets.
pub fn vocabulary_overlap(a: &TaskDataset, b: &TaskDataset) -> f64 {
    let used = |ds: &TaskDataset| -> BTreeSet<String> {
        ds.samples
            .iter()
            .flat_map(|s| s.tokens.iter().map(|&t| ds.vocab.token(t).to_string()))
            .collect()
    };
    let (ua, ub) = (used(a), used(b));
    let inter = ua.intersection(&ub).count();
    let union = ua.union(&ub).count();
    inter as f64 / union as f64
}
