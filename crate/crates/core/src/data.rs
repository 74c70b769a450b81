//! Datasets, sharding and deterministic batch streams.

use std::collections::BTreeSet;
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::matrix::Matrix;
use crate::nn::{Batch, Inputs};
use crate::{seed, Error, Result};

#[derive(Debug, Clone, PartialEq)]
enum Features {
    Dense { dim: usize, values: Vec<f64> },
    /// Example `i` is `sequence[starts[i]..starts[i] + window]`.
    Tokens { window: usize, sequence: Arc<Vec<u32>>, starts: Vec<usize> },
}

/// An immutable, ordered set of labelled examples.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Features,
    labels: Vec<usize>,
    n_classes: usize,
    vocab: Option<Vec<char>>,
    provenance: String,
}

impl Dataset {
    /// Dense classification data, `values` row-major `[n x dim]`.
    pub fn from_dense(
        dim: usize,
        values: Vec<f64>,
        labels: Vec<usize>,
        n_classes: usize,
        provenance: impl Into<String>,
    ) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::InvalidDataset("no examples".into()));
        }
        if dim == 0 || values.len() != dim * labels.len() {
            return Err(Error::InvalidDataset(format!(
                "{} feature values for {} examples of width {dim}",
                values.len(),
                labels.len()
            )));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= n_classes) {
            return Err(Error::LabelOutOfRange { label: l, classes: n_classes });
        }
        Ok(Self {
            features: Features::Dense { dim, values },
            labels,
            n_classes,
            vocab: None,
            provenance: provenance.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn vocab(&self) -> Option<&[char]> {
        self.vocab.as_deref()
    }

    /// How the dataset was produced (generator parameters or source path).
    pub fn provenance(&self) -> &str {
        &self.provenance
    }

    pub fn is_language_model(&self) -> bool {
        matches!(self.features, Features::Tokens { .. })
    }

    /// Feature width for dense data, context window for token data.
    pub fn input_width(&self) -> usize {
        match &self.features {
            Features::Dense { dim, .. } => *dim,
            Features::Tokens { window, .. } => *window,
        }
    }

    pub fn dense_row(&self, i: usize) -> Option<&[f64]> {
        match &self.features {
            Features::Dense { dim, values } => Some(&values[i * dim..(i + 1) * dim]),
            Features::Tokens { .. } => None,
        }
    }

    pub fn token_window(&self, i: usize) -> Option<&[u32]> {
        match &self.features {
            Features::Tokens { window, sequence, starts } => {
                Some(&sequence[starts[i]..starts[i] + window])
            }
            Features::Dense { .. } => None,
        }
    }

    /// Builds a batch from the given example indices, in order.
    pub fn batch(&self, indices: &[usize]) -> Result<Batch> {
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        let inputs = match &self.features {
            Features::Dense { dim, values } => {
                let mut data = Vec::with_capacity(indices.len() * dim);
                for &i in indices {
                    data.extend_from_slice(&values[i * dim..(i + 1) * dim]);
                }
                Inputs::Dense(Matrix::from_vec(indices.len(), *dim, data)?)
            }
            Features::Tokens { window, sequence, starts } => {
                let mut ids = Vec::with_capacity(indices.len() * window);
                for &i in indices {
                    ids.extend_from_slice(&sequence[starts[i]..starts[i] + window]);
                }
                Inputs::Tokens { window: *window, ids }
            }
        };
        Batch::new(inputs, labels)
    }

    /// The whole dataset as one batch.
    pub fn full_batch(&self) -> Result<Batch> {
        self.batch(&(0..self.len()).collect::<Vec<_>>())
    }

    /// A new dataset holding the given examples in the given order.
    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        if indices.is_empty() {
            return Err(Error::InvalidDataset("empty subset".into()));
        }
        if let Some(&i) = indices.iter().find(|&&i| i >= self.len()) {
            return Err(Error::InvalidDataset(format!("index {i} out of {} examples", self.len())));
        }
        let features = match &self.features {
            Features::Dense { dim, values } => {
                let mut out = Vec::with_capacity(indices.len() * dim);
                for &i in indices {
                    out.extend_from_slice(&values[i * dim..(i + 1) * dim]);
                }
                Features::Dense { dim: *dim, values: out }
            }
            Features::Tokens { window, sequence, starts } => Features::Tokens {
                window: *window,
                sequence: Arc::clone(sequence),
                starts: indices.iter().map(|&i| starts[i]).collect(),
            },
        };
        Ok(Dataset {
            features,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            n_classes: self.n_classes,
            vocab: self.vocab.clone(),
            provenance: self.provenance.clone(),
        })
    }

    /// Seeded train/validation split. Returns `(train, validation)`.
    pub fn split_validation(&self, fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
        if !(fraction > 0.0 && fraction < 1.0) {
            return Err(Error::InvalidDataset(format!("validation fraction {fraction} not in (0, 1)")));
        }
        if self.len() < 2 {
            return Err(Error::InvalidDataset("need at least two examples to split".into()));
        }
        let n_val = ((self.len() as f64 * fraction).round() as usize).clamp(1, self.len() - 1);
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut seed::rng(seed::derive(seed, "validation-split", 0)));
        let (val, train) = order.split_at(n_val);
        let mut train = train.to_vec();
        let mut val = val.to_vec();
        // keep original relative order inside each split
        train.sort_unstable();
        val.sort_unstable();
        Ok((self.subset(&train)?, self.subset(&val)?))
    }
}

/// Parameters of the synthetic Gaussian-cluster classification task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationSpec {
    pub seed: u64,
    pub n_examples: usize,
    pub input_dim: usize,
    pub n_classes: usize,
    /// Within-class standard deviation divided by the mean centroid spacing.
    pub difficulty: f64,
    /// Fraction of labels replaced by a uniformly drawn class.
    pub label_noise: f64,
}

impl ClassificationSpec {
    pub fn new(seed: u64, n_examples: usize, input_dim: usize, n_classes: usize, difficulty: f64) -> Self {
        Self { seed, n_examples, input_dim, n_classes, difficulty, label_noise: 0.0 }
    }
}

/// Class centroids drawn from `N(0, I)`; each example is its class centroid
/// plus isotropic Gaussian noise. Class labels are assigned round-robin and
/// then shuffled, so class counts differ by at most one.
pub fn gen_classification(spec: &ClassificationSpec) -> Result<Dataset> {
    let &ClassificationSpec { seed, n_examples, input_dim, n_classes, difficulty, label_noise } = spec;
    if input_dim == 0 || n_classes == 0 {
        return Err(Error::InvalidDataset("input_dim and n_classes must be at least 1".into()));
    }
    if n_examples < n_classes {
        return Err(Error::InvalidDataset(format!(
            "{n_examples} examples cannot cover {n_classes} classes"
        )));
    }
    if difficulty < 0.0 || !difficulty.is_finite() {
        return Err(Error::InvalidDataset(format!("difficulty {difficulty} must be >= 0")));
    }
    if !(0.0..=1.0).contains(&label_noise) {
        return Err(Error::InvalidDataset(format!("label noise {label_noise} not in [0, 1]")));
    }
    let mut rng = seed::rng(seed::derive(seed, "classification", 0));
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let centroids: Vec<f64> = (0..n_classes * input_dim).map(|_| unit.sample(&mut rng)).collect();
    let spacing = mean_pairwise_distance(&centroids, input_dim, n_classes);
    let std = difficulty * spacing;

    let mut labels: Vec<usize> = (0..n_examples).map(|i| i % n_classes).collect();
    labels.shuffle(&mut rng);
    let mut values = Vec::with_capacity(n_examples * input_dim);
    for &y in &labels {
        let c = &centroids[y * input_dim..(y + 1) * input_dim];
        for &ck in c {
            let noise = if std > 0.0 { std * unit.sample(&mut rng) } else { 0.0 };
            values.push(ck + noise);
        }
    }
    if label_noise > 0.0 {
        let mut noise_rng = seed::rng(seed::derive(seed, "label-noise", 0));
        for y in labels.iter_mut() {
            if rand::Rng::random::<f64>(&mut noise_rng) < label_noise {
                *y = rand::Rng::random_range(&mut noise_rng, 0..n_classes);
            }
        }
    }
    let provenance = format!(
        "classification seed={seed} n_examples={n_examples} input_dim={input_dim} \
         n_classes={n_classes} difficulty={difficulty} label_noise={label_noise}"
    );
    Dataset::from_dense(input_dim, values, labels, n_classes, provenance)
}

fn mean_pairwise_distance(points: &[f64], dim: usize, n: usize) -> f64 {
    if n < 2 {
        return 1.0;
    }
    let mut total = 0.0;
    let mut pairs = 0usize;
    for a in 0..n {
        for b in a + 1..n {
            let pa = &points[a * dim..(a + 1) * dim];
            let pb = &points[b * dim..(b + 1) * dim];
            total += pa.iter().zip(pb).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
            pairs += 1;
        }
    }
    total / pairs as f64
}

/// Character-level next-token dataset over a UTF-8 text file.
pub fn ingest_text(path: impl AsRef<Path>, context_window: usize) -> Result<Dataset> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)?;
    text_dataset(&text, context_window, format!("text path={} window={context_window}", path.display()))
}

/// Same as [`ingest_text`] over an in-memory string.
pub fn text_dataset(text: &str, context_window: usize, provenance: impl Into<String>) -> Result<Dataset> {
    if context_window == 0 {
        return Err(Error::InvalidDataset("context window must be at least 1".into()));
    }
    let chars: Vec<char> = text.chars().collect();
    if chars.is_empty() {
        return Err(Error::InvalidDataset("empty corpus".into()));
    }
    if chars.len() < context_window + 1 {
        return Err(Error::InvalidDataset(format!(
            "corpus of {} characters is shorter than window {context_window} + 1",
            chars.len()
        )));
    }
    let vocab: Vec<char> = chars.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
    let id = |c: &char| vocab.binary_search(c).expect("char in vocab") as u32;
    let sequence: Vec<u32> = chars.iter().map(id).collect();
    let n = sequence.len() - context_window;
    let labels = (0..n).map(|i| sequence[i + context_window] as usize).collect();
    Ok(Dataset {
        features: Features::Tokens {
            window: context_window,
            sequence: Arc::new(sequence),
            starts: (0..n).collect(),
        },
        labels,
        n_classes: vocab.len(),
        vocab: Some(vocab),
        provenance: provenance.into(),
    })
}

/// Empirical label distribution.
pub fn unigram(dataset: &Dataset) -> Vec<f64> {
    let mut counts = vec![0usize; dataset.n_classes()];
    for &y in dataset.labels() {
        counts[y] += 1;
    }
    let n = dataset.len() as f64;
    counts.into_iter().map(|c| c as f64 / n).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShardMode {
    /// Shards partition the examples.
    Disjoint,
    /// Every shard holds every example.
    Shared,
}

impl std::str::FromStr for ShardMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "disjoint" => Ok(Self::Disjoint),
            "shared" => Ok(Self::Shared),
            other => Err(format!("unknown shard mode {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShardPlan {
    pub mode: ShardMode,
    /// Example indices per shard.
    pub shards: Vec<Vec<usize>>,
}

impl ShardPlan {
    pub fn n_shards(&self) -> usize {
        self.shards.len()
    }
}

/// Disjoint plans deal a seeded permutation round-robin, so sizes differ by
/// at most one. Shared plans give every shard all indices in order.
pub fn make_shards(n_examples: usize, mode: ShardMode, n_shards: usize, seed: u64) -> Result<ShardPlan> {
    if n_shards == 0 {
        return Err(Error::InvalidConfig("need at least one shard".into()));
    }
    if n_shards > n_examples {
        return Err(Error::InvalidConfig(format!(
            "{n_shards} shards for only {n_examples} examples"
        )));
    }
    let shards = match mode {
        ShardMode::Shared => vec![(0..n_examples).collect(); n_shards],
        ShardMode::Disjoint => {
            let mut perm: Vec<usize> = (0..n_examples).collect();
            perm.shuffle(&mut seed::rng(seed::derive(seed, "shards", 0)));
            let mut shards = vec![Vec::with_capacity(n_examples / n_shards + 1); n_shards];
            for (i, idx) in perm.into_iter().enumerate() {
                shards[i % n_shards].push(idx);
            }
            shards
        }
    };
    Ok(ShardPlan { mode, shards })
}

/// A subset of one dataset assigned to a worker or worker group.
#[derive(Debug, Clone)]
pub struct Shard {
    data: Arc<Dataset>,
    indices: Arc<Vec<usize>>,
}

impl Shard {
    pub fn new(data: Arc<Dataset>, indices: Vec<usize>) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::InvalidDataset("empty shard".into()));
        }
        if let Some(&i) = indices.iter().find(|&&i| i >= data.len()) {
            return Err(Error::InvalidDataset(format!("shard index {i} out of {} examples", data.len())));
        }
        Ok(Self { data, indices: Arc::new(indices) })
    }

    /// A shard covering the whole dataset.
    pub fn full(data: Arc<Dataset>) -> Self {
        let n = data.len();
        Self { data, indices: Arc::new((0..n).collect()) }
    }

    /// One shard per entry of the plan.
    pub fn from_plan(data: &Arc<Dataset>, plan: &ShardPlan) -> Result<Vec<Shard>> {
        plan.shards.iter().map(|s| Shard::new(Arc::clone(data), s.clone())).collect()
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn dataset(&self) -> &Arc<Dataset> {
        &self.data
    }

    /// Splits this shard into `n` disjoint sub-shards (round-robin over a
    /// seeded permutation).
    pub fn split(&self, n: usize, seed: u64) -> Result<Vec<Shard>> {
        let plan = make_shards(self.len(), ShardMode::Disjoint, n, seed)?;
        plan.shards
            .into_iter()
            .map(|local| Shard::new(Arc::clone(&self.data), local.iter().map(|&i| self.indices[i]).collect()))
            .collect()
    }
}

/// Infinite, seeded mini-batch iterator over a shard. Each epoch visits the
/// shard in a fresh shuffled order; a trailing partial batch is skipped.
#[derive(Debug, Clone)]
pub struct BatchStream {
    shard: Shard,
    batch_size: usize,
    rng: ChaCha8Rng,
    order: Vec<usize>,
    pos: usize,
    epoch: u64,
}

pub fn batch_stream(shard: Shard, batch_size: usize, seed: u64) -> Result<BatchStream> {
    if batch_size == 0 || batch_size > shard.len() {
        return Err(Error::InvalidConfig(format!(
            "batch size {batch_size} does not fit a shard of {} examples",
            shard.len()
        )));
    }
    let order = shard.indices().to_vec();
    let pos = order.len();
    Ok(BatchStream {
        shard,
        batch_size,
        rng: seed::rng(seed::derive(seed, "batches", 0)),
        order,
        pos,
        epoch: 0,
    })
}

impl BatchStream {
    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    /// Completed reshuffles so far.
    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    /// Indices of the next batch.
    pub fn next_indices(&mut self) -> Vec<usize> {
        if self.pos + self.batch_size > self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
            self.epoch += 1;
        }
        let idx = self.order[self.pos..self.pos + self.batch_size].to_vec();
        self.pos += self.batch_size;
        idx
    }

    pub fn next_batch(&mut self) -> Batch {
        let idx = self.next_indices();
        self.shard.dataset().batch(&idx).expect("shard indices are valid")
    }
}

impl Iterator for BatchStream {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        Some(self.next_batch())
    }
}

/// Concatenates the step-`t` batches of several streams into one batch.
#[derive(Debug, Clone)]
pub struct Interleave {
    streams: Vec<BatchStream>,
}

pub fn interleave(streams: Vec<BatchStream>) -> Result<Interleave> {
    if streams.is_empty() {
        return Err(Error::InvalidConfig("nothing to interleave".into()));
    }
    Ok(Interleave { streams })
}

impl Interleave {
    pub fn next_indices(&mut self) -> Vec<usize> {
        self.streams.iter_mut().flat_map(|s| s.next_indices()).collect()
    }
}

impl Iterator for Interleave {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        let parts: Vec<Batch> = self.streams.iter_mut().map(BatchStream::next_batch).collect();
        Some(Batch::concat(&parts).expect("streams over one dataset"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(n: usize) -> Arc<Dataset> {
        let values = (0..n).map(|i| i as f64).collect();
        let labels = (0..n).map(|i| i % 2).collect();
        Arc::new(Dataset::from_dense(1, values, labels, 2, "toy").unwrap())
    }

    #[test]
    fn zero_difficulty_is_separable_by_nearest_centroid() {
        let d = gen_classification(&ClassificationSpec::new(3, 200, 5, 4, 0.0)).unwrap();
        // with no noise every example sits on its centroid: same label <=> same point
        for i in 0..d.len() {
            for j in 0..d.len() {
                let same_point = d.dense_row(i) == d.dense_row(j);
                assert_eq!(same_point, d.labels()[i] == d.labels()[j]);
            }
        }
    }

    #[test]
    fn generator_is_deterministic_and_balanced() {
        let spec = ClassificationSpec::new(5, 1000, 8, 10, 0.3);
        let a = gen_classification(&spec).unwrap();
        assert_eq!(a, gen_classification(&spec).unwrap());
        let mut counts = [0usize; 10];
        a.labels().iter().for_each(|&y| counts[y] += 1);
        assert!(counts.iter().all(|&c| (90..=110).contains(&c)), "{counts:?}");
        assert!(gen_classification(&ClassificationSpec::new(5, 5, 8, 10, 0.3)).is_err());
        assert!(gen_classification(&ClassificationSpec::new(5, 50, 0, 10, 0.3)).is_err());
    }

    #[test]
    fn text_sliding_windows() {
        let d = text_dataset("abcd", 2, "t").unwrap();
        assert_eq!(d.vocab().unwrap(), &['a', 'b', 'c', 'd']);
        assert_eq!(d.len(), 2);
        assert_eq!(d.token_window(0).unwrap(), &[0, 1]);
        assert_eq!(d.labels()[0], 2);
        assert_eq!(d.token_window(1).unwrap(), &[1, 2]);
        assert_eq!(d.labels()[1], 3);
        assert!(text_dataset("", 2, "t").is_err());
        assert!(text_dataset("ab", 2, "t").is_err());
        let d = text_dataset("aaaa", 1, "t").unwrap();
        assert!(d.labels().iter().all(|&l| l == 0));
    }

    #[test]
    fn ingest_missing_file_is_io_error() {
        assert!(matches!(ingest_text("/nonexistent/corpus.txt", 2), Err(Error::Io(_))));
    }

    #[test]
    fn disjoint_and_shared_shards() {
        let p = make_shards(10, ShardMode::Disjoint, 2, 1).unwrap();
        assert_eq!(p.shards[0].len(), 5);
        assert_eq!(p.shards[1].len(), 5);
        let mut all: Vec<usize> = p.shards.concat();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert_eq!(p, make_shards(10, ShardMode::Disjoint, 2, 1).unwrap());
        let s = make_shards(10, ShardMode::Shared, 2, 1).unwrap();
        assert!(s.shards.iter().all(|sh| *sh == (0..10).collect::<Vec<_>>()));
        assert!(make_shards(3, ShardMode::Disjoint, 4, 1).is_err());
    }

    #[test]
    fn streams_are_reproducible() {
        let shard = Shard::full(toy(10));
        let a: Vec<Batch> = batch_stream(shard.clone(), 3, 9).unwrap().take(12).collect();
        let b: Vec<Batch> = batch_stream(shard.clone(), 3, 9).unwrap().take(12).collect();
        assert_eq!(a, b);
        assert!(batch_stream(shard, 11, 9).is_err());
    }

    #[test]
    fn full_size_batch_is_whole_shard() {
        let shard = Shard::full(toy(6));
        let mut s = batch_stream(shard, 6, 2).unwrap();
        let mut idx = s.next_indices();
        idx.sort_unstable();
        assert_eq!(idx, (0..6).collect::<Vec<_>>());
    }

    #[test]
    fn interleave_unions_step_batches() {
        let data = toy(8);
        let shards = Shard::full(Arc::clone(&data)).split(2, 4).unwrap();
        let mk = |i: usize| batch_stream(shards[i].clone(), 2, 10 + i as u64).unwrap();
        let (mut a, mut b) = (mk(0), mk(1));
        let mut joint = interleave(vec![mk(0), mk(1)]).unwrap();
        for _ in 0..5 {
            let mut expect = a.next_indices();
            expect.extend(b.next_indices());
            assert_eq!(joint.next_indices(), expect);
        }
        let mut joint = interleave(vec![mk(0), mk(1)]).unwrap();
        assert_eq!(joint.next().unwrap().len(), 4);
    }

    #[test]
    fn unigram_counts() {
        let d = Dataset::from_dense(1, vec![0.0; 3], vec![0, 0, 1], 2, "t").unwrap();
        let u = unigram(&d);
        assert!((u[0] - 2.0 / 3.0).abs() < 1e-15 && (u[1] - 1.0 / 3.0).abs() < 1e-15);
        let d = Dataset::from_dense(1, vec![0.0; 4], vec![0; 4], 1, "t").unwrap();
        assert_eq!(unigram(&d), vec![1.0]);
        let labels: Vec<usize> = (0..400).map(|i| i % 4).collect();
        let d = Dataset::from_dense(1, vec![0.0; 400], labels, 4, "t").unwrap();
        assert_eq!(unigram(&d), vec![0.25; 4]);
    }

    #[test]
    fn validation_split_is_seeded_partition() {
        let d = toy(100);
        let (tr, va) = d.split_validation(0.1, 3).unwrap();
        assert_eq!((tr.len(), va.len()), (90, 10));
        let (tr2, va2) = d.split_validation(0.1, 3).unwrap();
        assert_eq!((tr, va), (tr2, va2));
    }
}
