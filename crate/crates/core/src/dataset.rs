//! Class-folder corpora, seeded stratified splits and batch iteration.
//!
//! A corpus root holds one subdirectory per class (`root/<class>/<image>`).
//! Several roots can be merged into one pool, which is how a dataset shipped as
//! separate `Training/` and `Testing/` trees is re-split.

use crate::imaging::{self, ImageTensor};
use crate::rng::{self, Purpose};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("dataset root {0} does not exist or is not a directory")]
    MissingRoot(PathBuf),
    #[error("no class folders under {0}")]
    NoClasses(PathBuf),
    #[error("class {0:?} has no images")]
    EmptyClass(String),
    #[error("class {class:?} has {count} images, at least {min} are needed to split")]
    ClassTooSmall {
        class: String,
        count: usize,
        min: usize,
    },
    #[error("batch size must be at least 1")]
    InvalidBatchSize,
    #[error("split manifest: {0}")]
    Manifest(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, DatasetError>;

const IMAGE_EXTENSIONS: [&str; 3] = ["jpg", "jpeg", "png"];
/// Smallest class that can be cut 80/10/10 with a non-empty validation list.
pub const MIN_CLASS_SIZE: usize = 10;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusItem {
    pub path: PathBuf,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledCorpus {
    classes: Vec<String>,
    items: Vec<CorpusItem>,
    counts: Vec<usize>,
    roots: Vec<PathBuf>,
}

impl LabeledCorpus {
    /// Builds a corpus from explicit items; items are sorted by path.
    pub fn new(classes: Vec<String>, mut items: Vec<CorpusItem>) -> Result<Self> {
        if classes.is_empty() {
            return Err(DatasetError::NoClasses(PathBuf::new()));
        }
        let mut counts = vec![0usize; classes.len()];
        for item in &items {
            let slot = counts.get_mut(item.label).ok_or_else(|| {
                DatasetError::Manifest(format!("label {} out of range", item.label))
            })?;
            *slot += 1;
        }
        if let Some(k) = counts.iter().position(|&c| c == 0) {
            return Err(DatasetError::EmptyClass(classes[k].clone()));
        }
        items.sort_by(|a, b| a.path.cmp(&b.path));
        Ok(Self {
            classes,
            items,
            counts,
            roots: Vec::new(),
        })
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn items(&self) -> &[CorpusItem] {
        &self.items
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn roots(&self) -> &[PathBuf] {
        &self.roots
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| IMAGE_EXTENSIONS.iter().any(|x| x.eq_ignore_ascii_case(e)))
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut entries = std::fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<Vec<_>>>()?;
    entries.sort();
    Ok(entries)
}

pub fn scan_corpus(root: &Path) -> Result<LabeledCorpus> {
    scan_corpora(&[root.to_path_buf()])
}

/// Scans one or more roots and merges classes by folder name. Class order is
/// the sorted folder names; items are sorted by full path.
pub fn scan_corpora(roots: &[PathBuf]) -> Result<LabeledCorpus> {
    let mut by_class: BTreeMap<String, Vec<PathBuf>> = BTreeMap::new();
    for root in roots {
        if !root.is_dir() {
            return Err(DatasetError::MissingRoot(root.clone()));
        }
        for class_dir in sorted_entries(root)?.into_iter().filter(|p| p.is_dir()) {
            let name = class_dir
                .file_name()
                .unwrap_or_default()
                .to_string_lossy()
                .into_owned();
            let files = by_class.entry(name).or_default();
            files.extend(
                sorted_entries(&class_dir)?
                    .into_iter()
                    .filter(|p| p.is_file() && is_image(p)),
            );
        }
    }
    if by_class.is_empty() {
        return Err(DatasetError::NoClasses(
            roots.first().cloned().unwrap_or_default(),
        ));
    }
    if let Some((name, _)) = by_class.iter().find(|(_, files)| files.is_empty()) {
        return Err(DatasetError::EmptyClass(name.clone()));
    }
    let classes: Vec<String> = by_class.keys().cloned().collect();
    let items = by_class
        .into_values()
        .enumerate()
        .flat_map(|(label, files)| {
            files
                .into_iter()
                .map(move |path| CorpusItem { path, label })
        })
        .collect();
    let mut corpus = LabeledCorpus::new(classes, items)?;
    corpus.roots = roots.to_vec();
    Ok(corpus)
}

/// How the training partition is equalized across classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Balance {
    /// Keep every training item.
    Off,
    /// Truncate each class's training list to the smallest class's count.
    #[default]
    Truncate,
    /// Repeat items cyclically up to the largest class's count.
    Oversample,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Partition {
    Train,
    Val,
    Test,
}

/// Per-class split sizes: `floor(0.8 n)` train, `floor(0.1 n)` validation,
/// remainder test.
pub fn split_sizes(n: usize) -> (usize, usize, usize) {
    let train = n * 8 / 10;
    let val = n / 10;
    (train, val, n - train - val)
}

/// Index lists into [`LabeledCorpus::items`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub seed: u64,
    pub fractions: [f64; 3],
    pub balance: Balance,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
    /// Training items dropped by truncation.
    pub unused: Vec<usize>,
}

impl SplitPlan {
    pub fn indices(&self, part: Partition) -> &[usize] {
        match part {
            Partition::Train => &self.train,
            Partition::Val => &self.val,
            Partition::Test => &self.test,
        }
    }

    pub fn items(&self, corpus: &LabeledCorpus, part: Partition) -> Vec<CorpusItem> {
        self.indices(part)
            .iter()
            .map(|&i| corpus.items[i].clone())
            .collect()
    }
}

/// Shuffles each class with its own seeded stream, then cuts 80/10/10.
pub fn make_split(corpus: &LabeledCorpus, seed: u64, balance: Balance) -> Result<SplitPlan> {
    let mut per_class: Vec<Vec<usize>> = vec![Vec::new(); corpus.num_classes()];
    for (i, item) in corpus.items.iter().enumerate() {
        per_class[item.label].push(i);
    }
    let mut cuts = Vec::with_capacity(per_class.len());
    for (label, mut idx) in per_class.into_iter().enumerate() {
        if idx.len() < MIN_CLASS_SIZE {
            return Err(DatasetError::ClassTooSmall {
                class: corpus.classes[label].clone(),
                count: idx.len(),
                min: MIN_CLASS_SIZE,
            });
        }
        // Corpus items are path-sorted, so this order does not depend on how
        // the corpus was assembled.
        idx.shuffle(&mut rng::stream(seed, Purpose::Split, label as u64));
        let (n_train, n_val, _) = split_sizes(idx.len());
        let test = idx.split_off(n_train + n_val);
        let val = idx.split_off(n_train);
        cuts.push((idx, val, test));
    }

    let min_train = cuts.iter().map(|c| c.0.len()).min().unwrap_or(0);
    let max_train = cuts.iter().map(|c| c.0.len()).max().unwrap_or(0);
    let mut plan = SplitPlan {
        seed,
        fractions: [0.8, 0.1, 0.1],
        balance,
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
        unused: Vec::new(),
    };
    for (mut train, val, test) in cuts {
        match balance {
            Balance::Off => {}
            Balance::Truncate => plan.unused.extend(train.split_off(min_train)),
            Balance::Oversample => {
                let base = train.clone();
                train.extend(base.iter().cycle().take(max_train - base.len()));
            }
        }
        plan.train.extend(train);
        plan.val.extend(val);
        plan.test.extend(test);
    }
    Ok(plan)
}

/// Replayable on-disk form of a split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub seed: u64,
    pub fractions: [f64; 3],
    pub balance: Balance,
    /// True when more than one root was pooled before splitting.
    pub merged_pool: bool,
    pub roots: Vec<PathBuf>,
    pub classes: Vec<String>,
    pub partitions: Vec<ClassPartition>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassPartition {
    pub class: String,
    pub train: Vec<PathBuf>,
    pub val: Vec<PathBuf>,
    pub test: Vec<PathBuf>,
    pub unused: Vec<PathBuf>,
}

impl SplitManifest {
    pub fn new(corpus: &LabeledCorpus, plan: &SplitPlan) -> Self {
        let mut partitions: Vec<ClassPartition> = corpus
            .classes
            .iter()
            .map(|c| ClassPartition {
                class: c.clone(),
                train: Vec::new(),
                val: Vec::new(),
                test: Vec::new(),
                unused: Vec::new(),
            })
            .collect();
        let lists = [
            (&plan.train, 0usize),
            (&plan.val, 1),
            (&plan.test, 2),
            (&plan.unused, 3),
        ];
        for (indices, which) in lists {
            for &i in indices {
                let item = &corpus.items[i];
                let p = &mut partitions[item.label];
                let list = match which {
                    0 => &mut p.train,
                    1 => &mut p.val,
                    2 => &mut p.test,
                    _ => &mut p.unused,
                };
                list.push(item.path.clone());
            }
        }
        Self {
            seed: plan.seed,
            fractions: plan.fractions,
            balance: plan.balance,
            merged_pool: corpus.roots.len() > 1,
            roots: corpus.roots.clone(),
            classes: corpus.classes.clone(),
            partitions,
        }
    }

    pub fn items(&self, part: Partition) -> Vec<CorpusItem> {
        self.partitions
            .iter()
            .enumerate()
            .flat_map(|(label, p)| {
                let list = match part {
                    Partition::Train => &p.train,
                    Partition::Val => &p.val,
                    Partition::Test => &p.test,
                };
                list.iter().map(move |path| CorpusItem {
                    path: path.clone(),
                    label,
                })
            })
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| DatasetError::Manifest(e.to_string()))?;
        std::fs::write(path, json + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text)
            .map_err(|e| DatasetError::Manifest(format!("{}: {e}", path.display())))
    }
}

/// One batch of decoded images with labels.
#[derive(Debug, Clone)]
pub struct Batch {
    pub images: Vec<ImageTensor>,
    pub labels: Vec<usize>,
    pub one_hot: Vec<Vec<f64>>,
    pub paths: Vec<PathBuf>,
}

pub type Loader = fn(&Path) -> imaging::Result<ImageTensor>;

/// Default loader: decode then run the full preprocessing chain.
pub fn load_preprocessed(path: &Path) -> imaging::Result<ImageTensor> {
    imaging::preprocess(&imaging::load_image(path)?)
}

/// Iterator over batches of a partition. Visit order is fixed before any
/// decoding happens; images inside a batch are decoded in parallel and
/// unreadable files are skipped and counted.
pub struct BatchIter {
    items: Vec<CorpusItem>,
    order: Vec<usize>,
    batch_size: usize,
    num_classes: usize,
    cursor: usize,
    loader: Loader,
    skipped: usize,
}

pub fn iterate_batches(
    items: &[CorpusItem],
    num_classes: usize,
    batch_size: usize,
    shuffle_seed: Option<u64>,
    epoch: u64,
) -> Result<BatchIter> {
    if batch_size == 0 {
        return Err(DatasetError::InvalidBatchSize);
    }
    let mut items = items.to_vec();
    items.sort_by(|a, b| a.path.cmp(&b.path));
    let mut order: Vec<usize> = (0..items.len()).collect();
    if let Some(seed) = shuffle_seed {
        order.shuffle(&mut rng::stream(seed, Purpose::Shuffle, epoch));
    }
    Ok(BatchIter {
        items,
        order,
        batch_size,
        num_classes,
        cursor: 0,
        loader: load_preprocessed,
        skipped: 0,
    })
}

impl BatchIter {
    pub fn with_loader(mut self, loader: Loader) -> Self {
        self.loader = loader;
        self
    }

    /// Files that failed to load so far.
    pub fn skipped(&self) -> usize {
        self.skipped
    }
}

impl Iterator for BatchIter {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        while self.cursor < self.order.len() {
            let end = (self.cursor + self.batch_size).min(self.order.len());
            let chunk: Vec<&CorpusItem> = self.order[self.cursor..end]
                .iter()
                .map(|&i| &self.items[i])
                .collect();
            self.cursor = end;
            let loader = self.loader;
            let loaded: Vec<_> = chunk
                .par_iter()
                .map(|item| (item, loader(&item.path)))
                .collect();
            let mut batch = Batch {
                images: Vec::with_capacity(loaded.len()),
                labels: Vec::with_capacity(loaded.len()),
                one_hot: Vec::with_capacity(loaded.len()),
                paths: Vec::with_capacity(loaded.len()),
            };
            for (item, result) in loaded {
                match result {
                    Ok(img) => {
                        let mut row = vec![0.0; self.num_classes];
                        row[item.label] = 1.0;
                        batch.images.push(img);
                        batch.labels.push(item.label);
                        batch.one_hot.push(row);
                        batch.paths.push(item.path.clone());
                    }
                    Err(e) => {
                        self.skipped += 1;
                        log::warn!("skipping {}: {e}", item.path.display());
                    }
                }
            }
            if !batch.images.is_empty() {
                return Some(batch);
            }
        }
        None
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::BTreeSet;

    fn synthetic_corpus(counts: &[usize]) -> LabeledCorpus {
        let classes = (0..counts.len()).map(|k| format!("class{k}")).collect();
        let items = counts
            .iter()
            .enumerate()
            .flat_map(|(label, &n)| {
                (0..n).map(move |i| CorpusItem {
                    path: PathBuf::from(format!("c{label}/img{i:05}.jpg")),
                    label,
                })
            })
            .collect();
        LabeledCorpus::new(classes, items).unwrap()
    }

    #[test]
    fn floor_rule() {
        assert_eq!(split_sizes(926), (740, 92, 94));
        assert_eq!(split_sizes(837), (669, 83, 85));
        assert_eq!(split_sizes(500), (400, 50, 50));
        assert_eq!(split_sizes(10), (8, 1, 1));
    }

    #[test]
    fn tumor_class_counts_split() {
        let corpus = synthetic_corpus(&[926, 837, 901, 500]);
        let plan = make_split(&corpus, 42, Balance::Off).unwrap();
        let glioma_train = plan
            .train
            .iter()
            .filter(|&&i| corpus.items[i].label == 0)
            .count();
        let glioma_val = plan
            .val
            .iter()
            .filter(|&&i| corpus.items[i].label == 0)
            .count();
        let glioma_test = plan
            .test
            .iter()
            .filter(|&&i| corpus.items[i].label == 0)
            .count();
        assert_eq!((glioma_train, glioma_val, glioma_test), (740, 92, 94));

        let balanced = make_split(&corpus, 42, Balance::Truncate).unwrap();
        for label in 0..4 {
            let n = balanced
                .train
                .iter()
                .filter(|&&i| corpus.items[i].label == label)
                .count();
            assert_eq!(n, 400);
        }
        assert_eq!(balanced.unused.len(), 340 + 269 + 320);
    }

    #[test]
    fn oversample_equalizes_upwards() {
        let corpus = synthetic_corpus(&[20, 50]);
        let plan = make_split(&corpus, 1, Balance::Oversample).unwrap();
        for label in 0..2 {
            let n = plan
                .train
                .iter()
                .filter(|&&i| corpus.items[i].label == label)
                .count();
            assert_eq!(n, 40);
        }
    }

    #[test]
    fn same_seed_same_split() {
        let corpus = synthetic_corpus(&[30, 40, 25]);
        assert_eq!(
            make_split(&corpus, 9, Balance::Truncate).unwrap(),
            make_split(&corpus, 9, Balance::Truncate).unwrap()
        );
        assert_ne!(
            make_split(&corpus, 9, Balance::Off).unwrap().train,
            make_split(&corpus, 10, Balance::Off).unwrap().train
        );
    }

    #[test]
    fn small_class_is_rejected() {
        let corpus = synthetic_corpus(&[30, 9]);
        assert!(matches!(
            make_split(&corpus, 0, Balance::Off),
            Err(DatasetError::ClassTooSmall { count: 9, .. })
        ));
    }

    #[test]
    fn batch_sizes_and_one_hot() {
        let corpus = synthetic_corpus(&[10]);
        fn fake(_: &Path) -> imaging::Result<ImageTensor> {
            ImageTensor::filled([0.0; 3], 1, 1, imaging::RangeTag::Normalized)
        }
        let sizes: Vec<usize> = iterate_batches(corpus.items(), 3, 4, None, 0)
            .unwrap()
            .with_loader(fake)
            .map(|b| {
                assert!(b.one_hot.iter().all(|r| r.iter().sum::<f64>() == 1.0));
                b.images.len()
            })
            .collect();
        assert_eq!(sizes, vec![4, 4, 2]);
        assert!(matches!(
            iterate_batches(corpus.items(), 1, 0, None, 0),
            Err(DatasetError::InvalidBatchSize)
        ));
    }

    #[test]
    fn unshuffled_epoch_follows_path_order() {
        let corpus = synthetic_corpus(&[4, 3]);
        let mut reversed = corpus.items().to_vec();
        reversed.reverse();
        fn fake(_: &Path) -> imaging::Result<ImageTensor> {
            ImageTensor::filled([0.0; 3], 1, 1, imaging::RangeTag::Normalized)
        }
        let paths: Vec<PathBuf> = iterate_batches(&reversed, 2, 3, None, 0)
            .unwrap()
            .with_loader(fake)
            .flat_map(|b| b.paths)
            .collect();
        let expected: Vec<PathBuf> = corpus.items().iter().map(|i| i.path.clone()).collect();
        assert_eq!(paths, expected);
        let shuffled: Vec<PathBuf> = iterate_batches(&reversed, 2, 3, Some(5), 0)
            .unwrap()
            .with_loader(fake)
            .flat_map(|b| b.paths)
            .collect();
        assert_eq!(
            shuffled.iter().collect::<BTreeSet<_>>(),
            expected.iter().collect::<BTreeSet<_>>()
        );
    }

    proptest! {
        #[test]
        fn partitions_are_disjoint_and_exhaustive(
            counts in proptest::collection::vec(10usize..60, 1..5),
            seed in any::<u64>(),
            balance in prop_oneof![Just(Balance::Off), Just(Balance::Truncate)],
        ) {
            let corpus = synthetic_corpus(&counts);
            let plan = make_split(&corpus, seed, balance).unwrap();
            for label in 0..counts.len() {
                let of = |v: &[usize]| v.iter().copied().filter(|&i| corpus.items[i].label == label).collect::<Vec<_>>();
                let parts = [of(&plan.train), of(&plan.val), of(&plan.test), of(&plan.unused)];
                let total: usize = parts.iter().map(|p| p.len()).sum();
                let union: BTreeSet<usize> = parts.iter().flatten().copied().collect();
                prop_assert_eq!(total, counts[label]);
                prop_assert_eq!(union.len(), counts[label]);
            }
        }

        #[test]
        fn split_ignores_item_order(counts in proptest::collection::vec(10usize..30, 1..4), seed in any::<u64>()) {
            let corpus = synthetic_corpus(&counts);
            let mut items = corpus.items().to_vec();
            items.reverse();
            let reordered = LabeledCorpus::new(corpus.classes().to_vec(), items).unwrap();
            let a = SplitManifest::new(&corpus, &make_split(&corpus, seed, Balance::Truncate).unwrap());
            let b = SplitManifest::new(&reordered, &make_split(&reordered, seed, Balance::Truncate).unwrap());
            prop_assert_eq!(a, b);
        }
    }
}
