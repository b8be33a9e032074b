//! Mini-batch training with best-validation checkpointing.

use super::{Batch, Network, NnetError, Optimizer, OptimizerSpec, Params, Result, Seed, Shape};
use crate::rng::{self, Purpose};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::hash_map::DefaultHasher;
use std::collections::HashMap;
use std::hash::{Hash, Hasher};
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

const P_FLOOR: f64 = 1e-12;

/// Mean of `-ln p_true` over the batch, with `p` clamped to at least 1e-12.
pub fn cross_entropy(probs: &Batch, one_hot: &Batch) -> f64 {
    assert_eq!(
        probs.data().len(),
        one_hot.data().len(),
        "probability and label shapes differ"
    );
    let n = probs.samples().max(1);
    let total: f64 = probs
        .rows()
        .zip(one_hot.rows())
        .map(|(p, y)| {
            p.iter()
                .zip(y)
                .filter(|(_, &t)| t != 0.0)
                .map(|(&pi, &t)| -t * pi.max(P_FLOOR).ln())
                .sum::<f64>()
        })
        .sum();
    total / n as f64
}

pub fn cross_entropy_labels(probs: &Batch, labels: &[usize]) -> f64 {
    let n = labels.len().max(1);
    probs
        .rows()
        .zip(labels)
        .map(|(p, &l)| -p[l].max(P_FLOOR).ln())
        .sum::<f64>()
        / n as f64
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Random-access labelled samples in the network's input shape.
pub trait TrainingData: Sync {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn label(&self, index: usize) -> usize;

    /// Sample `index` as seen during `epoch`.
    fn input(&self, index: usize, epoch: usize) -> Result<Vec<f64>>;

    /// True when `input` depends on the epoch, e.g. under augmentation.
    fn varies_by_epoch(&self) -> bool {
        false
    }

    /// Identity of the sample set for [`FeatureCache`]; `None` disables caching.
    fn cache_key(&self) -> Option<String> {
        None
    }
}

#[derive(Debug, Clone)]
pub struct InMemoryData {
    pub shape: Shape,
    pub inputs: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub key: Option<String>,
}

impl InMemoryData {
    pub fn new(shape: Shape, inputs: Vec<Vec<f64>>, labels: Vec<usize>) -> Result<Self> {
        if inputs.len() != labels.len() {
            return Err(NnetError::Data(format!(
                "{} inputs but {} labels",
                inputs.len(),
                labels.len()
            )));
        }
        if let Some(bad) = inputs.iter().find(|v| v.len() != shape.len()) {
            return Err(NnetError::ShapeMismatch {
                expected: shape.to_string(),
                actual: format!("{} values", bad.len()),
            });
        }
        Ok(Self {
            shape,
            inputs,
            labels,
            key: None,
        })
    }

    pub fn with_cache_key(mut self, key: impl Into<String>) -> Self {
        self.key = Some(key.into());
        self
    }
}

impl TrainingData for InMemoryData {
    fn len(&self) -> usize {
        self.inputs.len()
    }

    fn label(&self, index: usize) -> usize {
        self.labels[index]
    }

    fn input(&self, index: usize, _epoch: usize) -> Result<Vec<f64>> {
        Ok(self.inputs[index].clone())
    }

    fn cache_key(&self) -> Option<String> {
        self.key.clone()
    }
}

/// Outputs of a network's frozen prefix, shared between training runs that
/// use the same backbone weights and the same samples.
#[derive(Debug, Default)]
pub struct FeatureCache {
    entries: HashMap<(u64, String), Arc<Vec<Vec<f64>>>>,
}

impl FeatureCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

fn prefix_fingerprint(net: &Network, prefix: usize) -> u64 {
    let mut h = DefaultHasher::new();
    net.input_shape().hash(&mut h);
    for layer in &net.layers()[..prefix] {
        format!("{:?}", layer.spec()).hash(&mut h);
        if let Some(p) = layer.params() {
            for v in p.weights.iter().chain(&p.bias) {
                v.to_bits().hash(&mut h);
            }
        }
    }
    h.finish()
}

/// Runs layers `0..prefix` on every sample of `data` at epoch 0.
fn extract_features(
    net: &Network,
    prefix: usize,
    data: &dyn TrainingData,
) -> Result<Vec<Vec<f64>>> {
    let input = net.input_shape();
    (0..data.len())
        .into_par_iter()
        .map(|i| {
            let x = Batch::new(input, data.input(i, 0)?)?;
            if prefix == 0 {
                return Ok(x.into_data());
            }
            let mut rng = rng::stream(net.seed(), Purpose::Dropout, u64::MAX);
            let tape = net.forward_range(0, prefix, &x, false, &mut rng)?;
            Ok(tape.output().data().to_vec())
        })
        .collect()
}

/// Source of layer-`start` inputs for one data set.
enum Features<'a> {
    Cached(Arc<Vec<Vec<f64>>>),
    Raw(&'a dyn TrainingData),
}

struct Prepared<'a> {
    start: usize,
    shape: Shape,
    features: Features<'a>,
    labels: Vec<usize>,
}

impl Prepared<'_> {
    fn batch(&self, net: &Network, indices: &[usize], epoch: usize) -> Result<Batch> {
        match &self.features {
            Features::Cached(f) => {
                let mut data = Vec::with_capacity(indices.len() * self.shape.len());
                for &i in indices {
                    data.extend_from_slice(&f[i]);
                }
                Batch::new(self.shape, data)
            }
            Features::Raw(d) => {
                let rows: Vec<Vec<f64>> = indices
                    .par_iter()
                    .map(|&i| {
                        let x = Batch::new(net.input_shape(), d.input(i, epoch)?)?;
                        if self.start == 0 {
                            return Ok(x.into_data());
                        }
                        let mut rng = rng::stream(net.seed(), Purpose::Dropout, u64::MAX);
                        Ok(net
                            .forward_range(0, self.start, &x, false, &mut rng)?
                            .output()
                            .data()
                            .to_vec())
                    })
                    .collect::<Result<_>>()?;
                Batch::new(self.shape, rows.concat())
            }
        }
    }
}

fn prepare<'a>(
    net: &Network,
    data: &'a dyn TrainingData,
    cache: Option<&mut FeatureCache>,
) -> Result<Prepared<'a>> {
    let start = net
        .frozen_prefix_len()
        .min(net.layers().len().saturating_sub(1));
    let shape = net.layers()[start].input_shape();
    let labels: Vec<usize> = (0..data.len()).map(|i| data.label(i)).collect();
    let features = if data.varies_by_epoch() || start == 0 {
        Features::Raw(data)
    } else {
        let key = data.cache_key();
        match (cache, key) {
            (Some(cache), Some(key)) => {
                let fp = prefix_fingerprint(net, start);
                let entry = match cache.entries.get(&(fp, key.clone())) {
                    Some(e) => e.clone(),
                    None => {
                        let f = Arc::new(extract_features(net, start, data)?);
                        cache.entries.insert((fp, key), f.clone());
                        f
                    }
                };
                Features::Cached(entry)
            }
            _ => Features::Cached(Arc::new(extract_features(net, start, data)?)),
        }
    };
    Ok(Prepared {
        start,
        shape,
        features,
        labels,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerSpec,
    pub seed: u64,
}

impl TrainConfig {
    pub const DEFAULT_BATCH_SIZE: usize = 32;

    pub fn new(epochs: usize, optimizer: OptimizerSpec, seed: u64) -> Self {
        Self {
            epochs,
            batch_size: Self::DEFAULT_BATCH_SIZE,
            optimizer,
            seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingHistory {
    pub records: Vec<EpochRecord>,
    /// 1-based epoch whose parameters were restored.
    pub best_epoch: usize,
}

impl TrainingHistory {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn best(&self) -> Option<&EpochRecord> {
        self.records.iter().find(|r| r.epoch == self.best_epoch)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let io = |e: csv::Error| NnetError::Io(std::io::Error::other(e));
        w.write_record(["epoch", "train_loss", "train_acc", "val_loss", "val_acc"])
            .map_err(io)?;
        for r in &self.records {
            w.write_record([
                r.epoch.to_string(),
                r.train_loss.to_string(),
                r.train_acc.to_string(),
                r.val_loss.to_string(),
                r.val_acc.to_string(),
            ])
            .map_err(io)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }
}

/// Evaluation-mode loss and accuracy.
fn evaluate_prepared(net: &Network, data: &Prepared<'_>, batch_size: usize) -> Result<(f64, f64)> {
    let n = data.labels.len();
    if n == 0 {
        return Ok((f64::NAN, f64::NAN));
    }
    let indices: Vec<usize> = (0..n).collect();
    let mut rng = rng::stream(net.seed(), Purpose::Dropout, u64::MAX);
    let (mut loss, mut correct) = (0.0, 0usize);
    for chunk in indices.chunks(batch_size) {
        let x = data.batch(net, chunk, 0)?;
        let tape = net.forward_from(data.start, &x, false, &mut rng)?;
        let labels: Vec<usize> = chunk.iter().map(|&i| data.labels[i]).collect();
        loss += cross_entropy_labels(tape.probabilities(), &labels) * chunk.len() as f64;
        correct += tape
            .probabilities()
            .rows()
            .zip(&labels)
            .filter(|(p, &l)| argmax(p) == l)
            .count();
    }
    Ok((loss / n as f64, correct as f64 / n as f64))
}

/// Evaluation-mode class probabilities for every sample of `data`.
pub fn predict_data(
    net: &Network,
    data: &dyn TrainingData,
    cache: Option<&mut FeatureCache>,
) -> Result<Vec<Vec<f64>>> {
    let prepared = prepare(net, data, cache)?;
    let mut rng = rng::stream(net.seed(), Purpose::Dropout, u64::MAX);
    let indices: Vec<usize> = (0..data.len()).collect();
    let mut out = Vec::with_capacity(data.len());
    for chunk in indices.chunks(TrainConfig::DEFAULT_BATCH_SIZE) {
        let x = prepared.batch(net, chunk, 0)?;
        let tape = net.forward_from(prepared.start, &x, false, &mut rng)?;
        out.extend(tape.probabilities().to_rows());
    }
    Ok(out)
}

fn snapshot(net: &Network) -> Vec<Option<Params>> {
    net.layers().iter().map(|l| l.params().cloned()).collect()
}

/// Trains the unfrozen layers of `net` with softmax cross-entropy.
///
/// Batches are reshuffled every epoch from `seed`. After each epoch the
/// validation loss is measured; the parameters with the lowest validation
/// loss (training loss when `val` is empty) are restored before returning.
pub fn train(
    net: &mut Network,
    train_data: &dyn TrainingData,
    val_data: &dyn TrainingData,
    config: &TrainConfig,
    mut cache: Option<&mut FeatureCache>,
) -> Result<TrainingHistory> {
    if config.epochs == 0 {
        return Err(NnetError::InvalidSpec("epochs must be >= 1".into()));
    }
    if config.batch_size == 0 {
        return Err(NnetError::InvalidSpec("batch size must be >= 1".into()));
    }
    config.optimizer.validate()?;
    if !net.ends_with_softmax() {
        return Err(NnetError::InvalidSpec(
            "training needs a network ending in softmax".into(),
        ));
    }
    if train_data.is_empty() {
        return Err(NnetError::Data("training set is empty".into()));
    }
    let classes = net.output_shape().len();
    let check_labels = |d: &dyn TrainingData| -> Result<()> {
        match (0..d.len()).map(|i| d.label(i)).find(|&l| l >= classes) {
            Some(l) => Err(NnetError::Data(format!(
                "label {l} out of range for {classes} classes"
            ))),
            None => Ok(()),
        }
    };
    check_labels(train_data)?;
    check_labels(val_data)?;

    let train_set = prepare(net, train_data, cache.as_deref_mut())?;
    let val_set = prepare(net, val_data, cache)?;
    let mut optimizer = Optimizer::new(config.optimizer);
    let mut history = TrainingHistory::default();
    let mut best: Option<(f64, Vec<Option<Params>>)> = None;
    let mut order: Vec<usize> = (0..train_data.len()).collect();

    for epoch in 0..config.epochs {
        order.sort_unstable();
        order.shuffle(&mut rng::stream(
            config.seed,
            Purpose::Shuffle,
            epoch as u64,
        ));
        let mut dropout_rng = rng::stream(config.seed, Purpose::Dropout, epoch as u64);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for chunk in order.chunks(config.batch_size) {
            let x = train_set.batch(net, chunk, epoch)?;
            let tape = net.forward_from(train_set.start, &x, true, &mut dropout_rng)?;
            let labels: Vec<usize> = chunk.iter().map(|&i| train_set.labels[i]).collect();
            let probs = tape.probabilities();
            loss_sum += cross_entropy_labels(probs, &labels) * chunk.len() as f64;
            correct += probs
                .rows()
                .zip(&labels)
                .filter(|(p, &l)| argmax(p) == l)
                .count();

            let inv_n = 1.0 / chunk.len() as f64;
            let mut seed = probs.clone();
            for (i, &l) in labels.iter().enumerate() {
                let row = seed.sample_mut(i);
                row[l] -= 1.0;
                row.iter_mut().for_each(|v| *v *= inv_n);
            }
            let grads = net.backward(&tape, Seed::Logits(seed), &[])?;
            optimizer.apply(net, &grads);
        }
        let n = train_data.len() as f64;
        let (train_loss, train_acc) = (loss_sum / n, correct as f64 / n);
        let (val_loss, val_acc) = evaluate_prepared(net, &val_set, config.batch_size)?;
        let record = EpochRecord {
            epoch: epoch + 1,
            train_loss,
            train_acc,
            val_loss,
            val_acc,
        };
        log::info!(
            "epoch {}: train loss {:.4} acc {:.3}, val loss {:.4} acc {:.3}",
            record.epoch,
            train_loss,
            train_acc,
            val_loss,
            val_acc
        );
        history.records.push(record);
        let score = if val_data.is_empty() {
            train_loss
        } else {
            val_loss
        };
        if best.as_ref().is_none_or(|(b, _)| score < *b) {
            best = Some((score, snapshot(net)));
            history.best_epoch = epoch + 1;
        }
    }
    if let Some((_, params)) = best {
        for (idx, p) in params.into_iter().enumerate() {
            if let Some(p) = p {
                if !net.layers()[idx].is_frozen() {
                    net.set_params(idx, p)?;
                }
            }
        }
    }
    Ok(history)
}
