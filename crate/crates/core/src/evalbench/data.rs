use super::{AugmentationKind, EvalError, Result};
use crate::dataset::CorpusItem;
use crate::imaging::{
    self, apply_affine, normalize, sample_augmentation, ImageTensor, NormalizationConstants,
};
use crate::nnet::{self, TrainingData};
use crate::rng::{self, Purpose};
use rayon::prelude::*;
use std::collections::hash_map::DefaultHasher;
use std::collections::HashMap;
use std::hash::{Hash, Hasher};
use std::path::{Path, PathBuf};
use std::sync::Arc;

/// Decoded unit-range (resized and cropped) images keyed by path, shared
/// between the runs of a grid.
#[derive(Debug, Default)]
pub struct ImageStore {
    images: HashMap<PathBuf, Arc<ImageTensor>>,
}

impl ImageStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Decodes every path not yet present; the first unreadable file is an
    /// error naming it.
    pub fn load(&mut self, paths: &[&Path]) -> Result<()> {
        let mut missing: Vec<&Path> = paths
            .iter()
            .copied()
            .filter(|p| !self.images.contains_key(*p))
            .collect();
        missing.sort();
        missing.dedup();
        let loaded: Vec<(PathBuf, ImageTensor)> = missing
            .par_iter()
            .map(|p| {
                let img = imaging::load_image(p).and_then(|i| imaging::prepare_unit(&i));
                img.map(|i| (p.to_path_buf(), i))
                    .map_err(|e| EvalError::Data(format!("{}: {e}", p.display())))
            })
            .collect::<Result<_>>()?;
        for (p, img) in loaded {
            self.images.insert(p, Arc::new(img));
        }
        Ok(())
    }

    pub fn get(&self, path: &Path) -> Option<Arc<ImageTensor>> {
        self.images.get(path).cloned()
    }
}

/// A partition served from an [`ImageStore`], optionally augmented per
/// epoch, and normalized on the way out.
pub struct FileData {
    images: Vec<Arc<ImageTensor>>,
    labels: Vec<usize>,
    augmentation: Option<imaging::AugmentationSpec>,
    norm: NormalizationConstants,
    key: String,
}

impl FileData {
    pub fn new(
        store: &mut ImageStore,
        items: &[CorpusItem],
        augmentation: AugmentationKind,
        seed: u64,
    ) -> Result<Self> {
        let paths: Vec<&Path> = items.iter().map(|i| i.path.as_path()).collect();
        store.load(&paths)?;
        let images = items
            .iter()
            .map(|i| store.get(&i.path).expect("loaded above"))
            .collect();
        let mut h = DefaultHasher::new();
        for item in items {
            item.path.hash(&mut h);
            item.label.hash(&mut h);
        }
        Ok(Self {
            images,
            labels: items.iter().map(|i| i.label).collect(),
            augmentation: augmentation.spec(seed),
            norm: NormalizationConstants::IMAGENET,
            key: format!("{:016x}", h.finish()),
        })
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Unit-range image `index` as seen during `epoch`.
    pub fn unit_image(&self, index: usize, epoch: usize) -> ImageTensor {
        let img = &self.images[index];
        match &self.augmentation {
            None => (**img).clone(),
            Some(spec) => {
                let mut r = rng::stream(
                    spec.seed,
                    Purpose::Augment,
                    rng::pair_index(epoch as u64, index as u64),
                );
                apply_affine(
                    img,
                    &sample_augmentation(spec, &mut r),
                    spec.fill_mode,
                    spec.cval,
                )
            }
        }
    }
}

impl TrainingData for FileData {
    fn len(&self) -> usize {
        self.images.len()
    }

    fn label(&self, index: usize) -> usize {
        self.labels[index]
    }

    fn input(&self, index: usize, epoch: usize) -> nnet::Result<Vec<f64>> {
        let img = normalize(&self.unit_image(index, epoch), &self.norm)
            .map_err(|e| nnet::NnetError::Data(e.to_string()))?;
        Ok(img.to_f64())
    }

    fn varies_by_epoch(&self) -> bool {
        self.augmentation.is_some()
    }

    fn cache_key(&self) -> Option<String> {
        Some(self.key.clone())
    }
}
