//! Synthetic multi-task data: scene generation, on-disk format and batching.

pub mod format;
pub mod synth;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{DemtError, Result};
use crate::loss::Targets;
use crate::tensor::Tensor;

pub use format::{load_dataset, write_dataset, Dataset, Manifest};
pub use synth::{generate_scene, sample_seed, Sample, Scene};

/// Generates `count` samples deterministically from `seed`.
pub fn generate_dataset(
    seed: u64,
    count: usize,
    h: usize,
    w: usize,
    classes: usize,
    split: &str,
) -> Result<Dataset> {
    if count == 0 {
        return Err(DemtError::InvalidArgument(
            "dataset must contain at least one sample".into(),
        ));
    }
    let samples = (0..count)
        .map(|i| generate_scene(sample_seed(seed, i), h, w, classes))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        manifest: Manifest {
            count,
            height: h,
            width: w,
            classes,
            split: split.to_string(),
            seed,
        },
        samples,
    })
}

/// Stacked samples: image `[B,H,W,3]` and flattened targets.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub image: Tensor,
    pub semseg: Vec<u16>,
    pub depth: Vec<f64>,
    pub normal: Vec<f64>,
}

impl Batch {
    pub fn from_samples(samples: &[&Sample], indices: Vec<usize>) -> Result<Self> {
        let Some(first) = samples.first() else {
            return Err(DemtError::InvalidArgument("empty batch".into()));
        };
        let (h, w) = (first.height(), first.width());
        let mut image = Vec::with_capacity(samples.len() * h * w * 3);
        let mut semseg = Vec::new();
        let mut depth = Vec::new();
        let mut normal = Vec::new();
        for s in samples {
            if (s.height(), s.width()) != (h, w) {
                return Err(DemtError::shape("batch", "samples differ in size"));
            }
            image.extend_from_slice(s.image.data());
            semseg.extend_from_slice(&s.semseg);
            depth.extend_from_slice(s.depth.data());
            normal.extend_from_slice(s.normal.data());
        }
        Ok(Self {
            indices,
            image: Tensor::new(&[samples.len(), h, w, 3], image)?,
            semseg,
            depth,
            normal,
        })
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn targets(&self) -> Targets<'_> {
        Targets {
            semseg: &self.semseg,
            depth: &self.depth,
            normal: &self.normal,
        }
    }
}

/// Sample order for one epoch: a permutation fixed by `(shuffle_seed, epoch)`.
pub fn epoch_order(len: usize, shuffle_seed: u64, epoch: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(shuffle_seed);
    rng.set_stream(epoch);
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut rng);
    order
}

/// Batches of one epoch in shuffled order; the last batch may be short.
pub struct BatchIter<'a> {
    dataset: &'a Dataset,
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
}

impl Iterator for BatchIter<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let idx = self.order[self.pos..end].to_vec();
        self.pos = end;
        let samples: Vec<&Sample> = idx.iter().map(|&i| &self.dataset.samples[i]).collect();
        Some(Batch::from_samples(&samples, idx).expect("dataset samples share one size"))
    }
}

pub fn batch_iter(
    dataset: &Dataset,
    batch_size: usize,
    shuffle_seed: u64,
    epoch: u64,
) -> Result<BatchIter<'_>> {
    if batch_size == 0 {
        return Err(DemtError::InvalidArgument(
            "batch size must be at least 1".into(),
        ));
    }
    Ok(BatchIter {
        dataset,
        order: epoch_order(dataset.len(), shuffle_seed, epoch),
        batch_size,
        pos: 0,
    })
}
