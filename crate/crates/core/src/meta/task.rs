use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::planes::ImagePlane;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// One object's few-shot problem: support views condition, query views
/// supervise.
#[derive(Debug, Clone, PartialEq)]
pub struct Task {
    pub object_id: String,
    pub support: Vec<ImagePlane>,
    pub query: Vec<ImagePlane>,
    pub near: f64,
    pub far: f64,
    pub background: [f64; 3],
}

impl Task {
    /// Splits views by id: even ids support, odd ids query.
    pub fn from_views(
        object_id: impl Into<String>,
        mut views: Vec<ImagePlane>,
        near: f64,
        far: f64,
        background: [f64; 3],
    ) -> Result<Self> {
        let object_id = object_id.into();
        views.sort_by_key(|v| v.view_id);
        if views.windows(2).any(|w| w[0].view_id == w[1].view_id) {
            return Err(Error::contract(format!("{object_id}: duplicate view ids")));
        }
        let (support, query): (Vec<_>, Vec<_>) = views.into_iter().partition(|v| v.view_id % 2 == 0);
        if support.is_empty() || query.is_empty() {
            return Err(Error::contract(format!(
                "{object_id}: needs at least one support and one query view"
            )));
        }
        Ok(Task {
            object_id,
            support,
            query,
            near,
            far,
            background,
        })
    }

    /// The first `n` support views, which condition the decoder.
    pub fn conditioning_planes(&self, n: usize) -> Result<&[ImagePlane]> {
        self.support.get(..n).ok_or_else(|| {
            Error::contract(format!(
                "{}: decoder needs {n} planes but only {} support views",
                self.object_id,
                self.support.len()
            ))
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskDataset {
    pub tasks: Vec<Task>,
    pub split: Split,
    pub seed: u64,
}

impl TaskDataset {
    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    /// The first `n` tasks.
    pub fn truncated(&self, n: usize) -> TaskDataset {
        TaskDataset {
            tasks: self.tasks.iter().take(n).cloned().collect(),
            split: self.split,
            seed: self.seed,
        }
    }
}

/// Without-replacement draws from per-epoch shuffles. Each epoch's order is a
/// pure function of `(seed, epoch)`, so the sampler state is two integers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpochSampler {
    pub seed: u64,
    pub epoch: u64,
    pub position: usize,
}

impl EpochSampler {
    pub fn new(seed: u64) -> Self {
        EpochSampler {
            seed,
            epoch: 0,
            position: 0,
        }
    }

    pub fn epoch_order(&self, n: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..n).collect();
        let mixed = self.seed ^ self.epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15);
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mixed));
        order
    }

    /// Next `size` task indices, rolling into a fresh epoch when the current
    /// one runs out.
    pub fn next_indices(&mut self, size: usize, n: usize) -> Result<Vec<usize>> {
        if n == 0 {
            return Err(Error::contract("cannot sample tasks from an empty dataset"));
        }
        if size == 0 {
            return Err(Error::contract("task batch size must be at least 1"));
        }
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.position >= n {
                self.epoch += 1;
                self.position = 0;
            }
            let order = self.epoch_order(n);
            let take = (size - out.len()).min(n - self.position);
            out.extend_from_slice(&order[self.position..self.position + take]);
            self.position += take;
        }
        Ok(out)
    }
}

pub fn sample_task_batch<'a>(
    dataset: &'a TaskDataset,
    size: usize,
    sampler: &mut EpochSampler,
) -> Result<Vec<&'a Task>> {
    Ok(sampler
        .next_indices(size, dataset.len())?
        .into_iter()
        .map(|i| &dataset.tasks[i])
        .collect())
}
