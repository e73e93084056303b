//! Shared scenes and configurations for the acceptance criteria.

use hyperplanes::io::{synthetic_datasets, SyntheticSpec};
use hyperplanes::meta::{Task, TaskDataset};
use hyperplanes::par::ExecPolicy;
use hyperplanes::Result;

/// One object seen from 8 cameras at 4×4: four support planes, four queries.
pub fn micro_task() -> Result<Task> {
    let spec = SyntheticSpec {
        objects: 1,
        test_objects: 0,
        views: 8,
        resolution: 4,
        oracle_samples: 64,
        ..SyntheticSpec::default()
    };
    let (train, _) = synthetic_datasets(&spec, ExecPolicy::Sequential)?;
    Ok(train.tasks.into_iter().next().expect("one object"))
}

/// Four objects at 12×12, enough for SSIM, with one held out.
pub fn tiny_datasets() -> Result<(TaskDataset, TaskDataset)> {
    let spec = SyntheticSpec {
        objects: 4,
        test_objects: 1,
        views: 8,
        resolution: 12,
        oracle_samples: 64,
        ..SyntheticSpec::default()
    };
    synthetic_datasets(&spec, ExecPolicy::Sequential)
}

/// The desk distribution: 40 objects, 32×32 views, 25 support and 25 query
/// views each, the last 8 objects held out.
pub fn desk_spec() -> SyntheticSpec {
    SyntheticSpec {
        objects: 40,
        test_objects: 8,
        views: 50,
        resolution: 32,
        ..SyntheticSpec::default()
    }
}

pub fn desk_datasets() -> Result<(TaskDataset, TaskDataset)> {
    synthetic_datasets(&desk_spec(), ExecPolicy::Parallel)
}
