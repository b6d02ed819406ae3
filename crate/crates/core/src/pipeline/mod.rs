//! End-to-end pipeline: synthetic data, checkpoints, the generation cascade
//! and batch execution.

pub mod ablation;
pub mod config;
pub mod dataset;
pub mod generate;
pub mod models;

pub use config::{Framing, GenerationRequest, PipelineConfig, QualityPreset, RequestFile};
pub use dataset::{control_audit, make_synthetic_dataset, Dataset, DatasetManifest, Outfit, Sample, SampleRecord, Split};
pub use generate::{GenerationOutput, GenerationReport, Pipeline};
pub use models::{train_generator, train_lift, GeneratorTraining, Models, View};

use rayon::prelude::*;

use crate::error::{Error, Result};

/// Exit status for an error: 2 for bad arguments or configuration, 3 for
/// geometry the pipeline cannot work with, 4 for I/O and file contents.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Param(_) => 2,
        Error::Degenerate(_) | Error::Mesh(_) | Error::Projection(_) => 3,
        Error::Io(_) | Error::MissingCheckpoint(_) | Error::Format { .. } | Error::Image(_) | Error::Json(_) => 4,
    }
}

/// Worker threads requested through `APTC_THREADS`, if set and valid.
pub fn thread_cap() -> Option<usize> {
    std::env::var("APTC_THREADS").ok()?.parse().ok().filter(|&n| n > 0)
}

/// Seed of the `index`-th job of a batch.
pub fn job_seed(seed: u64, index: usize) -> u64 {
    seed ^ index as u64
}

/// Run `f` over `items` on `jobs` threads. Results keep the input order and
/// do not depend on `jobs`.
pub fn run_jobs<T, R, F>(items: &[T], jobs: usize, f: F) -> Result<Vec<Result<R>>>
where
    T: Sync,
    R: Send,
    F: Fn(usize, &T) -> Result<R> + Sync + Send,
{
    if jobs == 0 {
        return Err(Error::Config("--jobs must be at least 1".into()));
    }
    let jobs = thread_cap().map_or(jobs, |cap| jobs.min(cap));
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    Ok(pool.install(|| items.par_iter().enumerate().map(|(i, x)| f(i, x)).collect()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_by_category() {
        assert_eq!(exit_code(&Error::Config("x".into())), 2);
        assert_eq!(exit_code(&Error::Param("x".into())), 2);
        assert_eq!(exit_code(&Error::Degenerate("x".into())), 3);
        assert_eq!(exit_code(&Error::MissingCheckpoint("m".into())), 4);
        assert_eq!(exit_code(&Error::Format { offset: 0, msg: "x".into() }), 4);
    }

    #[test]
    fn jobs_keep_order() {
        let xs: Vec<u64> = (0..20).collect();
        let one = run_jobs(&xs, 1, |i, x| Ok(job_seed(*x, i))).unwrap();
        let four = run_jobs(&xs, 4, |i, x| Ok(job_seed(*x, i))).unwrap();
        let a: Vec<u64> = one.into_iter().map(|r| r.unwrap()).collect();
        let b: Vec<u64> = four.into_iter().map(|r| r.unwrap()).collect();
        assert_eq!(a, b);
        assert!(run_jobs(&xs, 0, |_, x| Ok(*x)).is_err());
    }
}
