//! Batch work over many independent sessions: log verification and
//! harness sweeps. Runs on rayon when the `parallel` feature is on and
//! sequentially otherwise; both paths return results in input order.

use std::path::{Path, PathBuf};

use crate::logging::{sealed_session_dirs, verify_session_dir, LogError, SessionVerification};
use crate::scene::ScenarioLibrary;

/// Maps `f` over `items` on the calling thread.
pub fn map_sequential<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    F: Fn(&T) -> R,
{
    items.iter().map(f).collect()
}

/// Maps `f` over `items` on the rayon pool.
#[cfg(feature = "parallel")]
pub fn map_parallel<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    use rayon::prelude::*;
    items.par_iter().map(f).collect()
}

/// Maps `f` over `items`, in parallel when the feature is enabled.
pub fn map<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        map_parallel(items, f)
    }
    #[cfg(not(feature = "parallel"))]
    {
        map_sequential(items, f)
    }
}

pub type DirVerification = (PathBuf, Result<SessionVerification, LogError>);

/// Replays every sealed session under `root`.
pub fn verify_all(root: &Path, library: &ScenarioLibrary) -> Result<Vec<DirVerification>, LogError> {
    let dirs = sealed_session_dirs(root)?;
    Ok(map(&dirs, |dir| (dir.clone(), verify_session_dir(dir, library))))
}

/// [`verify_all`] pinned to the calling thread.
pub fn verify_all_sequential(root: &Path, library: &ScenarioLibrary) -> Result<Vec<DirVerification>, LogError> {
    let dirs = sealed_session_dirs(root)?;
    Ok(map_sequential(&dirs, |dir| {
        (dir.clone(), verify_session_dir(dir, library))
    }))
}
