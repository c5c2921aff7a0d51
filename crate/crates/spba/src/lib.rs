//! Patch-wise spectral backdoor attacks on 3D point clouds.
//!
//! The crate implements the full attack pipeline end to end:
//!
//! 1. [`geometry`] — point-cloud containers, exact k-nearest-neighbour search,
//!    farthest point sampling, patchification, normal estimation, and XYZ I/O.
//! 2. [`imperceptibility`] — curvature-derived per-point and per-patch scores
//!    used to decide *where* a trigger hides best.
//! 3. [`spectral`] — per-patch graph Laplacians, their eigenbases, the graph
//!    Fourier transform, and spectral trigger injection / sample poisoning.
//! 4. [`classifier`] — a small deterministic point-cloud classifier with
//!    manual reverse-mode gradients (for both parameters and inputs) and Adam.
//! 5. [`attack`] — dirty-label dataset splitting and the alternating
//!    model/trigger optimization loop.
//! 6. [`metrics`] — attack success rate, benign accuracy, Chamfer/Hausdorff
//!    distances, and report assembly.
//! 7. [`defenses`] — input-space augmentations, statistical outlier removal,
//!    saliency-based point dropping, and a cluster-injection baseline attack.
//! 8. [`data`] — synthetic labeled shapes with analytic normals plus a
//!    versioned binary dataset container.
//!
//! Everything is deterministic: all randomness flows through explicitly
//! seeded generators, parallel reductions are re-ordered into fixed sequential
//! order, and ties in every selection rule are broken by lowest index.

pub mod attack;
pub mod classifier;
pub mod data;
pub mod defenses;
pub mod error;
pub mod geometry;
pub mod imperceptibility;
pub(crate) mod ioutil;
pub mod metrics;
pub(crate) mod rng;
pub mod spectral;

pub use error::{Error, Result};

/// Cap the number of worker threads used by all parallel stages. Must be
/// called before any parallel work runs; the first configuration of the
/// global pool wins, so later calls fail.
pub fn set_thread_count(threads: usize) -> Result<()> {
    if threads == 0 {
        return Err(Error::BadCount {
            name: "threads",
            got: 0,
            reason: "need at least one worker thread",
        });
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|_| Error::BadCount {
            name: "threads",
            got: threads,
            reason: "the global thread pool is already initialized",
        })
}
