//! Desk-scale benchmark harness: data ingestion, the training loop,
//! throughput grids, CSV output and the oracle verification suite.

pub mod config;
pub mod data;
pub mod fetch;
pub mod report;
pub mod throughput;
pub mod train;
pub mod verify;

use config::Dataset;
use data::{load_mnist, synthetic_blobs, DataError, DatasetSplit};

/// Loads or generates the data named by `dataset`. Synthetic data is drawn
/// from `seed`.
pub fn load_dataset(dataset: &Dataset, seed: u64) -> Result<DatasetSplit, DataError> {
    match dataset {
        Dataset::Mnist(dir) => load_mnist(dir),
        Dataset::Synthetic {
            classes,
            dim,
            per_class,
            separation,
        } => Ok(synthetic_blobs(*classes, *dim, *per_class, *separation, seed)),
    }
}

/// Keeps freed large blocks on the heap. The default allocator returns
/// them to the kernel, and the page faults on reuse otherwise take a large
/// and erratic share of every training step.
pub fn retain_freed_memory() {
    #[cfg(all(target_os = "linux", target_env = "gnu"))]
    // SAFETY: mallopt only adjusts allocator tuning parameters.
    unsafe {
        libc::mallopt(libc::M_MMAP_THRESHOLD, 32 << 20);
        libc::mallopt(libc::M_TRIM_THRESHOLD, 1 << 30);
        libc::mallopt(libc::M_TOP_PAD, 64 << 20);
    }
}
