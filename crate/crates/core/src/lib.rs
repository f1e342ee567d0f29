pub mod autodiff;
pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod explain;
pub mod metrics;
pub mod models;
pub mod tensor;
pub mod untrain;
pub mod wf;

pub use error::{Error, Result};

// The autodiff tape allocates and frees many mid-sized buffers per step; the
// system allocator spends a large share of the run returning them to the OS.
#[cfg(feature = "mimalloc")]
#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;
pub use tensor::Tensor;
