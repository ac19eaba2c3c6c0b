pub mod assembly;
pub mod attention;
pub mod error;
pub mod ffn;
pub mod harness;
pub mod inner;
pub mod matrix;
pub mod memo;
pub mod scalar;
pub mod target;

pub use error::{KstError, Result};
pub use matrix::Matrix;
pub use scalar::{ActivationKind, Mode, Scalar};

/// Sizes the global worker pool used by synthesis and the harness. Only the
/// first call has an effect; later calls report an error.
pub fn set_threads(threads: usize) -> Result<()> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| KstError::OutOfRange(format!("thread pool: {e}")))
}
