//! Group-interaction trajectory prediction: data pipeline, graph embedding,
//! diffusion graph encoder, intention predictor, multimodal decoder, training.

pub mod adjacency;
pub mod checkpoint;
pub mod data;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod intention;
pub mod model;
pub mod nn;
pub mod params;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};

/// Caps the global worker pool at `GIMTP_THREADS` when set. Call once, early.
pub fn init_threads_from_env() -> Result<()> {
    if let Ok(v) = std::env::var("GIMTP_THREADS") {
        let n: usize = v
            .parse()
            .map_err(|_| Error::Config(format!("GIMTP_THREADS must be a positive integer, got {v:?}")))?;
        if n == 0 {
            return Err(Error::Config("GIMTP_THREADS must be positive".into()));
        }
        // a pool that already exists keeps its size
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}
