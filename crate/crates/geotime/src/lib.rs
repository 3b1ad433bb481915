//! Geo-temporal embedding toolkit.
//!
//! Maps images (as precomputed feature vectors), GPS coordinates, and capture
//! times into a shared embedding space, so that any modality can be used to
//! query any other: locate an image, predict when it was taken, or retrieve an
//! image of a place at a requested time.
//!
//! The crate is organized bottom-up:
//!
//! - [`geomath`]: spherical and toroidal geometry (Haversine, equal-area
//!   sphere pixelization, timestamp-to-torus mapping, time bins).
//! - [`autodiff`]: a small dense-tensor engine with reverse-mode
//!   differentiation, enough for the fusion transformer and the losses.
//! - [`model`]: modality encoders, the shared fusion transformer, and the two
//!   classification heads.
//! - [`objectives`]: contrastive losses and metric-affinity soft targets.
//! - [`trainer`]: debiased batch sampling, AdamW, warmup-cosine schedule.
//! - [`data`]: record format, synthetic world generator, quality probe, and
//!   the curation pipeline.
//! - [`retrieval`]: galleries, exact cosine search, entropy-adaptive
//!   reranking, and the four query tasks.
//! - [`evaluation`]: circular time errors, geodesic error, recall under joint
//!   thresholds, hemispheric balance, confusion matrices.
//! - [`checkpoint`]: the binary tensor container used for parameters,
//!   affinity tables, and gallery payloads.
//!
//! The `geotime` binary wires these into `generate`, `curate`, `train`,
//! `index`, `query`, `eval`, and `dump-embeddings` subcommands.

use std::path::Path;

use thiserror::Error;

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod evaluation;
pub mod geomath;
pub mod model;
pub mod objectives;
pub mod retrieval;
pub mod trainer;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration or argument values.
    #[error("configuration: {0}")]
    Config(String),

    /// Operand shapes are incompatible for an operation.
    #[error("shape mismatch in {op}: left {lhs:?}, right {rhs:?}")]
    Shape {
        op: String,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// An API precondition was violated (empty batch, mismatched lengths, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// A computation produced NaN or a degenerate value.
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// A text input file failed to parse.
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    /// A binary container violated its format.
    #[error("malformed container: {0}")]
    Format(String),

    /// Filesystem errors, tagged with the offending path.
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Tags an I/O error with the path it came from.
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Error::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
