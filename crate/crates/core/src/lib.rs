//! Federated training of small recurrent text classifiers.
//!
//! The crate is organized around the experiment pipeline: `textproc` builds
//! the shared vocabulary and embedding table, `datashard` partitions the
//! encoded dataset across clients, `seqnet` runs local training, `transport`
//! moves parameter payloads and synchronization messages through a blob
//! store and message board, `flcore` drives the synchronous rounds and the
//! aggregation, and `metrics` scores the results. `experiment` binds it all
//! to config files and output artifacts for the CLI and Python bindings.

pub mod config;
pub mod datashard;
pub mod error;
pub mod experiment;
pub mod flcore;
pub mod metrics;
pub mod rng;
pub mod seqnet;
pub mod synth;
pub mod textproc;
pub mod transport;

pub use error::{Error, Result};
