//! Default scoring on transaction graphs with an edge-attention,
//! weight-shared recurrent graph convolutional network.
//!
//! The crate covers the full pipeline: a minimal reverse-mode autodiff engine
//! ([`autodiff`]), GRU encoders for transaction sequences ([`seq_encoder`]),
//! an attributed transaction graph with depth-2 ego extraction and training
//! augmentation ([`graph_store`]), the convolutional layers ([`gnn_layers`]),
//! model assembly and checkpointing ([`models`]), staged training
//! ([`trainer`]), a synthetic benchmark generator with a closed-form Bayes
//! oracle ([`synth`]), and ROC-AUC reporting ([`metrics`]).

pub mod autodiff;
pub mod cli;
pub mod error;
pub mod gnn_layers;
pub mod graph_store;
pub mod metrics;
pub mod models;
pub mod parallel;
pub mod seq_encoder;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
