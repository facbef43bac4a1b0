//! Role-aware, knowledge-augmented consultation models: a small autodiff
//! engine, the text encoder, role encoder, disease knowledge base, adapted
//! decoder, parameter-efficient trainer, evaluation metrics, data curation
//! and the HTTP consultation service.

pub mod autodiff;
pub mod curation;
pub mod decoder;
pub mod dialogue;
pub mod encoder;
pub mod error;
pub mod jsonl;
pub mod kb;
pub mod metrics;
pub mod nn;
pub mod roles;
pub mod service;
pub mod synthetic;
pub mod text;
pub mod trainer;

pub use error::{ModelError, ModelResult};
