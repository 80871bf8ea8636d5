//! Desk-scale composed image retrieval: given a reference image and a short
//! modification text, retrieve the described target image.
//!
//! The crate covers the full loop on synthetic data: mining candidate image
//! pairs from a labelled corpus, generating modification texts for them,
//! encoding images and text into a shared space with a two-hop contrastive
//! objective, training in a pretrain/finetune schedule, and scoring retrieval
//! with rank-based metrics. Everything runs on the CPU in plain `f64` and is
//! built to be verified: gradients against finite differences, mined pair
//! counts against closed forms, and metrics against brute-force oracles.

mod binio;
pub mod data;
pub mod encoders;
pub mod error;
pub mod evaluator;
pub mod fdsuite;
pub mod losses;
pub mod mining;
pub mod ndcore;
pub mod optim;
pub mod synthcorpus;
pub mod textgen;
pub mod trainer;

pub use error::{Error, Result};
