//! Promptable CT segmentation at desk scale.
//!
//! The model pairs a frozen SAM-style ViT encoder (tuned through lightweight
//! adapters) with a U-shaped CNN branch. The two branches exchange information
//! through a cross-branch interaction module, and the mask decoder fuses the
//! full-resolution CNN features into the upsampled ViT embedding before the
//! final dot product. Prompts come either from the frozen manual prompt
//! encoder (points / boxes) or from a plug-and-play task-indicator prompt
//! encoder that synthesizes them from image features.
//!
//! The crate also ships the surrounding machinery: CT volume ingestion with
//! density windowing, prompt synthesis from ground-truth masks, training
//! loops with freeze enforcement, and the Dice / IoU / HD95 metric suite.

pub mod config;
pub mod error;
pub mod ingest;
pub mod mask;
pub mod metrics;
pub mod prompts;
pub mod seed;
pub mod vocab;

pub use error::SamctError;
