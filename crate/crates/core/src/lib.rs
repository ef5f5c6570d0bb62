//! Open-set bias auditing for black-box text-to-image generators.
//!
//! The pipeline runs in file-separated stages:
//!
//! 1. [`proposal`] asks an LLM, caption by caption, which biases an image
//!    generated from the caption could show; [`knowledge`] aggregates the
//!    answers into a knowledge base, merges near-duplicate biases and prunes
//!    weakly supported ones.
//! 2. [`filtering`] drops caption/bias pairs where the caption already
//!    states the class.
//! 3. [`assessment`] generates seeded images per caption and asks a VQA
//!    model each bias question, producing one record per image.
//! 4. [`quantify`] turns records into per-caption and per-bias class
//!    distributions, scores them (one minus normalized entropy) and ranks
//!    them; [`report`] writes CSV, JSON and SVG.
//!
//! [`evaluation`] holds agreement metrics against reference labels and human
//! judgments. All model access goes through [`backends`].

pub mod assessment;
pub mod backends;
pub mod diagnostics;
pub mod error;
pub mod evaluation;
pub mod filtering;
pub mod io;
pub mod knowledge;
mod parallel;
pub mod pipeline;
pub mod proposal;
pub mod quantify;
pub mod report;
pub mod text;

pub use error::{Error, ErrorKind, Result};
pub use parallel::par_map;
