//! Transport-refined multi-prompt score maps for text-driven segmentation.
//!
//! [`ot`] holds the log-domain Sinkhorn solver and an exact solver for
//! small problems. [`prompt_align`] turns pixel/prompt embeddings into
//! per-class score maps refined by transport across prompts, and
//! [`attention`] builds the decoder attention operators on top of it.
//! [`segpipe`] trains the full two-path model on planted scenes; [`cli`] is
//! the command-line front end and [`checks`] the numerical property suite
//! behind `prompt-ot verify`.

pub mod attention;
pub mod autodiff;
pub mod checks;
pub mod cli;
pub mod error;
pub mod linalg;
pub mod ot;
pub mod prompt_align;
pub mod segpipe;

pub use error::{Error, Result};
pub use linalg::Mat;
