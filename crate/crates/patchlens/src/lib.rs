// SPDX-License-Identifier: MIT OR Apache-2.0

//! # patchlens
//!
//! File formats, the experiment pipeline and the command line around
//! [`patchlens_core`]:
//!
//! - [`archive`]: F32 weight archives (8-byte header length, JSON header, raw data),
//! - [`io`]: vocab, `id<TAB>text` corpora, qrels and JSON-lines datasets,
//! - [`build`]: retrieval, query selection, perturbation and scoring into a dataset,
//! - [`run`]: resumable block and head patching over a dataset,
//! - [`report`]: heatmap CSV/SVG/JSON bundles,
//! - [`sanity`]: identity, completeness and decomposition controls on a model.

#![forbid(unsafe_code)]

pub mod archive;
pub mod build;
pub mod config;
pub mod error;
pub mod io;
pub mod report;
pub mod run;
pub mod sanity;

pub use build::{build_dataset, BuildManifest};
pub use config::{RunArgs, RunConfig};
pub use error::{Error, Result};
pub use report::write_report;
pub use run::{run_experiment, RunOptions, RunSummary};
pub use sanity::{run_sanity, Control};
