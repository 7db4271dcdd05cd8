// SPDX-License-Identifier: MIT OR Apache-2.0

//! # patchlens-core
//!
//! Allocation-only core for reverse-engineering how a DistilBERT-style
//! bi-encoder scores relevance. It covers:
//!
//! - [`numerics`]: dense `f32` kernels (matmul, softmax, layer norm, GELU),
//! - [`tokenizer`]: uncased WordPiece with word-to-token bookkeeping,
//! - [`model`]: the 6-layer encoder forward pass with capture/patch hooks
//!   at `resid_pre`, `attn_out`, `mlp_out` and per-head outputs,
//! - [`dataset`]: TFC1-I / TFC1-R / LNC1 perturbations, query selection and
//!   token classification,
//! - [`patching`]: block and head patching experiments and the impact ratio,
//! - [`report`]: class/head heatmaps, CSV and SVG rendering.
//!
//! File formats, the command line and threading live in the `patchlens` crate.

#![no_std]
#![forbid(unsafe_code)]

extern crate alloc;

pub mod dataset;
pub mod error;
pub mod model;
pub mod numerics;
pub mod patching;
pub mod report;
pub mod tokenizer;

pub use dataset::{Axiom, ChangeBasis, CorpusDoc, Query, TokenClass, TokenClassMap, Triple, Variant};
pub use error::{Error, Result};
pub use model::{
    relevance_score, ActivationCache, Capture, ForwardOutput, HookPoint, Model, ModelConfig, PatchSpec, Site, SiteAddr,
    WeightStore,
};
pub use numerics::Tensor;
pub use patching::{
    patching_impact, BlockResult, EncodedPair, HeadResult, ImpactRecord, PadMode, PatchingScores, TriplePatcher,
};
pub use report::{ClassHeatmap, HeadHeatmap, HeadSplit, Weighting};
pub use tokenizer::{encode, Encoding, Vocab};
