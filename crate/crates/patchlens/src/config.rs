// SPDX-License-Identifier: MIT OR Apache-2.0

//! Run configuration: command-line flags over an optional JSON file over defaults.

use std::path::{Path, PathBuf};

use patchlens_core::{Axiom, ChangeBasis, PadMode, Site, Variant, Weighting};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;

/// Every field is optional so a flag can be told apart from a file value.
#[derive(Debug, Clone, Default, PartialEq, clap::Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunArgs {
    /// JSON file with any of these settings (snake_case keys); flags win
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// Weights archive (F32 tensors, DistilBERT names)
    #[arg(long)]
    pub model_archive: Option<PathBuf>,
    /// Model `config.json`; defaults to the one beside the archive, else the 6-layer TAS-B shape
    #[arg(long)]
    pub model_config: Option<PathBuf>,
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// `doc_id<TAB>text` collection
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// `query_id<TAB>text` queries
    #[arg(long)]
    pub queries: Option<PathBuf>,
    /// Optional qrels; restricts the retrieval pool to documents judged for the loaded queries
    #[arg(long)]
    pub qrels: Option<PathBuf>,
    /// Dataset file; defaults to `<output-dir>/dataset.jsonl`
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// TFC1_I, TFC1_R or LNC1
    #[arg(long)]
    pub axiom: Option<String>,
    /// append, prepend or none
    #[arg(long)]
    pub variant: Option<String>,
    /// Comma-separated subset of resid_pre,attn_out,mlp_out,head_out
    #[arg(long, value_delimiter = ',')]
    pub sites: Option<Vec<String>>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Retrieval depth per query
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub n_queries: Option<usize>,
    #[arg(long)]
    pub max_len: Option<usize>,
    #[arg(long)]
    pub impact_epsilon: Option<f64>,
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
    /// Query selection basis: relative or absolute
    #[arg(long)]
    pub basis: Option<String>,
    /// LNC1 baseline padding: masked or attended
    #[arg(long)]
    pub lnc1_mask_mode: Option<String>,
    /// Class mean weighting: occurrence or document
    #[arg(long)]
    pub weighting: Option<String>,
    /// One color scale shared by every heatmap of a report
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub fixed_scale: Option<bool>,
    /// TFC1 filler word
    #[arg(long)]
    pub filler: Option<String>,
    /// Keep triples whose score moves against the axiom
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub keep_noncompliant: Option<bool>,
    /// Worker threads
    #[arg(long, env = "PATCHLENS_THREADS")]
    pub threads: Option<usize>,
}

macro_rules! overlay {
    ($hi:expr, $lo:expr, $($f:ident),+) => {
        RunArgs { config: $hi.config.clone(), $($f: $hi.$f.clone().or_else(|| $lo.$f.clone())),+ }
    };
}

impl RunArgs {
    /// Fields set here win over `lower`.
    pub fn over(&self, lower: &RunArgs) -> RunArgs {
        overlay!(
            self,
            lower,
            model_archive,
            model_config,
            vocab,
            corpus,
            queries,
            qrels,
            dataset,
            axiom,
            variant,
            sites,
            seed,
            k,
            n_queries,
            max_len,
            impact_epsilon,
            output_dir,
            basis,
            lnc1_mask_mode,
            weighting,
            fixed_scale,
            filler,
            keep_noncompliant,
            threads
        )
    }

    /// Merges the `--config` file, if any, under the flags and resolves defaults.
    pub fn resolve(&self) -> Result<RunConfig> {
        let merged = match &self.config {
            Some(path) => self.over(&io::read_json::<RunArgs>(path)?),
            None => self.clone(),
        };
        RunConfig::from_args(&merged)
    }
}

/// A fully resolved configuration.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub model_archive: Option<PathBuf>,
    pub model_config: Option<PathBuf>,
    pub vocab: Option<PathBuf>,
    pub corpus: Option<PathBuf>,
    pub queries: Option<PathBuf>,
    pub qrels: Option<PathBuf>,
    pub dataset: PathBuf,
    pub axiom: Axiom,
    pub variant: Variant,
    pub sites: Vec<Site>,
    pub seed: u64,
    pub k: usize,
    pub n_queries: usize,
    pub max_len: usize,
    pub impact_epsilon: f64,
    pub output_dir: PathBuf,
    pub basis: ChangeBasis,
    pub lnc1_mask_mode: PadMode,
    pub weighting: Weighting,
    pub fixed_scale: bool,
    pub filler: String,
    pub keep_noncompliant: bool,
    #[serde(skip)]
    pub threads: usize,
}

pub const DEFAULT_SEED: u64 = 42;

fn parse_enum<T>(field: &str, raw: Option<&str>, default: T, table: &[(&str, T)]) -> Result<T>
where
    T: Copy,
{
    let Some(raw) = raw else { return Ok(default) };
    let key = raw.trim().to_ascii_lowercase().replace('-', "_");
    table.iter().find(|(name, _)| *name == key).map(|(_, v)| *v).ok_or_else(|| {
        let names: Vec<&str> = table.iter().map(|(n, _)| *n).collect();
        Error::Config(format!("{field}: `{raw}` is not one of {}", names.join(", ")))
    })
}

impl RunConfig {
    pub fn from_args(a: &RunArgs) -> Result<Self> {
        let axiom = match &a.axiom {
            Some(s) => Axiom::parse(s).map_err(|e| Error::Config(e.to_string()))?,
            None => Axiom::Tfc1Inject,
        };
        let variant = match (&a.variant, axiom) {
            (Some(s), _) => Variant::parse(s).map_err(|e| Error::Config(e.to_string()))?,
            (None, Axiom::Tfc1Replace) => Variant::None,
            (None, _) => Variant::Append,
        };
        match (axiom, variant) {
            (Axiom::Tfc1Inject, Variant::Append | Variant::Prepend)
            | (Axiom::Tfc1Replace, Variant::None)
            | (Axiom::Lnc1, Variant::Append) => {}
            _ => return Err(Error::Config(format!("variant {variant} does not apply to {axiom}"))),
        }
        let sites = match &a.sites {
            None => Site::ALL.to_vec(),
            Some(list) => {
                let mut v = Vec::new();
                for s in list.iter().filter(|s| !s.trim().is_empty()) {
                    let site = Site::parse(s.trim()).map_err(|e| Error::Config(e.to_string()))?;
                    if !v.contains(&site) {
                        v.push(site);
                    }
                }
                if v.is_empty() {
                    return Err(Error::Config("sites: empty list".into()));
                }
                v.sort();
                v
            }
        };
        let basis = parse_enum(
            "basis",
            a.basis.as_deref(),
            ChangeBasis::Relative,
            &[("relative", ChangeBasis::Relative), ("absolute", ChangeBasis::Absolute)],
        )?;
        let lnc1_mask_mode = parse_enum(
            "lnc1-mask-mode",
            a.lnc1_mask_mode.as_deref(),
            PadMode::Masked,
            &[("masked", PadMode::Masked), ("attended", PadMode::Attended)],
        )?;
        let weighting = parse_enum(
            "weighting",
            a.weighting.as_deref(),
            Weighting::Occurrence,
            &[("occurrence", Weighting::Occurrence), ("document", Weighting::Document)],
        )?;
        let output_dir = a.output_dir.clone().unwrap_or_else(|| PathBuf::from("patchlens-out"));
        let cfg = RunConfig {
            model_archive: a.model_archive.clone(),
            model_config: a.model_config.clone(),
            vocab: a.vocab.clone(),
            corpus: a.corpus.clone(),
            queries: a.queries.clone(),
            qrels: a.qrels.clone(),
            dataset: a.dataset.clone().unwrap_or_else(|| output_dir.join("dataset.jsonl")),
            axiom,
            variant,
            sites,
            seed: a.seed.unwrap_or(DEFAULT_SEED),
            k: a.k.unwrap_or(100),
            n_queries: a.n_queries.unwrap_or(100),
            max_len: a.max_len.unwrap_or(patchlens_core::tokenizer::DEFAULT_MAX_LEN),
            impact_epsilon: a.impact_epsilon.unwrap_or(patchlens_core::patching::DEFAULT_IMPACT_EPSILON),
            output_dir,
            basis,
            lnc1_mask_mode,
            weighting,
            fixed_scale: a.fixed_scale.unwrap_or(false),
            filler: a.filler.clone().unwrap_or_else(|| patchlens_core::dataset::DEFAULT_FILLER.to_string()),
            keep_noncompliant: a.keep_noncompliant.unwrap_or(false),
            threads: a.threads.unwrap_or(1),
        };
        if cfg.k == 0 || cfg.n_queries == 0 {
            return Err(Error::Config("k and n-queries must be at least 1".into()));
        }
        if cfg.max_len < 3 {
            return Err(Error::Config("max-len must be at least 3".into()));
        }
        if cfg.impact_epsilon.is_nan() || cfg.impact_epsilon < 0.0 {
            return Err(Error::Config("impact-epsilon must be a non-negative number".into()));
        }
        if cfg.threads == 0 {
            return Err(Error::Config("threads must be at least 1".into()));
        }
        if cfg.filler.split_whitespace().count() != 1 {
            return Err(Error::Config(format!("filler `{}` must be a single word", cfg.filler)));
        }
        Ok(cfg)
    }

    /// Returns the path of a required input, checking that it exists.
    pub fn require<'a>(&self, name: &str, path: &'a Option<PathBuf>) -> Result<&'a Path> {
        let p = path.as_deref().ok_or_else(|| Error::Config(format!("--{name} is required")))?;
        if !p.exists() {
            return Err(Error::Config(format!("--{name} {} does not exist", p.display())));
        }
        Ok(p)
    }

    pub fn thread_pool(&self) -> Result<rayon::ThreadPool> {
        rayon::ThreadPoolBuilder::new()
            .num_threads(self.threads)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))
    }

    pub fn results_path(&self, site: Site) -> PathBuf {
        self.output_dir.join(format!("results_{}.jsonl", site.as_str()))
    }
}
