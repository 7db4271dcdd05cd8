// SPDX-License-Identifier: MIT OR Apache-2.0

//! Correctness controls on a loaded model, run on seeded synthetic triples.

use std::fmt;

use anyhow::{Context, Result};
use patchlens_core::{relevance_score, Capture, Encoding, HookPoint, Model, PatchSpec, Site, SiteAddr, TriplePatcher};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::archive;
use crate::config::RunConfig;
use crate::io;

pub const IDENTITY_TOL: f64 = 1e-5;
pub const COMPLETENESS_TOL: f64 = 1e-4;
pub const DECOMPOSITION_TOL: f64 = 1e-5;

const N_TRIPLES: usize = 3;
const SEQ_LEN: usize = 24;
const QUERY_LEN: usize = 8;
const PROBE_POSITIONS: usize = 5;
const MIN_SCORE_GAP: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Control {
    pub name: &'static str,
    pub measured: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl Control {
    fn within(name: &'static str, measured: f64, tolerance: f64) -> Self {
        Self { name, measured, tolerance, pass: measured <= tolerance }
    }
}

impl fmt::Display for Control {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {:<18} measured {:.3e}  tolerance {:.0e}",
            if self.pass { "PASS" } else { "FAIL" },
            self.name,
            self.measured,
            self.tolerance
        )
    }
}

struct Synthetic {
    qcls: Vec<f32>,
    dest: Encoding,
    source: Encoding,
}

fn synthetic_triples(model: &Model, cls: u32, sep: u32, first_word: u32, seed: u64) -> Result<Vec<Synthetic>> {
    let vocab = model.config().vocab_size as u32;
    let len = SEQ_LEN.min(model.config().max_positions);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids = |rng: &mut ChaCha8Rng, n: usize| -> Vec<u32> {
        let mut v = vec![cls];
        v.extend((1..n - 1).map(|_| rng.gen_range(first_word..vocab)));
        v.push(sep);
        v
    };
    let mut out = Vec::new();
    for _ in 0..50 * N_TRIPLES {
        let q = Encoding::from_ids(ids(&mut rng, QUERY_LEN.min(len)));
        let dest = ids(&mut rng, len);
        let mut source = dest.clone();
        for p in (1..len - 1).filter(|p| p % 3 == 1) {
            source[p] = rng.gen_range(first_word..vocab);
        }
        let qcls = patchlens_core::patching::embed_cls(model, &q)?;
        let s = Synthetic { qcls, dest: Encoding::from_ids(dest), source: Encoding::from_ids(source) };
        let score = |e: &Encoding| -> Result<f64> {
            let o = model.forward_encoding(e, &Capture::none(), None)?;
            Ok(f64::from(relevance_score(&s.qcls, &o.cls_embedding())?))
        };
        if (score(&s.source)? - score(&s.dest)?).abs() >= MIN_SCORE_GAP {
            out.push(s);
            if out.len() == N_TRIPLES {
                return Ok(out);
            }
        }
    }
    anyhow::bail!("could not draw {N_TRIPLES} synthetic triples whose scores differ by at least {MIN_SCORE_GAP}")
}

/// Largest |impact| of patching the destination with its own activations.
fn identity(model: &Model, s: &Synthetic, p: &TriplePatcher<'_>) -> Result<f64> {
    let clean = model.forward_encoding(&s.dest, &Capture::all(), None)?;
    let sc = p.scores();
    let denom = f64::from(sc.score_perturbed) - f64::from(sc.score_baseline);
    let cfg = model.config();
    let len = s.dest.len();
    let step = (len / PROBE_POSITIONS).max(1);
    let mut targets = Vec::new();
    for l in 0..cfg.n_layers {
        for site in Site::BLOCK {
            targets.extend((0..len).step_by(step).take(PROBE_POSITIONS).map(|pos| HookPoint::block(l, site, pos)));
        }
        targets.extend((0..cfg.n_heads).map(|h| HookPoint::head(l, h)));
    }
    let mut worst = 0.0f64;
    for t in targets {
        let resid = clean.cache.get(&SiteAddr { layer: t.layer, site: Site::ResidPre, head: None }).cloned();
        let resid = resid.context("clean residual missing")?;
        let patch = PatchSpec { targets: std::slice::from_ref(&t), source: &clean.cache };
        let out = model.forward_from(t.layer, resid, &s.dest.attention_mask, &Capture::none(), Some(patch))?;
        let x = f64::from(relevance_score(&s.qcls, &out.cls_embedding())?);
        worst = worst.max(((x - f64::from(sc.score_baseline)) / denom).abs());
    }
    Ok(worst)
}

/// Largest |impact - 1| when every position of the first residual, or every head, comes from the source.
fn completeness(model: &Model, p: &TriplePatcher<'_>) -> Result<f64> {
    let cfg = model.config();
    let all_heads: Vec<HookPoint> =
        (0..cfg.n_layers).flat_map(|l| (0..cfg.n_heads).map(move |h| HookPoint::head(l, h))).collect();
    let whole_input = [HookPoint::new(0, Site::ResidPre, None, None)?];
    let (_, a) = p.impact_of(&whole_input)?;
    let (_, b) = p.impact_of(&all_heads)?;
    Ok((a - 1.0).abs().max((b - 1.0).abs()))
}

/// Largest relative error of rebuilding each attention output from its heads.
fn decomposition(model: &Model, p: &TriplePatcher<'_>) -> Result<f64> {
    let cfg = model.config();
    let dh = cfg.d_head();
    let cache = p.source_cache();
    let mut worst = 0.0f64;
    for l in 0..cfg.n_layers {
        let (w, b) = model.attn_output_projection(l).context("layer outside the model")?;
        let attn = cache.get(&SiteAddr { layer: l, site: Site::AttnOut, head: None }).context("attn_out missing")?;
        let heads: Vec<_> = (0..cfg.n_heads)
            .map(|h| cache.get(&SiteAddr { layer: l, site: Site::HeadOut, head: Some(h) }).context("head_out missing"))
            .collect::<Result<_>>()?;
        let scale = attn.data().iter().fold(1.0f64, |m, v| m.max(f64::from(v.abs())));
        for pos in 0..attn.rows() {
            for o in 0..cfg.d_model {
                let wrow = w.row(o);
                let mut acc = f64::from(b.data()[o]);
                for (h, ht) in heads.iter().enumerate() {
                    for (j, v) in ht.row(pos).iter().enumerate() {
                        acc += f64::from(*v) * f64::from(wrow[h * dh + j]);
                    }
                }
                worst = worst.max((acc - f64::from(attn.row(pos)[o])).abs() / scale);
            }
        }
    }
    Ok(worst)
}

/// Largest |difference| between a full forward and one resumed from each layer's residual.
fn resume_parity(model: &Model, s: &Synthetic) -> Result<f64> {
    let full = model.forward_encoding(&s.dest, &Capture::sites([Site::ResidPre]), None)?;
    let want = full.cls_embedding();
    let mut worst = 0.0f64;
    for l in 0..model.config().n_layers {
        let resid = full.cache.get(&SiteAddr { layer: l, site: Site::ResidPre, head: None }).cloned();
        let out = model.forward_from(
            l,
            resid.context("resid_pre missing")?,
            &s.dest.attention_mask,
            &Capture::none(),
            None,
        )?;
        for (a, b) in out.cls_embedding().iter().zip(&want) {
            worst = worst.max(f64::from((a - b).abs()));
        }
    }
    Ok(worst)
}

/// Loads the model in `cfg` and runs every control.
pub fn run_sanity(cfg: &RunConfig) -> Result<Vec<Control>> {
    let archive_path = cfg.require("model-archive", &cfg.model_archive)?;
    let mcfg = archive::resolve_model_config(archive_path, cfg.model_config.as_deref()).context("[load]")?;
    let model = archive::load_model(archive_path, mcfg).context("[load]")?;
    let finite = model.weights_finite();
    let mut controls = vec![Control {
        name: "finite_weights",
        measured: if finite { 0.0 } else { 1.0 },
        tolerance: 0.0,
        pass: finite,
    }];
    if !finite {
        // every later control would only propagate NaN
        for name in ["identity", "completeness", "head_decomposition", "resume_parity"] {
            controls.push(Control { name, measured: f64::NAN, tolerance: 0.0, pass: false });
        }
        return Ok(controls);
    }

    let (cls, sep, first_word) = match &cfg.vocab {
        Some(_) => {
            let v = io::read_vocab(cfg.require("vocab", &cfg.vocab)?)?;
            (v.cls_id, v.sep_id, 5.min(model.config().vocab_size as u32 - 1))
        }
        None if model.config().vocab_size > 1000 => (101, 102, 1000),
        None => anyhow::bail!("--vocab is required for a model with {} tokens", model.config().vocab_size),
    };
    let pool = cfg.thread_pool()?;
    let triples = synthetic_triples(&model, cls, sep, first_word, cfg.seed)?;
    let per_triple: Vec<[f64; 4]> = pool.install(|| {
        triples
            .par_iter()
            .map(|s| -> Result<[f64; 4]> {
                let p = TriplePatcher::new(&model, s.qcls.clone(), s.dest.clone(), &s.source, 0.0)?;
                Ok([
                    identity(&model, s, &p)?,
                    completeness(&model, &p)?,
                    decomposition(&model, &p)?,
                    resume_parity(&model, s)?,
                ])
            })
            .collect::<Result<_>>()
    })?;
    let worst = |i: usize| per_triple.iter().map(|r| r[i]).fold(0.0f64, f64::max);
    controls.push(Control::within("identity", worst(0), IDENTITY_TOL));
    controls.push(Control::within("completeness", worst(1), COMPLETENESS_TOL));
    controls.push(Control::within("head_decomposition", worst(2), DECOMPOSITION_TOL));
    controls.push(Control::within("resume_parity", worst(3), 0.0));
    Ok(controls)
}
