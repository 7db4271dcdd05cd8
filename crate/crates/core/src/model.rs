// SPDX-License-Identifier: MIT OR Apache-2.0

//! DistilBERT-architecture bi-encoder with hook points.
//!
//! The forward pass is the post-LN DistilBERT stack: token + position
//! embeddings and a layer norm, then per layer multi-head self-attention,
//! residual add and `sa_layer_norm`, a GELU feed-forward block, residual
//! add and `output_layer_norm`. The pooled embedding is the final hidden
//! state at position 0 and relevance is a plain dot product.
//!
//! Four hook sites exist per layer:
//!
//! - `resid_pre`: the residual stream entering the layer (layer 0 sees the
//!   normalized embedding output),
//! - `attn_out`: the attention block output after `out_lin`, before the
//!   residual add,
//! - `mlp_out`: the feed-forward output after `lin2`, before the residual add,
//! - `head_out`: one head's value-weighted context `[L × d_head]`, before the
//!   shared output projection.
//!
//! At every hook the pass first substitutes any patched rows from the
//! source cache, then records the (possibly patched) activation if the
//! site is being captured.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::error::{Error, Result};
use crate::numerics::{self, dot, layer_norm_row, linear, masked_softmax_in_place, Tensor};
use crate::tokenizer::Encoding;

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_positions: usize,
    pub ln_eps: f32,
}

impl ModelConfig {
    /// The published TAS-B / DistilBERT-base geometry.
    pub fn tas_b() -> Self {
        Self {
            n_layers: 6,
            n_heads: 12,
            d_model: 768,
            d_ff: 3072,
            vocab_size: 30522,
            max_positions: 512,
            ln_eps: 1e-12,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [self.n_layers, self.n_heads, self.d_model, self.d_ff, self.vocab_size, self.max_positions];
        if dims.contains(&0) {
            return Err(Error::Format(format!("model config has a zero dimension: {self:?}")));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Format(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.ln_eps.is_nan() || self.ln_eps <= 0.0 {
            return Err(Error::Format(format!("ln_eps must be > 0, got {}", self.ln_eps)));
        }
        Ok(())
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Every tensor name the engine needs, with its expected shape.
    pub fn expected_tensors(&self) -> Vec<(String, Vec<usize>)> {
        let (d, ff) = (self.d_model, self.d_ff);
        let mut out = vec![
            ("embeddings.word_embeddings.weight".to_string(), vec![self.vocab_size, d]),
            ("embeddings.position_embeddings.weight".to_string(), vec![self.max_positions, d]),
            ("embeddings.LayerNorm.weight".to_string(), vec![d]),
            ("embeddings.LayerNorm.bias".to_string(), vec![d]),
        ];
        for l in 0..self.n_layers {
            let p = format!("transformer.layer.{l}");
            for lin in ["q_lin", "k_lin", "v_lin", "out_lin"] {
                out.push((format!("{p}.attention.{lin}.weight"), vec![d, d]));
                out.push((format!("{p}.attention.{lin}.bias"), vec![d]));
            }
            out.push((format!("{p}.sa_layer_norm.weight"), vec![d]));
            out.push((format!("{p}.sa_layer_norm.bias"), vec![d]));
            out.push((format!("{p}.ffn.lin1.weight"), vec![ff, d]));
            out.push((format!("{p}.ffn.lin1.bias"), vec![ff]));
            out.push((format!("{p}.ffn.lin2.weight"), vec![d, ff]));
            out.push((format!("{p}.ffn.lin2.bias"), vec![d]));
            out.push((format!("{p}.output_layer_norm.weight"), vec![d]));
            out.push((format!("{p}.output_layer_norm.bias"), vec![d]));
        }
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.expected_tensors().iter().map(|(_, s)| s.iter().product::<usize>()).sum()
    }
}

/// Named weight tensors as read from an archive.
#[derive(Debug, Clone, Default)]
pub struct WeightStore {
    tensors: BTreeMap<String, Tensor>,
}

impl WeightStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.tensors.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.tensors.remove(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Looks `name` up, also accepting the `distilbert.` prefix some checkpoints carry.
    fn take_checked(&mut self, name: &str, shape: &[usize]) -> Result<Tensor> {
        let prefixed = format!("distilbert.{name}");
        let t = self
            .tensors
            .remove(name)
            .or_else(|| self.tensors.remove(&prefixed))
            .ok_or_else(|| Error::Load { name: name.to_string(), reason: "tensor missing".into() })?;
        if t.shape() != shape {
            return Err(Error::Load {
                name: name.to_string(),
                reason: format!("expected shape {shape:?}, found {:?}", t.shape()),
            });
        }
        Ok(t)
    }
}

/// Site kinds a hook can sit on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Site {
    ResidPre,
    AttnOut,
    MlpOut,
    HeadOut,
}

impl Site {
    pub const ALL: [Site; 4] = [Site::ResidPre, Site::AttnOut, Site::MlpOut, Site::HeadOut];
    pub const BLOCK: [Site; 3] = [Site::ResidPre, Site::AttnOut, Site::MlpOut];

    pub fn as_str(self) -> &'static str {
        match self {
            Site::ResidPre => "resid_pre",
            Site::AttnOut => "attn_out",
            Site::MlpOut => "mlp_out",
            Site::HeadOut => "head_out",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Site::ALL
            .into_iter()
            .find(|site| site.as_str() == s.replace('-', "_"))
            .ok_or_else(|| Error::Format(format!("unknown site `{s}`")))
    }

    pub fn is_block(self) -> bool {
        self != Site::HeadOut
    }
}

impl fmt::Display for Site {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Cache key: one activation tensor per (layer, site, head).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SiteAddr {
    pub layer: usize,
    pub site: Site,
    pub head: Option<usize>,
}

/// Address of one internal activation, optionally narrowed to a token position.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct HookPoint {
    pub layer: usize,
    pub site: Site,
    pub head: Option<usize>,
    /// `None` addresses every position.
    pub position: Option<usize>,
}

impl HookPoint {
    pub fn new(layer: usize, site: Site, head: Option<usize>, position: Option<usize>) -> Result<Self> {
        if (site == Site::HeadOut) != head.is_some() {
            return Err(Error::Patch(format!("head index must be given exactly for head_out (site {site})")));
        }
        Ok(Self { layer, site, head, position })
    }

    pub fn block(layer: usize, site: Site, position: usize) -> Self {
        debug_assert!(site.is_block());
        Self { layer, site, head: None, position: Some(position) }
    }

    pub fn head(layer: usize, head: usize) -> Self {
        Self { layer, site: Site::HeadOut, head: Some(head), position: None }
    }

    pub fn addr(&self) -> SiteAddr {
        SiteAddr { layer: self.layer, site: self.site, head: self.head }
    }
}

/// Activations recorded during one forward pass.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ActivationCache {
    entries: BTreeMap<SiteAddr, Tensor>,
}

impl ActivationCache {
    pub fn get(&self, addr: &SiteAddr) -> Option<&Tensor> {
        self.entries.get(addr)
    }

    pub fn insert(&mut self, addr: SiteAddr, t: Tensor) {
        self.entries.insert(addr, t);
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&SiteAddr, &Tensor)> {
        self.entries.iter()
    }

    /// Sequence length of the captured run, if anything was captured.
    pub fn seq_len(&self) -> Option<usize> {
        self.entries.values().next().map(|t| t.shape()[0])
    }
}

/// Which site kinds to record (every layer, every head).
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Capture {
    sites: BTreeSet<Site>,
}

impl Capture {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn all() -> Self {
        Self { sites: Site::ALL.into_iter().collect() }
    }

    pub fn sites(sites: impl IntoIterator<Item = Site>) -> Self {
        Self { sites: sites.into_iter().collect() }
    }

    pub fn contains(&self, site: Site) -> bool {
        self.sites.contains(&site)
    }
}

/// Activations to substitute, and where they come from.
#[derive(Debug, Clone, Copy)]
pub struct PatchSpec<'a> {
    pub targets: &'a [HookPoint],
    pub source: &'a ActivationCache,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// Final hidden states `[L × d_model]`.
    pub hidden: Tensor,
    pub cache: ActivationCache,
}

impl ForwardOutput {
    /// Pooled embedding: the final hidden state at position 0.
    pub fn cls_embedding(&self) -> Vec<f32> {
        self.hidden.row(0).to_vec()
    }
}

#[derive(Debug, Clone)]
struct LayerWeights {
    q: (Tensor, Tensor),
    k: (Tensor, Tensor),
    v: (Tensor, Tensor),
    out: (Tensor, Tensor),
    sa_ln: (Tensor, Tensor),
    lin1: (Tensor, Tensor),
    lin2: (Tensor, Tensor),
    out_ln: (Tensor, Tensor),
}

/// A validated, immutable model ready for inference.
#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    word_emb: Tensor,
    pos_emb: Tensor,
    emb_ln: (Tensor, Tensor),
    layers: Vec<LayerWeights>,
}

impl Model {
    /// Validates every required tensor against `config` and takes ownership of them.
    pub fn from_weights(config: ModelConfig, mut weights: WeightStore) -> Result<Self> {
        config.validate()?;
        let expected: BTreeMap<String, Vec<usize>> = config.expected_tensors().into_iter().collect();
        let mut take = |name: &str| weights.take_checked(name, &expected[name]);
        let word_emb = take("embeddings.word_embeddings.weight")?;
        let pos_emb = take("embeddings.position_embeddings.weight")?;
        let emb_ln = (take("embeddings.LayerNorm.weight")?, take("embeddings.LayerNorm.bias")?);
        let mut layers = Vec::with_capacity(config.n_layers);
        for l in 0..config.n_layers {
            let mut pair = |stem: &str| -> Result<(Tensor, Tensor)> {
                let p = format!("transformer.layer.{l}.{stem}");
                Ok((take(&format!("{p}.weight"))?, take(&format!("{p}.bias"))?))
            };
            layers.push(LayerWeights {
                q: pair("attention.q_lin")?,
                k: pair("attention.k_lin")?,
                v: pair("attention.v_lin")?,
                out: pair("attention.out_lin")?,
                sa_ln: pair("sa_layer_norm")?,
                lin1: pair("ffn.lin1")?,
                lin2: pair("ffn.lin2")?,
                out_ln: pair("output_layer_norm")?,
            });
        }
        Ok(Self { config, word_emb, pos_emb, emb_ln, layers })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// All weights are finite.
    pub fn weights_finite(&self) -> bool {
        let mut all = vec![&self.word_emb, &self.pos_emb, &self.emb_ln.0, &self.emb_ln.1];
        for l in &self.layers {
            for (w, b) in [&l.q, &l.k, &l.v, &l.out, &l.sa_ln, &l.lin1, &l.lin2, &l.out_ln] {
                all.push(w);
                all.push(b);
            }
        }
        all.into_iter().all(Tensor::is_finite)
    }

    /// Output projection of `layer` as `(weight [d × d], bias [d])`; used for head decomposition.
    pub fn attn_output_projection(&self, layer: usize) -> Option<(&Tensor, &Tensor)> {
        self.layers.get(layer).map(|l| (&l.out.0, &l.out.1))
    }

    /// Token + position embeddings followed by the embedding layer norm.
    pub fn embed(&self, ids: &[u32]) -> Result<Tensor> {
        let d = self.config.d_model;
        if ids.is_empty() {
            return Err(Error::Shape("cannot embed an empty sequence".into()));
        }
        if ids.len() > self.config.max_positions {
            return Err(Error::Shape(format!(
                "sequence length {} exceeds max_positions {}",
                ids.len(),
                self.config.max_positions
            )));
        }
        let mut x = Tensor::zeros(vec![ids.len(), d])?;
        for (pos, &id) in ids.iter().enumerate() {
            let id = id as usize;
            if id >= self.config.vocab_size {
                return Err(Error::Shape(format!("token id {id} outside vocab of {}", self.config.vocab_size)));
            }
            let (w, p) = (self.word_emb.row(id), self.pos_emb.row(pos));
            for ((o, a), b) in x.row_mut(pos).iter_mut().zip(w).zip(p) {
                *o = a + b;
            }
            layer_norm_row(x.row_mut(pos), self.emb_ln.0.data(), self.emb_ln.1.data(), self.config.ln_eps);
        }
        Ok(x)
    }

    pub fn forward_encoding(
        &self,
        enc: &Encoding,
        capture: &Capture,
        patch: Option<PatchSpec<'_>>,
    ) -> Result<ForwardOutput> {
        self.forward(&enc.ids, &enc.attention_mask, capture, patch)
    }

    pub fn forward(
        &self,
        ids: &[u32],
        mask: &[u8],
        capture: &Capture,
        patch: Option<PatchSpec<'_>>,
    ) -> Result<ForwardOutput> {
        let x = self.embed(ids)?;
        self.forward_from(0, x, mask, capture, patch)
    }

    /// Runs layers `start_layer..` on a given residual stream.
    ///
    /// With `resid` taken from a clean run's `resid_pre` cache this reproduces
    /// that run bit for bit, so patched runs can skip the untouched prefix.
    pub fn forward_from(
        &self,
        start_layer: usize,
        resid: Tensor,
        mask: &[u8],
        capture: &Capture,
        patch: Option<PatchSpec<'_>>,
    ) -> Result<ForwardOutput> {
        let cfg = &self.config;
        let seq = resid.shape()[0];
        if resid.shape() != [seq, cfg.d_model] {
            return Err(Error::Shape(format!(
                "residual stream shape {:?} is not [L x {}]",
                resid.shape(),
                cfg.d_model
            )));
        }
        if start_layer > cfg.n_layers {
            return Err(Error::Shape(format!("start layer {start_layer} beyond {} layers", cfg.n_layers)));
        }
        if mask.len() != seq {
            return Err(Error::Shape(format!("attention mask length {} != sequence length {seq}", mask.len())));
        }
        let keep: Vec<bool> = mask.iter().map(|&m| m != 0).collect();
        if !keep.iter().any(|&k| k) {
            return Err(Error::Shape("attention mask hides every position".into()));
        }
        if let Some(p) = &patch {
            self.validate_patch(p, seq, start_layer)?;
        }

        let mut cache = ActivationCache::default();
        let mut x = resid;
        for l in start_layer..cfg.n_layers {
            let addr = |site, head| SiteAddr { layer: l, site, head };
            self.hook(addr(Site::ResidPre, None), &mut x, patch, capture, &mut cache);
            let w = &self.layers[l];

            let mut attn = self.attention(l, w, &x, &keep, patch, capture, &mut cache)?;
            self.hook(addr(Site::AttnOut, None), &mut attn, patch, capture, &mut cache);

            let mut h = x;
            for (o, a) in h.data_mut().iter_mut().zip(attn.data()) {
                *o += a;
            }
            for r in 0..seq {
                layer_norm_row(h.row_mut(r), w.sa_ln.0.data(), w.sa_ln.1.data(), cfg.ln_eps);
            }

            let mut ff = linear(&h, &w.lin1.0, Some(&w.lin1.1))?;
            for v in ff.data_mut() {
                *v = numerics::gelu_scalar(*v);
            }
            let mut mlp = linear(&ff, &w.lin2.0, Some(&w.lin2.1))?;
            self.hook(addr(Site::MlpOut, None), &mut mlp, patch, capture, &mut cache);

            for (o, m) in h.data_mut().iter_mut().zip(mlp.data()) {
                *o += m;
            }
            for r in 0..seq {
                layer_norm_row(h.row_mut(r), w.out_ln.0.data(), w.out_ln.1.data(), cfg.ln_eps);
            }
            x = h;
        }
        Ok(ForwardOutput { hidden: x, cache })
    }

    #[allow(clippy::too_many_arguments)]
    fn attention(
        &self,
        layer: usize,
        w: &LayerWeights,
        x: &Tensor,
        keep: &[bool],
        patch: Option<PatchSpec<'_>>,
        capture: &Capture,
        cache: &mut ActivationCache,
    ) -> Result<Tensor> {
        let cfg = &self.config;
        let (seq, d, dh) = (x.shape()[0], cfg.d_model, cfg.d_head());
        let scale = 1.0 / libm::sqrtf(dh as f32);
        let mut q = linear(x, &w.q.0, Some(&w.q.1))?;
        for v in q.data_mut() {
            *v *= scale;
        }
        let k = linear(x, &w.k.0, Some(&w.k.1))?;
        let v = linear(x, &w.v.0, Some(&w.v.1))?;

        let mut concat = Tensor::zeros(vec![seq, d])?;
        let mut scores = vec![0.0f32; seq];
        for h in 0..cfg.n_heads {
            let cols = h * dh..(h + 1) * dh;
            let mut ctx = Tensor::zeros(vec![seq, dh])?;
            for i in 0..seq {
                let qi = &q.row(i)[cols.clone()];
                for (j, s) in scores.iter_mut().enumerate() {
                    *s = dot(qi, &k.row(j)[cols.clone()]);
                }
                masked_softmax_in_place(&mut scores, keep);
                let out = ctx.row_mut(i);
                for (j, &p) in scores.iter().enumerate() {
                    if p == 0.0 {
                        continue;
                    }
                    for (o, &vv) in out.iter_mut().zip(&v.row(j)[cols.clone()]) {
                        *o += p * vv;
                    }
                }
            }
            self.hook(SiteAddr { layer, site: Site::HeadOut, head: Some(h) }, &mut ctx, patch, capture, cache);
            for i in 0..seq {
                concat.row_mut(i)[cols.clone()].copy_from_slice(ctx.row(i));
            }
        }
        linear(&concat, &w.out.0, Some(&w.out.1))
    }

    fn hook(
        &self,
        addr: SiteAddr,
        act: &mut Tensor,
        patch: Option<PatchSpec<'_>>,
        capture: &Capture,
        cache: &mut ActivationCache,
    ) {
        if let Some(p) = patch {
            for t in p.targets.iter().filter(|t| t.addr() == addr) {
                // shapes were checked up front in validate_patch
                let src = p.source.get(&addr).expect("validated patch source");
                match t.position {
                    Some(pos) => act.row_mut(pos).copy_from_slice(src.row(pos)),
                    None => act.data_mut().copy_from_slice(src.data()),
                }
            }
        }
        if capture.contains(addr.site) {
            cache.insert(addr, act.clone());
        }
    }

    fn validate_patch(&self, p: &PatchSpec<'_>, seq: usize, start_layer: usize) -> Result<()> {
        let cfg = &self.config;
        for t in p.targets {
            if (t.site == Site::HeadOut) != t.head.is_some() {
                return Err(Error::Patch(format!("{t:?}: head index required exactly for head_out")));
            }
            if t.layer >= cfg.n_layers || t.layer < start_layer {
                return Err(Error::Patch(format!(
                    "{t:?}: layer outside the executed range {start_layer}..{}",
                    cfg.n_layers
                )));
            }
            if let Some(h) = t.head {
                if h >= cfg.n_heads {
                    return Err(Error::Patch(format!("{t:?}: head out of range (n_heads {})", cfg.n_heads)));
                }
            }
            if let Some(pos) = t.position {
                if pos >= seq {
                    return Err(Error::Patch(format!("{t:?}: position out of range for length {seq}")));
                }
            }
            let width = if t.site == Site::HeadOut { cfg.d_head() } else { cfg.d_model };
            let src = p
                .source
                .get(&t.addr())
                .ok_or_else(|| Error::Patch(format!("{t:?}: activation not present in the source cache")))?;
            if src.shape() != [seq, width] {
                return Err(Error::Patch(format!(
                    "{t:?}: source activation {:?} does not match destination [{seq} x {width}]",
                    src.shape()
                )));
            }
        }
        Ok(())
    }
}

/// Dot product of two pooled embeddings.
pub fn relevance_score(query_cls: &[f32], doc_cls: &[f32]) -> Result<f32> {
    if query_cls.len() != doc_cls.len() {
        return Err(Error::Shape(format!("embedding dimensions differ: {} vs {}", query_cls.len(), doc_cls.len())));
    }
    Ok(dot(query_cls, doc_cls))
}
