// SPDX-License-Identifier: MIT OR Apache-2.0

//! Test-only support: fixture paths, seeded tiny models, a synthetic desk
//! corpus and a straight-line `f64` reference forward pass.
//!
//! Nothing here calls into the engine; the oracle reads raw named weight
//! buffers and recomputes every intermediate with plain loops.

use std::collections::BTreeMap;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name)
}

pub fn fixture_vocab_text() -> String {
    std::fs::read_to_string(fixture("vocab.txt")).expect("vocab fixture")
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TinyConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_positions: usize,
    pub ln_eps: f64,
}

impl TinyConfig {
    /// 2 layers, 2 heads, width 8.
    pub fn tiny(vocab_size: usize) -> Self {
        Self { n_layers: 2, n_heads: 2, d_model: 8, d_ff: 16, vocab_size, max_positions: 96, ln_eps: 1e-12 }
    }
}

/// Named weight buffers with their shapes.
#[derive(Debug, Clone)]
pub struct RawModel {
    pub cfg: TinyConfig,
    pub tensors: BTreeMap<String, (Vec<usize>, Vec<f32>)>,
}

impl RawModel {
    fn get(&self, name: &str) -> &[f32] {
        &self.tensors.get(name).unwrap_or_else(|| panic!("missing {name}")).1
    }
}

/// Seeded random weights in the DistilBERT naming scheme.
pub fn random_model(cfg: TinyConfig, seed: u64) -> RawModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0f32, 1.0).unwrap();
    let mut tensors = BTreeMap::new();
    let mut add = |name: String, shape: Vec<usize>, scale: f32, offset: f32, rng: &mut ChaCha8Rng| {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| offset + scale * normal.sample(rng)).collect();
        tensors.insert(name, (shape, data));
    };
    let (d, ff) = (cfg.d_model, cfg.d_ff);
    add("embeddings.word_embeddings.weight".into(), vec![cfg.vocab_size, d], 1.0, 0.0, &mut rng);
    add("embeddings.position_embeddings.weight".into(), vec![cfg.max_positions, d], 0.3, 0.0, &mut rng);
    add("embeddings.LayerNorm.weight".into(), vec![d], 0.1, 1.0, &mut rng);
    add("embeddings.LayerNorm.bias".into(), vec![d], 0.1, 0.0, &mut rng);
    let wscale = 1.0 / (d as f32).sqrt();
    for l in 0..cfg.n_layers {
        let p = format!("transformer.layer.{l}");
        for lin in ["q_lin", "k_lin", "v_lin", "out_lin"] {
            add(format!("{p}.attention.{lin}.weight"), vec![d, d], wscale, 0.0, &mut rng);
            add(format!("{p}.attention.{lin}.bias"), vec![d], 0.1, 0.0, &mut rng);
        }
        for ln in ["sa_layer_norm", "output_layer_norm"] {
            add(format!("{p}.{ln}.weight"), vec![d], 0.1, 1.0, &mut rng);
            add(format!("{p}.{ln}.bias"), vec![d], 0.1, 0.0, &mut rng);
        }
        add(format!("{p}.ffn.lin1.weight"), vec![ff, d], wscale, 0.0, &mut rng);
        add(format!("{p}.ffn.lin1.bias"), vec![ff], 0.1, 0.0, &mut rng);
        add(format!("{p}.ffn.lin2.weight"), vec![d, ff], 1.0 / (ff as f32).sqrt(), 0.0, &mut rng);
        add(format!("{p}.ffn.lin2.bias"), vec![d], 0.1, 0.0, &mut rng);
    }
    RawModel { cfg, tensors }
}

/// Random token ids in `[first, vocab)` framed by `[CLS]`/`[SEP]`.
pub fn random_ids(rng: &mut impl Rng, len: usize, cls: u32, sep: u32, first: u32, vocab: u32) -> Vec<u32> {
    let mut ids = vec![cls];
    ids.extend((0..len.saturating_sub(2)).map(|_| rng.gen_range(first..vocab)));
    ids.push(sep);
    ids
}

/// Whole words of the fixture vocab usable for synthetic text.
pub fn fixture_words() -> Vec<String> {
    fixture_vocab_text()
        .lines()
        .filter(|t| t.len() >= 2 && t.chars().all(|c| c.is_ascii_lowercase()))
        .filter(|t| !["gu", "un", "well"].contains(t))
        .map(str::to_string)
        .collect()
}

/// `(id, text)`.
pub type Row = (String, String);

/// A seeded synthetic corpus: `(queries, docs)` as `(id, text)` pairs.
///
/// Each query has 2-4 terms; about half the documents mention one or more of
/// some query's terms so that replacement perturbations have material.
pub fn desk_corpus(n_queries: usize, n_docs: usize, seed: u64) -> (Vec<Row>, Vec<Row>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let words = fixture_words();
    let queries: Vec<(String, String)> = (0..n_queries)
        .map(|i| {
            let n = rng.gen_range(2..=4);
            let terms: Vec<&str> = words.choose_multiple(&mut rng, n).map(String::as_str).collect();
            (format!("q{i:03}"), terms.join(" "))
        })
        .collect();
    let docs = (0..n_docs)
        .map(|i| {
            let n = rng.gen_range(8..=30);
            let mut body: Vec<String> = (0..n).map(|_| words.choose(&mut rng).unwrap().clone()).collect();
            if rng.gen_bool(0.6) {
                let q = &queries[rng.gen_range(0..queries.len())].1;
                for t in q.split(' ') {
                    if rng.gen_bool(0.7) {
                        let at = rng.gen_range(0..=body.len());
                        body.insert(at, t.to_string());
                    }
                }
            }
            let mut text = body.join(" ");
            if rng.gen_bool(0.5) {
                text.push('.');
            }
            (format!("d{i:04}"), text)
        })
        .collect();
    (queries, docs)
}

pub mod oracle {
    //! Straight-line `f64` forward pass with optional substitutions.

    use super::RawModel;

    pub use statrs::function::erf::erf;

    pub type Matrix = Vec<Vec<f64>>;

    #[derive(Debug, Clone, Copy, PartialEq, Eq)]
    pub enum Point {
        ResidPre(usize),
        AttnOut(usize),
        MlpOut(usize),
        Head(usize, usize),
    }

    /// Replace `point` (one row, or every row when `position` is `None`) with `values`.
    #[derive(Debug, Clone)]
    pub struct Substitution {
        pub point: Point,
        pub position: Option<usize>,
        pub values: Matrix,
    }

    #[derive(Debug, Clone)]
    pub struct Trace {
        pub resid_pre: Vec<Matrix>,
        pub attn_out: Vec<Matrix>,
        pub mlp_out: Vec<Matrix>,
        pub head_out: Vec<Vec<Matrix>>,
        pub hidden: Matrix,
    }

    impl Trace {
        pub fn at(&self, point: Point) -> &Matrix {
            match point {
                Point::ResidPre(l) => &self.resid_pre[l],
                Point::AttnOut(l) => &self.attn_out[l],
                Point::MlpOut(l) => &self.mlp_out[l],
                Point::Head(l, h) => &self.head_out[l][h],
            }
        }

        pub fn cls(&self) -> &[f64] {
            &self.hidden[0]
        }
    }

    fn apply(point: Point, m: &mut Matrix, subs: &[Substitution]) {
        for s in subs.iter().filter(|s| s.point == point) {
            match s.position {
                Some(p) => m[p] = s.values[p].clone(),
                None => *m = s.values.clone(),
            }
        }
    }

    fn affine(x: &Matrix, w: &[f32], b: &[f32], out_dim: usize) -> Matrix {
        let in_dim = x[0].len();
        x.iter()
            .map(|row| {
                (0..out_dim)
                    .map(|o| {
                        let mut s = b[o] as f64;
                        for i in 0..in_dim {
                            s += row[i] * w[o * in_dim + i] as f64;
                        }
                        s
                    })
                    .collect()
            })
            .collect()
    }

    fn norm(row: &[f64], g: &[f32], b: &[f32], eps: f64) -> Vec<f64> {
        let n = row.len() as f64;
        let mean = row.iter().sum::<f64>() / n;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        row.iter().enumerate().map(|(i, v)| (v - mean) / (var + eps).sqrt() * g[i] as f64 + b[i] as f64).collect()
    }

    pub fn gelu(x: f64) -> f64 {
        0.5 * x * (1.0 + erf(x / std::f64::consts::SQRT_2))
    }

    /// Full forward of `ids` under `mask`, applying `subs` where they address.
    pub fn run(model: &RawModel, ids: &[u32], mask: &[u8], subs: &[Substitution]) -> Trace {
        let c = model.cfg;
        let (d, nh) = (c.d_model, c.n_heads);
        let dh = d / nh;
        let len = ids.len();
        let we = model.get("embeddings.word_embeddings.weight");
        let pe = model.get("embeddings.position_embeddings.weight");
        let mut x: Matrix = (0..len)
            .map(|p| {
                let raw: Vec<f64> = (0..d).map(|j| we[ids[p] as usize * d + j] as f64 + pe[p * d + j] as f64).collect();
                norm(&raw, model.get("embeddings.LayerNorm.weight"), model.get("embeddings.LayerNorm.bias"), c.ln_eps)
            })
            .collect();

        let mut trace =
            Trace { resid_pre: vec![], attn_out: vec![], mlp_out: vec![], head_out: vec![], hidden: vec![] };
        for l in 0..c.n_layers {
            let w = |s: &str| model.get(&format!("transformer.layer.{l}.{s}"));
            apply(Point::ResidPre(l), &mut x, subs);
            trace.resid_pre.push(x.clone());

            let q = affine(&x, w("attention.q_lin.weight"), w("attention.q_lin.bias"), d);
            let k = affine(&x, w("attention.k_lin.weight"), w("attention.k_lin.bias"), d);
            let v = affine(&x, w("attention.v_lin.weight"), w("attention.v_lin.bias"), d);
            let mut concat = vec![vec![0.0; d]; len];
            let mut heads = vec![];
            for h in 0..nh {
                let mut ctx = vec![vec![0.0; dh]; len];
                for i in 0..len {
                    let logits: Vec<f64> = (0..len)
                        .map(|j| (0..dh).map(|t| q[i][h * dh + t] * k[j][h * dh + t]).sum::<f64>() / (dh as f64).sqrt())
                        .collect();
                    let denom: f64 = (0..len).filter(|&j| mask[j] != 0).map(|j| logits[j].exp()).sum();
                    for j in (0..len).filter(|&j| mask[j] != 0) {
                        let p = logits[j].exp() / denom;
                        for t in 0..dh {
                            ctx[i][t] += p * v[j][h * dh + t];
                        }
                    }
                }
                apply(Point::Head(l, h), &mut ctx, subs);
                for i in 0..len {
                    concat[i][h * dh..(h + 1) * dh].copy_from_slice(&ctx[i]);
                }
                heads.push(ctx);
            }
            trace.head_out.push(heads);
            let mut attn = affine(&concat, w("attention.out_lin.weight"), w("attention.out_lin.bias"), d);
            apply(Point::AttnOut(l), &mut attn, subs);
            trace.attn_out.push(attn.clone());

            let h1: Matrix = (0..len)
                .map(|i| {
                    let sum: Vec<f64> = (0..d).map(|j| x[i][j] + attn[i][j]).collect();
                    norm(&sum, w("sa_layer_norm.weight"), w("sa_layer_norm.bias"), c.ln_eps)
                })
                .collect();
            let inner: Matrix = affine(&h1, w("ffn.lin1.weight"), w("ffn.lin1.bias"), c.d_ff)
                .into_iter()
                .map(|r| r.into_iter().map(gelu).collect())
                .collect();
            let mut mlp = affine(&inner, w("ffn.lin2.weight"), w("ffn.lin2.bias"), d);
            apply(Point::MlpOut(l), &mut mlp, subs);
            trace.mlp_out.push(mlp.clone());

            x = (0..len)
                .map(|i| {
                    let sum: Vec<f64> = (0..d).map(|j| h1[i][j] + mlp[i][j]).collect();
                    norm(&sum, w("output_layer_norm.weight"), w("output_layer_norm.bias"), c.ln_eps)
                })
                .collect();
        }
        trace.hidden = x;
        trace
    }

    pub fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }
}
