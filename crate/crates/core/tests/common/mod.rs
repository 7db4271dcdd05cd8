// SPDX-License-Identifier: MIT OR Apache-2.0

#![allow(dead_code)]

use patchlens_core::{Model, ModelConfig, Tensor, Vocab, WeightStore};
use patchlens_testkit::{RawModel, TinyConfig};

pub fn vocab() -> Vocab {
    Vocab::from_text(&patchlens_testkit::fixture_vocab_text()).unwrap()
}

pub fn config(c: &TinyConfig) -> ModelConfig {
    ModelConfig {
        n_layers: c.n_layers,
        n_heads: c.n_heads,
        d_model: c.d_model,
        d_ff: c.d_ff,
        vocab_size: c.vocab_size,
        max_positions: c.max_positions,
        ln_eps: c.ln_eps as f32,
    }
}

pub fn build(raw: &RawModel) -> Model {
    let mut store = WeightStore::new();
    for (name, (shape, data)) in &raw.tensors {
        store.insert(name.clone(), Tensor::new(shape.clone(), data.clone()).unwrap());
    }
    Model::from_weights(config(&raw.cfg), store).unwrap()
}

pub fn tiny(seed: u64) -> (RawModel, Model) {
    let raw = patchlens_testkit::random_model(TinyConfig::tiny(vocab().len()), seed);
    let model = build(&raw);
    (raw, model)
}

pub fn to_f64(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|i| t.row(i).iter().map(|&v| f64::from(v)).collect()).collect()
}

pub fn max_rel_err(got: &[f32], want: &[f64]) -> f64 {
    let scale = want.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    got.iter().zip(want).map(|(g, w)| (f64::from(*g) - w).abs() / scale).fold(0.0, f64::max)
}
