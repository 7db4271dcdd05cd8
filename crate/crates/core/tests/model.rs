// SPDX-License-Identifier: MIT OR Apache-2.0

mod common;

use patchlens_core::numerics::linear;
use patchlens_core::{
    relevance_score, Capture, Encoding, HookPoint, Model, ModelConfig, PatchSpec, Site, SiteAddr, Tensor, TriplePatcher,
};
use patchlens_testkit::oracle::{self, Point, Substitution};
use patchlens_testkit::random_ids;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const FIRST_WORD_ID: u32 = 5;

fn ids(rng: &mut ChaCha8Rng, len: usize, vocab: u32) -> Vec<u32> {
    let v = common::vocab();
    random_ids(rng, len, v.cls_id, v.sep_id, FIRST_WORD_ID, vocab)
}

fn point(layer: usize, site: Site, head: Option<usize>) -> Point {
    match site {
        Site::ResidPre => Point::ResidPre(layer),
        Site::AttnOut => Point::AttnOut(layer),
        Site::MlpOut => Point::MlpOut(layer),
        Site::HeadOut => Point::Head(layer, head.unwrap()),
    }
}

#[test]
fn forward_matches_straight_line_reference() {
    let (raw, model) = common::tiny(11);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for len in [2, 7, 19] {
        let ids = ids(&mut rng, len, raw.cfg.vocab_size as u32);
        let mut mask = vec![1u8; len];
        if len > 4 {
            mask[len - 2] = 0;
        }
        let out = model.forward(&ids, &mask, &Capture::all(), None).unwrap();
        let want = oracle::run(&raw, &ids, &mask, &[]);
        let flat = |m: &oracle::Matrix| m.concat();
        assert!(common::max_rel_err(out.hidden.data(), &flat(&want.hidden)) < 1e-5);
        for (addr, t) in out.cache.iter() {
            let w = want.at(point(addr.layer, addr.site, addr.head));
            let err = common::max_rel_err(t.data(), &flat(w));
            assert!(err < 1e-5, "{addr:?} err {err}");
        }
        assert_eq!(out.cache.len(), raw.cfg.n_layers * (3 + raw.cfg.n_heads));
    }
}

#[test]
fn resume_from_clean_residual_is_bit_identical() {
    let (raw, model) = common::tiny(12);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let ids = ids(&mut rng, 13, raw.cfg.vocab_size as u32);
    let mask = vec![1u8; ids.len()];
    let full = model.forward(&ids, &mask, &Capture::all(), None).unwrap();
    for l in 0..raw.cfg.n_layers {
        let resid = full.cache.get(&SiteAddr { layer: l, site: Site::ResidPre, head: None }).unwrap().clone();
        let part = model.forward_from(l, resid, &mask, &Capture::none(), None).unwrap();
        assert_eq!(part.hidden.data(), full.hidden.data());
    }
}

/// Builds `(query_cls, dest, source)` from random ids of equal length.
fn setup(model: &Model, seed: u64, len: usize) -> (Vec<f32>, Encoding, Encoding) {
    let vocab = model.config().vocab_size as u32;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let q = ids(&mut rng, 5, vocab);
    let dest = ids(&mut rng, len, vocab);
    let mut src = dest.clone();
    for slot in src.iter_mut().take(len - 1).skip(1).step_by(3) {
        *slot = ids(&mut rng, 3, vocab)[1];
    }
    let qcls = model.forward(&q, &vec![1; q.len()], &Capture::none(), None).unwrap().cls_embedding();
    (qcls, Encoding::from_ids(dest), Encoding::from_ids(src))
}

#[test]
fn patched_scores_match_reference_substitution() {
    let (raw, model) = common::tiny(21);
    let mut worst = 0.0f64;
    let mut checked = 0;
    for seed in 0..4 {
        let (qcls, dest, src) = setup(&model, seed, 9);
        // f32 score noise is ~1e-6, so only well-separated pairs can resolve impacts to 1e-5
        let Ok(patcher) = TriplePatcher::new(&model, qcls.clone(), dest.clone(), &src, 0.25) else {
            continue;
        };
        checked += 1;
        let q64: Vec<f64> = qcls.iter().map(|&v| f64::from(v)).collect();
        let mask = vec![1u8; dest.len()];
        let src_trace = oracle::run(&raw, &src.ids, &mask, &[]);
        let dest_score = oracle::dot(&q64, oracle::run(&raw, &dest.ids, &mask, &[]).cls());
        let src_score = oracle::dot(&q64, src_trace.cls());

        let mut targets: Vec<HookPoint> = Site::BLOCK.iter().flat_map(|&s| patcher.block_targets(s).unwrap()).collect();
        targets.extend(patcher.head_targets());
        for t in targets {
            let p = point(t.layer, t.site, t.head);
            let sub = Substitution { point: p, position: t.position, values: src_trace.at(p).clone() };
            let patched = oracle::dot(&q64, oracle::run(&raw, &dest.ids, &mask, &[sub]).cls());
            let cell = patcher.cell(t).unwrap();
            let want = (patched - dest_score) / (src_score - dest_score);
            worst = worst.max((cell.impact - want).abs());
            assert!((f64::from(cell.score_patched) - patched).abs() < 1e-5 * (1.0 + patched.abs()), "{t:?}");
        }
    }
    assert!(checked >= 2);
    assert!(worst < 1e-5, "worst impact deviation {worst}");
}

#[test]
fn identity_and_completeness() {
    let (_, model) = common::tiny(31);
    let (qcls, dest, src) = setup(&model, 7, 11);
    let patcher = TriplePatcher::new(&model, qcls.clone(), dest.clone(), &src, 1e-6).unwrap();
    let s = patcher.scores();

    // source equal to destination changes nothing
    let self_patch = TriplePatcher::new(&model, qcls.clone(), dest.clone(), &src, 1e-6).unwrap();
    let dest_cache = model.forward_encoding(&dest, &Capture::all(), None).unwrap().cache;
    for t in self_patch.block_targets(Site::AttnOut).unwrap() {
        let out = model
            .forward_encoding(&dest, &Capture::none(), Some(PatchSpec { targets: &[t], source: &dest_cache }))
            .unwrap();
        assert_eq!(relevance_score(&qcls, &out.cls_embedding()).unwrap(), s.score_baseline);
    }

    // every position of the first residual stream reproduces the source run
    let all: Vec<HookPoint> = (0..patcher.seq_len()).map(|p| HookPoint::block(0, Site::ResidPre, p)).collect();
    let (patched, impact) = patcher.impact_of(&all).unwrap();
    assert_eq!(patched, s.score_perturbed);
    assert!((impact - 1.0).abs() < 1e-9);

    // same for the last layer's residual stream, and for every head of every layer
    let last = model.config().n_layers - 1;
    let all: Vec<HookPoint> = (0..patcher.seq_len()).map(|p| HookPoint::block(last, Site::ResidPre, p)).collect();
    assert_eq!(patcher.patched_score(&all).unwrap(), s.score_perturbed);
    let heads = patcher.head_targets();
    let (_, impact) = patcher.impact_of(&heads).unwrap();
    assert!((impact - 1.0).abs() < 1e-4, "all heads impact {impact}");
}

#[test]
fn heads_decompose_attention_output() {
    let (raw, model) = common::tiny(41);
    let cfg = model.config().clone();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let ids = ids(&mut rng, 10, raw.cfg.vocab_size as u32);
    let out = model.forward(&ids, &vec![1; ids.len()], &Capture::all(), None).unwrap();
    let dh = cfg.d_head();
    for l in 0..cfg.n_layers {
        let (w, b) = model.attn_output_projection(l).unwrap();
        let attn = out.cache.get(&SiteAddr { layer: l, site: Site::AttnOut, head: None }).unwrap();
        let mut sum = vec![0.0f64; attn.len()];
        for h in 0..cfg.n_heads {
            let ctx = out.cache.get(&SiteAddr { layer: l, site: Site::HeadOut, head: Some(h) }).unwrap();
            // project through this head's slice of the output weight
            let mut wh = vec![0.0f32; cfg.d_model * dh];
            for o in 0..cfg.d_model {
                wh[o * dh..(o + 1) * dh].copy_from_slice(&w.row(o)[h * dh..(h + 1) * dh]);
            }
            let part = linear(ctx, &Tensor::matrix(cfg.d_model, dh, wh).unwrap(), None).unwrap();
            for (s, v) in sum.iter_mut().zip(part.data()) {
                *s += f64::from(*v);
            }
        }
        for (i, s) in sum.iter_mut().enumerate() {
            *s += f64::from(b.data()[i % cfg.d_model]);
        }
        assert!(common::max_rel_err(attn.data(), &sum) < 1e-5);
    }
}

#[test]
fn masked_positions_do_not_leak() {
    let (raw, model) = common::tiny(51);
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut ids = ids(&mut rng, 12, raw.cfg.vocab_size as u32);
    let mut mask = vec![1u8; ids.len()];
    mask[8..12].fill(0);
    let a = model.forward(&ids, &mask, &Capture::none(), None).unwrap();
    for (p, id) in ids.iter_mut().enumerate().skip(8) {
        *id = FIRST_WORD_ID + p as u32;
    }
    let b = model.forward(&ids, &mask, &Capture::none(), None).unwrap();
    for p in 0..8 {
        assert_eq!(a.hidden.row(p), b.hidden.row(p));
    }
}

#[test]
fn invalid_patches_are_rejected() {
    let (_, model) = common::tiny(61);
    let (qcls, dest, src) = setup(&model, 2, 6);
    let patcher = TriplePatcher::new(&model, qcls, dest.clone(), &src, 1e-6).unwrap();
    let cache = patcher.source_cache();
    let bad = [
        HookPoint { layer: 9, site: Site::AttnOut, head: None, position: Some(0) },
        HookPoint { layer: 0, site: Site::AttnOut, head: None, position: Some(6) },
        HookPoint { layer: 0, site: Site::HeadOut, head: Some(5), position: None },
        HookPoint { layer: 0, site: Site::AttnOut, head: Some(0), position: None },
    ];
    for t in bad {
        let r = model.forward_encoding(&dest, &Capture::none(), Some(PatchSpec { targets: &[t], source: cache }));
        assert!(r.is_err(), "{t:?}");
    }
    assert!(HookPoint::new(0, Site::HeadOut, None, None).is_err());
    let short = Encoding::from_ids(dest.ids[..4].to_vec());
    let r = model.forward_encoding(
        &short,
        &Capture::none(),
        Some(PatchSpec { targets: &[HookPoint::block(0, Site::MlpOut, 0)], source: cache }),
    );
    assert!(r.is_err());
}

#[test]
fn degenerate_triples_are_refused() {
    let (_, model) = common::tiny(71);
    let (qcls, dest, _) = setup(&model, 3, 6);
    assert!(TriplePatcher::new(&model, qcls, dest.clone(), &dest, 1e-6).is_err());
}

#[test]
fn encoder_size() {
    assert_eq!(ModelConfig::tas_b().parameter_count(), 66_362_880);
}
