use mma_core::decoding::{beam_search, decode, BeamConfig, DecodeOutput, HeadSync, NullLm, SearchMode, Standard};
use mma_core::model::infer::BoundarySearch;
use mma_core::model::{Model, ModelConfig, Vocab};
use mma_core::numerics::{RngStreams, Tensor};
use rand::Rng;

fn cfg(d_lm: usize) -> ModelConfig {
    ModelConfig {
        d_model: 24,
        d_ff: 32,
        heads: 2,
        ma_heads: 3,
        ca_heads: 1,
        enc_layers: 1,
        dec_layers: 3,
        d_lm,
        chunk_width: 2,
        ..Default::default()
    }
}

fn frames(rows: usize, seed: u64) -> Tensor {
    let mut rng = RngStreams::new(seed).stream("frames");
    Tensor::matrix(rows, 8, (0..rows * 8).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Makes every MA head's selection probability constant: `sigmoid(r)`.
fn pin_heads(model: &mut Model, r: impl Fn(usize, usize) -> f32) {
    let layers: Vec<_> = model.params.decoder.iter().filter_map(|l| l.mma).collect();
    for (li, m) in layers.into_iter().enumerate() {
        model.store.get_mut(m.w_s).data.iter_mut().for_each(|x| *x = 0.0);
        for (h, x) in model.store.get_mut(m.r).data.iter_mut().enumerate() {
            *x = r(li, h);
        }
    }
}

fn beam(b: usize) -> BeamConfig {
    BeamConfig { beam: b, eps_wait: 3, max_len: 12, ..Default::default() }
}

fn null(model: &Model) -> NullLm {
    NullLm { vocab_size: model.config.vocab_size }
}

#[test]
fn always_active_heads_make_both_searches_agree() {
    let mut model = Model::new(cfg(1), &RngStreams::new(2)).unwrap();
    pin_heads(&mut model, |_, _| 10.0);
    let x = frames(30, 3);
    let a = decode(&model, &x, &beam(3), SearchMode::HeadSync, &null(&model)).unwrap();
    let b = decode(&model, &x, &beam(3), SearchMode::Standard, &null(&model)).unwrap();
    assert_eq!(a.best().tokens, b.best().tokens);
    assert_eq!(a.best().score, b.best().score);
    assert_eq!(a.best().forced_count(), 0);
    assert!(a.streamable() && b.streamable());
    for step in &a.best().boundary_log {
        assert!(step.iter().all(|e| e.t == 1));
    }
}

#[test]
fn dead_head_is_forced_only_by_head_sync() {
    let mut model = Model::new(cfg(1), &RngStreams::new(2)).unwrap();
    pin_heads(&mut model, |li, h| if li == 1 && h == 2 { -10.0 } else { 10.0 });
    let x = frames(30, 3);
    let t = model.config.encoded_len(30);
    let std = decode(&model, &x, &beam(2), SearchMode::Standard, &null(&model)).unwrap();
    let dead: Vec<_> = std.best().boundary_log.iter().flatten().filter(|e| e.layer == 2 && e.head == 2).collect();
    assert!(!dead.is_empty());
    assert!(dead.iter().all(|e| e.t == t + 1 && !e.forced));
    assert!(!std.streamable());
    assert_eq!(std.best().frames_read.iter().max(), Some(&t));

    let sync = decode(&model, &x, &beam(2), SearchMode::HeadSync, &null(&model)).unwrap();
    let best = sync.best();
    assert_eq!(best.forced_count(), best.boundary_log.len());
    assert!(best.boundary_log.iter().flatten().all(|e| e.t == 1));
    assert!(sync.streamable());
    assert!(best.frames_read.iter().all(|&r| r <= 3));
}

#[test]
fn greedy_beam_matches_argmax_chain() {
    for seed in 0..3 {
        let model = Model::new(cfg(1), &RngStreams::new(seed)).unwrap();
        let x = frames(24, seed + 10);
        let bc = BeamConfig { alpha_lm: 0.0, beta_len: 0.0, ..beam(1) };
        let out = decode(&model, &x, &bc, SearchMode::HeadSync, &null(&model)).unwrap();

        let mem = model.memory(&x).unwrap();
        let search = HeadSync { eps_wait: bc.eps_wait };
        let mut state = model.initial_state();
        let mut tokens = vec![Vocab::SOS];
        for _ in 0..bc.max_len {
            let res = model.step_batch(&mem, &[&state], &[*tokens.last().unwrap()], &search).unwrap().remove(0);
            let next = (0..model.config.vocab_size)
                .filter(|&v| v != Vocab::PAD && v != Vocab::SOS)
                .max_by(|&a, &b| res.log_probs[a].total_cmp(&res.log_probs[b]).then(b.cmp(&a)))
                .unwrap();
            tokens.push(next);
            state = res.state;
            if next == Vocab::EOS {
                break;
            }
        }
        assert_eq!(out.best().tokens, tokens, "seed {seed}");
    }
}

#[test]
fn wider_beam_never_scores_lower_than_greedy() {
    for seed in 0..3 {
        let model = Model::new(cfg(0), &RngStreams::new(seed)).unwrap();
        let x = frames(24, seed);
        let one = decode(&model, &x, &beam(1), SearchMode::HeadSync, &null(&model)).unwrap();
        let four = decode(&model, &x, &beam(4), SearchMode::HeadSync, &null(&model)).unwrap();
        if !one.unfinished && !four.unfinished {
            assert!(four.best().score >= one.best().score - 1e-9, "seed {seed}");
        }
    }
}

#[test]
fn scores_decompose_into_model_lm_and_length_terms() {
    let model = Model::new(cfg(1), &RngStreams::new(5)).unwrap();
    let bc = BeamConfig { alpha_lm: 0.3, beta_len: 1.5, ..beam(3) };
    let out = decode(&model, &frames(20, 1), &bc, SearchMode::HeadSync, &null(&model)).unwrap();
    for h in &out.ranked {
        let want = h.log_prob_mma + 0.3f32 as f64 * h.lm_score + 1.5 * h.emitted() as f64;
        assert!((h.score - want).abs() < 1e-9);
        let lm = -(model.config.vocab_size as f64).ln() * h.emitted() as f64;
        assert!((h.lm_score - lm).abs() < 1e-4);
    }
}

#[test]
fn decoding_is_deterministic() {
    let model = Model::new(cfg(1), &RngStreams::new(8)).unwrap();
    let x = frames(28, 2);
    let a = decode(&model, &x, &beam(3), SearchMode::HeadSync, &null(&model)).unwrap();
    let b = decode(&model, &x, &beam(3), SearchMode::HeadSync, &null(&model)).unwrap();
    assert_eq!(a.best().tokens, b.best().tokens);
    assert_eq!(a.q_table, b.q_table);
}

/// Spread, per-head monotonicity and the read horizon on every step of
/// every ranked hypothesis.
fn check_invariants(out: &DecodeOutput, eps: usize, sync: bool) {
    let t = out.num_frames;
    for h in &out.ranked {
        let mut last: std::collections::HashMap<(usize, usize), usize> = Default::default();
        for (i, step) in h.boundary_log.iter().enumerate() {
            let mut layers: Vec<usize> = step.iter().map(|e| e.layer).collect();
            layers.dedup();
            let mut horizon = 0;
            for &l in &layers {
                let ev: Vec<_> = step.iter().filter(|e| e.layer == l).collect();
                let found: Vec<usize> = ev.iter().filter(|e| e.t <= t).map(|e| e.t).collect();
                if sync {
                    assert!(found.is_empty() || found.len() == ev.len());
                    if let (Some(lo), Some(hi)) = (found.iter().min(), found.iter().max()) {
                        assert!(hi - lo < eps, "spread {lo}..{hi} at step {i}");
                    }
                    let first = ev.iter().filter(|e| !e.forced && e.t <= t).map(|e| e.t).min();
                    horizon = horizon.max(first.map_or(t, |f| (f + eps - 1).min(t)));
                }
                for e in ev {
                    if e.t <= t {
                        let prev = last.insert((e.layer, e.head), e.t).unwrap_or(1);
                        assert!(e.t >= prev, "head ({}, {}) moved back", e.layer, e.head);
                    }
                }
            }
            if sync {
                assert!(h.frames_read[i] <= horizon);
            }
        }
    }
}

#[test]
fn search_invariants_hold_on_random_models() {
    let mut rng = RngStreams::new(99).stream("offsets");
    let (mut forced, mut silent) = (0, 0);
    for seed in 0..12u64 {
        let mut model = Model::new(cfg((seed % 2) as usize), &RngStreams::new(seed)).unwrap();
        let offsets: Vec<f32> = (0..20).map(|_| rng.gen_range(-4.0..4.0)).collect();
        let layers: Vec<_> = model.params.decoder.iter().filter_map(|l| l.mma).collect();
        for (li, m) in layers.into_iter().enumerate() {
            for (h, x) in model.store.get_mut(m.r).data.iter_mut().enumerate() {
                *x = offsets[li * 3 + h];
            }
        }
        let x = frames(20 + 4 * (seed as usize % 5), seed + 100);
        for eps in [1, 2, 4] {
            let bc = BeamConfig { eps_wait: eps, ..beam(3) };
            let search: &dyn BoundarySearch = &HeadSync { eps_wait: eps };
            let mem = model.memory(&x).unwrap();
            let out = beam_search(&model, &mem, &bc, search, &null(&model)).unwrap();
            check_invariants(&out, eps, true);
            forced += out.best().forced_count();
            silent += out.best().boundary_log.iter().flatten().filter(|e| e.t > out.num_frames).count();
        }
        let mem = model.memory(&x).unwrap();
        let out = beam_search(&model, &mem, &beam(3), &Standard, &null(&model)).unwrap();
        check_invariants(&out, 0, false);
    }
    assert!(forced > 0 && silent > 0, "forced {forced}, silent {silent}");
}

#[test]
fn empty_input_is_rejected() {
    let model = Model::new(cfg(1), &RngStreams::new(0)).unwrap();
    assert!(decode(&model, &frames(0, 0), &beam(2), SearchMode::HeadSync, &null(&model)).is_err());
}
