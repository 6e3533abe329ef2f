use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::numerics::{finite_difference_check, GradCheckConfig};
use crate::transducer::{
    init_encoder, init_frontend, init_joiner, init_predictor, EncoderKind, TokenSequence,
};

fn small_cfg() -> ModelConfig {
    ModelConfig {
        d_raw: 3,
        stack_factor: 2,
        front_dim: 3,
        d_model: 5,
        encoder_layers: 1,
        encoder_kind: EncoderKind::Recurrent,
        chunk_size: 2,
        predictor_layers: 1,
        joiner_dim: 4,
        vocab_size: 3,
        context_dim: 4,
        precision: crate::numerics::Precision::F64,
    }
}

fn small_anchor() -> AnchorConfig {
    AnchorConfig {
        bias: true,
        gating: true,
        aux_hidden: 3,
        subsegment: SubsegmentConfig {
            block: 2,
            left_ctx: 1,
            right_ctx: 1,
        },
    }
}

fn store(cfg: &ModelConfig, a: &AnchorConfig, seed: u64) -> ParamStore {
    let mut s = ParamStore::new();
    init_frontend(&mut s, cfg, seed);
    init_encoder(&mut s, cfg, seed);
    init_predictor(&mut s, cfg, seed);
    init_joiner(&mut s, cfg, seed);
    init_aux_net(&mut s, cfg, a, seed);
    init_bias_projection(&mut s, cfg, seed);
    s
}

fn rand_tensor(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
    Tensor::new(vec![r, c], (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn sequence(rng: &mut ChaCha8Rng, cfg: &ModelConfig, raw: usize) -> FeatureSequence {
    let y = TokenSequence::new(vec![1, 3], cfg.vocab_size).unwrap();
    FeatureSequence::new(rand_tensor(rng, raw, cfg.d_raw), y, 4, None).unwrap()
}

#[test]
fn zero_weight_aux_net_outputs_its_bias() {
    let cfg = small_cfg();
    let a = small_anchor();
    let mut s = store(&cfg, &a, 1);
    for n in ["aux.conv1.w", "aux.conv2.w", "aux.out.w"] {
        s.get_mut(n).unwrap().data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    let bias = vec![0.5, -1.0, 2.0, 0.25];
    s.insert("aux.out.b", Tensor::row(bias.clone()));
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut tape = Tape::new();
    let p = s.bind(&mut tape, false);
    for n in [1, 3, 7] {
        let x = tape.constant(rand_tensor(&mut rng, n, cfg.d_model));
        let c = extract_context(&mut tape, &p, x).unwrap();
        assert_eq!(tape.value(c).data(), &bias[..]);
    }
    let empty = tape.constant(Tensor::zeros(&[0, cfg.d_model]));
    assert!(extract_context(&mut tape, &p, empty).is_err());
}

#[test]
fn bias_projection_examples() {
    let cfg = small_cfg();
    let d = cfg.d_model;
    let dc = cfg.context_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = rand_tensor(&mut rng, 6, d);

    // [I; 0] with c = 0: ReLU(x).
    let mut w = vec![0.0; (d + dc) * d];
    for i in 0..d {
        w[i * d + i] = 1.0;
    }
    let mut s = ParamStore::new();
    s.insert("anchor.proj.w", Tensor::new(vec![d + dc, d], w).unwrap());
    let mut tape = Tape::new();
    let p = s.bind(&mut tape, false);
    let xv = tape.constant(x.clone());
    let c = tape.constant(Tensor::zeros(&[1, dc]));
    let y = bias_encoder_inputs(&mut tape, &p, xv, c).unwrap();
    let expect: Vec<f64> = x.data().iter().map(|v| v.max(0.0)).collect();
    assert_eq!(tape.value(y).data(), &expect[..]);

    // [0; M] with c != 0: constant over time.
    let mut w = vec![0.0; (d + dc) * d];
    for v in &mut w[d * d..] {
        *v = rng.random_range(-1.0..1.0);
    }
    let mut s = ParamStore::new();
    s.insert("anchor.proj.w", Tensor::new(vec![d + dc, d], w).unwrap());
    let mut tape = Tape::new();
    let p = s.bind(&mut tape, false);
    let xv = tape.constant(x.clone());
    let c = tape.constant(Tensor::row(rand_vec(&mut rng, dc)));
    let y = bias_encoder_inputs(&mut tape, &p, xv, c).unwrap();
    let yv = tape.value(y);
    for t in 1..yv.rows() {
        assert_eq!(yv.row_slice(t), yv.row_slice(0));
    }

    let bad = tape.constant(Tensor::zeros(&[1, dc + 1]));
    assert!(bias_encoder_inputs(&mut tape, &p, xv, bad).is_err());
}

#[test]
fn subsegment_windows() {
    let sub = SubsegmentConfig::full_scale();
    assert_eq!(sub.windows(4), vec![(0, 4, 0, 4)]);
    let w = sub.windows(9);
    assert_eq!(w.len(), 3);
    assert_eq!((w[0].0, w[0].1), (0, 4));
    assert_eq!((w[1].0, w[1].1), (4, 8));
    assert_eq!((w[2].0, w[2].1), (8, 9));
    // Left context clipped at the start; right context at the end.
    assert_eq!(w[0].2, 0);
    assert_eq!(w[2].3, 9);
    let sub = SubsegmentConfig {
        block: 2,
        left_ctx: 3,
        right_ctx: 1,
    };
    assert_eq!(sub.windows(10)[3], (6, 8, 3, 9));
}

#[test]
fn subsegment_blocks_share_embeddings() {
    let cfg = small_cfg();
    let a = small_anchor();
    let s = store(&cfg, &a, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut tape = Tape::new();
    let p = s.bind(&mut tape, false);
    let x = tape.constant(rand_tensor(&mut rng, 7, cfg.d_model));
    let blocks = subsegment_embeddings(&mut tape, &p, x, &a.subsegment).unwrap();
    assert_eq!(tape.value(blocks).rows(), 4);
    let c = tape.constant(Tensor::row(rand_vec(&mut rng, cfg.context_dim)));
    let b = frame_gates(&mut tape, c, blocks, &a.subsegment, 7).unwrap();
    let bv = tape.value(b).data().to_vec();
    assert_eq!(bv.len(), 7);
    assert_eq!(bv[0], bv[1]);
    assert_eq!(bv[4], bv[5]);
    // Same network as the context path: a window equal to the anchor gives
    // the same vector.
    let w = tape.slice_rows(x, 0, 3).unwrap();
    let direct = extract_context(&mut tape, &p, w).unwrap();
    assert_eq!(tape.value(direct).data(), tape.value(blocks).row_slice(0));
}

#[test]
fn gate_examples() {
    let c = [0.3, -1.2, 2.0];
    assert!((gate_bias(&c, &c) - GATE_MAX).abs() < 1e-15);
    assert_eq!(gate_bias(&[1.0, 0.0], &[0.0, 2.0]), 0.5);
    let neg: Vec<f64> = c.iter().map(|v| -v).collect();
    assert!((gate_bias(&c, &neg) - GATE_MIN).abs() < 1e-15);
    assert_eq!(gate_bias(&[0.0, 0.0, 0.0], &c), 0.5);
    assert!((GATE_MIN - 1.0 / (1.0 + 1f64.exp())).abs() < 1e-16);
    assert!((GATE_MAX - 1.0 / (1.0 + (-1f64).exp())).abs() < 1e-16);
}

#[test]
fn gate_scale_invariance_and_range() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..100 {
        let c = rand_vec(&mut rng, 5);
        let h = rand_vec(&mut rng, 5);
        let b = gate_bias(&c, &h);
        assert!((GATE_MIN..=GATE_MAX).contains(&b));
        for alpha in [0.1, 1.0, 10.0] {
            for beta in [0.1, 1.0, 10.0] {
                let cs: Vec<f64> = c.iter().map(|v| v * alpha).collect();
                let hs: Vec<f64> = h.iter().map(|v| v * beta).collect();
                assert!((gate_bias(&cs, &hs) - b).abs() < 1e-12);
            }
        }
    }
}

fn gated(z: &Tensor, frames: usize, u1: usize, b: &[f64]) -> Tensor {
    let mut tape = Tape::new();
    let lattice = LogitLattice {
        values: tape.constant(z.clone()),
        frames,
        target_len: u1 - 1,
        num_labels: z.cols(),
    };
    let bv = tape.constant(Tensor::new(vec![frames, 1], b.to_vec()).unwrap());
    let out = apply_joiner_gating(&mut tape, &lattice, bv).unwrap();
    tape.value(out.values).clone()
}

#[test]
fn gating_shifts_are_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..100 {
        let t = rng.random_range(1..5);
        let u1 = rng.random_range(1..4);
        let v = rng.random_range(2..6);
        let z = rand_tensor(&mut rng, t * u1, v);
        let b: Vec<f64> = (0..t).map(|_| sigmoid(rng.random_range(-1.0..1.0))).collect();
        let out = gated(&z, t, u1, &b);
        for ti in 0..t {
            for u in 0..u1 {
                let r = ti * u1 + u;
                let (zr, or) = (z.row_slice(r), out.row_slice(r));
                assert_eq!(or[0], zr[0] + (1.0 - b[ti]));
                for k in 1..v {
                    assert_eq!(or[k], zr[k] + b[ti]);
                }
                let best = |row: &[f64]| crate::transducer::argmax(&row[1..]);
                assert_eq!(best(zr), best(or));
            }
        }
    }
}

#[test]
fn gating_examples() {
    // Uniform stays uniform at b = 0.5.
    let z = Tensor::zeros(&[6, 4]);
    let out = gated(&z, 3, 2, &[0.5; 3]);
    for v in out.data() {
        assert_eq!(*v, 0.5);
    }
    let out = gated(&z, 3, 2, &[GATE_MAX; 3]);
    assert!((out.get(0, 0) - 0.26894).abs() < 1e-5);
    assert!((out.get(0, 1) - 0.73106).abs() < 1e-5);
    let mut tape = Tape::new();
    let lattice = LogitLattice {
        values: tape.constant(z),
        frames: 3,
        target_len: 1,
        num_labels: 4,
    };
    let b = tape.constant(Tensor::zeros(&[2, 1]));
    assert!(apply_joiner_gating(&mut tape, &lattice, b).is_err());
}

#[test]
fn larger_gate_raises_non_blank_odds() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..50 {
        let z = rand_tensor(&mut rng, 1, 4);
        let odds = |b: f64| {
            let g = gated(&z, 1, 1, &[b]);
            let e: Vec<f64> = g.data().iter().map(|v| v.exp()).collect();
            e[1..].iter().sum::<f64>() / e[0]
        };
        let b1 = rng.random_range(GATE_MIN..GATE_MAX);
        let b2 = rng.random_range(b1..GATE_MAX) + 1e-6;
        assert!(odds(b2) > odds(b1));
    }
}

#[test]
fn disabled_anchoring_is_the_plain_transducer() {
    let cfg = small_cfg();
    let a = small_anchor();
    let s = store(&cfg, &a, 9);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let seq = sequence(&mut rng, &cfg, 12);
    let spec = AnchorSpec::mixed(4);
    let mut tape = Tape::new();
    let p = s.bind(&mut tape, false);
    let out = anchored_forward(&mut tape, &p, &cfg, &AnchorConfig::disabled(), &seq, &spec).unwrap();
    assert!(out.context.is_none() && out.gate.is_none());

    let mut t2 = Tape::new();
    let p2 = s.bind(&mut t2, false);
    let x = t2.constant(seq.frames.clone());
    let st = stack_features(&mut t2, &p2, x, &cfg).unwrap();
    let f = encode(&mut t2, &p2, st, &cfg).unwrap();
    let g = predict(&mut t2, &p2, &cfg, &seq.transcript).unwrap();
    let plain = join(&mut t2, &p2, f, g).unwrap();
    assert_eq!(tape.value(out.lattice.values), t2.value(plain.values));
}

#[test]
fn constant_aux_output_gives_maximal_gate() {
    let cfg = small_cfg();
    let a = small_anchor();
    let mut s = store(&cfg, &a, 10);
    for n in ["aux.conv1.w", "aux.conv2.w", "aux.out.w"] {
        s.get_mut(n).unwrap().data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    s.insert("aux.out.b", Tensor::row(vec![1.0, 2.0, -0.5, 0.1]));
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let seq = sequence(&mut rng, &cfg, 14);
    let mut tape = Tape::new();
    let p = s.bind(&mut tape, false);
    let out = anchored_forward(&mut tape, &p, &cfg, &a, &seq, &AnchorSpec::mixed(4)).unwrap();
    let b = tape.value(out.gate.unwrap()).data().to_vec();
    assert_eq!(b.len(), 7);
    for v in b {
        assert!((v - GATE_MAX).abs() < 1e-15);
    }
}

#[test]
fn anchor_spec_validation() {
    let f = Tensor::zeros(&[6, 2]);
    assert!(AnchorSpec::mixed(1).validate(2).is_err());
    assert!(AnchorSpec::mixed(2).validate(2).is_ok());
    assert!(AnchorSpec::clean(8, f.clone()).validate(2).is_err());
    let mut bad = AnchorSpec::clean(4, f);
    bad.clean_frames = None;
    assert!(bad.validate(2).is_err());
}

#[test]
fn clean_anchor_uses_the_clean_frames() {
    let cfg = small_cfg();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let seq = sequence(&mut rng, &cfg, 12);
    let clean = rand_tensor(&mut rng, 12, cfg.d_raw);
    let spec = AnchorSpec::clean(4, clean.clone());
    assert_eq!(spec.frames(&seq).unwrap(), clean.slice_rows(0, 4));
    assert_eq!(AnchorSpec::mixed(4).frames(&seq).unwrap(), seq.frames.slice_rows(0, 4));
}

#[test]
fn gradients_reach_context_and_aux_network() {
    let cfg = small_cfg();
    let a = small_anchor();
    let mut s = store(&cfg, &a, 12);
    // Zero biases can leave every aux ReLU dead, so h = 0 and the cosine
    // sits on its zero-norm branch, where it is not differentiable.
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for (_, t) in s.iter_mut() {
        for v in t.data_mut() {
            if *v == 0.0 {
                *v = rng.random_range(-0.3..0.3);
            }
        }
    }
    let names = s.names();
    let params: Vec<Tensor> = names.iter().map(|n| s.get(n).unwrap().clone()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let seq = sequence(&mut rng, &cfg, 10);
    let spec = AnchorSpec::mixed(4);
    for (bias, gating) in [(true, true), (true, false), (false, true)] {
        let ac = AnchorConfig {
            bias,
            gating,
            ..a.clone()
        };
        let rep = finite_difference_check(
            |tape, vars| {
                let p = Bound::from_pairs(names.iter().cloned().zip(vars.iter().copied()));
                let out = anchored_forward(tape, &p, &cfg, &ac, &seq, &spec)?;
                crate::transducer::rnnt_loss(tape, &out.lattice, &seq.transcript)
            },
            &params,
            GradCheckConfig {
                tolerance: 1e-5,
                ..GradCheckConfig::default()
            },
        )
        .unwrap();
        assert!(rep.passed(), "bias={bias} gating={gating}: {}", rep.max_rel_error());
        for (n, pr) in names.iter().zip(&rep.params) {
            if n.starts_with("aux.") && n.ends_with(".w") {
                assert!(pr.analytic.iter().any(|g| g.abs() > 1e-8), "{n} gets no gradient");
            }
        }
    }
}

#[test]
fn context_gradient_is_nonzero() {
    let cfg = small_cfg();
    let a = small_anchor();
    let s = store(&cfg, &a, 13);
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let seq = sequence(&mut rng, &cfg, 10);
    let c0 = rand_vec(&mut rng, cfg.context_dim);
    let rep = finite_difference_check(
        |tape, vars| {
            let p = s.bind(tape, false);
            let x = tape.constant(seq.frames.clone());
            let st = stack_features(tape, &p, x, &cfg)?;
            let xin = bias_encoder_inputs(tape, &p, st, vars[0])?;
            let f = encode(tape, &p, xin, &cfg)?;
            let g = predict(tape, &p, &cfg, &seq.transcript)?;
            let lat = join(tape, &p, f, g)?;
            crate::transducer::rnnt_loss(tape, &lat, &seq.transcript)
        },
        &[Tensor::row(c0)],
        GradCheckConfig::default(),
    )
    .unwrap();
    assert!(rep.params[0].analytic.iter().any(|g| g.abs() > 1e-8));
    assert!(rep.max_rel_error() < 1e-5);
}

#[test]
fn anchored_forward_is_deterministic() {
    let cfg = small_cfg();
    let a = small_anchor();
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let seq = sequence(&mut rng, &cfg, 12);
    let run = || {
        let s = store(&cfg, &a, 14);
        let mut tape = Tape::new();
        let p = s.bind(&mut tape, false);
        let out = anchored_forward(&mut tape, &p, &cfg, &a, &seq, &AnchorSpec::mixed(4)).unwrap();
        (
            tape.value(out.lattice.values).clone(),
            tape.value(out.context.unwrap()).clone(),
        )
    };
    assert_eq!(run(), run());
}
