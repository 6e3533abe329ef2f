//! Acceptance suite: prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.
//!
//! `cargo test --release --test acceptance` runs everything; pass criterion
//! numbers to run a subset, e.g. `cargo test --test acceptance -- 1 5 7`.

#![allow(clippy::needless_range_loop)]

use std::collections::BTreeMap;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anchored_asr::anchoring::{apply_joiner_gating, aux_embed, gate_bias, AnchorConfig, AnchorSpec, GATE_MAX, GATE_MIN};
use anchored_asr::aux_objectives::{
    feature_reconstruction_loss, frame_label_count, split_anchor_halves, variance_hinge, vic_loss, vic_terms,
    ExpanderConfig, LabelSequence, LossWeights, ObjectiveMode,
};
use anchored_asr::baselines::BaselineKind;
use anchored_asr::config::ExperimentConfig;
use anchored_asr::evalreport::{edit_distance, ConditionReport};
use anchored_asr::mixsim::{
    background_offset, build_eval_grid, crop_or_tile, measure_snr, mix, synth_corpus, Corpus, EvalGridConfig, Split,
    ToyCorpusConfig, TrainingMixer,
};
use anchored_asr::model::{AsrModel, SystemConfig};
use anchored_asr::numerics::{finite_difference_check, GradCheckConfig, Precision, Tape, Tensor, Var};
use anchored_asr::params::Bound;
use anchored_asr::pipeline::{self, Which};
use anchored_asr::train::{batch_objective, TrainConfig};
use anchored_asr::transducer::{
    rnnt_loss_bruteforce, rnnt_loss_values, stack_features, LogitLattice, ModelConfig, BLANK,
};
use anchored_asr::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// Pinned tolerances.
const LOSS_ORACLE_TOL: f64 = 1e-9;
const GRAD_REL_TOL: f64 = 1e-4;
const GATE_SCALE_TOL: f64 = 1e-12;
const SNR_TOL_DB: f64 = 0.1;
const COLLAPSED_STD: f64 = 1e-3;
const SPREAD_STD: f64 = 0.5;
const MIN_WER_REDUCTION: f64 = 0.10;
const MIN_GATE_SEPARATION: f64 = 0.05;
const MAX_CLEAN_ANCHOR_DEGRADATION: f64 = 0.20;
const E2E_BUDGET_SECS: f64 = 30.0 * 60.0;

/// Outcome of one criterion: pass flag and a one-line summary.
type Verdict = (bool, String);

type Criterion = (usize, &'static str, fn() -> Verdict);

fn main() {
    let wanted: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let criteria: [Criterion; 9] = [
        (1, "transducer loss matches brute-force enumeration", c1_loss_oracle),
        (2, "analytic gradients match finite differences", c2_gradients),
        (3, "joiner gating algebra", c3_gating),
        (4, "VIC properties", c4_vic),
        (5, "mixture fidelity", c5_mixtures),
        (6, "AMC with [I; -I] equals AMS bit for bit", c6_ams_amc),
        (7, "edit distance matches exhaustive search", c7_wer_oracle),
        (8, "directional end-to-end reproduction", c8_end_to_end),
        (9, "pipeline determinism", c9_determinism),
    ];
    let mut failed = 0;
    for (n, name, f) in criteria {
        if !wanted.is_empty() && !wanted.contains(&n) {
            continue;
        }
        let t = Instant::now();
        let (ok, detail) = match catch_unwind(AssertUnwindSafe(f)) {
            Ok(v) => v,
            Err(e) => {
                let msg = e
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default();
                (false, format!("panicked: {msg}"))
            }
        };
        failed += usize::from(!ok);
        println!(
            "criterion {n} [{}] {name}: {detail} ({:.1} s)",
            if ok { "PASS" } else { "FAIL" },
            t.elapsed().as_secs_f64()
        );
    }
    if failed > 0 {
        println!("{failed} criterion(s) failed");
        std::process::exit(1);
    }
}

fn rand_tensor(rng: &mut ChaCha8Rng, r: usize, c: usize, scale: f64) -> Tensor {
    Tensor::new(vec![r, c], (0..r * c).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

/// `log P(y|x)` by recursion over every alignment path, written without
/// reference to the library's lattice code.
fn enumerate_log_prob(lp: &[Vec<f64>], frames: usize, y: &[u32], t: usize, u: usize) -> f64 {
    let u1 = y.len() + 1;
    let row = &lp[t * u1 + u];
    let mut terms = Vec::new();
    if u < y.len() {
        terms.push(row[y[u] as usize] + enumerate_log_prob(lp, frames, y, t, u + 1));
    }
    if t + 1 < frames {
        terms.push(row[BLANK] + enumerate_log_prob(lp, frames, y, t + 1, u));
    } else if u == y.len() {
        terms.push(row[BLANK]);
    }
    let m = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + terms.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

fn c1_loss_oracle() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let frames = rng.random_range(1..=4);
        let u = rng.random_range(0..=3);
        let labels = rng.random_range(1..=3) + 1;
        let y: Vec<u32> = (0..u).map(|_| rng.random_range(1..labels as u32)).collect();
        let logits: Vec<f64> = (0..frames * (u + 1) * labels).map(|_| rng.random_range(-3.0..3.0)).collect();
        let (dp, _) = rnnt_loss_values(&logits, frames, &y, labels).unwrap();
        let lp: Vec<Vec<f64>> = logits
            .chunks(labels)
            .map(|r| {
                let m = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = m + r.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
                r.iter().map(|v| v - lse).collect()
            })
            .collect();
        let brute = -enumerate_log_prob(&lp, frames, &y, 0, 0);
        let lib = rnnt_loss_bruteforce(&logits, frames, &y, labels).unwrap().loss;
        worst = worst.max((dp - brute).abs()).max((lib - brute).abs());
    }
    (
        worst < LOSS_ORACLE_TOL,
        format!("max |DP - enumeration| = {worst:.2e} over 200 instances (tol {LOSS_ORACLE_TOL:.0e})"),
    )
}

fn toy_corpus() -> Corpus {
    synth_corpus(&ToyCorpusConfig {
        num_styles: 12,
        train_styles: 8,
        dev_styles: 2,
        utts_per_style: 3,
        body_tokens: (2, 3),
        ..ToyCorpusConfig::default()
    })
    .unwrap()
}

fn tiny_system(anchoring: AnchorConfig, objective: ObjectiveMode) -> SystemConfig {
    SystemConfig {
        model: ModelConfig {
            d_model: 8,
            front_dim: 4,
            joiner_dim: 8,
            context_dim: 4,
            encoder_layers: 1,
            precision: Precision::F64,
            ..ModelConfig::default()
        },
        anchoring: AnchorConfig {
            aux_hidden: 4,
            ..anchoring
        },
        objective,
        expander: ExpanderConfig {
            output_dim: 6,
            hidden_layers: 1,
        },
        ..SystemConfig::default()
    }
}

/// Model whose zero-initialised entries are filled with small distinct
/// values, keeping every ReLU and the gate cosine away from their kinks.
fn perturbed_model(sys: SystemConfig) -> AsrModel {
    let mut model = AsrModel::new(sys, 2).unwrap();
    let mut k = 0u64;
    for (_, t) in model.params.iter_mut() {
        for v in t.data_mut() {
            if *v == 0.0 {
                k += 1;
                *v = 0.05 * (((k * 7919) % 17) as f64 / 17.0 - 0.4);
            }
        }
    }
    model
}

type Objective = fn(&mut Tape, &AsrModel, &Bound, &[anchored_asr::mixsim::TrainExample]) -> Result<Var>;

fn full_objective(tape: &mut Tape, m: &AsrModel, p: &Bound, b: &[anchored_asr::mixsim::TrainExample]) -> Result<Var> {
    Ok(batch_objective(tape, m, p, b)?.0)
}

fn fr_objective(tape: &mut Tape, m: &AsrModel, p: &Bound, b: &[anchored_asr::mixsim::TrainExample]) -> Result<Var> {
    let mut total = None;
    for ex in b {
        let out = m.forward(tape, p, &ex.seq, &ex.anchor)?;
        let labels = LabelSequence::new(ex.anchor_labels.clone(), frame_label_count(&m.system.model))?;
        let l = feature_reconstruction_loss(tape, p, &labels, out.context.unwrap(), out.anchor_raw)?;
        total = Some(match total {
            None => l,
            Some(s) => tape.add(s, l)?,
        });
    }
    Ok(tape.scale(total.unwrap(), 1.0 / b.len() as f64))
}

fn vic_objective(tape: &mut Tape, m: &AsrModel, p: &Bound, b: &[anchored_asr::mixsim::TrainExample]) -> Result<Var> {
    let (mut c, mut c2) = (Vec::new(), Vec::new());
    for ex in b {
        let anchor = tape.constant(ex.anchor.frames(&ex.seq)?);
        let stacked = stack_features(tape, p, anchor, &m.system.model)?;
        let (h1, h2) = split_anchor_halves(tape, stacked)?;
        c.push(aux_embed(tape, p, h1)?);
        c2.push(aux_embed(tape, p, h2)?);
    }
    let c = tape.concat_rows(&c)?;
    let c2 = tape.concat_rows(&c2)?;
    Ok(vic_loss(tape, p, &m.system.expander, c, c2, &m.system.weights)?.total)
}

fn c2_gradients() -> Verdict {
    let corpus = toy_corpus();
    let pool = corpus.split_indices(Split::Train);
    let mixer = TrainingMixer {
        mix_prob: 1.0,
        ..TrainingMixer::default()
    };
    let batch: Vec<_> = pool[..2].iter().map(|&i| mixer.example(&corpus, &pool, 1, i).unwrap()).collect();
    let gating_only = AnchorConfig {
        bias: false,
        gating: true,
        ..AnchorConfig::default()
    };
    let cases: [(&str, SystemConfig, Objective); 5] = [
        ("rnnt", tiny_system(AnchorConfig::disabled(), ObjectiveMode::None), full_objective),
        ("rnnt+gating", tiny_system(gating_only, ObjectiveMode::None), full_objective),
        ("fr", tiny_system(AnchorConfig::default(), ObjectiveMode::Fr), fr_objective),
        ("vic", tiny_system(AnchorConfig::default(), ObjectiveMode::Vic), vic_objective),
        ("full anchored", tiny_system(AnchorConfig::default(), ObjectiveMode::Both), full_objective),
    ];
    let mut ok = true;
    let mut parts = Vec::new();
    for (name, sys, objective) in cases {
        let model = perturbed_model(sys);
        let names = model.params.names();
        let params: Vec<Tensor> = names.iter().map(|n| model.params.get(n).unwrap().clone()).collect();
        let rep = finite_difference_check(
            |tape, vars| {
                let p = Bound::from_pairs(names.iter().cloned().zip(vars.iter().copied()));
                objective(tape, &model, &p, &batch)
            },
            &params,
            GradCheckConfig {
                tolerance: GRAD_REL_TOL,
                ..GradCheckConfig::default()
            },
        )
        .unwrap();
        ok &= rep.passed() && rep.max_rel_error() < GRAD_REL_TOL;
        parts.push(format!("{name} {:.1e}", rep.max_rel_error()));
    }
    (ok, format!("max rel error {} (tol {GRAD_REL_TOL:.0e})", parts.join(", ")))
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

fn c3_gating() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut failures = Vec::new();
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    let mut worst_scale: f64 = 0.0;
    for _ in 0..100 {
        let frames = rng.random_range(1..6);
        let u1 = rng.random_range(1..4);
        let v = rng.random_range(2..6);
        let z = rand_tensor(&mut rng, frames * u1, v, 4.0);
        let d = rng.random_range(2..8);
        let mut b = Vec::with_capacity(frames);
        for _ in 0..frames {
            let c: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
            let h: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
            let g = gate_bias(&c, &h);
            for alpha in [0.1, 1.0, 10.0] {
                for beta in [0.1, 1.0, 10.0] {
                    let cs: Vec<f64> = c.iter().map(|x| x * alpha).collect();
                    let hs: Vec<f64> = h.iter().map(|x| x * beta).collect();
                    worst_scale = worst_scale.max((gate_bias(&cs, &hs) - g).abs());
                }
            }
            lo = lo.min(g);
            hi = hi.max(g);
            b.push(g);
        }
        let mut tape = Tape::new();
        let lattice = LogitLattice {
            values: tape.constant(z.clone()),
            frames,
            target_len: u1 - 1,
            num_labels: v,
        };
        let bv = tape.constant(Tensor::new(vec![frames, 1], b.clone()).unwrap());
        let out = apply_joiner_gating(&mut tape, &lattice, bv).unwrap();
        let out = tape.value(out.values);
        for t in 0..frames {
            for u in 0..u1 {
                let (zr, or) = (z.row_slice(t * u1 + u), out.row_slice(t * u1 + u));
                if or[BLANK] != zr[BLANK] + (1.0 - b[t]) || (1..v).any(|k| or[k] != zr[k] + b[t]) {
                    failures.push("logit shift");
                }
                if argmax(&zr[1..]) != argmax(&or[1..]) {
                    failures.push("non-blank argmax");
                }
            }
        }
    }
    let in_range = lo >= 0.26894 && hi <= 0.73107 && lo >= GATE_MIN && hi <= GATE_MAX;
    if !in_range {
        failures.push("gate range");
    }
    if worst_scale >= GATE_SCALE_TOL {
        failures.push("scale invariance");
    }
    failures.dedup();
    (
        failures.is_empty(),
        format!(
            "100 lattices, shifts exact, b in [{lo:.5}, {hi:.5}], max scale drift {worst_scale:.1e}{}",
            if failures.is_empty() { String::new() } else { format!("; failed: {}", failures.join(", ")) }
        ),
    )
}

fn vic_value(z: &Tensor, z2: &Tensor, w: &LossWeights) -> (f64, f64, f64, f64) {
    let mut tape = Tape::new();
    let a = tape.constant(z.clone());
    let b = tape.constant(z2.clone());
    let t = vic_terms(&mut tape, a, b, w).unwrap();
    (tape.scalar(t.total), tape.scalar(t.variance), tape.scalar(t.invariance), tape.scalar(t.covariance))
}

/// Gradient descent on a free embedding table whose second view is the
/// table rotated by one row; returns the smallest per-dimension std.
fn collapse_probe(gamma: f64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (n, d) = (8, 4);
    let mut e = rand_tensor(&mut rng, n, d, 1.0);
    let w = LossWeights {
        gamma,
        mu: 1.0,
        nu: 0.0,
        ..LossWeights::default()
    };
    for _ in 0..400 {
        let mut tape = Tape::new();
        let z = tape.param(e.clone());
        let head = tape.slice_rows(z, 1, n).unwrap();
        let tail = tape.slice_rows(z, 0, 1).unwrap();
        let z2 = tape.concat_rows(&[head, tail]).unwrap();
        let t = vic_terms(&mut tape, z, z2, &w).unwrap();
        tape.backward(t.total).unwrap();
        let g = tape.grad(z).unwrap().to_vec();
        for (v, gv) in e.data_mut().iter_mut().zip(g) {
            *v -= 2.0 * gv;
        }
    }
    let mut tape = Tape::new();
    let z = tape.constant(e);
    let var = tape.var_rows(z).unwrap();
    tape.value(var).data().iter().map(|v| v.sqrt()).fold(f64::INFINITY, f64::min)
}

fn c4_vic() -> Verdict {
    let w = LossWeights::default();
    // Zero-mean, exactly orthogonal columns with unit-exceeding variance.
    let z = Tensor::from_rows(&[
        vec![2.0, 2.0, 2.0],
        vec![2.0, -2.0, -2.0],
        vec![-2.0, 2.0, -2.0],
        vec![-2.0, -2.0, 2.0],
    ])
    .unwrap();
    let zero = vic_value(&z, &z, &w) == (0.0, 0.0, 0.0, 0.0);

    let flat = Tensor::from_rows(&vec![vec![0.7, -1.0, 3.0]; 5]).unwrap();
    let exact = LossWeights { var_eps: 0.0, ..w };
    let collapse = vic_value(&flat, &flat, &exact).0 == 2.0 * exact.gamma;

    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let mut inv_ok = true;
    for _ in 0..50 {
        let a = rand_tensor(&mut rng, 6, 4, 2.0);
        inv_ok &= vic_value(&a, &a, &w).2 == 0.0;
        let mut b = a.clone();
        let i = rng.random_range(0..b.len());
        b.data_mut()[i] += 1e-9;
        inv_ok &= vic_value(&a, &b, &w).2 > 0.0;
    }
    let mut tape = Tape::new();
    let c = tape.constant(Tensor::full(&[3, 2], 4.0));
    let h = variance_hinge(&mut tape, c, 0.0).unwrap();
    let hinge_ok = tape.scalar(h) == 1.0;

    let spread = collapse_probe(1.0);
    let collapsed = collapse_probe(0.0);
    let probe = spread >= SPREAD_STD && collapsed <= COLLAPSED_STD;
    (
        zero && collapse && inv_ok && hinge_ok && probe,
        format!(
            "all-zero {zero}, collapse == 2 gamma {collapse}, invariance zero iff equal {inv_ok}; \
             min std {spread:.3} with gamma=1 (>= {SPREAD_STD}), {collapsed:.1e} without (<= {COLLAPSED_STD:.0e})"
        ),
    )
}

/// Every file under `dir`, relative path to contents.
fn tree(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
        for e in fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(dir, dir, &mut out);
    out
}

/// First differing relative path between two trees, if any.
fn first_difference(a: &BTreeMap<PathBuf, Vec<u8>>, b: &BTreeMap<PathBuf, Vec<u8>>) -> Option<PathBuf> {
    if a.len() != b.len() {
        return a.keys().chain(b.keys()).find(|k| !(a.contains_key(*k) && b.contains_key(*k))).cloned();
    }
    a.iter().find(|(k, v)| b.get(*k) != Some(v)).map(|(k, _)| k.clone())
}

fn c5_mixtures() -> Verdict {
    let cfg = ExperimentConfig::default();
    let corpus = synth_corpus(&cfg.corpus).unwrap();
    let grid = build_eval_grid(&corpus, &cfg.eval_grid).unwrap();
    let mut worst_snr: f64 = 0.0;
    let mut bad = Vec::new();
    let mut n = 0;
    for cell in &grid {
        for e in &cell.entries {
            let m = mix(&e.spec, &corpus).unwrap();
            let main = corpus.get(&e.spec.main_id).unwrap();
            let bg = corpus.get(&e.spec.background_id).unwrap();
            let l = main.frames.rows();
            let off = background_offset(l, cell.shift_pct);
            n += 1;
            if m.main_len != l || m.bg_start != off || m.len() != l + off || e.main_frames != l {
                bad.push(format!("{}: length law", cell.cell_name()));
            }
            // main-only frames are untouched
            if m.seq.frames.data()[..off * main.frames.cols()] != main.frames.data()[..off * main.frames.cols()] {
                bad.push(format!("{}: main-only purity", cell.cell_name()));
            }
            // background-only frames hold nothing but the scaled background
            let crop = crop_or_tile(&bg.frames, l, e.spec.seed).unwrap();
            for t in l.max(off)..l + off {
                let expect: Vec<f64> = crop
                    .row_slice(t - off)
                    .iter()
                    .zip(&corpus.mean)
                    .map(|(x, mu)| mu + m.gain * (x - mu))
                    .collect();
                if m.seq.frames.row_slice(t) != expect.as_slice() {
                    bad.push(format!("{}: background-only purity", cell.cell_name()));
                    break;
                }
            }
            if off < l {
                let got = measure_snr(&m.seq.frames, &main.frames, m.bg_start, &corpus.mean);
                worst_snr = worst_snr.max((got - cell.snr_db).abs());
            }
        }
    }
    bad.dedup();

    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for d in &dirs {
        let c = synth_corpus(&cfg.corpus).unwrap();
        c.save(&d.path().join("corpus")).unwrap();
        for mut m in build_eval_grid(&c, &cfg.eval_grid).unwrap() {
            m.save(&c, &d.path().join("mixtures")).unwrap();
        }
    }
    let (a, b) = (tree(dirs[0].path()), tree(dirs[1].path()));
    let diff = first_difference(&a, &b);
    let ok = worst_snr < SNR_TOL_DB && bad.is_empty() && diff.is_none();
    (
        ok,
        format!(
            "{n} mixtures over 15 cells, max |SNR error| {worst_snr:.2e} dB (tol {SNR_TOL_DB}), length and purity {}, \
             regeneration of {} files {}",
            if bad.is_empty() { "exact".to_string() } else { format!("violated: {}", bad.join(", ")) },
            a.len(),
            match diff {
                None => "byte-identical".to_string(),
                Some(p) => format!("differs at {}", p.display()),
            }
        ),
    )
}

fn c6_ams_amc() -> Verdict {
    let corpus = synth_corpus(&ToyCorpusConfig::default()).unwrap();
    let baseline = |kind| SystemConfig {
        baseline: Some(kind),
        ..SystemConfig::plain(ModelConfig::default())
    };
    let ams = AsrModel::new(baseline(BaselineKind::Ams), 5).unwrap();
    let amc = AsrModel::new(baseline(BaselineKind::Amc), 5).unwrap();
    let has_amc = amc.params.contains("amc.w") && !ams.params.contains("amc.w");
    let mut identical = 0;
    let test = corpus.split_indices(Split::Test);
    for &i in test.iter().take(50) {
        let u = &corpus.utterances[i];
        let seq = u.to_sequence().unwrap();
        let spec = AnchorSpec::mixed(u.anchor_len);
        let bits = |m: &AsrModel| -> Vec<u64> {
            let mut tape = Tape::new();
            let p = m.params.bind(&mut tape, false);
            let out = m.forward(&mut tape, &p, &seq, &spec).unwrap();
            tape.value(out.lattice.values).data().iter().map(|v| v.to_bits()).collect()
        };
        let same_lattice = bits(&ams) == bits(&amc);
        let same_decode = ams.decode(&seq, &spec).unwrap() == amc.decode(&seq, &spec).unwrap();
        identical += usize::from(same_lattice && same_decode);
    }
    (
        has_amc && identical == 50,
        format!("{identical}/50 utterances with bit-identical joiner logits and decodes"),
    )
}

fn c7_wer_oracle() -> Verdict {
    fn exhaustive(r: &[u32], h: &[u32]) -> usize {
        match (r.split_first(), h.split_first()) {
            (None, _) => h.len(),
            (_, None) => r.len(),
            (Some((a, rr)), Some((b, hh))) => (exhaustive(rr, hh) + usize::from(a != b))
                .min(exhaustive(rr, h) + 1)
                .min(exhaustive(r, hh) + 1),
        }
    }
    let mut seqs: Vec<Vec<u32>> = vec![vec![]];
    let mut frontier = seqs.clone();
    for _ in 0..5 {
        frontier = frontier
            .iter()
            .flat_map(|s| (1..=3).map(move |a| [s.as_slice(), &[a]].concat()))
            .collect();
        seqs.extend(frontier.iter().cloned());
    }
    let mut mismatches = 0;
    for r in &seqs {
        for h in &seqs {
            let c = edit_distance(r, h);
            let consistent = r.len() + c.insertions - c.deletions == h.len();
            if c.errors() != exhaustive(r, h) || !consistent {
                mismatches += 1;
            }
        }
    }
    (
        mismatches == 0,
        format!("{} pairs over {} sequences, {mismatches} mismatches", seqs.len() * seqs.len(), seqs.len()),
    )
}

fn cell(r: &ConditionReport, snr: f64, shift: f64) -> &anchored_asr::evalreport::CellReport {
    r.cell(snr, shift).expect("grid cell")
}

fn c8_end_to_end() -> Verdict {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig {
        output_dir: dir.path().to_path_buf(),
        ..ExperimentConfig::default()
    };
    let [base, anch, vic] = ["baseline", "anchored", "anchored_vic"];
    let names: Vec<String> = [base, anch, vic].iter().map(|s| s.to_string()).collect();
    pipeline::synth(&cfg).unwrap();
    pipeline::mix(&cfg).unwrap();
    for n in &names {
        pipeline::train_system(&cfg, n, false).unwrap();
        pipeline::decode(&cfg, n, Which::Best).unwrap();
    }
    let reports = pipeline::score(&cfg, &names, None).unwrap();
    let gates = pipeline::analyze_gates(&cfg, anch, Which::Best, 1.0, 100.0, 20).unwrap();
    let gates_vic = pipeline::analyze_gates(&cfg, vic, Which::Best, 1.0, 100.0, 20).unwrap();
    let elapsed = start.elapsed().as_secs_f64();
    print!("{}", fs::read_to_string(dir.path().join("reports/report.txt")).unwrap());

    let (b, a, v) = (&reports[0], &reports[1], &reports[2]);
    let mut checks = Vec::new();
    let mut lines = Vec::new();
    for snr in [1.0, 5.0] {
        let (cb, ca, cv) = (cell(b, snr, 100.0), cell(a, snr, 100.0), cell(v, snr, 100.0));
        let reduction = (cb.wer - ca.wer) / cb.wer;
        checks.push(ca.wer <= cb.wer && reduction >= MIN_WER_REDUCTION);
        checks.push(ca.insertion_share < cb.insertion_share);
        lines.push(format!(
            "({snr} dB, 100%) WER {:.2} -> {:.2} ({:+.1}% rel; +VIC {:.2}), insertion share {:.2} -> {:.2} (+VIC {:.2})",
            cb.wer,
            ca.wer,
            -100.0 * reduction,
            cv.wer,
            cb.insertion_share,
            ca.insertion_share,
            cv.insertion_share
        ));
    }
    checks.push(gates.separation >= MIN_GATE_SEPARATION);
    lines.push(format!(
        "gate means target {:.3} vs background {:.3}, separation {:.3} (+VIC {:.3})",
        gates.histogram.mean_target, gates.histogram.mean_background, gates.separation, gates_vic.separation
    ));
    let worst = a
        .cells
        .iter()
        .filter(|c| c.shift_pct == 0.0)
        .map(|c| {
            let rb = cell(b, c.snr_db, 0.0).wer;
            if rb == 0.0 {
                if c.wer == 0.0 { 0.0 } else { f64::INFINITY }
            } else {
                (c.wer - rb) / rb
            }
        })
        .fold(f64::NEG_INFINITY, f64::max);
    checks.push(worst <= MAX_CLEAN_ANCHOR_DEGRADATION);
    lines.push(format!("worst 0%-shift change vs baseline {:+.1}% rel", 100.0 * worst));
    checks.push(elapsed <= E2E_BUDGET_SECS);
    lines.push(format!("runtime {:.0} s of {E2E_BUDGET_SECS:.0} s", elapsed));
    (checks.iter().all(|c| *c), lines.join("; "))
}

fn tiny_config(out: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        output_dir: out.to_path_buf(),
        corpus: ToyCorpusConfig {
            num_styles: 12,
            train_styles: 6,
            dev_styles: 2,
            utts_per_style: 3,
            ..ToyCorpusConfig::default()
        },
        eval_grid: EvalGridConfig {
            utts_per_cell: 4,
            ..EvalGridConfig::default()
        },
        train: TrainConfig {
            epochs: 2,
            batch_size: 6,
            dev_utterances: 4,
            ..TrainConfig::default()
        },
        ..ExperimentConfig::default()
    };
    for s in &mut cfg.systems {
        s.system.model.d_model = 16;
        s.system.model.joiner_dim = 16;
        s.system.model.front_dim = 8;
        s.system.model.context_dim = 8;
        s.system.anchoring.aux_hidden = 8;
        s.system.expander.output_dim = 16;
    }
    cfg
}

fn c9_determinism() -> Verdict {
    let run = || {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config(dir.path());
        let names: Vec<String> = cfg.systems.iter().map(|s| s.name.clone()).collect();
        pipeline::synth(&cfg).unwrap();
        pipeline::mix(&cfg).unwrap();
        for n in &names {
            pipeline::train_system(&cfg, n, false).unwrap();
            pipeline::decode(&cfg, n, Which::Best).unwrap();
        }
        pipeline::score(&cfg, &names, None).unwrap();
        pipeline::analyze_gates(&cfg, "anchored", Which::Best, 1.0, 100.0, 10).unwrap();
        tree(dir.path())
    };
    let (a, b) = (run(), run());
    let kinds = ["corpus/", "mixtures/", "models/", "decode/", "reports/", "gates/"];
    let covered = kinds.iter().all(|k| a.keys().any(|p| p.to_string_lossy().starts_with(k)));
    let diff = first_difference(&a, &b);
    (
        covered && diff.is_none(),
        match diff {
            None => format!("{} files (corpus, manifests, checkpoints, hypotheses, reports, gates) byte-identical", a.len()),
            Some(p) => format!("first difference at {}", p.display()),
        },
    )
}
