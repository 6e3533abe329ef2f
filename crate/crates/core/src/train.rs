//! Training loop: Adam with linear warm-up, global gradient clipping,
//! per-epoch dev loss, best-checkpoint retention and exact resumption.
//!
//! Files written to the output directory:
//!
//! ```text
//! last.ckpt   parameters, Adam moments and trainer state (resumable)
//! best.ckpt   parameters with the lowest dev loss so far
//! loss.csv    one row per optimizer step
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::anchoring::aux_embed;
use crate::aux_objectives::{
    feature_reconstruction_loss, frame_label_count, split_anchor_halves, total_loss, vic_loss,
    LabelSequence,
};
use crate::error::{Error, Result};
use crate::mixsim::{stream_seed, Corpus, Split, TrainExample, TrainingMixer};
use crate::model::AsrModel;
use crate::numerics::{Tape, Tensor, Var};
use crate::params::Bound;
use crate::transducer::checkpoint::Checkpoint;
use crate::transducer::{rnnt_loss, stack_features};

/// Epoch index used to draw the fixed dev-set augmentation.
const DEV_EPOCH: u64 = u64::MAX;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Steps of linear learning-rate warm-up from zero.
    pub warmup_steps: u64,
    /// Global gradient-norm ceiling.
    pub clip_norm: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Dev utterances scored after every epoch.
    pub dev_utterances: usize,
    /// Seeds parameter init and batch order.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 16,
            learning_rate: 1e-3,
            warmup_steps: 500,
            clip_norm: 5.0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            dev_utterances: 64,
            seed: 11,
        }
    }
}

impl TrainConfig {
    // `!(x > 0.0)` also rejects NaN
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::invalid(format!("train config: {m}")));
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be >= 1");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(self.clip_norm > 0.0) {
            return bad("clip_norm must be positive");
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return bad("Adam betas must lie in [0, 1)");
        }
        if !(self.adam_eps > 0.0) {
            return bad("adam_eps must be positive");
        }
        Ok(())
    }

    /// Learning rate for optimizer step `step` (0-based).
    pub fn lr_at(&self, step: u64) -> f64 {
        if self.warmup_steps == 0 {
            return self.learning_rate;
        }
        self.learning_rate * ((step + 1) as f64 / self.warmup_steps as f64).min(1.0)
    }
}

/// Run-level switches that do not change the result.
#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    pub out_dir: Option<PathBuf>,
    /// Continue from `out_dir/last.ckpt` when it exists.
    pub resume: bool,
    /// Return after this many completed epochs (counting resumed ones).
    pub stop_after_epochs: Option<usize>,
}

/// Loss values of one batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParts {
    pub total: f64,
    pub rnnt: f64,
    pub vic: Option<f64>,
    pub fr: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    pub lr: f64,
    pub loss: LossParts,
    /// Gradient norm before clipping.
    pub grad_norm: f64,
}

const CSV_HEADER: &str = "step,epoch,lr,loss,l_rnnt,l_vic,l_fr,grad_norm";

impl StepRecord {
    fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{}",
            self.step,
            self.epoch,
            self.lr,
            self.loss.total,
            self.loss.rnnt,
            opt(self.loss.vic),
            opt(self.loss.fr),
            self.grad_norm
        )
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters with the lowest dev loss.
    pub best: AsrModel,
    /// Parameters after the last completed epoch.
    pub last: AsrModel,
    pub best_epoch: usize,
    pub dev_losses: Vec<f64>,
    pub epochs_done: usize,
    pub steps: u64,
    /// Steps run in this invocation.
    pub history: Vec<StepRecord>,
}

/// Scalar objective of one batch on `tape`, plus its component values.
/// The transducer and reconstruction losses are batch means; VIC uses the
/// anchor halves of every utterance whose stacked anchor has two frames.
pub fn batch_objective(
    tape: &mut Tape,
    model: &AsrModel,
    p: &Bound,
    batch: &[TrainExample],
) -> Result<(Var, LossParts)> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let sys = &model.system;
    let n = batch.len() as f64;
    let mut rnnt = Vec::with_capacity(batch.len());
    let mut fr = Vec::new();
    let mut halves = (Vec::new(), Vec::new());
    for ex in batch {
        let out = model.forward(tape, p, &ex.seq, &ex.anchor)?;
        rnnt.push(rnnt_loss(tape, &out.lattice, &ex.seq.transcript)?);
        if sys.objective.uses_fr() {
            let c = out.context.ok_or_else(|| Error::invalid("reconstruction needs a context"))?;
            let labels = LabelSequence::new(ex.anchor_labels.clone(), frame_label_count(&sys.model))?;
            fr.push(feature_reconstruction_loss(tape, p, &labels, c, out.anchor_raw)?);
        }
        if sys.objective.uses_vic() {
            let stacked = stack_features(tape, p, out.anchor_raw, &sys.model)?;
            if tape.value(stacked).rows() >= 2 {
                let (a, b) = split_anchor_halves(tape, stacked)?;
                halves.0.push(aux_embed(tape, p, a)?);
                halves.1.push(aux_embed(tape, p, b)?);
            }
        }
    }
    let mean = |tape: &mut Tape, xs: &[Var]| -> Result<Var> {
        let mut s = xs[0];
        for &x in &xs[1..] {
            s = tape.add(s, x)?;
        }
        Ok(tape.scale(s, 1.0 / xs.len() as f64))
    };
    let l_rnnt = mean(tape, &rnnt)?;
    let l_fr = if fr.is_empty() { None } else { Some(mean(tape, &fr)?) };
    let l_vic = if sys.objective.uses_vic() {
        Some(if halves.0.len() >= 2 {
            let c = tape.concat_rows(&halves.0)?;
            let c2 = tape.concat_rows(&halves.1)?;
            vic_loss(tape, p, &sys.expander, c, c2, &sys.weights)?.total
        } else {
            log::debug!("batch of {n} has fewer than two splittable anchors; VIC skipped");
            tape.constant(Tensor::scalar(0.0))
        })
    } else {
        None
    };
    let total = total_loss(tape, l_rnnt, l_vic, l_fr, &sys.weights, sys.objective)?;
    let parts = LossParts {
        total: tape.scalar(total),
        rnnt: tape.scalar(l_rnnt),
        vic: l_vic.map(|v| tape.scalar(v)),
        fr: l_fr.map(|v| tape.scalar(v)),
    };
    Ok((total, parts))
}

/// Adam moments per parameter name.
#[derive(Debug, Clone, PartialEq)]
struct Adam {
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    fn new(model: &AsrModel) -> Self {
        let zeros: BTreeMap<String, Vec<f64>> =
            model.params.iter().map(|(k, t)| (k.clone(), vec![0.0; t.len()])).collect();
        Adam {
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One update with bias correction for the `t`-th step (1-based).
    fn update(
        &mut self,
        model: &mut AsrModel,
        grads: &BTreeMap<String, Vec<f64>>,
        scale: f64,
        lr: f64,
        t: u64,
        cfg: &TrainConfig,
    ) {
        let precision = model.config().precision;
        let c1 = 1.0 - cfg.beta1.powi(t as i32);
        let c2 = 1.0 - cfg.beta2.powi(t as i32);
        for (name, w) in model.params.iter_mut() {
            let g = &grads[name];
            let m = self.m.get_mut(name).unwrap();
            let v = self.v.get_mut(name).unwrap();
            for (i, x) in w.data_mut().iter_mut().enumerate() {
                let gi = g[i] * scale;
                m[i] = precision.round(cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi);
                v[i] = precision.round(cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi);
                let step = lr * (m[i] / c1) / ((v[i] / c2).sqrt() + cfg.adam_eps);
                *x = precision.round(*x - step);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TrainerState {
    epochs_done: usize,
    step: u64,
    best_epoch: usize,
    dev_losses: Vec<f64>,
}

/// Fixed, augmented dev examples.
pub fn dev_examples(corpus: &Corpus, mixer: &TrainingMixer, limit: usize) -> Result<Vec<TrainExample>> {
    let pool = corpus.split_indices(Split::Dev);
    pool.iter()
        .take(limit)
        .map(|&i| mixer.example(corpus, &pool, DEV_EPOCH, i))
        .collect()
}

/// Mean transducer loss over `examples` (no auxiliary terms).
pub fn mean_rnnt_loss(model: &AsrModel, examples: &[TrainExample]) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::invalid("no examples to evaluate"));
    }
    let mut sum = 0.0;
    for ex in examples {
        let mut tape = Tape::new();
        let p = model.params.bind(&mut tape, false);
        let out = model.forward(&mut tape, &p, &ex.seq, &ex.anchor)?;
        let l = rnnt_loss(&mut tape, &out.lattice, &ex.seq.transcript)?;
        sum += tape.scalar(l);
    }
    Ok(sum / examples.len() as f64)
}

/// Shuffled batches for `epoch`; a trailing single-utterance batch is
/// folded into the previous one so every batch has VIC statistics.
fn epoch_batches(pool: &[usize], cfg: &TrainConfig, epoch: usize) -> Vec<Vec<usize>> {
    let mut order = pool.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(&[cfg.seed, 30, epoch as u64]));
    order.shuffle(&mut rng);
    let mut batches: Vec<Vec<usize>> = order.chunks(cfg.batch_size).map(<[usize]>::to_vec).collect();
    if batches.len() >= 2 && batches.last().is_some_and(|b| b.len() == 1) {
        let tail = batches.pop().unwrap();
        batches.last_mut().unwrap().extend(tail);
    }
    batches
}

fn diverged(epoch: usize, step: u64, detail: impl Into<String>) -> Error {
    Error::Diverged {
        epoch,
        step,
        detail: detail.into(),
    }
}

fn save_last(dir: &Path, model: &AsrModel, adam: &Adam, state: &TrainerState) -> Result<()> {
    let mut ck = model.to_checkpoint(Some(serde_json::to_value(state)?))?;
    for (k, m) in &adam.m {
        let shape = model.params.get(k)?.shape().to_vec();
        ck.tensors.insert(format!("opt.m/{k}"), Tensor::new(shape.clone(), m.clone())?);
        ck.tensors.insert(format!("opt.v/{k}"), Tensor::new(shape, adam.v[k].clone())?);
    }
    // write-then-rename so an interrupted save never clobbers the last good one
    let tmp = dir.join("last.ckpt.tmp");
    ck.write(&tmp)?;
    let path = dir.join("last.ckpt");
    fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))
}

fn load_last(path: &Path, model: &AsrModel) -> Result<(AsrModel, Adam, TrainerState)> {
    let ck = Checkpoint::read(path)?;
    let loaded = AsrModel::from_checkpoint(&ck, path)?;
    if loaded.system != model.system {
        return Err(Error::invalid(format!(
            "{}: checkpoint was trained with a different system config",
            path.display()
        )));
    }
    let bad = |detail: String| Error::Format {
        path: path.to_path_buf(),
        kind: "training checkpoint",
        detail,
    };
    let state: TrainerState = serde_json::from_value(
        ck.header.get("training").cloned().ok_or_else(|| bad("no trainer state".into()))?,
    )
    .map_err(|e| bad(e.to_string()))?;
    let mut adam = Adam::new(&loaded);
    for (k, m) in adam.m.iter_mut() {
        let get = |prefix: &str| {
            ck.tensors
                .get(&format!("{prefix}/{k}"))
                .map(|t| t.data().to_vec())
                .ok_or_else(|| bad(format!("missing optimizer moment for `{k}`")))
        };
        *m = get("opt.m")?;
        *adam.v.get_mut(k).unwrap() = get("opt.v")?;
    }
    Ok((loaded, adam, state))
}

fn read_csv_prefix(path: &Path, upto_step: u64) -> Result<Vec<String>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .skip(1)
        .filter(|l| l.split(',').next().and_then(|s| s.parse::<u64>().ok()).is_some_and(|s| s < upto_step))
        .map(str::to_string)
        .collect())
}

/// Train `init` on the train split of `corpus`.
pub fn train(
    init: AsrModel,
    cfg: &TrainConfig,
    mixer: &TrainingMixer,
    corpus: &Corpus,
    opts: &TrainOptions,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    init.system.validate()?;
    let pool = corpus.split_indices(Split::Train);
    if pool.is_empty() {
        return Err(Error::invalid("corpus has no training utterances"));
    }
    let dev = dev_examples(corpus, mixer, cfg.dev_utterances)?;
    if dev.is_empty() {
        return Err(Error::invalid("corpus has no dev utterances"));
    }
    if let Some(dir) = &opts.out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }

    let mut model = init;
    let mut adam = Adam::new(&model);
    let mut state = TrainerState {
        epochs_done: 0,
        step: 0,
        best_epoch: 0,
        dev_losses: Vec::new(),
    };
    let mut best = model.clone();
    let mut csv_rows = Vec::new();
    if let (true, Some(dir)) = (opts.resume, &opts.out_dir) {
        let last = dir.join("last.ckpt");
        if last.exists() {
            let (m, a, s) = load_last(&last, &model)?;
            log::info!("resuming from {} after epoch {}", last.display(), s.epochs_done);
            model = m;
            adam = a;
            state = s;
            best = AsrModel::load(&dir.join("best.ckpt"))?;
            csv_rows = read_csv_prefix(&dir.join("loss.csv"), state.step)?;
        }
    }

    let stop = opts.stop_after_epochs.unwrap_or(cfg.epochs).min(cfg.epochs);
    let mut history = Vec::new();
    while state.epochs_done < stop {
        let epoch = state.epochs_done;
        for batch_idx in epoch_batches(&pool, cfg, epoch) {
            let batch: Vec<TrainExample> = batch_idx
                .iter()
                .map(|&i| mixer.example(corpus, &pool, epoch as u64, i))
                .collect::<Result<_>>()?;
            let mut tape = Tape::new();
            let p = model.params.bind(&mut tape, true);
            let (total, loss) = match batch_objective(&mut tape, &model, &p, &batch) {
                Ok(v) => v,
                Err(e @ Error::NonFinite { .. }) => return Err(diverged(epoch, state.step, e.to_string())),
                Err(e) => return Err(e),
            };
            tape.backward(total)?;
            let grads = p.grads(&tape, &model.params);
            let norm = grads.values().flatten().map(|g| g * g).sum::<f64>().sqrt();
            if !norm.is_finite() {
                return Err(diverged(epoch, state.step, format!("gradient norm {norm}")));
            }
            let scale = if norm > cfg.clip_norm { cfg.clip_norm / norm } else { 1.0 };
            let lr = cfg.lr_at(state.step);
            adam.update(&mut model, &grads, scale, lr, state.step + 1, cfg);
            let rec = StepRecord {
                step: state.step,
                epoch,
                lr,
                loss,
                grad_norm: norm,
            };
            log::debug!("{}", rec.csv_row());
            csv_rows.push(rec.csv_row());
            history.push(rec);
            state.step += 1;
        }
        let dev_loss = mean_rnnt_loss(&model, &dev)?;
        if !dev_loss.is_finite() {
            return Err(diverged(epoch, state.step, format!("dev loss {dev_loss}")));
        }
        let improved = state.dev_losses.iter().all(|&d| dev_loss < d);
        state.dev_losses.push(dev_loss);
        state.epochs_done += 1;
        if improved {
            state.best_epoch = epoch;
            best = model.clone();
        }
        log::info!(
            "epoch {epoch}: dev rnnt {dev_loss:.4}{}",
            if improved { " (best)" } else { "" }
        );
        if let Some(dir) = &opts.out_dir {
            if improved {
                best.save(&dir.join("best.ckpt"))?;
            }
            let mut text = String::from(CSV_HEADER);
            text.push('\n');
            for r in &csv_rows {
                let _ = writeln!(text, "{r}");
            }
            let path = dir.join("loss.csv");
            fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
            save_last(dir, &model, &adam, &state)?;
        }
    }
    Ok(TrainOutcome {
        best,
        last: model,
        best_epoch: state.best_epoch,
        dev_losses: state.dev_losses,
        epochs_done: state.epochs_done,
        steps: state.step,
        history,
    })
}
