//! Toy corpus synthesis.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::stream_seed;
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::transducer::{FeatureSequence, TokenSequence};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyCorpusConfig {
    pub num_styles: usize,
    /// Styles `[0, train_styles)` are used for training.
    pub train_styles: usize,
    /// The next `dev_styles` styles form the dev split; the rest are test.
    pub dev_styles: usize,
    pub utts_per_style: usize,
    pub vocab_size: usize,
    pub d_raw: usize,
    /// Inclusive range of body tokens after the wake word.
    pub body_tokens: (usize, usize),
    /// Inclusive range of frames rendered per token.
    pub frames_per_token: (usize, usize),
    /// Token prefix spoken at the start of every utterance.
    pub wake_word: Vec<u32>,
    /// Std of token template entries.
    pub template_scale: f64,
    /// Std of per-style offset entries.
    pub style_offset_scale: f64,
    /// Per-style tilt drawn from `[-style_tilt, style_tilt]`.
    pub style_tilt: f64,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for ToyCorpusConfig {
    fn default() -> Self {
        ToyCorpusConfig {
            num_styles: 200,
            train_styles: 160,
            dev_styles: 16,
            utts_per_style: 4,
            vocab_size: 16,
            d_raw: 16,
            body_tokens: (3, 6),
            frames_per_token: (6, 10),
            wake_word: vec![1, 2],
            template_scale: 1.0,
            style_offset_scale: 1.0,
            style_tilt: 0.5,
            noise_std: 0.1,
            seed: 1,
        }
    }
}

impl ToyCorpusConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::invalid(format!("corpus config: {m}")));
        if self.wake_word.is_empty() {
            return bad("wake_word must be nonempty");
        }
        if self.body_tokens.0 > self.body_tokens.1 || self.frames_per_token.0 > self.frames_per_token.1 {
            return bad("ranges must be nonempty (min <= max)");
        }
        if self.frames_per_token.0 == 0 {
            return bad("frames_per_token must be >= 1");
        }
        if self.vocab_size < 2 || self.d_raw == 0 || self.utts_per_style == 0 {
            return bad("vocab_size >= 2, d_raw >= 1 and utts_per_style >= 1 required");
        }
        if self.train_styles + self.dev_styles >= self.num_styles || self.train_styles < 2 {
            return bad("need >= 2 train styles and at least one test style");
        }
        if self.wake_word.iter().any(|&t| t == 0 || t as usize > self.vocab_size) {
            return bad("wake_word tokens must be in [1, vocab_size]");
        }
        if !(self.noise_std >= 0.0 && self.template_scale > 0.0 && self.style_offset_scale >= 0.0) {
            return bad("scales must be non-negative");
        }
        Ok(())
    }

    pub fn split_of(&self, style: usize) -> Split {
        if style < self.train_styles {
            Split::Train
        } else if style < self.train_styles + self.dev_styles {
            Split::Dev
        } else {
            Split::Test
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub style: usize,
    pub split: Split,
    pub tokens: TokenSequence,
    /// Generating token per raw frame.
    pub frame_labels: Vec<u32>,
    /// Frames covered by the wake word.
    pub anchor_len: usize,
    pub frames: Tensor,
}

impl Utterance {
    pub fn len(&self) -> usize {
        self.frames.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.rows() == 0
    }

    pub fn to_sequence(&self) -> Result<FeatureSequence> {
        FeatureSequence::new(
            self.frames.clone(),
            self.tokens.clone(),
            self.anchor_len,
            Some(self.frame_labels.clone()),
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub config: ToyCorpusConfig,
    /// Per-dimension mean over every frame of the corpus.
    pub mean: Vec<f64>,
    pub utterances: Vec<Utterance>,
}

impl Corpus {
    pub fn get(&self, id: &str) -> Result<&Utterance> {
        self.utterances
            .iter()
            .find(|u| u.id == id)
            .ok_or_else(|| Error::invalid(format!("utterance `{id}` not in corpus")))
    }

    pub fn index_of(&self, id: &str) -> Result<usize> {
        self.utterances
            .iter()
            .position(|u| u.id == id)
            .ok_or_else(|| Error::invalid(format!("utterance `{id}` not in corpus")))
    }

    /// Indices of utterances in `split`, in corpus order.
    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        (0..self.utterances.len())
            .filter(|&i| self.utterances[i].split == split)
            .collect()
    }
}

pub(crate) struct Style {
    offset: Vec<f64>,
    gain: Vec<f64>,
}

fn normal_vec(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<f64> {
    if std == 0.0 {
        return vec![0.0; n];
    }
    let d = Normal::new(0.0, std).unwrap();
    (0..n).map(|_| d.sample(rng)).collect()
}

/// Onset and offset vector per token; frames interpolate between them.
fn templates(cfg: &ToyCorpusConfig) -> Vec<(Vec<f64>, Vec<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(&[cfg.seed, 1]));
    (0..=cfg.vocab_size)
        .map(|_| {
            (
                normal_vec(&mut rng, cfg.d_raw, cfg.template_scale),
                normal_vec(&mut rng, cfg.d_raw, cfg.template_scale),
            )
        })
        .collect()
}

pub(crate) fn style(cfg: &ToyCorpusConfig, s: usize) -> Style {
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(&[cfg.seed, 2, s as u64]));
    let offset = normal_vec(&mut rng, cfg.d_raw, cfg.style_offset_scale);
    let tilt = if cfg.style_tilt > 0.0 {
        rng.random_range(-cfg.style_tilt..=cfg.style_tilt)
    } else {
        0.0
    };
    let d = cfg.d_raw;
    let gain = (0..d)
        .map(|j| {
            let ramp = if d > 1 { 2.0 * j as f64 / (d - 1) as f64 - 1.0 } else { 0.0 };
            1.0 + tilt * ramp
        })
        .collect();
    Style { offset, gain }
}

/// Render `tokens` in a style. Returns frames and per-frame labels.
pub(crate) fn render(
    cfg: &ToyCorpusConfig,
    tmpl: &[(Vec<f64>, Vec<f64>)],
    st: &Style,
    tokens: &[u32],
    durations: &[usize],
    rng: &mut ChaCha8Rng,
) -> (Tensor, Vec<u32>) {
    let d = cfg.d_raw;
    let total: usize = durations.iter().sum();
    let mut data = Vec::with_capacity(total * d);
    let mut labels = Vec::with_capacity(total);
    let noise = normal_vec(rng, total * d, cfg.noise_std);
    let mut n = 0;
    for (&tok, &dur) in tokens.iter().zip(durations) {
        let (a, b) = &tmpl[tok as usize];
        for i in 0..dur {
            let w = if dur > 1 { i as f64 / (dur - 1) as f64 } else { 0.0 };
            for j in 0..d {
                let t = a[j] + w * (b[j] - a[j]);
                data.push(t * st.gain[j] + st.offset[j] + noise[n]);
                n += 1;
            }
            labels.push(tok);
        }
    }
    (Tensor::new(vec![total, d], data).unwrap(), labels)
}

/// Generate the corpus: `utts_per_style` utterances for each style, each the
/// wake word followed by a random body without immediate repeats.
pub fn synth_corpus(cfg: &ToyCorpusConfig) -> Result<Corpus> {
    cfg.validate()?;
    let tmpl = templates(cfg);
    let mut utterances = Vec::with_capacity(cfg.num_styles * cfg.utts_per_style);
    for s in 0..cfg.num_styles {
        let st = style(cfg, s);
        for k in 0..cfg.utts_per_style {
            let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(&[cfg.seed, 3, s as u64, k as u64]));
            let body = rng.random_range(cfg.body_tokens.0..=cfg.body_tokens.1);
            let mut tokens = cfg.wake_word.clone();
            for _ in 0..body {
                let prev = *tokens.last().unwrap();
                let mut t = rng.random_range(1..=cfg.vocab_size as u32);
                while t == prev {
                    t = rng.random_range(1..=cfg.vocab_size as u32);
                }
                tokens.push(t);
            }
            let durations: Vec<usize> = tokens
                .iter()
                .map(|_| rng.random_range(cfg.frames_per_token.0..=cfg.frames_per_token.1))
                .collect();
            let anchor_len = durations[..cfg.wake_word.len()].iter().sum();
            let (frames, frame_labels) = render(cfg, &tmpl, &st, &tokens, &durations, &mut rng);
            utterances.push(Utterance {
                id: format!("s{s:03}u{k:03}"),
                style: s,
                split: cfg.split_of(s),
                tokens: TokenSequence::new(tokens, cfg.vocab_size)?,
                frame_labels,
                anchor_len,
                frames,
            });
        }
    }
    let mean = corpus_mean(&utterances, cfg.d_raw);
    Ok(Corpus {
        config: cfg.clone(),
        mean,
        utterances,
    })
}

fn corpus_mean(utts: &[Utterance], d: usize) -> Vec<f64> {
    let mut sum = vec![0.0; d];
    let mut n = 0usize;
    for u in utts {
        for r in 0..u.len() {
            for (s, v) in sum.iter_mut().zip(u.frames.row_slice(r)) {
                *s += v;
            }
            n += 1;
        }
    }
    sum.iter().map(|s| s / n.max(1) as f64).collect()
}

#[cfg(test)]
pub(crate) fn render_for_test(
    cfg: &ToyCorpusConfig,
    s: usize,
    tokens: &[u32],
    durations: &[usize],
    seed: u64,
) -> Tensor {
    let tmpl = templates(cfg);
    let st = style(cfg, s);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    render(cfg, &tmpl, &st, tokens, durations, &mut rng).0
}
