//! Evaluation grid construction and on-the-fly training augmentation.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::mix::{mix_sources, MixtureSpec};
use super::{stream_seed, Corpus, Split};
use crate::anchoring::AnchorSpec;
use crate::error::{Error, Result};
use crate::transducer::{FeatureSequence, TokenSequence};

pub const SNR_GRID: [f64; 5] = [1.0, 5.0, 10.0, 20.0, 50.0];
pub const SHIFT_GRID: [f64; 3] = [0.0, 50.0, 100.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalGridConfig {
    pub utts_per_cell: usize,
    pub split: Split,
    pub seed: u64,
}

impl Default for EvalGridConfig {
    fn default() -> Self {
        EvalGridConfig {
            utts_per_cell: 500,
            split: Split::Test,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub spec: MixtureSpec,
    pub transcript: TokenSequence,
    pub anchor_len: usize,
    /// Length of the main utterance in raw frames.
    pub main_frames: usize,
    /// Mixture feature file, relative to the manifest directory.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub features: Option<String>,
}

/// All mixtures of one (SNR, shift) condition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureManifest {
    pub snr_db: f64,
    pub shift_pct: f64,
    pub entries: Vec<ManifestEntry>,
}

impl MixtureManifest {
    /// Stable name such as `snr01_shift050`.
    pub fn cell_name(&self) -> String {
        format!("snr{:02}_shift{:03}", self.snr_db as u32, self.shift_pct as u32)
    }
}

/// The 15 evaluation conditions, shift-major then SNR, all reusing the same
/// main/background pairs.
pub fn build_eval_grid(corpus: &Corpus, cfg: &EvalGridConfig) -> Result<Vec<MixtureManifest>> {
    let pool = corpus.split_indices(cfg.split);
    if pool.is_empty() {
        return Err(Error::invalid(format!("corpus has no {:?} utterances", cfg.split)));
    }
    let styles: std::collections::BTreeSet<usize> =
        pool.iter().map(|&i| corpus.utterances[i].style).collect();
    if styles.len() < 2 {
        return Err(Error::invalid("evaluation split needs at least two styles"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(&[cfg.seed, 10]));
    let mut order = pool.clone();
    let mut pairs = Vec::with_capacity(cfg.utts_per_cell);
    for i in 0..cfg.utts_per_cell {
        if i % pool.len() == 0 {
            order.shuffle(&mut rng);
        }
        let main = order[i % pool.len()];
        let ms = corpus.utterances[main].style;
        let bg = loop {
            let b = pool[rng.random_range(0..pool.len())];
            if corpus.utterances[b].style != ms {
                break b;
            }
        };
        pairs.push((main, bg, stream_seed(&[cfg.seed, 11, i as u64])));
    }
    let mut cells = Vec::with_capacity(15);
    for &shift in &SHIFT_GRID {
        for &snr in &SNR_GRID {
            let entries = pairs
                .iter()
                .map(|&(m, b, seed)| {
                    let mu = &corpus.utterances[m];
                    ManifestEntry {
                        spec: MixtureSpec {
                            main_id: mu.id.clone(),
                            background_id: corpus.utterances[b].id.clone(),
                            snr_db: snr,
                            shift_pct: shift,
                            seed,
                        },
                        transcript: mu.tokens.clone(),
                        anchor_len: mu.anchor_len,
                        main_frames: mu.frames.rows(),
                        features: None,
                    }
                })
                .collect();
            cells.push(MixtureManifest {
                snr_db: snr,
                shift_pct: shift,
                entries,
            });
        }
    }
    Ok(cells)
}

/// Random augmentation applied to each training utterance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingMixer {
    pub mix_prob: f64,
    pub snr_db: f64,
    /// Shift drawn uniformly from `[min, max]` percent.
    pub shift_range: (f64, f64),
    /// Probability of taking the anchor from the clean main utterance.
    pub clean_anchor_prob: f64,
    pub seed: u64,
}

impl Default for TrainingMixer {
    fn default() -> Self {
        TrainingMixer {
            mix_prob: 0.5,
            snr_db: 10.0,
            shift_range: (0.0, 100.0),
            clean_anchor_prob: 0.8,
            seed: 3,
        }
    }
}

/// The random choices for one utterance in one epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MixDraw {
    pub mixed: bool,
    pub shift_pct: f64,
    pub clean_anchor: bool,
    /// Uniform draw used to pick the background.
    pub background_pick: u64,
    pub crop_seed: u64,
}

/// One augmented training utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainExample {
    pub seq: FeatureSequence,
    pub anchor: AnchorSpec,
    /// Frame labels of the anchor span.
    pub anchor_labels: Vec<u32>,
    pub mixed: bool,
}

impl TrainingMixer {
    /// Choices for utterance `index` in `epoch`; a pure function of
    /// `(seed, epoch, index)`.
    pub fn draw(&self, epoch: u64, index: u64) -> MixDraw {
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(&[self.seed, 20, epoch, index]));
        let mixed = rng.random::<f64>() < self.mix_prob;
        let (lo, hi) = self.shift_range;
        let shift_pct = lo + (hi - lo) * rng.random::<f64>();
        let clean_anchor = rng.random::<f64>() < self.clean_anchor_prob;
        MixDraw {
            mixed,
            shift_pct,
            clean_anchor,
            background_pick: rng.random(),
            crop_seed: rng.random(),
        }
    }

    /// Augment corpus utterance `index` with a background from `pool` (corpus
    /// indices) of a different style.
    pub fn example(&self, corpus: &Corpus, pool: &[usize], epoch: u64, index: usize) -> Result<TrainExample> {
        let utt = &corpus.utterances[index];
        let seq = utt.to_sequence()?;
        let anchor_labels = utt.frame_labels[..utt.anchor_len].to_vec();
        let d = self.draw(epoch, index as u64);
        let others: Vec<usize> = pool
            .iter()
            .copied()
            .filter(|&i| corpus.utterances[i].style != utt.style)
            .collect();
        if !d.mixed || others.is_empty() {
            return Ok(TrainExample {
                anchor: AnchorSpec::clean(utt.anchor_len, utt.frames.clone()),
                seq,
                anchor_labels,
                mixed: false,
            });
        }
        let bg = others[(d.background_pick % others.len() as u64) as usize];
        let m = mix_sources(
            &seq,
            &corpus.utterances[bg].frames,
            self.snr_db,
            d.shift_pct,
            d.crop_seed,
            &corpus.mean,
        )?;
        let anchor = if d.clean_anchor {
            AnchorSpec::clean(utt.anchor_len, utt.frames.clone())
        } else {
            AnchorSpec::mixed(utt.anchor_len)
        };
        Ok(TrainExample {
            seq: m.seq,
            anchor,
            anchor_labels,
            mixed: true,
        })
    }
}
