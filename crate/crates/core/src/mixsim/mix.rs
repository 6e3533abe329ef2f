//! Cropping, SNR scaling and time-shifted mixing.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Corpus;
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::transducer::FeatureSequence;

/// One main/background pairing at a given SNR and shift.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureSpec {
    pub main_id: String,
    pub background_id: String,
    pub snr_db: f64,
    /// Background onset as a percentage of the main length.
    pub shift_pct: f64,
    /// Seeds the background crop position.
    pub seed: u64,
}

/// A mixed utterance with its placement.
#[derive(Debug, Clone, PartialEq)]
pub struct Mixture {
    pub seq: FeatureSequence,
    /// Main utterance occupies raw frames `[0, main_len)`.
    pub main_len: usize,
    /// Background occupies `[bg_start, bg_start + main_len)`.
    pub bg_start: usize,
    /// Gain applied to the mean-centred background.
    pub gain: f64,
}

impl Mixture {
    pub fn len(&self) -> usize {
        self.seq.num_frames()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Raw frames `[start, end)` where both sources are present.
    pub fn overlap(&self) -> (usize, usize) {
        (self.bg_start, self.main_len)
    }
}

/// Contiguous `target_len` frames of `bg`. Longer sources give a seeded
/// crop; shorter ones are repeated end to end and cut from the start.
pub fn crop_or_tile(bg: &Tensor, target_len: usize, seed: u64) -> Result<Tensor> {
    let n = bg.rows();
    if n == 0 {
        return Err(Error::invalid("background has no frames"));
    }
    if n >= target_len {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let start = rng.random_range(0..=n - target_len);
        return Ok(bg.slice_rows(start, start + target_len));
    }
    let d = bg.cols();
    let mut data = Vec::with_capacity(target_len * d);
    while data.len() < target_len * d {
        let take = (target_len * d - data.len()).min(n * d);
        data.extend_from_slice(&bg.data()[..take]);
    }
    Tensor::new(vec![target_len, d], data)
}

/// Mean squared deviation from `mean` over all frames and dimensions.
pub fn energy(x: &Tensor, mean: &[f64]) -> f64 {
    let (r, c) = x.dims2();
    if r == 0 {
        return 0.0;
    }
    let mut s = 0.0;
    for i in 0..r {
        for (v, m) in x.row_slice(i).iter().zip(mean) {
            s += (v - m) * (v - m);
        }
    }
    s / (r * c) as f64
}

/// Gain `g` for the mean-centred background such that main over scaled
/// background energy is `snr_db`.
pub fn scale_to_snr(main: &Tensor, background: &Tensor, snr_db: f64, mean: &[f64]) -> Result<f64> {
    let em = energy(main, mean);
    let eb = energy(background, mean);
    if em <= 0.0 || eb <= 0.0 {
        return Err(Error::invalid(format!(
            "zero-energy signal in SNR scaling (main={em}, background={eb})"
        )));
    }
    Ok((em / (eb * 10f64.powf(snr_db / 10.0))).sqrt())
}

/// Raw frame at which the background starts: `round(shift_pct * L / 100)`,
/// halves rounded up.
pub fn background_offset(main_len: usize, shift_pct: f64) -> usize {
    ((shift_pct * main_len as f64 / 100.0 + 0.5).floor() as usize).min(main_len)
}

/// Mix already-loaded sources. The background is cropped or tiled to the
/// main length, scaled on the overlap (or, without overlap, on the whole
/// signals) and placed `round(shift_pct * L / 100)` frames in.
pub fn mix_sources(
    main: &FeatureSequence,
    background: &Tensor,
    snr_db: f64,
    shift_pct: f64,
    seed: u64,
    mean: &[f64],
) -> Result<Mixture> {
    if !(0.0..=100.0).contains(&shift_pct) {
        return Err(Error::invalid(format!("shift {shift_pct}% outside [0, 100]")));
    }
    let l = main.num_frames();
    let d = main.frames.cols();
    if background.cols() != d {
        return Err(Error::shape(
            "mix",
            format!("main d_raw={d}, background d_raw={}", background.cols()),
        ));
    }
    let bg = crop_or_tile(background, l, seed)?;
    let offset = background_offset(l, shift_pct);
    let gain = if offset < l {
        scale_to_snr(&main.frames.slice_rows(offset, l), &bg.slice_rows(0, l - offset), snr_db, mean)?
    } else {
        scale_to_snr(&main.frames, &bg, snr_db, mean)?
    };
    let total = offset + l;
    let mut data = vec![0.0; total * d];
    data[..l * d].copy_from_slice(main.frames.data());
    for i in 0..l {
        let t = offset + i;
        let src = bg.row_slice(i);
        let dst = &mut data[t * d..(t + 1) * d];
        if t < l {
            for j in 0..d {
                dst[j] += gain * (src[j] - mean[j]);
            }
        } else {
            for j in 0..d {
                dst[j] = mean[j] + gain * (src[j] - mean[j]);
            }
        }
    }
    let frames = Tensor::new(vec![total, d], data)?;
    let labels = main.frame_labels.as_ref().map(|fl| {
        let mut v = fl.clone();
        v.resize(total, 0);
        v
    });
    Ok(Mixture {
        seq: FeatureSequence::new(frames, main.transcript.clone(), main.anchor_len, labels)?,
        main_len: l,
        bg_start: offset,
        gain,
    })
}

/// Mix the utterances named by `spec`.
pub fn mix(spec: &MixtureSpec, corpus: &Corpus) -> Result<Mixture> {
    let main = corpus.get(&spec.main_id)?;
    let bg = corpus.get(&spec.background_id)?;
    mix_sources(
        &main.to_sequence()?,
        &bg.frames,
        spec.snr_db,
        spec.shift_pct,
        spec.seed,
        &corpus.mean,
    )
}

/// SNR in dB re-measured from the mixture: main energy over the energy of
/// `mixture - main` on the overlap. Infinite without overlap.
pub fn measure_snr(mixture: &Tensor, main: &Tensor, bg_start: usize, mean: &[f64]) -> f64 {
    let l = main.rows();
    if bg_start >= l {
        return f64::INFINITY;
    }
    let d = main.cols();
    let mut em = 0.0;
    let mut eb = 0.0;
    for t in bg_start..l {
        let (x, m) = (mixture.row_slice(t), main.row_slice(t));
        for j in 0..d {
            em += (m[j] - mean[j]) * (m[j] - mean[j]);
            eb += (x[j] - m[j]) * (x[j] - m[j]);
        }
    }
    10.0 * (em / eb).log10()
}
