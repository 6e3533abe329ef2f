//! Synthetic speech corpus and overlapped-speech mixture simulation.
//!
//! Utterances are sequences of token templates rendered in a per-speaker
//! style (additive offset plus a spectral tilt). Mixtures add a second,
//! differently styled utterance at a given SNR and time shift; all
//! arithmetic happens on mean-centred features.

mod corpus;
mod grid;
mod io;
mod mix;

pub use corpus::{synth_corpus, Corpus, Split, ToyCorpusConfig, Utterance};
pub use grid::{
    build_eval_grid, EvalGridConfig, ManifestEntry, MixtureManifest, TrainExample, TrainingMixer,
    SHIFT_GRID, SNR_GRID,
};
pub use io::{read_features, write_features, FEATURE_MAGIC};
pub(crate) use io::{read_json, write_json};
pub use mix::{background_offset, crop_or_tile, energy, measure_snr, mix, mix_sources, scale_to_snr, Mixture, MixtureSpec};

/// Derive an independent RNG seed from a base seed and a path of indices.
pub(crate) fn stream_seed(parts: &[u64]) -> u64 {
    // splitmix64 over the parts
    let mut h: u64 = 0x9e37_79b9_7f4a_7c15;
    for &p in parts {
        h ^= p;
        h = h.wrapping_add(0x9e37_79b9_7f4a_7c15);
        let mut z = h;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        h = z ^ (z >> 31);
    }
    h
}
