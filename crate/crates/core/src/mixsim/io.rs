//! On-disk corpus, manifests and feature files.
//!
//! Feature file layout:
//!
//! ```text
//! magic     8 bytes "ANCFEAT\0"
//! rows      u32 LE
//! cols      u32 LE
//! width     u32 LE   bytes per value, 4 (f32) or 8 (f64)
//! values    rows * cols little-endian reals, row-major
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::grid::{ManifestEntry, MixtureManifest};
use super::mix::mix;
use super::{Corpus, Split, ToyCorpusConfig, Utterance};
use crate::error::{Error, Result};
use crate::numerics::{Precision, Tensor};
use crate::transducer::TokenSequence;

pub const FEATURE_MAGIC: &[u8; 8] = b"ANCFEAT\0";

pub fn write_features(path: &Path, x: &Tensor, precision: Precision) -> Result<()> {
    let (r, c) = x.dims2();
    let width: u32 = match precision {
        Precision::F32 => 4,
        Precision::F64 => 8,
    };
    let mut out = Vec::with_capacity(20 + x.len() * width as usize);
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&(r as u32).to_le_bytes());
    out.extend_from_slice(&(c as u32).to_le_bytes());
    out.extend_from_slice(&width.to_le_bytes());
    for &v in x.data() {
        match precision {
            Precision::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
            Precision::F64 => out.extend_from_slice(&v.to_le_bytes()),
        }
    }
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_features(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |detail: String| Error::Format {
        path: path.to_path_buf(),
        kind: "feature file",
        detail,
    };
    if bytes.len() < 20 || &bytes[..8] != FEATURE_MAGIC {
        return Err(bad("missing magic or truncated header".into()));
    }
    let u = |i: usize| u32::from_le_bytes([bytes[i], bytes[i + 1], bytes[i + 2], bytes[i + 3]]) as usize;
    let (r, c, w) = (u(8), u(12), u(16));
    if w != 4 && w != 8 {
        return Err(bad(format!("unsupported value width {w}")));
    }
    let body = &bytes[20..];
    if body.len() != r * c * w {
        return Err(bad(format!("expected {} value bytes, found {}", r * c * w, body.len())));
    }
    let data = if w == 4 {
        body.chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect()
    } else {
        body.chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect()
    };
    Tensor::new(vec![r, c], data)
}

#[derive(Serialize, Deserialize)]
struct UtteranceRecord {
    id: String,
    style: usize,
    split: Split,
    tokens: TokenSequence,
    frame_labels: Vec<u32>,
    anchor_len: usize,
    features: String,
}

#[derive(Serialize, Deserialize)]
struct CorpusRecord {
    config: ToyCorpusConfig,
    mean: Vec<f64>,
    utterances: Vec<UtteranceRecord>,
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let s = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&s).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        kind: "JSON",
        detail: e.to_string(),
    })
}

impl Corpus {
    /// Write `corpus.json` and one feature file per utterance under `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let mut recs = Vec::with_capacity(self.utterances.len());
        for u in &self.utterances {
            let rel = format!("features/{}.feat", u.id);
            write_features(&dir.join(&rel), &u.frames, Precision::F64)?;
            recs.push(UtteranceRecord {
                id: u.id.clone(),
                style: u.style,
                split: u.split,
                tokens: u.tokens.clone(),
                frame_labels: u.frame_labels.clone(),
                anchor_len: u.anchor_len,
                features: rel,
            });
        }
        write_json(
            &dir.join("corpus.json"),
            &CorpusRecord {
                config: self.config.clone(),
                mean: self.mean.clone(),
                utterances: recs,
            },
        )
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let rec: CorpusRecord = read_json(&dir.join("corpus.json"))?;
        let mut utterances = Vec::with_capacity(rec.utterances.len());
        for u in rec.utterances {
            utterances.push(Utterance {
                frames: read_features(&dir.join(&u.features))?,
                id: u.id,
                style: u.style,
                split: u.split,
                tokens: u.tokens,
                frame_labels: u.frame_labels,
                anchor_len: u.anchor_len,
            });
        }
        Ok(Corpus {
            config: rec.config,
            mean: rec.mean,
            utterances,
        })
    }
}

impl MixtureManifest {
    /// Render every mixture to `dir/<cell>/NNNNN.feat` and write
    /// `dir/<cell>.json`. Returns the manifest path.
    pub fn save(&mut self, corpus: &Corpus, dir: &Path) -> Result<PathBuf> {
        let cell = self.cell_name();
        for (i, e) in self.entries.iter_mut().enumerate() {
            let rel = format!("{cell}/{i:05}.feat");
            let m = mix(&e.spec, corpus)?;
            write_features(&dir.join(&rel), &m.seq.frames, Precision::F64)?;
            e.features = Some(rel);
        }
        let path = dir.join(format!("{cell}.json"));
        write_json(&path, self)?;
        Ok(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        read_json(path)
    }
}

impl ManifestEntry {
    /// Mixture features, read from the entry's file relative to `dir`.
    pub fn load_features(&self, dir: &Path) -> Result<Tensor> {
        let rel = self.features.as_ref().ok_or_else(|| {
            Error::invalid(format!("manifest entry for `{}` has no feature file", self.spec.main_id))
        })?;
        read_features(&dir.join(rel))
    }
}
