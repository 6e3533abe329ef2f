//! Scoring: token error rates with an S/I/D breakdown, Table-style
//! condition reports, relative WER reduction and gate-value histograms.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::anchoring::{AnchorSpec, GATE_MAX, GATE_MIN};
use crate::error::{Error, Result};
use crate::mixsim::{background_offset, mix, Corpus, ManifestEntry, MixtureManifest, SHIFT_GRID, SNR_GRID};
use crate::model::AsrModel;
use crate::transducer::{FeatureSequence, TokenSequence};

/// Alignment counts of a hypothesis against a reference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct EditCounts {
    pub substitutions: usize,
    pub insertions: usize,
    pub deletions: usize,
}

impl EditCounts {
    pub fn errors(&self) -> usize {
        self.substitutions + self.insertions + self.deletions
    }
}

/// Minimal-cost Levenshtein alignment. Among equal-cost alignments the
/// backtrace takes a match first, then deletion, insertion, substitution.
pub fn edit_distance(reference: &[u32], hypothesis: &[u32]) -> EditCounts {
    let (n, m) = (reference.len(), hypothesis.len());
    let w = m + 1;
    let mut d = vec![0usize; (n + 1) * w];
    for i in 0..=n {
        d[i * w] = i;
    }
    for j in 0..=m {
        d[j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let sub = d[(i - 1) * w + j - 1] + usize::from(reference[i - 1] != hypothesis[j - 1]);
            d[i * w + j] = sub.min(d[(i - 1) * w + j] + 1).min(d[i * w + j - 1] + 1);
        }
    }
    let mut c = EditCounts::default();
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let here = d[i * w + j];
        if i > 0 && j > 0 && reference[i - 1] == hypothesis[j - 1] && d[(i - 1) * w + j - 1] == here {
            i -= 1;
            j -= 1;
        } else if i > 0 && d[(i - 1) * w + j] + 1 == here {
            c.deletions += 1;
            i -= 1;
        } else if j > 0 && d[i * w + j - 1] + 1 == here {
            c.insertions += 1;
            j -= 1;
        } else {
            c.substitutions += 1;
            i -= 1;
            j -= 1;
        }
    }
    c
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoredUtterance {
    pub reference: TokenSequence,
    pub hypothesis: TokenSequence,
    #[serde(flatten)]
    pub counts: EditCounts,
}

impl ScoredUtterance {
    pub fn new(reference: TokenSequence, hypothesis: TokenSequence) -> Self {
        let counts = edit_distance(reference.tokens(), hypothesis.tokens());
        ScoredUtterance {
            reference,
            hypothesis,
            counts,
        }
    }

    pub fn errors(&self) -> usize {
        self.counts.errors()
    }
}

/// Corpus-level scores of one (SNR, shift) condition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellReport {
    pub snr_db: f64,
    pub shift_pct: f64,
    pub utterances: usize,
    /// Utterances whose decode failed; excluded from the counts.
    pub failed: usize,
    pub ref_tokens: usize,
    #[serde(flatten)]
    pub counts: EditCounts,
    /// Errors over reference tokens, in percent.
    pub wer: f64,
    /// Shares of all errors, each in `[0, 1]`.
    pub substitution_share: f64,
    pub insertion_share: f64,
    pub deletion_share: f64,
}

impl CellReport {
    pub fn from_scores(snr_db: f64, shift_pct: f64, scores: &[ScoredUtterance], failed: usize) -> Self {
        let mut counts = EditCounts::default();
        let mut ref_tokens = 0;
        for s in scores {
            counts.substitutions += s.counts.substitutions;
            counts.insertions += s.counts.insertions;
            counts.deletions += s.counts.deletions;
            ref_tokens += s.reference.len();
        }
        let e = counts.errors();
        let share = |k: usize| if e == 0 { 0.0 } else { k as f64 / e as f64 };
        CellReport {
            snr_db,
            shift_pct,
            utterances: scores.len(),
            failed,
            ref_tokens,
            counts,
            wer: if ref_tokens == 0 { 0.0 } else { 100.0 * e as f64 / ref_tokens as f64 },
            substitution_share: share(counts.substitutions),
            insertion_share: share(counts.insertions),
            deletion_share: share(counts.deletions),
        }
    }

    pub fn name(&self) -> String {
        format!("snr{:02}_shift{:03}", self.snr_db as u32, self.shift_pct as u32)
    }
}

/// Relative WER reduction of a system against a reference system.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Werr {
    pub reference: String,
    /// Mean over cells of `(WER_ref - WER) / WER_ref`, in percent.
    pub percent: f64,
    pub weighting: String,
    pub cells_used: usize,
    /// Cells left out because the reference WER is zero.
    pub excluded: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionReport {
    pub system: String,
    pub cells: Vec<CellReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub werr: Option<Werr>,
}

impl ConditionReport {
    pub fn cell(&self, snr_db: f64, shift_pct: f64) -> Option<&CellReport> {
        self.cells.iter().find(|c| c.snr_db == snr_db && c.shift_pct == shift_pct)
    }

    /// Unweighted mean of the cell WERs.
    pub fn mean_wer(&self) -> f64 {
        if self.cells.is_empty() {
            return 0.0;
        }
        self.cells.iter().map(|c| c.wer).sum::<f64>() / self.cells.len() as f64
    }
}

/// Macro-averaged relative WER reduction over the cells of both reports.
pub fn werr(report: &ConditionReport, reference: &ConditionReport) -> Result<Werr> {
    let grid = |r: &ConditionReport| r.cells.iter().map(|c| (c.snr_db, c.shift_pct)).collect::<Vec<_>>();
    if grid(report) != grid(reference) {
        return Err(Error::invalid(format!(
            "reports `{}` and `{}` cover different cells",
            report.system, reference.system
        )));
    }
    let mut sum = 0.0;
    let mut used = 0;
    let mut excluded = Vec::new();
    for (m, b) in report.cells.iter().zip(&reference.cells) {
        if b.wer == 0.0 {
            excluded.push(b.name());
            continue;
        }
        sum += (b.wer - m.wer) / b.wer;
        used += 1;
    }
    if !excluded.is_empty() {
        log::warn!("WERR excludes cells with zero reference WER: {}", excluded.join(", "));
    }
    if used == 0 {
        return Err(Error::invalid("reference WER is zero in every cell; WERR undefined"));
    }
    Ok(Werr {
        reference: reference.system.clone(),
        percent: 100.0 * sum / used as f64,
        weighting: "unweighted mean over cells".into(),
        cells_used: used,
        excluded,
    })
}

/// Where the mixture features of a manifest entry come from.
#[derive(Debug, Clone, Copy)]
pub enum MixtureSource<'a> {
    /// Feature files referenced by the entries, relative to this directory.
    Files(&'a Path),
    /// Re-rendered from the corpus on the fly.
    Corpus(&'a Corpus),
}

impl MixtureSource<'_> {
    pub fn sequence(&self, e: &ManifestEntry) -> Result<FeatureSequence> {
        match self {
            MixtureSource::Files(dir) => {
                FeatureSequence::new(e.load_features(dir)?, e.transcript.clone(), e.anchor_len, None)
            }
            MixtureSource::Corpus(c) => Ok(mix(&e.spec, c)?.seq),
        }
    }
}

/// Decode every entry with the anchor taken from the mixture itself; `None`
/// marks an entry whose decoding failed.
pub fn decode_entries(
    model: &AsrModel,
    manifest: &MixtureManifest,
    source: MixtureSource<'_>,
) -> Vec<Option<TokenSequence>> {
    manifest
        .entries
        .iter()
        .map(|e| {
            let res = source
                .sequence(e)
                .and_then(|seq| model.decode(&seq, &AnchorSpec::mixed(e.anchor_len)));
            match res {
                Ok(d) => Some(d.hypothesis),
                Err(err) => {
                    log::warn!("{}: decode of `{}` failed: {err}", manifest.cell_name(), e.spec.main_id);
                    None
                }
            }
        })
        .collect()
}

/// Scored hypotheses of the entries that decoded, plus the failure count.
pub fn decode_manifest(
    model: &AsrModel,
    manifest: &MixtureManifest,
    source: MixtureSource<'_>,
) -> (Vec<ScoredUtterance>, usize) {
    let hyps = decode_entries(model, manifest, source);
    let failed = hyps.iter().filter(|h| h.is_none()).count();
    let scores = manifest
        .entries
        .iter()
        .zip(hyps)
        .filter_map(|(e, h)| Some(ScoredUtterance::new(e.transcript.clone(), h?)))
        .collect();
    (scores, failed)
}

pub fn score_manifest(model: &AsrModel, manifest: &MixtureManifest, source: MixtureSource<'_>) -> CellReport {
    let (scores, failed) = decode_manifest(model, manifest, source);
    CellReport::from_scores(manifest.snr_db, manifest.shift_pct, &scores, failed)
}

pub fn score_grid(
    system: &str,
    model: &AsrModel,
    manifests: &[MixtureManifest],
    source: MixtureSource<'_>,
) -> ConditionReport {
    ConditionReport {
        system: system.to_string(),
        cells: manifests.iter().map(|m| score_manifest(model, m, source)).collect(),
        werr: None,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub start: f64,
    pub end: f64,
    pub count_target: usize,
    pub count_background: usize,
}

/// Gate values over target-speech and background-only encoder frames.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateHistogram {
    pub bins: Vec<HistogramBin>,
    pub n_target: usize,
    pub n_background: usize,
    pub mean_target: f64,
    pub mean_background: f64,
}

impl GateHistogram {
    pub fn from_values(target: &[f64], background: &[f64], num_bins: usize) -> Result<Self> {
        if num_bins == 0 {
            return Err(Error::invalid("histogram needs at least one bin"));
        }
        let width = (GATE_MAX - GATE_MIN) / num_bins as f64;
        let mut bins: Vec<HistogramBin> = (0..num_bins)
            .map(|i| HistogramBin {
                start: GATE_MIN + i as f64 * width,
                end: if i + 1 == num_bins { GATE_MAX } else { GATE_MIN + (i + 1) as f64 * width },
                count_target: 0,
                count_background: 0,
            })
            .collect();
        let bin_of = |v: f64| (((v - GATE_MIN) / width).floor().max(0.0) as usize).min(num_bins - 1);
        for &v in target {
            bins[bin_of(v)].count_target += 1;
        }
        for &v in background {
            bins[bin_of(v)].count_background += 1;
        }
        let mean = |xs: &[f64]| if xs.is_empty() { f64::NAN } else { xs.iter().sum::<f64>() / xs.len() as f64 };
        Ok(GateHistogram {
            bins,
            n_target: target.len(),
            n_background: background.len(),
            mean_target: mean(target),
            mean_background: mean(background),
        })
    }

    /// `mean_target - mean_background`.
    pub fn separation(&self) -> f64 {
        self.mean_target - self.mean_background
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("bin_start,bin_end,count_target,count_background\n");
        for b in &self.bins {
            let _ = writeln!(s, "{},{},{},{}", b.start, b.end, b.count_target, b.count_background);
        }
        s
    }
}

/// Split one utterance's gates into target-only and background-only frames.
/// Encoder frame `t` covers raw frames `[t*s, (t+1)*s)`; frames touching
/// the overlap are skipped.
pub fn classify_gates(
    gates: &[f64],
    stack_factor: usize,
    main_len: usize,
    bg_start: usize,
    target: &mut Vec<f64>,
    background: &mut Vec<f64>,
) {
    for (t, &b) in gates.iter().enumerate() {
        let (lo, hi) = (t * stack_factor, (t + 1) * stack_factor);
        if hi <= bg_start.min(main_len) {
            target.push(b);
        } else if lo >= main_len {
            background.push(b);
        }
    }
}

/// Gate histograms over every entry of `manifests`.
pub fn gate_histogram(
    model: &AsrModel,
    manifests: &[MixtureManifest],
    source: MixtureSource<'_>,
    num_bins: usize,
) -> Result<GateHistogram> {
    if !model.system.anchoring.gating {
        return Err(Error::invalid("gate analysis needs a model with joiner gating"));
    }
    let s = model.config().stack_factor;
    let (mut target, mut background) = (Vec::new(), Vec::new());
    for m in manifests {
        for e in &m.entries {
            let seq = source.sequence(e)?;
            let gates = model
                .gate_values(&seq, &AnchorSpec::mixed(e.anchor_len))?
                .ok_or_else(|| Error::invalid("model produced no gate values"))?;
            let bg_start = background_offset(e.main_frames, m.shift_pct);
            classify_gates(&gates, s, e.main_frames, bg_start, &mut target, &mut background);
        }
    }
    GateHistogram::from_values(&target, &background, num_bins)
}

/// Table-1 style text: one row per system, SNR columns grouped by shift,
/// plus WERR against the reference when present.
pub fn render_table(reports: &[ConditionReport]) -> String {
    let name_w = reports.iter().map(|r| r.system.len()).max().unwrap_or(6).max(8);
    let mut s = String::new();
    let _ = write!(s, "{:name_w$} ", "");
    for shift in SHIFT_GRID {
        let _ = write!(s, "| {:<34}", format!("Shift = {shift}%"));
    }
    let _ = writeln!(s, "|");
    let _ = write!(s, "{:name_w$} ", "SNR (dB)");
    for _ in SHIFT_GRID {
        let _ = write!(s, "|");
        for snr in SNR_GRID {
            let _ = write!(s, " {snr:>6}");
        }
        let _ = write!(s, " ");
    }
    let _ = writeln!(s, "| WERR");
    for r in reports {
        let _ = write!(s, "{:name_w$} ", r.system);
        for shift in SHIFT_GRID {
            let _ = write!(s, "|");
            for snr in SNR_GRID {
                match r.cell(snr, shift) {
                    Some(c) => {
                        let _ = write!(s, " {:>6.2}", c.wer);
                    }
                    None => {
                        let _ = write!(s, " {:>6}", "-");
                    }
                }
            }
            let _ = write!(s, " ");
        }
        match &r.werr {
            Some(w) => {
                let _ = writeln!(s, "| {:.1}%", w.percent);
            }
            None => {
                let _ = writeln!(s, "| -");
            }
        }
    }
    s
}
