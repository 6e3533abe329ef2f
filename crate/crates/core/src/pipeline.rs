//! The experiment stages behind the command line, each reading the artifacts
//! of the previous stage from a fixed directory layout.
//!
//! ```text
//! <out>/corpus/corpus.json, features/*.feat      synth
//! <out>/mixtures/<cell>.json, <cell>/*.feat      mix
//! <out>/models/<system>/{last,best}.ckpt, loss.csv  train
//! <out>/decode/<system>/<cell>.json              decode
//! <out>/reports/report.json, report.txt          score
//! <out>/gates/<system>/<cell>.csv, <cell>.json   analyze-gates
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::evalreport::{
    decode_entries, gate_histogram, render_table, werr, CellReport, ConditionReport, GateHistogram, MixtureSource,
    ScoredUtterance,
};
use crate::mixsim::{build_eval_grid, synth_corpus, Corpus, MixtureManifest, SHIFT_GRID, SNR_GRID};
use crate::model::AsrModel;
use crate::train::{train, TrainOptions, TrainOutcome};
use crate::transducer::TokenSequence;

/// Paths of every artifact under one output root.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Layout { root: root.into() }
    }

    pub fn corpus_dir(&self) -> PathBuf {
        self.root.join("corpus")
    }

    pub fn mixtures_dir(&self) -> PathBuf {
        self.root.join("mixtures")
    }

    pub fn model_dir(&self, system: &str) -> PathBuf {
        self.root.join("models").join(system)
    }

    pub fn decode_dir(&self, system: &str) -> PathBuf {
        self.root.join("decode").join(system)
    }

    pub fn reports_dir(&self) -> PathBuf {
        self.root.join("reports")
    }

    pub fn gates_dir(&self, system: &str) -> PathBuf {
        self.root.join("gates").join(system)
    }
}

/// Which checkpoint of a trained system to evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Which {
    #[default]
    Best,
    Last,
}

impl Which {
    fn file(self) -> &'static str {
        match self {
            Which::Best => "best.ckpt",
            Which::Last => "last.ckpt",
        }
    }
}

/// Decoding result of one mixture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HypothesisRecord {
    pub main_id: String,
    pub background_id: String,
    pub reference: TokenSequence,
    /// `None` when decoding failed.
    pub hypothesis: Option<TokenSequence>,
}

/// Hypotheses of one system on one evaluation cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellHypotheses {
    pub system: String,
    pub snr_db: f64,
    pub shift_pct: f64,
    pub entries: Vec<HypothesisRecord>,
}

impl CellHypotheses {
    pub fn report(&self) -> CellReport {
        let scores: Vec<ScoredUtterance> = self
            .entries
            .iter()
            .filter_map(|e| Some(ScoredUtterance::new(e.reference.clone(), e.hypothesis.clone()?)))
            .collect();
        let failed = self.entries.len() - scores.len();
        CellReport::from_scores(self.snr_db, self.shift_pct, &scores, failed)
    }
}

/// Gate statistics of one system on one cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateSummary {
    pub system: String,
    pub cell: String,
    pub separation: f64,
    pub histogram: GateHistogram,
}

/// Cell names in grid order (shift-major, then SNR).
pub fn cell_names() -> Vec<String> {
    SHIFT_GRID
        .iter()
        .flat_map(|&shift| SNR_GRID.iter().map(move |&snr| cell_name(snr, shift)))
        .collect()
}

pub fn cell_name(snr_db: f64, shift_pct: f64) -> String {
    MixtureManifest {
        snr_db,
        shift_pct,
        entries: Vec::new(),
    }
    .cell_name()
}

fn require(path: &Path, hint: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::Missing {
            path: path.to_path_buf(),
            hint: hint.to_string(),
        })
    }
}

/// Generate and store the synthetic corpus.
pub fn synth(cfg: &ExperimentConfig) -> Result<Corpus> {
    let corpus = synth_corpus(&cfg.corpus)?;
    corpus.save(&Layout::new(&cfg.output_dir).corpus_dir())?;
    Ok(corpus)
}

pub fn load_corpus(cfg: &ExperimentConfig) -> Result<Corpus> {
    let dir = Layout::new(&cfg.output_dir).corpus_dir();
    require(&dir.join("corpus.json"), "run `synth` first")?;
    let corpus = Corpus::load(&dir)?;
    if corpus.config != cfg.corpus {
        return Err(Error::invalid(format!(
            "{}: corpus was generated with a different configuration; rerun `synth`",
            dir.display()
        )));
    }
    Ok(corpus)
}

/// Render the evaluation grid; returns the manifest paths in grid order.
pub fn mix(cfg: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    let corpus = load_corpus(cfg)?;
    let dir = Layout::new(&cfg.output_dir).mixtures_dir();
    build_eval_grid(&corpus, &cfg.eval_grid)?
        .iter_mut()
        .map(|m| m.save(&corpus, &dir))
        .collect()
}

pub fn load_grid(cfg: &ExperimentConfig) -> Result<Vec<MixtureManifest>> {
    let dir = Layout::new(&cfg.output_dir).mixtures_dir();
    cell_names()
        .iter()
        .map(|c| {
            let path = dir.join(format!("{c}.json"));
            require(&path, "run `mix` first")?;
            MixtureManifest::load(&path)
        })
        .collect()
}

/// Train one named system; with `resume`, continue from its last checkpoint.
pub fn train_system(cfg: &ExperimentConfig, system: &str, resume: bool) -> Result<TrainOutcome> {
    let sys = cfg.system(system)?.clone();
    let corpus = load_corpus(cfg)?;
    let init = AsrModel::new(sys, cfg.train.seed)?;
    let opts = TrainOptions {
        out_dir: Some(Layout::new(&cfg.output_dir).model_dir(system)),
        resume,
        stop_after_epochs: None,
    };
    train(init, &cfg.train, &cfg.mixer, &corpus, &opts)
}

pub fn load_model(cfg: &ExperimentConfig, system: &str, which: Which) -> Result<AsrModel> {
    let path = Layout::new(&cfg.output_dir).model_dir(system).join(which.file());
    require(&path, &format!("run `train --system {system}` first"))?;
    let model = AsrModel::load(&path)?;
    if &model.system != cfg.system(system)? {
        return Err(Error::invalid(format!(
            "{}: checkpoint was trained with a different system configuration",
            path.display()
        )));
    }
    Ok(model)
}

/// Decode every evaluation cell with one system; returns the written files.
pub fn decode(cfg: &ExperimentConfig, system: &str, which: Which) -> Result<Vec<PathBuf>> {
    let model = load_model(cfg, system, which)?;
    let grid = load_grid(cfg)?;
    let layout = Layout::new(&cfg.output_dir);
    let mix_dir = layout.mixtures_dir();
    let out_dir = layout.decode_dir(system);
    let mut written = Vec::with_capacity(grid.len());
    for m in &grid {
        let entries = m
            .entries
            .iter()
            .zip(decode_entries(&model, m, MixtureSource::Files(&mix_dir)))
            .map(|(e, hypothesis)| HypothesisRecord {
                main_id: e.spec.main_id.clone(),
                background_id: e.spec.background_id.clone(),
                reference: e.transcript.clone(),
                hypothesis,
            })
            .collect();
        let hyps = CellHypotheses {
            system: system.to_string(),
            snr_db: m.snr_db,
            shift_pct: m.shift_pct,
            entries,
        };
        let path = out_dir.join(format!("{}.json", m.cell_name()));
        crate::mixsim::write_json(&path, &hyps)?;
        written.push(path);
    }
    Ok(written)
}

/// Per-cell report of one system from its decode output.
pub fn condition_report(cfg: &ExperimentConfig, system: &str) -> Result<ConditionReport> {
    let dir = Layout::new(&cfg.output_dir).decode_dir(system);
    let mut cells = Vec::with_capacity(15);
    for c in cell_names() {
        let path = dir.join(format!("{c}.json"));
        require(&path, &format!("run `decode --system {system}` first"))?;
        let hyps: CellHypotheses = crate::mixsim::read_json(&path)?;
        cells.push(hyps.report());
    }
    Ok(ConditionReport {
        system: system.to_string(),
        cells,
        werr: None,
    })
}

/// Score the given systems, attach WERR against the reference system and
/// write `report.json` and `report.txt`.
///
/// The reference comes from `reference_file` (a previous `report.json`) when
/// given, otherwise from the scored systems themselves.
pub fn score(cfg: &ExperimentConfig, systems: &[String], reference_file: Option<&Path>) -> Result<Vec<ConditionReport>> {
    let mut reports = systems
        .iter()
        .map(|s| condition_report(cfg, s))
        .collect::<Result<Vec<_>>>()?;
    let reference = match reference_file {
        Some(path) => {
            let prev: Vec<ConditionReport> = crate::mixsim::read_json(path)?;
            Some(prev.into_iter().find(|r| r.system == cfg.reference_system).ok_or_else(|| {
                Error::invalid(format!("{}: no report for system `{}`", path.display(), cfg.reference_system))
            })?)
        }
        None => reports.iter().find(|r| r.system == cfg.reference_system).cloned(),
    };
    if let Some(reference) = &reference {
        for r in reports.iter_mut().filter(|r| r.system != reference.system) {
            r.werr = Some(werr(r, reference)?);
        }
    }
    let dir = Layout::new(&cfg.output_dir).reports_dir();
    crate::mixsim::write_json(&dir.join("report.json"), &reports)?;
    let path = dir.join("report.txt");
    fs::write(&path, render_table(&reports)).map_err(|e| Error::io(&path, e))?;
    Ok(reports)
}

/// Gate histogram of one system on one cell, written as CSV plus a JSON
/// summary.
pub fn analyze_gates(
    cfg: &ExperimentConfig,
    system: &str,
    which: Which,
    snr_db: f64,
    shift_pct: f64,
    num_bins: usize,
) -> Result<GateSummary> {
    let model = load_model(cfg, system, which)?;
    let cell = cell_name(snr_db, shift_pct);
    let layout = Layout::new(&cfg.output_dir);
    let mix_dir = layout.mixtures_dir();
    let path = mix_dir.join(format!("{cell}.json"));
    require(&path, "run `mix` first, or pick a cell of the evaluation grid")?;
    let manifest = MixtureManifest::load(&path)?;
    let histogram = gate_histogram(&model, std::slice::from_ref(&manifest), MixtureSource::Files(&mix_dir), num_bins)?;
    let out = layout.gates_dir(system);
    let csv = out.join(format!("{cell}.csv"));
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    fs::write(&csv, histogram.to_csv()).map_err(|e| Error::io(&csv, e))?;
    let summary = GateSummary {
        system: system.to_string(),
        cell: cell.clone(),
        separation: histogram.separation(),
        histogram,
    };
    crate::mixsim::write_json(&out.join(format!("{cell}.json")), &summary)?;
    Ok(summary)
}
