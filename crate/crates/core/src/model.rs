//! A complete recognition system: transducer, optional anchoring, optional
//! anchor-mean baseline and the auxiliary networks its objective needs.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::anchoring::{
    anchored_encode, anchored_forward_vars, init_aux_net, init_bias_projection, AnchorConfig,
    AnchorSpec,
};
use crate::aux_objectives::{
    init_expander, init_fr_net, ExpanderConfig, LossWeights, ObjectiveMode, ReconstructionConfig,
};
use crate::baselines::{apply_baseline, init_amc, BaselineKind};
use crate::error::{Error, Result};
use crate::numerics::{Tape, Var};
use crate::params::{Bound, ParamStore};
use crate::transducer::checkpoint::Checkpoint;
use crate::transducer::{
    greedy_search, init_encoder, init_frontend, init_joiner, init_predictor, FeatureSequence,
    LogitLattice, ModelConfig, TokenSequence,
};

const HEADER_FORMAT: &str = "anchored-asr-model";

/// Everything that determines a model's parameter set and forward pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SystemConfig {
    pub model: ModelConfig,
    pub anchoring: AnchorConfig,
    /// Anchor-mean baseline applied to the raw features; excludes anchoring.
    pub baseline: Option<BaselineKind>,
    pub objective: ObjectiveMode,
    pub weights: LossWeights,
    pub expander: ExpanderConfig,
    pub reconstruction: ReconstructionConfig,
}

impl Default for SystemConfig {
    fn default() -> Self {
        SystemConfig {
            model: ModelConfig::default(),
            anchoring: AnchorConfig::default(),
            baseline: None,
            objective: ObjectiveMode::None,
            weights: LossWeights::default(),
            expander: ExpanderConfig::default(),
            reconstruction: ReconstructionConfig::default(),
        }
    }
}

impl SystemConfig {
    /// Plain transducer without anchoring.
    pub fn plain(model: ModelConfig) -> Self {
        SystemConfig {
            model,
            anchoring: AnchorConfig::disabled(),
            ..SystemConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.weights.validate()?;
        self.anchoring.subsegment.validate()?;
        if self.anchoring.enabled() && self.anchoring.aux_hidden == 0 {
            return Err(Error::invalid("anchoring: aux_hidden must be >= 1"));
        }
        if self.baseline.is_some() && self.anchoring.enabled() {
            return Err(Error::invalid(
                "an anchor-mean baseline cannot be combined with anchoring",
            ));
        }
        if self.objective != ObjectiveMode::None && !self.anchoring.enabled() {
            return Err(Error::invalid(format!(
                "objective {:?} needs a context embedding; enable anchoring",
                self.objective
            )));
        }
        if self.objective.uses_vic() && self.expander.output_dim < 2 {
            return Err(Error::invalid("expander output_dim must be >= 2"));
        }
        Ok(())
    }
}

/// Forward-pass products needed by the training objectives.
#[derive(Debug, Clone, Copy)]
pub struct ModelOutput {
    pub lattice: LogitLattice,
    pub context: Option<Var>,
    pub gate: Option<Var>,
    /// Raw anchor frames `T_w x d_raw` (before any baseline transform).
    pub anchor_raw: Var,
}

/// Greedy hypothesis plus the per-frame gate values used to produce it.
#[derive(Debug, Clone, PartialEq)]
pub struct Decoded {
    pub hypothesis: TokenSequence,
    pub gate: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AsrModel {
    pub system: SystemConfig,
    pub params: ParamStore,
}

impl AsrModel {
    /// Fresh parameters; each tensor is seeded from its name and `seed`.
    pub fn new(system: SystemConfig, seed: u64) -> Result<Self> {
        system.validate()?;
        let cfg = &system.model;
        let mut store = ParamStore::new();
        init_frontend(&mut store, cfg, seed);
        init_encoder(&mut store, cfg, seed);
        init_predictor(&mut store, cfg, seed);
        init_joiner(&mut store, cfg, seed);
        if system.anchoring.enabled() {
            init_aux_net(&mut store, cfg, &system.anchoring, seed);
        }
        if system.anchoring.bias {
            init_bias_projection(&mut store, cfg, seed);
        }
        if system.baseline == Some(BaselineKind::Amc) {
            init_amc(&mut store, cfg.d_raw);
        }
        if system.objective.uses_fr() {
            init_fr_net(&mut store, cfg, &system.reconstruction, seed);
        }
        if system.objective.uses_vic() {
            init_expander(&mut store, cfg, &system.expander, seed);
        }
        store.round_to(cfg.precision);
        Ok(AsrModel { system, params: store })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.system.model
    }

    /// Lattice for `seq` with parameters bound as `p`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &Bound,
        seq: &FeatureSequence,
        spec: &AnchorSpec,
    ) -> Result<ModelOutput> {
        let cfg = &self.system.model;
        spec.validate(cfg.stack_factor)?;
        let raw = tape.constant(seq.frames.clone());
        let anchor_raw = tape.constant(spec.frames(seq)?);
        let input = match self.system.baseline {
            Some(kind) => apply_baseline(tape, p, kind, raw, anchor_raw)?,
            None => raw,
        };
        let out = anchored_forward_vars(tape, p, cfg, &self.system.anchoring, input, anchor_raw, seq)?;
        Ok(ModelOutput {
            lattice: out.lattice,
            context: out.context,
            gate: out.gate,
            anchor_raw,
        })
    }

    /// Encoder states and gate values with constant parameters.
    fn encode_constant(
        &self,
        tape: &mut Tape,
        p: &Bound,
        seq: &FeatureSequence,
        spec: &AnchorSpec,
    ) -> Result<(Var, Option<Vec<f64>>)> {
        let cfg = &self.system.model;
        spec.validate(cfg.stack_factor)?;
        let raw = tape.constant(seq.frames.clone());
        let anchor_raw = tape.constant(spec.frames(seq)?);
        let input = match self.system.baseline {
            Some(kind) => apply_baseline(tape, p, kind, raw, anchor_raw)?,
            None => raw,
        };
        let (f, _, gate) = anchored_encode(tape, p, cfg, &self.system.anchoring, input, anchor_raw)?;
        Ok((f, gate.map(|g| tape.value(g).data().to_vec())))
    }

    /// Greedy decoding, gated frame by frame when the model gates.
    pub fn decode(&self, seq: &FeatureSequence, spec: &AnchorSpec) -> Result<Decoded> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let (f, gate) = self.encode_constant(&mut tape, &p, seq, spec)?;
        let hypothesis = greedy_search(&mut tape, &p, &self.system.model, f, gate.as_deref())?;
        Ok(Decoded { hypothesis, gate })
    }

    /// Per-encoder-frame gate values, or `None` for models without gating.
    pub fn gate_values(&self, seq: &FeatureSequence, spec: &AnchorSpec) -> Result<Option<Vec<f64>>> {
        if !self.system.anchoring.gating {
            return Ok(None);
        }
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        Ok(self.encode_constant(&mut tape, &p, seq, spec)?.1)
    }

    /// Checkpoint with the system config in its header. `training` carries
    /// optional resumable trainer state.
    pub fn to_checkpoint(&self, training: Option<serde_json::Value>) -> Result<Checkpoint> {
        let mut header = serde_json::json!({
            "format": HEADER_FORMAT,
            "system": serde_json::to_value(&self.system)?,
        });
        if let Some(t) = training {
            header["training"] = t;
        }
        Ok(Checkpoint {
            header,
            tensors: self.params.iter().map(|(k, v)| (k.clone(), v.clone())).collect(),
        })
    }

    /// Rebuild a model; tensors outside the system's parameter set (such as
    /// optimizer moments) are ignored, missing or misshapen ones rejected.
    pub fn from_checkpoint(ck: &Checkpoint, path: &Path) -> Result<Self> {
        let bad = |detail: String| Error::Format {
            path: path.to_path_buf(),
            kind: "checkpoint",
            detail,
        };
        if ck.header.get("format").and_then(|v| v.as_str()) != Some(HEADER_FORMAT) {
            return Err(bad(format!("header format is not `{HEADER_FORMAT}`")));
        }
        let system: SystemConfig = serde_json::from_value(
            ck.header.get("system").cloned().ok_or_else(|| bad("header lacks `system`".into()))?,
        )
        .map_err(|e| bad(format!("system config: {e}")))?;
        let mut model = AsrModel::new(system, 0)?;
        for (name, t) in model.params.iter_mut() {
            let src = ck
                .tensors
                .get(name)
                .ok_or_else(|| bad(format!("missing parameter `{name}`")))?;
            if src.shape() != t.shape() {
                return Err(bad(format!(
                    "parameter `{name}` has shape {:?}, expected {:?}",
                    src.shape(),
                    t.shape()
                )));
            }
            *t = src.clone();
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint(None)?.write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::read(path)?, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::anchoring::{GATE_MAX, GATE_MIN};
    use crate::mixsim::{synth_corpus, ToyCorpusConfig};

    fn small() -> ModelConfig {
        ModelConfig {
            d_model: 16,
            front_dim: 8,
            joiner_dim: 16,
            context_dim: 8,
            ..ModelConfig::default()
        }
    }

    fn systems() -> Vec<SystemConfig> {
        let anchored = SystemConfig {
            model: small(),
            anchoring: AnchorConfig {
                aux_hidden: 8,
                ..AnchorConfig::default()
            },
            objective: ObjectiveMode::Both,
            expander: ExpanderConfig {
                output_dim: 16,
                hidden_layers: 1,
            },
            ..SystemConfig::default()
        };
        vec![
            SystemConfig::plain(small()),
            anchored,
            SystemConfig {
                baseline: Some(BaselineKind::Ams),
                ..SystemConfig::plain(small())
            },
            SystemConfig {
                baseline: Some(BaselineKind::Amc),
                ..SystemConfig::plain(small())
            },
        ]
    }

    #[test]
    fn invalid_combinations_are_rejected() {
        let mut s = SystemConfig::plain(small());
        s.objective = ObjectiveMode::Vic;
        assert!(s.validate().is_err());
        let mut s = SystemConfig {
            model: small(),
            ..SystemConfig::default()
        };
        s.baseline = Some(BaselineKind::Ams);
        assert!(s.validate().is_err());
        assert!(SystemConfig::default().validate().is_ok());
    }

    #[test]
    fn parameter_sets_follow_the_config() {
        let [plain, anchored, ams, amc]: [SystemConfig; 4] = systems().try_into().unwrap();
        let plain = AsrModel::new(plain, 1).unwrap();
        let anchored = AsrModel::new(anchored, 1).unwrap();
        let ams = AsrModel::new(ams, 1).unwrap();
        let amc = AsrModel::new(amc, 1).unwrap();
        assert_eq!(plain.params.names(), ams.params.names());
        assert!(amc.params.contains("amc.w"));
        for n in ["aux.out.w", "anchor.proj.w", "fr.embed", "vic.exp.out.w"] {
            assert!(anchored.params.contains(n), "{n}");
            assert!(!plain.params.contains(n), "{n}");
        }
        for n in plain.params.names() {
            assert_eq!(plain.params.get(&n).unwrap(), ams.params.get(&n).unwrap());
        }
    }

    #[test]
    fn decode_and_checkpoint_round_trip() {
        let corpus = synth_corpus(&ToyCorpusConfig {
            num_styles: 4,
            train_styles: 2,
            dev_styles: 1,
            utts_per_style: 2,
            ..ToyCorpusConfig::default()
        })
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        for (i, sys) in systems().into_iter().enumerate() {
            let gating = sys.anchoring.gating;
            let m = AsrModel::new(sys, 5).unwrap();
            let u = &corpus.utterances[0];
            let seq = u.to_sequence().unwrap();
            let spec = AnchorSpec::mixed(u.anchor_len);
            let d = m.decode(&seq, &spec).unwrap();
            assert_eq!(d.gate.is_some(), gating);
            assert_eq!(m.gate_values(&seq, &spec).unwrap(), d.gate);
            if let Some(g) = &d.gate {
                assert_eq!(g.len(), seq.num_frames() / m.config().stack_factor);
                assert!(g.iter().all(|b| (GATE_MIN..=GATE_MAX).contains(b)));
            }
            let path = dir.path().join(format!("m{i}.ckpt"));
            m.save(&path).unwrap();
            let back = AsrModel::load(&path).unwrap();
            assert_eq!(back, m);
            assert_eq!(back.decode(&seq, &spec).unwrap(), d);
        }
    }

    #[test]
    fn checkpoint_rejects_foreign_headers_and_missing_tensors() {
        let m = AsrModel::new(SystemConfig::plain(small()), 2).unwrap();
        let mut ck = m.to_checkpoint(None).unwrap();
        let key = ck.tensors.keys().next().unwrap().clone();
        ck.tensors.remove(&key);
        let err = AsrModel::from_checkpoint(&ck, Path::new("x.ckpt")).unwrap_err();
        assert!(err.to_string().contains(&key));
        let mut ck = m.to_checkpoint(None).unwrap();
        ck.header["format"] = "other".into();
        assert!(AsrModel::from_checkpoint(&ck, Path::new("x.ckpt")).is_err());
    }
}
