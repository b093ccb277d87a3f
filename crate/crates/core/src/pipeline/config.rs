use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::augment::{ChainSelection, CorruptionConfig, Strategy};
use crate::error::{Error, Result};
use crate::eval::{BleuConfig, Smoothing};
use crate::model::{ModelConfig, Variant};
use crate::rng::StreamRng;
use crate::synthgen::GenerationConfig;
use crate::train::{Phase, TrainConfig};

/// Every tunable of a run in one flat record. Resolved as defaults, then the
/// config file, then command-line overrides.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Master seed; every stage derives its own seed from it.
    pub seed: u64,

    pub docs: usize,
    pub sentences_per_doc: usize,
    pub pronoun_rate: f64,
    pub train_ratio: f64,
    pub valid_ratio: f64,
    pub test_ratio: f64,
    pub context_size: usize,
    pub min_count: usize,
    /// 0 keeps word-level tokens.
    pub bpe_merges: usize,

    pub p_omit: f64,
    pub strategy: Strategy,
    pub variants: usize,
    pub chain_selection: ChainSelection,

    pub variant: Variant,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub dropout: f64,
    pub max_len: usize,
    pub share_embeddings: bool,

    pub learning_rate: f64,
    pub finetune_learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub cl_batch_size: usize,
    pub mt_steps: usize,
    pub finetune_steps: usize,
    pub eval_every: usize,
    pub patience: usize,
    pub alpha: f64,
    pub eta: f64,

    pub beam_size: usize,
    pub length_norm: bool,
    pub bleu_max_n: usize,
    pub smoothing: Smoothing,
    pub bleu_epsilon: f64,
    pub case_sensitive: bool,
    pub char_level: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        let g = GenerationConfig::default();
        let m = ModelConfig::default();
        let t = TrainConfig::default();
        let b = BleuConfig::default();
        RunConfig {
            seed: 1,
            docs: g.num_docs,
            sentences_per_doc: g.sentences_per_doc,
            pronoun_rate: g.pronoun_rate,
            train_ratio: 0.8,
            valid_ratio: 0.1,
            test_ratio: 0.1,
            context_size: 2,
            min_count: 1,
            bpe_merges: 0,
            p_omit: 0.5,
            strategy: Strategy::Both,
            variants: 1,
            chain_selection: ChainSelection::All,
            variant: m.variant,
            d_model: m.d_model,
            n_layers: m.n_layers,
            n_heads: m.n_heads,
            d_ff: m.d_ff,
            dropout: m.dropout,
            max_len: m.max_len,
            share_embeddings: m.share_embeddings,
            learning_rate: t.learning_rate,
            finetune_learning_rate: t.learning_rate,
            beta1: t.beta1,
            beta2: t.beta2,
            adam_eps: t.eps,
            batch_size: t.batch_size,
            cl_batch_size: t.cl_batch_size,
            mt_steps: t.max_steps,
            finetune_steps: 1000,
            eval_every: t.eval_every,
            patience: t.patience,
            alpha: t.alpha,
            eta: t.eta,
            beam_size: 1,
            length_norm: false,
            bleu_max_n: b.max_n,
            smoothing: b.smoothing,
            bleu_epsilon: b.epsilon,
            case_sensitive: b.case_sensitive,
            char_level: b.char_level,
        }
    }
}

/// Seed for one named purpose, derived from the master seed.
pub fn derive_seed(master: u64, purpose: &str) -> u64 {
    StreamRng::labeled(master, purpose).next_u64()
}

impl RunConfig {
    /// Defaults, overlaid by the JSON object in `file`, overlaid by
    /// `overrides`. Unknown keys are errors at either layer.
    pub fn resolve(file: Option<&Path>, overrides: &Map<String, Value>) -> Result<Self> {
        let mut merged = match serde_json::to_value(RunConfig::default()).expect("config serializes") {
            Value::Object(m) => m,
            _ => unreachable!("config is a struct"),
        };
        let mut overlay = |layer: &Map<String, Value>, origin: &str| -> Result<()> {
            for (k, v) in layer {
                if !merged.contains_key(k) {
                    return Err(Error::Config(format!("unknown config key {k:?} in {origin}")));
                }
                merged.insert(k.clone(), v.clone());
            }
            Ok(())
        };
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let v: Value = serde_json::from_str(&text).map_err(|e| Error::Format {
                path: path.display().to_string(),
                line: e.line(),
                msg: e.to_string(),
            })?;
            let Value::Object(layer) = v else {
                return Err(Error::Config(format!("{} is not a JSON object", path.display())));
            };
            overlay(&layer, &path.display().to_string())?;
        }
        overlay(overrides, "command-line flags")?;
        let cfg: RunConfig = serde_json::from_value(Value::Object(merged))
            .map_err(|e| Error::Config(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let sum = self.train_ratio + self.valid_ratio + self.test_ratio;
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("split ratios sum to {sum}, not 1")));
        }
        if self.beam_size == 0 {
            return Err(Error::Config("beam_size must be at least 1".into()));
        }
        self.model(5 + 1)?;
        self.train(Phase::Mt).validate()?;
        self.train(Phase::Finetune).validate()?;
        Ok(())
    }

    pub fn to_value(&self) -> Value {
        serde_json::to_value(self).expect("config serializes")
    }

    pub fn generation(&self) -> GenerationConfig {
        GenerationConfig {
            num_docs: self.docs,
            sentences_per_doc: self.sentences_per_doc,
            pronoun_rate: self.pronoun_rate,
            seed: derive_seed(self.seed, "synth"),
        }
    }

    pub fn split_ratios(&self) -> [f64; 3] {
        [self.train_ratio, self.valid_ratio, self.test_ratio]
    }

    pub fn corruption(&self, pool: Vec<String>) -> CorruptionConfig {
        CorruptionConfig {
            p_omit: self.p_omit,
            seed: derive_seed(self.seed, "augment"),
            replacement_pool: pool,
            strategy: self.strategy,
            variants: self.variants,
            chains: self.chain_selection,
        }
    }

    pub fn model(&self, vocab_size: usize) -> Result<ModelConfig> {
        let m = ModelConfig {
            variant: self.variant,
            d_model: self.d_model,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            d_ff: self.d_ff,
            dropout: self.dropout,
            max_len: self.max_len,
            vocab_size,
            context_size: self.context_size,
            share_embeddings: self.share_embeddings,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn train(&self, phase: Phase) -> TrainConfig {
        let (lr, steps, purpose) = match phase {
            Phase::Mt => (self.learning_rate, self.mt_steps, "train-mt"),
            Phase::Finetune => (self.finetune_learning_rate, self.finetune_steps, "finetune"),
        };
        TrainConfig {
            learning_rate: lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
            batch_size: self.batch_size,
            cl_batch_size: self.cl_batch_size,
            max_steps: steps,
            eval_every: self.eval_every,
            patience: self.patience,
            alpha: self.alpha,
            eta: self.eta,
            seed: derive_seed(self.seed, purpose),
            phase,
        }
    }

    pub fn bleu(&self) -> BleuConfig {
        BleuConfig {
            max_n: self.bleu_max_n,
            smoothing: self.smoothing,
            epsilon: self.bleu_epsilon,
            case_sensitive: self.case_sensitive,
            char_level: self.char_level,
        }
    }

    pub fn init_seed(&self) -> u64 {
        derive_seed(self.seed, "init")
    }

    pub fn split_seed(&self) -> u64 {
        derive_seed(self.seed, "split")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn obj(v: Value) -> Map<String, Value> {
        match v {
            Value::Object(m) => m,
            _ => panic!("not an object"),
        }
    }

    #[test]
    fn defaults_validate_and_round_trip() {
        let c = RunConfig::default();
        c.validate().unwrap();
        let back: RunConfig = serde_json::from_value(c.to_value()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn flags_override_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.json");
        std::fs::write(&p, r#"{"seed": 5, "docs": 50, "alpha": 0.25}"#).unwrap();
        let c = RunConfig::resolve(Some(&p), &obj(json!({"docs": 60}))).unwrap();
        assert_eq!((c.seed, c.docs, c.alpha), (5, 60, 0.25));
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        assert!(RunConfig::resolve(None, &obj(json!({"sede": 1}))).is_err());
        assert!(RunConfig::resolve(None, &obj(json!({"alpha": 2.0}))).is_err());
        assert!(RunConfig::resolve(None, &obj(json!({"train_ratio": 0.5}))).is_err());
        assert!(RunConfig::resolve(None, &obj(json!({"strategy": "omit"}))).is_err());
        let c = RunConfig::resolve(None, &obj(json!({"strategy": "omit-only"}))).unwrap();
        assert_eq!(c.strategy, Strategy::OmitOnly);
    }

    #[test]
    fn stage_seeds_differ() {
        let c = RunConfig::default();
        let seeds = [
            c.generation().seed,
            c.init_seed(),
            c.split_seed(),
            c.train(Phase::Mt).seed,
            c.train(Phase::Finetune).seed,
            c.corruption(vec![]).seed,
        ];
        let set: std::collections::BTreeSet<_> = seeds.iter().collect();
        assert_eq!(set.len(), seeds.len());
    }
}
