//! End-to-end orchestration over in-memory data. The file-based stages in
//! [`stages`] wrap these functions with the work-directory layout.

mod config;
pub mod stages;

use serde::{Deserialize, Serialize};

pub use config::{derive_seed, RunConfig};

use crate::augment::{ContrastivePair, Strategy};
use crate::autodiff::Scalar;
use crate::coref::RuleSet;
use crate::corpus::{extract_all, tokenize, Document};
use crate::error::Result;
use crate::eval::{beam_decode, contrastive_accuracy, corpus_bleu, default_max_len, greedy_decode, BleuReport, ScoringItem};
use crate::model::{Input, Model};
use crate::synthgen::{ContrastiveTestItem, Lexicon};
use crate::tokenizer::{build_vocab, decode, encode_context, encode_example, encode_parts, encode_sentence, surface, train_bpe, BpeModel, EncodedExample, Vocabulary};
use crate::train::{train, AdamState, ContrastiveItem, Phase, TrainHistory};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Parameter precision used by the pipeline.
pub type Real = f32;

/// Built-in rules, extended with the source side of `lexicon` when given.
pub fn rules_for(lexicon: Option<&Lexicon>) -> RuleSet {
    let mut rules = RuleSet::default();
    if let Some(lex) = lexicon {
        rules.extend_from_lexicon(lex);
    }
    rules
}

/// Nominal lexicon tokens that occur on the source side of `docs`.
pub fn replacement_pool(rules: &RuleSet, docs: &[Document]) -> Vec<String> {
    let seen: std::collections::HashSet<String> = docs
        .iter()
        .flat_map(|d| &d.pairs)
        .flat_map(|p| tokenize(&p.source_text))
        .collect();
    rules.nouns().into_iter().filter(|n| seen.contains(n)).collect()
}

/// Vocabulary plus optional BPE model.
#[derive(Clone, Debug, PartialEq)]
pub struct Codec {
    pub vocab: Vocabulary,
    pub bpe: Option<BpeModel>,
}

impl Codec {
    /// Joint source/target vocabulary over the training documents.
    pub fn build(config: &RunConfig, docs: &[Document]) -> Codec {
        let words: Vec<String> = docs
            .iter()
            .flat_map(|d| &d.pairs)
            .flat_map(|p| tokenize(&p.source_text).into_iter().chain(tokenize(&p.target_text)))
            .collect();
        let bpe = (config.bpe_merges > 0).then(|| train_bpe(words.iter().map(String::as_str), config.bpe_merges));
        let symbols = surface(&words, bpe.as_ref());
        let vocab = build_vocab(symbols.iter().map(String::as_str), config.min_count);
        Codec { vocab, bpe }
    }

    pub fn examples(&self, docs: &[Document], context_size: usize) -> Vec<EncodedExample> {
        extract_all(docs, context_size)
            .iter()
            .map(|e| encode_example(e, &self.vocab, self.bpe.as_ref()))
            .collect()
    }

    pub fn references(docs: &[Document]) -> Vec<Vec<String>> {
        docs.iter()
            .flat_map(|d| &d.pairs)
            .map(|p| tokenize(&p.target_text))
            .collect()
    }

    pub fn contrastive(&self, pair: &ContrastivePair) -> ContrastiveItem {
        let bpe = self.bpe.as_ref();
        ContrastiveItem {
            example: encode_example(pair.example(), &self.vocab, bpe),
            corrupted: pair
                .variants
                .iter()
                .map(|v| v.contexts.iter().map(|c| encode_context(c, &self.vocab, bpe)).collect())
                .collect(),
        }
    }

    pub fn scoring_item(&self, item: &ContrastiveTestItem) -> ScoringItem {
        let bpe = self.bpe.as_ref();
        let enc = encode_parts(&item.contexts, &item.source, &item.target_correct, &self.vocab, bpe);
        ScoringItem {
            contexts: enc.contexts,
            source: enc.source,
            correct: enc.target,
            incorrect: item
                .targets_incorrect
                .iter()
                .map(|t| encode_sentence(t, &self.vocab, bpe))
                .collect(),
        }
    }

    pub fn decode(&self, ids: &[usize]) -> Result<Vec<String>> {
        decode(ids, &self.vocab, self.bpe.as_ref())
    }
}

/// A model with its optimizer state and training history.
pub struct Trained {
    pub model: Model<Real>,
    pub adam: AdamState<Real>,
    pub history: TrainHistory,
}

/// Trains a fresh model on the MT objective.
pub fn train_mt(
    config: &RunConfig,
    vocab_size: usize,
    train_set: &[EncodedExample],
    valid: &[EncodedExample],
) -> Result<Trained> {
    let mut model = Model::<Real>::new(config.model(vocab_size)?, config.init_seed())?;
    let mut adam = AdamState::new(model.params());
    let history = train(
        &mut model,
        &mut adam,
        train_set,
        None,
        Some(valid),
        &config.train(Phase::Mt),
    )?;
    Ok(Trained { model, adam, history })
}

/// Fine-tunes a copy of `start` on the joint objective with a fresh
/// optimizer state.
pub fn finetune(
    config: &RunConfig,
    start: &Model<Real>,
    train_set: &[EncodedExample],
    items: &[ContrastiveItem],
    valid: &[EncodedExample],
) -> Result<Trained> {
    let mut model = start.clone();
    let mut adam = AdamState::new(model.params());
    let history = train(
        &mut model,
        &mut adam,
        train_set,
        Some(items),
        Some(valid),
        &config.train(Phase::Finetune),
    )?;
    Ok(Trained { model, adam, history })
}

/// Decodes every input with greedy search (`beam_size` 1) or beam search.
pub fn translate<F: Scalar>(config: &RunConfig, model: &Model<F>, inputs: &[EncodedExample]) -> Result<Vec<Vec<usize>>> {
    let mut out = Vec::with_capacity(inputs.len());
    for chunk in inputs.chunks(config.batch_size.max(1)) {
        if config.beam_size == 1 {
            let batch: Vec<Input> = chunk.iter().map(Input::from).collect();
            let longest = chunk.iter().map(|e| e.source.len()).max().unwrap_or(0);
            out.extend(greedy_decode(model, &batch, default_max_len(model, longest))?);
        } else {
            for e in chunk {
                let cap = default_max_len(model, e.source.len());
                out.push(beam_decode(model, Input::from(e), config.beam_size, config.length_norm, cap)?);
            }
        }
    }
    Ok(out)
}

/// Suite accuracy and held-out BLEU of one model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub accuracy: f64,
    pub correct_count: usize,
    pub item_count: usize,
    pub bleu: BleuReport,
}

pub fn evaluate<F: Scalar>(
    config: &RunConfig,
    model: &Model<F>,
    codec: &Codec,
    suite: &[ScoringItem],
    test: &[EncodedExample],
    references: &[Vec<String>],
) -> Result<Evaluation> {
    let scores = contrastive_accuracy(model, suite)?;
    let hyps = translate(config, model, test)?
        .iter()
        .map(|h| codec.decode(h))
        .collect::<Result<Vec<_>>>()?;
    let bleu = corpus_bleu(&hyps, references, &config.bleu())?;
    Ok(Evaluation {
        accuracy: scores.accuracy,
        correct_count: scores.correct_count,
        item_count: scores.item_count,
        bleu,
    })
}

/// One row of the strategy comparison.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    /// `None` for the MT-only starting point.
    pub strategy: Option<Strategy>,
    pub accuracy: f64,
    pub bleu: f64,
    pub pairs: usize,
    pub steps: usize,
}

/// Markdown table with one row per entry.
pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut s = String::from("| setting | contrastive accuracy | BLEU | pairs | steps |\n|---|---|---|---|---|\n");
    for r in rows {
        let name = r.strategy.map_or("mt-only".to_string(), |st| st.to_string());
        s.push_str(&format!(
            "| {name} | {:.4} | {:.2} | {} | {} |\n",
            r.accuracy, r.bleu, r.pairs, r.steps
        ));
    }
    s
}
