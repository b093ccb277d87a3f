//! File-based pipeline stages over a work directory.
//!
//! Every artifact is accompanied by `<file>.meta.json` holding the stage
//! name, the tool version and the resolved run config, except checkpoints
//! and JSON reports, which carry the same record inline.

use std::path::{Path, PathBuf};

use serde_json::{json, Value};

use super::{
    ablation_table, evaluate, finetune, replacement_pool, rules_for, train_mt, translate, AblationRow, Codec, Real,
    RunConfig, TOOL_VERSION,
};
use crate::augment::{build_contrastive_dataset, load_augmented, save_augmented, EditKind, Strategy};
use crate::coref::{annotate_documents, annotation_rate, filter_annotated, load_annotated, write_annotated, RuleSet};
use crate::corpus::{load_corpus, save_corpus, split_by_documents, CorpusFormat, Document};
use crate::error::{Error, Result};
use crate::eval::{contrastive_accuracy, corpus_bleu, load_suite, save_suite, ScoringItem};
use crate::synthgen::{follow_up_rate, generate_contrastive_suite_with, generate_corpus, Lexicon};
use crate::tokenizer::{BpeModel, Vocabulary};
use crate::train::{load_checkpoint, save_checkpoint, Checkpoint, TrainHistory};

pub const CORPUS: &str = "corpus.jsonl";
pub const LEXICON: &str = "lexicon.json";
pub const TRAIN: &str = "train.jsonl";
pub const VALID: &str = "valid.jsonl";
pub const TEST: &str = "test.jsonl";
pub const SUITE: &str = "suite.jsonl";
pub const RULES: &str = "rules.jsonl";
pub const ANNOTATED: &str = "annotated.jsonl";
pub const AUGMENTED: &str = "augmented.jsonl";
pub const VOCAB: &str = "vocab.jsonl";
pub const BPE: &str = "bpe.txt";
pub const MT_CHECKPOINT: &str = "mt.ckpt";
pub const MT_LOG: &str = "mt.log.jsonl";
pub const FT_CHECKPOINT: &str = "finetune.ckpt";
pub const FT_LOG: &str = "finetune.log.jsonl";
pub const HYPOTHESES: &str = "hyp.txt";
pub const REFERENCES: &str = "ref.txt";
pub const BLEU_REPORT: &str = "bleu.json";
pub const CONTRASTIVE_REPORT: &str = "contrastive.json";
pub const STATS: &str = "stats.json";
pub const ABLATION: &str = "ablation.json";
pub const ABLATION_TABLE: &str = "ablation.md";

/// Directory holding one run's artifacts under fixed file names.
#[derive(Clone, Debug)]
pub struct WorkDir {
    root: PathBuf,
}

impl WorkDir {
    pub fn create(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        std::fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
        Ok(WorkDir { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    /// Path of an input that an earlier stage must have produced.
    pub fn input(&self, name: &str) -> Result<PathBuf> {
        let p = self.path(name);
        if p.is_file() {
            Ok(p)
        } else {
            Err(Error::Config(format!("missing input {} (run the producing stage first)", p.display())))
        }
    }
}

/// Stage name, tool version and config, as embedded in every artifact.
pub fn provenance(stage: &str, config: &RunConfig) -> Value {
    json!({"stage": stage, "tool_version": TOOL_VERSION, "config": config.to_value()})
}

pub fn meta_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta.json");
    PathBuf::from(s)
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn write_json(path: &Path, v: &Value) -> Result<()> {
    let mut s = serde_json::to_string_pretty(v).expect("json serializes");
    s.push('\n');
    write_bytes(path, s.as_bytes())
}

fn write_meta(path: &Path, stage: &str, config: &RunConfig) -> Result<()> {
    write_json(&meta_path(path), &provenance(stage, config))
}

fn write_with<F>(path: &Path, f: F) -> Result<()>
where
    F: FnOnce(&mut Vec<u8>) -> std::io::Result<()>,
{
    let mut buf = Vec::new();
    f(&mut buf).map_err(|e| Error::io(path, e))?;
    write_bytes(path, &buf)
}

/// Writes a JSON report with the provenance record under `"run"`.
fn write_report(path: &Path, stage: &str, config: &RunConfig, mut body: Value) -> Result<Value> {
    body.as_object_mut()
        .expect("reports are objects")
        .insert("run".into(), provenance(stage, config));
    write_json(path, &body)?;
    Ok(body)
}

fn load_lexicon(wd: &WorkDir) -> Result<Option<Lexicon>> {
    let p = wd.path(LEXICON);
    if !p.is_file() {
        return Ok(None);
    }
    let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    let lex: Lexicon = serde_json::from_str(&text).map_err(|e| Error::Format {
        path: p.display().to_string(),
        line: e.line(),
        msg: e.to_string(),
    })?;
    lex.validate()?;
    Ok(Some(lex))
}

fn load_split(wd: &WorkDir, name: &str) -> Result<Vec<Document>> {
    load_corpus(&wd.input(name)?, CorpusFormat::JsonLines)
}

fn load_rules(wd: &WorkDir) -> Result<RuleSet> {
    RuleSet::load(&wd.input(RULES)?)
}

fn load_codec(wd: &WorkDir) -> Result<Codec> {
    let vocab = Vocabulary::load(&wd.input(VOCAB)?)?;
    let bpe_path = wd.path(BPE);
    let bpe = if bpe_path.is_file() {
        Some(BpeModel::load(&bpe_path)?)
    } else {
        None
    };
    Ok(Codec { vocab, bpe })
}

/// Loads a checkpoint and checks it against the run config.
pub fn load_model(path: &Path, config: &RunConfig, codec: &Codec) -> Result<Checkpoint<Real>> {
    let expected = config.model(codec.vocab.len())?;
    load_checkpoint::<Real>(path, Some(&expected))
}

fn write_splits(wd: &WorkDir, config: &RunConfig, docs: &[Document], stage: &str) -> Result<Value> {
    let split = split_by_documents(docs, config.split_ratios(), config.split_seed())?;
    for (name, part) in [(TRAIN, &split.train), (VALID, &split.valid), (TEST, &split.test)] {
        let p = wd.path(name);
        save_corpus(part, &p)?;
        write_meta(&p, stage, config)?;
    }
    Ok(json!({
        "train_docs": split.train.len(),
        "valid_docs": split.valid.len(),
        "test_docs": split.test.len(),
    }))
}

fn merge(mut a: Value, b: Value) -> Value {
    if let (Some(a), Value::Object(b)) = (a.as_object_mut(), b) {
        a.extend(b);
    }
    a
}

/// Generates a synthetic corpus, splits it by document and writes the
/// contrastive suite built from the test split.
pub fn synth_gen(wd: &WorkDir, config: &RunConfig) -> Result<Value> {
    const STAGE: &str = "synth-gen";
    let lexicon = Lexicon::default();
    let docs = generate_corpus(&lexicon, &config.generation())?;
    let p = wd.path(CORPUS);
    save_corpus(&docs, &p)?;
    write_meta(&p, STAGE, config)?;
    let p = wd.path(LEXICON);
    write_json(&p, &serde_json::to_value(&lexicon).expect("lexicon serializes"))?;
    write_meta(&p, STAGE, config)?;
    let splits = write_splits(wd, config, &docs, STAGE)?;
    let test = load_split(wd, TEST)?;
    let suite = generate_contrastive_suite_with(&test, &lexicon, config.context_size);
    let p = wd.path(SUITE);
    save_suite(&suite, &p)?;
    write_meta(&p, STAGE, config)?;
    Ok(merge(
        json!({
            "docs": docs.len(),
            "sentences": docs.iter().map(|d| d.pairs.len()).sum::<usize>(),
            "follow_up_rate": follow_up_rate(&docs, &lexicon),
            "suite_items": suite.len(),
        }),
        splits,
    ))
}

/// Validates an external corpus file and splits it by document.
pub fn ingest(wd: &WorkDir, config: &RunConfig, input: &Path, format: CorpusFormat) -> Result<Value> {
    const STAGE: &str = "ingest";
    let docs = load_corpus(input, format)?;
    if docs.is_empty() {
        return Err(Error::Empty("corpus"));
    }
    let p = wd.path(CORPUS);
    save_corpus(&docs, &p)?;
    write_meta(&p, STAGE, config)?;
    let splits = write_splits(wd, config, &docs, STAGE)?;
    Ok(merge(json!({"docs": docs.len()}), splits))
}

/// Runs the rule-based annotator over the training split. `rules` replaces
/// the built-in rule table; the lexicon from `synth-gen` is added either way.
pub fn annotate(wd: &WorkDir, config: &RunConfig, rules: Option<&Path>) -> Result<Value> {
    const STAGE: &str = "annotate";
    let lexicon = load_lexicon(wd)?;
    let rules = match rules {
        Some(p) => {
            let mut r = RuleSet::load(p)?;
            if let Some(lex) = &lexicon {
                r.extend_from_lexicon(lex);
            }
            r
        }
        None => rules_for(lexicon.as_ref()),
    };
    let p = wd.path(RULES);
    write_with(&p, |w| rules.write(w))?;
    write_meta(&p, STAGE, config)?;

    let train = load_split(wd, TRAIN)?;
    let annotated = annotate_documents(&train, config.context_size, &rules);
    let p = wd.path(ANNOTATED);
    write_with(&p, |w| write_annotated(&annotated, w))?;
    write_meta(&p, STAGE, config)?;
    let with_chains = annotated.iter().filter(|a| !a.chains.is_empty()).count();
    Ok(json!({
        "examples": annotated.len(),
        "annotated": with_chains,
        "annotation_rate": annotation_rate(&annotated)?,
    }))
}

/// Builds contrastive pairs from the annotated training examples. The
/// `strategy` argument overrides the config's.
pub fn augment(wd: &WorkDir, config: &RunConfig, strategy: Option<Strategy>, out: &str) -> Result<Value> {
    const STAGE: &str = "augment";
    let rules = load_rules(wd)?;
    let annotated = filter_annotated(&load_annotated(&wd.input(ANNOTATED)?, config.context_size, &rules)?);
    let train = load_split(wd, TRAIN)?;
    let mut corruption = config.corruption(replacement_pool(&rules, &train));
    if let Some(s) = strategy {
        corruption.strategy = s;
    }
    let pairs = build_contrastive_dataset(&annotated, &corruption)?;
    let p = wd.path(out);
    save_augmented(&pairs, &p)?;
    write_meta(&p, STAGE, config)?;
    let (mut omitted, mut replaced) = (0usize, 0usize);
    for e in pairs.iter().flat_map(|p| &p.variants).flat_map(|v| &v.edits) {
        match e.kind {
            EditKind::Omit => omitted += 1,
            EditKind::Replace(_) => replaced += 1,
        }
    }
    Ok(json!({
        "pairs": pairs.len(),
        "strategy": corruption.strategy,
        "omitted": omitted,
        "replaced": replaced,
        "pool_size": corruption.replacement_pool.len(),
    }))
}

fn write_log(wd: &WorkDir, name: &str, stage: &str, config: &RunConfig, history: &TrainHistory) -> Result<()> {
    let p = wd.path(name);
    write_with(&p, |w| history.write_log(w))?;
    write_meta(&p, stage, config)
}

fn history_summary(h: &TrainHistory) -> Value {
    json!({
        "steps": h.steps.len(),
        "best_step": h.best_step,
        "stop": h.stop,
        "initial_val_mt_loss": h.initial_val_mt_loss,
        "final_val_mt_loss": h.evals.last().map(|e| e.val_mt_loss),
    })
}

/// Builds the vocabulary and trains the MT model.
pub fn train(wd: &WorkDir, config: &RunConfig) -> Result<Value> {
    const STAGE: &str = "train";
    let train_docs = load_split(wd, TRAIN)?;
    let valid_docs = load_split(wd, VALID)?;
    let codec = Codec::build(config, &train_docs);
    let p = wd.path(VOCAB);
    codec.vocab.save(&p)?;
    write_meta(&p, STAGE, config)?;
    if let Some(bpe) = &codec.bpe {
        let p = wd.path(BPE);
        bpe.save(&p)?;
        write_meta(&p, STAGE, config)?;
    }
    let tr = codec.examples(&train_docs, config.context_size);
    let va = codec.examples(&valid_docs, config.context_size);
    let run = train_mt(config, codec.vocab.len(), &tr, &va)?;
    save_checkpoint(&run.model, Some(&run.adam), &provenance(STAGE, config), &wd.path(MT_CHECKPOINT))?;
    write_log(wd, MT_LOG, STAGE, config, &run.history)?;
    Ok(merge(json!({"vocab_size": codec.vocab.len()}), history_summary(&run.history)))
}

struct FinetuneData {
    codec: Codec,
    start: Checkpoint<Real>,
    train: Vec<crate::tokenizer::EncodedExample>,
    valid: Vec<crate::tokenizer::EncodedExample>,
}

fn finetune_data(wd: &WorkDir, config: &RunConfig) -> Result<FinetuneData> {
    let codec = load_codec(wd)?;
    let start = load_model(&wd.input(MT_CHECKPOINT)?, config, &codec)?;
    let train = codec.examples(&load_split(wd, TRAIN)?, config.context_size);
    let valid = codec.examples(&load_split(wd, VALID)?, config.context_size);
    Ok(FinetuneData {
        codec,
        start,
        train,
        valid,
    })
}

/// Contrastive fine-tuning of the MT checkpoint.
pub fn finetune_stage(wd: &WorkDir, config: &RunConfig) -> Result<Value> {
    const STAGE: &str = "finetune";
    let data = finetune_data(wd, config)?;
    let rules = load_rules(wd)?;
    let pairs = load_augmented(&wd.input(AUGMENTED)?, &rules)?;
    let items: Vec<_> = pairs.iter().map(|p| data.codec.contrastive(p)).collect();
    let run = finetune(config, &data.start.model, &data.train, &items, &data.valid)?;
    save_checkpoint(&run.model, Some(&run.adam), &provenance(STAGE, config), &wd.path(FT_CHECKPOINT))?;
    write_log(wd, FT_LOG, STAGE, config, &run.history)?;
    Ok(merge(json!({"pairs": items.len()}), history_summary(&run.history)))
}

/// Translates a split with a checkpoint; writes hypotheses and references
/// one segment per line.
pub fn translate_stage(wd: &WorkDir, config: &RunConfig, checkpoint: &Path, split: &str) -> Result<Value> {
    const STAGE: &str = "translate";
    let codec = load_codec(wd)?;
    let ck = load_model(checkpoint, config, &codec)?;
    let docs = load_split(wd, split)?;
    let inputs = codec.examples(&docs, config.context_size);
    let hyps = translate(config, &ck.model, &inputs)?;
    let mut text = String::new();
    for h in &hyps {
        text.push_str(&codec.decode(h)?.join(" "));
        text.push('\n');
    }
    let p = wd.path(HYPOTHESES);
    write_bytes(&p, text.as_bytes())?;
    write_meta(&p, STAGE, config)?;
    let mut refs = String::new();
    for r in Codec::references(&docs) {
        refs.push_str(&r.join(" "));
        refs.push('\n');
    }
    let p = wd.path(REFERENCES);
    write_bytes(&p, refs.as_bytes())?;
    write_meta(&p, STAGE, config)?;
    Ok(json!({"segments": hyps.len(), "beam_size": config.beam_size, "length_norm": config.length_norm}))
}

fn read_segments(path: &Path) -> Result<Vec<Vec<String>>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text.lines().map(crate::corpus::tokenize).collect())
}

/// Corpus BLEU of a hypothesis file against a reference file.
pub fn bleu_stage(config: &RunConfig, hyp: &Path, reference: &Path, out: Option<&Path>) -> Result<Value> {
    let report = corpus_bleu(&read_segments(hyp)?, &read_segments(reference)?, &config.bleu())?;
    let body = serde_json::to_value(&report).expect("report serializes");
    match out {
        Some(p) => write_report(p, "bleu", config, body),
        None => Ok(merge(body, json!({"run": provenance("bleu", config)}))),
    }
}

fn scoring_suite(codec: &Codec, path: &Path) -> Result<Vec<ScoringItem>> {
    Ok(load_suite(path)?.iter().map(|i| codec.scoring_item(i)).collect())
}

/// Contrastive accuracy of a checkpoint on a suite file.
pub fn score_contrastive(wd: &WorkDir, config: &RunConfig, checkpoint: &Path, suite: &Path) -> Result<Value> {
    let codec = load_codec(wd)?;
    let ck = load_model(checkpoint, config, &codec)?;
    let result = contrastive_accuracy(&ck.model, &scoring_suite(&codec, suite)?)?;
    write_report(
        &wd.path(CONTRASTIVE_REPORT),
        "score-contrastive",
        config,
        serde_json::to_value(&result).expect("result serializes"),
    )
}

fn count_file_lines(path: &Path) -> Result<Option<usize>> {
    if !path.is_file() {
        return Ok(None);
    }
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(Some(text.lines().filter(|l| !l.trim().is_empty()).count()))
}

/// Corpus, annotation and augmentation statistics for whatever artifacts
/// exist in the work directory.
pub fn stats(wd: &WorkDir, config: &RunConfig) -> Result<Value> {
    let mut out = serde_json::Map::new();
    let lexicon = load_lexicon(wd)?;
    for name in [TRAIN, VALID, TEST] {
        let p = wd.path(name);
        if !p.is_file() {
            continue;
        }
        let docs = load_corpus(&p, CorpusFormat::JsonLines)?;
        let key = name.trim_end_matches(".jsonl");
        let mut s = json!({
            "docs": docs.len(),
            "sentences": docs.iter().map(|d| d.pairs.len()).sum::<usize>(),
        });
        if let Some(lex) = &lexicon {
            s["follow_up_rate"] = json!(follow_up_rate(&docs, lex));
        }
        out.insert(key.into(), s);
    }
    let p = wd.path(ANNOTATED);
    if p.is_file() {
        let rules = load_rules(wd)?;
        let annotated = load_annotated(&p, config.context_size, &rules)?;
        let chains: usize = annotated.iter().map(|a| a.chains.len()).sum();
        out.insert(
            "annotation".into(),
            json!({
                "examples": annotated.len(),
                "annotated": annotated.iter().filter(|a| !a.chains.is_empty()).count(),
                "chains": chains,
                "annotation_rate": annotation_rate(&annotated)?,
            }),
        );
    }
    if let Some(n) = count_file_lines(&wd.path(AUGMENTED))? {
        out.insert("augmented_pairs".into(), json!(n));
    }
    if let Some(n) = count_file_lines(&wd.path(SUITE))? {
        out.insert("suite_items".into(), json!(n));
    }
    write_report(&wd.path(STATS), "stats", config, Value::Object(out))
}

/// Fine-tunes the MT checkpoint once per corruption strategy and compares
/// suite accuracy and test BLEU against the MT-only starting point.
pub fn ablate(wd: &WorkDir, config: &RunConfig) -> Result<Value> {
    const STAGE: &str = "ablate";
    let data = finetune_data(wd, config)?;
    let suite = scoring_suite(&data.codec, &wd.input(SUITE)?)?;
    let test_docs = load_split(wd, TEST)?;
    let test = data.codec.examples(&test_docs, config.context_size);
    let refs = Codec::references(&test_docs);

    let base = evaluate(config, &data.start.model, &data.codec, &suite, &test, &refs)?;
    let mut rows = vec![AblationRow {
        strategy: None,
        accuracy: base.accuracy,
        bleu: base.bleu.bleu,
        pairs: 0,
        steps: 0,
    }];
    let rules = load_rules(wd)?;
    let annotated = filter_annotated(&load_annotated(&wd.input(ANNOTATED)?, config.context_size, &rules)?);
    let pool = replacement_pool(&rules, &load_split(wd, TRAIN)?);
    for strategy in [Strategy::Both, Strategy::OmitOnly, Strategy::ReplaceOnly] {
        let mut corruption = config.corruption(pool.clone());
        corruption.strategy = strategy;
        let pairs = build_contrastive_dataset(&annotated, &corruption)?;
        let items: Vec<_> = pairs.iter().map(|p| data.codec.contrastive(p)).collect();
        let run = finetune(config, &data.start.model, &data.train, &items, &data.valid)?;
        let ev = evaluate(config, &run.model, &data.codec, &suite, &test, &refs)?;
        rows.push(AblationRow {
            strategy: Some(strategy),
            accuracy: ev.accuracy,
            bleu: ev.bleu.bleu,
            pairs: items.len(),
            steps: run.history.steps.len(),
        });
    }
    let table = ablation_table(&rows);
    let p = wd.path(ABLATION_TABLE);
    write_bytes(&p, table.as_bytes())?;
    write_meta(&p, STAGE, config)?;
    write_report(
        &wd.path(ABLATION),
        STAGE,
        config,
        json!({"rows": rows, "table": table}),
    )
}
