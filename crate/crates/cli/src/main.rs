use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Arg, ArgMatches, Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use serde_json::{Map, Value};

use corefcl::corpus::CorpusFormat;
use corefcl::pipeline::stages::{self, WorkDir};
use corefcl::pipeline::RunConfig;

/// Coreference-based contrastive fine-tuning for context-aware NMT.
///
/// Every run-config key is also a global flag (`--p-omit 0.3`); flags
/// override values from `--config`.
#[derive(Parser, Debug)]
#[command(name = "corefcl", version)]
struct Cli {
    /// Flat JSON run config.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Directory holding all artifacts of a run.
    #[arg(long, global = true, default_value = "work")]
    work_dir: PathBuf,
    /// Worker threads for data-stage parallelism (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic corpus, its document split and the contrastive suite.
    SynthGen,
    /// Validate an external corpus file and split it by document.
    Ingest(IngestArgs),
    /// Annotate coreference chains in the training split.
    Annotate {
        /// Rule lexicon (JSON lines) replacing the built-in one.
        #[arg(long)]
        rules: Option<PathBuf>,
    },
    /// Build contrastive pairs from annotated examples.
    Augment {
        /// Output file name inside the work directory.
        #[arg(long, default_value = stages::AUGMENTED)]
        output: String,
    },
    /// Build the vocabulary and train the MT model.
    Train,
    /// Fine-tune the MT checkpoint with the joint MT and contrastive loss.
    Finetune,
    /// Translate a split; writes hypotheses and references.
    Translate(ModelArgs),
    /// Corpus BLEU of a hypothesis file against a reference file.
    Bleu(BleuArgs),
    /// Contrastive pronoun accuracy of a checkpoint.
    ScoreContrastive(ModelArgs),
    /// Corpus, annotation and augmentation statistics.
    Stats,
    /// Compare corruption strategies by fine-tuning once per strategy.
    Ablate,
}

#[derive(Args, Debug)]
struct IngestArgs {
    /// Corpus file, one JSON object per sentence pair.
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value = "jsonl")]
    format: String,
}

#[derive(Args, Debug)]
struct ModelArgs {
    /// Checkpoint [default: finetune.ckpt if present, else mt.ckpt].
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Split file inside the work directory (translate).
    #[arg(long, default_value = stages::TEST)]
    split: String,
    /// Contrastive suite (score-contrastive) [default: <work-dir>/suite.jsonl].
    #[arg(long)]
    suite: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct BleuArgs {
    #[arg(long)]
    hyp: PathBuf,
    #[arg(long = "ref")]
    reference: PathBuf,
    /// Also write the report to this file.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn flag_name(key: &str) -> String {
    key.replace('_', "-")
}

/// One global flag per config key, with the default in its help line.
fn config_args(defaults: &Map<String, Value>) -> Vec<Arg> {
    defaults
        .iter()
        .map(|(key, v)| {
            let shown = match v {
                Value::String(s) => s.clone(),
                other => other.to_string(),
            };
            Arg::new(key.clone())
                .long(flag_name(key))
                .global(true)
                .value_name("VALUE")
                .help_heading("Run config")
                .help(format!("[default: {shown}]"))
        })
        .collect()
}

/// Parses flag strings according to the JSON type of each default.
fn overrides(matches: &ArgMatches, defaults: &Map<String, Value>) -> Result<Map<String, Value>> {
    let mut out = Map::new();
    for (key, default) in defaults {
        let Some(raw) = matches.get_one::<String>(key) else {
            continue;
        };
        let flag = flag_name(key);
        let v = match default {
            Value::String(_) => Value::String(raw.clone()),
            Value::Bool(_) => Value::Bool(raw.parse().with_context(|| format!("--{flag} expects true or false"))?),
            Value::Number(_) => {
                let v: Value = serde_json::from_str(raw).with_context(|| format!("--{flag} expects a number"))?;
                if !v.is_number() {
                    bail!("--{flag} expects a number");
                }
                v
            }
            _ => bail!("--{flag} cannot be set from the command line"),
        };
        out.insert(key.clone(), v);
    }
    Ok(out)
}

fn default_checkpoint(wd: &WorkDir) -> PathBuf {
    let ft = wd.path(stages::FT_CHECKPOINT);
    if ft.is_file() {
        ft
    } else {
        wd.path(stages::MT_CHECKPOINT)
    }
}

fn run(cli: Cli, config: &RunConfig) -> Result<Value> {
    let wd = WorkDir::create(&cli.work_dir)?;
    let checkpoint = |a: &ModelArgs| a.checkpoint.clone().unwrap_or_else(|| default_checkpoint(&wd));
    let out = match cli.command {
        Command::SynthGen => stages::synth_gen(&wd, config)?,
        Command::Ingest(a) => {
            let format: CorpusFormat = a.format.parse()?;
            stages::ingest(&wd, config, &a.input, format)?
        }
        Command::Annotate { rules } => stages::annotate(&wd, config, rules.as_deref())?,
        Command::Augment { output } => stages::augment(&wd, config, None, &output)?,
        Command::Train => stages::train(&wd, config)?,
        Command::Finetune => stages::finetune_stage(&wd, config)?,
        Command::Translate(a) => stages::translate_stage(&wd, config, &checkpoint(&a), &a.split)?,
        Command::Bleu(a) => stages::bleu_stage(config, &a.hyp, &a.reference, a.out.as_deref())?,
        Command::ScoreContrastive(a) => {
            let suite = a.suite.clone().unwrap_or_else(|| wd.path(stages::SUITE));
            let mut report = stages::score_contrastive(&wd, config, &checkpoint(&a), &suite)?;
            // Per-item scores stay in the report file.
            if let Some(o) = report.as_object_mut() {
                o.remove("items");
            }
            report
        }
        Command::Stats => stages::stats(&wd, config)?,
        Command::Ablate => stages::ablate(&wd, config)?,
    };
    Ok(out)
}

fn main() -> ExitCode {
    let defaults = match RunConfig::default().to_value() {
        Value::Object(m) => m,
        _ => unreachable!("config is a struct"),
    };
    let matches = Cli::command().args(config_args(&defaults)).get_matches();
    let result = (|| -> Result<Value> {
        let cli = Cli::from_arg_matches(&matches)?;
        let flags = overrides(subcommand_matches(&matches), &defaults)?;
        let config = RunConfig::resolve(cli.config.as_deref(), &flags)?;
        if cli.threads > 0 {
            rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global()?;
        }
        run(cli, &config)
    })();
    match result {
        Ok(v) => {
            println!("{}", serde_json::to_string_pretty(&v).expect("json serializes"));
            ExitCode::SUCCESS
        }
        Err(e) => {
            let chain: Vec<String> = e.chain().map(|c| c.to_string()).collect();
            eprintln!("error: {}", chain.join(": "));
            ExitCode::FAILURE
        }
    }
}

/// Global flags given after the subcommand land in the subcommand's matches.
fn subcommand_matches(m: &ArgMatches) -> &ArgMatches {
    m.subcommand().map_or(m, |(_, sub)| sub)
}

