//! `instructasr`: build data, train, decode and evaluate instruction-following
//! recognisers at desk scale.

mod config;

use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use instructasr::decode::decode_batch;
use instructasr::eval::{Classifier, EvalReport};
use instructasr::instructions::{sample_for_utterance, InstructionBank};
use instructasr::model::Model;
use instructasr::pipeline::{self, Prepared};
use instructasr::synthaudio::{build_corpus, Corpus, Utterance, DEFAULT_LEXICON};
use instructasr::textops::Transcript;
use instructasr::tokenizer::Vocabulary;

use config::RunConfig;

/// Environment variable holding the log filter (e.g. `debug`).
const LOG_ENV: &str = "INSTRUCTASR_LOG";

#[derive(Parser, Debug)]
#[command(name = "instructasr", version, about = "Instruction-following speech recognition at desk scale")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// JSON run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Seed for every random stream of the subcommand.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Weight of the transcription skill.
    #[arg(long, global = true)]
    alpha: Option<f64>,
    /// Weight of the summarisation skill.
    #[arg(long, global = true)]
    beta: Option<f64>,
    #[arg(long, global = true, value_parser = clap::value_parser!(u64).range(1..))]
    beam: Option<u64>,
    /// Distance threshold for executed-skill accuracy.
    #[arg(long, global = true)]
    delta: Option<f64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic corpus.
    Synth,
    /// Train the subword vocabulary.
    Vocab,
    /// Write training samples for one epoch as JSON Lines.
    BuildData {
        #[arg(long, default_value_t = 0)]
        epoch: u64,
    },
    /// Train a model and keep the best dev checkpoint.
    Train,
    /// Decode a split with one instruction.
    Decode {
        #[arg(long, default_value = pipeline::ASR_PROMPT)]
        instruction: String,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Read instructions from stdin and decode one utterance.
    Shell {
        #[arg(long, default_value = "test")]
        split: String,
        /// Utterance id; the first of the split by default.
        #[arg(long)]
        utterance: Option<String>,
    },
    /// Run the seen/unseen instruction suite on the test split.
    Eval,
}

/// Problems with the invocation itself: bad config or missing inputs.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

fn resolve(common: &Common) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(common.config.as_deref()).map_err(usage)?;
    let e = &mut cfg.experiment;
    if let Some(s) = common.seed {
        e.synth.seed = s;
        e.sampler.seed = s;
        e.train.seed = s;
        e.model_seed = s;
        e.suite.seed = s;
    }
    if let Some(a) = common.alpha {
        e.sampler.alpha = a;
    }
    if let Some(b) = common.beta {
        e.sampler.beta = b;
    }
    if let Some(b) = common.beam {
        e.decode.beam = b as usize;
    }
    if let Some(d) = common.delta {
        e.suite.delta = d;
    }
    if let Some(o) = &common.out {
        cfg.paths.out = o.clone();
    }
    cfg.validate().map_err(usage)?;
    Ok(cfg)
}

fn require(path: &Path, what: &str) -> Result<()> {
    if !path.exists() {
        return Err(usage(format!("{what} not found at {}", path.display())));
    }
    Ok(())
}

fn bank(cfg: &RunConfig) -> Result<InstructionBank> {
    match &cfg.paths.bank {
        Some(p) => {
            require(p, "instruction bank")?;
            InstructionBank::load(p).with_context(|| format!("loading {}", p.display()))
        }
        None => Ok(InstructionBank::bundled()),
    }
}

fn corpus(cfg: &RunConfig) -> Result<Corpus> {
    require(&cfg.paths.corpus.join("corpus.json"), "corpus")?;
    Corpus::load(&cfg.paths.corpus).with_context(|| format!("loading corpus {}", cfg.paths.corpus.display()))
}

fn prepared(cfg: &RunConfig) -> Result<Prepared> {
    let corpus = corpus(cfg)?;
    let bank = bank(cfg)?;
    require(&cfg.paths.vocab, "vocabulary")?;
    let vocab = Vocabulary::load(&cfg.paths.vocab)?;
    let ctx = pipeline::skill_context(&corpus.train);
    Ok(Prepared { corpus, bank, vocab, ctx })
}

fn model(cfg: &RunConfig) -> Result<Model<f32>> {
    require(&cfg.paths.checkpoint, "checkpoint")?;
    Model::load(&cfg.paths.checkpoint).with_context(|| format!("loading {}", cfg.paths.checkpoint.display()))
}

fn split<'c>(prep: &'c Prepared, name: &str) -> Result<&'c [Utterance]> {
    prep.corpus.split(name).ok_or_else(|| usage(format!("unknown split {name:?}; use train, dev or test")))
}

fn jsonl<T: serde::Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in rows {
        serde_json::to_writer(&mut w, &r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let cfg = resolve(&cli.common)?;
    let out = cfg.paths.out.clone();
    cfg.persist(&out)?;
    let e = &cfg.experiment;
    match cli.command {
        Command::Synth => {
            let corpus = build_corpus(&DEFAULT_LEXICON, &e.corpus, &e.synth)?;
            corpus.save(&cfg.paths.corpus)?;
            println!("corpus {} ({})", cfg.paths.corpus.display(), corpus.content_hash());
        }
        Command::Vocab => {
            let corpus = corpus(&cfg)?;
            let vocab = Vocabulary::build(&pipeline::vocab_corpus(&corpus.train, &bank(&cfg)?), e.vocab_size)?;
            vocab.save(&cfg.paths.vocab)?;
            println!("vocabulary {} with {} pieces", cfg.paths.vocab.display(), vocab.size());
        }
        Command::BuildData { epoch } => {
            let prep = prepared(&cfg)?;
            let rows = prep
                .corpus
                .train
                .iter()
                .map(|u| sample_for_utterance(&u.id, &u.transcript, &prep.bank, &prep.vocab, &prep.ctx, &e.sampler, epoch))
                .collect::<Result<Vec<_>, _>>()?;
            let path = out.join(format!("samples-{epoch}.jsonl"));
            jsonl(&path, &rows)?;
            println!("{} samples -> {}", rows.len(), path.display());
        }
        Command::Train => {
            let prep = prepared(&cfg)?;
            let mut metrics = std::io::BufWriter::new(std::fs::File::create(out.join("metrics.jsonl"))?);
            let outcome = pipeline::train_model(&prep, e, |r| {
                let _ = serde_json::to_writer(&mut metrics, r);
                let _ = metrics.write_all(b"\n");
                let _ = metrics.flush();
            })?;
            outcome.best.save(&cfg.paths.checkpoint)?;
            println!(
                "checkpoint {} step {} dev WER {:.4} sha256 {}",
                cfg.paths.checkpoint.display(),
                outcome.best_step,
                outcome.best_dev_wer,
                outcome.best.checkpoint_hash()
            );
        }
        Command::Decode { instruction, split: name } => {
            let prep = prepared(&cfg)?;
            let model = model(&cfg)?;
            let jobs: Vec<_> = split(&prep, &name)?
                .iter()
                .map(|u| (u.id.clone(), u.features.clone(), instruction.clone()))
                .collect();
            let rows = decode_batch(&model, &prep.vocab, &jobs, &e.decode).into_iter().collect::<Result<Vec<_>, _>>()?;
            let path = out.join("decode.jsonl");
            jsonl(&path, &rows)?;
            println!("{} hypotheses -> {}", rows.len(), path.display());
        }
        Command::Shell { split: name, utterance } => shell(&cfg, &name, utterance.as_deref())?,
        Command::Eval => {
            let prep = prepared(&cfg)?;
            let model = model(&cfg)?;
            let report: EvalReport = pipeline::evaluate(&prep, &model, e);
            std::fs::write(out.join("report.json"), serde_json::to_string_pretty(&EvalSummary::from(&report))? + "\n")?;
            report.write_records(std::io::BufWriter::new(std::fs::File::create(out.join("pairs.jsonl"))?))?;
            print!("{}", report.table());
        }
    }
    Ok(())
}

/// The report without per-pair rows, which go to their own file.
#[derive(serde::Serialize)]
struct EvalSummary<'a> {
    delta: f64,
    utterances: usize,
    per_skill: &'a std::collections::BTreeMap<instructasr::textops::Skill, instructasr::eval::SkillAccuracy>,
    transcribe_wer: &'a std::collections::BTreeMap<instructasr::instructions::Split, f64>,
    ignore_empty: &'a std::collections::BTreeMap<instructasr::instructions::Split, f64>,
    confusion: [[usize; 5]; 5],
    degenerate_pairs: usize,
    failed_pairs: usize,
}

impl<'a> From<&'a EvalReport> for EvalSummary<'a> {
    fn from(r: &'a EvalReport) -> Self {
        Self {
            delta: r.delta,
            utterances: r.utterances,
            per_skill: &r.per_skill,
            transcribe_wer: &r.transcribe_wer,
            ignore_empty: &r.ignore_empty,
            confusion: r.confusion,
            degenerate_pairs: r.degenerate_pairs,
            failed_pairs: r.failed_pairs,
        }
    }
}

fn shell(cfg: &RunConfig, name: &str, utterance: Option<&str>) -> Result<()> {
    let prep = prepared(cfg)?;
    let model = model(cfg)?;
    let utts = split(&prep, name)?;
    let utt = match utterance {
        Some(id) => utts.iter().find(|u| u.id == id).ok_or_else(|| usage(format!("no utterance {id} in {name}")))?,
        None => utts.first().ok_or_else(|| usage(format!("split {name} is empty")))?,
    };
    let classifier = Classifier::new(prep.bank.specs(), prep.ctx.clone());
    let scorer = instructasr::decode::ModelScorer::new(&model, &utt.features)?;
    eprintln!("utterance {} ({} frames); one instruction per line", utt.id, utt.features.frames());
    let stdin = std::io::stdin();
    let mut stdout = std::io::stdout().lock();
    for line in stdin.lock().lines() {
        let line = line?;
        let instruction = line.trim();
        if instruction.is_empty() {
            continue;
        }
        let (_, text) = instructasr::decode::decode_with(&scorer, &prep.vocab, utt.features.frames(), instruction, &cfg.experiment.decode)?;
        let output = Transcript::new(&text);
        let c = classifier.classify(&output, &utt.transcript, Some(&utt.id));
        writeln!(stdout, "{}\t[{} {:.3}]", output.text(), c.spec.label(), c.distance)?;
        stdout.flush()?;
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or(LOG_ENV, "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<Usage>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
