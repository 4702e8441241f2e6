//! End-to-end wiring: vocabulary corpus, per-step batch assembly, checkpoint
//! probes and the full train-then-evaluate experiment.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::decode::{DecodeConfig, ModelScorer};
use crate::eval::{corpus_wer, evaluate_suite, Classifier, EvalReport, ModelExecutor, SuiteConfig};
use crate::instructions::{sample_for_utterance, InstructionBank, InstructionError, SamplerConfig, TrainingSample};
use crate::model::train::{train, MetricsRecord, Probe, ScheduleConfig, TrainConfig, TrainOutcome};
use crate::model::{Batch, Model, ModelConfig, ModelError};
use crate::synthaudio::{build_corpus, spec_augment, Corpus, CorpusSpec, MaskPolicy, SynthConfig, SynthError, Utterance};
use crate::textops::{CorpusStats, Skill, SkillContext, Transcript};
use crate::tokenizer::{TokenizerError, Vocabulary};

/// Prompt used for transcription WER.
pub const ASR_PROMPT: &str = "Please transcribe the speech";

/// Extra vocabulary line so every letter and common punctuation mark has a
/// piece, letting unseen instructions encode.
pub const CHARSET_SEED: &str = "abcdefghijklmnopqrstuvwxyz 0123456789 .,;:!?'\"-()";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error(transparent)]
    Instruction(#[from] InstructionError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("{0}")]
    Invalid(String),
}

/// Lines the tokenizer is trained on: training transcripts, every bank
/// instruction (lowercased) and the charset seed.
pub fn vocab_corpus(train: &[Utterance], bank: &InstructionBank) -> Vec<String> {
    let mut lines: Vec<String> = train.iter().map(|u| u.transcript.text()).collect();
    lines.extend(bank.texts());
    lines.push(CHARSET_SEED.to_owned());
    lines
}

/// Summary statistics come from the training transcripts.
pub fn skill_context(train: &[Utterance]) -> SkillContext {
    SkillContext::with_stats(CorpusStats::from_transcripts(train.iter().map(|u| &u.transcript)))
}

/// Deterministic batch source: epoch `e` visits the training set in a seeded
/// permutation, and each utterance draws its skill, template and masks from
/// its own `(seed, id, epoch)` streams.
pub struct TrainingData<'a> {
    pub utterances: &'a [Utterance],
    pub bank: &'a InstructionBank,
    pub vocab: &'a Vocabulary,
    pub ctx: &'a SkillContext,
    pub sampler: SamplerConfig,
    pub augment: MaskPolicy,
    pub model: ModelConfig,
    pub batch_size: usize,
    pub target_only_loss: bool,
}

impl TrainingData<'_> {
    fn order(&self, epoch: u64) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.utterances.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(crate::derive_seed(self.sampler.seed, &format!("order#{epoch}")));
        idx.shuffle(&mut rng);
        idx
    }

    pub fn sample(&self, index: usize, epoch: u64) -> Result<TrainingSample, PipelineError> {
        let u = &self.utterances[index];
        Ok(sample_for_utterance(&u.id, &u.transcript, self.bank, self.vocab, self.ctx, &self.sampler, epoch)?)
    }

    /// `(epoch, utterance index)` pairs making up 1-based `step`.
    pub fn positions(&self, step: usize) -> Vec<(u64, usize)> {
        let n = self.utterances.len();
        let first = (step - 1) * self.batch_size;
        let mut cached: Option<(u64, Vec<usize>)> = None;
        (first..first + self.batch_size)
            .map(|p| {
                let epoch = (p / n) as u64;
                if cached.as_ref().is_none_or(|c| c.0 != epoch) {
                    cached = Some((epoch, self.order(epoch)));
                }
                (epoch, cached.as_ref().expect("just set").1[p % n])
            })
            .collect()
    }

    pub fn batch(&self, step: usize) -> Result<Batch, PipelineError> {
        if self.utterances.is_empty() || self.batch_size == 0 {
            return Err(PipelineError::Invalid("empty training set or zero batch size".into()));
        }
        let items = crate::par::map(&self.positions(step), |&(epoch, i)| -> Result<_, PipelineError> {
            let s = self.sample(i, epoch)?;
            let u = &self.utterances[i];
            let mut rng = ChaCha8Rng::seed_from_u64(crate::derive_seed(self.sampler.seed, &format!("mask/{}#{epoch}", u.id)));
            Ok((spec_augment(&u.features, &mut rng, &self.augment), s))
        });
        let mut batch = Batch::new();
        for item in items {
            let (features, s) = item?;
            let start = if self.target_only_loss { s.target_start() } else { 0 };
            batch.push(&self.model, &features, &s.composed, start)?;
        }
        Ok(batch)
    }
}

/// Transcription WER of `model` on `utterances` with `prompt`.
pub fn transcribe_wer<T: crate::model::tensor::Real>(
    model: &Model<T>,
    vocab: &Vocabulary,
    utterances: &[Utterance],
    prompt: &str,
    decode: &DecodeConfig,
) -> f64 {
    let hyps = crate::par::map(utterances, |u| {
        ModelScorer::new(model, &u.features)
            .and_then(|s| crate::decode::decode_with(&s, vocab, u.features.frames(), prompt, decode))
            .map(|(_, text)| Transcript::new(&text))
            .unwrap_or_default()
    });
    corpus_wer(utterances.iter().map(|u| &u.transcript).zip(&hyps))
}

/// Per-skill accuracy on a few utterances with the first seen template of
/// every bank spec, for tracking how skills emerge during training.
pub fn skill_probe<T: crate::model::tensor::Real>(
    model: &Model<T>,
    vocab: &Vocabulary,
    utterances: &[Utterance],
    bank: &InstructionBank,
    ctx: &SkillContext,
    decode: &DecodeConfig,
    delta: f64,
) -> BTreeMap<String, f64> {
    let classifier = Classifier::new(bank.specs(), ctx.clone());
    let templates: Vec<_> = bank.specs().into_iter().filter_map(|spec| bank.templates().iter().find(|t| t.spec == spec && t.split == crate::instructions::Split::Seen)).collect();
    let rows = crate::par::map(utterances, |u| {
        let scorer = ModelScorer::new(model, &u.features).ok();
        templates
            .iter()
            .map(|t| {
                let out = scorer
                    .as_ref()
                    .and_then(|s| crate::decode::decode_with(s, vocab, u.features.frames(), &t.text, decode).ok())
                    .map(|(_, text)| Transcript::new(&text))
                    .unwrap_or_default();
                let c = classifier.classify(&out, &u.transcript, Some(&u.id));
                let expected = crate::textops::apply_skill(&t.spec, &u.transcript, ctx, Some(&u.id)).unwrap_or_default();
                let ok = (c.spec.label() == t.spec.label() || c.transform == expected) && c.distance <= delta;
                (t.spec.skill(), ok)
            })
            .collect::<Vec<_>>()
    });
    let mut tally: BTreeMap<Skill, (usize, usize)> = BTreeMap::new();
    for (skill, ok) in rows.into_iter().flatten() {
        let e = tally.entry(skill).or_default();
        e.0 += usize::from(ok);
        e.1 += 1;
    }
    tally.into_iter().map(|(s, (c, n))| (s.name().to_owned(), c as f64 / n.max(1) as f64)).collect()
}

/// Checkpoint probe settings. Probes decode greedily by default to keep
/// checkpoints cheap.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub dev_utterances: usize,
    pub skill_utterances: usize,
    pub decode: DecodeConfig,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self { dev_utterances: 200, skill_utterances: 10, decode: DecodeConfig { beam: 1, ..DecodeConfig::default() } }
    }
}

/// Everything a desk-scale experiment depends on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub corpus: CorpusSpec,
    pub synth: SynthConfig,
    pub vocab_size: usize,
    pub sampler: SamplerConfig,
    pub augment: MaskPolicy,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub model_seed: u64,
    pub probe: ProbeConfig,
    pub decode: DecodeConfig,
    pub suite: SuiteConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            corpus: CorpusSpec::default(),
            synth: SynthConfig::default(),
            vocab_size: crate::tokenizer::DEFAULT_VOCAB_SIZE,
            sampler: SamplerConfig { alpha: 4.0, beta: 1.0, unit: 1.0, seed: 0 },
            augment: MaskPolicy::NONE,
            model: ModelConfig::default(),
            train: TrainConfig {
                steps: 16_000,
                eval_every: 4000,
                schedule: ScheduleConfig { warmup_steps: 500, peak: 2e-3, decay_steps: 15_500, final_fraction: 0.05 },
                ..TrainConfig::default()
            },
            model_seed: 0,
            probe: ProbeConfig::default(),
            decode: DecodeConfig::default(),
            suite: SuiteConfig::default(),
        }
    }
}

/// Shared inputs built once per corpus.
pub struct Prepared {
    pub corpus: Corpus,
    pub bank: InstructionBank,
    pub vocab: Vocabulary,
    pub ctx: SkillContext,
}

impl Prepared {
    pub fn build(cfg: &ExperimentConfig, bank: InstructionBank) -> Result<Self, PipelineError> {
        let corpus = build_corpus(&crate::synthaudio::DEFAULT_LEXICON, &cfg.corpus, &cfg.synth)?;
        Self::from_corpus(corpus, bank, cfg.vocab_size)
    }

    pub fn from_corpus(corpus: Corpus, bank: InstructionBank, vocab_size: usize) -> Result<Self, PipelineError> {
        let vocab = Vocabulary::build(&vocab_corpus(&corpus.train, &bank), vocab_size)?;
        let ctx = skill_context(&corpus.train);
        Ok(Self { corpus, bank, vocab, ctx })
    }
}

/// Trains with checkpoint selection on dev transcription WER.
pub fn train_model(
    prep: &Prepared,
    cfg: &ExperimentConfig,
    mut on_record: impl FnMut(&MetricsRecord),
) -> Result<TrainOutcome<f32>, PipelineError> {
    let model_cfg = ModelConfig { vocab_size: prep.vocab.size(), ..cfg.model.clone() };
    let data = TrainingData {
        utterances: &prep.corpus.train,
        bank: &prep.bank,
        vocab: &prep.vocab,
        ctx: &prep.ctx,
        sampler: cfg.sampler.clone(),
        augment: cfg.augment,
        model: model_cfg.clone(),
        batch_size: cfg.train.batch_size,
        target_only_loss: cfg.train.target_only_loss,
    };
    let model = Model::<f32>::init(model_cfg, cfg.model_seed)?;
    log::info!("model has {} parameters", model.num_params());
    let dev = &prep.corpus.dev[..cfg.probe.dev_utterances.min(prep.corpus.dev.len())];
    let probe_utts = &prep.corpus.dev[..cfg.probe.skill_utterances.min(prep.corpus.dev.len())];
    let outcome = train(
        model,
        &cfg.train,
        |step| data.batch(step).map_err(|e| ModelError::Batch(e.to_string())),
        |_, m| Probe {
            dev_wer: transcribe_wer(m, &prep.vocab, dev, ASR_PROMPT, &cfg.probe.decode),
            per_skill_acc: if probe_utts.is_empty() {
                BTreeMap::new()
            } else {
                skill_probe(m, &prep.vocab, probe_utts, &prep.bank, &prep.ctx, &cfg.probe.decode, cfg.suite.delta)
            },
        },
        &mut on_record,
    )?;
    Ok(outcome)
}

/// Runs the instruction suite on the test split.
pub fn evaluate(prep: &Prepared, model: &Model<f32>, cfg: &ExperimentConfig) -> EvalReport {
    let exec = ModelExecutor { model, vocab: &prep.vocab, decode: cfg.decode.clone() };
    evaluate_suite(&exec, &prep.corpus.test, &prep.bank, &prep.ctx, &cfg.suite)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> (ExperimentConfig, Prepared) {
        let cfg = ExperimentConfig {
            corpus: CorpusSpec { train: 12, dev: 3, test: 2, min_words: 2, max_words: 4 },
            ..ExperimentConfig::default()
        };
        let prep = Prepared::build(&cfg, InstructionBank::bundled()).unwrap();
        (cfg, prep)
    }

    #[test]
    fn every_bank_instruction_encodes() {
        let (_, prep) = small();
        for t in prep.bank.texts() {
            prep.vocab.encode(&t).unwrap();
        }
    }

    #[test]
    fn batches_cover_epochs_and_repeat_exactly() {
        let (cfg, prep) = small();
        let data = TrainingData {
            utterances: &prep.corpus.train,
            bank: &prep.bank,
            vocab: &prep.vocab,
            ctx: &prep.ctx,
            sampler: cfg.sampler.clone(),
            augment: MaskPolicy::default(),
            model: ModelConfig { vocab_size: prep.vocab.size(), ..cfg.model.clone() },
            batch_size: 4,
            target_only_loss: true,
        };
        let mut first_epoch: Vec<usize> = (1..=3).flat_map(|s| data.positions(s)).map(|(_, i)| i).collect();
        first_epoch.sort();
        assert_eq!(first_epoch, (0..12).collect::<Vec<_>>());
        assert!(data.positions(4).iter().all(|&(e, _)| e == 1));
        assert_eq!(data.batch(5).unwrap(), data.batch(5).unwrap());
        let b = data.batch(1).unwrap();
        assert_eq!(b.len(), 4);
        assert!(b.loss_mask.contains(&0.0));
    }
}
