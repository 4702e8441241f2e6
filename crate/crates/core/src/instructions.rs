//! Instruction banks, weighted skill sampling and training-sample assembly.

use std::collections::BTreeMap;
use std::io::BufRead;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::derive_seed;
use crate::textops::{apply_skill, Skill, SkillContext, SkillRecord, SkillSpec, TextOpsError, Transcript};
use crate::tokenizer::{TokenizerError, Vocabulary, EOS, EOT};

#[derive(Debug, Error)]
pub enum InstructionError {
    #[error("line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("no templates")]
    NoTemplates,
    #[error("skill {0} has no Seen template")]
    MissingSkill(Skill),
    #[error("invalid sampler weights: {0}")]
    BadWeights(String),
    #[error(transparent)]
    Text(#[from] TextOpsError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Split {
    Seen,
    Unseen,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InstructionTemplate {
    pub text: String,
    pub spec: SkillSpec,
    pub split: Split,
}

#[derive(Serialize, Deserialize)]
struct TemplateRecord {
    text: String,
    #[serde(flatten)]
    spec: SkillRecord,
    split: Split,
}

/// Immutable collection of templates, kept in file order.
#[derive(Clone, Debug, PartialEq)]
pub struct InstructionBank {
    templates: Vec<InstructionTemplate>,
}

const BUNDLED_BANK: &str = include_str!("../data/instructions.jsonl");

impl InstructionBank {
    /// Builds a bank without requiring every skill to be present.
    pub fn from_templates(templates: Vec<InstructionTemplate>) -> Result<Self, InstructionError> {
        if templates.is_empty() {
            return Err(InstructionError::NoTemplates);
        }
        for t in &templates {
            if t.text.trim().is_empty() {
                return Err(InstructionError::Malformed { line: 0, reason: "empty instruction text".into() });
            }
            t.spec.validate()?;
        }
        Ok(Self { templates })
    }

    /// Parses JSON Lines records and checks that every skill has a Seen template.
    pub fn parse(reader: impl BufRead) -> Result<Self, InstructionError> {
        let mut templates = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let malformed = |reason: String| InstructionError::Malformed { line: i + 1, reason };
            let rec: TemplateRecord = serde_json::from_str(&line).map_err(|e| malformed(e.to_string()))?;
            if rec.text.trim().is_empty() {
                return Err(malformed("empty instruction text".into()));
            }
            let spec = SkillSpec::try_from(rec.spec).map_err(|e| malformed(e.to_string()))?;
            templates.push(InstructionTemplate { text: rec.text, spec, split: rec.split });
        }
        let bank = Self::from_templates(templates)?;
        for skill in Skill::ALL {
            if bank.seen(skill).is_empty() {
                return Err(InstructionError::MissingSkill(skill));
            }
        }
        Ok(bank)
    }

    pub fn load(path: &Path) -> Result<Self, InstructionError> {
        Self::parse(std::io::BufReader::new(std::fs::File::open(path)?))
    }

    /// The bank shipped with the crate.
    pub fn bundled() -> Self {
        Self::parse(BUNDLED_BANK.as_bytes()).expect("bundled bank is valid")
    }

    pub fn templates(&self) -> &[InstructionTemplate] {
        &self.templates
    }

    pub fn of(&self, skill: Skill, split: Split) -> Vec<&InstructionTemplate> {
        self.templates.iter().filter(|t| t.spec.skill() == skill && t.split == split).collect()
    }

    pub fn seen(&self, skill: Skill) -> Vec<&InstructionTemplate> {
        self.of(skill, Split::Seen)
    }

    pub fn unseen(&self, skill: Skill) -> Vec<&InstructionTemplate> {
        self.of(skill, Split::Unseen)
    }

    /// `(seen, unseen)` template counts per skill.
    pub fn counts(&self) -> BTreeMap<Skill, (usize, usize)> {
        Skill::ALL.iter().map(|&s| (s, (self.seen(s).len(), self.unseen(s).len()))).collect()
    }

    /// Distinct skill specs across the bank, in tie-break order.
    pub fn specs(&self) -> Vec<SkillSpec> {
        let mut v: Vec<SkillSpec> = self.templates.iter().map(|t| t.spec.clone()).collect();
        v.sort_by(|a, b| a.priority().cmp(&b.priority()).then_with(|| a.cmp(b)));
        v.dedup();
        v
    }

    /// Texts of all templates, for tokenizer training.
    pub fn texts(&self) -> impl Iterator<Item = String> + '_ {
        self.templates.iter().map(|t| normalize_instruction(&t.text))
    }
}

/// Instructions are encoded lowercase.
pub fn normalize_instruction(text: &str) -> String {
    text.trim().to_lowercase()
}

/// Skill mixture weights. Transcription weighs `alpha`, summarisation
/// `beta`, and ignoring, replacement and manipulation `unit` each; the
/// standard mixture has `unit = 1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub alpha: f64,
    pub beta: f64,
    #[serde(default = "one")]
    pub unit: f64,
    pub seed: u64,
}

fn one() -> f64 {
    1.0
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { alpha: 56.0, beta: 4.0, unit: 1.0, seed: 0 }
    }
}

impl SamplerConfig {
    /// A mixture that only ever draws the transcription skill.
    pub fn transcribe_only(seed: u64) -> Self {
        Self { alpha: 1.0, beta: 0.0, unit: 0.0, seed }
    }

    pub fn validate(&self) -> Result<(), InstructionError> {
        let w = [self.alpha, self.beta, self.unit];
        if w.iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(InstructionError::BadWeights("weights must be finite and nonnegative".into()));
        }
        if self.alpha + 3.0 * self.unit + self.beta <= 0.0 {
            return Err(InstructionError::BadWeights("weights sum to zero".into()));
        }
        Ok(())
    }

    /// Probability of each skill, in [`Skill::ALL`] order.
    pub fn probabilities(&self) -> [f64; 5] {
        let total = self.alpha + 3.0 * self.unit + self.beta;
        [self.alpha / total, self.unit / total, self.unit / total, self.unit / total, self.beta / total]
    }
}

pub fn sample_skill<R: Rng>(rng: &mut R, cfg: &SamplerConfig) -> Skill {
    let p = cfg.probabilities();
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = Skill::Transcribe;
    for (skill, pr) in Skill::ALL.into_iter().zip(p) {
        if pr <= 0.0 {
            continue;
        }
        acc += pr;
        last = skill;
        if u < acc {
            return skill;
        }
    }
    last
}

/// Uniform draw over the skill's Seen templates.
pub fn sample_instruction<'b, R: Rng>(
    rng: &mut R,
    bank: &'b InstructionBank,
    skill: Skill,
) -> Result<&'b InstructionTemplate, InstructionError> {
    let pool = bank.seen(skill);
    if pool.is_empty() {
        return Err(InstructionError::MissingSkill(skill));
    }
    Ok(pool[rng.random_range(0..pool.len())])
}

/// Random stream for one utterance in one epoch; independent of dataset order.
pub fn utterance_stream(seed: u64, utterance_id: &str, epoch: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("{utterance_id}#{epoch}")))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingSample {
    pub utterance_id: String,
    pub skill: String,
    pub instruction_tokens: Vec<u32>,
    pub target_tokens: Vec<u32>,
    /// `instruction ⊕ [EOT] ⊕ target ⊕ [EOS]`
    pub composed: Vec<u32>,
}

impl TrainingSample {
    /// Index of the first target position inside `composed`.
    pub fn target_start(&self) -> usize {
        self.instruction_tokens.len() + 1
    }

    /// `(instruction text, target text)`.
    pub fn decode(&self, vocab: &Vocabulary) -> Result<(String, String), TokenizerError> {
        Ok((vocab.decode(&self.instruction_tokens)?, vocab.decode(&self.target_tokens)?))
    }
}

pub fn build_sample(
    utterance_id: &str,
    transcript: &Transcript,
    template: &InstructionTemplate,
    vocab: &Vocabulary,
    ctx: &SkillContext,
) -> Result<TrainingSample, InstructionError> {
    let target = apply_skill(&template.spec, transcript, ctx, Some(utterance_id))?;
    let instruction_tokens = vocab.encode(&normalize_instruction(&template.text))?;
    let target_tokens = vocab.encode(&target.text())?;
    let mut composed = Vec::with_capacity(instruction_tokens.len() + target_tokens.len() + 2);
    composed.extend_from_slice(&instruction_tokens);
    composed.push(EOT);
    composed.extend_from_slice(&target_tokens);
    composed.push(EOS);
    Ok(TrainingSample {
        utterance_id: utterance_id.to_owned(),
        skill: template.spec.label(),
        instruction_tokens,
        target_tokens,
        composed,
    })
}

/// Draws a skill and a Seen template from the utterance's stream for `epoch`
/// and builds the sample.
pub fn sample_for_utterance(
    utterance_id: &str,
    transcript: &Transcript,
    bank: &InstructionBank,
    vocab: &Vocabulary,
    ctx: &SkillContext,
    cfg: &SamplerConfig,
    epoch: u64,
) -> Result<TrainingSample, InstructionError> {
    let mut rng = utterance_stream(cfg.seed, utterance_id, epoch);
    let skill = sample_skill(&mut rng, cfg);
    let template = sample_instruction(&mut rng, bank, skill)?;
    build_sample(utterance_id, transcript, template, vocab, ctx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::textops::{Manipulation, Subtask};

    #[test]
    fn bundled_bank_covers_every_skill() {
        let bank = InstructionBank::bundled();
        for (skill, (seen, unseen)) in bank.counts() {
            assert!(seen >= 10, "{skill} has {seen} seen");
            assert!(unseen >= 10, "{skill} has {unseen} unseen");
        }
        assert_eq!(bank.specs().len(), 9);
        assert_eq!(bank.specs()[0], SkillSpec::Transcribe);
    }

    #[test]
    fn load_errors() {
        let bad_skill = r#"{"text":"hi","skill":"Transcrbe","split":"Seen"}"#;
        assert!(matches!(InstructionBank::parse(bad_skill.as_bytes()), Err(InstructionError::Malformed { line: 1, .. })));
        assert!(matches!(InstructionBank::parse("".as_bytes()), Err(InstructionError::NoTemplates)));
        let only_one = r#"{"text":"hi","skill":"Transcribe","split":"Seen"}"#;
        assert!(matches!(InstructionBank::parse(only_one.as_bytes()), Err(InstructionError::MissingSkill(Skill::Ignore))));
        let garbage = format!("{only_one}\nnot json");
        assert!(matches!(InstructionBank::parse(garbage.as_bytes()), Err(InstructionError::Malformed { line: 2, .. })));
    }

    #[test]
    fn sampler_probabilities() {
        let p = SamplerConfig::default().probabilities();
        let want = [56.0 / 63.0, 1.0 / 63.0, 1.0 / 63.0, 1.0 / 63.0, 4.0 / 63.0];
        for (a, b) in p.iter().zip(want) {
            assert!((a - b).abs() < 1e-15);
        }
        let uniform = SamplerConfig { alpha: 1.0, beta: 1.0, unit: 1.0, seed: 0 }.probabilities();
        assert!(uniform.iter().all(|&x| (x - 0.2).abs() < 1e-15));
        let degenerate = SamplerConfig { alpha: 0.0, beta: 0.0, unit: 1.0, seed: 0 };
        assert_eq!(degenerate.probabilities()[0], 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let s = sample_skill(&mut rng, &degenerate);
            assert!(matches!(s, Skill::Ignore | Skill::Replace | Skill::Manipulate));
        }
        let only = SamplerConfig::transcribe_only(0);
        assert!((0..1000).all(|_| sample_skill(&mut rng, &only) == Skill::Transcribe));
        assert!(SamplerConfig { alpha: 0.0, beta: 0.0, unit: 0.0, seed: 0 }.validate().is_err());
        assert!(SamplerConfig { alpha: -1.0, ..SamplerConfig::default() }.validate().is_err());
    }

    #[test]
    fn instruction_draws_are_uniform_over_seen() {
        let bank = InstructionBank::bundled();
        let pool = bank.seen(Skill::Transcribe);
        let k = pool.len();
        let mut counts = vec![0usize; k];
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 10_000;
        for _ in 0..n {
            let t = sample_instruction(&mut rng, &bank, Skill::Transcribe).unwrap();
            assert_eq!(t.split, Split::Seen);
            counts[pool.iter().position(|p| std::ptr::eq(*p, t)).unwrap()] += 1;
        }
        let expected = n as f64 / k as f64;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        // 99.9% quantile of chi-square with 39 degrees of freedom is about 72.1.
        assert_eq!(k, 40);
        assert!(chi2 < 72.1, "chi2 = {chi2}");

        let single = InstructionBank::from_templates(vec![InstructionTemplate {
            text: "Ignore it".into(),
            spec: SkillSpec::Ignore,
            split: Split::Seen,
        }])
        .unwrap();
        assert_eq!(sample_instruction(&mut rng, &single, Skill::Ignore).unwrap().text, "Ignore it");
        assert!(matches!(
            sample_instruction(&mut rng, &single, Skill::Summarize),
            Err(InstructionError::MissingSkill(Skill::Summarize))
        ));
    }

    fn vocab_for(bank: &InstructionBank, extra: &[&str]) -> Vocabulary {
        let mut corpus: Vec<String> = bank.texts().collect();
        corpus.extend(extra.iter().map(|s| s.to_string()));
        Vocabulary::build(&corpus, 200).unwrap()
    }

    #[test]
    fn samples_compose_instruction_and_target() {
        let sentence = "the influence with the timaeus has exercised upon posterity is due partly to a misunderstanding";
        let bank = InstructionBank::bundled();
        let vocab = vocab_for(&bank, &[sentence]);
        let t = Transcript::new(sentence);
        let ctx = SkillContext::default();
        let ignore = bank.seen(Skill::Ignore)[0];
        let s = build_sample("u", &t, ignore, &vocab, &ctx).unwrap();
        assert!(s.target_tokens.is_empty());
        assert_eq!(&s.composed[s.composed.len() - 2..], &[EOT, EOS]);

        let transcribe = bank.seen(Skill::Transcribe)[0];
        let s = build_sample("u", &t, transcribe, &vocab, &ctx).unwrap();
        assert_eq!(s.decode(&vocab).unwrap(), ("please transcribe the speech".into(), sentence.into()));

        let replace = bank
            .seen(Skill::Replace)
            .into_iter()
            .find(|t| matches!(&t.spec, SkillSpec::Replace { subtask: Subtask::CommonWord, .. }))
            .unwrap();
        let s = build_sample("u", &t, replace, &vocab, &ctx).unwrap();
        assert_eq!(
            s.decode(&vocab).unwrap().1,
            "a influence with a timaeus has exercised upon posterity is due partly to a misunderstanding"
        );
        assert_eq!(s.composed.iter().filter(|&&x| x == EOT).count(), 1);
        assert_eq!(s.composed.iter().filter(|&&x| x == EOS).count(), 1);
        assert!(!s.composed.contains(&crate::tokenizer::PAD));
    }

    #[test]
    fn streams_are_order_independent_and_seen_only() {
        let bank = InstructionBank::bundled();
        let vocab = vocab_for(&bank, &["cat dog the sun"]);
        let ctx = SkillContext::default();
        let cfg = SamplerConfig { alpha: 1.0, beta: 1.0, unit: 1.0, seed: 11 };
        let t = Transcript::new("the cat the sun dog");
        let unseen: Vec<String> =
            bank.templates().iter().filter(|t| t.split == Split::Unseen).map(|t| normalize_instruction(&t.text)).collect();
        let a: Vec<_> = (0..300)
            .map(|e| sample_for_utterance("x", &t, &bank, &vocab, &ctx, &cfg, e).unwrap())
            .collect();
        let b: Vec<_> = (0..300)
            .rev()
            .map(|e| sample_for_utterance("x", &t, &bank, &vocab, &ctx, &cfg, e).unwrap())
            .collect();
        assert!(a.iter().eq(b.iter().rev()));
        for s in &a {
            let (instr, _) = s.decode(&vocab).unwrap();
            assert!(!unseen.contains(&instr));
        }
        assert!(a.iter().any(|s| s.skill == SkillSpec::Manipulate(Manipulation::FirstHalf).label()));
    }
}
