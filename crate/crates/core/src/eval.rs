//! Word error rate, executed-skill classification and the seen/unseen
//! instruction test suite.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decode::{decode_with, DecodeConfig, ModelScorer};
use crate::instructions::{InstructionBank, InstructionTemplate, Split};
use crate::model::tensor::Real;
use crate::model::Model;
use crate::synthaudio::Utterance;
use crate::textops::{apply_skill, Skill, SkillContext, SkillSpec, Transcript};
use crate::tokenizer::Vocabulary;

/// Word-level edit distance and one minimal alignment's operation counts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditCounts {
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
}

impl EditCounts {
    pub fn distance(&self) -> usize {
        self.substitutions + self.deletions + self.insertions
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WerResult {
    pub counts: EditCounts,
    pub reference_len: usize,
    /// `None` when the reference is empty and the hypothesis is not.
    pub rate: Option<f64>,
}

impl WerResult {
    pub fn undefined(&self) -> bool {
        self.rate.is_none()
    }
}

/// Levenshtein alignment. Among minimal alignments, backtracking prefers a
/// match or substitution, then deletion, then insertion.
pub fn align<S: AsRef<str>>(reference: &[S], hypothesis: &[S]) -> EditCounts {
    let (n, m) = (reference.len(), hypothesis.len());
    let mut d = vec![vec![0usize; m + 1]; n + 1];
    for (i, row) in d.iter_mut().enumerate() {
        row[0] = i;
    }
    for (j, cell) in d[0].iter_mut().enumerate() {
        *cell = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let sub = d[i - 1][j - 1] + usize::from(reference[i - 1].as_ref() != hypothesis[j - 1].as_ref());
            d[i][j] = sub.min(d[i - 1][j] + 1).min(d[i][j - 1] + 1);
        }
    }
    let (mut i, mut j, mut c) = (n, m, EditCounts::default());
    while i > 0 || j > 0 {
        if i > 0 && j > 0 {
            let same = reference[i - 1].as_ref() == hypothesis[j - 1].as_ref();
            if d[i][j] == d[i - 1][j - 1] + usize::from(!same) {
                c.substitutions += usize::from(!same);
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && d[i][j] == d[i - 1][j] + 1 {
            c.deletions += 1;
            i -= 1;
        } else {
            c.insertions += 1;
            j -= 1;
        }
    }
    c
}

pub fn word_distance<S: AsRef<str>>(a: &[S], b: &[S]) -> usize {
    align(a, b).distance()
}

pub fn wer(reference: &Transcript, hypothesis: &Transcript) -> WerResult {
    let counts = align(reference.words(), hypothesis.words());
    let reference_len = reference.len();
    let rate = match (reference_len, counts.distance()) {
        (0, 0) => Some(0.0),
        (0, _) => None,
        (n, d) => Some(d as f64 / n as f64),
    };
    WerResult { counts, reference_len, rate }
}

/// Total edits over total reference words.
pub fn corpus_wer<'a>(pairs: impl IntoIterator<Item = (&'a Transcript, &'a Transcript)>) -> f64 {
    let (mut edits, mut words) = (0usize, 0usize);
    for (r, h) in pairs {
        edits += word_distance(r.words(), h.words());
        words += r.len();
    }
    if words == 0 {
        return 0.0;
    }
    edits as f64 / words as f64
}

/// Summary brevity bound relative to the reference length.
pub const SUMMARY_MAX_RATIO: f64 = 0.4;
/// Share of summary words that must occur in the reference.
pub const SUMMARY_MIN_OVERLAP: f64 = 0.6;
pub const DEFAULT_DELTA: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Classification {
    pub spec: SkillSpec,
    /// Edit distance normalised by the candidate transform's length.
    pub distance: f64,
    /// The candidate's transform of the reference.
    pub transform: Transcript,
}

/// True when `output` reads as a summary of `reference`.
pub fn looks_like_summary(output: &Transcript, reference: &Transcript) -> bool {
    if output.is_empty() || output.len() as f64 > SUMMARY_MAX_RATIO * reference.len() as f64 {
        return false;
    }
    let hits = output.words().iter().filter(|w| reference.words().contains(w)).count();
    hits as f64 >= SUMMARY_MIN_OVERLAP * output.len() as f64
}

fn normalized(output: &Transcript, candidate: &Transcript) -> f64 {
    word_distance(output.words(), candidate.words()) as f64 / candidate.len().max(1) as f64
}

/// Nearest-transform classifier over a fixed candidate set.
#[derive(Clone, Debug)]
pub struct Classifier {
    candidates: Vec<SkillSpec>,
    ctx: SkillContext,
}

impl Classifier {
    pub fn new(mut candidates: Vec<SkillSpec>, ctx: SkillContext) -> Self {
        candidates.sort_by_key(|s| s.priority());
        candidates.dedup();
        Self { candidates, ctx }
    }

    pub fn context(&self) -> &SkillContext {
        &self.ctx
    }

    pub fn classify(&self, output: &Transcript, reference: &Transcript, utterance_id: Option<&str>) -> Classification {
        if output.is_empty() {
            return Classification { spec: SkillSpec::Ignore, distance: 0.0, transform: Transcript::empty() };
        }
        let mut best: Option<Classification> = None;
        for spec in &self.candidates {
            let Ok(transform) = apply_skill(spec, reference, &self.ctx, utterance_id) else { continue };
            let distance = if *spec == SkillSpec::Summarize && looks_like_summary(output, reference) {
                0.0
            } else {
                normalized(output, &transform)
            };
            // Candidates are in priority order, so strict improvement keeps
            // the earliest among equals.
            if best.as_ref().is_none_or(|b| distance < b.distance) {
                best = Some(Classification { spec: spec.clone(), distance, transform });
            }
        }
        best.unwrap_or(Classification { spec: SkillSpec::Transcribe, distance: f64::INFINITY, transform: reference.clone() })
    }
}

/// Produces model outputs for instructions on one utterance.
pub trait Executor: Sync {
    fn execute(&self, utt: &Utterance, instructions: &[&str]) -> Vec<Result<String, String>>;
}

/// Beam-decodes with a trained model, encoding each utterance once.
pub struct ModelExecutor<'a, T: Real> {
    pub model: &'a Model<T>,
    pub vocab: &'a Vocabulary,
    pub decode: DecodeConfig,
}

impl<T: Real> Executor for ModelExecutor<'_, T> {
    fn execute(&self, utt: &Utterance, instructions: &[&str]) -> Vec<Result<String, String>> {
        let scorer = match ModelScorer::new(self.model, &utt.features) {
            Ok(s) => s,
            Err(e) => return instructions.iter().map(|_| Err(e.to_string())).collect(),
        };
        instructions
            .iter()
            .map(|i| {
                decode_with(&scorer, self.vocab, utt.features.frames(), i, &self.decode)
                    .map(|(_, text)| text)
                    .map_err(|e| e.to_string())
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteConfig {
    pub delta: f64,
    pub seen_per_skill: usize,
    pub unseen_per_skill: usize,
    /// Selects which seen templates enter the suite.
    pub seed: u64,
    /// Evaluate only the first `n` utterances.
    pub max_utterances: Option<usize>,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self { delta: DEFAULT_DELTA, seen_per_skill: 10, unseen_per_skill: 10, seed: 0, max_utterances: None }
    }
}

/// Picks a seeded sample of seen templates and the first unseen ones per
/// skill, in skill order.
pub fn suite_templates<'b>(bank: &'b InstructionBank, cfg: &SuiteConfig) -> Vec<&'b InstructionTemplate> {
    let mut out = Vec::new();
    for skill in Skill::ALL {
        let mut seen = bank.seen(skill);
        let mut rng = ChaCha8Rng::seed_from_u64(crate::derive_seed(cfg.seed, &format!("suite/{}", skill.name())));
        seen.shuffle(&mut rng);
        out.extend(seen.into_iter().take(cfg.seen_per_skill));
        out.extend(bank.unseen(skill).into_iter().take(cfg.unseen_per_skill));
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub utterance_id: String,
    pub instruction: String,
    pub split: Split,
    pub expected: String,
    pub expected_text: String,
    pub output: String,
    pub classified: String,
    pub distance: f64,
    pub correct: bool,
    /// The expected transform coincides with the classified candidate's.
    pub degenerate: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub wer: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Tally {
    pub pairs: usize,
    pub correct: usize,
}

impl Tally {
    pub fn accuracy(&self) -> f64 {
        if self.pairs == 0 {
            return 0.0;
        }
        self.correct as f64 / self.pairs as f64
    }

    fn add(&mut self, correct: bool) {
        self.pairs += 1;
        self.correct += usize::from(correct);
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SkillAccuracy {
    pub seen: Tally,
    pub unseen: Tally,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub delta: f64,
    pub utterances: usize,
    pub per_skill: BTreeMap<Skill, SkillAccuracy>,
    /// Corpus WER of Transcribe pairs, per split.
    pub transcribe_wer: BTreeMap<Split, f64>,
    /// Share of Ignore pairs with empty output, per split.
    pub ignore_empty: BTreeMap<Split, f64>,
    /// Rows: expected skill; columns: classified skill; in skill order.
    pub confusion: [[usize; 5]; 5],
    pub degenerate_pairs: usize,
    pub failed_pairs: usize,
    pub records: Vec<PairRecord>,
}

impl EvalReport {
    /// Pooled accuracy of one split over `skills`.
    pub fn pooled(&self, split: Split, skills: &[Skill]) -> Tally {
        let mut t = Tally::default();
        for s in skills {
            if let Some(a) = self.per_skill.get(s) {
                let x = if split == Split::Seen { a.seen } else { a.unseen };
                t.pairs += x.pairs;
                t.correct += x.correct;
            }
        }
        t
    }

    pub fn write_records(&self, mut w: impl std::io::Write) -> std::io::Result<()> {
        for r in &self.records {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    /// Human-readable summary table.
    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<12} {:>8} {:>8} {:>8} {:>8}", "skill", "seen", "n", "unseen", "n");
        for (skill, a) in &self.per_skill {
            let _ = writeln!(
                s,
                "{:<12} {:>7.1}% {:>8} {:>7.1}% {:>8}",
                skill.name(),
                100.0 * a.seen.accuracy(),
                a.seen.pairs,
                100.0 * a.unseen.accuracy(),
                a.unseen.pairs
            );
        }
        let all = Skill::ALL;
        let (seen, unseen) = (self.pooled(Split::Seen, &all), self.pooled(Split::Unseen, &all));
        let _ = writeln!(s, "{:<12} {:>7.1}% {:>8} {:>7.1}% {:>8}", "all", 100.0 * seen.accuracy(), seen.pairs, 100.0 * unseen.accuracy(), unseen.pairs);
        for (split, w) in &self.transcribe_wer {
            let _ = writeln!(s, "transcribe WER ({split:?}): {:.2}%", 100.0 * w);
        }
        let _ = writeln!(s, "confusion (rows expected, columns classified):");
        let _ = writeln!(s, "{:<12} {}", "", all.iter().map(|k| format!("{:>11}", k.name())).collect::<String>());
        for (i, row) in self.confusion.iter().enumerate() {
            let _ = writeln!(s, "{:<12} {}", all[i].name(), row.iter().map(|c| format!("{c:>11}")).collect::<String>());
        }
        let _ = writeln!(s, "degenerate pairs: {}  failed pairs: {}", self.degenerate_pairs, self.failed_pairs);
        s
    }
}

/// Runs every suite template on every utterance and scores the outputs.
/// Decode failures are recorded per row and scored as empty output.
pub fn evaluate_suite(
    executor: &dyn Executor,
    utterances: &[Utterance],
    bank: &InstructionBank,
    ctx: &SkillContext,
    cfg: &SuiteConfig,
) -> EvalReport {
    let utterances = &utterances[..cfg.max_utterances.unwrap_or(utterances.len()).min(utterances.len())];
    let templates = suite_templates(bank, cfg);
    let texts: Vec<&str> = templates.iter().map(|t| t.text.as_str()).collect();
    let classifier = Classifier::new(bank.specs(), ctx.clone());
    let rows: Vec<Vec<PairRecord>> = crate::par::map(utterances, |utt| {
        let outputs = executor.execute(utt, &texts);
        templates
            .iter()
            .zip(outputs)
            .map(|(tpl, out)| score_pair(&classifier, utt, tpl, out, cfg.delta))
            .collect()
    });
    let mut records: Vec<PairRecord> = rows.into_iter().flatten().collect();
    records.sort_by(|a, b| {
        (&a.utterance_id, a.split, &a.expected, &a.instruction).cmp(&(&b.utterance_id, b.split, &b.expected, &b.instruction))
    });
    summarize(records, utterances.len(), cfg.delta)
}

fn score_pair(
    classifier: &Classifier,
    utt: &Utterance,
    tpl: &InstructionTemplate,
    out: Result<String, String>,
    delta: f64,
) -> PairRecord {
    let (text, error) = match out {
        Ok(t) => (t, None),
        Err(e) => (String::new(), Some(e)),
    };
    let output = Transcript::new(&text);
    let expected = apply_skill(&tpl.spec, &utt.transcript, classifier.context(), Some(&utt.id)).unwrap_or_default();
    let c = classifier.classify(&output, &utt.transcript, Some(&utt.id));
    let label_match = c.spec.label() == tpl.spec.label();
    let degenerate = !label_match && c.transform == expected;
    PairRecord {
        utterance_id: utt.id.clone(),
        instruction: tpl.text.clone(),
        split: tpl.split,
        expected: tpl.spec.label(),
        expected_text: expected.text(),
        output: output.text(),
        classified: c.spec.label(),
        distance: c.distance,
        correct: (label_match || degenerate) && c.distance <= delta,
        degenerate,
        wer: (tpl.spec == SkillSpec::Transcribe).then(|| wer(&utt.transcript, &output).rate.unwrap_or(1.0)),
        error,
    }
}

fn skill_of(label: &str) -> Skill {
    let name = label.split('/').next().unwrap_or(label);
    Skill::ALL.into_iter().find(|s| s.name() == name).unwrap_or(Skill::Transcribe)
}

fn summarize(records: Vec<PairRecord>, utterances: usize, delta: f64) -> EvalReport {
    let mut per_skill: BTreeMap<Skill, SkillAccuracy> = BTreeMap::new();
    let mut confusion = [[0usize; 5]; 5];
    let mut wer_acc: BTreeMap<Split, (usize, usize)> = BTreeMap::new();
    let mut ignore: BTreeMap<Split, Tally> = BTreeMap::new();
    let (mut degenerate_pairs, mut failed_pairs) = (0, 0);
    for r in &records {
        let expected = skill_of(&r.expected);
        let a = per_skill.entry(expected).or_default();
        match r.split {
            Split::Seen => a.seen.add(r.correct),
            Split::Unseen => a.unseen.add(r.correct),
        }
        confusion[expected.index()][skill_of(&r.classified).index()] += 1;
        degenerate_pairs += usize::from(r.degenerate);
        failed_pairs += usize::from(r.error.is_some());
        if r.wer.is_some() {
            let (reference, output) = (Transcript::new(&r.expected_text), Transcript::new(&r.output));
            let e = wer_acc.entry(r.split).or_default();
            e.0 += word_distance(reference.words(), output.words());
            e.1 += reference.len();
        }
        if expected == Skill::Ignore {
            ignore.entry(r.split).or_default().add(r.output.is_empty());
        }
    }
    EvalReport {
        delta,
        utterances,
        per_skill,
        transcribe_wer: wer_acc.into_iter().map(|(k, (e, n))| (k, e as f64 / n.max(1) as f64)).collect(),
        ignore_empty: ignore.into_iter().map(|(k, t)| (k, t.accuracy())).collect(),
        confusion,
        degenerate_pairs,
        failed_pairs,
        records,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::textops::{Manipulation, Subtask};
    use proptest::prelude::*;

    fn t(s: &str) -> Transcript {
        Transcript::new(s)
    }

    #[test]
    fn wer_examples() {
        assert_eq!(wer(&t("a b c"), &t("a b c")).rate, Some(0.0));
        let del = wer(&t("a b c"), &t(""));
        assert_eq!((del.rate, del.counts.deletions), (Some(1.0), 3));
        let sub = wer(&t("a b c"), &t("a x c"));
        assert_eq!(sub.rate, Some(1.0 / 3.0));
        assert_eq!(sub.counts, EditCounts { substitutions: 1, deletions: 0, insertions: 0 });
        let undefined = wer(&t(""), &t("a"));
        assert!(undefined.undefined());
        assert_eq!(undefined.counts.insertions, 1);
    }

    fn classifier() -> Classifier {
        Classifier::new(InstructionBank::bundled().specs(), SkillContext::default())
    }

    #[test]
    fn classifies_known_outputs() {
        let c = classifier();
        let reference = t("the cat saw the dog");
        let r = c.classify(&t("a cat saw a dog"), &reference, None);
        assert_eq!((r.spec.label().as_str(), r.distance), ("Replace/CommonWord", 0.0));
        let r = c.classify(&t(""), &reference, None);
        assert_eq!((r.spec, r.distance), (SkillSpec::Ignore, 0.0));
        let r = c.classify(&t("the cat saw the dog the cat saw the dog"), &reference, None);
        assert_eq!(r.spec, SkillSpec::Manipulate(Manipulation::Repeat(2)));
        assert_eq!(r.spec.subtask(), Some(Subtask::Repeat));
        let r = c.classify(&reference, &reference, None);
        assert_eq!((r.spec, r.distance), (SkillSpec::Transcribe, 0.0));
    }

    #[test]
    fn summary_heuristic() {
        let reference = t("green river stone under quiet moon light and the house");
        assert!(looks_like_summary(&t("river stone"), &reference));
        assert!(!looks_like_summary(&t("river stone moon light house"), &reference));
        assert!(!looks_like_summary(&t("cat dog"), &reference));
        assert_eq!(classifier().classify(&t("river moon"), &reference, None).spec, SkillSpec::Summarize);
    }

    struct Oracle(SkillContext);

    impl Executor for Oracle {
        fn execute(&self, utt: &Utterance, instructions: &[&str]) -> Vec<Result<String, String>> {
            let bank = InstructionBank::bundled();
            instructions
                .iter()
                .map(|i| {
                    let tpl = bank.templates().iter().find(|t| t.text == *i).unwrap();
                    Ok(apply_skill(&tpl.spec, &utt.transcript, &self.0, Some(&utt.id)).unwrap().text())
                })
                .collect()
        }
    }

    struct Parrot;

    impl Executor for Parrot {
        fn execute(&self, utt: &Utterance, instructions: &[&str]) -> Vec<Result<String, String>> {
            instructions.iter().map(|_| Ok(utt.transcript.text())).collect()
        }
    }

    fn utterances() -> Vec<Utterance> {
        let f = crate::synthaudio::FeatureMatrix::new(crate::model::tensor::Mat::zeros(3, 2)).unwrap();
        ["the storm cried over the road and the river", "green moon of a cold quiet house", "the bird sang in the tree"]
            .iter()
            .enumerate()
            .map(|(i, s)| Utterance { id: format!("u{i}"), features: f.clone(), transcript: t(s) })
            .collect()
    }

    #[test]
    fn oracle_executor_scores_perfectly() {
        let ctx = SkillContext::default();
        let bank = InstructionBank::bundled();
        let report = evaluate_suite(&Oracle(ctx.clone()), &utterances(), &bank, &ctx, &SuiteConfig::default());
        for (skill, a) in &report.per_skill {
            assert_eq!(a.seen.accuracy(), 1.0, "{skill:?}");
            assert_eq!(a.unseen.accuracy(), 1.0, "{skill:?}");
            assert_eq!(a.seen.pairs, 30);
        }
        assert_eq!(report.transcribe_wer[&Split::Seen], 0.0);
        for (i, row) in report.confusion.iter().enumerate() {
            assert_eq!(row.iter().sum::<usize>(), 60);
            if i != Skill::Replace.index() {
                assert_eq!(row[i], 60, "row {i}: {row:?}");
            }
        }
        // "u1" has no "the", so its replacement target is the plain transcript.
        assert_eq!(report.confusion[Skill::Replace.index()], [20, 0, 40, 0, 0]);
        assert_eq!(report.degenerate_pairs, 20);
    }

    #[test]
    fn parrot_executor_only_transcribes() {
        let ctx = SkillContext::default();
        let bank = InstructionBank::bundled();
        let report = evaluate_suite(&Parrot, &utterances(), &bank, &ctx, &SuiteConfig::default());
        assert_eq!(report.per_skill[&Skill::Transcribe].seen.accuracy(), 1.0);
        assert_eq!(report.per_skill[&Skill::Ignore].seen.accuracy(), 0.0);
        assert_eq!(report.ignore_empty[&Split::Seen], 0.0);
    }

    fn brute(a: &[u8], b: &[u8]) -> usize {
        match (a.split_first(), b.split_first()) {
            (None, _) => b.len(),
            (_, None) => a.len(),
            (Some((x, ra)), Some((y, rb))) => {
                let sub = brute(ra, rb) + usize::from(x != y);
                sub.min(brute(ra, b) + 1).min(brute(a, rb) + 1)
            }
        }
    }

    fn words(v: &[u8]) -> Vec<String> {
        v.iter().map(|x| ["a", "b", "c"][*x as usize].to_owned()).collect()
    }

    proptest! {
        #[test]
        fn distance_matches_recursion(a in proptest::collection::vec(0u8..3, 0..6), b in proptest::collection::vec(0u8..3, 0..6)) {
            let c = align(&words(&a), &words(&b));
            prop_assert_eq!(c.distance(), brute(&a, &b));
            prop_assert_eq!(c.deletions + c.substitutions + (b.len() - (c.insertions + c.substitutions)), a.len());
            prop_assert_eq!(word_distance(&words(&b), &words(&a)), c.distance());
        }

        #[test]
        fn triangle_inequality(a in proptest::collection::vec(0u8..3, 0..6), b in proptest::collection::vec(0u8..3, 0..6), c in proptest::collection::vec(0u8..3, 0..6)) {
            let (a, b, c) = (words(&a), words(&b), words(&c));
            prop_assert!(word_distance(&a, &c) <= word_distance(&a, &b) + word_distance(&b, &c));
        }
    }
}
