//! Rule-based transcript transforms: one per skill, producing the training
//! target for an instruction.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::io::BufRead;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TextOpsError {
    #[error("repetition count must be at least 1")]
    ZeroRepeat,
    #[error("keyword budget must be at least 1")]
    ZeroKeywords,
    #[error("invalid skill spec: {0}")]
    InvalidSpec(String),
    #[error("summary override line {line}: {reason}")]
    Override { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Whitespace-tokenised lowercase word sequence.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "String", from = "String")]
pub struct Transcript {
    words: Vec<String>,
}

impl Transcript {
    pub fn new(text: &str) -> Self {
        Self { words: text.split_whitespace().map(str::to_lowercase).collect() }
    }

    pub fn from_words<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        Self::new(&words.into_iter().map(|w| w.as_ref().to_owned()).collect::<Vec<_>>().join(" "))
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn text(&self) -> String {
        self.words.join(" ")
    }
}

impl fmt::Display for Transcript {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.text())
    }
}

impl From<&str> for Transcript {
    fn from(s: &str) -> Self {
        Self::new(s)
    }
}

impl From<String> for Transcript {
    fn from(s: String) -> Self {
        Self::new(&s)
    }
}

impl From<Transcript> for String {
    fn from(t: Transcript) -> Self {
        t.text()
    }
}

/// The five skills, in the canonical order used for tie-breaking.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Skill {
    Transcribe,
    Ignore,
    Replace,
    Manipulate,
    Summarize,
}

impl Skill {
    pub const ALL: [Skill; 5] = [Skill::Transcribe, Skill::Ignore, Skill::Replace, Skill::Manipulate, Skill::Summarize];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Skill::Transcribe => "Transcribe",
            Skill::Ignore => "Ignore",
            Skill::Replace => "Replace",
            Skill::Manipulate => "Manipulate",
            Skill::Summarize => "Summarize",
        }
    }

    /// Instruction counts of the reference bank, for reporting only.
    pub fn reference_count(self) -> usize {
        match self {
            Skill::Transcribe | Skill::Ignore => 500,
            Skill::Replace => 600,
            Skill::Manipulate => 300,
            Skill::Summarize => 100,
        }
    }
}

impl fmt::Display for Skill {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Subtask {
    CommonWord,
    #[serde(rename = "OODWord")]
    OodWord,
    Delete,
    Repeat,
    FirstHalf,
    SecondHalf,
}

impl Subtask {
    pub fn name(self) -> &'static str {
        match self {
            Subtask::CommonWord => "CommonWord",
            Subtask::OodWord => "OODWord",
            Subtask::Delete => "Delete",
            Subtask::Repeat => "Repeat",
            Subtask::FirstHalf => "FirstHalf",
            Subtask::SecondHalf => "SecondHalf",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Manipulation {
    Repeat(usize),
    FirstHalf,
    SecondHalf,
}

/// A fully specified skill: which transform to run and with what arguments.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "SkillRecord", into = "SkillRecord")]
pub enum SkillSpec {
    Transcribe,
    Ignore,
    Replace { subtask: Subtask, src: String, dst: Option<String> },
    Manipulate(Manipulation),
    Summarize,
}

pub const DEFAULT_REPEAT: usize = 2;

impl SkillSpec {
    pub fn skill(&self) -> Skill {
        match self {
            SkillSpec::Transcribe => Skill::Transcribe,
            SkillSpec::Ignore => Skill::Ignore,
            SkillSpec::Replace { .. } => Skill::Replace,
            SkillSpec::Manipulate(_) => Skill::Manipulate,
            SkillSpec::Summarize => Skill::Summarize,
        }
    }

    pub fn subtask(&self) -> Option<Subtask> {
        match self {
            SkillSpec::Replace { subtask, .. } => Some(*subtask),
            SkillSpec::Manipulate(Manipulation::Repeat(_)) => Some(Subtask::Repeat),
            SkillSpec::Manipulate(Manipulation::FirstHalf) => Some(Subtask::FirstHalf),
            SkillSpec::Manipulate(Manipulation::SecondHalf) => Some(Subtask::SecondHalf),
            _ => None,
        }
    }

    /// `Skill` or `Skill/Subtask`.
    pub fn label(&self) -> String {
        match self.subtask() {
            Some(s) => format!("{}/{}", self.skill(), s.name()),
            None => self.skill().to_string(),
        }
    }

    /// Position in the canonical tie-break order (skill, then sub-task).
    pub fn priority(&self) -> (usize, usize) {
        (self.skill().index(), self.subtask().map(|s| s as usize).unwrap_or(0))
    }

    pub fn validate(&self) -> Result<(), TextOpsError> {
        match self {
            SkillSpec::Replace { subtask, src, dst } => {
                if !matches!(subtask, Subtask::CommonWord | Subtask::OodWord | Subtask::Delete) {
                    return Err(TextOpsError::InvalidSpec(format!("{} is not a replacement sub-task", subtask.name())));
                }
                if !is_single_word(src) {
                    return Err(TextOpsError::InvalidSpec(format!("source {src:?} must be one lowercase word")));
                }
                match (subtask, dst) {
                    (Subtask::Delete, None) => Ok(()),
                    (Subtask::Delete, Some(_)) => Err(TextOpsError::InvalidSpec("deletion takes no target word".into())),
                    (_, None) => Err(TextOpsError::InvalidSpec("replacement needs a target word".into())),
                    (_, Some(d)) if !is_single_word(d) => {
                        Err(TextOpsError::InvalidSpec(format!("target {d:?} must be one lowercase word")))
                    }
                    _ => Ok(()),
                }
            }
            SkillSpec::Manipulate(Manipulation::Repeat(0)) => Err(TextOpsError::ZeroRepeat),
            _ => Ok(()),
        }
    }
}

fn is_single_word(w: &str) -> bool {
    !w.is_empty() && !w.contains(char::is_whitespace) && w.to_lowercase() == w
}

/// Flat record form of [`SkillSpec`], as stored in instruction bank files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkillRecord {
    pub skill: Skill,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subtask: Option<Subtask>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub src: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dst: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub times: Option<usize>,
}

impl TryFrom<SkillRecord> for SkillSpec {
    type Error = TextOpsError;

    fn try_from(r: SkillRecord) -> Result<Self, Self::Error> {
        let bad = |m: &str| Err(TextOpsError::InvalidSpec(m.to_owned()));
        let spec = match r.skill {
            Skill::Transcribe | Skill::Ignore | Skill::Summarize => {
                if r.subtask.is_some() || r.src.is_some() || r.dst.is_some() || r.times.is_some() {
                    return bad("only Replace and Manipulate take sub-task arguments");
                }
                match r.skill {
                    Skill::Transcribe => SkillSpec::Transcribe,
                    Skill::Ignore => SkillSpec::Ignore,
                    _ => SkillSpec::Summarize,
                }
            }
            Skill::Replace => {
                let Some(subtask) = r.subtask else { return bad("Replace needs a sub-task") };
                let Some(src) = r.src else { return bad("Replace needs a source word") };
                if r.times.is_some() {
                    return bad("Replace takes no repetition count");
                }
                SkillSpec::Replace { subtask, src, dst: r.dst }
            }
            Skill::Manipulate => {
                if r.src.is_some() || r.dst.is_some() {
                    return bad("Manipulate takes no words");
                }
                let m = match (r.subtask, r.times) {
                    (Some(Subtask::Repeat), t) => Manipulation::Repeat(t.unwrap_or(DEFAULT_REPEAT)),
                    (Some(Subtask::FirstHalf), None) => Manipulation::FirstHalf,
                    (Some(Subtask::SecondHalf), None) => Manipulation::SecondHalf,
                    (None, _) => return bad("Manipulate needs a sub-task"),
                    _ => return bad("invalid Manipulate sub-task"),
                };
                SkillSpec::Manipulate(m)
            }
        };
        spec.validate()?;
        Ok(spec)
    }
}

impl From<SkillSpec> for SkillRecord {
    fn from(s: SkillSpec) -> Self {
        let mut r = SkillRecord { skill: s.skill(), subtask: s.subtask(), src: None, dst: None, times: None };
        match s {
            SkillSpec::Replace { src, dst, .. } => {
                r.src = Some(src);
                r.dst = dst;
            }
            SkillSpec::Manipulate(Manipulation::Repeat(n)) if n != DEFAULT_REPEAT => r.times = Some(n),
            _ => {}
        }
        r
    }
}

pub fn transform_transcribe(t: &Transcript) -> Transcript {
    t.clone()
}

pub fn transform_ignore(_t: &Transcript) -> Transcript {
    Transcript::empty()
}

/// Replaces every word equal to `src` by `dst`, or drops it when `dst` is
/// `None`. Words merely containing `src` are left alone.
pub fn replace_word(t: &Transcript, src: &str, dst: Option<&str>) -> Transcript {
    let words = t
        .words
        .iter()
        .filter_map(|w| if w == src { dst.map(str::to_owned) } else { Some(w.clone()) })
        .collect();
    Transcript { words }
}

pub fn repeat_transcript(t: &Transcript, n: usize) -> Result<Transcript, TextOpsError> {
    if n == 0 {
        return Err(TextOpsError::ZeroRepeat);
    }
    Ok(Transcript { words: (0..n).flat_map(|_| t.words.iter().cloned()).collect() })
}

/// Number of words that go to the first half: the ceiling of `n / 2`.
pub fn half_split(n: usize) -> usize {
    n.div_ceil(2)
}

pub fn first_half(t: &Transcript) -> Transcript {
    Transcript { words: t.words[..half_split(t.len())].to_vec() }
}

pub fn second_half(t: &Transcript) -> Transcript {
    Transcript { words: t.words[half_split(t.len())..].to_vec() }
}

pub const STOPWORDS: &[&str] = &[
    "a", "about", "after", "all", "am", "an", "and", "any", "are", "as", "at", "be", "been", "but", "by", "can", "could",
    "did", "do", "does", "for", "from", "had", "has", "have", "he", "her", "him", "his", "how", "i", "if", "in",
    "into", "is", "it", "its", "me", "my", "no", "not", "of", "on", "or", "our", "out", "she", "so", "some", "than",
    "that", "the", "their", "them", "then", "there", "there's", "these", "they", "this", "to", "up", "us", "was",
    "we", "were", "what", "when", "which", "who", "will", "with", "would", "you", "your",
];

/// Frozen word frequencies used to rank keywords by rarity.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    counts: BTreeMap<String, u64>,
}

impl CorpusStats {
    pub fn from_transcripts<'a>(ts: impl IntoIterator<Item = &'a Transcript>) -> Self {
        let mut counts = BTreeMap::new();
        for t in ts {
            for w in &t.words {
                *counts.entry(w.clone()).or_insert(0) += 1;
            }
        }
        Self { counts }
    }

    pub fn count(&self, word: &str) -> u64 {
        self.counts.get(word).copied().unwrap_or(0)
    }
}

/// Keeps at most `max_keywords` distinct content words, chosen rarest first
/// (earlier position breaks ties) and emitted in their original order. An
/// all-stopword transcript yields its first word.
pub fn extractive_summary(
    t: &Transcript,
    max_keywords: usize,
    stats: &CorpusStats,
) -> Result<Transcript, TextOpsError> {
    if max_keywords == 0 {
        return Err(TextOpsError::ZeroKeywords);
    }
    let stop: HashSet<&str> = STOPWORDS.iter().copied().collect();
    let mut seen = HashSet::new();
    let mut candidates: Vec<(u64, usize, &String)> = Vec::new();
    for (pos, w) in t.words.iter().enumerate() {
        if !stop.contains(w.as_str()) && seen.insert(w.as_str()) {
            candidates.push((stats.count(w), pos, w));
        }
    }
    if candidates.is_empty() {
        return Ok(Transcript { words: t.words.iter().take(1).cloned().collect() });
    }
    candidates.sort_by_key(|&(count, pos, _)| (count, pos));
    candidates.truncate(max_keywords);
    candidates.sort_by_key(|&(_, pos, _)| pos);
    Ok(Transcript { words: candidates.into_iter().map(|(_, _, w)| w.clone()).collect() })
}

/// Per-utterance summaries that take precedence over the extractive heuristic.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SummaryOverrides {
    by_id: HashMap<String, Transcript>,
}

#[derive(Debug, Serialize, Deserialize)]
struct OverrideRecord {
    utterance_id: String,
    summary_text: String,
}

impl SummaryOverrides {
    pub fn insert(&mut self, id: impl Into<String>, summary: Transcript) {
        self.by_id.insert(id.into(), summary);
    }

    pub fn get(&self, id: &str) -> Option<&Transcript> {
        self.by_id.get(id)
    }

    pub fn len(&self) -> usize {
        self.by_id.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_id.is_empty()
    }

    pub fn parse(reader: impl BufRead) -> Result<Self, TextOpsError> {
        let mut out = Self::default();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: OverrideRecord = serde_json::from_str(&line)
                .map_err(|e| TextOpsError::Override { line: i + 1, reason: e.to_string() })?;
            out.insert(rec.utterance_id, Transcript::new(&rec.summary_text));
        }
        Ok(out)
    }

    pub fn load(path: &Path) -> Result<Self, TextOpsError> {
        Self::parse(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

/// Everything besides the transcript that a target may depend on.
#[derive(Clone, Debug)]
pub struct SkillContext {
    pub stats: CorpusStats,
    pub overrides: SummaryOverrides,
    pub max_keywords: usize,
}

pub const DEFAULT_MAX_KEYWORDS: usize = 5;

impl Default for SkillContext {
    fn default() -> Self {
        Self { stats: CorpusStats::default(), overrides: SummaryOverrides::default(), max_keywords: DEFAULT_MAX_KEYWORDS }
    }
}

impl SkillContext {
    pub fn with_stats(stats: CorpusStats) -> Self {
        Self { stats, ..Self::default() }
    }
}

/// Runs the transform named by `spec`. `utterance_id` selects a summary
/// override when one exists.
pub fn apply_skill(
    spec: &SkillSpec,
    t: &Transcript,
    ctx: &SkillContext,
    utterance_id: Option<&str>,
) -> Result<Transcript, TextOpsError> {
    spec.validate()?;
    match spec {
        SkillSpec::Transcribe => Ok(transform_transcribe(t)),
        SkillSpec::Ignore => Ok(transform_ignore(t)),
        SkillSpec::Replace { src, dst, .. } => Ok(replace_word(t, src, dst.as_deref())),
        SkillSpec::Manipulate(Manipulation::Repeat(n)) => repeat_transcript(t, *n),
        SkillSpec::Manipulate(Manipulation::FirstHalf) => Ok(first_half(t)),
        SkillSpec::Manipulate(Manipulation::SecondHalf) => Ok(second_half(t)),
        SkillSpec::Summarize => {
            if let Some(s) = utterance_id.and_then(|id| ctx.overrides.get(id)) {
                return Ok(s.clone());
            }
            extractive_summary(t, ctx.max_keywords, &ctx.stats)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const SENTENCE: &str = "the influence with the timaeus has exercised upon posterity is due partly to a misunderstanding";

    fn t(s: &str) -> Transcript {
        Transcript::new(s)
    }

    #[test]
    fn transcribe_and_ignore() {
        assert_eq!(transform_transcribe(&t(SENTENCE)).text(), SENTENCE);
        assert_eq!(transform_transcribe(&t("")), Transcript::empty());
        assert_eq!(transform_transcribe(&t("hello")).text(), "hello");
        assert!(transform_ignore(&t(SENTENCE)).is_empty());
        assert!(transform_ignore(&t("a b c")).is_empty());
        assert!(transform_ignore(&t("")).is_empty());
    }

    #[test]
    fn replacement_rows() {
        let s = t(SENTENCE);
        assert_eq!(
            replace_word(&s, "the", Some("a")).text(),
            "a influence with a timaeus has exercised upon posterity is due partly to a misunderstanding"
        );
        assert_eq!(
            replace_word(&s, "the", Some("quokka")).text(),
            "quokka influence with quokka timaeus has exercised upon posterity is due partly to a misunderstanding"
        );
        assert_eq!(
            replace_word(&s, "the", None).text(),
            "influence with timaeus has exercised upon posterity is due partly to a misunderstanding"
        );
        assert_eq!(replace_word(&t("there the"), "the", Some("a")).text(), "there a");
        assert_eq!(replace_word(&t("cat dog"), "the", None).text(), "cat dog");
    }

    #[test]
    fn manipulation_rows() {
        let s = t(SENTENCE);
        assert_eq!(repeat_transcript(&s, 2).unwrap().text(), format!("{SENTENCE} {SENTENCE}"));
        assert_eq!(repeat_transcript(&s, 1).unwrap(), s);
        assert_eq!(repeat_transcript(&t("a b"), 3).unwrap().text(), "a b a b a b");
        assert!(matches!(repeat_transcript(&s, 0), Err(TextOpsError::ZeroRepeat)));

        assert_eq!(first_half(&s).text(), "the influence with the timaeus has exercised upon");
        assert_eq!(second_half(&s).text(), "posterity is due partly to a misunderstanding");
        assert_eq!(first_half(&t("hello")).text(), "hello");
        assert!(second_half(&t("hello")).is_empty());
        assert_eq!(first_half(&t("a b c d")).text(), "a b");
        assert_eq!(second_half(&t("a b c d")).text(), "c d");
        assert!(first_half(&t("")).is_empty());
    }

    #[test]
    fn summary_rules() {
        let stats = CorpusStats::default();
        assert_eq!(extractive_summary(&t("a a a"), 5, &stats).unwrap().text(), "a");
        assert_eq!(extractive_summary(&t("storm storm horizon"), 2, &stats).unwrap().text(), "storm horizon");
        let s = extractive_summary(&t("there's a heavy storm coming on i cried pointing towards the horizon"), 5, &stats)
            .unwrap();
        assert_eq!(s.text(), "heavy storm coming cried pointing");
        assert!(s.len() <= 5);
        assert!(extractive_summary(&t(""), 5, &stats).unwrap().is_empty());
        assert!(matches!(extractive_summary(&t("x"), 0, &stats), Err(TextOpsError::ZeroKeywords)));
    }

    #[test]
    fn rarity_ranking_prefers_rare_words() {
        let stats = CorpusStats::from_transcripts(&[t("cat cat cat dog dog bird")]);
        assert_eq!(extractive_summary(&t("cat dog bird"), 2, &stats).unwrap().text(), "dog bird");
        assert_eq!(extractive_summary(&t("cat dog bird"), 1, &stats).unwrap().text(), "bird");
    }

    #[test]
    fn overrides_take_precedence() {
        let overrides = SummaryOverrides::parse(
            r#"{"utterance_id":"u1","summary_text":"heavy storm cried pointing towards horizon"}"#.as_bytes(),
        )
        .unwrap();
        let ctx = SkillContext { overrides, ..SkillContext::default() };
        let s = t("there's a heavy storm coming on i cried pointing towards the horizon");
        assert_eq!(
            apply_skill(&SkillSpec::Summarize, &s, &ctx, Some("u1")).unwrap().text(),
            "heavy storm cried pointing towards horizon"
        );
        assert_ne!(apply_skill(&SkillSpec::Summarize, &s, &ctx, Some("u2")).unwrap().len(), 6);
        assert!(matches!(
            SummaryOverrides::parse("{\"utterance_id\": 3}".as_bytes()),
            Err(TextOpsError::Override { line: 1, .. })
        ));
    }

    #[test]
    fn record_conversion_enforces_invariants() {
        let ok: SkillSpec = serde_json::from_str(r#"{"skill":"Replace","subtask":"OODWord","src":"the","dst":"quokka"}"#)
            .unwrap();
        assert_eq!(ok.label(), "Replace/OODWord");
        for bad in [
            r#"{"skill":"Replace","subtask":"Delete","src":"the","dst":"a"}"#,
            r#"{"skill":"Replace","subtask":"CommonWord","src":"the"}"#,
            r#"{"skill":"Replace","subtask":"Repeat","src":"the","dst":"a"}"#,
            r#"{"skill":"Manipulate"}"#,
            r#"{"skill":"Transcribe","subtask":"Repeat"}"#,
            r#"{"skill":"Manipulate","subtask":"Repeat","times":0}"#,
        ] {
            assert!(serde_json::from_str::<SkillSpec>(bad).is_err(), "{bad}");
        }
        let rep: SkillSpec = serde_json::from_str(r#"{"skill":"Manipulate","subtask":"Repeat"}"#).unwrap();
        assert_eq!(rep, SkillSpec::Manipulate(Manipulation::Repeat(2)));
        let back = serde_json::to_string(&rep).unwrap();
        assert_eq!(serde_json::from_str::<SkillSpec>(&back).unwrap(), rep);
    }

    fn words() -> impl Strategy<Value = Transcript> {
        prop::collection::vec(prop::sample::select(vec!["the", "a", "cat", "there", "sun", "then"]), 0..12)
            .prop_map(Transcript::from_words)
    }

    proptest! {
        #[test]
        fn halves_partition(tr in words()) {
            let mut joined = first_half(&tr).words().to_vec();
            joined.extend_from_slice(second_half(&tr).words());
            prop_assert_eq!(joined, tr.words().to_vec());
        }

        #[test]
        fn replacement_soundness(tr in words(), dst in prop::option::of(prop::sample::select(vec!["a", "quokka"]))) {
            let out = replace_word(&tr, "the", dst);
            prop_assert!(out.words().iter().all(|w| w != "the"));
            let count = tr.words().iter().filter(|w| *w == "the").count();
            match dst {
                Some(_) => prop_assert_eq!(out.len(), tr.len()),
                None => prop_assert_eq!(out.len(), tr.len() - count),
            }
        }

        #[test]
        fn repetition_length(tr in words(), n in 1usize..5) {
            prop_assert_eq!(repeat_transcript(&tr, n).unwrap().len(), n * tr.len());
        }

        #[test]
        fn transcript_text_round_trip(tr in words()) {
            prop_assert_eq!(Transcript::new(&tr.text()), tr);
        }
    }
}
