//! Length-normalised beam search with a forced instruction prefix.
//!
//! Live hypotheses are ranked by raw log-probability; a hypothesis that emits
//! `[EOS]` leaves the beam and is scored as `logprob / lp(|tokens|)`, where
//! the token count includes `[EOS]`.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::infer::{DecoderState, EncoderMemory};
use crate::model::tensor::Real;
use crate::model::{Model, ModelError};
use crate::synthaudio::FeatureMatrix;
use crate::tokenizer::{TokenizerError, Vocabulary, BOS, EOS, EOT};

#[derive(Debug, Error)]
pub enum DecodeError {
    #[error("beam width must be at least 1")]
    ZeroBeam,
    #[error("max_len must be at least 1")]
    ZeroLength,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
}

/// `((5 + len) / 6)^0.8`.
pub fn length_penalty(len: usize) -> f64 {
    ((5.0 + len as f64) / 6.0).powf(0.8)
}

/// An autoregressive next-token distribution.
pub trait StepScorer {
    type State: Clone;

    fn vocab_size(&self) -> usize;

    fn eos(&self) -> u32;

    /// State after consuming the forced prefix.
    fn prime(&self, prefix: &[u32]) -> Result<Self::State, DecodeError>;

    /// Log-probabilities of the next token.
    fn log_probs(&self, state: &Self::State) -> Vec<f64>;

    fn advance(&self, state: &mut Self::State, token: u32) -> Result<(), DecodeError>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    /// Generated tokens, ending in `[EOS]` when finished.
    pub tokens: Vec<u32>,
    pub logprob: f64,
    pub score: f64,
    pub finished: bool,
}

impl Hypothesis {
    fn new(tokens: Vec<u32>, logprob: f64, finished: bool) -> Self {
        let score = logprob / length_penalty(tokens.len());
        Self { tokens, logprob, score, finished }
    }

    /// Generated tokens without the closing `[EOS]`.
    pub fn output(&self) -> &[u32] {
        match self.tokens.split_last() {
            Some((_, rest)) if self.finished => rest,
            _ => &self.tokens,
        }
    }
}

/// Decision order: higher score, then shorter, then lexicographically
/// smaller tokens.
pub fn compare_hypotheses(a: &Hypothesis, b: &Hypothesis) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.tokens.len().cmp(&b.tokens.len()))
        .then_with(|| a.tokens.cmp(&b.tokens))
}

#[derive(Clone, Debug, PartialEq)]
pub struct BeamOutput {
    pub best: Hypothesis,
    /// Finished hypotheses in decision order, or the unfinished fallback.
    pub nbest: Vec<Hypothesis>,
}

struct Live<S> {
    tokens: Vec<u32>,
    logprob: f64,
    state: S,
}

/// Beam search after force-feeding `prefix`. `max_len` bounds the generated
/// tokens, `[EOS]` included.
pub fn beam_search<S: StepScorer>(
    scorer: &S,
    prefix: &[u32],
    beam: usize,
    max_len: usize,
) -> Result<BeamOutput, DecodeError> {
    if beam == 0 {
        return Err(DecodeError::ZeroBeam);
    }
    if max_len == 0 {
        return Err(DecodeError::ZeroLength);
    }
    let eos = scorer.eos();
    let mut live = vec![Live { tokens: Vec::new(), logprob: 0.0, state: scorer.prime(prefix)? }];
    let mut finished: Vec<Hypothesis> = Vec::new();
    for len in 1..=max_len {
        let mut cands: Vec<(f64, usize, u32)> = Vec::with_capacity(live.len() * scorer.vocab_size());
        for (i, h) in live.iter().enumerate() {
            for (v, lp) in scorer.log_probs(&h.state).into_iter().enumerate() {
                if lp > f64::NEG_INFINITY {
                    cands.push((h.logprob + lp, i, v as u32));
                }
            }
        }
        // Live hypotheses share a length, so comparing parent tokens then the
        // new token is lexicographic order on the extended sequence.
        cands.sort_by(|a, b| {
            b.0.total_cmp(&a.0).then_with(|| live[a.1].tokens.cmp(&live[b.1].tokens)).then(a.2.cmp(&b.2))
        });
        cands.truncate(beam);
        let mut next = Vec::with_capacity(cands.len());
        for (logprob, i, v) in cands {
            let mut tokens = live[i].tokens.clone();
            tokens.push(v);
            if v == eos {
                finished.push(Hypothesis::new(tokens, logprob, true));
            } else if len < max_len {
                let mut state = live[i].state.clone();
                scorer.advance(&mut state, v)?;
                next.push(Live { tokens, logprob, state });
            } else {
                next.push(Live { tokens, logprob, state: live[i].state.clone() });
            }
        }
        live = next;
        if len == max_len || live.is_empty() {
            break;
        }
        // Extending a live hypothesis can only lower its log-probability, and
        // the penalty is largest at max_len, so this bounds its final score.
        if let Some(best) = finished.iter().min_by(|a, b| compare_hypotheses(a, b)) {
            let bound = live.iter().map(|h| h.logprob / length_penalty(max_len)).fold(f64::NEG_INFINITY, f64::max);
            if best.score >= bound {
                break;
            }
        }
    }
    if finished.is_empty() {
        let mut rest: Vec<Hypothesis> = live.into_iter().map(|h| Hypothesis::new(h.tokens, h.logprob, false)).collect();
        rest.sort_by(compare_hypotheses);
        let best = rest.first().cloned().unwrap_or_else(|| Hypothesis::new(Vec::new(), f64::NEG_INFINITY, false));
        return Ok(BeamOutput { best, nbest: rest });
    }
    finished.sort_by(compare_hypotheses);
    Ok(BeamOutput { best: finished[0].clone(), nbest: finished })
}

/// Greedy decoding: the most likely token at every step, ties to the smaller
/// id, until `[EOS]` or `max_len` tokens.
pub fn greedy<S: StepScorer>(scorer: &S, prefix: &[u32], max_len: usize) -> Result<Hypothesis, DecodeError> {
    let mut state = scorer.prime(prefix)?;
    let (mut tokens, mut logprob) = (Vec::new(), 0.0);
    while tokens.len() < max_len {
        let lps = scorer.log_probs(&state);
        let (v, lp) = lps
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (v, &lp)| if lp > best.1 { (v, lp) } else { best });
        tokens.push(v as u32);
        logprob += lp;
        if v as u32 == scorer.eos() {
            return Ok(Hypothesis::new(tokens, logprob, true));
        }
        if tokens.len() < max_len {
            scorer.advance(&mut state, v as u32)?;
        }
    }
    Ok(Hypothesis::new(tokens, logprob, false))
}

/// Adapts a trained model, conditioned on one utterance, to [`StepScorer`].
pub struct ModelScorer<'m, T: Real> {
    pub model: &'m Model<T>,
    pub memory: EncoderMemory<T>,
}

impl<'m, T: Real> ModelScorer<'m, T> {
    pub fn new(model: &'m Model<T>, features: &FeatureMatrix) -> Result<Self, DecodeError> {
        Ok(Self { model, memory: model.encode(features)? })
    }
}

impl<T: Real> StepScorer for ModelScorer<'_, T> {
    type State = DecoderState<T>;

    fn vocab_size(&self) -> usize {
        self.model.config.vocab_size
    }

    fn eos(&self) -> u32 {
        EOS
    }

    fn prime(&self, prefix: &[u32]) -> Result<Self::State, DecodeError> {
        Ok(self.model.prime(&self.memory, prefix)?)
    }

    fn log_probs(&self, state: &Self::State) -> Vec<f64> {
        state.log_probs().to_vec()
    }

    fn advance(&self, state: &mut Self::State, token: u32) -> Result<(), DecodeError> {
        Ok(self.model.step(&self.memory, state, token)?)
    }
}

/// `[BOS] ⊕ instruction ⊕ [EOT]`, appending `[EOT]` only if absent.
pub fn forced_prefix(instruction: &[u32]) -> Vec<u32> {
    let mut p = Vec::with_capacity(instruction.len() + 2);
    p.push(BOS);
    p.extend_from_slice(instruction);
    if instruction.last() != Some(&EOT) {
        p.push(EOT);
    }
    p
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub beam: usize,
    /// Cap on generated tokens; `None` derives one from the feature length.
    pub max_len: Option<usize>,
    /// Frames per transcript character, used by the derived cap.
    pub frames_per_symbol: usize,
    pub slack: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self { beam: 10, max_len: None, frames_per_symbol: 3, slack: 8 }
    }
}

impl DecodeConfig {
    /// Twice the longest transcript the features can encode plus slack,
    /// clipped so the decoder never exceeds the model's `max_len`.
    pub fn output_cap(&self, frames: usize, prefix_len: usize, model_max_len: usize) -> usize {
        let derived = self.max_len.unwrap_or(2 * frames.div_ceil(self.frames_per_symbol.max(1)) + self.slack);
        derived.min((model_max_len + 1).saturating_sub(prefix_len)).max(1)
    }
}

/// One line of a batch decode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodeRecord {
    pub utterance_id: String,
    pub instruction: String,
    pub hypothesis_text: String,
    pub logprob: f64,
    pub score: f64,
    pub finished: bool,
}

/// Decodes `instruction` against an already encoded utterance.
pub fn decode_with<T: Real>(
    scorer: &ModelScorer<'_, T>,
    vocab: &Vocabulary,
    frames: usize,
    instruction: &str,
    cfg: &DecodeConfig,
) -> Result<(Hypothesis, String), DecodeError> {
    let ids = vocab.encode(&crate::instructions::normalize_instruction(instruction))?;
    let prefix = forced_prefix(&ids);
    let cap = cfg.output_cap(frames, prefix.len(), scorer.model.config.max_len);
    let out = beam_search(scorer, &prefix, cfg.beam, cap)?;
    let text = vocab.decode(out.best.output())?;
    Ok((out.best, text))
}

pub fn decode_utterance<T: Real>(
    model: &Model<T>,
    vocab: &Vocabulary,
    utterance_id: &str,
    features: &FeatureMatrix,
    instruction: &str,
    cfg: &DecodeConfig,
) -> Result<DecodeRecord, DecodeError> {
    let scorer = ModelScorer::new(model, features)?;
    let (h, text) = decode_with(&scorer, vocab, features.frames(), instruction, cfg)?;
    Ok(DecodeRecord {
        utterance_id: utterance_id.to_owned(),
        instruction: instruction.to_owned(),
        hypothesis_text: crate::textops::Transcript::new(&text).text(),
        logprob: h.logprob,
        score: h.score,
        finished: h.finished,
    })
}

/// Decodes every `(utterance, instruction)` pair, in input order.
pub fn decode_batch<T: Real>(
    model: &Model<T>,
    vocab: &Vocabulary,
    jobs: &[(String, FeatureMatrix, String)],
    cfg: &DecodeConfig,
) -> Vec<Result<DecodeRecord, DecodeError>> {
    crate::par::map(jobs, |(id, f, instr)| decode_utterance(model, vocab, id, f, instr, cfg))
}
