#![allow(dead_code)]

use instructasr::decode::{compare_hypotheses, length_penalty, DecodeError, Hypothesis, StepScorer};
use instructasr::model::tensor::Mat;
use instructasr::model::{Batch, Model, ModelConfig};
use instructasr::synthaudio::FeatureMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A toy autoregressive model: every history up to `max_len` owns a
/// distribution drawn from a few coarse weight levels, so exact score ties
/// occur regularly.
pub struct TableModel {
    pub vocab: usize,
    pub eos: u32,
    pub max_len: usize,
    table: Vec<Vec<f64>>,
}

impl TableModel {
    pub fn random(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vocab = rng.random_range(2..=5usize);
        let max_len = rng.random_range(1..=6usize);
        let eos = rng.random_range(0..vocab as u32);
        let levels = rng.random_range(1..=4u32);
        let histories: usize = (0..max_len).map(|k| vocab.pow(k as u32)).sum();
        let table = (0..histories)
            .map(|_| {
                let w: Vec<f64> = (0..vocab).map(|_| 1.0 + rng.random_range(0..levels) as f64).collect();
                let z: f64 = w.iter().sum();
                w.iter().map(|x| (x / z).ln()).collect()
            })
            .collect();
        Self { vocab, eos, max_len, table }
    }

    /// Histories of length k occupy a contiguous block after all shorter ones.
    fn index(&self, history: &[u32]) -> usize {
        let offset: usize = (0..history.len()).map(|k| self.vocab.pow(k as u32)).sum();
        offset + history.iter().fold(0, |acc, &t| acc * self.vocab + t as usize)
    }

    pub fn dist(&self, history: &[u32]) -> &[f64] {
        &self.table[self.index(history)]
    }

    /// Search space of the beam: every `[EOS]`-terminated sequence up to
    /// `max_len` plus every unfinished sequence of exactly `max_len`.
    pub fn enumerate(&self) -> Vec<Hypothesis> {
        let mut out = Vec::new();
        let mut stack = vec![(Vec::<u32>::new(), 0.0f64)];
        while let Some((tokens, lp)) = stack.pop() {
            let dist = self.dist(&tokens).to_vec();
            for v in 0..self.vocab as u32 {
                let mut t = tokens.clone();
                t.push(v);
                let l = lp + dist[v as usize];
                let finished = v == self.eos;
                if finished || t.len() == self.max_len {
                    let score = l / length_penalty(t.len());
                    out.push(Hypothesis { tokens: t, logprob: l, score, finished });
                } else {
                    stack.push((t, l));
                }
            }
        }
        out
    }

    /// Exhaustive argmax of the score, falling back to unfinished sequences
    /// only when nothing can finish.
    pub fn oracle(&self) -> Hypothesis {
        let all = self.enumerate();
        let any_finished = all.iter().any(|h| h.finished);
        all.into_iter().filter(|h| h.finished || !any_finished).min_by(compare_hypotheses).expect("nonempty")
    }
}

impl StepScorer for TableModel {
    type State = Vec<u32>;

    fn vocab_size(&self) -> usize {
        self.vocab
    }

    fn eos(&self) -> u32 {
        self.eos
    }

    fn prime(&self, _prefix: &[u32]) -> Result<Vec<u32>, DecodeError> {
        Ok(Vec::new())
    }

    fn log_probs(&self, state: &Vec<u32>) -> Vec<f64> {
        self.dist(state).to_vec()
    }

    fn advance(&self, state: &mut Vec<u32>, token: u32) -> Result<(), DecodeError> {
        state.push(token);
        Ok(())
    }
}

/// Configuration under 5k parameters with every layer kind present.
pub fn grad_config() -> ModelConfig {
    ModelConfig {
        feature_dim: 3,
        enc_layers: 1,
        dec_layers: 2,
        hidden_dim: 8,
        attn_heads: 2,
        ffn_dim: 12,
        vocab_size: 9,
        max_len: 10,
        dropout_rate: 0.1,
        subsample_factor: 2,
    }
}

pub fn random_features(frames: usize, dim: usize, seed: u64) -> FeatureMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    FeatureMatrix::new(Mat::from_fn(frames, dim, |_, _| rng.random_range(-1.0..1.0f32))).unwrap()
}

/// Two utterances of different lengths with a partial loss mask.
pub fn grad_batch(cfg: &ModelConfig) -> Batch {
    let mut b = Batch::new();
    b.push(cfg, &random_features(7, cfg.feature_dim, 1), &[4, 5, 2, 6, 7, 3], 0).unwrap();
    b.push(cfg, &random_features(4, cfg.feature_dim, 2), &[8, 2, 4, 3], 2).unwrap();
    b
}

/// Largest per-element relative error between analytic and central
/// finite-difference gradients for each parameter tensor.
pub fn gradient_errors(model: &Model<f64>, batch: &Batch) -> Vec<(String, f64)> {
    let (_, grads) = model.loss_and_grad(batch, None).unwrap();
    let h = 1e-5;
    let mut probe = model.clone();
    let mut out = Vec::new();
    for (i, name) in model.params.names.iter().enumerate() {
        let mut worst: f64 = 0.0;
        for j in 0..model.params.tensors[i].data.len() {
            let x = model.params.tensors[i].data[j];
            probe.params.tensors[i].data[j] = x + h;
            let up = probe.loss(batch).unwrap();
            probe.params.tensors[i].data[j] = x - h;
            let down = probe.loss(batch).unwrap();
            probe.params.tensors[i].data[j] = x;
            let numeric = (up - down) / (2.0 * h);
            let analytic = grads[i].data[j];
            let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max(err);
        }
        out.push((name.clone(), worst));
    }
    out
}
