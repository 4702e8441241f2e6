//! Attention encoder-decoder trained with teacher forcing.
//!
//! The encoder stacks `subsample_factor` consecutive frames, projects them to
//! the model width and runs pre-norm self-attention blocks. The decoder embeds
//! tokens and runs causal self-attention, cross-attention to the encoder
//! output and a feed-forward block per layer.
//!
//! Training batches are packed: utterances are concatenated row-wise with no
//! padding, and attention runs per segment.

pub mod checkpoint;
pub mod graph;
pub mod infer;
pub mod tensor;
pub mod train;

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::synthaudio::FeatureMatrix;
use crate::tokenizer::BOS;
use graph::{Graph, ParamSet, Var};
use tensor::{positional_rows, AttnSegment, AttnShape, Mat, Real};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("sequence of {len} tokens exceeds max_len {max}")]
    TooLong { len: usize, max: usize },
    #[error("token {token} outside vocabulary of {vocab}")]
    Token { token: u32, vocab: usize },
    #[error("feature width {got} differs from configured {want}")]
    FeatureDim { got: usize, want: usize },
    #[error("loss mask selects no positions")]
    EmptyMask,
    #[error("training diverged at step {step}: loss {loss}")]
    Diverged { step: usize, loss: f64 },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("batch: {0}")]
    Batch(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub feature_dim: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub hidden_dim: usize,
    pub attn_heads: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
    /// Longest decoder input, `[BOS]` included.
    pub max_len: usize,
    /// Applied to the decoder's residual branches during training.
    pub dropout_rate: f64,
    pub subsample_factor: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            feature_dim: 16,
            enc_layers: 2,
            dec_layers: 2,
            hidden_dim: 64,
            attn_heads: 4,
            ffn_dim: 128,
            vocab_size: crate::tokenizer::DEFAULT_VOCAB_SIZE,
            max_len: 96,
            dropout_rate: 0.1,
            subsample_factor: 4,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::Config(m.to_owned()));
        if self.hidden_dim == 0 || self.attn_heads == 0 || !self.hidden_dim.is_multiple_of(self.attn_heads) {
            return bad("hidden_dim must be a positive multiple of attn_heads");
        }
        if !self.hidden_dim.is_multiple_of(2) {
            return bad("hidden_dim must be even for sinusoidal positions");
        }
        if self.feature_dim == 0 || self.ffn_dim == 0 || self.subsample_factor == 0 {
            return bad("feature_dim, ffn_dim and subsample_factor must be positive");
        }
        if self.vocab_size <= crate::tokenizer::SPECIALS.len() || self.max_len < 2 {
            return bad("vocab_size must exceed the specials and max_len must be at least 2");
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad("dropout_rate must lie in [0, 1)");
        }
        Ok(())
    }

    /// Encoder output length for `frames` input frames.
    pub fn encoded_len(&self, frames: usize) -> usize {
        frames.div_ceil(self.subsample_factor)
    }
}

#[derive(Clone, Copy, Debug)]
struct Linear {
    w: usize,
    b: usize,
}

#[derive(Clone, Copy, Debug)]
struct Norm {
    g: usize,
    b: usize,
}

#[derive(Clone, Copy, Debug)]
struct AttnParams {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
}

#[derive(Clone, Debug)]
struct EncoderLayer {
    ln1: Norm,
    attn: AttnParams,
    ln2: Norm,
    ff1: Linear,
    ff2: Linear,
}

#[derive(Clone, Debug)]
struct DecoderLayer {
    ln1: Norm,
    self_attn: AttnParams,
    ln2: Norm,
    cross: AttnParams,
    ln3: Norm,
    ff1: Linear,
    ff2: Linear,
}

#[derive(Clone, Debug)]
struct Layout {
    input: Linear,
    enc: Vec<EncoderLayer>,
    enc_norm: Norm,
    embed: usize,
    dec: Vec<DecoderLayer>,
    dec_norm: Norm,
    out: Linear,
}

/// Records parameter names and shapes in layout order; also used to check a
/// loaded parameter set.
struct Builder<'a, T: Real> {
    params: ParamSet<T>,
    init: Option<(&'a mut ChaCha8Rng, f64)>,
}

impl<T: Real> Builder<'_, T> {
    fn tensor(&mut self, name: String, rows: usize, cols: usize, std: f64, fill: f64) -> usize {
        let m = match &mut self.init {
            Some((rng, _)) if std > 0.0 => {
                let n = Normal::new(0.0, std).expect("positive std");
                Mat::from_fn(rows, cols, |_, _| T::of(n.sample(*rng)))
            }
            _ => Mat::from_vec(rows, cols, vec![T::of(fill); rows * cols]),
        };
        self.params.push(name, m)
    }

    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize, gain: f64) -> Linear {
        let std = gain / (fan_in as f64).sqrt();
        Linear { w: self.tensor(format!("{name}.w"), fan_in, fan_out, std, 0.0), b: self.tensor(format!("{name}.b"), 1, fan_out, 0.0, 0.0) }
    }

    fn norm(&mut self, name: &str, d: usize) -> Norm {
        Norm { g: self.tensor(format!("{name}.g"), 1, d, 0.0, 1.0), b: self.tensor(format!("{name}.b"), 1, d, 0.0, 0.0) }
    }

    fn attn(&mut self, name: &str, d: usize, out_gain: f64) -> AttnParams {
        AttnParams {
            q: self.linear(&format!("{name}.q"), d, d, 1.0),
            k: self.linear(&format!("{name}.k"), d, d, 1.0),
            v: self.linear(&format!("{name}.v"), d, d, 1.0),
            o: self.linear(&format!("{name}.o"), d, d, out_gain),
        }
    }
}

fn build_layout<T: Real>(cfg: &ModelConfig, init: Option<&mut ChaCha8Rng>) -> (Layout, ParamSet<T>) {
    let d = cfg.hidden_dim;
    let mut b = Builder::<T> { params: ParamSet::new(), init: init.map(|r| (r, 0.0)) };
    let enc_gain = 1.0 / ((2 * cfg.enc_layers.max(1)) as f64).sqrt();
    let dec_gain = 1.0 / ((3 * cfg.dec_layers.max(1)) as f64).sqrt();
    let input = b.linear("enc.in", cfg.feature_dim * cfg.subsample_factor, d, 1.0);
    let enc = (0..cfg.enc_layers)
        .map(|l| EncoderLayer {
            ln1: b.norm(&format!("enc.{l}.ln1"), d),
            attn: b.attn(&format!("enc.{l}.attn"), d, enc_gain),
            ln2: b.norm(&format!("enc.{l}.ln2"), d),
            ff1: b.linear(&format!("enc.{l}.ff1"), d, cfg.ffn_dim, 1.0),
            ff2: b.linear(&format!("enc.{l}.ff2"), cfg.ffn_dim, d, enc_gain),
        })
        .collect();
    let enc_norm = b.norm("enc.norm", d);
    let embed = b.tensor("dec.embed".into(), cfg.vocab_size, d, 1.0, 0.0);
    let dec = (0..cfg.dec_layers)
        .map(|l| DecoderLayer {
            ln1: b.norm(&format!("dec.{l}.ln1"), d),
            self_attn: b.attn(&format!("dec.{l}.self"), d, dec_gain),
            ln2: b.norm(&format!("dec.{l}.ln2"), d),
            cross: b.attn(&format!("dec.{l}.cross"), d, dec_gain),
            ln3: b.norm(&format!("dec.{l}.ln3"), d),
            ff1: b.linear(&format!("dec.{l}.ff1"), d, cfg.ffn_dim, 1.0),
            ff2: b.linear(&format!("dec.{l}.ff2"), cfg.ffn_dim, d, dec_gain),
        })
        .collect();
    let dec_norm = b.norm("dec.norm", d);
    let out = b.linear("dec.out", d, cfg.vocab_size, 0.02 * (d as f64).sqrt());
    (Layout { input, enc, enc_norm, embed, dec, dec_norm, out }, b.params)
}

/// Stacks `factor` consecutive frames into one row, zero-padding the tail.
pub fn stack_frames<T: Real>(features: &Mat<f32>, factor: usize) -> Mat<T> {
    let rows = features.rows.div_ceil(factor);
    let d = features.cols;
    let mut out = Mat::zeros(rows, d * factor);
    for r in 0..features.rows {
        let (dst, slot) = (r / factor, r % factor);
        for (o, &v) in out.row_mut(dst)[slot * d..(slot + 1) * d].iter_mut().zip(features.row(r)) {
            *o = T::of(v as f64);
        }
    }
    out
}

/// A packed batch of utterances and their decoder sequences. Rows of every
/// utterance are contiguous; lengths delimit them, so no padding exists.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Batch {
    /// Stacked encoder input rows for all utterances.
    pub enc_input: Vec<f32>,
    pub enc_width: usize,
    /// Raw frame count per utterance.
    pub frame_lengths: Vec<usize>,
    /// Encoder rows per utterance after stacking.
    pub enc_lengths: Vec<usize>,
    /// Decoder inputs: `[BOS] ⊕ composed[..n-1]` per sequence.
    pub dec_input: Vec<u32>,
    /// Next-token labels: `composed` per sequence.
    pub targets: Vec<u32>,
    pub token_lengths: Vec<usize>,
    /// 1 where the label contributes to the loss.
    pub loss_mask: Vec<f32>,
}

impl Batch {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.frame_lengths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frame_lengths.is_empty()
    }

    /// Appends one sequence. Labels before `loss_start` get mask 0.
    pub fn push(
        &mut self,
        cfg: &ModelConfig,
        features: &FeatureMatrix,
        composed: &[u32],
        loss_start: usize,
    ) -> Result<(), ModelError> {
        if features.dim() != cfg.feature_dim {
            return Err(ModelError::FeatureDim { got: features.dim(), want: cfg.feature_dim });
        }
        if composed.is_empty() {
            return Err(ModelError::Batch("empty token sequence".into()));
        }
        if composed.len() > cfg.max_len {
            return Err(ModelError::TooLong { len: composed.len(), max: cfg.max_len });
        }
        if let Some(&token) = composed.iter().find(|&&t| t as usize >= cfg.vocab_size) {
            return Err(ModelError::Token { token, vocab: cfg.vocab_size });
        }
        let stacked: Mat<f32> = stack_frames(features.mat(), cfg.subsample_factor);
        self.enc_width = stacked.cols;
        self.enc_input.extend_from_slice(&stacked.data);
        self.frame_lengths.push(features.frames());
        self.enc_lengths.push(stacked.rows);
        self.dec_input.push(BOS);
        self.dec_input.extend_from_slice(&composed[..composed.len() - 1]);
        self.targets.extend_from_slice(composed);
        self.token_lengths.push(composed.len());
        self.loss_mask.extend((0..composed.len()).map(|i| if i >= loss_start { 1.0 } else { 0.0 }));
        Ok(())
    }

    fn segments(lengths: &[usize]) -> Vec<AttnSegment> {
        let mut start = 0;
        lengths
            .iter()
            .map(|&len| {
                let s = AttnSegment { q_start: start, q_len: len, k_start: start, k_len: len };
                start += len;
                s
            })
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct Model<T: Real> {
    pub config: ModelConfig,
    pub params: ParamSet<T>,
    layout: Layout,
}

impl<T: Real> Model<T> {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (layout, params) = build_layout(&config, Some(&mut rng));
        Ok(Self { config, params, layout })
    }

    /// Wraps an existing parameter set, checking names and shapes.
    pub fn from_params(config: ModelConfig, params: ParamSet<T>) -> Result<Self, ModelError> {
        config.validate()?;
        let (layout, expected) = build_layout::<T>(&config, None);
        if expected.names != params.names {
            return Err(ModelError::Checkpoint("parameter names do not match the config".into()));
        }
        for (i, (a, b)) in expected.tensors.iter().zip(&params.tensors).enumerate() {
            if a.shape() != b.shape() {
                return Err(ModelError::Checkpoint(format!("{} has shape {:?}, want {:?}", params.names[i], b.shape(), a.shape())));
            }
        }
        Ok(Self { config, params, layout })
    }

    pub fn num_params(&self) -> usize {
        self.params.num_scalars()
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model { config: self.config.clone(), params: self.params.cast(), layout: self.layout.clone() }
    }

    fn shape(&self, causal: bool) -> AttnShape {
        AttnShape { heads: self.config.attn_heads, causal }
    }

    fn lin(&self, g: &mut Graph<'_, T>, x: Var, p: Linear) -> Var {
        let (w, b) = (g.param(p.w), g.param(p.b));
        g.linear(x, w, b)
    }

    fn norm(&self, g: &mut Graph<'_, T>, x: Var, p: Norm) -> Var {
        let (gamma, beta) = (g.param(p.g), g.param(p.b));
        g.layernorm(x, gamma, beta)
    }

    fn encoder_graph(&self, g: &mut Graph<'_, T>, batch: &Batch) -> Var {
        let d = self.config.hidden_dim;
        let rows = batch.enc_lengths.iter().sum();
        let x = g.input(Mat::from_vec(rows, batch.enc_width, batch.enc_input.iter().map(|&v| T::of(v as f64)).collect()));
        let h = self.lin(g, x, self.layout.input);
        let pe = g.input(positional_rows(&batch.enc_lengths, d));
        let mut h = g.add(h, pe);
        let segs = Arc::new(Batch::segments(&batch.enc_lengths));
        for layer in &self.layout.enc {
            let a = self.norm(g, h, layer.ln1);
            let q = self.lin(g, a, layer.attn.q);
            let k = self.lin(g, a, layer.attn.k);
            let v = self.lin(g, a, layer.attn.v);
            let att = g.attention(q, k, v, segs.clone(), self.shape(false));
            let o = self.lin(g, att, layer.attn.o);
            h = g.add(h, o);
            let a = self.norm(g, h, layer.ln2);
            let f = self.lin(g, a, layer.ff1);
            let f = g.silu(f);
            let f = self.lin(g, f, layer.ff2);
            h = g.add(h, f);
        }
        self.norm(g, h, self.layout.enc_norm)
    }

    fn decoder_graph(
        &self,
        g: &mut Graph<'_, T>,
        enc: Var,
        batch: &Batch,
        mut dropout: Option<&mut ChaCha8Rng>,
    ) -> Var {
        let d = self.config.hidden_dim;
        let rate = if dropout.is_some() { self.config.dropout_rate } else { 0.0 };
        let table = g.param(self.layout.embed);
        let e = g.embed(table, &batch.dec_input);
        let pe = g.input(positional_rows(&batch.token_lengths, d));
        let mut h = g.add(e, pe);
        let self_segs = Arc::new(Batch::segments(&batch.token_lengths));
        let mut cross = Vec::with_capacity(batch.len());
        let (mut qs, mut ks) = (0, 0);
        for (&ql, &kl) in batch.token_lengths.iter().zip(&batch.enc_lengths) {
            cross.push(AttnSegment { q_start: qs, q_len: ql, k_start: ks, k_len: kl });
            qs += ql;
            ks += kl;
        }
        let cross = Arc::new(cross);
        let mut drop = |g: &mut Graph<'_, T>, x: Var| match dropout.as_deref_mut() {
            Some(rng) => g.dropout(x, rate, rng),
            None => x,
        };
        for layer in &self.layout.dec {
            let a = self.norm(g, h, layer.ln1);
            let q = self.lin(g, a, layer.self_attn.q);
            let k = self.lin(g, a, layer.self_attn.k);
            let v = self.lin(g, a, layer.self_attn.v);
            let att = g.attention(q, k, v, self_segs.clone(), self.shape(true));
            let o = self.lin(g, att, layer.self_attn.o);
            let o = drop(g, o);
            h = g.add(h, o);

            let a = self.norm(g, h, layer.ln2);
            let q = self.lin(g, a, layer.cross.q);
            let k = self.lin(g, enc, layer.cross.k);
            let v = self.lin(g, enc, layer.cross.v);
            let att = g.attention(q, k, v, cross.clone(), self.shape(false));
            let o = self.lin(g, att, layer.cross.o);
            let o = drop(g, o);
            h = g.add(h, o);

            let a = self.norm(g, h, layer.ln3);
            let f = self.lin(g, a, layer.ff1);
            let f = g.silu(f);
            let f = self.lin(g, f, layer.ff2);
            let f = drop(g, f);
            h = g.add(h, f);
        }
        let h = self.norm(g, h, self.layout.dec_norm);
        self.lin(g, h, self.layout.out)
    }

    fn loss_graph<'p>(
        &'p self,
        batch: &Batch,
        dropout: Option<&mut ChaCha8Rng>,
    ) -> Result<(Graph<'p, T>, Var), ModelError> {
        if batch.is_empty() {
            return Err(ModelError::Batch("empty batch".into()));
        }
        if batch.loss_mask.iter().all(|&m| m == 0.0) {
            return Err(ModelError::EmptyMask);
        }
        let mut g = Graph::new(&self.params);
        let enc = self.encoder_graph(&mut g, batch);
        let logits = self.decoder_graph(&mut g, enc, batch, dropout);
        let weights: Vec<T> = batch.loss_mask.iter().map(|&m| T::of(m as f64)).collect();
        let loss = g.cross_entropy(logits, &batch.targets, &weights);
        Ok((g, loss))
    }

    /// Mean negative log-likelihood over masked positions, without dropout.
    pub fn loss(&self, batch: &Batch) -> Result<f64, ModelError> {
        let (g, loss) = self.loss_graph(batch, None)?;
        Ok(g.value(loss).data[0].as_f64())
    }

    /// Loss and its gradient for every parameter tensor. Dropout is active
    /// only when an rng is supplied.
    pub fn loss_and_grad(
        &self,
        batch: &Batch,
        dropout: Option<&mut ChaCha8Rng>,
    ) -> Result<(f64, Vec<Mat<T>>), ModelError> {
        let (g, loss) = self.loss_graph(batch, dropout)?;
        let value = g.value(loss).data[0].as_f64();
        Ok((value, g.backward(loss)))
    }

    /// Next-token distributions for every position of `prefix` (which should
    /// start with `[BOS]`), conditioned on `features`.
    pub fn forward(&self, features: &FeatureMatrix, prefix: &[u32]) -> Result<Mat<T>, ModelError> {
        if prefix.is_empty() {
            return Err(ModelError::Batch("empty prefix".into()));
        }
        if prefix.len() > self.config.max_len {
            return Err(ModelError::TooLong { len: prefix.len(), max: self.config.max_len });
        }
        let mut batch = Batch::new();
        // `push` shifts the sequence right behind [BOS]; undo that so the
        // decoder sees exactly `prefix`.
        let mut shifted = prefix[1..].to_vec();
        shifted.push(prefix[0]);
        batch.push(&self.config, features, &shifted, 0)?;
        batch.dec_input = prefix.to_vec();
        let mut g = Graph::new(&self.params);
        let enc = self.encoder_graph(&mut g, &batch);
        let logits = self.decoder_graph(&mut g, enc, &batch, None);
        let mut probs = g.value(logits).clone();
        for r in 0..probs.rows {
            let row = probs.row_mut(r);
            let n = row.len();
            tensor::softmax_prefix(row, n);
        }
        Ok(probs)
    }

    /// SHA-256 over parameter names, shapes and values.
    pub fn param_hash(&self) -> String {
        let mut bytes = Vec::new();
        for (name, t) in self.params.names.iter().zip(&self.params.tensors) {
            bytes.extend_from_slice(name.as_bytes());
            bytes.extend_from_slice(&(t.rows as u64).to_le_bytes());
            bytes.extend_from_slice(&(t.cols as u64).to_le_bytes());
            for v in &t.data {
                bytes.extend_from_slice(&v.as_f64().to_le_bytes());
            }
        }
        crate::sha256_hex(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny_config() -> ModelConfig {
        ModelConfig {
            feature_dim: 3,
            enc_layers: 1,
            dec_layers: 1,
            hidden_dim: 8,
            attn_heads: 2,
            ffn_dim: 12,
            vocab_size: 9,
            max_len: 12,
            dropout_rate: 0.0,
            subsample_factor: 2,
        }
    }

    fn features(frames: usize, dim: usize, seed: u64) -> FeatureMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = Normal::new(0.0, 1.0).unwrap();
        FeatureMatrix::new(Mat::from_fn(frames, dim, |_, _| n.sample(&mut rng) as f32)).unwrap()
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::default().validate().is_ok());
        assert!(ModelConfig { attn_heads: 3, ..ModelConfig::default() }.validate().is_err());
        assert!(ModelConfig { dropout_rate: 1.0, ..ModelConfig::default() }.validate().is_err());
        assert_eq!(ModelConfig::default().encoded_len(9), 3);
    }

    #[test]
    fn stacking_pads_tail() {
        let f = Mat::from_fn(5, 2, |r, c| (r * 2 + c) as f32);
        let s: Mat<f64> = stack_frames(&f, 2);
        assert_eq!(s.shape(), (3, 4));
        assert_eq!(s.row(2), &[8.0, 9.0, 0.0, 0.0]);
    }

    #[test]
    fn rows_are_distributions_and_causal() {
        let model = Model::<f64>::init(tiny_config(), 3).unwrap();
        let f = features(7, 3, 1);
        let a = model.forward(&f, &[BOS, 4, 5, 6, 7]).unwrap();
        for r in 0..a.rows {
            assert!((a.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let b = model.forward(&f, &[BOS, 4, 5, 8, 4]).unwrap();
        for r in 0..3 {
            assert_eq!(a.row(r), b.row(r), "row {r} changed");
        }
        assert_ne!(a.row(3), b.row(3));
        assert!(matches!(model.forward(&f, &[BOS; 13]), Err(ModelError::TooLong { .. })));
    }

    #[test]
    fn layout_round_trips_through_from_params() {
        let model = Model::<f32>::init(tiny_config(), 1).unwrap();
        let again = Model::from_params(tiny_config(), model.params.clone()).unwrap();
        assert_eq!(again.param_hash(), model.param_hash());
        let mut wrong = model.params.clone();
        wrong.tensors[0] = Mat::zeros(1, 1);
        assert!(Model::from_params(tiny_config(), wrong).is_err());
    }

    #[test]
    fn batch_rejects_bad_input() {
        let cfg = tiny_config();
        let mut b = Batch::new();
        assert!(matches!(b.push(&cfg, &features(4, 2, 0), &[4], 0), Err(ModelError::FeatureDim { .. })));
        assert!(matches!(b.push(&cfg, &features(4, 3, 0), &[99], 0), Err(ModelError::Token { .. })));
        assert!(matches!(b.push(&cfg, &features(4, 3, 0), &[4; 13], 0), Err(ModelError::TooLong { .. })));
        b.push(&cfg, &features(4, 3, 0), &[4, 5], 2).unwrap();
        let model = Model::<f64>::init(cfg, 0).unwrap();
        assert!(matches!(model.loss(&b), Err(ModelError::EmptyMask)));
    }
}
