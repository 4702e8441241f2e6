//! Incremental decoding with per-layer key/value caches.
//!
//! The encoder runs once per utterance and the cross-attention keys and
//! values are projected once. Each decoder step then costs one row per layer.

use super::tensor::{attention_segment, layernorm, log_softmax_f64, matmul, silu, write_position, AttnSegment, Mat, Real};
use super::{Batch, Linear, Model, ModelError, Norm};
use crate::synthaudio::FeatureMatrix;

/// Encoder output for one utterance, projected into every decoder layer's
/// cross-attention keys and values.
#[derive(Clone, Debug)]
pub struct EncoderMemory<T: Real> {
    pub len: usize,
    cross: Vec<(Mat<T>, Mat<T>)>,
}

/// Decoder state after consuming a token prefix.
#[derive(Clone, Debug)]
pub struct DecoderState<T: Real> {
    pos: usize,
    keys: Vec<Mat<T>>,
    values: Vec<Mat<T>>,
    log_probs: Vec<f64>,
}

impl<T: Real> DecoderState<T> {
    /// Tokens consumed so far.
    pub fn len(&self) -> usize {
        self.pos
    }

    pub fn is_empty(&self) -> bool {
        self.pos == 0
    }

    /// Next-token log-probabilities; empty before the first step.
    pub fn log_probs(&self) -> &[f64] {
        &self.log_probs
    }
}

fn push_row<T: Real>(m: &mut Mat<T>, row: &[T]) {
    m.data.extend_from_slice(row);
    m.rows += 1;
}

impl<T: Real> Model<T> {
    fn apply(&self, x: &Mat<T>, p: Linear) -> Mat<T> {
        let mut y = matmul(x, &self.params.tensors[p.w]);
        super::tensor::add_row_bias(&mut y, &self.params.tensors[p.b].data);
        y
    }

    fn apply_norm(&self, x: &Mat<T>, p: Norm) -> Mat<T> {
        layernorm(x, &self.params.tensors[p.g].data, &self.params.tensors[p.b].data).0
    }

    pub fn encode(&self, features: &FeatureMatrix) -> Result<EncoderMemory<T>, ModelError> {
        let mut batch = Batch::new();
        batch.push(&self.config, features, &[crate::tokenizer::EOS], 0)?;
        let mut g = super::graph::Graph::new(&self.params);
        let enc = self.encoder_graph(&mut g, &batch);
        let enc = g.value(enc);
        let cross = self
            .layout
            .dec
            .iter()
            .map(|layer| (self.apply(enc, layer.cross.k), self.apply(enc, layer.cross.v)))
            .collect();
        Ok(EncoderMemory { len: enc.rows, cross })
    }

    pub fn start(&self) -> DecoderState<T> {
        let d = self.config.hidden_dim;
        let layers = self.layout.dec.len();
        DecoderState {
            pos: 0,
            keys: vec![Mat::zeros(0, d); layers],
            values: vec![Mat::zeros(0, d); layers],
            log_probs: Vec::new(),
        }
    }

    /// Consumes `token` at the next position.
    pub fn step(&self, memory: &EncoderMemory<T>, state: &mut DecoderState<T>, token: u32) -> Result<(), ModelError> {
        let cfg = &self.config;
        if state.pos >= cfg.max_len {
            return Err(ModelError::TooLong { len: state.pos + 1, max: cfg.max_len });
        }
        if token as usize >= cfg.vocab_size {
            return Err(ModelError::Token { token, vocab: cfg.vocab_size });
        }
        let d = cfg.hidden_dim;
        let mut x = Mat::zeros(1, d);
        write_position(x.row_mut(0), state.pos);
        for (o, &e) in x.data.iter_mut().zip(self.params.tensors[self.layout.embed].row(token as usize)) {
            *o += e;
        }
        let shape = |causal| super::tensor::AttnShape { heads: cfg.attn_heads, causal };
        for (l, layer) in self.layout.dec.iter().enumerate() {
            let a = self.apply_norm(&x, layer.ln1);
            let q = self.apply(&a, layer.self_attn.q);
            push_row(&mut state.keys[l], &self.apply(&a, layer.self_attn.k).data);
            push_row(&mut state.values[l], &self.apply(&a, layer.self_attn.v).data);
            let n = state.keys[l].rows;
            let seg = AttnSegment { q_start: 0, q_len: 1, k_start: 0, k_len: n };
            let (att, _) = attention_segment(&q, &state.keys[l], &state.values[l], seg, shape(false));
            x.add_assign(&self.apply(&Mat::from_vec(1, d, att), layer.self_attn.o));

            let a = self.apply_norm(&x, layer.ln2);
            let q = self.apply(&a, layer.cross.q);
            let (k, v) = &memory.cross[l];
            let seg = AttnSegment { q_start: 0, q_len: 1, k_start: 0, k_len: memory.len };
            let (att, _) = attention_segment(&q, k, v, seg, shape(false));
            x.add_assign(&self.apply(&Mat::from_vec(1, d, att), layer.cross.o));

            let a = self.apply_norm(&x, layer.ln3);
            let mut f = self.apply(&a, layer.ff1);
            f.data.iter_mut().for_each(|v| *v = silu(*v));
            x.add_assign(&self.apply(&f, layer.ff2));
        }
        let h = self.apply_norm(&x, self.layout.dec_norm);
        let logits = self.apply(&h, self.layout.out);
        state.log_probs = log_softmax_f64(&logits.data);
        state.pos += 1;
        Ok(())
    }

    /// Runs `prefix` through a fresh state.
    pub fn prime(&self, memory: &EncoderMemory<T>, prefix: &[u32]) -> Result<DecoderState<T>, ModelError> {
        let mut state = self.start();
        for &t in prefix {
            self.step(memory, &mut state, t)?;
        }
        Ok(state)
    }
}

#[cfg(test)]
mod tests {
    use super::super::tests::tiny_config;
    use super::*;
    use crate::tokenizer::BOS;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    #[test]
    fn incremental_matches_full_forward() {
        let model = Model::<f64>::init(tiny_config(), 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = Normal::new(0.0, 1.0).unwrap();
        let f = FeatureMatrix::new(Mat::from_fn(9, 3, |_, _| n.sample(&mut rng) as f32)).unwrap();
        let prefix = [BOS, 5, 6, 4, 8, 7];
        let full = model.forward(&f, &prefix).unwrap();
        let mem = model.encode(&f).unwrap();
        let mut state = model.start();
        for (i, &t) in prefix.iter().enumerate() {
            model.step(&mem, &mut state, t).unwrap();
            for (lp, p) in state.log_probs().iter().zip(full.row(i)) {
                assert!((lp.exp() - p).abs() < 1e-12, "position {i}");
            }
        }
        assert_eq!(state.len(), prefix.len());
        let mut long = model.prime(&mem, &[BOS; 12]).unwrap();
        assert!(matches!(model.step(&mem, &mut long, BOS), Err(ModelError::TooLong { .. })));
    }
}
