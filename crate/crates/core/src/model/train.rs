//! Optimisation: learning-rate schedule, Adam, and the training loop with
//! best-dev checkpoint selection.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::tensor::{Mat, Real};
use super::{Batch, Model, ModelError};

/// Linear warmup from 0 to `peak`, then exponential decay reaching
/// `peak * final_fraction` after `decay_steps`, constant afterwards.
pub fn lr_schedule(step: usize, warmup_steps: usize, peak: f64, decay_steps: usize, final_fraction: f64) -> f64 {
    let warmup = warmup_steps.max(1);
    if step < warmup {
        return peak * step as f64 / warmup as f64;
    }
    if decay_steps == 0 {
        return peak * final_fraction;
    }
    let t = (step - warmup).min(decay_steps) as f64 / decay_steps as f64;
    peak * final_fraction.powf(t)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub warmup_steps: usize,
    pub peak: f64,
    pub decay_steps: usize,
    pub final_fraction: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self { warmup_steps: 300, peak: 2e-3, decay_steps: 2700, final_fraction: 0.05 }
    }
}

impl ScheduleConfig {
    pub fn at(&self, step: usize) -> f64 {
        lr_schedule(step, self.warmup_steps, self.peak, self.decay_steps, self.final_fraction)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub clip_norm: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.98, eps: 1e-9, clip_norm: 1.0 }
    }
}

pub struct Adam<T: Real> {
    cfg: AdamConfig,
    m: Vec<Mat<T>>,
    v: Vec<Mat<T>>,
    t: i32,
}

impl<T: Real> Adam<T> {
    pub fn new(cfg: AdamConfig, model: &Model<T>) -> Self {
        let zeros = || model.params.tensors.iter().map(|p| Mat::zeros(p.rows, p.cols)).collect();
        Self { cfg, m: zeros(), v: zeros(), t: 0 }
    }

    /// Applies one update and returns the gradient norm before clipping.
    pub fn step(&mut self, model: &mut Model<T>, grads: &[Mat<T>], lr: f64) -> f64 {
        let norm = grads.iter().flat_map(|g| &g.data).map(|x| x.as_f64() * x.as_f64()).sum::<f64>().sqrt();
        let scale = if self.cfg.clip_norm > 0.0 && norm > self.cfg.clip_norm { self.cfg.clip_norm / norm } else { 1.0 };
        self.t += 1;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        let step = T::of(lr * c2.sqrt() / c1);
        let eps = T::of(self.cfg.eps * c2.sqrt());
        let (b1, b2, scale) = (T::of(b1), T::of(b2), T::of(scale));
        let one = T::one();
        for (((p, g), m), v) in model.params.tensors.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for (((p, &g), m), v) in p.data.iter_mut().zip(&g.data).zip(&mut m.data).zip(&mut v.data) {
                let g = g * scale;
                *m = b1 * *m + (one - b1) * g;
                *v = b2 * *v + (one - b2) * g * g;
                *p -= step * *m / (v.sqrt() + eps);
            }
        }
        norm
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub schedule: ScheduleConfig,
    pub adam: AdamConfig,
    /// Steps between checkpoint evaluations; 0 evaluates only at the end.
    pub eval_every: usize,
    pub seed: u64,
    /// Restricts the loss to target and `[EOS]` positions.
    pub target_only_loss: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 3000,
            batch_size: 32,
            schedule: ScheduleConfig::default(),
            adam: AdamConfig::default(),
            eval_every: 500,
            seed: 0,
            target_only_loss: false,
        }
    }
}

/// Checkpoint-time measurements supplied by the caller.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Probe {
    pub dev_wer: f64,
    pub per_skill_acc: BTreeMap<String, f64>,
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: usize,
    /// Mean training loss since the previous record.
    pub loss: f64,
    pub lr: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dev_wer: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub per_skill_acc: Option<BTreeMap<String, f64>>,
}

pub struct TrainOutcome<T: Real> {
    /// Checkpoint with the lowest dev WER; the latest wins ties.
    pub best: Model<T>,
    pub best_step: usize,
    pub best_dev_wer: f64,
    pub last: Model<T>,
    pub log: Vec<MetricsRecord>,
}

/// Trains `model` for `cfg.steps` updates. `next_batch(step)` supplies the
/// data, `probe(step, model)` evaluates checkpoints and `on_record` receives
/// each metrics record as it is produced.
pub fn train<T: Real>(
    mut model: Model<T>,
    cfg: &TrainConfig,
    mut next_batch: impl FnMut(usize) -> Result<Batch, ModelError>,
    mut probe: impl FnMut(usize, &Model<T>) -> Probe,
    mut on_record: impl FnMut(&MetricsRecord),
) -> Result<TrainOutcome<T>, ModelError> {
    let mut adam = Adam::new(cfg.adam.clone(), &model);
    let mut rng = ChaCha8Rng::seed_from_u64(crate::derive_seed(cfg.seed, "dropout"));
    let mut log = Vec::new();
    let mut best: Option<(Model<T>, usize, f64)> = None;
    let (mut loss_sum, mut loss_n) = (0.0, 0usize);
    for step in 1..=cfg.steps {
        let batch = next_batch(step)?;
        let (loss, grads) = model.loss_and_grad(&batch, (model.config.dropout_rate > 0.0).then_some(&mut rng))?;
        if !loss.is_finite() {
            return Err(ModelError::Diverged { step, loss });
        }
        let lr = cfg.schedule.at(step);
        adam.step(&mut model, &grads, lr);
        if !model.params.all_finite() {
            return Err(ModelError::Diverged { step, loss });
        }
        loss_sum += loss;
        loss_n += 1;
        let checkpoint = step == cfg.steps || (cfg.eval_every > 0 && step % cfg.eval_every == 0);
        if checkpoint {
            let p = probe(step, &model);
            log::info!("step {step} loss {:.4} lr {lr:.2e} dev_wer {:.4}", loss_sum / loss_n as f64, p.dev_wer);
            let record = MetricsRecord {
                step,
                loss: loss_sum / loss_n as f64,
                lr,
                dev_wer: Some(p.dev_wer),
                per_skill_acc: (!p.per_skill_acc.is_empty()).then_some(p.per_skill_acc),
            };
            on_record(&record);
            log.push(record);
            (loss_sum, loss_n) = (0.0, 0);
            if best.as_ref().is_none_or(|b| p.dev_wer <= b.2) {
                best = Some((model.clone(), step, p.dev_wer));
            }
        }
    }
    let (best, best_step, best_dev_wer) = match best {
        Some(b) => b,
        None => (model.clone(), 0, f64::NAN),
    };
    Ok(TrainOutcome { best, best_step, best_dev_wer, last: model, log })
}
