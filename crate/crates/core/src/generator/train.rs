//! Masked-token training loop.

use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{backward, forward_with_cache, masked_loss, DropoutCtx, GeneratorArch, GeneratorParams};
use crate::data::{TokenGrid, TokenId};
use crate::error::{Error, Result};
use crate::mask::{apply_random_mask, sample_training_u, training_mask_count};
use crate::rng::{stream, Stream};
use crate::tensor::{clip_global_norm, AdamW, Ema, ParamSet};

/// Optimization settings for [`train_generator`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_steps: usize,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub dropout: f64,
    pub cond_dropout_prob: f64,
    pub ema_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 50_000,
            batch_size: 64,
            lr: 1e-3,
            warmup_steps: 500,
            weight_decay: 0.01,
            grad_clip: 1.0,
            dropout: 0.1,
            cond_dropout_prob: 0.0,
            ema_decay: 0.9999,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::Config("training needs at least one step and one sample per batch".into()));
        }
        if !(0.0..1.0).contains(&self.cond_dropout_prob) {
            return Err(Error::Config(format!("cond_dropout_prob {} outside [0, 1)", self.cond_dropout_prob)));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(Error::Config(format!("ema_decay {} outside [0, 1)", self.ema_decay)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        Ok(())
    }

    /// Linear warmup then cosine decay to zero; `step` counts from 0.
    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = (self.steps - self.warmup_steps.min(self.steps)).max(1) as f64;
        let progress = ((step - self.warmup_steps) as f64 / span).min(1.0);
        0.5 * self.lr * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

/// Tokenized, labeled training data.
#[derive(Debug, Clone)]
pub struct TokenizedSet {
    pub grids: Vec<TokenGrid>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl TokenizedSet {
    pub fn len(&self) -> usize {
        self.grids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grids.is_empty()
    }

    pub(crate) fn check(&self, arch: &GeneratorArch) -> Result<()> {
        if self.grids.is_empty() || self.grids.len() != self.labels.len() {
            return Err(Error::Config("tokenized set is empty or labels are misaligned".into()));
        }
        for g in &self.grids {
            if g.rows != arch.grid_rows || g.cols != arch.grid_cols || g.codebook_size != arch.codebook_size {
                return Err(Error::Config("token grid does not match the generator architecture".into()));
            }
            if g.masked_count() > 0 {
                return Err(Error::Contract("training grids must be fully observed".into()));
            }
        }
        if self.labels.iter().any(|&c| c >= arch.num_classes) {
            return Err(Error::Domain("label outside the generator's class range".into()));
        }
        Ok(())
    }
}

/// One record of the training log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub wall_time: f64,
    /// Gradient norm reaching the null-class embedding row.
    pub null_class_grad_norm: f64,
}

#[derive(Debug, Clone)]
pub struct TrainedGenerator {
    pub live: GeneratorParams<f32>,
    pub ema: GeneratorParams<f32>,
}

/// A training batch drawn with the given streams.
pub(crate) struct MaskedBatch {
    pub clean: Vec<TokenId>,
    pub inputs: Vec<TokenId>,
    pub unmasked: Vec<bool>,
    pub classes: Vec<usize>,
}

pub(crate) fn draw_masked_batch(
    data: &TokenizedSet,
    batch_size: usize,
    batch_rng: &mut impl Rng,
    mask_rng: &mut impl Rng,
) -> Result<MaskedBatch> {
    let mut out = MaskedBatch { clean: Vec::new(), inputs: Vec::new(), unmasked: Vec::new(), classes: Vec::new() };
    for _ in 0..batch_size {
        let idx = batch_rng.random_range(0..data.len());
        let x0 = &data.grids[idx];
        let n = training_mask_count(sample_training_u(mask_rng), x0.len())?;
        let (xt, m) = apply_random_mask(x0, n, mask_rng)?;
        out.clean.extend_from_slice(&x0.tokens);
        out.inputs.extend_from_slice(&xt.tokens);
        out.unmasked.extend_from_slice(&m.unmasked);
        out.classes.push(data.labels[idx]);
    }
    Ok(out)
}

/// Trains from a fresh initialization. `on_step` receives every step's log.
pub fn train_generator(
    data: &TokenizedSet,
    arch: &GeneratorArch,
    cfg: &TrainConfig,
    seed: u64,
    mut on_step: impl FnMut(&StepLog) -> Result<()>,
) -> Result<TrainedGenerator> {
    arch.validate()?;
    cfg.validate()?;
    data.check(arch)?;
    let mut live = GeneratorParams::<f32>::init(arch, &mut stream(seed, Stream::Init));
    let mut ema = Ema::new(live.clone(), cfg.ema_decay);
    let mut opt = AdamW::new(&live, cfg.weight_decay);
    let mut grads = live.zeros_like();

    let mut batch_rng = stream(seed, Stream::Batching);
    let mut mask_rng = stream(seed, Stream::Masking);
    let mut class_rng = stream(seed, Stream::ClassDropout);
    let mut drop_rng = stream(seed, Stream::Dropout);
    let start = Instant::now();

    for step in 0..cfg.steps {
        let mut batch = draw_masked_batch(data, cfg.batch_size, &mut batch_rng, &mut mask_rng)?;
        if cfg.cond_dropout_prob > 0.0 {
            for c in &mut batch.classes {
                if class_rng.random::<f64>() < cfg.cond_dropout_prob {
                    *c = arch.null_class();
                }
            }
        }
        let dropout = Some(DropoutCtx { rate: cfg.dropout, rng: &mut drop_rng });
        let (out, cache) = forward_with_cache(&live, arch, &batch.inputs, &batch.classes, None, dropout)?;
        let (loss, dlogits) = masked_loss(&out.logits, arch.codebook_size, &batch.clean, &batch.unmasked)?;
        if !loss.is_finite() {
            return Err(Error::Divergence(format!("non-finite loss {loss} at step {step}")));
        }
        for t in grads.tensors_mut() {
            t.fill(0.0);
        }
        backward(&live, arch, &cache, &dlogits, Some(&mut grads), false);
        let null_class_grad_norm =
            grads.class_emb.row(arch.null_class()).iter().map(|&g| (g as f64).powi(2)).sum::<f64>().sqrt();
        let norm = clip_global_norm(&mut grads, cfg.grad_clip);
        if !norm.is_finite() {
            return Err(Error::Divergence(format!("non-finite gradient norm at step {step}")));
        }
        let lr = cfg.lr_at(step);
        opt.step(&mut live, &grads, lr);
        ema.update(&live);
        on_step(&StepLog {
            step,
            loss: loss as f64,
            lr,
            wall_time: start.elapsed().as_secs_f64(),
            null_class_grad_norm,
        })?;
    }
    if !live.all_finite() {
        return Err(Error::Divergence("parameters became non-finite".into()));
    }
    Ok(TrainedGenerator { live, ema: ema.shadow })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn arch() -> GeneratorArch {
        GeneratorArch { codebook_size: 8, grid_rows: 2, grid_cols: 4, num_classes: 2, layers: 1, d_model: 16, heads: 2, mlp_ratio: 2 }
    }

    fn tiny_set() -> TokenizedSet {
        let g = TokenGrid::new(vec![1, 2, 3, 4, 5, 6, 7, 0], 2, 4, 8).unwrap();
        let h = TokenGrid::new(vec![7, 7, 6, 6, 5, 5, 4, 4], 2, 4, 8).unwrap();
        TokenizedSet { grids: vec![g, h], labels: vec![0, 1], num_classes: 2 }
    }

    fn cfg(steps: usize) -> TrainConfig {
        TrainConfig { steps, batch_size: 4, lr: 3e-3, warmup_steps: 10, dropout: 0.0, ema_decay: 0.0, ..Default::default() }
    }

    #[test]
    fn lr_schedule_warms_up_then_decays() {
        let c = TrainConfig { steps: 100, warmup_steps: 10, lr: 1.0, ..Default::default() };
        assert!((c.lr_at(0) - 0.1).abs() < 1e-12);
        assert!((c.lr_at(9) - 1.0).abs() < 1e-12);
        assert!((c.lr_at(10) - 1.0).abs() < 1e-12);
        assert!(c.lr_at(55) < c.lr_at(30));
        assert!(c.lr_at(99) < 1e-2);
    }

    #[test]
    fn zero_ema_decay_tracks_live_weights() {
        let t = train_generator(&tiny_set(), &arch(), &cfg(5), 0, |_| Ok(())).unwrap();
        assert_eq!(t.live, t.ema);
    }

    #[test]
    fn null_class_untouched_without_cond_dropout() {
        let mut max = 0f64;
        train_generator(&tiny_set(), &arch(), &cfg(30), 1, |log| {
            max = max.max(log.null_class_grad_norm);
            Ok(())
        })
        .unwrap();
        assert_eq!(max, 0.0);
        let mut seen = 0f64;
        let c = TrainConfig { cond_dropout_prob: 0.5, ..cfg(30) };
        train_generator(&tiny_set(), &arch(), &c, 1, |log| {
            seen = seen.max(log.null_class_grad_norm);
            Ok(())
        })
        .unwrap();
        assert!(seen > 0.0);
    }

    #[test]
    fn same_seed_same_weights() {
        let a = train_generator(&tiny_set(), &arch(), &cfg(8), 3, |_| Ok(())).unwrap();
        let b = train_generator(&tiny_set(), &arch(), &cfg(8), 3, |_| Ok(())).unwrap();
        assert_eq!(a.live.digest(), b.live.digest());
    }

    #[test]
    fn rejects_bad_config() {
        let bad = TrainConfig { cond_dropout_prob: 1.0, ..cfg(1) };
        assert!(matches!(train_generator(&tiny_set(), &arch(), &bad, 0, |_| Ok(())), Err(Error::Config(_))));
    }
}
