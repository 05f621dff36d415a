//! Top-down feedback adapter producing the smoothed prediction p̄.
//!
//! Stage 1 runs the frozen backbone on the observed grid and keeps its top
//! residual state. A class anchor gates and projects those features, a stack
//! of `L` small MLPs turns them into per-depth signals, and stage 2 runs the
//! backbone again on the blank canvas with the signals added to the value
//! projections.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::container::TensorContainer;
use crate::data::{TokenGrid, TokenId};
use crate::error::{Error, Result};
use crate::generator::{
    self, backward, forward, forward_with_cache, masked_loss, Generator, GeneratorArch, GeneratorParams, TokenizedSet,
};
use crate::mask::{apply_random_mask, corrupt_with_errors, sample_training_u, training_mask_count, CorruptionSpec};
use crate::nn;
use crate::rng::{stream, Stream};
use crate::tensor::{clip_global_norm, AdamW, Ema, Float, ParamSet, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct FeedbackBlock<T> {
    pub w1: Tensor<T>,
    pub b1: Tensor<T>,
    pub w2: Tensor<T>,
    pub b2: Tensor<T>,
}

/// Adapter weights φ. Linear maps are stored `din × dout` and applied to row
/// vectors, so `proj` holds `Pᵀ`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterParams<T> {
    pub class_emb: Tensor<T>,
    pub anchor_w1: Tensor<T>,
    pub anchor_b1: Tensor<T>,
    pub anchor_w2: Tensor<T>,
    pub anchor_b2: Tensor<T>,
    pub proj: Tensor<T>,
    pub feedback: Vec<FeedbackBlock<T>>,
}

impl<T: Float> AdapterParams<T> {
    pub fn zeros(arch: &GeneratorArch) -> Self {
        let d = arch.d_model;
        let z = |s: &[usize]| Tensor::zeros(s);
        Self {
            class_emb: z(&[arch.num_classes, d]),
            anchor_w1: z(&[d, d]),
            anchor_b1: z(&[d]),
            anchor_w2: z(&[d, d]),
            anchor_b2: z(&[d]),
            proj: z(&[d, d]),
            feedback: (0..arch.layers)
                .map(|_| FeedbackBlock { w1: z(&[d, d]), b1: z(&[d]), w2: z(&[d, d]), b2: z(&[d]) })
                .collect(),
        }
    }

    pub fn init(arch: &GeneratorArch, rng: &mut impl Rng) -> Self {
        let mut p = Self::zeros(arch);
        let std = 1.0 / (arch.d_model as f64).sqrt();
        p.class_emb = Tensor::randn(&p.class_emb.shape, 1.0, rng);
        p.anchor_w1 = Tensor::randn(&p.anchor_w1.shape, std, rng);
        p.anchor_w2 = Tensor::randn(&p.anchor_w2.shape, std, rng);
        p.proj = Tensor::randn(&p.proj.shape, std, rng);
        for b in &mut p.feedback {
            b.w1 = Tensor::randn(&b.w1.shape, std, rng);
            b.w2 = Tensor::randn(&b.w2.shape, std, rng);
        }
        p
    }

    pub fn num_classes(&self) -> usize {
        self.class_emb.shape[0]
    }

    pub fn layers(&self) -> usize {
        self.feedback.len()
    }

    fn d(&self) -> usize {
        self.proj.shape[0]
    }

    /// Zeroes every feedback MLP tensor, severing the top-down path.
    pub fn zero_feedback(&mut self) {
        for b in &mut self.feedback {
            b.w1.fill(T::zero());
            b.b1.fill(T::zero());
            b.w2.fill(T::zero());
            b.b2.fill(T::zero());
        }
    }
}

impl<T: Float> ParamSet<T> for AdapterParams<T> {
    fn named(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = vec![
            ("class_emb".to_string(), &self.class_emb),
            ("anchor_w1".to_string(), &self.anchor_w1),
            ("anchor_b1".to_string(), &self.anchor_b1),
            ("anchor_w2".to_string(), &self.anchor_w2),
            ("anchor_b2".to_string(), &self.anchor_b2),
            ("proj".to_string(), &self.proj),
        ];
        for (i, b) in self.feedback.iter().enumerate() {
            out.push((format!("feedback.{i}.w1"), &b.w1));
            out.push((format!("feedback.{i}.b1"), &b.b1));
            out.push((format!("feedback.{i}.w2"), &b.w2));
            out.push((format!("feedback.{i}.b2"), &b.b2));
        }
        out
    }

    fn named_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = vec![
            ("class_emb".to_string(), &mut self.class_emb),
            ("anchor_w1".to_string(), &mut self.anchor_w1),
            ("anchor_b1".to_string(), &mut self.anchor_b1),
            ("anchor_w2".to_string(), &mut self.anchor_w2),
            ("anchor_b2".to_string(), &mut self.anchor_b2),
            ("proj".to_string(), &mut self.proj),
        ];
        for (i, b) in self.feedback.iter_mut().enumerate() {
            out.push((format!("feedback.{i}.w1"), &mut b.w1));
            out.push((format!("feedback.{i}.b1"), &mut b.b1));
            out.push((format!("feedback.{i}.w2"), &mut b.w2));
            out.push((format!("feedback.{i}.b2"), &mut b.b2));
        }
        out
    }
}

struct AnchorCache<T> {
    a1: Vec<T>,
    g1: Vec<T>,
}

fn anchor_impl<T: Float>(p: &AdapterParams<T>, class: usize) -> Result<(Vec<T>, AnchorCache<T>)> {
    if class >= p.num_classes() {
        return Err(Error::Domain(format!("anchor class {class} outside [0, {})", p.num_classes())));
    }
    let e = p.class_emb.row(class);
    let a1 = nn::linear(e, 1, &p.anchor_w1, &p.anchor_b1);
    let g1 = nn::gelu(&a1);
    let xi = nn::linear(&g1, 1, &p.anchor_w2, &p.anchor_b2);
    Ok((xi, AnchorCache { a1, g1 }))
}

/// Class-conditional anchor ξ_c, a 2-layer MLP over a learned class embedding.
pub fn class_anchor<T: Float>(p: &AdapterParams<T>, class: usize) -> Result<Vec<T>> {
    Ok(anchor_impl(p, class)?.0)
}

fn norm<T: Float>(x: &[T]) -> T {
    x.iter().map(|&v| v * v).sum::<T>().sqrt()
}

/// Cosine similarity; 0 when either side has zero norm.
pub fn cosine<T: Float>(a: &[T], b: &[T]) -> T {
    let (na, nb) = (norm(a), norm(b));
    if na == T::zero() || nb == T::zero() {
        return T::zero();
    }
    a.iter().zip(b).map(|(&x, &y)| x * y).sum::<T>() / (na * nb)
}

/// Token and channel selection: `z′_i = cos(z_i, ξ)·(P z_i)` for every row of
/// `features` (`rows × d`).
pub fn feature_select<T: Float>(features: &[T], anchor: &[T], p: &AdapterParams<T>) -> Vec<T> {
    let d = p.d();
    let rows = features.len() / d;
    let mut out = nn::linear(features, rows, &p.proj, &Tensor::zeros(&[d]));
    for r in 0..rows {
        let s = cosine(&features[r * d..(r + 1) * d], anchor);
        out[r * d..(r + 1) * d].iter_mut().for_each(|x| *x *= s);
    }
    out
}

struct StackCache<T> {
    inputs: Vec<Vec<T>>,
    pre: Vec<Vec<T>>,
    act: Vec<Vec<T>>,
}

fn stack_impl<T: Float>(selected: &[T], p: &AdapterParams<T>) -> (Vec<Vec<T>>, StackCache<T>) {
    let d = p.d();
    let rows = selected.len() / d;
    let mut signals = Vec::with_capacity(p.layers());
    let mut cache = StackCache { inputs: Vec::new(), pre: Vec::new(), act: Vec::new() };
    let mut u = selected.to_vec();
    for b in &p.feedback {
        let pre = nn::linear(&u, rows, &b.w1, &b.b1);
        let act = nn::gelu(&pre);
        let next = nn::linear(&act, rows, &b.w2, &b.b2);
        cache.inputs.push(std::mem::replace(&mut u, next.clone()));
        cache.pre.push(pre);
        cache.act.push(act);
        signals.push(next);
    }
    (signals, cache)
}

/// Applies the feedback MLPs in sequence; entry `l − 1` is the depth-`l`
/// signal, routed to backbone block `L − l`.
pub fn feedback_stack<T: Float>(selected: &[T], p: &AdapterParams<T>, generator_layers: usize) -> Result<Vec<Vec<T>>> {
    if p.layers() != generator_layers {
        return Err(Error::Contract(format!(
            "adapter has {} feedback layers, backbone has {generator_layers}",
            p.layers()
        )));
    }
    if selected.len() % p.d() != 0 {
        return Err(Error::Contract("selected features are not a whole number of rows".into()));
    }
    Ok(stack_impl(selected, p).0)
}

/// Mean squared norm of the feedback signals over depths and rows.
pub fn feedback_regularizer<T: Float>(signals: &[Vec<T>], d: usize) -> T {
    let rows: usize = signals.iter().map(|s| s.len() / d).sum();
    if rows == 0 {
        return T::zero();
    }
    signals.iter().flat_map(|s| s.iter()).map(|&x| x * x).sum::<T>() / T::c(rows as f64)
}

/// Stage-2 prediction and the quantities that produced it.
#[derive(Debug, Clone)]
pub struct SmoothedOutput<T> {
    /// `batch·N × K` logits of p̄.
    pub logits_bar: Vec<T>,
    pub feedback_signals: Vec<Vec<T>>,
    pub reg_value: T,
}

fn check_adapter<T: Float>(arch: &GeneratorArch, p: &AdapterParams<T>) -> Result<()> {
    if p.layers() != arch.layers || p.d() != arch.d_model || p.num_classes() != arch.num_classes {
        return Err(Error::Contract("adapter shape does not match the backbone".into()));
    }
    Ok(())
}

struct Stage2Prep<T> {
    anchors: Vec<(Vec<T>, AnchorCache<T>)>,
    signals: Vec<Vec<T>>,
    stack: StackCache<T>,
    reg: T,
}

fn prepare_signals<T: Float>(
    arch: &GeneratorArch,
    adapter: &AdapterParams<T>,
    hidden_top: &[T],
    classes: &[usize],
) -> Result<Stage2Prep<T>> {
    check_adapter(arch, adapter)?;
    let (d, seq) = (arch.d_model, arch.seq());
    if hidden_top.len() != classes.len() * seq * d {
        return Err(Error::Contract("stage-1 features do not match the batch".into()));
    }
    let mut selected = Vec::with_capacity(hidden_top.len());
    let mut anchors = Vec::with_capacity(classes.len());
    for (b, &c) in classes.iter().enumerate() {
        let (xi, cache) = anchor_impl(adapter, c)?;
        selected.extend(feature_select(&hidden_top[b * seq * d..(b + 1) * seq * d], &xi, adapter));
        anchors.push((xi, cache));
    }
    let (signals, stack) = stack_impl(&selected, adapter);
    let reg = feedback_regularizer(&signals, d);
    Ok(Stage2Prep { anchors, signals, stack, reg })
}

fn blank_batch(arch: &GeneratorArch, batch: usize) -> Vec<TokenId> {
    vec![arch.mask_id(); batch * arch.tokens()]
}

/// Stage 2 given stage-1 features already computed (the sampler shares the
/// main prediction's forward pass).
pub fn smoothed_from_hidden<T: Float>(
    gen: &GeneratorParams<T>,
    arch: &GeneratorArch,
    adapter: &AdapterParams<T>,
    hidden_top: &[T],
    classes: &[usize],
) -> Result<SmoothedOutput<T>> {
    let prep = prepare_signals(arch, adapter, hidden_top, classes)?;
    let out = forward(gen, arch, &blank_batch(arch, classes.len()), classes, Some(&prep.signals))?;
    Ok(SmoothedOutput { logits_bar: out.logits, feedback_signals: prep.signals, reg_value: prep.reg })
}

/// Both stages: the backbone without feedback on `stage1_tokens`, then the
/// blank canvas with feedback.
pub fn smoothed_forward<T: Float>(
    gen: &GeneratorParams<T>,
    arch: &GeneratorArch,
    adapter: &AdapterParams<T>,
    stage1_tokens: &[TokenId],
    classes: &[usize],
) -> Result<SmoothedOutput<T>> {
    let stage1 = forward(gen, arch, stage1_tokens, classes, None)?;
    smoothed_from_hidden(gen, arch, adapter, stage1.top_hidden(), classes)
}

/// Masked NLL on p̄ plus `λ·reg_value`.
pub fn aux_loss<T: Float>(
    logits_bar: &[T],
    k: usize,
    x0: &[TokenId],
    unmasked: &[bool],
    reg_value: T,
    lambda: f64,
) -> Result<T> {
    let (nll, _) = masked_loss(logits_bar, k, x0, unmasked)?;
    Ok(if lambda == 0.0 { nll } else { nll + T::c(lambda) * reg_value })
}

/// How the backbone is treated when differentiating the auxiliary loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Backbone {
    /// No gradient is propagated into backbone parameters.
    Frozen,
    /// Backbone gradients are accumulated too (diagnostics only).
    Trainable,
}

#[derive(Debug, Clone)]
pub struct AuxGradients<T> {
    pub loss: T,
    pub adapter: AdapterParams<T>,
    pub backbone: GeneratorParams<T>,
}

/// Auxiliary loss and its gradients for one batch. `stage1_tokens` is the
/// corrupted input, `x0` the clean targets.
#[allow(clippy::too_many_arguments)]
pub fn aux_loss_and_grad<T: Float>(
    gen: &GeneratorParams<T>,
    arch: &GeneratorArch,
    adapter: &AdapterParams<T>,
    stage1_tokens: &[TokenId],
    classes: &[usize],
    x0: &[TokenId],
    unmasked: &[bool],
    lambda: f64,
    backbone: Backbone,
) -> Result<AuxGradients<T>> {
    let d = arch.d_model;
    let stage1 = forward(gen, arch, stage1_tokens, classes, None)?;
    let hidden_top = stage1.top_hidden();
    let prep = prepare_signals(arch, adapter, hidden_top, classes)?;
    let blank = blank_batch(arch, classes.len());
    let (out, cache) = forward_with_cache::<T, rand_chacha::ChaCha8Rng>(gen, arch, &blank, classes, Some(&prep.signals), None)?;
    let (nll, dlogits) = masked_loss(&out.logits, arch.codebook_size, x0, unmasked)?;
    let loss = if lambda == 0.0 { nll } else { nll + T::c(lambda) * prep.reg };

    let mut backbone_grads = gen.zeros_like();
    let bw = backward(
        gen,
        arch,
        &cache,
        &dlogits,
        (backbone == Backbone::Trainable).then_some(&mut backbone_grads),
        true,
    );

    let mut g = adapter.zeros_like();
    let rows = hidden_top.len() / d;
    let reg_scale = T::c(2.0 * lambda / (arch.layers * rows) as f64);
    let direct = |l: usize| -> Vec<T> {
        bw.feedback_grads[l].iter().zip(&prep.signals[l]).map(|(&gs, &u)| gs + reg_scale * u).collect()
    };
    let mut du = direct(arch.layers - 1);
    for l in (0..arch.layers).rev() {
        let blk = &adapter.feedback[l];
        let gb = &mut g.feedback[l];
        let dact = nn::linear_backward(&prep.stack.act[l], rows, &blk.w2, &du, Some((&mut gb.w2, &mut gb.b2)), true);
        let dpre = nn::gelu_backward(&prep.stack.pre[l], &dact);
        let dinput = nn::linear_backward(&prep.stack.inputs[l], rows, &blk.w1, &dpre, Some((&mut gb.w1, &mut gb.b1)), true);
        du = if l > 0 {
            let mut next = direct(l - 1);
            next.iter_mut().zip(&dinput).for_each(|(a, &b)| *a += b);
            next
        } else {
            dinput
        };
    }
    let dselected = du;

    // selection: z′ = s·(zP) with z fixed
    let seq = arch.seq();
    let mut dproj_in = vec![T::zero(); rows * d];
    for (b, &c) in classes.iter().enumerate() {
        let (xi, acache) = &prep.anchors[b];
        let nxi = norm(xi);
        let mut dxi = vec![T::zero(); d];
        for r in b * seq..(b + 1) * seq {
            let z = &hidden_top[r * d..(r + 1) * d];
            let dz = &dselected[r * d..(r + 1) * d];
            let s = cosine(z, xi);
            dproj_in[r * d..(r + 1) * d].iter_mut().zip(dz).for_each(|(a, &b)| *a = s * b);
            let nz = norm(z);
            if nz == T::zero() || nxi == T::zero() {
                continue;
            }
            // ds = dz · (zP), recomputed rather than dividing z′ by s
            let pz = nn::linear(z, 1, &adapter.proj, &Tensor::zeros(&[d]));
            let ds: T = dz.iter().zip(&pz).map(|(&a, &b)| a * b).sum();
            let inv = T::one() / (nz * nxi);
            let s_over = s / (nxi * nxi);
            for j in 0..d {
                dxi[j] += ds * (z[j] * inv - s_over * xi[j]);
            }
        }
        let dg1 = nn::linear_backward(&acache.g1, 1, &adapter.anchor_w2, &dxi, Some((&mut g.anchor_w2, &mut g.anchor_b2)), true);
        let da1 = nn::gelu_backward(&acache.a1, &dg1);
        let de = nn::linear_backward(
            adapter.class_emb.row(c),
            1,
            &adapter.anchor_w1,
            &da1,
            Some((&mut g.anchor_w1, &mut g.anchor_b1)),
            true,
        );
        g.class_emb.row_mut(c).iter_mut().zip(&de).for_each(|(a, &b)| *a += b);
    }
    let mut scratch_b = Tensor::zeros(&[d]);
    nn::linear_backward(hidden_top, rows, &adapter.proj, &dproj_in, Some((&mut g.proj, &mut scratch_b)), false);

    Ok(AuxGradients { loss, adapter: g, backbone: backbone_grads })
}

/// Fine-tuning settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_steps: usize,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub error_rate: f64,
    pub lambda: f64,
    pub ema_decay: f64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 32,
            lr: 1e-3,
            warmup_steps: 50,
            weight_decay: 0.0,
            grad_clip: 1.0,
            error_rate: 0.3,
            lambda: 1e-3,
            ema_decay: 0.9999,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("fine-tuning needs at least one epoch and one sample per batch".into()));
        }
        CorruptionSpec::new(self.error_rate)?;
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(Error::Config(format!("ema_decay {} outside [0, 1)", self.ema_decay)));
        }
        if self.lambda < 0.0 {
            return Err(Error::Config("lambda must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainedAdapter {
    pub live: AdapterParams<f32>,
    pub ema: AdapterParams<f32>,
    /// Mean auxiliary loss of each epoch.
    pub epoch_losses: Vec<f64>,
    /// Auxiliary loss of the initial adapter on the first batch.
    pub initial_loss: f64,
}

/// Per-step record of fine-tuning.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FinetuneLog {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub wall_time: f64,
}

/// Fine-tunes a fresh adapter against the frozen `gen`. The backbone digest is
/// verified before and after.
pub fn finetune(
    gen: &Generator,
    data: &TokenizedSet,
    cfg: &FinetuneConfig,
    seed: u64,
    mut on_step: impl FnMut(&FinetuneLog) -> Result<()>,
) -> Result<TrainedAdapter> {
    cfg.validate()?;
    data.check(&gen.arch)?;
    let arch = &gen.arch;
    let before = gen.params.digest();
    let spec = CorruptionSpec::new(cfg.error_rate)?;

    let mut live = AdapterParams::<f32>::init(arch, &mut stream(seed, Stream::Init));
    let mut ema = Ema::new(live.clone(), cfg.ema_decay);
    let mut opt = AdamW::new(&live, cfg.weight_decay);
    let mut batch_rng = stream(seed, Stream::Batching);
    let mut mask_rng = stream(seed, Stream::Masking);
    let mut corrupt_rng = stream(seed, Stream::Corruption);

    let steps_per_epoch = data.len().div_ceil(cfg.batch_size);
    let total = cfg.epochs * steps_per_epoch;
    let schedule = generator::TrainConfig {
        steps: total,
        lr: cfg.lr,
        warmup_steps: cfg.warmup_steps.min(total.saturating_sub(1)),
        ..Default::default()
    };
    let start = Instant::now();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut initial_loss = f64::NAN;
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut batch_rng);
        let mut sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let (mut clean, mut corrupted, mut unmasked, mut classes) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
            for &i in chunk {
                let x0: &TokenGrid = &data.grids[i];
                let n = training_mask_count(sample_training_u(&mut mask_rng), x0.len())?;
                let (xt, m) = apply_random_mask(x0, n, &mut mask_rng)?;
                let zt = corrupt_with_errors(&xt, &m, spec, &mut corrupt_rng)?;
                clean.extend_from_slice(&x0.tokens);
                corrupted.extend_from_slice(&zt.tokens);
                unmasked.extend_from_slice(&m.unmasked);
                classes.push(data.labels[i]);
            }
            let mut grads = aux_loss_and_grad(
                &gen.params,
                arch,
                &live,
                &corrupted,
                &classes,
                &clean,
                &unmasked,
                cfg.lambda,
                Backbone::Frozen,
            )?;
            let loss = grads.loss as f64;
            if !loss.is_finite() {
                return Err(Error::Divergence(format!("non-finite auxiliary loss at step {step}")));
            }
            if step == 0 {
                initial_loss = loss;
            }
            clip_global_norm(&mut grads.adapter, cfg.grad_clip);
            let lr = schedule.lr_at(step);
            opt.step(&mut live, &grads.adapter, lr);
            ema.update(&live);
            sum += loss;
            on_step(&FinetuneLog { epoch, step, loss, lr, wall_time: start.elapsed().as_secs_f64() })?;
            step += 1;
        }
        epoch_losses.push(sum / steps_per_epoch as f64);
    }
    let after = gen.params.digest();
    if before != after {
        return Err(Error::Contract(format!("backbone digest changed during fine-tuning: {before} → {after}")));
    }
    Ok(TrainedAdapter { live, ema: ema.shadow, epoch_losses, initial_loss })
}

/// Adapter checkpoint bound to the digest of the generator checkpoint it was
/// fine-tuned against.
pub fn to_container(live: &AdapterParams<f32>, ema: &AdapterParams<f32>, generator_digest: &str) -> TensorContainer {
    let mut c = TensorContainer::new();
    c.insert_params("live", live);
    c.insert_params("ema", ema);
    c.meta.insert("kind".into(), "adapter".into());
    c.meta.insert("generator_digest".into(), generator_digest.to_string());
    c
}

/// Loads the EMA adapter weights, refusing a checkpoint bound to another backbone.
pub fn from_container(c: &TensorContainer, gen: &Generator) -> Result<AdapterParams<f32>> {
    if c.meta.get("kind").map(String::as_str) != Some("adapter") {
        return Err(Error::Format("not an adapter checkpoint".into()));
    }
    let expected = c.meta_str("generator_digest")?;
    if expected != gen.digest {
        return Err(Error::DigestMismatch { expected: expected.to_string(), found: gen.digest.clone() });
    }
    let mut p = AdapterParams::zeros(&gen.arch);
    p.assign_from(&c.params_with_prefix("ema"))?;
    Ok(p)
}
