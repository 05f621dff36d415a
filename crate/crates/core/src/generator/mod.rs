//! Bidirectional masked-token transformer.
//!
//! Sequence layout per sample: `[class token; N content tokens]`. Inputs use a
//! vocabulary of `K + 1` (the `K` codewords plus the mask id); the output head
//! spans only the `K` real codewords. Blocks are pre-norm.
//!
//! Feedback signals for the top-down adapter are indexed by depth `l = 1..=L`
//! and the signal at depth `l` is added to the value projection of block
//! `L − l` (blocks counted from 0).

mod train;

pub use train::{train_generator, StepLog, TokenizedSet, TrainConfig, TrainedGenerator};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::container::TensorContainer;
use crate::data::TokenId;
use crate::error::{Error, Result};
use crate::nn::{self, AttnShape, LayerNormCache};
use crate::tensor::{Float, ParamSet, Tensor};

/// Shape of the backbone.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorArch {
    pub codebook_size: usize,
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub num_classes: usize,
    pub layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
}

impl GeneratorArch {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.d_model == 0 || self.heads == 0 || self.mlp_ratio == 0 {
            return Err(Error::Config("generator dimensions must be positive".into()));
        }
        if self.d_model % self.heads != 0 {
            return Err(Error::Config(format!("d_model {} not divisible by {} heads", self.d_model, self.heads)));
        }
        if self.codebook_size < 2 || self.num_classes == 0 || self.tokens() == 0 {
            return Err(Error::Config("generator needs K ≥ 2, C ≥ 1 and a non-empty grid".into()));
        }
        Ok(())
    }

    /// Content positions `N`.
    pub fn tokens(&self) -> usize {
        self.grid_rows * self.grid_cols
    }

    /// Sequence length including the class token.
    pub fn seq(&self) -> usize {
        self.tokens() + 1
    }

    pub fn mask_id(&self) -> TokenId {
        self.codebook_size as TokenId
    }

    /// Class id of the unconditional (null) row.
    pub fn null_class(&self) -> usize {
        self.num_classes
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    fn attn_shape(&self, batch: usize) -> AttnShape {
        AttnShape { batch, seq: self.seq(), heads: self.heads, head_dim: self.head_dim() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams<T> {
    pub ln1_g: Tensor<T>,
    pub ln1_b: Tensor<T>,
    pub wq: Tensor<T>,
    pub bq: Tensor<T>,
    pub wk: Tensor<T>,
    pub bk: Tensor<T>,
    pub wv: Tensor<T>,
    pub bv: Tensor<T>,
    pub wo: Tensor<T>,
    pub bo: Tensor<T>,
    pub ln2_g: Tensor<T>,
    pub ln2_b: Tensor<T>,
    pub w1: Tensor<T>,
    pub b1: Tensor<T>,
    pub w2: Tensor<T>,
    pub b2: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorParams<T> {
    pub tok_emb: Tensor<T>,
    pub pos_emb: Tensor<T>,
    pub class_emb: Tensor<T>,
    pub blocks: Vec<BlockParams<T>>,
    pub lnf_g: Tensor<T>,
    pub lnf_b: Tensor<T>,
    pub head_w: Tensor<T>,
    pub head_b: Tensor<T>,
}

impl<T: Float> GeneratorParams<T> {
    pub fn zeros(arch: &GeneratorArch) -> Self {
        let d = arch.d_model;
        let h = d * arch.mlp_ratio;
        let z = |s: &[usize]| Tensor::zeros(s);
        let block = || BlockParams {
            ln1_g: Tensor::filled(&[d], T::one()),
            ln1_b: z(&[d]),
            wq: z(&[d, d]),
            bq: z(&[d]),
            wk: z(&[d, d]),
            bk: z(&[d]),
            wv: z(&[d, d]),
            bv: z(&[d]),
            wo: z(&[d, d]),
            bo: z(&[d]),
            ln2_g: Tensor::filled(&[d], T::one()),
            ln2_b: z(&[d]),
            w1: z(&[d, h]),
            b1: z(&[h]),
            w2: z(&[h, d]),
            b2: z(&[d]),
        };
        Self {
            tok_emb: z(&[arch.codebook_size + 1, d]),
            pos_emb: z(&[arch.seq(), d]),
            class_emb: z(&[arch.num_classes + 1, d]),
            blocks: (0..arch.layers).map(|_| block()).collect(),
            lnf_g: Tensor::filled(&[d], T::one()),
            lnf_b: z(&[d]),
            head_w: z(&[d, arch.codebook_size]),
            head_b: z(&[arch.codebook_size]),
        }
    }

    /// Normal(0, 0.02) weights, residual output projections scaled by `1/√(2L)`.
    pub fn init(arch: &GeneratorArch, rng: &mut impl Rng) -> Self {
        let mut p = Self::zeros(arch);
        let std = 0.02;
        let resid = std / (2.0 * arch.layers as f64).sqrt();
        p.tok_emb = Tensor::randn(&p.tok_emb.shape, std, rng);
        p.pos_emb = Tensor::randn(&p.pos_emb.shape, std, rng);
        p.class_emb = Tensor::randn(&p.class_emb.shape, std, rng);
        for b in &mut p.blocks {
            b.wq = Tensor::randn(&b.wq.shape, std, rng);
            b.wk = Tensor::randn(&b.wk.shape, std, rng);
            b.wv = Tensor::randn(&b.wv.shape, std, rng);
            b.wo = Tensor::randn(&b.wo.shape, resid, rng);
            b.w1 = Tensor::randn(&b.w1.shape, std, rng);
            b.w2 = Tensor::randn(&b.w2.shape, resid, rng);
        }
        p.head_w = Tensor::randn(&p.head_w.shape, std, rng);
        p
    }

    pub fn cast<U: Float>(&self, arch: &GeneratorArch) -> GeneratorParams<U> {
        let mut out = GeneratorParams::<U>::zeros(arch);
        out.assign_from(&self.to_named_map()).expect("same architecture");
        out
    }
}

macro_rules! block_fields {
    (ref $b:ident, $i:expr, $out:ident, $($f:ident),*) => {
        $( $out.push((format!("blocks.{}.{}", $i, stringify!($f)), &$b.$f)); )*
    };
    (mut $b:ident, $i:expr, $out:ident, $($f:ident),*) => {
        $( $out.push((format!("blocks.{}.{}", $i, stringify!($f)), &mut $b.$f)); )*
    };
}

impl<T: Float> ParamSet<T> for GeneratorParams<T> {
    fn named(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = vec![
            ("tok_emb".to_string(), &self.tok_emb),
            ("pos_emb".to_string(), &self.pos_emb),
            ("class_emb".to_string(), &self.class_emb),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            block_fields!(ref b, i, out, ln1_g, ln1_b, wq, bq, wk, bk, wv, bv, wo, bo, ln2_g, ln2_b, w1, b1, w2, b2);
        }
        out.push(("lnf_g".into(), &self.lnf_g));
        out.push(("lnf_b".into(), &self.lnf_b));
        out.push(("head_w".into(), &self.head_w));
        out.push(("head_b".into(), &self.head_b));
        out
    }

    fn named_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = vec![
            ("tok_emb".to_string(), &mut self.tok_emb),
            ("pos_emb".to_string(), &mut self.pos_emb),
            ("class_emb".to_string(), &mut self.class_emb),
        ];
        for (i, b) in self.blocks.iter_mut().enumerate() {
            block_fields!(mut b, i, out, ln1_g, ln1_b, wq, bq, wk, bk, wv, bv, wo, bo, ln2_g, ln2_b, w1, b1, w2, b2);
        }
        out.push(("lnf_g".into(), &mut self.lnf_g));
        out.push(("lnf_b".into(), &mut self.lnf_b));
        out.push(("head_w".into(), &mut self.head_w));
        out.push(("head_b".into(), &mut self.head_b));
        out
    }
}

/// Generator block receiving the feedback signal of depth `depth` (1-based).
pub fn feedback_target_block(depth: usize, layers: usize) -> usize {
    layers - depth
}

/// Result of a forward pass over a batch.
#[derive(Debug, Clone)]
pub struct ForwardOutput<T> {
    pub batch: usize,
    /// `batch · N × K` logits over real codewords.
    pub logits: Vec<T>,
    /// `L + 1` residual-stream states, each `batch · (N+1) × d`; entry 0 is the
    /// embedding, entry `l` the output of block `l − 1`.
    pub hidden: Vec<Vec<T>>,
}

impl<T: Float> ForwardOutput<T> {
    /// Logits of sample `b`, `N × K`.
    pub fn sample_logits(&self, b: usize, arch: &GeneratorArch) -> &[T] {
        let n = arch.tokens() * arch.codebook_size;
        &self.logits[b * n..(b + 1) * n]
    }

    pub fn top_hidden(&self) -> &[T] {
        self.hidden.last().expect("at least the embedding state")
    }
}

#[derive(Debug, Clone)]
struct BlockCache<T> {
    ln1: LayerNormCache<T>,
    a: Vec<T>,
    q: Vec<T>,
    k: Vec<T>,
    v: Vec<T>,
    probs: Vec<T>,
    att: Vec<T>,
    drop_attn: Option<Vec<T>>,
    ln2: LayerNormCache<T>,
    m: Vec<T>,
    f1: Vec<T>,
    g: Vec<T>,
    drop_mlp: Option<Vec<T>>,
}

/// Activations retained for [`backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    tokens: Vec<TokenId>,
    classes: Vec<usize>,
    blocks: Vec<BlockCache<T>>,
    lnf: LayerNormCache<T>,
    content: Vec<T>,
}

impl<T: Float> ForwardCache<T> {
    /// Value matrix (after feedback injection) of block `block`.
    pub fn value_matrix(&self, block: usize) -> &[T] {
        &self.blocks[block].v
    }
}

/// Gradients produced by [`backward`].
#[derive(Debug, Clone)]
pub struct BackwardOutput<T> {
    /// Gradient with respect to each feedback signal, indexed by depth − 1.
    pub feedback_grads: Vec<Vec<T>>,
}

fn check_inputs(arch: &GeneratorArch, tokens: &[TokenId], classes: &[usize]) -> Result<usize> {
    let batch = classes.len();
    if tokens.len() != batch * arch.tokens() {
        return Err(Error::Contract(format!(
            "{} tokens for a batch of {batch} grids of {}",
            tokens.len(),
            arch.tokens()
        )));
    }
    if let Some(t) = tokens.iter().find(|&&t| t > arch.mask_id()) {
        return Err(Error::Contract(format!("token {t} outside the input vocabulary")));
    }
    if let Some(c) = classes.iter().find(|&&c| c > arch.null_class()) {
        return Err(Error::Domain(format!("class {c} outside [0, {}]", arch.null_class())));
    }
    Ok(batch)
}

fn check_feedback<T>(arch: &GeneratorArch, batch: usize, feedback: Option<&[Vec<T>]>) -> Result<()> {
    if let Some(fb) = feedback {
        if fb.len() != arch.layers {
            return Err(Error::Contract(format!("{} feedback signals for {} layers", fb.len(), arch.layers)));
        }
        let want = batch * arch.seq() * arch.d_model;
        if let Some((i, s)) = fb.iter().enumerate().find(|(_, s)| s.len() != want) {
            return Err(Error::Contract(format!(
                "feedback signal at depth {} has {} values, expected {want}",
                i + 1,
                s.len()
            )));
        }
    }
    Ok(())
}

fn embed<T: Float>(p: &GeneratorParams<T>, arch: &GeneratorArch, tokens: &[TokenId], classes: &[usize]) -> Vec<T> {
    let (d, seq, n) = (arch.d_model, arch.seq(), arch.tokens());
    let mut h = vec![T::zero(); classes.len() * seq * d];
    for (b, &c) in classes.iter().enumerate() {
        for s in 0..seq {
            let src = if s == 0 { p.class_emb.row(c) } else { p.tok_emb.row(tokens[b * n + s - 1] as usize) };
            let pos = p.pos_emb.row(s);
            let dst = &mut h[(b * seq + s) * d..(b * seq + s + 1) * d];
            for j in 0..d {
                dst[j] = src[j] + pos[j];
            }
        }
    }
    h
}

/// Dropout configuration for a training-mode forward pass.
pub struct DropoutCtx<'a, R> {
    pub rate: f64,
    pub rng: &'a mut R,
}

fn dropout_mask<T: Float, R: Rng>(len: usize, ctx: &mut Option<DropoutCtx<'_, R>>) -> Option<Vec<T>> {
    let ctx = ctx.as_mut()?;
    if ctx.rate <= 0.0 {
        return None;
    }
    let keep = T::c(1.0 / (1.0 - ctx.rate));
    Some((0..len).map(|_| if ctx.rng.random::<f64>() < ctx.rate { T::zero() } else { keep }).collect())
}

fn forward_impl<T: Float, R: Rng>(
    p: &GeneratorParams<T>,
    arch: &GeneratorArch,
    tokens: &[TokenId],
    classes: &[usize],
    feedback: Option<&[Vec<T>]>,
    mut dropout: Option<DropoutCtx<'_, R>>,
    keep_cache: bool,
) -> Result<(ForwardOutput<T>, Option<ForwardCache<T>>)> {
    let batch = check_inputs(arch, tokens, classes)?;
    check_feedback(arch, batch, feedback)?;
    let (d, seq, n, k) = (arch.d_model, arch.seq(), arch.tokens(), arch.codebook_size);
    let rows = batch * seq;
    let shape = arch.attn_shape(batch);

    let mut h = embed(p, arch, tokens, classes);
    let mut hidden = Vec::with_capacity(arch.layers + 1);
    let mut caches = Vec::new();
    for (l, blk) in p.blocks.iter().enumerate() {
        hidden.push(h.clone());
        let (a, ln1) = nn::layer_norm(&h, d, &blk.ln1_g, &blk.ln1_b);
        let q = nn::linear(&a, rows, &blk.wq, &blk.bq);
        let kk = nn::linear(&a, rows, &blk.wk, &blk.bk);
        let mut v = nn::linear(&a, rows, &blk.wv, &blk.bv);
        if let Some(fb) = feedback {
            let depth = arch.layers - l;
            for (x, &f) in v.iter_mut().zip(&fb[depth - 1]) {
                *x += f;
            }
        }
        let (att, probs) = nn::attention(&q, &kk, &v, shape);
        let mut o = nn::linear(&att, rows, &blk.wo, &blk.bo);
        let drop_attn = dropout_mask::<T, R>(o.len(), &mut dropout);
        if let Some(mask) = &drop_attn {
            o.iter_mut().zip(mask).for_each(|(x, &m)| *x *= m);
        }
        h.iter_mut().zip(&o).for_each(|(x, &y)| *x += y);

        let (m, ln2) = nn::layer_norm(&h, d, &blk.ln2_g, &blk.ln2_b);
        let f1 = nn::linear(&m, rows, &blk.w1, &blk.b1);
        let g = nn::gelu(&f1);
        let mut f2 = nn::linear(&g, rows, &blk.w2, &blk.b2);
        let drop_mlp = dropout_mask::<T, R>(f2.len(), &mut dropout);
        if let Some(mask) = &drop_mlp {
            f2.iter_mut().zip(mask).for_each(|(x, &m)| *x *= m);
        }
        h.iter_mut().zip(&f2).for_each(|(x, &y)| *x += y);

        if keep_cache {
            caches.push(BlockCache { ln1, a, q, k: kk, v, probs, att, drop_attn, ln2, m, f1, g, drop_mlp });
        }
    }
    hidden.push(h.clone());

    let (y, lnf) = nn::layer_norm(&h, d, &p.lnf_g, &p.lnf_b);
    let mut content = Vec::with_capacity(batch * n * d);
    for b in 0..batch {
        content.extend_from_slice(&y[(b * seq + 1) * d..(b + 1) * seq * d]);
    }
    let logits = nn::linear(&content, batch * n, &p.head_w, &p.head_b);
    debug_assert_eq!(logits.len(), batch * n * k);

    let cache = keep_cache.then(|| ForwardCache {
        tokens: tokens.to_vec(),
        classes: classes.to_vec(),
        blocks: caches,
        lnf,
        content,
    });
    Ok((ForwardOutput { batch, logits, hidden }, cache))
}

/// Inference forward pass (dropout off). `feedback`, when given, holds one
/// `batch·(N+1) × d` signal per depth.
pub fn forward<T: Float>(
    p: &GeneratorParams<T>,
    arch: &GeneratorArch,
    tokens: &[TokenId],
    classes: &[usize],
    feedback: Option<&[Vec<T>]>,
) -> Result<ForwardOutput<T>> {
    Ok(forward_impl::<T, rand_chacha::ChaCha8Rng>(p, arch, tokens, classes, feedback, None, false)?.0)
}

/// Forward pass that keeps activations for [`backward`].
pub fn forward_with_cache<T: Float, R: Rng>(
    p: &GeneratorParams<T>,
    arch: &GeneratorArch,
    tokens: &[TokenId],
    classes: &[usize],
    feedback: Option<&[Vec<T>]>,
    dropout: Option<DropoutCtx<'_, R>>,
) -> Result<(ForwardOutput<T>, ForwardCache<T>)> {
    let (out, cache) = forward_impl(p, arch, tokens, classes, feedback, dropout, true)?;
    Ok((out, cache.expect("cache requested")))
}

/// Backpropagates `dlogits` (`batch·N × K`). Parameter gradients are
/// accumulated into `grads` when given; with `None` the backbone is treated as
/// frozen and only feedback gradients are produced.
pub fn backward<T: Float>(
    p: &GeneratorParams<T>,
    arch: &GeneratorArch,
    cache: &ForwardCache<T>,
    dlogits: &[T],
    mut grads: Option<&mut GeneratorParams<T>>,
    want_feedback_grads: bool,
) -> BackwardOutput<T> {
    let (d, seq, n) = (arch.d_model, arch.seq(), arch.tokens());
    let batch = cache.classes.len();
    let rows = batch * seq;
    let shape = arch.attn_shape(batch);

    let dcontent = nn::linear_backward(
        &cache.content,
        batch * n,
        &p.head_w,
        dlogits,
        grads.as_deref_mut().map(|g| (&mut g.head_w, &mut g.head_b)),
        true,
    );
    let mut dy = vec![T::zero(); rows * d];
    for b in 0..batch {
        dy[(b * seq + 1) * d..(b + 1) * seq * d].copy_from_slice(&dcontent[b * n * d..(b + 1) * n * d]);
    }
    let mut dh = nn::layer_norm_backward(&dy, d, &p.lnf_g, &cache.lnf, grads.as_deref_mut().map(|g| (&mut g.lnf_g, &mut g.lnf_b)));

    let mut feedback_grads = vec![Vec::new(); arch.layers];
    for l in (0..arch.layers).rev() {
        let blk = &p.blocks[l];
        let c = &cache.blocks[l];
        let mut gb = grads.as_deref_mut().map(|g| &mut g.blocks[l]);

        let mut df2 = dh.clone();
        if let Some(mask) = &c.drop_mlp {
            df2.iter_mut().zip(mask).for_each(|(x, &m)| *x *= m);
        }
        let dg = nn::linear_backward(&c.g, rows, &blk.w2, &df2, gb.as_deref_mut().map(|g| (&mut g.w2, &mut g.b2)), true);
        let df1 = nn::gelu_backward(&c.f1, &dg);
        let dm = nn::linear_backward(&c.m, rows, &blk.w1, &df1, gb.as_deref_mut().map(|g| (&mut g.w1, &mut g.b1)), true);
        let dln2 = nn::layer_norm_backward(&dm, d, &blk.ln2_g, &c.ln2, gb.as_deref_mut().map(|g| (&mut g.ln2_g, &mut g.ln2_b)));
        dh.iter_mut().zip(&dln2).for_each(|(x, &y)| *x += y);

        let mut dout = dh.clone();
        if let Some(mask) = &c.drop_attn {
            dout.iter_mut().zip(mask).for_each(|(x, &m)| *x *= m);
        }
        let datt = nn::linear_backward(&c.att, rows, &blk.wo, &dout, gb.as_deref_mut().map(|g| (&mut g.wo, &mut g.bo)), true);
        let (dq, dk, dv) = nn::attention_backward(&datt, &c.q, &c.k, &c.v, &c.probs, shape);

        let depth = arch.layers - l;
        let needs_lower = gb.is_some() || (want_feedback_grads && l > 0);
        if want_feedback_grads {
            feedback_grads[depth - 1] = dv.clone();
        }
        if !needs_lower {
            break;
        }
        let mut da = nn::linear_backward(&c.a, rows, &blk.wq, &dq, gb.as_deref_mut().map(|g| (&mut g.wq, &mut g.bq)), true);
        let dak = nn::linear_backward(&c.a, rows, &blk.wk, &dk, gb.as_deref_mut().map(|g| (&mut g.wk, &mut g.bk)), true);
        let dav = nn::linear_backward(&c.a, rows, &blk.wv, &dv, gb.as_deref_mut().map(|g| (&mut g.wv, &mut g.bv)), true);
        for i in 0..da.len() {
            da[i] += dak[i] + dav[i];
        }
        let dln1 = nn::layer_norm_backward(&da, d, &blk.ln1_g, &c.ln1, gb.as_deref_mut().map(|g| (&mut g.ln1_g, &mut g.ln1_b)));
        dh.iter_mut().zip(&dln1).for_each(|(x, &y)| *x += y);
    }

    if let Some(g) = grads {
        for (b, &cls) in cache.classes.iter().enumerate() {
            for s in 0..seq {
                let src = &dh[(b * seq + s) * d..(b * seq + s + 1) * d];
                let emb_row = if s == 0 { g.class_emb.row_mut(cls) } else { g.tok_emb.row_mut(cache.tokens[b * n + s - 1] as usize) };
                emb_row.iter_mut().zip(src).for_each(|(x, &y)| *x += y);
                g.pos_emb.row_mut(s).iter_mut().zip(src).for_each(|(x, &y)| *x += y);
            }
        }
    }
    BackwardOutput { feedback_grads }
}

/// Mean negative log-likelihood of the clean tokens over masked positions
/// (`unmasked[i] == false`), and its gradient with respect to the logits.
/// Unmasked positions contribute exactly nothing.
pub fn masked_loss<T: Float>(logits: &[T], k: usize, targets: &[TokenId], unmasked: &[bool]) -> Result<(T, Vec<T>)> {
    if logits.len() != targets.len() * k || unmasked.len() != targets.len() {
        return Err(Error::Contract("logits, targets and mask disagree in length".into()));
    }
    let count = unmasked.iter().filter(|&&u| !u).count();
    if count == 0 {
        return Err(Error::UndefinedLoss("no masked positions".into()));
    }
    let inv = T::c(1.0 / count as f64);
    let mut loss = T::zero();
    let mut dlogits = vec![T::zero(); logits.len()];
    for (i, (&target, &keep)) in targets.iter().zip(unmasked).enumerate() {
        if keep {
            continue;
        }
        let target = target as usize;
        if target >= k {
            return Err(Error::Contract(format!("target token {target} is not a real codeword")));
        }
        let row = &logits[i * k..(i + 1) * k];
        let lse = nn::log_sum_exp(row);
        loss += (lse - row[target]) * inv;
        let drow = &mut dlogits[i * k..(i + 1) * k];
        for j in 0..k {
            drow[j] = (row[j] - lse).exp() * inv;
        }
        drow[target] -= inv;
    }
    Ok((loss, dlogits))
}

/// Generator checkpoint: live and EMA weights plus architecture metadata.
pub fn to_container(arch: &GeneratorArch, live: &GeneratorParams<f32>, ema: &GeneratorParams<f32>) -> TensorContainer {
    let mut c = TensorContainer::new();
    c.insert_params("live", live);
    c.insert_params("ema", ema);
    c.meta.insert("kind".into(), "generator".into());
    c.meta.insert("arch".into(), serde_json::to_string(arch).expect("plain struct"));
    c
}

/// Inference-ready backbone: architecture plus (EMA) weights.
#[derive(Debug, Clone)]
pub struct Generator {
    pub arch: GeneratorArch,
    pub params: GeneratorParams<f32>,
    /// Content digest of the checkpoint this was loaded from, if any.
    pub digest: String,
}

impl Generator {
    pub fn new(arch: GeneratorArch, params: GeneratorParams<f32>) -> Self {
        let digest = params.digest();
        Self { arch, params, digest }
    }

    /// Loads the EMA weights of a generator checkpoint.
    pub fn from_container(c: &TensorContainer) -> Result<Self> {
        if c.meta.get("kind").map(String::as_str) != Some("generator") {
            return Err(Error::Format("not a generator checkpoint".into()));
        }
        let arch: GeneratorArch = serde_json::from_str(c.meta_str("arch")?)
            .map_err(|e| Error::Format(format!("generator arch metadata: {e}")))?;
        arch.validate()?;
        let mut params = GeneratorParams::zeros(&arch);
        params.assign_from(&c.params_with_prefix("ema"))?;
        Ok(Self { arch, params, digest: c.content_digest() })
    }

    pub fn forward(&self, tokens: &[TokenId], classes: &[usize], feedback: Option<&[Vec<f32>]>) -> Result<ForwardOutput<f32>> {
        forward(&self.params, &self.arch, tokens, classes, feedback)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stream};
    use rand::seq::SliceRandom;

    fn micro() -> GeneratorArch {
        GeneratorArch { codebook_size: 8, grid_rows: 2, grid_cols: 4, num_classes: 3, layers: 2, d_model: 16, heads: 2, mlp_ratio: 2 }
    }

    fn tokens(arch: &GeneratorArch, batch: usize, seed: u64) -> Vec<TokenId> {
        let mut rng = stream(seed, Stream::Batching);
        (0..batch * arch.tokens()).map(|_| rng.random_range(0..=arch.codebook_size as TokenId)).collect()
    }

    #[test]
    fn output_shapes() {
        let arch = micro();
        let p = GeneratorParams::<f32>::init(&arch, &mut stream(0, Stream::Init));
        let out = forward(&p, &arch, &tokens(&arch, 3, 1), &[0, 1, 3], None).unwrap();
        assert_eq!(out.logits.len(), 3 * 8 * 8);
        assert_eq!(out.hidden.len(), arch.layers + 1);
        assert!(out.hidden.iter().all(|h| h.len() == 3 * 9 * 16));
        assert!(out.logits.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn zero_feedback_matches_no_feedback_and_is_deterministic() {
        let arch = micro();
        let p = GeneratorParams::<f32>::init(&arch, &mut stream(0, Stream::Init));
        let toks = tokens(&arch, 2, 2);
        let a = forward(&p, &arch, &toks, &[1, 2], None).unwrap();
        let zeros = vec![vec![0f32; 2 * 9 * 16]; 2];
        let b = forward(&p, &arch, &toks, &[1, 2], Some(&zeros)).unwrap();
        let c = forward(&p, &arch, &toks, &[1, 2], None).unwrap();
        let max = a.logits.iter().zip(&b.logits).map(|(x, y)| (x - y).abs()).fold(0f32, f32::max);
        assert!(max < 1e-6);
        assert_eq!(a.logits, c.logits);
    }

    #[test]
    fn malformed_feedback_is_a_contract_error() {
        let arch = micro();
        let p = GeneratorParams::<f32>::init(&arch, &mut stream(0, Stream::Init));
        let toks = tokens(&arch, 1, 2);
        let short = vec![vec![0f32; 10]; 2];
        assert!(matches!(forward(&p, &arch, &toks, &[0], Some(&short)), Err(Error::Contract(_))));
        let one = vec![vec![0f32; 9 * 16]; 1];
        assert!(matches!(forward(&p, &arch, &toks, &[0], Some(&one)), Err(Error::Contract(_))));
    }

    #[test]
    fn uniform_logits_give_log_k() {
        let k = 128;
        let logits = vec![0.25f64; 10 * k];
        let targets: Vec<TokenId> = (0..10).map(|i| i * 7).collect();
        let unmasked = [true, false, false, true, false, false, false, true, false, false];
        let (loss, _) = masked_loss(&logits, k, &targets, &unmasked).unwrap();
        assert!((loss - (k as f64).ln()).abs() < 1e-12);
        assert!((loss - 4.852).abs() < 1e-3);
    }

    #[test]
    fn confident_correct_logits_drive_loss_to_zero() {
        let k = 4;
        let targets = [1, 3];
        let unmasked = [false, false];
        let mut prev = f64::INFINITY;
        for margin in [1.0, 5.0, 20.0, 60.0] {
            let mut logits = vec![0f64; 2 * k];
            logits[1] = margin;
            logits[k + 3] = margin;
            let (loss, _) = masked_loss(&logits, k, &targets, &unmasked).unwrap();
            assert!(loss < prev);
            prev = loss;
        }
        assert!(prev < 1e-20);
    }

    #[test]
    fn unmasked_logits_do_not_affect_loss() {
        let k = 5;
        let mut rng = stream(3, Stream::Init);
        let logits = Tensor::<f64>::randn(&[4, k], 1.0, &mut rng).data;
        let targets = [0, 1, 2, 3];
        let unmasked = [true, false, true, false];
        let (a, da) = masked_loss(&logits, k, &targets, &unmasked).unwrap();
        let mut perturbed = logits.clone();
        for j in 0..k {
            perturbed[j] += 100.0;
            perturbed[2 * k + j] -= 3.0;
        }
        let (b, _) = masked_loss(&perturbed, k, &targets, &unmasked).unwrap();
        assert_eq!(a, b);
        assert!(da[..k].iter().chain(&da[2 * k..3 * k]).all(|&g| g == 0.0));
        assert!(matches!(masked_loss(&logits, k, &targets, &[true; 4]), Err(Error::UndefinedLoss(_))));
    }

    #[test]
    fn permuting_tokens_and_positions_permutes_logits() {
        let arch = micro();
        let p = GeneratorParams::<f64>::init(&arch, &mut stream(5, Stream::Init));
        let n = arch.tokens();
        let toks = tokens(&arch, 1, 9);
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut stream(1, Stream::Batching));
        let mut q = p.clone();
        let mut toks_p = toks.clone();
        for (new, &old) in perm.iter().enumerate() {
            toks_p[new] = toks[old];
            q.pos_emb.row_mut(new + 1).copy_from_slice(p.pos_emb.row(old + 1));
        }
        let a = forward(&p, &arch, &toks, &[2], None).unwrap();
        let b = forward(&q, &arch, &toks_p, &[2], None).unwrap();
        let k = arch.codebook_size;
        for (new, &old) in perm.iter().enumerate() {
            for j in 0..k {
                assert!((a.logits[old * k + j] - b.logits[new * k + j]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn feedback_is_additive_at_the_value_injection() {
        let arch = micro();
        let p = GeneratorParams::<f64>::init(&arch, &mut stream(6, Stream::Init));
        let toks = tokens(&arch, 1, 4);
        let len = arch.seq() * arch.d_model;
        let mut rng = stream(8, Stream::Init);
        let a = Tensor::<f64>::randn(&[len], 1.0, &mut rng).data;
        let b = Tensor::<f64>::randn(&[len], 1.0, &mut rng).data;
        let ab: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
        // depth 2 lands on block 0; the other depth stays zero
        let signals = |s: &[f64]| vec![vec![0.0; len], s.to_vec()];
        let value = |s: &[f64]| {
            let (_, c) = forward_with_cache::<f64, rand_chacha::ChaCha8Rng>(&p, &arch, &toks, &[0], Some(&signals(s)), None).unwrap();
            c.value_matrix(feedback_target_block(2, arch.layers)).to_vec()
        };
        let (v0, va, vb, vab) = (value(&vec![0.0; len]), value(&a), value(&b), value(&ab));
        for i in 0..len {
            assert!(((vab[i] - v0[i]) - (va[i] - v0[i]) - (vb[i] - v0[i])).abs() < 1e-12);
        }
        assert_eq!(feedback_target_block(1, arch.layers), arch.layers - 1);
    }

    #[test]
    fn container_round_trip_restores_ema_weights() {
        let arch = micro();
        let live = GeneratorParams::<f32>::init(&arch, &mut stream(0, Stream::Init));
        let ema = GeneratorParams::<f32>::init(&arch, &mut stream(1, Stream::Init));
        let c = to_container(&arch, &live, &ema);
        let g = Generator::from_container(&TensorContainer::from_bytes(&c.to_bytes().unwrap()).unwrap()).unwrap();
        assert_eq!(g.params, ema);
        assert_eq!(g.arch, arch);
        assert_eq!(g.digest, c.content_digest());
    }
}
