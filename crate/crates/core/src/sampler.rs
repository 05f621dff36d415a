//! Iterative predict-and-remask decoding with four guidance modes.
//!
//! Each step predicts every masked token, combines the prediction with a
//! second distribution depending on the mode, samples the masked positions,
//! and keeps the most confident `N − n_{t−1}` positions unmasked. Confidences
//! are perturbed by Gumbel noise scaled by `τ·t/T`.
//!
//! Randomness comes from two per-chain streams: token sampling draws one
//! uniform per masked position, mask selection one Gumbel variate per position.
//! Neither depends on the mode, so `self` at `s = 0` replays `none` exactly.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gumbel};
use serde::{Deserialize, Serialize};

use crate::adapter::{smoothed_from_hidden, AdapterParams};
use crate::data::{TokenGrid, TokenId};
use crate::error::{Error, Result};
use crate::generator::Generator;
use crate::mask::{mask_schedule, MaskState};
use crate::rng::{stream, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GuidanceMode {
    None,
    #[serde(rename = "self")]
    SelfGuided,
    Cfg,
    Blur,
}

impl GuidanceMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            GuidanceMode::None => "none",
            GuidanceMode::SelfGuided => "self",
            GuidanceMode::Cfg => "cfg",
            GuidanceMode::Blur => "blur",
        }
    }

    /// Backbone evaluations per decoding step.
    pub fn forwards_per_step(&self) -> usize {
        match self {
            GuidanceMode::None | GuidanceMode::Blur => 1,
            GuidanceMode::SelfGuided | GuidanceMode::Cfg => 2,
        }
    }
}

impl std::str::FromStr for GuidanceMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "self" => Ok(Self::SelfGuided),
            "cfg" => Ok(Self::Cfg),
            "blur" => Ok(Self::Blur),
            other => Err(Error::Config(format!("unknown guidance mode `{other}`"))),
        }
    }
}

impl std::fmt::Display for GuidanceMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Sampling hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GuidanceConfig {
    pub mode: GuidanceMode,
    /// Guidance scale `s`.
    pub scale: f64,
    /// Mask-selection temperature `τ`.
    pub temperature: f64,
    pub steps: usize,
    pub blur_sigma: f64,
    pub seed: u64,
    /// Take the most probable token instead of sampling.
    #[serde(default)]
    pub argmax: bool,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self { mode: GuidanceMode::SelfGuided, scale: 1.0, temperature: 4.5, steps: 18, blur_sigma: 1.0, seed: 0, argmax: false }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.scale >= -1.0) {
            return Err(Error::Config(format!("guidance scale {} below −1", self.scale)));
        }
        if !(self.temperature >= 0.0) {
            return Err(Error::Config(format!("temperature {} is negative", self.temperature)));
        }
        if self.steps == 0 {
            return Err(Error::Config("at least one sampling step is required".into()));
        }
        if self.mode == GuidanceMode::Blur && !(self.blur_sigma >= 0.0) {
            return Err(Error::Config(format!("blur sigma {} is negative", self.blur_sigma)));
        }
        if self.scale == -1.0 {
            log::warn!("guidance scale −1 samples from the smoothed prediction alone");
        }
        Ok(())
    }
}

fn check_rows(x: &[f64], k: usize) -> Result<()> {
    if k == 0 || x.len() % k != 0 {
        return Err(Error::Contract("log-probabilities are not whole rows".into()));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Contract("non-finite log-probability".into()));
    }
    Ok(())
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln()
}

/// Row-wise log-softmax in `f64`.
pub fn log_softmax(logits: &[f32], k: usize) -> Vec<f64> {
    let mut out: Vec<f64> = logits.iter().map(|&v| v as f64).collect();
    for row in out.chunks_mut(k) {
        let lse = log_sum_exp(row);
        row.iter_mut().for_each(|v| *v -= lse);
    }
    out
}

/// `log p̂ + s·(log p̂ − log p̄)`, renormalized per row. Rows where the
/// guidance term vanishes (`s = 0` or `p̂ = p̄`) are returned unchanged.
pub fn guided_combine(logp_hat: &[f64], logp_bar: &[f64], k: usize, s: f64) -> Result<Vec<f64>> {
    check_rows(logp_hat, k)?;
    check_rows(logp_bar, k)?;
    if logp_hat.len() != logp_bar.len() {
        return Err(Error::Contract("guided and smoothed predictions differ in shape".into()));
    }
    if !s.is_finite() {
        return Err(Error::Contract(format!("non-finite guidance scale {s}")));
    }
    let mut out = logp_hat.to_vec();
    if s == 0.0 {
        return Ok(out);
    }
    for (row, bar) in out.chunks_mut(k).zip(logp_bar.chunks(k)) {
        if row.iter().zip(bar).all(|(a, b)| a == b) {
            continue;
        }
        row.iter_mut().zip(bar).for_each(|(a, &b)| *a += s * (*a - b));
        let lse = log_sum_exp(row);
        row.iter_mut().for_each(|v| *v -= lse);
    }
    Ok(out)
}

/// Classifier-free guidance: the same algebra with conditional and
/// unconditional predictions.
pub fn cfg_combine(logp_cond: &[f64], logp_uncond: &[f64], k: usize, s: f64) -> Result<Vec<f64>> {
    guided_combine(logp_cond, logp_uncond, k, s)
}

/// Mirror index into `[0, n)` without repeating the edge sample, folding as
/// many times as needed.
pub fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - m) as usize
    }
}

/// Normalized 1-D Gaussian taps for offsets `−r..=r`, `r = ⌈3σ⌉`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as isize;
    let taps: Vec<f64> = (-r..=r).map(|j| (-((j * j) as f64) / (2.0 * sigma * sigma)).exp()).collect();
    let z: f64 = taps.iter().sum();
    taps.into_iter().map(|w| w / z).collect()
}

/// Per-category Gaussian blur of `rows·cols × k` logits over the token grid.
pub fn blur_logits(logits: &[f64], rows: usize, cols: usize, k: usize, sigma: f64) -> Result<Vec<f64>> {
    if !(sigma >= 0.0) {
        return Err(Error::Domain(format!("blur sigma {sigma} is negative")));
    }
    if logits.len() != rows * cols * k {
        return Err(Error::Contract("logits do not cover the token grid".into()));
    }
    if sigma == 0.0 {
        return Ok(logits.to_vec());
    }
    let kernel = gaussian_kernel(sigma);
    let r = (kernel.len() / 2) as isize;
    let mut tmp = vec![0.0; logits.len()];
    for y in 0..rows {
        for x in 0..cols {
            let dst = &mut tmp[(y * cols + x) * k..(y * cols + x + 1) * k];
            for (j, &w) in kernel.iter().enumerate() {
                let sx = reflect_index(x as isize + j as isize - r, cols);
                let src = &logits[(y * cols + sx) * k..(y * cols + sx + 1) * k];
                dst.iter_mut().zip(src).for_each(|(d, &s)| *d += w * s);
            }
        }
    }
    let mut out = vec![0.0; logits.len()];
    for y in 0..rows {
        for x in 0..cols {
            let dst = &mut out[(y * cols + x) * k..(y * cols + x + 1) * k];
            for (j, &w) in kernel.iter().enumerate() {
                let sy = reflect_index(y as isize + j as isize - r, rows);
                let src = &tmp[(sy * cols + x) * k..(sy * cols + x + 1) * k];
                dst.iter_mut().zip(src).for_each(|(d, &s)| *d += w * s);
            }
        }
    }
    Ok(out)
}

/// Confidence of each position: `log p̃(sampled token)` where the position was
/// masked before this step, `+∞` where it was already fixed.
pub fn confidences(logp_tilde: &[f64], k: usize, sampled: &[TokenId], prev: &MaskState) -> Vec<f64> {
    (0..sampled.len())
        .map(|i| if prev.unmasked[i] { f64::INFINITY } else { logp_tilde[i * k + sampled[i] as usize] })
        .collect()
}

/// Keeps the `keep` positions with the largest `l + noise_scale·g`, `g`
/// standard Gumbel (one draw per position, in index order); ties go to the
/// lower index. Previously unmasked positions have infinite confidence and
/// are never re-masked.
pub fn select_mask(
    confidence: &[f64],
    prev: &MaskState,
    keep: usize,
    noise_scale: f64,
    rng: &mut impl Rng,
) -> Result<MaskState> {
    let n = confidence.len();
    if prev.len() != n {
        return Err(Error::Contract("confidence and mask lengths differ".into()));
    }
    if keep > n || keep < prev.unmasked_count() {
        return Err(Error::Contract(format!(
            "cannot keep {keep} of {n} positions with {} already fixed",
            prev.unmasked_count()
        )));
    }
    let gumbel = Gumbel::new(0.0, 1.0).expect("unit scale");
    let perturbed: Vec<f64> = confidence
        .iter()
        .map(|&l| {
            let g: f64 = gumbel.sample(rng);
            if l == f64::INFINITY {
                l
            } else {
                l + noise_scale * g
            }
        })
        .collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| perturbed[b].total_cmp(&perturbed[a]).then(a.cmp(&b)));
    let mut next = MaskState::all_masked(n);
    for &i in &order[..keep] {
        next.unmasked[i] = true;
    }
    Ok(next)
}

/// Mean Shannon entropy (nats) of the rows of `logits` selected by `rows`.
pub fn mean_entropy(logits: &[f32], k: usize, rows: impl Iterator<Item = usize>) -> f64 {
    let (mut total, mut count) = (0.0, 0usize);
    for r in rows {
        let lp = log_softmax(&logits[r * k..(r + 1) * k], k);
        total -= lp.iter().map(|&l| l.exp() * l).sum::<f64>();
        count += 1;
    }
    if count == 0 {
        0.0
    } else {
        total / count as f64
    }
}

/// One decoding step of one chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: usize,
    /// Masked count before the step.
    pub n_t: usize,
    pub newly_fixed: Vec<usize>,
    /// Mean unperturbed confidence of the newly fixed positions.
    pub mean_confidence: f64,
    /// Backbone evaluations so far.
    pub nfe: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleTrace {
    pub class: usize,
    pub seed: u64,
    pub mode: GuidanceMode,
    pub steps: Vec<StepRecord>,
    pub final_tokens: Vec<TokenId>,
    pub nfe: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub note: Option<String>,
}

impl SampleTrace {
    /// One JSON record per step followed by a summary record.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for s in &self.steps {
            out.push_str(&serde_json::to_string(s).expect("plain record"));
            out.push('\n');
        }
        let summary = serde_json::json!({
            "class": self.class,
            "seed": self.seed,
            "mode": self.mode,
            "nfe": self.nfe,
            "final_tokens": self.final_tokens,
            "note": self.note,
        });
        out.push_str(&summary.to_string());
        out.push('\n');
        out
    }
}

/// State of one decoding chain.
#[derive(Debug, Clone)]
pub struct Chain {
    pub class: usize,
    pub seed: u64,
    pub tokens: TokenGrid,
    pub mask: MaskState,
    pub records: Vec<StepRecord>,
    pub nfe: usize,
    token_rng: ChaCha8Rng,
    gumbel_rng: ChaCha8Rng,
}

impl Chain {
    /// Blank canvas for `class`, with streams derived from `seed`.
    pub fn new(gen: &Generator, class: usize, seed: u64) -> Result<Self> {
        let arch = &gen.arch;
        if class >= arch.num_classes {
            return Err(Error::Domain(format!("class {class} outside [0, {})", arch.num_classes)));
        }
        Ok(Self {
            class,
            seed,
            tokens: TokenGrid::blank(arch.grid_rows, arch.grid_cols, arch.codebook_size),
            mask: MaskState::all_masked(arch.tokens()),
            records: Vec::new(),
            nfe: 0,
            token_rng: stream(seed, Stream::TokenSampling),
            gumbel_rng: stream(seed, Stream::Gumbel),
        })
    }

    pub fn into_trace(self, mode: GuidanceMode) -> (TokenGrid, SampleTrace) {
        let note = (mode == GuidanceMode::Blur)
            .then(|| "blur adds no backbone evaluation; grouped with the two-pass guided modes when comparing".to_string());
        let trace = SampleTrace {
            class: self.class,
            seed: self.seed,
            mode,
            steps: self.records,
            final_tokens: self.tokens.tokens.clone(),
            nfe: self.nfe,
            note,
        };
        (self.tokens, trace)
    }
}

fn check_mode(cfg: &GuidanceConfig, adapter: Option<&AdapterParams<f32>>) -> Result<()> {
    cfg.validate()?;
    if cfg.mode == GuidanceMode::SelfGuided && adapter.is_none() {
        return Err(Error::Config("self-guidance requires a fine-tuned adapter".into()));
    }
    Ok(())
}

/// Combined log-probabilities `batch·N × K` for the current chain states.
fn guided_distribution(
    gen: &Generator,
    adapter: Option<&AdapterParams<f32>>,
    cfg: &GuidanceConfig,
    chains: &[&mut Chain],
) -> Result<Vec<f64>> {
    let arch = &gen.arch;
    let k = arch.codebook_size;
    let tokens: Vec<TokenId> = chains.iter().flat_map(|c| c.tokens.tokens.iter().copied()).collect();
    let classes: Vec<usize> = chains.iter().map(|c| c.class).collect();
    let main = gen.forward(&tokens, &classes, None)?;
    let logp_hat = log_softmax(&main.logits, k);
    match cfg.mode {
        GuidanceMode::None => Ok(logp_hat),
        GuidanceMode::SelfGuided => {
            let adapter = adapter.ok_or_else(|| Error::Config("self-guidance requires an adapter".into()))?;
            let smoothed = smoothed_from_hidden(&gen.params, arch, adapter, main.top_hidden(), &classes)?;
            guided_combine(&logp_hat, &log_softmax(&smoothed.logits_bar, k), k, cfg.scale)
        }
        GuidanceMode::Cfg => {
            let null = vec![arch.null_class(); classes.len()];
            let uncond = gen.forward(&tokens, &null, None)?;
            cfg_combine(&logp_hat, &log_softmax(&uncond.logits, k), k, cfg.scale)
        }
        GuidanceMode::Blur => {
            let per = arch.tokens() * k;
            let mut bar = Vec::with_capacity(main.logits.len());
            for b in 0..classes.len() {
                let raw: Vec<f64> = main.logits[b * per..(b + 1) * per].iter().map(|&v| v as f64).collect();
                let mut blurred = blur_logits(&raw, arch.grid_rows, arch.grid_cols, k, cfg.blur_sigma)?;
                for row in blurred.chunks_mut(k) {
                    let lse = log_sum_exp(row);
                    row.iter_mut().for_each(|v| *v -= lse);
                }
                bar.extend(blurred);
            }
            guided_combine(&logp_hat, &bar, k, cfg.scale)
        }
    }
}

fn draw_token(row: &[f64], u: f64, argmax: bool) -> TokenId {
    if argmax {
        let mut best = 0;
        for (j, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = j;
            }
        }
        return best as TokenId;
    }
    let total: f64 = row.iter().map(|&l| l.exp()).sum();
    let target = u * total;
    let mut acc = 0.0;
    for (j, &l) in row.iter().enumerate() {
        acc += l.exp();
        if acc > target {
            return j as TokenId;
        }
    }
    (row.len() - 1) as TokenId
}

fn step_chains(
    gen: &Generator,
    adapter: Option<&AdapterParams<f32>>,
    cfg: &GuidanceConfig,
    schedule: &[usize],
    t: usize,
    chains: &mut [&mut Chain],
) -> Result<()> {
    let arch = &gen.arch;
    let (n, k) = (arch.tokens(), arch.codebook_size);
    for c in chains.iter() {
        if c.mask.masked_count() != schedule[t] {
            return Err(Error::Contract(format!(
                "chain has {} masked positions at step {t}, schedule expects {}",
                c.mask.masked_count(),
                schedule[t]
            )));
        }
    }
    let logp = guided_distribution(gen, adapter, cfg, chains)?;
    let keep = n - schedule[t - 1];
    let noise = cfg.temperature * t as f64 / cfg.steps as f64;
    for (b, chain) in chains.iter_mut().enumerate() {
        let rows = &logp[b * n * k..(b + 1) * n * k];
        let mut sampled = chain.tokens.tokens.clone();
        for i in 0..n {
            if chain.mask.is_masked(i) {
                let u: f64 = chain.token_rng.random();
                sampled[i] = draw_token(&rows[i * k..(i + 1) * k], u, cfg.argmax);
            }
        }
        let conf = confidences(rows, k, &sampled, &chain.mask);
        let next = select_mask(&conf, &chain.mask, keep, noise, &mut chain.gumbel_rng)?;
        let newly_fixed: Vec<usize> = (0..n).filter(|&i| next.unmasked[i] && !chain.mask.unmasked[i]).collect();
        let mean_confidence = if newly_fixed.is_empty() {
            0.0
        } else {
            newly_fixed.iter().map(|&i| conf[i]).sum::<f64>() / newly_fixed.len() as f64
        };
        for i in 0..n {
            chain.tokens.tokens[i] = if next.unmasked[i] { sampled[i] } else { arch.mask_id() };
        }
        chain.mask = next;
        chain.nfe += cfg.mode.forwards_per_step();
        chain.records.push(StepRecord { t, n_t: schedule[t], newly_fixed, mean_confidence, nfe: chain.nfe });
    }
    Ok(())
}

/// Advances one chain from step `t` to `t − 1`.
pub fn sample_step(
    gen: &Generator,
    adapter: Option<&AdapterParams<f32>>,
    cfg: &GuidanceConfig,
    chain: &mut Chain,
    t: usize,
) -> Result<StepRecord> {
    check_mode(cfg, adapter)?;
    if t == 0 || t > cfg.steps {
        return Err(Error::Domain(format!("step {t} outside [1, {}]", cfg.steps)));
    }
    let schedule = mask_schedule(cfg.steps, gen.arch.tokens())?;
    step_chains(gen, adapter, cfg, &schedule, t, &mut [chain])?;
    Ok(chain.records.last().expect("step recorded").clone())
}

/// Decodes one grid for `class` from the blank canvas, seeded by `cfg.seed`.
pub fn generate(
    gen: &Generator,
    adapter: Option<&AdapterParams<f32>>,
    class: usize,
    cfg: &GuidanceConfig,
) -> Result<(TokenGrid, SampleTrace)> {
    Ok(generate_batch(gen, adapter, &[(class, cfg.seed)], cfg)?.remove(0))
}

/// Decodes several independent chains, one per `(class, seed)` pair, sharing
/// backbone evaluations across the batch.
pub fn generate_batch(
    gen: &Generator,
    adapter: Option<&AdapterParams<f32>>,
    jobs: &[(usize, u64)],
    cfg: &GuidanceConfig,
) -> Result<Vec<(TokenGrid, SampleTrace)>> {
    check_mode(cfg, adapter)?;
    let schedule = mask_schedule(cfg.steps, gen.arch.tokens())?;
    let mut chains = jobs.iter().map(|&(c, s)| Chain::new(gen, c, s)).collect::<Result<Vec<_>>>()?;
    for t in (1..=cfg.steps).rev() {
        let mut refs: Vec<&mut Chain> = chains.iter_mut().collect();
        step_chains(gen, adapter, cfg, &schedule, t, &mut refs)?;
    }
    let mut out = Vec::with_capacity(chains.len());
    for chain in chains {
        if chain.tokens.masked_count() != 0 {
            return Err(Error::IncompleteState("decoding finished with masked positions".into()));
        }
        out.push(chain.into_trace(cfg.mode));
    }
    Ok(out)
}
