//! Run configuration: a TOML document with one section per pipeline stage.
//!
//! Unknown keys are rejected at every level. Overrides use dot paths
//! (`generator.layers=4`); the value is parsed as a TOML literal and falls
//! back to a bare string.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adapter::FinetuneConfig;
use crate::data::{DatasetSpec, PatchDims};
use crate::error::{Error, Result};
use crate::generator::{GeneratorArch, TrainConfig};
use crate::metrics::FeatureNetConfig;
use crate::rng::derive_seed;
use crate::sampler::{GuidanceConfig, GuidanceMode};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    pub train_count: usize,
    pub eval_count: usize,
    pub num_classes: usize,
    pub height: usize,
    pub width: usize,
    /// Directory of class sub-folders to ingest instead of the procedural set;
    /// it must contain `train/` and `eval/`.
    pub image_folder: Option<PathBuf>,
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self { train_count: 10_000, eval_count: 2_000, num_classes: 10, height: 32, width: 32, image_folder: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TokenizerSection {
    pub codebook_size: usize,
    pub patch_height: usize,
    pub patch_width: usize,
    pub max_iters: usize,
    /// Images used to fit the codebook; 0 uses the whole training split.
    pub fit_images: usize,
}

impl Default for TokenizerSection {
    fn default() -> Self {
        Self { codebook_size: 128, patch_height: 4, patch_width: 4, max_iters: 50, fit_images: 0 }
    }
}

impl TokenizerSection {
    pub fn patch(&self) -> PatchDims {
        PatchDims { height: self.patch_height, width: self.patch_width }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorSection {
    pub layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
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

impl Default for GeneratorSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            layers: 6,
            d_model: 256,
            heads: 8,
            mlp_ratio: 4,
            steps: t.steps,
            batch_size: t.batch_size,
            lr: t.lr,
            warmup_steps: t.warmup_steps,
            weight_decay: t.weight_decay,
            grad_clip: t.grad_clip,
            dropout: t.dropout,
            cond_dropout_prob: t.cond_dropout_prob,
            ema_decay: t.ema_decay,
        }
    }
}

impl GeneratorSection {
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            steps: self.steps,
            batch_size: self.batch_size,
            lr: self.lr,
            warmup_steps: self.warmup_steps,
            weight_decay: self.weight_decay,
            grad_clip: self.grad_clip,
            dropout: self.dropout,
            cond_dropout_prob: self.cond_dropout_prob,
            ema_decay: self.ema_decay,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdapterSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_steps: usize,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub error_rate: f64,
    pub lambda: f64,
    pub ema_decay: f64,
    /// When set, fine-tuning refuses a generator checkpoint with another digest.
    pub expected_generator_digest: Option<String>,
}

impl Default for AdapterSection {
    fn default() -> Self {
        let f = FinetuneConfig::default();
        Self {
            epochs: f.epochs,
            batch_size: f.batch_size,
            lr: f.lr,
            warmup_steps: f.warmup_steps,
            weight_decay: f.weight_decay,
            grad_clip: f.grad_clip,
            error_rate: f.error_rate,
            lambda: f.lambda,
            ema_decay: f.ema_decay,
            expected_generator_digest: None,
        }
    }
}

impl AdapterSection {
    pub fn finetune_config(&self) -> FinetuneConfig {
        FinetuneConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            warmup_steps: self.warmup_steps,
            weight_decay: self.weight_decay,
            grad_clip: self.grad_clip,
            error_rate: self.error_rate,
            lambda: self.lambda,
            ema_decay: self.ema_decay,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingSection {
    pub mode: GuidanceMode,
    pub scale: f64,
    pub temperature: f64,
    pub steps: usize,
    pub blur_sigma: f64,
    pub seed: u64,
    pub argmax: bool,
    pub samples_per_class: usize,
    /// Chains decoded together per backbone call.
    pub batch_size: usize,
}

impl Default for SamplingSection {
    fn default() -> Self {
        let g = GuidanceConfig::default();
        Self {
            mode: g.mode,
            scale: g.scale,
            temperature: g.temperature,
            steps: g.steps,
            blur_sigma: g.blur_sigma,
            seed: g.seed,
            argmax: g.argmax,
            samples_per_class: 8,
            batch_size: 50,
        }
    }
}

impl SamplingSection {
    pub fn guidance(&self) -> GuidanceConfig {
        GuidanceConfig {
            mode: self.mode,
            scale: self.scale,
            temperature: self.temperature,
            steps: self.steps,
            blur_sigma: self.blur_sigma,
            seed: self.seed,
            argmax: self.argmax,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub num_generated: usize,
    pub num_reference: usize,
    pub k: usize,
    pub feature_epochs: usize,
    pub feature_batch_size: usize,
    pub feature_lr: f64,
    pub min_accuracy: f64,
}

impl Default for EvalSection {
    fn default() -> Self {
        let f = FeatureNetConfig::default();
        Self {
            num_generated: 2_000,
            num_reference: 2_000,
            k: 3,
            feature_epochs: f.epochs,
            feature_batch_size: f.batch_size,
            feature_lr: f.lr,
            min_accuracy: f.min_accuracy,
        }
    }
}

impl EvalSection {
    pub fn feature_config(&self) -> FeatureNetConfig {
        FeatureNetConfig {
            epochs: self.feature_epochs,
            batch_size: self.feature_batch_size,
            lr: self.feature_lr,
            min_accuracy: self.min_accuracy,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub modes: Vec<GuidanceMode>,
    pub scales: Vec<f64>,
    pub temperatures: Vec<f64>,
    pub steps: Vec<usize>,
    pub seeds: Vec<u64>,
    /// Generated samples per grid point.
    pub num_generated: usize,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            modes: vec![GuidanceMode::None, GuidanceMode::SelfGuided],
            scales: vec![1.0],
            temperatures: vec![1.0, 3.0, 4.5, 8.0],
            steps: vec![18],
            seeds: vec![0],
            num_generated: 2_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: Option<PathBuf>,
    pub dataset: DatasetSection,
    pub tokenizer: TokenizerSection,
    pub generator: GeneratorSection,
    pub adapter: AdapterSection,
    pub sampling: SamplingSection,
    pub eval: EvalSection,
    pub sweep: SweepSection,
}

/// Per-stage seed offsets under the master seed.
#[derive(Debug, Clone, Copy)]
#[repr(u64)]
pub enum Stage {
    TrainData = 1,
    EvalData = 2,
    Codebook = 3,
    Generator = 4,
    Adapter = 5,
    FeatureNet = 6,
    Sampling = 7,
}

impl RunConfig {
    pub fn stage_seed(&self, stage: Stage) -> u64 {
        derive_seed(&[self.seed, stage as u64])
    }

    /// Seed of the `j`-th chain of `class` under sampling seed `sampling_seed`.
    pub fn chain_seed(&self, sampling_seed: u64, class: usize, j: usize) -> u64 {
        derive_seed(&[self.stage_seed(Stage::Sampling), sampling_seed, class as u64, j as u64])
    }

    pub fn train_spec(&self) -> DatasetSpec {
        DatasetSpec {
            count: self.dataset.train_count,
            num_classes: self.dataset.num_classes,
            height: self.dataset.height,
            width: self.dataset.width,
            seed: self.stage_seed(Stage::TrainData),
        }
    }

    pub fn eval_spec(&self) -> DatasetSpec {
        DatasetSpec { count: self.dataset.eval_count, seed: self.stage_seed(Stage::EvalData), ..self.train_spec() }
    }

    pub fn generator_arch(&self, codebook_size: usize, grid_rows: usize, grid_cols: usize, num_classes: usize) -> GeneratorArch {
        GeneratorArch {
            codebook_size,
            grid_rows,
            grid_cols,
            num_classes,
            layers: self.generator.layers,
            d_model: self.generator.d_model,
            heads: self.generator.heads,
            mlp_ratio: self.generator.mlp_ratio,
        }
    }

    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let mut doc: toml::Table = toml::from_str(text).map_err(|e| Error::Config(format!("config parse error: {e}")))?;
        for ov in overrides {
            apply_override(&mut doc, ov)?;
        }
        let cfg: RunConfig = toml::Value::Table(doc)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads `path` (or defaults when `None`) and applies overrides.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
            None => String::new(),
        };
        Self::from_toml_str(&text, overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always serializable")
    }

    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.dataset;
        if d.num_classes == 0 || d.height == 0 || d.width == 0 {
            return Err(Error::Config("dataset dimensions must be positive".into()));
        }
        self.generator.train_config().validate()?;
        self.adapter.finetune_config().validate()?;
        self.sampling.guidance().validate()?;
        if self.sampling.samples_per_class == 0 || self.sampling.batch_size == 0 {
            return Err(Error::Config("sampling needs at least one sample and a positive batch size".into()));
        }
        if self.eval.k == 0 {
            return Err(Error::Config("eval.k must be positive".into()));
        }
        Ok(())
    }
}

fn parse_literal(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Applies one `a.b.c=value` override to a parsed document.
pub fn apply_override(doc: &mut toml::Table, spec: &str) -> Result<()> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{spec}` is not key=value")))?;
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(Error::Config(format!("override `{spec}` has an empty key")));
    }
    let mut table = doc;
    for key in &keys[..keys.len() - 1] {
        let entry = table.entry(key.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override `{spec}`: `{key}` is not a section")))?;
    }
    table.insert(keys[keys.len() - 1].to_string(), parse_literal(raw.trim()));
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = RunConfig::default();
        let back = RunConfig::from_toml_str(&cfg.to_toml(), &[]).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(cfg.generator.layers, 6);
        assert_eq!(cfg.adapter.error_rate, 0.3);
        assert_eq!(cfg.adapter.epochs, 10);
        assert_eq!(cfg.adapter.ema_decay, 0.9999);
        assert_eq!(cfg.sampling.steps, 18);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(RunConfig::from_toml_str("[generator]\nlayerz = 3\n", &[]), Err(Error::Config(_))));
        assert!(matches!(RunConfig::from_toml_str("bogus = 1\n", &[]), Err(Error::Config(_))));
        assert!(RunConfig::from_toml_str("", &["sampling.colour=3".into()]).is_err());
    }

    #[test]
    fn overrides_follow_dot_paths() {
        let cfg = RunConfig::from_toml_str(
            "seed = 3\n[generator]\nlayers = 2\n",
            &["generator.layers=4".into(), "sampling.mode=none".into(), "sweep.temperatures=[1.0, 2.0]".into()],
        )
        .unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.generator.layers, 4);
        assert_eq!(cfg.sampling.mode, GuidanceMode::None);
        assert_eq!(cfg.sweep.temperatures, vec![1.0, 2.0]);
        assert!(RunConfig::from_toml_str("", &["novalue".into()]).is_err());
    }

    #[test]
    fn stage_seeds_are_distinct() {
        let cfg = RunConfig::default();
        let seeds = [Stage::TrainData, Stage::EvalData, Stage::Codebook, Stage::Generator, Stage::Adapter];
        let set: std::collections::HashSet<u64> = seeds.iter().map(|&s| cfg.stage_seed(s)).collect();
        assert_eq!(set.len(), seeds.len());
    }
}
