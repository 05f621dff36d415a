//! Pipeline commands over a run directory.
//!
//! Layout under the output directory:
//!
//! ```text
//! dataset/{train,eval}/class_XXX/*.png, dataset/manifest.toml
//! tokenizer/codebook.ntc, tokenizer/tokens.ntc, tokenizer/report.json
//! generator/generator.ntc, generator/metrics.jsonl
//! adapter/adapter.ntc, adapter/metrics.jsonl
//! samples/<mode>/{tokens.txt, traces.jsonl, sheet.png}
//! eval/featurenet.ntc, eval/report.json
//! sweep/table.tsv, sweep/curves/*.tsv
//! ```
//!
//! Every stage directory also receives the resolved `config.toml` it ran with.

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::adapter::{self, AdapterParams};
use crate::config::{RunConfig, Stage};
use crate::container::TensorContainer;
use crate::data::{self, detokenize, generate_dataset, image_sheet, tokenize, Codebook, Image, LabeledImageSet, TokenGrid, TokenId};
use crate::error::{Error, Result};
use crate::generator::{self, train_generator, Generator, GeneratorArch, TokenizedSet};
use crate::metrics::{evaluate, train_feature_classifier, FeatureNet, MetricsReport, ReferenceStats};
use crate::sampler::{generate_batch, GuidanceConfig, GuidanceMode, SampleTrace};
use crate::tensor::{ParamSet, Tensor};

/// Paths of every artifact in a run directory.
#[derive(Debug, Clone)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn stage(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn split(&self, split: &str) -> PathBuf {
        self.root.join("dataset").join(split)
    }

    pub fn manifest(&self) -> PathBuf {
        self.root.join("dataset/manifest.toml")
    }

    pub fn codebook(&self) -> PathBuf {
        self.root.join("tokenizer/codebook.ntc")
    }

    pub fn tokens(&self) -> PathBuf {
        self.root.join("tokenizer/tokens.ntc")
    }

    pub fn generator(&self) -> PathBuf {
        self.root.join("generator/generator.ntc")
    }

    pub fn adapter(&self) -> PathBuf {
        self.root.join("adapter/adapter.ntc")
    }

    pub fn samples(&self, mode: GuidanceMode) -> PathBuf {
        self.root.join("samples").join(mode.as_str())
    }

    pub fn featurenet(&self) -> PathBuf {
        self.root.join("eval/featurenet.ntc")
    }

    pub fn report(&self) -> PathBuf {
        self.root.join("eval/report.json")
    }

    pub fn sweep_table(&self) -> PathBuf {
        self.root.join("sweep/table.tsv")
    }

    pub fn curves(&self) -> PathBuf {
        self.root.join("sweep/curves")
    }
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Writes through a temporary sibling and renames into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        create_dir(parent)?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn require(path: &Path, command: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::MissingArtifact { path: path.to_path_buf(), hint: format!("run `maskgen {command}` first") })
    }
}

fn load_container(path: &Path, command: &str) -> Result<TensorContainer> {
    require(path, command)?;
    TensorContainer::load(path)
}

fn write_stage_config(run: &RunDir, stage: &str, cfg: &RunConfig) -> Result<()> {
    write_atomic(&run.stage(stage).join("config.toml"), cfg.to_toml().as_bytes())
}

fn jsonl_writer(path: &Path) -> Result<BufWriter<File>> {
    if let Some(parent) = path.parent() {
        create_dir(parent)?;
    }
    Ok(BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?))
}

fn write_line(w: &mut BufWriter<File>, path: &Path, record: &impl Serialize) -> Result<()> {
    let line = serde_json::to_string(record).map_err(|e| Error::Format(e.to_string()))?;
    writeln!(w, "{line}").map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub source: String,
    pub train_count: usize,
    pub eval_count: usize,
    pub num_classes: usize,
    pub height: usize,
    pub width: usize,
    pub train_seed: u64,
    pub eval_seed: u64,
}

/// Generates (or ingests) the train and eval splits.
pub fn cmd_dataset(cfg: &RunConfig, out: &Path) -> Result<DatasetManifest> {
    let run = RunDir::new(out);
    let (train, eval, source) = match &cfg.dataset.image_folder {
        Some(dir) => {
            let train = LabeledImageSet::load_image_folder(&dir.join("train"), cfg.stage_seed(Stage::TrainData))?;
            let eval = LabeledImageSet::load_image_folder(&dir.join("eval"), cfg.stage_seed(Stage::EvalData))?;
            if train.dims() != eval.dims() || train.num_classes != eval.num_classes {
                return Err(Error::Config("train and eval folders disagree on dimensions or classes".into()));
            }
            (train, eval, dir.display().to_string())
        }
        None => (generate_dataset(&cfg.train_spec())?, generate_dataset(&cfg.eval_spec())?, "procedural".to_string()),
    };
    for split in ["train", "eval"] {
        let dir = run.split(split);
        if dir.exists() {
            std::fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
    }
    train.write_image_folder(&run.split("train"))?;
    eval.write_image_folder(&run.split("eval"))?;
    let (height, width) = train.dims();
    let manifest = DatasetManifest {
        source,
        train_count: train.len(),
        eval_count: eval.len(),
        num_classes: train.num_classes,
        height,
        width,
        train_seed: train.seed,
        eval_seed: eval.seed,
    };
    let text = toml::to_string(&manifest).map_err(|e| Error::Format(e.to_string()))?;
    write_atomic(&run.manifest(), text.as_bytes())?;
    write_stage_config(&run, "dataset", cfg)?;
    log::info!("dataset: {} train / {} eval images, {} classes", train.len(), eval.len(), train.num_classes);
    Ok(manifest)
}

fn load_manifest(run: &RunDir) -> Result<DatasetManifest> {
    require(&run.manifest(), "dataset")?;
    let text = std::fs::read_to_string(run.manifest()).map_err(|e| Error::io(run.manifest(), e))?;
    toml::from_str(&text).map_err(|e| Error::Format(format!("dataset manifest: {e}")))
}

fn load_split(run: &RunDir, split: &str) -> Result<LabeledImageSet> {
    let manifest = load_manifest(run)?;
    let seed = if split == "train" { manifest.train_seed } else { manifest.eval_seed };
    let mut set = LabeledImageSet::load_image_folder(&run.split(split), seed)?;
    // empty class folders are skipped by the loader; the manifest is authoritative
    set.num_classes = manifest.num_classes;
    Ok(set)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenizerReport {
    pub codebook_size: usize,
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub fit_images: usize,
    /// Mean squared pixel error of the reconstructions on each split.
    pub train_mse: f64,
    pub eval_mse: f64,
    pub codebook_digest: String,
}

fn mse(a: &Image, b: &Image) -> f64 {
    let s: f64 = a.pixels.iter().zip(&b.pixels).map(|(&x, &y)| ((x - y) as f64).powi(2)).sum();
    s / a.pixels.len() as f64
}

fn tokenize_set(set: &LabeledImageSet, codebook: &Codebook) -> Result<(Vec<TokenGrid>, f64)> {
    let mut grids = Vec::with_capacity(set.len());
    let mut err = 0.0;
    for img in &set.images {
        let g = tokenize(img, codebook)?;
        err += mse(img, &detokenize(&g, codebook)?);
        grids.push(g);
    }
    Ok((grids, err / set.len().max(1) as f64))
}

fn grids_tensor(grids: &[TokenGrid]) -> Tensor<f32> {
    let n = grids.first().map_or(0, TokenGrid::len);
    Tensor { shape: vec![grids.len(), n], data: grids.iter().flat_map(|g| g.tokens.iter().map(|&t| t as f32)).collect() }
}

fn labels_tensor(labels: &[usize]) -> Tensor<f32> {
    Tensor { shape: vec![labels.len()], data: labels.iter().map(|&l| l as f32).collect() }
}

/// Fits the patch codebook and tokenizes both splits.
pub fn cmd_tokenizer(cfg: &RunConfig, out: &Path) -> Result<TokenizerReport> {
    let run = RunDir::new(out);
    let train = load_split(&run, "train")?;
    let eval = load_split(&run, "eval")?;
    let t = &cfg.tokenizer;
    let fit = if t.fit_images == 0 { train.len() } else { t.fit_images.min(train.len()) };
    let codebook = data::fit_codebook(&train.images[..fit], t.codebook_size, t.patch(), cfg.stage_seed(Stage::Codebook), t.max_iters)?;
    let (train_grids, train_mse) = tokenize_set(&train, &codebook)?;
    let (eval_grids, eval_mse) = tokenize_set(&eval, &codebook)?;
    let cb = codebook.to_container();
    cb.save(&run.codebook())?;
    let (rows, cols) = (train_grids[0].rows, train_grids[0].cols);
    let mut tc = TensorContainer::new();
    tc.tensors.insert("train.tokens".into(), grids_tensor(&train_grids));
    tc.tensors.insert("train.labels".into(), labels_tensor(&train.labels));
    tc.tensors.insert("eval.tokens".into(), grids_tensor(&eval_grids));
    tc.tensors.insert("eval.labels".into(), labels_tensor(&eval.labels));
    tc.meta.insert("kind".into(), "tokens".into());
    tc.meta.insert("rows".into(), rows.to_string());
    tc.meta.insert("cols".into(), cols.to_string());
    tc.meta.insert("codebook_size".into(), codebook.size.to_string());
    tc.meta.insert("num_classes".into(), train.num_classes.to_string());
    tc.meta.insert("codebook_digest".into(), cb.content_digest());
    tc.save(&run.tokens())?;
    let report = TokenizerReport {
        codebook_size: codebook.size,
        grid_rows: rows,
        grid_cols: cols,
        fit_images: fit,
        train_mse,
        eval_mse,
        codebook_digest: cb.content_digest(),
    };
    let json = serde_json::to_string_pretty(&report).map_err(|e| Error::Format(e.to_string()))?;
    write_atomic(&run.stage("tokenizer").join("report.json"), json.as_bytes())?;
    write_stage_config(&run, "tokenizer", cfg)?;
    log::info!("tokenizer: K={} grid {rows}x{cols}, eval mse {eval_mse:.5}", codebook.size);
    Ok(report)
}

/// Tokenized splits plus the codebook that produced them.
#[derive(Debug, Clone)]
pub struct TokenData {
    pub train: TokenizedSet,
    pub eval: TokenizedSet,
    pub codebook: Codebook,
}

impl TokenData {
    pub fn load(out: &Path) -> Result<Self> {
        let run = RunDir::new(out);
        let codebook = Codebook::from_container(&load_container(&run.codebook(), "tokenizer")?)?;
        let tc = load_container(&run.tokens(), "tokenizer")?;
        let num = |k: &str| -> Result<usize> {
            tc.meta_str(k)?.parse().map_err(|_| Error::Format(format!("token metadata `{k}` is not an integer")))
        };
        let (rows, cols, k, classes) = (num("rows")?, num("cols")?, num("codebook_size")?, num("num_classes")?);
        if k != codebook.size {
            return Err(Error::Format("token file and codebook disagree on size; rerun `maskgen tokenizer`".into()));
        }
        let split = |name: &str| -> Result<TokenizedSet> {
            let get = |key: String| {
                tc.tensors.get(&key).ok_or_else(|| Error::Format(format!("token file lacks `{key}`")))
            };
            let tokens = get(format!("{name}.tokens"))?;
            let labels = get(format!("{name}.labels"))?;
            let n = rows * cols;
            let grids = tokens
                .data
                .chunks(n)
                .map(|c| TokenGrid::new(c.iter().map(|&v| v as TokenId).collect(), rows, cols, k))
                .collect::<Result<Vec<_>>>()?;
            Ok(TokenizedSet { grids, labels: labels.data.iter().map(|&v| v as usize).collect(), num_classes: classes })
        };
        Ok(Self { train: split("train")?, eval: split("eval")?, codebook })
    }

    pub fn arch(&self, cfg: &RunConfig) -> GeneratorArch {
        let g = &self.train.grids[0];
        cfg.generator_arch(self.codebook.size, g.rows, g.cols, self.train.num_classes)
    }

    pub fn reconstruct(&self, set: &TokenizedSet, limit: usize) -> Result<LabeledImageSet> {
        let n = limit.min(set.len());
        Ok(LabeledImageSet {
            images: set.grids[..n].iter().map(|g| detokenize(g, &self.codebook)).collect::<Result<_>>()?,
            labels: set.labels[..n].to_vec(),
            num_classes: set.num_classes,
            seed: 0,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub steps: usize,
    pub final_loss: f64,
    pub num_params: usize,
    pub generator_digest: String,
    pub wall_time: f64,
}

/// Trains the generator and writes its checkpoint and step log.
pub fn cmd_train(cfg: &RunConfig, out: &Path) -> Result<TrainSummary> {
    let run = RunDir::new(out);
    let tokens = TokenData::load(out)?;
    let arch = tokens.arch(cfg);
    let train_cfg = cfg.generator.train_config();
    let log_path = run.stage("generator").join("metrics.jsonl");
    let mut w = jsonl_writer(&log_path)?;
    let mut final_loss = f64::NAN;
    let start = Instant::now();
    let every = (train_cfg.steps / 20).max(1);
    let trained = train_generator(&tokens.train, &arch, &train_cfg, cfg.stage_seed(Stage::Generator), |s| {
        final_loss = s.loss;
        if s.step % every == 0 {
            log::info!("train step {} loss {:.4} lr {:.2e}", s.step, s.loss, s.lr);
        }
        write_line(&mut w, &log_path, s)
    })?;
    w.flush().map_err(|e| Error::io(&log_path, e))?;
    let c = generator::to_container(&arch, &trained.live, &trained.ema);
    c.save(&run.generator())?;
    write_stage_config(&run, "generator", cfg)?;
    Ok(TrainSummary {
        steps: train_cfg.steps,
        final_loss,
        num_params: trained.ema.num_params(),
        generator_digest: c.content_digest(),
        wall_time: start.elapsed().as_secs_f64(),
    })
}

pub fn load_generator(out: &Path) -> Result<Generator> {
    Generator::from_container(&load_container(&RunDir::new(out).generator(), "train")?)
}

/// Loads the adapter, refusing one bound to a different generator checkpoint.
pub fn load_adapter(out: &Path, gen: &Generator) -> Result<(AdapterParams<f32>, String)> {
    let c = load_container(&RunDir::new(out).adapter(), "finetune")?;
    Ok((adapter::from_container(&c, gen)?, c.content_digest()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneSummary {
    pub epochs: usize,
    pub initial_loss: f64,
    pub epoch_losses: Vec<f64>,
    pub adapter_params: usize,
    pub generator_params: usize,
    pub generator_digest: String,
    pub adapter_digest: String,
    pub wall_time: f64,
}

/// Fine-tunes the adapter against the frozen generator checkpoint.
pub fn cmd_finetune(cfg: &RunConfig, out: &Path) -> Result<FinetuneSummary> {
    let run = RunDir::new(out);
    let gen = load_generator(out)?;
    if let Some(expected) = &cfg.adapter.expected_generator_digest {
        if *expected != gen.digest {
            return Err(Error::DigestMismatch { expected: expected.clone(), found: gen.digest.clone() });
        }
    }
    let tokens = TokenData::load(out)?;
    let log_path = run.stage("adapter").join("metrics.jsonl");
    let mut w = jsonl_writer(&log_path)?;
    let start = Instant::now();
    let trained = adapter::finetune(&gen, &tokens.train, &cfg.adapter.finetune_config(), cfg.stage_seed(Stage::Adapter), |s| {
        write_line(&mut w, &log_path, s)
    })?;
    w.flush().map_err(|e| Error::io(&log_path, e))?;
    for (e, l) in trained.epoch_losses.iter().enumerate() {
        log::info!("finetune epoch {e}: mean auxiliary loss {l:.4}");
    }
    let c = adapter::to_container(&trained.live, &trained.ema, &gen.digest);
    c.save(&run.adapter())?;
    write_stage_config(&run, "adapter", cfg)?;
    Ok(FinetuneSummary {
        epochs: trained.epoch_losses.len(),
        initial_loss: trained.initial_loss,
        epoch_losses: trained.epoch_losses,
        adapter_params: trained.ema.num_params(),
        generator_params: gen.params.num_params(),
        generator_digest: gen.digest.clone(),
        adapter_digest: c.content_digest(),
        wall_time: start.elapsed().as_secs_f64(),
    })
}

/// Class-balanced `(class, chain seed)` jobs: job `i` has class `i mod C`.
pub fn balanced_jobs(cfg: &RunConfig, sampling_seed: u64, count: usize, num_classes: usize) -> Vec<(usize, u64)> {
    (0..count)
        .map(|i| {
            let (class, j) = (i % num_classes, i / num_classes);
            (class, cfg.chain_seed(sampling_seed, class, j))
        })
        .collect()
}

/// Decoded samples with their traces.
#[derive(Debug, Clone)]
pub struct SampleSet {
    pub grids: Vec<TokenGrid>,
    pub traces: Vec<SampleTrace>,
}

/// Runs `jobs` in chunks of `batch_size`; results do not depend on chunking.
pub fn sample_jobs(
    gen: &Generator,
    adapter: Option<&AdapterParams<f32>>,
    guidance: &GuidanceConfig,
    jobs: &[(usize, u64)],
    batch_size: usize,
) -> Result<SampleSet> {
    let mut set = SampleSet { grids: Vec::with_capacity(jobs.len()), traces: Vec::with_capacity(jobs.len()) };
    for chunk in jobs.chunks(batch_size.max(1)) {
        for (g, t) in generate_batch(gen, adapter, chunk, guidance)? {
            set.grids.push(g);
            set.traces.push(t);
        }
    }
    Ok(set)
}

fn models_for(out: &Path, mode: GuidanceMode) -> Result<(Generator, Option<(AdapterParams<f32>, String)>)> {
    let gen = load_generator(out)?;
    let adapter = match mode {
        GuidanceMode::SelfGuided => Some(load_adapter(out, &gen)?),
        _ => None,
    };
    Ok((gen, adapter))
}

pub fn token_lines(set: &SampleSet) -> String {
    let mut s = String::new();
    for (g, t) in set.grids.iter().zip(&set.traces) {
        let toks: Vec<String> = g.tokens.iter().map(u32::to_string).collect();
        s.push_str(&format!("{}\t{}\t{}\n", t.class, t.seed, toks.join(" ")));
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleSummary {
    pub mode: GuidanceMode,
    pub count: usize,
    pub nfe_per_sample: usize,
    pub tokens_path: PathBuf,
    pub wall_time: f64,
}

/// Draws `samples_per_class` samples per class with the `[sampling]` settings.
pub fn cmd_sample(cfg: &RunConfig, out: &Path) -> Result<SampleSummary> {
    let run = RunDir::new(out);
    let guidance = cfg.sampling.guidance();
    guidance.validate()?;
    let (gen, adapter) = models_for(out, guidance.mode)?;
    let tokens = TokenData::load(out)?;
    let c = gen.arch.num_classes;
    let jobs = balanced_jobs(cfg, guidance.seed, cfg.sampling.samples_per_class * c, c);
    let start = Instant::now();
    let set = sample_jobs(&gen, adapter.as_ref().map(|a| &a.0), &guidance, &jobs, cfg.sampling.batch_size)?;
    let wall_time = start.elapsed().as_secs_f64();
    let dir = run.samples(guidance.mode);
    let tokens_path = dir.join("tokens.txt");
    write_atomic(&tokens_path, token_lines(&set).as_bytes())?;
    let traces: String = set.traces.iter().map(SampleTrace::to_jsonl).collect();
    write_atomic(&dir.join("traces.jsonl"), traces.as_bytes())?;
    let images = set.grids.iter().map(|g| detokenize(g, &tokens.codebook)).collect::<Result<Vec<_>>>()?;
    image_sheet(&images, c).save_png(&dir.join("sheet.png"))?;
    write_atomic(&dir.join("config.toml"), cfg.to_toml().as_bytes())?;
    Ok(SampleSummary {
        mode: guidance.mode,
        count: set.grids.len(),
        nfe_per_sample: set.traces.first().map_or(0, |t| t.nfe),
        tokens_path,
        wall_time,
    })
}

/// Feature classifier trained on tokenizer reconstructions, cached in the run.
pub fn feature_net(cfg: &RunConfig, out: &Path, tokens: &TokenData) -> Result<FeatureNet> {
    let run = RunDir::new(out);
    let seed = cfg.stage_seed(Stage::FeatureNet);
    if run.featurenet().exists() {
        let net = FeatureNet::from_container(&TensorContainer::load(&run.featurenet())?)?;
        if net.seed == seed && net.accuracy >= cfg.eval.min_accuracy {
            return Ok(net);
        }
    }
    let train = tokens.reconstruct(&tokens.train, usize::MAX)?;
    let held_out = tokens.reconstruct(&tokens.eval, usize::MAX)?;
    let net = train_feature_classifier(&train, &held_out, &cfg.eval.feature_config(), seed)?;
    log::info!("feature net held-out accuracy {:.3}", net.accuracy);
    net.to_container().save(&run.featurenet())?;
    Ok(net)
}

/// Reference statistics over reconstructed eval images.
pub fn reference_stats(cfg: &RunConfig, net: &FeatureNet, tokens: &TokenData) -> Result<ReferenceStats> {
    let reference = tokens.reconstruct(&tokens.eval, cfg.eval.num_reference)?;
    ReferenceStats::new(net, &reference.images)
}

fn score(
    cfg: &RunConfig,
    net: &FeatureNet,
    reference: &ReferenceStats,
    tokens: &TokenData,
    set: &SampleSet,
    gen: &Generator,
    adapter_digest: Option<String>,
) -> Result<MetricsReport> {
    let images = set.grids.iter().map(|g| detokenize(g, &tokens.codebook)).collect::<Result<Vec<_>>>()?;
    let mut report = evaluate(net, reference, &images, cfg.eval.k)?;
    report.generator_digest = gen.digest.clone();
    report.adapter_digest = adapter_digest;
    report.config_digest = cfg.digest();
    Ok(report)
}

/// Samples `eval.num_generated` images with `[sampling]` and scores them.
pub fn cmd_eval(cfg: &RunConfig, out: &Path) -> Result<MetricsReport> {
    let run = RunDir::new(out);
    let guidance = cfg.sampling.guidance();
    guidance.validate()?;
    let (gen, adapter) = models_for(out, guidance.mode)?;
    let tokens = TokenData::load(out)?;
    let net = feature_net(cfg, out, &tokens)?;
    let reference = reference_stats(cfg, &net, &tokens)?;
    let jobs = balanced_jobs(cfg, guidance.seed, cfg.eval.num_generated, gen.arch.num_classes);
    let set = sample_jobs(&gen, adapter.as_ref().map(|a| &a.0), &guidance, &jobs, cfg.sampling.batch_size)?;
    let report = score(cfg, &net, &reference, &tokens, &set, &gen, adapter.map(|a| a.1))?;
    let json = serde_json::to_string_pretty(&report).map_err(|e| Error::Format(e.to_string()))?;
    write_atomic(&run.report(), json.as_bytes())?;
    write_stage_config(&run, "eval", cfg)?;
    Ok(report)
}

pub const SWEEP_HEADER: &str = "mode\tscale\ttemperature\tsteps\tseed\tdesk_fid\tdesk_is\tprecision\trecall\tnfe\tnum_generated\twall_time";

/// One grid point of a sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    pub mode: GuidanceMode,
    pub scale: f64,
    pub temperature: f64,
    pub steps: usize,
    pub seed: u64,
}

impl SweepPoint {
    pub fn key(&self) -> String {
        format!("{}\t{}\t{}\t{}\t{}", self.mode, self.scale, self.temperature, self.steps, self.seed)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub point: SweepPoint,
    pub desk_fid: f64,
    pub desk_is: f64,
    pub precision: f64,
    pub recall: f64,
    pub nfe: usize,
    pub num_generated: usize,
    pub wall_time: f64,
}

impl SweepRow {
    fn to_line(&self) -> String {
        format!(
            "{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{}\t{}\t{:.3}",
            self.point.key(),
            self.desk_fid,
            self.desk_is,
            self.precision,
            self.recall,
            self.nfe,
            self.num_generated,
            self.wall_time
        )
    }

    fn parse(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 12 {
            return Err(Error::Format(format!("sweep row has {} fields: `{line}`", f.len())));
        }
        let num = |i: usize| -> Result<f64> { f[i].parse().map_err(|_| Error::Format(format!("bad number `{}`", f[i]))) };
        Ok(Self {
            point: SweepPoint {
                mode: f[0].parse()?,
                scale: num(1)?,
                temperature: num(2)?,
                steps: num(3)? as usize,
                seed: f[4].parse().map_err(|_| Error::Format(format!("bad seed `{}`", f[4])))?,
            },
            desk_fid: num(5)?,
            desk_is: num(6)?,
            precision: num(7)?,
            recall: num(8)?,
            nfe: num(9)? as usize,
            num_generated: num(10)? as usize,
            wall_time: num(11)?,
        })
    }
}

/// Rows of an existing table (empty when absent).
pub fn read_sweep_table(path: &Path) -> Result<Vec<SweepRow>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == SWEEP_HEADER => {}
        _ => return Err(Error::Format(format!("{} does not start with the sweep header", path.display()))),
    }
    lines.filter(|l| !l.trim().is_empty()).map(SweepRow::parse).collect()
}

/// Grid points in table order. Unguided points ignore the scale, so they are
/// listed once with scale 0.
pub fn sweep_points(cfg: &RunConfig) -> Vec<SweepPoint> {
    let s = &cfg.sweep;
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for &mode in &s.modes {
        let scales: Vec<f64> = if mode == GuidanceMode::None { vec![0.0] } else { s.scales.clone() };
        for &scale in &scales {
            for &steps in &s.steps {
                for &temperature in &s.temperatures {
                    for &seed in &s.seeds {
                        let p = SweepPoint { mode, scale, temperature, steps, seed };
                        if seen.insert(p.key()) {
                            out.push(p);
                        }
                    }
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepSummary {
    pub rows: Vec<SweepRow>,
    pub computed: usize,
    pub skipped: usize,
}

/// Evaluates every missing grid point, appending each finished row to the table.
pub fn cmd_sweep(cfg: &RunConfig, out: &Path) -> Result<SweepSummary> {
    let run = RunDir::new(out);
    let points = sweep_points(cfg);
    if points.is_empty() {
        return Err(Error::Config("the sweep grid is empty".into()));
    }
    let table = run.sweep_table();
    let mut rows = read_sweep_table(&table)?;
    let done: HashSet<String> = rows.iter().map(|r| r.point.key()).collect();
    let todo: Vec<&SweepPoint> = points.iter().filter(|p| !done.contains(&p.key())).collect();
    let skipped = points.len() - todo.len();
    write_stage_config(&run, "sweep", cfg)?;
    if !todo.is_empty() {
        let gen = load_generator(out)?;
        let adapter = if todo.iter().any(|p| p.mode == GuidanceMode::SelfGuided) { Some(load_adapter(out, &gen)?) } else { None };
        let tokens = TokenData::load(out)?;
        let net = feature_net(cfg, out, &tokens)?;
        let reference = reference_stats(cfg, &net, &tokens)?;
        for p in &todo {
            let guidance = GuidanceConfig {
                mode: p.mode,
                scale: p.scale,
                temperature: p.temperature,
                steps: p.steps,
                seed: p.seed,
                ..cfg.sampling.guidance()
            };
            let jobs = balanced_jobs(cfg, p.seed, cfg.sweep.num_generated, gen.arch.num_classes);
            let start = Instant::now();
            let set = sample_jobs(&gen, adapter.as_ref().map(|a| &a.0), &guidance, &jobs, cfg.sampling.batch_size)?;
            let report = score(cfg, &net, &reference, &tokens, &set, &gen, None)?;
            let row = SweepRow {
                point: (*p).clone(),
                desk_fid: report.desk_fid,
                desk_is: report.desk_is,
                precision: report.precision,
                recall: report.recall,
                nfe: set.traces.first().map_or(0, |t| t.nfe),
                num_generated: set.grids.len(),
                wall_time: start.elapsed().as_secs_f64(),
            };
            log::info!("sweep {}: fid {:.3} is {:.3}", p.key().replace('\t', " "), row.desk_fid, row.desk_is);
            rows.push(row);
            let mut text = String::from(SWEEP_HEADER);
            text.push('\n');
            for r in &rows {
                text.push_str(&r.to_line());
                text.push('\n');
            }
            write_atomic(&table, text.as_bytes())?;
        }
    }
    write_curves(&run, &rows)?;
    Ok(SweepSummary { rows, computed: todo.len(), skipped })
}

/// Seed-averaged metric per temperature, one file per (mode, scale, steps).
pub fn write_curves(run: &RunDir, rows: &[SweepRow]) -> Result<()> {
    let mut groups: BTreeMap<String, BTreeMap<u64, Vec<&SweepRow>>> = BTreeMap::new();
    for r in rows {
        let name = format!("{}_s{}_T{}.tsv", r.point.mode, r.point.scale, r.point.steps);
        groups.entry(name).or_default().entry(r.point.temperature.to_bits()).or_default().push(r);
    }
    for (name, by_temp) in groups {
        let mut entries: Vec<(f64, &Vec<&SweepRow>)> = by_temp.iter().map(|(b, v)| (f64::from_bits(*b), v)).collect();
        entries.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut text = String::from("temperature\tseeds\tdesk_fid\tdesk_is\tprecision\trecall\n");
        for (temp, rs) in entries {
            let mean = |f: fn(&SweepRow) -> f64| rs.iter().map(|r| f(r)).sum::<f64>() / rs.len() as f64;
            text.push_str(&format!(
                "{temp}\t{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\n",
                rs.len(),
                mean(|r| r.desk_fid),
                mean(|r| r.desk_is),
                mean(|r| r.precision),
                mean(|r| r.recall)
            ));
        }
        write_atomic(&run.curves().join(name), text.as_bytes())?;
    }
    Ok(())
}
