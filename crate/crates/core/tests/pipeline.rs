mod common;

use maskgen_core::adapter::{self, AdapterParams, FinetuneConfig};
use maskgen_core::config::RunConfig;
use maskgen_core::data::{TokenGrid, TokenId};
use maskgen_core::generator::{self, train_generator, Generator, GeneratorArch, GeneratorParams, TokenizedSet, TrainConfig};
use maskgen_core::rng::{stream, Stream};
use maskgen_core::sampler::{generate, generate_batch, GuidanceConfig, GuidanceMode};
use maskgen_core::tensor::ParamSet;
use maskgen_core::Error;
use rand::Rng;

fn random_set(arch: &GeneratorArch, count: usize, seed: u64) -> TokenizedSet {
    let mut rng = stream(seed, Stream::Dataset);
    let grids = (0..count)
        .map(|_| {
            let toks = (0..arch.tokens()).map(|_| rng.random_range(0..arch.codebook_size as TokenId)).collect();
            TokenGrid::new(toks, arch.grid_rows, arch.grid_cols, arch.codebook_size).unwrap()
        })
        .collect();
    let labels = (0..count).map(|i| i % arch.num_classes).collect();
    TokenizedSet { grids, labels, num_classes: arch.num_classes }
}

fn small_arch() -> GeneratorArch {
    GeneratorArch { codebook_size: 16, grid_rows: 4, grid_cols: 4, num_classes: 3, layers: 2, d_model: 32, heads: 2, mlp_ratio: 2 }
}

#[test]
fn single_image_is_memorized() {
    let arch = GeneratorArch { num_classes: 1, ..small_arch() };
    let data = random_set(&arch, 1, 11);
    let cfg = TrainConfig {
        steps: 2000,
        batch_size: 8,
        lr: 3e-3,
        warmup_steps: 50,
        weight_decay: 0.0,
        dropout: 0.0,
        ema_decay: 0.0,
        ..TrainConfig::default()
    };
    let mut losses = Vec::new();
    train_generator(&data, &arch, &cfg, 0, |s| {
        losses.push(s.loss);
        Ok(())
    })
    .unwrap();
    let tail = &losses[losses.len() - 100..];
    let mean = tail.iter().sum::<f64>() / tail.len() as f64;
    assert!(mean < 0.1, "final training loss {mean}");
}

#[test]
fn adapter_size_sits_in_the_target_band() {
    let defaults = RunConfig::default();
    let desk: RunConfig =
        RunConfig::from_toml_str(&std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/desk.toml")).unwrap(), &[])
            .unwrap();
    for (cfg, k) in [(&defaults, 128), (&defaults, 256), (&desk, 128)] {
        let arch = cfg.generator_arch(k, 8, 8, cfg.dataset.num_classes);
        let g = GeneratorParams::<f32>::zeros(&arch).num_params() as f64;
        let a = AdapterParams::<f32>::zeros(&arch).num_params() as f64;
        let ratio = a / g;
        assert!((0.15..=0.30).contains(&ratio), "L={} d={} K={k}: ratio {ratio}", arch.layers, arch.d_model);
    }
}

fn micro_generator(seed: u64) -> (Generator, AdapterParams<f32>) {
    let arch = small_arch();
    let params = GeneratorParams::<f32>::init(&arch, &mut stream(seed, Stream::Init));
    let adapter = AdapterParams::<f32>::init(&arch, &mut stream(seed + 1, Stream::Init));
    (Generator::new(arch, params), adapter)
}

#[test]
fn batched_generation_matches_one_at_a_time() {
    let (gen, adapter) = micro_generator(3);
    for mode in [GuidanceMode::None, GuidanceMode::SelfGuided, GuidanceMode::Cfg, GuidanceMode::Blur] {
        let cfg = GuidanceConfig { mode, steps: 6, temperature: 2.0, ..GuidanceConfig::default() };
        let jobs: Vec<(usize, u64)> = (0..7).map(|i| (i % 3, 100 + i as u64)).collect();
        let batched = generate_batch(&gen, Some(&adapter), &jobs, &cfg).unwrap();
        for (&(class, seed), (grid, trace)) in jobs.iter().zip(&batched) {
            let (g1, t1) = generate(&gen, Some(&adapter), class, &GuidanceConfig { seed, ..cfg }).unwrap();
            assert_eq!(&g1, grid, "{mode}");
            assert_eq!(&t1, trace, "{mode}");
        }
    }
}

#[test]
fn every_step_fixes_the_scheduled_number_of_tokens() {
    let (gen, adapter) = micro_generator(5);
    let cfg = GuidanceConfig { steps: 7, ..GuidanceConfig::default() };
    let (grid, trace) = generate(&gen, Some(&adapter), 1, &cfg).unwrap();
    assert_eq!(grid.masked_count(), 0);
    let schedule = maskgen_core::mask::mask_schedule(7, 16).unwrap();
    let mut fixed = std::collections::HashSet::new();
    for rec in &trace.steps {
        assert_eq!(rec.newly_fixed.len(), schedule[rec.t] - schedule[rec.t - 1]);
        for &p in &rec.newly_fixed {
            assert!(fixed.insert(p), "position {p} fixed twice");
        }
    }
    assert_eq!(fixed.len(), 16);
    assert_eq!(trace.nfe, 14);
}

#[test]
fn self_guidance_without_an_adapter_is_a_configuration_error() {
    let (gen, _) = micro_generator(1);
    let err = generate(&gen, None, 0, &GuidanceConfig::default()).unwrap_err();
    assert!(matches!(err, Error::Config(_)));
}

/// Two prototype grids per class. The class alone does not say which
/// prototype an image came from.
fn structured_set(arch: &GeneratorArch, count: usize, seed: u64) -> TokenizedSet {
    let protos = random_set(arch, 2 * arch.num_classes, seed);
    let mut rng = stream(seed, Stream::Corruption);
    let grids = (0..count).map(|i| protos.grids[i % arch.num_classes + arch.num_classes * rng.random_range(0..2)].clone()).collect();
    let labels = (0..count).map(|i| i % arch.num_classes).collect();
    TokenizedSet { grids, labels, num_classes: arch.num_classes }
}

#[test]
fn auxiliary_loss_falls_during_finetuning() {
    let arch = small_arch();
    let data = structured_set(&arch, 240, 2);
    let trained = train_generator(
        &data,
        &arch,
        &TrainConfig { steps: 800, batch_size: 16, lr: 3e-3, warmup_steps: 20, dropout: 0.0, ema_decay: 0.0, ..TrainConfig::default() },
        0,
        |_| Ok(()),
    )
    .unwrap();
    let gen = Generator::from_container(&generator::to_container(&arch, &trained.live, &trained.ema)).unwrap();
    let cfg = FinetuneConfig { epochs: 10, batch_size: 8, warmup_steps: 5, lr: 3e-3, ..FinetuneConfig::default() };
    for seed in 0..3 {
        let before = gen.params.digest();
        let run = adapter::finetune(&gen, &data, &cfg, seed, |_| Ok(())).unwrap();
        assert_eq!(gen.params.digest(), before);
        let last = *run.epoch_losses.last().unwrap();
        assert!(last < run.initial_loss, "seed {seed}: {} → {last}", run.initial_loss);
        assert!(last < run.epoch_losses[0], "seed {seed}: {:?}", run.epoch_losses);
        assert!(run.ema.all_finite());
    }
}
