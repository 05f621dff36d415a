//! Helpers shared by the integration and acceptance test targets.
#![allow(dead_code)]

use maskgen_core::adapter::{aux_loss_and_grad, AdapterParams, Backbone};
use maskgen_core::data::TokenId;
use maskgen_core::generator::{backward, forward_with_cache, masked_loss, GeneratorArch, GeneratorParams};
use maskgen_core::rng::{stream, Stream};
use maskgen_core::tensor::{ParamSet, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn micro_arch() -> GeneratorArch {
    GeneratorArch { codebook_size: 8, grid_rows: 2, grid_cols: 4, num_classes: 3, layers: 2, d_model: 16, heads: 2, mlp_ratio: 2 }
}

/// Randomizes every tensor so that gains, biases and embeddings all matter.
pub fn jitter<P: ParamSet<f64>>(p: &mut P, std: f64, seed: u64) {
    let mut rng = stream(seed, Stream::Init);
    for t in p.tensors_mut() {
        let noise = Tensor::<f64>::randn(&t.shape, std, &mut rng);
        t.data.iter_mut().zip(&noise.data).for_each(|(a, b)| *a += b);
    }
}

pub struct MicroBatch {
    pub x0: Vec<TokenId>,
    pub inputs: Vec<TokenId>,
    pub unmasked: Vec<bool>,
    pub classes: Vec<usize>,
}

pub fn micro_batch(arch: &GeneratorArch, batch: usize, seed: u64, corrupt: bool) -> MicroBatch {
    let mut rng = stream(seed, Stream::Masking);
    let n = arch.tokens();
    let k = arch.codebook_size as TokenId;
    let x0: Vec<TokenId> = (0..batch * n).map(|_| rng.random_range(0..k)).collect();
    let unmasked: Vec<bool> = (0..batch * n).map(|i| i % 3 == 0 || rng.random::<f64>() < 0.3).collect();
    let inputs = x0
        .iter()
        .zip(&unmasked)
        .map(|(&t, &u)| match (u, corrupt && rng.random::<f64>() < 0.3) {
            (false, _) => arch.mask_id(),
            (true, true) => (t + 1) % k,
            (true, false) => t,
        })
        .collect();
    let classes = (0..batch).map(|b| b % arch.num_classes).collect();
    MicroBatch { x0, inputs, unmasked, classes }
}

#[derive(Debug)]
pub struct GradReport {
    pub coords: usize,
    pub max_rel: f64,
    pub worst: String,
}

fn relative(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-7)
}

/// Compares `analytic` with central differences of `loss` at `coords`
/// coordinates spread over all tensors.
pub fn check<P: ParamSet<f64>>(params: &P, analytic: &P, coords: usize, seed: u64, loss: impl Fn(&P) -> f64) -> GradReport {
    let mut rng = stream(seed, Stream::Batching);
    let names: Vec<String> = params.named().into_iter().map(|(n, _)| n).collect();
    let grads = analytic.to_named_map();
    let eps = 1e-5;
    let mut report = GradReport { coords: 0, max_rel: 0.0, worst: String::new() };
    for c in 0..coords {
        let ti = if c < names.len() { c } else { rng.random_range(0..names.len()) };
        let name = &names[ti];
        let len = grads[name].data.len();
        let idx = rng.random_range(0..len);
        let eval = |delta: f64| {
            let mut p = params.clone();
            for (n, t) in p.named_mut() {
                if &n == name {
                    t.data[idx] += delta;
                }
            }
            loss(&p)
        };
        let numeric = (eval(eps) - eval(-eps)) / (2.0 * eps);
        let a = grads[name].data[idx];
        let rel = relative(a, numeric);
        if rel > report.max_rel {
            report.max_rel = rel;
            report.worst = format!("{name}[{idx}] analytic {a:e} numeric {numeric:e}");
        }
        report.coords += 1;
    }
    report
}

pub fn generator_gradcheck(coords: usize, seed: u64) -> GradReport {
    let arch = micro_arch();
    let mut gen = GeneratorParams::<f64>::init(&arch, &mut stream(seed, Stream::Init));
    jitter(&mut gen, 0.3, seed + 1);
    let b = micro_batch(&arch, 2, seed, false);
    let loss = |p: &GeneratorParams<f64>| {
        let (out, _) = forward_with_cache::<f64, ChaCha8Rng>(p, &arch, &b.inputs, &b.classes, None, None).unwrap();
        masked_loss(&out.logits, arch.codebook_size, &b.x0, &b.unmasked).unwrap().0
    };
    let (out, cache) = forward_with_cache::<f64, ChaCha8Rng>(&gen, &arch, &b.inputs, &b.classes, None, None).unwrap();
    let (_, dlogits) = masked_loss(&out.logits, arch.codebook_size, &b.x0, &b.unmasked).unwrap();
    let mut grads = gen.zeros_like();
    backward(&gen, &arch, &cache, &dlogits, Some(&mut grads), false);
    check(&gen, &grads, coords, seed, loss)
}

pub fn adapter_gradcheck(coords: usize, seed: u64) -> GradReport {
    let arch = micro_arch();
    let mut gen = GeneratorParams::<f64>::init(&arch, &mut stream(seed, Stream::Init));
    jitter(&mut gen, 0.3, seed + 1);
    let mut adapter = AdapterParams::<f64>::init(&arch, &mut stream(seed + 2, Stream::Init));
    jitter(&mut adapter, 0.1, seed + 3);
    let b = micro_batch(&arch, 2, seed, true);
    let lambda = 0.05;
    let loss = |a: &AdapterParams<f64>| {
        aux_loss_and_grad(&gen, &arch, a, &b.inputs, &b.classes, &b.x0, &b.unmasked, lambda, Backbone::Frozen).unwrap().loss
    };
    let g = aux_loss_and_grad(&gen, &arch, &adapter, &b.inputs, &b.classes, &b.x0, &b.unmasked, lambda, Backbone::Frozen).unwrap();
    check(&adapter, &g.adapter, coords, seed, loss)
}

/// Exhaustive k-NN ball membership over 2-D points: sorts every distance
/// instead of selecting, and compares Euclidean rather than squared lengths.
pub fn brute_force_precision_recall(real: &[[f64; 2]], generated: &[[f64; 2]], k: usize) -> (f64, f64) {
    fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
        ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
    }
    fn radii(set: &[[f64; 2]], k: usize) -> Vec<f64> {
        set.iter()
            .enumerate()
            .map(|(i, &a)| {
                let mut d: Vec<f64> = set.iter().enumerate().filter(|&(j, _)| j != i).map(|(_, &b)| dist(a, b)).collect();
                d.sort_by(|x, y| x.partial_cmp(y).unwrap());
                d[k - 1]
            })
            .collect()
    }
    fn covered(support: &[[f64; 2]], r: &[f64], queries: &[[f64; 2]]) -> f64 {
        let mut hits = 0;
        for &q in queries {
            let mut inside = false;
            for (i, &s) in support.iter().enumerate() {
                if dist(q, s) <= r[i] {
                    inside = true;
                }
            }
            if inside {
                hits += 1;
            }
        }
        hits as f64 / queries.len() as f64
    }
    (covered(real, &radii(real, k), generated), covered(generated, &radii(generated, k), real))
}

pub fn flatten(points: &[[f64; 2]]) -> Vec<f64> {
    points.iter().flat_map(|p| p.iter().copied()).collect()
}

/// Twenty hand-placed real points (a 4×4 lattice plus a far cluster) and
/// twenty generated points: some on lattice sites, some exactly on ball
/// boundaries, some between sites and some far away.
pub fn hand_placed_sets() -> (Vec<[f64; 2]>, Vec<[f64; 2]>) {
    let mut real: Vec<[f64; 2]> = (0..16).map(|i| [(i % 4) as f64, (i / 4) as f64]).collect();
    real.extend([[10.0, 10.0], [10.0, 11.0], [11.0, 10.0], [13.0, 13.0]]);
    let generated = vec![
        [0.0, 0.0],
        [1.5, 1.5],
        [3.0, 3.0],
        [4.0, 0.0],
        [-1.0, 0.0],
        [5.0, 5.0],
        [0.5, 2.5],
        [2.0, -1.0],
        [10.5, 10.5],
        [12.0, 12.0],
        [13.0, 13.0],
        [15.0, 15.0],
        [3.7, 1.0],
        [-0.9, -0.9],
        [1.0, 4.2],
        [6.0, 0.0],
        [2.0, 2.0],
        [11.0, 11.0],
        [20.0, 0.0],
        [0.0, 20.0],
    ];
    (real, generated)
}
