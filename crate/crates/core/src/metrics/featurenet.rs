//! Small convolutional classifier whose penultimate layer is the feature
//! space for the desk metrics.
//!
//! conv3×3(3→16)·ReLU·avgpool2 → conv3×3(16→32)·ReLU·avgpool2 →
//! conv3×3(32→64)·ReLU·global-avg-pool → 64 features → linear → C logits.
//! Images are `H × W × 3` row-major; `H` and `W` must be divisible by 4.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::container::TensorContainer;
use crate::data::{Image, LabeledImageSet};
use crate::error::{Error, Result};
use crate::nn;
use crate::rng::{stream, Stream};
use crate::tensor::{AdamW, Float, ParamSet, Tensor};

pub const FEATURE_DIM: usize = 64;
const CHANNELS: [usize; 4] = [3, 16, 32, FEATURE_DIM];

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureNetParams<T> {
    pub conv_w: Vec<Tensor<T>>,
    pub conv_b: Vec<Tensor<T>>,
    pub fc_w: Tensor<T>,
    pub fc_b: Tensor<T>,
}

impl<T: Float> FeatureNetParams<T> {
    pub fn init(num_classes: usize, rng: &mut impl Rng) -> Self {
        let mut conv_w = Vec::new();
        let mut conv_b = Vec::new();
        for l in 0..3 {
            let fan_in = 9 * CHANNELS[l];
            conv_w.push(Tensor::randn(&[fan_in, CHANNELS[l + 1]], (2.0 / fan_in as f64).sqrt(), rng));
            conv_b.push(Tensor::zeros(&[CHANNELS[l + 1]]));
        }
        Self {
            conv_w,
            conv_b,
            fc_w: Tensor::randn(&[FEATURE_DIM, num_classes], (1.0 / FEATURE_DIM as f64).sqrt(), rng),
            fc_b: Tensor::zeros(&[num_classes]),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.fc_b.len()
    }
}

impl<T: Float> ParamSet<T> for FeatureNetParams<T> {
    fn named(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (i, (w, b)) in self.conv_w.iter().zip(&self.conv_b).enumerate() {
            out.push((format!("conv{i}.w"), w));
            out.push((format!("conv{i}.b"), b));
        }
        out.push(("fc.w".into(), &self.fc_w));
        out.push(("fc.b".into(), &self.fc_b));
        out
    }

    fn named_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = Vec::new();
        for (i, (w, b)) in self.conv_w.iter_mut().zip(self.conv_b.iter_mut()).enumerate() {
            out.push((format!("conv{i}.w"), w));
            out.push((format!("conv{i}.b"), b));
        }
        out.push(("fc.w".into(), &mut self.fc_w));
        out.push(("fc.b".into(), &mut self.fc_b));
        out
    }
}

/// `batch·h·w × 9·cin` patches of a zero-padded 3×3 neighbourhood.
fn im2col<T: Float>(x: &[T], batch: usize, h: usize, w: usize, cin: usize) -> Vec<T> {
    let width = 9 * cin;
    let mut cols = vec![T::zero(); batch * h * w * width];
    for b in 0..batch {
        for y in 0..h {
            for xx in 0..w {
                let row = ((b * h + y) * w + xx) * width;
                for dy in 0..3 {
                    let sy = y as isize + dy as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for dx in 0..3 {
                        let sx = xx as isize + dx as isize - 1;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        let src = ((b * h + sy as usize) * w + sx as usize) * cin;
                        let dst = row + (dy * 3 + dx) * cin;
                        cols[dst..dst + cin].copy_from_slice(&x[src..src + cin]);
                    }
                }
            }
        }
    }
    cols
}

fn col2im<T: Float>(dcols: &[T], batch: usize, h: usize, w: usize, cin: usize) -> Vec<T> {
    let width = 9 * cin;
    let mut dx = vec![T::zero(); batch * h * w * cin];
    for b in 0..batch {
        for y in 0..h {
            for xx in 0..w {
                let row = ((b * h + y) * w + xx) * width;
                for dy in 0..3 {
                    let sy = y as isize + dy as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for dxo in 0..3 {
                        let sx = xx as isize + dxo as isize - 1;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        let dst = ((b * h + sy as usize) * w + sx as usize) * cin;
                        let src = row + (dy * 3 + dxo) * cin;
                        for c in 0..cin {
                            dx[dst + c] += dcols[src + c];
                        }
                    }
                }
            }
        }
    }
    dx
}

fn avgpool2<T: Float>(x: &[T], batch: usize, h: usize, w: usize, c: usize) -> Vec<T> {
    let (oh, ow) = (h / 2, w / 2);
    let quarter = T::c(0.25);
    let mut out = vec![T::zero(); batch * oh * ow * c];
    for b in 0..batch {
        for y in 0..oh {
            for xx in 0..ow {
                let dst = ((b * oh + y) * ow + xx) * c;
                for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    let src = ((b * h + 2 * y + dy) * w + 2 * xx + dx) * c;
                    for ch in 0..c {
                        out[dst + ch] += x[src + ch] * quarter;
                    }
                }
            }
        }
    }
    out
}

fn avgpool2_backward<T: Float>(dy: &[T], batch: usize, h: usize, w: usize, c: usize) -> Vec<T> {
    let (oh, ow) = (h / 2, w / 2);
    let quarter = T::c(0.25);
    let mut dx = vec![T::zero(); batch * h * w * c];
    for b in 0..batch {
        for y in 0..oh {
            for xx in 0..ow {
                let src = ((b * oh + y) * ow + xx) * c;
                for (ddy, ddx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    let dst = ((b * h + 2 * y + ddy) * w + 2 * xx + ddx) * c;
                    for ch in 0..c {
                        dx[dst + ch] = dy[src + ch] * quarter;
                    }
                }
            }
        }
    }
    dx
}

struct ConvCache<T> {
    cols: Vec<T>,
    pre: Vec<T>,
    h: usize,
    w: usize,
}

struct NetCache<T> {
    convs: Vec<ConvCache<T>>,
    features: Vec<T>,
    batch: usize,
}

fn forward_impl<T: Float>(p: &FeatureNetParams<T>, x: &[T], batch: usize, h: usize, w: usize) -> (Vec<T>, Vec<T>, NetCache<T>) {
    let mut act = x.to_vec();
    let (mut ch, mut cw) = (h, w);
    let mut convs = Vec::with_capacity(3);
    for l in 0..3 {
        let (cin, cout) = (CHANNELS[l], CHANNELS[l + 1]);
        let cols = im2col(&act, batch, ch, cw, cin);
        let pre = nn::linear(&cols, batch * ch * cw, &p.conv_w[l], &p.conv_b[l]);
        let relu: Vec<T> = pre.iter().map(|&v| v.max(T::zero())).collect();
        convs.push(ConvCache { cols, pre, h: ch, w: cw });
        if l < 2 {
            act = avgpool2(&relu, batch, ch, cw, cout);
            ch /= 2;
            cw /= 2;
        } else {
            act = relu;
        }
    }
    let hw = ch * cw;
    let inv = T::c(1.0 / hw as f64);
    let mut features = vec![T::zero(); batch * FEATURE_DIM];
    for b in 0..batch {
        for s in 0..hw {
            let src = &act[(b * hw + s) * FEATURE_DIM..(b * hw + s + 1) * FEATURE_DIM];
            features[b * FEATURE_DIM..(b + 1) * FEATURE_DIM].iter_mut().zip(src).for_each(|(f, &v)| *f += v * inv);
        }
    }
    let logits = nn::linear(&features, batch, &p.fc_w, &p.fc_b);
    (features.clone(), logits, NetCache { convs, features, batch })
}

fn backward_impl<T: Float>(p: &FeatureNetParams<T>, cache: &NetCache<T>, dlogits: &[T], g: &mut FeatureNetParams<T>) {
    let batch = cache.batch;
    let dfeat = nn::linear_backward(&cache.features, batch, &p.fc_w, dlogits, Some((&mut g.fc_w, &mut g.fc_b)), true);
    let last = &cache.convs[2];
    let hw = last.h * last.w;
    let inv = T::c(1.0 / hw as f64);
    let mut dact = vec![T::zero(); batch * hw * FEATURE_DIM];
    for b in 0..batch {
        for s in 0..hw {
            let dst = &mut dact[(b * hw + s) * FEATURE_DIM..(b * hw + s + 1) * FEATURE_DIM];
            dst.iter_mut().zip(&dfeat[b * FEATURE_DIM..(b + 1) * FEATURE_DIM]).for_each(|(d, &v)| *d = v * inv);
        }
    }
    for l in (0..3).rev() {
        let c = &cache.convs[l];
        let (cin, cout) = (CHANNELS[l], CHANNELS[l + 1]);
        let drelu = if l < 2 { avgpool2_backward(&dact, batch, c.h, c.w, cout) } else { std::mem::take(&mut dact) };
        let dpre: Vec<T> = drelu.iter().zip(&c.pre).map(|(&d, &v)| if v > T::zero() { d } else { T::zero() }).collect();
        let (gw, gb) = (&mut g.conv_w[l], &mut g.conv_b[l]);
        let dcols = nn::linear_backward(&c.cols, batch * c.h * c.w, &p.conv_w[l], &dpre, Some((gw, gb)), l > 0);
        if l > 0 {
            dact = col2im(&dcols, batch, c.h, c.w, cin);
        }
    }
}

fn stack_images<T: Float>(images: &[&Image]) -> Vec<T> {
    images.iter().flat_map(|img| img.pixels.iter().map(|&v| T::c(v as f64))).collect()
}

/// Training settings for the feature classifier.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureNetConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Held-out accuracy required before the features may be used.
    pub min_accuracy: f64,
}

impl Default for FeatureNetConfig {
    fn default() -> Self {
        Self { epochs: 4, batch_size: 32, lr: 2e-3, min_accuracy: 0.9 }
    }
}

#[derive(Debug, Clone)]
pub struct FeatureNet {
    pub params: FeatureNetParams<f32>,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
    /// Held-out accuracy measured after training.
    pub accuracy: f64,
}

impl FeatureNet {
    pub fn num_classes(&self) -> usize {
        self.params.num_classes()
    }

    fn check_dims(&self, images: &[Image]) -> Result<()> {
        if let Some(img) = images.iter().find(|i| i.height != self.height || i.width != self.width) {
            return Err(Error::Config(format!(
                "image {}x{} does not match feature net input {}x{}",
                img.height, img.width, self.height, self.width
            )));
        }
        Ok(())
    }

    /// Features (`M × 64`) and class probabilities (`M × C`).
    pub fn embed(&self, images: &[Image]) -> Result<(Vec<f64>, Vec<f64>)> {
        self.check_dims(images)?;
        let c = self.num_classes();
        let mut feats = Vec::with_capacity(images.len() * FEATURE_DIM);
        let mut probs = Vec::with_capacity(images.len() * c);
        for chunk in images.chunks(64) {
            let refs: Vec<&Image> = chunk.iter().collect();
            let x = stack_images::<f32>(&refs);
            let (f, logits, _) = forward_impl(&self.params, &x, chunk.len(), self.height, self.width);
            feats.extend(f.iter().map(|&v| v as f64));
            for row in logits.chunks(c) {
                let lp = crate::sampler::log_softmax(row, c);
                probs.extend(lp.iter().map(|v| v.exp()));
            }
        }
        Ok((feats, probs))
    }

    pub fn accuracy_on(&self, set: &LabeledImageSet) -> Result<f64> {
        let (_, probs) = self.embed(&set.images)?;
        let c = self.num_classes();
        let correct = probs
            .chunks(c)
            .zip(&set.labels)
            .filter(|(row, &label)| {
                let best = (0..c).fold(0, |b, j| if row[j] > row[b] { j } else { b });
                best == label
            })
            .count();
        Ok(correct as f64 / set.len().max(1) as f64)
    }

    pub fn to_container(&self) -> TensorContainer {
        let mut c = TensorContainer::new();
        c.insert_params("", &self.params);
        c.meta.insert("kind".into(), "featurenet".into());
        c.meta.insert("height".into(), self.height.to_string());
        c.meta.insert("width".into(), self.width.to_string());
        c.meta.insert("seed".into(), self.seed.to_string());
        c.meta.insert("accuracy".into(), self.accuracy.to_string());
        c
    }

    pub fn from_container(c: &TensorContainer) -> Result<Self> {
        if c.meta.get("kind").map(String::as_str) != Some("featurenet") {
            return Err(Error::Format("not a feature-net checkpoint".into()));
        }
        let num = |k: &str| -> Result<f64> {
            c.meta_str(k)?.parse().map_err(|_| Error::Format(format!("metadata `{k}` is not numeric")))
        };
        let classes = c
            .tensors
            .get("fc.b")
            .ok_or_else(|| Error::Format("feature net lacks `fc.b`".into()))?
            .len();
        let mut params = FeatureNetParams::<f32>::init(classes, &mut stream(0, Stream::Init));
        params.assign_from(&c.tensors)?;
        Ok(Self {
            params,
            height: num("height")? as usize,
            width: num("width")? as usize,
            seed: c.meta_str("seed")?.parse().map_err(|_| Error::Format("metadata `seed` is not an integer".into()))?,
            accuracy: num("accuracy")?,
        })
    }
}

/// Trains on `train` and gates on held-out accuracy over `held_out`.
pub fn train_feature_classifier(
    train: &LabeledImageSet,
    held_out: &LabeledImageSet,
    cfg: &FeatureNetConfig,
    seed: u64,
) -> Result<FeatureNet> {
    if train.num_classes < 2 {
        return Err(Error::Config("the feature classifier needs at least two classes".into()));
    }
    if train.is_empty() || held_out.is_empty() {
        return Err(Error::Config("feature classifier needs non-empty train and held-out sets".into()));
    }
    let (h, w) = train.dims();
    if h % 4 != 0 || w % 4 != 0 {
        return Err(Error::Config(format!("feature net input {h}x{w} must be divisible by 4")));
    }
    let c = train.num_classes;
    let mut params = FeatureNetParams::<f32>::init(c, &mut stream(seed, Stream::Init));
    let mut opt = AdamW::new(&params, 0.0);
    let mut grads = params.zeros_like();
    let mut rng = stream(seed, Stream::Batching);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let steps_per_epoch = train.len().div_ceil(cfg.batch_size);
    let total = (cfg.epochs * steps_per_epoch).max(1);
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let refs: Vec<&Image> = chunk.iter().map(|&i| &train.images[i]).collect();
            let x = stack_images::<f32>(&refs);
            let (_, logits, cache) = forward_impl(&params, &x, chunk.len(), h, w);
            let inv = 1.0 / chunk.len() as f32;
            let mut dlogits = vec![0f32; logits.len()];
            for (r, &i) in chunk.iter().enumerate() {
                let lp = crate::sampler::log_softmax(&logits[r * c..(r + 1) * c], c);
                let label = train.labels[i];
                epoch_loss -= lp[label];
                for j in 0..c {
                    dlogits[r * c + j] = (lp[j].exp() as f32 - if j == label { 1.0 } else { 0.0 }) * inv;
                }
            }
            for t in grads.tensors_mut() {
                t.fill(0.0);
            }
            backward_impl(&params, &cache, &dlogits, &mut grads);
            let lr = 0.5 * cfg.lr * (1.0 + (std::f64::consts::PI * step as f64 / total as f64).cos());
            opt.step(&mut params, &grads, lr);
            step += 1;
        }
        log::info!("feature net epoch {epoch}: mean loss {:.4}", epoch_loss / train.len() as f64);
    }
    if !params.all_finite() {
        return Err(Error::Divergence("feature net weights became non-finite".into()));
    }
    let mut net = FeatureNet { params, height: h, width: w, seed, accuracy: 0.0 };
    net.accuracy = net.accuracy_on(held_out)?;
    if net.accuracy < cfg.min_accuracy {
        return Err(Error::EvaluationUnavailable(format!(
            "feature net held-out accuracy {:.3} below the {:.2} gate",
            net.accuracy, cfg.min_accuracy
        )));
    }
    Ok(net)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_net_gradients_match_finite_differences() {
        let (batch, h, w, c) = (2, 8, 8, 3);
        let mut rng = stream(4, Stream::Init);
        let params = FeatureNetParams::<f64>::init(c, &mut rng);
        let x = Tensor::<f64>::randn(&[batch * h * w * 3], 1.0, &mut rng).data;
        let labels = [0usize, 2];
        let loss = |p: &FeatureNetParams<f64>| {
            let (_, logits, _) = forward_impl(p, &x, batch, h, w);
            labels
                .iter()
                .enumerate()
                .map(|(r, &l)| -nn::log_softmax_rows(&logits[r * c..(r + 1) * c], c)[l])
                .sum::<f64>()
        };
        let (_, logits, cache) = forward_impl(&params, &x, batch, h, w);
        let mut dlogits = vec![0.0; logits.len()];
        for (r, &l) in labels.iter().enumerate() {
            let lp = nn::log_softmax_rows(&logits[r * c..(r + 1) * c], c);
            for j in 0..c {
                dlogits[r * c + j] = lp[j].exp() - if j == l { 1.0 } else { 0.0 };
            }
        }
        let mut g = params.zeros_like();
        backward_impl(&params, &cache, &dlogits, &mut g);
        let eps = 1e-6;
        let mut checked = 0;
        for (ti, (name, t)) in params.named().into_iter().enumerate() {
            for idx in (0..t.len()).step_by((t.len() / 7).max(1)) {
                let bump = |delta: f64| {
                    let mut q = params.clone();
                    q.tensors_mut()[ti].data[idx] += delta;
                    loss(&q)
                };
                let numeric = (bump(eps) - bump(-eps)) / (2.0 * eps);
                let analytic = g.tensors()[ti].data[idx];
                let rel = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-6);
                assert!(rel < 1e-4, "{name}[{idx}]: {analytic} vs {numeric}");
                checked += 1;
            }
        }
        assert!(checked > 50);
    }

    #[test]
    fn feature_dim_is_fixed_for_any_divisible_input() {
        let params = FeatureNetParams::<f32>::init(4, &mut stream(0, Stream::Init));
        for (h, w) in [(8, 8), (16, 12), (32, 32)] {
            let net = FeatureNet { params: params.clone(), height: h, width: w, seed: 0, accuracy: 1.0 };
            let (f, p) = net.embed(&[Image::new(h, w), Image::new(h, w)]).unwrap();
            assert_eq!(f.len(), 2 * FEATURE_DIM);
            assert_eq!(p.len(), 2 * 4);
        }
    }

    #[test]
    fn pooling_round_trip_sums() {
        let x: Vec<f64> = (0..2 * 4 * 4 * 2).map(|v| v as f64).collect();
        let y = avgpool2(&x, 2, 4, 4, 2);
        assert_eq!(y.len(), 2 * 2 * 2 * 2);
        assert_eq!(y[0], (0.0 + 2.0 + 8.0 + 10.0) / 4.0);
        let dx = avgpool2_backward(&vec![1.0; y.len()], 2, 4, 4, 2);
        assert!(dx.iter().all(|&v| v == 0.25));
    }

    #[test]
    fn container_round_trip() {
        let params = FeatureNetParams::<f32>::init(3, &mut stream(0, Stream::Init));
        let net = FeatureNet { params, height: 8, width: 8, seed: u64::MAX - 3, accuracy: 0.95 };
        let back = FeatureNet::from_container(&net.to_container()).unwrap();
        assert_eq!(back.params, net.params);
        assert_eq!((back.height, back.width, back.seed, back.accuracy), (8, 8, u64::MAX - 3, 0.95));
    }
}
