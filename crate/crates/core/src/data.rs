//! Procedural labeled images, patch k-means codebooks, and the token grids
//! every downstream model operates on.

use std::collections::HashSet;
use std::f64::consts::PI;
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::container::TensorContainer;
use crate::error::{Error, Result};
use crate::rng::{derive_seed, stream, Stream};
use crate::tensor::{gemm, MatMut, MatRef, Tensor};

/// Token id type. Real codebook entries are `0..K`; `K` is the mask symbol.
pub type TokenId = u32;

/// RGB image, `height × width × 3`, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize) -> Self {
        Self { height, width, pixels: vec![0.0; height * width * 3] }
    }

    #[inline]
    pub fn pixel_mut(&mut self, y: usize, x: usize) -> &mut [f32] {
        let i = (y * self.width + x) * 3;
        &mut self.pixels[i..i + 3]
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut enc = png::Encoder::new(BufWriter::new(file), self.width as u32, self.height as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let bytes: Vec<u8> = self
            .pixels
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        let mut writer = enc
            .write_header()
            .map_err(|e| Error::Format(format!("png header for {}: {e}", path.display())))?;
        writer
            .write_image_data(&bytes)
            .map_err(|e| Error::Format(format!("png data for {}: {e}", path.display())))
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut decoder = png::Decoder::new(std::io::BufReader::new(file));
        decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
        let mut reader = decoder
            .read_info()
            .map_err(|e| Error::Format(format!("png {}: {e}", path.display())))?;
        let mut buf = vec![0; reader.output_buffer_size().unwrap_or(0)];
        let info = reader
            .next_frame(&mut buf)
            .map_err(|e| Error::Format(format!("png {}: {e}", path.display())))?;
        let (w, h) = (info.width as usize, info.height as usize);
        let channels = info.color_type.samples();
        let mut img = Image::new(h, w);
        for i in 0..h * w {
            let px = &buf[i * channels..(i + 1) * channels];
            let rgb = match channels {
                1 | 2 => [px[0]; 3],
                _ => [px[0], px[1], px[2]],
            };
            for c in 0..3 {
                img.pixels[i * 3 + c] = rgb[c] as f32 / 255.0;
            }
        }
        Ok(img)
    }
}

/// Parameters of a procedurally generated dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub count: usize,
    pub num_classes: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImageSet {
    pub images: Vec<Image>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub seed: u64,
}

impl LabeledImageSet {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn dims(&self) -> (usize, usize) {
        self.images.first().map(|i| (i.height, i.width)).unwrap_or((0, 0))
    }

    /// Writes one sub-directory per class (`class_000`, …) of PNG files.
    pub fn write_image_folder(&self, dir: &Path) -> Result<()> {
        for c in 0..self.num_classes {
            let d = dir.join(class_dir_name(c));
            std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        }
        for (i, (img, &label)) in self.images.iter().zip(&self.labels).enumerate() {
            img.save_png(&dir.join(class_dir_name(label)).join(format!("{i:06}.png")))?;
        }
        Ok(())
    }

    /// Loads a directory of class sub-folders. Labels follow the sorted folder
    /// names; images within a folder are read in file-name order.
    pub fn load_image_folder(dir: &Path, seed: u64) -> Result<Self> {
        let mut classes: Vec<PathBuf> = std::fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_dir())
            .collect();
        classes.sort();
        if classes.len() < 2 {
            return Err(Error::Config(format!("{} needs at least two class folders", dir.display())));
        }
        let mut tagged = Vec::new();
        for (label, class_dir) in classes.iter().enumerate() {
            let mut files: Vec<PathBuf> = std::fs::read_dir(class_dir)
                .map_err(|e| Error::io(class_dir, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
                .collect();
            files.sort();
            for f in files {
                tagged.push((f, label));
            }
        }
        // restore the interleaved order the generator wrote, when names are indices
        tagged.sort_by(|a, b| a.0.file_name().cmp(&b.0.file_name()).then(a.1.cmp(&b.1)));
        let mut images = Vec::with_capacity(tagged.len());
        let mut labels = Vec::with_capacity(tagged.len());
        for (path, label) in tagged {
            let img = Image::load_png(&path)?;
            if let Some(first) = images.first() {
                let first: &Image = first;
                if (first.height, first.width) != (img.height, img.width) {
                    return Err(Error::Config(format!("{} has mismatched dimensions", path.display())));
                }
            }
            images.push(img);
            labels.push(label);
        }
        Ok(Self { images, labels, num_classes: classes.len(), seed })
    }
}

pub fn class_dir_name(c: usize) -> String {
    format!("class_{c:03}")
}

#[derive(Debug, Clone, Copy)]
enum Shape {
    Disc,
    Square,
    Triangle,
    Cross,
    Ring,
    Diamond,
    Star,
    Bars,
    Hexagon,
    Crescent,
}

const SHAPES: [Shape; 10] = [
    Shape::Disc,
    Shape::Square,
    Shape::Triangle,
    Shape::Cross,
    Shape::Ring,
    Shape::Diamond,
    Shape::Star,
    Shape::Bars,
    Shape::Hexagon,
    Shape::Crescent,
];

fn box_sdf(x: f64, y: f64, hx: f64, hy: f64) -> f64 {
    let (dx, dy) = (x.abs() - hx, y.abs() - hy);
    let outside = (dx.max(0.0).powi(2) + dy.max(0.0).powi(2)).sqrt();
    outside + dx.max(dy).min(0.0)
}

impl Shape {
    /// Approximate signed distance in unit-radius coordinates.
    fn sdf(self, x: f64, y: f64) -> f64 {
        let r = (x * x + y * y).sqrt();
        match self {
            Shape::Disc => r - 1.0,
            Shape::Square => box_sdf(x, y, 0.8, 0.8),
            Shape::Triangle => {
                let k = 3f64.sqrt();
                let (mut px, mut py) = (x.abs() - 1.0, y + 1.0 / k);
                if px + k * py > 0.0 {
                    let (nx, ny) = ((px - k * py) / 2.0, (-k * px - py) / 2.0);
                    px = nx;
                    py = ny;
                }
                px -= px.clamp(-2.0, 0.0);
                -(px * px + py * py).sqrt() * py.signum()
            }
            Shape::Cross => box_sdf(x, y, 1.0, 0.3).min(box_sdf(x, y, 0.3, 1.0)),
            Shape::Ring => (r - 0.72).abs() - 0.24,
            Shape::Diamond => (x.abs() + y.abs() - 1.0) / 2f64.sqrt(),
            Shape::Star => {
                let theta = y.atan2(x);
                r - (0.62 + 0.33 * (5.0 * theta).cos())
            }
            Shape::Bars => [-0.6, 0.0, 0.6]
                .iter()
                .map(|&cx| box_sdf(x - cx, y, 0.17, 0.9))
                .fold(f64::INFINITY, f64::min),
            Shape::Hexagon => (0..6)
                .map(|i| {
                    let a = i as f64 * PI / 3.0;
                    x * a.cos() + y * a.sin()
                })
                .fold(f64::NEG_INFINITY, f64::max)
                - 0.85,
            Shape::Crescent => (r - 1.0).max(-(((x - 0.45).powi(2) + y * y).sqrt() - 0.8)),
        }
    }
}

fn class_color(c: usize) -> [f64; 3] {
    const PALETTE: [[f64; 3]; 10] = [
        [0.90, 0.20, 0.20],
        [0.20, 0.75, 0.25],
        [0.20, 0.35, 0.90],
        [0.95, 0.80, 0.15],
        [0.80, 0.25, 0.85],
        [0.15, 0.80, 0.85],
        [0.95, 0.55, 0.10],
        [0.95, 0.95, 0.95],
        [0.55, 0.35, 0.15],
        [0.50, 0.90, 0.55],
    ];
    let base = PALETTE[c % PALETTE.len()];
    let shift = (c / PALETTE.len()) as f64 * 0.37;
    [0, 1, 2].map(|i| (base[(i + c / PALETTE.len()) % 3] * (1.0 - shift.fract() * 0.3)).clamp(0.0, 1.0))
}

fn render(class: usize, height: usize, width: usize, rng: &mut ChaCha8Rng) -> Image {
    let size = height.min(width) as f64;
    let shape = SHAPES[class % SHAPES.len()];
    let color = class_color(class).map(|v| (v + rng.random_range(-0.08..0.08)).clamp(0.0, 1.0));

    let bg_base: f64 = rng.random_range(0.08..0.35);
    let bg_tint = [0, 1, 2].map(|_| rng.random_range(-0.05..0.05));
    let freq = rng.random_range(0.15..0.6);
    let tex_angle = rng.random_range(0.0..PI);
    let phase = rng.random_range(0.0..2.0 * PI);

    let cx = width as f64 * rng.random_range(0.32..0.68);
    let cy = height as f64 * rng.random_range(0.32..0.68);
    let radius = size * rng.random_range(0.2..0.34);
    let rot = rng.random_range(0.0..2.0 * PI);
    let (sin_r, cos_r) = rot.sin_cos();

    let mut img = Image::new(height, width);
    for y in 0..height {
        for x in 0..width {
            let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
            let tex = 0.06 * ((fx * tex_angle.cos() + fy * tex_angle.sin()) * freq + phase).sin();
            let noise = rng.random_range(-0.03..0.03);
            let (dx, dy) = ((fx - cx) / radius, (fy - cy) / radius);
            let (ux, uy) = (dx * cos_r + dy * sin_r, -dx * sin_r + dy * cos_r);
            let dist_px = shape.sdf(ux, uy) * radius;
            let alpha = (0.5 - dist_px).clamp(0.0, 1.0);
            let px = img.pixel_mut(y, x);
            for c in 0..3 {
                let bg = bg_base + bg_tint[c] + tex + noise;
                px[c] = (alpha * color[c] + (1.0 - alpha) * bg).clamp(0.0, 1.0) as f32;
            }
        }
    }
    img
}

/// Deterministic procedural dataset: one shape/colour family per class on a
/// textured background with random placement, scale and rotation.
pub fn generate_dataset(spec: &DatasetSpec) -> Result<LabeledImageSet> {
    if spec.num_classes == 0 || spec.height == 0 || spec.width == 0 {
        return Err(Error::Config("dataset dimensions and class count must be positive".into()));
    }
    if spec.count < spec.num_classes {
        return Err(Error::Config(format!(
            "dataset of {} images cannot cover {} classes",
            spec.count, spec.num_classes
        )));
    }
    let mut images = Vec::with_capacity(spec.count);
    let mut labels = Vec::with_capacity(spec.count);
    for i in 0..spec.count {
        let label = i % spec.num_classes;
        let mut rng = stream(derive_seed(&[spec.seed, i as u64]), Stream::Dataset);
        images.push(render(label, spec.height, spec.width, &mut rng));
        labels.push(label);
    }
    Ok(LabeledImageSet { images, labels, num_classes: spec.num_classes, seed: spec.seed })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchDims {
    pub height: usize,
    pub width: usize,
}

impl PatchDims {
    pub fn dim(&self) -> usize {
        self.height * self.width * 3
    }

    fn grid(&self, img_h: usize, img_w: usize) -> Result<(usize, usize)> {
        if self.height == 0 || self.width == 0 || img_h % self.height != 0 || img_w % self.width != 0 {
            return Err(Error::Config(format!(
                "image {img_h}x{img_w} is not divisible into {}x{} patches",
                self.height, self.width
            )));
        }
        Ok((img_h / self.height, img_w / self.width))
    }
}

fn extract_patches(img: &Image, patch: PatchDims, out: &mut Vec<f32>) -> Result<(usize, usize)> {
    let (rows, cols) = patch.grid(img.height, img.width)?;
    for r in 0..rows {
        for c in 0..cols {
            for py in 0..patch.height {
                let y = r * patch.height + py;
                let start = (y * img.width + c * patch.width) * 3;
                out.extend_from_slice(&img.pixels[start..start + patch.width * 3]);
            }
        }
    }
    Ok((rows, cols))
}

/// K patch codewords of length `patch.height · patch.width · 3`.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    pub codewords: Vec<f32>,
    pub size: usize,
    pub patch: PatchDims,
    pub fit_seed: u64,
}

impl Codebook {
    pub fn new(codewords: Vec<f32>, patch: PatchDims, fit_seed: u64) -> Result<Self> {
        let dim = patch.dim();
        if dim == 0 || codewords.len() % dim != 0 {
            return Err(Error::Config("codeword buffer does not match patch dims".into()));
        }
        let size = codewords.len() / dim;
        if size < 2 {
            return Err(Error::Config("codebook needs at least two codewords".into()));
        }
        if codewords.iter().any(|v| !v.is_finite()) {
            return Err(Error::Quantization("non-finite codeword".into()));
        }
        Ok(Self { codewords, size, patch, fit_seed })
    }

    pub fn codeword(&self, j: usize) -> &[f32] {
        let d = self.patch.dim();
        &self.codewords[j * d..(j + 1) * d]
    }

    pub fn mask_id(&self) -> TokenId {
        self.size as TokenId
    }

    /// Nearest codeword by squared Euclidean distance; ties go to the lowest index.
    pub fn nearest(&self, patch: &[f32]) -> TokenId {
        let mut best = (f64::INFINITY, 0usize);
        for j in 0..self.size {
            let d: f64 = self
                .codeword(j)
                .iter()
                .zip(patch)
                .map(|(&a, &b)| {
                    let t = a as f64 - b as f64;
                    t * t
                })
                .sum();
            if d < best.0 {
                best = (d, j);
            }
        }
        best.1 as TokenId
    }

    pub fn to_container(&self) -> TensorContainer {
        let mut c = TensorContainer::new();
        c.tensors.insert(
            "codewords".into(),
            Tensor { shape: vec![self.size, self.patch.dim()], data: self.codewords.clone() },
        );
        c.meta.insert("kind".into(), "codebook".into());
        c.meta.insert("patch_height".into(), self.patch.height.to_string());
        c.meta.insert("patch_width".into(), self.patch.width.to_string());
        c.meta.insert("fit_seed".into(), self.fit_seed.to_string());
        c
    }

    pub fn from_container(c: &TensorContainer) -> Result<Self> {
        let parse = |k: &str| -> Result<u64> {
            c.meta_str(k)?.parse().map_err(|_| Error::Format(format!("metadata `{k}` is not an integer")))
        };
        let patch = PatchDims { height: parse("patch_height")? as usize, width: parse("patch_width")? as usize };
        let t = c
            .tensors
            .get("codewords")
            .ok_or_else(|| Error::Format("codebook container lacks `codewords`".into()))?;
        Self::new(t.data.clone(), patch, parse("fit_seed")?)
    }
}

/// Fits a codebook by k-means over every patch of every image: seeded
/// k-means++ initialization followed by at most `max_iters` Lloyd iterations.
pub fn fit_codebook(
    images: &[Image],
    k: usize,
    patch: PatchDims,
    fit_seed: u64,
    max_iters: usize,
) -> Result<Codebook> {
    if k < 2 {
        return Err(Error::Config("codebook size must be at least 2".into()));
    }
    let dim = patch.dim();
    let mut data = Vec::new();
    for img in images {
        extract_patches(img, patch, &mut data)?;
    }
    let n = data.len() / dim.max(1);
    if n < k {
        return Err(Error::Quantization(format!("{n} patches cannot fill a codebook of {k}")));
    }
    let mut distinct = HashSet::new();
    for p in data.chunks(dim) {
        distinct.insert(p.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        if distinct.len() >= k {
            break;
        }
    }
    if distinct.len() < k {
        return Err(Error::Quantization(format!(
            "only {} distinct patches for a codebook of {k}",
            distinct.len()
        )));
    }

    let mut rng = stream(fit_seed, Stream::Codebook);
    let sq = |a: &[f32], b: &[f32]| -> f64 {
        a.iter().zip(b).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum()
    };

    // k-means++ seeding
    let mut centers = Vec::with_capacity(k * dim);
    let first = rng.random_range(0..n);
    centers.extend_from_slice(&data[first * dim..(first + 1) * dim]);
    let mut min_d: Vec<f64> = data.chunks(dim).map(|p| sq(p, &centers[..dim])).collect();
    for _ in 1..k {
        let total: f64 = min_d.iter().sum();
        let mut target = rng.random::<f64>() * total;
        let mut pick = n - 1;
        for (i, &d) in min_d.iter().enumerate() {
            if d > 0.0 && target < d {
                pick = i;
                break;
            }
            target -= d;
        }
        if min_d[pick] == 0.0 {
            // numerical leftovers landed on an already-covered point
            pick = min_d
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .map(|(i, _)| i)
                .unwrap_or(0);
        }
        let c = data[pick * dim..(pick + 1) * dim].to_vec();
        for (d, p) in min_d.iter_mut().zip(data.chunks(dim)) {
            *d = d.min(sq(p, &c));
        }
        centers.extend_from_slice(&c);
    }

    let point_norms: Vec<f32> = data.chunks(dim).map(|p| p.iter().map(|v| v * v).sum()).collect();
    let mut assign = vec![usize::MAX; n];
    let mut dist = vec![0f32; n];
    const CHUNK: usize = 4096;
    let mut scores = vec![0f32; CHUNK * k];
    for _ in 0..max_iters {
        let center_norms: Vec<f32> = centers.chunks(dim).map(|c| c.iter().map(|v| v * v).sum()).collect();
        let mut changed = false;
        for start in (0..n).step_by(CHUNK) {
            let rows = CHUNK.min(n - start);
            let block = &mut scores[..rows * k];
            gemm(
                -2.0,
                MatRef::new(&data[start * dim..(start + rows) * dim], rows, dim),
                MatRef::new(&centers, k, dim).t(),
                0.0,
                MatMut::new(block, rows, k),
            );
            for r in 0..rows {
                let row = &block[r * k..(r + 1) * k];
                let mut best = (f32::INFINITY, 0usize);
                for (j, &s) in row.iter().enumerate() {
                    let d = s + center_norms[j];
                    if d < best.0 {
                        best = (d, j);
                    }
                }
                let i = start + r;
                dist[i] = (best.0 + point_norms[i]).max(0.0);
                if assign[i] != best.1 {
                    assign[i] = best.1;
                    changed = true;
                }
            }
        }
        let mut sums = vec![0f64; k * dim];
        let mut counts = vec![0usize; k];
        for (i, p) in data.chunks(dim).enumerate() {
            let a = assign[i];
            counts[a] += 1;
            for (s, &v) in sums[a * dim..(a + 1) * dim].iter_mut().zip(p) {
                *s += v as f64;
            }
        }
        let mut taken = HashSet::new();
        for j in 0..k {
            if counts[j] > 0 {
                for (c, s) in centers[j * dim..(j + 1) * dim].iter_mut().zip(&sums[j * dim..(j + 1) * dim]) {
                    *c = (s / counts[j] as f64) as f32;
                }
            } else {
                // re-seed an empty cluster at the worst-fit point not already used
                let far = dist
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| !taken.contains(i))
                    .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
                    .map(|(i, _)| i)
                    .unwrap_or(0);
                taken.insert(far);
                dist[far] = 0.0;
                centers[j * dim..(j + 1) * dim].copy_from_slice(&data[far * dim..(far + 1) * dim]);
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }

    let mut seen = HashSet::new();
    for c in centers.chunks(dim) {
        if !seen.insert(c.iter().map(|v| v.to_bits()).collect::<Vec<_>>()) {
            return Err(Error::Quantization("k-means produced duplicate codewords".into()));
        }
    }
    Codebook::new(centers, patch, fit_seed)
}

/// A row-major grid of token ids over codebook size `K`, where `K` itself is the mask id.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TokenGrid {
    pub tokens: Vec<TokenId>,
    pub rows: usize,
    pub cols: usize,
    pub codebook_size: usize,
}

impl TokenGrid {
    pub fn new(tokens: Vec<TokenId>, rows: usize, cols: usize, codebook_size: usize) -> Result<Self> {
        if tokens.len() != rows * cols {
            return Err(Error::Contract(format!(
                "{} tokens do not fill a {rows}x{cols} grid",
                tokens.len()
            )));
        }
        if let Some(t) = tokens.iter().find(|&&t| t as usize > codebook_size) {
            return Err(Error::Contract(format!("token {t} outside [0, {codebook_size}]")));
        }
        Ok(Self { tokens, rows, cols, codebook_size })
    }

    /// The all-mask blank canvas.
    pub fn blank(rows: usize, cols: usize, codebook_size: usize) -> Self {
        Self { tokens: vec![codebook_size as TokenId; rows * cols], rows, cols, codebook_size }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn mask_id(&self) -> TokenId {
        self.codebook_size as TokenId
    }

    pub fn is_masked(&self, i: usize) -> bool {
        self.tokens[i] == self.mask_id()
    }

    pub fn masked_count(&self) -> usize {
        self.tokens.iter().filter(|&&t| t == self.mask_id()).count()
    }
}

pub fn tokenize(image: &Image, codebook: &Codebook) -> Result<TokenGrid> {
    let mut patches = Vec::new();
    let (rows, cols) = extract_patches(image, codebook.patch, &mut patches)?;
    let tokens = patches.chunks(codebook.patch.dim()).map(|p| codebook.nearest(p)).collect();
    TokenGrid::new(tokens, rows, cols, codebook.size)
}

pub fn detokenize(grid: &TokenGrid, codebook: &Codebook) -> Result<Image> {
    if grid.codebook_size != codebook.size {
        return Err(Error::Config(format!(
            "grid over {} tokens does not match codebook of {}",
            grid.codebook_size, codebook.size
        )));
    }
    if let Some(i) = (0..grid.len()).find(|&i| grid.is_masked(i)) {
        return Err(Error::IncompleteState(format!("position {i} is still masked")));
    }
    let p = codebook.patch;
    let mut img = Image::new(grid.rows * p.height, grid.cols * p.width);
    for r in 0..grid.rows {
        for c in 0..grid.cols {
            let cw = codebook.codeword(grid.tokens[r * grid.cols + c] as usize);
            for py in 0..p.height {
                let y = r * p.height + py;
                let start = (y * img.width + c * p.width) * 3;
                img.pixels[start..start + p.width * 3].copy_from_slice(&cw[py * p.width * 3..(py + 1) * p.width * 3]);
            }
        }
    }
    Ok(img)
}

/// Tile several images into one sheet, `cols` per row.
pub fn image_sheet(images: &[Image], cols: usize) -> Image {
    let Some(first) = images.first() else {
        return Image::new(1, 1);
    };
    let (h, w) = (first.height, first.width);
    let cols = cols.max(1).min(images.len());
    let rows = images.len().div_ceil(cols);
    let mut sheet = Image::new(rows * h, cols * w);
    for (i, img) in images.iter().enumerate() {
        let (r, c) = (i / cols, i % cols);
        for y in 0..h {
            let src = &img.pixels[y * w * 3..(y + 1) * w * 3];
            let start = ((r * h + y) * sheet.width + c * w) * 3;
            sheet.pixels[start..start + w * 3].copy_from_slice(src);
        }
    }
    sheet
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(count: usize, classes: usize) -> DatasetSpec {
        DatasetSpec { count, num_classes: classes, height: 32, width: 32, seed: 7 }
    }

    #[test]
    fn one_image_per_class_when_count_equals_classes() {
        let set = generate_dataset(&spec(10, 10)).unwrap();
        assert_eq!(set.len(), 10);
        let mut labels = set.labels.clone();
        labels.sort();
        assert_eq!(labels, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn generation_is_deterministic_and_in_range() {
        let a = generate_dataset(&spec(23, 10)).unwrap();
        let b = generate_dataset(&spec(23, 10)).unwrap();
        assert_eq!(a, b);
        assert!(a.images.iter().flat_map(|i| &i.pixels).all(|&v| (0.0..=1.0).contains(&v)));
        let mut counts = vec![0; 10];
        a.labels.iter().for_each(|&l| counts[l] += 1);
        assert!(counts.iter().max().unwrap() - counts.iter().min().unwrap() <= 1);
    }

    #[test]
    fn too_few_images_is_a_config_error() {
        assert!(matches!(generate_dataset(&spec(5, 10)), Err(Error::Config(_))));
        assert!(matches!(
            generate_dataset(&DatasetSpec { height: 0, ..spec(10, 10) }),
            Err(Error::Config(_))
        ));
    }

    fn tiled(codebook: &Codebook, tokens: &[usize], rows: usize, cols: usize) -> Image {
        let grid = TokenGrid::new(tokens.iter().map(|&t| t as TokenId).collect(), rows, cols, codebook.size).unwrap();
        detokenize(&grid, codebook).unwrap()
    }

    fn constant_codebook(k: usize) -> Codebook {
        let patch = PatchDims { height: 2, width: 2 };
        let words: Vec<f32> = (0..k).flat_map(|j| vec![j as f32 / k as f32; patch.dim()]).collect();
        Codebook::new(words, patch, 0).unwrap()
    }

    #[test]
    fn tokenize_recovers_tiled_codewords() {
        let cb = constant_codebook(8);
        let img = tiled(&cb, &[3, 7, 7, 0], 2, 2);
        let grid = tokenize(&img, &cb).unwrap();
        assert_eq!(grid.tokens, vec![3, 7, 7, 0]);
        assert_eq!(detokenize(&grid, &cb).unwrap(), img);
    }

    #[test]
    fn all_same_token_tiles_one_codeword() {
        let cb = constant_codebook(4);
        let img = tiled(&cb, &[2; 9], 3, 3);
        assert!(img.pixels.iter().all(|&v| v == cb.codeword(2)[0]));
    }

    #[test]
    fn equidistant_patch_takes_lowest_index() {
        let patch = PatchDims { height: 1, width: 1 };
        let mut words = vec![9.0f32; 6 * 3];
        words[2 * 3..3 * 3].copy_from_slice(&[0.0, 0.0, 0.0]);
        words[5 * 3..6 * 3].copy_from_slice(&[1.0, 1.0, 1.0]);
        let cb = Codebook::new(words, patch, 0).unwrap();
        let img = Image { height: 1, width: 1, pixels: vec![0.5, 0.5, 0.5] };
        assert_eq!(tokenize(&img, &cb).unwrap().tokens, vec![2]);
    }

    #[test]
    fn grid_shape_for_desk_images() {
        let set = generate_dataset(&spec(10, 10)).unwrap();
        let cb = constant_codebook(8);
        let cb = Codebook { patch: PatchDims { height: 4, width: 4 }, codewords: vec![0.0; 8 * 48], ..cb };
        let grid = tokenize(&set.images[0], &cb).unwrap();
        assert_eq!((grid.len(), grid.rows, grid.cols), (64, 8, 8));
    }

    #[test]
    fn masked_grid_cannot_be_decoded() {
        let cb = constant_codebook(4);
        let grid = TokenGrid::new(vec![0, 4, 1, 2], 2, 2, 4).unwrap();
        assert!(matches!(detokenize(&grid, &cb), Err(Error::IncompleteState(_))));
    }

    #[test]
    fn kmeans_recovers_distinct_constant_patches() {
        let k = 6;
        let patch = PatchDims { height: 2, width: 2 };
        let colors: Vec<[f32; 3]> = (0..k).map(|j| [j as f32 * 0.1, 1.0 - j as f32 * 0.15, 0.3]).collect();
        let mut images = Vec::new();
        for shift in 0..4 {
            let mut img = Image::new(4, 6);
            for r in 0..2 {
                for c in 0..3 {
                    let col = colors[(r * 3 + c + shift) % k];
                    for y in 0..2 {
                        for x in 0..2 {
                            img.pixel_mut(r * 2 + y, c * 2 + x).copy_from_slice(&col);
                        }
                    }
                }
            }
            images.push(img);
        }
        let cb = fit_codebook(&images, k, patch, 3, 50).unwrap();
        let mut got: Vec<Vec<u32>> = (0..k).map(|j| cb.codeword(j)[..3].iter().map(|v| v.to_bits()).collect()).collect();
        let mut want: Vec<Vec<u32>> = colors.iter().map(|c| c.iter().map(|v| v.to_bits()).collect()).collect();
        got.sort();
        want.sort();
        assert_eq!(got, want);
    }

    #[test]
    fn too_few_patches_is_a_quantization_error() {
        let set = generate_dataset(&spec(1, 1)).unwrap();
        let err = fit_codebook(&set.images, 128, PatchDims { height: 4, width: 4 }, 0, 5);
        assert!(matches!(err, Err(Error::Quantization(_))));
        let err = fit_codebook(&set.images, 4, PatchDims { height: 5, width: 4 }, 0, 5);
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn nearest_codeword_beats_every_alternative() {
        let set = generate_dataset(&spec(12, 4)).unwrap();
        let patch = PatchDims { height: 4, width: 4 };
        let cb = fit_codebook(&set.images, 6, patch, 1, 20).unwrap();
        let img = &set.images[5];
        let grid = tokenize(img, &cb).unwrap();
        let mut patches = Vec::new();
        extract_patches(img, patch, &mut patches).unwrap();
        for (i, p) in patches.chunks(patch.dim()).enumerate() {
            let err = |j: usize| -> f64 { cb.codeword(j).iter().zip(p).map(|(&a, &b)| ((a - b) as f64).powi(2)).sum() };
            let chosen = err(grid.tokens[i] as usize);
            for j in 0..cb.size {
                assert!(chosen <= err(j));
            }
        }
    }

    #[test]
    fn permuting_codebook_permutes_tokens() {
        let set = generate_dataset(&spec(10, 5)).unwrap();
        let patch = PatchDims { height: 4, width: 4 };
        let cb = fit_codebook(&set.images, 8, patch, 2, 20).unwrap();
        let perm = [5usize, 2, 7, 0, 1, 6, 3, 4];
        let mut words = vec![0f32; cb.codewords.len()];
        for (old, &new) in perm.iter().enumerate() {
            words[new * patch.dim()..(new + 1) * patch.dim()].copy_from_slice(cb.codeword(old));
        }
        let permuted = Codebook::new(words, patch, 2).unwrap();
        for img in &set.images {
            let a = tokenize(img, &cb).unwrap();
            let b = tokenize(img, &permuted).unwrap();
            for (x, y) in a.tokens.iter().zip(&b.tokens) {
                assert_eq!(perm[*x as usize] as u32, *y);
            }
        }
    }

    #[test]
    fn image_folder_round_trip_preserves_labels() {
        let dir = tempfile::tempdir().unwrap();
        let set = generate_dataset(&spec(12, 3)).unwrap();
        set.write_image_folder(dir.path()).unwrap();
        let back = LabeledImageSet::load_image_folder(dir.path(), 7).unwrap();
        assert_eq!(back.labels, set.labels);
        assert_eq!(back.num_classes, 3);
        for (a, b) in back.images.iter().zip(&set.images) {
            for (x, y) in a.pixels.iter().zip(&b.pixels) {
                assert!((x - y).abs() <= 0.5 / 255.0 + 1e-6);
            }
        }
    }

    #[test]
    fn codebook_container_round_trip() {
        let cb = constant_codebook(5);
        let back = Codebook::from_container(&TensorContainer::from_bytes(&cb.to_container().to_bytes().unwrap()).unwrap()).unwrap();
        assert_eq!(back, cb);
    }
}
