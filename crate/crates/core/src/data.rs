//! Dataset synthesis and loading, batching, label distributions, and the
//! paired-example augmentations.
//!
//! All randomness is taken from explicit seeds; callers derive per-purpose
//! seeds with [`crate::rng::derive_seed`] so shuffling, mixing, and noise
//! draws stay independently reproducible.

use std::fs::File;
use std::io::{BufReader, Read};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Beta, Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

/// Which half of an experiment a dataset belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Labeled examples with values in `[0,1]`.
#[derive(Debug, Clone)]
pub struct Dataset {
    examples: Tensor,
    labels: Vec<usize>,
    classes: usize,
    split: Split,
}

impl Dataset {
    pub fn new(examples: Tensor, labels: Vec<usize>, classes: usize, split: Split) -> Result<Self> {
        if examples.rank() == 0 || examples.shape()[0] != labels.len() {
            return Err(Error::Dataset(format!(
                "leading extent {:?} does not match {} labels",
                examples.shape(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Dataset(format!(
                "label {} out of range for {} classes",
                bad, classes
            )));
        }
        if examples.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::Dataset("example values outside [0,1]".into()));
        }
        Ok(Dataset {
            examples,
            labels,
            classes,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn examples(&self) -> &Tensor {
        &self.examples
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn split(&self) -> Split {
        self.split
    }

    /// Per-example shape (without the leading dataset axis).
    pub fn example_shape(&self) -> &[usize] {
        &self.examples.shape()[1..]
    }

    pub fn with_split(mut self, split: Split) -> Self {
        self.split = split;
        self
    }

    /// First `n` examples as a new dataset; used for fixed-seed subsampling.
    pub fn take(&self, n: usize) -> Result<Dataset> {
        let n = n.min(self.len());
        let indices: Vec<usize> = (0..n).collect();
        Dataset::new(
            self.examples.take_rows(&indices)?,
            self.labels[..n].to_vec(),
            self.classes,
            self.split,
        )
    }
}

/// Per-example target distribution over classes: rows sum to 1 within 1e-9.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelDistribution {
    probs: Tensor,
}

impl LabelDistribution {
    pub fn from_probs(probs: Tensor) -> Result<Self> {
        if probs.rank() != 2 {
            return Err(Error::shape(
                "LabelDistribution",
                format!("rank-2 required, got {:?}", probs.shape()),
            ));
        }
        for r in 0..probs.shape()[0] {
            let row = probs.row(r);
            if row.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
                return Err(Error::invalid(format!("row {} has entries outside [0,1]", r)));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-9 {
                return Err(Error::invalid(format!("row {} sums to {}", r, sum)));
            }
        }
        Ok(LabelDistribution { probs })
    }

    pub fn one_hot(labels: &[usize], classes: usize) -> Result<Self> {
        let mut probs = Tensor::zeros(&[labels.len(), classes]);
        for (i, &l) in labels.iter().enumerate() {
            if l >= classes {
                return Err(Error::invalid(format!(
                    "label {} out of range for {} classes",
                    l, classes
                )));
            }
            probs.data_mut()[i * classes + l] = 1.0;
        }
        Ok(LabelDistribution { probs })
    }

    pub fn probs(&self) -> &Tensor {
        &self.probs
    }

    pub fn batch(&self) -> usize {
        self.probs.shape()[0]
    }

    pub fn classes(&self) -> usize {
        self.probs.shape()[1]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.probs.row(i)
    }

    /// Most probable class per row, ties to the lowest index.
    pub fn hard_labels(&self) -> Vec<usize> {
        self.probs.argmax_rows()
    }
}

/// Smoothed targets: correct class `1 - s`, every other class `s/(C-1)`.
///
/// `s` must lie in `[0, 1 - 1/C]`. At the upper endpoint the distribution is
/// written as exactly uniform rather than through the two-branch formula, so
/// the limit case is reproduced without rounding residue.
pub fn smooth_labels(labels: &[usize], classes: usize, s: f64) -> Result<LabelDistribution> {
    if classes < 2 {
        return Err(Error::invalid("smoothing needs at least 2 classes"));
    }
    let c = classes as f64;
    let max_s = 1.0 - 1.0 / c;
    if !(0.0..=max_s).contains(&s) {
        return Err(Error::invalid(format!(
            "smoothing {} outside [0, {}] for {} classes",
            s, max_s, classes
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::invalid(format!(
            "label {} out of range for {} classes",
            bad, classes
        )));
    }
    if s == max_s {
        // Written as exactly uniform: the two-branch formula leaves rounding
        // residue at the endpoint (1 - s != s/(C-1) in floats).
        let probs = Tensor::full(&[labels.len(), classes], 1.0 / c);
        return Ok(LabelDistribution { probs });
    }
    let (hit, miss) = (1.0 - s, s / (c - 1.0));
    let mut probs = Tensor::full(&[labels.len(), classes], miss);
    for (i, &l) in labels.iter().enumerate() {
        probs.data_mut()[i * classes + l] = hit;
    }
    Ok(LabelDistribution { probs })
}

/// Synthetic dataset family.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SyntheticKind {
    /// One prototype image per class plus Gaussian pixel noise.
    Blobs,
    /// Two concentric rings in the first two pixel coordinates; binary only.
    TwoRings,
}

/// Shape and difficulty knobs for synthetic data.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub kind: SyntheticKind,
    /// Per-example shape, e.g. `[1, 8, 8]`.
    pub shape: Vec<usize>,
    pub classes: usize,
    /// Gaussian pixel-noise standard deviation, applied before clamping.
    pub noise: f64,
}

impl SyntheticSpec {
    pub fn blobs(shape: Vec<usize>, classes: usize, noise: f64) -> Self {
        SyntheticSpec {
            kind: SyntheticKind::Blobs,
            shape,
            classes,
            noise,
        }
    }
}

/// Deterministic synthetic dataset: class structure depends only on `seed`,
/// per-example noise additionally on the split, so train and test sets share
/// prototypes without sharing samples.
pub fn make_synthetic_dataset(
    spec: &SyntheticSpec,
    m: usize,
    split: Split,
    seed: u64,
) -> Result<Dataset> {
    if m < spec.classes {
        return Err(Error::Dataset(format!(
            "need at least {} examples for {} classes, got {}",
            spec.classes, spec.classes, m
        )));
    }
    if spec.noise < 0.0 {
        return Err(Error::Dataset("negative noise level".into()));
    }
    let dim: usize = spec.shape.iter().product();
    let split_tag = match split {
        Split::Train => "train",
        Split::Test => "test",
    };
    match spec.kind {
        SyntheticKind::Blobs => {
            if spec.classes < 2 {
                return Err(Error::Dataset("blobs need at least 2 classes".into()));
            }
            let mut proto_rng = rng::derived_rng(seed, "blobs/prototypes");
            let mut prototypes = Vec::with_capacity(spec.classes);
            for _ in 0..spec.classes {
                let p: Vec<f64> = (0..dim).map(|_| proto_rng.gen_range(0.2..0.8)).collect();
                prototypes.push(p);
            }
            let mut noise_rng = rng::derived_rng(seed, &format!("blobs/noise/{}", split_tag));
            let mut data = Vec::with_capacity(m * dim);
            let mut labels = Vec::with_capacity(m);
            for i in 0..m {
                let class = i % spec.classes;
                labels.push(class);
                for &proto in prototypes[class].iter() {
                    let n: f64 = StandardNormal.sample(&mut noise_rng);
                    data.push((proto + spec.noise * n).clamp(0.0, 1.0));
                }
            }
            let mut shape = vec![m];
            shape.extend_from_slice(&spec.shape);
            Dataset::new(Tensor::new(shape, data)?, labels, spec.classes, split)
        }
        SyntheticKind::TwoRings => {
            if spec.classes != 2 {
                return Err(Error::Dataset("two-rings is a binary dataset".into()));
            }
            if dim < 2 {
                return Err(Error::Dataset("two-rings needs at least 2 dims".into()));
            }
            let mut r = rng::derived_rng(seed, &format!("rings/{}", split_tag));
            let mut data = Vec::with_capacity(m * dim);
            let mut labels = Vec::with_capacity(m);
            for i in 0..m {
                let class = i % 2;
                labels.push(class);
                let radius = if class == 0 { 0.15 } else { 0.35 };
                let angle = r.gen_range(0.0..std::f64::consts::TAU);
                let jitter: f64 = StandardNormal.sample(&mut r);
                let rad = radius + spec.noise * jitter;
                let (x, y) = (0.5 + rad * angle.cos(), 0.5 + rad * angle.sin());
                data.push(x.clamp(0.0, 1.0));
                data.push(y.clamp(0.0, 1.0));
                data.extend(std::iter::repeat_n(0.5, dim - 2));
            }
            let mut shape = vec![m];
            shape.extend_from_slice(&spec.shape);
            Dataset::new(Tensor::new(shape, data)?, labels, spec.classes, split)
        }
    }
}

const IDX_IMAGE_MAGIC: u32 = 2051;
const IDX_LABEL_MAGIC: u32 = 2049;

fn read_u32_be(r: &mut impl Read, what: &str) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)
        .map_err(|e| Error::Dataset(format!("truncated reading {}: {}", what, e)))?;
    Ok(u32::from_be_bytes(buf))
}

/// Load an MNIST-format IDX image/label file pair. Pixels are scaled from
/// bytes into `[0,1]`; the class count is the largest label plus one.
pub fn load_idx_dataset(image_path: &Path, label_path: &Path) -> Result<Dataset> {
    let mut images = BufReader::new(File::open(image_path)?);
    let magic = read_u32_be(&mut images, "image magic")?;
    if magic != IDX_IMAGE_MAGIC {
        return Err(Error::Dataset(format!(
            "bad image magic {} (expected {})",
            magic, IDX_IMAGE_MAGIC
        )));
    }
    let count = read_u32_be(&mut images, "image count")? as usize;
    let rows = read_u32_be(&mut images, "row count")? as usize;
    let cols = read_u32_be(&mut images, "column count")? as usize;
    let mut pixels = vec![0u8; count * rows * cols];
    images
        .read_exact(&mut pixels)
        .map_err(|e| Error::Dataset(format!("truncated image payload: {}", e)))?;

    let mut labels_file = BufReader::new(File::open(label_path)?);
    let magic = read_u32_be(&mut labels_file, "label magic")?;
    if magic != IDX_LABEL_MAGIC {
        return Err(Error::Dataset(format!(
            "bad label magic {} (expected {})",
            magic, IDX_LABEL_MAGIC
        )));
    }
    let label_count = read_u32_be(&mut labels_file, "label count")? as usize;
    if label_count != count {
        return Err(Error::Dataset(format!(
            "{} images but {} labels",
            count, label_count
        )));
    }
    let mut label_bytes = vec![0u8; label_count];
    labels_file
        .read_exact(&mut label_bytes)
        .map_err(|e| Error::Dataset(format!("truncated label payload: {}", e)))?;

    let data: Vec<f64> = pixels.iter().map(|&p| f64::from(p) / 255.0).collect();
    let labels: Vec<usize> = label_bytes.iter().map(|&l| l as usize).collect();
    let classes = labels.iter().copied().max().unwrap_or(0) + 1;
    Dataset::new(
        Tensor::new(vec![count, rows, cols], data)?,
        labels,
        classes,
        Split::Train,
    )
}

/// How pairs of examples are blended during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MixMode {
    Off,
    Mixup,
    VhMixup,
}

/// Paired-example augmentation settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MixConfig {
    pub mode: MixMode,
    /// Beta(a, a) parameter for sampling the blend weight.
    pub a: f64,
}

impl Default for MixConfig {
    fn default() -> Self {
        MixConfig {
            mode: MixMode::Off,
            a: 1.0,
        }
    }
}

impl MixConfig {
    pub fn validate(&self) -> Result<()> {
        if self.a <= 0.0 {
            return Err(Error::invalid(format!("beta parameter must be > 0, got {}", self.a)));
        }
        Ok(())
    }
}

/// Deterministic blend of two equal-shape batches with per-pair weights from
/// Beta(a, a). Labels are blended with the same effective weights.
pub fn mix_examples(
    batch_a: (&Tensor, &LabelDistribution),
    batch_b: (&Tensor, &LabelDistribution),
    config: &MixConfig,
    seed: u64,
) -> Result<(Tensor, LabelDistribution)> {
    config.validate()?;
    let (xa, pa) = batch_a;
    let (xb, pb) = batch_b;
    if xa.shape() != xb.shape() || pa.probs().shape() != pb.probs().shape() {
        return Err(Error::shape(
            "mix_examples",
            format!("{:?}/{:?} vs {:?}/{:?}", xa.shape(), pa.probs().shape(), xb.shape(), pb.probs().shape()),
        ));
    }
    if config.mode == MixMode::Off {
        return Ok((xa.clone(), pa.clone()));
    }
    let batch = xa.shape()[0];
    let beta = Beta::new(config.a, config.a)
        .map_err(|e| Error::invalid(format!("beta parameter rejected: {}", e)))?;
    let mut r = rng::derived_rng(seed, "mix");
    match config.mode {
        MixMode::Off => unreachable!(),
        MixMode::Mixup => {
            let lambdas: Vec<f64> = (0..batch).map(|_| beta.sample(&mut r)).collect();
            mix_with_lambda(xa, xb, pa, pb, &lambdas)
        }
        MixMode::VhMixup => {
            let mut lambdas = Vec::with_capacity(batch);
            let mut v_fracs = Vec::with_capacity(batch);
            let mut h_fracs = Vec::with_capacity(batch);
            for _ in 0..batch {
                lambdas.push(beta.sample(&mut r));
                v_fracs.push(r.gen_range(0.25..0.75));
                h_fracs.push(r.gen_range(0.25..0.75));
            }
            vh_mix_with_params(xa, xb, pa, pb, &lambdas, &v_fracs, &h_fracs)
        }
    }
}

/// Plain mixup with explicit per-example weights: `x = λ·x_a + (1−λ)·x_b`,
/// labels likewise. Exposed separately so endpoint cases are testable.
pub fn mix_with_lambda(
    xa: &Tensor,
    xb: &Tensor,
    pa: &LabelDistribution,
    pb: &LabelDistribution,
    lambdas: &[f64],
) -> Result<(Tensor, LabelDistribution)> {
    let batch = xa.shape()[0];
    if lambdas.len() != batch {
        return Err(Error::invalid(format!(
            "{} weights for batch of {}",
            lambdas.len(),
            batch
        )));
    }
    let per_example: usize = xa.shape()[1..].iter().product();
    let mut x = xa.clone();
    for (i, &l) in lambdas.iter().enumerate() {
        let span = i * per_example..(i + 1) * per_example;
        for (dst, &src) in x.data_mut()[span.clone()].iter_mut().zip(&xb.data()[span]) {
            *dst = l * *dst + (1.0 - l) * src;
        }
    }
    let probs = blend_rows(pa.probs(), pb.probs(), lambdas);
    Ok((x, LabelDistribution::from_probs(probs)?))
}

/// VH-mixup with explicit parameters: a vertical composite V (top rows from
/// a) and horizontal composite H (left columns from a) are built per pair,
/// then blended as `λ·V + (1−λ)·H`. The label weight of source a is the
/// effective fraction of its pixels in the blend.
pub fn vh_mix_with_params(
    xa: &Tensor,
    xb: &Tensor,
    pa: &LabelDistribution,
    pb: &LabelDistribution,
    lambdas: &[f64],
    v_fracs: &[f64],
    h_fracs: &[f64],
) -> Result<(Tensor, LabelDistribution)> {
    if xa.rank() != 4 {
        return Err(Error::shape(
            "vh_mixup",
            format!("(B,C,H,W) input required, got {:?}", xa.shape()),
        ));
    }
    let (batch, c, h, w) = (xa.shape()[0], xa.shape()[1], xa.shape()[2], xa.shape()[3]);
    if lambdas.len() != batch || v_fracs.len() != batch || h_fracs.len() != batch {
        return Err(Error::invalid("per-example parameter count mismatch"));
    }
    let mut x = Tensor::zeros(xa.shape());
    let mut weights = Vec::with_capacity(batch);
    let per_example = c * h * w;
    for i in 0..batch {
        let (l, vf, hf) = (lambdas[i], v_fracs[i], h_fracs[i]);
        // Split indices snap to whole rows/columns; the label weight uses the
        // realized pixel fractions, not the sampled real-valued ones.
        let v_rows = ((vf * h as f64).round() as usize).clamp(0, h);
        let h_cols = ((hf * w as f64).round() as usize).clamp(0, w);
        let base = i * per_example;
        for ci in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    let idx = base + (ci * h + y) * w + xx;
                    let v = if y < v_rows { xa.data()[idx] } else { xb.data()[idx] };
                    let hz = if xx < h_cols { xa.data()[idx] } else { xb.data()[idx] };
                    x.data_mut()[idx] = l * v + (1.0 - l) * hz;
                }
            }
        }
        let a_frac_v = v_rows as f64 / h as f64;
        let a_frac_h = h_cols as f64 / w as f64;
        weights.push(l * a_frac_v + (1.0 - l) * a_frac_h);
    }
    let probs = blend_rows(pa.probs(), pb.probs(), &weights);
    Ok((x, LabelDistribution::from_probs(probs)?))
}

fn blend_rows(pa: &Tensor, pb: &Tensor, weights: &[f64]) -> Tensor {
    let classes = pa.shape()[1];
    let mut probs = pa.clone();
    for (i, &wgt) in weights.iter().enumerate() {
        let span = i * classes..(i + 1) * classes;
        for (dst, &src) in probs.data_mut()[span.clone()].iter_mut().zip(&pb.data()[span]) {
            *dst = wgt * *dst + (1.0 - wgt) * src;
        }
    }
    probs
}

/// Standard image augmentation: zero-pad by `pad`, random crop back to the
/// original extent, optional horizontal flip with probability 1/2. Identity
/// when `pad == 0` and flipping is off. Shape and labels are unchanged.
pub fn standard_augment(batch: &Tensor, pad: usize, flip: bool, seed: u64) -> Result<Tensor> {
    if batch.rank() != 4 {
        return Err(Error::shape(
            "standard_augment",
            format!("(B,C,H,W) input required, got {:?}", batch.shape()),
        ));
    }
    let (b, c, h, w) = (batch.shape()[0], batch.shape()[1], batch.shape()[2], batch.shape()[3]);
    if pad >= h || pad >= w {
        return Err(Error::invalid(format!(
            "pad {} not below image extents {}x{}",
            pad, h, w
        )));
    }
    if pad == 0 && !flip {
        return Ok(batch.clone());
    }
    let mut r = rng::derived_rng(seed, "augment");
    let mut out = Tensor::zeros(batch.shape());
    for i in 0..b {
        // Crop offset into the padded image; (pad, pad) recovers the input.
        let (oy, ox) = if pad > 0 {
            (r.gen_range(0..=2 * pad), r.gen_range(0..=2 * pad))
        } else {
            (0, 0)
        };
        let do_flip = flip && r.gen_bool(0.5);
        for ci in 0..c {
            let plane = ((i * c) + ci) * h * w;
            for y in 0..h {
                for x in 0..w {
                    let src_x = if do_flip { w - 1 - x } else { x };
                    // Position in padded coordinates that lands on (y, x).
                    let (py, px) = (y + oy, src_x + ox);
                    let value = if py >= pad && py < h + pad && px >= pad && px < w + pad {
                        batch.data()[plane + (py - pad) * w + (px - pad)]
                    } else {
                        0.0
                    };
                    out.data_mut()[plane + y * w + x] = value;
                }
            }
        }
    }
    Ok(out)
}

/// One minibatch: examples plus hard labels and their dataset indices.
#[derive(Debug, Clone)]
pub struct Batch {
    pub examples: Tensor,
    pub labels: Vec<usize>,
    pub indices: Vec<usize>,
}

/// Deterministic minibatch sequence covering the dataset exactly once. With
/// `shuffle_seed` the visit order is a seeded permutation; without it,
/// dataset order. The final batch may be short.
pub fn batch_iter(
    dataset: &Dataset,
    batch_size: usize,
    shuffle_seed: Option<u64>,
) -> Result<Vec<Batch>> {
    if dataset.is_empty() {
        return Err(Error::Dataset("cannot iterate an empty dataset".into()));
    }
    if batch_size == 0 {
        return Err(Error::invalid("batch size must be at least 1"));
    }
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    if let Some(seed) = shuffle_seed {
        order.shuffle(&mut rng::rng_from_seed(seed));
    }
    let mut batches = Vec::with_capacity(dataset.len().div_ceil(batch_size));
    for chunk in order.chunks(batch_size) {
        batches.push(Batch {
            examples: dataset.examples().take_rows(chunk)?,
            labels: chunk.iter().map(|&i| dataset.labels()[i]).collect(),
            indices: chunk.to_vec(),
        });
    }
    Ok(batches)
}
