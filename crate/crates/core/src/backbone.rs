//! Shared feature extractor: scrambled patches → high-pass residuals →
//! convolution blocks → covariance tokens → transformer → mean over tokens.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::filterbank::{FilterBank, BANK_SIZE};
use crate::imaging::Image;
use crate::nn::conv::{covariance_tokens, covariance_tokens_backward, triangle_len, ConvBlock, ConvCache, CovCache, FMap};
use crate::nn::transformer::{EncoderLayer, LayerCache, Linear};
use crate::nn::{Module, Param, Real};
use crate::rng::{derive_seed, seeded, Rng};
use rand::Rng as _;

/// Architecture constants.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ArchConfig {
    /// Patch side `S`; must be 8·2^k.
    pub patch_size: usize,
    /// Random crops per image in training mode (`N`).
    pub train_patches: usize,
    /// Channels `d` after the first block; the token width is `d(d+1)/2`.
    pub channels: usize,
    pub conv_blocks: usize,
    pub encoder_layers: usize,
    pub attention_heads: usize,
    pub ffn_width: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            patch_size: 64,
            train_patches: 16,
            channels: 32,
            conv_blocks: 11,
            encoder_layers: 2,
            attention_heads: 4,
            ffn_width: 1024,
        }
    }
}

impl ArchConfig {
    pub fn token_dim(&self) -> usize {
        triangle_len(self.channels)
    }

    /// Blocks that end with 2×2 pooling: enough to bring `S` down to 8.
    pub fn pool_blocks(&self) -> usize {
        (self.patch_size / 8).trailing_zeros() as usize
    }

    /// Spatial side after block `i` (0-based).
    pub fn side_after(&self, block: usize) -> usize {
        self.patch_size >> (block + 1).min(self.pool_blocks())
    }

    /// Number of feature stages: one per conv block plus the final feature.
    pub fn stage_count(&self) -> usize {
        self.conv_blocks + 1
    }

    /// Flattened dimension `D_l` of every stage.
    pub fn stage_dims(&self) -> Vec<usize> {
        let mut dims: Vec<usize> = (0..self.conv_blocks)
            .map(|b| self.channels * self.side_after(b).pow(2))
            .collect();
        dims.push(self.token_dim());
        dims
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.patch_size;
        if !s.is_multiple_of(8) || !(s / 8).is_power_of_two() {
            return Err(invalid(format!("patch size {s} must be 8 times a power of two")));
        }
        if self.pool_blocks() > self.conv_blocks {
            return Err(invalid(format!(
                "{} conv blocks cannot pool a {s}-pixel patch down to 8",
                self.conv_blocks
            )));
        }
        if self.channels < 2 || self.train_patches < 1 || self.conv_blocks < 1 {
            return Err(invalid("channels, patches and conv blocks must be positive"));
        }
        if self.attention_heads == 0 || !self.token_dim().is_multiple_of(self.attention_heads) {
            return Err(invalid(format!(
                "token width {} does not split into {} heads",
                self.token_dim(),
                self.attention_heads
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PatchMode {
    /// `N` random crops, possibly overlapping.
    Train,
    /// Every non-overlapping tile in raster order.
    Infer,
}

/// Cuts `size`×`size` patches; images smaller than `size` are mirror-padded first.
pub fn extract_patches(image: &Image, mode: PatchMode, size: usize, count: usize, seed: u64) -> Vec<Image> {
    let img = image.pad_to(size);
    match mode {
        PatchMode::Train => {
            let mut rng = seeded(seed);
            (0..count)
                .map(|_| {
                    let top = rng.random_range(0..=img.height() - size);
                    let left = rng.random_range(0..=img.width() - size);
                    img.crop(top, left, size)
                })
                .collect()
        }
        PatchMode::Infer => {
            let mut out = Vec::new();
            for ty in 0..img.height() / size {
                for tx in 0..img.width() / size {
                    out.push(img.crop(ty * size, tx * size, size));
                }
            }
            out
        }
    }
}

/// Residual stacks of the patches of several images.
#[derive(Clone, Debug)]
pub struct PatchBatch<F> {
    pub counts: Vec<usize>,
    pub residuals: FMap<F>,
}

impl<F: Real> PatchBatch<F> {
    pub fn new(bank: &FilterBank, per_image: &[Vec<Image>]) -> Result<Self> {
        let counts: Vec<usize> = per_image.iter().map(Vec::len).collect();
        if counts.contains(&0) {
            return Err(invalid("every image needs at least one patch"));
        }
        let total: usize = counts.iter().sum();
        let size = per_image[0][0].height();
        let mut residuals = FMap::zeros(bank.len(), total, size, size);
        let mut buf = vec![0f32; bank.len() * size * size];
        for (p, patch) in per_image.iter().flatten().enumerate() {
            if patch.height() != size || patch.width() != size {
                return Err(Error::Shape(format!("patch {}x{} in a batch of {size}", patch.height(), patch.width())));
            }
            let stack = bank.apply(patch)?;
            buf.copy_from_slice(&stack.data);
            for k in 0..bank.len() {
                let dst = residuals.plane_mut(k, p);
                for (d, &s) in dst.iter_mut().zip(&buf[k * size * size..][..size * size]) {
                    *d = F::of(f64::from(s));
                }
            }
        }
        Ok(Self { counts, residuals })
    }

    pub fn images(&self) -> usize {
        self.counts.len()
    }

    /// `(first row, count)` of each image's patches.
    pub fn segments(&self) -> Vec<(usize, usize)> {
        let mut start = 0;
        self.counts
            .iter()
            .map(|&n| {
                let s = (start, n);
                start += n;
                s
            })
            .collect()
    }
}

pub struct Tape<F> {
    counts: Vec<usize>,
    conv: Vec<ConvCache<F>>,
    last_shape: (usize, usize, usize, usize),
    cov: CovCache<F>,
    encoder: Vec<LayerCache<F>>,
}

pub struct Forward<F> {
    /// `images × token_dim`, row-major.
    pub features: Vec<F>,
    /// Per stage, `images × D_l`; the last stage repeats `features`.
    pub stages: Option<Vec<Vec<F>>>,
    pub tape: Option<Tape<F>>,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct ForwardOptions {
    pub stages: bool,
    pub tape: bool,
}

#[derive(Clone, Debug)]
pub struct Backbone<F> {
    pub config: ArchConfig,
    bank: FilterBank,
    pub blocks: Vec<ConvBlock<F>>,
    pub encoder: Vec<EncoderLayer<F>>,
}

impl<F: Real> Backbone<F> {
    pub fn new(config: ArchConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seeded(derive_seed(seed, &[0xbac_b0e]));
        let pools = config.pool_blocks();
        let blocks = (0..config.conv_blocks)
            .map(|i| {
                let cin = if i == 0 { BANK_SIZE } else { config.channels };
                ConvBlock::new(&format!("conv.{i}"), cin, config.channels, i < pools, &mut rng)
            })
            .collect();
        let encoder = (0..config.encoder_layers)
            .map(|l| {
                EncoderLayer::new(
                    &format!("encoder.{l}"),
                    config.token_dim(),
                    config.attention_heads,
                    config.ffn_width,
                    &mut rng,
                )
            })
            .collect();
        Ok(Self {
            config,
            bank: FilterBank::default(),
            blocks,
            encoder,
        })
    }

    pub fn bank(&self) -> &FilterBank {
        &self.bank
    }

    pub fn token_dim(&self) -> usize {
        self.config.token_dim()
    }

    pub fn patches(&self, image: &Image, mode: PatchMode, seed: u64) -> Vec<Image> {
        extract_patches(image, mode, self.config.patch_size, self.config.train_patches, seed)
    }

    pub fn batch(&self, per_image: &[Vec<Image>]) -> Result<PatchBatch<F>> {
        PatchBatch::new(&self.bank, per_image)
    }

    /// Runs the conv stack on a batch of residual stacks.
    pub fn conv_encode(&self, residuals: &FMap<F>) -> Result<FMap<F>> {
        let s = self.config.patch_size;
        if residuals.c != BANK_SIZE || residuals.h != s || residuals.w != s {
            return Err(Error::Shape(format!(
                "expected {BANK_SIZE}x{s}x{s} residuals, got {}x{}x{}",
                residuals.c, residuals.h, residuals.w
            )));
        }
        let mut x = residuals.clone();
        for block in &self.blocks {
            x = block.forward(&x)?.0;
        }
        Ok(x)
    }

    /// Encodes one token set; rows are tokens of width `token_dim`.
    pub fn transformer_aggregate(&self, tokens: &[F]) -> Result<Vec<F>> {
        let d = self.token_dim();
        if tokens.is_empty() || !tokens.len().is_multiple_of(d) {
            return Err(invalid(format!("token buffer of {} values is not a non-empty set of {d}-vectors", tokens.len())));
        }
        let n = tokens.len() / d;
        let mut x = tokens.to_vec();
        for layer in &self.encoder {
            x = layer.forward(&x, &[(0, n)]).0;
        }
        Ok(mean_rows(&x, &[(0, n)], d))
    }

    pub fn forward(&self, batch: &PatchBatch<F>, opts: ForwardOptions) -> Result<Forward<F>> {
        let cfg = &self.config;
        let s = cfg.patch_size;
        if batch.residuals.h != s || batch.residuals.w != s {
            return Err(Error::Shape(format!("patches of side {} for a side-{s} backbone", batch.residuals.h)));
        }
        let segments = batch.segments();
        let b = batch.images();
        let mut conv_caches = Vec::new();
        let mut stages: Vec<Vec<F>> = Vec::new();
        let mut x: Option<FMap<F>> = None;
        for block in &self.blocks {
            let input = x.as_ref().unwrap_or(&batch.residuals);
            let (out, cache) = block.forward(input)?;
            if opts.stages {
                stages.push(patch_means(&out, &segments));
            }
            if opts.tape {
                conv_caches.push(cache);
            }
            x = Some(out);
        }
        let last = x.expect("at least one conv block");
        let last_shape = (last.c, last.p, last.h, last.w);
        let (tokens, cov) = covariance_tokens(&last)?;
        drop(last);
        let d = self.token_dim();
        let mut h = tokens;
        let mut enc_caches = Vec::new();
        for layer in &self.encoder {
            let (y, cache) = layer.forward(&h, &segments);
            if opts.tape {
                enc_caches.push(cache);
            }
            h = y;
        }
        let features = mean_rows(&h, &segments, d);
        debug_assert_eq!(features.len(), b * d);
        if opts.stages {
            stages.push(features.clone());
        }
        Ok(Forward {
            features,
            stages: opts.stages.then_some(stages),
            tape: opts.tape.then(|| Tape {
                counts: batch.counts.clone(),
                conv: conv_caches,
                last_shape,
                cov,
                encoder: enc_caches,
            }),
        })
    }

    /// Backpropagates gradients of the final features and, optionally, of
    /// every stage, accumulating into the parameters.
    pub fn backward(&mut self, tape: Tape<F>, d_features: &[F], d_stages: Option<&[Vec<F>]>) {
        let d = self.token_dim();
        let mut counts_start = Vec::with_capacity(tape.counts.len());
        let mut start = 0;
        for &n in &tape.counts {
            counts_start.push((start, n));
            start += n;
        }
        let segments = counts_start;
        let rows = start;

        let mut dv = d_features.to_vec();
        if let Some(ds) = d_stages {
            for (a, &g) in dv.iter_mut().zip(&ds[self.blocks.len()]) {
                *a = *a + g;
            }
        }
        let mut dh = vec![F::zero(); rows * d];
        for (i, &(s, n)) in segments.iter().enumerate() {
            let inv = F::one() / F::of(n as f64);
            for r in s..s + n {
                for c in 0..d {
                    dh[r * d + c] = dv[i * d + c] * inv;
                }
            }
        }
        for (layer, cache) in self.encoder.iter_mut().zip(tape.encoder).rev() {
            dh = layer.backward(cache, &dh, &segments);
        }
        let (c, p, hh, ww) = tape.last_shape;
        let mut dx = covariance_tokens_backward(&tape.cov, &dh, p, hh, ww);
        debug_assert_eq!(dx.c, c);
        let n_blocks = self.blocks.len();
        for (i, (block, cache)) in self.blocks.iter_mut().zip(tape.conv).enumerate().rev() {
            if let Some(ds) = d_stages {
                add_patch_means_grad(&mut dx, &segments, &ds[i]);
            }
            match block.backward(cache, &dx, i > 0) {
                Some(next) => dx = next,
                None => debug_assert_eq!(i, 0),
            }
        }
        debug_assert!(n_blocks > 0);
    }

    pub fn cast<G: Real>(&self) -> Backbone<G> {
        let cast_block = |b: &ConvBlock<F>| ConvBlock {
            in_ch: b.in_ch,
            out_ch: b.out_ch,
            pool: b.pool,
            weight: b.weight.cast(),
            bias: b.bias.cast(),
            gain: b.gain.cast(),
            shift: b.shift.cast(),
        };
        let mut out = Backbone::<G> {
            config: self.config,
            bank: self.bank.clone(),
            blocks: self.blocks.iter().map(cast_block).collect(),
            encoder: Vec::new(),
        };
        let mut rng = seeded(0);
        for layer in &self.encoder {
            let mut l = EncoderLayer::<G>::new("tmp", self.token_dim(), layer.heads, self.config.ffn_width, &mut rng);
            let mut src = Vec::new();
            layer.visit(&mut |p| src.push(p.cast::<G>()));
            let mut it = src.into_iter();
            l.visit_mut(&mut |p| *p = it.next().expect("same layout"));
            out.encoder.push(l);
        }
        out
    }
}

impl<F: Real> Module<F> for Backbone<F> {
    fn visit(&self, f: &mut dyn FnMut(&Param<F>)) {
        for b in &self.blocks {
            b.visit(f);
        }
        for l in &self.encoder {
            l.visit(f);
        }
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<F>)) {
        for b in &mut self.blocks {
            b.visit_mut(f);
        }
        for l in &mut self.encoder {
            l.visit_mut(f);
        }
    }
}

fn mean_rows<F: Real>(x: &[F], segments: &[(usize, usize)], d: usize) -> Vec<F> {
    let mut out = vec![F::zero(); segments.len() * d];
    for (i, &(s, n)) in segments.iter().enumerate() {
        let dst = &mut out[i * d..][..d];
        for r in s..s + n {
            for (a, &v) in dst.iter_mut().zip(&x[r * d..][..d]) {
                *a = *a + v;
            }
        }
        let inv = F::one() / F::of(n as f64);
        for a in dst.iter_mut() {
            *a = *a * inv;
        }
    }
    out
}

/// Per image, the mean over its patches of a `[c][p][h][w]` map, flattened `[c][h][w]`.
fn patch_means<F: Real>(x: &FMap<F>, segments: &[(usize, usize)]) -> Vec<F> {
    let hw = x.hw();
    let dim = x.c * hw;
    let mut out = vec![F::zero(); segments.len() * dim];
    for (i, &(s, n)) in segments.iter().enumerate() {
        let inv = F::one() / F::of(n as f64);
        for c in 0..x.c {
            let dst = &mut out[i * dim + c * hw..][..hw];
            for p in s..s + n {
                for (a, &v) in dst.iter_mut().zip(x.plane(c, p)) {
                    *a = *a + v;
                }
            }
            for a in dst.iter_mut() {
                *a = *a * inv;
            }
        }
    }
    out
}

fn add_patch_means_grad<F: Real>(dx: &mut FMap<F>, segments: &[(usize, usize)], d_stage: &[F]) {
    let hw = dx.hw();
    let dim = dx.c * hw;
    for (i, &(s, n)) in segments.iter().enumerate() {
        let inv = F::one() / F::of(n as f64);
        for c in 0..dx.c {
            let g = &d_stage[i * dim + c * hw..][..hw];
            for p in s..s + n {
                for (a, &v) in dx.plane_mut(c, p).iter_mut().zip(g) {
                    *a = *a + v * inv;
                }
            }
        }
    }
}

/// Features of a single image.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSet {
    pub v: Vec<f32>,
    /// All stages, the last being `v`.
    pub stages: Vec<Vec<f32>>,
}

impl Backbone<f32> {
    /// Features of one image with the given patch mode and seed.
    pub fn forward_features(&self, image: &Image, mode: PatchMode, seed: u64) -> Result<FeatureSet> {
        let batch = self.batch(&[self.patches(image, mode, seed)])?;
        let out = self.forward(&batch, ForwardOptions { stages: true, tape: false })?;
        let stages = out.stages.expect("stages requested");
        Ok(FeatureSet { v: out.features, stages })
    }

    /// Final features only, in inference mode.
    pub fn embed(&self, image: &Image) -> Result<Vec<f32>> {
        let batch = self.batch(&[self.patches(image, PatchMode::Infer, 0)])?;
        Ok(self.forward(&batch, ForwardOptions::default())?.features)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    /// Class logits of a categorical tag.
    Logits,
    /// Scalar ranking score of a numeric tag.
    Score,
    /// Sigmoid probability of the binary detector.
    Probability,
}

/// A fully connected prediction head on the final feature.
#[derive(Clone, Debug)]
pub struct Head<F> {
    pub kind: HeadKind,
    pub linear: Linear<F>,
}

impl<F: Real> Head<F> {
    pub fn new(name: &str, kind: HeadKind, d_in: usize, d_out: usize, rng: &mut Rng) -> Self {
        Self {
            kind,
            linear: Linear::new(&format!("head.{name}"), d_in, d_out, 0.01, rng),
        }
    }

    pub fn outputs(&self) -> usize {
        self.linear.d_out()
    }

    /// Affine map of each row of `v`; the probability head adds a sigmoid.
    pub fn forward(&self, v: &[F]) -> Result<Vec<F>> {
        let d = self.linear.d_in();
        if v.is_empty() || !v.len().is_multiple_of(d) {
            return Err(Error::Shape(format!("head expects {d}-dim features, got {} values", v.len())));
        }
        let mut y = self.linear.forward(v, v.len() / d);
        if self.kind == HeadKind::Probability {
            for z in &mut y {
                *z = sigmoid(*z);
            }
        }
        Ok(y)
    }
}

impl<F: Real> Module<F> for Head<F> {
    fn visit(&self, f: &mut dyn FnMut(&Param<F>)) {
        self.linear.visit(f)
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<F>)) {
        self.linear.visit_mut(f)
    }
}

pub fn sigmoid<F: Real>(z: F) -> F {
    if z >= F::zero() {
        F::one() / (F::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (F::one() + e)
    }
}
