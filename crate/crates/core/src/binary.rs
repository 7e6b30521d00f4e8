//! Binary detector: a sigmoid head on the pretext backbone, trained with
//! cross-entropy plus an ℓ₂ penalty tying every stage to cached pretext features.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::augment::random_augment_with_floor;
use crate::backbone::{sigmoid, ForwardOptions, Head, HeadKind, PatchMode};
use crate::checkpoint::{Model, ModelKind};
use crate::dataset::{sample_indices, DatasetManifest, ImageStore, Label};
use crate::error::{invalid, Error, Result};
use crate::imaging::Image;
use crate::nn::adam::{Adam, AdamConfig};
use crate::nn::{Module, Real};
use crate::rng::{derive_seed, path_seed, seeded, sha256_hex};

/// Probability clamp for the classification loss.
pub const PROB_EPS: f64 = 1e-7;
pub const BINARY_HEAD: &str = "binary";
const CACHE_MAGIC: &[u8; 8] = b"SDAIEC\0\x01";

/// Stage features of every training image under the frozen pretext weights.
#[derive(Clone, Debug, PartialEq)]
pub struct ReferenceCache {
    pub model_digest: String,
    pub stage_dims: Vec<usize>,
    entries: BTreeMap<String, Vec<Vec<f32>>>,
}

/// All stage features of one image under `model`, patches seeded by its path.
pub fn reference_stages(model: &Model, path: &str, image: &Image) -> Result<Vec<Vec<f32>>> {
    let bb = &model.backbone;
    let batch = bb.batch(&[bb.patches(image, PatchMode::Train, path_seed(path))])?;
    let out = bb.forward(&batch, ForwardOptions { stages: true, tape: false })?;
    Ok(out.stages.expect("stages requested"))
}

impl ReferenceCache {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, path: &str) -> Option<&[Vec<f32>]> {
        self.entries.get(path).map(Vec::as_slice)
    }

    pub fn paths(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CACHE_MAGIC);
        let put_u32 = |o: &mut Vec<u8>, v: usize| o.extend_from_slice(&(v as u32).to_le_bytes());
        put_u32(&mut out, self.model_digest.len());
        out.extend_from_slice(self.model_digest.as_bytes());
        put_u32(&mut out, self.stage_dims.len());
        for &d in &self.stage_dims {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        put_u32(&mut out, self.entries.len());
        let per_entry: usize = self.stage_dims.iter().sum();
        for (i, path) in self.entries.keys().enumerate() {
            put_u32(&mut out, path.len());
            out.extend_from_slice(path.as_bytes());
            out.extend_from_slice(&((i * per_entry) as u64).to_le_bytes());
        }
        for stages in self.entries.values() {
            for v in stages.iter().flatten() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(format!("reference cache: {m}"));
        let mut pos = 0;
        let mut take = |n: usize| -> Result<&[u8]> {
            let end = pos + n;
            if end > bytes.len() {
                return Err(bad("truncated"));
            }
            let s = &bytes[pos..end];
            pos = end;
            Ok(s)
        };
        if take(8)? != CACHE_MAGIC {
            return Err(bad("bad magic"));
        }
        let u32_at = |s: &[u8]| u32::from_le_bytes(s.try_into().expect("4 bytes")) as usize;
        let u64_at = |s: &[u8]| u64::from_le_bytes(s.try_into().expect("8 bytes")) as usize;
        let n = u32_at(take(4)?);
        let model_digest = String::from_utf8(take(n)?.to_vec()).map_err(|_| bad("digest not UTF-8"))?;
        let n_stages = u32_at(take(4)?);
        let mut stage_dims = Vec::with_capacity(n_stages);
        for _ in 0..n_stages {
            stage_dims.push(u64_at(take(8)?));
        }
        let count = u32_at(take(4)?);
        let mut index = Vec::with_capacity(count);
        for _ in 0..count {
            let len = u32_at(take(4)?);
            let path = String::from_utf8(take(len)?.to_vec()).map_err(|_| bad("path not UTF-8"))?;
            let offset = u64_at(take(8)?);
            index.push((path, offset));
        }
        let per_entry: usize = stage_dims.iter().sum();
        let data = take(4 * per_entry * count)?;
        let floats: Vec<f32> = data
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let mut entries = BTreeMap::new();
        for (path, offset) in index {
            if offset + per_entry > floats.len() {
                return Err(bad("entry past payload"));
            }
            let mut stages = Vec::with_capacity(stage_dims.len());
            let mut at = offset;
            for &d in &stage_dims {
                stages.push(floats[at..at + d].to_vec());
                at += d;
            }
            if entries.insert(path, stages).is_some() {
                return Err(bad("duplicate path"));
            }
        }
        Ok(Self {
            model_digest,
            stage_dims,
            entries,
        })
    }

    pub fn digest(&self) -> String {
        sha256_hex(&self.to_bytes())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// One forward pass per manifest image under the frozen model.
pub fn cache_reference_features(manifest: &DatasetManifest, model: &Model, store: &dyn ImageStore) -> Result<ReferenceCache> {
    let mut entries = BTreeMap::new();
    for e in &manifest.entries {
        let img = store.load(&e.image_path)?;
        entries.insert(e.image_path.clone(), reference_stages(model, &e.image_path, &img)?);
    }
    Ok(ReferenceCache {
        model_digest: model.digest()?,
        stage_dims: model.backbone.config.stage_dims(),
        entries,
    })
}

/// `−y ln p − (1−y) ln(1−p)` with `p` clamped to `[ε, 1−ε]`; `y = 1` for photographs.
pub fn loss_cls(prob: f64, label: Label) -> f64 {
    let p = prob.clamp(PROB_EPS, 1.0 - PROB_EPS);
    let y = label.target();
    -y * p.ln() - (1.0 - y) * (1.0 - p).ln()
}

/// Mean over stages of `‖live − ref‖² / D_l`.
pub fn loss_reg<A: Real, B: Real>(live: &[Vec<A>], reference: &[Vec<B>]) -> Result<f64> {
    if live.len() != reference.len() || live.is_empty() {
        return Err(Error::Shape(format!("{} live stages vs {} cached", live.len(), reference.len())));
    }
    let mut total = 0.0;
    for (l, r) in live.iter().zip(reference) {
        if l.len() != r.len() {
            return Err(Error::Shape(format!("stage width {} vs {}", l.len(), r.len())));
        }
        let sq: f64 = l.iter().zip(r).map(|(a, b)| (a.f64() - b.f64()).powi(2)).sum();
        total += sq / l.len() as f64;
    }
    Ok(total / live.len() as f64)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BinaryLossReport {
    pub cls: f64,
    pub reg: f64,
    pub total: f64,
    pub accuracy: f64,
}

/// Loss terms of a group of images that is part of a batch of `batch_len`.
///
/// `stages` is the forward's per-stage output (`images × D_l` each, last stage
/// the final feature). Returned values are this group's share of the batch
/// means; gradients come back per stage, with the classification term folded
/// into the last one.
pub fn binary_objective<F: Real>(
    stages: &[Vec<F>],
    head: &mut Head<F>,
    references: &[&[Vec<f32>]],
    labels: &[Label],
    gamma: f64,
    batch_len: usize,
    backprop: bool,
) -> Result<(BinaryLossReport, Option<Vec<Vec<F>>>)> {
    let n = labels.len();
    if references.len() != n || stages.is_empty() {
        return Err(invalid("labels, references and stages disagree"));
    }
    let d = head.linear.d_in();
    let v = stages.last().expect("non-empty");
    if v.len() != n * d {
        return Err(Error::Shape(format!("final stage holds {} values for {n} images", v.len())));
    }
    let logits = head.linear.forward(v, n);
    let norm = 1.0 / batch_len as f64;
    let mut report = BinaryLossReport::default();
    let mut dz = vec![F::zero(); n];
    let mut d_stages: Option<Vec<Vec<F>>> = backprop.then(|| stages.iter().map(|s| vec![F::zero(); s.len()]).collect());
    let n_stages = stages.len() as f64;
    for i in 0..n {
        let z = logits[i].f64();
        let p = sigmoid(z);
        let y = labels[i].target();
        report.cls += loss_cls(p, labels[i]) * norm;
        report.accuracy += f64::from(u8::from((p >= 0.5) == (y == 1.0))) * norm;
        if (PROB_EPS..=1.0 - PROB_EPS).contains(&p) {
            dz[i] = F::of((p - y) * norm);
        }
        let refs = references[i];
        if refs.len() != stages.len() {
            return Err(Error::Shape(format!("{} cached stages for {} live", refs.len(), stages.len())));
        }
        let mut reg = 0.0;
        for (l, (s, r)) in stages.iter().zip(refs).enumerate() {
            let dl = r.len();
            if s.len() != n * dl {
                return Err(Error::Shape(format!("stage {l} width mismatch")));
            }
            let live = &s[i * dl..][..dl];
            let sq: f64 = live.iter().zip(r).map(|(a, b)| (a.f64() - f64::from(*b)).powi(2)).sum();
            reg += sq / dl as f64;
            if let Some(ds) = d_stages.as_mut() {
                let c = 2.0 * gamma * norm / (n_stages * dl as f64);
                for ((g, a), b) in ds[l][i * dl..][..dl].iter_mut().zip(live).zip(r) {
                    *g = F::of(c * (a.f64() - f64::from(*b)));
                }
            }
        }
        report.reg += reg / n_stages * norm;
    }
    report.total = report.cls + gamma * report.reg;
    if let Some(ds) = d_stages.as_mut() {
        let dv = head.linear.backward(v, &dz, n, true).expect("input gradient requested");
        for (g, x) in ds.last_mut().expect("non-empty").iter_mut().zip(dv) {
            *g = *g + x;
        }
    }
    Ok((report, d_stages))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BinaryConfig {
    pub iterations: u64,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub gamma: f64,
    pub seed: u64,
    /// Apply the seeded benign-perturbation augmentation to training inputs.
    pub augment: bool,
    /// Smallest side the augmentation may downsample to.
    pub augment_min_side: usize,
}

impl Default for BinaryConfig {
    fn default() -> Self {
        Self {
            iterations: 1800,
            batch_size: 100,
            adam: AdamConfig {
                lr: 1e-3,
                ..AdamConfig::default()
            },
            gamma: 0.05,
            seed: 0,
            augment: true,
            augment_min_side: crate::augment::MIN_SIDE,
        }
    }
}

pub struct BinaryRun {
    pub model: Model,
    pub log: Vec<(u64, BinaryLossReport)>,
}

pub fn write_binary_log_csv(log: &[(u64, BinaryLossReport)], out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["iteration", "cls", "reg", "total", "accuracy"])?;
    for (it, r) in log {
        w.write_record([it.to_string(), r.cls.to_string(), r.reg.to_string(), r.total.to_string(), r.accuracy.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// Starts from the pretext backbone with a fresh sigmoid head and trains on
/// label-balanced batches. Each image is forwarded on its own with its path
/// seed, which is how the cache was built.
pub fn train_binary(
    manifest: &DatasetManifest,
    store: &dyn ImageStore,
    pretext: &Model,
    cache: &ReferenceCache,
    config: &BinaryConfig,
) -> Result<BinaryRun> {
    if !(config.gamma >= 0.0) {
        return Err(invalid(format!("gamma {} must be >= 0", config.gamma)));
    }
    let by_label = |l: Label| -> Vec<usize> { (0..manifest.len()).filter(|&i| manifest.entries[i].label == l).collect() };
    let (photo, generated) = (by_label(Label::Photographic), by_label(Label::Generated));
    if photo.is_empty() || generated.is_empty() {
        return Err(invalid("binary training needs both photographic and generated images"));
    }
    if config.batch_size < 2 {
        return Err(invalid("batch size must be at least 2"));
    }
    if cache.stage_dims != pretext.backbone.config.stage_dims() {
        return Err(invalid("reference cache was built for a different architecture"));
    }
    for e in &manifest.entries {
        if cache.get(&e.image_path).is_none() {
            return Err(Error::MissingImage(e.image_path.clone().into()));
        }
    }
    let mut backbone = pretext.backbone.clone();
    let mut head = Head::<f32>::new(BINARY_HEAD, HeadKind::Probability, backbone.token_dim(), 1, &mut seeded(derive_seed(config.seed, &[0xb1])));
    let mut adam = Adam::new(config.adam);
    let mut log = Vec::with_capacity(config.iterations as usize);
    let half = config.batch_size / 2;
    for it in 0..config.iterations {
        let iter_seed = derive_seed(config.seed, &[0xb17, it]);
        let pick = |pool: &[usize], k: usize, salt: u64| -> Result<Vec<usize>> {
            if pool.len() >= k {
                Ok(sample_indices(pool.len(), k, derive_seed(iter_seed, &[salt]))?.into_iter().map(|j| pool[j]).collect())
            } else {
                let mut rng = seeded(derive_seed(iter_seed, &[salt]));
                use rand::Rng as _;
                Ok((0..k).map(|_| pool[rng.random_range(0..pool.len())]).collect())
            }
        };
        let mut idx = pick(&photo, half, 1)?;
        idx.extend(pick(&generated, config.batch_size - half, 2)?);
        backbone.zero_grad();
        head.zero_grad();
        let mut report = BinaryLossReport::default();
        for (slot, &i) in idx.iter().enumerate() {
            let entry = &manifest.entries[i];
            let mut img = store.load(&entry.image_path)?;
            if config.augment {
                img = random_augment_with_floor(&img, derive_seed(iter_seed, &[0xa0, slot as u64]), config.augment_min_side)?;
            }
            let batch = backbone.batch(&[backbone.patches(&img, PatchMode::Train, path_seed(&entry.image_path))])?;
            let fwd = backbone.forward(&batch, ForwardOptions { stages: true, tape: true })?;
            let stages = fwd.stages.expect("stages");
            let refs = cache.get(&entry.image_path).expect("checked above");
            let (r, grads) = binary_objective(&stages, &mut head, &[refs], &[entry.label], config.gamma, idx.len(), true)?;
            if !r.total.is_finite() {
                return Err(Error::NonFinite {
                    iteration: it,
                    message: format!("binary loss on {}: cls {} reg {}", entry.image_path, r.cls, r.reg),
                });
            }
            report.cls += r.cls;
            report.reg += r.reg;
            report.total += r.total;
            report.accuracy += r.accuracy;
            let grads = grads.expect("backprop");
            let zero_v = vec![0f32; backbone.token_dim()];
            backbone.backward(fwd.tape.expect("tape"), &zero_v, Some(&grads));
        }
        adam.step(&mut [&mut backbone, &mut head]);
        log.push((it + 1, report));
    }
    let parent_digest = Some(pretext.digest()?);
    Ok(BinaryRun {
        model: Model {
            kind: ModelKind::Binary,
            backbone,
            heads: vec![(BINARY_HEAD.to_string(), head)],
            tags: None,
            iteration: config.iterations,
            parent_digest,
        },
        log,
    })
}

/// Probability that `image` is a photograph; uses all non-overlapping patches.
pub fn predict_prob(model: &Model, image: &Image) -> Result<f64> {
    let head = model
        .head(BINARY_HEAD)
        .ok_or_else(|| invalid("model has no binary head"))?;
    let v = model.backbone.embed(image)?;
    Ok(f64::from(head.forward(&v)?[0]))
}
