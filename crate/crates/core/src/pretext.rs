//! EXIF pretext objective: tag classification plus pairwise Thurstone ranking.

use std::f64::consts::{PI, SQRT_2};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::{ArchConfig, Backbone, ForwardOptions, Head, HeadKind, PatchMode};
use crate::checkpoint::{Model, ModelKind};
use crate::dataset::{enumerate_pairs, filter_complete, sample_indices, DatasetManifest, ImageStore};
use crate::error::{invalid, Error, Result};
use crate::exif::{encode_categorical, rank_label, ExifRecord, Tag, TagKind, TagSchema, DEFAULT_TOP_C};
use crate::imaging::Image;
use crate::nn::adam::{Adam, AdamConfig};
use crate::nn::{Module, Real};
use crate::rng::{derive_seed, seeded};

/// Probability clamp for the ranking loss.
pub const RANK_EPS: f64 = 1e-7;

/// `−log softmax(logits)[true_class]`.
pub fn loss_categorical(logits: &[f64], true_class: usize) -> Result<f64> {
    Ok(categorical_with_grad(logits, true_class)?.0)
}

/// The loss and its gradient with respect to the logits.
pub fn categorical_with_grad(logits: &[f64], true_class: usize) -> Result<(f64, Vec<f64>)> {
    if true_class >= logits.len() {
        return Err(Error::ClassIndex {
            index: true_class,
            len: logits.len(),
        });
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|&z| (z - max).exp()).sum();
    let log_z = max + sum.ln();
    let mut grad: Vec<f64> = logits.iter().map(|&z| (z - log_z).exp()).collect();
    grad[true_class] -= 1.0;
    Ok((log_z - logits[true_class], grad))
}

/// Standard normal CDF.
pub fn phi(z: f64) -> f64 {
    0.5 * libm::erfc(-z / SQRT_2)
}

fn normal_density(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * PI).sqrt()
}

/// Probability that `x` outranks `y` under unit-variance comparative judgement:
/// `Φ((s_x − s_y)/√2)`.
pub fn rank_probability(score_x: f64, score_y: f64) -> f64 {
    phi((score_x - score_y) / SQRT_2)
}

/// Binary cross-entropy between the rank label and [`rank_probability`].
pub fn loss_rank(score_x: f64, score_y: f64, label: u8) -> f64 {
    rank_with_grad(score_x - score_y, label).0
}

/// Loss and derivative with respect to `Δ = s_x − s_y`. Zero gradient where the clamp binds.
pub fn rank_with_grad(delta: f64, label: u8) -> (f64, f64) {
    let z = delta / SQRT_2;
    // each side computed directly so the small tail keeps its precision
    let (p, dp) = if label == 1 {
        (phi(z), normal_density(z) / SQRT_2)
    } else {
        (phi(-z), -normal_density(z) / SQRT_2)
    };
    if p < RANK_EPS {
        (-RANK_EPS.ln(), 0.0)
    } else if p > 1.0 - RANK_EPS {
        (-(1.0 - RANK_EPS).ln(), 0.0)
    } else {
        (-p.ln(), -dp / p)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TagLoss {
    pub tag: String,
    pub weight: f64,
    pub loss: f64,
    /// Top-1 accuracy for categorical tags, correctly ordered pairs for numeric ones.
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretextLossReport {
    pub tags: Vec<TagLoss>,
    pub total: f64,
}

/// One prediction head per tag, in [`Tag::ALL`] order.
pub fn build_heads<F: Real>(schema: &TagSchema, d: usize, seed: u64) -> Vec<Head<F>> {
    let mut rng = seeded(derive_seed(seed, &[0x4ead]));
    Tag::ALL
        .into_iter()
        .map(|tag| {
            let kind = match tag.kind() {
                TagKind::Categorical => HeadKind::Logits,
                _ => HeadKind::Score,
            };
            Head::new(tag.name(), kind, d, schema.output_dim(tag), &mut rng)
        })
        .collect()
}

/// Evaluates the weighted pretext loss on precomputed features `v` (`B × d`).
///
/// With `backprop`, head gradients are accumulated and `dL/dv` is returned.
pub fn pretext_objective<F: Real>(
    v: &[F],
    heads: &mut [Head<F>],
    records: &[&ExifRecord],
    schema: &TagSchema,
    backprop: bool,
) -> Result<(PretextLossReport, Option<Vec<F>>)> {
    let b = records.len();
    if b < 2 {
        return Err(invalid("the pretext loss needs at least two images"));
    }
    if heads.len() != Tag::COUNT {
        return Err(invalid(format!("expected {} heads, got {}", Tag::COUNT, heads.len())));
    }
    let d = heads[0].linear.d_in();
    if v.len() != b * d {
        return Err(Error::Shape(format!("{} feature values for {b} images of width {d}", v.len())));
    }
    let pairs = enumerate_pairs(b)?;
    let mut dv = backprop.then(|| vec![F::zero(); b * d]);
    let mut tags = Vec::with_capacity(Tag::COUNT);
    let mut total = 0.0;
    for (tag, head) in Tag::ALL.into_iter().zip(heads.iter_mut()) {
        let weight = schema.weight(tag);
        let out: Vec<f64> = head.forward(v)?.into_iter().map(Real::f64).collect();
        let c = head.outputs();
        let mut dy = vec![0.0; out.len()];
        let (loss, accuracy) = if tag.kind() == TagKind::Categorical {
            let (mut loss, mut hits) = (0.0, 0);
            for (i, rec) in records.iter().enumerate() {
                let class = encode_categorical(rec, tag, schema)?;
                let logits = &out[i * c..][..c];
                let (l, g) = categorical_with_grad(logits, class)?;
                loss += l;
                let argmax = (0..c).fold(0, |a, j| if logits[j] > logits[a] { j } else { a });
                hits += usize::from(argmax == class);
                for (t, gj) in dy[i * c..][..c].iter_mut().zip(g) {
                    *t = weight * gj / b as f64;
                }
            }
            (loss / b as f64, hits as f64 / b as f64)
        } else {
            let (mut loss, mut hits) = (0.0, 0);
            let m = pairs.len() as f64;
            for &(i, j) in &pairs {
                let label = rank_label(records[i], records[j], tag)?;
                let (l, g) = rank_with_grad(out[i] - out[j], label);
                loss += l;
                hits += usize::from((out[i] >= out[j]) == (label == 1));
                dy[i] += weight * g / m;
                dy[j] -= weight * g / m;
            }
            (loss / m, hits as f64 / m)
        };
        total += weight * loss;
        tags.push(TagLoss {
            tag: tag.name().to_string(),
            weight,
            loss,
            accuracy,
        });
        if let Some(dv) = dv.as_mut() {
            if weight != 0.0 {
                let dy: Vec<F> = dy.into_iter().map(F::of).collect();
                let dx = head.linear.backward(v, &dy, b, true).expect("input gradient requested");
                for (a, g) in dv.iter_mut().zip(dx) {
                    *a = *a + g;
                }
            }
        }
    }
    Ok((PretextLossReport { tags, total }, dv))
}

/// Full pretext loss of a minibatch of images: features are recomputed from pixels.
pub fn total_pretext_loss(
    backbone: &Backbone<f32>,
    heads: &mut [Head<f32>],
    images: &[Image],
    records: &[&ExifRecord],
    schema: &TagSchema,
    seed: u64,
) -> Result<PretextLossReport> {
    let per: Vec<Vec<Image>> = images
        .iter()
        .enumerate()
        .map(|(i, img)| backbone.patches(img, PatchMode::Train, derive_seed(seed, &[i as u64])))
        .collect();
    let batch = backbone.batch(&per)?;
    let v = backbone.forward(&batch, ForwardOptions::default())?.features;
    Ok(pretext_objective(&v, heads, records, schema, false)?.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretextConfig {
    pub arch: ArchConfig,
    pub iterations: u64,
    pub batch_size: usize,
    /// Images per forward/backward chunk; bounds activation memory.
    pub micro_batch: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    /// Most frequent values kept per categorical tag.
    pub top_c: usize,
    /// Per-tag loss weights by tag name; unlisted tags weigh 1.
    pub tag_weights: std::collections::BTreeMap<String, f64>,
    /// Fraction of the run between snapshots.
    pub checkpoint_fraction: f64,
}

impl Default for PretextConfig {
    fn default() -> Self {
        Self {
            arch: ArchConfig::default(),
            iterations: 30_000,
            batch_size: 64,
            micro_batch: 8,
            adam: AdamConfig::default(),
            seed: 0,
            top_c: DEFAULT_TOP_C,
            tag_weights: Default::default(),
            checkpoint_fraction: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub iteration: u64,
    pub report: PretextLossReport,
}

pub struct PretextRun {
    pub model: Model,
    pub log: Vec<LogRow>,
    /// Snapshot directories written, in order.
    pub snapshots: Vec<PathBuf>,
}

/// Writes the training log: iteration, per-tag loss, per-tag accuracy, total.
pub fn write_log_csv(log: &[LogRow], out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["iteration".to_string()];
    header.extend(Tag::ALL.iter().map(|t| format!("loss_{}", t.name())));
    header.extend(Tag::ALL.iter().map(|t| format!("acc_{}", t.name())));
    header.push("total".into());
    w.write_record(&header)?;
    for row in log {
        let mut rec = vec![row.iteration.to_string()];
        rec.extend(row.report.tags.iter().map(|t| t.loss.to_string()));
        rec.extend(row.report.tags.iter().map(|t| t.accuracy.to_string()));
        rec.push(row.report.total.to_string());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Trains backbone and heads on the complete-EXIF photographs of `manifest`.
///
/// With `snapshot_dir`, a checkpoint and the log so far are written every
/// `checkpoint_fraction` of the run.
pub fn train_pretext(
    manifest: &DatasetManifest,
    store: &dyn ImageStore,
    config: &PretextConfig,
    snapshot_dir: Option<&Path>,
) -> Result<PretextRun> {
    let data = filter_complete(manifest);
    if data.len() < config.batch_size || config.batch_size < 2 {
        return Err(invalid(format!(
            "{} complete images for a batch of {}",
            data.len(),
            config.batch_size
        )));
    }
    if config.micro_batch == 0 {
        return Err(invalid("micro_batch must be positive"));
    }
    let records: Vec<ExifRecord> = data.entries.iter().map(|e| e.exif.clone().expect("complete")).collect();
    let mut schema = TagSchema::build(&records, config.top_c)?;
    for (name, &w) in &config.tag_weights {
        let tag = Tag::from_key(name).ok_or_else(|| invalid(format!("unknown tag `{name}` in tag_weights")))?;
        schema.set_weight(tag, w)?;
    }
    let mut backbone = Backbone::<f32>::new(config.arch, config.seed)?;
    let mut heads = build_heads::<f32>(&schema, backbone.token_dim(), config.seed);
    let mut adam = Adam::new(config.adam);
    let mut log = Vec::new();
    let mut snapshots = Vec::new();
    let every = ((config.iterations as f64 * config.checkpoint_fraction).round() as u64).max(1);

    for it in 0..config.iterations {
        let iter_seed = derive_seed(config.seed, &[0x17e7, it]);
        let idx = sample_indices(data.len(), config.batch_size, iter_seed)?;
        let recs: Vec<&ExifRecord> = idx.iter().map(|&i| &records[i]).collect();
        let mut per = Vec::with_capacity(idx.len());
        for (slot, &i) in idx.iter().enumerate() {
            let img = store.load(&data.entries[i].image_path)?;
            per.push(backbone.patches(&img, PatchMode::Train, derive_seed(iter_seed, &[slot as u64])));
        }
        backbone.zero_grad();
        for h in &mut heads {
            h.zero_grad();
        }
        let report = if per.len() <= config.micro_batch {
            let batch = backbone.batch(&per)?;
            let fwd = backbone.forward(&batch, ForwardOptions { stages: false, tape: true })?;
            let (report, dv) = pretext_objective(&fwd.features, &mut heads, &recs, &schema, true)?;
            check_finite(it, &report)?;
            backbone.backward(fwd.tape.expect("tape"), &dv.expect("grad"), None);
            report
        } else {
            let mut v = Vec::with_capacity(per.len() * backbone.token_dim());
            for chunk in per.chunks(config.micro_batch) {
                let batch = backbone.batch(chunk)?;
                v.extend(backbone.forward(&batch, ForwardOptions::default())?.features);
            }
            let (report, dv) = pretext_objective(&v, &mut heads, &recs, &schema, true)?;
            check_finite(it, &report)?;
            let dv = dv.expect("grad");
            let d = backbone.token_dim();
            for (k, chunk) in per.chunks(config.micro_batch).enumerate() {
                let batch = backbone.batch(chunk)?;
                let fwd = backbone.forward(&batch, ForwardOptions { stages: false, tape: true })?;
                let start = k * config.micro_batch * d;
                backbone.backward(fwd.tape.expect("tape"), &dv[start..start + chunk.len() * d], None);
            }
            report
        };
        {
            let mut mods: Vec<&mut dyn Module<f32>> = vec![&mut backbone];
            mods.extend(heads.iter_mut().map(|h| h as &mut dyn Module<f32>));
            adam.step(&mut mods);
        }
        log.push(LogRow { iteration: it + 1, report });

        let done = it + 1;
        if let Some(dir) = snapshot_dir {
            if done % every == 0 && done < config.iterations {
                let model = assemble(&backbone, &heads, &schema, done);
                let path = dir.join(format!("iter-{done:06}"));
                model.save(&path)?;
                write_log_csv(&log, std::fs::File::create(dir.join("train_log.csv"))?)?;
                snapshots.push(path);
            }
        }
    }
    let model = assemble(&backbone, &heads, &schema, config.iterations);
    if let Some(dir) = snapshot_dir {
        std::fs::create_dir_all(dir)?;
        write_log_csv(&log, std::fs::File::create(dir.join("train_log.csv"))?)?;
    }
    Ok(PretextRun { model, log, snapshots })
}

fn check_finite(iteration: u64, report: &PretextLossReport) -> Result<()> {
    if report.total.is_finite() {
        return Ok(());
    }
    let bad: Vec<&str> = report
        .tags
        .iter()
        .filter(|t| !t.loss.is_finite())
        .map(|t| t.tag.as_str())
        .collect();
    Err(Error::NonFinite {
        iteration,
        message: format!("pretext loss {} (tags: {})", report.total, bad.join(", ")),
    })
}

fn assemble(backbone: &Backbone<f32>, heads: &[Head<f32>], schema: &TagSchema, iteration: u64) -> Model {
    Model {
        kind: ModelKind::Pretext,
        backbone: backbone.clone(),
        heads: Tag::ALL.iter().map(|t| t.name().to_string()).zip(heads.iter().cloned()).collect(),
        tags: Some(schema.clone()),
        iteration,
        parent_digest: None,
    }
}
